#include "twophase/datamodel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "twophase/error.hpp"

namespace twophase {

namespace {

bool is_binary(int v) { return v == 0 || v == 1; }

std::string join_ids(const std::vector<std::string>& ids) {
    std::string out;
    for (const auto& id : ids) {
        if (!out.empty()) out += ",";
        out += id;
    }
    return out;
}

int sum_of(const std::vector<int>& v) { return std::accumulate(v.begin(), v.end(), 0); }

void add_into(std::vector<int>& into, std::size_t wave_index, int count) {
    if (into.size() <= wave_index) into.resize(wave_index + 1, 0);
    into[wave_index] += count;
}

}  // namespace

void check_record(const DyadRecord& r) {
    auto bad = [&](const std::string& what) {
        fail(ErrorKind::schema, "record " + r.id + ": " + what);
    };
    if (r.id.empty()) fail(ErrorKind::schema, "record with empty id");
    if (!(r.y_star > 0.0) || !std::isfinite(r.y_star)) bad("y_star must be positive");
    if (!is_binary(r.delta_star)) bad("delta_star must be 0 or 1");
    if (!is_binary(r.asthma_star)) bad("asthma_star must be 0 or 1");
    if (!std::isfinite(r.x_star)) bad("x_star must be finite");

    const bool any_phase2 = r.y || r.delta || r.x || r.z;
    const bool all_phase2 = r.y && r.delta && r.x && r.z;
    if (r.validated != all_phase2 || r.validated != r.wave_sampled.has_value() ||
        (any_phase2 && !all_phase2)) {
        bad("validated flag, wave_sampled and phase-2 fields must be all present or all absent");
    }
    if (r.validated) {
        if (!(*r.y > 0.0)) bad("y must be positive");
        if (!is_binary(*r.delta)) bad("delta must be 0 or 1");
        if (r.z->size() != r.z_star.size()) bad("z and z_star differ in length");
    }
    if (r.asthma && !is_binary(*r.asthma)) bad("asthma must be 0 or 1");
    if (r.gestation_days && !(*r.gestation_days > 0.0)) bad("gestation_days must be positive");
}

std::string_view to_string(Axis axis) {
    switch (axis) {
        case Axis::delta_star: return "delta_star";
        case Axis::y_star: return "y_star";
        case Axis::x_star: return "x_star";
        case Axis::gain_star: return "gain_star";
        case Axis::asthma_star: return "asthma_star";
    }
    return "?";
}

Axis axis_from_string(std::string_view name) {
    for (Axis a : {Axis::delta_star, Axis::y_star, Axis::x_star, Axis::gain_star, Axis::asthma_star}) {
        if (to_string(a) == name) return a;
    }
    fail(ErrorKind::parse, "unknown stratification axis '" + std::string(name) + "'");
}

double axis_value(const DyadRecord& r, Axis axis) {
    switch (axis) {
        case Axis::delta_star: return r.delta_star;
        case Axis::y_star: return r.y_star;
        case Axis::x_star: return r.x_star;
        case Axis::gain_star: return r.x_star * (kAssumedGestationDays / 7.0);
        case Axis::asthma_star: return r.asthma_star;
    }
    return 0.0;
}

bool Stratum::contains(const DyadRecord& record) const {
    return std::all_of(bounds.begin(), bounds.end(), [&](const Bound& b) {
        return b.interval.contains(axis_value(record, b.axis));
    });
}

Interval Stratum::interval_on(Axis axis) const {
    for (const auto& b : bounds) {
        if (b.axis == axis) return b.interval;
    }
    return Interval{};
}

int Stratum::total_sampled() const { return sum_of(sampled_per_wave) + sum_of(inherited_per_wave); }

int Stratum::sampled_through_wave(int wave) const {
    int total = 0;
    for (int k = 0; k < wave; ++k) {
        const auto i = static_cast<std::size_t>(k);
        if (i < sampled_per_wave.size()) total += sampled_per_wave[i];
        if (i < inherited_per_wave.size()) total += inherited_per_wave[i];
    }
    return total;
}

std::string_view to_string(FrameMembers members) {
    return members == FrameMembers::all ? "all" : "asthma_subset";
}

FrameMembers frame_members_from_string(std::string_view name) {
    if (name == "all") return FrameMembers::all;
    if (name == "asthma_subset") return FrameMembers::asthma_subset;
    fail(ErrorKind::parse, "unknown frame membership '" + std::string(name) + "'");
}

const Stratum& DesignLedger::stratum(std::string_view id) const {
    for (const auto& s : strata) {
        if (s.id == id) return s;
    }
    fail(ErrorKind::ledger, "frame " + frame + " has no stratum '" + std::string(id) + "'");
}

Stratum& DesignLedger::stratum(std::string_view id) {
    return const_cast<Stratum&>(std::as_const(*this).stratum(id));
}

bool DesignLedger::has_stratum(std::string_view id) const {
    return std::any_of(strata.begin(), strata.end(), [&](const Stratum& s) { return s.id == id; });
}

std::vector<const Stratum*> DesignLedger::leaves() const {
    std::vector<const Stratum*> out;
    for (const auto& s : strata) {
        if (s.is_leaf()) out.push_back(&s);
    }
    return out;
}

std::vector<std::string> DesignLedger::leaf_ids() const {
    std::vector<std::string> out;
    for (const auto* s : leaves()) out.push_back(s->id);
    return out;
}

bool DesignLedger::in_frame(const DyadRecord& record) const {
    return members == FrameMembers::all || record.in_asthma_frame;
}

bool DesignLedger::drawn(std::string_view record_id) const {
    return std::any_of(draws.begin(), draws.end(),
                       [&](const Draw& d) { return d.record_id == record_id; });
}

std::vector<StratumSpec> grid_strata(const std::vector<std::pair<Axis, std::vector<double>>>& cuts) {
    std::vector<std::vector<Bound>> boxes{{}};
    for (const auto& [axis, points] : cuts) {
        std::vector<double> sorted = points;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
            fail(ErrorKind::invalid_argument, "duplicate cut point on axis " + std::string(to_string(axis)));
        }
        std::vector<Interval> pieces;
        double lo = -std::numeric_limits<double>::infinity();
        for (double c : sorted) {
            pieces.push_back({lo, c});
            lo = c;
        }
        pieces.push_back({lo, std::numeric_limits<double>::infinity()});

        std::vector<std::vector<Bound>> next;
        for (const auto& box : boxes) {
            for (const auto& piece : pieces) {
                auto b = box;
                b.push_back({axis, piece});
                next.push_back(std::move(b));
            }
        }
        boxes = std::move(next);
    }
    std::vector<StratumSpec> out;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        out.push_back({std::to_string(i + 1), std::move(boxes[i])});
    }
    return out;
}

namespace {

bool boxes_overlap(const std::vector<Bound>& a, const std::vector<Bound>& b) {
    auto interval = [](const std::vector<Bound>& box, Axis axis) {
        for (const auto& bound : box) {
            if (bound.axis == axis) return bound.interval;
        }
        return Interval{};
    };
    for (Axis axis : {Axis::delta_star, Axis::y_star, Axis::x_star, Axis::gain_star, Axis::asthma_star}) {
        if (!interval(a, axis).overlaps(interval(b, axis))) return false;
    }
    // x_star and gain_star are the same quantity on different scales; a box
    // constrained on both is treated conservatively as overlapping.
    return true;
}

}  // namespace

DesignLedger make_ledger(std::string frame, FrameMembers members,
                         const std::vector<StratumSpec>& initial,
                         std::span<const DyadRecord> records, std::uint64_t seed) {
    if (initial.empty()) fail(ErrorKind::invalid_argument, "a ledger needs at least one stratum");
    DesignLedger ledger;
    ledger.frame = std::move(frame);
    ledger.members = members;
    ledger.rng_seed = seed;

    std::unordered_set<std::string> seen;
    for (const auto& spec : initial) {
        if (!seen.insert(spec.id).second) {
            fail(ErrorKind::invalid_argument, "duplicate stratum id '" + spec.id + "'");
        }
        for (const auto& b : spec.bounds) {
            if (!(b.interval.lo < b.interval.hi)) {
                fail(ErrorKind::invalid_argument, "stratum " + spec.id + " has an empty interval");
            }
        }
        Stratum s;
        s.id = spec.id;
        s.frame = ledger.frame;
        s.bounds = spec.bounds;
        ledger.strata.push_back(std::move(s));
    }
    for (std::size_t i = 0; i < initial.size(); ++i) {
        for (std::size_t j = i + 1; j < initial.size(); ++j) {
            if (boxes_overlap(initial[i].bounds, initial[j].bounds)) {
                fail(ErrorKind::partition, "strata " + initial[i].id + " and " + initial[j].id + " overlap");
            }
        }
    }
    for (const auto& r : records) {
        if (!ledger.in_frame(r)) continue;
        ++ledger.frame_size;
        Stratum* hit = nullptr;
        for (auto& s : ledger.strata) {
            if (s.contains(r)) {
                hit = &s;
                break;
            }
        }
        if (hit == nullptr) {
            fail(ErrorKind::partition, "record " + r.id + " matches no stratum in frame " + ledger.frame);
        }
        ++hit->population_size;
    }
    return ledger;
}

const Stratum& leaf_for(const DyadRecord& record, const DesignLedger& ledger) {
    const Stratum* found = nullptr;
    std::vector<std::string> matches;
    for (const auto& s : ledger.strata) {
        if (s.is_leaf() && s.contains(record)) {
            matches.push_back(s.id);
            found = &s;
        }
    }
    if (matches.size() != 1) {
        fail(ErrorKind::partition, "record " + record.id + " matches " + std::to_string(matches.size()) +
                                       " leaf strata in frame " + ledger.frame +
                                       (matches.empty() ? "" : " (" + join_ids(matches) + ")"));
    }
    return *found;
}

std::map<std::string, std::string> assign_strata(std::span<const DyadRecord> records,
                                                 const DesignLedger& ledger) {
    std::map<std::string, std::string> out;
    std::unordered_map<std::string, long> counts;
    for (const auto& r : records) {
        if (!ledger.in_frame(r)) continue;
        const auto& leaf = leaf_for(r, ledger);
        out[r.id] = leaf.id;
        ++counts[leaf.id];
    }
    for (const auto* leaf : ledger.leaves()) {
        const long seen = counts.count(leaf->id) ? counts[leaf->id] : 0;
        if (seen != leaf->population_size) {
            fail(ErrorKind::ledger, "stratum " + leaf->id + " holds " + std::to_string(seen) +
                                        " records but the ledger records N_s=" +
                                        std::to_string(leaf->population_size));
        }
    }
    return out;
}

double sampling_probability(const DyadRecord& record, const DesignLedger& ledger) {
    const auto& leaf = leaf_for(record, ledger);
    const int n = leaf.total_sampled();
    if (n <= 0 || leaf.population_size <= 0) {
        fail(ErrorKind::ledger, "stratum " + leaf.id + " has no sampled records; sampling probability of " +
                                    record.id + " is undefined");
    }
    if (n > leaf.population_size) {
        fail(ErrorKind::ledger, "stratum " + leaf.id + " reports more draws than members");
    }
    return static_cast<double>(n) / static_cast<double>(leaf.population_size);
}

DesignLedger split_stratum(const DesignLedger& ledger, std::string_view id, Axis axis,
                           std::vector<double> cuts, std::span<const DyadRecord> records) {
    const Stratum& parent = ledger.stratum(id);
    if (!parent.is_leaf()) fail(ErrorKind::invalid_argument, "stratum " + parent.id + " is not a leaf");
    if (cuts.empty()) fail(ErrorKind::invalid_argument, "split of " + parent.id + " needs at least one cut point");
    std::sort(cuts.begin(), cuts.end());
    const Interval range = parent.interval_on(axis);
    for (std::size_t i = 0; i < cuts.size(); ++i) {
        if (!(cuts[i] > range.lo && cuts[i] < range.hi) || (i > 0 && cuts[i] == cuts[i - 1])) {
            std::ostringstream msg;
            msg << "cut point " << cuts[i] << " is not strictly inside (" << range.lo << ", " << range.hi
                << "] of stratum " << parent.id << " on " << to_string(axis);
            fail(ErrorKind::invalid_argument, msg.str());
        }
    }

    DesignLedger out = ledger;
    std::vector<Stratum> children;
    double lo = range.lo;
    for (std::size_t i = 0; i <= cuts.size(); ++i) {
        const double hi = i < cuts.size() ? cuts[i] : range.hi;
        Stratum child;
        child.id = parent.id + "." + std::to_string(i + 1);
        if (out.has_stratum(child.id)) fail(ErrorKind::ledger, "stratum id " + child.id + " already exists");
        child.frame = parent.frame;
        child.parent = parent.id;
        child.bounds = parent.bounds;
        auto it = std::find_if(child.bounds.begin(), child.bounds.end(),
                               [&](const Bound& b) { return b.axis == axis; });
        if (it == child.bounds.end()) {
            child.bounds.push_back({axis, {lo, hi}});
        } else {
            it->interval = {lo, hi};
        }
        children.push_back(std::move(child));
        lo = hi;
    }

    std::unordered_map<std::string, const DyadRecord*> by_id;
    for (const auto& r : records) {
        if (!out.in_frame(r)) continue;
        by_id.emplace(r.id, &r);
        if (!parent.contains(r)) continue;
        for (auto& c : children) {
            if (c.contains(r)) {
                ++c.population_size;
                break;
            }
        }
    }
    long child_total = 0;
    for (const auto& c : children) child_total += c.population_size;
    if (child_total != parent.population_size) {
        fail(ErrorKind::ledger, "rescan of stratum " + parent.id + " found " + std::to_string(child_total) +
                                    " records, ledger has " + std::to_string(parent.population_size));
    }

    int attributed = 0;
    for (const auto& d : ledger.draws) {
        auto hit = by_id.find(d.record_id);
        if (hit == by_id.end()) {
            fail(ErrorKind::ledger, "drawn record " + d.record_id + " is missing from the record set");
        }
        if (!parent.contains(*hit->second)) continue;
        for (auto& c : children) {
            if (c.contains(*hit->second)) {
                add_into(c.inherited_per_wave, static_cast<std::size_t>(d.wave - 1), 1);
                ++attributed;
                break;
            }
        }
    }
    if (attributed != parent.total_sampled()) {
        fail(ErrorKind::ledger, "stratum " + parent.id + " records " + std::to_string(parent.total_sampled()) +
                                    " draws but rescan attributes " + std::to_string(attributed));
    }

    Stratum& p = out.stratum(id);
    for (const auto& c : children) p.children.push_back(c.id);
    for (auto& c : children) out.strata.push_back(std::move(c));
    return out;
}

DesignLedger close_stratum(const DesignLedger& ledger, std::string_view id) {
    DesignLedger out = ledger;
    Stratum& s = out.stratum(id);
    if (!s.is_leaf()) fail(ErrorKind::invalid_argument, "only leaf strata can be closed");
    s.closed = true;
    return out;
}

void check_ledger(const DesignLedger& ledger) {
    long total = 0;
    for (const auto& s : ledger.strata) {
        if (s.population_size < 0) fail(ErrorKind::ledger, "negative N_s in stratum " + s.id);
        if (s.total_sampled() > s.population_size) {
            fail(ErrorKind::ledger, "stratum " + s.id + " sampled more than its population");
        }
        for (int n : s.sampled_per_wave) {
            if (n < 0) fail(ErrorKind::ledger, "negative draw count in stratum " + s.id);
        }
        if (s.parent && !ledger.has_stratum(*s.parent)) {
            fail(ErrorKind::ledger, "stratum " + s.id + " refers to missing parent " + *s.parent);
        }
        if (!s.is_leaf()) {
            long children = 0;
            for (const auto& c : s.children) children += ledger.stratum(c).population_size;
            if (children != s.population_size) {
                fail(ErrorKind::ledger, "children of " + s.id + " do not partition its population");
            }
        } else {
            total += s.population_size;
        }
    }
    if (total != ledger.frame_size) {
        fail(ErrorKind::ledger, "leaf strata hold " + std::to_string(total) + " records, frame size is " +
                                    std::to_string(ledger.frame_size));
    }
}

}  // namespace twophase
