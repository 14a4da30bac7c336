#include "twophase/allocation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <queue>
#include <random>
#include <unordered_map>

#include "twophase/error.hpp"

namespace twophase::allocation {

std::string_view to_string(SdSource source) {
    switch (source) {
        case SdSource::direct: return "direct";
        case SdSource::parent: return "parent";
        case SdSource::pooled: return "pooled";
    }
    return "?";
}

SdSource sd_source_from_string(std::string_view name) {
    if (name == "direct") return SdSource::direct;
    if (name == "parent") return SdSource::parent;
    if (name == "pooled") return SdSource::pooled;
    fail(ErrorKind::parse, "unknown SD source '" + std::string(name) + "'");
}

namespace {

void check_stats(std::span<const StratumStats> stats) {
    if (stats.empty()) fail(ErrorKind::invalid_argument, "allocation needs at least one stratum");
    for (const auto& s : stats) {
        if (!(s.sigma >= 0.0) || !std::isfinite(s.sigma)) {
            fail(ErrorKind::invalid_argument, "stratum " + s.id + " has an invalid SD");
        }
        if (s.population < 0 || s.already_sampled < 0 || s.already_sampled > s.population) {
            fail(ErrorKind::invalid_argument, "stratum " + s.id + " has inconsistent counts");
        }
    }
}

double size_times_sd(const StratumStats& s) { return static_cast<double>(s.population) * s.sigma; }

/// Awards `units` one at a time to the eligible stratum with the highest
/// N sigma / sqrt(m (m + 1)); ties go to the larger N sigma, then the earlier stratum.
void greedy_fill(std::span<const StratumStats> stats, std::vector<int>& m, const std::vector<bool>& eligible,
                 long units) {
    struct Entry {
        double priority;
        double weight;
        std::size_t index;
    };
    auto worse = [](const Entry& a, const Entry& b) {
        if (a.priority != b.priority) return a.priority < b.priority;
        if (a.weight != b.weight) return a.weight < b.weight;
        return a.index > b.index;
    };
    auto priority = [&](std::size_t i) {
        const double w = size_times_sd(stats[i]);
        if (m[i] == 0) return std::numeric_limits<double>::infinity();
        const double mi = m[i];
        return w / std::sqrt(mi * (mi + 1.0));
    };
    std::priority_queue<Entry, std::vector<Entry>, decltype(worse)> heap(worse);
    for (std::size_t i = 0; i < stats.size(); ++i) {
        if (eligible[i] && size_times_sd(stats[i]) > 0.0 && m[i] < stats[i].population) {
            heap.push({priority(i), size_times_sd(stats[i]), i});
        }
    }
    while (units > 0 && !heap.empty()) {
        const Entry top = heap.top();
        heap.pop();
        ++m[top.index];
        --units;
        if (m[top.index] < stats[top.index].population) {
            heap.push({priority(top.index), top.weight, top.index});
        }
    }
    // Budget beyond what positive-SD strata can absorb goes to the rest in order.
    for (std::size_t i = 0; units > 0 && i < stats.size(); ++i) {
        if (!eligible[i]) continue;
        const long room = stats[i].population - m[i];
        const long take = std::min(room, units);
        m[i] += static_cast<int>(take);
        units -= take;
    }
    if (units > 0) {
        fail(ErrorKind::infeasible, "remaining population is too small for the requested budget (" +
                                        std::to_string(units) + " units unplaced)");
    }
}

}  // namespace

std::vector<double> neyman(std::span<const StratumStats> stats, double n, DegenerateFallback fallback) {
    check_stats(stats);
    if (!(n >= 1.0)) fail(ErrorKind::invalid_argument, "Neyman allocation needs n >= 1");
    double total = 0.0;
    for (const auto& s : stats) total += size_times_sd(s);
    std::vector<double> out(stats.size(), 0.0);
    if (total <= 0.0) {
        if (fallback == DegenerateFallback::fail) {
            fail(ErrorKind::degenerate, "every stratum has zero influence SD; Neyman allocation is undefined");
        }
        double population = 0.0;
        for (const auto& s : stats) population += static_cast<double>(s.population);
        for (std::size_t i = 0; i < stats.size(); ++i) out[i] = n * static_cast<double>(stats[i].population) / population;
        return out;
    }
    for (std::size_t i = 0; i < stats.size(); ++i) out[i] = n * size_times_sd(stats[i]) / total;
    return out;
}

std::vector<int> exact_allocation(std::span<const StratumStats> stats, long n, int min_per_stratum) {
    check_stats(stats);
    if (min_per_stratum < 0) fail(ErrorKind::invalid_argument, "min_per_stratum must be non-negative");
    long floor_total = 0;
    long capacity = 0;
    std::vector<int> m(stats.size());
    for (std::size_t i = 0; i < stats.size(); ++i) {
        m[i] = static_cast<int>(std::min<long>(min_per_stratum, stats[i].population));
        floor_total += m[i];
        capacity += stats[i].population;
    }
    if (n < floor_total || n > capacity) {
        fail(ErrorKind::infeasible, "sample size " + std::to_string(n) + " is outside [" +
                                        std::to_string(floor_total) + ", " + std::to_string(capacity) + "]");
    }
    greedy_fill(stats, m, std::vector<bool>(stats.size(), true), n - floor_total);
    return m;
}

double allocation_variance(std::span<const StratumStats> stats, std::span<const int> allocation) {
    double v = 0.0;
    for (std::size_t i = 0; i < stats.size(); ++i) {
        const double w = size_times_sd(stats[i]);
        if (w == 0.0) continue;
        if (allocation[i] <= 0) return std::numeric_limits<double>::infinity();
        v += w * w / allocation[i];
    }
    return v;
}

WaveAllocation multiwave(std::span<const StratumStats> stats, long cumulative_target, int min_per_stratum) {
    check_stats(stats);
    long already_total = 0;
    for (const auto& s : stats) already_total += s.already_sampled;
    if (cumulative_target < already_total) {
        fail(ErrorKind::invalid_argument, "cumulative target " + std::to_string(cumulative_target) +
                                              " is below the " + std::to_string(already_total) +
                                              " records already sampled");
    }

    WaveAllocation out;
    std::vector<bool> open(stats.size());
    std::vector<double> optimum(stats.size(), 0.0);
    for (std::size_t i = 0; i < stats.size(); ++i) {
        open[i] = !stats[i].closed;
        out.strata.push_back({stats[i].id, 0, 0.0, stats[i].closed, false});
    }

    for (std::size_t round = 0; round <= stats.size(); ++round) {
        ++out.iterations;
        double budget = static_cast<double>(cumulative_target);
        double weight = 0.0;
        double open_population = 0.0;
        for (std::size_t i = 0; i < stats.size(); ++i) {
            if (!open[i]) {
                budget -= stats[i].already_sampled;
            } else {
                weight += size_times_sd(stats[i]);
                open_population += static_cast<double>(stats[i].population);
            }
        }
        bool any_open = false;
        bool closed_any = false;
        for (std::size_t i = 0; i < stats.size(); ++i) {
            if (!open[i]) continue;
            any_open = true;
            optimum[i] = weight > 0.0 ? budget * size_times_sd(stats[i]) / weight
                                      : budget * static_cast<double>(stats[i].population) / open_population;
        }
        if (!any_open) break;
        for (std::size_t i = 0; i < stats.size(); ++i) {
            if (open[i] && optimum[i] - stats[i].already_sampled < 0.0) {
                open[i] = false;
                out.strata[i].optimum = optimum[i];
                out.strata[i].closed = true;
                out.strata[i].newly_closed = true;
                closed_any = true;
            }
        }
        if (!closed_any) break;
    }

    std::vector<int> m(stats.size());
    long units = cumulative_target - already_total;
    bool any_open = false;
    for (std::size_t i = 0; i < stats.size(); ++i) {
        m[i] = stats[i].already_sampled;
        if (!open[i]) continue;
        any_open = true;
        out.strata[i].optimum = optimum[i];
        const int lift = std::max(0, min_per_stratum - m[i]);
        if (lift > units) fail(ErrorKind::infeasible, "budget cannot cover the per-stratum minimum");
        m[i] += lift;
        units -= lift;
    }
    if (!any_open && units > 0) fail(ErrorKind::infeasible, "every stratum is closed but budget remains");

    bool all_zero_sd = true;
    for (std::size_t i = 0; i < stats.size(); ++i) {
        if (open[i] && stats[i].sigma > 0.0) all_zero_sd = false;
    }
    if (all_zero_sd && any_open) {
        // Proportional fallback: treat every open stratum as equally variable.
        std::vector<StratumStats> flat(stats.begin(), stats.end());
        for (auto& s : flat) s.sigma = 1.0;
        greedy_fill(flat, m, open, units);
    } else {
        greedy_fill(stats, m, open, units);
    }

    for (std::size_t i = 0; i < stats.size(); ++i) {
        out.strata[i].draw = m[i] - stats[i].already_sampled;
        out.total_draw += out.strata[i].draw;
    }
    return out;
}

std::vector<StratumStats> stratum_sd(const DesignLedger& ledger, std::span<const DyadRecord> records,
                                     const std::map<std::string, double>& influence) {
    std::vector<std::pair<const DyadRecord*, double>> known;
    for (const auto& r : records) {
        if (!ledger.in_frame(r)) continue;
        auto it = influence.find(r.id);
        if (it != influence.end()) known.emplace_back(&r, it->second);
    }

    auto sd_of = [&](const Stratum& s, std::size_t& count) {
        double sum = 0.0;
        double sq = 0.0;
        count = 0;
        for (const auto& [r, h] : known) {
            if (!s.contains(*r)) continue;
            ++count;
            sum += h;
        }
        if (count < 2) return 0.0;
        const double mean = sum / static_cast<double>(count);
        for (const auto& [r, h] : known) {
            if (s.contains(*r)) sq += (h - mean) * (h - mean);
        }
        return std::sqrt(sq / static_cast<double>(count - 1));
    };

    double pooled = 0.0;
    {
        double sum = 0.0;
        for (const auto& kv : known) sum += kv.second;
        if (known.size() >= 2) {
            const double mean = sum / static_cast<double>(known.size());
            double sq = 0.0;
            for (const auto& kv : known) sq += (kv.second - mean) * (kv.second - mean);
            pooled = std::sqrt(sq / static_cast<double>(known.size() - 1));
        }
    }

    std::vector<StratumStats> out;
    for (const auto* leaf : ledger.leaves()) {
        StratumStats st;
        st.id = leaf->id;
        st.population = leaf->population_size;
        st.already_sampled = leaf->total_sampled();
        st.closed = leaf->closed;
        std::size_t count = 0;
        st.sigma = sd_of(*leaf, count);
        if (count < 2) {
            st.sd_source = SdSource::pooled;
            const Stratum* up = leaf->parent ? &ledger.stratum(*leaf->parent) : nullptr;
            while (up != nullptr) {
                const double sd = sd_of(*up, count);
                if (count >= 2) {
                    st.sigma = sd;
                    st.sd_source = SdSource::parent;
                    break;
                }
                up = up->parent ? &ledger.stratum(*up->parent) : nullptr;
            }
            if (st.sd_source == SdSource::pooled) {
                if (known.size() < 2) {
                    fail(ErrorKind::degenerate, "fewer than two influence values in frame " + ledger.frame);
                }
                st.sigma = pooled;
            }
        }
        out.push_back(st);
    }
    return out;
}

DrawResult draw_sample(const DesignLedger& ledger, std::span<const DyadRecord> records,
                       const std::map<std::string, int>& allocation, std::uint64_t seed) {
    DrawResult out;
    out.ledger = ledger;
    out.wave = ledger.wave_count + 1;

    std::unordered_map<std::string, bool> already_drawn;
    for (const auto& d : ledger.draws) already_drawn[d.record_id] = true;

    for (const auto& [id, count] : allocation) {
        const Stratum& s = ledger.stratum(id);
        if (!s.is_leaf()) fail(ErrorKind::invalid_argument, "allocation names non-leaf stratum " + id);
        if (count < 0) fail(ErrorKind::invalid_argument, "negative allocation for stratum " + id);
        if (count > 0 && s.closed) fail(ErrorKind::infeasible, "stratum " + id + " is closed");
    }

    const auto leaves = ledger.leaves();
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        const Stratum& leaf = *leaves[li];
        auto it = allocation.find(leaf.id);
        const int count = it == allocation.end() ? 0 : it->second;
        if (count == 0) continue;

        std::vector<const DyadRecord*> candidates;
        for (const auto& r : records) {
            if (ledger.in_frame(r) && leaf.contains(r) && !already_drawn.count(r.id)) candidates.push_back(&r);
        }
        if (static_cast<std::size_t>(count) > candidates.size()) {
            fail(ErrorKind::infeasible, "stratum " + leaf.id + " has " + std::to_string(candidates.size()) +
                                            " undrawn records but allocation asks for " + std::to_string(count));
        }
        std::sort(candidates.begin(), candidates.end(),
                  [](const DyadRecord* a, const DyadRecord* b) { return a->id < b->id; });

        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                          static_cast<std::uint32_t>(out.wave), static_cast<std::uint32_t>(li)};
        std::mt19937_64 rng(seq);
        for (int j = 0; j < count; ++j) {
            std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(j), candidates.size() - 1);
            std::swap(candidates[static_cast<std::size_t>(j)], candidates[pick(rng)]);
        }

        Stratum& target = out.ledger.stratum(leaf.id);
        if (target.sampled_per_wave.size() < static_cast<std::size_t>(out.wave)) {
            target.sampled_per_wave.resize(static_cast<std::size_t>(out.wave), 0);
        }
        target.sampled_per_wave[static_cast<std::size_t>(out.wave - 1)] += count;
        auto& ids = out.by_stratum[leaf.id];
        for (int j = 0; j < count; ++j) {
            const DyadRecord& r = *candidates[static_cast<std::size_t>(j)];
            ids.push_back(r.id);
            out.ledger.draws.push_back({r.id, out.wave, leaf.id, r.validated});
            if (r.validated) out.overlap.push_back(r.id);
        }
    }
    out.ledger.wave_count = out.wave;
    return out;
}

}  // namespace twophase::allocation
