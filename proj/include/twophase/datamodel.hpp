#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace twophase {

/// Days from assumed conception to delivery used for every phase-1 exposure.
inline constexpr double kAssumedGestationDays = 273.0;

/// One mother-child unit. Phase-1 fields are always present; the phase-2
/// (validated) counterparts are filled in once the record has been reviewed.
struct DyadRecord {
    std::string id;

    double y_star = 0.0;   // censored-failure time, years
    int delta_star = 0;    // event indicator
    double x_star = 0.0;   // exposure, kg/week
    std::vector<double> z_star;
    std::vector<double> aux;
    int asthma_star = 0;
    bool in_asthma_frame = false;

    bool validated = false;
    std::optional<int> wave_sampled;
    std::optional<double> y;
    std::optional<int> delta;
    std::optional<double> x;
    std::optional<std::vector<double>> z;
    std::optional<int> asthma;
    std::optional<double> gestation_days;
};

/// Throws ErrorKind::schema naming the record when an invariant is broken.
void check_record(const DyadRecord& record);

/// Phase-1 quantities a stratum boundary can be placed on. `gain_star` is the
/// total gestational gain in kg implied by x_star over the assumed 39 weeks.
enum class Axis { delta_star, y_star, x_star, gain_star, asthma_star };

std::string_view to_string(Axis axis);
Axis axis_from_string(std::string_view name);
double axis_value(const DyadRecord& record, Axis axis);

/// Half-open interval (lo, hi]; infinities mark edge strata.
struct Interval {
    double lo = -std::numeric_limits<double>::infinity();
    double hi = std::numeric_limits<double>::infinity();

    bool contains(double v) const { return v > lo && v <= hi; }
    bool overlaps(const Interval& other) const { return lo < other.hi && other.lo < hi; }
};

struct Bound {
    Axis axis = Axis::y_star;
    Interval interval;
};

struct Stratum {
    std::string id;
    std::string frame;
    std::optional<std::string> parent;
    std::vector<std::string> children;
    std::vector<Bound> bounds;  // conjunction; unlisted axes are unconstrained
    long population_size = 0;
    /// Draws made with this stratum as the sampling unit, indexed by wave - 1.
    std::vector<int> sampled_per_wave;
    /// Ancestor draws attributed here by rescanning at split time.
    std::vector<int> inherited_per_wave;
    bool closed = false;

    bool is_leaf() const { return children.empty(); }
    bool contains(const DyadRecord& record) const;
    Interval interval_on(Axis axis) const;
    /// n_s: own draws plus draws inherited from ancestors.
    int total_sampled() const;
    int sampled_through_wave(int wave) const;
};

enum class FrameMembers { all, asthma_subset };

std::string_view to_string(FrameMembers members);
FrameMembers frame_members_from_string(std::string_view name);

struct Draw {
    std::string record_id;
    int wave = 0;
    std::string stratum_id;
    bool overlap = false;  // already validated through another frame
};

/// Per-frame design: strata tree, draw history and the seed all draws flow from.
struct DesignLedger {
    std::string frame;
    FrameMembers members = FrameMembers::all;
    long frame_size = 0;
    std::vector<Stratum> strata;  // creation order; parents precede children
    int wave_count = 0;
    std::uint64_t rng_seed = 0;
    std::vector<Draw> draws;

    const Stratum& stratum(std::string_view id) const;
    Stratum& stratum(std::string_view id);
    bool has_stratum(std::string_view id) const;
    std::vector<const Stratum*> leaves() const;
    std::vector<std::string> leaf_ids() const;
    bool in_frame(const DyadRecord& record) const;
    bool drawn(std::string_view record_id) const;
};

/// Root-level strata definition used to start a ledger.
struct StratumSpec {
    std::string id;
    std::vector<Bound> bounds;
};

/// Cartesian product of the cut points given per axis; ids are "1".."n".
std::vector<StratumSpec> grid_strata(const std::vector<std::pair<Axis, std::vector<double>>>& cuts);

DesignLedger make_ledger(std::string frame, FrameMembers members,
                         const std::vector<StratumSpec>& initial,
                         std::span<const DyadRecord> records, std::uint64_t seed);

/// The unique leaf containing `record`; partition error when none or several match.
const Stratum& leaf_for(const DyadRecord& record, const DesignLedger& ledger);

/// Maps every frame member to its leaf stratum and checks leaf counts against N_s.
std::map<std::string, std::string> assign_strata(std::span<const DyadRecord> records,
                                                 const DesignLedger& ledger);

/// pi = n_s / N_s on the record's final leaf.
double sampling_probability(const DyadRecord& record, const DesignLedger& ledger);

/// Splits leaf `id` at `cuts` along `axis`; children counts come from a rescan
/// of `records`, and the parent's draws are attributed to the child holding each
/// drawn record.
DesignLedger split_stratum(const DesignLedger& ledger, std::string_view id, Axis axis,
                           std::vector<double> cuts, std::span<const DyadRecord> records);

DesignLedger close_stratum(const DesignLedger& ledger, std::string_view id);

/// Checks the tree structure and that leaf counts sum to the frame size.
void check_ledger(const DesignLedger& ledger);

}  // namespace twophase
