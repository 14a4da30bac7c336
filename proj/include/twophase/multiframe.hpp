#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace twophase::multiframe {

/// A record's standing in the two frames. Members of the smaller frame also
/// belong to the larger one, so every unit carries an obesity-frame probability.
struct FrameUnit {
    std::string id;
    double pi_o = 0.0;
    std::optional<double> pi_a;  // set iff the unit is in the asthma frame
    bool sampled_o = false;
    bool sampled_a = false;
    std::string stratum_o;
    std::string stratum_a;
};

/// Hansen-Hurwitz share of the obesity frame for a dual-frame unit.
double phi(double pi_o, double pi_a);

struct WeightRow {
    std::string record_id;
    std::string frame;    // "obesity" or "asthma"
    double weight = 0.0;
    std::string cluster;  // record id; joins the two rows of a doubly sampled unit
    std::string stratum;  // frame-qualified design stratum
};

/// One row per (sampled unit, frame it was sampled in). Single-frame units get
/// 1 / pi_o; dual-frame units get phi / pi_o and (1 - phi) / pi_a.
std::vector<WeightRow> combine_frames(std::span<const FrameUnit> units);

struct VarianceGroups {
    std::vector<std::string> strata;
    std::vector<std::string> clusters;
};

VarianceGroups multiframe_variance_groups(std::span<const WeightRow> rows);

}  // namespace twophase::multiframe
