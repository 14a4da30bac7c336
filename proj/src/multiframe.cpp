#include "twophase/multiframe.hpp"

#include <cfloat>
#include <cmath>

#include "twophase/error.hpp"

namespace twophase::multiframe {

namespace {

void check_probability(double pi, const std::string& id) {
    if (!(pi >= 0.0 && pi <= 1.0)) {
        fail(ErrorKind::domain, "record " + id + " has an inclusion probability outside [0, 1]");
    }
}

}  // namespace

double phi(double pi_o, double pi_a) {
    if (!(pi_o + pi_a > 0.0)) fail(ErrorKind::domain, "a unit must be drawable from at least one frame");
    return pi_o / (pi_o + pi_a);
}

std::vector<WeightRow> combine_frames(std::span<const FrameUnit> units) {
    std::vector<WeightRow> rows;
    for (const auto& u : units) {
        if (!u.sampled_o && !u.sampled_a) continue;
        check_probability(u.pi_o, u.id);
        if (u.sampled_o && u.pi_o == 0.0) {
            fail(ErrorKind::ledger, "record " + u.id + " was drawn from a stratum with no draws");
        }
        if (!u.pi_a) {
            if (u.sampled_a) fail(ErrorKind::ledger, "record " + u.id + " was drawn from a frame it is not in");
            rows.push_back({u.id, "obesity", 1.0 / u.pi_o, u.id, "obesity:" + u.stratum_o});
            continue;
        }
        check_probability(*u.pi_a, u.id);
        if (u.sampled_a && *u.pi_a == 0.0) {
            fail(ErrorKind::ledger, "record " + u.id + " was drawn from a stratum with no draws");
        }
        const double f = phi(u.pi_o, *u.pi_a);
        const double w_o = u.pi_o > 0.0 ? f / u.pi_o : 0.0;
        const double w_a = *u.pi_a > 0.0 ? (1.0 - f) / *u.pi_a : 0.0;
        if (std::abs(u.pi_o * w_o + *u.pi_a * w_a - 1.0) > 8 * DBL_EPSILON) {
            fail(ErrorKind::ill_conditioned, "multi-frame weights for record " + u.id + " are not unbiased");
        }
        if (u.sampled_o) rows.push_back({u.id, "obesity", w_o, u.id, "obesity:" + u.stratum_o});
        if (u.sampled_a) rows.push_back({u.id, "asthma", w_a, u.id, "asthma:" + u.stratum_a});
    }
    return rows;
}

VarianceGroups multiframe_variance_groups(std::span<const WeightRow> rows) {
    VarianceGroups g;
    for (const auto& r : rows) {
        g.strata.push_back(r.stratum);
        g.clusters.push_back(r.cluster);
    }
    return g;
}

}  // namespace twophase::multiframe
