#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "twophase/analysis.hpp"
#include "twophase/datamodel.hpp"
#include "twophase/multiframe.hpp"
#include "twophase/raking.hpp"

namespace twophase::estimators {

enum class Method { phase1, ipw_single, ipw_multi, raking_naive, raking_mi };

std::string_view to_string(Method method);
Method method_from_string(std::string_view name);
Method method_from_flags(std::string_view method, std::string_view aux, std::string_view frame);

/// The frame a model targets and the frame it borrows from for multi-frame
/// estimation. `other` may be absent, in which case the multi-frame estimators
/// reduce to the single-frame ones.
struct Design {
    const DesignLedger* target = nullptr;
    const DesignLedger* other = nullptr;
};

/// IPW sample over records drawn in the target frame, weights 1 / pi.
raking::WeightedSample single_frame_sample(const analysis::ModelSpec& spec, std::span<const DyadRecord> records,
                                           const DesignLedger& ledger);

/// Hansen-Hurwitz rows over records drawn in either frame and covered by the model.
raking::WeightedSample multi_frame_sample(const analysis::ModelSpec& spec, std::span<const DyadRecord> records,
                                          const Design& design,
                                          std::vector<multiframe::WeightRow>* rows_out = nullptr);

/// Frame units for every record the model covers; probabilities come from the
/// ledgers' final leaves.
std::vector<multiframe::FrameUnit> frame_units(const analysis::ModelSpec& spec, std::span<const DyadRecord> records,
                                               const Design& design);

/// Naive influence of the target coefficient from the phase-1 fit (per record,
/// NaN outside the model rows).
std::vector<double> naive_influence(const analysis::ModelSpec& spec, std::span<const DyadRecord> records);

/// Unit influence (H_i / w_i) of the target coefficient from the IPW fit on the
/// frame's draws, per record; NaN for records not drawn.
std::vector<double> ipw_unit_influence(const analysis::ModelSpec& spec, std::span<const DyadRecord> records,
                                       const DesignLedger& ledger);

struct Result {
    Method method = Method::phase1;
    Eigen::VectorXd coefficients;
    Eigen::VectorXd standard_errors;
    std::vector<std::string> warnings;
    std::size_t rows = 0;
};

/// `aux` is the per-record auxiliary for raking (naive or MI influence).
Result estimate(Method method, const analysis::ModelSpec& spec, std::span<const DyadRecord> records,
                const Design& design, std::span<const double> aux = {});

}  // namespace twophase::estimators
