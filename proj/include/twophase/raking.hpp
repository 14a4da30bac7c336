#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "twophase/analysis.hpp"
#include "twophase/models.hpp"

namespace twophase::raking {

struct CalibrationOptions {
    int max_iterations = 100;
    double tolerance = 1e-8;
    /// Relative pivot size below which an auxiliary column counts as collinear.
    double collinearity_tolerance = 1e-9;
};

/// Calibration factors for the sampled rows under d(a, b) = a log(a/b) - a + b,
/// which gives g_i = exp(aux_i' lambda).
struct CalibrationResult {
    Eigen::VectorXd g;
    Eigen::VectorXd lambda;              // over the kept columns
    std::vector<Eigen::Index> kept_columns;
    std::vector<Eigen::Index> dropped_columns;
    /// max_j |sum d g a_j - T_j| / max(|T_j|, sum d |a_j|)
    double constraint_residual = 0.0;
    double primal_objective = 0.0;       // sum d (g log g - g + 1)
    double dual_objective = 0.0;         // lambda'T - sum d (g - 1)
    int iterations = 0;
    std::vector<std::string> warnings;
};

/// Prepends a column of ones.
Eigen::MatrixXd with_constant(const Eigen::MatrixXd& aux);

/// Calibrates design weights `d` of the sampled rows so that the weighted totals of
/// `aux` (sampled rows only) hit `totals`. Newton on the convex dual from lambda = 0.
CalibrationResult calibrate(std::span<const double> design_weights, const Eigen::MatrixXd& aux,
                            const Eigen::VectorXd& totals, const CalibrationOptions& options = {});

/// Population form: `aux` holds all N rows, totals are its column sums, and the
/// sampled rows (in order) carry design weights 1 / pi.
CalibrationResult calibrate_population(std::span<const double> pi_sampled, const Eigen::MatrixXd& aux,
                                       std::span<const bool> sampled, const CalibrationOptions& options = {});

/// Phase-2 analysis rows with their design weights and variance design.
struct WeightedSample {
    std::vector<std::size_t> rows;        // indices into the record list
    std::vector<double> weights;          // 1/pi, or combined multi-frame weights
    std::vector<std::string> strata;      // variance strata per row
    std::vector<std::string> clusters;    // optional; rows sharing an id form one cluster
};

struct Estimate {
    models::FitResult fit;
    Eigen::MatrixXd variance;  // design-based
    std::optional<CalibrationResult> calibration;
    std::vector<std::string> warnings;

    Eigen::VectorXd standard_errors() const { return variance.diagonal().cwiseSqrt(); }
};

/// Solves sum R_i U_i(theta) / pi_i = 0 on validated data; stratified linearization variance.
Estimate ipw_fit(const analysis::ModelSpec& spec, std::span<const DyadRecord> records,
                 const WeightedSample& sample);

/// Raking estimator: weights calibrated so that the weighted totals of `aux_rows`
/// (one row per sample row, without the constant) match `population_totals`
/// (constant first, then the aux columns). Variance from design-based
/// linearization of the residuals of the unit influence regressed on the aux.
Estimate raking_fit(const analysis::ModelSpec& spec, std::span<const DyadRecord> records,
                    const WeightedSample& sample, const Eigen::MatrixXd& aux_rows,
                    const Eigen::VectorXd& population_totals, const CalibrationOptions& options = {});

}  // namespace twophase::raking
