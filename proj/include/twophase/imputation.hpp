#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "twophase/analysis.hpp"
#include "twophase/datamodel.hpp"

namespace twophase::imputation {

enum class TargetKind { continuous, binary, derived };

std::string_view to_string(TargetKind kind);
TargetKind target_kind_from_string(std::string_view name);

/// One validated variable to impute. Predictors are analysis variable names
/// (phase-1 names carry `_star`); earlier targets in the sequence are appended
/// automatically.
struct TargetSpec {
    std::string name;
    TargetKind kind = TargetKind::continuous;
    std::vector<std::string> predictors;
};

/// Value of a derived target from the record and the targets drawn so far.
using DerivedFunction =
    std::function<double(const DyadRecord& record, std::size_t row, const std::map<std::string, double>& drawn)>;

struct ImputationSpec {
    std::vector<TargetSpec> sequence;
    std::map<std::string, DerivedFunction> derived;
    std::size_t min_validated = 30;
    /// Keep validated values for validated records instead of re-imputing them.
    bool pass_through_validated = false;
};

/// Default sequence for the dyad data: delta, y, then x (or x derived from an
/// imputed gestation length), each z, and asthma when requested.
ImputationSpec default_spec(std::size_t z_count, const std::vector<bool>& z_binary, bool include_asthma,
                            std::optional<DerivedFunction> exposure_from_gestation = std::nullopt);

struct SubModel {
    std::string name;
    TargetKind kind = TargetKind::continuous;
    std::vector<std::string> predictors;  // after the intercept
    Eigen::VectorXd coefficients;
    /// Linear: (X'X)^{-1}; logistic: inverse information.
    Eigen::MatrixXd coefficient_covariance;
    double residual_variance = 0.0;
    long residual_df = 0;
    std::optional<double> constant;        // degenerate target
    std::optional<std::string> copy_of;    // target equals this predictor on every validated row
    bool penalized = false;                // logistic ridge fallback after separation
    std::size_t fitted_rows = 0;
};

struct ImputationModel {
    ImputationSpec spec;
    std::vector<SubModel> sequence;
    std::vector<std::string> warnings;
};

ImputationModel fit_imputation(std::span<const DyadRecord> records, const ImputationSpec& spec);

/// Completed values for every target and every record, replicate m of seed.
analysis::ImputedColumns impute_once(std::span<const DyadRecord> records, const ImputationModel& model,
                                     std::uint64_t seed, std::uint64_t m);

std::vector<analysis::ImputedColumns> impute(std::span<const DyadRecord> records, const ImputationModel& model,
                                             int replicates, std::uint64_t seed);

struct MiInfluence {
    std::vector<double> h;  // per record; NaN where the analysis model does not apply
    int used = 0;
    std::vector<int> dropped;
};

/// Average over replicates of the target-coefficient influence from fitting
/// `analysis_spec` to each completed dataset.
MiInfluence mi_influence(std::span<const DyadRecord> records, const ImputationModel& model, int replicates,
                         const analysis::ModelSpec& analysis_spec, std::uint64_t seed);

}  // namespace twophase::imputation
