#pragma once

#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "twophase/datamodel.hpp"
#include "twophase/models.hpp"

namespace twophase::analysis {

enum class ModelKind { cox, logistic };

std::string_view to_string(ModelKind kind);
ModelKind model_kind_from_string(std::string_view name);

/// Which version of each variable a design matrix is built from.
enum class Source { phase1, phase2, imputed };

/// Imputed values keyed by variable name, aligned with the full record list.
using ImputedColumns = std::map<std::string, std::vector<double>>;

/// Analysis model over named variables.
///
/// Variable names: `y`, `delta`, `x`, `z<k>`, `asthma`, `gestation` resolve to the
/// phase-1 or phase-2 field depending on the source; a `_star` suffix pins the
/// phase-1 value and `a<k>` is auxiliary column k. Cox models use (`y`, `delta`)
/// as the response; logistic models use `asthma` and prepend an intercept.
struct ModelSpec {
    ModelKind kind = ModelKind::cox;
    std::vector<std::string> covariates{"x"};
    std::string target = "x";
    std::string outcome = "asthma";

    /// Position of the target coefficient in the fitted coefficient vector.
    Eigen::Index target_index() const;
    std::vector<std::string> coefficient_names() const;
};

/// Default specs: all z columns after x.
ModelSpec cox_spec(std::size_t z_count);
ModelSpec logistic_spec(std::size_t z_count);

double variable(const DyadRecord& record, std::string_view name, Source source,
                const ImputedColumns* imputed = nullptr, std::size_t row = 0);

/// Design for the records at `rows` (indices into `records`).
models::CoxData cox_data(std::span<const DyadRecord> records, std::span<const std::size_t> rows,
                         const ModelSpec& spec, Source source, const ImputedColumns* imputed = nullptr);
models::LogisticData logistic_data(std::span<const DyadRecord> records, std::span<const std::size_t> rows,
                                   const ModelSpec& spec, Source source,
                                   const ImputedColumns* imputed = nullptr);

/// Fits `spec` on the given rows with the given weights (empty = unit weights).
models::FitResult fit(std::span<const DyadRecord> records, std::span<const std::size_t> rows,
                      const ModelSpec& spec, Source source, std::span<const double> weights = {},
                      const ImputedColumns* imputed = nullptr, const models::FitOptions& options = {});

/// Hazard or odds ratio for an exposure increment: exp(beta * increment).
double effect_ratio(double beta, double increment);

/// Indices of records the model applies to: all records for Cox, asthma-frame
/// members for logistic. With `validated_only`, restricted to validated records.
std::vector<std::size_t> model_rows(std::span<const DyadRecord> records, const ModelSpec& spec,
                                    bool validated_only);

}  // namespace twophase::analysis
