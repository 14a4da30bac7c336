#include "twophase/analysis.hpp"

#include <charconv>
#include <cmath>

#include "twophase/error.hpp"

namespace twophase::analysis {

std::string_view to_string(ModelKind kind) { return kind == ModelKind::cox ? "cox" : "logistic"; }

ModelKind model_kind_from_string(std::string_view name) {
    if (name == "cox") return ModelKind::cox;
    if (name == "logistic") return ModelKind::logistic;
    fail(ErrorKind::parse, "unknown model '" + std::string(name) + "'");
}

Eigen::Index ModelSpec::target_index() const {
    for (std::size_t j = 0; j < covariates.size(); ++j) {
        if (covariates[j] == target) {
            return static_cast<Eigen::Index>(j) + (kind == ModelKind::logistic ? 1 : 0);
        }
    }
    fail(ErrorKind::invalid_argument, "target '" + target + "' is not among the model covariates");
}

std::vector<std::string> ModelSpec::coefficient_names() const {
    std::vector<std::string> out;
    if (kind == ModelKind::logistic) out.push_back("(intercept)");
    out.insert(out.end(), covariates.begin(), covariates.end());
    return out;
}

ModelSpec cox_spec(std::size_t z_count) {
    ModelSpec spec;
    spec.kind = ModelKind::cox;
    spec.covariates = {"x"};
    for (std::size_t k = 0; k < z_count; ++k) spec.covariates.push_back("z" + std::to_string(k));
    return spec;
}

ModelSpec logistic_spec(std::size_t z_count) {
    ModelSpec spec = cox_spec(z_count);
    spec.kind = ModelKind::logistic;
    return spec;
}

namespace {

std::size_t parse_index(std::string_view digits, std::string_view name) {
    std::size_t k = 0;
    auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), k);
    if (ec != std::errc{} || ptr != digits.data() + digits.size() || digits.empty()) {
        fail(ErrorKind::invalid_argument, "unknown variable '" + std::string(name) + "'");
    }
    return k;
}

double element(const std::vector<double>& v, std::size_t k, std::string_view name, const DyadRecord& r) {
    if (k >= v.size()) {
        fail(ErrorKind::schema, "record " + r.id + " has no variable '" + std::string(name) + "'");
    }
    return v[k];
}

double phase1_value(const DyadRecord& r, std::string_view base, std::string_view name) {
    if (base == "y") return r.y_star;
    if (base == "delta") return r.delta_star;
    if (base == "x") return r.x_star;
    if (base == "asthma") return r.asthma_star;
    if (base == "gestation") return kAssumedGestationDays;
    if (base.size() > 1 && base[0] == 'z') return element(r.z_star, parse_index(base.substr(1), name), name, r);
    if (base.size() > 1 && base[0] == 'a') return element(r.aux, parse_index(base.substr(1), name), name, r);
    fail(ErrorKind::invalid_argument, "unknown variable '" + std::string(name) + "'");
}

double phase2_value(const DyadRecord& r, std::string_view base, std::string_view name) {
    auto missing = [&]() -> double {
        fail(ErrorKind::schema, "record " + r.id + " has no validated value for '" + std::string(name) + "'");
    };
    if (base == "y") return r.y ? *r.y : missing();
    if (base == "delta") return r.delta ? *r.delta : missing();
    if (base == "x") return r.x ? *r.x : missing();
    if (base == "asthma") return r.asthma ? *r.asthma : missing();
    if (base == "gestation") return r.gestation_days ? *r.gestation_days : missing();
    if (base.size() > 1 && base[0] == 'z') {
        if (!r.z) missing();
        return element(*r.z, parse_index(base.substr(1), name), name, r);
    }
    return phase1_value(r, base, name);
}

}  // namespace

double variable(const DyadRecord& record, std::string_view name, Source source, const ImputedColumns* imputed,
                std::size_t row) {
    constexpr std::string_view suffix = "_star";
    if (name.size() > suffix.size() && name.substr(name.size() - suffix.size()) == suffix) {
        return phase1_value(record, name.substr(0, name.size() - suffix.size()), name);
    }
    switch (source) {
        case Source::phase1: return phase1_value(record, name, name);
        case Source::phase2: return phase2_value(record, name, name);
        case Source::imputed: {
            if (imputed != nullptr) {
                auto it = imputed->find(std::string(name));
                if (it != imputed->end()) return it->second.at(row);
            }
            return phase1_value(record, name, name);
        }
    }
    return 0.0;
}

namespace {

Eigen::MatrixXd covariate_matrix(std::span<const DyadRecord> records, std::span<const std::size_t> rows,
                                 const ModelSpec& spec, Source source, const ImputedColumns* imputed,
                                 bool intercept) {
    const auto n = static_cast<Eigen::Index>(rows.size());
    const Eigen::Index offset = intercept ? 1 : 0;
    Eigen::MatrixXd x(n, static_cast<Eigen::Index>(spec.covariates.size()) + offset);
    for (Eigen::Index i = 0; i < n; ++i) {
        const std::size_t r = rows[static_cast<std::size_t>(i)];
        if (intercept) x(i, 0) = 1.0;
        for (std::size_t j = 0; j < spec.covariates.size(); ++j) {
            x(i, static_cast<Eigen::Index>(j) + offset) = variable(records[r], spec.covariates[j], source, imputed, r);
        }
    }
    return x;
}

}  // namespace

models::CoxData cox_data(std::span<const DyadRecord> records, std::span<const std::size_t> rows,
                         const ModelSpec& spec, Source source, const ImputedColumns* imputed) {
    models::CoxData d;
    d.time.reserve(rows.size());
    d.event.reserve(rows.size());
    for (std::size_t r : rows) {
        d.time.push_back(variable(records[r], "y", source, imputed, r));
        d.event.push_back(variable(records[r], "delta", source, imputed, r) > 0.5 ? 1 : 0);
    }
    d.covariates = covariate_matrix(records, rows, spec, source, imputed, false);
    return d;
}

models::LogisticData logistic_data(std::span<const DyadRecord> records, std::span<const std::size_t> rows,
                                   const ModelSpec& spec, Source source, const ImputedColumns* imputed) {
    models::LogisticData d;
    d.outcome.reserve(rows.size());
    for (std::size_t r : rows) {
        d.outcome.push_back(variable(records[r], spec.outcome, source, imputed, r) > 0.5 ? 1 : 0);
    }
    d.covariates = covariate_matrix(records, rows, spec, source, imputed, true);
    return d;
}

models::FitResult fit(std::span<const DyadRecord> records, std::span<const std::size_t> rows,
                      const ModelSpec& spec, Source source, std::span<const double> weights,
                      const ImputedColumns* imputed, const models::FitOptions& options) {
    std::vector<double> ones;
    if (weights.empty()) {
        ones.assign(rows.size(), 1.0);
        weights = ones;
    }
    if (spec.kind == ModelKind::cox) {
        return models::fit_cox(cox_data(records, rows, spec, source, imputed), weights, options);
    }
    return models::fit_logistic(logistic_data(records, rows, spec, source, imputed), weights, options);
}

std::vector<std::size_t> model_rows(std::span<const DyadRecord> records, const ModelSpec& spec,
                                    bool validated_only) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (spec.kind == ModelKind::logistic && !records[i].in_asthma_frame) continue;
        if (validated_only && !records[i].validated) continue;
        rows.push_back(i);
    }
    return rows;
}

double effect_ratio(double beta, double increment) { return std::exp(beta * increment); }

}  // namespace twophase::analysis
