#include "twophase/imputation.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "twophase/error.hpp"
#include "twophase/parallel.hpp"

namespace twophase::imputation {

std::string_view to_string(TargetKind kind) {
    switch (kind) {
        case TargetKind::continuous: return "continuous";
        case TargetKind::binary: return "binary";
        case TargetKind::derived: return "derived";
    }
    return "continuous";
}

TargetKind target_kind_from_string(std::string_view name) {
    if (name == "continuous") return TargetKind::continuous;
    if (name == "binary") return TargetKind::binary;
    if (name == "derived") return TargetKind::derived;
    fail(ErrorKind::parse, "unknown target kind '" + std::string(name) + "'");
}

ImputationSpec default_spec(std::size_t z_count, const std::vector<bool>& z_binary, bool include_asthma,
                            std::optional<DerivedFunction> exposure_from_gestation) {
    std::vector<std::string> base{"y_star", "delta_star", "x_star"};
    for (std::size_t k = 0; k < z_count; ++k) base.push_back("z" + std::to_string(k) + "_star");
    ImputationSpec spec;
    spec.sequence.push_back({"delta", TargetKind::binary, base});
    spec.sequence.push_back({"y", TargetKind::continuous, base});
    if (exposure_from_gestation) {
        spec.sequence.push_back({"gestation", TargetKind::continuous, base});
        spec.sequence.push_back({"x", TargetKind::derived, {}});
        spec.derived["x"] = *exposure_from_gestation;
    } else {
        spec.sequence.push_back({"x", TargetKind::continuous, base});
    }
    for (std::size_t k = 0; k < z_count; ++k) {
        const bool binary = k < z_binary.size() && z_binary[k];
        spec.sequence.push_back({"z" + std::to_string(k), binary ? TargetKind::binary : TargetKind::continuous, base});
    }
    if (include_asthma) {
        auto p = base;
        p.push_back("asthma_star");
        spec.sequence.push_back({"asthma", TargetKind::binary, p});
    }
    return spec;
}

namespace {

bool has_phase2(const DyadRecord& r, const std::string& name) {
    try {
        (void)analysis::variable(r, name, analysis::Source::phase2);
        return true;
    } catch (const Error&) {
        return false;
    }
}

double expit(double eta) { return 1.0 / (1.0 + std::exp(-eta)); }

// Ridge-penalized logistic regression by Newton; the intercept is unpenalized.
void fit_penalized_logistic(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, SubModel& sub) {
    const auto p = x.cols();
    const double penalty = 1.0;
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
    Eigen::MatrixXd info;
    for (int it = 0; it < 100; ++it) {
        const Eigen::VectorXd mu = (x * beta).unaryExpr([](double e) { return expit(e); });
        Eigen::VectorXd grad = x.transpose() * (y - mu);
        info = x.transpose() * mu.cwiseProduct(Eigen::VectorXd::Ones(mu.size()) - mu).asDiagonal() * x;
        for (Eigen::Index j = 1; j < p; ++j) {
            grad(j) -= penalty * beta(j);
            info(j, j) += penalty;
        }
        const Eigen::VectorXd step = info.ldlt().solve(grad);
        beta += step;
        if (step.cwiseAbs().maxCoeff() < 1e-10) break;
    }
    sub.coefficients = beta;
    sub.coefficient_covariance = info.ldlt().solve(Eigen::MatrixXd::Identity(p, p));
    sub.penalized = true;
}

Eigen::MatrixXd lower_factor(const Eigen::MatrixXd& cov) {
    Eigen::LLT<Eigen::MatrixXd> llt(0.5 * (cov + cov.transpose()));
    if (llt.info() == Eigen::Success) return llt.matrixL();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (cov + cov.transpose()));
    const Eigen::VectorXd d = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * d.asDiagonal();
}

}  // namespace

ImputationModel fit_imputation(std::span<const DyadRecord> records, const ImputationSpec& spec) {
    ImputationModel model;
    model.spec = spec;
    std::size_t validated = 0;
    for (const auto& r : records) validated += r.validated ? 1 : 0;
    if (validated < spec.min_validated) {
        fail(ErrorKind::degenerate, "imputation needs at least " + std::to_string(spec.min_validated) +
                                        " validated records, found " + std::to_string(validated));
    }
    std::vector<std::string> earlier;
    for (const auto& target : spec.sequence) {
        SubModel sub;
        sub.name = target.name;
        sub.kind = target.kind;
        if (target.kind == TargetKind::derived) {
            if (!spec.derived.count(target.name)) {
                fail(ErrorKind::invalid_argument, "no function for derived target '" + target.name + "'");
            }
            model.sequence.push_back(sub);
            earlier.push_back(target.name);
            continue;
        }
        sub.predictors = target.predictors;
        for (const auto& e : earlier) {
            if (std::find(sub.predictors.begin(), sub.predictors.end(), e) == sub.predictors.end()) {
                sub.predictors.push_back(e);
            }
        }
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < records.size(); ++i) {
            if (!records[i].validated || !has_phase2(records[i], target.name)) continue;
            bool ok = true;
            for (const auto& p : sub.predictors) ok = ok && has_phase2(records[i], p);
            if (ok) rows.push_back(i);
        }
        if (rows.empty()) fail(ErrorKind::degenerate, "no validated values for '" + target.name + "'");
        const auto n = static_cast<Eigen::Index>(rows.size());
        const auto p = static_cast<Eigen::Index>(sub.predictors.size()) + 1;
        Eigen::MatrixXd x(n, p);
        Eigen::VectorXd y(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto& r = records[rows[static_cast<std::size_t>(i)]];
            x(i, 0) = 1.0;
            for (Eigen::Index j = 1; j < p; ++j) {
                x(i, j) = analysis::variable(r, sub.predictors[static_cast<std::size_t>(j - 1)], analysis::Source::phase2);
            }
            y(i) = analysis::variable(r, target.name, analysis::Source::phase2);
        }
        sub.fitted_rows = rows.size();
        earlier.push_back(target.name);

        if ((y.array() == y(0)).all()) {
            sub.constant = y(0);
            model.warnings.push_back("target '" + target.name + "' is constant among validated records; imputed as " +
                                     std::to_string(y(0)));
            model.sequence.push_back(std::move(sub));
            continue;
        }
        for (Eigen::Index j = 1; j < p; ++j) {
            if ((x.col(j) - y).cwiseAbs().maxCoeff() == 0.0) {
                sub.copy_of = sub.predictors[static_cast<std::size_t>(j - 1)];
                break;
            }
        }
        if (sub.copy_of) {
            model.sequence.push_back(std::move(sub));
            continue;
        }
        if (target.kind == TargetKind::continuous) {
            Eigen::MatrixXd xtx = x.transpose() * x;
            const double ridge = 1e-10 * xtx.diagonal().maxCoeff();
            xtx.diagonal().array() += ridge;
            Eigen::LDLT<Eigen::MatrixXd> ldlt(xtx);
            sub.coefficients = ldlt.solve(x.transpose() * y);
            sub.coefficient_covariance = ldlt.solve(Eigen::MatrixXd::Identity(p, p));
            const double rss = (y - x * sub.coefficients).squaredNorm();
            sub.residual_df = std::max<long>(1, static_cast<long>(n - p));
            sub.residual_variance = rss / static_cast<double>(sub.residual_df);
        } else {
            models::LogisticData data;
            data.covariates = x;
            for (Eigen::Index i = 0; i < n; ++i) data.outcome.push_back(y(i) > 0.5 ? 1 : 0);
            models::FitOptions opt;
            opt.throw_on_failure = false;
            models::FitResult fit;
            bool ok = false;
            try {
                fit = models::fit_logistic(data, opt);
                ok = fit.converged;
            } catch (const Error&) {
                ok = false;
            }
            if (ok) {
                sub.coefficients = fit.coefficients;
                sub.coefficient_covariance = fit.variance;
            } else {
                fit_penalized_logistic(x, y, sub);
                model.warnings.push_back("imputation model for '" + target.name +
                                         "' did not converge; using a ridge-penalized fit");
            }
        }
        model.sequence.push_back(std::move(sub));
    }
    return model;
}

analysis::ImputedColumns impute_once(std::span<const DyadRecord> records, const ImputationModel& model,
                                     std::uint64_t seed, std::uint64_t m) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(m), static_cast<std::uint32_t>(m >> 32)};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> normal;
    std::uniform_real_distribution<double> unif;

    analysis::ImputedColumns cols;
    const std::size_t n = records.size();
    std::vector<std::map<std::string, double>> drawn(n);
    for (const auto& sub : model.sequence) {
        std::vector<double> values(n);
        Eigen::VectorXd beta;
        double sigma = 0.0;
        if (!sub.constant && !sub.copy_of && sub.kind != TargetKind::derived) {
            beta = sub.coefficients;
            Eigen::MatrixXd l = lower_factor(sub.coefficient_covariance);
            double scale = 1.0;
            if (sub.kind == TargetKind::continuous) {
                std::chi_squared_distribution<double> chi(static_cast<double>(sub.residual_df));
                const double s2 = sub.residual_variance * static_cast<double>(sub.residual_df) / chi(rng);
                sigma = std::sqrt(s2);
                scale = sigma;
            }
            Eigen::VectorXd z(beta.size());
            for (Eigen::Index j = 0; j < z.size(); ++j) z(j) = normal(rng);
            beta += scale * (l * z);
        }
        const DerivedFunction* derived = nullptr;
        if (sub.kind == TargetKind::derived) derived = &model.spec.derived.at(sub.name);
        for (std::size_t i = 0; i < n; ++i) {
            const auto& r = records[i];
            double v = 0.0;
            if (model.spec.pass_through_validated && r.validated && has_phase2(r, sub.name)) {
                v = analysis::variable(r, sub.name, analysis::Source::phase2);
            } else if (derived != nullptr) {
                v = (*derived)(r, i, drawn[i]);
            } else if (sub.constant) {
                v = *sub.constant;
            } else {
                auto value_of = [&](const std::string& name) {
                    auto it = drawn[i].find(name);
                    if (it != drawn[i].end()) return it->second;
                    return analysis::variable(r, name, analysis::Source::phase1);
                };
                if (sub.copy_of) {
                    v = value_of(*sub.copy_of);
                } else {
                    double eta = beta(0);
                    for (std::size_t j = 0; j < sub.predictors.size(); ++j) {
                        eta += beta(static_cast<Eigen::Index>(j) + 1) * value_of(sub.predictors[j]);
                    }
                    if (sub.kind == TargetKind::continuous) {
                        v = eta + sigma * normal(rng);
                    } else {
                        v = unif(rng) < expit(eta) ? 1.0 : 0.0;
                    }
                }
            }
            drawn[i][sub.name] = v;
            values[i] = v;
        }
        cols[sub.name] = std::move(values);
    }
    return cols;
}

std::vector<analysis::ImputedColumns> impute(std::span<const DyadRecord> records, const ImputationModel& model,
                                             int replicates, std::uint64_t seed) {
    if (replicates < 1) fail(ErrorKind::invalid_argument, "at least one imputation is required");
    std::vector<analysis::ImputedColumns> out(static_cast<std::size_t>(replicates));
    parallel_for(out.size(), [&](std::size_t m) { out[m] = impute_once(records, model, seed, m); });
    return out;
}

MiInfluence mi_influence(std::span<const DyadRecord> records, const ImputationModel& model, int replicates,
                         const analysis::ModelSpec& analysis_spec, std::uint64_t seed) {
    if (replicates < 1) fail(ErrorKind::invalid_argument, "at least one imputation is required");
    const auto rows = analysis::model_rows(records, analysis_spec, false);
    const Eigen::Index target = analysis_spec.target_index();
    std::vector<std::optional<Eigen::VectorXd>> per(static_cast<std::size_t>(replicates));
    parallel_for(per.size(), [&](std::size_t m) {
        const auto cols = impute_once(records, model, seed, m);
        models::FitOptions opt;
        opt.throw_on_failure = false;
        try {
            const auto fit = analysis::fit(records, rows, analysis_spec, analysis::Source::imputed, {}, &cols, opt);
            if (fit.converged) per[m] = models::influence_for_target(fit, target);
        } catch (const Error&) {
        }
    });
    MiInfluence out;
    out.h.assign(records.size(), std::numeric_limits<double>::quiet_NaN());
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t m = 0; m < per.size(); ++m) {
        if (!per[m]) {
            out.dropped.push_back(static_cast<int>(m));
            continue;
        }
        ++out.used;
        mean += (*per[m] - mean) / static_cast<double>(out.used);
    }
    if (2 * static_cast<int>(out.dropped.size()) >= replicates) {
        fail(ErrorKind::convergence, std::to_string(out.dropped.size()) + " of " + std::to_string(replicates) +
                                         " imputed-data fits failed");
    }
    for (std::size_t k = 0; k < rows.size(); ++k) out.h[rows[k]] = mean(static_cast<Eigen::Index>(k));
    return out;
}

}  // namespace twophase::imputation
