#include "twophase/models.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "twophase/error.hpp"

namespace twophase::models {

namespace {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

void check_weights(std::span<const double> weights, Index n) {
    if (static_cast<Index>(weights.size()) != n) {
        fail(ErrorKind::invalid_argument, "weights length does not match the number of rows");
    }
    for (double w : weights) {
        if (!(w > 0.0) || !std::isfinite(w)) fail(ErrorKind::invalid_argument, "weights must be positive and finite");
    }
}

double mean_weight(std::span<const double> weights) {
    return std::accumulate(weights.begin(), weights.end(), 0.0) / static_cast<double>(weights.size());
}

/// Largest |beta_j| * sd(x_j) over non-constant columns; a monotone likelihood
/// pushes this without bound while the score decays to zero.
double max_standardized_effect(const MatrixXd& x, const VectorXd& beta) {
    double worst = 0.0;
    for (Index j = 0; j < x.cols(); ++j) {
        const double mean = x.col(j).mean();
        const double sd = std::sqrt((x.col(j).array() - mean).square().mean());
        if (sd > 0.0) worst = std::max(worst, std::abs(beta(j)) * sd);
    }
    return worst;
}

constexpr double kSeparationEffect = 20.0;

struct CoxPass {
    double loglik = 0.0;
    VectorXd score;
    MatrixXd information;
};

/// Row order sorted by ascending time, plus the start of each block of tied times.
struct TimeOrder {
    std::vector<Index> order;
    std::vector<std::size_t> block_start;  // into order, ascending; final entry = n
};

TimeOrder time_order(const CoxData& data) {
    const Index n = data.rows();
    TimeOrder t;
    t.order.resize(static_cast<std::size_t>(n));
    std::iota(t.order.begin(), t.order.end(), Index{0});
    std::stable_sort(t.order.begin(), t.order.end(),
                     [&](Index a, Index b) { return data.time[a] < data.time[b]; });
    for (std::size_t i = 0; i < t.order.size(); ++i) {
        if (i == 0 || data.time[t.order[i]] != data.time[t.order[i - 1]]) t.block_start.push_back(i);
    }
    t.block_start.push_back(t.order.size());
    return t;
}

VectorXd shifted_linear_predictor(const CoxData& data, const VectorXd& beta) {
    VectorXd eta = data.covariates * beta;
    if (eta.size() > 0) eta.array() -= eta.maxCoeff();
    return eta;
}

CoxPass cox_pass(const CoxData& data, std::span<const double> w, const VectorXd& beta, const TimeOrder& t,
                 bool want_information) {
    const Index p = data.covariates.cols();
    const VectorXd eta = shifted_linear_predictor(data, beta);
    CoxPass out;
    out.score = VectorXd::Zero(p);
    if (want_information) out.information = MatrixXd::Zero(p, p);

    double s0 = 0.0;
    VectorXd s1 = VectorXd::Zero(p);
    MatrixXd s2 = MatrixXd::Zero(p, p);
    for (std::size_t b = t.block_start.size() - 1; b-- > 0;) {
        const std::size_t begin = t.block_start[b];
        const std::size_t end = t.block_start[b + 1];
        double events_w = 0.0;
        VectorXd events_x = VectorXd::Zero(p);
        double events_eta = 0.0;
        for (std::size_t k = begin; k < end; ++k) {
            const Index i = t.order[k];
            const double r = w[i] * std::exp(eta(i));
            s0 += r;
            s1.noalias() += r * data.covariates.row(i).transpose();
            if (want_information) s2.noalias() += r * data.covariates.row(i).transpose() * data.covariates.row(i);
            if (data.event[i]) {
                events_w += w[i];
                events_x.noalias() += w[i] * data.covariates.row(i).transpose();
                events_eta += w[i] * eta(i);
            }
        }
        if (events_w == 0.0) continue;
        const VectorXd xbar = s1 / s0;
        out.loglik += events_eta - events_w * std::log(s0);
        out.score += events_x - events_w * xbar;
        if (want_information) out.information += events_w * (s2 / s0 - xbar * xbar.transpose());
    }
    return out;
}

/// Per-record unweighted score residuals U_i (Breslow), rows of an n x p matrix.
MatrixXd cox_score_residuals(const CoxData& data, std::span<const double> w, const VectorXd& beta,
                             const TimeOrder& t) {
    const Index n = data.rows();
    const Index p = data.covariates.cols();
    const VectorXd eta = shifted_linear_predictor(data, beta);

    // Risk-set sums at each distinct time.
    const std::size_t blocks = t.block_start.size() - 1;
    std::vector<double> s0(blocks);
    MatrixXd xbar(static_cast<Index>(blocks), p);
    {
        double acc0 = 0.0;
        VectorXd acc1 = VectorXd::Zero(p);
        for (std::size_t b = blocks; b-- > 0;) {
            for (std::size_t k = t.block_start[b]; k < t.block_start[b + 1]; ++k) {
                const Index i = t.order[k];
                const double r = w[i] * std::exp(eta(i));
                acc0 += r;
                acc1.noalias() += r * data.covariates.row(i).transpose();
            }
            s0[b] = acc0;
            xbar.row(static_cast<Index>(b)) = (acc1 / acc0).transpose();
        }
    }

    MatrixXd u = MatrixXd::Zero(n, p);
    double hazard = 0.0;  // cumulative sum of dN_w / S0
    VectorXd weighted_mean = VectorXd::Zero(p);  // cumulative sum of dN_w / S0 * xbar
    for (std::size_t b = 0; b < blocks; ++b) {
        double events_w = 0.0;
        for (std::size_t k = t.block_start[b]; k < t.block_start[b + 1]; ++k) {
            const Index i = t.order[k];
            if (data.event[i]) events_w += w[i];
        }
        if (events_w > 0.0) {
            const double dh = events_w / s0[b];
            hazard += dh;
            weighted_mean.noalias() += dh * xbar.row(static_cast<Index>(b)).transpose();
        }
        for (std::size_t k = t.block_start[b]; k < t.block_start[b + 1]; ++k) {
            const Index i = t.order[k];
            const double r = std::exp(eta(i));
            VectorXd ui = -r * (hazard * data.covariates.row(i).transpose() - weighted_mean);
            if (data.event[i]) ui += data.covariates.row(i).transpose() - xbar.row(static_cast<Index>(b)).transpose();
            u.row(i) = ui.transpose();
        }
    }
    return u;
}

template <class Pass>
struct NewtonOutcome {
    VectorXd beta;
    Pass pass;
    int iterations = 0;
    bool converged = false;
    std::string diagnostics;
};

template <class Pass, class Evaluate>
NewtonOutcome<Pass> newton(VectorXd beta, std::span<const double> w, const FitOptions& options,
                           Evaluate&& evaluate) {
    const double scale = mean_weight(w);
    NewtonOutcome<Pass> out;
    Pass current = evaluate(beta, true);
    for (int iter = 0; iter < options.max_iterations; ++iter) {
        out.iterations = iter;
        const double grad = current.score.size() ? current.score.cwiseAbs().maxCoeff() / scale : 0.0;
        if (grad < options.gradient_tolerance) {
            out.converged = true;
            // one more full step; kept only if it shrinks the score
            Eigen::LDLT<MatrixXd> ldlt(current.information);
            if (grad > 0.0 && ldlt.info() == Eigen::Success && ldlt.isPositive()) {
                const VectorXd candidate = beta + ldlt.solve(current.score);
                Pass trial = evaluate(candidate, true);
                if (candidate.allFinite() && std::isfinite(trial.loglik) &&
                    trial.score.cwiseAbs().maxCoeff() / scale < grad) {
                    beta = candidate;
                    current = std::move(trial);
                }
            }
            break;
        }
        Eigen::LDLT<MatrixXd> ldlt(current.information);
        if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
            ldlt.vectorD().minCoeff() <= 1e-14 * std::max(1.0, ldlt.vectorD().maxCoeff())) {
            out.diagnostics = "information matrix is singular; covariates may be collinear or constant";
            break;
        }
        const VectorXd step = ldlt.solve(current.score);
        double factor = 1.0;
        Pass trial;
        VectorXd candidate;
        bool improved = false;
        for (int halving = 0; halving < 30; ++halving) {
            candidate = beta + factor * step;
            trial = evaluate(candidate, true);
            if (std::isfinite(trial.loglik) && trial.loglik >= current.loglik - 1e-12 * std::abs(current.loglik)) {
                improved = true;
                break;
            }
            factor *= 0.5;
        }
        if (!improved) {
            out.diagnostics = "step halving failed to increase the likelihood";
            break;
        }
        beta = candidate;
        current = std::move(trial);
        out.iterations = iter + 1;
    }
    if (!out.converged && out.diagnostics.empty()) {
        const double grad = current.score.size() ? current.score.cwiseAbs().maxCoeff() / scale : 0.0;
        out.converged = grad < options.gradient_tolerance;
        if (!out.converged) {
            std::ostringstream msg;
            msg << "no convergence after " << options.max_iterations << " iterations (score max-norm " << grad
                << ")";
            out.diagnostics = msg.str();
        }
    }
    out.beta = std::move(beta);
    out.pass = std::move(current);
    return out;
}

void finish(FitResult& fit, const MatrixXd& covariates, const FitOptions& options, const char* model) {
    if (fit.converged) {
        const double effect = max_standardized_effect(covariates, fit.coefficients);
        if (effect > kSeparationEffect) {
            std::ostringstream msg;
            msg << "coefficients diverge (max |beta_j| * sd(x_j) = " << effect
                << "); the likelihood is monotone, indicating separation";
            fit.converged = false;
            fit.diagnostics = msg.str();
        }
    }
    if (!fit.converged && options.throw_on_failure) {
        fail(ErrorKind::convergence, std::string(model) + " fit failed: " + fit.diagnostics);
    }
}

MatrixXd inverse_information(const MatrixXd& information) {
    const Index p = information.rows();
    Eigen::LDLT<MatrixXd> ldlt(information);
    if (ldlt.info() != Eigen::Success) {
        fail(ErrorKind::ill_conditioned, "information matrix cannot be factorized");
    }
    MatrixXd inv = ldlt.solve(MatrixXd::Identity(p, p));
    return 0.5 * (inv + inv.transpose());
}

}  // namespace

double cox_log_partial_likelihood(const CoxData& data, std::span<const double> weights, const VectorXd& beta) {
    check_weights(weights, data.rows());
    return cox_pass(data, weights, beta, time_order(data), false).loglik;
}

VectorXd cox_score(const CoxData& data, std::span<const double> weights, const VectorXd& beta) {
    check_weights(weights, data.rows());
    return cox_pass(data, weights, beta, time_order(data), false).score;
}

FitResult fit_cox(const CoxData& data, std::span<const double> weights, const FitOptions& options) {
    const Index n = data.rows();
    const Index p = data.covariates.cols();
    if (static_cast<Index>(data.time.size()) != n || static_cast<Index>(data.event.size()) != n) {
        fail(ErrorKind::invalid_argument, "Cox data columns differ in length");
    }
    check_weights(weights, n);
    if (p == 0) fail(ErrorKind::invalid_argument, "Cox model needs at least one covariate");
    if (std::none_of(data.event.begin(), data.event.end(), [](int e) { return e != 0; })) {
        fail(ErrorKind::degenerate, "Cox model needs at least one event");
    }
    if (!data.covariates.allFinite()) fail(ErrorKind::invalid_argument, "Cox covariates must be finite");

    const TimeOrder order = time_order(data);
    auto outcome = newton<CoxPass>(VectorXd::Zero(p), weights, options, [&](const VectorXd& b, bool info) {
        return cox_pass(data, weights, b, order, info);
    });

    FitResult fit;
    fit.coefficients = outcome.beta;
    fit.information = outcome.pass.information;
    fit.log_likelihood = outcome.pass.loglik;
    fit.converged = outcome.converged;
    fit.iterations = outcome.iterations;
    fit.diagnostics = outcome.diagnostics;
    fit.weights.assign(weights.begin(), weights.end());
    finish(fit, data.covariates, options, "Cox");
    if (!fit.converged) return fit;

    fit.variance = inverse_information(fit.information);
    MatrixXd u = cox_score_residuals(data, weights, fit.coefficients, order);
    for (Index i = 0; i < n; ++i) u.row(i) *= weights[i];
    fit.influence = u * fit.variance;  // rows: (I^{-1} w_i U_i)^T, I^{-1} symmetric
    return fit;
}

FitResult fit_cox(const CoxData& data, const FitOptions& options) {
    const std::vector<double> ones(static_cast<std::size_t>(data.rows()), 1.0);
    return fit_cox(data, ones, options);
}

namespace {

struct LogisticPass {
    double loglik = 0.0;
    VectorXd score;
    MatrixXd information;
};

double log1p_exp(double eta) { return eta > 0 ? eta + std::log1p(std::exp(-eta)) : std::log1p(std::exp(eta)); }

double expit(double eta) {
    if (eta >= 0) return 1.0 / (1.0 + std::exp(-eta));
    const double e = std::exp(eta);
    return e / (1.0 + e);
}

LogisticPass logistic_pass(const LogisticData& data, std::span<const double> w, const VectorXd& beta,
                           bool want_information) {
    const Index n = data.rows();
    const Index p = data.covariates.cols();
    const VectorXd eta = data.covariates * beta;
    LogisticPass out;
    VectorXd resid(n);
    VectorXd curvature(n);
    for (Index i = 0; i < n; ++i) {
        const double pi = expit(eta(i));
        out.loglik += w[i] * (data.outcome[i] * eta(i) - log1p_exp(eta(i)));
        resid(i) = w[i] * (data.outcome[i] - pi);
        curvature(i) = w[i] * pi * (1.0 - pi);
    }
    out.score = data.covariates.transpose() * resid;
    if (want_information) {
        out.information = MatrixXd::Zero(p, p);
        out.information.selfadjointView<Eigen::Lower>().rankUpdate(
            (data.covariates.array().colwise() * curvature.array().sqrt()).matrix().transpose());
        out.information = out.information.selfadjointView<Eigen::Lower>();
    }
    return out;
}

}  // namespace

double logistic_log_likelihood(const LogisticData& data, std::span<const double> weights, const VectorXd& beta) {
    check_weights(weights, data.rows());
    return logistic_pass(data, weights, beta, false).loglik;
}

VectorXd logistic_score(const LogisticData& data, std::span<const double> weights, const VectorXd& beta) {
    check_weights(weights, data.rows());
    return logistic_pass(data, weights, beta, false).score;
}

FitResult fit_logistic(const LogisticData& data, std::span<const double> weights, const FitOptions& options) {
    const Index n = data.rows();
    const Index p = data.covariates.cols();
    if (static_cast<Index>(data.outcome.size()) != n) {
        fail(ErrorKind::invalid_argument, "logistic outcome length does not match covariates");
    }
    check_weights(weights, n);
    if (p == 0) fail(ErrorKind::invalid_argument, "logistic model needs at least one column");
    const auto positives = std::count(data.outcome.begin(), data.outcome.end(), 1);
    const auto negatives = std::count(data.outcome.begin(), data.outcome.end(), 0);
    if (positives + negatives != n) fail(ErrorKind::invalid_argument, "logistic outcome must be 0/1");
    if (positives == 0 || negatives == 0) {
        fail(ErrorKind::degenerate, "logistic model needs both outcome classes");
    }
    if (!data.covariates.allFinite()) fail(ErrorKind::invalid_argument, "logistic covariates must be finite");

    auto outcome = newton<LogisticPass>(VectorXd::Zero(p), weights, options, [&](const VectorXd& b, bool info) {
        return logistic_pass(data, weights, b, info);
    });

    FitResult fit;
    fit.coefficients = outcome.beta;
    fit.information = outcome.pass.information;
    fit.log_likelihood = outcome.pass.loglik;
    fit.converged = outcome.converged;
    fit.iterations = outcome.iterations;
    fit.diagnostics = outcome.diagnostics;
    fit.weights.assign(weights.begin(), weights.end());
    if (fit.converged) {
        const VectorXd eta = data.covariates * fit.coefficients;
        if (eta.size() && eta.cwiseAbs().maxCoeff() > 35.0) {
            fit.converged = false;
            fit.diagnostics = "fitted probabilities numerically 0 or 1; the outcome is separated";
        }
    }
    finish(fit, data.covariates, options, "logistic");
    if (!fit.converged) return fit;

    fit.variance = inverse_information(fit.information);
    const VectorXd eta = data.covariates * fit.coefficients;
    VectorXd resid(n);
    for (Index i = 0; i < n; ++i) resid(i) = weights[i] * (data.outcome[i] - expit(eta(i)));
    fit.influence = (data.covariates.array().colwise() * resid.array()).matrix() * fit.variance;
    return fit;
}

FitResult fit_logistic(const LogisticData& data, const FitOptions& options) {
    const std::vector<double> ones(static_cast<std::size_t>(data.rows()), 1.0);
    return fit_logistic(data, ones, options);
}

VectorXd influence_for_target(const FitResult& fit, Index target) {
    if (target < 0 || target >= fit.influence.cols()) {
        fail(ErrorKind::invalid_argument, "target coefficient index " + std::to_string(target) + " out of range");
    }
    return fit.influence.col(target);
}

VectorXd unit_influence_for_target(const FitResult& fit, Index target) {
    VectorXd h = influence_for_target(fit, target);
    for (Index i = 0; i < h.size(); ++i) h(i) /= fit.weights[static_cast<std::size_t>(i)];
    return h;
}

MatrixXd sandwich_variance(const MatrixXd& contributions, std::span<const std::string> strata,
                           std::span<const std::string> clusters, std::vector<std::string>* warnings) {
    const Index n = contributions.rows();
    const Index p = contributions.cols();
    if (static_cast<Index>(strata.size()) != n) {
        fail(ErrorKind::invalid_argument, "one stratum id is needed per contribution row");
    }
    if (!clusters.empty() && static_cast<Index>(clusters.size()) != n) {
        fail(ErrorKind::invalid_argument, "one cluster id is needed per contribution row");
    }

    // Cluster totals in first-appearance order, each tagged with its first row's stratum.
    std::vector<VectorXd> totals;
    std::vector<std::string> cluster_stratum;
    std::unordered_map<std::string, std::size_t> cluster_index;
    for (Index i = 0; i < n; ++i) {
        std::size_t k;
        if (clusters.empty()) {
            k = totals.size();
            totals.emplace_back(VectorXd::Zero(p));
            cluster_stratum.push_back(strata[i]);
        } else {
            auto [it, inserted] = cluster_index.emplace(clusters[i], totals.size());
            if (inserted) {
                totals.emplace_back(VectorXd::Zero(p));
                cluster_stratum.push_back(strata[i]);
            }
            k = it->second;
        }
        totals[k] += contributions.row(i).transpose();
    }

    std::map<std::string, std::vector<std::size_t>> members;
    for (std::size_t k = 0; k < totals.size(); ++k) members[cluster_stratum[k]].push_back(k);

    std::vector<std::size_t> pooled;
    std::vector<std::vector<std::size_t>> groups;
    for (auto& [id, ks] : members) {
        if (ks.size() == 1) {
            pooled.push_back(ks.front());
            if (warnings) warnings->push_back("stratum " + id + " has a single sampled unit; pooled for variance");
        } else {
            groups.push_back(std::move(ks));
        }
    }
    if (pooled.size() >= 2) {
        groups.push_back(pooled);
    }

    MatrixXd v = MatrixXd::Zero(p, p);
    for (const auto& g : groups) {
        VectorXd mean = VectorXd::Zero(p);
        for (auto k : g) mean += totals[k];
        mean /= static_cast<double>(g.size());
        MatrixXd ss = MatrixXd::Zero(p, p);
        for (auto k : g) {
            const VectorXd d = totals[k] - mean;
            ss.noalias() += d * d.transpose();
        }
        const double m = static_cast<double>(g.size());
        v += (m / (m - 1.0)) * ss;
    }
    if (pooled.size() == 1) {
        const VectorXd& t = totals[pooled.front()];
        v.noalias() += t * t.transpose();
        if (warnings) warnings->push_back("single pooled unit contributes its uncentered square");
    }
    return 0.5 * (v + v.transpose());
}

MatrixXd sandwich_variance(const FitResult& fit, std::span<const std::string> strata,
                           std::span<const std::string> clusters, std::vector<std::string>* warnings) {
    return sandwich_variance(fit.influence, strata, clusters, warnings);
}

}  // namespace twophase::models
