#include "twophase/raking.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "twophase/error.hpp"

namespace twophase::raking {

Eigen::MatrixXd with_constant(const Eigen::MatrixXd& aux) {
    Eigen::MatrixXd out(aux.rows(), aux.cols() + 1);
    out.col(0).setOnes();
    out.rightCols(aux.cols()) = aux;
    return out;
}

namespace {

// Greedy column selection by modified Gram-Schmidt on sqrt(d)-scaled columns.
std::vector<Eigen::Index> independent_columns(const Eigen::MatrixXd& a, const Eigen::VectorXd& d, double tol) {
    std::vector<Eigen::Index> kept;
    std::vector<Eigen::VectorXd> basis;
    const Eigen::VectorXd sd = d.cwiseSqrt();
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
        Eigen::VectorXd v = a.col(j).cwiseProduct(sd);
        const double norm0 = v.norm();
        if (norm0 == 0.0) continue;
        for (const auto& q : basis) v -= q.dot(v) * q;
        for (const auto& q : basis) v -= q.dot(v) * q;
        const double norm = v.norm();
        if (norm <= tol * norm0) continue;
        basis.push_back(v / norm);
        kept.push_back(j);
    }
    return kept;
}

struct DualState {
    Eigen::VectorXd g;
    double value = 0.0;  // sum d (g - 1) - lambda'T, minimized
};

DualState dual(const Eigen::VectorXd& d, const Eigen::MatrixXd& a, const Eigen::VectorXd& t,
               const Eigen::VectorXd& lambda) {
    DualState s;
    const Eigen::VectorXd eta = a * lambda;
    s.g = eta.array().exp().matrix();
    s.value = d.dot(eta.array().expm1().matrix()) - lambda.dot(t);
    return s;
}

double residual(const Eigen::VectorXd& d, const Eigen::MatrixXd& a, const Eigen::VectorXd& t,
                const Eigen::VectorXd& g) {
    const Eigen::VectorXd totals = a.transpose() * d.cwiseProduct(g);
    const Eigen::VectorXd scale = a.cwiseAbs().transpose() * d;
    double worst = 0.0;
    for (Eigen::Index j = 0; j < t.size(); ++j) {
        const double s = std::max({std::abs(t(j)), scale(j), std::numeric_limits<double>::min()});
        worst = std::max(worst, std::abs(totals(j) - t(j)) / s);
    }
    return worst;
}

}  // namespace

CalibrationResult calibrate(std::span<const double> design_weights, const Eigen::MatrixXd& aux,
                            const Eigen::VectorXd& totals, const CalibrationOptions& options) {
    const auto n = aux.rows();
    if (static_cast<Eigen::Index>(design_weights.size()) != n) {
        fail(ErrorKind::invalid_argument, "design weights and auxiliary rows differ in length");
    }
    if (totals.size() != aux.cols()) {
        fail(ErrorKind::invalid_argument, "population totals and auxiliary columns differ in length");
    }
    if (n == 0) fail(ErrorKind::infeasible, "calibration needs at least one sampled row");
    Eigen::VectorXd d(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        d(i) = design_weights[static_cast<std::size_t>(i)];
        if (!(d(i) > 0.0) || !std::isfinite(d(i))) {
            fail(ErrorKind::domain, "design weights must be positive and finite");
        }
    }
    if (!aux.allFinite() || !totals.allFinite()) fail(ErrorKind::domain, "non-finite auxiliary value");

    CalibrationResult out;
    out.kept_columns = independent_columns(aux, d, options.collinearity_tolerance);
    for (Eigen::Index j = 0; j < aux.cols(); ++j) {
        if (std::find(out.kept_columns.begin(), out.kept_columns.end(), j) == out.kept_columns.end()) {
            out.dropped_columns.push_back(j);
            out.warnings.push_back("auxiliary column " + std::to_string(j) + " is collinear with earlier columns; dropped");
        }
    }
    const auto q = static_cast<Eigen::Index>(out.kept_columns.size());
    Eigen::MatrixXd a(n, q);
    Eigen::VectorXd t(q);
    for (Eigen::Index k = 0; k < q; ++k) {
        a.col(k) = aux.col(out.kept_columns[static_cast<std::size_t>(k)]);
        t(k) = totals(out.kept_columns[static_cast<std::size_t>(k)]);
    }

    Eigen::VectorXd lambda = Eigen::VectorXd::Zero(q);
    DualState state = dual(d, a, t, lambda);
    double res = residual(d, a, t, state.g);
    int it = 0;
    int polish = 0;
    double before = std::numeric_limits<double>::infinity();
    while (it < options.max_iterations) {
        if (res < options.tolerance) {
            // keep stepping while the residual still falls, so the duality gap closes too
            if (polish >= 5 || !(res < 0.5 * before) || res < 1e-13) break;
            ++polish;
        }
        before = res;
        ++it;
        const Eigen::VectorXd dg = d.cwiseProduct(state.g);
        const Eigen::VectorXd grad = a.transpose() * dg - t;
        const Eigen::MatrixXd hess = a.transpose() * dg.asDiagonal() * a;
        Eigen::LDLT<Eigen::MatrixXd> ldlt(hess);
        if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
            fail(ErrorKind::infeasible, "calibration Hessian is singular; totals cannot be matched");
        }
        const Eigen::VectorXd step = ldlt.solve(grad);
        if (!step.allFinite()) fail(ErrorKind::infeasible, "calibration step is not finite");
        double scale = 1.0;
        DualState next;
        bool accepted = false;
        if (polish > 0) {
            // objective changes are below rounding here; judge the full step by the residual
            next = dual(d, a, t, lambda - step);
            if (!next.g.allFinite() || !(residual(d, a, t, next.g) < res)) break;
            lambda -= step;
            accepted = true;
        }
        for (int h = 0; h < 60 && !accepted; ++h) {
            const Eigen::VectorXd trial = lambda - scale * step;
            next = dual(d, a, t, trial);
            if (next.g.allFinite() && std::isfinite(next.value) &&
                next.value <= state.value - 1e-4 * scale * grad.dot(step) + 1e-14 * std::abs(state.value)) {
                lambda = trial;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if (!accepted) break;
        state = std::move(next);
        res = residual(d, a, t, state.g);
        if (lambda.cwiseAbs().maxCoeff() > 700.0) break;
    }
    out.iterations = it;
    out.constraint_residual = res;
    if (!(res < options.tolerance)) {
        fail(ErrorKind::infeasible, "calibration did not converge (residual " + std::to_string(res) +
                                        "); the population totals are likely outside the convex hull of the sample");
    }
    out.lambda = lambda;
    out.g = state.g;
    double primal = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double g = state.g(i);
        primal += d(i) * (g * std::log(g) - g + 1.0);
    }
    out.primal_objective = primal;
    out.dual_objective = lambda.dot(t) - d.dot((state.g.array() - 1.0).matrix());
    return out;
}

CalibrationResult calibrate_population(std::span<const double> pi_sampled, const Eigen::MatrixXd& aux,
                                       std::span<const bool> sampled, const CalibrationOptions& options) {
    if (static_cast<Eigen::Index>(sampled.size()) != aux.rows()) {
        fail(ErrorKind::invalid_argument, "sample indicator and auxiliary rows differ in length");
    }
    std::vector<Eigen::Index> idx;
    for (std::size_t i = 0; i < sampled.size(); ++i) {
        if (sampled[i]) idx.push_back(static_cast<Eigen::Index>(i));
    }
    if (idx.size() != pi_sampled.size()) {
        fail(ErrorKind::invalid_argument, "one inclusion probability per sampled row is required");
    }
    Eigen::MatrixXd a(static_cast<Eigen::Index>(idx.size()), aux.cols());
    std::vector<double> d(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) {
        a.row(static_cast<Eigen::Index>(k)) = aux.row(idx[k]);
        if (!(pi_sampled[k] > 0.0 && pi_sampled[k] <= 1.0)) {
            fail(ErrorKind::domain, "inclusion probabilities must lie in (0, 1]");
        }
        d[k] = 1.0 / pi_sampled[k];
    }
    const Eigen::VectorXd totals = aux.colwise().sum().transpose();
    return calibrate(d, a, totals, options);
}

namespace {

void check_sample(std::span<const DyadRecord> records, const WeightedSample& sample) {
    const auto n = sample.rows.size();
    if (sample.weights.size() != n || sample.strata.size() != n ||
        (!sample.clusters.empty() && sample.clusters.size() != n)) {
        fail(ErrorKind::invalid_argument, "sample rows, weights, strata and clusters differ in length");
    }
    if (n == 0) fail(ErrorKind::degenerate, "no validated rows to analyze");
    for (std::size_t k = 0; k < n; ++k) {
        if (sample.rows[k] >= records.size()) fail(ErrorKind::invalid_argument, "sample row out of range");
        if (!records[sample.rows[k]].validated) {
            fail(ErrorKind::schema, "record " + records[sample.rows[k]].id + " is not validated");
        }
        if (!(sample.weights[k] > 0.0) || !std::isfinite(sample.weights[k])) {
            fail(ErrorKind::domain, "design weights must be positive and finite");
        }
    }
}

}  // namespace

Estimate ipw_fit(const analysis::ModelSpec& spec, std::span<const DyadRecord> records,
                 const WeightedSample& sample) {
    check_sample(records, sample);
    Estimate est;
    est.fit = analysis::fit(records, sample.rows, spec, analysis::Source::phase2, sample.weights);
    est.variance = models::sandwich_variance(est.fit, sample.strata, sample.clusters, &est.warnings);
    return est;
}

Estimate raking_fit(const analysis::ModelSpec& spec, std::span<const DyadRecord> records,
                    const WeightedSample& sample, const Eigen::MatrixXd& aux_rows,
                    const Eigen::VectorXd& population_totals, const CalibrationOptions& options) {
    check_sample(records, sample);
    if (aux_rows.rows() != static_cast<Eigen::Index>(sample.rows.size())) {
        fail(ErrorKind::invalid_argument, "one auxiliary row per sample row is required");
    }
    const Eigen::MatrixXd a = with_constant(aux_rows);
    Estimate est;
    est.calibration = calibrate(sample.weights, a, population_totals, options);
    const auto& cal = *est.calibration;
    est.warnings = cal.warnings;
    std::vector<double> w(sample.rows.size());
    for (std::size_t k = 0; k < w.size(); ++k) w[k] = sample.weights[k] * cal.g(static_cast<Eigen::Index>(k));
    est.fit = analysis::fit(records, sample.rows, spec, analysis::Source::phase2, w);

    Eigen::MatrixXd kept(a.rows(), static_cast<Eigen::Index>(cal.kept_columns.size()));
    for (Eigen::Index k = 0; k < kept.cols(); ++k) kept.col(k) = a.col(cal.kept_columns[static_cast<std::size_t>(k)]);
    const Eigen::Map<const Eigen::VectorXd> wv(w.data(), static_cast<Eigen::Index>(w.size()));
    Eigen::MatrixXd unit = est.fit.influence;
    for (Eigen::Index i = 0; i < unit.rows(); ++i) unit.row(i) /= wv(i);
    const Eigen::MatrixXd gram = kept.transpose() * wv.asDiagonal() * kept;
    const Eigen::MatrixXd coef = gram.ldlt().solve(kept.transpose() * wv.asDiagonal() * unit);
    Eigen::MatrixXd contrib = unit - kept * coef;
    for (Eigen::Index i = 0; i < contrib.rows(); ++i) contrib.row(i) *= wv(i);
    est.variance = models::sandwich_variance(contrib, sample.strata, sample.clusters, &est.warnings);
    return est;
}

}  // namespace twophase::raking
