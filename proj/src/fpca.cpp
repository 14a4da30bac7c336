#include "twophase/fpca.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <boost/math/distributions/normal.hpp>

#include "twophase/error.hpp"
#include "twophase/parallel.hpp"

namespace twophase::fpca {

namespace {

constexpr double kRange = kDomainEnd - kDomainStart;
constexpr double kInf = std::numeric_limits<double>::infinity();

double epanechnikov(double u) { return std::abs(u) < 1.0 ? 0.75 * (1.0 - u * u) : 0.0; }

bool inside(double t) { return t >= kDomainStart && t <= kDomainEnd; }

// One-day bins over the domain holding count, sum and sum of squares.
struct Bins1 {
    std::vector<double> n, s, q;
    explicit Bins1(std::size_t size = 0) : n(size, 0.0), s(size, 0.0), q(size, 0.0) {}
    std::size_t size() const { return n.size(); }
    void add(std::size_t b, double v) {
        n[b] += 1.0;
        s[b] += v;
        q[b] += v * v;
    }
    void subtract_into(const Bins1& other, Bins1& out) const {
        out = *this;
        for (std::size_t b = 0; b < size(); ++b) {
            out.n[b] -= other.n[b];
            out.s[b] -= other.s[b];
            out.q[b] -= other.q[b];
        }
    }
};

constexpr std::size_t kDayBins = static_cast<std::size_t>(kRange) + 1;

std::size_t day_bin(double t) {
    const double b = std::round(t - kDomainStart);
    return static_cast<std::size_t>(std::clamp(b, 0.0, static_cast<double>(kDayBins - 1)));
}

double day_center(std::size_t b) { return kDomainStart + static_cast<double>(b); }

// Local-linear estimate at x0; nullopt when the window holds no data.
std::optional<double> local_linear(const Bins1& bins, double x0, double h) {
    double s0 = 0, s1 = 0, s2 = 0, t0 = 0, t1 = 0;
    const double lo = x0 - h, hi = x0 + h;
    const auto b0 = static_cast<std::size_t>(std::max(0.0, std::ceil(lo - kDomainStart)));
    for (std::size_t b = b0; b < bins.size(); ++b) {
        const double c = day_center(b);
        if (c >= hi) break;
        if (bins.n[b] == 0.0) continue;
        const double d = c - x0;
        const double k = epanechnikov(d / h);
        if (k == 0.0) continue;
        s0 += k * bins.n[b];
        s1 += k * bins.n[b] * d;
        s2 += k * bins.n[b] * d * d;
        t0 += k * bins.s[b];
        t1 += k * bins.s[b] * d;
    }
    if (s0 <= 0.0) return std::nullopt;
    const double det = s2 * s0 - s1 * s1;
    if (det <= 1e-10 * s0 * s2 || det <= 0.0) return t0 / s0;
    return (s2 * t0 - s1 * t1) / det;
}

// Local linear with the window widened until it holds data.
double local_linear_widening(const Bins1& bins, double x0, double h) {
    for (int k = 0; k < 12; ++k, h *= 1.5) {
        if (auto v = local_linear(bins, x0, h)) return *v;
    }
    fail(ErrorKind::degenerate, "no observations to smooth");
}

std::vector<double> candidate_bandwidths(double lo, double hi) {
    std::vector<double> out;
    constexpr int kCount = 12;
    for (int k = 0; k < kCount; ++k) {
        out.push_back(lo * std::pow(hi / lo, static_cast<double>(k) / (kCount - 1)));
    }
    return out;
}

double cv_bandwidth_1d(const std::vector<Bins1>& folds, const Bins1& total) {
    double best_h = kRange / 10.0;
    double best = kInf;
    Bins1 train;
    for (double h : candidate_bandwidths(kRange / 60.0, kRange / 4.0)) {
        double err = 0.0;
        for (const auto& fold : folds) {
            total.subtract_into(fold, train);
            for (std::size_t b = 0; b < fold.size() && std::isfinite(err); ++b) {
                if (fold.n[b] == 0.0) continue;
                auto m = local_linear(train, day_center(b), h);
                if (!m) {
                    err = kInf;
                    break;
                }
                err += fold.q[b] - 2.0 * *m * fold.s[b] + fold.n[b] * *m * *m;
            }
            if (!std::isfinite(err)) break;
        }
        if (err < best) {
            best = err;
            best_h = h;
        }
    }
    return best_h;
}

// Square cells on the output grid for raw covariance products.
struct Bins2 {
    std::size_t g = 0;
    std::vector<double> n, s, q;
    explicit Bins2(std::size_t size = 0) : g(size), n(size * size, 0.0), s(size * size, 0.0), q(size * size, 0.0) {}
    void add(std::size_t i, std::size_t j, double v) {
        const std::size_t c = i * g + j;
        n[c] += 1.0;
        s[c] += v;
        q[c] += v * v;
    }
    void subtract_into(const Bins2& other, Bins2& out) const {
        out = *this;
        for (std::size_t c = 0; c < n.size(); ++c) {
            out.n[c] -= other.n[c];
            out.s[c] -= other.s[c];
            out.q[c] -= other.q[c];
        }
    }
};

std::optional<double> local_linear_2d(const Bins2& bins, const std::vector<double>& grid, double x0, double y0,
                                      double h) {
    Eigen::Matrix3d a = Eigen::Matrix3d::Zero();
    Eigen::Vector3d b = Eigen::Vector3d::Zero();
    const double step = grid[1] - grid[0];
    const auto lo_i = static_cast<std::size_t>(std::max(0.0, std::ceil((x0 - h - grid[0]) / step)));
    const auto lo_j = static_cast<std::size_t>(std::max(0.0, std::ceil((y0 - h - grid[0]) / step)));
    for (std::size_t i = lo_i; i < bins.g && grid[i] < x0 + h; ++i) {
        const double ki = epanechnikov((grid[i] - x0) / h);
        if (ki == 0.0) continue;
        for (std::size_t j = lo_j; j < bins.g && grid[j] < y0 + h; ++j) {
            const std::size_t c = i * bins.g + j;
            if (bins.n[c] == 0.0) continue;
            const double k = ki * epanechnikov((grid[j] - y0) / h);
            if (k == 0.0) continue;
            const Eigen::Vector3d z(1.0, grid[i] - x0, grid[j] - y0);
            a.noalias() += (k * bins.n[c]) * z * z.transpose();
            b.noalias() += (k * bins.s[c]) * z;
        }
    }
    if (a(0, 0) <= 0.0) return std::nullopt;
    Eigen::FullPivLU<Eigen::Matrix3d> lu(a);
    if (lu.rank() < 3 || lu.rcond() < 1e-12) return b(0) / a(0, 0);
    return lu.solve(b)(0);
}

double cv_bandwidth_2d(const std::vector<Bins2>& folds, const Bins2& total, const std::vector<double>& grid) {
    double best_h = kRange / 10.0;
    double best = kInf;
    Bins2 train;
    const double step = grid[1] - grid[0];
    for (double h : candidate_bandwidths(std::max(kRange / 40.0, 2.5 * step), kRange / 3.0)) {
        double err = 0.0;
        for (const auto& fold : folds) {
            total.subtract_into(fold, train);
            for (std::size_t i = 0; i < fold.g && std::isfinite(err); ++i) {
                for (std::size_t j = i; j < fold.g; ++j) {
                    const std::size_t c = i * fold.g + j;
                    if (fold.n[c] == 0.0) continue;
                    auto m = local_linear_2d(train, grid, grid[i], grid[j], h);
                    if (!m) {
                        err = kInf;
                        break;
                    }
                    err += fold.q[c] - 2.0 * *m * fold.s[c] + fold.n[c] * *m * *m;
                }
            }
            if (!std::isfinite(err)) break;
        }
        if (err < best) {
            best = err;
            best_h = h;
        }
    }
    return best_h;
}

double interpolate(const std::vector<double>& grid, const double* values, std::ptrdiff_t stride, double t) {
    const double step = grid[1] - grid[0];
    double p = (t - grid.front()) / step;
    const auto last = static_cast<double>(grid.size() - 2);
    const double k = std::clamp(std::floor(p), 0.0, last);
    const double f = p - k;
    const auto i = static_cast<std::ptrdiff_t>(k);
    return (1.0 - f) * values[i * stride] + f * values[(i + 1) * stride];
}

std::vector<double> trapezoid_weights(const std::vector<double>& grid) {
    const double step = grid[1] - grid[0];
    std::vector<double> w(grid.size(), step);
    w.front() = w.back() = step / 2.0;
    return w;
}

void check_domain(double t) {
    if (!inside(t)) {
        fail(ErrorKind::domain, "time " + std::to_string(t) + " is outside the domain [-365, 272]");
    }
}

}  // namespace

void check_series(const LongitudinalSeries& series) {
    if (series.times.size() != series.values.size()) {
        fail(ErrorKind::schema, "subject " + series.subject + " has mismatched times and values");
    }
    if (series.times.empty()) fail(ErrorKind::schema, "subject " + series.subject + " has no observations");
    for (std::size_t j = 0; j < series.times.size(); ++j) {
        if (!std::isfinite(series.times[j]) || !std::isfinite(series.values[j]) || !(series.values[j] > 0.0)) {
            fail(ErrorKind::domain, "subject " + series.subject + " has a non-finite or non-positive value");
        }
        if (series.times[j] < kDomainStart || series.times[j] > kDomainEnd) {
            fail(ErrorKind::domain, "subject " + series.subject + " has a time outside [-365, 272]");
        }
        if (j > 0 && !(series.times[j] > series.times[j - 1])) {
            fail(ErrorKind::schema, "subject " + series.subject + " has times that are not strictly increasing");
        }
    }
}

double EigenSystem::mean_at(double t) const {
    check_domain(t);
    return interpolate(grid, mean.data(), 1, t);
}

Eigen::VectorXd EigenSystem::eigenfunctions_at(double t) const {
    check_domain(t);
    Eigen::VectorXd out(eigenfunctions.cols());
    for (Eigen::Index k = 0; k < eigenfunctions.cols(); ++k) {
        out(k) = interpolate(grid, eigenfunctions.col(k).data(), 1, t);
    }
    return out;
}

EigenSystem fit_eigensystem(std::span<const LongitudinalSeries> series, const FitOptions& options) {
    if (series.empty()) fail(ErrorKind::invalid_argument, "no subjects to fit");
    if (series.size() < 2) fail(ErrorKind::invalid_argument, "at least two subjects are required");
    if (options.grid_size < 3) fail(ErrorKind::invalid_argument, "grid size must be at least 3");
    for (const auto& s : series) check_series(s);

    EigenSystem es;
    const auto g = static_cast<std::size_t>(options.grid_size);
    es.grid.resize(g);
    for (std::size_t k = 0; k < g; ++k) {
        es.grid[k] = kDomainStart + kRange * static_cast<double>(k) / static_cast<double>(g - 1);
    }
    const double step = es.grid[1] - es.grid[0];
    const int folds = std::max(2, options.cv_folds);
    const bool tiny = series.size() < static_cast<std::size_t>(2 * folds);

    // Mean.
    Bins1 total(kDayBins);
    std::vector<Bins1> fold_bins(static_cast<std::size_t>(folds), Bins1(kDayBins));
    for (std::size_t i = 0; i < series.size(); ++i) {
        for (std::size_t j = 0; j < series[i].times.size(); ++j) {
            const double t = series[i].times[j];
            if (!inside(t)) continue;
            total.add(day_bin(t), series[i].values[j]);
            fold_bins[i % static_cast<std::size_t>(folds)].add(day_bin(t), series[i].values[j]);
        }
    }
    if (std::accumulate(total.n.begin(), total.n.end(), 0.0) == 0.0) {
        fail(ErrorKind::invalid_argument, "no observations inside the domain");
    }
    es.mean_bandwidth = options.mean_bandwidth ? *options.mean_bandwidth
                        : tiny                 ? kRange / 10.0
                                               : cv_bandwidth_1d(fold_bins, total);
    std::vector<double> mean_day(kDayBins);
    for (std::size_t b = 0; b < kDayBins; ++b) mean_day[b] = local_linear_widening(total, day_center(b), es.mean_bandwidth);
    es.mean.resize(g);
    for (std::size_t k = 0; k < g; ++k) es.mean[k] = local_linear_widening(total, es.grid[k], es.mean_bandwidth);
    auto mu = [&](double t) {
        const double p = t - kDomainStart;
        const double k = std::clamp(std::floor(p), 0.0, static_cast<double>(kDayBins - 2));
        const auto i = static_cast<std::size_t>(k);
        const double f = p - k;
        return (1.0 - f) * mean_day[i] + f * mean_day[i + 1];
    };

    // Raw covariance products off the diagonal, and squared residuals on it.
    auto cell = [&](double t) {
        return static_cast<std::size_t>(std::clamp(std::round((t - kDomainStart) / step), 0.0, static_cast<double>(g - 1)));
    };
    Bins2 cov_total(g);
    std::vector<Bins2> cov_folds(static_cast<std::size_t>(folds), Bins2(g));
    Bins1 diag(kDayBins);
    double scale = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < series.size(); ++i) {
        const auto& s = series[i];
        std::vector<double> r;
        std::vector<double> ts;
        for (std::size_t j = 0; j < s.times.size(); ++j) {
            if (!inside(s.times[j])) continue;
            ts.push_back(s.times[j]);
            r.push_back(s.values[j] - mu(s.times[j]));
            diag.add(day_bin(s.times[j]), r.back() * r.back());
            scale = std::max(scale, std::abs(s.values[j]));
        }
        auto& fold = cov_folds[i % static_cast<std::size_t>(folds)];
        for (std::size_t j = 0; j < ts.size(); ++j) {
            for (std::size_t l = 0; l < ts.size(); ++l) {
                if (j == l) continue;
                const std::size_t a = cell(ts[j]), b = cell(ts[l]);
                cov_total.add(a, b, r[j] * r[l]);
                fold.add(a, b, r[j] * r[l]);
                ++pairs;
            }
        }
    }
    if (pairs == 0) fail(ErrorKind::degenerate, "covariance needs subjects with two or more observations");
    es.cov_bandwidth = options.cov_bandwidth ? *options.cov_bandwidth
                       : tiny                ? kRange / 10.0
                                             : cv_bandwidth_2d(cov_folds, cov_total, es.grid);

    Eigen::MatrixXd surface(static_cast<Eigen::Index>(g), static_cast<Eigen::Index>(g));
    {
        std::vector<double> col(g * g, 0.0);
        parallel_for(g, [&](std::size_t i) {
            for (std::size_t j = i; j < g; ++j) {
                double h = es.cov_bandwidth;
                std::optional<double> v;
                for (int k = 0; k < 12 && !v; ++k, h *= 1.5) v = local_linear_2d(cov_total, es.grid, es.grid[i], es.grid[j], h);
                if (!v) fail(ErrorKind::degenerate, "covariance surface has no support");
                col[i * g + j] = *v;
            }
        });
        for (std::size_t i = 0; i < g; ++i) {
            for (std::size_t j = i; j < g; ++j) {
                surface(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = col[i * g + j];
                surface(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = col[i * g + j];
            }
        }
    }

    // Noise variance over the middle half of the domain.
    {
        const double lo = kDomainStart + kRange / 4.0, hi = kDomainEnd - kRange / 4.0;
        double num = 0.0, len = 0.0;
        double prev_t = 0.0, prev_v = 0.0;
        bool have = false;
        for (std::size_t k = 0; k < g; ++k) {
            const double t = es.grid[k];
            if (t < lo || t > hi) continue;
            const double v = local_linear_widening(diag, t, es.cov_bandwidth) -
                             surface(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
            if (have) {
                num += 0.5 * (v + prev_v) * (t - prev_t);
                len += t - prev_t;
            }
            prev_t = t;
            prev_v = v;
            have = true;
        }
        es.noise_var = len > 0.0 ? std::max(0.0, num / len) : 0.0;
    }

    // Eigen-decomposition under trapezoid quadrature.
    const auto w = trapezoid_weights(es.grid);
    Eigen::VectorXd sw(static_cast<Eigen::Index>(g));
    for (std::size_t k = 0; k < g; ++k) sw(static_cast<Eigen::Index>(k)) = std::sqrt(w[k]);
    const Eigen::MatrixXd op = sw.asDiagonal() * surface * sw.asDiagonal();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(0.5 * (op + op.transpose()));
    if (solver.info() != Eigen::Success) fail(ErrorKind::ill_conditioned, "eigen-decomposition failed");
    const Eigen::VectorXd values = solver.eigenvalues().reverse();
    const Eigen::MatrixXd vectors = solver.eigenvectors().rowwise().reverse();

    double mean_sq = 0.0;
    for (std::size_t k = 0; k < g; ++k) mean_sq += w[k] * es.mean[k] * es.mean[k];
    const double zero_tol = 1e-10 * std::max({1.0, mean_sq, scale * scale});
    if (!(values(0) > zero_tol)) {
        es.zero_variation = true;
        es.eigenfunctions.resize(static_cast<Eigen::Index>(g), 0);
        return es;
    }
    double positive = 0.0;
    Eigen::Index n_pos = 0;
    for (Eigen::Index k = 0; k < values.size(); ++k) {
        if (values(k) > zero_tol) {
            positive += values(k);
            ++n_pos;
        }
    }
    const Eigen::Index cap = std::min<Eigen::Index>(n_pos, options.max_components);
    double cum = 0.0;
    Eigen::Index chosen = cap;
    for (Eigen::Index k = 0; k < cap; ++k) {
        cum += values(k);
        es.fve.push_back(cum / positive);
        if (chosen == cap && es.fve.back() >= options.fve_threshold) chosen = k + 1;
    }
    es.eigenfunctions.resize(static_cast<Eigen::Index>(g), chosen);
    for (Eigen::Index k = 0; k < chosen; ++k) {
        if (!(values(k) > 0.0)) fail(ErrorKind::ill_conditioned, "leading eigenvalues are not positive");
        Eigen::VectorXd phi = vectors.col(k).cwiseQuotient(sw);
        double integral = 0.0;
        for (std::size_t i = 0; i < g; ++i) integral += w[i] * phi(static_cast<Eigen::Index>(i));
        double sign = integral >= 0.0 ? 1.0 : -1.0;
        if (std::abs(integral) < 1e-10 * phi.cwiseAbs().maxCoeff() * kRange) {
            Eigen::Index first = 0;
            for (; first < phi.size(); ++first) {
                if (std::abs(phi(first)) > 1e-8 * phi.cwiseAbs().maxCoeff()) break;
            }
            sign = phi(first) >= 0.0 ? 1.0 : -1.0;
        }
        es.eigenfunctions.col(k) = sign * phi;
        es.eigenvalues.push_back(values(k));
    }
    return es;
}

Scores pace_scores(const LongitudinalSeries& series, const EigenSystem& es) {
    const auto k = static_cast<Eigen::Index>(es.components());
    std::vector<std::size_t> used;
    for (std::size_t j = 0; j < series.times.size(); ++j) {
        if (inside(series.times[j])) used.push_back(j);
    }
    if (used.empty()) fail(ErrorKind::domain, "subject " + series.subject + " has no observation inside the domain");
    Scores out;
    out.xi = Eigen::VectorXd::Zero(k);
    out.omega = Eigen::MatrixXd::Zero(k, k);
    if (k == 0) return out;
    const auto m = static_cast<Eigen::Index>(used.size());
    Eigen::MatrixXd phi(m, k);
    Eigen::VectorXd r(m);
    for (Eigen::Index j = 0; j < m; ++j) {
        const double t = series.times[used[static_cast<std::size_t>(j)]];
        phi.row(j) = es.eigenfunctions_at(t).transpose();
        r(j) = series.values[used[static_cast<std::size_t>(j)]] - es.mean_at(t);
    }
    Eigen::VectorXd inv_lambda(k);
    for (Eigen::Index c = 0; c < k; ++c) inv_lambda(c) = 1.0 / es.eigenvalues[static_cast<std::size_t>(c)];
    double sigma2 = es.noise_var;
    Eigen::MatrixXd gram = phi.transpose() * phi;
    Eigen::MatrixXd system = gram;
    system.diagonal() += sigma2 * inv_lambda;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(system);
    const double diag_max = system.diagonal().maxCoeff();
    auto singular = [&] {
        if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) return true;
        const auto d = ldlt.vectorD();
        return d.minCoeff() <= 1e-12 * std::max(diag_max, 1e-300);
    };
    if (singular()) {
        sigma2 = std::max(sigma2, 1e-8 * es.eigenvalues.front());
        system = gram;
        system.diagonal() += sigma2 * inv_lambda;
        ldlt.compute(system);
        out.regularized = true;
    }
    out.xi = ldlt.solve(phi.transpose() * r);
    out.omega = sigma2 * ldlt.solve(Eigen::MatrixXd::Identity(k, k));
    out.omega = 0.5 * (out.omega + out.omega.transpose());
    return out;
}

std::vector<Scores> pace_scores_all(std::span<const LongitudinalSeries> series, const EigenSystem& es) {
    std::vector<Scores> out(series.size());
    parallel_for(series.size(), [&](std::size_t i) { out[i] = pace_scores(series[i], es); });
    return out;
}

double reconstruct(const Eigen::VectorXd& xi, const EigenSystem& es, double t) {
    if (xi.size() != es.components()) fail(ErrorKind::invalid_argument, "score length does not match the eigensystem");
    double v = es.mean_at(t);
    if (xi.size() > 0) v += es.eigenfunctions_at(t).dot(xi);
    return v;
}

LongitudinalSeries reanchor(const LongitudinalSeries& series, double gestation_days) {
    LongitudinalSeries out;
    out.subject = series.subject;
    const double shift = gestation_days - 273.0;
    for (std::size_t j = 0; j < series.times.size(); ++j) {
        const double t = series.times[j] + shift;
        if (!inside(t)) continue;
        out.times.push_back(t);
        out.values.push_back(series.values[j]);
    }
    return out;
}

double weight_change(const LongitudinalSeries& series, const EigenSystem& es, double gestation_days) {
    if (!(gestation_days >= 14.0 && gestation_days <= 273.0)) {
        fail(ErrorKind::domain, "gestation length " + std::to_string(gestation_days) + " is outside [14, 273] days");
    }
    const LongitudinalSeries shifted = reanchor(series, gestation_days);
    const Scores s = pace_scores(shifted, es);
    return (reconstruct(s.xi, es, gestation_days - 1.0) - reconstruct(s.xi, es, 0.0)) / (gestation_days / 7.0);
}

std::vector<std::size_t> flag_outliers(const LongitudinalSeries& series, const EigenSystem& es, double level) {
    if (!(level > 0.0 && level < 1.0)) fail(ErrorKind::invalid_argument, "band level must lie in (0, 1)");
    const double z = boost::math::quantile(boost::math::normal(), 1.0 - (1.0 - level) / 2.0);
    const Scores s = pace_scores(series, es);
    std::vector<std::size_t> flagged;
    for (std::size_t j = 0; j < series.times.size(); ++j) {
        const double t = series.times[j];
        if (!inside(t)) continue;
        const Eigen::VectorXd phi = es.eigenfunctions_at(t);
        const double var = (phi.size() > 0 ? phi.dot(s.omega * phi) : 0.0) + es.noise_var;
        const double fitted = reconstruct(s.xi, es, t);
        if (std::abs(series.values[j] - fitted) > z * std::sqrt(std::max(var, 0.0))) flagged.push_back(j);
    }
    return flagged;
}

}  // namespace twophase::fpca
