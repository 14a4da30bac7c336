#pragma once

// Reference computations written independently of the library, used as test oracles.

#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

/// Breslow log partial likelihood by direct double loop.
inline double breslow(const std::vector<double>& time, const std::vector<int>& event, const Eigen::MatrixXd& x,
                      const std::vector<double>& w, const Eigen::VectorXd& beta) {
    const auto n = time.size();
    double ll = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!event[i]) continue;
        double risk = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (time[j] >= time[i]) risk += w[j] * std::exp(x.row(static_cast<Eigen::Index>(j)).dot(beta));
        }
        ll += w[i] * (x.row(static_cast<Eigen::Index>(i)).dot(beta) - std::log(risk));
    }
    return ll;
}

inline double logistic(const std::vector<int>& y, const Eigen::MatrixXd& x, const std::vector<double>& w,
                       const Eigen::VectorXd& beta) {
    double ll = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double eta = x.row(static_cast<Eigen::Index>(i)).dot(beta);
        ll += w[i] * (y[i] * eta - std::log1p(std::exp(eta)));
    }
    return ll;
}

/// Maximizer of a 1-D function by a coarse grid followed by golden-section refinement.
inline double argmax_1d(const std::function<double(double)>& f, double lo, double hi, int grid = 400) {
    double best = lo, best_v = -std::numeric_limits<double>::infinity();
    const double step = (hi - lo) / grid;
    for (int k = 0; k <= grid; ++k) {
        const double b = lo + step * k;
        const double v = f(b);
        if (v > best_v) {
            best_v = v;
            best = b;
        }
    }
    double a = best - step, c = best + step;
    const double r = (std::sqrt(5.0) - 1.0) / 2.0;
    for (int it = 0; it < 200; ++it) {
        const double x1 = c - r * (c - a), x2 = a + r * (c - a);
        if (f(x1) > f(x2)) {
            c = x2;
        } else {
            a = x1;
        }
    }
    return (a + c) / 2.0;
}

/// Nested grid search in 2-D: a coarse grid, then repeated zoom around the best cell.
inline Eigen::Vector2d argmax_2d(const std::function<double(double, double)>& f, Eigen::Vector2d lo, Eigen::Vector2d hi) {
    Eigen::Vector2d best = (lo + hi) / 2.0;
    const int g = 60;
    for (int level = 0; level < 14; ++level) {
        double best_v = -std::numeric_limits<double>::infinity();
        const Eigen::Vector2d step = (hi - lo) / g;
        for (int i = 0; i <= g; ++i) {
            for (int j = 0; j <= g; ++j) {
                const double a = lo(0) + step(0) * i, b = lo(1) + step(1) * j;
                const double v = f(a, b);
                if (v > best_v) {
                    best_v = v;
                    best = {a, b};
                }
            }
        }
        lo = best - 2.0 * step;
        hi = best + 2.0 * step;
    }
    return best;
}

/// Central finite-difference gradient.
inline Eigen::VectorXd gradient(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& at,
                                double h = 1e-5) {
    Eigen::VectorXd g(at.size());
    for (Eigen::Index k = 0; k < at.size(); ++k) {
        Eigen::VectorXd up = at, down = at;
        up(k) += h;
        down(k) -= h;
        g(k) = (f(up) - f(down)) / (2.0 * h);
    }
    return g;
}

/// Root of a monotone function on [lo, hi] by bisection.
inline double bisect(const std::function<double(double)>& f, double lo, double hi) {
    double flo = f(lo);
    for (int it = 0; it < 300; ++it) {
        const double mid = (lo + hi) / 2.0;
        const double fm = f(mid);
        if ((fm > 0) == (flo > 0)) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    return (lo + hi) / 2.0;
}

/// Every integer allocation n_s in [min(lo, N_s), N_s] with sum n, minimizing sum (N sigma)^2 / n_s.
inline double best_allocation_value(const std::vector<double>& weight, const std::vector<long>& population, long n,
                                    int lo) {
    double best = std::numeric_limits<double>::infinity();
    std::vector<long> cur(weight.size());
    std::function<void(std::size_t, long)> rec = [&](std::size_t s, long left) {
        const long floor = std::min<long>(lo, population[s]);
        if (s + 1 == weight.size()) {
            if (left < floor || left > population[s]) return;
            cur[s] = left;
            double v = 0.0;
            for (std::size_t k = 0; k < weight.size(); ++k) {
                if (weight[k] == 0.0) continue;
                if (cur[k] == 0) return;
                v += weight[k] * weight[k] / static_cast<double>(cur[k]);
            }
            best = std::min(best, v);
            return;
        }
        for (long k = floor; k <= std::min(left, population[s]); ++k) {
            cur[s] = k;
            rec(s + 1, left - k);
        }
    };
    rec(0, n);
    return best;
}

}  // namespace oracle
