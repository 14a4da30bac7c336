#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "twophase/error.hpp"
#include "twophase/fpca.hpp"
#include "twophase/simulator.hpp"

using namespace twophase;
using namespace twophase::fpca;

namespace {

sim::SimConfig kl_config() {
    auto c = sim::default_config();
    c.noise_sd = 0.5;
    return c;
}

// Subjects from the generating model observed on `m` distinct random days.
std::vector<LongitudinalSeries> kl_population(const sim::SimConfig& c, int n, int m, std::uint64_t seed,
                                              std::vector<Eigen::VectorXd>* scores = nullptr) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> z;
    std::uniform_int_distribution<int> day(static_cast<int>(kDomainStart), static_cast<int>(kDomainEnd));
    const Eigen::VectorXd lambda = sim::true_eigenvalues(c);
    std::vector<LongitudinalSeries> out;
    for (int i = 0; i < n; ++i) {
        Eigen::VectorXd xi(lambda.size());
        for (Eigen::Index k = 0; k < xi.size(); ++k) xi(k) = std::sqrt(lambda(k)) * z(rng);
        std::vector<double> t;
        for (int j = 0; j < m; ++j) t.push_back(day(rng));
        std::sort(t.begin(), t.end());
        t.erase(std::unique(t.begin(), t.end()), t.end());
        LongitudinalSeries s{"S" + std::to_string(i), t, {}};
        for (double tt : t) s.values.push_back(sim::true_trajectory(c, xi, tt) + c.noise_sd * z(rng));
        out.push_back(s);
        if (scores) scores->push_back(xi);
    }
    return out;
}

// Every subject observed weekly from a random first day.
std::vector<LongitudinalSeries> weekly_population(const sim::SimConfig& c, int n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> z;
    std::uniform_int_distribution<int> offset(0, 6);
    const Eigen::VectorXd lambda = sim::true_eigenvalues(c);
    std::vector<LongitudinalSeries> out;
    for (int i = 0; i < n; ++i) {
        Eigen::VectorXd xi(lambda.size());
        for (Eigen::Index k = 0; k < xi.size(); ++k) xi(k) = std::sqrt(lambda(k)) * z(rng);
        LongitudinalSeries s{"S" + std::to_string(i), {}, {}};
        for (int t = static_cast<int>(kDomainStart) + offset(rng); t <= static_cast<int>(kDomainEnd); t += 7) {
            s.times.push_back(t);
            s.values.push_back(sim::true_trajectory(c, xi, t) + c.noise_sd * z(rng));
        }
        out.push_back(std::move(s));
    }
    return out;
}

// The generating eigensystem tabulated on an evenly spaced grid.
EigenSystem true_system(const sim::SimConfig& c, int g) {
    EigenSystem es;
    const Eigen::VectorXd lambda = sim::true_eigenvalues(c);
    es.eigenfunctions.resize(g, lambda.size());
    for (int i = 0; i < g; ++i) {
        const double t = kDomainStart + (kDomainEnd - kDomainStart) * i / (g - 1);
        es.grid.push_back(t);
        es.mean.push_back(sim::true_mean(c, t));
        es.eigenfunctions.row(i) = sim::true_eigenfunctions(c, t).transpose();
    }
    es.eigenvalues.assign(lambda.data(), lambda.data() + lambda.size());
    es.noise_var = 0.0;
    return es;
}

double l2_distance(const EigenSystem& es, int k, const sim::SimConfig& c) {
    // trapezoid rule on the fitted grid
    double plus = 0.0, minus = 0.0;
    for (std::size_t i = 0; i < es.grid.size(); ++i) {
        const double w = (i == 0 || i + 1 == es.grid.size() ? 0.5 : 1.0) * (es.grid[1] - es.grid[0]);
        const double truth = sim::true_eigenfunctions(c, es.grid[i])(k);
        const double est = es.eigenfunctions(static_cast<Eigen::Index>(i), k);
        plus += w * (est - truth) * (est - truth);
        minus += w * (est + truth) * (est + truth);
    }
    return std::sqrt(std::min(plus, minus));
}

}  // namespace

TEST_CASE("three-component population: K = 3 and eigenfunctions recovered") {
    const auto c = kl_config();
    const auto series = weekly_population(c, 300, 1);
    const auto es = fit_eigensystem(series);
    CHECK(es.components() == 3);
    CHECK(es.fve[2] >= 0.999);
    for (int k = 0; k < 3; ++k) CHECK(l2_distance(es, k, c) < 0.1);
    // orthonormal under the trapezoid rule
    for (int j = 0; j < es.components(); ++j) {
        for (int k = 0; k < es.components(); ++k) {
            double s = 0.0;
            for (std::size_t i = 0; i < es.grid.size(); ++i) {
                const double w = (i == 0 || i + 1 == es.grid.size() ? 0.5 : 1.0) * (es.grid[1] - es.grid[0]);
                s += w * es.eigenfunctions(static_cast<Eigen::Index>(i), j) * es.eigenfunctions(static_cast<Eigen::Index>(i), k);
            }
            CHECK(s == doctest::Approx(j == k ? 1.0 : 0.0).epsilon(1e-6).scale(1.0));
        }
    }
    for (std::size_t k = 1; k < es.eigenvalues.size(); ++k) CHECK(es.eigenvalues[k] <= es.eigenvalues[k - 1]);
    CHECK(es.noise_var >= 0.0);
}

TEST_CASE("identical constant trajectories give a zero-variation fit") {
    std::vector<LongitudinalSeries> series;
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<int> day(-365, 272);
    for (int i = 0; i < 50; ++i) {
        LongitudinalSeries s{"S" + std::to_string(i), {}, {}};
        std::set<int> days;
        while (days.size() < 8) days.insert(day(rng));
        for (int d : days) {
            s.times.push_back(d);
            s.values.push_back(64.0);
        }
        series.push_back(s);
    }
    const auto es = fit_eigensystem(series);
    CHECK(es.zero_variation);
    CHECK(es.components() == 0);
    for (double m : es.mean) CHECK(m == doctest::Approx(64.0).epsilon(1e-9));
}

TEST_CASE("pace scores vanish when the observations equal the mean") {
    const auto c = kl_config();
    auto es = true_system(c, 101);
    es.noise_var = 1.0;
    LongitudinalSeries s{"a", {-300, -100, 0, 150, 250}, {}};
    for (double t : s.times) s.values.push_back(es.mean_at(t));
    const auto sc = pace_scores(s, es);
    CHECK(sc.xi.norm() < 1e-9);
    const Eigen::MatrixXd sym = sc.omega - sc.omega.transpose();
    CHECK(sym.norm() < 1e-9);
    CHECK(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(sc.omega).eigenvalues().minCoeff() > -1e-8);
}

TEST_CASE("dense noiseless series recover the generating scores") {
    auto c = kl_config();
    c.noise_sd = 0.0;
    const auto es = true_system(c, 638);
    std::vector<Eigen::VectorXd> truth;
    auto series = kl_population(c, 20, 600, 8, &truth);
    for (std::size_t i = 0; i < series.size(); ++i) {
        const auto sc = pace_scores(series[i], es);
        for (Eigen::Index k = 0; k < sc.xi.size(); ++k) {
            CHECK(std::abs(sc.xi(k) - truth[i](k)) <= 1e-3 * std::abs(truth[i](k)) + 1e-9);
        }
    }
}

TEST_CASE("a +30 kg observation is flagged at the 95% band") {
    const auto c = kl_config();
    const auto series = kl_population(c, 300, 12, 3);
    const auto es = fit_eigensystem(series);
    auto s = series[5];
    const std::size_t j = s.times.size() / 2;
    s.values[j] += 30.0;
    const auto flagged = flag_outliers(s, es, 0.95);
    CHECK(std::find(flagged.begin(), flagged.end(), j) != flagged.end());
}

TEST_CASE("reanchoring shifts times and drops points leaving the domain") {
    LongitudinalSeries s{"a", {-365, -10, 100, 270}, {60, 61, 65, 70}};
    const auto r = reanchor(s, 260);
    CHECK(r.times == std::vector<double>{-23, 87, 257});
    CHECK(r.values == std::vector<double>{61, 65, 70});
    const auto same = reanchor(s, 273);
    CHECK(same.times == s.times);
}

TEST_CASE("weight change uses the validated gestation length") {
    const auto c = kl_config();
    auto es = true_system(c, 638);
    es.noise_var = 1.0;
    const double g = 266.0;
    // After re-anchoring the observations sit exactly on the mean curve.
    LongitudinalSeries s{"a", {}, {}};
    for (int t = -358; t <= 272; t += 7) {
        s.times.push_back(t);
        s.values.push_back(sim::true_mean(c, t + g - 273.0));
    }
    const double expected = (sim::true_mean(c, g - 1.0) - sim::true_mean(c, 0.0)) / (g / 7.0);
    CHECK(weight_change(s, es, g) == doctest::Approx(expected).epsilon(1e-9));
    CHECK_THROWS_AS(weight_change(s, es, 10.0), Error);
    CHECK_THROWS_AS(weight_change(s, es, 280.0), Error);
}

TEST_CASE("series validation") {
    CHECK_THROWS_AS(check_series({"a", {}, {}}), Error);
    CHECK_THROWS_AS(check_series({"a", {1, 1}, {60, 61}}), Error);
    CHECK_THROWS_AS(check_series({"a", {1}, {-2}}), Error);
    CHECK_THROWS_AS(check_series({"a", {400}, {60}}), Error);
    CHECK_NOTHROW(check_series({"a", {0}, {60}}));
}
