#include <doctest.h>

#include <cfloat>
#include <cmath>
#include <algorithm>
#include <memory>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "twophase/error.hpp"
#include "twophase/multiframe.hpp"
#include "twophase/raking.hpp"

using namespace twophase;
using namespace twophase::raking;

namespace {

struct Instance {
    std::vector<double> d;
    Eigen::MatrixXd a;
    Eigen::VectorXd t;
};

// Totals come from a tilt of the design weights, so they are always attainable.
Instance random_instance(std::uint64_t seed, int n, int q) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> z;
    std::uniform_real_distribution<double> u(1.0, 20.0);
    Instance in;
    in.a = with_constant(Eigen::MatrixXd::NullaryExpr(n, q - 1, [&] { return z(rng); }));
    in.d.resize(static_cast<std::size_t>(n));
    for (auto& v : in.d) v = u(rng);
    Eigen::VectorXd lam(q);
    for (int j = 0; j < q; ++j) lam(j) = 0.3 * z(rng);
    in.t = Eigen::VectorXd::Zero(q);
    for (int i = 0; i < n; ++i) in.t += in.d[static_cast<std::size_t>(i)] * std::exp(in.a.row(i).dot(lam)) * in.a.row(i).transpose();
    return in;
}

}  // namespace

TEST_CASE("calibration hits the totals with a vanishing primal-dual gap") {
    for (std::uint64_t s = 1; s <= 50; ++s) {
        const auto in = random_instance(s, 80, 1 + static_cast<int>(s % 4));
        const auto r = calibrate(in.d, in.a, in.t);
        CHECK(r.constraint_residual < 1e-8);
        CHECK(std::abs(r.primal_objective - r.dual_objective) < 1e-8);
        Eigen::VectorXd got = Eigen::VectorXd::Zero(in.t.size());
        for (Eigen::Index i = 0; i < in.a.rows(); ++i) got += in.d[static_cast<std::size_t>(i)] * r.g(i) * in.a.row(i).transpose();
        CHECK((got - in.t).cwiseAbs().maxCoeff() <= 1e-8 * in.t.cwiseAbs().maxCoeff());
    }
}

TEST_CASE("calibration leaves the weights alone when the totals already hold") {
    const auto in = random_instance(7, 50, 3);
    const Eigen::VectorXd t = in.a.transpose() * Eigen::Map<const Eigen::VectorXd>(in.d.data(), 50);
    const auto r = calibrate(in.d, in.a, t);
    CHECK(r.g.isOnes(0.0));
    CHECK(r.primal_objective == 0.0);
}

TEST_CASE("single-column calibration agrees with a bisection root") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.2, 3.0);
    Eigen::MatrixXd a(40, 1);
    std::vector<double> d(40);
    for (int i = 0; i < 40; ++i) {
        a(i, 0) = u(rng);
        d[static_cast<std::size_t>(i)] = u(rng);
    }
    Eigen::VectorXd t(1);
    t(0) = 55.0;
    auto f = [&](double lam) {
        double s = 0.0;
        for (int i = 0; i < 40; ++i) s += d[static_cast<std::size_t>(i)] * std::exp(lam * a(i, 0)) * a(i, 0);
        return s - t(0);
    };
    const double lam = oracle::bisect(f, -20.0, 20.0);
    const auto r = calibrate(d, a, t);
    CHECK(r.lambda(0) == doctest::Approx(lam).epsilon(1e-10));
    for (int i = 0; i < 40; ++i) CHECK(r.g(i) == doctest::Approx(std::exp(lam * a(i, 0))).epsilon(1e-9));
}

TEST_CASE("collinear auxiliary columns are dropped with a warning") {
    auto in = random_instance(11, 60, 2);
    Eigen::MatrixXd a(60, 3);
    a << in.a, 2.0 * in.a.col(1) + in.a.col(0);
    Eigen::VectorXd t(3);
    t << in.t, 2.0 * in.t(1) + in.t(0);
    const auto r = calibrate(in.d, a, t);
    CHECK(r.dropped_columns == std::vector<Eigen::Index>{2});
    CHECK(r.warnings.size() == 1);
    CHECK(r.constraint_residual < 1e-8);
}

TEST_CASE("totals outside the sample's reach are infeasible") {
    Eigen::MatrixXd a = Eigen::MatrixXd::Ones(10, 2);
    for (int i = 0; i < 10; ++i) a(i, 1) = 1.0 + i;
    const std::vector<double> d(10, 2.0);
    Eigen::VectorXd t(2);
    t << 20.0, -5.0;
    try {
        calibrate(d, a, t);
        FAIL("expected infeasible");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::infeasible);
    }
}

TEST_CASE("population calibration uses the column sums as totals") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> z;
    const int n = 300;
    Eigen::MatrixXd aux = with_constant(Eigen::MatrixXd::NullaryExpr(n, 1, [&] { return z(rng); }));
    std::vector<bool> sampled(n, false);
    std::vector<double> pi;
    for (int i = 0; i < n; i += 3) {
        sampled[static_cast<std::size_t>(i)] = true;
        pi.push_back(1.0 / 3.0);
    }
    std::unique_ptr<bool[]> raw(new bool[n]);
    for (int i = 0; i < n; ++i) raw[i] = sampled[static_cast<std::size_t>(i)];
    const auto r = calibrate_population(pi, aux, std::span<const bool>(raw.get(), n));
    double total = 0.0, weighted = 0.0;
    int k = 0;
    for (int i = 0; i < n; ++i) {
        total += aux(i, 1);
        if (raw[i]) weighted += 3.0 * r.g(k++) * aux(i, 1);
    }
    CHECK(weighted == doctest::Approx(total).epsilon(1e-9));
}

TEST_CASE("hansen-hurwitz weights: expected weight is one for every unit") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(0.001, 1.0);
    for (int k = 0; k < 10000; ++k) {
        multiframe::FrameUnit unit;
        unit.id = std::to_string(k);
        unit.pi_o = u(rng);
        unit.pi_a = u(rng);
        unit.sampled_o = unit.sampled_a = true;
        const auto rows = multiframe::combine_frames(std::span<const multiframe::FrameUnit>(&unit, 1));
        REQUIRE(rows.size() == 2);
        CHECK(std::abs(unit.pi_o * rows[0].weight + *unit.pi_a * rows[1].weight - 1.0) <= 8 * DBL_EPSILON);
        CHECK(rows[0].cluster == rows[1].cluster);
    }
}

TEST_CASE("hansen-hurwitz: phi and single-frame units") {
    CHECK(multiframe::phi(0.2, 0.6) == doctest::Approx(0.25));
    CHECK_THROWS_AS(multiframe::phi(0.0, 0.0), Error);
    multiframe::FrameUnit only_o{"a", 0.25, std::nullopt, true, false, "3", ""};
    const auto rows = multiframe::combine_frames(std::span<const multiframe::FrameUnit>(&only_o, 1));
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].weight == 4.0);
    CHECK(rows[0].stratum == "obesity:3");
    multiframe::FrameUnit zero_a{"b", 0.5, 0.0, true, false, "1", "2"};
    const auto zr = multiframe::combine_frames(std::span<const multiframe::FrameUnit>(&zero_a, 1));
    CHECK(zr[0].weight == 2.0);
    multiframe::FrameUnit bad{"c", 0.0, 0.5, true, false, "1", "2"};
    CHECK_THROWS_AS(multiframe::combine_frames(std::span<const multiframe::FrameUnit>(&bad, 1)), Error);
}

TEST_CASE("hansen-hurwitz weighted totals are unbiased over repeated dual-frame draws") {
    // Frame O holds every unit, frame A the first 600; each frame is an
    // independent simple random sample.
    const int n_units = 1000, n_a = 600, take_o = 80, take_a = 60;
    std::mt19937_64 rng(31);
    std::gamma_distribution<double> gam(2.0, 5.0);
    std::vector<double> y(n_units);
    double truth = 0.0;
    for (auto& v : y) truth += (v = gam(rng));
    std::vector<int> o(n_units), a(n_a);
    std::iota(o.begin(), o.end(), 0);
    std::iota(a.begin(), a.end(), 0);
    const double pi_o = static_cast<double>(take_o) / n_units, pi_a = static_cast<double>(take_a) / n_a;
    double sum = 0.0, sum_sq = 0.0;
    const int draws = 1000;
    for (int d = 0; d < draws; ++d) {
        std::shuffle(o.begin(), o.end(), rng);
        std::shuffle(a.begin(), a.end(), rng);
        std::vector<multiframe::FrameUnit> units(n_units);
        for (int k = 0; k < n_units; ++k) {
            units[static_cast<std::size_t>(k)].id = std::to_string(k);
            units[static_cast<std::size_t>(k)].pi_o = pi_o;
            if (k < n_a) units[static_cast<std::size_t>(k)].pi_a = pi_a;
        }
        for (int k = 0; k < take_o; ++k) units[static_cast<std::size_t>(o[static_cast<std::size_t>(k)])].sampled_o = true;
        for (int k = 0; k < take_a; ++k) units[static_cast<std::size_t>(a[static_cast<std::size_t>(k)])].sampled_a = true;
        double est = 0.0;
        for (const auto& row : multiframe::combine_frames(units)) est += row.weight * y[static_cast<std::size_t>(std::stoi(row.record_id))];
        sum += est;
        sum_sq += est * est;
    }
    const double mean = sum / draws;
    const double sd = std::sqrt((sum_sq - draws * mean * mean) / (draws - 1));
    CHECK(std::abs(mean - truth) < 3.0 * sd / std::sqrt(static_cast<double>(draws)));
}
