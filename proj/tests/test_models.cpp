#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "twophase/error.hpp"
#include "twophase/models.hpp"

using namespace twophase;
using namespace twophase::models;

namespace {

CoxData random_cox(std::size_t n, int p, std::uint64_t seed, double beta = 0.7) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> z;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    CoxData d;
    d.covariates.resize(static_cast<Eigen::Index>(n), p);
    for (std::size_t i = 0; i < n; ++i) {
        for (int j = 0; j < p; ++j) d.covariates(static_cast<Eigen::Index>(i), j) = z(rng);
        const double rate = std::exp(beta * d.covariates(static_cast<Eigen::Index>(i), 0));
        const double t = -std::log(u(rng)) / rate;
        const double c = 2.0 * u(rng);
        // round times so that ties occur
        d.time.push_back(std::round(std::min(t, c) * 10.0) / 10.0 + 0.1);
        d.event.push_back(t <= c ? 1 : 0);
    }
    return d;
}

LogisticData random_logistic(std::size_t n, int p, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> z;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    LogisticData d;
    d.covariates.resize(static_cast<Eigen::Index>(n), p + 1);
    for (std::size_t i = 0; i < n; ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        d.covariates(r, 0) = 1.0;
        for (int j = 1; j <= p; ++j) d.covariates(r, j) = z(rng);
        const double eta = -0.3 + 0.8 * d.covariates(r, 1);
        d.outcome.push_back(u(rng) < 1.0 / (1.0 + std::exp(-eta)) ? 1 : 0);
    }
    return d;
}

std::vector<double> random_weights(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.5, 3.0);
    std::vector<double> w(n);
    for (auto& v : w) v = u(rng);
    return w;
}

}  // namespace

TEST_CASE("cox log partial likelihood matches the direct Breslow sum") {
    const auto d = random_cox(40, 2, 1);
    const auto w = random_weights(40, 2);
    const Eigen::Vector2d beta(0.3, -0.2);
    CHECK(cox_log_partial_likelihood(d, w, beta) == doctest::Approx(oracle::breslow(d.time, d.event, d.covariates, w, beta)).epsilon(1e-12));
}

TEST_CASE("cox score matches central finite differences") {
    const auto d = random_cox(60, 3, 3);
    const auto w = random_weights(60, 4);
    const Eigen::Vector3d beta(0.4, 0.1, -0.3);
    const auto fd = oracle::gradient(
        [&](const Eigen::VectorXd& b) { return oracle::breslow(d.time, d.event, d.covariates, w, b); }, beta);
    const Eigen::VectorXd s = cox_score(d, w, beta);
    CHECK((s - fd).norm() / fd.norm() < 1e-6);
}

TEST_CASE("logistic score matches central finite differences") {
    const auto d = random_logistic(80, 2, 5);
    const auto w = random_weights(80, 6);
    const Eigen::Vector3d beta(-0.2, 0.5, 0.3);
    const auto fd = oracle::gradient([&](const Eigen::VectorXd& b) { return oracle::logistic(d.outcome, d.covariates, w, b); }, beta);
    const Eigen::VectorXd s = logistic_score(d, w, beta);
    CHECK((s - fd).norm() / fd.norm() < 1e-6);
}

TEST_CASE("one-covariate cox fit on 20 rows matches a grid search") {
    const auto d = random_cox(20, 1, 7);
    const std::vector<double> w(20, 1.0);
    const auto fit = fit_cox(d);
    const double best = oracle::argmax_1d(
        [&](double b) { return oracle::breslow(d.time, d.event, d.covariates, w, Eigen::VectorXd::Constant(1, b)); }, -5.0, 5.0);
    CHECK(fit.converged);
    CHECK(std::abs(fit.coefficients(0) - best) < 1e-4);
}

TEST_CASE("two-covariate logistic fit on 30 rows matches a nested grid search") {
    LogisticData d;
    std::mt19937_64 rng(11);
    std::normal_distribution<double> z;
    std::uniform_real_distribution<double> u;
    d.covariates.resize(30, 2);
    for (int i = 0; i < 30; ++i) {
        d.covariates(i, 0) = z(rng);
        d.covariates(i, 1) = z(rng);
        d.outcome.push_back(u(rng) < 1.0 / (1.0 + std::exp(-(0.6 * d.covariates(i, 0) - 0.4 * d.covariates(i, 1)))) ? 1 : 0);
    }
    const std::vector<double> w(30, 1.0);
    const auto fit = fit_logistic(d);
    const auto best = oracle::argmax_2d(
        [&](double a, double b) { return oracle::logistic(d.outcome, d.covariates, w, Eigen::Vector2d(a, b)); },
        {-6.0, -6.0}, {6.0, 6.0});
    CHECK(std::abs(fit.coefficients(0) - best(0)) < 1e-4);
    CHECK(std::abs(fit.coefficients(1) - best(1)) < 1e-4);
}

TEST_CASE("intercept-only logistic fit equals the logit of the weighted prevalence") {
    LogisticData d;
    d.covariates = Eigen::MatrixXd::Ones(6, 1);
    d.outcome = {1, 0, 1, 0, 0, 1};
    const std::vector<double> w{1.0, 2.0, 3.0, 1.0, 1.0, 0.5};
    const auto fit = fit_logistic(d, w);
    const double p = (1.0 + 3.0 + 0.5) / 8.5;
    CHECK(fit.coefficients(0) == doctest::Approx(std::log(p / (1.0 - p))).epsilon(1e-12));
}

TEST_CASE("unweighted influence sums to zero") {
    const auto c = fit_cox(random_cox(200, 2, 13));
    const Eigen::VectorXd sc = c.influence.colwise().sum();
    CHECK(sc.cwiseAbs().maxCoeff() < 1e-8 * c.influence.cwiseAbs().sum());
    const auto l = fit_logistic(random_logistic(200, 2, 14));
    const Eigen::VectorXd sl = l.influence.colwise().sum();
    CHECK(sl.cwiseAbs().maxCoeff() < 1e-8 * l.influence.cwiseAbs().sum());
}

TEST_CASE("integer weights are equivalent to replicated rows") {
    const auto d = random_cox(30, 1, 17);
    std::vector<double> w(30, 1.0);
    CoxData rep = d;
    for (int i = 0; i < 30; i += 3) {
        w[static_cast<std::size_t>(i)] = 2.0;
        rep.time.push_back(d.time[static_cast<std::size_t>(i)]);
        rep.event.push_back(d.event[static_cast<std::size_t>(i)]);
        rep.covariates.conservativeResize(rep.covariates.rows() + 1, Eigen::NoChange);
        rep.covariates.row(rep.covariates.rows() - 1) = d.covariates.row(i);
    }
    CHECK(fit_cox(d, w).coefficients(0) == doctest::Approx(fit_cox(rep).coefficients(0)).epsilon(1e-9));

    const auto l = random_logistic(40, 1, 18);
    std::vector<double> lw(40, 1.0);
    LogisticData lrep = l;
    for (int i = 0; i < 40; i += 4) {
        lw[static_cast<std::size_t>(i)] = 2.0;
        lrep.outcome.push_back(l.outcome[static_cast<std::size_t>(i)]);
        lrep.covariates.conservativeResize(lrep.covariates.rows() + 1, Eigen::NoChange);
        lrep.covariates.row(lrep.covariates.rows() - 1) = l.covariates.row(i);
    }
    CHECK((fit_logistic(l, lw).coefficients - fit_logistic(lrep).coefficients).norm() < 1e-9);
}

TEST_CASE("null covariate gives a cox estimate within 3 SE of zero") {
    const auto d = random_cox(3000, 1, 19, 0.0);
    const auto fit = fit_cox(d);
    CHECK(std::abs(fit.coefficients(0)) < 3.0 * std::sqrt(fit.variance(0, 0)));
}

TEST_CASE("separation is reported as a convergence failure") {
    LogisticData d;
    d.covariates.resize(6, 2);
    d.covariates << 1, -2, 1, -1, 1, -0.5, 1, 0.5, 1, 1, 1, 2;
    d.outcome = {0, 0, 0, 1, 1, 1};
    CHECK_THROWS_AS(fit_logistic(d), Error);
    try {
        fit_logistic(d);
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::convergence);
    }
    FitOptions soft;
    soft.throw_on_failure = false;
    CHECK_FALSE(fit_logistic(d, soft).converged);
}

TEST_CASE("cox without events is rejected") {
    CoxData d;
    d.time = {1, 2, 3};
    d.event = {0, 0, 0};
    d.covariates = Eigen::MatrixXd::Random(3, 1);
    CHECK_THROWS_AS(fit_cox(d), Error);
}

TEST_CASE("sandwich variance: each stratum contributes n/(n-1) times the centered sum of squares") {
    Eigen::MatrixXd c(6, 1);
    c << 1, 2, 4, -1, 0, 4;
    const std::vector<std::string> strata{"a", "a", "a", "b", "b", "b"};
    const auto v = sandwich_variance(c, strata);
    // stratum a: mean 7/3, stratum b: mean 1
    double expected = 0.0;
    for (double x : {1.0, 2.0, 4.0}) expected += (x - 7.0 / 3.0) * (x - 7.0 / 3.0);
    for (double x : {-1.0, 0.0, 4.0}) expected += (x - 1.0) * (x - 1.0);
    expected *= 3.0 / 2.0;
    CHECK(v(0, 0) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("sandwich variance: a doubly listed unit at half weight equals the single row") {
    Eigen::MatrixXd single(4, 1), split(5, 1);
    single << 1.0, 3.0, -2.0, 5.0;
    split << 1.0, 3.0, -2.0, 2.5, 2.5;
    const std::vector<std::string> s1{"a", "a", "a", "a"}, s2{"a", "a", "a", "a", "a"};
    const std::vector<std::string> c1{"1", "2", "3", "4"}, c2{"1", "2", "3", "4", "4"};
    CHECK(sandwich_variance(split, s2, c2)(0, 0) == doctest::Approx(sandwich_variance(single, s1, c1)(0, 0)).epsilon(1e-12));
}

TEST_CASE("singleton strata are pooled with a warning") {
    Eigen::MatrixXd c(4, 1);
    c << 1.0, 2.0, 3.0, 7.0;
    const std::vector<std::string> strata{"a", "a", "b", "c"};
    std::vector<std::string> warnings;
    const auto v = sandwich_variance(c, strata, {}, &warnings);
    CHECK(warnings.size() == 2);
    CHECK(v(0, 0) > 0.0);
}
