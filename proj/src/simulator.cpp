#include "twophase/simulator.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "twophase/analysis.hpp"
#include "twophase/error.hpp"
#include "twophase/estimators.hpp"
#include "twophase/imputation.hpp"
#include "twophase/io.hpp"
#include "twophase/parallel.hpp"

namespace twophase::sim {

namespace {

constexpr double kLength = fpca::kDomainEnd - fpca::kDomainStart;

double expit(double eta) { return 1.0 / (1.0 + std::exp(-eta)); }

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    std::array<std::uint32_t, 2> out{};
    seq.generate(out.begin(), out.end());
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

double quantile(std::vector<double> v, double p) {
    if (v.empty()) fail(ErrorKind::degenerate, "quantile of an empty set");
    std::sort(v.begin(), v.end());
    const double pos = p * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

template <class F>
double bisect(F&& f, double lo, double hi, double target) {
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (f(mid) < target) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    return 0.5 * (lo + hi);
}

void check_probability(double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) fail(ErrorKind::domain, std::string(name) + " must lie in [0, 1]");
}

}  // namespace

SimConfig SimConfig::without_error() const {
    SimConfig c = *this;
    c.obesity_false_negative = 0.0;
    c.obesity_false_positive = 0.0;
    c.time_error_prob = 0.0;
    c.asthma_sensitivity = 1.0;
    c.asthma_false_positive = 0.0;
    c.exposure_error_sd = 0.0;
    c.differential_shift = 0.0;
    c.gestation_mean = 273.0;
    c.gestation_sd = 0.0;
    c.gestation_min = 273.0;
    c.gestation_max = 273.0;
    for (auto& z : c.covariates) {
        z.error_sd = 0.0;
        z.false_negative = 0.0;
        z.false_positive = 0.0;
    }
    return c;
}

void SimConfig::check() const {
    if (population < 2) fail(ErrorKind::invalid_argument, "population must hold at least two records");
    if (component_sd.empty()) fail(ErrorKind::invalid_argument, "at least one K-L component is required");
    for (std::size_t k = 0; k < component_sd.size(); ++k) {
        if (!(component_sd[k] > 0.0)) fail(ErrorKind::domain, "component SDs must be positive");
        if (k > 0 && !(component_sd[k] < component_sd[k - 1])) {
            fail(ErrorKind::domain, "component SDs must be strictly decreasing");
        }
    }
    if (component_sd.size() > 3) fail(ErrorKind::invalid_argument, "at most three K-L components are supported");
    if (!(gestation_min >= 14.0 && gestation_max <= 273.0 && gestation_min <= gestation_max)) {
        fail(ErrorKind::domain, "gestation range must lie within [14, 273] days");
    }
    if (!(observations_mean >= 1.0)) fail(ErrorKind::domain, "observations_mean must be at least 1");
    if (!(noise_sd >= 0.0 && gestation_sd >= 0.0 && exposure_error_sd >= 0.0 && time_error_sd >= 0.0)) {
        fail(ErrorKind::domain, "standard deviations must be non-negative");
    }
    if (!(weibull_shape > 0.0)) fail(ErrorKind::domain, "weibull_shape must be positive");
    if (!(event_fraction > 0.0 && event_fraction < 1.0)) fail(ErrorKind::domain, "event_fraction must lie in (0, 1)");
    if (!(asthma_prevalence > 0.0 && asthma_prevalence < 1.0)) {
        fail(ErrorKind::domain, "asthma_prevalence must lie in (0, 1)");
    }
    check_probability(early_censoring, "early_censoring");
    check_probability(obesity_false_negative, "obesity_false_negative");
    check_probability(obesity_false_positive, "obesity_false_positive");
    check_probability(time_error_prob, "time_error_prob");
    check_probability(asthma_sensitivity, "asthma_sensitivity");
    check_probability(asthma_false_positive, "asthma_false_positive");
    check_probability(asthma_frame_prob, "asthma_frame_prob");
    for (const auto& z : covariates) {
        if (z.binary) check_probability(z.mean, "covariate prevalence");
        check_probability(z.false_negative, "covariate false_negative");
        check_probability(z.false_positive, "covariate false_positive");
        if (!(z.sd >= 0.0 && z.error_sd >= 0.0)) fail(ErrorKind::domain, "covariate SDs must be non-negative");
    }
}

SimConfig default_config() {
    SimConfig c;
    CovariateSpec bmi;
    bmi.name = "bmi";
    bmi.sd = 1.0;
    bmi.beta = 0.3;
    bmi.asthma_beta = 0.2;
    bmi.error_sd = 0.3;
    CovariateSpec diabetes;
    diabetes.name = "diabetes";
    diabetes.binary = true;
    diabetes.mean = 0.1;
    diabetes.beta = 0.4;
    diabetes.asthma_beta = 0.1;
    diabetes.false_negative = 0.1;
    diabetes.false_positive = 0.01;
    c.covariates = {bmi, diabetes};
    return c;
}

double true_mean(const SimConfig& config, double t) {
    const double u = std::max(t, 0.0) / fpca::kDomainEnd;
    return config.mean_base + config.mean_gain * u * u;
}

Eigen::VectorXd true_eigenfunctions(const SimConfig& config, double t) {
    const double u = 2.0 * (t - fpca::kDomainStart) / kLength - 1.0;
    const std::array<double, 3> p{1.0, u, 0.5 * (3.0 * u * u - 1.0)};
    Eigen::VectorXd out(static_cast<Eigen::Index>(config.component_sd.size()));
    for (Eigen::Index k = 0; k < out.size(); ++k) {
        out(k) = std::sqrt((2.0 * static_cast<double>(k) + 1.0) / kLength) * p[static_cast<std::size_t>(k)];
    }
    return out;
}

Eigen::VectorXd true_eigenvalues(const SimConfig& config) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(config.component_sd.size()));
    for (Eigen::Index k = 0; k < out.size(); ++k) {
        const double sd = config.component_sd[static_cast<std::size_t>(k)];
        out(k) = sd * sd * kLength;
    }
    return out;
}

double true_trajectory(const SimConfig& config, const Eigen::VectorXd& scores, double t) {
    return true_mean(config, t) + true_eigenfunctions(config, t).dot(scores);
}

Population generate(const SimConfig& config) {
    config.check();
    std::seed_seq seq{static_cast<std::uint32_t>(config.seed), static_cast<std::uint32_t>(config.seed >> 32)};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> normal;
    std::uniform_real_distribution<double> unif;

    const auto n = static_cast<std::size_t>(config.population);
    const std::size_t zc = config.covariates.size();
    const Eigen::VectorXd lambda = true_eigenvalues(config);
    Population pop;
    pop.records.resize(n);
    pop.truth.resize(n);
    pop.series.resize(n);
    pop.true_scores.resize(n);
    pop.true_exposure.resize(n);

    struct Draws {
        double gestation, event_e, censor_u, censor_t, asthma_u, delta_u, time_u, time_e, x_e, asthma_star_u, frame_u;
        std::vector<double> z, z_err;
    };
    std::vector<Draws> d(n);
    std::vector<double> eta_obesity(n), eta_asthma(n);
    const int width = static_cast<int>(std::log10(static_cast<double>(n))) + 1;

    for (std::size_t i = 0; i < n; ++i) {
        auto& dr = d[i];
        Eigen::VectorXd xi(lambda.size());
        for (Eigen::Index k = 0; k < xi.size(); ++k) xi(k) = std::sqrt(lambda(k)) * normal(rng);
        double g = config.gestation_mean;
        if (config.gestation_sd > 0.0) {
            for (int tries = 0;; ++tries) {
                g = std::round(config.gestation_mean + config.gestation_sd * normal(rng));
                if (g >= config.gestation_min && g <= config.gestation_max) break;
                if (tries > 1000) {
                    g = std::clamp(std::round(config.gestation_mean), config.gestation_min, config.gestation_max);
                    break;
                }
            }
        }
        dr.gestation = g;
        std::poisson_distribution<int> pois(config.observations_mean - 1.0);
        const int m = 1 + (config.observations_mean > 1.0 ? pois(rng) : 0);
        std::uniform_int_distribution<int> day(static_cast<int>(fpca::kDomainStart), static_cast<int>(fpca::kDomainEnd));
        std::vector<double> times;
        for (int j = 0; j < m; ++j) times.push_back(day(rng));
        std::sort(times.begin(), times.end());
        times.erase(std::unique(times.begin(), times.end()), times.end());
        auto& s = pop.series[i];
        std::ostringstream id;
        id << 'D' << std::setw(width) << std::setfill('0') << i + 1;
        s.subject = id.str();
        s.times = times;
        for (double t : times) {
            const double w = true_trajectory(config, xi, t + g - 273.0) + config.noise_sd * normal(rng);
            s.values.push_back(std::max(config.min_weight, w));
        }
        pop.true_scores[i] = xi;
        pop.true_exposure[i] =
            (true_trajectory(config, xi, g - 1.0) - true_trajectory(config, xi, 0.0)) / (g / 7.0);

        dr.z.resize(zc);
        dr.z_err.resize(zc);
        for (std::size_t k = 0; k < zc; ++k) {
            const auto& spec = config.covariates[k];
            dr.z[k] = spec.binary ? (unif(rng) < spec.mean ? 1.0 : 0.0) : spec.mean + spec.sd * normal(rng);
            dr.z_err[k] = spec.binary ? unif(rng) : normal(rng);
        }
        dr.event_e = -std::log(1.0 - unif(rng));
        dr.censor_u = unif(rng);
        dr.censor_t = 2.0 + 4.0 * unif(rng);
        dr.asthma_u = unif(rng);
        dr.delta_u = unif(rng);
        dr.time_u = unif(rng);
        dr.time_e = normal(rng);
        dr.x_e = normal(rng);
        dr.asthma_star_u = unif(rng);
        dr.frame_u = unif(rng);

        double eo = config.beta_x * pop.true_exposure[i];
        double ea = config.asthma_beta_x * pop.true_exposure[i];
        for (std::size_t k = 0; k < zc; ++k) {
            eo += config.covariates[k].beta * dr.z[k];
            ea += config.covariates[k].asthma_beta * dr.z[k];
        }
        eta_obesity[i] = eo;
        eta_asthma[i] = ea;
    }

    auto censor_time = [&](const Draws& dr) { return dr.censor_u < config.early_censoring ? dr.censor_t : 6.0; };
    auto event_time = [&](std::size_t i, double log_scale) {
        return 2.0 + std::pow(d[i].event_e / std::exp(log_scale + eta_obesity[i]), 1.0 / config.weibull_shape);
    };
    auto event_fraction = [&](double log_scale) {
        std::size_t events = 0;
        for (std::size_t i = 0; i < n; ++i) events += event_time(i, log_scale) <= censor_time(d[i]) ? 1 : 0;
        return static_cast<double>(events) / static_cast<double>(n);
    };
    const double log_scale = bisect(event_fraction, -30.0, 30.0, config.event_fraction);
    pop.weibull_scale = std::exp(log_scale);
    auto prevalence = [&](double alpha) {
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) sum += expit(alpha + eta_asthma[i]);
        return sum / static_cast<double>(n);
    };
    pop.asthma_intercept = bisect(prevalence, -40.0, 40.0, config.asthma_prevalence);

    if (config.exposure_mode == ExposureMode::fpca) {
        pop.eigensystem = fpca::fit_eigensystem(pop.series);
    }

    for (std::size_t i = 0; i < n; ++i) {
        const auto& dr = d[i];
        DyadRecord& t = pop.truth[i];
        DyadRecord& r = pop.records[i];
        t.id = pop.series[i].subject;
        const double et = event_time(i, log_scale);
        const double c = censor_time(dr);
        const double y = std::min(et, c);
        const int delta = et <= c ? 1 : 0;
        const int asthma = dr.asthma_u < expit(pop.asthma_intercept + eta_asthma[i]) ? 1 : 0;

        double x_valid = pop.true_exposure[i];
        double x_star = 0.0;
        if (config.exposure_mode == ExposureMode::fpca) {
            x_valid = fpca::weight_change(pop.series[i], *pop.eigensystem, dr.gestation);
            x_star = fpca::weight_change(pop.series[i], *pop.eigensystem, kAssumedGestationDays);
        } else {
            const double shift = dr.gestation - 273.0;
            x_star = (true_trajectory(config, pop.true_scores[i], 272.0 + shift) -
                      true_trajectory(config, pop.true_scores[i], 0.0 + shift)) /
                     (273.0 / 7.0);
        }
        if (config.exposure_error_sd > 0.0) x_star += config.exposure_error_sd * dr.x_e;
        if (delta == 1) x_star += config.differential_shift;

        std::vector<double> z(dr.z), z_star(zc);
        for (std::size_t k = 0; k < zc; ++k) {
            const auto& spec = config.covariates[k];
            if (spec.binary) {
                const double flip = z[k] > 0.5 ? spec.false_negative : spec.false_positive;
                z_star[k] = dr.z_err[k] < flip ? 1.0 - z[k] : z[k];
            } else {
                z_star[k] = z[k] + spec.error_sd * dr.z_err[k];
            }
        }

        t.y = y;
        t.delta = delta;
        t.x = x_valid;
        t.z = z;
        t.asthma = asthma;
        t.gestation_days = dr.gestation;
        t.validated = true;
        t.wave_sampled = 0;

        r.id = t.id;
        const double flip = delta == 1 ? config.obesity_false_negative : config.obesity_false_positive;
        r.delta_star = dr.delta_u < flip ? 1 - delta : delta;
        r.y_star = y;
        if (dr.time_u < config.time_error_prob) r.y_star = std::clamp(y + config.time_error_sd * dr.time_e, 2.001, 6.0);
        r.x_star = x_star;
        r.z_star = z_star;
        r.asthma_star = asthma == 1 ? (dr.asthma_star_u < config.asthma_sensitivity ? 1 : 0)
                                    : (dr.asthma_star_u < config.asthma_false_positive ? 1 : 0);
        r.in_asthma_frame = dr.frame_u < config.asthma_frame_prob;

        t.y_star = r.y_star;
        t.delta_star = r.delta_star;
        t.x_star = r.x_star;
        t.z_star = r.z_star;
        t.asthma_star = r.asthma_star;
        t.in_asthma_frame = r.in_asthma_frame;
    }
    return pop;
}

void reveal(std::vector<DyadRecord>& records, std::span<const DyadRecord> truth, std::span<const std::string> ids,
            int wave) {
    std::map<std::string, std::size_t> rec_index, truth_index;
    for (std::size_t i = 0; i < records.size(); ++i) rec_index.emplace(records[i].id, i);
    for (std::size_t i = 0; i < truth.size(); ++i) truth_index.emplace(truth[i].id, i);
    for (const auto& id : ids) {
        auto ri = rec_index.find(id);
        auto ti = truth_index.find(id);
        if (ri == rec_index.end() || ti == truth_index.end()) {
            fail(ErrorKind::schema, "record " + id + " is missing from the records or the truth file");
        }
        DyadRecord& r = records[ri->second];
        if (r.validated) continue;
        const DyadRecord& t = truth[ti->second];
        if (!t.y || !t.delta || !t.x || !t.z) fail(ErrorKind::schema, "truth for record " + id + " is incomplete");
        r.y = t.y;
        r.delta = t.delta;
        r.x = t.x;
        r.z = t.z;
        r.asthma = t.asthma;
        r.gestation_days = t.gestation_days;
        r.validated = true;
        r.wave_sampled = wave;
    }
}

OracleResult oracle_allocation(std::span<const allocation::StratumStats> stats, long n, int min_per_stratum) {
    if (stats.size() > 5 || n > 30) fail(ErrorKind::invalid_argument, "oracle limited to 5 strata and n <= 30");
    if (stats.empty()) fail(ErrorKind::invalid_argument, "no strata");
    OracleResult out;
    out.value = std::numeric_limits<double>::infinity();
    std::vector<std::pair<double, std::vector<int>>> all;
    std::vector<int> cur(stats.size(), 0);
    auto rec = [&](auto&& self, std::size_t s, long left) -> void {
        if (s + 1 == stats.size()) {
            if (left < std::min<long>(min_per_stratum, stats[s].population) || left > stats[s].population) return;
            cur[s] = static_cast<int>(left);
            all.emplace_back(allocation::allocation_variance(stats, cur), cur);
            return;
        }
        for (long k = std::min<long>(min_per_stratum, stats[s].population); k <= std::min<long>(left, stats[s].population); ++k) {
            cur[s] = static_cast<int>(k);
            self(self, s + 1, left - k);
        }
    };
    rec(rec, 0, n);
    if (all.empty()) fail(ErrorKind::infeasible, "no allocation satisfies the bounds");
    for (const auto& [v, a] : all) out.value = std::min(out.value, v);
    const double tol = 1e-12 * std::max(1.0, std::abs(out.value));
    for (const auto& [v, a] : all) {
        if (v <= out.value + tol) out.minimizers.push_back(a);
    }
    return out;
}

namespace {

std::vector<StratumSpec> obesity_grid(double p5, double p95) {
    const Interval no_event{-std::numeric_limits<double>::infinity(), 0.5};
    const Interval event{0.5, std::numeric_limits<double>::infinity()};
    const std::vector<std::pair<Interval, std::vector<Interval>>> outcome{
        {no_event, {{-std::numeric_limits<double>::infinity(), 5.0}, {5.0, std::numeric_limits<double>::infinity()}}},
        {event,
         {{-std::numeric_limits<double>::infinity(), 2.5},
          {2.5, 3.0},
          {3.0, 4.0},
          {4.0, 5.0},
          {5.0, std::numeric_limits<double>::infinity()}}}};
    const std::vector<Interval> gain{{-std::numeric_limits<double>::infinity(), p5},
                                     {p5, p95},
                                     {p95, std::numeric_limits<double>::infinity()}};
    std::vector<StratumSpec> specs;
    int id = 0;
    for (const auto& [d, ys] : outcome) {
        for (const auto& y : ys) {
            for (const auto& g : gain) {
                specs.push_back({std::to_string(++id),
                                 {{Axis::delta_star, d}, {Axis::y_star, y}, {Axis::gain_star, g}}});
            }
        }
    }
    return specs;
}

std::vector<StratumSpec> asthma_grid(double p5, double p50, double p95) {
    const double inf = std::numeric_limits<double>::infinity();
    const Interval no{-inf, 0.5}, yes{0.5, inf};
    return {
        {"1", {{Axis::asthma_star, no}, {Axis::gain_star, {-inf, p5}}}},
        {"2", {{Axis::asthma_star, no}, {Axis::gain_star, {p5, p95}}}},
        {"3", {{Axis::asthma_star, no}, {Axis::gain_star, {p95, inf}}}},
        {"4", {{Axis::asthma_star, yes}, {Axis::gain_star, {-inf, p50}}}},
        {"5", {{Axis::asthma_star, yes}, {Axis::gain_star, {p50, inf}}}},
    };
}

}  // namespace

DesignLedger auto_split(const DesignLedger& ledger, std::span<const DyadRecord> records,
                        const allocation::WaveAllocation& plan, double factor) {
    std::vector<double> optima;
    for (const auto& s : plan.strata) {
        if (!s.closed && s.optimum > 0.0) optima.push_back(s.optimum);
    }
    if (optima.size() < 2) return ledger;
    const double median = quantile(optima, 0.5);
    DesignLedger out = ledger;
    for (const auto& s : plan.strata) {
        if (s.closed || !(s.optimum > factor * median)) continue;
        const Stratum& leaf = out.stratum(s.id);
        std::vector<double> gains;
        for (const auto& r : records) {
            if (out.in_frame(r) && leaf.contains(r)) gains.push_back(axis_value(r, Axis::gain_star));
        }
        if (gains.size() < 4) continue;
        const double cut = quantile(gains, 0.5);
        const Interval iv = leaf.interval_on(Axis::gain_star);
        const auto below = std::count_if(gains.begin(), gains.end(), [&](double g) { return g <= cut; });
        if (!(cut > iv.lo && cut < iv.hi) || below == 0 || below == static_cast<long>(gains.size())) continue;
        out = split_stratum(out, s.id, Axis::gain_star, {cut}, records);
    }
    return out;
}

std::vector<StratumSpec> obesity_strata(std::span<const DyadRecord> records) {
    std::vector<double> gains;
    for (const auto& r : records) gains.push_back(axis_value(r, Axis::gain_star));
    if (gains.empty()) fail(ErrorKind::invalid_argument, "no records to stratify");
    return obesity_grid(quantile(gains, 0.05), quantile(gains, 0.95));
}

std::vector<StratumSpec> asthma_strata(std::span<const DyadRecord> records) {
    std::vector<double> gains;
    for (const auto& r : records) {
        if (r.in_asthma_frame) gains.push_back(axis_value(r, Axis::gain_star));
    }
    if (gains.empty()) fail(ErrorKind::invalid_argument, "the asthma frame is empty");
    return asthma_grid(quantile(gains, 0.05), quantile(gains, 0.5), quantile(gains, 0.95));
}

namespace {

struct WaveRunner {
    std::vector<DyadRecord>& records;
    std::span<const DyadRecord> truth;
    const ExperimentDesign& design;
    int global_wave = 0;
    long overlap = 0;

    void run_wave(DesignLedger& ledger, long n, bool first, const std::map<std::string, double>& influence,
                  std::uint64_t seed) {
        std::map<std::string, int> alloc;
        if (first) {
            const auto stats = allocation::stratum_sd(ledger, records, influence);
            const auto counts = allocation::exact_allocation(stats, n, design.min_per_stratum);
            for (std::size_t k = 0; k < stats.size(); ++k) alloc[stats[k].id] = counts[k];
        } else {
            long already = 0;
            for (const auto* leaf : ledger.leaves()) already += leaf->total_sampled();
            auto stats = allocation::stratum_sd(ledger, records, influence);
            auto plan = allocation::multiwave(stats, already + n, 0);
            ledger = auto_split(ledger, records, plan, design.split_factor);
            stats = allocation::stratum_sd(ledger, records, influence);
            plan = allocation::multiwave(stats, already + n, 0);
            for (const auto& s : plan.strata) {
                alloc[s.id] = s.draw;
                if (s.newly_closed) ledger = close_stratum(ledger, s.id);
            }
        }
        auto result = allocation::draw_sample(ledger, records, alloc, seed);
        ledger = std::move(result.ledger);
        ++global_wave;
        overlap += static_cast<long>(result.overlap.size());
        std::vector<std::string> ids;
        for (const auto& [stratum, members] : result.by_stratum) ids.insert(ids.end(), members.begin(), members.end());
        reveal(records, truth, ids, global_wave);
    }
};

std::map<std::string, double> influence_map(std::span<const DyadRecord> records, std::span<const double> h) {
    std::map<std::string, double> out;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (std::isfinite(h[i])) out.emplace(records[i].id, h[i]);
    }
    return out;
}

std::vector<bool> binary_flags(const SimConfig& config) {
    std::vector<bool> out;
    for (const auto& z : config.covariates) out.push_back(z.binary);
    return out;
}

}  // namespace

ReplicateOutcome run_replicate(const SimConfig& config, const ExperimentDesign& design, std::uint64_t replicate) {
    SimConfig c = config;
    c.seed = derive_seed(config.seed, replicate);
    Population pop = generate(c);
    auto& recs = pop.records;
    const std::size_t zc = c.covariates.size();
    const auto cox = analysis::cox_spec(zc);
    const auto logit = analysis::logistic_spec(zc);
    ReplicateOutcome out;

    WaveRunner runner{recs, pop.truth, design};

    DesignLedger ob = make_ledger("obesity", FrameMembers::all, obesity_strata(recs), recs, derive_seed(c.seed, 1));
    const auto naive_cox = estimators::naive_influence(cox, recs);
    for (std::size_t k = 0; k < design.obesity_waves.size(); ++k) {
        const auto h = k == 0 ? influence_map(recs, naive_cox) : influence_map(recs, estimators::ipw_unit_influence(cox, recs, ob));
        runner.run_wave(ob, design.obesity_waves[k], k == 0, h, ob.rng_seed);
    }
    out.obesity_validated = static_cast<long>(ob.draws.size());

    std::optional<DesignLedger> as;
    std::vector<double> naive_logit;
    const auto zbin = binary_flags(c);
    if (!design.asthma_waves.empty()) {
        as = make_ledger("asthma", FrameMembers::asthma_subset, asthma_strata(recs), recs, derive_seed(c.seed, 2));
        for (std::size_t k = 0; k < design.asthma_waves.size(); ++k) {
            const auto model = imputation::fit_imputation(recs, imputation::default_spec(zc, zbin, true));
            const auto mi = imputation::mi_influence(recs, model, design.mi_replicates, logit, derive_seed(c.seed, 10 + k));
            runner.run_wave(*as, design.asthma_waves[k], k == 0, influence_map(recs, mi.h), as->rng_seed);
        }
        out.asthma_validated = static_cast<long>(as->draws.size());
    }
    out.overlap = runner.overlap;

    auto census = [&](const analysis::ModelSpec& spec) {
        const auto rows = analysis::model_rows(pop.truth, spec, false);
        return analysis::fit(pop.truth, rows, spec, analysis::Source::phase2).coefficients(spec.target_index());
    };

    auto run_endpoint = [&](const std::string& endpoint, const analysis::ModelSpec& spec,
                            const estimators::Design& single, const estimators::Design& multi, std::uint64_t mi_seed) {
        out.census[endpoint] = census(spec);
        std::vector<double> naive, mi_h;
        try {
            naive = estimators::naive_influence(spec, recs);
        } catch (const Error& e) {
            out.failures.push_back(endpoint + "/naive: " + e.what());
        }
        try {
            const auto model = imputation::fit_imputation(recs, imputation::default_spec(zc, zbin, endpoint == "asthma"));
            mi_h = imputation::mi_influence(recs, model, design.mi_replicates, spec, mi_seed).h;
        } catch (const Error& e) {
            out.failures.push_back(endpoint + "/mi: " + e.what());
        }
        const std::array<estimators::Method, 5> methods{estimators::Method::phase1, estimators::Method::ipw_single,
                                                        estimators::Method::ipw_multi, estimators::Method::raking_naive,
                                                        estimators::Method::raking_mi};
        for (auto m : methods) {
            const std::string key = endpoint + "/" + std::string(estimators::to_string(m));
            try {
                std::span<const double> aux;
                if (m == estimators::Method::raking_naive) aux = naive;
                if (m == estimators::Method::raking_mi) aux = mi_h;
                if ((m == estimators::Method::raking_naive || m == estimators::Method::raking_mi) && aux.empty()) {
                    throw Error(ErrorKind::degenerate, "auxiliary unavailable");
                }
                const auto& d = m == estimators::Method::ipw_single ? single : multi;
                const auto res = estimators::estimate(m, spec, recs, d, aux);
                const auto j = spec.target_index();
                out.estimate[key] = res.coefficients(j);
                out.se[key] = res.standard_errors(j);
            } catch (const Error& e) {
                out.failures.push_back(key + ": " + e.what());
            }
        }
    };

    const DesignLedger* as_ptr = as ? &*as : nullptr;
    run_endpoint("obesity", cox, {&ob, nullptr}, {&ob, as_ptr}, derive_seed(c.seed, 100));
    if (design.asthma_endpoint && as) {
        run_endpoint("asthma", logit, {&*as, nullptr}, {&*as, &ob}, derive_seed(c.seed, 101));
    }
    return out;
}

const EstimatorSummary& ExperimentReport::row(std::string_view endpoint, std::string_view estimator) const {
    for (const auto& r : rows) {
        if (r.endpoint == endpoint && r.estimator == estimator) return r;
    }
    fail(ErrorKind::invalid_argument, "no report row for " + std::string(endpoint) + "/" + std::string(estimator));
}

std::string ExperimentReport::csv() const {
    std::ostringstream os;
    os << "endpoint,estimator,replicates,failures,mean_estimate,bias,bias_mcse,bias_truth,empirical_sd,mean_se,coverage\n";
    for (const auto& r : rows) {
        os << r.endpoint << ',' << r.estimator << ',' << r.replicates << ',' << r.failures << ','
           << io::format_number(r.mean_estimate) << ',' << io::format_number(r.bias) << ','
           << io::format_number(r.bias_mcse) << ',' << io::format_number(r.bias_truth) << ','
           << io::format_number(r.empirical_sd) << ',' << io::format_number(r.mean_se) << ','
           << io::format_number(r.coverage) << '\n';
    }
    return os.str();
}

std::string ExperimentReport::table() const {
    std::ostringstream os;
    os << "replicates: " << replicates << "  true beta (obesity): " << true_beta
       << "  true beta (asthma): " << true_asthma_beta << "\n";
    os << std::left << std::setw(9) << "endpoint" << std::setw(11) << "estimator" << std::right << std::setw(6) << "ok"
       << std::setw(10) << "mean" << std::setw(10) << "bias" << std::setw(10) << "mcse" << std::setw(10) << "emp.sd"
       << std::setw(10) << "mean.se" << std::setw(10) << "coverage" << "\n";
    os << std::fixed << std::setprecision(4);
    for (const auto& r : rows) {
        os << std::left << std::setw(9) << r.endpoint << std::setw(11) << r.estimator << std::right << std::setw(6)
           << r.replicates << std::setw(10) << r.mean_estimate << std::setw(10) << r.bias << std::setw(10)
           << r.bias_mcse << std::setw(10) << r.empirical_sd << std::setw(10) << r.mean_se << std::setw(10)
           << r.coverage << "\n";
    }
    return os.str();
}

ExperimentReport run_experiment(const SimConfig& config, const ExperimentDesign& design, int replicates) {
    if (replicates < 1) fail(ErrorKind::invalid_argument, "at least one replicate is required");
    config.check();
    ExperimentReport report;
    report.replicates = replicates;
    report.true_beta = config.beta_x;
    report.true_asthma_beta = config.asthma_beta_x;
    report.outcomes.resize(static_cast<std::size_t>(replicates));
    parallel_for(report.outcomes.size(), [&](std::size_t r) {
        try {
            report.outcomes[r] = run_replicate(config, design, r);
        } catch (const Error& e) {
            report.outcomes[r].failures.push_back(std::string("replicate: ") + e.what());
        }
    });

    std::vector<std::string> endpoints{"obesity"};
    if (design.asthma_endpoint && !design.asthma_waves.empty()) endpoints.push_back("asthma");
    for (const auto& ep : endpoints) {
        const double truth = ep == "obesity" ? config.beta_x : config.asthma_beta_x;
        for (auto m : {estimators::Method::phase1, estimators::Method::ipw_single, estimators::Method::ipw_multi,
                       estimators::Method::raking_naive, estimators::Method::raking_mi}) {
            EstimatorSummary s;
            s.endpoint = ep;
            s.estimator = std::string(estimators::to_string(m));
            const std::string key = ep + "/" + s.estimator;
            std::vector<double> est, dev, dev_truth, se;
            int covered = 0;
            for (const auto& o : report.outcomes) {
                auto it = o.estimate.find(key);
                auto cit = o.census.find(ep);
                if (it == o.estimate.end() || cit == o.census.end() || !std::isfinite(it->second) ||
                    !std::isfinite(o.se.at(key))) {
                    ++s.failures;
                    continue;
                }
                est.push_back(it->second);
                dev.push_back(it->second - cit->second);
                dev_truth.push_back(it->second - truth);
                se.push_back(o.se.at(key));
                if (std::abs(it->second - cit->second) <= 1.959963984540054 * o.se.at(key)) ++covered;
            }
            s.replicates = static_cast<int>(est.size());
            if (!est.empty()) {
                const double k = static_cast<double>(est.size());
                s.mean_estimate = std::accumulate(est.begin(), est.end(), 0.0) / k;
                s.bias = std::accumulate(dev.begin(), dev.end(), 0.0) / k;
                s.bias_truth = std::accumulate(dev_truth.begin(), dev_truth.end(), 0.0) / k;
                double ss = 0.0, ssd = 0.0;
                for (std::size_t i = 0; i < est.size(); ++i) {
                    ss += (est[i] - s.mean_estimate) * (est[i] - s.mean_estimate);
                    ssd += (dev[i] - s.bias) * (dev[i] - s.bias);
                }
                s.empirical_sd = est.size() > 1 ? std::sqrt(ss / (k - 1.0)) : 0.0;
                s.bias_mcse = est.size() > 1 ? std::sqrt(ssd / (k - 1.0) / k) : 0.0;
                s.mean_se = std::accumulate(se.begin(), se.end(), 0.0) / k;
                s.coverage = covered / k;
            }
            report.rows.push_back(s);
        }
    }
    return report;
}

}  // namespace twophase::sim
