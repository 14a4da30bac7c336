#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "twophase/allocation.hpp"
#include "twophase/datamodel.hpp"
#include "twophase/fpca.hpp"

namespace twophase::sim {

struct CovariateSpec {
    std::string name;
    bool binary = false;
    double mean = 0.0;  // prevalence when binary
    double sd = 1.0;
    double beta = 0.0;         // log hazard ratio in the obesity model
    double asthma_beta = 0.0;  // log odds ratio in the asthma model
    double error_sd = 0.0;     // continuous: additive phase-1 error
    double false_negative = 0.0;
    double false_positive = 0.0;
};

/// How phase-1 exposure is derived: `fpca` runs the full FPCA on the simulated
/// weight series; `fast` evaluates the same quantity on the true trajectory
/// plus independent error, which keeps large Monte Carlo runs cheap.
enum class ExposureMode { fpca, fast };

struct SimConfig {
    long population = 10335;
    std::uint64_t seed = 1;

    double mean_base = 70.0;
    double mean_gain = 12.0;
    std::vector<double> component_sd{15.0, 4.0, 1.5};
    double noise_sd = 1.0;
    double observations_mean = 9.0;
    double min_weight = 35.0;

    double gestation_mean = 268.0;
    double gestation_sd = 8.0;
    double gestation_min = 224.0;
    double gestation_max = 273.0;

    double beta_x = 0.87;
    std::vector<CovariateSpec> covariates;
    double weibull_shape = 1.5;
    double event_fraction = 0.179;
    double early_censoring = 0.3;

    double obesity_false_negative = 0.025;
    double obesity_false_positive = 0.0018;
    double time_error_prob = 0.047;
    double time_error_sd = 0.75;

    double asthma_prevalence = 0.131;
    double asthma_beta_x = -0.54;
    double asthma_sensitivity = 0.83;
    double asthma_false_positive = 0.094;
    double asthma_frame_prob = 0.68;

    ExposureMode exposure_mode = ExposureMode::fpca;
    double exposure_error_sd = 0.05;
    /// Added to x_star for true obesity cases: differential exposure error.
    double differential_shift = 0.05;

    /// Zero-error variant: phase 1 equals truth.
    SimConfig without_error() const;
    void check() const;
};

/// Paper-scale defaults with two covariates (one continuous, one binary).
SimConfig default_config();

struct Population {
    std::vector<DyadRecord> records;  // phase-1 view
    std::vector<DyadRecord> truth;    // every phase-2 field filled
    std::vector<fpca::LongitudinalSeries> series;
    std::vector<Eigen::VectorXd> true_scores;
    std::vector<double> true_exposure;
    std::optional<fpca::EigenSystem> eigensystem;
    double weibull_scale = 0.0;
    double asthma_intercept = 0.0;
};

/// Mean curve and eigenfunctions of the generating K-L model.
double true_mean(const SimConfig& config, double t);
Eigen::VectorXd true_eigenfunctions(const SimConfig& config, double t);
Eigen::VectorXd true_eigenvalues(const SimConfig& config);
double true_trajectory(const SimConfig& config, const Eigen::VectorXd& scores, double t);

Population generate(const SimConfig& config);

/// Copies phase-2 values from `truth` into the listed records (the simulated
/// chart review). Records already validated are left alone.
void reveal(std::vector<DyadRecord>& records, std::span<const DyadRecord> truth, std::span<const std::string> ids,
            int wave);

struct OracleResult {
    double value = 0.0;
    std::vector<std::vector<int>> minimizers;  // every allocation tying the optimum
};

/// Exhaustive search over integer allocations with n_s in [min(min, N_s), N_s] summing to n.
OracleResult oracle_allocation(std::span<const allocation::StratumStats> stats, long n, int min_per_stratum = 1);

/// Obesity strata: delta_star x y_star bins x gain_star cut at the frame's 5th and
/// 95th percentiles (21 strata).
std::vector<StratumSpec> obesity_strata(std::span<const DyadRecord> records);
/// Asthma strata: asthma_star x gain_star (5 strata) over asthma-frame members.
std::vector<StratumSpec> asthma_strata(std::span<const DyadRecord> records);

/// Splits open leaves whose optimum exceeds `factor` times the median optimum,
/// cutting at the median phase-1 gain of their members.
DesignLedger auto_split(const DesignLedger& ledger, std::span<const DyadRecord> records,
                        const allocation::WaveAllocation& plan, double factor);

struct ExperimentDesign {
    std::vector<long> obesity_waves{250, 250, 125, 125};
    std::vector<long> asthma_waves{125, 159};
    int mi_replicates = 20;
    double split_factor = 2.0;
    int min_per_stratum = 2;
    bool asthma_endpoint = true;
};

struct EstimatorSummary {
    std::string endpoint;
    std::string estimator;
    int replicates = 0;
    int failures = 0;
    double mean_estimate = 0.0;
    double bias = 0.0;        // against the census fit of the validated data
    double bias_mcse = 0.0;
    double bias_truth = 0.0;  // against the generating coefficient
    double empirical_sd = 0.0;
    double mean_se = 0.0;
    double coverage = 0.0;
};

struct ReplicateOutcome {
    std::map<std::string, double> estimate;
    std::map<std::string, double> se;
    std::map<std::string, double> census;  // per endpoint
    std::vector<std::string> failures;
    long obesity_validated = 0;
    long asthma_validated = 0;
    long overlap = 0;
};

struct ExperimentReport {
    int replicates = 0;
    double true_beta = 0.0;
    double true_asthma_beta = 0.0;
    std::vector<EstimatorSummary> rows;
    std::vector<ReplicateOutcome> outcomes;

    const EstimatorSummary& row(std::string_view endpoint, std::string_view estimator) const;
    std::string csv() const;
    std::string table() const;
};

/// One replicate: generate, run all sampling waves, estimate.
ReplicateOutcome run_replicate(const SimConfig& config, const ExperimentDesign& design, std::uint64_t replicate);

/// Replicate r uses seed sequence (config.seed, r), so results do not depend on
/// the number of worker threads.
ExperimentReport run_experiment(const SimConfig& config, const ExperimentDesign& design, int replicates);

}  // namespace twophase::sim
