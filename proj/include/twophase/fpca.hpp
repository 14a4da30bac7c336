#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace twophase::fpca {

/// Gestational domain in days relative to assumed conception.
inline constexpr double kDomainStart = -365.0;
inline constexpr double kDomainEnd = 272.0;

struct LongitudinalSeries {
    std::string subject;
    std::vector<double> times;
    std::vector<double> values;
};

void check_series(const LongitudinalSeries& series);

struct FitOptions {
    int grid_size = 101;
    double fve_threshold = 0.999;
    std::optional<double> mean_bandwidth;
    std::optional<double> cov_bandwidth;
    int cv_folds = 5;
    int max_components = 20;
};

struct EigenSystem {
    std::vector<double> grid;
    std::vector<double> mean;
    std::vector<double> eigenvalues;     // K retained, non-increasing
    Eigen::MatrixXd eigenfunctions;      // grid_size x K
    double noise_var = 0.0;
    std::vector<double> fve;             // cumulative, one entry per candidate K
    double mean_bandwidth = 0.0;
    double cov_bandwidth = 0.0;
    bool zero_variation = false;

    int components() const { return static_cast<int>(eigenvalues.size()); }
    double mean_at(double t) const;
    Eigen::VectorXd eigenfunctions_at(double t) const;
};

EigenSystem fit_eigensystem(std::span<const LongitudinalSeries> series, const FitOptions& options = {});

struct Scores {
    Eigen::VectorXd xi;
    Eigen::MatrixXd omega;     // conditional covariance of the scores
    bool regularized = false;  // set when the noise-free system was singular
};

Scores pace_scores(const LongitudinalSeries& series, const EigenSystem& es);

/// Scores for many subjects; parallel over subjects, identical to serial calls.
std::vector<Scores> pace_scores_all(std::span<const LongitudinalSeries> series, const EigenSystem& es);

double reconstruct(const Eigen::VectorXd& xi, const EigenSystem& es, double t);

/// Shifts times to the validated conception date, t' = t + g - 273, dropping
/// points that leave the domain.
LongitudinalSeries reanchor(const LongitudinalSeries& series, double gestation_days);

/// [W(g - 1) - W(0)] / (g / 7) from the re-anchored PACE fit; g in [14, 273].
double weight_change(const LongitudinalSeries& series, const EigenSystem& es, double gestation_days);

/// Observations outside the pointwise band z * sqrt(phi' Omega phi + sigma^2).
std::vector<std::size_t> flag_outliers(const LongitudinalSeries& series, const EigenSystem& es,
                                       double level = 0.95);

}  // namespace twophase::fpca
