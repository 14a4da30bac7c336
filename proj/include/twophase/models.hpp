#pragma once

#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace twophase::models {

/// Right-censored survival rows. Covariates are numeric; categorical inputs
/// arrive pre-expanded to indicator columns.
struct CoxData {
    std::vector<double> time;
    std::vector<int> event;
    Eigen::MatrixXd covariates;

    Eigen::Index rows() const { return covariates.rows(); }
};

/// Binary-outcome rows. The design matrix carries its own intercept column.
struct LogisticData {
    std::vector<int> outcome;
    Eigen::MatrixXd covariates;

    Eigen::Index rows() const { return covariates.rows(); }
};

struct FitOptions {
    int max_iterations = 50;
    /// Applied to the max-norm of the score divided by the mean weight.
    double gradient_tolerance = 1e-8;
    /// When false a failed fit is returned with converged = false.
    bool throw_on_failure = true;
};

struct FitResult {
    Eigen::VectorXd coefficients;
    /// Model-based inverse information; design-based variances replace it downstream.
    Eigen::MatrixXd variance;
    Eigen::MatrixXd information;
    /// Row i is H_i = I^{-1} w_i U_i, so the rows sum to the (zero) total score step.
    Eigen::MatrixXd influence;
    std::vector<double> weights;
    double log_likelihood = 0.0;
    bool converged = false;
    int iterations = 0;
    std::string diagnostics;
};

double cox_log_partial_likelihood(const CoxData& data, std::span<const double> weights,
                                  const Eigen::VectorXd& beta);
Eigen::VectorXd cox_score(const CoxData& data, std::span<const double> weights,
                          const Eigen::VectorXd& beta);

/// Weighted Breslow partial likelihood maximized by Newton with step halving.
FitResult fit_cox(const CoxData& data, std::span<const double> weights, const FitOptions& options = {});
FitResult fit_cox(const CoxData& data, const FitOptions& options = {});

double logistic_log_likelihood(const LogisticData& data, std::span<const double> weights,
                               const Eigen::VectorXd& beta);
Eigen::VectorXd logistic_score(const LogisticData& data, std::span<const double> weights,
                               const Eigen::VectorXd& beta);

FitResult fit_logistic(const LogisticData& data, std::span<const double> weights,
                       const FitOptions& options = {});
FitResult fit_logistic(const LogisticData& data, const FitOptions& options = {});

/// Component `target` of the weighted influence H_i.
Eigen::VectorXd influence_for_target(const FitResult& fit, Eigen::Index target);

/// Influence per unit weight, H_i / w_i. Neyman allocation needs this scale
/// because records in different strata carry different design weights.
Eigen::VectorXd unit_influence_for_target(const FitResult& fit, Eigen::Index target);

/// Stratified with-replacement linearization variance of a total of `contributions`
/// (one row per analysis row). Rows sharing a cluster id are summed first; a
/// cluster takes the stratum of its first row. Strata with a single cluster are
/// folded into a pooled stratum and reported through `warnings`.
Eigen::MatrixXd sandwich_variance(const Eigen::MatrixXd& contributions,
                                  std::span<const std::string> strata,
                                  std::span<const std::string> clusters = {},
                                  std::vector<std::string>* warnings = nullptr);

Eigen::MatrixXd sandwich_variance(const FitResult& fit, std::span<const std::string> strata,
                                  std::span<const std::string> clusters = {},
                                  std::vector<std::string>* warnings = nullptr);

}  // namespace twophase::models
