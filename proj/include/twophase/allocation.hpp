#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "twophase/datamodel.hpp"

namespace twophase::allocation {

/// Where a stratum's influence-function SD came from.
enum class SdSource { direct, parent, pooled };

std::string_view to_string(SdSource source);
SdSource sd_source_from_string(std::string_view name);

struct StratumStats {
    std::string id;
    long population = 0;      // N_s
    double sigma = 0.0;       // SD of the influence function within the stratum
    int already_sampled = 0;  // draws in earlier waves
    bool closed = false;
    SdSource sd_source = SdSource::direct;
};

enum class DegenerateFallback { fail, proportional };

/// Fractional Neyman allocation n * N_s sigma_s / sum(N sigma).
std::vector<double> neyman(std::span<const StratumStats> stats, double n,
                           DegenerateFallback fallback = DegenerateFallback::fail);

/// Integer allocation minimizing sum N_s^2 sigma_s^2 / n_s with n_s >= min_per_stratum
/// (capped at N_s) and n_s <= N_s, by greedy priority N_s sigma_s / sqrt(m (m + 1)). Strata with
/// sigma_s = 0 stay at the minimum unless nothing else can absorb the budget.
std::vector<int> exact_allocation(std::span<const StratumStats> stats, long n, int min_per_stratum = 1);

/// Objective the exact allocation minimizes.
double allocation_variance(std::span<const StratumStats> stats, std::span<const int> allocation);

struct StratumDecision {
    std::string id;
    int draw = 0;           // wave draw n_(k),s
    /// Fractional cumulative target on the final open set; for strata closed in
    /// this call, the optimum that closed them.
    double optimum = 0.0;
    bool closed = false;    // closed now or earlier
    bool newly_closed = false;
};

struct WaveAllocation {
    std::vector<StratumDecision> strata;
    int iterations = 0;  // close-and-recompute rounds
    long total_draw = 0;
};

/// Wave-k allocation toward the cumulative target: strata whose Neyman optimum
/// falls below what they already hold are closed and the remaining budget is
/// re-allocated over the open strata; integer draws come from the exact greedy
/// started at each open stratum's current holding.
WaveAllocation multiwave(std::span<const StratumStats> stats, long cumulative_target,
                         int min_per_stratum = 1);

/// Per-leaf SD of the influence values (sample SD, n - 1 denominator). Leaves with
/// fewer than two values borrow from the nearest ancestor holding two or more,
/// then from the whole frame.
std::vector<StratumStats> stratum_sd(const DesignLedger& ledger, std::span<const DyadRecord> records,
                                     const std::map<std::string, double>& influence);

struct DrawResult {
    DesignLedger ledger;
    std::map<std::string, std::vector<std::string>> by_stratum;
    std::vector<std::string> overlap;  // drawn records already validated elsewhere
    int wave = 0;
};

/// Simple random sampling without replacement within each leaf, recorded as the
/// ledger's next wave. Deterministic in (seed, wave, stratum).
DrawResult draw_sample(const DesignLedger& ledger, std::span<const DyadRecord> records,
                       const std::map<std::string, int>& allocation, std::uint64_t seed);

}  // namespace twophase::allocation
