#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "twophase/allocation.hpp"
#include "twophase/datamodel.hpp"
#include "twophase/fpca.hpp"
#include "twophase/multiframe.hpp"
#include "twophase/simulator.hpp"

namespace twophase::io {

/// Shortest decimal text that round-trips to the same double.
std::string format_number(double v);
double parse_number(std::string_view text, std::string_view context);

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
    std::vector<std::size_t> line;  // source line of each row, 1-based

    std::size_t column(std::string_view name, std::string_view file) const;
    std::optional<std::size_t> find(std::string_view name) const;
};

CsvTable parse_csv(std::string_view text, std::string_view file = "input");
CsvTable read_csv(const std::filesystem::path& path);
std::string to_csv(const CsvTable& table);

std::string read_text(const std::filesystem::path& path);
/// Writes through a temporary file in the same directory, then renames.
void write_text(const std::filesystem::path& path, std::string_view text);

std::vector<DyadRecord> parse_dyads(const CsvTable& table, std::string_view file = "dyads.csv");
std::vector<DyadRecord> read_dyads(const std::filesystem::path& path);
std::string dyads_csv(std::span<const DyadRecord> records);

std::vector<fpca::LongitudinalSeries> parse_measurements(const CsvTable& table, std::string_view file = "measurements.csv");
std::vector<fpca::LongitudinalSeries> read_measurements(const std::filesystem::path& path);
std::string measurements_csv(std::span<const fpca::LongitudinalSeries> series);

std::string ledger_json(const DesignLedger& ledger);
DesignLedger parse_ledger(std::string_view text);
DesignLedger read_ledger(const std::filesystem::path& path);

std::string eigensystem_json(const fpca::EigenSystem& es);
fpca::EigenSystem parse_eigensystem(std::string_view text);
fpca::EigenSystem read_eigensystem(const std::filesystem::path& path);

/// `id,h` rows.
std::map<std::string, double> read_influence(const std::filesystem::path& path);
std::string influence_csv(std::span<const DyadRecord> records, std::span<const double> h);

struct AllocationFile {
    std::string frame;
    int wave = 0;
    long wave_size = 0;
    long cumulative_target = 0;
    std::vector<allocation::StratumStats> stats;
    std::vector<allocation::StratumDecision> decisions;
};

std::string allocation_json(const AllocationFile& a);
AllocationFile parse_allocation(std::string_view text);
AllocationFile read_allocation(const std::filesystem::path& path);

std::string combined_weights_csv(std::span<const multiframe::WeightRow> rows);

std::string sim_config_json(const sim::SimConfig& config);
/// Keys absent from the JSON keep their defaults; unknown keys are rejected.
sim::SimConfig parse_sim_config(std::string_view text, sim::SimConfig base = sim::default_config());

std::string experiment_design_json(const sim::ExperimentDesign& design);
sim::ExperimentDesign parse_experiment_design(std::string_view text);

}  // namespace twophase::io
