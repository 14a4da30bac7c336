#include "twophase/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "twophase/allocation.hpp"
#include "twophase/analysis.hpp"
#include "twophase/datamodel.hpp"
#include "twophase/estimators.hpp"
#include "twophase/fpca.hpp"
#include "twophase/imputation.hpp"
#include "twophase/io.hpp"
#include "twophase/parallel.hpp"
#include "twophase/simulator.hpp"

namespace twophase::cli {

using json = nlohmann::ordered_json;

int exit_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::io: return 3;
        case ErrorKind::parse:
        case ErrorKind::schema: return 4;
        case ErrorKind::infeasible: return 5;
        case ErrorKind::convergence: return 6;
        case ErrorKind::partition:
        case ErrorKind::ledger: return 7;
        case ErrorKind::domain: return 8;
        case ErrorKind::invalid_argument: return 2;
        case ErrorKind::degenerate:
        case ErrorKind::ill_conditioned: return 1;
    }
    return 1;
}

namespace {

enum class Level { error, warn, info, debug };

Level log_level() {
    const char* env = std::getenv("TWOPHASE_LOG_LEVEL");
    const std::string v = env ? env : "info";
    if (v == "error") return Level::error;
    if (v == "warn") return Level::warn;
    if (v == "debug") return Level::debug;
    return Level::info;
}

void log(Level level, const std::string& message) {
    static const char* names[] = {"error", "warn", "info", "debug"};
    if (level <= log_level()) std::cerr << names[static_cast<int>(level)] << ": " << message << '\n';
}

void warn_all(const std::vector<std::string>& warnings) {
    for (const auto& w : warnings) log(Level::warn, w);
}

std::string escape(std::string_view s) {
    std::string out;
    for (char c : s) {
        if (c == '"' || c == '\\') {
            out += '\\';
            out += c;
        } else if (c == '\n') {
            out += "\\n";
        } else {
            out += c;
        }
    }
    return out;
}

void report_error(std::string_view kind, std::string_view message) {
    std::cerr << "error: class=" << kind << " message=\"" << escape(message) << "\"\n";
}

std::vector<bool> binary_columns(std::span<const DyadRecord> records) {
    const std::size_t zc = records.empty() ? 0 : records.front().z_star.size();
    std::vector<bool> out(zc, true);
    for (const auto& r : records) {
        for (std::size_t k = 0; k < zc; ++k) {
            if (r.z_star[k] != 0.0 && r.z_star[k] != 1.0) out[k] = false;
        }
    }
    return out;
}

std::size_t z_count(std::span<const DyadRecord> records) {
    return records.empty() ? 0 : records.front().z_star.size();
}

analysis::ModelSpec model_spec(const std::string& model, std::span<const DyadRecord> records) {
    const auto kind = analysis::model_kind_from_string(model);
    return kind == analysis::ModelKind::cox ? analysis::cox_spec(z_count(records))
                                            : analysis::logistic_spec(z_count(records));
}

std::string default_model(const DesignLedger& ledger) {
    return ledger.members == FrameMembers::asthma_subset ? "logistic" : "cox";
}

std::vector<double> mi_aux(const analysis::ModelSpec& spec, std::span<const DyadRecord> records, int replicates,
                           std::uint64_t seed) {
    const bool asthma = spec.kind == analysis::ModelKind::logistic;
    const auto model = imputation::fit_imputation(
        records, imputation::default_spec(z_count(records), binary_columns(records), asthma));
    warn_all(model.warnings);
    const auto mi = imputation::mi_influence(records, model, replicates, spec, seed);
    if (!mi.dropped.empty()) log(Level::warn, std::to_string(mi.dropped.size()) + " imputation replicates dropped");
    return mi.h;
}

std::vector<double> split_numbers(const std::string& text, std::string_view what) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(io::parse_number(item, what));
    if (out.empty()) fail(ErrorKind::invalid_argument, std::string(what) + " is empty");
    return out;
}

struct Options {
    // shared
    std::string dyads, ledger, out, model, measurements, eigensystem;
    std::uint64_t seed = 1;
    unsigned threads = 0;
    int replicates = 20;

    // simulate
    std::string config, design_file;
    bool experiment = false;
    int experiment_replicates = 500;

    // fpca
    int grid = 101;
    double fve = 0.999;
    double mean_bw = 0.0, cov_bw = 0.0;
    int folds = 5;
    int max_components = 20;
    double level = 0.95;

    // design
    std::string frame, members, influence, allocation_file, ledger_out, stratum, axis, cuts, sample, reveal,
        dyads_out;
    std::vector<std::string> grid_cuts;
    long target = 0;
    int wave = 0;
    int min_per_stratum = -1;
    double split_factor = 0.0;
    std::string method = "ipw", aux = "naive", frame_kind = "single", other_ledger;
    bool all = false;
    double increment = 0.25;

    // report
    std::vector<std::string> inputs;
    std::string csv_out;
};

json base_config(const std::string& command, const Options& o) {
    json j;
    j["command"] = command;
    j["seed"] = o.seed;
    j["threads"] = worker_count();
    return j;
}

void log_config(const json& j) { log(Level::info, "config " + j.dump()); }

void write_or_print(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        std::cout << text;
    } else {
        io::write_text(path, text);
    }
}

// simulate ------------------------------------------------------------------

void cmd_simulate(const Options& o, bool seed_given) {
    sim::SimConfig config = o.config.empty() ? sim::default_config()
                                             : io::parse_sim_config(io::read_text(o.config));
    if (seed_given) config.seed = o.seed;
    config.check();
    const std::filesystem::path dir = o.out;
    json cfg = base_config("simulate", o);
    cfg["config"] = json::parse(io::sim_config_json(config));
    if (o.experiment) {
        const sim::ExperimentDesign design = o.design_file.empty() ? sim::ExperimentDesign{}
                                                                   : io::parse_experiment_design(io::read_text(o.design_file));
        cfg["experiment"] = json::parse(io::experiment_design_json(design));
        cfg["replicates"] = o.experiment_replicates;
        log_config(cfg);
        const auto report = sim::run_experiment(config, design, o.experiment_replicates);
        io::write_text(dir / "config.json", io::sim_config_json(config));
        io::write_text(dir / "design.json", io::experiment_design_json(design));
        io::write_text(dir / "report.csv", report.csv());
        io::write_text(dir / "report.txt", report.table());
        std::cout << report.table();
        return;
    }
    log_config(cfg);
    const auto pop = sim::generate(config);
    io::write_text(dir / "config.json", io::sim_config_json(config));
    io::write_text(dir / "dyads.csv", io::dyads_csv(pop.records));
    io::write_text(dir / "truth.csv", io::dyads_csv(pop.truth));
    io::write_text(dir / "measurements.csv", io::measurements_csv(pop.series));
    if (pop.eigensystem) io::write_text(dir / "eigensystem.json", io::eigensystem_json(*pop.eigensystem));
    log(Level::info, "wrote " + std::to_string(pop.records.size()) + " dyads to " + dir.string());
}

// fpca ----------------------------------------------------------------------

void cmd_fpca_fit(const Options& o, const CLI::App& sub) {
    fpca::FitOptions fo;
    fo.grid_size = o.grid;
    fo.fve_threshold = o.fve;
    fo.cv_folds = o.folds;
    fo.max_components = o.max_components;
    if (sub.count("--mean-bandwidth") > 0) fo.mean_bandwidth = o.mean_bw;
    if (sub.count("--cov-bandwidth") > 0) fo.cov_bandwidth = o.cov_bw;
    json cfg = base_config("fpca fit", o);
    cfg["measurements"] = o.measurements;
    cfg["out"] = o.out;
    cfg["grid_size"] = fo.grid_size;
    cfg["fve_threshold"] = fo.fve_threshold;
    cfg["mean_bandwidth"] = fo.mean_bandwidth ? json(*fo.mean_bandwidth) : json("cv");
    cfg["cov_bandwidth"] = fo.cov_bandwidth ? json(*fo.cov_bandwidth) : json("cv");
    cfg["cv_folds"] = fo.cv_folds;
    cfg["max_components"] = fo.max_components;
    log_config(cfg);
    const auto series = io::read_measurements(o.measurements);
    const auto es = fpca::fit_eigensystem(series, fo);
    if (es.zero_variation) log(Level::warn, "no variation around the mean; zero components retained");
    log(Level::info, "components " + std::to_string(es.components()) + ", noise variance " + io::format_number(es.noise_var));
    io::write_text(o.out, io::eigensystem_json(es));
}

void cmd_fpca_score(const Options& o) {
    json cfg = base_config("fpca score", o);
    cfg["measurements"] = o.measurements;
    cfg["eigensystem"] = o.eigensystem;
    cfg["dyads"] = o.dyads;
    cfg["out"] = o.out;
    log_config(cfg);
    const auto series = io::read_measurements(o.measurements);
    const auto es = io::read_eigensystem(o.eigensystem);
    std::map<std::string, double> gestation;
    if (!o.dyads.empty()) {
        for (const auto& r : io::read_dyads(o.dyads)) {
            if (r.gestation_days) gestation.emplace(r.id, *r.gestation_days);
        }
    }
    const auto scores = fpca::pace_scores_all(series, es);
    std::string text = "subject_id";
    for (int k = 0; k < es.components(); ++k) text += ",xi_" + std::to_string(k + 1);
    text += ",regularized,gestation_days,weight_change\n";
    for (std::size_t i = 0; i < series.size(); ++i) {
        text += series[i].subject;
        for (Eigen::Index k = 0; k < scores[i].xi.size(); ++k) text += ',' + io::format_number(scores[i].xi(k));
        const auto g = gestation.find(series[i].subject);
        const double days = g == gestation.end() ? kAssumedGestationDays : g->second;
        text += std::string(",") + (scores[i].regularized ? "1" : "0") + ',' + io::format_number(days) + ',' +
                io::format_number(fpca::weight_change(series[i], es, days)) + '\n';
    }
    write_or_print(o.out, text);
}

void cmd_fpca_flag(const Options& o) {
    json cfg = base_config("fpca flag", o);
    cfg["measurements"] = o.measurements;
    cfg["eigensystem"] = o.eigensystem;
    cfg["level"] = o.level;
    cfg["out"] = o.out;
    log_config(cfg);
    const auto series = io::read_measurements(o.measurements);
    const auto es = io::read_eigensystem(o.eigensystem);
    std::string text = "subject_id,t_days,weight_kg\n";
    std::size_t flagged = 0;
    for (const auto& s : series) {
        for (std::size_t j : fpca::flag_outliers(s, es, o.level)) {
            text += s.subject + ',' + io::format_number(s.times[j]) + ',' + io::format_number(s.values[j]) + '\n';
            ++flagged;
        }
    }
    log(Level::info, std::to_string(flagged) + " observations flagged");
    write_or_print(o.out, text);
}

// design --------------------------------------------------------------------

void cmd_design_init(const Options& o) {
    json cfg = base_config("design init", o);
    cfg["dyads"] = o.dyads;
    cfg["frame"] = o.frame;
    cfg["members"] = o.members.empty() ? json("default") : json(o.members);
    cfg["cut"] = o.grid_cuts;
    cfg["out"] = o.out;
    log_config(cfg);
    const auto records = io::read_dyads(o.dyads);
    FrameMembers members = o.frame == "asthma" ? FrameMembers::asthma_subset : FrameMembers::all;
    if (!o.members.empty()) members = frame_members_from_string(o.members);
    std::vector<StratumSpec> strata;
    if (!o.grid_cuts.empty()) {
        std::vector<std::pair<Axis, std::vector<double>>> cuts;
        for (const auto& c : o.grid_cuts) {
            const auto colon = c.find(':');
            if (colon == std::string::npos) fail(ErrorKind::invalid_argument, "--cut expects axis:v1,v2,...");
            cuts.emplace_back(axis_from_string(c.substr(0, colon)), split_numbers(c.substr(colon + 1), "--cut"));
        }
        strata = grid_strata(cuts);
    } else if (o.frame == "obesity") {
        strata = sim::obesity_strata(records);
    } else if (o.frame == "asthma") {
        std::vector<DyadRecord> members_only;
        for (const auto& r : records) {
            if (r.in_asthma_frame) members_only.push_back(r);
        }
        strata = sim::asthma_strata(members_only);
    } else {
        fail(ErrorKind::invalid_argument, "frame " + o.frame + " has no default strata; pass --cut");
    }
    const auto ledger = make_ledger(o.frame, members, strata, records, o.seed);
    io::write_text(o.out, io::ledger_json(ledger));
    log(Level::info, std::to_string(ledger.strata.size()) + " strata over " + std::to_string(ledger.frame_size) + " records");
}

void cmd_design_influence(const Options& o) {
    const auto ledger = io::read_ledger(o.ledger);
    const std::string model = o.model.empty() ? default_model(ledger) : o.model;
    json cfg = base_config("design influence", o);
    cfg["dyads"] = o.dyads;
    cfg["ledger"] = o.ledger;
    cfg["model"] = model;
    cfg["method"] = o.method;
    cfg["replicates"] = o.replicates;
    cfg["out"] = o.out;
    log_config(cfg);
    const auto records = io::read_dyads(o.dyads);
    const auto spec = model_spec(model, records);
    std::vector<double> h;
    if (o.method == "naive") {
        h = estimators::naive_influence(spec, records);
    } else if (o.method == "ipw") {
        h = estimators::ipw_unit_influence(spec, records, ledger);
    } else if (o.method == "mi") {
        h = mi_aux(spec, records, o.replicates, o.seed);
    } else {
        fail(ErrorKind::invalid_argument, "--method must be naive, ipw or mi");
    }
    write_or_print(o.out, io::influence_csv(records, h));
}

void cmd_design_allocate(const Options& o, const CLI::App& sub) {
    auto ledger = io::read_ledger(o.ledger);
    const int wave = sub.count("--wave") > 0 ? o.wave : ledger.wave_count + 1;
    if (wave != ledger.wave_count + 1) {
        fail(ErrorKind::ledger, "ledger has " + std::to_string(ledger.wave_count) + " waves; next is " +
                                    std::to_string(ledger.wave_count + 1) + ", not " + std::to_string(wave));
    }
    const bool first = ledger.wave_count == 0;
    const int min = o.min_per_stratum >= 0 ? o.min_per_stratum : (first ? 2 : 0);
    const std::string ledger_out = o.ledger_out.empty() ? o.ledger : o.ledger_out;
    json cfg = base_config("design allocate", o);
    cfg["ledger"] = o.ledger;
    cfg["dyads"] = o.dyads;
    cfg["influence"] = o.influence;
    cfg["target"] = o.target;
    cfg["wave"] = wave;
    cfg["min_per_stratum"] = min;
    cfg["split_factor"] = o.split_factor;
    cfg["out"] = o.out;
    cfg["ledger_out"] = ledger_out;
    log_config(cfg);
    if (o.target <= 0) fail(ErrorKind::invalid_argument, "--target must be positive");
    const auto records = io::read_dyads(o.dyads);
    const auto influence = io::read_influence(o.influence);

    io::AllocationFile file;
    file.frame = ledger.frame;
    file.wave = wave;
    file.wave_size = o.target;
    long already = 0;
    for (const auto* leaf : ledger.leaves()) already += leaf->total_sampled();
    file.cumulative_target = already + o.target;

    auto stats = allocation::stratum_sd(ledger, records, influence);
    if (first) {
        const auto counts = allocation::exact_allocation(stats, o.target, min);
        const auto optimum = allocation::neyman(stats, static_cast<double>(o.target),
                                                allocation::DegenerateFallback::proportional);
        for (std::size_t k = 0; k < stats.size(); ++k) {
            file.decisions.push_back({stats[k].id, counts[k], optimum[k], false, false});
        }
    } else {
        auto plan = allocation::multiwave(stats, file.cumulative_target, min);
        if (o.split_factor > 0.0) {
            const auto before = ledger.strata.size();
            ledger = sim::auto_split(ledger, records, plan, o.split_factor);
            if (ledger.strata.size() != before) {
                log(Level::info, "split " + std::to_string((ledger.strata.size() - before) / 2) + " strata");
                stats = allocation::stratum_sd(ledger, records, influence);
                plan = allocation::multiwave(stats, file.cumulative_target, min);
            }
        }
        for (const auto& d : plan.strata) {
            if (d.newly_closed) {
                ledger = close_stratum(ledger, d.id);
                log(Level::info, "closed stratum " + d.id);
            }
        }
        file.decisions = plan.strata;
    }
    file.stats = stats;
    long total = 0;
    for (const auto& d : file.decisions) total += d.draw;
    if (total != o.target) log(Level::warn, "allocated " + std::to_string(total) + " of " + std::to_string(o.target));
    io::write_text(o.out, io::allocation_json(file));
    io::write_text(ledger_out, io::ledger_json(ledger));
}

void cmd_design_split(const Options& o) {
    json cfg = base_config("design split", o);
    cfg["ledger"] = o.ledger;
    cfg["dyads"] = o.dyads;
    cfg["stratum"] = o.stratum;
    cfg["axis"] = o.axis;
    cfg["cuts"] = o.cuts;
    const std::string out = o.out.empty() ? o.ledger : o.out;
    cfg["out"] = out;
    log_config(cfg);
    const auto ledger = io::read_ledger(o.ledger);
    const auto records = io::read_dyads(o.dyads);
    const auto next = split_stratum(ledger, o.stratum, axis_from_string(o.axis), split_numbers(o.cuts, "--cuts"), records);
    io::write_text(out, io::ledger_json(next));
}

void cmd_design_close(const Options& o) {
    json cfg = base_config("design close", o);
    cfg["ledger"] = o.ledger;
    cfg["stratum"] = o.stratum;
    const std::string out = o.out.empty() ? o.ledger : o.out;
    cfg["out"] = out;
    log_config(cfg);
    io::write_text(out, io::ledger_json(close_stratum(io::read_ledger(o.ledger), o.stratum)));
}

void cmd_design_draw(const Options& o, bool seed_given) {
    auto ledger = io::read_ledger(o.ledger);
    const std::uint64_t seed = seed_given ? o.seed : ledger.rng_seed;
    const std::string out = o.out.empty() ? o.ledger : o.out;
    json cfg = base_config("design draw", o);
    cfg["seed"] = seed;
    cfg["ledger"] = o.ledger;
    cfg["dyads"] = o.dyads;
    cfg["allocation"] = o.allocation_file;
    cfg["out"] = out;
    cfg["sample"] = o.sample;
    cfg["reveal"] = o.reveal;
    cfg["dyads_out"] = o.dyads_out;
    log_config(cfg);
    auto records = io::read_dyads(o.dyads);
    const auto alloc = io::read_allocation(o.allocation_file);
    if (alloc.frame != ledger.frame) fail(ErrorKind::ledger, "allocation is for frame " + alloc.frame);
    if (alloc.wave != ledger.wave_count + 1) {
        fail(ErrorKind::ledger, "allocation is for wave " + std::to_string(alloc.wave) + " but the ledger expects wave " +
                                    std::to_string(ledger.wave_count + 1));
    }
    std::map<std::string, int> counts;
    for (const auto& d : alloc.decisions) counts[d.id] = d.draw;
    const auto result = allocation::draw_sample(ledger, records, counts, seed);
    std::string text = "id,stratum,wave,overlap\n";
    std::vector<std::string> ids;
    const std::set<std::string> overlap(result.overlap.begin(), result.overlap.end());
    for (const auto& [stratum, members] : result.by_stratum) {
        for (const auto& id : members) {
            text += id + ',' + stratum + ',' + std::to_string(result.wave) + ',' + (overlap.count(id) ? "1" : "0") + '\n';
            ids.push_back(id);
        }
    }
    log(Level::info, "drew " + std::to_string(ids.size()) + " records, " + std::to_string(overlap.size()) +
                         " already validated");
    if (!o.sample.empty()) io::write_text(o.sample, text);
    if (!o.reveal.empty()) {
        const auto truth = io::read_dyads(o.reveal);
        sim::reveal(records, truth, ids, result.wave);
        io::write_text(o.dyads_out.empty() ? o.dyads : o.dyads_out, io::dyads_csv(records));
    }
    io::write_text(out, io::ledger_json(result.ledger));
}

// estimate ------------------------------------------------------------------

void cmd_estimate(const Options& o) {
    const auto ledger = io::read_ledger(o.ledger);
    std::optional<DesignLedger> other;
    if (!o.other_ledger.empty()) other = io::read_ledger(o.other_ledger);
    const std::string model = o.model.empty() ? default_model(ledger) : o.model;
    json cfg = base_config("estimate", o);
    cfg["dyads"] = o.dyads;
    cfg["ledger"] = o.ledger;
    cfg["other_ledger"] = o.other_ledger;
    cfg["model"] = model;
    cfg["method"] = o.all ? "all" : o.method;
    cfg["aux"] = o.aux;
    cfg["frame"] = o.frame_kind;
    cfg["replicates"] = o.replicates;
    cfg["increment"] = o.increment;
    cfg["out"] = o.out;
    log_config(cfg);
    const auto records = io::read_dyads(o.dyads);
    const auto spec = model_spec(model, records);

    std::vector<estimators::Method> methods;
    if (o.all) {
        methods = {estimators::Method::phase1, estimators::Method::ipw_single, estimators::Method::ipw_multi,
                   estimators::Method::raking_naive, estimators::Method::raking_mi};
    } else {
        methods = {estimators::method_from_flags(o.method, o.aux, o.frame_kind)};
    }
    const estimators::Design single{&ledger, nullptr};
    const estimators::Design multi{&ledger, other ? &*other : nullptr};
    std::vector<double> naive, mi;
    const auto names = spec.coefficient_names();
    std::string text = "model,estimator,term,estimate,se,ratio,increment,rows\n";
    for (auto m : methods) {
        std::span<const double> aux;
        if (m == estimators::Method::raking_naive) {
            if (naive.empty()) naive = estimators::naive_influence(spec, records);
            aux = naive;
        } else if (m == estimators::Method::raking_mi) {
            if (mi.empty()) mi = mi_aux(spec, records, o.replicates, o.seed);
            aux = mi;
        }
        const bool multi_frame = o.all ? m != estimators::Method::ipw_single : o.frame_kind == "multi";
        const auto res = estimators::estimate(m, spec, records, multi_frame ? multi : single, aux);
        warn_all(res.warnings);
        for (std::size_t j = 0; j < names.size(); ++j) {
            const auto jj = static_cast<Eigen::Index>(j);
            text += model + ',' + std::string(estimators::to_string(m)) + ',' + names[j] + ',' +
                    io::format_number(res.coefficients(jj)) + ',' + io::format_number(res.standard_errors(jj)) + ',' +
                    io::format_number(analysis::effect_ratio(res.coefficients(jj), o.increment)) + ',' +
                    io::format_number(o.increment) + ',' + std::to_string(res.rows) + '\n';
        }
    }
    write_or_print(o.out, text);
}

// report --------------------------------------------------------------------

std::string fixed(double v, int digits) {
    std::ostringstream ss;
    ss.setf(std::ios::fixed);
    ss.precision(digits);
    ss << v;
    return ss.str();
}

void cmd_report(const Options& o) {
    json cfg = base_config("report", o);
    cfg["inputs"] = o.inputs;
    cfg["out"] = o.out;
    cfg["csv"] = o.csv_out;
    log_config(cfg);
    io::CsvTable merged;
    merged.header = {"model", "estimator", "term", "estimate", "se", "ratio", "increment", "rows"};
    for (const auto& path : o.inputs) {
        const auto t = io::read_csv(path);
        const std::string file = std::filesystem::path(path).filename().string();
        std::vector<std::size_t> cols;
        for (const auto& h : merged.header) cols.push_back(t.column(h, file));
        for (std::size_t r = 0; r < t.rows.size(); ++r) {
            std::vector<std::string> row;
            for (auto c : cols) row.push_back(t.rows[r][c]);
            for (std::size_t k = 3; k <= 6; ++k) {
                io::parse_number(row[k], file + " line " + std::to_string(t.line[r]) + " column " + merged.header[k]);
            }
            merged.rows.push_back(std::move(row));
            merged.line.push_back(merged.rows.size() + 1);
        }
    }
    // One block per model; rows are terms, columns are estimators (beta and SE).
    std::vector<std::string> models;
    std::map<std::string, std::vector<std::string>> estimators_of, terms_of;
    std::map<std::string, const std::vector<std::string>*> cell;
    auto add_unique = [](std::vector<std::string>& v, const std::string& s) {
        if (std::find(v.begin(), v.end(), s) == v.end()) v.push_back(s);
    };
    for (const auto& row : merged.rows) {
        add_unique(models, row[0]);
        add_unique(estimators_of[row[0]], row[1]);
        add_unique(terms_of[row[0]], row[2]);
        cell[row[0] + '\n' + row[1] + '\n' + row[2]] = &row;
    }
    std::ostringstream ss;
    for (const auto& model : models) {
        ss << (model == "cox" ? "Cox model (log hazard ratios)" : "Logistic model (log odds ratios)") << '\n';
        ss << std::left << std::setw(12) << "term";
        for (const auto& e : estimators_of[model]) ss << std::right << std::setw(20) << e;
        ss << '\n';
        for (const auto& term : terms_of[model]) {
            ss << std::left << std::setw(12) << term;
            for (const auto& e : estimators_of[model]) {
                const auto it = cell.find(model + '\n' + e + '\n' + term);
                std::string v = "-";
                if (it != cell.end()) {
                    const auto& row = *it->second;
                    v = fixed(io::parse_number(row[3], "estimate"), 3) + " (" + fixed(io::parse_number(row[4], "se"), 3) + ")";
                }
                ss << std::right << std::setw(20) << v;
            }
            ss << '\n';
        }
        ss << '\n';
    }
    write_or_print(o.out, ss.str());
    if (!o.csv_out.empty()) io::write_text(o.csv_out, io::to_csv(merged));
}

}  // namespace

int dispatch(int argc, char** argv) {
    Options o;
    CLI::App app{"Multi-wave two-phase validation sampling"};
    app.name("twophase");
    app.require_subcommand(1);
    app.add_option("--threads", o.threads, "Worker threads (0 = hardware concurrency)");
    auto* seed_opt = app.add_option("--seed", o.seed, "Seed for every random draw")->default_val(1);
    // Subcommands also accept --seed so it may appear after the command name.
    std::vector<CLI::Option*> seed_opts{seed_opt};
    auto add_seed = [&](CLI::App* sub) { seed_opts.push_back(sub->add_option("--seed", o.seed, "Seed")); };

    auto* simulate = app.add_subcommand("simulate", "Generate a synthetic population or run the Monte Carlo experiment");
    simulate->add_option("--config", o.config, "Simulation config JSON")->check(CLI::ExistingFile);
    simulate->add_option("--out", o.out, "Output directory")->required();
    simulate->add_flag("--experiment", o.experiment, "Run the full multi-wave experiment");
    simulate->add_option("--replicates", o.experiment_replicates, "Experiment replicates")->default_val(500);
    simulate->add_option("--design", o.design_file, "Experiment design JSON")->check(CLI::ExistingFile);
    add_seed(simulate);

    auto* fpca_cmd = app.add_subcommand("fpca", "Functional PCA of weight trajectories");
    fpca_cmd->require_subcommand(1);
    auto* fpca_fit = fpca_cmd->add_subcommand("fit", "Estimate mean, covariance and eigenfunctions");
    fpca_fit->add_option("--measurements", o.measurements, "measurements.csv")->required();
    fpca_fit->add_option("--out", o.out, "eigensystem.json")->required();
    fpca_fit->add_option("--grid", o.grid, "Output grid size")->default_val(101);
    fpca_fit->add_option("--fve", o.fve, "Fraction of variance to explain")->default_val(0.999);
    fpca_fit->add_option("--mean-bandwidth", o.mean_bw, "Mean smoother bandwidth in days (default: CV)");
    fpca_fit->add_option("--cov-bandwidth", o.cov_bw, "Covariance smoother bandwidth in days (default: CV)");
    fpca_fit->add_option("--folds", o.folds, "Cross-validation folds")->default_val(5);
    fpca_fit->add_option("--max-components", o.max_components, "Component cap")->default_val(20);
    add_seed(fpca_fit);
    auto* fpca_score = fpca_cmd->add_subcommand("score", "PACE scores and gestational weight change");
    fpca_score->add_option("--measurements", o.measurements, "measurements.csv")->required();
    fpca_score->add_option("--eigensystem", o.eigensystem, "eigensystem.json")->required();
    fpca_score->add_option("--dyads", o.dyads, "dyads.csv holding validated gestation lengths");
    fpca_score->add_option("--out", o.out, "scores.csv (default stdout)");
    add_seed(fpca_score);
    auto* fpca_flag = fpca_cmd->add_subcommand("flag", "Observations outside the pointwise band");
    fpca_flag->add_option("--measurements", o.measurements, "measurements.csv")->required();
    fpca_flag->add_option("--eigensystem", o.eigensystem, "eigensystem.json")->required();
    fpca_flag->add_option("--level", o.level, "Band level")->default_val(0.95);
    fpca_flag->add_option("--out", o.out, "flags.csv (default stdout)");
    add_seed(fpca_flag);

    auto* design = app.add_subcommand("design", "Sampling design ledger");
    design->require_subcommand(1);
    auto* init = design->add_subcommand("init", "Create a ledger with initial strata");
    init->add_option("--dyads", o.dyads, "dyads.csv")->required();
    init->add_option("--frame", o.frame, "Frame name (obesity, asthma or custom)")->required();
    init->add_option("--members", o.members, "all or asthma_subset");
    init->add_option("--cut", o.grid_cuts, "axis:v1,v2,... (repeatable; cartesian grid)");
    init->add_option("--out", o.out, "ledger.json")->required();
    add_seed(init);
    auto* infl = design->add_subcommand("influence", "Influence of the target coefficient per record");
    infl->add_option("--dyads", o.dyads, "dyads.csv")->required();
    infl->add_option("--ledger", o.ledger, "ledger.json of the frame")->required();
    infl->add_option("--model", o.model, "cox or logistic (default from the frame)");
    infl->add_option("--method", o.method, "naive, ipw or mi")->default_val("ipw");
    infl->add_option("--replicates", o.replicates, "Imputations for mi")->default_val(20);
    infl->add_option("--out", o.out, "influence.csv (default stdout)");
    add_seed(infl);
    auto* alloc = design->add_subcommand("allocate", "Allocate the next wave");
    alloc->add_option("--ledger", o.ledger, "ledger.json")->required();
    alloc->add_option("--dyads", o.dyads, "dyads.csv")->required();
    alloc->add_option("--influence", o.influence, "influence.csv")->required();
    alloc->add_option("--target", o.target, "Wave size")->required();
    alloc->add_option("--wave", o.wave, "Wave number (must be the ledger's next)");
    alloc->add_option("--min", o.min_per_stratum, "Minimum per open stratum (default 2 in wave 1, else 0)");
    alloc->add_option("--split-factor", o.split_factor, "Split leaves whose optimum exceeds this times the median");
    alloc->add_option("--out", o.out, "allocation.json")->required();
    alloc->add_option("--ledger-out", o.ledger_out, "Updated ledger (default: overwrite --ledger)");
    add_seed(alloc);
    auto* split = design->add_subcommand("split", "Split a leaf stratum");
    split->add_option("--ledger", o.ledger, "ledger.json")->required();
    split->add_option("--dyads", o.dyads, "dyads.csv")->required();
    split->add_option("--stratum", o.stratum, "Leaf id")->required();
    split->add_option("--axis", o.axis, "delta_star, y_star, x_star, gain_star or asthma_star")->required();
    split->add_option("--cuts", o.cuts, "v1,v2,...")->required();
    split->add_option("--out", o.out, "Updated ledger (default: overwrite --ledger)");
    add_seed(split);
    auto* close = design->add_subcommand("close", "Close a stratum to further sampling");
    close->add_option("--ledger", o.ledger, "ledger.json")->required();
    close->add_option("--stratum", o.stratum, "Leaf id")->required();
    close->add_option("--out", o.out, "Updated ledger (default: overwrite --ledger)");
    add_seed(close);
    auto* draw = design->add_subcommand("draw", "Draw the allocated sample");
    draw->add_option("--ledger", o.ledger, "ledger.json")->required();
    draw->add_option("--dyads", o.dyads, "dyads.csv")->required();
    draw->add_option("--allocation", o.allocation_file, "allocation.json")->required();
    draw->add_option("--out", o.out, "Updated ledger (default: overwrite --ledger)");
    draw->add_option("--sample", o.sample, "sample.csv listing the drawn ids");
    draw->add_option("--reveal", o.reveal, "truth.csv to copy validated values from");
    draw->add_option("--dyads-out", o.dyads_out, "Updated dyads (default: overwrite --dyads)");
    add_seed(draw);

    auto* est = app.add_subcommand("estimate", "Fit the analysis model");
    est->add_option("--dyads", o.dyads, "dyads.csv")->required();
    est->add_option("--ledger", o.ledger, "Ledger of the frame the model targets")->required();
    est->add_option("--other-ledger", o.other_ledger, "Ledger of the other frame (multi-frame)");
    est->add_option("--model", o.model, "cox or logistic (default from the frame)");
    est->add_option("--method", o.method, "phase1, ipw or raking")->default_val("ipw");
    est->add_option("--aux", o.aux, "naive or mi (raking)")->default_val("naive");
    est->add_option("--frame", o.frame_kind, "single or multi")->default_val("single");
    est->add_flag("--all", o.all, "All five estimators");
    est->add_option("--replicates", o.replicates, "Imputations for mi")->default_val(20);
    est->add_option("--increment", o.increment, "Exposure increment for the ratio column")->default_val(0.25);
    est->add_option("--out", o.out, "estimates.csv (default stdout)");
    add_seed(est);

    auto* report = app.add_subcommand("report", "Tabulate estimate files");
    report->add_option("--input", o.inputs, "estimates.csv (repeatable)")->required();
    report->add_option("--out", o.out, "Text table (default stdout)");
    report->add_option("--csv", o.csv_out, "Merged CSV");
    add_seed(report);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        report_error("usage", e.what());
        return 2;
    }

    bool seed_given = false;
    for (const auto* opt : seed_opts) seed_given = seed_given || opt->count() > 0;
    set_worker_count(o.threads);

    try {
        if (*simulate) {
            cmd_simulate(o, seed_given);
        } else if (*fpca_cmd) {
            if (*fpca_fit) cmd_fpca_fit(o, *fpca_fit);
            if (*fpca_score) cmd_fpca_score(o);
            if (*fpca_flag) cmd_fpca_flag(o);
        } else if (*design) {
            if (*init) cmd_design_init(o);
            if (*infl) cmd_design_influence(o);
            if (*alloc) cmd_design_allocate(o, *alloc);
            if (*split) cmd_design_split(o);
            if (*close) cmd_design_close(o);
            if (*draw) cmd_design_draw(o, seed_given);
        } else if (*est) {
            cmd_estimate(o);
        } else if (*report) {
            cmd_report(o);
        }
    } catch (const Error& e) {
        report_error(to_string(e.kind()), e.what());
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        report_error("internal", e.what());
        return 1;
    }
    return 0;
}

}  // namespace twophase::cli
