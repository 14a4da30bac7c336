#include "twophase/estimators.hpp"

#include <cmath>
#include <limits>
#include <map>

#include "twophase/error.hpp"

namespace twophase::estimators {

std::string_view to_string(Method method) {
    switch (method) {
        case Method::phase1: return "Phase1";
        case Method::ipw_single: return "IPW_SF";
        case Method::ipw_multi: return "IPW_MF";
        case Method::raking_naive: return "Raking_Nv";
        case Method::raking_mi: return "Raking_MI";
    }
    return "Phase1";
}

Method method_from_string(std::string_view name) {
    for (Method m : {Method::phase1, Method::ipw_single, Method::ipw_multi, Method::raking_naive, Method::raking_mi}) {
        if (name == to_string(m)) return m;
    }
    fail(ErrorKind::parse, "unknown estimator '" + std::string(name) + "'");
}

Method method_from_flags(std::string_view method, std::string_view aux, std::string_view frame) {
    if (frame != "single" && frame != "multi") fail(ErrorKind::invalid_argument, "frame must be single or multi");
    if (method == "phase1") return Method::phase1;
    if (method == "ipw") return frame == "single" ? Method::ipw_single : Method::ipw_multi;
    if (method == "raking") {
        if (aux == "naive") return Method::raking_naive;
        if (aux == "mi") return Method::raking_mi;
        fail(ErrorKind::invalid_argument, "aux must be naive or mi");
    }
    fail(ErrorKind::invalid_argument, "method must be phase1, ipw or raking");
}

namespace {

double leaf_probability(const DyadRecord& r, const DesignLedger& ledger, std::string* leaf_id) {
    const Stratum& leaf = leaf_for(r, ledger);
    if (leaf_id != nullptr) *leaf_id = leaf.id;
    return static_cast<double>(leaf.total_sampled()) / static_cast<double>(leaf.population_size);
}

bool applies(const analysis::ModelSpec& spec, const DyadRecord& r) {
    return spec.kind == analysis::ModelKind::cox || r.in_asthma_frame;
}

}  // namespace

raking::WeightedSample single_frame_sample(const analysis::ModelSpec& spec, std::span<const DyadRecord> records,
                                           const DesignLedger& ledger) {
    raking::WeightedSample s;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        if (!applies(spec, r) || !ledger.in_frame(r) || !ledger.drawn(r.id)) continue;
        if (!r.validated) fail(ErrorKind::ledger, "record " + r.id + " was drawn but is not validated");
        std::string leaf;
        const double pi = leaf_probability(r, ledger, &leaf);
        if (!(pi > 0.0)) fail(ErrorKind::ledger, "record " + r.id + " sits in a stratum with no draws");
        s.rows.push_back(i);
        s.weights.push_back(1.0 / pi);
        s.strata.push_back(leaf);
        s.clusters.push_back(r.id);
    }
    return s;
}

std::vector<multiframe::FrameUnit> frame_units(const analysis::ModelSpec& spec, std::span<const DyadRecord> records,
                                               const Design& design) {
    if (design.target == nullptr) fail(ErrorKind::invalid_argument, "no target frame");
    const DesignLedger* big = design.target;
    const DesignLedger* small = design.other;
    if (big->members == FrameMembers::asthma_subset) std::swap(big, small);
    if (big == nullptr || big->members != FrameMembers::all) {
        fail(ErrorKind::invalid_argument, "multi-frame estimation needs a frame covering every record");
    }
    std::vector<multiframe::FrameUnit> units;
    for (const auto& r : records) {
        if (!applies(spec, r)) continue;
        multiframe::FrameUnit u;
        u.id = r.id;
        u.pi_o = leaf_probability(r, *big, &u.stratum_o);
        u.sampled_o = big->drawn(r.id);
        if (small != nullptr && small->in_frame(r)) {
            u.pi_a = leaf_probability(r, *small, &u.stratum_a);
            u.sampled_a = small->drawn(r.id);
        }
        units.push_back(std::move(u));
    }
    return units;
}

raking::WeightedSample multi_frame_sample(const analysis::ModelSpec& spec, std::span<const DyadRecord> records,
                                          const Design& design, std::vector<multiframe::WeightRow>* rows_out) {
    const auto units = frame_units(spec, records, design);
    const auto rows = multiframe::combine_frames(units);
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < records.size(); ++i) index.emplace(records[i].id, i);
    raking::WeightedSample s;
    for (const auto& row : rows) {
        const std::size_t i = index.at(row.record_id);
        if (!records[i].validated) fail(ErrorKind::ledger, "record " + row.record_id + " was drawn but is not validated");
        s.rows.push_back(i);
        s.weights.push_back(row.weight);
        s.strata.push_back(row.stratum);
        s.clusters.push_back(row.cluster);
    }
    if (rows_out != nullptr) *rows_out = rows;
    return s;
}

std::vector<double> naive_influence(const analysis::ModelSpec& spec, std::span<const DyadRecord> records) {
    const auto rows = analysis::model_rows(records, spec, false);
    const auto fit = analysis::fit(records, rows, spec, analysis::Source::phase1);
    const Eigen::VectorXd h = models::influence_for_target(fit, spec.target_index());
    std::vector<double> out(records.size(), std::numeric_limits<double>::quiet_NaN());
    for (std::size_t k = 0; k < rows.size(); ++k) out[rows[k]] = h(static_cast<Eigen::Index>(k));
    return out;
}

std::vector<double> ipw_unit_influence(const analysis::ModelSpec& spec, std::span<const DyadRecord> records,
                                       const DesignLedger& ledger) {
    const auto sample = single_frame_sample(spec, records, ledger);
    const auto fit = analysis::fit(records, sample.rows, spec, analysis::Source::phase2, sample.weights);
    const Eigen::VectorXd h = models::unit_influence_for_target(fit, spec.target_index());
    std::vector<double> out(records.size(), std::numeric_limits<double>::quiet_NaN());
    for (std::size_t k = 0; k < sample.rows.size(); ++k) out[sample.rows[k]] = h(static_cast<Eigen::Index>(k));
    return out;
}

Result estimate(Method method, const analysis::ModelSpec& spec, std::span<const DyadRecord> records,
                const Design& design, std::span<const double> aux) {
    Result res;
    res.method = method;
    if (method == Method::phase1) {
        const auto rows = analysis::model_rows(records, spec, false);
        const auto fit = analysis::fit(records, rows, spec, analysis::Source::phase1);
        res.coefficients = fit.coefficients;
        res.standard_errors = fit.variance.diagonal().cwiseSqrt();
        res.rows = rows.size();
        return res;
    }
    if (design.target == nullptr) fail(ErrorKind::invalid_argument, "estimation needs the target frame's ledger");
    if (method == Method::ipw_single) {
        const auto sample = single_frame_sample(spec, records, *design.target);
        const auto est = raking::ipw_fit(spec, records, sample);
        res.coefficients = est.fit.coefficients;
        res.standard_errors = est.standard_errors();
        res.warnings = est.warnings;
        res.rows = sample.rows.size();
        return res;
    }
    const auto sample = design.other != nullptr ? multi_frame_sample(spec, records, design)
                                                : single_frame_sample(spec, records, *design.target);
    if (method == Method::ipw_multi) {
        const auto est = raking::ipw_fit(spec, records, sample);
        res.coefficients = est.fit.coefficients;
        res.standard_errors = est.standard_errors();
        res.warnings = est.warnings;
        res.rows = sample.rows.size();
        return res;
    }
    if (aux.size() != records.size()) fail(ErrorKind::invalid_argument, "raking needs one auxiliary value per record");
    const auto pop = analysis::model_rows(records, spec, false);
    Eigen::VectorXd totals = Eigen::VectorXd::Zero(2);
    totals(0) = static_cast<double>(pop.size());
    for (std::size_t i : pop) {
        if (!std::isfinite(aux[i])) fail(ErrorKind::domain, "auxiliary value missing for record " + records[i].id);
        totals(1) += aux[i];
    }
    Eigen::MatrixXd a(static_cast<Eigen::Index>(sample.rows.size()), 1);
    for (std::size_t k = 0; k < sample.rows.size(); ++k) a(static_cast<Eigen::Index>(k), 0) = aux[sample.rows[k]];
    const auto est = raking::raking_fit(spec, records, sample, a, totals);
    res.coefficients = est.fit.coefficients;
    res.standard_errors = est.standard_errors();
    res.warnings = est.warnings;
    res.rows = sample.rows.size();
    return res;
}

}  // namespace twophase::estimators
