#include "twophase/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <json.hpp>

#include "twophase/error.hpp"

namespace twophase::io {

using json = nlohmann::ordered_json;

std::string format_number(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    if (ec != std::errc{}) fail(ErrorKind::io, "cannot format number");
    return std::string(buf, ptr);
}

double parse_number(std::string_view text, std::string_view context) {
    if (text == "inf" || text == "+inf") return std::numeric_limits<double>::infinity();
    if (text == "-inf") return -std::numeric_limits<double>::infinity();
    if (text == "nan") return std::numeric_limits<double>::quiet_NaN();
    double v = 0.0;
    const char* begin = text.data();
    if (!text.empty() && text.front() == '+') ++begin;
    auto [ptr, ec] = std::from_chars(begin, text.data() + text.size(), v);
    if (text.empty() || ec != std::errc{} || ptr != text.data() + text.size()) {
        fail(ErrorKind::parse, std::string(context) + ": '" + std::string(text) + "' is not a number");
    }
    return v;
}

namespace {

long parse_integer(std::string_view text, std::string_view context) {
    long v = 0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (text.empty() || ec != std::errc{} || ptr != text.data() + text.size()) {
        fail(ErrorKind::parse, std::string(context) + ": '" + std::string(text) + "' is not an integer");
    }
    return v;
}

int parse_flag(std::string_view text, std::string_view context) {
    if (text == "0" || text == "false") return 0;
    if (text == "1" || text == "true") return 1;
    fail(ErrorKind::parse, std::string(context) + ": '" + std::string(text) + "' is not 0 or 1");
}

std::string csv_field(std::string_view s) {
    if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

}  // namespace

std::optional<std::size_t> CsvTable::find(std::string_view name) const {
    for (std::size_t j = 0; j < header.size(); ++j) {
        if (header[j] == name) return j;
    }
    return std::nullopt;
}

std::size_t CsvTable::column(std::string_view name, std::string_view file) const {
    if (auto j = find(name)) return *j;
    fail(ErrorKind::schema, std::string(file) + ": missing column '" + std::string(name) + "'");
}

CsvTable parse_csv(std::string_view text, std::string_view file) {
    CsvTable t;
    std::vector<std::string> fields;
    std::string field;
    bool quoted = false;
    bool at_start = true;
    std::size_t line = 1, row_line = 1;
    auto end_row = [&] {
        fields.push_back(std::move(field));
        field.clear();
        const bool blank = fields.size() == 1 && fields[0].empty();
        if (!blank) {
            if (t.header.empty()) {
                t.header = std::move(fields);
            } else {
                if (fields.size() != t.header.size()) {
                    fail(ErrorKind::parse, std::string(file) + " line " + std::to_string(row_line) + ": expected " +
                                               std::to_string(t.header.size()) + " fields, found " +
                                               std::to_string(fields.size()));
                }
                t.rows.push_back(std::move(fields));
                t.line.push_back(row_line);
            }
        }
        fields.clear();
        at_start = true;
    };
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (at_start) {
            row_line = line;
            at_start = false;
        }
        if (quoted) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                if (c == '\n') ++line;
                field += c;
            }
            continue;
        }
        if (c == '"' && field.empty()) {
            quoted = true;
        } else if (c == ',') {
            fields.push_back(std::move(field));
            field.clear();
        } else if (c == '\n') {
            end_row();
            ++line;
        } else if (c != '\r') {
            field += c;
        }
    }
    if (quoted) fail(ErrorKind::parse, std::string(file) + " line " + std::to_string(row_line) + ": unterminated quote");
    if (!at_start) end_row();
    if (t.header.empty()) fail(ErrorKind::schema, std::string(file) + ": missing header row");
    std::set<std::string> seen;
    for (const auto& h : t.header) {
        if (!seen.insert(h).second) fail(ErrorKind::schema, std::string(file) + ": duplicate column '" + h + "'");
    }
    return t;
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::io, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) fail(ErrorKind::io, "cannot read " + path.string());
    return ss.str();
}

void write_text(const std::filesystem::path& path, std::string_view text) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
        if (ec) fail(ErrorKind::io, "cannot create directory " + path.parent_path().string());
    }
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) fail(ErrorKind::io, "cannot write " + path.string());
        out << text;
        out.flush();
        if (!out) fail(ErrorKind::io, "cannot write " + path.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) fail(ErrorKind::io, "cannot write " + path.string() + ": " + ec.message());
}

CsvTable read_csv(const std::filesystem::path& path) { return parse_csv(read_text(path), path.filename().string()); }

std::string to_csv(const CsvTable& table) {
    std::string out;
    auto row = [&](const std::vector<std::string>& fields) {
        for (std::size_t j = 0; j < fields.size(); ++j) {
            if (j > 0) out += ',';
            out += csv_field(fields[j]);
        }
        out += '\n';
    };
    row(table.header);
    for (const auto& r : table.rows) row(r);
    return out;
}

namespace {

std::vector<std::size_t> indexed_columns(const CsvTable& t, const std::string& prefix) {
    std::vector<std::size_t> cols;
    for (std::size_t k = 0;; ++k) {
        auto j = t.find(prefix + std::to_string(k));
        if (!j) break;
        cols.push_back(*j);
    }
    for (const auto& h : t.header) {
        if (h.rfind(prefix, 0) == 0 && h.size() > prefix.size() &&
            std::all_of(h.begin() + static_cast<long>(prefix.size()), h.end(), ::isdigit)) {
            const auto k = static_cast<std::size_t>(std::stoul(h.substr(prefix.size())));
            if (k >= cols.size()) fail(ErrorKind::schema, "column '" + h + "' is out of sequence");
        }
    }
    return cols;
}

}  // namespace

std::vector<DyadRecord> parse_dyads(const CsvTable& t, std::string_view file) {
    const auto c_id = t.column("id", file);
    const auto c_y_star = t.column("y_star", file);
    const auto c_delta_star = t.column("delta_star", file);
    const auto c_x_star = t.column("x_star", file);
    const auto z_star_cols = indexed_columns(t, "z_star_");
    const auto aux_cols = indexed_columns(t, "aux_");
    const auto z_cols = indexed_columns(t, "z_");
    const auto c_asthma_star = t.find("asthma_star");
    const auto c_frame = t.find("in_asthma_frame");
    const auto c_validated = t.find("validated");
    const auto c_wave = t.find("wave_sampled");
    const auto c_y = t.find("y");
    const auto c_delta = t.find("delta");
    const auto c_x = t.find("x");
    const auto c_asthma = t.find("asthma");
    const auto c_gest = t.find("gestation_days");
    if (!z_cols.empty() && z_cols.size() != z_star_cols.size()) {
        fail(ErrorKind::schema, std::string(file) + ": z and z_star column counts differ");
    }

    std::vector<DyadRecord> out;
    out.reserve(t.rows.size());
    std::set<std::string> ids;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const auto& row = t.rows[r];
        const std::string where = std::string(file) + " line " + std::to_string(t.line[r]);
        auto ctx = [&](std::size_t j) { return where + " column " + t.header[j]; };
        auto opt = [&](const std::optional<std::size_t>& j) -> const std::string* {
            if (!j || row[*j].empty()) return nullptr;
            return &row[*j];
        };
        DyadRecord d;
        d.id = row[c_id];
        if (d.id.empty()) fail(ErrorKind::parse, where + ": empty id");
        if (!ids.insert(d.id).second) fail(ErrorKind::schema, where + ": duplicate id " + d.id);
        d.y_star = parse_number(row[c_y_star], ctx(c_y_star));
        d.delta_star = parse_flag(row[c_delta_star], ctx(c_delta_star));
        d.x_star = parse_number(row[c_x_star], ctx(c_x_star));
        for (auto j : z_star_cols) d.z_star.push_back(parse_number(row[j], ctx(j)));
        for (auto j : aux_cols) d.aux.push_back(parse_number(row[j], ctx(j)));
        if (auto v = opt(c_asthma_star)) d.asthma_star = parse_flag(*v, ctx(*c_asthma_star));
        if (auto v = opt(c_frame)) d.in_asthma_frame = parse_flag(*v, ctx(*c_frame)) == 1;
        if (auto v = opt(c_validated)) d.validated = parse_flag(*v, ctx(*c_validated)) == 1;
        if (auto v = opt(c_wave)) d.wave_sampled = static_cast<int>(parse_integer(*v, ctx(*c_wave)));
        if (auto v = opt(c_y)) d.y = parse_number(*v, ctx(*c_y));
        if (auto v = opt(c_delta)) d.delta = parse_flag(*v, ctx(*c_delta));
        if (auto v = opt(c_x)) d.x = parse_number(*v, ctx(*c_x));
        if (auto v = opt(c_asthma)) d.asthma = parse_flag(*v, ctx(*c_asthma));
        if (auto v = opt(c_gest)) d.gestation_days = parse_number(*v, ctx(*c_gest));
        bool z_any = false, z_all = true;
        std::vector<double> z;
        for (auto j : z_cols) {
            if (row[j].empty()) {
                z_all = false;
            } else {
                z_any = true;
                z.push_back(parse_number(row[j], ctx(j)));
            }
        }
        if (z_any && !z_all) fail(ErrorKind::schema, where + ": z columns partially filled");
        if (z_any || (z_cols.empty() && d.z_star.empty() && d.validated)) d.z = z;
        try {
            check_record(d);
        } catch (const Error& e) {
            fail(e.kind(), where + ": " + e.what());
        }
        out.push_back(std::move(d));
    }
    return out;
}

std::vector<DyadRecord> read_dyads(const std::filesystem::path& path) {
    return parse_dyads(read_csv(path), path.filename().string());
}

std::string dyads_csv(std::span<const DyadRecord> records) {
    const std::size_t zc = records.empty() ? 0 : records.front().z_star.size();
    const std::size_t ac = records.empty() ? 0 : records.front().aux.size();
    std::string out = "id,y_star,delta_star,x_star";
    for (std::size_t k = 0; k < zc; ++k) out += ",z_star_" + std::to_string(k);
    for (std::size_t k = 0; k < ac; ++k) out += ",aux_" + std::to_string(k);
    out += ",asthma_star,in_asthma_frame,validated,wave_sampled,y,delta,x";
    for (std::size_t k = 0; k < zc; ++k) out += ",z_" + std::to_string(k);
    out += ",asthma,gestation_days\n";
    for (const auto& r : records) {
        if (r.z_star.size() != zc || r.aux.size() != ac) {
            fail(ErrorKind::schema, "record " + r.id + " has a different number of covariates");
        }
        out += csv_field(r.id) + ',' + format_number(r.y_star) + ',' + std::to_string(r.delta_star) + ',' +
               format_number(r.x_star);
        for (double v : r.z_star) out += ',' + format_number(v);
        for (double v : r.aux) out += ',' + format_number(v);
        out += ',' + std::to_string(r.asthma_star) + ',' + (r.in_asthma_frame ? "1" : "0") + ',' +
               (r.validated ? "1" : "0") + ',';
        if (r.wave_sampled) out += std::to_string(*r.wave_sampled);
        out += ',';
        if (r.y) out += format_number(*r.y);
        out += ',';
        if (r.delta) out += std::to_string(*r.delta);
        out += ',';
        if (r.x) out += format_number(*r.x);
        for (std::size_t k = 0; k < zc; ++k) {
            out += ',';
            if (r.z) out += format_number(r.z->at(k));
        }
        out += ',';
        if (r.asthma) out += std::to_string(*r.asthma);
        out += ',';
        if (r.gestation_days) out += format_number(*r.gestation_days);
        out += '\n';
    }
    return out;
}

std::vector<fpca::LongitudinalSeries> parse_measurements(const CsvTable& t, std::string_view file) {
    const auto c_id = t.column("subject_id", file);
    const auto c_t = t.column("t_days", file);
    const auto c_w = t.column("weight_kg", file);
    std::vector<fpca::LongitudinalSeries> out;
    std::map<std::string, std::size_t> index;
    std::vector<std::vector<std::pair<double, double>>> points;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const auto& row = t.rows[r];
        const std::string where = std::string(file) + " line " + std::to_string(t.line[r]);
        auto [it, fresh] = index.emplace(row[c_id], out.size());
        if (fresh) {
            out.push_back({row[c_id], {}, {}});
            points.emplace_back();
        }
        points[it->second].emplace_back(parse_number(row[c_t], where + " column t_days"),
                                        parse_number(row[c_w], where + " column weight_kg"));
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
        auto& p = points[i];
        std::stable_sort(p.begin(), p.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
        for (const auto& [tt, w] : p) {
            out[i].times.push_back(tt);
            out[i].values.push_back(w);
        }
        fpca::check_series(out[i]);
    }
    return out;
}

std::vector<fpca::LongitudinalSeries> read_measurements(const std::filesystem::path& path) {
    return parse_measurements(read_csv(path), path.filename().string());
}

std::string measurements_csv(std::span<const fpca::LongitudinalSeries> series) {
    std::string out = "subject_id,t_days,weight_kg\n";
    for (const auto& s : series) {
        for (std::size_t j = 0; j < s.times.size(); ++j) {
            out += csv_field(s.subject) + ',' + format_number(s.times[j]) + ',' + format_number(s.values[j]) + '\n';
        }
    }
    return out;
}

namespace {

json number(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
}

double number_of(const json& j, std::string_view what) {
    if (j.is_string()) return parse_number(j.get<std::string>(), what);
    if (!j.is_number()) fail(ErrorKind::schema, std::string(what) + " must be a number");
    return j.get<double>();
}

json parse_json(std::string_view text, std::string_view what) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        fail(ErrorKind::parse, std::string(what) + ": " + e.what());
    }
}

const json& member(const json& j, const char* key, std::string_view what) {
    if (!j.is_object() || !j.contains(key)) {
        fail(ErrorKind::schema, std::string(what) + ": missing key '" + key + "'");
    }
    return j.at(key);
}

template <class T>
T get(const json& j, const char* key, std::string_view what) {
    try {
        return member(j, key, what).get<T>();
    } catch (const json::exception& e) {
        fail(ErrorKind::schema, std::string(what) + ": key '" + key + "': " + e.what());
    }
}

}  // namespace

std::string ledger_json(const DesignLedger& ledger) {
    json j;
    j["frame"] = ledger.frame;
    j["members"] = std::string(to_string(ledger.members));
    j["frame_size"] = ledger.frame_size;
    j["wave_count"] = ledger.wave_count;
    j["rng_seed"] = ledger.rng_seed;
    json strata = json::array();
    for (const auto& s : ledger.strata) {
        json o;
        o["id"] = s.id;
        o["frame"] = s.frame;
        o["parent"] = s.parent ? json(*s.parent) : json(nullptr);
        o["children"] = s.children;
        json bounds = json::array();
        for (const auto& b : s.bounds) {
            json bj;
            bj["axis"] = std::string(to_string(b.axis));
            bj["lo"] = number(b.interval.lo);
            bj["hi"] = number(b.interval.hi);
            bounds.push_back(bj);
        }
        o["bounds"] = bounds;
        o["population_size"] = s.population_size;
        o["sampled_per_wave"] = s.sampled_per_wave;
        o["inherited_per_wave"] = s.inherited_per_wave;
        o["closed"] = s.closed;
        strata.push_back(o);
    }
    j["strata"] = strata;
    json draws = json::array();
    for (const auto& d : ledger.draws) {
        json o;
        o["record_id"] = d.record_id;
        o["wave"] = d.wave;
        o["stratum_id"] = d.stratum_id;
        o["overlap"] = d.overlap;
        draws.push_back(o);
    }
    j["draws"] = draws;
    return j.dump(2) + "\n";
}

DesignLedger parse_ledger(std::string_view text) {
    const json j = parse_json(text, "ledger");
    DesignLedger l;
    const std::string what = "ledger";
    l.frame = get<std::string>(j, "frame", what);
    l.members = frame_members_from_string(get<std::string>(j, "members", what));
    l.frame_size = get<long>(j, "frame_size", what);
    l.wave_count = get<int>(j, "wave_count", what);
    l.rng_seed = get<std::uint64_t>(j, "rng_seed", what);
    for (const auto& o : member(j, "strata", what)) {
        Stratum s;
        s.id = get<std::string>(o, "id", "stratum");
        const std::string sw = "stratum " + s.id;
        s.frame = get<std::string>(o, "frame", sw);
        if (!member(o, "parent", sw).is_null()) s.parent = get<std::string>(o, "parent", sw);
        s.children = get<std::vector<std::string>>(o, "children", sw);
        for (const auto& b : member(o, "bounds", sw)) {
            Bound bound;
            bound.axis = axis_from_string(get<std::string>(b, "axis", sw));
            bound.interval.lo = number_of(member(b, "lo", sw), sw + " lo");
            bound.interval.hi = number_of(member(b, "hi", sw), sw + " hi");
            s.bounds.push_back(bound);
        }
        s.population_size = get<long>(o, "population_size", sw);
        s.sampled_per_wave = get<std::vector<int>>(o, "sampled_per_wave", sw);
        s.inherited_per_wave = get<std::vector<int>>(o, "inherited_per_wave", sw);
        s.closed = get<bool>(o, "closed", sw);
        l.strata.push_back(std::move(s));
    }
    for (const auto& o : member(j, "draws", what)) {
        Draw d;
        d.record_id = get<std::string>(o, "record_id", "draw");
        d.wave = get<int>(o, "wave", "draw");
        d.stratum_id = get<std::string>(o, "stratum_id", "draw");
        d.overlap = get<bool>(o, "overlap", "draw");
        l.draws.push_back(std::move(d));
    }
    check_ledger(l);
    return l;
}

DesignLedger read_ledger(const std::filesystem::path& path) { return parse_ledger(read_text(path)); }

std::string eigensystem_json(const fpca::EigenSystem& es) {
    json j;
    j["grid"] = es.grid;
    j["mean"] = es.mean;
    j["eigenvalues"] = es.eigenvalues;
    json funcs = json::array();
    for (Eigen::Index k = 0; k < es.eigenfunctions.cols(); ++k) {
        std::vector<double> col(es.eigenfunctions.col(k).data(), es.eigenfunctions.col(k).data() + es.eigenfunctions.rows());
        funcs.push_back(col);
    }
    j["eigenfunctions"] = funcs;
    j["noise_var"] = es.noise_var;
    j["fve"] = es.fve;
    j["mean_bandwidth"] = es.mean_bandwidth;
    j["cov_bandwidth"] = es.cov_bandwidth;
    j["zero_variation"] = es.zero_variation;
    return j.dump(2) + "\n";
}

fpca::EigenSystem parse_eigensystem(std::string_view text) {
    const json j = parse_json(text, "eigensystem");
    const std::string what = "eigensystem";
    fpca::EigenSystem es;
    es.grid = get<std::vector<double>>(j, "grid", what);
    es.mean = get<std::vector<double>>(j, "mean", what);
    es.eigenvalues = get<std::vector<double>>(j, "eigenvalues", what);
    const auto funcs = get<std::vector<std::vector<double>>>(j, "eigenfunctions", what);
    es.noise_var = get<double>(j, "noise_var", what);
    if (j.contains("fve")) es.fve = get<std::vector<double>>(j, "fve", what);
    if (j.contains("mean_bandwidth")) es.mean_bandwidth = get<double>(j, "mean_bandwidth", what);
    if (j.contains("cov_bandwidth")) es.cov_bandwidth = get<double>(j, "cov_bandwidth", what);
    if (j.contains("zero_variation")) es.zero_variation = get<bool>(j, "zero_variation", what);
    if (es.grid.size() < 3 || es.mean.size() != es.grid.size()) {
        fail(ErrorKind::schema, "eigensystem: grid and mean must have the same length (at least 3)");
    }
    if (funcs.size() != es.eigenvalues.size()) {
        fail(ErrorKind::schema, "eigensystem: one eigenfunction per eigenvalue is required");
    }
    es.eigenfunctions.resize(static_cast<Eigen::Index>(es.grid.size()), static_cast<Eigen::Index>(funcs.size()));
    for (std::size_t k = 0; k < funcs.size(); ++k) {
        if (funcs[k].size() != es.grid.size()) fail(ErrorKind::schema, "eigensystem: eigenfunction length differs from grid");
        for (std::size_t i = 0; i < funcs[k].size(); ++i) {
            es.eigenfunctions(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = funcs[k][i];
        }
    }
    return es;
}

fpca::EigenSystem read_eigensystem(const std::filesystem::path& path) { return parse_eigensystem(read_text(path)); }

std::map<std::string, double> read_influence(const std::filesystem::path& path) {
    const auto t = read_csv(path);
    const std::string file = path.filename().string();
    const auto c_id = t.column("id", file);
    const auto c_h = t.column("h", file);
    std::map<std::string, double> out;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const std::string where = file + " line " + std::to_string(t.line[r]);
        if (t.rows[r][c_h].empty()) continue;
        if (!out.emplace(t.rows[r][c_id], parse_number(t.rows[r][c_h], where + " column h")).second) {
            fail(ErrorKind::schema, where + ": duplicate id " + t.rows[r][c_id]);
        }
    }
    return out;
}

std::string influence_csv(std::span<const DyadRecord> records, std::span<const double> h) {
    if (records.size() != h.size()) fail(ErrorKind::invalid_argument, "one influence value per record is required");
    std::string out = "id,h\n";
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (!std::isfinite(h[i])) continue;
        out += csv_field(records[i].id) + ',' + format_number(h[i]) + '\n';
    }
    return out;
}

std::string allocation_json(const AllocationFile& a) {
    json j;
    j["frame"] = a.frame;
    j["wave"] = a.wave;
    j["wave_size"] = a.wave_size;
    j["cumulative_target"] = a.cumulative_target;
    json strata = json::array();
    long total = 0;
    for (std::size_t k = 0; k < a.decisions.size(); ++k) {
        const auto& d = a.decisions[k];
        json o;
        o["id"] = d.id;
        o["draw"] = d.draw;
        o["optimum"] = d.optimum;
        o["closed"] = d.closed;
        o["newly_closed"] = d.newly_closed;
        if (k < a.stats.size()) {
            o["population"] = a.stats[k].population;
            o["already_sampled"] = a.stats[k].already_sampled;
            o["sigma"] = a.stats[k].sigma;
            o["sd_source"] = std::string(allocation::to_string(a.stats[k].sd_source));
        }
        total += d.draw;
        strata.push_back(o);
    }
    j["total"] = total;
    j["strata"] = strata;
    return j.dump(2) + "\n";
}

AllocationFile parse_allocation(std::string_view text) {
    const json j = parse_json(text, "allocation");
    const std::string what = "allocation";
    AllocationFile a;
    a.frame = get<std::string>(j, "frame", what);
    a.wave = get<int>(j, "wave", what);
    a.wave_size = get<long>(j, "wave_size", what);
    a.cumulative_target = get<long>(j, "cumulative_target", what);
    for (const auto& o : member(j, "strata", what)) {
        allocation::StratumDecision d;
        d.id = get<std::string>(o, "id", what);
        d.draw = get<int>(o, "draw", what);
        d.optimum = get<double>(o, "optimum", what);
        d.closed = get<bool>(o, "closed", what);
        d.newly_closed = get<bool>(o, "newly_closed", what);
        if (d.draw < 0) fail(ErrorKind::schema, "allocation: negative draw for stratum " + d.id);
        a.decisions.push_back(d);
        allocation::StratumStats s;
        s.id = d.id;
        if (o.contains("population")) s.population = get<long>(o, "population", what);
        if (o.contains("already_sampled")) s.already_sampled = get<int>(o, "already_sampled", what);
        if (o.contains("sigma")) s.sigma = get<double>(o, "sigma", what);
        if (o.contains("sd_source")) s.sd_source = allocation::sd_source_from_string(get<std::string>(o, "sd_source", what));
        s.closed = d.closed;
        a.stats.push_back(s);
    }
    return a;
}

AllocationFile read_allocation(const std::filesystem::path& path) { return parse_allocation(read_text(path)); }

std::string combined_weights_csv(std::span<const multiframe::WeightRow> rows) {
    std::string out = "id,frame,weight,cluster,stratum\n";
    for (const auto& r : rows) {
        out += csv_field(r.record_id) + ',' + r.frame + ',' + format_number(r.weight) + ',' + csv_field(r.cluster) + ',' +
               csv_field(r.stratum) + '\n';
    }
    return out;
}

namespace {

#define TWOPHASE_SIM_FIELDS(X)                                                                            \
    X(population) X(seed) X(mean_base) X(mean_gain) X(component_sd) X(noise_sd) X(observations_mean)      \
    X(min_weight) X(gestation_mean) X(gestation_sd) X(gestation_min) X(gestation_max) X(beta_x)           \
    X(weibull_shape) X(event_fraction) X(early_censoring) X(obesity_false_negative)                      \
    X(obesity_false_positive) X(time_error_prob) X(time_error_sd) X(asthma_prevalence) X(asthma_beta_x) \
    X(asthma_sensitivity) X(asthma_false_positive) X(asthma_frame_prob) X(exposure_error_sd)             \
    X(differential_shift)

#define TWOPHASE_COV_FIELDS(X) \
    X(name) X(binary) X(mean) X(sd) X(beta) X(asthma_beta) X(error_sd) X(false_negative) X(false_positive)

}  // namespace

std::string sim_config_json(const sim::SimConfig& c) {
    json j;
#define X(f) j[#f] = c.f;
    TWOPHASE_SIM_FIELDS(X)
#undef X
    j["exposure_mode"] = c.exposure_mode == sim::ExposureMode::fpca ? "fpca" : "fast";
    json covs = json::array();
    for (const auto& z : c.covariates) {
        json o;
#define X(f) o[#f] = z.f;
        TWOPHASE_COV_FIELDS(X)
#undef X
        covs.push_back(o);
    }
    j["covariates"] = covs;
    return j.dump(2) + "\n";
}

sim::SimConfig parse_sim_config(std::string_view text, sim::SimConfig c) {
    const json j = parse_json(text, "config");
    if (!j.is_object()) fail(ErrorKind::schema, "config must be a JSON object");
    const std::string what = "config";
    for (const auto& [key, value] : j.items()) {
        bool known = false;
#define X(f)                                         \
    if (key == #f) {                                 \
        c.f = get<decltype(c.f)>(j, #f, what);       \
        known = true;                                \
    }
        TWOPHASE_SIM_FIELDS(X)
#undef X
        if (key == "exposure_mode") {
            const auto mode = get<std::string>(j, "exposure_mode", what);
            if (mode == "fpca") {
                c.exposure_mode = sim::ExposureMode::fpca;
            } else if (mode == "fast") {
                c.exposure_mode = sim::ExposureMode::fast;
            } else {
                fail(ErrorKind::schema, "config: exposure_mode must be fpca or fast");
            }
            known = true;
        }
        if (key == "covariates") {
            c.covariates.clear();
            for (const auto& o : value) {
                sim::CovariateSpec z;
                for (const auto& [ck, cv] : o.items()) {
                    bool cknown = false;
#define X(f)                                           \
    if (ck == #f) {                                    \
        z.f = get<decltype(z.f)>(o, #f, "covariate"); \
        cknown = true;                                 \
    }
                    TWOPHASE_COV_FIELDS(X)
#undef X
                    if (!cknown) fail(ErrorKind::schema, "config: unknown covariate key '" + ck + "'");
                }
                c.covariates.push_back(z);
            }
            known = true;
        }
        if (!known) fail(ErrorKind::schema, "config: unknown key '" + key + "'");
    }
    c.check();
    return c;
}

std::string experiment_design_json(const sim::ExperimentDesign& d) {
    json j;
    j["obesity_waves"] = d.obesity_waves;
    j["asthma_waves"] = d.asthma_waves;
    j["mi_replicates"] = d.mi_replicates;
    j["split_factor"] = d.split_factor;
    j["min_per_stratum"] = d.min_per_stratum;
    j["asthma_endpoint"] = d.asthma_endpoint;
    return j.dump(2) + "\n";
}

sim::ExperimentDesign parse_experiment_design(std::string_view text) {
    const json j = parse_json(text, "design");
    sim::ExperimentDesign d;
    const std::string what = "design";
    for (const auto& [key, value] : j.items()) {
        if (key == "obesity_waves") {
            d.obesity_waves = get<std::vector<long>>(j, "obesity_waves", what);
        } else if (key == "asthma_waves") {
            d.asthma_waves = get<std::vector<long>>(j, "asthma_waves", what);
        } else if (key == "mi_replicates") {
            d.mi_replicates = get<int>(j, "mi_replicates", what);
        } else if (key == "split_factor") {
            d.split_factor = get<double>(j, "split_factor", what);
        } else if (key == "min_per_stratum") {
            d.min_per_stratum = get<int>(j, "min_per_stratum", what);
        } else if (key == "asthma_endpoint") {
            d.asthma_endpoint = get<bool>(j, "asthma_endpoint", what);
        } else {
            fail(ErrorKind::schema, "design: unknown key '" + key + "'");
        }
    }
    if (d.obesity_waves.empty()) fail(ErrorKind::schema, "design: at least one obesity wave is required");
    return d;
}

}  // namespace twophase::io
