#include <doctest.h>

#include <chrono>
#include <filesystem>
#include <limits>

#include "twophase/allocation.hpp"
#include "twophase/datamodel.hpp"
#include "twophase/error.hpp"
#include "twophase/io.hpp"
#include "twophase/simulator.hpp"

using namespace twophase;

namespace {

constexpr double inf = std::numeric_limits<double>::infinity();

std::vector<DyadRecord> grid_records() {
    std::vector<DyadRecord> out;
    for (int i = 0; i < 60; ++i) {
        DyadRecord r;
        r.id = "R" + std::to_string(100 + i);
        r.y_star = 0.5 + (i % 6);
        r.delta_star = i % 3 == 0 ? 1 : 0;
        r.x_star = 0.01 * i;
        r.z_star = {0.1 * (i % 7)};
        out.push_back(r);
    }
    return out;
}

ErrorKind kind_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("no error thrown");
    return ErrorKind::invalid_argument;
}

}  // namespace

TEST_CASE("records need all phase-2 fields or none") {
    DyadRecord r;
    r.id = "a";
    r.y_star = 1.0;
    CHECK_NOTHROW(check_record(r));
    r.y = 2.0;
    CHECK(kind_of([&] { check_record(r); }) == ErrorKind::schema);
    r.delta = 1;
    r.x = 0.3;
    r.z = std::vector<double>{};
    r.validated = true;
    r.wave_sampled = 1;
    CHECK_NOTHROW(check_record(r));
    r.delta = 2;
    CHECK_THROWS(check_record(r));
}

TEST_CASE("gain axis is x_star over the assumed 39 weeks") {
    DyadRecord r;
    r.x_star = 0.35;
    CHECK(axis_value(r, Axis::gain_star) == doctest::Approx(0.35 * 39.0));
}

TEST_CASE("grid strata partition the records and count N_s") {
    const auto records = grid_records();
    const auto specs = grid_strata({{Axis::delta_star, {0.5}}, {Axis::y_star, {2.0, 4.0}}});
    REQUIRE(specs.size() == 6);
    const auto ledger = make_ledger("f", FrameMembers::all, specs, records, 3);
    long total = 0;
    for (const auto* leaf : ledger.leaves()) total += leaf->population_size;
    CHECK(total == 60);
    CHECK(ledger.frame_size == 60);
    const auto map = assign_strata(records, ledger);
    CHECK(map.size() == 60);
    CHECK_NOTHROW(check_ledger(ledger));
}

TEST_CASE("overlapping or incomplete strata are partition errors") {
    const auto records = grid_records();
    std::vector<StratumSpec> overlap{{"a", {{Axis::y_star, {-inf, 3.0}}}}, {"b", {{Axis::y_star, {2.0, inf}}}}};
    CHECK(kind_of([&] { make_ledger("f", FrameMembers::all, overlap, records, 1); }) == ErrorKind::partition);
    std::vector<StratumSpec> gap{{"a", {{Axis::y_star, {-inf, 1.0}}}}, {"b", {{Axis::y_star, {2.0, inf}}}}};
    CHECK(kind_of([&] { make_ledger("f", FrameMembers::all, gap, records, 1); }) == ErrorKind::partition);
}

TEST_CASE("split attributes earlier draws to the child holding each record") {
    auto records = grid_records();
    auto ledger = make_ledger("f", FrameMembers::all, {{"1", {}}}, records, 5);
    const auto drawn = allocation::draw_sample(ledger, records, {{"1", 12}}, 5);
    ledger = drawn.ledger;
    const auto split = split_stratum(ledger, "1", Axis::x_star, {0.205}, records);
    const auto& a = split.stratum("1.1");
    const auto& b = split.stratum("1.2");
    int in_a = 0;
    for (const auto& id : drawn.by_stratum.at("1")) {
        for (const auto& r : records) {
            if (r.id == id && r.x_star <= 0.205) ++in_a;
        }
    }
    CHECK(a.total_sampled() == in_a);
    CHECK(b.total_sampled() == 12 - in_a);
    CHECK(a.population_size == 21);
    CHECK(b.population_size == 39);
    CHECK(a.sampled_through_wave(1) == in_a);
    CHECK_NOTHROW(check_ledger(split));
    CHECK(split.stratum("1").children.size() == 2);
    CHECK(sampling_probability(records[0], split) == doctest::Approx(static_cast<double>(in_a) / 21.0));
}

TEST_CASE("closing a stratum and splitting a non-leaf") {
    const auto records = grid_records();
    auto ledger = make_ledger("f", FrameMembers::all, {{"1", {}}}, records, 5);
    ledger = split_stratum(ledger, "1", Axis::y_star, {2.0}, records);
    CHECK(kind_of([&] { split_stratum(ledger, "1", Axis::y_star, {3.0}, records); }) == ErrorKind::invalid_argument);
    const auto closed = close_stratum(ledger, "1.2");
    CHECK(closed.stratum("1.2").closed);
    CHECK(kind_of([&] { (void)ledger.stratum("9"); }) == ErrorKind::ledger);
}

TEST_CASE("ledger json round-trips exactly") {
    auto records = grid_records();
    auto ledger = make_ledger("obesity", FrameMembers::all, grid_strata({{Axis::x_star, {0.25}}}), records, 42);
    ledger = allocation::draw_sample(ledger, records, {{"1", 3}, {"2", 4}}, 42).ledger;
    ledger = split_stratum(ledger, "2", Axis::gain_star, {15.0}, records);
    const auto text = io::ledger_json(ledger);
    const auto back = io::parse_ledger(text);
    CHECK(io::ledger_json(back) == text);
    CHECK(back.stratum("2.1").interval_on(Axis::gain_star).lo == -inf);
    CHECK(back.draws.size() == 7);
}

TEST_CASE("dyads csv round-trips and allows absent phase-2 values") {
    auto cfg = sim::default_config();
    cfg.population = 300;
    cfg.exposure_mode = sim::ExposureMode::fast;
    const auto pop = sim::generate(cfg);
    auto records = pop.records;
    const std::vector<std::string> ids{records[3].id, records[10].id};
    sim::reveal(records, pop.truth, ids, 1);
    const auto text = io::dyads_csv(records);
    const auto back = io::parse_dyads(io::parse_csv(text));
    CHECK(io::dyads_csv(back) == text);
    CHECK(back[3].validated);
    CHECK(back[3].x == records[3].x);
    CHECK_FALSE(back[4].validated);
    CHECK_FALSE(back[4].y.has_value());
}

TEST_CASE("corrupt csv rows report the line number") {
    const std::string text = "id,y_star,delta_star,x_star\nA,1.5,0,0.2\nB,oops,1,0.3\n";
    try {
        io::parse_dyads(io::parse_csv(text, "d.csv"), "d.csv");
        FAIL("expected a parse error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::parse);
        CHECK(std::string(e.what()).find("line 3") != std::string::npos);
        CHECK(std::string(e.what()).find("y_star") != std::string::npos);
    }
    CHECK(kind_of([] { io::parse_csv("id,y_star\nA\n"); }) == ErrorKind::parse);
}

TEST_CASE("missing columns are schema errors naming the column") {
    try {
        io::parse_dyads(io::parse_csv("id,y_star,x_star\nA,1,0.1\n"));
        FAIL("expected a schema error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::schema);
        CHECK(std::string(e.what()).find("delta_star") != std::string::npos);
    }
}

TEST_CASE("numbers round-trip at full precision") {
    for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, 0.0}) {
        CHECK(io::parse_number(io::format_number(v), "v") == v);
    }
    CHECK(std::isinf(io::parse_number("-inf", "v")));
    CHECK(kind_of([] { io::parse_number("1.5x", "v"); }) == ErrorKind::parse);
}

TEST_CASE("quoted csv fields") {
    const auto t = io::parse_csv("a,b\n\"x,1\",\"say \"\"hi\"\"\"\n");
    CHECK(t.rows[0][0] == "x,1");
    CHECK(t.rows[0][1] == "say \"hi\"");
    CHECK(io::parse_csv(io::to_csv(t)).rows == t.rows);
}

TEST_CASE("simulation config rejects unknown keys and keeps defaults") {
    const auto c = io::parse_sim_config("{\"population\": 50}");
    CHECK(c.population == 50);
    CHECK(c.beta_x == sim::default_config().beta_x);
    CHECK(kind_of([] { io::parse_sim_config("{\"populaton\": 50}"); }) == ErrorKind::schema);
    CHECK(io::parse_sim_config(io::sim_config_json(c)).covariates.size() == c.covariates.size());
}

TEST_CASE("a 10,335-row dyads file loads in under 5 seconds") {
    auto cfg = sim::default_config();
    cfg.population = 10335;
    cfg.exposure_mode = sim::ExposureMode::fast;
    const auto pop = sim::generate(cfg);
    const auto path = std::filesystem::temp_directory_path() / "twophase_load_test.csv";
    io::write_text(path, io::dyads_csv(pop.truth));
    const auto start = std::chrono::steady_clock::now();
    const auto back = io::read_dyads(path);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::filesystem::remove(path);
    CHECK(back.size() == 10335);
    CHECK(seconds < 5.0);
}
