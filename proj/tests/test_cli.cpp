#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "twophase/cli.hpp"
#include "twophase/io.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
    int code = 0;
    std::string err;
};

Run run(std::vector<std::string> args) {
    args.insert(args.begin(), "twophase");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    std::ostringstream err;
    auto* old = std::cerr.rdbuf(err.rdbuf());
    const int code = twophase::cli::dispatch(static_cast<int>(argv.size()), argv.data());
    std::cerr.rdbuf(old);
    return {code, err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& f) const { return (path / f).string(); }
};

void simulate(const TempDir& dir, const std::string& sub, long population) {
    std::ofstream(dir / "sim.json") << "{\"population\": " << population << ", \"exposure_mode\": \"fast\"}";
    REQUIRE(run({"--seed", "5", "simulate", "--config", dir / "sim.json", "--out", dir / sub}).code == 0);
}

long allocated_total(const std::string& path) {
    return nlohmann::json::parse(slurp(path)).at("total").get<long>();
}

}  // namespace

TEST_CASE("six scripted waves over two frames end in both estimate tables") {
    TempDir dir("twophase_cli_waves");
    simulate(dir, "pop", 3000);
    const std::string dyads = dir / "pop/dyads.csv", truth = dir / "pop/truth.csv";
    const std::string ob = dir / "ob.json", as = dir / "as.json";

    REQUIRE(run({"design", "init", "--dyads", dyads, "--frame", "obesity", "--out", ob}).code == 0);
    const std::vector<long> ob_waves{250, 250, 125, 125};
    for (std::size_t k = 0; k < ob_waves.size(); ++k) {
        const std::string method = k == 0 ? "naive" : "ipw";
        REQUIRE(run({"design", "influence", "--dyads", dyads, "--ledger", ob, "--method", method, "--out", dir / "h.csv"}).code == 0);
        REQUIRE(run({"design", "allocate", "--ledger", ob, "--dyads", dyads, "--influence", dir / "h.csv", "--target",
                     std::to_string(ob_waves[k]), "--out", dir / "alloc.json"}).code == 0);
        CHECK(allocated_total(dir / "alloc.json") == ob_waves[k]);
        REQUIRE(run({"design", "draw", "--ledger", ob, "--dyads", dyads, "--allocation", dir / "alloc.json", "--reveal",
                     truth}).code == 0);
    }
    REQUIRE(run({"design", "init", "--dyads", dyads, "--frame", "asthma", "--out", as}).code == 0);
    for (long n : {125L, 159L}) {
        REQUIRE(run({"design", "influence", "--dyads", dyads, "--ledger", as, "--method", "mi", "--replicates", "5",
                     "--out", dir / "h.csv"}).code == 0);
        REQUIRE(run({"design", "allocate", "--ledger", as, "--dyads", dyads, "--influence", dir / "h.csv", "--target",
                     std::to_string(n), "--out", dir / "alloc.json"}).code == 0);
        CHECK(allocated_total(dir / "alloc.json") == n);
        REQUIRE(run({"design", "draw", "--ledger", as, "--dyads", dyads, "--allocation", dir / "alloc.json", "--reveal",
                     truth}).code == 0);
    }
    CHECK(twophase::io::parse_ledger(slurp(ob)).draws.size() == 750);
    CHECK(twophase::io::parse_ledger(slurp(as)).draws.size() == 284);

    REQUIRE(run({"estimate", "--dyads", dyads, "--ledger", ob, "--other-ledger", as, "--all", "--replicates", "5",
                 "--out", dir / "ob_est.csv"}).code == 0);
    REQUIRE(run({"estimate", "--dyads", dyads, "--ledger", as, "--other-ledger", ob, "--all", "--replicates", "5",
                 "--out", dir / "as_est.csv"}).code == 0);
    REQUIRE(run({"report", "--input", dir / "ob_est.csv", "--input", dir / "as_est.csv", "--out", dir / "report.txt",
                 "--csv", dir / "report.csv"}).code == 0);
    const auto table = twophase::io::parse_csv(slurp(dir / "report.csv"));
    std::set<std::string> models, estimators;
    for (const auto& row : table.rows) {
        models.insert(row[0]);
        estimators.insert(row[1]);
    }
    CHECK(models == std::set<std::string>{"cox", "logistic"});
    CHECK(estimators == std::set<std::string>{"Phase1", "IPW_SF", "IPW_MF", "Raking_Nv", "Raking_MI"});
    const auto text = slurp(dir / "report.txt");
    CHECK(text.find("Cox model") != std::string::npos);
    CHECK(text.find("Logistic model") != std::string::npos);
}

TEST_CASE("a corrupt dyads file exits with the parse code and names the line") {
    TempDir dir("twophase_cli_corrupt");
    std::ofstream(dir / "bad.csv") << "id,y_star,delta_star,x_star\nA,1.5,0,0.2\nB,1.0,1,abc\n";
    const auto r = run({"design", "init", "--dyads", dir / "bad.csv", "--frame", "obesity", "--out", dir / "l.json"});
    CHECK(r.code == 4);
    CHECK(r.err.find("class=parse") != std::string::npos);
    CHECK(r.err.find("line 3") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "l.json"));
}

TEST_CASE("usage errors and missing files map to their exit codes") {
    CHECK(run({"design", "allocate"}).code == 2);
    TempDir dir("twophase_cli_codes");
    CHECK(run({"design", "close", "--ledger", dir / "missing.json", "--stratum", "1"}).code == 3);
}

TEST_CASE("allocating 250 on a fresh ledger draws exactly 250") {
    TempDir dir("twophase_cli_alloc");
    simulate(dir, "pop", 2000);
    const std::string dyads = dir / "pop/dyads.csv";
    REQUIRE(run({"design", "init", "--dyads", dyads, "--frame", "obesity", "--out", dir / "l.json"}).code == 0);
    REQUIRE(run({"design", "influence", "--dyads", dyads, "--ledger", dir / "l.json", "--method", "naive", "--out",
                 dir / "h.csv"}).code == 0);
    REQUIRE(run({"design", "allocate", "--ledger", dir / "l.json", "--dyads", dyads, "--influence", dir / "h.csv",
                 "--target", "250", "--out", dir / "a.json", "--ledger-out", dir / "l2.json"}).code == 0);
    CHECK(allocated_total(dir / "a.json") == 250);
}

TEST_CASE("repeating a command with the same inputs and seed gives identical bytes") {
    TempDir dir("twophase_cli_idem");
    simulate(dir, "a", 800);
    simulate(dir, "b", 800);
    for (const char* f : {"dyads.csv", "truth.csv", "measurements.csv", "config.json"}) {
        CHECK(slurp(dir / (std::string("a/") + f)) == slurp(dir / (std::string("b/") + f)));
    }
    const std::string dyads = dir / "a/dyads.csv";
    REQUIRE(run({"design", "init", "--dyads", dyads, "--frame", "obesity", "--out", dir / "l.json"}).code == 0);
    REQUIRE(run({"design", "influence", "--dyads", dyads, "--ledger", dir / "l.json", "--method", "naive", "--out",
                 dir / "h.csv"}).code == 0);
    for (const char* tag : {"1", "2"}) {
        REQUIRE(run({"design", "allocate", "--ledger", dir / "l.json", "--dyads", dyads, "--influence", dir / "h.csv",
                     "--target", "100", "--out", dir / (std::string("a") + tag + ".json"), "--ledger-out",
                     dir / (std::string("l") + tag + ".json")}).code == 0);
        REQUIRE(run({"design", "draw", "--ledger", dir / (std::string("l") + tag + ".json"), "--dyads", dyads,
                     "--allocation", dir / (std::string("a") + tag + ".json"), "--out",
                     dir / (std::string("d") + tag + ".json"), "--sample", dir / (std::string("s") + tag + ".csv"),
                     "--dyads-out", dir / (std::string("y") + tag + ".csv")}).code == 0);
    }
    CHECK(slurp(dir / "a1.json") == slurp(dir / "a2.json"));
    CHECK(slurp(dir / "d1.json") == slurp(dir / "d2.json"));
    CHECK(slurp(dir / "s1.csv") == slurp(dir / "s2.csv"));
}
