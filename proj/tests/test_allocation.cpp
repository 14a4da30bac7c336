#include <doctest.h>

#include <chrono>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "twophase/allocation.hpp"
#include "twophase/error.hpp"
#include "twophase/simulator.hpp"

using namespace twophase;
using namespace twophase::allocation;

namespace {

StratumStats stat(std::string id, long population, double sigma, int already = 0, bool closed = false) {
    StratumStats s;
    s.id = std::move(id);
    s.population = population;
    s.sigma = sigma;
    s.already_sampled = already;
    s.closed = closed;
    return s;
}

std::vector<DyadRecord> line_records(int n) {
    std::vector<DyadRecord> out;
    for (int i = 0; i < n; ++i) {
        DyadRecord r;
        char id[16];
        std::snprintf(id, sizeof id, "R%03d", i);
        r.id = id;
        r.y_star = 1.0 + i % 5;
        r.delta_star = i % 2;
        r.x_star = 0.1 * i;
        out.push_back(r);
    }
    return out;
}

}  // namespace

TEST_CASE("neyman allocation is proportional to N sigma") {
    const std::vector<StratumStats> s{stat("a", 100, 1.0), stat("b", 300, 2.0)};
    const auto n = neyman(s, 70.0);
    CHECK(n[0] == doctest::Approx(10.0));
    CHECK(n[1] == doctest::Approx(60.0));
}

TEST_CASE("neyman with every sigma zero fails unless a fallback is requested") {
    const std::vector<StratumStats> s{stat("a", 100, 0.0), stat("b", 300, 0.0)};
    CHECK_THROWS_AS(neyman(s, 40.0), Error);
    const auto n = neyman(s, 40.0, DegenerateFallback::proportional);
    CHECK(n[0] == doctest::Approx(10.0));
    CHECK(n[1] == doctest::Approx(30.0));
}

TEST_CASE("exact allocation matches exhaustive search on random instances") {
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<int> strata(1, 5), pop(1, 12), size(1, 30), lo(0, 2);
    std::uniform_real_distribution<double> sd(0.0, 5.0);
    int checked = 0;
    for (int t = 0; t < 200; ++t) {
        const int h = strata(rng);
        std::vector<StratumStats> s;
        std::vector<double> w;
        std::vector<long> p;
        for (int k = 0; k < h; ++k) {
            s.push_back(stat(std::to_string(k), pop(rng), sd(rng)));
            w.push_back(static_cast<double>(s.back().population) * s.back().sigma);
            p.push_back(s.back().population);
        }
        const int min = lo(rng);
        long floor = 0, cap = 0;
        for (auto& x : s) {
            floor += std::min<long>(min, x.population);
            cap += x.population;
        }
        const long n = std::min<long>(cap, std::max<long>(floor, size(rng)));
        const auto a = exact_allocation(s, n, min);
        CHECK(std::accumulate(a.begin(), a.end(), 0L) == n);
        CHECK(allocation_variance(s, a) == oracle::best_allocation_value(w, p, n, min));
        ++checked;
    }
    CHECK(checked == 200);
}

TEST_CASE("exact allocation is invariant to scaling every sigma") {
    const std::vector<StratumStats> s{stat("a", 40, 0.3), stat("b", 25, 1.7), stat("c", 60, 0.9), stat("d", 10, 2.2)};
    for (double c : {0.001, 3.0, 1e6}) {
        auto scaled = s;
        for (auto& x : scaled) x.sigma *= c;
        CHECK(exact_allocation(scaled, 30, 1) == exact_allocation(s, 30, 1));
        CHECK(multiwave(scaled, 30, 1).strata.size() == 4);
        for (std::size_t k = 0; k < 4; ++k) {
            CHECK(multiwave(scaled, 30, 1).strata[k].draw == multiwave(s, 30, 1).strata[k].draw);
        }
    }
}

TEST_CASE("exact allocation rejects budgets outside the feasible range") {
    const std::vector<StratumStats> s{stat("a", 3, 1.0), stat("b", 4, 1.0)};
    CHECK_THROWS_AS(exact_allocation(s, 8, 1), Error);
    CHECK_THROWS_AS(exact_allocation(s, 1, 1), Error);
}

TEST_CASE("multiwave closes an over-sampled stratum and tops up the rest") {
    // Stratum A: optimum 6 with 7 already drawn. After A closes, B's optimum is
    // 105 with 16 already drawn, so B draws 89.
    const double a = 6.0 / 151.0;
    const std::vector<StratumStats> s{stat("A", 1000, a / 1000.0, 7), stat("B", 1000, 0.7 / 1000.0, 16),
                                      stat("C", 1000, 0.3 / 1000.0, 20)};
    const auto plan = multiwave(s, 157, 0);
    CHECK(plan.strata[0].closed);
    CHECK(plan.strata[0].newly_closed);
    CHECK(plan.strata[0].optimum == doctest::Approx(6.0));
    CHECK(plan.strata[0].draw == 0);
    CHECK(plan.strata[1].optimum == doctest::Approx(105.0));
    CHECK(plan.strata[1].draw == 89);
    CHECK(plan.strata[2].draw == 25);
    CHECK(plan.total_draw == 114);
}

TEST_CASE("multiwave keeps strata already closed in the ledger closed") {
    const std::vector<StratumStats> s{stat("A", 100, 5.0, 3, true), stat("B", 100, 1.0, 3)};
    const auto plan = multiwave(s, 20, 0);
    CHECK(plan.strata[0].draw == 0);
    CHECK_FALSE(plan.strata[0].newly_closed);
    CHECK(plan.strata[1].draw == 14);
}

TEST_CASE("stratum_sd borrows from the parent, then from the whole frame") {
    auto records = line_records(40);
    auto ledger = make_ledger("f", FrameMembers::all,
                              {{"1", {{Axis::delta_star, {-1e300, 0.5}}}}, {"2", {{Axis::delta_star, {0.5, 1e300}}}}},
                              records, 1);
    ledger = split_stratum(ledger, "2", Axis::x_star, {1.0}, records);
    std::map<std::string, double> h;
    // Only leaf 2.2 (x_star > 1, delta_star = 1) and leaf 1 get influence values;
    // leaf 2.1 (x_star <= 1, odd ids 1..9) has just one.
    h["R001"] = 5.0;
    for (int i = 11; i < 40; i += 2) h[records[static_cast<std::size_t>(i)].id] = i;
    for (int i = 0; i < 40; i += 2) h[records[static_cast<std::size_t>(i)].id] = 0.5 * i;
    const auto stats = stratum_sd(ledger, records, h);
    REQUIRE(stats.size() == 3);
    CHECK(stats[0].sd_source == SdSource::direct);
    CHECK(stats[1].id == "2.1");
    CHECK(stats[1].sd_source == SdSource::parent);
    CHECK(stats[2].sd_source == SdSource::direct);

    std::map<std::string, double> sparse{{"R001", 1.0}, {"R002", 3.0}};
    const auto pooled = stratum_sd(ledger, records, sparse);
    CHECK(pooled[0].sd_source == SdSource::pooled);
    CHECK(pooled[0].sigma == doctest::Approx(std::sqrt(2.0)));
}

TEST_CASE("draw_sample is reproducible and records the wave") {
    const auto records = line_records(50);
    const auto ledger = make_ledger("f", FrameMembers::all,
                                    {{"1", {{Axis::delta_star, {-1e300, 0.5}}}}, {"2", {{Axis::delta_star, {0.5, 1e300}}}}},
                                    records, 1);
    const std::map<std::string, int> alloc{{"1", 4}, {"2", 6}};
    const auto a = draw_sample(ledger, records, alloc, 99);
    const auto b = draw_sample(ledger, records, alloc, 99);
    const auto c = draw_sample(ledger, records, alloc, 100);
    CHECK(a.by_stratum == b.by_stratum);
    CHECK(a.by_stratum != c.by_stratum);
    CHECK(a.ledger.wave_count == 1);
    CHECK(a.ledger.draws.size() == 10);
    CHECK(a.ledger.stratum("2").total_sampled() == 6);
    const auto next = draw_sample(a.ledger, records, {{"1", 21}}, 99);
    for (const auto& id : next.by_stratum.at("1")) {
        for (const auto& d : a.ledger.draws) CHECK(d.record_id != id);
    }
    CHECK_THROWS_AS(draw_sample(next.ledger, records, {{"1", 1}}, 99), Error);
}

TEST_CASE("oracle allocation lists every tying minimizer") {
    const std::vector<StratumStats> s{stat("a", 10, 1.0), stat("b", 10, 1.0)};
    const auto o = sim::oracle_allocation(s, 5, 1);
    CHECK(o.minimizers.size() == 2);
    CHECK(o.value == doctest::Approx(100.0 / 2 + 100.0 / 3));
}
