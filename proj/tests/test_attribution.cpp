#include <doctest.h>

#include <random>

#include "expecta/attribution.hpp"
#include "expecta/detector.hpp"
#include "expecta/error.hpp"
#include "expecta/rng.hpp"
#include "oracles.hpp"

using namespace expecta;

namespace {

std::array<double, kCoalitions> game(const std::function<double(unsigned)>& v) {
    std::array<double, kCoalitions> out{};
    for (unsigned c = 0; c < kCoalitions; ++c) out[c] = v(c);
    return out;
}

bool in(unsigned c, int f) { return (c >> f) & 1u; }

} // namespace

TEST_CASE("linear game") {
    const double w[5] = {0.3, -1.2, 2.5, 0.0, 7.0};
    const auto v = game([&](unsigned c) {
        double s = 0;
        for (int f = 0; f < 5; ++f) s += in(c, f) ? w[f] : 0;
        return s;
    });
    const auto [phi0, phi] = shapley_from_values(v);
    CHECK(std::abs(phi0) <= 1e-12);
    for (int f = 0; f < 5; ++f) CHECK(std::abs(phi[static_cast<std::size_t>(f)] - w[f]) <= 1e-6);
}

TEST_CASE("constant game") {
    const auto v = game([](unsigned) { return 0.42; });
    const auto [phi0, phi] = shapley_from_values(v);
    CHECK(std::abs(phi0 - 0.42) <= 1e-12);
    for (double p : phi) CHECK(std::abs(p) <= 1e-6);
}

TEST_CASE("random games match the permutation oracle") {
    std::mt19937 gen(9);
    std::uniform_real_distribution<double> d(-1, 1);
    for (int trial = 0; trial < 20; ++trial) {
        std::array<double, kCoalitions> v{};
        for (auto& x : v) x = d(gen);
        const auto [phi0, phi] = shapley_from_values(v);
        const auto want = oracle::shapley_by_permutation(5, [&](unsigned c) { return v[c]; });
        double total = phi0;
        for (int f = 0; f < 5; ++f) {
            CHECK(std::abs(phi[static_cast<std::size_t>(f)] - want[static_cast<std::size_t>(f)]) <= 1e-12);
            total += phi[static_cast<std::size_t>(f)];
        }
        CHECK(std::abs(total - v[kCoalitions - 1]) <= 1e-12);
    }
}

TEST_CASE("symmetric features share credit") {
    // features 1 and 3 enter only through their sum
    const auto v = game([](unsigned c) {
        const int k = in(c, 1) + in(c, 3);
        return k * k * 0.7 + in(c, 0) * in(c, 4) * 2.0 - in(c, 2);
    });
    const auto [phi0, phi] = shapley_from_values(v);
    CHECK(std::abs(phi[1] - phi[3]) <= 1e-6);
    CHECK(std::abs(phi[0] - phi[4]) <= 1e-6);
}

TEST_CASE("value function ignoring a label gives it nothing") {
    MaskingPolicy policy;
    policy.background = ExpectationSpec::for_canvas({64, 64});
    const Annotation ann{1, 5, 7, 40, 42, 230};
    // depends on every label except brightness
    const ValueFn fn = [](const Annotation& a) { return 0.01 * a.y2 - 0.003 * a.y3 * a.y4 + std::sqrt(a.y5); };
    const auto r = shapley_exact(fn, ann, policy, 3);
    CHECK(std::abs(r.phi[4]) <= 1e-6);
    CHECK(std::abs(r.total() - r.score) <= 1e-9);
    const auto again = shapley_exact(fn, ann, policy, 3);
    CHECK(again.phi == r.phi);
    CHECK(again.phi0 == r.phi0);
}

TEST_CASE("failures name the coalition") {
    MaskingPolicy policy;
    policy.background = ExpectationSpec::for_canvas({64, 64});
    const ValueFn fn = [](const Annotation& a) -> double {
        if (a.y6 > 250) fail(ErrorKind::render_domain, "too bright");
        return 0.0;
    };
    try {
        shapley_exact(fn, {0, 1, 1, 30, 30, 255}, policy, 1);
        FAIL("expected failure");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("coalition") != std::string::npos);
    }
    policy.background_samples = 0;
    CHECK_THROWS_AS(policy.validate(), Error);
}

TEST_CASE("validity projection") {
    const Canvas c{64, 64};
    std::mt19937 gen(1);
    std::uniform_int_distribution<int> d(-30, 100);
    for (int i = 0; i < 2000; ++i) {
        const Annotation raw{static_cast<int>(gen() % 2), d(gen), d(gen), d(gen), d(gen), d(gen) * 3};
        const auto p = project_valid(raw, c);
        REQUIRE(p.valid_for(c));
        CHECK(project_valid(p, c) == p);
    }
    const Annotation ok{0, 3, 4, 23, 24, 99};
    CHECK(project_valid(ok, c) == ok);
    // re-square shrinks toward the top-left corner
    CHECK(project_valid({0, 10, 10, 30, 50, 99}, c) == Annotation{0, 10, 10, 30, 30, 99});
    CHECK(project_valid({0, 30, 5, 10, 25, 0}, c) == Annotation{0, 10, 5, 30, 25, 1});
}

TEST_CASE("composite keeps class and coalition features") {
    const Canvas c{64, 64};
    const Annotation ann{1, 10, 11, 30, 31, 200}, bg{0, 2, 3, 12, 13, 90};
    CHECK(composite(ann, bg, kCoalitions - 1, c) == ann);
    const auto none = composite(ann, bg, 0, c);
    CHECK(none.y1 == 1);
    CHECK(none.y6 == 90);
    CHECK(composite(ann, bg, 1u << 4, c).y6 == 200);
}

TEST_CASE("model attribution is additive and matches the single-sample path") {
    const Canvas c{32, 32};
    const auto model = Model::create(ArchConfig::preset("VGG05", c), 12);
    MaskingPolicy policy;
    policy.background = ExpectationSpec::for_canvas(c);
    const auto anns = sample_expected(policy.background, 5, 6);
    const std::vector<double> temps{1.0, 3.5};
    const auto recs = attribute_testset(model, temps, anns, policy, 77);
    REQUIRE(recs.size() == 2);
    for (std::size_t t = 0; t < temps.size(); ++t)
        for (const auto& r : recs[t]) CHECK(std::abs(r.score - r.total()) <= 1e-5);

    const ValueFn fn = [&](const Annotation& a) {
        const std::vector<Annotation> one{a};
        return max_softmax(annotation_logits(model, one).row(0), 3.5);
    };
    const auto single = shapley_exact(fn, anns[2], policy, derive_seed(77, "background", 2));
    CHECK(single.phi0 == doctest::Approx(recs[1][2].phi0).epsilon(1e-6));
    for (std::size_t f = 0; f < kFeatures; ++f)
        CHECK(std::abs(single.phi[f] - recs[1][2].phi[f]) <= 1e-6);

    const auto again = attribute_testset(model, temps, anns, policy, 77);
    CHECK(again[0][3].phi == recs[0][3].phi);
}

TEST_CASE("marginal representation") {
    const std::vector<int> classes{0, 1};
    std::vector<AttributionRecord> recs;
    const auto anns = sample_expected(ExpectationSpec::for_canvas({64, 64}), 3, 50);
    for (const auto& a : anns) {
        AttributionRecord r;
        r.annotation = a;
        r.phi = {0.1, 0.0, 0.2, 0.3, -0.1};
        recs.push_back(r);
    }
    const auto rep = marginal_representation(recs, classes);
    const auto plain = LabelDistribution::from_annotations(anns, classes);
    for (int cls : classes) {
        for (int j : {2, 3, 4, 5}) CHECK(rep.at(cls, j) == plain.at(cls, j));
        CHECK(rep.at(cls, 6).empty());
        CHECK(rep.empty_labels(cls) == std::vector<int>{6});
    }
    const auto row = audit_overlap(plain, plain, classes, "P_T");
    CHECK(row.mean == 0.0);
    const auto inc = nonnegative_incidence(recs, classes);
    CHECK(inc[0][0] == 1.0);
    CHECK(inc[1][4] == 0.0);
}

TEST_CASE("stratified subset") {
    const auto anns = sample_expected(ExpectationSpec::for_canvas({64, 64}), 4, 1000);
    const auto idx = stratified_subset(anns, 100, 1);
    CHECK(idx.size() == 100);
    CHECK(std::is_sorted(idx.begin(), idx.end()));
    int ones = 0, all_ones = 0;
    for (auto i : idx) ones += anns[i].y1;
    for (const auto& a : anns) all_ones += a.y1;
    CHECK(std::abs(ones - all_ones / 10.0) <= 1.0);
    CHECK(stratified_subset(anns, 5000, 1).size() == 1000);
}
