#include <doctest.h>

#include <cmath>
#include <random>

#include "expecta/dataset.hpp"
#include "expecta/detector.hpp"
#include "expecta/error.hpp"
#include "oracles.hpp"

using namespace expecta;

namespace {

LogitTable table(const std::vector<std::pair<double, double>>& rows) {
    LogitTable t;
    for (auto [a, b] : rows) {
        t.values.push_back(a);
        t.values.push_back(b);
    }
    return t;
}

} // namespace

TEST_CASE("max softmax") {
    const std::vector<double> z{2.0, 0.0};
    CHECK(max_softmax(z, 1.0) == doctest::Approx(std::exp(2.0) / (std::exp(2.0) + 1)).epsilon(1e-14));
    CHECK(max_softmax(z, 2.0) == doctest::Approx(std::exp(1.0) / (std::exp(1.0) + 1)).epsilon(1e-14));
    CHECK(std::abs(max_softmax(z, 1e6) - 0.5) < 1e-5);
    const std::vector<double> same{3.3, 3.3};
    for (double t : {0.5, 1.0, 7.0}) CHECK(max_softmax(same, t) == 0.5);
    const std::vector<double> huge{800.0, -800.0};
    CHECK(max_softmax(huge, 1.0) == 1.0);
    CHECK_THROWS_AS(max_softmax(z, 0.0), Error);
}

TEST_CASE("score is monotone in temperature and keeps the argmax") {
    std::mt19937 gen(3);
    std::normal_distribution<double> d(0, 4);
    for (int i = 0; i < 200; ++i) {
        const std::vector<double> z{d(gen), d(gen)};
        double prev = 2.0;
        for (double t = 1.0; t < 20; t += 0.5) {
            const double s = max_softmax(z, t);
            CHECK(s == doctest::Approx(oracle::two_class_score(z[0], z[1], t)).epsilon(1e-12));
            CHECK(s < prev);
            prev = s;
            const auto p = softmax(z, t);
            CHECK(argmax(p) == argmax(z));
        }
    }
}

TEST_CASE("temperature grid and degenerate calibration") {
    const auto g = default_temperature_grid();
    CHECK(g.front() == 1.0);
    CHECK(g.back() == 20.0);
    CHECK(g.size() == 77);
    const auto flat = table({{1, 1}, {2, 2}, {-1, -1}});
    const auto r = calibrate_temperature(flat, 0.7);
    CHECK(r.t_star == 1.0);
    for (const auto& row : r.grid) {
        CHECK(row.variance == 0.0);
        CHECK(row.objective == doctest::Approx(0.04));
    }
    CHECK_THROWS_AS(calibrate_temperature(LogitTable{}, 0.7), Error);
}

TEST_CASE("calibration recomputes from scores") {
    std::mt19937 gen(5);
    std::normal_distribution<double> d(0, 6);
    std::vector<std::pair<double, double>> rows;
    for (int i = 0; i < 300; ++i) rows.push_back({d(gen), d(gen)});
    const auto logits = table(rows);
    const auto r = calibrate_temperature(logits, 0.7);
    double best = 1e9;
    for (const auto& row : r.grid) {
        const auto s = scores_from_logits(logits, row.temperature);
        double mean = 0, var = 0;
        for (double v : s) mean += v;
        mean /= s.size();
        for (double v : s) var += (v - mean) * (v - mean);
        var /= s.size();
        CHECK(row.mean == doctest::Approx(mean).epsilon(1e-12));
        CHECK(row.variance == doctest::Approx(var).epsilon(1e-12));
        best = std::min(best, row.objective);
    }
    CHECK(r.row_at(r.t_star).objective == best);
    nlohmann::json j = r;
    const auto back = j.get<CalibrationResult>();
    CHECK(back.t_star == r.t_star);
    CHECK(back.grid.size() == r.grid.size());
}

TEST_CASE("auroc") {
    const std::vector<double> sep{0.9, 0.8, 0.1, 0.2};
    CHECK(auroc(sep, {true, true, false, false}) == 1.0);
    const std::vector<double> same{0.3, 0.5, 0.3, 0.5};
    CHECK(auroc(same, {true, true, false, false}) == 0.5);
    CHECK_THROWS_AS(auroc(sep, {true, true, true, true}), Error);

    std::mt19937 gen(17);
    std::uniform_int_distribution<int> d(0, 40);  // coarse values force ties
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> s(200);
        std::vector<bool> pos(200);
        for (std::size_t i = 0; i < s.size(); ++i) {
            s[i] = d(gen) / 40.0;
            pos[i] = gen() % 3 == 0;
        }
        REQUIRE(std::abs(auroc(s, pos) - oracle::pairwise_auroc(s, pos)) <= 1e-9);
        // invariant under a strictly increasing transform
        std::vector<double> t(s.size());
        for (std::size_t i = 0; i < s.size(); ++i) t[i] = std::exp(3 * s[i]) - 7;
        CHECK(auroc(t, pos) == doctest::Approx(auroc(s, pos)).epsilon(1e-12));
    }
}

TEST_CASE("outlier partition") {
    const Canvas c{64, 64};
    const auto collected = gen_collected(BiasSpec::for_canvas(c), c, 400, 2);
    const auto labels = auto_label_all(collected);
    const std::vector<int> classes{0, 1};
    const auto support = LabelDistribution::from_annotations(labels, classes);

    std::vector<Annotation> anns{labels[0], labels[1], {0, 10, 10, 25, 25, 230}, {1, 17, 17, 32, 32, 120}};
    const auto p = partition_outliers(anns, support);
    CHECK(p.is_familiar == std::vector<bool>{true, true, false, false});
    CHECK(p.familiar.size() + p.outliers.size() == anns.size());

    const std::vector<Annotation> none;
    const auto empty = LabelDistribution::from_annotations(none, classes);
    const auto all_out = partition_outliers(anns, empty);
    CHECK(all_out.familiar.empty());

    const std::vector<int> only_zero{0};
    CHECK_THROWS_AS(partition_outliers(anns, LabelDistribution::from_annotations(labels, only_zero)), Error);
}

TEST_CASE("enlarging the support never removes familiar samples") {
    const Canvas c{64, 64};
    const std::vector<int> classes{0, 1};
    const auto test = sample_expected(ExpectationSpec::for_canvas(c), 8, 500);
    const auto small_set = gen_collected(BiasSpec::for_canvas(c), c, 100, 3);
    auto labels = auto_label_all(small_set);
    const auto before = partition_outliers(test, LabelDistribution::from_annotations(labels, classes));
    const auto more = auto_label_all(gen_collected(BiasSpec::for_canvas(c), c, 300, 4));
    labels.insert(labels.end(), more.begin(), more.end());
    const auto after = partition_outliers(test, LabelDistribution::from_annotations(labels, classes));
    for (std::size_t i = 0; i < test.size(); ++i)
        if (before.is_familiar[i]) CHECK(after.is_familiar[i]);
    CHECK(after.familiar.size() >= before.familiar.size());
}

TEST_CASE("scoring a model") {
    const Canvas c{32, 32};
    const auto model = Model::create(ArchConfig::preset("VGG05", c), 4);
    const auto anns = sample_expected(ExpectationSpec::for_canvas(c), 2, 20);
    const auto recs = score(model, anns, 2.0);
    REQUIRE(recs.size() == 20);
    for (const auto& r : recs) {
        CHECK(r.score == max_softmax(r.logits, 2.0));
        CHECK(r.score >= 0.5);
        CHECK(r.score <= 1.0);
    }
    auto bad = anns;
    bad[7].y4 = bad[7].y2;
    try {
        score(model, bad, 1.0);
        FAIL("invalid annotation scored");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::render_domain);
        CHECK(std::string(e.what()).find("sample 7") != std::string::npos);
    }
    CHECK(scores_csv(recs).rfind("index,y1,y2,y3,y4,y5,y6,logit0,logit1,T,score,familiar\n", 0) == 0);
}
