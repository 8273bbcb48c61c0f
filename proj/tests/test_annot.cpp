#include <doctest.h>

#include <numeric>
#include <random>

#include "expecta/annot.hpp"
#include "expecta/error.hpp"
#include "oracles.hpp"

using namespace expecta;

namespace {

BinnedSupport interval_support(int lo, int hi) {
    std::vector<double> v;
    for (int x = lo; x < hi; ++x) v.push_back(x + 0.5);
    return estimate_support(v);
}

} // namespace

TEST_CASE("overlap index on intervals") {
    const auto ab = interval_support(0, 10);
    CHECK(overlap_index(ab, interval_support(0, 10)) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(overlap_index(interval_support(0, 5), interval_support(20, 30)) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::abs(overlap_index(ab, interval_support(2, 8)) + 0.4) < 1e-12);
    CHECK(std::abs(overlap_index(ab, interval_support(5, 15)) - 2.0 / 3.0) < 1e-12);
    // containment the other way round is not negative
    CHECK(overlap_index(interval_support(2, 8), ab) == doctest::Approx(0.4));
}

TEST_CASE("overlap index matches the interval oracle") {
    std::mt19937 gen(11);
    std::uniform_int_distribution<int> d(0, 60);
    for (int trial = 0; trial < 500; ++trial) {
        int a0 = d(gen), a1 = d(gen), b0 = d(gen), b1 = d(gen);
        if (a0 > a1) std::swap(a0, a1);
        if (b0 > b1) std::swap(b0, b1);
        ++a1;
        ++b1;
        const double got = overlap_index(interval_support(a0, a1), interval_support(b0, b1));
        const double want = oracle::overlap({double(a0), double(a1)}, {double(b0), double(b1)});
        REQUIRE(std::abs(got - want) < 1e-12);
        CHECK(got >= -1.0);
        CHECK(got <= 1.0);
    }
}

TEST_CASE("overlap edge cases") {
    const BinnedSupport empty(2, 1.0, 0.0, {}, 1);
    CHECK_THROWS_AS(overlap_index(empty, empty), Error);
    try {
        overlap_index(empty, empty);
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::undefined_overlap);
    }
    CHECK(overlap_index(interval_support(0, 4), empty) == 1.0);
    // bins of different widths cannot be compared
    std::vector<double> v{1, 2, 3};
    CHECK_THROWS(overlap_index(estimate_support(v, 1.0), estimate_support(v, 2.0)));
}

TEST_CASE("support threshold") {
    std::vector<double> v{0.5, 0.5, 0.5, 3.5};
    const auto s1 = estimate_support(v, 1.0, 1);
    const auto s3 = estimate_support(v, 1.0, 3);
    CHECK(s1.occupied_bins() == 2);
    CHECK(s3.occupied_bins() == 1);
    CHECK(s1.covers(3.2));
    CHECK_FALSE(s3.covers(3.2));
    CHECK(s1.measure() == 2.0);
    const auto p = s1.proportions();
    CHECK(std::accumulate(p.begin(), p.end(), 0.0) == doctest::Approx(1.0));
}

TEST_CASE("expectation sampling") {
    const ExpectationSpec spec;
    const auto a = sample_expected(spec, 3, 2000);
    const auto b = sample_expected(spec, 3, 2000);
    CHECK(a == b);
    int classes[2] = {0, 0};
    for (const auto& x : a) {
        REQUIRE(x.valid_for(spec.canvas));
        CHECK(spec.size_range.contains(x.size()));
        CHECK(spec.brightness_range.contains(x.y6));
        ++classes[x.y1];
    }
    CHECK(classes[0] > 900);
    CHECK(classes[1] > 900);
    CHECK_THROWS_AS(sample_expected(spec, 3, 0), Error);
}

TEST_CASE("expectation spec validation") {
    ExpectationSpec s;
    s.size_range = {30, 200};
    CHECK_THROWS_AS(s.validate(), Error);
    s = ExpectationSpec{};
    s.brightness_range = {0, 255};
    CHECK_THROWS_AS(s.validate(), Error);
    s = ExpectationSpec{};
    s.classes.clear();
    CHECK_THROWS_AS(s.validate(), Error);
    const auto small = ExpectationSpec::for_canvas({64, 64});
    CHECK(small.size_range == IntRange{15, 60});
    CHECK(ExpectationSpec::for_canvas({32, 32}).size_range == IntRange{8, 30});
}

TEST_CASE("label distribution") {
    std::vector<Annotation> anns{{0, 1, 1, 5, 5, 100}, {0, 2, 2, 6, 6, 101}, {1, 0, 0, 9, 9, 200}};
    const std::vector<int> classes{0, 1, 2};
    const auto d = LabelDistribution::from_annotations(anns, classes);
    CHECK(d.has_class(2));
    CHECK(d.at(0, 2).occupied_bins() == 2);
    CHECK(d.at(2, 6).empty());
    CHECK(d.empty_labels(2).size() == 5);
    CHECK_THROWS_AS(d.at(7, 2), Error);
    CHECK(LabelDistribution::from_json(d.to_json()) == d);
    CHECK(d.to_csv().rfind("class,label,bin_origin,bin_width,counts\n", 0) == 0);

    // identical distributions overlap exactly, per label and on average
    const std::vector<int> two{0, 1};
    CHECK(mean_overlap(d, d, two) == 0.0);
    const auto v = per_label_overlap(d, d, 0);
    CHECK(v.by_label.size() == 5);
}
