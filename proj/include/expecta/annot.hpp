#pragma once

// Annotation space, expectation distributions, and support-based overlap.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace expecta {

struct Canvas {
    int width = 128;
    int height = 128;

    int min_side() const { return width < height ? width : height; }
    std::size_t pixels() const { return static_cast<std::size_t>(width) * height; }
    bool operator==(const Canvas&) const = default;
};

struct IntRange {
    int lo = 0;
    int hi = 0;

    bool contains(int v) const { return lo <= v && v <= hi; }
    int span() const { return hi - lo + 1; }
    bool operator==(const IntRange&) const = default;
};

// Labels that carry attributable information; y1 (class) is held fixed.
inline constexpr std::array<int, 5> kLabels{2, 3, 4, 5, 6};

// The 6-d label vector: class, square bounding box [y2, y4) x [y3, y5), brightness.
struct Annotation {
    int y1 = 0;
    int y2 = 0;
    int y3 = 0;
    int y4 = 1;
    int y5 = 1;
    int y6 = 1;

    int size() const { return y4 - y2; }

    // j in 1..6
    int label(int j) const;
    void set_label(int j, int value);

    bool valid_for(const Canvas& canvas) const;
    bool operator==(const Annotation&) const = default;
};

std::string to_string(const Annotation& a);

struct ExpectationSpec {
    Canvas canvas{128, 128};
    IntRange size_range{30, 120};
    IntRange brightness_range{100, 255};
    std::vector<int> classes{0, 1};

    // Throws ErrorKind::specification describing the first violated invariant.
    void validate() const;

    // Default ranges with the geometric part scaled from the 128 px reference canvas.
    static ExpectationSpec for_canvas(Canvas canvas);
};

void to_json(nlohmann::json& j, const ExpectationSpec& s);
void from_json(const nlohmann::json& j, ExpectationSpec& s);
void to_json(nlohmann::json& j, const Canvas& c);
void from_json(const nlohmann::json& j, Canvas& c);
void to_json(nlohmann::json& j, const IntRange& r);
void from_json(const nlohmann::json& j, IntRange& r);

std::vector<Annotation> sample_expected(const ExpectationSpec& spec, std::uint64_t seed,
                                        std::size_t count);

// Histogram over a regular grid with an occupancy threshold.
//
// Bin b covers [origin + b*bin_width, origin + (b+1)*bin_width). Two supports
// can be compared when they share bin_width and their origins differ by an
// integral number of bins.
class BinnedSupport {
public:
    BinnedSupport() = default;
    BinnedSupport(int label, double bin_width, double origin, std::vector<std::uint64_t> counts,
                  std::uint64_t min_count);

    int label() const { return label_; }
    double bin_width() const { return bin_width_; }
    double origin() const { return origin_; }
    std::uint64_t min_count() const { return min_count_; }
    const std::vector<std::uint64_t>& counts() const { return counts_; }
    const std::vector<bool>& occupancy() const { return occupancy_; }

    std::size_t bins() const { return counts_.size(); }
    std::size_t occupied_bins() const;
    double measure() const { return bin_width_ * static_cast<double>(occupied_bins()); }
    bool empty() const { return occupied_bins() == 0; }
    std::uint64_t total() const;

    // Index of the bin on the global grid (origin 0) holding `value`.
    long long grid_index(double value) const;
    // True when `value` falls in an occupied bin.
    bool covers(double value) const;

    // Fraction of the total count per bin; all zeros when empty.
    std::vector<double> proportions() const;

    bool operator==(const BinnedSupport&) const = default;

private:
    int label_ = 0;
    double bin_width_ = 1.0;
    double origin_ = 0.0;
    std::uint64_t min_count_ = 1;
    std::vector<std::uint64_t> counts_;
    std::vector<bool> occupancy_;
};

BinnedSupport estimate_support(std::span<const double> values, double bin_width = 1.0,
                               std::uint64_t min_count = 1, int label = 0);

// Signed Steinhaus-style index: I * |A xor B| / |A or B|, I = -1 iff B is a strict
// subset of A. An empty B against a non-empty A counts as disjoint (V = 1).
double overlap_index(const BinnedSupport& a, const BinnedSupport& b);

// Per-class, per-label empirical supports (labels 2..6).
class LabelDistribution {
public:
    LabelDistribution() = default;

    // Classes listed in `classes` get an entry even when no annotation has them.
    static LabelDistribution from_annotations(std::span<const Annotation> annotations,
                                              std::span<const int> classes,
                                              double bin_width = 1.0,
                                              std::uint64_t min_count = 1);

    void set(int cls, int label, BinnedSupport support);
    bool has_class(int cls) const;
    // Throws ErrorKind::missing_class.
    const BinnedSupport& at(int cls, int label) const;
    std::vector<int> classes() const;

    std::size_t sample_count() const { return n_; }
    void set_sample_count(std::size_t n) { n_ = n; }

    // Labels of class `cls` whose support is empty.
    std::vector<int> empty_labels(int cls) const;

    std::string to_csv() const;
    nlohmann::json to_json() const;
    static LabelDistribution from_json(const nlohmann::json& j);

    bool operator==(const LabelDistribution&) const = default;

private:
    std::map<std::pair<int, int>, BinnedSupport> supports_;
    std::size_t n_ = 0;
};

struct LabelOverlap {
    int cls = 0;
    std::map<int, double> by_label; // label j -> V^j
    double mean() const;
};

LabelOverlap per_label_overlap(const LabelDistribution& reference,
                               const LabelDistribution& candidate, int cls);

// Mean of V^j over all labels and the given classes.
double mean_overlap(const LabelDistribution& reference, const LabelDistribution& candidate,
                    std::span<const int> classes);

} // namespace expecta
