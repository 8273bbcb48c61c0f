#pragma once

// Exact Shapley attribution of detector scores to the five annotation labels,
// and the marginal representation estimate built from it.

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "expecta/annot.hpp"
#include "expecta/nn.hpp"

namespace expecta {

inline constexpr int kFeatures = 5;
inline constexpr unsigned kCoalitions = 1u << kFeatures;

// Features outside a coalition are replaced by background draws from the
// expectation distribution; the class label is never replaced.
struct MaskingPolicy {
    int background_samples = 8;
    ExpectationSpec background;

    void validate() const;
};

// Orders corners per axis, clamps to the canvas, re-squares by shrinking the
// longer side toward the top-left corner and clamps brightness to [1, 255].
Annotation project_valid(Annotation a, Canvas canvas);

// Bit f of `coalition` set means feature f (label kLabels[f]) comes from `ann`.
Annotation composite(const Annotation& ann, const Annotation& background, unsigned coalition,
                     Canvas canvas);

struct AttributionRecord {
    std::size_t index = 0;
    Annotation annotation;
    double temperature = 1.0;
    double phi0 = 0.0;
    std::array<double, kFeatures> phi{};
    double score = 0.0;

    double total() const;
};

// phi0 = v(empty) and the Shapley values of a 5-player game given all 32
// coalition values.
std::pair<double, std::array<double, kFeatures>> shapley_from_values(
    std::span<const double, kCoalitions> values);

using ValueFn = std::function<double(const Annotation&)>;

// Coalition values are means over the policy's background draws, seeded by `seed`.
AttributionRecord shapley_exact(const ValueFn& value_fn, const Annotation& ann,
                                const MaskingPolicy& policy, std::uint64_t seed);

// Attributes every annotation at each of the given temperatures. Images are
// rendered clean and every composite is evaluated once; scores at the different
// temperatures reuse the same logits. Result is indexed [temperature][sample].
// `score` on each record is the detector score of the annotation itself,
// computed separately from the coalition values.
std::vector<std::vector<AttributionRecord>> attribute_testset(
    const Model& model, std::span<const double> temperatures, std::span<const Annotation> annotations,
    const MaskingPolicy& policy, std::uint64_t seed);

// Indices of a class-stratified subset of size min(m, n), keeping the original order.
std::vector<std::size_t> stratified_subset(std::span<const Annotation> annotations, std::size_t m,
                                           std::uint64_t seed);

// P+_T: per class and label, the support of label values whose Shapley value is
// non-negative, with 1-unit bins and min_count 1.
LabelDistribution marginal_representation(std::span<const AttributionRecord> records,
                                          std::span<const int> classes);

// Fraction of records with a non-negative value per (class, label).
std::vector<std::array<double, kFeatures>> nonnegative_incidence(
    std::span<const AttributionRecord> records, std::span<const int> classes);

std::string attributions_csv(std::span<const AttributionRecord> records);

struct OverlapRow {
    std::string name;  // "P_T" or "P+_T"
    std::string arch;
    double temperature = 0.0;
    std::vector<LabelOverlap> per_class;
    double mean = 0.0;
};

OverlapRow audit_overlap(const LabelDistribution& candidate, const LabelDistribution& collected,
                         std::span<const int> classes, std::string name, std::string arch = "",
                         double temperature = 0.0);

nlohmann::json overlap_table_json(std::span<const OverlapRow> rows);
std::string overlap_table_csv(std::span<const OverlapRow> rows);

} // namespace expecta
