#pragma once

// Max-softmax outlier detector over simulated test annotations.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "expecta/annot.hpp"
#include "expecta/nn.hpp"
#include "expecta/render.hpp"

namespace expecta {

struct ScoreRecord {
    Annotation annotation;
    std::vector<double> logits;
    double temperature = 1.0;
    double score = 0.0;
    std::optional<bool> familiar;
};

// max_k softmax(logits / T)_k
double max_softmax(std::span<const double> logits, double temperature);
std::vector<double> scores_from_logits(const LogitTable& logits, double temperature);

// Renders every annotation with `style` onto the model's input canvas and runs
// inference. A render failure is reported with the offending sample index.
LogitTable annotation_logits(const Model& model, std::span<const Annotation> annotations,
                             const RenderStyle& style = RenderStyle::clean());

std::vector<ScoreRecord> score(const Model& model, std::span<const Annotation> annotations,
                               double temperature, const RenderStyle& style = RenderStyle::clean());

struct CalibrationRow {
    double temperature = 1.0;
    double mean = 0.0;
    double variance = 0.0;   // population variance of the scores
    double objective = 0.0;  // (mean - target)^2 - variance
};

struct CalibrationResult {
    double t_star = 1.0;
    double target = 0.7;
    std::vector<CalibrationRow> grid;

    const CalibrationRow& row_at(double temperature) const;
};

void to_json(nlohmann::json& j, const CalibrationResult& c);
void from_json(const nlohmann::json& j, CalibrationResult& c);

// 1.0, 1.25, ..., 20.0
std::vector<double> default_temperature_grid();

// Grid search over cached logits; ties go to the smallest temperature.
CalibrationResult calibrate_temperature(const LogitTable& logits, double target = 0.7,
                                        std::span<const double> grid = {});

struct OutlierPartition {
    std::vector<std::size_t> familiar;
    std::vector<std::size_t> outliers;
    std::vector<bool> is_familiar;  // per test sample
    std::string rule;
};

// Familiar iff every label y2..y6 falls in an occupied bin of the collected
// support for the sample's class.
OutlierPartition partition_outliers(std::span<const Annotation> annotations,
                                    const LabelDistribution& collected);

// Probability that a random familiar sample outscores a random outlier, ties
// counting one half. Throws ErrorKind::empty_input unless both groups occur.
double auroc(std::span<const double> scores, const std::vector<bool>& is_familiar);

std::string scores_csv(std::span<const ScoreRecord> records);

} // namespace expecta
