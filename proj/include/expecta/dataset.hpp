#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "expecta/annot.hpp"
#include "expecta/render.hpp"
#include "expecta/rng.hpp"

namespace expecta {

// Parameters of the selection bias in the synthetic "collected" set: shapes
// are large, bright and near the canvas centre.
struct BiasSpec {
    IntRange size_range{90, 120};
    IntRange brightness_range{200, 255};
    int center_slack = 20;
    RenderStyle style = RenderStyle::handdrawn();

    void validate(const Canvas& canvas) const;

    // Geometry scaled from the 128 px reference canvas.
    static BiasSpec for_canvas(Canvas canvas);

    // Draws one generating annotation of class `cls`.
    Annotation sample(int cls, Canvas canvas, Rng& rng) const;
};

void to_json(nlohmann::json& j, const BiasSpec& b);
void from_json(const nlohmann::json& j, BiasSpec& b);

inline constexpr int kDatasetSchemaVersion = 1;

struct DatasetMeta {
    int schema_version = kDatasetSchemaVersion;
    std::string kind;          // collected | validation | test | imported
    Canvas canvas;
    std::uint64_t seed = 0;
    nlohmann::json style;      // render style descriptor
    std::size_t n = 0;
    bool full_labels = false;  // y2..y6 trusted in addition to y1

    bool operator==(const DatasetMeta&) const = default;
};

struct Dataset {
    DatasetMeta meta;
    std::vector<std::uint8_t> pixels;     // N x H x W, row-major
    std::vector<int> classes;             // y1, always trusted
    std::vector<Annotation> annotations;  // trusted full labels (test sets only)
    std::vector<Annotation> truth;        // hidden generating labels; written to truth.csv

    std::size_t size() const { return classes.size(); }
    bool empty() const { return classes.empty(); }
    ImageView image(std::size_t i) const;
    GrayImage image_copy(std::size_t i) const;

    // Throws ErrorKind::format when counts disagree or annotations are invalid.
    void validate() const;

    bool operator==(const Dataset&) const = default;
};

Dataset gen_collected(const BiasSpec& bias, Canvas canvas, std::size_t n, std::uint64_t seed,
                      std::string kind = "collected");
Dataset gen_test(const ExpectationSpec& spec, std::size_t m, std::uint64_t seed);

// Directory container: meta.json, images.u8, labels.csv and, when present, truth.csv.
void save(const Dataset& ds, const std::filesystem::path& dir);
// Never reads truth.csv; see load_truth.
Dataset load(const std::filesystem::path& dir);
// Generating annotations of a synthetic collected set. For test harnesses only.
std::vector<Annotation> load_truth(const std::filesystem::path& dir);

struct ImportResult {
    Dataset dataset;
    std::size_t skipped = 0;
};

// Newline-delimited JSON records {"word": ..., "drawing": [[xs, ys], ...]} with
// coordinates on a 256 px grid, rasterized onto `canvas`.
ImportResult import_drawing_corpus(const std::filesystem::path& path,
                                   const std::map<std::string, int>& class_map, Canvas canvas,
                                   int stroke_thickness = 2);

// Auto-labels every image of a dataset.
std::vector<Annotation> auto_label_all(const Dataset& ds);

} // namespace expecta
