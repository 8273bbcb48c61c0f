#pragma once

// Small VGG-style convolutional classifiers trained from scratch with Adam.
//
// Activations are laid out channel-major across the batch ([C][B][H][W]) so
// that every 3x3 convolution over a batch is a single im2col + GEMM, and batch
// norm statistics are reductions over contiguous rows.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "expecta/annot.hpp"

namespace expecta {

struct Dataset;

struct StageConfig {
    int convs = 1;
    int channels = 16;
    bool operator==(const StageConfig&) const = default;
};

struct ArchConfig {
    std::string name = "custom";
    std::vector<StageConfig> stages;  // each stage ends with a 2x2 max-pool
    bool batch_norm = false;
    double dropout = 0.0;             // applied to the flattened features
    Canvas input{64, 64};
    int classes = 2;

    // VGG05, VGG07, VGG09, VGG11 or VGG13; the number counts conv + dense layers.
    static ArchConfig preset(std::string_view name, Canvas input);
    static const std::vector<std::string>& preset_names();

    int conv_layers() const;
    int layer_count() const { return conv_layers() + 1; }
    int feature_size() const;
    void validate() const;
    bool operator==(const ArchConfig&) const = default;
};

void to_json(nlohmann::json& j, const ArchConfig& a);
void from_json(const nlohmann::json& j, ArchConfig& a);

struct ParamEntry {
    std::string name;
    std::vector<int> shape;
    std::size_t offset = 0;
    std::size_t size = 0;
    bool trainable = true;
    bool operator==(const ParamEntry&) const = default;
};

std::vector<ParamEntry> build_manifest(const ArchConfig& arch);
std::string manifest_hash(const ArchConfig& arch);

enum class InitKind { he, zero };

struct Model {
    ArchConfig arch;
    std::vector<float> params;          // flat; partitioned by `manifest`
    std::vector<ParamEntry> manifest;
    int epochs_seen = 0;
    std::uint64_t seed = 0;

    static Model create(const ArchConfig& arch, std::uint64_t seed, InitKind init = InitKind::he);

    const ParamEntry& entry(std::string_view name) const;
    std::span<float> tensor(std::string_view name);
    std::span<const float> tensor(std::string_view name) const;

    // Offsets partition params exactly and every value is finite.
    void validate() const;
    bool operator==(const Model&) const = default;
};

struct TrainConfig {
    int epochs = 5;
    int batch_size = 64;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t seed = 0;
    double validation_fraction = 0.2;  // used only when no validation set is given

    void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct EpochStats {
    int epoch = 0;
    double loss = 0.0;
    double val_accuracy = 0.0;
};

struct TrainResult {
    Model model;  // best-validation checkpoint
    std::vector<EpochStats> history;
    int best_epoch = 0;
};

std::string history_csv(const std::vector<EpochStats>& history);

// Row-major table of logits, one row of `classes` values per sample.
struct LogitTable {
    std::size_t classes = 2;
    std::vector<double> values;

    std::size_t size() const { return classes == 0 ? 0 : values.size() / classes; }
    std::span<const double> row(std::size_t i) const {
        return std::span<const double>(values).subspan(i * classes, classes);
    }
};

// Inference-mode logits for `n` images stored contiguously (n x H x W bytes).
LogitTable forward(const Model& model, std::span<const std::uint8_t> pixels, std::size_t n);
LogitTable forward(const Model& model, const Dataset& ds);

// Forward pass using batch statistics in batch-norm layers and no dropout.
LogitTable forward_batch_stats(const Model& model, std::span<const std::uint8_t> pixels,
                               std::size_t n);
// Sets batch-norm running statistics to those of one pass over the given batch.
void freeze_batch_norm_stats(Model& model, std::span<const std::uint8_t> pixels, std::size_t n);

// Mean softmax cross-entropy and its gradient w.r.t. all parameters (zero for
// non-trainable entries) in training mode. Dropout, when configured, uses
// `dropout_seed`.
template <class T>
double loss_and_gradient(const ArchConfig& arch, std::span<const T> params,
                         std::span<const std::uint8_t> pixels, std::span<const int> labels,
                         std::span<T> grad, std::uint64_t dropout_seed = 0);

std::vector<double> softmax(std::span<const double> logits, double temperature = 1.0);
double cross_entropy(std::span<const double> logits, int label);

int argmax(std::span<const double> logits);

using ProgressFn = std::function<void(int epoch, std::size_t batch, std::size_t batches, double loss)>;

TrainResult train(const Dataset& train_set, const ArchConfig& arch, const TrainConfig& cfg,
                  const Dataset* validation_set = nullptr, const ProgressFn& progress = {});

// Fraction of argmax-correct predictions against trusted class labels.
double evaluate(const Model& model, const Dataset& ds);
double accuracy(const LogitTable& logits, std::span<const int> labels);

// model.json + weights.f32 (little-endian).
void save_checkpoint(const Model& model, const std::filesystem::path& dir);
// When `expected` is given, a checkpoint of a different architecture is rejected.
Model load_checkpoint(const std::filesystem::path& dir, const ArchConfig* expected = nullptr);

// Worker count for data-parallel inference: EXPECTA_THREADS, where 0 selects the
// single-threaded reference mode; defaults to the hardware concurrency.
int thread_count();

} // namespace expecta
