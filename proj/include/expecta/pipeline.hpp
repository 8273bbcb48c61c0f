#pragma once

// End-to-end audit pipeline over a run directory.
//
//   gen -> train -> calibrate -> score -> attribute -> report
//
// Each stage writes manifests/<stage>.json holding a hash of the configuration
// it depends on plus the hash of its upstream stage. A stage whose manifest
// matches is skipped; a downstream stage refuses to run on a missing or
// mismatched upstream manifest.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "expecta/annot.hpp"
#include "expecta/dataset.hpp"
#include "expecta/error.hpp"
#include "expecta/nn.hpp"

namespace expecta {

struct RunConfig {
    std::string profile = "desk";
    std::uint64_t seed = 0;
    Canvas canvas{64, 64};
    ExpectationSpec expectation = ExpectationSpec::for_canvas({64, 64});
    BiasSpec bias = BiasSpec::for_canvas({64, 64});
    std::size_t n_collected = 10000;
    std::size_t n_validation = 2000;
    std::size_t n_test = 2000;
    std::size_t n_attr = 512;
    std::vector<std::string> archs{"VGG05", "VGG13"};
    bool batch_norm = false;
    double dropout = 0.0;
    TrainConfig train;
    std::vector<double> temperature_grid;  // empty: 1.0 to 20.0 step 0.25
    double target_score = 0.7;
    int background_samples = 8;
    int repeats = 3;
    double regularization_dropout = 0.5;
    std::string out_dir = "runs";

    static RunConfig for_profile(const std::string& name);
    void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
// Fields absent from `j` keep their current values.
void from_json(const nlohmann::json& j, RunConfig& c);

// Profile defaults, then the config file (whose own "profile" key selects the
// base unless `profile` is given), then --seed/--out, then --set path=value.
RunConfig resolve_config(const std::optional<std::filesystem::path>& file,
                         const std::optional<std::string>& profile,
                         const std::optional<std::uint64_t>& seed,
                         const std::optional<std::string>& out_dir,
                         const std::vector<std::string>& overrides);

// Hex digest of the whole configuration except the output directory.
std::string config_hash(const RunConfig& cfg);

// Most recent <out>/<timestamp>-<hash> directory for this config, or a new one.
std::filesystem::path locate_run_dir(const RunConfig& cfg, bool create);

// 2 config, 3 missing/stale artifact, 4 numerical failure, 1 otherwise.
int exit_code(ErrorKind kind);

using LogFn = std::function<void(const std::string&)>;

class Pipeline {
public:
    Pipeline(RunConfig cfg, std::filesystem::path run_dir, LogFn log = {});

    void gen();
    void train();
    void calibrate();
    void score();
    void attribute();
    void report();
    void audit();  // all of the above in order
    void experiment_regularization();

    const std::filesystem::path& run_dir() const { return root_; }
    const RunConfig& config() const { return cfg_; }

    // "<arch>-r<k>" for every trained model.
    std::vector<std::string> model_keys() const;
    std::string deepest_arch() const;
    std::string shallowest_arch() const;

    std::string stage_hash(const std::string& stage) const;

private:
    bool up_to_date(const std::string& stage) const;
    void require(const std::string& stage) const;
    void write_manifest(const std::string& stage, double seconds) const;
    void say(const std::string& msg) const;

    RunConfig cfg_;
    std::filesystem::path root_;
    LogFn log_;
};

} // namespace expecta
