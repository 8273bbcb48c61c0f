// expecta: audit sample representation of an image dataset against a declared
// expectation over its annotations.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "expecta/pipeline.hpp"

namespace {

const std::vector<std::string> kCommands{"gen",   "train",  "calibrate", "score", "attribute",
                                         "audit", "report", "experiment-regularization"};

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Sample-representation audit of shape datasets"};
    app.require_subcommand(1);

    std::string config_path, profile, out_dir, run_dir;
    std::uint64_t seed = 0;
    std::vector<std::string> overrides;
    bool quiet = false;

    for (const auto& name : kCommands) {
        auto* sub = app.add_subcommand(name);
        sub->add_option("--config", config_path, "JSON run configuration");
        sub->add_option("--profile", profile, "paper, desk or ci")->check(CLI::IsMember({"paper", "desk", "ci"}));
        sub->add_option("--seed", seed, "master seed");
        sub->add_option("--out", out_dir, "parent directory of run directories");
        sub->add_option("--run", run_dir, "use this run directory instead of locating one");
        sub->add_option("--set", overrides, "override a config field, e.g. train.epochs=3");
        sub->add_flag("-q,--quiet", quiet, "no progress output");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    const auto* sub = app.get_subcommands().front();
    const std::string command = sub->get_name();
    try {
        auto opt = [&](const std::string& flag, const std::string& value) {
            return sub->count(flag) ? std::optional<std::string>(value) : std::nullopt;
        };
        const auto cfg = expecta::resolve_config(
            sub->count("--config") ? std::optional<std::filesystem::path>(config_path) : std::nullopt,
            opt("--profile", profile), sub->count("--seed") ? std::optional<std::uint64_t>(seed) : std::nullopt,
            opt("--out", out_dir), overrides);

        std::filesystem::path dir;
        if (sub->count("--run")) {
            dir = run_dir;
            if (!std::filesystem::is_directory(dir) && command != "gen" && command != "audit")
                expecta::fail(expecta::ErrorKind::missing_artifact,
                              "run directory " + dir.string() + " does not exist; run `expecta gen` first");
            std::filesystem::create_directories(dir);
        } else {
            dir = expecta::locate_run_dir(cfg, command == "gen" || command == "audit");
        }

        expecta::Pipeline pipeline(cfg, dir, [&](const std::string& msg) {
            if (!quiet) std::cerr << "[expecta] " << msg << '\n';
        });
        if (command == "gen") pipeline.gen();
        else if (command == "train") pipeline.train();
        else if (command == "calibrate") pipeline.calibrate();
        else if (command == "score") pipeline.score();
        else if (command == "attribute") pipeline.attribute();
        else if (command == "report") pipeline.report();
        else if (command == "audit") pipeline.audit();
        else pipeline.experiment_regularization();
        std::cout << dir.string() << '\n';
        return 0;
    } catch (const expecta::Error& e) {
        std::cerr << "expecta " << command << ": " << e.what() << '\n';
        return expecta::exit_code(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "expecta " << command << ": " << e.what() << '\n';
        return 1;
    }
}
