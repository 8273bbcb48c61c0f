#include "expecta/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

#include "expecta/attribution.hpp"
#include "expecta/detector.hpp"
#include "expecta/rng.hpp"
#include "expecta/svg.hpp"

namespace expecta {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

RunConfig RunConfig::for_profile(const std::string& name) {
    RunConfig c;
    c.profile = name;
    if (name == "paper") {
        c.canvas = {128, 128};
        c.n_collected = 50000;
        c.n_validation = 10000;
        c.n_test = 10000;
        c.n_attr = 512;
        c.archs = {"VGG05", "VGG07", "VGG09", "VGG13"};
        c.repeats = 5;
    } else if (name == "desk") {
        c.canvas = {64, 64};
        c.n_collected = 10000;
        c.n_validation = 2000;
        c.n_test = 2000;
        c.n_attr = 512;
        c.archs = {"VGG05", "VGG13"};
        c.repeats = 3;
    } else if (name == "ci") {
        c.canvas = {32, 32};
        c.n_collected = 1000;
        c.n_validation = 200;
        c.n_test = 200;
        c.n_attr = 64;
        c.archs = {"VGG05"};
        c.repeats = 1;
    } else {
        fail(ErrorKind::config, "unknown profile '" + name + "' (expected paper, desk or ci)");
    }
    c.expectation = ExpectationSpec::for_canvas(c.canvas);
    c.bias = BiasSpec::for_canvas(c.canvas);
    return c;
}

void RunConfig::validate() const {
    if (!(expectation.canvas == canvas))
        fail(ErrorKind::config, "expectation.canvas must equal canvas");
    try {
        expectation.validate();
        bias.validate(canvas);
    } catch (const Error& e) {
        fail(ErrorKind::config, e.what());
    }
    if (n_collected == 0 || n_validation == 0 || n_test == 0 || n_attr == 0)
        fail(ErrorKind::config, "dataset sizes must be positive");
    if (archs.empty()) fail(ErrorKind::config, "at least one architecture is required");
    for (const auto& a : archs) {
        auto arch = ArchConfig::preset(a, canvas);
        arch.batch_norm = batch_norm;
        arch.dropout = dropout;
        arch.validate();
    }
    train.validate();
    for (double t : temperature_grid)
        if (!(t > 0)) fail(ErrorKind::config, "temperatures must be positive");
    if (!(target_score > 0 && target_score <= 1)) fail(ErrorKind::config, "target_score must lie in (0, 1]");
    if (background_samples < 1) fail(ErrorKind::config, "background_samples must be >= 1");
    if (repeats < 1) fail(ErrorKind::config, "repeats must be >= 1");
    if (!(regularization_dropout >= 0 && regularization_dropout < 1))
        fail(ErrorKind::config, "regularization_dropout must lie in [0, 1)");
}

void to_json(json& j, const RunConfig& c) {
    j = json{{"profile", c.profile},
             {"seed", c.seed},
             {"canvas", c.canvas},
             {"expectation", c.expectation},
             {"bias", c.bias},
             {"n_collected", c.n_collected},
             {"n_validation", c.n_validation},
             {"n_test", c.n_test},
             {"n_attr", c.n_attr},
             {"archs", c.archs},
             {"batch_norm", c.batch_norm},
             {"dropout", c.dropout},
             {"train", c.train},
             {"temperature_grid", c.temperature_grid},
             {"target_score", c.target_score},
             {"background_samples", c.background_samples},
             {"repeats", c.repeats},
             {"regularization_dropout", c.regularization_dropout},
             {"out_dir", c.out_dir}};
}

void from_json(const json& j, RunConfig& c) {
    if (j.contains("canvas")) {
        const auto canvas = j.at("canvas").get<Canvas>();
        if (!(canvas == c.canvas)) {
            c.canvas = canvas;
            c.expectation = ExpectationSpec::for_canvas(canvas);
            c.bias = BiasSpec::for_canvas(canvas);
        }
    }
    if (j.contains("expectation")) {
        json e = c.expectation;
        e.merge_patch(j.at("expectation"));
        c.expectation = e.get<ExpectationSpec>();
    }
    if (j.contains("bias")) {
        json b = c.bias;
        b.merge_patch(j.at("bias"));
        c.bias = b.get<BiasSpec>();
    }
    if (j.contains("train")) {
        json t = c.train;
        t.merge_patch(j.at("train"));
        c.train = t.get<TrainConfig>();
    }
    c.profile = j.value("profile", c.profile);
    c.seed = j.value("seed", c.seed);
    c.n_collected = j.value("n_collected", c.n_collected);
    c.n_validation = j.value("n_validation", c.n_validation);
    c.n_test = j.value("n_test", c.n_test);
    c.n_attr = j.value("n_attr", c.n_attr);
    c.archs = j.value("archs", c.archs);
    c.batch_norm = j.value("batch_norm", c.batch_norm);
    c.dropout = j.value("dropout", c.dropout);
    c.temperature_grid = j.value("temperature_grid", c.temperature_grid);
    c.target_score = j.value("target_score", c.target_score);
    c.background_samples = j.value("background_samples", c.background_samples);
    c.repeats = j.value("repeats", c.repeats);
    c.regularization_dropout = j.value("regularization_dropout", c.regularization_dropout);
    c.out_dir = j.value("out_dir", c.out_dir);
}

namespace {

json read_json(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(ErrorKind::missing_artifact, "cannot open " + path.string());
    try {
        return json::parse(is);
    } catch (const json::exception& e) {
        fail(ErrorKind::format, path.string() + ": " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    os << text;
    if (!os) fail(ErrorKind::format, "failed writing " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string hex(std::uint64_t h) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

// "a.b.c=value"; value is parsed as JSON, falling back to a plain string.
void apply_override(json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        fail(ErrorKind::config, "--set expects path=value, got '" + assignment + "'");
    const std::string path = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    json* node = &j;
    std::size_t start = 0;
    for (;;) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot - start);
        if (key.empty()) fail(ErrorKind::config, "bad --set path '" + path + "'");
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

} // namespace

RunConfig resolve_config(const std::optional<fs::path>& file, const std::optional<std::string>& profile,
                         const std::optional<std::uint64_t>& seed, const std::optional<std::string>& out_dir,
                         const std::vector<std::string>& overrides) {
    json user = json::object();
    if (file) {
        std::ifstream is(*file, std::ios::binary);
        if (!is) fail(ErrorKind::config, "cannot open config file " + file->string());
        try {
            user = json::parse(is);
        } catch (const json::exception& e) {
            fail(ErrorKind::config, file->string() + ": " + e.what());
        }
        if (!user.is_object()) fail(ErrorKind::config, file->string() + ": top level must be an object");
    }
    for (const auto& o : overrides) apply_override(user, o);
    std::string base = profile.value_or(user.value("profile", std::string("desk")));
    RunConfig cfg = RunConfig::for_profile(base);
    try {
        user.erase("profile");
        from_json(user, cfg);
    } catch (const json::exception& e) {
        fail(ErrorKind::config, std::string("config: ") + e.what());
    }
    cfg.profile = base;
    if (seed) cfg.seed = *seed;
    if (out_dir) cfg.out_dir = *out_dir;
    // --set wins over --seed/--out when both name the same field
    for (const auto& o : overrides) {
        if (o.starts_with("seed=")) cfg.seed = std::stoull(o.substr(5));
        if (o.starts_with("out_dir=")) cfg.out_dir = o.substr(8);
    }
    cfg.validate();
    return cfg;
}

std::string config_hash(const RunConfig& cfg) {
    json j = cfg;
    j.erase("out_dir");
    return hex(fnv1a64(j.dump()));
}

fs::path locate_run_dir(const RunConfig& cfg, bool create) {
    const std::string suffix = "-" + config_hash(cfg);
    const fs::path out(cfg.out_dir);
    std::vector<fs::path> found;
    if (fs::is_directory(out))
        for (const auto& e : fs::directory_iterator(out))
            if (e.is_directory() && e.path().filename().string().ends_with(suffix)) found.push_back(e.path());
    if (!found.empty()) return *std::max_element(found.begin(), found.end());
    if (!create) fail(ErrorKind::missing_artifact, "no run directory for this configuration under " + out.string() +
                                                       "; run `expecta gen` first");
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream name;
    name << std::put_time(&tm, "%Y%m%dT%H%M%SZ") << suffix;
    fs::create_directories(out / name.str());
    return out / name.str();
}

int exit_code(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::config:
    case ErrorKind::specification: return 2;
    case ErrorKind::missing_artifact:
    case ErrorKind::stale_artifact: return 3;
    case ErrorKind::training_failure:
    case ErrorKind::undefined_overlap: return 4;
    default: return 1;
    }
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

const std::vector<std::string> kStages{"gen", "train", "calibrate", "score", "attribute", "report"};

json stage_config(const RunConfig& c, const std::string& stage) {
    if (stage == "gen")
        return {{"seed", c.seed},         {"canvas", c.canvas},         {"expectation", c.expectation},
                {"bias", c.bias},         {"n_collected", c.n_collected}, {"n_validation", c.n_validation},
                {"n_test", c.n_test}};
    if (stage == "train")
        return {{"archs", c.archs},
                {"batch_norm", c.batch_norm},
                {"dropout", c.dropout},
                {"train", c.train},
                {"repeats", c.repeats}};
    if (stage == "calibrate") return {{"temperature_grid", c.temperature_grid}, {"target_score", c.target_score}};
    if (stage == "score") return json::object();
    if (stage == "attribute") return {{"n_attr", c.n_attr}, {"background_samples", c.background_samples}};
    if (stage == "report") return json::object();
    fail(ErrorKind::config, "unknown stage " + stage);
}

ArchConfig arch_for(const RunConfig& c, const std::string& name) {
    auto a = ArchConfig::preset(name, c.canvas);
    a.batch_norm = c.batch_norm;
    a.dropout = c.dropout;
    return a;
}

std::vector<int> classes_of(const RunConfig& c) { return c.expectation.classes; }

LogitTable logits_from_json(const json& j) {
    LogitTable t;
    t.classes = j.at("classes").get<std::size_t>();
    t.values = j.at("values").get<std::vector<double>>();
    return t;
}

json logits_to_json(const LogitTable& t) { return {{"classes", t.classes}, {"values", t.values}}; }

double mean_of(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::vector<ScoreRecord> records_from_logits(const LogitTable& logits, const Dataset& test, double t,
                                             const std::vector<bool>& familiar) {
    std::vector<ScoreRecord> out(logits.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const auto row = logits.row(i);
        out[i] = {test.annotations[i], {row.begin(), row.end()}, t, max_softmax(row, t), familiar[i]};
    }
    return out;
}

struct LabelHistogram {
    std::vector<double> x, y;
};

LabelHistogram histogram(const BinnedSupport& s) {
    LabelHistogram h;
    const auto p = s.proportions();
    for (std::size_t b = 0; b < p.size(); ++b) {
        h.x.push_back(s.origin() + s.bin_width() * static_cast<double>(b));
        h.y.push_back(p[b]);
    }
    return h;
}

std::string label_name(int j) { return "y" + std::to_string(j); }

struct Stopwatch {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

} // namespace

Pipeline::Pipeline(RunConfig cfg, fs::path run_dir, LogFn log)
    : cfg_(std::move(cfg)), root_(std::move(run_dir)), log_(std::move(log)) {
    cfg_.validate();
}

void Pipeline::say(const std::string& msg) const {
    if (log_) log_(msg);
}

std::string Pipeline::stage_hash(const std::string& stage) const {
    const auto it = std::find(kStages.begin(), kStages.end(), stage);
    if (it == kStages.end()) fail(ErrorKind::config, "unknown stage " + stage);
    const std::string upstream = it == kStages.begin() ? std::string() : stage_hash(*(it - 1));
    return hex(fnv1a64(upstream + "|" + stage + "|" + stage_config(cfg_, stage).dump()));
}

bool Pipeline::up_to_date(const std::string& stage) const {
    const auto path = root_ / "manifests" / (stage + ".json");
    if (!fs::exists(path)) return false;
    return read_json(path).value("hash", std::string()) == stage_hash(stage);
}

void Pipeline::require(const std::string& stage) const {
    const auto path = root_ / "manifests" / (stage + ".json");
    if (!fs::exists(path))
        fail(ErrorKind::missing_artifact, "missing " + stage + " artifacts in " + root_.string() +
                                              "; run `expecta " + stage + "` first");
    if (read_json(path).value("hash", std::string()) != stage_hash(stage))
        fail(ErrorKind::stale_artifact, stage + " artifacts in " + root_.string() +
                                            " were produced with a different configuration; rerun `expecta " +
                                            stage + "`");
}

void Pipeline::write_manifest(const std::string& stage, double seconds) const {
    const auto it = std::find(kStages.begin(), kStages.end(), stage);
    json m{{"stage", stage},
           {"seconds", seconds},
           {"hash", stage_hash(stage)},
           {"upstream", it == kStages.begin() ? json(nullptr) : json(stage_hash(*(it - 1)))},
           {"seed", cfg_.seed},
           {"config", stage_config(cfg_, stage)}};
    write_json(root_ / "manifests" / (stage + ".json"), m);
}

std::vector<std::string> Pipeline::model_keys() const {
    std::vector<std::string> keys;
    for (const auto& a : cfg_.archs)
        for (int r = 0; r < cfg_.repeats; ++r) keys.push_back(a + "-r" + std::to_string(r));
    return keys;
}

std::string Pipeline::deepest_arch() const {
    return *std::max_element(cfg_.archs.begin(), cfg_.archs.end(), [&](const auto& a, const auto& b) {
        return arch_for(cfg_, a).layer_count() < arch_for(cfg_, b).layer_count();
    });
}

std::string Pipeline::shallowest_arch() const {
    return *std::min_element(cfg_.archs.begin(), cfg_.archs.end(), [&](const auto& a, const auto& b) {
        return arch_for(cfg_, a).layer_count() < arch_for(cfg_, b).layer_count();
    });
}

void Pipeline::gen() {
    if (up_to_date("gen")) return say("gen: up to date");
    const Stopwatch timer;
    const auto dir = root_ / "datasets";
    say("gen: collected set (" + std::to_string(cfg_.n_collected) + ")");
    const auto collected = gen_collected(cfg_.bias, cfg_.canvas, cfg_.n_collected, derive_seed(cfg_.seed, "gen.collected"));
    save(collected, dir / "collected");
    const auto validation = gen_collected(cfg_.bias, cfg_.canvas, cfg_.n_validation,
                                          derive_seed(cfg_.seed, "gen.validation"), "validation");
    save(validation, dir / "validation");
    say("gen: test set (" + std::to_string(cfg_.n_test) + ")");
    save(gen_test(cfg_.expectation, cfg_.n_test, derive_seed(cfg_.seed, "gen.test")), dir / "test");

    // P_S: what a labeler can recover from the unlabeled collected images
    const auto labels = auto_label_all(collected);
    const auto classes = classes_of(cfg_);
    const auto support = LabelDistribution::from_annotations(labels, classes);
    write_json(dir / "collected_support.json", support.to_json());
    write_text(dir / "collected_support.csv", support.to_csv());
    write_manifest("gen", timer.seconds());
}

void Pipeline::train() {
    require("gen");
    if (up_to_date("train")) return say("train: up to date");
    const Stopwatch timer;
    const auto collected = load(root_ / "datasets" / "collected");
    const auto validation = load(root_ / "datasets" / "validation");
    const auto test = load(root_ / "datasets" / "test");
    const std::string hash = stage_hash("train");
    for (const auto& name : cfg_.archs) {
        for (int r = 0; r < cfg_.repeats; ++r) {
            const std::string key = name + "-r" + std::to_string(r);
            const auto dir = root_ / "checkpoints" / key;
            if (fs::exists(dir / "summary.json") && read_json(dir / "summary.json").value("hash", "") == hash) {
                say("train: " + key + " up to date");
                continue;
            }
            TrainConfig tc = cfg_.train;
            tc.seed = derive_seed(cfg_.seed, "train." + name, static_cast<std::uint64_t>(r));
            say("train: " + key);
            const Stopwatch model_timer;
            const auto result = expecta::train(collected, arch_for(cfg_, name), tc, &validation,
                                               [&](int epoch, std::size_t b, std::size_t n, double loss) {
                                                   if (b + 1 == n)
                                                       say("train: " + key + " epoch " + std::to_string(epoch) +
                                                           " last batch loss " + std::to_string(loss));
                                               });
            save_checkpoint(result.model, dir);
            write_text(dir / "history.csv", history_csv(result.history));
            const double val_acc = result.history[static_cast<std::size_t>(result.best_epoch - 1)].val_accuracy;
            write_json(dir / "summary.json", {{"hash", hash},
                                              {"arch", name},
                                              {"repeat", r},
                                              {"best_epoch", result.best_epoch},
                                              {"val_accuracy", val_acc},
                                              {"test_accuracy", evaluate(result.model, test)},
                                              {"train_seconds", model_timer.seconds()}});
        }
    }
    write_manifest("train", timer.seconds());
}

void Pipeline::calibrate() {
    require("train");
    if (up_to_date("calibrate")) return say("calibrate: up to date");
    const Stopwatch timer;
    const auto test = load(root_ / "datasets" / "test");
    for (const auto& key : model_keys()) {
        const auto name = key.substr(0, key.find('-'));
        const auto arch = arch_for(cfg_, name);
        const auto model = load_checkpoint(root_ / "checkpoints" / key, &arch);
        say("calibrate: " + key);
        const auto logits = forward(model, test);
        const auto cal = calibrate_temperature(logits, cfg_.target_score, cfg_.temperature_grid);
        const auto dir = root_ / "scores" / key;
        write_json(dir / "logits.json", logits_to_json(logits));
        write_json(dir / "calibration.json", cal);
    }
    write_manifest("calibrate", timer.seconds());
}

void Pipeline::score() {
    require("calibrate");
    if (up_to_date("score")) return say("score: up to date");
    const Stopwatch timer;
    const auto test = load(root_ / "datasets" / "test");
    const auto support = LabelDistribution::from_json(read_json(root_ / "datasets" / "collected_support.json"));
    const auto part = partition_outliers(test.annotations, support);
    std::vector<int> flags(part.is_familiar.begin(), part.is_familiar.end());
    write_json(root_ / "scores" / "partition.json", {{"rule", part.rule},
                                                     {"familiar", part.familiar.size()},
                                                     {"outliers", part.outliers.size()},
                                                     {"is_familiar", flags}});
    for (const auto& key : model_keys()) {
        const auto dir = root_ / "scores" / key;
        const auto logits = logits_from_json(read_json(dir / "logits.json"));
        const auto cal = read_json(dir / "calibration.json").get<CalibrationResult>();
        const auto at_star = records_from_logits(logits, test, cal.t_star, part.is_familiar);
        const auto at_one = records_from_logits(logits, test, 1.0, part.is_familiar);
        write_text(dir / "scores.csv", scores_csv(at_star));
        write_text(dir / "scores_T1.csv", scores_csv(at_one));
        json a{{"t_star", cal.t_star}, {"auroc_t1", nullptr}, {"auroc_tstar", nullptr}};
        if (!part.familiar.empty() && !part.outliers.empty()) {
            a["auroc_t1"] = auroc(scores_from_logits(logits, 1.0), part.is_familiar);
            a["auroc_tstar"] = auroc(scores_from_logits(logits, cal.t_star), part.is_familiar);
        }
        write_json(dir / "auroc.json", a);
        say("score: " + key + " T*=" + std::to_string(cal.t_star));
    }
    write_manifest("score", timer.seconds());
}

void Pipeline::attribute() {
    require("score");
    if (up_to_date("attribute")) return say("attribute: up to date");
    const Stopwatch timer;
    const auto test = load(root_ / "datasets" / "test");
    const auto support = LabelDistribution::from_json(read_json(root_ / "datasets" / "collected_support.json"));
    const auto flags = read_json(root_ / "scores" / "partition.json").at("is_familiar").get<std::vector<int>>();
    const auto classes = classes_of(cfg_);
    const auto subset = stratified_subset(test.annotations, cfg_.n_attr, derive_seed(cfg_.seed, "attribute.subset"));
    std::vector<Annotation> anns;
    for (auto i : subset) anns.push_back(test.annotations[i]);

    const auto expected = LabelDistribution::from_annotations(anns, classes);
    write_json(root_ / "attributions" / "expected_support.json", expected.to_json());
    write_text(root_ / "attributions" / "expected_support.csv", expected.to_csv());

    MaskingPolicy policy;
    policy.background_samples = cfg_.background_samples;
    policy.background = cfg_.expectation;
    const std::string hash = stage_hash("attribute");

    std::vector<OverlapRow> rows{audit_overlap(expected, support, classes, "P_T")};
    for (const auto& name : cfg_.archs) {
        const std::string key = name + "-r0";
        const auto dir = root_ / "attributions" / name;
        const double t_star = read_json(root_ / "scores" / key / "calibration.json").at("t_star").get<double>();
        const std::vector<double> temps{1.0, t_star};
        const std::vector<std::string> tags{"T1", "Tstar"};

        if (!(fs::exists(dir / "summary.json") && read_json(dir / "summary.json").value("hash", "") == hash)) {
            const auto arch = arch_for(cfg_, name);
            const auto model = load_checkpoint(root_ / "checkpoints" / key, &arch);
            const Stopwatch arch_timer;
            say("attribute: " + name + " (" + std::to_string(anns.size()) + " samples x " +
                std::to_string(kCoalitions) + " coalitions x " + std::to_string(policy.background_samples) +
                " draws)");
            auto records = attribute_testset(model, temps, anns, policy, derive_seed(cfg_.seed, "attribute"));
            json summary{{"hash", hash}, {"arch", name}, {"t_star", t_star}, {"per_T", json::array()}};
            for (std::size_t t = 0; t < temps.size(); ++t) {
                double max_err = 0, fam = 0, out = 0;
                std::size_t nf = 0, no = 0;
                for (std::size_t k = 0; k < records[t].size(); ++k) {
                    auto& r = records[t][k];
                    r.index = subset[k];
                    max_err = std::max(max_err, std::abs(r.score - r.total()));
                    const double s = r.total() - r.phi0;
                    if (flags[r.index]) fam += s, ++nf;
                    else out += s, ++no;
                }
                write_text(dir / ("attributions_" + tags[t] + ".csv"), attributions_csv(records[t]));
                const auto rep = marginal_representation(records[t], classes);
                write_json(dir / ("representation_" + tags[t] + ".json"), rep.to_json());
                write_text(dir / ("representation_" + tags[t] + ".csv"), rep.to_csv());
                json incidence = json::array();
                for (const auto& row : nonnegative_incidence(records[t], classes))
                    incidence.push_back(std::vector<double>(row.begin(), row.end()));
                json empty = json::object();
                for (int cls : classes)
                    for (int j : rep.empty_labels(cls)) empty[std::to_string(cls)].push_back(label_name(j));
                summary["per_T"].push_back({{"T", temps[t]},
                                            {"additivity_max_error", max_err},
                                            {"mean_attribution_familiar", nf ? fam / nf : 0.0},
                                            {"mean_attribution_outlier", no ? out / no : 0.0},
                                            {"nonnegative_incidence", incidence},
                                            {"empty_labels", empty}});
            }
            summary["seconds"] = arch_timer.seconds();
            write_json(dir / "summary.json", summary);
        } else {
            say("attribute: " + name + " up to date");
        }
        for (std::size_t t = 0; t < temps.size(); ++t) {
            const auto rep =
                LabelDistribution::from_json(read_json(dir / ("representation_" + tags[t] + ".json")));
            rows.push_back(audit_overlap(rep, support, classes, "P+_T", name, temps[t]));
        }
    }
    write_json(root_ / "attributions" / "overlap_table.json", overlap_table_json(rows));
    write_text(root_ / "attributions" / "overlap_table.csv", overlap_table_csv(rows));
    write_manifest("attribute", timer.seconds());
}

void Pipeline::report() {
    require("attribute");
    const Stopwatch timer;
    const auto dir = root_ / "report";
    const auto classes = classes_of(cfg_);
    const auto part = read_json(root_ / "scores" / "partition.json");
    const auto table = read_json(root_ / "attributions" / "overlap_table.json");
    const std::string deep = deepest_arch(), shallow = shallowest_arch();

    json archs = json::object();
    std::map<std::string, double> auroc_star, auroc_one;
    for (const auto& name : cfg_.archs) {
        json reps = json::array();
        std::vector<double> a1, as;
        for (int r = 0; r < cfg_.repeats; ++r) {
            const std::string key = name + "-r" + std::to_string(r);
            const auto tr = read_json(root_ / "checkpoints" / key / "summary.json");
            const auto sc = read_json(root_ / "scores" / key / "auroc.json");
            const auto cal = read_json(root_ / "scores" / key / "calibration.json").get<CalibrationResult>();
            const auto& r1 = cal.row_at(1.0);
            const auto& rs = cal.row_at(cal.t_star);
            reps.push_back({{"repeat", r},
                            {"best_epoch", tr.at("best_epoch")},
                            {"val_accuracy", tr.at("val_accuracy")},
                            {"test_accuracy", tr.at("test_accuracy")},
                            {"t_star", cal.t_star},
                            {"score_mean_t1", r1.mean},
                            {"score_var_t1", r1.variance},
                            {"score_mean_tstar", rs.mean},
                            {"score_var_tstar", rs.variance},
                            {"auroc_t1", sc.at("auroc_t1")},
                            {"auroc_tstar", sc.at("auroc_tstar")}});
            if (sc.at("auroc_t1").is_number()) a1.push_back(sc.at("auroc_t1").get<double>());
            if (sc.at("auroc_tstar").is_number()) as.push_back(sc.at("auroc_tstar").get<double>());
        }
        auroc_one[name] = mean_of(a1);
        auroc_star[name] = mean_of(as);
        json overlap = json::object();
        for (const auto& row : table)
            if (row.at("arch") == name)
                overlap[row.at("T").get<double>() == 1.0 ? "t1" : "tstar"] = row.at("mean");
        const auto attr = read_json(root_ / "attributions" / name / "summary.json");
        double max_err = 0;
        for (const auto& p : attr.at("per_T")) max_err = std::max(max_err, p.at("additivity_max_error").get<double>());
        archs[name] = {{"layers", arch_for(cfg_, name).layer_count()},
                       {"repeats", reps},
                       {"auroc_t1", auroc_one[name]},
                       {"auroc_tstar", auroc_star[name]},
                       {"mean_overlap_t1", overlap.value("t1", 0.0)},
                       {"mean_overlap_tstar", overlap.value("tstar", 0.0)},
                       {"additivity_max_error", max_err}};
    }
    double expected_overlap = 0;
    for (const auto& row : table)
        if (row.at("distribution") == "P_T") expected_overlap = row.at("mean").get<double>();

    const json rep{{"profile", cfg_.profile},
                   {"seed", cfg_.seed},
                   {"config_hash", config_hash(cfg_)},
                   {"deepest_arch", deep},
                   {"shallowest_arch", shallow},
                   {"auroc", auroc_star[deep]},
                   {"auroc_t1", auroc_one[deep]},
                   {"t_star", archs[deep]["repeats"][0]["t_star"]},
                   {"mean_overlap_expected", expected_overlap},
                   {"mean_overlap_estimated", archs[deep]["mean_overlap_tstar"]},
                   {"familiar", part.at("familiar")},
                   {"outliers", part.at("outliers")},
                   {"archs", archs}};
    write_json(dir / "report.json", rep);
    fs::create_directories(dir);
    fs::copy_file(root_ / "attributions" / "overlap_table.json", dir / "overlap_table.json",
                  fs::copy_options::overwrite_existing);
    fs::copy_file(root_ / "attributions" / "overlap_table.csv", dir / "overlap_table.csv",
                  fs::copy_options::overwrite_existing);

    // Figures
    const auto support = LabelDistribution::from_json(read_json(root_ / "datasets" / "collected_support.json"));
    const auto expected = LabelDistribution::from_json(read_json(root_ / "attributions" / "expected_support.json"));
    const auto estimated =
        LabelDistribution::from_json(read_json(root_ / "attributions" / deep / "representation_Tstar.json"));

    {
        std::vector<svg::Panel> panels;
        for (int cls : classes)
            for (int j : kLabels) {
                const auto e = histogram(expected.at(cls, j)), s = histogram(support.at(cls, j));
                panels.push_back({"class " + std::to_string(cls) + ", " + label_name(j), label_name(j), "proportion",
                                  {{"P_T", e.x, e.y, svg::palette(0)}, {"P_S", s.x, s.y, svg::palette(1)}}});
            }
        write_text(dir / "fig_expectation_vs_collected.svg", svg::figure(panels, svg::PanelKind::histogram, 5));
    }
    {
        const auto logits = logits_from_json(read_json(root_ / "scores" / (deep + "-r0") / "logits.json"));
        const auto flags = part.at("is_familiar").get<std::vector<int>>();
        const double t_star = rep.at("t_star").get<double>();
        std::vector<svg::Panel> panels;
        for (double t : {1.0, t_star, 2.0 * t_star}) {
            const auto s = scores_from_logits(logits, t);
            constexpr int kBins = 25;
            std::vector<double> x(kBins), fam(kBins, 0), out(kBins, 0);
            for (int b = 0; b < kBins; ++b) x[static_cast<std::size_t>(b)] = 0.5 + 0.5 * b / kBins;
            for (std::size_t i = 0; i < s.size(); ++i) {
                const int b = std::clamp(static_cast<int>((s[i] - 0.5) / 0.5 * kBins), 0, kBins - 1);
                (flags[i] ? fam : out)[static_cast<std::size_t>(b)] += 1;
            }
            std::ostringstream title;
            title << deep << ", T = " << t;
            svg::Panel p{title.str(), "max-softmax score", "count",
                         {{"familiar", x, fam, svg::palette(2)}, {"outlier", x, out, svg::palette(1)}}};
            p.bar_width = 0.5 / kBins;
            panels.push_back(p);
        }
        write_text(dir / "fig_scores_vs_temperature.svg", svg::figure(panels, svg::PanelKind::histogram, 3));
    }
    {
        std::vector<double> x, y1, ys;
        for (std::size_t k = 0; k < cfg_.archs.size(); ++k) {
            x.push_back(static_cast<double>(k));
            y1.push_back(auroc_one[cfg_.archs[k]]);
            ys.push_back(auroc_star[cfg_.archs[k]]);
        }
        svg::Panel p{"AUROC per architecture", "", "AUROC", {{"T = 1", x, y1, ""}, {"T*", x, ys, ""}}};
        write_text(dir / "fig_auroc.svg", svg::figure({p}, svg::PanelKind::bars, 1, cfg_.archs));
    }
    {
        const auto attr = read_json(root_ / "attributions" / deep / "summary.json");
        const auto incidence = attr.at("per_T").at(1).at("nonnegative_incidence");
        std::vector<svg::Series> series;
        std::vector<double> x{0, 1, 2, 3, 4};
        for (std::size_t c = 0; c < classes.size(); ++c)
            series.push_back({"class " + std::to_string(classes[c]), x,
                              incidence.at(c).get<std::vector<double>>(), ""});
        svg::Panel p{"non-negative attribution incidence, " + deep + " at T*", "", "fraction", series};
        write_text(dir / "fig_nonnegative_attribution.svg",
                   svg::figure({p}, svg::PanelKind::bars, 1, {"y2", "y3", "y4", "y5", "y6"}));
    }
    {
        std::vector<svg::Panel> panels;
        for (int cls : classes)
            for (int j : kLabels) {
                const auto e = histogram(expected.at(cls, j)), s = histogram(support.at(cls, j)),
                           p = histogram(estimated.at(cls, j));
                panels.push_back({"class " + std::to_string(cls) + ", " + label_name(j), label_name(j), "proportion",
                                  {{"P_T", e.x, e.y, svg::palette(0)},
                                   {"P_S", s.x, s.y, svg::palette(1)},
                                   {"P+_T", p.x, p.y, svg::palette(2)}}});
            }
        write_text(dir / "fig_marginal_representation.svg", svg::figure(panels, svg::PanelKind::histogram, 5));
    }
    write_manifest("report", timer.seconds());
    say("report: " + (dir / "report.json").string());
}

void Pipeline::audit() {
    gen();
    train();
    calibrate();
    score();
    attribute();
    report();
}

void Pipeline::experiment_regularization() {
    require("gen");
    const auto collected = load(root_ / "datasets" / "collected");
    const auto validation = load(root_ / "datasets" / "validation");
    const auto test = load(root_ / "datasets" / "test");
    const auto support = LabelDistribution::from_json(read_json(root_ / "datasets" / "collected_support.json"));
    const auto part = partition_outliers(test.annotations, support);
    const auto dir = root_ / "regularization";

    struct Variant {
        std::string name;
        bool batch_norm;
        double dropout;
    };
    const std::vector<Variant> variants{
        {"vanilla", false, 0.0}, {"batch_norm", true, 0.0}, {"dropout", false, cfg_.regularization_dropout}};

    std::ostringstream csv;
    csv.precision(10);
    csv << "arch,variant,test_acc,val_acc,auroc,t_star\n";
    std::vector<svg::Series> acc_series, auroc_series;
    for (std::size_t v = 0; v < variants.size(); ++v) {
        acc_series.push_back({variants[v].name, {}, {}, ""});
        auroc_series.push_back({variants[v].name, {}, {}, ""});
    }
    for (std::size_t a = 0; a < cfg_.archs.size(); ++a) {
        const auto& name = cfg_.archs[a];
        for (std::size_t v = 0; v < variants.size(); ++v) {
            const auto& var = variants[v];
            auto arch = ArchConfig::preset(name, cfg_.canvas);
            arch.batch_norm = var.batch_norm;
            arch.dropout = var.dropout;
            TrainConfig tc = cfg_.train;
            tc.seed = derive_seed(cfg_.seed, "regularization." + name);
            const std::string hash =
                hex(fnv1a64(stage_hash("gen") + json(arch).dump() + json(tc).dump() +
                            json(cfg_.temperature_grid).dump() + std::to_string(cfg_.target_score)));
            const auto rdir = dir / (name + "-" + var.name);
            json result;
            if (fs::exists(rdir / "result.json") && read_json(rdir / "result.json").value("hash", "") == hash) {
                result = read_json(rdir / "result.json");
                say("experiment-regularization: " + name + " " + var.name + " up to date");
            } else {
                say("experiment-regularization: " + name + " " + var.name);
                const auto trained = expecta::train(collected, arch, tc, &validation);
                const auto logits = forward(trained.model, test);
                const auto cal = calibrate_temperature(logits, cfg_.target_score, cfg_.temperature_grid);
                json auc = nullptr;
                if (!part.familiar.empty() && !part.outliers.empty())
                    auc = auroc(scores_from_logits(logits, cal.t_star), part.is_familiar);
                result = {{"hash", hash},
                          {"test_acc", accuracy(logits, test.classes)},
                          {"val_acc", evaluate(trained.model, validation)},
                          {"auroc", auc},
                          {"t_star", cal.t_star}};
                write_json(rdir / "result.json", result);
            }
            csv << name << ',' << var.name << ',' << result.at("test_acc").get<double>() << ','
                << result.at("val_acc").get<double>() << ',';
            if (result.at("auroc").is_number()) csv << result.at("auroc").get<double>();
            csv << ',' << result.at("t_star").get<double>() << '\n';
            acc_series[v].x.push_back(static_cast<double>(a));
            acc_series[v].y.push_back(result.at("test_acc").get<double>());
            auroc_series[v].x.push_back(static_cast<double>(a));
            auroc_series[v].y.push_back(result.at("auroc").is_number() ? result.at("auroc").get<double>() : 0.0);
        }
    }
    write_text(root_ / "report" / "regularization.csv", csv.str());
    write_text(root_ / "report" / "fig_regularization.svg",
               svg::figure({{"test accuracy", "", "accuracy", acc_series}, {"AUROC at T*", "", "AUROC", auroc_series}},
                           svg::PanelKind::bars, 2, cfg_.archs));
}

} // namespace expecta
