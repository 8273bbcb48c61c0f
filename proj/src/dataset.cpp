#include "expecta/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "expecta/error.hpp"

namespace expecta {

namespace fs = std::filesystem;

void BiasSpec::validate(const Canvas& canvas) const {
    if (size_range.lo <= 0 || size_range.lo > size_range.hi || size_range.hi > canvas.min_side())
        fail(ErrorKind::specification,
             "bias size range [" + std::to_string(size_range.lo) + ", " +
                 std::to_string(size_range.hi) + "] does not fit a " +
                 std::to_string(canvas.width) + "x" + std::to_string(canvas.height) + " canvas");
    if (brightness_range.lo < 1 || brightness_range.lo > brightness_range.hi ||
        brightness_range.hi > 255)
        fail(ErrorKind::specification, "bias brightness range must lie within [1, 255]");
    if (center_slack < 0) fail(ErrorKind::specification, "center slack must be non-negative");
    style.validate();
}

BiasSpec BiasSpec::for_canvas(Canvas canvas) {
    BiasSpec b;
    const double scale = canvas.min_side() / 128.0;
    b.size_range.lo = std::max(1, static_cast<int>(std::lround(90 * scale)));
    b.size_range.hi = std::max(b.size_range.lo, static_cast<int>(std::lround(120 * scale)));
    b.center_slack = static_cast<int>(std::lround(20 * scale));
    return b;
}

Annotation BiasSpec::sample(int cls, Canvas canvas, Rng& rng) const {
    Annotation a;
    a.y1 = cls;
    const int side = rng.uniform_int(size_range.lo, size_range.hi);
    auto corner = [&](int extent) {
        const int centred = (extent - side) / 2;
        const int lo = std::max(0, centred - center_slack);
        const int hi = std::min(extent - side, centred + center_slack);
        return rng.uniform_int(lo, hi);
    };
    a.y2 = corner(canvas.width);
    a.y3 = corner(canvas.height);
    a.y4 = a.y2 + side;
    a.y5 = a.y3 + side;
    a.y6 = rng.uniform_int(brightness_range.lo, brightness_range.hi);
    return a;
}

void to_json(nlohmann::json& j, const BiasSpec& b) {
    j = nlohmann::json{{"size_range", b.size_range},
                       {"brightness_range", b.brightness_range},
                       {"center_slack", b.center_slack},
                       {"style", b.style}};
}

void from_json(const nlohmann::json& j, BiasSpec& b) {
    if (j.contains("size_range")) b.size_range = j.at("size_range").get<IntRange>();
    if (j.contains("brightness_range"))
        b.brightness_range = j.at("brightness_range").get<IntRange>();
    b.center_slack = j.value("center_slack", b.center_slack);
    if (j.contains("style")) b.style = j.at("style").get<RenderStyle>();
}

ImageView Dataset::image(std::size_t i) const {
    const std::size_t n = meta.canvas.pixels();
    return ImageView(meta.canvas.width, meta.canvas.height,
                     std::span<const std::uint8_t>(pixels).subspan(i * n, n));
}

GrayImage Dataset::image_copy(std::size_t i) const {
    GrayImage img(meta.canvas.width, meta.canvas.height);
    const auto v = image(i);
    std::copy(v.pixels.begin(), v.pixels.end(), img.pixels.begin());
    return img;
}

void Dataset::validate() const {
    if (meta.n != classes.size())
        fail(ErrorKind::format, "meta declares " + std::to_string(meta.n) + " samples but " +
                                    std::to_string(classes.size()) + " labels are present");
    if (pixels.size() != meta.n * meta.canvas.pixels())
        fail(ErrorKind::format, "image payload holds " + std::to_string(pixels.size()) +
                                    " bytes, expected " +
                                    std::to_string(meta.n * meta.canvas.pixels()));
    if (meta.full_labels && annotations.size() != meta.n)
        fail(ErrorKind::format, "full labels declared but annotation count differs");
    for (std::size_t i = 0; i < annotations.size(); ++i)
        if (!annotations[i].valid_for(meta.canvas) || annotations[i].y1 != classes[i])
            fail(ErrorKind::format, "annotation " + std::to_string(i) + " " +
                                        to_string(annotations[i]) + " is invalid");
}

Dataset gen_collected(const BiasSpec& bias, Canvas canvas, std::size_t n, std::uint64_t seed,
                      std::string kind) {
    bias.validate(canvas);
    Dataset ds;
    ds.meta.kind = std::move(kind);
    ds.meta.canvas = canvas;
    ds.meta.seed = seed;
    ds.meta.style = bias.style;
    ds.meta.n = n;
    ds.pixels.assign(n * canvas.pixels(), 0);
    ds.classes.resize(n);
    ds.truth.resize(n);
    const std::size_t px = canvas.pixels();
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(derive_seed(seed, "collected.label", i));
        const Annotation a = bias.sample(static_cast<int>(i % 2), canvas, rng);
        render_into(a, bias.style, derive_seed(seed, "collected.render", i), canvas,
                    std::span<std::uint8_t>(ds.pixels).subspan(i * px, px));
        ds.classes[i] = a.y1;
        ds.truth[i] = a;
    }
    return ds;
}

Dataset gen_test(const ExpectationSpec& spec, std::size_t m, std::uint64_t seed) {
    spec.validate();
    Dataset ds;
    ds.meta.kind = "test";
    ds.meta.canvas = spec.canvas;
    ds.meta.seed = seed;
    ds.meta.style = RenderStyle::clean();
    ds.meta.n = m;
    ds.meta.full_labels = true;
    if (m == 0) return ds;
    ds.annotations = sample_expected(spec, derive_seed(seed, "test.label"), m);
    ds.pixels.assign(m * spec.canvas.pixels(), 0);
    ds.classes.resize(m);
    const std::size_t px = spec.canvas.pixels();
    for (std::size_t i = 0; i < m; ++i) {
        render_into(ds.annotations[i], RenderStyle::clean(), derive_seed(seed, "test.render", i),
                    spec.canvas, std::span<std::uint8_t>(ds.pixels).subspan(i * px, px));
        ds.classes[i] = ds.annotations[i].y1;
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Container I/O

namespace {

void write_labels_csv(const fs::path& path, const std::vector<int>& classes,
                      const std::vector<Annotation>& full) {
    std::ofstream os(path, std::ios::binary);
    if (!os) fail(ErrorKind::format, "cannot write " + path.string());
    os << "index,y1,y2,y3,y4,y5,y6\n";
    for (std::size_t i = 0; i < classes.size(); ++i) {
        os << i << ',' << classes[i];
        if (i < full.size()) {
            const auto& a = full[i];
            os << ',' << a.y2 << ',' << a.y3 << ',' << a.y4 << ',' << a.y5 << ',' << a.y6;
        } else {
            os << ",-1,-1,-1,-1,-1";
        }
        os << '\n';
    }
}

// Returns rows of 6 label values; -1 marks untrusted fields.
std::vector<std::array<int, 6>> read_labels_csv(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(ErrorKind::format, path.filename().string() + ": missing");
    std::string line;
    if (!std::getline(is, line) || line != "index,y1,y2,y3,y4,y5,y6")
        fail(ErrorKind::format, path.filename().string() + ": unexpected header");
    std::vector<std::array<int, 6>> rows;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string cell;
        std::array<int, 7> v{};
        int k = 0;
        while (std::getline(ls, cell, ',')) {
            if (k >= 7) break;
            try {
                v[k++] = std::stoi(cell);
            } catch (const std::exception&) {
                k = -1;
                break;
            }
        }
        if (k != 7 || v[0] != static_cast<int>(rows.size()))
            fail(ErrorKind::format,
                 path.filename().string() + ": malformed row at line " + std::to_string(lineno));
        rows.push_back({v[1], v[2], v[3], v[4], v[5], v[6]});
    }
    return rows;
}

} // namespace

void save(const Dataset& ds, const fs::path& dir) {
    ds.validate();
    fs::create_directories(dir);
    nlohmann::json meta{{"schema_version", ds.meta.schema_version},
                        {"kind", ds.meta.kind},
                        {"canvas", ds.meta.canvas},
                        {"seed", ds.meta.seed},
                        {"style", ds.meta.style},
                        {"n", ds.meta.n},
                        {"label_mask", ds.meta.full_labels
                                           ? nlohmann::json{"y1", "y2", "y3", "y4", "y5", "y6"}
                                           : nlohmann::json{"y1"}}};
    {
        std::ofstream os(dir / "meta.json", std::ios::binary);
        os << meta.dump(2) << '\n';
    }
    {
        std::ofstream os(dir / "images.u8", std::ios::binary);
        os.write(reinterpret_cast<const char*>(ds.pixels.data()),
                 static_cast<std::streamsize>(ds.pixels.size()));
        if (!os) fail(ErrorKind::format, "failed writing " + (dir / "images.u8").string());
    }
    write_labels_csv(dir / "labels.csv", ds.classes, ds.annotations);
    if (!ds.truth.empty()) write_labels_csv(dir / "truth.csv", ds.classes, ds.truth);
    else fs::remove(dir / "truth.csv");
}

Dataset load(const fs::path& dir) {
    Dataset ds;
    nlohmann::json meta;
    {
        std::ifstream is(dir / "meta.json", std::ios::binary);
        if (!is) fail(ErrorKind::format, "meta.json: missing in " + dir.string());
        try {
            is >> meta;
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::format, std::string("meta.json: ") + e.what());
        }
    }
    try {
        ds.meta.schema_version = meta.at("schema_version").get<int>();
        if (ds.meta.schema_version != kDatasetSchemaVersion)
            fail(ErrorKind::format, "meta.json: unsupported schema version " +
                                        std::to_string(ds.meta.schema_version) + " (expected " +
                                        std::to_string(kDatasetSchemaVersion) + ")");
        ds.meta.kind = meta.at("kind").get<std::string>();
        ds.meta.canvas = meta.at("canvas").get<Canvas>();
        ds.meta.seed = meta.at("seed").get<std::uint64_t>();
        ds.meta.style = meta.at("style");
        ds.meta.n = meta.at("n").get<std::size_t>();
        ds.meta.full_labels = meta.at("label_mask").size() == 6;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::format, std::string("meta.json: ") + e.what());
    }

    const std::size_t expected = ds.meta.n * ds.meta.canvas.pixels();
    {
        std::ifstream is(dir / "images.u8", std::ios::binary | std::ios::ate);
        if (!is) fail(ErrorKind::format, "images.u8: missing in " + dir.string());
        const auto actual = static_cast<std::size_t>(is.tellg());
        if (actual != expected)
            fail(ErrorKind::format, "images.u8: expected " + std::to_string(expected) +
                                        " bytes, found " + std::to_string(actual));
        is.seekg(0);
        ds.pixels.resize(expected);
        is.read(reinterpret_cast<char*>(ds.pixels.data()), static_cast<std::streamsize>(expected));
    }

    const auto rows = read_labels_csv(dir / "labels.csv");
    if (rows.size() != ds.meta.n)
        fail(ErrorKind::format, "labels.csv: expected " + std::to_string(ds.meta.n) +
                                    " rows, found " + std::to_string(rows.size()));
    for (const auto& r : rows) {
        ds.classes.push_back(r[0]);
        if (ds.meta.full_labels) ds.annotations.push_back({r[0], r[1], r[2], r[3], r[4], r[5]});
    }
    ds.validate();
    return ds;
}

std::vector<Annotation> load_truth(const fs::path& dir) {
    std::vector<Annotation> out;
    for (const auto& r : read_labels_csv(dir / "truth.csv"))
        out.push_back({r[0], r[1], r[2], r[3], r[4], r[5]});
    return out;
}

ImportResult import_drawing_corpus(const fs::path& path, const std::map<std::string, int>& class_map,
                                   Canvas canvas, int stroke_thickness) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(ErrorKind::format, "cannot open drawing corpus " + path.string());
    ImportResult res;
    auto& ds = res.dataset;
    ds.meta.kind = "imported";
    ds.meta.canvas = canvas;
    ds.meta.style = {{"kind", "imported"}, {"stroke_thickness", stroke_thickness}};

    const double sx = (canvas.width - 1) / 255.0;
    const double sy = (canvas.height - 1) / 255.0;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::format, path.filename().string() + ":" + std::to_string(lineno) +
                                        ": " + e.what());
        }
        const auto word = rec.value("word", std::string{});
        const auto it = class_map.find(word);
        if (it == class_map.end())
            fail(ErrorKind::mapping, path.filename().string() + ":" + std::to_string(lineno) +
                                         ": no class mapping for '" + word + "'");

        std::vector<std::uint8_t> img(canvas.pixels(), 0);
        bool drawn = false;
        for (const auto& stroke : rec.value("drawing", nlohmann::json::array())) {
            if (stroke.size() < 2) continue;
            auto xs = stroke.at(0).get<std::vector<double>>();
            auto ys = stroke.at(1).get<std::vector<double>>();
            if (xs.empty() || ys.empty()) continue;
            for (auto& x : xs) x *= sx;
            for (auto& y : ys) y *= sy;
            draw_polyline(img, canvas, xs, ys, stroke_thickness, 255);
            drawn = true;
        }
        if (!drawn || std::all_of(img.begin(), img.end(), [](auto v) { return v == 0; })) {
            ++res.skipped;
            continue;
        }
        ds.pixels.insert(ds.pixels.end(), img.begin(), img.end());
        ds.classes.push_back(it->second);
    }
    ds.meta.n = ds.classes.size();
    return res;
}

std::vector<Annotation> auto_label_all(const Dataset& ds) {
    std::vector<Annotation> out;
    out.reserve(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        try {
            out.push_back(auto_label(ds.image(i), ds.classes[i]));
        } catch (const Error& e) {
            fail(e.kind(), "sample " + std::to_string(i) + ": " + e.what());
        }
    }
    return out;
}

} // namespace expecta
