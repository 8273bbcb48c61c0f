#include "expecta/annot.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "expecta/error.hpp"
#include "expecta/rng.hpp"

namespace expecta {

int Annotation::label(int j) const {
    switch (j) {
    case 1: return y1;
    case 2: return y2;
    case 3: return y3;
    case 4: return y4;
    case 5: return y5;
    case 6: return y6;
    default: fail(ErrorKind::specification, "label index out of range: " + std::to_string(j));
    }
}

void Annotation::set_label(int j, int value) {
    switch (j) {
    case 1: y1 = value; break;
    case 2: y2 = value; break;
    case 3: y3 = value; break;
    case 4: y4 = value; break;
    case 5: y5 = value; break;
    case 6: y6 = value; break;
    default: fail(ErrorKind::specification, "label index out of range: " + std::to_string(j));
    }
}

bool Annotation::valid_for(const Canvas& canvas) const {
    return y1 >= 0 && 0 <= y2 && y2 < y4 && y4 <= canvas.width && 0 <= y3 && y3 < y5 &&
           y5 <= canvas.height && (y4 - y2) == (y5 - y3) && 1 <= y6 && y6 <= 255;
}

std::string to_string(const Annotation& a) {
    std::ostringstream os;
    os << "(" << a.y1 << ", " << a.y2 << ", " << a.y3 << ", " << a.y4 << ", " << a.y5 << ", "
       << a.y6 << ")";
    return os.str();
}

void ExpectationSpec::validate() const {
    if (canvas.width <= 0 || canvas.height <= 0)
        fail(ErrorKind::specification, "canvas dimensions must be positive");
    if (size_range.lo <= 0 || size_range.lo > size_range.hi || size_range.hi > canvas.min_side())
        fail(ErrorKind::specification,
             "size range [" + std::to_string(size_range.lo) + ", " +
                 std::to_string(size_range.hi) + "] must satisfy 0 < lo <= hi <= " +
                 std::to_string(canvas.min_side()));
    if (brightness_range.lo < 1 || brightness_range.lo > brightness_range.hi ||
        brightness_range.hi > 255)
        fail(ErrorKind::specification, "brightness range must satisfy 1 <= lo <= hi <= 255");
    if (classes.empty()) fail(ErrorKind::specification, "class set is empty");
    for (int c : classes)
        if (c < 0) fail(ErrorKind::specification, "class indices must be non-negative");
}

ExpectationSpec ExpectationSpec::for_canvas(Canvas canvas) {
    ExpectationSpec spec;
    spec.canvas = canvas;
    const double scale = canvas.min_side() / 128.0;
    spec.size_range.lo = std::max(1, static_cast<int>(std::lround(30 * scale)));
    spec.size_range.hi = std::max(spec.size_range.lo, static_cast<int>(std::lround(120 * scale)));
    return spec;
}

void to_json(nlohmann::json& j, const Canvas& c) { j = {c.width, c.height}; }
void from_json(const nlohmann::json& j, Canvas& c) {
    c.width = j.at(0).get<int>();
    c.height = j.at(1).get<int>();
}
void to_json(nlohmann::json& j, const IntRange& r) { j = {r.lo, r.hi}; }
void from_json(const nlohmann::json& j, IntRange& r) {
    r.lo = j.at(0).get<int>();
    r.hi = j.at(1).get<int>();
}

void to_json(nlohmann::json& j, const ExpectationSpec& s) {
    j = nlohmann::json{{"canvas", s.canvas},
                       {"size_range", s.size_range},
                       {"brightness_range", s.brightness_range},
                       {"classes", s.classes}};
}

void from_json(const nlohmann::json& j, ExpectationSpec& s) {
    if (j.contains("canvas")) s.canvas = j.at("canvas").get<Canvas>();
    if (j.contains("size_range")) s.size_range = j.at("size_range").get<IntRange>();
    if (j.contains("brightness_range"))
        s.brightness_range = j.at("brightness_range").get<IntRange>();
    if (j.contains("classes")) s.classes = j.at("classes").get<std::vector<int>>();
}

std::vector<Annotation> sample_expected(const ExpectationSpec& spec, std::uint64_t seed,
                                        std::size_t count) {
    spec.validate();
    if (count == 0) fail(ErrorKind::specification, "sample count must be positive");
    Rng rng(seed);
    std::vector<Annotation> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        Annotation a;
        a.y1 = spec.classes[rng.below(spec.classes.size())];
        const int side = rng.uniform_int(spec.size_range.lo, spec.size_range.hi);
        a.y2 = rng.uniform_int(0, spec.canvas.width - side);
        a.y3 = rng.uniform_int(0, spec.canvas.height - side);
        a.y4 = a.y2 + side;
        a.y5 = a.y3 + side;
        a.y6 = rng.uniform_int(spec.brightness_range.lo, spec.brightness_range.hi);
        out.push_back(a);
    }
    return out;
}

// ---------------------------------------------------------------------------
// BinnedSupport

BinnedSupport::BinnedSupport(int label, double bin_width, double origin,
                             std::vector<std::uint64_t> counts, std::uint64_t min_count)
    : label_(label), bin_width_(bin_width), origin_(origin),
      min_count_(std::max<std::uint64_t>(1, min_count)), counts_(std::move(counts)) {
    if (!(bin_width_ > 0.0)) fail(ErrorKind::specification, "bin width must be positive");
    occupancy_.resize(counts_.size());
    for (std::size_t b = 0; b < counts_.size(); ++b) occupancy_[b] = counts_[b] >= min_count_;
}

std::size_t BinnedSupport::occupied_bins() const {
    return static_cast<std::size_t>(std::count(occupancy_.begin(), occupancy_.end(), true));
}

std::uint64_t BinnedSupport::total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
}

long long BinnedSupport::grid_index(double value) const {
    return static_cast<long long>(std::floor(value / bin_width_));
}

bool BinnedSupport::covers(double value) const {
    const long long first = std::llround(origin_ / bin_width_);
    const long long b = grid_index(value) - first;
    if (b < 0 || b >= static_cast<long long>(occupancy_.size())) return false;
    return occupancy_[static_cast<std::size_t>(b)];
}

std::vector<double> BinnedSupport::proportions() const {
    std::vector<double> p(counts_.size(), 0.0);
    const auto t = total();
    if (t == 0) return p;
    for (std::size_t b = 0; b < counts_.size(); ++b)
        p[b] = static_cast<double>(counts_[b]) / static_cast<double>(t);
    return p;
}

BinnedSupport estimate_support(std::span<const double> values, double bin_width,
                               std::uint64_t min_count, int label) {
    if (!(bin_width > 0.0)) fail(ErrorKind::specification, "bin width must be positive");
    if (values.empty()) return BinnedSupport(label, bin_width, 0.0, {}, min_count);
    const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
    const long long first = static_cast<long long>(std::floor(*mn / bin_width));
    const long long last = static_cast<long long>(std::floor(*mx / bin_width));
    std::vector<std::uint64_t> counts(static_cast<std::size_t>(last - first + 1), 0);
    for (double v : values)
        ++counts[static_cast<std::size_t>(static_cast<long long>(std::floor(v / bin_width)) - first)];
    return BinnedSupport(label, bin_width, static_cast<double>(first) * bin_width,
                         std::move(counts), min_count);
}

double overlap_index(const BinnedSupport& a, const BinnedSupport& b) {
    if (std::abs(a.bin_width() - b.bin_width()) > 1e-12 * a.bin_width())
        fail(ErrorKind::specification, "supports use different bin widths");
    const double w = a.bin_width();
    const double shift = (a.origin() - b.origin()) / w;
    if (std::abs(shift - std::round(shift)) > 1e-9)
        fail(ErrorKind::specification, "supports are not aligned to a common bin grid");

    const long long a0 = std::llround(a.origin() / w);
    const long long b0 = std::llround(b.origin() / w);
    const std::size_t na = a.occupied_bins();
    const std::size_t nb = b.occupied_bins();
    if (na == 0 && nb == 0)
        fail(ErrorKind::undefined_overlap, "overlap undefined: both supports are empty");

    auto occupied = [](const BinnedSupport& s, long long first, long long g) {
        const long long i = g - first;
        return i >= 0 && i < static_cast<long long>(s.occupancy().size()) &&
               s.occupancy()[static_cast<std::size_t>(i)];
    };

    const long long lo = std::min(a0, b0);
    const long long hi = std::max(a0 + static_cast<long long>(a.bins()),
                                  b0 + static_cast<long long>(b.bins()));
    std::size_t uni = 0, sym = 0, b_in_a = 0;
    for (long long g = lo; g < hi; ++g) {
        const bool in_a = occupied(a, a0, g);
        const bool in_b = occupied(b, b0, g);
        if (in_a || in_b) ++uni;
        if (in_a != in_b) ++sym;
        if (in_a && in_b) ++b_in_a;
    }
    const bool strict_subset = nb > 0 && b_in_a == nb && na > nb;
    const double sign = strict_subset ? -1.0 : 1.0;
    return sign * static_cast<double>(sym) / static_cast<double>(uni);
}

// ---------------------------------------------------------------------------
// LabelDistribution

LabelDistribution LabelDistribution::from_annotations(std::span<const Annotation> annotations,
                                                      std::span<const int> classes,
                                                      double bin_width,
                                                      std::uint64_t min_count) {
    LabelDistribution d;
    std::size_t n = 0;
    for (int cls : classes) {
        for (int j : kLabels) {
            std::vector<double> values;
            for (const auto& a : annotations)
                if (a.y1 == cls) values.push_back(a.label(j));
            d.set(cls, j, estimate_support(values, bin_width, min_count, j));
        }
        for (const auto& a : annotations) n += a.y1 == cls ? 1 : 0;
    }
    d.n_ = n;
    return d;
}

void LabelDistribution::set(int cls, int label, BinnedSupport support) {
    supports_[{cls, label}] = std::move(support);
}

bool LabelDistribution::has_class(int cls) const {
    return supports_.lower_bound({cls, 0}) != supports_.end() &&
           supports_.lower_bound({cls, 0})->first.first == cls;
}

const BinnedSupport& LabelDistribution::at(int cls, int label) const {
    auto it = supports_.find({cls, label});
    if (it == supports_.end())
        fail(ErrorKind::missing_class, "label distribution has no entry for class " +
                                           std::to_string(cls) + ", label " +
                                           std::to_string(label));
    return it->second;
}

std::vector<int> LabelDistribution::classes() const {
    std::vector<int> out;
    for (const auto& [key, _] : supports_)
        if (out.empty() || out.back() != key.first) out.push_back(key.first);
    return out;
}

std::vector<int> LabelDistribution::empty_labels(int cls) const {
    std::vector<int> out;
    for (int j : kLabels)
        if (at(cls, j).empty()) out.push_back(j);
    return out;
}

std::string LabelDistribution::to_csv() const {
    std::ostringstream os;
    os << "class,label,bin_origin,bin_width,counts\n";
    for (const auto& [key, s] : supports_) {
        os << key.first << ',' << key.second << ',' << s.origin() << ',' << s.bin_width();
        for (auto c : s.counts()) os << ',' << c;
        os << '\n';
    }
    return os.str();
}

nlohmann::json LabelDistribution::to_json() const {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& [key, s] : supports_) {
        entries.push_back({{"class", key.first},
                           {"label", key.second},
                           {"bin_origin", s.origin()},
                           {"bin_width", s.bin_width()},
                           {"min_count", s.min_count()},
                           {"counts", s.counts()}});
    }
    return {{"sample_count", n_}, {"supports", entries}};
}

LabelDistribution LabelDistribution::from_json(const nlohmann::json& j) {
    LabelDistribution d;
    d.n_ = j.at("sample_count").get<std::size_t>();
    for (const auto& e : j.at("supports")) {
        d.set(e.at("class").get<int>(), e.at("label").get<int>(),
              BinnedSupport(e.at("label").get<int>(), e.at("bin_width").get<double>(),
                            e.at("bin_origin").get<double>(),
                            e.at("counts").get<std::vector<std::uint64_t>>(),
                            e.value("min_count", std::uint64_t{1})));
    }
    return d;
}

double LabelOverlap::mean() const {
    if (by_label.empty()) return 0.0;
    double s = 0.0;
    for (const auto& [_, v] : by_label) s += v;
    return s / static_cast<double>(by_label.size());
}

LabelOverlap per_label_overlap(const LabelDistribution& reference,
                               const LabelDistribution& candidate, int cls) {
    if (!reference.has_class(cls))
        fail(ErrorKind::missing_class,
             "class " + std::to_string(cls) + " missing from the reference distribution");
    if (!candidate.has_class(cls))
        fail(ErrorKind::missing_class,
             "class " + std::to_string(cls) + " missing from the candidate distribution");
    LabelOverlap out;
    out.cls = cls;
    for (int j : kLabels) out.by_label[j] = overlap_index(reference.at(cls, j), candidate.at(cls, j));
    return out;
}

double mean_overlap(const LabelDistribution& reference, const LabelDistribution& candidate,
                    std::span<const int> classes) {
    double s = 0.0;
    std::size_t n = 0;
    for (int cls : classes) {
        const auto row = per_label_overlap(reference, candidate, cls);
        for (const auto& [_, v] : row.by_label) {
            s += v;
            ++n;
        }
    }
    return n == 0 ? 0.0 : s / static_cast<double>(n);
}

} // namespace expecta
