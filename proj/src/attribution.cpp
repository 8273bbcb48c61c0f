#include "expecta/attribution.hpp"

#include <algorithm>
#include <bit>
#include <map>
#include <numeric>
#include <sstream>

#include "expecta/detector.hpp"
#include "expecta/error.hpp"
#include "expecta/render.hpp"
#include "expecta/rng.hpp"

namespace expecta {

void MaskingPolicy::validate() const {
    if (background_samples < 1) fail(ErrorKind::config, "background sample count must be >= 1");
    background.validate();
}

Annotation project_valid(Annotation a, Canvas canvas) {
    auto axis = [](int& lo, int& hi, int extent) {
        if (lo > hi) std::swap(lo, hi);
        if (lo == hi) ++hi;
        lo = std::clamp(lo, 0, extent - 1);
        hi = std::clamp(hi, lo + 1, extent);
    };
    axis(a.y2, a.y4, canvas.width);
    axis(a.y3, a.y5, canvas.height);
    const int side = std::min(a.y4 - a.y2, a.y5 - a.y3);
    a.y4 = a.y2 + side;
    a.y5 = a.y3 + side;
    a.y6 = std::clamp(a.y6, 1, 255);
    return a;
}

Annotation composite(const Annotation& ann, const Annotation& background, unsigned coalition,
                     Canvas canvas) {
    Annotation c = background;
    c.y1 = ann.y1;
    for (int f = 0; f < kFeatures; ++f)
        if (coalition & (1u << f)) c.set_label(kLabels[f], ann.label(kLabels[f]));
    return project_valid(c, canvas);
}

double AttributionRecord::total() const {
    return phi0 + std::accumulate(phi.begin(), phi.end(), 0.0);
}

namespace {

// |C|! (n - |C| - 1)! / n! for n = 5
constexpr std::array<double, kFeatures> kWeights{1.0 / 5, 1.0 / 20, 1.0 / 30, 1.0 / 20, 1.0 / 5};

} // namespace

std::pair<double, std::array<double, kFeatures>> shapley_from_values(
    std::span<const double, kCoalitions> v) {
    std::array<double, kFeatures> phi{};
    for (int f = 0; f < kFeatures; ++f) {
        const unsigned bit = 1u << f;
        double s = 0;
        for (unsigned c = 0; c < kCoalitions; ++c) {
            if (c & bit) continue;
            s += kWeights[static_cast<std::size_t>(std::popcount(c))] * (v[c | bit] - v[c]);
        }
        phi[static_cast<std::size_t>(f)] = s;
    }
    return {v[0], phi};
}

namespace {

std::vector<Annotation> backgrounds_for(const Annotation& ann, const MaskingPolicy& policy,
                                        std::uint64_t seed) {
    auto bg = sample_expected(policy.background, seed, static_cast<std::size_t>(policy.background_samples));
    for (auto& b : bg) b.y1 = ann.y1;
    return bg;
}

} // namespace

AttributionRecord shapley_exact(const ValueFn& value_fn, const Annotation& ann,
                                const MaskingPolicy& policy, std::uint64_t seed) {
    policy.validate();
    const Canvas canvas = policy.background.canvas;
    const auto bg = backgrounds_for(ann, policy, seed);
    std::array<double, kCoalitions> v{};
    for (unsigned c = 0; c < kCoalitions; ++c) {
        double s = 0;
        for (const auto& b : bg) {
            const Annotation x = composite(ann, b, c, canvas);
            try {
                s += value_fn(x);
            } catch (const Error& e) {
                fail(e.kind(), "coalition " + std::to_string(c) + " " + to_string(x) + ": " + e.what());
            }
        }
        v[c] = s / static_cast<double>(bg.size());
    }
    AttributionRecord r;
    r.annotation = ann;
    std::tie(r.phi0, r.phi) = shapley_from_values(v);
    r.score = value_fn(project_valid(ann, canvas));
    return r;
}

std::vector<std::vector<AttributionRecord>> attribute_testset(
    const Model& model, std::span<const double> temperatures, std::span<const Annotation> annotations,
    const MaskingPolicy& policy, std::uint64_t seed) {
    policy.validate();
    const Canvas canvas = model.arch.input;
    if (!(policy.background.canvas == canvas))
        fail(ErrorKind::dimension, "background canvas differs from the model input");
    const std::size_t B = static_cast<std::size_t>(policy.background_samples);
    const std::size_t per_sample = kCoalitions * B;

    std::vector<std::vector<AttributionRecord>> out(temperatures.size(),
                                                    std::vector<AttributionRecord>(annotations.size()));
    const auto own = annotation_logits(model, annotations);

    const std::size_t group = std::max<std::size_t>(1, 2048 / per_sample);
    std::vector<Annotation> batch;
    for (std::size_t s0 = 0; s0 < annotations.size(); s0 += group) {
        const std::size_t ns = std::min(group, annotations.size() - s0);
        batch.clear();
        for (std::size_t i = s0; i < s0 + ns; ++i) {
            const auto bg = backgrounds_for(annotations[i], policy, derive_seed(seed, "background", i));
            for (unsigned c = 0; c < kCoalitions; ++c)
                for (const auto& b : bg) batch.push_back(composite(annotations[i], b, c, canvas));
        }
        const auto logits = annotation_logits(model, batch);
        for (std::size_t t = 0; t < temperatures.size(); ++t) {
            for (std::size_t k = 0; k < ns; ++k) {
                const std::size_t i = s0 + k;
                std::array<double, kCoalitions> v{};
                for (unsigned c = 0; c < kCoalitions; ++c) {
                    double s = 0;
                    for (std::size_t b = 0; b < B; ++b)
                        s += max_softmax(logits.row(k * per_sample + c * B + b), temperatures[t]);
                    v[c] = s / static_cast<double>(B);
                }
                auto& r = out[t][i];
                r.index = i;
                r.annotation = annotations[i];
                r.temperature = temperatures[t];
                std::tie(r.phi0, r.phi) = shapley_from_values(v);
                r.score = max_softmax(own.row(i), temperatures[t]);
            }
        }
    }
    return out;
}

std::vector<std::size_t> stratified_subset(std::span<const Annotation> annotations, std::size_t m,
                                           std::uint64_t seed) {
    if (m >= annotations.size()) {
        std::vector<std::size_t> all(annotations.size());
        std::iota(all.begin(), all.end(), 0);
        return all;
    }
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < annotations.size(); ++i) by_class[annotations[i].y1].push_back(i);
    Rng rng(derive_seed(seed, "attribution.subset"));
    std::vector<std::size_t> picked;
    std::size_t remaining = m, left = annotations.size();
    for (auto& [cls, idx] : by_class) {
        // proportional share, rounding assigned so the total is exactly m
        const std::size_t take = std::min(idx.size(), (remaining * idx.size() + left / 2) / left);
        shuffle(idx, rng);
        picked.insert(picked.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take));
        remaining -= take;
        left -= idx.size();
    }
    std::sort(picked.begin(), picked.end());
    return picked;
}

LabelDistribution marginal_representation(std::span<const AttributionRecord> records,
                                          std::span<const int> classes) {
    LabelDistribution dist;
    std::size_t counted = 0;
    for (int cls : classes) {
        for (int f = 0; f < kFeatures; ++f) {
            std::vector<double> values;
            for (const auto& r : records)
                if (r.annotation.y1 == cls && r.phi[static_cast<std::size_t>(f)] >= 0.0)
                    values.push_back(r.annotation.label(kLabels[f]));
            if (values.empty())
                dist.set(cls, kLabels[f], BinnedSupport(kLabels[f], 1.0, 0.0, {}, 1));
            else
                dist.set(cls, kLabels[f], estimate_support(values, 1.0, 1, kLabels[f]));
        }
    }
    for (const auto& r : records)
        if (std::find(classes.begin(), classes.end(), r.annotation.y1) != classes.end()) ++counted;
    dist.set_sample_count(counted);
    return dist;
}

std::vector<std::array<double, kFeatures>> nonnegative_incidence(
    std::span<const AttributionRecord> records, std::span<const int> classes) {
    std::vector<std::array<double, kFeatures>> out;
    for (int cls : classes) {
        std::array<double, kFeatures> frac{};
        std::size_t n = 0;
        for (const auto& r : records) {
            if (r.annotation.y1 != cls) continue;
            ++n;
            for (std::size_t f = 0; f < kFeatures; ++f) frac[f] += r.phi[f] >= 0.0;
        }
        if (n > 0)
            for (auto& v : frac) v /= static_cast<double>(n);
        out.push_back(frac);
    }
    return out;
}

std::string attributions_csv(std::span<const AttributionRecord> records) {
    std::ostringstream os;
    os.precision(17);
    os << "index,y1,y2,y3,y4,y5,y6,T,phi0,phi2,phi3,phi4,phi5,phi6,score\n";
    for (const auto& r : records) {
        os << r.index;
        for (int j = 1; j <= 6; ++j) os << ',' << r.annotation.label(j);
        os << ',' << r.temperature << ',' << r.phi0;
        for (double p : r.phi) os << ',' << p;
        os << ',' << r.score << '\n';
    }
    return os.str();
}

OverlapRow audit_overlap(const LabelDistribution& candidate, const LabelDistribution& collected,
                         std::span<const int> classes, std::string name, std::string arch,
                         double temperature) {
    OverlapRow row{std::move(name), std::move(arch), temperature, {}, 0.0};
    double sum = 0;
    std::size_t n = 0;
    for (int cls : classes) {
        row.per_class.push_back(per_label_overlap(collected, candidate, cls));
        for (const auto& [j, v] : row.per_class.back().by_label) {
            sum += v;
            ++n;
        }
    }
    row.mean = n ? sum / static_cast<double>(n) : 0.0;
    return row;
}

nlohmann::json overlap_table_json(std::span<const OverlapRow> rows) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json classes = nlohmann::json::array();
        for (const auto& c : r.per_class) {
            nlohmann::json labels = nlohmann::json::object();
            for (const auto& [j, v] : c.by_label) labels["y" + std::to_string(j)] = v;
            classes.push_back({{"class", c.cls}, {"labels", labels}, {"mean", c.mean()}});
        }
        out.push_back({{"distribution", r.name},
                       {"arch", r.arch},
                       {"T", r.temperature},
                       {"classes", classes},
                       {"mean", r.mean}});
    }
    return out;
}

std::string overlap_table_csv(std::span<const OverlapRow> rows) {
    std::ostringstream os;
    os.precision(6);
    os << "distribution,arch,T";
    if (!rows.empty())
        for (const auto& c : rows.front().per_class)
            for (const auto& [j, v] : c.by_label) os << ",c" << c.cls << "_y" << j;
    os << ",mean\n";
    for (const auto& r : rows) {
        os << r.name << ',' << r.arch << ',' << r.temperature;
        for (const auto& c : r.per_class)
            for (const auto& [j, v] : c.by_label) os << ',' << v;
        os << ',' << r.mean << '\n';
    }
    return os.str();
}

} // namespace expecta
