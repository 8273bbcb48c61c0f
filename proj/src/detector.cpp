#include "expecta/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "expecta/error.hpp"

namespace expecta {

double max_softmax(std::span<const double> logits, double temperature) {
    if (!(temperature > 0)) fail(ErrorKind::specification, "temperature must be positive");
    if (logits.empty()) fail(ErrorKind::empty_input, "no logits");
    const double mx = *std::max_element(logits.begin(), logits.end());
    double s = 0;
    for (double z : logits) s += std::exp((z - mx) / temperature);
    // the largest term is exp(0) = 1
    return 1.0 / s;
}

std::vector<double> scores_from_logits(const LogitTable& logits, double temperature) {
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = max_softmax(logits.row(i), temperature);
    return out;
}

LogitTable annotation_logits(const Model& model, std::span<const Annotation> annotations,
                             const RenderStyle& style) {
    const Canvas canvas = model.arch.input;
    constexpr std::size_t kChunk = 1024;
    LogitTable out;
    out.classes = static_cast<std::size_t>(model.arch.classes);
    out.values.reserve(annotations.size() * out.classes);
    std::vector<std::uint8_t> buf;
    for (std::size_t b0 = 0; b0 < annotations.size(); b0 += kChunk) {
        const std::size_t nb = std::min(kChunk, annotations.size() - b0);
        buf.assign(nb * canvas.pixels(), 0);
        for (std::size_t i = 0; i < nb; ++i) {
            try {
                render_into(annotations[b0 + i], style, 0, canvas,
                            std::span<std::uint8_t>(buf).subspan(i * canvas.pixels(), canvas.pixels()));
            } catch (const Error& e) {
                fail(e.kind(), "sample " + std::to_string(b0 + i) + ": " + e.what());
            }
        }
        const auto part = forward(model, buf, nb);
        out.values.insert(out.values.end(), part.values.begin(), part.values.end());
    }
    return out;
}

std::vector<ScoreRecord> score(const Model& model, std::span<const Annotation> annotations,
                               double temperature, const RenderStyle& style) {
    if (!(temperature > 0)) fail(ErrorKind::specification, "temperature must be positive");
    const auto logits = annotation_logits(model, annotations, style);
    std::vector<ScoreRecord> out(annotations.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const auto row = logits.row(i);
        out[i].annotation = annotations[i];
        out[i].logits.assign(row.begin(), row.end());
        out[i].temperature = temperature;
        out[i].score = max_softmax(row, temperature);
    }
    return out;
}

std::vector<double> default_temperature_grid() {
    std::vector<double> g;
    for (int i = 0; i <= 76; ++i) g.push_back(1.0 + 0.25 * i);
    return g;
}

const CalibrationRow& CalibrationResult::row_at(double temperature) const {
    for (const auto& r : grid)
        if (std::abs(r.temperature - temperature) < 1e-12) return r;
    fail(ErrorKind::specification, "temperature " + std::to_string(temperature) + " is not on the grid");
}

CalibrationResult calibrate_temperature(const LogitTable& logits, double target,
                                        std::span<const double> grid) {
    if (logits.size() == 0) fail(ErrorKind::empty_input, "cannot calibrate on an empty test set");
    std::vector<double> temps = grid.empty() ? default_temperature_grid()
                                             : std::vector<double>(grid.begin(), grid.end());
    for (double t : temps)
        if (!(t > 0)) fail(ErrorKind::specification, "temperature grid values must be positive");

    CalibrationResult result;
    result.target = target;
    const double n = static_cast<double>(logits.size());
    std::size_t best = 0;
    for (std::size_t g = 0; g < temps.size(); ++g) {
        const auto s = scores_from_logits(logits, temps[g]);
        const double mean = std::accumulate(s.begin(), s.end(), 0.0) / n;
        double var = 0;
        for (double v : s) var += (v - mean) * (v - mean);
        var /= n;
        result.grid.push_back({temps[g], mean, var, (mean - target) * (mean - target) - var});
        const auto& cur = result.grid.back();
        const auto& inc = result.grid[best];
        if (cur.objective < inc.objective ||
            (cur.objective == inc.objective && cur.temperature < inc.temperature))
            best = g;
    }
    result.t_star = result.grid[best].temperature;
    return result;
}

void to_json(nlohmann::json& j, const CalibrationResult& c) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : c.grid)
        rows.push_back({{"T", r.temperature}, {"mean", r.mean}, {"variance", r.variance}, {"objective", r.objective}});
    j = nlohmann::json{{"t_star", c.t_star}, {"target", c.target}, {"grid", rows}};
}

void from_json(const nlohmann::json& j, CalibrationResult& c) {
    c.t_star = j.at("t_star").get<double>();
    c.target = j.at("target").get<double>();
    c.grid.clear();
    for (const auto& r : j.at("grid"))
        c.grid.push_back({r.at("T").get<double>(), r.at("mean").get<double>(), r.at("variance").get<double>(),
                          r.at("objective").get<double>()});
}

OutlierPartition partition_outliers(std::span<const Annotation> annotations,
                                    const LabelDistribution& collected) {
    OutlierPartition p;
    p.rule = "familiar iff every label y2..y6 lies in an occupied bin of the collected support of its class";
    p.is_familiar.resize(annotations.size());
    for (std::size_t i = 0; i < annotations.size(); ++i) {
        const auto& a = annotations[i];
        bool inside = true;
        for (int j : kLabels)
            if (!collected.at(a.y1, j).covers(a.label(j))) {
                inside = false;
                break;
            }
        p.is_familiar[i] = inside;
        (inside ? p.familiar : p.outliers).push_back(i);
    }
    return p;
}

double auroc(std::span<const double> scores, const std::vector<bool>& is_familiar) {
    if (scores.size() != is_familiar.size())
        fail(ErrorKind::dimension, "scores and labels differ in length");
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Mann-Whitney U from midranks.
    double rank_sum = 0;
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t k = i;
        while (k < n && scores[order[k]] == scores[order[i]]) ++k;
        const double midrank = 0.5 * static_cast<double>(i + 1 + k);
        for (std::size_t r = i; r < k; ++r)
            if (is_familiar[order[r]]) {
                rank_sum += midrank;
                ++pos;
            }
        i = k;
    }
    const std::size_t neg = n - pos;
    if (pos == 0 || neg == 0)
        fail(ErrorKind::empty_input, "AUROC needs both familiar and outlier samples (got " +
                                         std::to_string(pos) + " and " + std::to_string(neg) + ")");
    const double u = rank_sum - static_cast<double>(pos) * static_cast<double>(pos + 1) / 2.0;
    return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

std::string scores_csv(std::span<const ScoreRecord> records) {
    std::ostringstream os;
    os.precision(17);
    os << "index,y1,y2,y3,y4,y5,y6,logit0,logit1,T,score,familiar\n";
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        os << i;
        for (int j = 1; j <= 6; ++j) os << ',' << r.annotation.label(j);
        for (std::size_t k = 0; k < 2; ++k) os << ',' << (k < r.logits.size() ? r.logits[k] : 0.0);
        os << ',' << r.temperature << ',' << r.score << ',';
        if (r.familiar) os << (*r.familiar ? 1 : 0);
        os << '\n';
    }
    return os.str();
}

} // namespace expecta
