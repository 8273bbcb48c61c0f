#include "expecta/nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <thread>

#include <Eigen/Core>

#include "expecta/dataset.hpp"
#include "expecta/error.hpp"
#include "expecta/rng.hpp"

namespace expecta {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Architecture

namespace {

// Convolutions per stage; four stages with widths 16, 32, 64, 128.
const std::vector<std::pair<std::string, std::vector<int>>>& preset_table() {
    static const std::vector<std::pair<std::string, std::vector<int>>> table{
        {"VGG05", {1, 1, 1, 1}},
        {"VGG07", {1, 1, 2, 2}},
        {"VGG09", {2, 2, 2, 2}},
        {"VGG11", {2, 2, 3, 3}},
        {"VGG13", {3, 3, 3, 3}},
    };
    return table;
}

constexpr int kStageWidths[4] = {16, 32, 64, 128};

} // namespace

ArchConfig ArchConfig::preset(std::string_view name, Canvas input) {
    for (const auto& [key, convs] : preset_table()) {
        if (key != name) continue;
        ArchConfig a;
        a.name = key;
        a.input = input;
        for (std::size_t s = 0; s < convs.size(); ++s) a.stages.push_back({convs[s], kStageWidths[s]});
        return a;
    }
    fail(ErrorKind::config, "unknown architecture preset '" + std::string(name) + "'");
}

const std::vector<std::string>& ArchConfig::preset_names() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> n;
        for (const auto& [key, _] : preset_table()) n.push_back(key);
        return n;
    }();
    return names;
}

int ArchConfig::conv_layers() const {
    int n = 0;
    for (const auto& s : stages) n += s.convs;
    return n;
}

int ArchConfig::feature_size() const {
    int c = 1, h = input.height, w = input.width;
    for (const auto& s : stages) {
        if (s.convs > 0) c = s.channels;
        h /= 2;
        w /= 2;
    }
    return c * h * w;
}

void ArchConfig::validate() const {
    if (input.width <= 0 || input.height <= 0) fail(ErrorKind::config, "input canvas must be positive");
    if (classes < 2) fail(ErrorKind::config, "at least two classes are required");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail(ErrorKind::config, "dropout must lie in [0, 1)");
    int h = input.height, w = input.width;
    for (const auto& s : stages) {
        if (s.convs < 0 || s.channels <= 0)
            fail(ErrorKind::config, "stage conv counts must be >= 0 and widths positive");
        h /= 2;
        w /= 2;
        if (h < 1 || w < 1)
            fail(ErrorKind::config, "too many pooling stages for a " + std::to_string(input.width) +
                                        "x" + std::to_string(input.height) + " input");
    }
    for (const auto& [key, convs] : preset_table()) {
        if (key == name && layer_count() != std::stoi(key.substr(3)))
            fail(ErrorKind::config, "preset " + key + " must have " + key.substr(3) + " layers");
    }
}

void to_json(nlohmann::json& j, const ArchConfig& a) {
    nlohmann::json stages = nlohmann::json::array();
    for (const auto& s : a.stages) stages.push_back({{"convs", s.convs}, {"channels", s.channels}});
    j = nlohmann::json{{"name", a.name},       {"stages", stages},   {"batch_norm", a.batch_norm},
                       {"dropout", a.dropout}, {"input", a.input}, {"classes", a.classes}};
}

void from_json(const nlohmann::json& j, ArchConfig& a) {
    a.name = j.value("name", std::string("custom"));
    a.stages.clear();
    for (const auto& s : j.at("stages"))
        a.stages.push_back({s.at("convs").get<int>(), s.at("channels").get<int>()});
    a.batch_norm = j.value("batch_norm", false);
    a.dropout = j.value("dropout", 0.0);
    a.input = j.at("input").get<Canvas>();
    a.classes = j.value("classes", 2);
}

std::vector<ParamEntry> build_manifest(const ArchConfig& arch) {
    arch.validate();
    std::vector<ParamEntry> m;
    std::size_t offset = 0;
    auto add = [&](std::string name, std::vector<int> shape, bool trainable = true) {
        std::size_t size = 1;
        for (int d : shape) size *= static_cast<std::size_t>(d);
        m.push_back({std::move(name), std::move(shape), offset, size, trainable});
        offset += size;
    };
    int cin = 1, layer = 0;
    for (const auto& s : arch.stages) {
        for (int i = 0; i < s.convs; ++i, ++layer) {
            const std::string p = "conv" + std::to_string(layer);
            add(p + ".weight", {s.channels, cin, 3, 3});
            if (arch.batch_norm) {
                add(p + ".bn.gamma", {s.channels});
                add(p + ".bn.beta", {s.channels});
                add(p + ".bn.running_mean", {s.channels}, false);
                add(p + ".bn.running_var", {s.channels}, false);
            } else {
                add(p + ".bias", {s.channels});
            }
            cin = s.channels;
        }
    }
    add("dense.weight", {arch.classes, arch.feature_size()});
    add("dense.bias", {arch.classes});
    return m;
}

std::string manifest_hash(const ArchConfig& arch) {
    nlohmann::json j = arch;
    j.erase("name");
    std::string text = j.dump();
    for (const auto& e : build_manifest(arch)) {
        text += '|' + e.name;
        for (int d : e.shape) text += ',' + std::to_string(d);
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(text);
    return os.str();
}

// ---------------------------------------------------------------------------
// Model

Model Model::create(const ArchConfig& arch, std::uint64_t seed, InitKind init) {
    Model m;
    m.arch = arch;
    m.manifest = build_manifest(arch);
    m.seed = seed;
    const auto& last = m.manifest.back();
    m.params.assign(last.offset + last.size, 0.0f);
    if (init == InitKind::zero) return m;

    Rng rng(derive_seed(seed, "init"));
    for (const auto& e : m.manifest) {
        auto t = std::span<float>(m.params).subspan(e.offset, e.size);
        const bool is_weight = e.name.ends_with(".weight");
        if (is_weight) {
            std::size_t fan_in = 1;
            for (std::size_t d = 1; d < e.shape.size(); ++d) fan_in *= static_cast<std::size_t>(e.shape[d]);
            // He for ReLU convolutions, LeCun for the linear head.
            const double gain = e.name.starts_with("conv") ? 2.0 : 1.0;
            const double stddev = std::sqrt(gain / static_cast<double>(fan_in));
            for (auto& v : t) v = static_cast<float>(rng.normal(0.0, stddev));
        } else if (e.name.ends_with(".gamma") || e.name.ends_with(".running_var")) {
            std::fill(t.begin(), t.end(), 1.0f);
        }
    }
    return m;
}

const ParamEntry& Model::entry(std::string_view name) const {
    for (const auto& e : manifest)
        if (e.name == name) return e;
    fail(ErrorKind::format, "model has no parameter tensor '" + std::string(name) + "'");
}

std::span<float> Model::tensor(std::string_view name) {
    const auto& e = entry(name);
    return std::span<float>(params).subspan(e.offset, e.size);
}

std::span<const float> Model::tensor(std::string_view name) const {
    const auto& e = entry(name);
    return std::span<const float>(params).subspan(e.offset, e.size);
}

void Model::validate() const {
    std::size_t offset = 0;
    for (const auto& e : manifest) {
        if (e.offset != offset) fail(ErrorKind::format, "manifest entry " + e.name + " is misplaced");
        offset += e.size;
    }
    if (offset != params.size())
        fail(ErrorKind::format, "manifest covers " + std::to_string(offset) +
                                    " values but the parameter vector holds " +
                                    std::to_string(params.size()));
    for (float v : params)
        if (!std::isfinite(v)) fail(ErrorKind::training_failure, "non-finite parameter value");
}

void TrainConfig::validate() const {
    if (epochs <= 0 || batch_size <= 0 || learning_rate < 0)
        fail(ErrorKind::config, "epochs and batch size must be positive and learning rate >= 0");
    if (!(validation_fraction >= 0 && validation_fraction < 1))
        fail(ErrorKind::config, "validation fraction must lie in [0, 1)");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"epochs", c.epochs},
                       {"batch_size", c.batch_size},
                       {"learning_rate", c.learning_rate},
                       {"beta1", c.beta1},
                       {"beta2", c.beta2},
                       {"epsilon", c.epsilon},
                       {"seed", c.seed},
                       {"validation_fraction", c.validation_fraction}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.seed = j.value("seed", c.seed);
    c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
}

// ---------------------------------------------------------------------------
// Engine

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapRM = Eigen::Map<RowMat<T>>;
template <class T>
using CMapRM = Eigen::Map<const RowMat<T>>;

enum class OpKind { conv, batch_norm, relu, pool, dropout, dense };

struct Op {
    OpKind kind;
    int c = 0, h = 0, w = 0;  // input shape
    int out_c = 0;
    std::size_t weight = 0, bias = 0, gamma = 0, beta = 0, mean = 0, var = 0;
    bool has_bias = false;
};

std::vector<Op> build_ops(const ArchConfig& arch) {
    const auto manifest = build_manifest(arch);
    auto off = [&](const std::string& name) {
        for (const auto& e : manifest)
            if (e.name == name) return e.offset;
        fail(ErrorKind::format, "missing manifest entry " + name);
    };
    std::vector<Op> ops;
    int c = 1, h = arch.input.height, w = arch.input.width, layer = 0;
    for (const auto& s : arch.stages) {
        for (int i = 0; i < s.convs; ++i, ++layer) {
            const std::string p = "conv" + std::to_string(layer);
            Op conv{OpKind::conv, c, h, w, s.channels};
            conv.weight = off(p + ".weight");
            if (arch.batch_norm) {
                ops.push_back(conv);
                Op bn{OpKind::batch_norm, s.channels, h, w, s.channels};
                bn.gamma = off(p + ".bn.gamma");
                bn.beta = off(p + ".bn.beta");
                bn.mean = off(p + ".bn.running_mean");
                bn.var = off(p + ".bn.running_var");
                ops.push_back(bn);
            } else {
                conv.has_bias = true;
                conv.bias = off(p + ".bias");
                ops.push_back(conv);
            }
            ops.push_back({OpKind::relu, s.channels, h, w, s.channels});
            c = s.channels;
        }
        ops.push_back({OpKind::pool, c, h, w, c});
        h /= 2;
        w /= 2;
    }
    if (arch.dropout > 0) ops.push_back({OpKind::dropout, c, h, w, c});
    Op dense{OpKind::dense, c, h, w, arch.classes};
    dense.weight = off("dense.weight");
    dense.bias = off("dense.bias");
    dense.has_bias = true;
    ops.push_back(dense);
    return ops;
}

constexpr double kBnEps = 1e-5;
constexpr std::size_t kColBudget = std::size_t{1} << 22;  // im2col elements per chunk

enum class Mode { inference, train, batch_stats };

template <class T>
class Engine {
public:
    explicit Engine(const ArchConfig& arch) : arch_(arch), ops_(build_ops(arch)) {}

    void load(std::span<const std::uint8_t> pixels, std::size_t n) {
        const std::size_t hw = static_cast<std::size_t>(arch_.input.width) * arch_.input.height;
        if (pixels.size() != n * hw)
            fail(ErrorKind::dimension, "input holds " + std::to_string(pixels.size()) +
                                           " bytes; expected " + std::to_string(n * hw) +
                                           " for " + std::to_string(n) + " images of " +
                                           std::to_string(arch_.input.width) + "x" +
                                           std::to_string(arch_.input.height));
        batch_ = n;
        acts_.resize(ops_.size() + 1);
        acts_[0].resize(n * hw);
        for (std::size_t i = 0; i < pixels.size(); ++i)
            acts_[0][i] = static_cast<T>(pixels[i]) / static_cast<T>(255);
    }

    void forward(std::span<const T> p, Mode mode, Rng* dropout_rng = nullptr) {
        cache_.resize(ops_.size());
        for (std::size_t i = 0; i < ops_.size(); ++i) {
            const Op& op = ops_[i];
            const auto& in = acts_[i];
            auto& out = acts_[i + 1];
            switch (op.kind) {
            case OpKind::conv: conv_forward(op, p, in, out); break;
            case OpKind::batch_norm: bn_forward(op, p, in, out, cache_[i], mode); break;
            case OpKind::relu:
                out.resize(in.size());
                for (std::size_t k = 0; k < in.size(); ++k) out[k] = in[k] > T(0) ? in[k] : T(0);
                break;
            case OpKind::pool: pool_forward(op, in, out, cache_[i]); break;
            case OpKind::dropout:
                out = in;
                if (mode == Mode::train && dropout_rng != nullptr) {
                    auto& mask = cache_[i].mask;
                    mask.resize(in.size());
                    const T keep = static_cast<T>(1.0 - arch_.dropout);
                    for (std::size_t k = 0; k < in.size(); ++k) {
                        mask[k] = dropout_rng->bernoulli(1.0 - arch_.dropout) ? T(1) / keep : T(0);
                        out[k] *= mask[k];
                    }
                } else {
                    cache_[i].mask.clear();
                }
                break;
            case OpKind::dense: dense_forward(op, p, in, out); break;
            }
        }
    }

    // [classes][batch]
    const std::vector<T>& logits() const { return acts_.back(); }
    std::size_t batch() const { return batch_; }

    void backward(std::span<const T> p, std::vector<T> dout, std::span<T> grad) {
        std::vector<T> din;
        for (std::size_t i = ops_.size(); i-- > 0;) {
            const Op& op = ops_[i];
            const auto& in = acts_[i];
            const bool need_input_grad = i > 0;
            switch (op.kind) {
            case OpKind::conv: conv_backward(op, p, in, dout, din, grad, need_input_grad); break;
            case OpKind::batch_norm: bn_backward(op, p, dout, din, grad, cache_[i]); break;
            case OpKind::relu: {
                const auto& out = acts_[i + 1];
                din.resize(dout.size());
                for (std::size_t k = 0; k < dout.size(); ++k) din[k] = out[k] > T(0) ? dout[k] : T(0);
                break;
            }
            case OpKind::pool: {
                din.assign(in.size(), T(0));
                const auto& arg = cache_[i].argmax;
                for (std::size_t k = 0; k < dout.size(); ++k) din[arg[k]] += dout[k];
                break;
            }
            case OpKind::dropout: {
                din = dout;
                const auto& mask = cache_[i].mask;
                if (!mask.empty())
                    for (std::size_t k = 0; k < din.size(); ++k) din[k] *= mask[k];
                break;
            }
            case OpKind::dense: dense_backward(op, p, in, dout, din, grad); break;
            }
            std::swap(dout, din);
        }
    }

    // Batch statistics recorded by the last forward pass, per batch-norm op.
    std::vector<std::pair<const Op*, const std::vector<double>*>> batch_means() const {
        std::vector<std::pair<const Op*, const std::vector<double>*>> out;
        for (std::size_t i = 0; i < ops_.size(); ++i)
            if (ops_[i].kind == OpKind::batch_norm) out.push_back({&ops_[i], &cache_[i].mean});
        return out;
    }
    std::vector<std::pair<const Op*, const std::vector<double>*>> batch_vars() const {
        std::vector<std::pair<const Op*, const std::vector<double>*>> out;
        for (std::size_t i = 0; i < ops_.size(); ++i)
            if (ops_[i].kind == OpKind::batch_norm) out.push_back({&ops_[i], &cache_[i].var});
        return out;
    }

private:
    struct Cache {
        std::vector<T> xhat;
        std::vector<double> mean, var, invstd;
        std::vector<std::uint32_t> argmax;
        std::vector<T> mask;
    };

    std::size_t samples_per_chunk(const Op& op) const {
        const std::size_t per = static_cast<std::size_t>(op.c) * 9 * op.h * op.w;
        return std::clamp<std::size_t>(kColBudget / std::max<std::size_t>(per, 1), 1, batch_);
    }

    // col[(ci*3+ky)*3+kx][(b-b0)*HW + y*W + x] = in[ci][b][y+ky-1][x+kx-1]
    void im2col(const Op& op, const std::vector<T>& in, std::size_t b0, std::size_t nb) {
        const int h = op.h, w = op.w;
        const std::size_t hw = static_cast<std::size_t>(h) * w;
        const std::size_t ncols = nb * hw;
        col_.resize(static_cast<std::size_t>(op.c) * 9 * ncols);
        for (int ci = 0; ci < op.c; ++ci)
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                    T* dst = col_.data() + static_cast<std::size_t>((ci * 3 + ky) * 3 + kx) * ncols;
                    const int x_lo = std::max(0, 1 - kx), x_hi = std::min(w, w + 1 - kx);
                    for (std::size_t b = b0; b < b0 + nb; ++b) {
                        const T* src = in.data() + (static_cast<std::size_t>(ci) * batch_ + b) * hw;
                        for (int y = 0; y < h; ++y, dst += w) {
                            const int sy = y + ky - 1;
                            if (sy < 0 || sy >= h) {
                                std::fill(dst, dst + w, T(0));
                                continue;
                            }
                            const T* row = src + static_cast<std::size_t>(sy) * w + (kx - 1);
                            for (int x = 0; x < x_lo; ++x) dst[x] = T(0);
                            std::copy(row + x_lo, row + x_hi, dst + x_lo);
                            for (int x = x_hi; x < w; ++x) dst[x] = T(0);
                        }
                    }
                }
    }

    void col2im_add(const Op& op, std::vector<T>& din, std::size_t b0, std::size_t nb) {
        const int h = op.h, w = op.w;
        const std::size_t hw = static_cast<std::size_t>(h) * w;
        const std::size_t ncols = nb * hw;
        for (int ci = 0; ci < op.c; ++ci)
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                    const T* src = col_.data() + static_cast<std::size_t>((ci * 3 + ky) * 3 + kx) * ncols;
                    const int x_lo = std::max(0, 1 - kx), x_hi = std::min(w, w + 1 - kx);
                    for (std::size_t b = b0; b < b0 + nb; ++b) {
                        T* dst = din.data() + (static_cast<std::size_t>(ci) * batch_ + b) * hw;
                        for (int y = 0; y < h; ++y, src += w) {
                            const int sy = y + ky - 1;
                            if (sy < 0 || sy >= h) continue;
                            T* row = dst + static_cast<std::size_t>(sy) * w + (kx - 1);
                            for (int x = x_lo; x < x_hi; ++x) row[x] += src[x];
                        }
                    }
                }
    }

    void conv_forward(const Op& op, std::span<const T> p, const std::vector<T>& in, std::vector<T>& out) {
        const std::size_t hw = static_cast<std::size_t>(op.h) * op.w;
        const auto total = static_cast<Eigen::Index>(batch_ * hw);
        out.resize(static_cast<std::size_t>(op.out_c) * batch_ * hw);
        CMapRM<T> weight(p.data() + op.weight, op.out_c, op.c * 9);
        MapRM<T> result(out.data(), op.out_c, total);
        const std::size_t chunk = samples_per_chunk(op);
        for (std::size_t b0 = 0; b0 < batch_; b0 += chunk) {
            const std::size_t nb = std::min(chunk, batch_ - b0);
            im2col(op, in, b0, nb);
            const auto cols = static_cast<Eigen::Index>(nb * hw);
            CMapRM<T> col(col_.data(), op.c * 9, cols);
            result.middleCols(static_cast<Eigen::Index>(b0 * hw), cols).noalias() = weight * col;
        }
        if (op.has_bias)
            for (int c = 0; c < op.out_c; ++c) result.row(c).array() += p[op.bias + c];
    }

    void conv_backward(const Op& op, std::span<const T> p, const std::vector<T>& in,
                       const std::vector<T>& dout, std::vector<T>& din, std::span<T> grad,
                       bool need_input_grad) {
        const std::size_t hw = static_cast<std::size_t>(op.h) * op.w;
        const auto total = static_cast<Eigen::Index>(batch_ * hw);
        CMapRM<T> weight(p.data() + op.weight, op.out_c, op.c * 9);
        MapRM<T> dweight(grad.data() + op.weight, op.out_c, op.c * 9);
        CMapRM<T> dresult(dout.data(), op.out_c, total);
        if (op.has_bias)
            for (int c = 0; c < op.out_c; ++c) {
                double s = 0;
                const T* row = dout.data() + static_cast<std::size_t>(c) * total;
                for (Eigen::Index k = 0; k < total; ++k) s += row[k];
                grad[op.bias + c] += static_cast<T>(s);
            }
        if (need_input_grad) din.assign(in.size(), T(0));
        const std::size_t chunk = samples_per_chunk(op);
        for (std::size_t b0 = 0; b0 < batch_; b0 += chunk) {
            const std::size_t nb = std::min(chunk, batch_ - b0);
            const auto cols = static_cast<Eigen::Index>(nb * hw);
            const auto block = dresult.middleCols(static_cast<Eigen::Index>(b0 * hw), cols);
            im2col(op, in, b0, nb);
            CMapRM<T> col(col_.data(), op.c * 9, cols);
            dweight.noalias() += block * col.transpose();
            if (need_input_grad) {
                MapRM<T> dcol(col_.data(), op.c * 9, cols);
                dcol.noalias() = weight.transpose() * block;
                col2im_add(op, din, b0, nb);
            }
        }
    }

    void bn_forward(const Op& op, std::span<const T> p, const std::vector<T>& in, std::vector<T>& out,
                    Cache& cache, Mode mode) {
        const std::size_t n = batch_ * static_cast<std::size_t>(op.h) * op.w;
        out.resize(in.size());
        cache.mean.assign(op.c, 0.0);
        cache.var.assign(op.c, 0.0);
        cache.invstd.assign(op.c, 0.0);
        if (mode != Mode::inference) cache.xhat.resize(in.size());
        for (int c = 0; c < op.c; ++c) {
            const T* x = in.data() + static_cast<std::size_t>(c) * n;
            T* y = out.data() + static_cast<std::size_t>(c) * n;
            double mean, var;
            if (mode == Mode::inference) {
                mean = p[op.mean + c];
                var = p[op.var + c];
            } else {
                double s = 0;
                for (std::size_t k = 0; k < n; ++k) s += x[k];
                mean = s / static_cast<double>(n);
                double q = 0;
                for (std::size_t k = 0; k < n; ++k) q += (x[k] - mean) * (x[k] - mean);
                var = q / static_cast<double>(n);
            }
            const double invstd = 1.0 / std::sqrt(var + kBnEps);
            cache.mean[c] = mean;
            cache.var[c] = var;
            cache.invstd[c] = invstd;
            const T g = p[op.gamma + c], b = p[op.beta + c];
            const T tm = static_cast<T>(mean), ti = static_cast<T>(invstd);
            for (std::size_t k = 0; k < n; ++k) {
                const T xh = (x[k] - tm) * ti;
                if (mode != Mode::inference) cache.xhat[static_cast<std::size_t>(c) * n + k] = xh;
                y[k] = g * xh + b;
            }
        }
    }

    void bn_backward(const Op& op, std::span<const T> p, const std::vector<T>& dout, std::vector<T>& din,
                     std::span<T> grad, const Cache& cache) {
        const std::size_t n = batch_ * static_cast<std::size_t>(op.h) * op.w;
        din.resize(dout.size());
        for (int c = 0; c < op.c; ++c) {
            const T* dy = dout.data() + static_cast<std::size_t>(c) * n;
            const T* xh = cache.xhat.data() + static_cast<std::size_t>(c) * n;
            T* dx = din.data() + static_cast<std::size_t>(c) * n;
            double dgamma = 0, dbeta = 0;
            for (std::size_t k = 0; k < n; ++k) {
                dgamma += static_cast<double>(dy[k]) * xh[k];
                dbeta += dy[k];
            }
            grad[op.gamma + c] += static_cast<T>(dgamma);
            grad[op.beta + c] += static_cast<T>(dbeta);
            const double scale = p[op.gamma + c] * cache.invstd[c];
            const double mb = dbeta / static_cast<double>(n), mg = dgamma / static_cast<double>(n);
            for (std::size_t k = 0; k < n; ++k)
                dx[k] = static_cast<T>(scale * (dy[k] - mb - xh[k] * mg));
        }
    }

    void pool_forward(const Op& op, const std::vector<T>& in, std::vector<T>& out, Cache& cache) {
        const int oh = op.h / 2, ow = op.w / 2;
        const std::size_t planes = static_cast<std::size_t>(op.c) * batch_;
        const std::size_t ihw = static_cast<std::size_t>(op.h) * op.w;
        const std::size_t ohw = static_cast<std::size_t>(oh) * ow;
        out.resize(planes * ohw);
        cache.argmax.resize(planes * ohw);
        for (std::size_t pl = 0; pl < planes; ++pl) {
            const T* src = in.data() + pl * ihw;
            for (int y = 0; y < oh; ++y)
                for (int x = 0; x < ow; ++x) {
                    std::size_t best = static_cast<std::size_t>(2 * y) * op.w + 2 * x;
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            const std::size_t k = static_cast<std::size_t>(2 * y + dy) * op.w + 2 * x + dx;
                            if (src[k] > src[best]) best = k;
                        }
                    const std::size_t o = pl * ohw + static_cast<std::size_t>(y) * ow + x;
                    out[o] = src[best];
                    cache.argmax[o] = static_cast<std::uint32_t>(pl * ihw + best);
                }
        }
    }

    // features[c*hw + k][b] = in[c][b][k]
    void gather_features(const Op& op, const std::vector<T>& in) {
        const std::size_t hw = static_cast<std::size_t>(op.h) * op.w;
        feat_.resize(static_cast<std::size_t>(op.c) * hw * batch_);
        for (int c = 0; c < op.c; ++c)
            for (std::size_t b = 0; b < batch_; ++b)
                for (std::size_t k = 0; k < hw; ++k)
                    feat_[(c * hw + k) * batch_ + b] = in[(c * batch_ + b) * hw + k];
    }

    void dense_forward(const Op& op, std::span<const T> p, const std::vector<T>& in, std::vector<T>& out) {
        const auto features = static_cast<Eigen::Index>(op.c) * op.h * op.w;
        gather_features(op, in);
        out.resize(static_cast<std::size_t>(op.out_c) * batch_);
        CMapRM<T> weight(p.data() + op.weight, op.out_c, features);
        CMapRM<T> x(feat_.data(), features, static_cast<Eigen::Index>(batch_));
        MapRM<T> y(out.data(), op.out_c, static_cast<Eigen::Index>(batch_));
        y.noalias() = weight * x;
        for (int k = 0; k < op.out_c; ++k) y.row(k).array() += p[op.bias + k];
    }

    void dense_backward(const Op& op, std::span<const T> p, const std::vector<T>& in,
                        const std::vector<T>& dout, std::vector<T>& din, std::span<T> grad) {
        const std::size_t hw = static_cast<std::size_t>(op.h) * op.w;
        const auto features = static_cast<Eigen::Index>(op.c * hw);
        const auto nb = static_cast<Eigen::Index>(batch_);
        gather_features(op, in);
        CMapRM<T> weight(p.data() + op.weight, op.out_c, features);
        CMapRM<T> x(feat_.data(), features, nb);
        CMapRM<T> dy(dout.data(), op.out_c, nb);
        MapRM<T> dweight(grad.data() + op.weight, op.out_c, features);
        dweight.noalias() += dy * x.transpose();
        for (int k = 0; k < op.out_c; ++k) {
            double s = 0;
            for (Eigen::Index b = 0; b < nb; ++b) s += dy(k, b);
            grad[op.bias + k] += static_cast<T>(s);
        }
        std::vector<T> dfeat(static_cast<std::size_t>(features * nb));
        MapRM<T> dx(dfeat.data(), features, nb);
        dx.noalias() = weight.transpose() * dy;
        din.resize(in.size());
        for (int c = 0; c < op.c; ++c)
            for (std::size_t b = 0; b < batch_; ++b)
                for (std::size_t k = 0; k < hw; ++k)
                    din[(c * batch_ + b) * hw + k] = dfeat[(c * hw + k) * batch_ + b];
    }

    ArchConfig arch_;
    std::vector<Op> ops_;
    std::size_t batch_ = 0;
    std::vector<std::vector<T>> acts_;
    std::vector<Cache> cache_;
    std::vector<T> col_;
    std::vector<T> feat_;
};

// Mean cross-entropy over the batch; fills dlogits ([classes][batch]) when given.
template <class T>
double softmax_xent(const std::vector<T>& logits, std::size_t classes, std::size_t batch,
                    std::span<const int> labels, std::vector<T>* dlogits) {
    double total = 0;
    if (dlogits) dlogits->assign(classes * batch, T(0));
    std::vector<double> z(classes);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t k = 0; k < classes; ++k) z[k] = logits[k * batch + b];
        const double mx = *std::max_element(z.begin(), z.end());
        double s = 0;
        for (double v : z) s += std::exp(v - mx);
        const double lse = mx + std::log(s);
        total += lse - z[static_cast<std::size_t>(labels[b])];
        if (dlogits)
            for (std::size_t k = 0; k < classes; ++k) {
                const double pk = std::exp(z[k] - lse);
                (*dlogits)[k * batch + b] =
                    static_cast<T>((pk - (static_cast<int>(k) == labels[b] ? 1.0 : 0.0)) / batch);
            }
    }
    return total / static_cast<double>(batch);
}

LogitTable to_table(const std::vector<float>& logits, std::size_t classes, std::size_t batch) {
    LogitTable t;
    t.classes = classes;
    t.values.resize(classes * batch);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t k = 0; k < classes; ++k) t.values[b * classes + k] = logits[k * batch + b];
    return t;
}

constexpr std::size_t kInferenceBatch = 64;

template <class Fn>
void parallel_chunks(std::size_t chunks, Fn&& fn) {
    const int threads = std::max(1, std::min<int>(thread_count(), static_cast<int>(chunks)));
    if (threads <= 1) {
        for (std::size_t c = 0; c < chunks; ++c) fn(c);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t)
        pool.emplace_back([&, t] {
            try {
                for (std::size_t c = static_cast<std::size_t>(t); c < chunks; c += threads) fn(c);
            } catch (...) {
                errors[static_cast<std::size_t>(t)] = std::current_exception();
            }
        });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

} // namespace

int thread_count() {
    if (const char* env = std::getenv("EXPECTA_THREADS")) {
        const int n = std::atoi(env);
        return n <= 0 ? 1 : n;
    }
    const unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
}

LogitTable forward(const Model& model, std::span<const std::uint8_t> pixels, std::size_t n) {
    const std::size_t hw = model.arch.input.pixels();
    if (pixels.size() != n * hw)
        fail(ErrorKind::dimension, "input holds " + std::to_string(pixels.size()) +
                                       " bytes; expected " + std::to_string(n * hw));
    LogitTable out;
    out.classes = static_cast<std::size_t>(model.arch.classes);
    out.values.resize(n * out.classes);
    const std::size_t chunks = (n + kInferenceBatch - 1) / kInferenceBatch;
    parallel_chunks(chunks, [&](std::size_t c) {
        thread_local std::unique_ptr<Engine<float>> engine;
        thread_local ArchConfig engine_arch;
        if (!engine || !(engine_arch == model.arch)) {
            engine = std::make_unique<Engine<float>>(model.arch);
            engine_arch = model.arch;
        }
        const std::size_t b0 = c * kInferenceBatch;
        const std::size_t nb = std::min(kInferenceBatch, n - b0);
        engine->load(pixels.subspan(b0 * hw, nb * hw), nb);
        engine->forward(model.params, Mode::inference);
        const auto& lg = engine->logits();
        for (std::size_t b = 0; b < nb; ++b)
            for (std::size_t k = 0; k < out.classes; ++k)
                out.values[(b0 + b) * out.classes + k] = lg[k * nb + b];
    });
    return out;
}

LogitTable forward(const Model& model, const Dataset& ds) {
    if (!(ds.meta.canvas == model.arch.input))
        fail(ErrorKind::dimension, "dataset canvas does not match the model input");
    return forward(model, ds.pixels, ds.size());
}

LogitTable forward_batch_stats(const Model& model, std::span<const std::uint8_t> pixels,
                               std::size_t n) {
    Engine<float> engine(model.arch);
    engine.load(pixels, n);
    engine.forward(model.params, Mode::batch_stats);
    return to_table(engine.logits(), static_cast<std::size_t>(model.arch.classes), n);
}

void freeze_batch_norm_stats(Model& model, std::span<const std::uint8_t> pixels, std::size_t n) {
    Engine<float> engine(model.arch);
    engine.load(pixels, n);
    engine.forward(model.params, Mode::batch_stats);
    for (const auto& [op, mean] : engine.batch_means())
        for (int c = 0; c < op->c; ++c) model.params[op->mean + c] = static_cast<float>((*mean)[c]);
    for (const auto& [op, var] : engine.batch_vars())
        for (int c = 0; c < op->c; ++c) model.params[op->var + c] = static_cast<float>((*var)[c]);
}

template <class T>
double loss_and_gradient(const ArchConfig& arch, std::span<const T> params,
                         std::span<const std::uint8_t> pixels, std::span<const int> labels,
                         std::span<T> grad, std::uint64_t dropout_seed) {
    Engine<T> engine(arch);
    engine.load(pixels, labels.size());
    Rng rng(dropout_seed);
    engine.forward(params, Mode::train, &rng);
    std::vector<T> dlogits;
    const double loss = softmax_xent(engine.logits(), static_cast<std::size_t>(arch.classes),
                                     labels.size(), labels, &dlogits);
    std::fill(grad.begin(), grad.end(), T(0));
    engine.backward(params, std::move(dlogits), grad);
    return loss;
}

template double loss_and_gradient<float>(const ArchConfig&, std::span<const float>,
                                         std::span<const std::uint8_t>, std::span<const int>,
                                         std::span<float>, std::uint64_t);
template double loss_and_gradient<double>(const ArchConfig&, std::span<const double>,
                                          std::span<const std::uint8_t>, std::span<const int>,
                                          std::span<double>, std::uint64_t);

std::vector<double> softmax(std::span<const double> logits, double temperature) {
    std::vector<double> p(logits.size());
    if (logits.empty()) return p;
    const double mx = *std::max_element(logits.begin(), logits.end());
    double s = 0;
    for (std::size_t k = 0; k < logits.size(); ++k) s += p[k] = std::exp((logits[k] - mx) / temperature);
    for (auto& v : p) v /= s;
    return p;
}

double cross_entropy(std::span<const double> logits, int label) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    double s = 0;
    for (double v : logits) s += std::exp(v - mx);
    return mx + std::log(s) - logits[static_cast<std::size_t>(label)];
}

int argmax(std::span<const double> logits) {
    int best = 0;
    for (std::size_t k = 1; k < logits.size(); ++k)
        if (logits[k] > logits[static_cast<std::size_t>(best)]) best = static_cast<int>(k);
    return best;
}

double accuracy(const LogitTable& logits, std::span<const int> labels) {
    if (labels.empty()) fail(ErrorKind::empty_input, "cannot evaluate accuracy on an empty dataset");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) correct += argmax(logits.row(i)) == labels[i];
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

double evaluate(const Model& model, const Dataset& ds) {
    if (ds.empty()) fail(ErrorKind::empty_input, "cannot evaluate on an empty dataset");
    return accuracy(forward(model, ds), ds.classes);
}

std::string history_csv(const std::vector<EpochStats>& history) {
    std::ostringstream os;
    os << "epoch,loss,val_acc\n" << std::setprecision(10);
    for (const auto& h : history) os << h.epoch << ',' << h.loss << ',' << h.val_accuracy << '\n';
    return os.str();
}

TrainResult train(const Dataset& train_set, const ArchConfig& arch, const TrainConfig& cfg,
                  const Dataset* validation_set, const ProgressFn& progress) {
    cfg.validate();
    arch.validate();
    if (train_set.empty()) fail(ErrorKind::empty_input, "training set is empty");
    if (!(train_set.meta.canvas == arch.input))
        fail(ErrorKind::dimension, "training images do not match the architecture input");

    // training / validation index split
    std::vector<std::size_t> train_idx(train_set.size());
    std::iota(train_idx.begin(), train_idx.end(), 0);
    std::vector<std::size_t> val_idx;
    if (validation_set == nullptr && cfg.validation_fraction > 0) {
        Rng split_rng(derive_seed(cfg.seed, "split"));
        shuffle(train_idx, split_rng);
        const auto nval = static_cast<std::size_t>(cfg.validation_fraction * train_set.size());
        val_idx.assign(train_idx.end() - static_cast<std::ptrdiff_t>(nval), train_idx.end());
        train_idx.resize(train_idx.size() - nval);
        std::sort(train_idx.begin(), train_idx.end());
        std::sort(val_idx.begin(), val_idx.end());
    }
    const std::size_t hw = arch.input.pixels();
    auto gather = [&](const Dataset& ds, std::span<const std::size_t> idx, std::vector<std::uint8_t>& px,
                      std::vector<int>& labels) {
        px.resize(idx.size() * hw);
        labels.resize(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const auto img = ds.image(idx[i]);
            std::copy(img.pixels.begin(), img.pixels.end(), px.begin() + static_cast<std::ptrdiff_t>(i * hw));
            labels[i] = ds.classes[idx[i]];
        }
    };
    std::vector<std::uint8_t> val_px;
    std::vector<int> val_labels;
    if (validation_set) {
        val_px = validation_set->pixels;
        val_labels = validation_set->classes;
    } else if (!val_idx.empty()) {
        gather(train_set, val_idx, val_px, val_labels);
    }

    Model model = Model::create(arch, cfg.seed);
    std::vector<bool> trainable(model.params.size(), false);
    for (const auto& e : model.manifest)
        if (e.trainable) std::fill_n(trainable.begin() + static_cast<std::ptrdiff_t>(e.offset), e.size, true);

    Engine<float> engine(arch);
    std::vector<float> grad(model.params.size());
    std::vector<double> m1(model.params.size(), 0.0), m2(model.params.size(), 0.0);
    std::uint64_t step = 0;
    constexpr double kMomentum = 0.1;

    TrainResult result;
    result.model = model;
    double best_acc = -1;
    std::vector<std::uint8_t> batch_px;
    std::vector<int> batch_labels;
    Rng dropout_rng(derive_seed(cfg.seed, "dropout"));
    const std::size_t batches = (train_idx.size() + cfg.batch_size - 1) / cfg.batch_size;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        auto order = train_idx;
        Rng order_rng(derive_seed(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
        shuffle(order, order_rng);
        double epoch_loss = 0;
        for (std::size_t bi = 0; bi < batches; ++bi) {
            const std::size_t b0 = bi * cfg.batch_size;
            const std::size_t nb = std::min<std::size_t>(cfg.batch_size, order.size() - b0);
            gather(train_set, std::span<const std::size_t>(order).subspan(b0, nb), batch_px, batch_labels);
            engine.load(batch_px, nb);
            engine.forward(model.params, Mode::train, &dropout_rng);
            std::vector<float> dlogits;
            const double loss = softmax_xent(engine.logits(), static_cast<std::size_t>(arch.classes), nb,
                                             batch_labels, &dlogits);
            if (!std::isfinite(loss) || loss > 1e3)
                fail(ErrorKind::training_failure, "training diverged at epoch " + std::to_string(epoch) +
                                                      ", batch " + std::to_string(bi) + " (loss " +
                                                      std::to_string(loss) + ")");
            std::fill(grad.begin(), grad.end(), 0.0f);
            engine.backward(model.params, std::move(dlogits), grad);

            ++step;
            const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
            const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
            for (std::size_t k = 0; k < model.params.size(); ++k) {
                if (!trainable[k]) continue;
                const double g = grad[k];
                m1[k] = cfg.beta1 * m1[k] + (1 - cfg.beta1) * g;
                m2[k] = cfg.beta2 * m2[k] + (1 - cfg.beta2) * g * g;
                const double update = cfg.learning_rate * (m1[k] / c1) / (std::sqrt(m2[k] / c2) + cfg.epsilon);
                model.params[k] = static_cast<float>(model.params[k] - update);
            }
            for (const auto& [op, mean] : engine.batch_means())
                for (int c = 0; c < op->c; ++c) {
                    float& rm = model.params[op->mean + c];
                    rm = static_cast<float>((1 - kMomentum) * rm + kMomentum * (*mean)[c]);
                }
            for (const auto& [op, var] : engine.batch_vars())
                for (int c = 0; c < op->c; ++c) {
                    float& rv = model.params[op->var + c];
                    rv = static_cast<float>((1 - kMomentum) * rv + kMomentum * (*var)[c]);
                }
            epoch_loss += loss * static_cast<double>(nb);
            if (progress) progress(epoch, bi, batches, loss);
        }
        model.epochs_seen = epoch;
        EpochStats stats{epoch, epoch_loss / static_cast<double>(train_idx.size()), 0.0};
        if (!val_labels.empty())
            stats.val_accuracy = accuracy(forward(model, val_px, val_labels.size()), val_labels);
        result.history.push_back(stats);
        if (val_labels.empty() || stats.val_accuracy > best_acc) {
            best_acc = stats.val_accuracy;
            result.model = model;
            result.best_epoch = epoch;
        }
    }
    result.model.validate();
    return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const Model& model, const fs::path& dir) {
    model.validate();
    fs::create_directories(dir);
    nlohmann::json manifest = nlohmann::json::array();
    for (const auto& e : model.manifest)
        manifest.push_back({{"name", e.name},
                            {"shape", e.shape},
                            {"offset", e.offset},
                            {"size", e.size},
                            {"trainable", e.trainable}});
    const nlohmann::json meta{{"format", "expecta-model"},
                              {"version", 1},
                              {"arch", model.arch},
                              {"arch_hash", manifest_hash(model.arch)},
                              {"manifest", manifest},
                              {"param_count", model.params.size()},
                              {"epochs_seen", model.epochs_seen},
                              {"seed", model.seed}};
    {
        std::ofstream os(dir / "model.json", std::ios::binary);
        os << meta.dump(2) << '\n';
    }
    std::ofstream os(dir / "weights.f32", std::ios::binary);
    for (float v : model.params) {
        auto bits = std::bit_cast<std::uint32_t>(v);
        char le[4];
        for (int b = 0; b < 4; ++b) le[b] = static_cast<char>((bits >> (8 * b)) & 0xff);
        os.write(le, 4);
    }
    if (!os) fail(ErrorKind::format, "failed writing " + (dir / "weights.f32").string());
}

Model load_checkpoint(const fs::path& dir, const ArchConfig* expected) {
    std::ifstream is(dir / "model.json", std::ios::binary);
    if (!is) fail(ErrorKind::missing_artifact, "model.json missing in " + dir.string());
    nlohmann::json meta;
    try {
        is >> meta;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::format, std::string("model.json: ") + e.what());
    }
    Model m;
    try {
        if (meta.at("format") != "expecta-model" || meta.at("version") != 1)
            fail(ErrorKind::format, "model.json: unsupported checkpoint format");
        m.arch = meta.at("arch").get<ArchConfig>();
        m.epochs_seen = meta.at("epochs_seen").get<int>();
        m.seed = meta.at("seed").get<std::uint64_t>();
        const auto hash = meta.at("arch_hash").get<std::string>();
        if (hash != manifest_hash(m.arch))
            fail(ErrorKind::format, "model.json: manifest hash does not match its architecture");
        if (expected && manifest_hash(*expected) != hash)
            fail(ErrorKind::format, "checkpoint architecture " + m.arch.name + " (hash " + hash +
                                        ") does not match the requested " + expected->name +
                                        " (hash " + manifest_hash(*expected) + ")");
        m.manifest = build_manifest(m.arch);
        std::size_t i = 0;
        for (const auto& e : meta.at("manifest")) {
            if (i >= m.manifest.size() || e.at("name") != m.manifest[i].name ||
                e.at("offset").get<std::size_t>() != m.manifest[i].offset ||
                e.at("size").get<std::size_t>() != m.manifest[i].size)
                fail(ErrorKind::format, "model.json: manifest entry " + std::to_string(i) +
                                            " disagrees with the architecture");
            ++i;
        }
        if (i != m.manifest.size()) fail(ErrorKind::format, "model.json: manifest is incomplete");
        const auto count = meta.at("param_count").get<std::size_t>();
        const auto& last = m.manifest.back();
        if (count != last.offset + last.size)
            fail(ErrorKind::format, "model.json: param_count " + std::to_string(count) +
                                        " disagrees with the manifest (" +
                                        std::to_string(last.offset + last.size) + ")");
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::format, std::string("model.json: ") + e.what());
    }

    const auto& last = m.manifest.back();
    const std::size_t count = last.offset + last.size;
    std::ifstream ws(dir / "weights.f32", std::ios::binary | std::ios::ate);
    if (!ws) fail(ErrorKind::missing_artifact, "weights.f32 missing in " + dir.string());
    const auto bytes = static_cast<std::size_t>(ws.tellg());
    if (bytes != count * 4)
        fail(ErrorKind::format, "weights.f32 holds " + std::to_string(bytes) + " bytes; manifest expects " +
                                    std::to_string(count * 4));
    ws.seekg(0);
    std::vector<unsigned char> raw(bytes);
    ws.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(bytes));
    m.params.resize(count);
    for (std::size_t k = 0; k < count; ++k) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(raw[4 * k + b]) << (8 * b);
        m.params[k] = std::bit_cast<float>(bits);
    }
    m.validate();
    return m;
}

} // namespace expecta
