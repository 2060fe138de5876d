#include "qdiff/nn.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

namespace qdiff {

std::string site_name(std::size_t layer, std::string_view kind) {
    return "layer" + std::to_string(layer) + "." + std::string(kind);
}

namespace {
Tensor kaiming(Rng& rng, std::size_t out, std::size_t in) {
    std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / static_cast<double>(in)));
    Tensor w({out, in});
    for (auto& v : w.raw()) v = dist(rng);
    return w;
}
}  // namespace

DenoiserModel DenoiserModel::init(const ModelArch& arch, Rng& rng) {
    DenoiserModel m = zeros(arch);
    for (auto& layer : m.layers) {
        layer.weight = kaiming(rng, layer.out_dim(), layer.in_dim());
        if (layer.has_time_projection()) layer.time_weight = kaiming(rng, layer.out_dim(), arch.time_embed_dim);
    }
    // small output layer keeps the initial noise prediction near zero
    m.layers.back().weight *= 0.1;
    return m;
}

DenoiserModel DenoiserModel::zeros(const ModelArch& arch) {
    if (arch.input_dim == 0 || arch.width == 0) throw std::invalid_argument("model dimensions must be positive");
    if (arch.time_embed_dim % 2 != 0) throw std::invalid_argument("time embedding dimension must be even");
    DenoiserModel m;
    m.input_dim = arch.input_dim;
    m.time_embed_dim = arch.time_embed_dim;
    std::size_t in = arch.input_dim;
    for (std::size_t i = 0; i < arch.hidden_layers; ++i) {
        LinearLayer layer;
        layer.weight = Tensor({arch.width, in});
        layer.bias = Tensor({arch.width});
        layer.activation = Activation::silu;
        layer.time_weight = Tensor({arch.width, arch.time_embed_dim});
        layer.time_bias = Tensor({arch.width});
        m.layers.push_back(std::move(layer));
        in = arch.width;
    }
    LinearLayer out;
    out.weight = Tensor({arch.input_dim, in});
    out.bias = Tensor({arch.input_dim});
    m.layers.push_back(std::move(out));
    return m;
}

bool DenoiserModel::downstream_of_silu(std::size_t i) const {
    return i > 0 && i < layers.size() && layers[i - 1].activation == Activation::silu;
}

void DenoiserModel::validate() const {
    if (layers.empty()) throw std::invalid_argument("model has no layers");
    std::size_t in = input_dim;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        if (l.weight.rank() != 2 || l.in_dim() != in)
            throw std::invalid_argument(site_name(i, "weight") + ": expected input width " + std::to_string(in) +
                                        ", got shape " + shape_string(l.weight.shape()));
        if (l.bias.size() != l.out_dim()) throw std::invalid_argument(site_name(i, "bias") + ": wrong length");
        if (l.has_time_projection() &&
            (l.time_weight.rows() != l.out_dim() || l.time_weight.cols() != time_embed_dim ||
             l.time_bias.size() != l.out_dim()))
            throw std::invalid_argument(site_name(i, "time_weight") + ": wrong shape");
        in = l.out_dim();
    }
    if (in != input_dim) throw std::invalid_argument("output width must equal input_dim");
}

void DenoiserModel::for_each_param(const std::function<void(const std::string&, const Tensor&)>& fn) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        fn(site_name(i, "weight"), l.weight);
        fn(site_name(i, "bias"), l.bias);
        if (l.has_time_projection()) {
            fn(site_name(i, "time_weight"), l.time_weight);
            fn(site_name(i, "time_bias"), l.time_bias);
        }
    }
}

void DenoiserModel::for_each_param(const std::function<void(const std::string&, Tensor&)>& fn) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
        auto& l = layers[i];
        fn(site_name(i, "weight"), l.weight);
        fn(site_name(i, "bias"), l.bias);
        if (l.has_time_projection()) {
            fn(site_name(i, "time_weight"), l.time_weight);
            fn(site_name(i, "time_bias"), l.time_bias);
        }
    }
}

Tensor time_embedding(double t, std::size_t d) {
    if (d == 0 || d % 2 != 0) throw std::invalid_argument("time embedding dimension must be even and positive");
    Tensor emb({d});
    for (std::size_t k = 0; k < d / 2; ++k) {
        const double w = std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(d));
        emb[2 * k] = std::sin(t * w);
        emb[2 * k + 1] = std::cos(t * w);
    }
    return emb;
}

Tensor time_embedding(std::span<const int> ts, std::size_t d) {
    Tensor out({ts.size(), d});
    std::map<int, Tensor> cache;  // batches usually repeat a handful of t
    for (std::size_t r = 0; r < ts.size(); ++r) {
        auto it = cache.find(ts[r]);
        if (it == cache.end()) it = cache.emplace(ts[r], time_embedding(static_cast<double>(ts[r]), d)).first;
        std::copy(it->second.raw().begin(), it->second.raw().end(), out.row(r).begin());
    }
    return out;
}

std::vector<int> expand_timesteps(std::span<const int> ts, std::size_t rows) {
    if (ts.size() == rows) return {ts.begin(), ts.end()};
    if (ts.size() == 1) return std::vector<int>(rows, ts[0]);
    throw std::invalid_argument("expected " + std::to_string(rows) + " timesteps, got " + std::to_string(ts.size()));
}

namespace {
void check_input(const DenoiserModel& model, const Tensor& x) {
    if (x.rank() != 2 || x.cols() != model.input_dim)
        throw std::invalid_argument(site_name(0, "weight") + ": input shape " + shape_string(x.shape()) +
                                    " does not match input_dim " + std::to_string(model.input_dim));
}
}  // namespace

Tensor forward(const DenoiserModel& model, const Tensor& x, std::span<const int> ts, const ActivationProbe& probe) {
    check_input(model, x);
    const auto steps = expand_timesteps(ts, x.rows());
    const Tensor emb = time_embedding(steps, model.time_embed_dim);
    Tensor h = x;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const auto& l = model.layers[i];
        if (h.cols() != l.in_dim())
            throw std::invalid_argument(site_name(i, "weight") + ": input width " + std::to_string(h.cols()) +
                                        " vs " + std::to_string(l.in_dim()));
        if (probe) probe(site_name(i, "act"), h);
        Tensor y = linear_forward(h, l.weight, &l.bias);
        if (l.has_time_projection()) y += linear_forward(emb, l.time_weight, &l.time_bias);
        if (l.activation == Activation::silu) y = silu(y);
        h = std::move(y);
    }
    return h;
}

Tensor forward(const DenoiserModel& model, const Tensor& x, int t) {
    const int ts[1] = {t};
    return forward(model, x, ts);
}

Var forward(const DenoiserModel& model, Tape& tape, Var x, std::span<const int> ts, bool trainable) {
    check_input(model, x.value());
    const auto steps = expand_timesteps(ts, x.value().rows());
    Var emb = tape.constant(time_embedding(steps, model.time_embed_dim));
    Var h = x;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const auto& l = model.layers[i];
        Var w = tape.param(site_name(i, "weight"), l.weight, trainable);
        Var b = tape.param(site_name(i, "bias"), l.bias, trainable);
        Var y = ad::linear(h, w, b);
        if (l.has_time_projection()) {
            Var tw = tape.param(site_name(i, "time_weight"), l.time_weight, trainable);
            Var tb = tape.param(site_name(i, "time_bias"), l.time_bias, trainable);
            y = ad::add(y, ad::linear(emb, tw, tb));
        }
        if (l.activation == Activation::silu) y = ad::silu(y);
        h = y;
    }
    return h;
}

}  // namespace qdiff
