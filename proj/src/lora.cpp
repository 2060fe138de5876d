#include "qdiff/lora.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

namespace qdiff {

QuantizedModel::QuantizedModel(DenoiserModel base, const std::vector<SiteCalibration>& sites)
    : base_(std::move(base)), sites_(sites) {
    base_.validate();
    const std::size_t n = base_.layers.size();
    weight_q_.resize(n);
    act_q_.resize(n);
    for (const auto& s : sites) {
        if (s.layer >= n) throw std::invalid_argument("calibration site " + s.site + " has no matching layer");
        if (s.mode == QuantMode::passthrough) continue;
        auto& slot = s.role == TensorRole::weight ? weight_q_[s.layer] : act_q_[s.layer];
        slot = FpQuantizer(s.params);
    }
    for (std::size_t i = 0; i < n; ++i) weight_hat_.push_back(weight_q_[i].apply(base_.layers[i].weight));
}

QuantizedModel QuantizedModel::full_precision(DenoiserModel base) { return QuantizedModel(std::move(base), {}); }

std::vector<std::size_t> QuantizedModel::adapted_layers() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 1; i + 1 < base_.layers.size(); ++i) out.push_back(i);
    return out;
}

std::optional<std::size_t> LoraHub::slot_of(std::size_t layer) const {
    for (std::size_t s = 0; s < layers.size(); ++s)
        if (layers[s] == layer) return s;
    return std::nullopt;
}

LoraHub LoraHub::init(const QuantizedModel& model, std::size_t hub_size, std::size_t rank, double alpha, Rng& rng) {
    if (hub_size == 0 || rank == 0) throw std::invalid_argument("hub size and rank must be positive");
    LoraHub hub;
    hub.rank = rank;
    hub.hub_size = hub_size;
    hub.alpha = alpha;
    hub.layers = model.adapted_layers();
    for (std::size_t layer : hub.layers) {
        const auto& w = model.base().layers[layer].weight;
        std::vector<LoraAdapter> slot;
        for (std::size_t k = 0; k < hub_size; ++k) {
            Tensor a = randn(rng, {w.rows(), rank}, std::sqrt(1.0 / static_cast<double>(w.cols())));
            slot.push_back({std::move(a), Tensor({rank, w.cols()})});
        }
        hub.adapters.push_back(std::move(slot));
    }
    return hub;
}

void LoraHub::validate(const QuantizedModel& model) const {
    if (adapters.size() != layers.size()) throw std::invalid_argument("LoRA hub: slot count mismatch");
    for (std::size_t s = 0; s < layers.size(); ++s) {
        if (layers[s] >= model.layer_count()) throw std::invalid_argument("LoRA hub: layer out of range");
        const auto& w = model.base().layers[layers[s]].weight;
        if (adapters[s].size() != hub_size) throw std::invalid_argument("LoRA hub: adapter count mismatch");
        for (const auto& a : adapters[s]) {
            if (a.A.rank() != 2 || a.A.rows() != w.rows() || a.A.cols() != rank || a.B.rank() != 2 ||
                a.B.rows() != rank || a.B.cols() != w.cols())
                throw std::invalid_argument("LoRA adapter shape mismatch on layer " + std::to_string(layers[s]));
        }
    }
}

void LoraHub::for_each_param(const std::function<void(const std::string&, const Tensor&)>& fn) const {
    for (std::size_t s = 0; s < adapters.size(); ++s)
        for (std::size_t k = 0; k < adapters[s].size(); ++k) {
            const auto base = "lora" + std::to_string(layers[s]) + "." + std::to_string(k);
            fn(base + ".A", adapters[s][k].A);
            fn(base + ".B", adapters[s][k].B);
        }
}

void LoraHub::for_each_param(const std::function<void(const std::string&, Tensor&)>& fn) {
    for (std::size_t s = 0; s < adapters.size(); ++s)
        for (std::size_t k = 0; k < adapters[s].size(); ++k) {
            const auto base = "lora" + std::to_string(layers[s]) + "." + std::to_string(k);
            fn(base + ".A", adapters[s][k].A);
            fn(base + ".B", adapters[s][k].B);
        }
}

Router Router::zeros(std::size_t embed_dim, std::size_t groups, std::size_t hub_size) {
    if (embed_dim == 0 || embed_dim % 2) throw std::invalid_argument("router embedding must be even");
    Router r;
    r.embed_dim = embed_dim;
    r.groups = groups;
    r.hub_size = hub_size;
    r.w1 = Tensor({embed_dim, embed_dim});
    r.b1 = Tensor({embed_dim});
    r.w2 = Tensor({groups * hub_size, embed_dim});
    r.b2 = Tensor({groups * hub_size});
    return r;
}

Router Router::init(std::size_t embed_dim, std::size_t groups, std::size_t hub_size, Rng& rng, double out_std) {
    Router r = zeros(embed_dim, groups, hub_size);
    r.w1 = randn(rng, {embed_dim, embed_dim}, std::sqrt(1.0 / static_cast<double>(embed_dim)));
    r.w2 = randn(rng, {groups * hub_size, embed_dim}, out_std);
    return r;
}

void Router::for_each_param(const std::function<void(const std::string&, const Tensor&)>& fn) const {
    fn("router.w1", w1);
    fn("router.b1", b1);
    fn("router.w2", w2);
    fn("router.b2", b2);
}

void Router::for_each_param(const std::function<void(const std::string&, Tensor&)>& fn) {
    fn("router.w1", w1);
    fn("router.b1", b1);
    fn("router.w2", w2);
    fn("router.b2", b2);
}

namespace {
Var router_logits(const Router& router, Tape& tape, std::span<const int> ts, bool trainable) {
    Var emb = tape.constant(time_embedding(ts, router.embed_dim));
    Var h = ad::silu(ad::linear(emb, tape.param("router.w1", router.w1, trainable),
                                tape.param("router.b1", router.b1, trainable)));
    return ad::linear(h, tape.param("router.w2", router.w2, trainable), tape.param("router.b2", router.b2, trainable));
}
}  // namespace

Var route_gates(const Router& router, Tape& tape, std::span<const int> ts, bool trainable, bool hard) {
    return ad::route_ste(router_logits(router, tape, ts, trainable), router.groups, router.hub_size, hard);
}

RouteResult route(const Router& router, int t) {
    Tape tape;
    const int ts[1] = {t};
    Var logits = router_logits(router, tape, ts, false);
    Var hard = ad::route_ste(logits, router.groups, router.hub_size, true);
    Var soft = ad::route_ste(logits, router.groups, router.hub_size, false);
    const std::vector<std::size_t> shape{router.groups, router.hub_size};
    return {Tensor(shape, hard.value().raw()), Tensor(shape, soft.value().raw())};
}

const char* to_string(Strategy s) {
    switch (s) {
        case Strategy::split_half: return "split_half";
        case Strategy::random: return "random";
        case Strategy::router: return "router";
        default: return "single";
    }
}

Strategy parse_strategy(const std::string& s) {
    if (s == "single") return Strategy::single;
    if (s == "split_half") return Strategy::split_half;
    if (s == "random") return Strategy::random;
    if (s == "router") return Strategy::router;
    throw std::invalid_argument("unknown LoRA strategy '" + s + "'");
}

std::vector<std::size_t> Allocation::choose(int t, std::size_t groups, std::size_t h) const {
    std::vector<std::size_t> out(groups, 0);
    switch (strategy) {
        case Strategy::single: break;
        case Strategy::split_half: {
            if (h < 2) throw std::invalid_argument("split_half needs a hub of at least 2 adapters");
            const std::size_t k = t >= T / 2 ? 0 : 1;
            for (auto& v : out) v = k;
            break;
        }
        case Strategy::random: {
            if (!rng) throw std::logic_error("random allocation needs an rng");
            std::uniform_int_distribution<std::size_t> pick(0, h - 1);
            for (auto& v : out) v = pick(*rng);
            break;
        }
        case Strategy::router: {
            if (!router) throw std::logic_error("router allocation needs a router");
            const auto r = route(*router, t);
            for (std::size_t g = 0; g < groups; ++g)
                for (std::size_t k = 0; k < h; ++k)
                    if (r.one_hot.at(g, k) == 1.0) out[g] = k;
            break;
        }
    }
    return out;
}

namespace {
Var allocation_gates(const Allocation& alloc, const LoraHub& hub, Tape& tape, std::span<const int> ts,
                     bool train_router) {
    const std::size_t groups = hub.groups(), h = hub.hub_size;
    if (alloc.strategy == Strategy::router) {
        if (!alloc.router) throw std::logic_error("router allocation needs a router");
        if (alloc.router->groups != groups || alloc.router->hub_size != h)
            throw std::invalid_argument("router shape does not match the LoRA hub");
        return route_gates(*alloc.router, tape, ts, train_router, alloc.hard);
    }
    // One choice per distinct timestep in the batch, so random allocation is
    // redrawn per (batch, t) rather than per row.
    std::map<int, std::vector<std::size_t>> picks;
    Tensor g({ts.size(), groups * h});
    for (std::size_t r = 0; r < ts.size(); ++r) {
        auto it = picks.find(ts[r]);
        if (it == picks.end()) it = picks.emplace(ts[r], alloc.choose(ts[r], groups, h)).first;
        for (std::size_t s = 0; s < groups; ++s) g.at(r, s * h + it->second[s]) = 1.0;
    }
    return tape.constant(std::move(g));
}
}  // namespace

Var quantized_forward(const QuantizedModel& model, const LoraHub* hub, const Allocation& alloc, Tape& tape, Var x,
                      std::span<const int> ts_in, const QuantForwardOptions& options) {
    const auto& base = model.base();
    const Tensor& xv = x.value();
    if (xv.rank() != 2 || xv.cols() != base.input_dim)
        throw std::invalid_argument(site_name(0, "weight") + ": input shape " + shape_string(xv.shape()) +
                                    " does not match input_dim " + std::to_string(base.input_dim));
    const auto ts = expand_timesteps(ts_in, xv.rows());
    if (hub) hub->validate(model);

    std::optional<Var> gates;
    if (hub && hub->groups() > 0) gates = allocation_gates(alloc, *hub, tape, ts, options.train_router);
    const bool gates_need_grad = gates && tape.requires_grad(*gates);

    Var emb = tape.constant(time_embedding(ts, base.time_embed_dim));
    Var h = x;
    for (std::size_t i = 0; i < base.layers.size(); ++i) {
        const auto& l = base.layers[i];
        const auto site = site_name(i, "act");
        Var xq = fake_quant_ste(h, model.act_quantizer(i), options.replay, site);
        Var y = ad::linear(xq, tape.constant(model.quantized_weight(i)), tape.constant(l.bias));
        const auto slot = hub ? hub->slot_of(i) : std::nullopt;
        if (slot) {
            const std::size_t hs = hub->hub_size;
            const Tensor& gv = gates->value();
            for (std::size_t k = 0; k < hs; ++k) {
                const std::size_t col = *slot * hs + k;
                bool used = gates_need_grad;
                for (std::size_t r = 0; r < gv.rows() && !used; ++r) used = gv.at(r, col) != 0.0;
                if (!used) continue;
                const auto& ad_k = hub->adapters[*slot][k];
                const auto name = "lora" + std::to_string(i) + "." + std::to_string(k);
                Var a = tape.param(name + ".A", ad_k.A, options.train_lora);
                Var b = tape.param(name + ".B", ad_k.B, options.train_lora);
                Var low = ad::scale(ad::linear(ad::linear(xq, b), a), hub->scale());
                y = ad::add(y, ad::rowscale(low, *gates, col));
            }
        }
        if (l.has_time_projection())
            y = ad::add(y, ad::linear(emb, tape.constant(l.time_weight), tape.constant(l.time_bias)));
        if (l.activation == Activation::silu) y = ad::silu(y);
        h = y;
    }
    return h;
}

Tensor quantized_predict(const QuantizedModel& model, const LoraHub* hub, const Allocation& alloc, const Tensor& x,
                         int t) {
    Tape tape;
    const int ts[1] = {t};
    return quantized_forward(model, hub, alloc, tape, tape.constant(x), ts).value();
}

std::vector<std::vector<std::size_t>> allocation_table(const Allocation& alloc, std::size_t groups, std::size_t h) {
    std::vector<std::vector<std::size_t>> table;
    for (int t = 0; t < alloc.T; ++t) table.push_back(alloc.choose(t, groups, h));
    return table;
}

std::vector<std::vector<std::size_t>> allocation_histogram(const std::vector<std::vector<std::size_t>>& table,
                                                           std::size_t groups, std::size_t h) {
    std::vector<std::vector<std::size_t>> counts(groups, std::vector<std::size_t>(h, 0));
    for (const auto& row : table)
        for (std::size_t g = 0; g < groups; ++g) ++counts[g].at(row.at(g));
    return counts;
}

}  // namespace qdiff
