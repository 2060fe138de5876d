#pragma once

#include "qdiff/calib.hpp"
#include "qdiff/fpq.hpp"
#include "qdiff/nn.hpp"
#include "qdiff/tape.hpp"

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace qdiff {

/// Frozen base model with calibrated weight/activation quantizers per layer.
/// Weights are quantized once at construction.
class QuantizedModel {
public:
    QuantizedModel() = default;
    QuantizedModel(DenoiserModel base, const std::vector<SiteCalibration>& sites);

    /// Every quantizer pass-through.
    static QuantizedModel full_precision(DenoiserModel base);

    const DenoiserModel& base() const { return base_; }
    std::size_t layer_count() const { return base_.layers.size(); }
    const FpQuantizer& weight_quantizer(std::size_t i) const { return weight_q_.at(i); }
    const FpQuantizer& act_quantizer(std::size_t i) const { return act_q_.at(i); }
    const Tensor& quantized_weight(std::size_t i) const { return weight_hat_.at(i); }
    const std::vector<SiteCalibration>& sites() const { return sites_; }

    /// Layers that carry adapters: all but the input and output layers.
    std::vector<std::size_t> adapted_layers() const;

private:
    DenoiserModel base_;
    std::vector<FpQuantizer> weight_q_, act_q_;
    std::vector<Tensor> weight_hat_;
    std::vector<SiteCalibration> sites_;
};

/// Low-rank delta (alpha / r) * A * B for one layer weight of shape [out, in].
struct LoraAdapter {
    Tensor A;  // [out, r]
    Tensor B;  // [r, in]
};

/// h adapters for each adapted layer.
struct LoraHub {
    std::size_t rank = 4;
    std::size_t hub_size = 1;
    double alpha = 4.0;
    std::vector<std::size_t> layers;                   // adapted layer indices
    std::vector<std::vector<LoraAdapter>> adapters;    // [slot][k]

    double scale() const { return alpha / static_cast<double>(rank); }
    std::size_t groups() const { return layers.size(); }
    /// Slot of `layer` in `layers`, or nullopt.
    std::optional<std::size_t> slot_of(std::size_t layer) const;

    /// A ~ N(0, 1/in), B = 0: the initial delta is exactly zero.
    static LoraHub init(const QuantizedModel& model, std::size_t hub_size, std::size_t rank, double alpha, Rng& rng);

    void validate(const QuantizedModel& model) const;

    void for_each_param(const std::function<void(const std::string&, const Tensor&)>& fn) const;
    void for_each_param(const std::function<void(const std::string&, Tensor&)>& fn);
};

/// Shared timestep router: emb(t) -> SiLU(W1 emb + b1) -> W2 h + b2, giving
/// groups x hub_size logits.
struct Router {
    std::size_t embed_dim = 16;
    std::size_t groups = 0;
    std::size_t hub_size = 1;
    Tensor w1, b1, w2, b2;

    static Router init(std::size_t embed_dim, std::size_t groups, std::size_t hub_size, Rng& rng, double out_std);
    static Router zeros(std::size_t embed_dim, std::size_t groups, std::size_t hub_size);

    void for_each_param(const std::function<void(const std::string&, const Tensor&)>& fn) const;
    void for_each_param(const std::function<void(const std::string&, Tensor&)>& fn);
};

struct RouteResult {
    Tensor one_hot;  // [groups, h]
    Tensor soft;     // [groups, h], rows sum to 1
};

RouteResult route(const Router& router, int t);

/// Gates for a batch: [B, groups * h]. Hard mode gives one-hot values with the
/// softmax Jacobian in backward; soft mode returns the softmax itself.
Var route_gates(const Router& router, Tape& tape, std::span<const int> ts, bool trainable, bool hard);

enum class Strategy { single, split_half, random, router };
const char* to_string(Strategy s);
Strategy parse_strategy(const std::string& s);

/// How adapters are picked per timestep.
struct Allocation {
    Strategy strategy = Strategy::single;
    int T = 1;                       // split_half threshold is T / 2
    const Router* router = nullptr;  // Strategy::router
    Rng* rng = nullptr;              // Strategy::random
    bool hard = true;                // soft routing exists for gradient checks

    /// Chosen adapter per layer slot for one timestep (deterministic strategies).
    std::vector<std::size_t> choose(int t, std::size_t groups, std::size_t h) const;
};

struct QuantForwardOptions {
    bool train_lora = false;
    bool train_router = false;
    SteReplay* replay = nullptr;
};

/// eps prediction of the quantized model with adapters selected by `alloc`.
/// Each layer: act_q(x) (W_hat + (alpha/r) A_k B_k)^T + b, k per row.
Var quantized_forward(const QuantizedModel& model, const LoraHub* hub, const Allocation& alloc, Tape& tape, Var x,
                      std::span<const int> ts, const QuantForwardOptions& options = {});

Tensor quantized_predict(const QuantizedModel& model, const LoraHub* hub, const Allocation& alloc, const Tensor& x,
                         int t);

/// usage[t][slot] = chosen adapter, for every t in [0, T).
std::vector<std::vector<std::size_t>> allocation_table(const Allocation& alloc, std::size_t groups, std::size_t h);

/// counts[slot][k] = number of timesteps routed to adapter k.
std::vector<std::vector<std::size_t>> allocation_histogram(const std::vector<std::vector<std::size_t>>& table,
                                                           std::size_t groups, std::size_t h);

}  // namespace qdiff
