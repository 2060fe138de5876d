#pragma once

#include "qdiff/rng.hpp"
#include "qdiff/tape.hpp"
#include "qdiff/tensor.hpp"

#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace qdiff {

enum class Activation { none, silu };

/// Affine map y = x W^T + b, optionally with a time projection added before
/// the activation: y = act(x W^T + b + emb(t) P^T + p).
struct LinearLayer {
    Tensor weight;       // [out, in]
    Tensor bias;         // [out]
    Activation activation = Activation::none;
    Tensor time_weight;  // [out, d] or empty
    Tensor time_bias;    // [out] or empty

    std::size_t in_dim() const { return weight.cols(); }
    std::size_t out_dim() const { return weight.rows(); }
    bool has_time_projection() const { return !time_weight.empty(); }
};

struct ModelArch {
    std::size_t input_dim = 2;
    std::size_t width = 64;
    std::size_t hidden_layers = 3;
    std::size_t time_embed_dim = 32;
};

/// Noise-prediction MLP: `hidden_layers` time-conditioned SiLU blocks then a
/// linear output layer back to input_dim.
struct DenoiserModel {
    std::size_t input_dim = 0;
    std::size_t time_embed_dim = 0;
    std::vector<LinearLayer> layers;

    static DenoiserModel init(const ModelArch& arch, Rng& rng);
    static DenoiserModel zeros(const ModelArch& arch);

    /// True when layer i consumes the output of a SiLU.
    bool downstream_of_silu(std::size_t i) const;

    void validate() const;

    /// Visits every parameter tensor under a stable name ("layer1.weight").
    void for_each_param(const std::function<void(const std::string&, const Tensor&)>& fn) const;
    void for_each_param(const std::function<void(const std::string&, Tensor&)>& fn);
};

std::string site_name(std::size_t layer, std::string_view kind);  // "layer2.act"

/// Sinusoidal embedding: emb[2k] = sin(t w_k), emb[2k+1] = cos(t w_k),
/// w_k = 10000^(-2k/d). Throws for odd d.
Tensor time_embedding(double t, std::size_t d);
Tensor time_embedding(std::span<const int> ts, std::size_t d);  // [B, d]

/// Called with the input of every linear layer, keyed by site name.
using ActivationProbe = std::function<void(const std::string& site, const Tensor& input)>;

/// Plain forward pass. `ts` holds one timestep per row of `x` (or a single one
/// broadcast to all rows).
Tensor forward(const DenoiserModel& model, const Tensor& x, std::span<const int> ts,
               const ActivationProbe& probe = {});
Tensor forward(const DenoiserModel& model, const Tensor& x, int t);

/// Taped forward; parameters are registered with `trainable`.
Var forward(const DenoiserModel& model, Tape& tape, Var x, std::span<const int> ts, bool trainable);

/// Broadcasts a single timestep to `rows` entries.
std::vector<int> expand_timesteps(std::span<const int> ts, std::size_t rows);

}  // namespace qdiff
