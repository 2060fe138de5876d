#pragma once

#include "qdiff/tensor.hpp"

#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace qdiff {

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
};

/// Reverse-mode recorder for the small op set the models need. Values are
/// computed eagerly; a backward closure is kept only for nodes that depend on
/// a trainable parameter, so gradients of frozen tensors are never built.
class Tape {
public:
    using Backward = std::function<void(Tape&, const Tensor& grad_out)>;

    Var constant(Tensor value);
    /// Registers a named parameter. Only `trainable` ones receive gradients.
    Var param(const std::string& name, const Tensor& value, bool trainable);

    Var record(Tensor value, std::vector<Var> inputs, Backward backward);

    const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
    bool empty() const { return nodes_.empty(); }
    std::size_t size() const { return nodes_.size(); }

    /// Adds `g` into the gradient slot of `v` (no-op for frozen nodes).
    void accumulate(Var v, const Tensor& g);
    /// Mutable gradient slot of `v`, zero-initialised on first access.
    Tensor& grad_slot(Var v);

    /// Gradients of scalar `loss` for every trainable parameter. The recorded
    /// graph is left intact, so repeated calls return identical maps.
    std::map<std::string, Tensor> backward(Var loss);

private:
    struct Node {
        Tensor value;
        bool requires_grad = false;
        std::string param_name;
        bool trainable = false;
        Backward backward;
    };
    std::deque<Node> nodes_;  // stable addresses: values are referenced while recording
    std::vector<std::optional<Tensor>> grads_;
};

/// Differentiable ops. All inputs must live on the same tape.
namespace ad {

Var linear(Var x, Var w, std::optional<Var> bias = std::nullopt);
Var add(Var a, Var b);
Var silu(Var x);
Var scale(Var x, double s);
/// x[:, j] * gates[:, col] for every j.
Var rowscale(Var x, Var gates, std::size_t col);
/// Scalar mean((a - b)^2).
Var mse(Var a, Var b);
/// Scalar (1/B) sum_b w[b] * mean_j (a[b, j] - b[b, j])^2; w is a constant per row.
Var weighted_row_mse(Var a, Var b, std::vector<double> row_weights);
/// Scalar sum(x * c) for a constant c of the same shape.
Var dot_const(Var x, const Tensor& c);
Var sum(Var x);

/// Per-row, per-group softmax over `h` logits. With `hard`, the forward value
/// is the argmax one-hot (ties to the lowest index) while the backward pass
/// uses the softmax Jacobian (straight-through).
Var route_ste(Var logits, std::size_t groups, std::size_t h, bool hard);

}  // namespace ad

double silu(double x);
Tensor silu(const Tensor& x);

}  // namespace qdiff
