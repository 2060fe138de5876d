#include "qdiff/tape.hpp"

#include "qdiff/kernels.hpp"

#include <cmath>
#include <stdexcept>

namespace qdiff {

const Tensor& Var::value() const {
    if (!tape) throw std::logic_error("Var not attached to a tape");
    return tape->value(*this);
}

Var Tape::constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), false, {}, false, {}});
    return Var{this, nodes_.size() - 1};
}

Var Tape::param(const std::string& name, const Tensor& value, bool trainable) {
    nodes_.push_back(Node{value, trainable, name, trainable, {}});
    return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<Var> inputs, Backward backward) {
    bool rg = false;
    for (const auto& in : inputs) {
        if (in.tape != this) throw std::logic_error("op inputs recorded on a different tape");
        rg = rg || nodes_[in.id].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), rg, {}, false, rg ? std::move(backward) : Backward{}});
    return Var{this, nodes_.size() - 1};
}

Tensor& Tape::grad_slot(Var v) {
    auto& slot = grads_.at(v.id);
    if (!slot) slot = Tensor(nodes_[v.id].value.shape());
    return *slot;
}

void Tape::accumulate(Var v, const Tensor& g) {
    if (!nodes_.at(v.id).requires_grad) return;
    grad_slot(v) += g;
}

std::map<std::string, Tensor> Tape::backward(Var loss) {
    if (nodes_.empty()) throw std::logic_error("backward on an empty tape");
    if (loss.tape != this || loss.id >= nodes_.size()) throw std::logic_error("loss is not recorded on this tape");
    if (nodes_[loss.id].value.size() != 1) throw std::invalid_argument("backward needs a scalar loss");

    grads_.assign(nodes_.size(), std::nullopt);
    std::map<std::string, Tensor> out;
    if (nodes_[loss.id].requires_grad) {
        grads_[loss.id] = Tensor(nodes_[loss.id].value.shape(), 1.0);
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            auto& node = nodes_[i];
            if (!node.requires_grad || !grads_[i] || !node.backward) continue;
            node.backward(*this, *grads_[i]);
        }
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        const auto& node = nodes_[i];
        if (!node.trainable) continue;
        Tensor g = grads_[i] ? *grads_[i] : Tensor(node.value.shape());
        auto [it, inserted] = out.try_emplace(node.param_name, g);
        if (!inserted) it->second += g;
    }
    grads_.clear();
    return out;
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }

Tensor silu(const Tensor& x) {
    Tensor y = x;
    for (auto& v : y.raw()) v = silu(v);
    return y;
}

namespace ad {

namespace {
Tape& tape_of(Var v) {
    if (!v.tape) throw std::logic_error("Var not attached to a tape");
    return *v.tape;
}

Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }
}  // namespace

Var linear(Var x, Var w, std::optional<Var> bias) {
    Tape& tape = tape_of(x);
    const Tensor* b = bias ? &bias->value() : nullptr;
    Tensor y = linear_forward(x.value(), w.value(), b);
    std::vector<Var> inputs{x, w};
    if (bias) inputs.push_back(*bias);
    return tape.record(std::move(y), inputs, [x, w, bias](Tape& t, const Tensor& gy) {
        const Tensor& xv = t.value(x);
        const Tensor& wv = t.value(w);
        const std::size_t batch = xv.rows(), in = xv.cols(), out = wv.rows();
        if (t.requires_grad(x)) {
            Tensor gx(xv.shape());
            kernels::matmul_nn(gy.values(), wv.values(), gx.values(), batch, in, out);
            t.accumulate(x, gx);
        }
        if (t.requires_grad(w)) {
            kernels::matmul_tn_acc(gy.values(), xv.values(), t.grad_slot(w).values(), batch, in, out);
        }
        if (bias && t.requires_grad(*bias)) {
            Tensor& gb = t.grad_slot(*bias);
            for (std::size_t r = 0; r < batch; ++r)
                for (std::size_t c = 0; c < out; ++c) gb[c] += gy[r * out + c];
        }
    });
}

Var add(Var a, Var b) {
    Tape& tape = tape_of(a);
    Tensor y = a.value() + b.value();
    return tape.record(std::move(y), {a, b}, [a, b](Tape& t, const Tensor& g) {
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

Var silu(Var x) {
    Tape& tape = tape_of(x);
    Tensor y = qdiff::silu(x.value());
    return tape.record(std::move(y), {x}, [x](Tape& t, const Tensor& g) {
        const Tensor& xv = t.value(x);
        Tensor gx(xv.shape());
        for (std::size_t i = 0; i < xv.size(); ++i) {
            const double s = 1.0 / (1.0 + std::exp(-xv[i]));
            gx[i] = g[i] * (s * (1.0 + xv[i] * (1.0 - s)));
        }
        t.accumulate(x, gx);
    });
}

Var scale(Var x, double s) {
    Tape& tape = tape_of(x);
    Tensor y = x.value() * s;
    return tape.record(std::move(y), {x}, [x, s](Tape& t, const Tensor& g) { t.accumulate(x, g * s); });
}

Var rowscale(Var x, Var gates, std::size_t col) {
    Tape& tape = tape_of(x);
    const Tensor& xv = x.value();
    const Tensor& gv = gates.value();
    if (gv.rows() != xv.rows() || col >= gv.cols())
        throw std::invalid_argument("rowscale: gates " + shape_string(gv.shape()) + " vs input " +
                                    shape_string(xv.shape()));
    Tensor y = xv;
    const std::size_t n = xv.cols();
    for (std::size_t r = 0; r < xv.rows(); ++r)
        for (std::size_t c = 0; c < n; ++c) y.at(r, c) *= gv.at(r, col);
    return tape.record(std::move(y), {x, gates}, [x, gates, col](Tape& t, const Tensor& g) {
        const Tensor& xv = t.value(x);
        const Tensor& gv = t.value(gates);
        const std::size_t n = xv.cols();
        if (t.requires_grad(x)) {
            Tensor gx = g;
            for (std::size_t r = 0; r < xv.rows(); ++r)
                for (std::size_t c = 0; c < n; ++c) gx.at(r, c) *= gv.at(r, col);
            t.accumulate(x, gx);
        }
        if (t.requires_grad(gates)) {
            Tensor& gg = t.grad_slot(gates);
            for (std::size_t r = 0; r < xv.rows(); ++r) {
                double s = 0.0;
                for (std::size_t c = 0; c < n; ++c) s += g.at(r, c) * xv.at(r, c);
                gg.at(r, col) += s;
            }
        }
    });
}

Var mse(Var a, Var b) {
    Tape& tape = tape_of(a);
    const double v = qdiff::mse(a.value(), b.value());
    return tape.record(scalar(v), {a, b}, [a, b](Tape& t, const Tensor& g) {
        const Tensor& av = t.value(a);
        const Tensor& bv = t.value(b);
        const double k = 2.0 * g[0] / static_cast<double>(av.size());
        Tensor ga(av.shape());
        for (std::size_t i = 0; i < av.size(); ++i) ga[i] = k * (av[i] - bv[i]);
        t.accumulate(a, ga);
        if (t.requires_grad(b)) t.accumulate(b, ga * -1.0);
    });
}

Var weighted_row_mse(Var a, Var b, std::vector<double> row_weights) {
    Tape& tape = tape_of(a);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (!av.same_shape(bv))
        throw std::invalid_argument("weighted_row_mse: shape " + shape_string(av.shape()) + " vs " +
                                    shape_string(bv.shape()));
    const std::size_t rows = av.rows(), cols = av.cols();
    if (row_weights.size() != rows) throw std::invalid_argument("weighted_row_mse: one weight per row required");
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            const double d = av.at(r, c) - bv.at(r, c);
            s += d * d;
        }
        total += row_weights[r] * (s / static_cast<double>(cols));
    }
    total /= static_cast<double>(rows);
    return tape.record(scalar(total), {a, b}, [a, b, w = std::move(row_weights)](Tape& t, const Tensor& g) {
        const Tensor& av = t.value(a);
        const Tensor& bv = t.value(b);
        const std::size_t rows = av.rows(), cols = av.cols();
        Tensor ga(av.shape());
        for (std::size_t r = 0; r < rows; ++r) {
            const double k = 2.0 * g[0] * w[r] / static_cast<double>(rows * cols);
            for (std::size_t c = 0; c < cols; ++c) ga.at(r, c) = k * (av.at(r, c) - bv.at(r, c));
        }
        t.accumulate(a, ga);
        if (t.requires_grad(b)) t.accumulate(b, ga * -1.0);
    });
}

Var dot_const(Var x, const Tensor& c) {
    Tape& tape = tape_of(x);
    if (!x.value().same_shape(c)) throw std::invalid_argument("dot_const: shape mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) s += x.value()[i] * c[i];
    return tape.record(scalar(s), {x}, [x, c](Tape& t, const Tensor& g) { t.accumulate(x, c * g[0]); });
}

Var sum(Var x) {
    Tape& tape = tape_of(x);
    return tape.record(scalar(qdiff::sum(x.value())), {x}, [x](Tape& t, const Tensor& g) {
        t.accumulate(x, Tensor(t.value(x).shape(), g[0]));
    });
}

Var route_ste(Var logits, std::size_t groups, std::size_t h, bool hard) {
    Tape& tape = tape_of(logits);
    const Tensor& lv = logits.value();
    if (lv.cols() != groups * h)
        throw std::invalid_argument("route_ste: logits width " + std::to_string(lv.cols()) + " vs " +
                                    std::to_string(groups) + "x" + std::to_string(h));
    const std::size_t rows = lv.rows();
    Tensor soft({rows, groups * h});
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t gi = 0; gi < groups; ++gi) {
            const std::size_t base = gi * h;
            double mx = lv.at(r, base);
            for (std::size_t k = 1; k < h; ++k) mx = std::max(mx, lv.at(r, base + k));
            double z = 0.0;
            for (std::size_t k = 0; k < h; ++k) z += (soft.at(r, base + k) = std::exp(lv.at(r, base + k) - mx));
            for (std::size_t k = 0; k < h; ++k) soft.at(r, base + k) /= z;
        }
    }
    Tensor out = soft;
    if (hard) {
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t gi = 0; gi < groups; ++gi) {
                const std::size_t base = gi * h;
                std::size_t best = 0;
                for (std::size_t k = 1; k < h; ++k)
                    if (lv.at(r, base + k) > lv.at(r, base + best)) best = k;
                for (std::size_t k = 0; k < h; ++k) out.at(r, base + k) = k == best ? 1.0 : 0.0;
            }
        }
    }
    return tape.record(std::move(out), {logits}, [logits, groups, h, soft](Tape& t, const Tensor& g) {
        const std::size_t rows = soft.rows();
        Tensor gl(soft.shape());
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t gi = 0; gi < groups; ++gi) {
                const std::size_t base = gi * h;
                double dotp = 0.0;
                for (std::size_t k = 0; k < h; ++k) dotp += soft.at(r, base + k) * g.at(r, base + k);
                for (std::size_t k = 0; k < h; ++k)
                    gl.at(r, base + k) = soft.at(r, base + k) * (g.at(r, base + k) - dotp);
            }
        }
        t.accumulate(logits, gl);
    });
}

}  // namespace ad
}  // namespace qdiff
