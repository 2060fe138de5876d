#pragma once
// Finite-difference checks of LoRA and router gradients on small quantized
// models. Quantizers are replayed as their straight-through surrogate so the
// difference quotients see the same Jacobian the backward pass uses.

#include "oracles.hpp"

#include "qdiff/calib.hpp"
#include "qdiff/lora.hpp"

#include <string>

namespace gradcheck {

struct Micro {
    qdiff::NoiseSchedule sched;
    qdiff::QuantizedModel q;
    qdiff::LoraHub hub;
    qdiff::Router router;
    qdiff::Tensor x, target;
    std::vector<int> ts;
    std::vector<double> weights;
};

inline Micro make_micro(std::uint64_t seed) {
    using namespace qdiff;
    Micro m;
    m.sched = make_schedule(20, 1e-3, 0.2, 1.0);
    Rng rng = stream(seed, "gradcheck/model");
    const DenoiserModel base = DenoiserModel::init({2, 6, 3, 4}, rng);
    QuantSettings s;
    s.probe_trajectories = 4;
    s.calib_samples = 32;
    s.calib_strata = 4;
    m.q = QuantizedModel(base, calibrate_model(base, m.sched, s, seed));
    m.hub = LoraHub::init(m.q, 2, 2, 2.0, rng);
    for (auto& slot : m.hub.adapters)
        for (auto& a : slot) a.B = randn(rng, a.B.shape(), 0.3);
    m.router = Router::init(8, m.hub.groups(), 2, rng, 0.3);  // unsaturated softmax
    m.x = randn(rng, {6, 2});
    m.target = randn(rng, {6, 2});
    m.ts = {0, 3, 7, 11, 15, 19};
    for (int t : m.ts) m.weights.push_back(m.sched.gamma[t]);
    return m;
}

inline double loss(const Micro& m, const qdiff::Allocation& alloc, qdiff::SteReplay* replay) {
    using namespace qdiff;
    Tape tape;
    QuantForwardOptions o;
    o.replay = replay;
    Var y = quantized_forward(m.q, &m.hub, alloc, tape, tape.constant(m.x), m.ts, o);
    return ad::weighted_row_mse(y, tape.constant(m.target), m.weights).value()[0];
}

struct Report {
    double worst = 0.0;
    std::string where;
    std::size_t checked = 0;
};

/// hard: LoRA gradients under one-hot routing. soft: LoRA and router gradients
/// under soft routing, where the model is smooth in the router weights.
inline Report check(Micro& m, bool hard) {
    using namespace qdiff;
    Allocation alloc;
    alloc.strategy = Strategy::router;
    alloc.T = m.sched.T;
    alloc.router = &m.router;
    alloc.hard = hard;

    SteReplay replay;
    Tape tape;
    QuantForwardOptions o;
    o.train_lora = true;
    o.train_router = !hard;
    o.replay = &replay;
    Var y = quantized_forward(m.q, &m.hub, alloc, tape, tape.constant(m.x), m.ts, o);
    const auto grads = tape.backward(ad::weighted_row_mse(y, tape.constant(m.target), m.weights));
    replay.mode = SteReplay::Mode::replay;

    Report r;
    auto visit = [&](const std::string& name, Tensor& p) {
        const auto fd = oracle::central_diff(p.raw(), [&] { return loss(m, alloc, &replay); });
        const auto it = grads.find(name);
        const std::vector<double> analytic = it == grads.end() ? std::vector<double>(p.size(), 0.0) : it->second.raw();
        const double e = oracle::max_rel_err(analytic, fd);
        if (e >= r.worst) {
            r.worst = e;
            r.where = name;
        }
        r.checked += p.size();
    };
    m.hub.for_each_param(visit);
    if (!hard) m.router.for_each_param(visit);
    return r;
}

/// d sum(one_hot * c) / d router under the straight-through rule equals the
/// finite-difference gradient of sum(softmax * c).
inline Report check_gate_linear(Micro& m, std::uint64_t seed, double h = 1e-3) {
    using namespace qdiff;
    Rng rng = stream(seed, "gradcheck/c");
    const Tensor c = randn(rng, {m.ts.size(), m.router.groups * m.router.hub_size});
    Tape tape;
    const auto grads = tape.backward(ad::dot_const(route_gates(m.router, tape, m.ts, true, true), c));
    Report r;
    m.router.for_each_param([&](const std::string& name, Tensor& p) {
        const auto fd = oracle::richardson_diff(p.raw(), [&] {
            Tape t2;
            return ad::dot_const(route_gates(m.router, t2, m.ts, false, false), c).value()[0];
        }, h);
        const double e = oracle::max_rel_err(grads.at(name).raw(), fd);
        if (e >= r.worst) {
            r.worst = e;
            r.where = name;
        }
        r.checked += p.size();
    });
    return r;
}

}  // namespace gradcheck
