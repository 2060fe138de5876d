#include "qdiff/finetune.hpp"

#include <cmath>
#include <numeric>

namespace qdiff {

const char* to_string(LossMode m) { return m == LossMode::dfa ? "dfa" : "plain"; }

LossMode parse_loss_mode(const std::string& s) {
    if (s == "plain") return LossMode::plain;
    if (s == "dfa") return LossMode::dfa;
    throw std::invalid_argument("unknown loss mode '" + s + "'");
}

double plain_loss(const Tensor& eps_fp, const Tensor& eps_q) { return mse(eps_fp, eps_q); }

double dfa_loss(const Tensor& eps_fp, const Tensor& eps_q, int t, const NoiseSchedule& schedule) {
    schedule.check_timestep(t);
    return schedule.gamma[t] * plain_loss(eps_fp, eps_q);
}

void Adam::step(const std::string& name, Tensor& param, const Tensor& grad) {
    if (!param.same_shape(grad)) throw std::invalid_argument("adam: gradient shape mismatch for " + name);
    auto& st = state_[name];
    if (st.m.empty()) {
        st.m = Tensor(param.shape());
        st.v = Tensor(param.shape());
    }
    ++st.steps;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(st.steps));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(st.steps));
    for (std::size_t i = 0; i < param.size(); ++i) {
        st.m[i] = beta1_ * st.m[i] + (1.0 - beta1_) * grad[i];
        st.v[i] = beta2_ * st.v[i] + (1.0 - beta2_) * grad[i] * grad[i];
        param[i] -= lr_ * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + eps_);
    }
}

void FinetuneConfig::validate() const {
    if (!(lr_lora >= 0.0) || !(lr_router >= 0.0)) throw std::invalid_argument("learning rates must be non-negative");
    if (batch_size == 0 || traj_pool == 0) throw std::invalid_argument("batch size and trajectory pool must be positive");
    if (hub_size == 0 || rank == 0) throw std::invalid_argument("hub size and rank must be positive");
    if ((strategy == Strategy::router || strategy == Strategy::split_half || strategy == Strategy::random) &&
        hub_size < 2)
        throw std::invalid_argument(std::string("strategy ") + to_string(strategy) + " needs hub size >= 2");
}

TrajectoryPool make_trajectory_pool(const DenoiserModel& fp, const NoiseSchedule& schedule, std::size_t size,
                                    std::uint64_t seed) {
    const NoisePredictor teacher = [&](const Tensor& x, int t) { return forward(fp, x, t); };
    auto run = sample(teacher, schedule, size, fp.input_dim, seed, true);
    TrajectoryPool pool;
    pool.x = std::move(run.trajectory);
    pool.eps.resize(pool.x.size());
    for (int t = 0; t < schedule.T; ++t) pool.eps[t] = forward(fp, pool.x[t], t);
    return pool;
}

Allocation make_allocation(Strategy strategy, const NoiseSchedule& schedule, const Router* router, Rng* rng) {
    Allocation a;
    a.strategy = strategy;
    a.T = schedule.T;
    a.router = router;
    a.rng = rng;
    return a;
}

FinetuneResult finetune(const QuantizedModel& qmodel, const DenoiserModel& fp, const NoiseSchedule& schedule,
                        const FinetuneConfig& config, std::uint64_t seed) {
    config.validate();
    const std::size_t h = config.strategy == Strategy::single ? 1 : config.hub_size;
    Rng init_rng = stream(seed, "finetune/init");
    FinetuneResult res;
    res.hub = LoraHub::init(qmodel, h, config.rank, config.lora_alpha, init_rng);
    if (config.strategy == Strategy::router)
        res.router = Router::init(config.router_embed_dim, res.hub.groups(), h, init_rng, config.router_init_std);

    const TrajectoryPool pool = make_trajectory_pool(fp, schedule, config.traj_pool, derive_seed(seed, "finetune/pool"));
    Rng batch_rng = stream(seed, "finetune/batch");
    Rng alloc_rng = stream(seed, "finetune/random");
    const Allocation alloc = make_allocation(config.strategy, schedule, &res.router, &alloc_rng);
    Adam lora_opt(config.lr_lora), router_opt(config.lr_router);

    std::uniform_int_distribution<std::size_t> pick_traj(0, config.traj_pool - 1);
    std::uniform_int_distribution<int> pick_t(0, schedule.T - 1);
    const std::size_t dim = fp.input_dim;
    const bool train_router = config.strategy == Strategy::router;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        double total = 0.0, total_plain = 0.0;
        for (std::size_t step = 0; step < config.steps_per_epoch; ++step) {
            Tensor x({config.batch_size, dim}), target({config.batch_size, dim});
            std::vector<int> ts(config.batch_size);
            std::vector<double> weights(config.batch_size, 1.0);
            for (std::size_t r = 0; r < config.batch_size; ++r) {
                const std::size_t j = pick_traj(batch_rng);
                const int t = pick_t(batch_rng);
                ts[r] = t;
                const auto xs = pool.x[t].row(j);
                const auto es = pool.eps[t].row(j);
                std::copy(xs.begin(), xs.end(), x.row(r).begin());
                std::copy(es.begin(), es.end(), target.row(r).begin());
                if (config.loss == LossMode::dfa) weights[r] = schedule.gamma[t];
            }
            Tape tape;
            QuantForwardOptions opts;
            opts.train_lora = true;
            opts.train_router = train_router;
            Var pred = quantized_forward(qmodel, &res.hub, alloc, tape, tape.constant(x), ts, opts);
            Var tgt = tape.constant(target);
            Var loss = ad::weighted_row_mse(pred, tgt, weights);
            const double lv = loss.value()[0];
            if (!std::isfinite(lv))
                throw NumericalError("non-finite fine-tuning loss at epoch " + std::to_string(epoch) + ", batch " +
                                     std::to_string(step) + " (first t = " + std::to_string(ts.front()) + ")");
            total += lv;
            total_plain += mse(pred.value(), target);
            auto grads = tape.backward(loss);
            res.hub.for_each_param([&](const std::string& name, Tensor& p) {
                if (auto it = grads.find(name); it != grads.end()) lora_opt.step(name, p, it->second);
            });
            if (train_router) {
                res.router.for_each_param([&](const std::string& name, Tensor& p) {
                    if (auto it = grads.find(name); it != grads.end()) router_opt.step(name, p, it->second);
                });
            }
        }
        const double n = static_cast<double>(std::max<std::size_t>(1, config.steps_per_epoch));
        res.curve.push_back({epoch, total / n, total_plain / n});
    }
    return res;
}

std::vector<StepDiagnostic> diagnose(const QuantizedModel& qmodel, const LoraHub* hub, Strategy strategy,
                                     const Router* router, const DenoiserModel& fp, const NoiseSchedule& schedule,
                                     std::size_t n_traj, std::uint64_t seed) {
    const NoisePredictor teacher = [&](const Tensor& x, int t) { return forward(fp, x, t); };
    const SamplerNoise noise = sampler_noise(schedule, n_traj, fp.input_dim, seed);
    const auto run = sample_from(teacher, schedule, noise.x_T, noise.deltas, true);
    Rng alloc_rng = stream(seed, "diagnose/random");
    const Allocation alloc = make_allocation(strategy, schedule, router, &alloc_rng);

    std::vector<StepDiagnostic> out;
    for (int t = 0; t < schedule.T; ++t) {
        const Tensor& x = run.trajectory[t];
        const Tensor eps_fp = forward(fp, x, t);
        const Tensor eps_q = quantized_predict(qmodel, hub, alloc, x, t);
        StepDiagnostic d;
        d.t = t;
        d.loss_plain = plain_loss(eps_fp, eps_q);
        d.loss_dfa = dfa_loss(eps_fp, eps_q, t, schedule);
        d.gap = mse(denoise_step(x, eps_fp, t, schedule, noise.deltas[t]),
                    denoise_step(x, eps_q, t, schedule, noise.deltas[t]));
        if (!std::isfinite(d.loss_plain) || !std::isfinite(d.gap))
            throw NumericalError("non-finite diagnostic at t = " + std::to_string(t));
        out.push_back(d);
    }
    return out;
}

double trajectory_gap(const QuantizedModel& qmodel, const LoraHub* hub, Strategy strategy, const Router* router,
                      const DenoiserModel& fp, const NoiseSchedule& schedule, std::size_t n, std::uint64_t seed) {
    const SamplerNoise noise = sampler_noise(schedule, n, fp.input_dim, seed);
    const NoisePredictor teacher = [&](const Tensor& x, int t) { return forward(fp, x, t); };
    Rng alloc_rng = stream(seed, "gap/random");
    const Allocation alloc = make_allocation(strategy, schedule, router, &alloc_rng);
    const NoisePredictor student = [&](const Tensor& x, int t) { return quantized_predict(qmodel, hub, alloc, x, t); };
    const Tensor a = sample_from(teacher, schedule, noise.x_T, noise.deltas).samples;
    const Tensor b = sample_from(student, schedule, noise.x_T, noise.deltas).samples;
    const double g = mse(a, b);
    if (!std::isfinite(g)) throw NumericalError("non-finite trajectory gap");
    return g;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("pearson needs two equal series of length >= 2");
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

}  // namespace qdiff
