#pragma once

#include "qdiff/diffusion.hpp"
#include "qdiff/lora.hpp"

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace qdiff {

/// Raised when a loss or prediction turns non-finite.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class LossMode { plain, dfa };
const char* to_string(LossMode m);
LossMode parse_loss_mode(const std::string& s);

/// Teacher-student noise MSE (mean over elements).
double plain_loss(const Tensor& eps_fp, const Tensor& eps_q);
/// gamma_t * plain_loss.
double dfa_loss(const Tensor& eps_fp, const Tensor& eps_q, int t, const NoiseSchedule& schedule);

/// Adam with bias correction, one moment pair per named parameter.
class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(const std::string& name, Tensor& param, const Tensor& grad);
    double lr() const { return lr_; }

private:
    struct Moments {
        Tensor m, v;
        long steps = 0;
    };
    double lr_, beta1_, beta2_, eps_;
    std::map<std::string, Moments> state_;
};

struct FinetuneConfig {
    std::size_t epochs = 200;
    std::size_t steps_per_epoch = 8;
    std::size_t batch_size = 64;
    double lr_lora = 1e-4;
    double lr_router = 1e-4;
    LossMode loss = LossMode::dfa;
    Strategy strategy = Strategy::router;
    std::size_t hub_size = 2;
    std::size_t rank = 4;
    double lora_alpha = 4.0;
    std::size_t router_embed_dim = 32;
    double router_init_std = 1.0;
    std::size_t traj_pool = 256;

    void validate() const;
};

struct EpochStats {
    std::size_t epoch = 0;
    double loss = 0.0;        // objective actually optimised
    double loss_plain = 0.0;  // unweighted noise MSE over the same batches
};

struct FinetuneResult {
    LoraHub hub;
    Router router;
    std::vector<EpochStats> curve;
};

/// Full-precision trajectories with the teacher's noise prediction at each step.
struct TrajectoryPool {
    std::vector<Tensor> x;    // x[t]: [pool, dim]
    std::vector<Tensor> eps;  // eps[t]: teacher prediction at (x[t], t)
};
TrajectoryPool make_trajectory_pool(const DenoiserModel& fp, const NoiseSchedule& schedule, std::size_t size,
                                    std::uint64_t seed);

/// Trains adapters (and the router, for Strategy::router) against the
/// full-precision teacher on teacher-forced x_t. Base weights and quantizers
/// are never modified.
FinetuneResult finetune(const QuantizedModel& qmodel, const DenoiserModel& fp, const NoiseSchedule& schedule,
                        const FinetuneConfig& config, std::uint64_t seed);

/// Allocation matching a finetune result (random strategies draw from `rng`).
Allocation make_allocation(Strategy strategy, const NoiseSchedule& schedule, const Router* router, Rng* rng);

struct StepDiagnostic {
    int t = 0;
    double loss_plain = 0.0;
    double loss_dfa = 0.0;
    double gap = 0.0;  // mse of the two one-step outputs from the same x_t and noise
};

/// Per-timestep loss and one-step gap with shared inputs, averaged over
/// `n_traj` full-precision trajectories. Rows are ordered by t ascending.
std::vector<StepDiagnostic> diagnose(const QuantizedModel& qmodel, const LoraHub* hub, Strategy strategy,
                                     const Router* router, const DenoiserModel& fp, const NoiseSchedule& schedule,
                                     std::size_t n_traj, std::uint64_t seed);

/// mse between the final samples of the full-precision and quantized
/// samplers driven by the same x_T and step noise.
double trajectory_gap(const QuantizedModel& qmodel, const LoraHub* hub, Strategy strategy, const Router* router,
                      const DenoiserModel& fp, const NoiseSchedule& schedule, std::size_t n, std::uint64_t seed);

double pearson(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace qdiff
