#pragma once

#include "qdiff/rng.hpp"
#include "qdiff/tensor.hpp"

#include <functional>
#include <span>
#include <vector>

namespace qdiff {

/// Per-step tables for timesteps 0..T-1. alpha_bar[t] is the running product
/// of alpha[0..t]; gamma[t] is the weight of the predicted noise in one
/// reverse step.
struct NoiseSchedule {
    int T = 0;
    double eta = 1.0;
    std::vector<double> beta, alpha, alpha_bar, sigma, gamma;

    void check_timestep(int t) const;
};

NoiseSchedule make_schedule(int T, double beta_start, double beta_end, double eta);

/// gamma = (1/sqrt(alpha)) * (1 - alpha) / sqrt(1 - alpha_bar)
double denoising_factor(double alpha, double alpha_bar);

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps
Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& schedule);

/// x_{t-1} = x_t / sqrt(alpha_t) - gamma_t eps_pred + sigma_t delta.
/// `delta` may be empty when sigma_t == 0.
Tensor denoise_step(const Tensor& x_t, const Tensor& eps_pred, int t, const NoiseSchedule& schedule,
                    const Tensor& delta);

/// Noise predictor: (x_t, t) -> eps.
using NoisePredictor = std::function<Tensor(const Tensor& x_t, int t)>;

struct SampleResult {
    Tensor samples;
    std::vector<Tensor> trajectory;  // trajectory[t] = x_t entering step t; filled when requested
};

/// Draws x_T ~ N(0, I) and the per-step noise from named sub-streams of `seed`.
SampleResult sample(const NoisePredictor& model, const NoiseSchedule& schedule, std::size_t n, std::size_t dim,
                    std::uint64_t seed, bool keep_trajectory = false);

/// Reverse process from a given x_T with given per-step noises (noise[t] used
/// at step t; may be empty when eta == 0).
SampleResult sample_from(const NoisePredictor& model, const NoiseSchedule& schedule, const Tensor& x_T,
                         const std::vector<Tensor>& noise, bool keep_trajectory = false);

/// Starting point and step noises used by sample(); shared to compare two
/// models along identically-driven trajectories.
struct SamplerNoise {
    Tensor x_T;
    std::vector<Tensor> deltas;
};
SamplerNoise sampler_noise(const NoiseSchedule& schedule, std::size_t n, std::size_t dim, std::uint64_t seed);

}  // namespace qdiff
