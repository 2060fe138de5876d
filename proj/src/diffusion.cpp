#include "qdiff/diffusion.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace qdiff {

void NoiseSchedule::check_timestep(int t) const {
    if (t < 0 || t >= T)
        throw std::out_of_range("timestep " + std::to_string(t) + " outside [0, " + std::to_string(T) + ")");
}

double denoising_factor(double alpha, double alpha_bar) {
    if (alpha_bar >= 1.0) return 0.0;
    return (1.0 / std::sqrt(alpha)) * (1.0 - alpha) / std::sqrt(1.0 - alpha_bar);
}

NoiseSchedule make_schedule(int T, double beta_start, double beta_end, double eta) {
    if (T <= 0) throw std::invalid_argument("schedule needs T > 0");
    if (!(beta_start >= 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw std::invalid_argument("need 0 <= beta_start <= beta_end < 1");
    if (eta < 0.0) throw std::invalid_argument("eta must be non-negative");
    NoiseSchedule s;
    s.T = T;
    s.eta = eta;
    s.beta.resize(T);
    s.alpha.resize(T);
    s.alpha_bar.resize(T);
    s.sigma.resize(T);
    s.gamma.resize(T);
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        const double frac = T == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(T - 1);
        s.beta[t] = beta_start + (beta_end - beta_start) * frac;
        s.alpha[t] = 1.0 - s.beta[t];
        prod *= s.alpha[t];
        s.alpha_bar[t] = prod;
        s.gamma[t] = denoising_factor(s.alpha[t], s.alpha_bar[t]);
        if (t == 0 || s.alpha_bar[t] >= 1.0) {
            s.sigma[t] = 0.0;
        } else {
            s.sigma[t] = eta * std::sqrt((1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t])) *
                         std::sqrt(1.0 - s.alpha[t]);
        }
    }
    return s;
}

Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& schedule) {
    schedule.check_timestep(t);
    if (!x0.same_shape(eps))
        throw std::invalid_argument("forward_noise: shape " + shape_string(x0.shape()) + " vs " +
                                    shape_string(eps.shape()));
    const double a = std::sqrt(schedule.alpha_bar[t]), b = std::sqrt(1.0 - schedule.alpha_bar[t]);
    Tensor out(x0.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

Tensor denoise_step(const Tensor& x_t, const Tensor& eps_pred, int t, const NoiseSchedule& schedule,
                    const Tensor& delta) {
    schedule.check_timestep(t);
    if (!x_t.same_shape(eps_pred))
        throw std::invalid_argument("denoise_step: shape " + shape_string(x_t.shape()) + " vs " +
                                    shape_string(eps_pred.shape()));
    const double inv_sqrt_alpha = 1.0 / std::sqrt(schedule.alpha[t]);
    const double gamma = schedule.gamma[t];
    const double sigma = schedule.sigma[t];
    const bool noisy = sigma != 0.0;
    if (noisy && !delta.same_shape(x_t)) throw std::invalid_argument("denoise_step: missing step noise");
    Tensor out(x_t.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = x_t[i] * inv_sqrt_alpha - gamma * eps_pred[i];
        if (noisy) out[i] += sigma * delta[i];
    }
    return out;
}

SamplerNoise sampler_noise(const NoiseSchedule& schedule, std::size_t n, std::size_t dim, std::uint64_t seed) {
    SamplerNoise noise;
    Rng start = stream(seed, "sample/x_T");
    noise.x_T = randn(start, {n, dim});
    noise.deltas.resize(schedule.T);
    Rng steps = stream(seed, "sample/delta");
    for (int t = schedule.T; t-- > 0;) {
        if (schedule.sigma[t] != 0.0) noise.deltas[t] = randn(steps, {n, dim});
    }
    return noise;
}

SampleResult sample_from(const NoisePredictor& model, const NoiseSchedule& schedule, const Tensor& x_T,
                         const std::vector<Tensor>& noise, bool keep_trajectory) {
    SampleResult res;
    if (keep_trajectory) res.trajectory.resize(schedule.T);
    static const Tensor kNone;
    Tensor x = x_T;
    for (int t = schedule.T; t-- > 0;) {
        if (keep_trajectory) res.trajectory[t] = x;
        const Tensor eps = model(x, t);
        const Tensor& delta = static_cast<std::size_t>(t) < noise.size() ? noise[t] : kNone;
        x = denoise_step(x, eps, t, schedule, delta);
    }
    res.samples = std::move(x);
    return res;
}

SampleResult sample(const NoisePredictor& model, const NoiseSchedule& schedule, std::size_t n, std::size_t dim,
                    std::uint64_t seed, bool keep_trajectory) {
    const SamplerNoise noise = sampler_noise(schedule, n, dim, seed);
    return sample_from(model, schedule, noise.x_T, noise.deltas, keep_trajectory);
}

}  // namespace qdiff
