#pragma once

#include "qdiff/diffusion.hpp"
#include "qdiff/fpq.hpp"
#include "qdiff/nn.hpp"

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace qdiff {

/// AAL: the layer's input comes out of a SiLU (one-sided, half-normal-like).
/// NAL: everything else.
enum class LayerKind { nal, aal };
const char* to_string(LayerKind kind);

struct LayerClass {
    std::size_t layer = 0;
    LayerKind kind = LayerKind::nal;
};

std::vector<LayerClass> classify_layers(const DenoiserModel& model);

enum class TensorRole { weight, activation };

struct SearchSpace {
    std::vector<FpFormat> formats;
    std::vector<double> maxvals;
    std::vector<double> zero_points;  // unsigned spaces only

    std::size_t size() const;
};

/// Weight spaces: the four formats tabulated per bit-width (4, 6, 8) and 100
/// maxvals spanning [0.8 maxval0, 2 maxval0] at 4 bits, [0.9 maxval0, 2 maxval0]
/// otherwise. Activation spaces: every ExMy of the bit-width and
/// linspace(0, maxval0, 100) without its leading 0; unsigned spaces add
/// zero points linspace(-0.3, 0, 6).
SearchSpace build_search_space(int bits, TensorRole role, bool is_signed, double maxval0);

struct SearchResult {
    FpQuantizerParams params;
    double mse = 0.0;
};

/// Exhaustive arg-min of mean((x - q(x))^2) over formats x maxvals, first
/// candidate in listed order wins ties.
SearchResult search_signed(std::span<const double> samples, const SearchSpace& space);
/// Signed search, then the unsigned scan (formats x maxvals x zero points);
/// the unsigned result is taken only when strictly better.
SearchResult search_mixup(std::span<const double> samples, const SearchSpace& signed_space,
                          const SearchSpace& unsigned_space);

/// Straight nested loops over fp_quantize + mse, kept as the test oracle for
/// the parallel searches above.
SearchResult search_signed_reference(std::span<const double> samples, const SearchSpace& space);
SearchResult search_mixup_reference(std::span<const double> samples, const SearchSpace& signed_space,
                                    const SearchSpace& unsigned_space);

/// (x_t, t) pairs harvested from full-precision sampling trajectories.
struct CalibrationSet {
    Tensor x;            // [count, dim]
    std::vector<int> t;  // one timestep per row
};

/// ceil(count / strata) trajectories; each contributes one x_t per timestep
/// stratum, t drawn uniformly inside the stratum.
CalibrationSet build_calibration_set(const DenoiserModel& model, const NoiseSchedule& schedule, std::size_t count,
                                     std::size_t strata, std::uint64_t seed);

/// max |value| per quantizer site: weights read directly, activations over
/// `trajectories` full sampling runs. Throws if an activation site never fires.
std::map<std::string, double> probe_maxval0(const DenoiserModel& model, const NoiseSchedule& schedule,
                                            std::size_t trajectories, std::uint64_t seed);

/// Inputs of every layer over the calibration set, reservoir-sampled down to
/// at most `max_samples` values per site.
std::map<std::string, std::vector<double>> collect_activations(const DenoiserModel& model, const CalibrationSet& set,
                                                               std::size_t max_samples, std::uint64_t seed);

struct QuantSettings {
    int weight_bits = 4;
    int act_bits = 4;
    int io_bits = 8;
    bool mixup = true;  // unsigned+zero-point search on AAL activation sites
    std::size_t probe_trajectories = 64;
    std::size_t calib_samples = 256;
    std::size_t calib_strata = 16;
    std::size_t max_site_samples = 1u << 16;

    /// Bits for layer i: first and last layers use io_bits, except in a
    /// full-precision (32-bit) run where nothing is quantized.
    int layer_bits(std::size_t layer, std::size_t layer_count, TensorRole role) const;
};

enum class QuantMode { passthrough, signed_fp, unsigned_fp };
const char* to_string(QuantMode mode);

struct SiteCalibration {
    std::string site;
    std::size_t layer = 0;
    TensorRole role = TensorRole::weight;
    LayerKind kind = LayerKind::nal;
    int bits = 32;
    QuantMode mode = QuantMode::passthrough;
    FpQuantizerParams params;
    double maxval0 = 0.0;
    double mse = 0.0;
    bool degenerate = false;
};

/// Weight and activation quantizer search for every layer.
std::vector<SiteCalibration> calibrate_model(const DenoiserModel& model, const NoiseSchedule& schedule,
                                             const QuantSettings& settings, std::uint64_t seed);

/// Per-site search given prepared samples; exposed for the bit-width studies.
SiteCalibration calibrate_site(const std::string& site, std::span<const double> samples, double maxval0, int bits,
                               TensorRole role, LayerKind kind, bool mixup);

}  // namespace qdiff
