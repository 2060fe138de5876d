#pragma once

#include "qdiff/tape.hpp"
#include "qdiff/tensor.hpp"

#include <map>
#include <string>
#include <vector>

namespace qdiff {

/// ExMy layout. Signed formats spend one of the n bits on the sign.
struct FpFormat {
    int exponent_bits = 0;
    int mantissa_bits = 0;
    bool is_signed = true;

    int bits() const { return exponent_bits + mantissa_bits + (is_signed ? 1 : 0); }
    std::string name() const;  // "E2M1", "uE3M1" for unsigned

    friend bool operator==(const FpFormat&, const FpFormat&) = default;
};

/// Calibrated state of one FP quantizer. `maxval` is the largest magnitude on
/// the unshifted grid; unsigned grids are then shifted by `zero_point`.
struct FpQuantizerParams {
    FpFormat format;
    double maxval = 1.0;
    double zero_point = 0.0;

    void validate() const;

    friend bool operator==(const FpQuantizerParams&, const FpQuantizerParams&) = default;
};

/// Integer quantizer: round(x / s) + z clipped to [l, u], rescaled by s.
struct IntQuantizerParams {
    double scale = 1.0;
    long zero_point = 0;
    long lower = -8;
    long upper = 7;
};

/// Grid at bias 0 before rescaling. Exponent code 0 is subnormal, so 0 is
/// always representable. Sorted, duplicate-free.
std::vector<double> unit_grid(const FpFormat& format);

std::vector<double> fp_grid(const FpQuantizerParams& params);

Tensor fp_quantize(const Tensor& x, const FpQuantizerParams& params);
Tensor int_quantize(const Tensor& x, const IntQuantizerParams& params);

/// Quantizer with its grid materialised. Default-constructed instances are
/// pass-through (used for 32-bit sites and degenerate calibration sites).
class FpQuantizer {
public:
    FpQuantizer() = default;
    explicit FpQuantizer(FpQuantizerParams params);

    bool passthrough() const { return grid_.empty(); }
    const FpQuantizerParams& params() const { return params_; }
    const std::vector<double>& grid() const { return grid_; }
    double lower() const { return grid_.front(); }
    double upper() const { return grid_.back(); }

    Tensor apply(const Tensor& x) const;

private:
    FpQuantizerParams params_;
    std::vector<double> grid_;
};

/// Records fake-quant inputs/outputs at named sites, then replays them as the
/// first-order surrogate y = y0 + mask * (x - x0). Finite differences of the
/// replayed forward have exactly the straight-through Jacobian, which makes
/// them a usable oracle for gradients that pass through quantizers.
struct SteReplay {
    enum class Mode { record, replay };
    Mode mode = Mode::record;
    std::map<std::string, std::pair<Tensor, Tensor>> sites;  // site -> (x0, y0)
};

/// Forward equals quantizer.apply(x); backward passes the gradient where
/// lower <= x <= upper and zeroes it outside.
Var fake_quant_ste(Var x, const FpQuantizer& quantizer, SteReplay* replay = nullptr, const std::string& site = {});

}  // namespace qdiff
