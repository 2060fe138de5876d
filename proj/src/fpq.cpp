#include "qdiff/fpq.hpp"

#include "qdiff/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace qdiff {

std::string FpFormat::name() const {
    return (is_signed ? "E" : "uE") + std::to_string(exponent_bits) + "M" + std::to_string(mantissa_bits);
}

void FpQuantizerParams::validate() const {
    if (format.exponent_bits < 0 || format.mantissa_bits < 0 || format.bits() < 1)
        throw std::invalid_argument("invalid FP format " + format.name());
    if (format.exponent_bits > 10) throw std::invalid_argument("exponent field too wide: " + format.name());
    if (!(maxval > 0.0) || !std::isfinite(maxval)) throw std::invalid_argument("maxval must be positive");
    if (format.is_signed && zero_point != 0.0) throw std::invalid_argument("signed formats carry no zero point");
    if (!std::isfinite(zero_point)) throw std::invalid_argument("zero point must be finite");
}

std::vector<double> unit_grid(const FpFormat& format) {
    const int e = format.exponent_bits, m = format.mantissa_bits;
    const double mant_den = std::ldexp(1.0, m);
    const long mant_count = 1L << m;
    const long code_count = 1L << e;
    std::vector<double> pos;
    pos.reserve(static_cast<std::size_t>(mant_count * code_count));
    for (long mant = 0; mant < mant_count; ++mant) pos.push_back(2.0 * (static_cast<double>(mant) / mant_den));
    for (long code = 1; code < code_count; ++code)
        for (long mant = 0; mant < mant_count; ++mant)
            pos.push_back(std::ldexp(1.0 + static_cast<double>(mant) / mant_den, static_cast<int>(code)));

    std::vector<double> grid;
    if (format.is_signed) {
        grid.reserve(pos.size() * 2);
        for (double v : pos)
            if (v != 0.0) grid.push_back(-v);
    }
    grid.insert(grid.end(), pos.begin(), pos.end());
    std::sort(grid.begin(), grid.end());
    grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
    return grid;
}

std::vector<double> fp_grid(const FpQuantizerParams& params) {
    params.validate();
    std::vector<double> grid = unit_grid(params.format);
    const double top = grid.back();
    // top == 0 only for the 1-bit unsigned E0M0 grid {0}
    const double factor = top > 0.0 ? params.maxval / top : 0.0;
    for (auto& v : grid) v = v * factor + params.zero_point;
    grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
    return grid;
}

Tensor fp_quantize(const Tensor& x, const FpQuantizerParams& params) {
    return FpQuantizer(params).apply(x);
}

Tensor int_quantize(const Tensor& x, const IntQuantizerParams& p) {
    if (!(p.scale > 0.0)) throw std::invalid_argument("int_quantize: scale must be positive");
    if (p.lower >= p.upper) throw std::invalid_argument("int_quantize: need lower < upper");
    Tensor y = x;
    for (auto& v : y.raw()) {
        // nearbyint honours the default round-half-to-even mode
        double q = std::nearbyint(v / p.scale) + static_cast<double>(p.zero_point);
        q = std::clamp(q, static_cast<double>(p.lower), static_cast<double>(p.upper));
        v = q * p.scale;
    }
    return y;
}

FpQuantizer::FpQuantizer(FpQuantizerParams params) : params_(params), grid_(fp_grid(params)) {}

Tensor FpQuantizer::apply(const Tensor& x) const {
    if (passthrough()) return x;
    Tensor y(x.shape());
    kernels::quantize(grid_, x.values(), y.values());
    return y;
}

Var fake_quant_ste(Var x, const FpQuantizer& quantizer, SteReplay* replay, const std::string& site) {
    if (quantizer.passthrough()) return x;
    Tape& tape = *x.tape;
    const Tensor& xv = x.value();
    Tensor y;
    if (replay && replay->mode == SteReplay::Mode::replay) {
        const auto it = replay->sites.find(site);
        if (it == replay->sites.end()) throw std::logic_error("no recorded quantizer state for site " + site);
        const auto& [x0, y0] = it->second;
        y = y0;
        for (std::size_t i = 0; i < y.size(); ++i)
            if (x0[i] >= quantizer.lower() && x0[i] <= quantizer.upper()) y[i] += xv[i] - x0[i];
    } else {
        y = quantizer.apply(xv);
        if (replay) replay->sites[site] = {xv, y};
    }
    // The pass-through mask is taken at the recorded point in replay mode.
    Tensor mask_src = (replay && replay->mode == SteReplay::Mode::replay) ? replay->sites.at(site).first : xv;
    const double lo = quantizer.lower(), hi = quantizer.upper();
    return tape.record(std::move(y), {x}, [x, lo, hi, src = std::move(mask_src)](Tape& t, const Tensor& g) {
        Tensor gx = g;
        for (std::size_t i = 0; i < gx.size(); ++i)
            if (src[i] < lo || src[i] > hi) gx[i] = 0.0;
        t.accumulate(x, gx);
    });
}

}  // namespace qdiff
