#include "qdiff/calib.hpp"

#include "qdiff/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace qdiff {

const char* to_string(LayerKind kind) { return kind == LayerKind::aal ? "AAL" : "NAL"; }

const char* to_string(QuantMode mode) {
    switch (mode) {
        case QuantMode::signed_fp: return "signed";
        case QuantMode::unsigned_fp: return "unsigned";
        default: return "passthrough";
    }
}

std::vector<LayerClass> classify_layers(const DenoiserModel& model) {
    std::vector<LayerClass> out;
    for (std::size_t i = 0; i < model.layers.size(); ++i)
        out.push_back({i, model.downstream_of_silu(i) ? LayerKind::aal : LayerKind::nal});
    return out;
}

std::size_t SearchSpace::size() const {
    return formats.size() * maxvals.size() * std::max<std::size_t>(1, zero_points.size());
}

namespace {
std::vector<double> linspace(double a, double b, std::size_t n) {
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i)
        v[i] = n == 1 ? a : a + (b - a) * static_cast<double>(i) / static_cast<double>(n - 1);
    return v;
}

std::vector<FpFormat> weight_formats(int bits) {
    switch (bits) {
        case 4: return {{3, 0, true}, {2, 1, true}, {1, 2, true}, {0, 3, true}};
        case 6: return {{4, 1, true}, {3, 2, true}, {2, 3, true}, {1, 4, true}};
        case 8: return {{5, 2, true}, {4, 3, true}, {3, 4, true}, {2, 5, true}};
        default: throw std::invalid_argument("no weight format table for " + std::to_string(bits) + "-bit");
    }
}
}  // namespace

SearchSpace build_search_space(int bits, TensorRole role, bool is_signed, double maxval0) {
    if (!(maxval0 > 0.0)) throw std::invalid_argument("search space needs maxval0 > 0");
    SearchSpace space;
    if (role == TensorRole::weight) {
        if (!is_signed) throw std::invalid_argument("weights use signed quantization only");
        space.formats = weight_formats(bits);
        const double lo = bits == 4 ? 0.8 : 0.9;
        space.maxvals = linspace(lo * maxval0, 2.0 * maxval0, 100);
        return space;
    }
    const int payload = is_signed ? bits - 1 : bits;
    if (payload < 1) throw std::invalid_argument("bit-width too small for an FP format");
    for (int e = payload; e >= 0; --e) space.formats.push_back({e, payload - e, is_signed});
    auto mv = linspace(0.0, maxval0, 100);
    space.maxvals.assign(mv.begin() + 1, mv.end());
    if (!is_signed) space.zero_points = linspace(-0.3, 0.0, 6);
    return space;
}

namespace {
std::vector<FpQuantizerParams> enumerate(const SearchSpace& space) {
    std::vector<FpQuantizerParams> out;
    out.reserve(space.size());
    for (const auto& f : space.formats)
        for (double m : space.maxvals) {
            if (f.is_signed) {
                out.push_back({f, m, 0.0});
            } else {
                const std::vector<double> zps = space.zero_points.empty() ? std::vector<double>{0.0} : space.zero_points;
                for (double z : zps) out.push_back({f, m, z});
            }
        }
    return out;
}

SearchResult scan(const std::vector<FpQuantizerParams>& candidates, const kernels::SortedSamples& samples) {
    if (candidates.empty()) throw std::invalid_argument("empty search space");
    std::vector<std::vector<double>> grids;
    grids.reserve(candidates.size());
    for (const auto& c : candidates) grids.push_back(fp_grid(c));
    const auto errs = kernels::candidate_mse_omp(grids, samples);
    std::size_t best = 0;
    for (std::size_t i = 1; i < errs.size(); ++i)
        if (errs[i] < errs[best]) best = i;
    return {candidates[best], errs[best]};
}

SearchResult scan_reference(const std::vector<FpQuantizerParams>& candidates, std::span<const double> samples) {
    if (candidates.empty()) throw std::invalid_argument("empty search space");
    const Tensor x({samples.size()}, std::vector<double>(samples.begin(), samples.end()));
    SearchResult best{candidates.front(), std::numeric_limits<double>::infinity()};
    for (const auto& c : candidates) {
        const double e = mse(x, fp_quantize(x, c));
        if (e < best.mse) best = {c, e};
    }
    return best;
}

void require_samples(std::span<const double> samples) {
    if (samples.empty()) throw std::invalid_argument("quantizer search needs at least one sample");
}
}  // namespace

SearchResult search_signed(std::span<const double> samples, const SearchSpace& space) {
    require_samples(samples);
    const kernels::SortedSamples sorted({samples.begin(), samples.end()});
    return scan(enumerate(space), sorted);
}

SearchResult search_mixup(std::span<const double> samples, const SearchSpace& signed_space,
                          const SearchSpace& unsigned_space) {
    require_samples(samples);
    const kernels::SortedSamples sorted({samples.begin(), samples.end()});
    const SearchResult s = scan(enumerate(signed_space), sorted);
    const SearchResult u = scan(enumerate(unsigned_space), sorted);
    return u.mse < s.mse ? u : s;
}

SearchResult search_signed_reference(std::span<const double> samples, const SearchSpace& space) {
    require_samples(samples);
    return scan_reference(enumerate(space), samples);
}

SearchResult search_mixup_reference(std::span<const double> samples, const SearchSpace& signed_space,
                                    const SearchSpace& unsigned_space) {
    require_samples(samples);
    const SearchResult s = scan_reference(enumerate(signed_space), samples);
    const SearchResult u = scan_reference(enumerate(unsigned_space), samples);
    return u.mse < s.mse ? u : s;
}

CalibrationSet build_calibration_set(const DenoiserModel& model, const NoiseSchedule& schedule, std::size_t count,
                                     std::size_t strata, std::uint64_t seed) {
    if (strata == 0 || count < strata)
        throw std::invalid_argument("calibration set of " + std::to_string(count) + " samples cannot cover " +
                                    std::to_string(strata) + " timestep strata");
    if (strata > static_cast<std::size_t>(schedule.T))
        throw std::invalid_argument("more strata than timesteps");
    const std::size_t trajectories = (count + strata - 1) / strata;
    const NoisePredictor fp = [&](const Tensor& x, int t) { return forward(model, x, t); };
    const auto run = sample(fp, schedule, trajectories, model.input_dim, seed, true);

    Rng pick = stream(seed, "calib/strata");
    CalibrationSet set;
    set.x = Tensor({count, model.input_dim});
    set.t.reserve(count);
    std::size_t row = 0;
    for (std::size_t j = 0; j < trajectories && row < count; ++j) {
        for (std::size_t s = 0; s < strata && row < count; ++s) {
            const int lo = static_cast<int>(s * schedule.T / strata);
            const int hi = static_cast<int>((s + 1) * schedule.T / strata) - 1;
            const int t = std::uniform_int_distribution<int>(lo, std::max(lo, hi))(pick);
            const auto src = run.trajectory[t].row(j);
            std::copy(src.begin(), src.end(), set.x.row(row).begin());
            set.t.push_back(t);
            ++row;
        }
    }
    return set;
}

std::map<std::string, double> probe_maxval0(const DenoiserModel& model, const NoiseSchedule& schedule,
                                            std::size_t trajectories, std::uint64_t seed) {
    std::map<std::string, double> out;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        double m = 0.0;
        for (double v : model.layers[i].weight.raw()) m = std::max(m, std::fabs(v));
        out[site_name(i, "weight")] = m;
    }
    std::map<std::string, double> act;
    const ActivationProbe probe = [&](const std::string& site, const Tensor& in) {
        double& m = act[site];
        for (double v : in.raw()) m = std::max(m, std::fabs(v));
    };
    if (trajectories == 0) return out;
    {
        const NoisePredictor fp = [&](const Tensor& x, int t) {
            const int ts[1] = {t};
            return forward(model, x, ts, probe);
        };
        sample(fp, schedule, trajectories, model.input_dim, seed);
    }
    std::string missing;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const auto site = site_name(i, "act");
        const auto it = act.find(site);
        if (it == act.end())
            missing += (missing.empty() ? "" : ", ") + site;
        else
            out[site] = it->second;
    }
    if (!missing.empty()) throw std::runtime_error("quantizer sites never exercised by the probe: " + missing);
    return out;
}

std::map<std::string, std::vector<double>> collect_activations(const DenoiserModel& model, const CalibrationSet& set,
                                                               std::size_t max_samples, std::uint64_t seed) {
    struct Reservoir {
        std::vector<double> values;
        std::size_t seen = 0;
        Rng rng;
    };
    std::map<std::string, Reservoir> res;
    const ActivationProbe probe = [&](const std::string& site, const Tensor& in) {
        auto it = res.find(site);
        if (it == res.end()) it = res.emplace(site, Reservoir{{}, 0, stream(seed, "calib/reservoir/" + site)}).first;
        auto& r = it->second;
        for (double v : in.raw()) {
            if (r.values.size() < max_samples) {
                r.values.push_back(v);
            } else {
                const auto j = std::uniform_int_distribution<std::size_t>(0, r.seen)(r.rng);
                if (j < max_samples) r.values[j] = v;
            }
            ++r.seen;
        }
    };
    forward(model, set.x, set.t, probe);
    std::map<std::string, std::vector<double>> out;
    for (auto& [site, r] : res) out[site] = std::move(r.values);
    return out;
}

int QuantSettings::layer_bits(std::size_t layer, std::size_t layer_count, TensorRole role) const {
    const int bits = role == TensorRole::weight ? weight_bits : act_bits;
    if (bits >= 32) return 32;
    if (layer == 0 || layer + 1 == layer_count) return io_bits;
    return bits;
}

SiteCalibration calibrate_site(const std::string& site, std::span<const double> samples, double maxval0, int bits,
                               TensorRole role, LayerKind kind, bool mixup) {
    SiteCalibration cal;
    cal.site = site;
    cal.role = role;
    cal.kind = kind;
    cal.bits = bits;
    cal.maxval0 = maxval0;
    if (bits >= 32) return cal;
    if (!(maxval0 > 0.0)) {
        cal.degenerate = true;
        return cal;
    }
    const SearchSpace signed_space = build_search_space(bits, role, true, maxval0);
    SearchResult r;
    if (role == TensorRole::activation && kind == LayerKind::aal && mixup)
        r = search_mixup(samples, signed_space, build_search_space(bits, role, false, maxval0));
    else
        r = search_signed(samples, signed_space);
    cal.params = r.params;
    cal.mse = r.mse;
    cal.mode = r.params.format.is_signed ? QuantMode::signed_fp : QuantMode::unsigned_fp;
    return cal;
}

std::vector<SiteCalibration> calibrate_model(const DenoiserModel& model, const NoiseSchedule& schedule,
                                             const QuantSettings& settings, std::uint64_t seed) {
    const auto classes = classify_layers(model);
    const std::size_t n = model.layers.size();
    auto needs = [&](TensorRole role) {
        for (std::size_t i = 0; i < n; ++i)
            if (settings.layer_bits(i, n, role) < 32) return true;
        return false;
    };
    std::map<std::string, double> maxval0;
    std::map<std::string, std::vector<double>> acts;
    if (needs(TensorRole::activation)) {
        maxval0 = probe_maxval0(model, schedule, settings.probe_trajectories, derive_seed(seed, "calib/probe"));
        const auto set = build_calibration_set(model, schedule, settings.calib_samples, settings.calib_strata,
                                               derive_seed(seed, "calib/set"));
        acts = collect_activations(model, set, settings.max_site_samples, seed);
    } else {
        maxval0 = probe_maxval0(model, schedule, 0, seed);
    }

    std::vector<SiteCalibration> out;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& w = model.layers[i].weight.raw();
        auto wc = calibrate_site(site_name(i, "weight"), w, maxval0.at(site_name(i, "weight")),
                                 settings.layer_bits(i, n, TensorRole::weight), TensorRole::weight, classes[i].kind,
                                 false);
        wc.layer = i;
        out.push_back(wc);

        const auto act_site = site_name(i, "act");
        const int abits = settings.layer_bits(i, n, TensorRole::activation);
        SiteCalibration ac;
        if (abits < 32)
            ac = calibrate_site(act_site, acts.at(act_site), maxval0.at(act_site), abits, TensorRole::activation,
                                classes[i].kind, settings.mixup);
        else
            ac = calibrate_site(act_site, {}, 0.0, abits, TensorRole::activation, classes[i].kind, settings.mixup);
        ac.layer = i;
        out.push_back(ac);
    }
    return out;
}

}  // namespace qdiff
