#include "oracles.hpp"
#include "toy.hpp"

#include <doctest.h>

#include "qdiff/calib.hpp"
#include "qdiff/kernels.hpp"

#include <cmath>
#include <map>
#include <set>

using namespace qdiff;

namespace {
std::vector<double> draw(Rng& rng, std::size_t n, double std) { return randn(rng, {n}, std).raw(); }

double brute_min(const std::vector<double>& x, const SearchSpace& space) {
    double best = INFINITY;
    for (const auto& f : space.formats)
        for (double m : space.maxvals)
            for (double z : f.is_signed ? std::vector<double>{0.0} : space.zero_points)
                best = std::min(best, oracle::quant_mse(oracle::grid(f.exponent_bits, f.mantissa_bits, f.is_signed, m, z), x));
    return best;
}
}  // namespace

TEST_SUITE("search space") {
    TEST_CASE("4-bit weight formats") {
        const auto s = build_search_space(4, TensorRole::weight, true, 1.0);
        const std::vector<FpFormat> expect{{3, 0, true}, {2, 1, true}, {1, 2, true}, {0, 3, true}};
        CHECK(s.formats == expect);
        CHECK(s.maxvals.size() == 100);
        CHECK(s.maxvals.front() == doctest::Approx(0.8));
        CHECK(s.maxvals.back() == doctest::Approx(2.0));
    }
    TEST_CASE("6- and 8-bit weight bounds") {
        for (int bits : {6, 8}) {
            const auto s = build_search_space(bits, TensorRole::weight, true, 2.5);
            CHECK(s.maxvals.front() == doctest::Approx(0.9 * 2.5));
            CHECK(s.maxvals.back() == doctest::Approx(2.0 * 2.5));
            CHECK(s.formats.size() == 4);
            for (const auto& f : s.formats) CHECK(f.bits() == bits);
        }
    }
    TEST_CASE("activation spaces") {
        const auto u = build_search_space(4, TensorRole::activation, false, 3.0);
        CHECK(u.formats.size() == 5);
        for (const auto& f : u.formats) CHECK((f.exponent_bits + f.mantissa_bits == 4 && !f.is_signed));
        CHECK(u.maxvals.size() == 99);
        CHECK(u.maxvals.front() > 0.0);
        CHECK(u.maxvals.back() == 3.0);
        REQUIRE(u.zero_points.size() == 6);
        CHECK(u.zero_points.front() == doctest::Approx(-0.3));
        CHECK(u.zero_points.back() == 0.0);
        const auto s = build_search_space(8, TensorRole::activation, true, 3.0);
        CHECK(s.formats.size() == 8);
        CHECK(s.zero_points.empty());
    }
    TEST_CASE("maxval0 must be positive") {
        CHECK_THROWS_AS(build_search_space(4, TensorRole::weight, true, 0.0), std::invalid_argument);
    }
}

TEST_SUITE("search") {
    TEST_CASE("all-zero samples pick the first candidate") {
        const std::vector<double> x(50, 0.0);
        const auto space = build_search_space(4, TensorRole::weight, true, 1.0);
        const auto r = search_signed(x, space);
        CHECK(r.mse == 0.0);
        CHECK(r.params.format == space.formats.front());
        CHECK(r.params.maxval == space.maxvals.front());
    }

    TEST_CASE("samples on the E1M2 grid at maxval 2 select it") {
        const auto space = build_search_space(4, TensorRole::weight, true, 1.0);
        REQUIRE(space.maxvals.back() == 2.0);
        const auto g = fp_grid({{1, 2, true}, 2.0, 0.0});
        std::vector<double> x;
        for (int k = 0; k < 4; ++k) x.insert(x.end(), g.begin(), g.end());
        const auto r = search_signed(x, space);
        CHECK(r.mse == 0.0);
        CHECK(r.params.format == FpFormat{1, 2, true});
        CHECK(r.params.maxval == 2.0);
    }

    TEST_CASE("returned MSE is the exhaustive minimum") {
        Rng rng = stream(31, "test/search");
        const auto x = draw(rng, 600, 1.0);
        double m0 = 0.0;
        for (double v : x) m0 = std::max(m0, std::fabs(v));
        const auto space = build_search_space(4, TensorRole::activation, true, m0);
        const auto r = search_signed(x, space);
        CHECK(r.mse == brute_min(x, space));
        CHECK(r.mse == search_signed_reference(x, space).mse);
        CHECK(r.params == search_signed_reference(x, space).params);
    }

    TEST_CASE("mixup selects unsigned on exactly representable unsigned data") {
        const auto uspace = build_search_space(4, TensorRole::activation, false, 2.0);
        const FpQuantizerParams target{{2, 2, false}, uspace.maxvals[60], -0.3};
        const auto g = fp_grid(target);
        std::vector<double> x;
        for (int k = 0; k < 3; ++k) x.insert(x.end(), g.begin(), g.end());
        const auto r = search_mixup(x, build_search_space(4, TensorRole::activation, true, 2.0), uspace);
        CHECK(r.mse == 0.0);
        CHECK_FALSE(r.params.format.is_signed);
    }

    TEST_CASE("mixup on silu(N(0, 3)) prefers unsigned in most seeds") {
        int unsigned_wins = 0;
        for (int seed = 0; seed < 100; ++seed) {
            Rng rng = stream(seed, "test/silu-mixup");
            auto x = draw(rng, 512, 3.0);
            double m0 = 0.0;
            for (auto& v : x) m0 = std::max(m0, std::fabs(v = oracle::silu(v)));
            const auto r = search_mixup(x, build_search_space(4, TensorRole::activation, true, m0),
                                        build_search_space(4, TensorRole::activation, false, m0));
            unsigned_wins += !r.params.format.is_signed;
        }
        CHECK(unsigned_wins >= 90);
    }

    TEST_CASE("symmetric data: both modes evaluated, mixup never worse") {
        Rng rng = stream(33, "test/sym");
        for (int trial = 0; trial < 10; ++trial) {
            const auto x = draw(rng, 400, 1.0);
            double m0 = 0.0;
            for (double v : x) m0 = std::max(m0, std::fabs(v));
            const auto s = build_search_space(4, TensorRole::activation, true, m0);
            const auto u = build_search_space(4, TensorRole::activation, false, m0);
            const auto rm = search_mixup(x, s, u);
            const auto rs = search_signed(x, s);
            const auto ru = search_signed(x, u);
            CHECK(rm.mse <= rs.mse);
            CHECK(rm.mse == std::min(rs.mse, ru.mse));
        }
    }

    TEST_CASE("candidate MSE is bitwise identical across kernels and thread counts") {
        Rng rng = stream(34, "test/kern");
        const auto x = draw(rng, 3000, 1.3);
        std::vector<std::vector<double>> grids;
        for (const auto& p : {FpQuantizerParams{{2, 1, true}, 2.0, 0.0}, FpQuantizerParams{{3, 4, true}, 4.0, 0.0},
                              FpQuantizerParams{{2, 2, false}, 3.0, -0.18}})
            grids.push_back(fp_grid(p));
        const auto serial = kernels::candidate_mse_serial(grids, x);
        const auto par = kernels::candidate_mse_omp(grids, kernels::SortedSamples(x));
        CHECK(serial == par);
        for (std::size_t i = 0; i < grids.size(); ++i) CHECK(serial[i] == oracle::quant_mse(grids[i], x));
    }

    TEST_CASE("empty samples and empty spaces are errors") {
        const auto space = build_search_space(4, TensorRole::weight, true, 1.0);
        CHECK_THROWS(search_signed(std::vector<double>{}, space));
        CHECK_THROWS(search_signed(std::vector<double>{1.0}, SearchSpace{}));
    }
}

TEST_SUITE("layers") {
    TEST_CASE("linear-silu-linear-silu-linear") {
        const auto c = classify_layers(DenoiserModel::zeros({2, 8, 2, 4}));
        REQUIRE(c.size() == 3);
        CHECK(c[0].kind == LayerKind::nal);
        CHECK(c[1].kind == LayerKind::aal);
        CHECK(c[2].kind == LayerKind::aal);
    }
    TEST_CASE("no SiLU means no AAL") {
        DenoiserModel m = DenoiserModel::zeros({2, 8, 2, 4});
        for (auto& l : m.layers) l.activation = Activation::none;
        for (const auto& c : classify_layers(m)) CHECK(c.kind == LayerKind::nal);
    }
    TEST_CASE("default toy architecture") {
        const auto c = classify_layers(DenoiserModel::zeros(ModelArch{}));
        std::string kinds;
        for (const auto& l : c) kinds += std::string(to_string(l.kind)) + " ";
        CHECK(kinds == "NAL AAL AAL AAL ");
    }
}

TEST_SUITE("probe and calibration set") {
    const NoiseSchedule sched = make_schedule(100, 1e-3, 0.2, 1.0);

    TEST_CASE("weight sites read max |W|") {
        Rng rng = stream(41, "test/probe");
        const DenoiserModel m = DenoiserModel::init({2, 16, 2, 8}, rng);
        const auto mv = probe_maxval0(m, sched, 0, 1);
        for (std::size_t i = 0; i < m.layers.size(); ++i) {
            double w = 0.0;
            for (double v : m.layers[i].weight.raw()) w = std::max(w, std::fabs(v));
            CHECK(mv.at(site_name(i, "weight")) == w);
        }
    }

    TEST_CASE("seeded probe golden value") {
        Rng rng = stream(42, "test/probe-golden");
        const DenoiserModel m = DenoiserModel::init(ModelArch{}, rng);
        const auto mv = probe_maxval0(m, sched, 8, 7);
        CHECK(mv.at("layer2.act") == doctest::Approx(847.992117377093).epsilon(1e-12));
    }

    TEST_CASE("zero weights leave downstream sites degenerate") {
        const DenoiserModel m = DenoiserModel::zeros({2, 8, 2, 4});
        QuantSettings s;
        s.probe_trajectories = 2;
        s.calib_samples = 32;
        const auto sites = calibrate_model(m, sched, s, 3);
        for (const auto& c : sites) {
            INFO(c.site);
            if (c.site == "layer0.act") {
                CHECK_FALSE(c.degenerate);
            } else {
                CHECK(c.degenerate);
                CHECK(c.mode == QuantMode::passthrough);
            }
        }
    }

    TEST_CASE("strata coverage, size, and determinism") {
        const auto& m = toy::teacher();
        const auto a = build_calibration_set(m, sched, 256, 16, 5);
        const auto b = build_calibration_set(m, sched, 256, 16, 5);
        CHECK(a.x.rows() == 256);
        CHECK(a.t.size() == 256);
        CHECK(a.x == b.x);
        CHECK(a.t == b.t);
        std::set<int> buckets;
        for (int t : a.t) buckets.insert(t * 16 / 100);
        CHECK(buckets.size() == 16);
        CHECK_THROWS_AS(build_calibration_set(m, sched, 8, 16, 5), std::invalid_argument);
    }

    TEST_CASE("6-bit calibration MSE is stable across calibration sets") {
        // One pair of 256-sample sets differs by more than 20% about one time
        // in five (rare tail activations), so the bound is put on the median
        // over five independent pairs.
        const auto& m = toy::teacher();
        const auto cls = classify_layers(m);
        const auto mv = probe_maxval0(m, sched, 64, 1);
        std::map<std::string, std::vector<double>> rel;
        for (std::uint64_t sa = 11; sa < 21; sa += 2) {
            const auto a = collect_activations(m, build_calibration_set(m, sched, 256, 16, sa), 1 << 16, sa);
            const auto b = collect_activations(m, build_calibration_set(m, sched, 256, 16, sa + 1), 1 << 16, sa + 1);
            for (std::size_t i = 0; i < m.layers.size(); ++i) {
                const auto site = site_name(i, "act");
                const auto ca = calibrate_site(site, a.at(site), mv.at(site), 6, TensorRole::activation, cls[i].kind, true);
                const auto cb = calibrate_site(site, b.at(site), mv.at(site), 6, TensorRole::activation, cls[i].kind, true);
                REQUIRE(ca.mse > 0.0);
                rel[site].push_back(std::fabs(ca.mse - cb.mse) / ca.mse);
            }
        }
        for (const auto& [site, r] : rel) {
            INFO(site);
            CHECK(oracle::median(r) < 0.2);
        }
    }

    TEST_CASE("AAL sites degrade more than NAL sites at 4-bit signed") {
        const auto& m = toy::teacher();
        const auto cls = classify_layers(m);
        const auto mv = probe_maxval0(m, sched, 16, 1);
        const auto acts = collect_activations(m, build_calibration_set(m, sched, 256, 16, 2), 1 << 16, 2);
        double aal = 0.0, nal = 0.0;
        int n_aal = 0, n_nal = 0;
        for (std::size_t i = 0; i < m.layers.size(); ++i) {
            const auto site = site_name(i, "act");
            const auto& x = acts.at(site);
            double power = 0.0;
            for (double v : x) power += v * v;
            power /= double(x.size());
            const auto c = calibrate_site(site, x, mv.at(site), 4, TensorRole::activation, cls[i].kind, false);
            (cls[i].kind == LayerKind::aal ? aal : nal) += c.mse / power;
            ++(cls[i].kind == LayerKind::aal ? n_aal : n_nal);
        }
        CHECK(aal / n_aal > nal / n_nal);
    }

    TEST_CASE("32-bit settings give identity quantizers") {
        const auto& m = toy::teacher();
        QuantSettings s;
        s.weight_bits = 32;
        s.act_bits = 32;
        const auto sites = calibrate_model(m, sched, s, 1);
        for (const auto& c : sites) CHECK(c.mode == QuantMode::passthrough);
    }

    TEST_CASE("calibration is reproducible") {
        const auto& m = toy::teacher();
        QuantSettings s;
        s.probe_trajectories = 8;
        s.calib_samples = 64;
        const auto a = calibrate_model(m, sched, s, 9);
        const auto b = calibrate_model(m, sched, s, 9);
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].params == b[i].params);
            CHECK(a[i].mse == b[i].mse);
        }
    }
}
