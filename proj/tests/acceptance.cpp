// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include "cli_util.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

#include "qdiff/calib.hpp"
#include "qdiff/finetune.hpp"
#include "qdiff/fpq.hpp"
#include "qdiff/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <random>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

using namespace qdiff;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and sizes.
constexpr int kGridSettings = 20;
constexpr int kGridInputs = 10000;
constexpr int kCalibSets = 50;
constexpr double kCalibRelTol = 1e-12;
constexpr int kAalSeeds = 100;
constexpr double kAalFraction = 0.95;
constexpr double kScheduleTol = 1e-12;
constexpr int kGradModels = 20;
constexpr double kGradTol = 1e-4;
constexpr double kGapIdentityTol = 1e-10;
constexpr double kPearsonMargin = 0.1;
constexpr double kEndToEndMinutes = 15.0;
constexpr double kEndToEndRatio = 0.5;
const std::vector<std::uint64_t> kSeeds{1, 2, 3, 4, 5};

struct Outcome {
    bool pass = false;
    std::string detail;
};

using clock_type = std::chrono::steady_clock;

double seconds_since(clock_type::time_point t0) {
    return std::chrono::duration<double>(clock_type::now() - t0).count();
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

// Full-precision teachers under the default configuration, shared by the
// trend criteria.
const DenoiserModel& teacher(std::uint64_t seed) {
    static std::map<std::uint64_t, DenoiserModel> cache;
    auto it = cache.find(seed);
    if (it == cache.end()) {
        RunConfig c;
        c.seed = seed;
        it = cache.emplace(seed, train_fp(c).model).first;
    }
    return it->second;
}

RunConfig default_config(std::uint64_t seed) {
    RunConfig c;
    c.seed = seed;
    return c;
}

// 1. fp_quantize against the bit-pattern oracle, every format.
Outcome grid_oracle() {
    std::mt19937_64 rng(101);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::size_t formats = 0, checked = 0, mismatches = 0;
    for (int bits : {4, 6, 8})
        for (bool is_signed : {true, false}) {
            const int eb = is_signed ? bits - 1 : bits;
            for (int e = 0; e <= eb; ++e) {
                const FpFormat f{e, eb - e, is_signed};
                ++formats;
                for (int s = 0; s < kGridSettings; ++s) {
                    FpQuantizerParams p;
                    p.format = f;
                    p.maxval = std::exp(std::log(0.05) + u01(rng) * std::log(200.0));
                    p.zero_point = is_signed ? 0.0 : -0.3 * u01(rng) * p.maxval;
                    const auto g = oracle::grid(e, eb - e, is_signed, p.maxval, p.zero_point);
                    std::vector<double> x(kGridInputs);
                    const double lo = g.front() - 0.5 * p.maxval, hi = g.back() + 0.5 * p.maxval;
                    for (int i = 0; i < kGridInputs; ++i) {
                        const std::size_t j = rng() % g.size();
                        switch (i % 4) {
                            case 0: x[i] = g[j]; break;                                          // on the grid
                            case 1: x[i] = j + 1 < g.size() ? 0.5 * (g[j] + g[j + 1]) : g[j];  // ties
                            default: x[i] = lo + (hi - lo) * u01(rng);
                        }
                    }
                    const Tensor q = fp_quantize(Tensor({x.size()}, x), p);
                    for (int i = 0; i < kGridInputs; ++i) {
                        ++checked;
                        if (q[i] != oracle::nearest(g, x[i])) ++mismatches;
                    }
                }
            }
        }
    return {mismatches == 0 && formats == 39,
            std::to_string(formats) + " formats, " + std::to_string(checked) + " inputs, " +
                std::to_string(mismatches) + " mismatches"};
}

// Oracle arg-min over a search space, scanning every candidate.
double exhaustive_min(const std::vector<double>& x, const SearchSpace& space) {
    double best = INFINITY;
    for (const auto& f : space.formats)
        for (double m : space.maxvals)
            for (double z : f.is_signed ? std::vector<double>{0.0} : space.zero_points) {
                const auto g = oracle::grid(f.exponent_bits, f.mantissa_bits, f.is_signed, m, z);
                double s = 0.0;
                for (double v : x) {
                    // binary search on the oracle grid, same tie rule as oracle::nearest
                    const auto it = std::lower_bound(g.begin(), g.end(), v);
                    double q;
                    if (it == g.begin()) q = g.front();
                    else if (it == g.end()) q = g.back();
                    else q = oracle::nearest({*(it - 1), *it}, v);
                    s += (v - q) * (v - q);
                }
                best = std::min(best, s / static_cast<double>(x.size()));
            }
    return best;
}

bool close(double a, double b, double rel) { return std::fabs(a - b) <= rel * std::max(std::fabs(b), 1e-300); }

// 2. Calibration searches return the exhaustive minimum; mixup never loses.
Outcome calibration_optimality() {
    std::mt19937_64 rng(202);
    std::normal_distribution<double> n01;
    int bad = 0, mixup_worse = 0;
    double worst = 0.0;
    for (int k = 0; k < kCalibSets; ++k) {
        const int bits = std::array<int, 3>{4, 6, 8}[k % 3];
        const std::size_t n = 200 + rng() % 400;
        const double scale = 0.2 + 5.0 * std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        std::vector<double> x(n);
        for (auto& v : x) {
            const double z = n01(rng) * scale;
            v = k % 2 ? oracle::silu(z) : z;
        }
        double m0 = 0.0;
        for (double v : x) m0 = std::max(m0, std::fabs(v));
        const auto role = k % 4 < 2 ? TensorRole::activation : TensorRole::weight;
        const auto ss = build_search_space(bits, role, true, m0);
        const auto r = search_signed(x, ss);
        const double ref = exhaustive_min(x, ss);
        worst = std::max(worst, std::fabs(r.mse - ref) / ref);
        if (!close(r.mse, ref, kCalibRelTol)) ++bad;
        if (role == TensorRole::activation) {
            const auto us = build_search_space(bits, role, false, m0);
            const auto rm = search_mixup(x, ss, us);
            const double ref_m = std::min(ref, exhaustive_min(x, us));
            worst = std::max(worst, std::fabs(rm.mse - ref_m) / ref_m);
            if (!close(rm.mse, ref_m, kCalibRelTol)) ++bad;
            if (rm.mse > r.mse) ++mixup_worse;
        }
    }
    return {bad == 0 && mixup_worse == 0, std::to_string(kCalibSets) + " sets, " + std::to_string(bad) +
                                              " off the exhaustive minimum (worst rel " + fmt("%.2e", worst) + "), " +
                                              std::to_string(mixup_worse) + " with mixup > signed"};
}

// 3. SiLU outputs favour the unsigned grid with a zero point.
Outcome aal_claim() {
    const std::vector<double> scales{1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0, 5.5};
    int wins = 0, trials = 0;
    for (double s : scales)
        for (int seed = 0; seed < kAalSeeds; ++seed) {
            Rng rng = stream(static_cast<std::uint64_t>(seed), "acceptance/aal/" + std::to_string(s));
            std::vector<double> x = randn(rng, {2000}, s).raw();
            double m0 = 0.0;
            for (auto& v : x) {
                v = oracle::silu(v);
                m0 = std::max(m0, std::fabs(v));
            }
            const auto sg = search_signed(x, build_search_space(4, TensorRole::activation, true, m0));
            const auto mx = search_mixup(x, build_search_space(4, TensorRole::activation, true, m0),
                                         build_search_space(4, TensorRole::activation, false, m0));
            ++trials;
            if (!mx.params.format.is_signed && mx.mse < sg.mse) ++wins;
        }
    const double frac = static_cast<double>(wins) / trials;
    return {frac >= kAalFraction, std::to_string(wins) + "/" + std::to_string(trials) + " unsigned wins (" +
                                      fmt("%.1f%%", 100.0 * frac) + ")"};
}

// 4. Optimal MSE per site does not increase with bit-width.
Outcome bit_monotonicity() {
    const auto& m = teacher(kSeeds.front());
    const RunConfig c = default_config(kSeeds.front());
    const NoiseSchedule sched = c.make_schedule();
    const auto cls = classify_layers(m);
    const auto mv = probe_maxval0(m, sched, c.quant.probe_trajectories, derive_seed(c.seed, "acceptance/probe"));
    const auto set = build_calibration_set(m, sched, c.quant.calib_samples, c.quant.calib_strata,
                                           derive_seed(c.seed, "acceptance/calib"));
    const auto acts = collect_activations(m, set, c.quant.max_site_samples, derive_seed(c.seed, "acceptance/res"));
    int sites = 0, violations = 0;
    std::string where;
    for (std::size_t i = 0; i < m.layers.size(); ++i)
        for (auto role : {TensorRole::weight, TensorRole::activation}) {
            const bool w = role == TensorRole::weight;
            const auto site = site_name(i, w ? "weight" : "act");
            const auto& samples = w ? m.layers[i].weight.raw() : acts.at(site);
            double mse[3];
            for (int b = 0; b < 3; ++b)
                mse[b] = calibrate_site(site, samples, mv.at(site), 4 + 2 * b, role, cls[i].kind, !w).mse;
            ++sites;
            if (!(mse[0] >= mse[1] && mse[1] >= mse[2])) {
                ++violations;
                where += " " + site;
            }
        }
    return {violations == 0, std::to_string(sites) + " sites, " + std::to_string(violations) + " violations" + where};
}

// 5. Schedule tables against scalar recomputation.
Outcome schedule_exactness() {
    double worst = 0.0;
    const RunConfig c = default_config(0);
    for (int T : {10, 100, 1000}) {
        const auto s = make_schedule(T, c.schedule.beta_start, c.schedule.beta_end, 1.0);
        const auto o = oracle::schedule(T, c.schedule.beta_start, c.schedule.beta_end);
        for (int t = 0; t < T; ++t) {
            worst = std::max(worst, std::fabs(s.alpha_bar[t] - o.alpha_bar[t]) / o.alpha_bar[t]);
            worst = std::max(worst, std::fabs(s.gamma[t] - o.gamma[t]) / o.gamma[t]);
        }
    }
    return {worst <= kScheduleTol, "max relative deviation " + fmt("%.2e", worst)};
}

// 6. LoRA and router gradients against central differences.
Outcome gradient_checks() {
    double worst = 0.0;
    std::string where;
    std::size_t params = 0;
    for (int k = 0; k < kGradModels; ++k) {
        const std::uint64_t seed = 1000 + static_cast<std::uint64_t>(k);
        for (int mode = 0; mode < 3; ++mode) {
            auto m = gradcheck::make_micro(seed);
            const auto r = mode == 2 ? gradcheck::check_gate_linear(m, seed) : gradcheck::check(m, mode == 0);
            params += r.checked;
            if (r.worst > worst) {
                worst = r.worst;
                where = r.where + " (model " + std::to_string(k) + ")";
            }
        }
    }
    return {worst < kGradTol, std::to_string(kGradModels) + " models, " + std::to_string(params) +
                                  " coordinates, max rel err " + fmt("%.2e", worst) + " at " + where};
}

// 7. gap(t) = gamma_t^2 * noise mse at every t.
Outcome gap_identity() {
    double worst = 0.0;
    int rows = 0;
    for (std::uint64_t seed : {kSeeds[0], kSeeds[1]}) {
        const RunConfig c = default_config(seed);
        const NoiseSchedule s = c.make_schedule();
        const QuantizedModel q(teacher(seed), calibrate(c, teacher(seed)));
        for (const auto& r : diagnose(q, nullptr, Strategy::single, nullptr, teacher(seed), s,
                                      c.eval.diag_trajectories, derive_seed(seed, "eval/diagnose"))) {
            const double want = s.gamma[r.t] * s.gamma[r.t] * r.loss_plain;
            worst = std::max(worst, std::fabs(r.gap - want) / std::max(want, 1e-300));
            ++rows;
        }
    }
    return {worst <= kGapIdentityTol, std::to_string(rows) + " timesteps, max rel deviation " + fmt("%.2e", worst)};
}

// 8. The aligned loss tracks the one-step gap better than the plain loss.
Outcome dfa_alignment() {
    std::vector<double> diffs;
    std::string per;
    for (std::uint64_t seed : kSeeds) {
        const RunConfig c = default_config(seed);
        const NoiseSchedule s = c.make_schedule();
        const QuantizedModel q(teacher(seed), calibrate(c, teacher(seed)));
        std::vector<double> plain, dfa, gap;
        for (const auto& r : diagnose(q, nullptr, Strategy::single, nullptr, teacher(seed), s,
                                      c.eval.diag_trajectories, derive_seed(seed, "eval/diagnose"))) {
            plain.push_back(r.loss_plain);
            dfa.push_back(r.loss_dfa);
            gap.push_back(r.gap);
        }
        const double rp = pearson(plain, gap), rd = pearson(dfa, gap);
        diffs.push_back(rd - rp);
        per += " " + fmt("%.3f", rd) + "/" + fmt("%.3f", rp);
    }
    const double med = oracle::median(diffs);
    return {med >= kPearsonMargin, "median r_dfa - r_plain = " + fmt("%.3f", med) + " (dfa/plain per seed:" + per + ")"};
}

// 9. Equal-budget strategies: split_half <= single < random.
Outcome strategy_ordering() {
    std::map<Strategy, std::vector<double>> gaps;
    std::string per;
    for (std::uint64_t seed : kSeeds) {
        RunConfig c = default_config(seed);
        c.finetune.hub_size = 2;
        const NoiseSchedule s = c.make_schedule();
        const DenoiserModel& fp = teacher(seed);
        const QuantizedModel q(fp, calibrate(c, fp));
        per += " [";
        for (auto st : {Strategy::split_half, Strategy::single, Strategy::random}) {
            c.finetune.strategy = st;
            const auto r = finetune(q, fp, s, c.finetune, seed);
            const double g = trajectory_gap(q, &r.hub, st, &r.router, fp, s, c.eval.samples, derive_seed(seed, "eval/gap"));
            gaps[st].push_back(g);
            per += (st == Strategy::split_half ? "" : " ") + fmt("%.4g", g);
        }
        per += "]";
    }
    const double sh = oracle::median(gaps[Strategy::split_half]), si = oracle::median(gaps[Strategy::single]),
                 ra = oracle::median(gaps[Strategy::random]);
    return {sh <= si && si < ra, "median gaps split_half " + fmt("%.4g", sh) + ", single " + fmt("%.4g", si) +
                                     ", random " + fmt("%.4g", ra) + "; per seed (split/single/random)" + per};
}

// 10. Module ablation: all-on < all-off and msfp-only < all-off.
Outcome ablation_direction() {
    std::vector<double> off, msfp, all;
    std::string per;
    for (std::uint64_t seed : kSeeds) {
        const auto rows = ablation_run(default_config(seed), teacher(seed));
        off.push_back(rows[0].gap);
        msfp.push_back(rows[1].gap);
        all.push_back(rows[5].gap);
        per += " [" + fmt("%.4g", rows[0].gap) + " " + fmt("%.4g", rows[1].gap) + " " + fmt("%.4g", rows[5].gap) + "]";
    }
    const double o = oracle::median(off), m = oracle::median(msfp), a = oracle::median(all);
    return {a < o && m < o, "median gaps all-off " + fmt("%.4g", o) + ", msfp-only " + fmt("%.4g", m) + ", all-on " +
                                fmt("%.4g", a) + "; per seed (off/msfp/all)" + per};
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        const auto ext = e.path().extension();
        if (ext == ".ckpt" || ext == ".csv") out[e.path().filename().string()] = cli::slurp(e.path());
    }
    return out;
}

// 11. Rerunning every command reproduces checkpoints and CSVs byte for byte.
Outcome cli_determinism() {
    const fs::path dir = cli::scratch("determinism");
    const auto cfg = cli::write_config(dir, cli::tiny_config(11)).string();
    const std::string common = " --config " + cfg + " --out " + (dir / "run").string();
    const std::vector<std::string> cmds{"train-fp", "calibrate", "finetune", "sample", "diagnose", "ablate"};
    std::size_t files = 0;
    std::vector<std::string> differing;
    for (const auto& cmd : cmds) {
        if (cli::run(cmd + common) != 0) return {false, cmd + " failed"};
        const auto first = snapshot(dir / "run");
        if (cli::run(cmd + common) != 0) return {false, cmd + " failed on rerun"};
        const auto second = snapshot(dir / "run");
        for (const auto& [name, bytes] : first)
            if (second.at(name) != bytes) differing.push_back(cmd + ":" + name);
        files = second.size();
    }
    fs::remove_all(dir);
    std::string detail = std::to_string(cmds.size()) + " commands, " + std::to_string(files) + " artefacts";
    for (const auto& d : differing) detail += " differs:" + d;
    return {differing.empty(), detail};
}

std::string capture(const std::string& args) {
    const std::string cmd = std::string("\"") + QDIFF_CLI + "\" " + args + " 2>&1";
    std::string out;
    if (FILE* p = popen(cmd.c_str(), "r")) {
        char buf[512];
        while (std::fgets(buf, sizeof buf, p)) out += buf;
        if (pclose(p) != 0) out += "\n<nonzero exit>";
    }
    return out;
}

// 12. Full pipeline through the CLI.
Outcome end_to_end() {
    const fs::path dir = cli::scratch("e2e");
    const std::string common = " --seed 1 --out " + (dir / "run").string();
    const auto t0 = clock_type::now();
    std::string log = capture("train-fp" + common);
    log += capture("calibrate --bits 4/4" + common);
    const std::string ft = capture("finetune --bits 4/4 --strategy router --hub-size 2 --loss dfa" + common);
    log += ft + capture("sample" + common);
    const double minutes = seconds_since(t0) / 60.0;
    fs::remove_all(dir);
    if (log.find("<nonzero exit>") != std::string::npos) return {false, "a command failed:\n" + log};
    std::smatch m;
    if (!std::regex_search(ft, m, std::regex(R"(trajectory gap ([0-9.eE+-]+) -> ([0-9.eE+-]+))")))
        return {false, "no gap line in finetune output"};
    const double before = std::stod(m[1]), after = std::stod(m[2]);
    return {minutes < kEndToEndMinutes && after < kEndToEndRatio * before,
            fmt("%.1f min, gap ", minutes) + fmt("%.4g", before) + " -> " + fmt("%.4g", after) + " (" +
                fmt("%.1f%%", 100.0 * after / before) + ")"};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"C1 grid/rounding oracle", grid_oracle},
        {"C2 calibration optimality", calibration_optimality},
        {"C3 AAL unsigned claim", aal_claim},
        {"C4 bit-width monotonicity", bit_monotonicity},
        {"C5 schedule exactness", schedule_exactness},
        {"C6 gradient checks", gradient_checks},
        {"C7 one-step gap identity", gap_identity},
        {"C8 DFA alignment trend", dfa_alignment},
        {"C9 strategy ordering", strategy_ordering},
        {"C10 ablation direction", ablation_direction},
        {"C11 CLI determinism", cli_determinism},
        {"C12 end-to-end", end_to_end},
    };
    const std::string only = argc > 1 ? argv[1] : "";
    int failed = 0;
    for (const auto& [name, run] : criteria) {
        if (!only.empty() && name.rfind(only + " ", 0) != 0) continue;
        const auto t0 = clock_type::now();
        Outcome o;
        try {
            o = run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::printf("%s %s: %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), seconds_since(t0));
        std::fflush(stdout);
        if (!o.pass) ++failed;
    }
    return failed == 0 ? 0 : 1;
}
