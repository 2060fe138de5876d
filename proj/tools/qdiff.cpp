// qdiff: train-fp, calibrate, finetune, sample, diagnose, ablate.
#include "qdiff/checkpoint.hpp"
#include "qdiff/config.hpp"
#include "qdiff/pipeline.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace qdiff;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Options {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::string> bits;
    std::optional<std::size_t> hub_size;
    std::optional<std::string> loss;
    std::optional<std::string> strategy;
    std::vector<std::string> overrides;  // --section.key=value

    std::string fp, quant, ckpt, x_T;
    std::optional<std::size_t> n;
};

RunConfig resolve_config(const Options& o) {
    json doc = json::object();
    if (!o.config_path.empty()) {
        std::ifstream in(o.config_path);
        if (!in) throw UsageError("cannot open config " + o.config_path);
        doc = json::parse(in, nullptr, false);
        if (doc.is_discarded() || !doc.is_object()) throw UsageError("config " + o.config_path + " is not a JSON object");
    }
    for (const auto& a : o.overrides) apply_override(doc, a);
    if (o.seed) doc["seed"] = *o.seed;
    if (o.out) doc["out"] = *o.out;
    if (o.bits) {
        const auto slash = o.bits->find('/');
        if (slash == std::string::npos) throw UsageError("--bits expects W/A, e.g. 4/4");
        try {
            doc["quant"]["weight_bits"] = std::stoi(o.bits->substr(0, slash));
            doc["quant"]["act_bits"] = std::stoi(o.bits->substr(slash + 1));
        } catch (const std::logic_error&) {
            throw UsageError("--bits expects W/A, e.g. 4/4");
        }
    }
    if (o.hub_size) doc["finetune"]["hub_size"] = *o.hub_size;
    if (o.loss) doc["finetune"]["loss"] = *o.loss;
    if (o.strategy) doc["finetune"]["strategy"] = *o.strategy;
    return config_from_json(doc);
}

fs::path input_path(const std::string& given, const RunConfig& c, const char* fallback) {
    const fs::path p = given.empty() ? fs::path(c.out) / fallback : fs::path(given);
    if (!fs::is_regular_file(p)) throw UsageError("missing input " + p.string());
    return p;
}

class Run {
public:
    Run(std::string command, const RunConfig& config) : command_(std::move(command)), config_(config) {
        fs::create_directories(config.out);
    }

    Checkpoint load(const fs::path& p) {
        const auto bytes = read_file(p);
        inputs_[p.string()] = content_hash(bytes);
        try {
            return deserialize(bytes);
        } catch (const std::exception& e) {
            throw UsageError(p.string() + ": " + e.what());
        }
    }

    Tensor load_matrix(const fs::path& p) {
        inputs_[p.string()] = content_hash(read_file(p));
        return read_matrix_csv(p);
    }

    void emit(const std::string& name, const std::vector<std::uint8_t>& bytes) {
        write_file(fs::path(config_.out) / name, bytes);
        outputs_[name] = content_hash(bytes);
    }
    void emit(const std::string& name, const std::string& text) {
        emit(name, std::vector<std::uint8_t>(text.begin(), text.end()));
    }

    void finish() {
        emit("config.json", to_json(config_).dump(2) + "\n");
        const json manifest = {
            {"command", command_}, {"config", to_json(config_)}, {"inputs", inputs_}, {"outputs", outputs_}};
        write_text(fs::path(config_.out) / (command_ + ".manifest.json"), manifest.dump(2) + "\n");
    }

private:
    std::string command_;
    RunConfig config_;
    std::map<std::string, std::string> inputs_, outputs_;
};

void cmd_train_fp(const RunConfig& c) {
    Run run("train-fp", c);
    const TrainFpResult r = train_fp(c);
    run.emit("fp.ckpt", serialize(Checkpoint{r.model, {}, {}, {}, {}}));
    run.emit("train_fp_loss.csv", loss_curve_csv(r.curve));
    run.finish();
    if (!r.curve.empty()) std::printf("final loss %s\n", format_double(r.curve.back()).c_str());
}

void cmd_calibrate(const RunConfig& c, const Options& o) {
    Run run("calibrate", c);
    const Checkpoint fp = run.load(input_path(o.fp, c, "fp.ckpt"));
    const auto sites = calibrate(c, fp.model);
    run.emit("quant.ckpt", serialize(Checkpoint{fp.model, sites, {}, {}, {}}));
    run.emit("calib.csv", calib_csv(sites));
    run.finish();
    for (const auto& s : sites)
        if (s.degenerate) std::fprintf(stderr, "warning: degenerate site %s left unquantized\n", s.site.c_str());
    const QuantizedModel q(fp.model, sites);
    const double gap = trajectory_gap(q, nullptr, Strategy::single, nullptr, fp.model, c.make_schedule(),
                                      c.eval.samples, derive_seed(c.seed, "eval/gap"));
    std::printf("trajectory gap %s\n", format_double(gap).c_str());
}

void cmd_finetune(const RunConfig& c, const Options& o) {
    Run run("finetune", c);
    const Checkpoint fp = run.load(input_path(o.fp, c, "fp.ckpt"));
    const Checkpoint qc = run.load(input_path(o.quant, c, "quant.ckpt"));
    if (!qc.quantizers) throw UsageError("quantized checkpoint has no quantizers");
    const QuantizedModel q(qc.model, *qc.quantizers);
    const NoiseSchedule sched = c.make_schedule();
    const FinetuneResult r = finetune(q, fp.model, sched, c.finetune, c.seed);

    Checkpoint out{qc.model, qc.quantizers, r.hub, {}, c.finetune.strategy};
    if (c.finetune.strategy == Strategy::router) out.router = r.router;
    run.emit("finetuned.ckpt", serialize(out));
    run.emit("finetune_loss.csv", finetune_curve_csv(r.curve));
    if (c.finetune.strategy != Strategy::random) {
        const Allocation alloc = make_allocation(c.finetune.strategy, sched, &r.router, nullptr);
        run.emit("allocation.csv", allocation_csv(allocation_table(alloc, r.hub.groups(), r.hub.hub_size), r.hub.layers));
    }
    run.finish();
    const std::uint64_t gap_seed = derive_seed(c.seed, "eval/gap");
    const double before = trajectory_gap(q, nullptr, Strategy::single, nullptr, fp.model, sched, c.eval.samples, gap_seed);
    const double after =
        trajectory_gap(q, &r.hub, c.finetune.strategy, &r.router, fp.model, sched, c.eval.samples, gap_seed);
    std::printf("trajectory gap %s -> %s\n", format_double(before).c_str(), format_double(after).c_str());
}

void cmd_sample(const RunConfig& c, const Options& o) {
    Run run("sample", c);
    const Checkpoint ck = run.load(input_path(o.ckpt, c, "finetuned.ckpt"));
    const NoiseSchedule sched = c.make_schedule();
    Rng alloc_rng = stream(c.seed, "sample/random");
    const NoisePredictor predict = make_predictor(ck, sched.T, &alloc_rng);
    const std::size_t dim = ck.model.input_dim;

    Tensor samples;
    if (!o.x_T.empty()) {
        if (!fs::is_regular_file(o.x_T)) throw UsageError("missing input " + o.x_T);
        const Tensor x_T = run.load_matrix(o.x_T);
        if (x_T.cols() != dim) throw UsageError("x_T has " + std::to_string(x_T.cols()) + " columns, model expects " +
                                                std::to_string(dim));
        const SamplerNoise noise = sampler_noise(sched, x_T.rows(), dim, c.seed);
        samples = sample_from(predict, sched, x_T, noise.deltas).samples;
    } else {
        samples = sample(predict, sched, o.n.value_or(c.eval.samples), dim, c.seed).samples;
    }
    run.emit("samples.csv", matrix_csv(samples));
    run.finish();
    if (c.dataset.kind == "mixture") {
        const auto means = cluster_means(samples, c.dataset.modes);
        for (std::size_t k = 0; k < means.size(); ++k) {
            std::printf("mode %zu mean", k);
            for (double v : means[k]) std::printf(" %.4f", v);
            std::printf("\n");
        }
    }
}

void cmd_diagnose(const RunConfig& c, const Options& o) {
    Run run("diagnose", c);
    const Checkpoint fp = run.load(input_path(o.fp, c, "fp.ckpt"));
    const Checkpoint ck = run.load(input_path(o.ckpt, c, "quant.ckpt"));
    const QuantizedModel q =
        ck.quantizers ? QuantizedModel(ck.model, *ck.quantizers) : QuantizedModel::full_precision(ck.model);
    const LoraHub* hub = ck.hub ? &*ck.hub : nullptr;
    const Router* router = ck.router ? &*ck.router : nullptr;
    const Strategy strategy = ck.strategy.value_or(Strategy::single);
    const auto rows = diagnose(q, hub, strategy, router, fp.model, c.make_schedule(), c.eval.diag_trajectories, c.seed);
    run.emit("diagnose.csv", diagnose_csv(rows));
    run.finish();
    std::vector<double> lp, ld, g;
    for (const auto& r : rows) {
        lp.push_back(r.loss_plain);
        ld.push_back(r.loss_dfa);
        g.push_back(r.gap);
    }
    std::printf("pearson(loss_plain, gap) %.4f\npearson(loss_dfa, gap) %.4f\n", pearson(lp, g), pearson(ld, g));
}

void cmd_ablate(const RunConfig& c, const Options& o) {
    Run run("ablate", c);
    const Checkpoint fp = run.load(input_path(o.fp, c, "fp.ckpt"));
    const auto rows = ablation_run(c, fp.model);
    run.emit("ablation.csv", ablation_csv(rows));
    run.finish();
    for (const auto& r : rows)
        std::printf("msfp=%d talora=%d dfa=%d gap %s\n", r.flags.msfp, r.flags.talora, r.flags.dfa,
                    format_double(r.gap).c_str());
}

// "--section.key=value" goes to the config; everything else to CLI11.
std::vector<std::string> split_overrides(int argc, char** argv, std::vector<std::string>& overrides) {
    std::vector<std::string> rest;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        const auto eq = a.find('=');
        if (a.rfind("--", 0) == 0 && eq != std::string::npos && a.substr(2, eq - 2).find('.') != std::string::npos)
            overrides.push_back(a.substr(2));
        else
            rest.push_back(a);
    }
    std::reverse(rest.begin(), rest.end());  // CLI11 consumes from the back
    return rest;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Quantized diffusion toolkit: floating-point PTQ with timestep-aware LoRA fine-tuning"};
    app.require_subcommand(1);
    Options o;

    auto common = [&](CLI::App* s) {
        s->add_option("--config", o.config_path, "JSON run config");
        s->add_option("--seed", o.seed, "run seed (required here or in the config)");
        s->add_option("--out", o.out, "output directory");
        s->add_option("--bits", o.bits, "weight/activation bits, e.g. 4/4");
        s->add_option("--hub-size", o.hub_size, "adapters per layer");
        s->add_option("--loss", o.loss, "plain | dfa");
        s->add_option("--strategy", o.strategy, "single | split_half | random | router");
        s->footer("Any config field can be set with --section.key=value, e.g. --finetune.epochs=50");
    };
    auto* train = app.add_subcommand("train-fp", "train the full-precision teacher");
    auto* calib = app.add_subcommand("calibrate", "search quantizer formats and ranges");
    auto* ft = app.add_subcommand("finetune", "train LoRA adapters and router on the quantized model");
    auto* smp = app.add_subcommand("sample", "run the reverse process from a checkpoint");
    auto* diag = app.add_subcommand("diagnose", "per-timestep loss and one-step gap");
    auto* abl = app.add_subcommand("ablate", "module ablation over msfp / talora / dfa");
    for (auto* s : {train, calib, ft, smp, diag, abl}) common(s);
    for (auto* s : {calib, ft, diag, abl}) s->add_option("--fp", o.fp, "teacher checkpoint (default OUT/fp.ckpt)");
    ft->add_option("--quant", o.quant, "calibrated checkpoint (default OUT/quant.ckpt)");
    smp->add_option("--ckpt", o.ckpt, "checkpoint to sample (default OUT/finetuned.ckpt)");
    diag->add_option("--ckpt", o.ckpt, "student checkpoint (default OUT/quant.ckpt)");
    smp->add_option("--x-T", o.x_T, "CSV of starting points, one row per sample");
    smp->add_option("--n", o.n, "number of samples (default eval.samples)");

    try {
        std::vector<std::string> args = split_overrides(argc, argv, o.overrides);
        app.parse(args);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        const RunConfig c = resolve_config(o);
        if (*train) cmd_train_fp(c);
        else if (*calib) cmd_calibrate(c, o);
        else if (*ft) cmd_finetune(c, o);
        else if (*smp) cmd_sample(c, o);
        else if (*diag) cmd_diagnose(c, o);
        else if (*abl) cmd_ablate(c, o);
        return 0;
    } catch (const NumericalError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return 1;
    } catch (const UsageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const nlohmann::json::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
