#include "qdiff/pipeline.hpp"

#include "qdiff/data.hpp"

#include <openssl/evp.h>

#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>

namespace qdiff {

TrainFpResult train_fp(const RunConfig& config) {
    config.validate();
    const NoiseSchedule sched = config.make_schedule();
    Rng init_rng = stream(config.seed, "train_fp/init");
    Rng data_rng = stream(config.seed, "train_fp/data");
    Rng t_rng = stream(config.seed, "train_fp/t");
    Rng noise_rng = stream(config.seed, "train_fp/noise");

    TrainFpResult res{DenoiserModel::init(config.model, init_rng), {}};
    Adam opt(config.train_fp.lr);
    std::uniform_int_distribution<int> pick_t(0, sched.T - 1);
    const std::size_t B = config.train_fp.batch_size;
    const std::size_t dim = config.model.input_dim;

    for (std::size_t step = 0; step < config.train_fp.steps; ++step) {
        const Tensor x0 = draw_data(config.dataset, B, data_rng);
        std::vector<int> ts(B);
        for (auto& t : ts) t = pick_t(t_rng);
        const Tensor eps = randn(noise_rng, {B, dim});
        Tensor x_t({B, dim});
        for (std::size_t b = 0; b < B; ++b) {
            const double ab = sched.alpha_bar[static_cast<std::size_t>(ts[b])];
            const double c0 = std::sqrt(ab), c1 = std::sqrt(1.0 - ab);
            for (std::size_t j = 0; j < dim; ++j) x_t.at(b, j) = c0 * x0.at(b, j) + c1 * eps.at(b, j);
        }

        Tape tape;
        const Var pred = forward(res.model, tape, tape.constant(std::move(x_t)), ts, true);
        const Var loss = ad::mse(pred, tape.constant(eps));
        const double l = loss.value()[0];
        if (!std::isfinite(l)) throw NumericalError("full-precision training diverged at epoch " + std::to_string(step));
        const auto grads = tape.backward(loss);
        res.model.for_each_param([&](const std::string& name, Tensor& p) { opt.step(name, p, grads.at(name)); });
        res.curve.push_back(l);
    }
    return res;
}

std::vector<SiteCalibration> calibrate(const RunConfig& config, const DenoiserModel& fp) {
    return calibrate_model(fp, config.make_schedule(), config.quant, config.seed);
}

NoisePredictor make_predictor(const Checkpoint& ckpt, int T, Rng* rng) {
    if (!ckpt.quantizers) {
        auto model = std::make_shared<const DenoiserModel>(ckpt.model);
        return [model](const Tensor& x, int t) { return forward(*model, x, t); };
    }
    struct State {
        QuantizedModel q;
        std::optional<LoraHub> hub;
        std::optional<Router> router;
        Allocation alloc;
    };
    auto s = std::make_shared<State>();
    s->q = QuantizedModel(ckpt.model, *ckpt.quantizers);
    s->hub = ckpt.hub;
    s->router = ckpt.router;
    if (s->hub) s->hub->validate(s->q);
    s->alloc.strategy = ckpt.strategy.value_or(Strategy::single);
    s->alloc.router = s->router ? &*s->router : nullptr;
    s->alloc.rng = rng;
    s->alloc.T = T;
    if (s->alloc.strategy == Strategy::router && !s->router)
        throw std::invalid_argument("checkpoint uses router allocation but stores no router");
    return [s](const Tensor& x, int t) {
        return quantized_predict(s->q, s->hub ? &*s->hub : nullptr, s->alloc, x, t);
    };
}

std::array<AblationFlags, 6> ablation_flags() {
    return {{{false, false, false},
             {true, false, false},
             {false, true, false},
             {true, false, true},
             {true, true, false},
             {true, true, true}}};
}

namespace {
RunConfig ablation_config(const RunConfig& config, const AblationFlags& flags) {
    RunConfig c = config;
    c.quant.mixup = flags.msfp;
    c.finetune.strategy = flags.talora ? Strategy::router : Strategy::single;
    if (!flags.talora) c.finetune.hub_size = 1;
    c.finetune.loss = flags.dfa ? LossMode::dfa : LossMode::plain;
    return c;
}

struct Calibrated {
    QuantizedModel q;
    double gap_ptq = 0.0;
};

Calibrated calibrate_for_ablation(const RunConfig& c, const DenoiserModel& fp) {
    const NoiseSchedule sched = c.make_schedule();
    Calibrated out{QuantizedModel(fp, calibrate(c, fp)), 0.0};
    out.gap_ptq = trajectory_gap(out.q, nullptr, Strategy::single, nullptr, fp, sched, c.eval.samples,
                                 derive_seed(c.seed, "eval/gap"));
    return out;
}

AblationRow finish_row(const RunConfig& c, const DenoiserModel& fp, const AblationFlags& flags, const Calibrated& cal) {
    const NoiseSchedule sched = c.make_schedule();
    const FinetuneResult ft = finetune(cal.q, fp, sched, c.finetune, c.seed);
    AblationRow row;
    row.flags = flags;
    row.gap_ptq = cal.gap_ptq;
    row.gap = trajectory_gap(cal.q, &ft.hub, c.finetune.strategy, &ft.router, fp, sched, c.eval.samples,
                             derive_seed(c.seed, "eval/gap"));
    return row;
}
}  // namespace

AblationRow ablation_row(const RunConfig& config, const DenoiserModel& fp, const AblationFlags& flags) {
    const RunConfig c = ablation_config(config, flags);
    return finish_row(c, fp, flags, calibrate_for_ablation(c, fp));
}

std::vector<AblationRow> ablation_run(const RunConfig& config, const DenoiserModel& fp) {
    // Calibration depends on the msfp flag only, so it runs twice, not six times.
    std::map<bool, Calibrated> cal;
    std::vector<AblationRow> rows;
    for (const auto& f : ablation_flags()) {
        const RunConfig c = ablation_config(config, f);
        auto it = cal.find(f.msfp);
        if (it == cal.end()) it = cal.emplace(f.msfp, calibrate_for_ablation(c, fp)).first;
        rows.push_back(finish_row(c, fp, f, it->second));
    }
    return rows;
}

std::string content_hash(const std::vector<std::uint8_t>& bytes) {
    const std::string header = "blob " + std::to_string(bytes.size()) + '\0';
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha1(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx.get(), header.data(), header.size()) != 1 ||
        EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
        EVP_DigestFinal_ex(ctx.get(), md, &len) != 1)
        throw std::runtime_error("sha1 digest failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 15];
    }
    return out;
}

std::string format_double(double v) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

std::string loss_curve_csv(const std::vector<double>& curve) {
    std::string s = "epoch,loss\n";
    for (std::size_t i = 0; i < curve.size(); ++i) s += std::to_string(i) + "," + format_double(curve[i]) + "\n";
    return s;
}

std::string calib_csv(const std::vector<SiteCalibration>& sites) {
    std::string s = "site_id,kind,mode,e,m,maxval,zero_point,mse\n";
    for (const auto& c : sites) {
        const bool pass = c.mode == QuantMode::passthrough;
        s += c.site + "," + to_string(c.kind) + "," + to_string(c.mode) + ",";
        s += pass ? ",,,," : std::to_string(c.params.format.exponent_bits) + "," +
                                 std::to_string(c.params.format.mantissa_bits) + "," + format_double(c.params.maxval) +
                                 "," + format_double(c.params.zero_point) + ",";
        s += format_double(c.mse) + "\n";
    }
    return s;
}

std::string finetune_curve_csv(const std::vector<EpochStats>& curve) {
    std::string s = "epoch,loss,loss_plain\n";
    for (const auto& e : curve)
        s += std::to_string(e.epoch) + "," + format_double(e.loss) + "," + format_double(e.loss_plain) + "\n";
    return s;
}

std::string diagnose_csv(const std::vector<StepDiagnostic>& rows) {
    std::string s = "t,loss_plain,loss_dfa,gap\n";
    for (const auto& r : rows)
        s += std::to_string(r.t) + "," + format_double(r.loss_plain) + "," + format_double(r.loss_dfa) + "," +
             format_double(r.gap) + "\n";
    return s;
}

std::string allocation_csv(const std::vector<std::vector<std::size_t>>& table, const std::vector<std::size_t>& layers) {
    std::string s = "t,layer,chosen_k\n";
    for (std::size_t t = 0; t < table.size(); ++t)
        for (std::size_t g = 0; g < table[t].size(); ++g)
            s += std::to_string(t) + "," + std::to_string(layers.at(g)) + "," + std::to_string(table[t][g]) + "\n";
    return s;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::string s = "msfp,talora,dfa,gap_ptq,gap\n";
    for (const auto& r : rows)
        s += std::to_string(int(r.flags.msfp)) + "," + std::to_string(int(r.flags.talora)) + "," +
             std::to_string(int(r.flags.dfa)) + "," + format_double(r.gap_ptq) + "," + format_double(r.gap) + "\n";
    return s;
}

std::string matrix_csv(const Tensor& x) {
    std::string s;
    for (std::size_t j = 0; j < x.cols(); ++j) s += (j ? ",x" : "x") + std::to_string(j);
    s += "\n";
    for (std::size_t i = 0; i < x.rows(); ++i) {
        for (std::size_t j = 0; j < x.cols(); ++j) s += (j ? "," : "") + format_double(x.at(i, j));
        s += "\n";
    }
    return s;
}

Tensor read_matrix_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::vector<double> data;
    std::size_t cols = 0, rows = 0;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == 'x') continue;
        std::stringstream ss(line);
        std::string cell;
        std::size_t n = 0;
        while (std::getline(ss, cell, ',')) {
            double v = 0.0;
            const auto r = std::from_chars(cell.data(), cell.data() + cell.size(), v);
            if (r.ec != std::errc()) throw std::runtime_error("bad number '" + cell + "' in " + path.string());
            data.push_back(v);
            ++n;
        }
        if (rows == 0) cols = n;
        else if (n != cols) throw std::runtime_error("ragged rows in " + path.string());
        ++rows;
    }
    if (rows == 0 || cols == 0) throw std::runtime_error("empty matrix in " + path.string());
    return Tensor({rows, cols}, std::move(data));
}

}  // namespace qdiff
