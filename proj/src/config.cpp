#include "qdiff/config.hpp"

#include "qdiff/diffusion.hpp"

#include <stdexcept>

namespace qdiff {

using nlohmann::json;

void RunConfig::validate() const {
    dataset.validate();
    if (model.hidden_layers < 2 || model.hidden_layers > 4)
        throw std::invalid_argument("model.hidden_layers must be in [2, 4]");
    if (model.width == 0 || model.time_embed_dim == 0 || model.time_embed_dim % 2)
        throw std::invalid_argument("model.width must be positive and model.time_embed_dim even");
    auto check_bits = [](int b, const char* name) {
        if (b != 4 && b != 6 && b != 8 && b != 32)
            throw std::invalid_argument(std::string(name) + " must be one of 4, 6, 8, 32");
    };
    check_bits(quant.weight_bits, "quant.weight_bits");
    check_bits(quant.act_bits, "quant.act_bits");
    check_bits(quant.io_bits, "quant.io_bits");
    if (quant.calib_samples < quant.calib_strata) throw std::invalid_argument("quant.calib_samples < quant.calib_strata");
    if (static_cast<int>(quant.calib_strata) > schedule.T) throw std::invalid_argument("quant.calib_strata > schedule.T");
    finetune.validate();
    if (train_fp.batch_size == 0) throw std::invalid_argument("train_fp.batch_size must be positive");
    if (eval.samples == 0) throw std::invalid_argument("eval.samples must be positive");
}

NoiseSchedule RunConfig::make_schedule() const {
    return qdiff::make_schedule(schedule.T, schedule.beta_start, schedule.beta_end, schedule.eta);
}

json to_json(const RunConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["out"] = c.out;
    j["dataset"] = {{"kind", c.dataset.kind},
                    {"modes", c.dataset.modes},
                    {"stddev", c.dataset.stddev},
                    {"image_size", c.dataset.image_size}};
    j["model"] = {{"width", c.model.width},
                  {"hidden_layers", c.model.hidden_layers},
                  {"time_embed_dim", c.model.time_embed_dim}};
    j["schedule"] = {{"T", c.schedule.T},
                     {"beta_start", c.schedule.beta_start},
                     {"beta_end", c.schedule.beta_end},
                     {"eta", c.schedule.eta}};
    j["train_fp"] = {{"steps", c.train_fp.steps}, {"batch_size", c.train_fp.batch_size}, {"lr", c.train_fp.lr}};
    j["quant"] = {{"weight_bits", c.quant.weight_bits},
                  {"act_bits", c.quant.act_bits},
                  {"io_bits", c.quant.io_bits},
                  {"msfp", c.quant.mixup},
                  {"probe_trajectories", c.quant.probe_trajectories},
                  {"calib_samples", c.quant.calib_samples},
                  {"calib_strata", c.quant.calib_strata},
                  {"max_site_samples", c.quant.max_site_samples}};
    const auto& f = c.finetune;
    j["finetune"] = {{"epochs", f.epochs},
                     {"steps_per_epoch", f.steps_per_epoch},
                     {"batch_size", f.batch_size},
                     {"lr_lora", f.lr_lora},
                     {"lr_router", f.lr_router},
                     {"loss", to_string(f.loss)},
                     {"strategy", to_string(f.strategy)},
                     {"hub_size", f.hub_size},
                     {"rank", f.rank},
                     {"lora_alpha", f.lora_alpha},
                     {"router_embed_dim", f.router_embed_dim},
                     {"router_init_std", f.router_init_std},
                     {"traj_pool", f.traj_pool}};
    j["eval"] = {{"samples", c.eval.samples}, {"diag_trajectories", c.eval.diag_trajectories}};
    return j;
}

namespace {
void reject_unknown(const json& given, const json& known, const std::string& prefix) {
    if (!given.is_object()) throw std::invalid_argument("config section '" + prefix + "' must be an object");
    for (const auto& [key, value] : given.items()) {
        const std::string path = prefix.empty() ? key : prefix + "." + key;
        if (!known.contains(key)) throw std::invalid_argument("unknown config key '" + path + "'");
        if (known.at(key).is_object()) reject_unknown(value, known.at(key), path);
    }
}

template <class T>
void read(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}
}  // namespace

RunConfig config_from_json(const json& j) {
    RunConfig c;
    reject_unknown(j, to_json(c), "");
    if (!j.contains("seed")) throw std::invalid_argument("config must set 'seed'");
    read(j, "seed", c.seed);
    read(j, "out", c.out);
    if (j.contains("dataset")) {
        const auto& d = j["dataset"];
        read(d, "kind", c.dataset.kind);
        read(d, "modes", c.dataset.modes);
        read(d, "stddev", c.dataset.stddev);
        read(d, "image_size", c.dataset.image_size);
    }
    if (j.contains("model")) {
        const auto& m = j["model"];
        read(m, "width", c.model.width);
        read(m, "hidden_layers", c.model.hidden_layers);
        read(m, "time_embed_dim", c.model.time_embed_dim);
    }
    c.model.input_dim = c.dataset.dim();
    if (j.contains("schedule")) {
        const auto& s = j["schedule"];
        read(s, "T", c.schedule.T);
        read(s, "beta_start", c.schedule.beta_start);
        read(s, "beta_end", c.schedule.beta_end);
        read(s, "eta", c.schedule.eta);
    }
    if (j.contains("train_fp")) {
        const auto& s = j["train_fp"];
        read(s, "steps", c.train_fp.steps);
        read(s, "batch_size", c.train_fp.batch_size);
        read(s, "lr", c.train_fp.lr);
    }
    if (j.contains("quant")) {
        const auto& q = j["quant"];
        read(q, "weight_bits", c.quant.weight_bits);
        read(q, "act_bits", c.quant.act_bits);
        read(q, "io_bits", c.quant.io_bits);
        read(q, "msfp", c.quant.mixup);
        read(q, "probe_trajectories", c.quant.probe_trajectories);
        read(q, "calib_samples", c.quant.calib_samples);
        read(q, "calib_strata", c.quant.calib_strata);
        read(q, "max_site_samples", c.quant.max_site_samples);
    }
    if (j.contains("finetune")) {
        const auto& f = j["finetune"];
        auto& o = c.finetune;
        read(f, "epochs", o.epochs);
        read(f, "steps_per_epoch", o.steps_per_epoch);
        read(f, "batch_size", o.batch_size);
        read(f, "lr_lora", o.lr_lora);
        read(f, "lr_router", o.lr_router);
        if (f.contains("loss")) o.loss = parse_loss_mode(f["loss"].get<std::string>());
        if (f.contains("strategy")) o.strategy = parse_strategy(f["strategy"].get<std::string>());
        read(f, "hub_size", o.hub_size);
        read(f, "rank", o.rank);
        read(f, "lora_alpha", o.lora_alpha);
        read(f, "router_embed_dim", o.router_embed_dim);
        read(f, "router_init_std", o.router_init_std);
        read(f, "traj_pool", o.traj_pool);
    }
    if (j.contains("eval")) {
        read(j["eval"], "samples", c.eval.samples);
        read(j["eval"], "diag_trajectories", c.eval.diag_trajectories);
    }
    c.validate();
    return c;
}

void apply_override(json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw std::invalid_argument("override '" + assignment + "' is not key=value");
    const std::string path = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;

    const json known = to_json(RunConfig{});
    const json* k = &known;
    json* node = &doc;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (!k->is_object() || !k->contains(key)) throw std::invalid_argument("unknown config key '" + path + "'");
        k = &k->at(key);
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

}  // namespace qdiff
