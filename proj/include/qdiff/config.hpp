#pragma once

#include "qdiff/calib.hpp"
#include "qdiff/data.hpp"
#include "qdiff/finetune.hpp"
#include "qdiff/nn.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace qdiff {

struct ScheduleConfig {
    int T = 100;
    double beta_start = 1e-3;
    double beta_end = 0.2;
    double eta = 1.0;
};

struct TrainFpConfig {
    std::size_t steps = 3000;
    std::size_t batch_size = 256;
    double lr = 2e-3;
};

struct EvalConfig {
    std::size_t samples = 10000;    // sample / gap evaluation size; the gap is heavy-tailed
    std::size_t diag_trajectories = 64;
};

/// Everything a pipeline stage needs. Loaded from one JSON document; every
/// field can be overridden with --section.key=value.
struct RunConfig {
    std::uint64_t seed = 0;
    std::string out = "runs/default";
    DatasetSpec dataset;
    ModelArch model;
    ScheduleConfig schedule;
    TrainFpConfig train_fp;
    QuantSettings quant;
    FinetuneConfig finetune;
    EvalConfig eval;

    void validate() const;
    NoiseSchedule make_schedule() const;
};

nlohmann::json to_json(const RunConfig& c);
/// Rejects unknown keys. Missing keys keep their defaults, except `seed`.
RunConfig config_from_json(const nlohmann::json& j);

/// Applies "section.key=value" (or "key=value") to a config document; the
/// value is parsed as JSON when possible, else taken as a string. Throws
/// std::invalid_argument for unknown keys.
void apply_override(nlohmann::json& doc, const std::string& assignment);

}  // namespace qdiff
