#pragma once

#include "qdiff/checkpoint.hpp"
#include "qdiff/config.hpp"
#include "qdiff/finetune.hpp"

#include <array>
#include <filesystem>
#include <string>
#include <vector>

namespace qdiff {

struct TrainFpResult {
    DenoiserModel model;
    std::vector<double> curve;  // loss per optimiser step
};

/// Trains the teacher on the eps-prediction objective. Throws NumericalError
/// naming the epoch on divergence. Zero steps returns the initialisation.
TrainFpResult train_fp(const RunConfig& config);

/// Calibrated quantizers for every site of `fp` under config.quant.
std::vector<SiteCalibration> calibrate(const RunConfig& config, const DenoiserModel& fp);

/// Noise predictor of a checkpoint: plain, quantized, or quantized with
/// adapters. `T` drives split_half; `rng` feeds random allocation.
NoisePredictor make_predictor(const Checkpoint& ckpt, int T, Rng* rng);

struct AblationFlags {
    bool msfp = false;
    bool talora = false;
    bool dfa = false;
};

struct AblationRow {
    AblationFlags flags;
    double gap_ptq = 0.0;  // after calibration, before fine-tuning
    double gap = 0.0;      // after fine-tuning
};

/// Flag rows in table order: baseline, +msfp, +talora, msfp+dfa, msfp+talora, all.
std::array<AblationFlags, 6> ablation_flags();

/// One row: msfp toggles mixup calibration, talora the router hub (else a
/// single adapter), dfa the aligned loss. All rows share the teacher and seed.
AblationRow ablation_row(const RunConfig& config, const DenoiserModel& fp, const AblationFlags& flags);
std::vector<AblationRow> ablation_run(const RunConfig& config, const DenoiserModel& fp);

/// Git-style blob hash: sha1("blob <len>\0" + bytes), hex.
std::string content_hash(const std::vector<std::uint8_t>& bytes);

/// Shortest text that parses back to the same double.
std::string format_double(double v);

std::string loss_curve_csv(const std::vector<double>& curve);
std::string calib_csv(const std::vector<SiteCalibration>& sites);
std::string finetune_curve_csv(const std::vector<EpochStats>& curve);
std::string diagnose_csv(const std::vector<StepDiagnostic>& rows);
std::string allocation_csv(const std::vector<std::vector<std::size_t>>& table, const std::vector<std::size_t>& layers);
std::string ablation_csv(const std::vector<AblationRow>& rows);
std::string matrix_csv(const Tensor& x);

/// Parses a headerless (or x0,x1,... headed) numeric CSV into [rows, cols].
Tensor read_matrix_csv(const std::filesystem::path& path);

}  // namespace qdiff
