#pragma once
// Helpers for driving the qdiff executable from tests.

#include "qdiff/checkpoint.hpp"

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>

namespace cli {

namespace fs = std::filesystem;

inline fs::path scratch(const std::string& tag) {
    std::random_device rd;
    const fs::path p = fs::temp_directory_path() / ("qdiff-" + tag + "-" + std::to_string(rd()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

/// Exit status of `qdiff <args>`, output discarded.
inline int run(const std::string& args, bool quiet = true) {
    const std::string cmd = std::string("\"") + QDIFF_CLI + "\" " + args + (quiet ? " > /dev/null 2>&1" : "");
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

/// Small but complete run: every stage in a few seconds.
inline nlohmann::json tiny_config(std::uint64_t seed) {
    return {{"seed", seed},
            {"model", {{"width", 16}, {"time_embed_dim", 8}}},
            {"schedule", {{"T", 20}}},
            {"train_fp", {{"steps", 60}, {"batch_size", 64}}},
            {"quant", {{"probe_trajectories", 4}, {"calib_samples", 32}, {"calib_strata", 4}}},
            {"finetune",
             {{"epochs", 2}, {"steps_per_epoch", 2}, {"batch_size", 16}, {"traj_pool", 16}, {"router_embed_dim", 8}}},
            {"eval", {{"samples", 32}, {"diag_trajectories", 4}}}};
}

inline fs::path write_config(const fs::path& dir, const nlohmann::json& j) {
    const fs::path p = dir / "run.json";
    qdiff::write_text(p, j.dump(2));
    return p;
}

inline std::string slurp(const fs::path& p) {
    const auto b = qdiff::read_file(p);
    return {b.begin(), b.end()};
}

}  // namespace cli
