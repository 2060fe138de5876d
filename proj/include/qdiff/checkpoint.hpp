#pragma once

#include "qdiff/calib.hpp"
#include "qdiff/lora.hpp"
#include "qdiff/nn.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace qdiff {

inline constexpr const char* kCheckpointVersion = "qdiff-ckpt/1";

/// On disk: 8-byte magic "QDIFFCK1", little-endian u64 manifest length, the
/// JSON manifest, then every tensor as little-endian f64 in manifest order.
struct Checkpoint {
    DenoiserModel model;
    std::optional<std::vector<SiteCalibration>> quantizers;
    std::optional<LoraHub> hub;
    std::optional<Router> router;
    std::optional<Strategy> strategy;
};

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt);
Checkpoint deserialize(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace qdiff
