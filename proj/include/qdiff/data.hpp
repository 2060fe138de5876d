#pragma once

#include "qdiff/rng.hpp"
#include "qdiff/tensor.hpp"

#include <string>
#include <vector>

namespace qdiff {

/// Synthetic training distributions generated in-process.
struct DatasetSpec {
    std::string kind = "mixture";  // "mixture" | "blobs"
    std::vector<std::vector<double>> modes{{1.0, 1.0}, {-1.0, -1.0}};
    double stddev = 0.15;
    std::size_t image_size = 8;  // blobs: image side length

    std::size_t dim() const;
    void validate() const;
};

/// Draws n rows of shape [n, dim()].
Tensor draw_data(const DatasetSpec& spec, std::size_t n, Rng& rng);

/// Mean of the samples nearest to each mode (row per mode); modes with no
/// assigned samples get NaN rows.
std::vector<std::vector<double>> cluster_means(const Tensor& samples, const std::vector<std::vector<double>>& modes);

}  // namespace qdiff
