#include "qdiff/data.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace qdiff {

std::size_t DatasetSpec::dim() const {
    if (kind == "blobs") return image_size * image_size;
    return modes.empty() ? 0 : modes.front().size();
}

void DatasetSpec::validate() const {
    if (kind == "mixture") {
        if (modes.empty()) throw std::invalid_argument("mixture dataset needs at least one mode");
        for (const auto& m : modes)
            if (m.size() != modes.front().size() || m.empty())
                throw std::invalid_argument("mixture modes must share a positive dimension");
    } else if (kind == "blobs") {
        if (image_size < 2) throw std::invalid_argument("blob images need side >= 2");
    } else {
        throw std::invalid_argument("unknown dataset kind '" + kind + "'");
    }
    if (!(stddev > 0.0)) throw std::invalid_argument("dataset stddev must be positive");
}

Tensor draw_data(const DatasetSpec& spec, std::size_t n, Rng& rng) {
    spec.validate();
    const std::size_t d = spec.dim();
    Tensor out({n, d});
    std::normal_distribution<double> noise(0.0, spec.stddev);
    if (spec.kind == "mixture") {
        std::uniform_int_distribution<std::size_t> pick(0, spec.modes.size() - 1);
        for (std::size_t r = 0; r < n; ++r) {
            const auto& mode = spec.modes[pick(rng)];
            for (std::size_t c = 0; c < d; ++c) out.at(r, c) = mode[c] + noise(rng);
        }
        return out;
    }
    // blobs: one gaussian bump at a random centre, pixel values in roughly [-1, 1]
    const double side = static_cast<double>(spec.image_size);
    std::uniform_real_distribution<double> centre(1.5, side - 2.5);
    std::uniform_real_distribution<double> radius(1.0, 2.0);
    for (std::size_t r = 0; r < n; ++r) {
        const double cx = centre(rng), cy = centre(rng), rad = radius(rng);
        for (std::size_t y = 0; y < spec.image_size; ++y)
            for (std::size_t x = 0; x < spec.image_size; ++x) {
                const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
                const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * rad * rad));
                out.at(r, y * spec.image_size + x) = 2.0 * v - 1.0 + 0.1 * noise(rng);
            }
    }
    return out;
}

std::vector<std::vector<double>> cluster_means(const Tensor& samples, const std::vector<std::vector<double>>& modes) {
    const std::size_t d = samples.cols();
    std::vector<std::vector<double>> sums(modes.size(), std::vector<double>(d, 0.0));
    std::vector<std::size_t> counts(modes.size(), 0);
    for (std::size_t r = 0; r < samples.rows(); ++r) {
        std::size_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < modes.size(); ++k) {
            double dist = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                const double diff = samples.at(r, c) - modes[k][c];
                dist += diff * diff;
            }
            if (dist < best_d) {
                best_d = dist;
                best = k;
            }
        }
        ++counts[best];
        for (std::size_t c = 0; c < d; ++c) sums[best][c] += samples.at(r, c);
    }
    for (std::size_t k = 0; k < modes.size(); ++k)
        for (auto& v : sums[k])
            v = counts[k] ? v / static_cast<double>(counts[k]) : std::numeric_limits<double>::quiet_NaN();
    return sums;
}

}  // namespace qdiff
