#pragma once
// Small trained teacher shared by the tests that need realistic activations.

#include "qdiff/config.hpp"
#include "qdiff/pipeline.hpp"

namespace toy {

inline qdiff::RunConfig config(std::uint64_t seed = 0) {
    qdiff::RunConfig c;
    c.seed = seed;
    c.train_fp.steps = 600;
    c.train_fp.batch_size = 128;
    c.model.width = 32;
    c.model.time_embed_dim = 16;
    c.quant.probe_trajectories = 16;
    c.quant.calib_samples = 128;
    c.eval.samples = 256;
    c.eval.diag_trajectories = 32;
    return c;
}

inline const qdiff::DenoiserModel& teacher() {
    static const qdiff::DenoiserModel m = qdiff::train_fp(config()).model;
    return m;
}

}  // namespace toy
