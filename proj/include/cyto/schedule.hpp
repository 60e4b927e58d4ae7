#pragma once

#include <cstdint>
#include <vector>

#include "cyto/common.hpp"

namespace cyto {

// Discrete-time variance schedule. Timesteps run 1..T; index 0 of alpha_bars
// is the clean-data boundary (alpha_bar(0) == 1).
struct NoiseSchedule {
    int64_t steps = 0;
    std::vector<double> betas;       // betas[t-1] is the step-t variance
    std::vector<double> alpha_bars;  // size steps+1, cumulative product of (1-beta)

    static NoiseSchedule linear(int64_t steps = 1000, double beta_start = 1e-4,
                                double beta_end = 2e-2);

    double beta(int64_t t) const;
    double alpha_bar(int64_t t) const;
    double sqrt_alpha_bar(int64_t t) const;
    double sqrt_one_minus_alpha_bar(int64_t t) const;

    // Descending sampling grid with num_steps+1 entries: starts at T, ends at 0,
    // uniformly spaced up to rounding. num_steps=1 yields {T, 0}.
    std::vector<int64_t> ddim_grid(int64_t num_steps) const;
};

}  // namespace cyto
