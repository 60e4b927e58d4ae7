#include "cyto/schedule.hpp"

#include <cmath>
#include <string>

namespace cyto {

NoiseSchedule NoiseSchedule::linear(int64_t steps, double beta_start, double beta_end) {
    if (steps < 1) throw InvalidInput("schedule needs at least one step");
    NoiseSchedule s;
    s.steps = steps;
    s.betas.resize(steps);
    s.alpha_bars.resize(steps + 1);
    s.alpha_bars[0] = 1.0;
    for (int64_t i = 0; i < steps; ++i) {
        double frac = steps == 1 ? 0.0 : double(i) / double(steps - 1);
        s.betas[i] = beta_start + (beta_end - beta_start) * frac;
        s.alpha_bars[i + 1] = s.alpha_bars[i] * (1.0 - s.betas[i]);
    }
    return s;
}

double NoiseSchedule::beta(int64_t t) const {
    if (t < 1 || t > steps) throw InvalidInput("beta: t out of [1,T]");
    return betas[t - 1];
}

double NoiseSchedule::alpha_bar(int64_t t) const {
    if (t < 0 || t > steps) throw InvalidInput("alpha_bar: t out of [0,T]");
    return alpha_bars[t];
}

double NoiseSchedule::sqrt_alpha_bar(int64_t t) const { return std::sqrt(alpha_bar(t)); }

double NoiseSchedule::sqrt_one_minus_alpha_bar(int64_t t) const {
    return std::sqrt(1.0 - alpha_bar(t));
}

std::vector<int64_t> NoiseSchedule::ddim_grid(int64_t num_steps) const {
    if (num_steps < 1 || num_steps > steps)
        throw InvalidInput("ddim_grid: num_steps must be in [1,T]");
    std::vector<int64_t> grid(num_steps + 1);
    for (int64_t k = 0; k <= num_steps; ++k)
        grid[k] = std::llround(double(steps) * double(num_steps - k) / double(num_steps));
    for (int64_t k = 1; k <= num_steps; ++k)
        if (grid[k] >= grid[k - 1]) grid[k] = grid[k - 1] - 1;
    if (grid[num_steps] != 0) throw InvalidInput("ddim_grid: grid failed to reach 0");
    return grid;
}

}  // namespace cyto
