#pragma once

// Randomized finite-difference validation of every differentiable tape op and
// of the composed attention-energy gradient, with per-case tolerances.

#include <cstdint>
#include <string>
#include <vector>

namespace eraser {

struct GradCheckCase {
    std::string name;
    double tol = 0.0;     // per-trial bound on the max relative error
    double worst = 0.0;   // largest relative error seen across trials
    int trials = 0;
    bool pass = false;
};

struct GradCheckReport {
    std::vector<GradCheckCase> cases;
    bool all_pass = false;
    double seconds = 0.0;

    // Worst relative error over the named tolerance tier.
    double worst_at_tol(double tol) const;
};

// Runs `trials` random trials of every case; deterministic in `seed`.
GradCheckReport run_gradcheck(int trials, uint64_t seed);

} // namespace eraser
