#pragma once

#include <string>
#include <vector>

namespace cifre {

struct GradCheckResult {
    std::string name;
    double max_rel = 0;
    bool pass = false;
};

// 64-bit central-difference checks over every differentiable op and the composed
// blocks; `seeds` independent runs per check. A check passes when the worst
// relative error over all inputs and parameters stays below `tol`.
std::vector<GradCheckResult> run_gradcheck_suite(int seeds = 10, double tol = 1e-4);

}  // namespace cifre
