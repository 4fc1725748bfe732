#ifndef XCODER_GRADCHECK_HPP
#define XCODER_GRADCHECK_HPP

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "error.hpp"
#include "rng.hpp"

namespace xcoder {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t probes = 0;
};

// Relative error between two gradient estimates; both below abs_floor counts
// as agreement (central differences of a flat loss are exactly 0).
inline double gradient_rel_error(double analytic, double numeric, double abs_floor = 1e-10)
{
    const double scale = std::max(std::abs(analytic), std::abs(numeric));
    if (scale < abs_floor) {
        return 0.0;
    }
    return std::abs(analytic - numeric) / scale;
}

// Compares `analytic` against central differences (L(θ+h) − L(θ−h)) / 2h on
// probe_count coordinates drawn without replacement (all of them when
// probe_count >= |θ|). `theta` is perturbed in place and restored.
template <typename LossFn>
GradCheckResult finite_diff_check(LossFn &&loss_fn, std::span<double> theta,
                                  std::span<const double> analytic, std::size_t probe_count,
                                  double h, Rng &rng)
{
    if (theta.size() != analytic.size()) {
        throw InvalidShape("finite_diff_check: parameter and gradient lengths differ");
    }
    if (!(h > 0.0)) {
        throw ConfigError("finite_diff_check: step h must be positive");
    }
    std::vector<std::size_t> idx(theta.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (probe_count < idx.size()) {
        rng.shuffle(idx);
        idx.resize(probe_count);
    }
    GradCheckResult res;
    res.probes = idx.size();
    for (std::size_t i : idx) {
        const double saved = theta[i];
        theta[i] = saved + h;
        const double up = loss_fn(std::span<const double>(theta));
        theta[i] = saved - h;
        const double down = loss_fn(std::span<const double>(theta));
        theta[i] = saved;
        const double numeric = (up - down) / (2.0 * h);
        const double err = gradient_rel_error(analytic[i], numeric);
        if (err > res.max_rel_error) {
            res.max_rel_error = err;
            res.worst_index = i;
            res.worst_analytic = analytic[i];
            res.worst_numeric = numeric;
        }
    }
    return res;
}

} // namespace xcoder

#endif
