#ifndef XCODER_ADAM_HPP
#define XCODER_ADAM_HPP

#include <cmath>
#include <cstdint>

#include "matrix.hpp"

namespace xcoder {

inline constexpr double default_learning_rate = 1e-4;

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

template <typename T>
struct AdamState {
    Matrix<T> first_moment;
    Matrix<T> second_moment;
    std::uint64_t step_count = 0;
    AdamHyper hyper;

    AdamState() = default;
    AdamState(std::size_t rows, std::size_t cols, AdamHyper h = {})
        : first_moment(rows, cols), second_moment(rows, cols), hyper(h)
    {
    }
    static AdamState like(const Matrix<T> &param, AdamHyper h = {})
    {
        return AdamState(param.rows(), param.cols(), h);
    }
};

// Bias-corrected Adam update in place. The gradient is validated before any
// state is touched, so a rejected step leaves param and state unchanged.
template <typename T>
void adam_step(Matrix<T> &param, const Matrix<T> &grad, AdamState<T> &state, double lr)
{
    if (!param.same_shape(grad) || !param.same_shape(state.first_moment)
        || !param.same_shape(state.second_moment)) {
        throw InvalidShape("adam_step: parameter " + shape_str(param.rows(), param.cols())
                           + " vs gradient " + shape_str(grad.rows(), grad.cols()));
    }
    if (!all_finite(grad)) {
        throw NonFiniteGradient("adam_step received a non-finite gradient entry");
    }
    const auto &h = state.hyper;
    state.step_count += 1;
    const double t = static_cast<double>(state.step_count);
    const double c1 = 1.0 - std::pow(h.beta1, t);
    const double c2 = 1.0 - std::pow(h.beta2, t);
    auto p = param.flat();
    auto g = grad.flat();
    auto m = state.first_moment.flat();
    auto v = state.second_moment.flat();
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i];
        const double mi = h.beta1 * m[i] + (1.0 - h.beta1) * gi;
        const double vi = h.beta2 * v[i] + (1.0 - h.beta2) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double mhat = mi / c1;
        const double vhat = vi / c2;
        p[i] = static_cast<T>(p[i] - lr * mhat / (std::sqrt(vhat) + h.epsilon));
    }
}

} // namespace xcoder

#endif
