#pragma once

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "ord2seq/tensor.hpp"

namespace testutil {

// Central finite differences of a scalar-valued forward pass with respect to
// one parameter tensor. The forward callback must rebuild the graph from the
// parameter's current values.
inline std::vector<double> numeric_grad(ord2seq::Tensor& param,
                                        const std::function<double()>& forward,
                                        double step = 1e-5) {
    std::vector<double> grads(param.numel());
    auto values = param.values_mut();
    for (std::size_t i = 0; i < grads.size(); ++i) {
        const double original = values[i];
        values[i] = original + step;
        const double up = forward();
        values[i] = original - step;
        const double down = forward();
        values[i] = original;
        grads[i] = (up - down) / (2.0 * step);
    }
    return grads;
}

// Relative error with a small-magnitude floor so near-zero gradients are
// compared absolutely.
inline double grad_error(double analytic, double numeric) {
    const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-4});
    return std::fabs(analytic - numeric) / denom;
}

inline double max_grad_error(std::span<const double> analytic, const std::vector<double>& numeric) {
    double worst = 0.0;
    for (std::size_t i = 0; i < numeric.size(); ++i)
        worst = std::max(worst, grad_error(analytic[i], numeric[i]));
    return worst;
}

// Fresh scratch directory under the system temp root.
inline std::filesystem::path scratch_dir(const std::string& tag) {
    auto dir = std::filesystem::temp_directory_path() /
               ("ord2seq_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace testutil
