#pragma once

#include <cstdint>
#include <vector>

#include "ord2seq/tensor.hpp"

namespace ord2seq {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// Adam with bias correction, bound to a fixed parameter list.
class Adam {
public:
    Adam(std::vector<Tensor> params, AdamConfig config = {});

    // One update from the gradients currently on the parameters.
    // Throws if any bound parameter has no gradient buffer.
    void step();

    void zero_grad();

    std::int64_t step_count() const { return step_; }
    const AdamConfig& config() const { return config_; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    AdamConfig config_;
    std::int64_t step_ = 0;
};

}  // namespace ord2seq
