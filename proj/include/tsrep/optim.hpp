#pragma once

#include <memory>
#include <string>
#include <vector>

#include "tsrep/tensor.hpp"

namespace tsrep {

enum class OptimizerKind { adamw, sgd };

struct OptimConfig {
    OptimizerKind kind = OptimizerKind::adamw;
    float lr = 3e-4f;  // peak of the one-cycle schedule
    float weight_decay = 0.01f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float momentum = 0.9f;  // sgd
    float warmup_fraction = 0.05f;
    float final_lr_fraction = 0.0f;
    float clip_norm = 1.0f;  // global gradient norm; 0 disables
    void validate() const;
};

// Linear warmup over the first warmup_fraction of steps, then cosine decay
// to final_lr_fraction * peak.
double one_cycle_lr(const OptimConfig& cfg, std::size_t step, std::size_t total_steps);

class Optimizer {
public:
    explicit Optimizer(std::vector<Tensor> params, OptimConfig cfg);
    // Applies one update at learning rate `lr` and clears gradients.
    // Returns the pre-clip global gradient norm.
    double step(double lr);
    void zero_grad();
    const OptimConfig& config() const { return cfg_; }
    std::size_t steps_taken() const { return t_; }

private:
    std::vector<Tensor> params_;
    OptimConfig cfg_;
    std::vector<std::vector<float>> m_, v_;
    std::size_t t_ = 0;
};

}  // namespace tsrep
