#include "tsrep/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "tsrep/errors.hpp"

namespace tsrep {

void OptimConfig::validate() const {
    if (!(lr > 0.0f)) throw ContractError("optim: lr must be positive");
    if (!(weight_decay >= 0.0f)) throw ContractError("optim: weight_decay must be >= 0");
    if (!(beta1 >= 0.0f && beta1 < 1.0f && beta2 >= 0.0f && beta2 < 1.0f)) throw ContractError("optim: betas must be in [0, 1)");
    if (!(momentum >= 0.0f && momentum < 1.0f)) throw ContractError("optim: momentum must be in [0, 1)");
    if (!(warmup_fraction >= 0.0f && warmup_fraction < 1.0f)) throw ContractError("optim: warmup_fraction must be in [0, 1)");
    if (!(final_lr_fraction >= 0.0f && final_lr_fraction <= 1.0f)) throw ContractError("optim: final_lr_fraction must be in [0, 1]");
    if (!(clip_norm >= 0.0f)) throw ContractError("optim: clip_norm must be >= 0");
}

double one_cycle_lr(const OptimConfig& cfg, std::size_t step, std::size_t total_steps) {
    if (total_steps == 0) return cfg.lr;
    const auto warm = static_cast<std::size_t>(std::ceil(cfg.warmup_fraction * static_cast<double>(total_steps)));
    if (step < warm) return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(warm);
    const std::size_t span = total_steps > warm + 1 ? total_steps - warm - 1 : 1;
    const double progress = std::min(1.0, static_cast<double>(step - warm) / static_cast<double>(span));
    const double floor = cfg.final_lr_fraction * cfg.lr;
    return floor + 0.5 * (cfg.lr - floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

Optimizer::Optimizer(std::vector<Tensor> params, OptimConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    cfg_.validate();
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
        m_[i].assign(params_[i].numel(), 0.0f);
        if (cfg_.kind == OptimizerKind::adamw) v_[i].assign(params_[i].numel(), 0.0f);
    }
}

void Optimizer::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

double Optimizer::step(double lr) {
    double norm2 = 0.0;
    for (const auto& p : params_) {
        if (!p.has_grad()) continue;
        for (float g : p.node()->grad) norm2 += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(norm2);
    if (!std::isfinite(norm)) throw NumericError("optimizer: non-finite gradient norm");
    const double scale = (cfg_.clip_norm > 0.0f && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        if (!p.has_grad()) continue;
        auto w = p.mutable_data();
        const auto& grad = p.node()->grad;
        auto& m = m_[i];
        if (cfg_.kind == OptimizerKind::adamw) {
            auto& v = v_[i];
            for (std::size_t j = 0; j < w.size(); ++j) {
                const double g = grad[j] * scale;
                m[j] = static_cast<float>(cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g);
                v[j] = static_cast<float>(cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g);
                const double update = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
                w[j] = static_cast<float>(w[j] - lr * (update + cfg_.weight_decay * w[j]));
            }
        } else {
            for (std::size_t j = 0; j < w.size(); ++j) {
                const double g = grad[j] * scale + cfg_.weight_decay * w[j];
                m[j] = static_cast<float>(cfg_.momentum * m[j] + g);
                w[j] = static_cast<float>(w[j] - lr * m[j]);
            }
        }
        if (!all_finite(w)) throw NumericError("optimizer: non-finite parameter after update");
    }
    zero_grad();
    return norm;
}

}  // namespace tsrep
