#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "memmamba/tensor.hpp"

// Adam with decoupled weight decay and the warmup + linear-decay schedule.

namespace memmamba {

struct OptimConfig {
    double base_lr = 2e-5;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t epochs = 10;
    std::int64_t batch_size = 64;
    double warmup_fraction = 0.05;
    std::uint64_t seed = 1;

    void validate() const {
        if (!(base_lr > 0)) throw ConfigError("optim.base_lr must be > 0");
        if (!(warmup_fraction > 0 && warmup_fraction < 1)) {
            throw ConfigError("optim.warmup_fraction must be in (0, 1)");
        }
        if (weight_decay < 0) throw ConfigError("optim.weight_decay must be >= 0");
        if (epochs < 1 || batch_size < 1) {
            throw ConfigError("optim.epochs and optim.batch_size must be >= 1");
        }
        if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && eps > 0)) {
            throw ConfigError("optim Adam constants out of range");
        }
    }
};

// Piecewise-linear schedule: 0 -> base_lr over [0, warmup_steps], then
// base_lr -> 0 over [warmup_steps, total_steps]. warmup_steps rounds to at
// least 1 so lr_at(0) == 0 holds for every total.
inline double lr_at(std::int64_t step, std::int64_t total_steps, const OptimConfig& cfg) {
    if (total_steps < 1) throw ContractError("lr_at requires total_steps >= 1");
    if (step < 0 || step > total_steps) {
        throw ContractError("lr_at step " + std::to_string(step) + " outside [0, " +
                            std::to_string(total_steps) + "]");
    }
    const auto warmup =
        std::max<std::int64_t>(1, std::llround(cfg.warmup_fraction * static_cast<double>(total_steps)));
    if (step <= warmup) {
        return cfg.base_lr * static_cast<double>(step) / static_cast<double>(warmup);
    }
    return cfg.base_lr * static_cast<double>(total_steps - step) /
           static_cast<double>(total_steps - warmup);
}

// One Adam update on a single parameter buffer. Weight decay is decoupled and
// applied before the moment update. step is 1-based.
template <typename T>
void adam_step(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
               std::int64_t step, double lr, bool decay, const OptimConfig& cfg) {
    if (param.size() != grad.size() || param.size() != m.size() || param.size() != v.size()) {
        throw ContractError("adam_step buffer sizes disagree");
    }
    if (step < 1) throw ContractError("adam_step requires step >= 1");
    const double b1 = cfg.beta1;
    const double b2 = cfg.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step));
    const double wd = decay ? cfg.weight_decay : 0.0;
    for (std::size_t i = 0; i < param.size(); ++i) {
        double p = static_cast<double>(param[i]);
        const double g = static_cast<double>(grad[i]);
        p -= lr * wd * p;
        const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * g;
        const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * g * g;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double mhat = mi / bc1;
        const double vhat = vi / bc2;
        p -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
        param[i] = static_cast<T>(p);
    }
}

// Optimizer state for a named parameter list. Layernorm gains/biases are
// exempt from decay; everything else (weights, biases, memory slots) decays.
template <typename T>
class AdamW {
public:
    AdamW(std::vector<std::pair<std::string, Tensor<T>*>> params, OptimConfig cfg)
        : cfg_(cfg) {
        cfg_.validate();
        for (auto& [name, p] : params) {
            Slot s;
            s.name = name;
            s.param = p;
            s.m.assign(static_cast<std::size_t>(p->numel()), T(0));
            s.v.assign(static_cast<std::size_t>(p->numel()), T(0));
            s.decay = !is_layernorm_param(name);
            slots_.push_back(std::move(s));
        }
    }

    static bool is_layernorm_param(const std::string& name) {
        auto ends_with = [&](const char* suffix) {
            const std::string s(suffix);
            return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
        };
        return ends_with(".gamma") || ends_with(".beta");
    }

    // Applies one update from the tape's gradients; parameters without a
    // recorded gradient are left untouched.
    void step(Tape<T>& tape, double lr) {
        ++t_;
        for (auto& s : slots_) {
            if (!tape.has_grad(*s.param)) continue;
            auto g = tape.grad_span(s.param->node());
            adam_step(s.param->values(), g, std::span<T>(s.m), std::span<T>(s.v), t_, lr,
                      s.decay, cfg_);
        }
    }

    std::int64_t step_count() const { return t_; }
    void set_step_count(std::int64_t t) { t_ = t; }

    // Moment buffers, e.g. for checkpointing.
    template <typename F>
    void visit_state(F&& f) {
        for (auto& s : slots_) {
            f(s.name, s.m, s.v);
        }
    }

private:
    struct Slot {
        std::string name;
        Tensor<T>* param;
        std::vector<T> m, v;
        bool decay;
    };
    std::vector<Slot> slots_;
    OptimConfig cfg_;
    std::int64_t t_ = 0;
};

}  // namespace memmamba
