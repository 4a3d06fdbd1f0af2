#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "xsep/errors.hpp"
#include "xsep/model.hpp"
#include "xsep/tensor.hpp"

namespace xsep {

enum class OptimKind { Sgd, Rmsprop };

enum class ScheduleKind { StepEveryEpochs, StepEverySamples };

struct OptimConfig {
    OptimKind kind = OptimKind::Sgd;
    double momentum = 0.9;
    double lr0 = 0.045;
    ScheduleKind schedule = ScheduleKind::StepEveryEpochs;
    double decay_factor = 0.94;
    std::uint64_t decay_every = 2;  // epochs or samples, per schedule kind
    double weight_decay = 1e-5;
    double rms_rho = 0.9;
    double rms_epsilon = 1e-7;
    bool polyak = true;
    double polyak_decay = 0.999;

    void check() const {
        if (lr0 <= 0.0) throw ConfigError("optim: lr0 must be > 0");
        if (momentum < 0.0 || momentum >= 1.0)
            throw ConfigError("optim: momentum must be in [0, 1)");
        if (decay_factor <= 0.0 || decay_factor > 1.0)
            throw ConfigError("optim: decay factor must be in (0, 1]");
        if (decay_every < 1) throw ConfigError("optim: decay interval must be >= 1");
        if (weight_decay < 0.0) throw ConfigError("optim: weight decay must be >= 0");
        if (polyak && (polyak_decay <= 0.0 || polyak_decay >= 1.0))
            throw ConfigError("optim: polyak decay must be in (0, 1)");
    }
};

// Piecewise-constant step decay; pure in its arguments.
inline double lr_at(const OptimConfig& config, std::uint64_t epoch, std::uint64_t samples_seen) {
    const std::uint64_t progress =
        config.schedule == ScheduleKind::StepEveryEpochs ? epoch : samples_seen;
    const std::uint64_t steps = progress / config.decay_every;
    return config.lr0 * std::pow(config.decay_factor, static_cast<double>(steps));
}

// Per-parameter buffers mirroring the trainable entries of a ParamStore.
template <typename T>
struct OptimState {
    std::vector<Tensor4<T>> velocity;     // SGD momentum / RMSprop momentum
    std::vector<Tensor4<T>> mean_square;  // RMSprop accumulator
    std::vector<Tensor4<T>> polyak_shadow;
    std::uint64_t step = 0;
    std::uint64_t samples_seen = 0;

    template <typename Store>
    static OptimState init(const OptimConfig& config, const Store& params) {
        OptimState state;
        for (const auto& p : params) {
            if (!p.trainable) continue;
            state.velocity.emplace_back(p.value->dims());
            if (config.kind == OptimKind::Rmsprop)
                state.mean_square.emplace_back(p.value->dims());
            if (config.polyak) state.polyak_shadow.push_back(*p.value);
        }
        return state;
    }
};

// g' = g + lambda*w; v <- momentum*v - lr*g'; w <- w + v.
template <typename T>
void sgd_momentum_step(Tensor4<T>& param, const Tensor4<T>& grad, Tensor4<T>& velocity,
                       double lr, double momentum, double weight_decay) {
    check_same_dims(param, grad, "sgd_momentum_step");
    check_same_dims(param, velocity, "sgd_momentum_step");
    const T wd = static_cast<T>(weight_decay), m = static_cast<T>(momentum);
    const T rate = static_cast<T>(lr);
    for (std::size_t k = 0; k < param.size(); ++k) {
        const T g = grad[k] + wd * param[k];
        const T v = m * velocity[k] - rate * g;
        velocity[k] = v;
        param[k] += v;
    }
}

// g' = g + lambda*w; s <- rho*s + (1-rho)*g'^2; v <- momentum*v - lr*g'/sqrt(s+eps).
template <typename T>
void rmsprop_step(Tensor4<T>& param, const Tensor4<T>& grad, Tensor4<T>& velocity,
                  Tensor4<T>& mean_square, double lr, double momentum, double rho, double eps,
                  double weight_decay) {
    check_same_dims(param, grad, "rmsprop_step");
    check_same_dims(param, velocity, "rmsprop_step");
    check_same_dims(param, mean_square, "rmsprop_step");
    const T wd = static_cast<T>(weight_decay), m = static_cast<T>(momentum);
    const T rate = static_cast<T>(lr), r = static_cast<T>(rho), e = static_cast<T>(eps);
    for (std::size_t k = 0; k < param.size(); ++k) {
        const T g = grad[k] + wd * param[k];
        const T s = r * mean_square[k] + (T(1) - r) * g * g;
        mean_square[k] = s;
        const T v = m * velocity[k] - rate * g / std::sqrt(s + e);
        velocity[k] = v;
        param[k] += v;
    }
}

template <typename T>
void polyak_update(Tensor4<T>& shadow, const Tensor4<T>& param, double decay) {
    check_same_dims(shadow, param, "polyak_update");
    const T d = static_cast<T>(decay);
    for (std::size_t k = 0; k < shadow.size(); ++k)
        shadow[k] = d * shadow[k] + (T(1) - d) * param[k];
}

// One optimizer step over every trainable parameter.
template <typename T>
void optimizer_step(const OptimConfig& config, ParamStore<T>& params, OptimState<T>& state,
                    double lr) {
    std::size_t slot = 0;
    for (auto& p : params) {
        if (!p.trainable) continue;
        if (config.kind == OptimKind::Sgd)
            sgd_momentum_step(*p.value, *p.grad, state.velocity[slot], lr, config.momentum,
                              config.weight_decay);
        else
            rmsprop_step(*p.value, *p.grad, state.velocity[slot], state.mean_square[slot], lr,
                         config.momentum, config.rms_rho, config.rms_epsilon,
                         config.weight_decay);
        if (config.polyak)
            polyak_update(state.polyak_shadow[slot], *p.value, config.polyak_decay);
        ++slot;
    }
    ++state.step;
}

// Swaps the Polyak shadow into the live parameters for the guard's lifetime;
// evaluation sees the averaged weights, training state is restored on exit.
template <typename T>
class PolyakSwapGuard {
public:
    PolyakSwapGuard(ParamStore<T>& params, OptimState<T>& state, bool enabled)
        : params_(params), state_(state), enabled_(enabled && !state.polyak_shadow.empty()) {
        if (enabled_) swap_all();
    }
    ~PolyakSwapGuard() {
        if (enabled_) swap_all();
    }
    PolyakSwapGuard(const PolyakSwapGuard&) = delete;
    PolyakSwapGuard& operator=(const PolyakSwapGuard&) = delete;

private:
    void swap_all() {
        std::size_t slot = 0;
        for (auto& p : params_) {
            if (!p.trainable) continue;
            std::swap(*p.value, state_.polyak_shadow[slot]);
            ++slot;
        }
    }

    ParamStore<T>& params_;
    OptimState<T>& state_;
    bool enabled_;
};

}  // namespace xsep
