#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "udr/bi_encoder.hpp"

namespace udr {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.0;
};

/// Adam moments for the four parameter matrices, in the order query
/// embeddings, query projection, demo embeddings, demo projection.
struct OptimizerState {
    std::vector<Matrix<double>> first;
    std::vector<Matrix<double>> second;
    std::int64_t step = 0;
};

namespace detail {

template <typename T>
std::vector<Matrix<T>*> parameter_list(BiEncoderParams<T>& p) {
    return {&p.query.embeddings, &p.query.projection, &p.demo.embeddings, &p.demo.projection};
}

template <typename T>
std::vector<const Matrix<T>*> parameter_list(const BiEncoderParams<T>& p) {
    return {&p.query.embeddings, &p.query.projection, &p.demo.embeddings, &p.demo.projection};
}

}  // namespace detail

template <typename T>
OptimizerState make_optimizer_state(const BiEncoderParams<T>& params) {
    OptimizerState s;
    for (const auto* m : detail::parameter_list(params)) {
        s.first.emplace_back(m->rows, m->cols);
        s.second.emplace_back(m->rows, m->cols);
    }
    return s;
}

/// Linear warmup to the base rate over `warmup_steps`, then constant.
inline double warmup_learning_rate(double base, std::int64_t step, std::int64_t warmup_steps) {
    if (warmup_steps <= 0) return base;
    return base * std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(warmup_steps));
}

/// One AdamW update with decoupled weight decay. A zero learning rate leaves
/// parameters bit-identical.
template <typename T>
void adamw_step(BiEncoderParams<T>& params, const BiEncoderParams<double>& grads, OptimizerState& state, double lr,
                const AdamWConfig& cfg = {}) {
    ++state.step;
    auto ps = detail::parameter_list(params);
    auto gs = detail::parameter_list(grads);
    const double bc1 = 1 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t k = 0; k < ps.size(); ++k) {
        auto& p = ps[k]->data;
        const auto& g = gs[k]->data;
        auto& m = state.first[k].data;
        auto& v = state.second[k].data;
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1 - cfg.beta2) * g[i] * g[i];
            if (lr == 0) continue;
            double value = static_cast<double>(p[i]);
            value -= lr * cfg.weight_decay * value;
            value -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.epsilon);
            p[i] = static_cast<T>(value);
        }
    }
}

}  // namespace udr
