#pragma once

#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "conbat/autodiff/tensor.hpp"

namespace conbat::ad {

enum class OptimizerKind { adam, rmsprop, sgd };

OptimizerKind parse_optimizer(std::string_view name);
std::string_view optimizer_name(OptimizerKind kind);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double rms_alpha = 0.99;  // RMSProp squared-gradient decay
};

/// First/second moment buffers, created as zeros on the first step.
template <typename T>
struct OptimizerState {
  std::vector<Tensor<T>> first;
  std::vector<Tensor<T>> second;
  long long steps = 0;
};

/// One update of every param from its gradient. Moments are kept in T,
/// arithmetic is done in double.
template <typename T>
void optimizer_step(const OptimizerConfig& cfg, std::span<Tensor<T>* const> params,
                    std::span<const Tensor<T>> grads, OptimizerState<T>& state) {
  if (params.size() != grads.size()) {
    throw ShapeError("optimizer_step: " + std::to_string(params.size()) + " params but " +
                     std::to_string(grads.size()) + " grads");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i].shape()) {
      throw ShapeError("optimizer_step: param " + std::to_string(i) + " shape " +
                       shape_str(params[i]->shape()) + " vs grad " + shape_str(grads[i].shape()));
    }
  }
  if (state.first.empty()) {
    for (const auto* p : params) {
      state.first.emplace_back(p->shape());
      state.second.emplace_back(p->shape());
    }
  } else if (state.first.size() != params.size()) {
    throw ShapeError("optimizer_step: state holds " + std::to_string(state.first.size()) +
                     " slots for " + std::to_string(params.size()) + " params");
  }
  ++state.steps;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.steps));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.steps));

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i]->storage();
    const auto& g = grads[i];
    auto& m = state.first[i];
    auto& v = state.second[i];
    for (std::size_t q = 0; q < p.size(); ++q) {
      const double gq = g[q];
      switch (cfg.kind) {
        case OptimizerKind::sgd:
          p[q] = static_cast<T>(p[q] - cfg.lr * gq);
          break;
        case OptimizerKind::rmsprop: {
          const double vq = cfg.rms_alpha * v[q] + (1.0 - cfg.rms_alpha) * gq * gq;
          v[q] = static_cast<T>(vq);
          p[q] = static_cast<T>(p[q] - cfg.lr * gq / (std::sqrt(vq) + cfg.eps));
          break;
        }
        case OptimizerKind::adam: {
          const double mq = cfg.beta1 * m[q] + (1.0 - cfg.beta1) * gq;
          const double vq = cfg.beta2 * v[q] + (1.0 - cfg.beta2) * gq * gq;
          m[q] = static_cast<T>(mq);
          v[q] = static_cast<T>(vq);
          p[q] = static_cast<T>(p[q] - cfg.lr * (mq / bc1) / (std::sqrt(vq / bc2) + cfg.eps));
          break;
        }
      }
    }
  }
}

}  // namespace conbat::ad
