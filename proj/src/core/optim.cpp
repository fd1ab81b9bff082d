#include "core/optim.hpp"

#include <cmath>
#include <string>

#include "core/error.hpp"

namespace mergcn {

void sgd_step(std::span<Parameter* const> params, const SgdOptions& opts) {
  if (!(opts.lr > 0.0)) fail(ErrorCode::InvalidArgument, "learning rate must be positive");
  if (!(opts.momentum >= 0.0 && opts.momentum < 1.0)) {
    fail(ErrorCode::InvalidArgument, "momentum must lie in [0,1)");
  }
  for (Parameter* p : params) {
    if (!p->value.has_grad()) fail(ErrorCode::InvalidArgument, "parameter '" + p->name + "' has no gradient");
  }
  for (Parameter* p : params) {
    auto value = p->value.values();
    auto grad = p->value.ensure_grad();
    if (p->momentum.size() != value.size()) p->momentum.assign(value.size(), 0.0);
    for (std::size_t i = 0; i < value.size(); ++i) {
      p->momentum[i] = opts.momentum * p->momentum[i] + grad[i];
      value[i] -= opts.lr * p->momentum[i];
      grad[i] = 0.0;
    }
  }
}

double global_grad_norm(std::span<Parameter* const> params) {
  double sq = 0.0;
  for (const Parameter* p : params) {
    for (double g : p->value.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

double clip_grad_norm(std::span<Parameter* const> params, double max_norm) {
  if (!(max_norm > 0.0)) fail(ErrorCode::InvalidArgument, "clip norm must be positive");
  const double norm = global_grad_norm(params);
  if (norm > max_norm) {
    const double f = max_norm / norm;
    for (Parameter* p : params) {
      if (!p->value.has_grad()) continue;
      for (double& g : p->value.ensure_grad()) g *= f;
    }
  }
  return norm;
}

void zero_grads(std::span<Parameter* const> params) {
  for (Parameter* p : params) p->value.zero_grad();
}

}  // namespace mergcn
