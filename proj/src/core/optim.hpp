#pragma once

#include <span>
#include <vector>

#include "core/tensor.hpp"

namespace mergcn {

struct SgdOptions {
  double lr = 1e-3;
  double momentum = 0.9;
};

// v <- momentum * v + grad; value <- value - lr * v; grads are zeroed after.
void sgd_step(std::span<Parameter* const> params, const SgdOptions& opts);

double global_grad_norm(std::span<Parameter* const> params);

// Rescales all gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_grad_norm(std::span<Parameter* const> params, double max_norm);

void zero_grads(std::span<Parameter* const> params);

}  // namespace mergcn
