#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>

#include "core/autodiff.hpp"

namespace mergcn {

struct GradCheckOptions {
  double eps = 1e-5;
  std::size_t samples_per_param = 4;
  std::uint64_t seed = 0;
  // Denominator floor for the relative error, so coordinates whose true
  // gradient is ~0 are judged by absolute error instead.
  double abs_floor = 1e-7;
  // Replay the base evaluation's rectifier masks on perturbed evaluations.
  bool freeze_activation_pattern = true;
  bool corrupt_backward = false;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates_checked = 0;
  std::size_t kink_crossings = 0;  // perturbed evaluations where some rectifier changed sides
};

using LossClosure = std::function<Var(Tape&)>;

// Compares backward() gradients with central differences on a seeded sample
// of coordinates of every parameter. Throws if the closure is not
// deterministic.
GradCheckReport grad_check(const LossClosure& loss_fn, std::span<Parameter* const> params,
                           const GradCheckOptions& opts = {});

}  // namespace mergcn
