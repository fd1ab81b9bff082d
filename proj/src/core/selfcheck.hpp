#pragma once

#include <cstdint>

#include "core/gradcheck.hpp"

namespace mergcn {

struct TinyCheckSetup {
  double width_scale = 0.125;
  std::size_t t = 8;
  std::size_t n_classes = 3;
  std::size_t label = 1;
  std::uint64_t model_seed = 3;
  std::uint64_t input_seed = 5;
};

// End-to-end gradient check of a two-AU model on one random sequence.
GradCheckReport tiny_model_grad_check(const GradCheckOptions& opts, const TinyCheckSetup& setup = {});

}  // namespace mergcn
