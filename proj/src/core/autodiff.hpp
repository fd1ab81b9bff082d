#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "core/tensor.hpp"

namespace mergcn {

class Tape;

// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Rectifier sign masks captured on one evaluation and optionally replayed on
// later ones, so perturbed evaluations stay on the same linear piece.
struct ActivationMasks {
  enum class Mode { Off, Record, Replay };

  Mode mode = Mode::Off;
  std::vector<std::vector<std::uint8_t>> masks;
  std::size_t cursor = 0;
  std::size_t crossings = 0;  // replayed entries whose live sign disagreed

  void start(Mode m) {
    mode = m;
    cursor = 0;
    if (m == Mode::Record) masks.clear();
  }
};

// Records operations in execution order and replays them in reverse for
// gradients. Node ids are topologically sorted by construction.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self, std::span<const double> upstream)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var leaf(Tensor value);
  Var parameter(Parameter& param);
  // Binds a parameter read-only: no gradient flows into it.
  Var parameter(const Parameter& param);

  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);

  const Tensor& value(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t input_id(std::size_t self, std::size_t k) const { return nodes_.at(self).inputs.at(k); }

  // Gradient buffer of the k-th input of `self`, empty when that input does
  // not require a gradient.
  std::span<double> input_grad(std::size_t self, std::size_t k);

  void backward(Var loss);
  std::vector<double> grad(Var v) const;

  std::size_t size() const noexcept { return nodes_.size(); }

  void set_corrupt_backward(bool on) noexcept { corrupt_backward_ = on; }
  bool corrupt_backward() const noexcept { return corrupt_backward_; }

  void set_activation_masks(ActivationMasks* masks) noexcept { masks_ = masks; }
  ActivationMasks* activation_masks() const noexcept { return masks_; }

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Parameter* param = nullptr;
    std::vector<std::size_t> inputs;
    bool requires_grad = false;
    std::vector<double> grad;
    BackwardFn backward;
  };

  Var push(Node node);
  void check_var(const Var& v) const;

  std::deque<Node> nodes_;
  bool corrupt_backward_ = false;
  bool backward_done_ = false;
  ActivationMasks* masks_ = nullptr;
};

struct Conv3dGeometry {
  std::array<std::size_t, 3> stride{1, 1, 1};
  std::array<std::size_t, 3> padding{0, 0, 0};
};

// floor((in + 2*pad - k) / stride) + 1 per axis; throws naming the axis when
// the result would not be positive.
std::array<std::size_t, 3> conv3d_output_dims(std::array<std::size_t, 3> in,
                                              std::array<std::size_t, 3> kernel,
                                              const Conv3dGeometry& geom);

namespace ops {

Var matmul(Var a, Var b);
Var matvec(Var m, Var v);
Var add(Var a, Var b);
Var scale(Var x, double factor);
Var sum(Var x);
Var leaky_relu(Var x, double slope);
Var global_avg_pool3d(Var x);
Var linear(Var x, Var w, Var b);
Var softmax_cross_entropy(Var logits, std::size_t target);

// input C_in x T x H x W, kernel C_out x C_in x kT x kH x kW, optional bias C_out.
Var conv3d(Var input, Var kernel, const Conv3dGeometry& geom);
Var conv3d(Var input, Var kernel, Var bias, const Conv3dGeometry& geom);

// Per-channel y = gamma[c] * x + beta[c] over a C x ... tensor.
Var channel_affine(Var x, Var gamma, Var beta);

}  // namespace ops

std::vector<double> softmax(std::span<const double> logits);

}  // namespace mergcn
