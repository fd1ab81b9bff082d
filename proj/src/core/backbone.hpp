#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "core/autodiff.hpp"

namespace mergcn {

struct BackboneConfig {
  std::size_t in_channels = 3;
  double width_scale = 1.0;
  std::size_t input_h = 112;
  std::size_t input_w = 112;
  std::size_t min_t = 8;
  double activation_slope = 0.0;  // 0 = plain rectifier
  bool channel_affine = false;

  void validate() const;
};

// Stem plus the four residual stages: [64, 64, 128, 256, 512] * width_scale.
std::array<std::size_t, 5> channel_plan(const BackboneConfig& config);

struct StageShape {
  std::string name;
  std::size_t c = 0, t = 0, h = 0, w = 0;

  Shape shape() const { return {c, t, h, w}; }
  bool operator==(const StageShape&) const = default;
};

struct ShapePlan {
  std::vector<StageShape> stages;  // conv_1, res_block_1 .. res_block_4
  std::size_t feature_dim = 0;
  std::vector<std::string> errors;

  bool ok() const noexcept { return errors.empty(); }
};

ShapePlan shape_plan(const BackboneConfig& config, std::size_t t);

// 18-layer 3D residual network without normalization layers, ending in
// global space-time average pooling.
class BackboneModel {
 public:
  static BackboneModel build(const BackboneConfig& config, std::uint64_t seed);

  const BackboneConfig& config() const noexcept { return config_; }
  std::size_t feature_dim() const noexcept { return channel_plan(config_)[4]; }

  // seq: C x T x H x W. `stage_shapes`, when given, receives the output shape
  // of the stem and each stage.
  Var forward(Tape& tape, Var seq, std::vector<Shape>* stage_shapes = nullptr);
  Var forward(Tape& tape, Var seq, std::vector<Shape>* stage_shapes = nullptr) const;

  ParameterSet& params() noexcept { return params_; }
  const ParameterSet& params() const noexcept { return params_; }

 private:
  struct ConvRef {
    std::size_t weight = 0;
    std::size_t bias = 0;
    std::optional<std::size_t> gamma;
    std::optional<std::size_t> beta;
    Conv3dGeometry geom;
  };
  struct Block {
    ConvRef conv1;
    ConvRef conv2;
    std::optional<ConvRef> proj;
  };

  template <typename Self>
  static Var forward_impl(Self& self, Tape& tape, Var seq, std::vector<Shape>* stage_shapes);
  template <typename Self>
  static Var apply_conv(Self& self, Tape& tape, Var x, const ConvRef& conv);

  ConvRef add_conv(const std::string& prefix, std::size_t c_in, std::size_t c_out, std::array<std::size_t, 3> kernel,
                   const Conv3dGeometry& geom, std::mt19937_64& rng);

  BackboneConfig config_;
  ParameterSet params_;
  ConvRef stem_;
  std::vector<std::vector<Block>> stages_;
};

}  // namespace mergcn
