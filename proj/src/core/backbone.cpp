#include "core/backbone.hpp"

#include <cmath>
#include <random>

#include "core/error.hpp"

namespace mergcn {

namespace {

constexpr std::array<std::size_t, 5> kBaseChannels{64, 64, 128, 256, 512};
constexpr std::size_t kBlocksPerStage = 2;

const Conv3dGeometry kStemGeom{{1, 2, 2}, {1, 3, 3}};
const Conv3dGeometry kBlockGeom{{1, 1, 1}, {1, 1, 1}};
const Conv3dGeometry kDownGeom{{2, 2, 2}, {1, 1, 1}};
const Conv3dGeometry kProjGeom{{2, 2, 2}, {0, 0, 0}};

}  // namespace

void BackboneConfig::validate() const {
  if (!(width_scale > 0.0 && width_scale <= 1.0)) {
    fail(ErrorCode::InvalidArgument, "width_scale must lie in (0,1], got " + std::to_string(width_scale));
  }
  if (in_channels == 0) fail(ErrorCode::InvalidArgument, "in_channels must be positive");
  if (input_h != 112 || input_w != 112) fail(ErrorCode::InvalidArgument, "backbone input must be 112x112");
  if (min_t == 0) fail(ErrorCode::InvalidArgument, "min_t must be positive");
  if (!(activation_slope >= 0.0 && activation_slope < 1.0)) {
    fail(ErrorCode::InvalidArgument, "activation slope must lie in [0,1)");
  }
}

std::array<std::size_t, 5> channel_plan(const BackboneConfig& config) {
  std::array<std::size_t, 5> plan{};
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const double c = std::round(static_cast<double>(kBaseChannels[i]) * config.width_scale);
    plan[i] = std::max<std::size_t>(1, static_cast<std::size_t>(c));
  }
  return plan;
}

ShapePlan shape_plan(const BackboneConfig& config, std::size_t t) {
  ShapePlan plan;
  const auto ch = channel_plan(config);
  plan.feature_dim = ch[4];
  if (t < config.min_t) {
    plan.errors.push_back("T=" + std::to_string(t) + " is below min_t=" + std::to_string(config.min_t));
  }
  std::array<std::size_t, 3> dims{t, config.input_h, config.input_w};
  auto step = [&](const std::string& name, std::size_t c, std::array<std::size_t, 3> kernel, const Conv3dGeometry& g) {
    if (!plan.errors.empty() && dims[0] == 0) return;
    try {
      dims = conv3d_output_dims(dims, kernel, g);
      plan.stages.push_back({name, c, dims[0], dims[1], dims[2]});
    } catch (const Error& e) {
      plan.errors.push_back(name + ": " + e.what());
      dims = {0, 0, 0};
    }
  };
  step("conv_1", ch[0], {3, 7, 7}, kStemGeom);
  step("res_block_1", ch[1], {3, 3, 3}, kBlockGeom);
  for (std::size_t s = 2; s <= 4; ++s) step("res_block_" + std::to_string(s), ch[s], {3, 3, 3}, kDownGeom);
  return plan;
}

BackboneModel::ConvRef BackboneModel::add_conv(const std::string& prefix, std::size_t c_in, std::size_t c_out,
                                               std::array<std::size_t, 3> kernel, const Conv3dGeometry& geom,
                                               std::mt19937_64& rng) {
  const std::size_t fan_in = c_in * kernel[0] * kernel[1] * kernel[2];
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  Tensor w({c_out, c_in, kernel[0], kernel[1], kernel[2]});
  for (double& v : w.values()) v = normal(rng);
  ConvRef ref;
  ref.geom = geom;
  ref.weight = params_.add(prefix + ".weight", std::move(w));
  ref.bias = params_.add(prefix + ".bias", Tensor({c_out}));
  if (config_.channel_affine) {
    ref.gamma = params_.add(prefix + ".affine.gamma", Tensor({c_out}, 1.0));
    ref.beta = params_.add(prefix + ".affine.beta", Tensor({c_out}));
  }
  return ref;
}

BackboneModel BackboneModel::build(const BackboneConfig& config, std::uint64_t seed) {
  config.validate();
  BackboneModel m;
  m.config_ = config;
  std::mt19937_64 rng(seed);
  const auto ch = channel_plan(config);
  m.stem_ = m.add_conv("backbone.stem", config.in_channels, ch[0], {3, 7, 7}, kStemGeom, rng);
  std::size_t c_in = ch[0];
  for (std::size_t s = 1; s <= 4; ++s) {
    std::vector<Block> blocks;
    for (std::size_t b = 1; b <= kBlocksPerStage; ++b) {
      const std::string prefix = "backbone.stage" + std::to_string(s) + ".block" + std::to_string(b);
      const bool down = s > 1 && b == 1;
      Block blk;
      blk.conv1 = m.add_conv(prefix + ".conv1", c_in, ch[s], {3, 3, 3}, down ? kDownGeom : kBlockGeom, rng);
      blk.conv2 = m.add_conv(prefix + ".conv2", ch[s], ch[s], {3, 3, 3}, kBlockGeom, rng);
      if (down || c_in != ch[s]) {
        blk.proj = m.add_conv(prefix + ".proj", c_in, ch[s], {1, 1, 1}, down ? kProjGeom : Conv3dGeometry{}, rng);
      }
      blocks.push_back(std::move(blk));
      c_in = ch[s];
    }
    m.stages_.push_back(std::move(blocks));
  }
  return m;
}

template <typename Self>
Var BackboneModel::apply_conv(Self& self, Tape& tape, Var x, const ConvRef& conv) {
  Var y = ops::conv3d(x, tape.parameter(self.params_.at(conv.weight)), tape.parameter(self.params_.at(conv.bias)),
                      conv.geom);
  if (conv.gamma) {
    y = ops::channel_affine(y, tape.parameter(self.params_.at(*conv.gamma)), tape.parameter(self.params_.at(*conv.beta)));
  }
  return y;
}

template <typename Self>
Var BackboneModel::forward_impl(Self& self, Tape& tape, Var seq, std::vector<Shape>* stage_shapes) {
  const BackboneConfig& cfg = self.config_;
  const Shape& s = seq.shape();
  if (s.size() != 4) fail(ErrorCode::Shape, "backbone input must be C x T x H x W, got " + shape_str(s));
  if (s[0] != cfg.in_channels) {
    fail(ErrorCode::Shape, "backbone expects " + std::to_string(cfg.in_channels) + " channels, got " + std::to_string(s[0]));
  }
  if (s[2] != cfg.input_h || s[3] != cfg.input_w) {
    fail(ErrorCode::Shape, "backbone expects 112x112 frames, got " + shape_str(s));
  }
  if (s[1] < cfg.min_t) {
    fail(ErrorCode::Shape, "sequence too short: T=" + std::to_string(s[1]) + " < min_t=" + std::to_string(cfg.min_t));
  }
  const double slope = cfg.activation_slope;
  if (stage_shapes) stage_shapes->clear();

  Var x = ops::leaky_relu(apply_conv(self, tape, seq, self.stem_), slope);
  if (stage_shapes) stage_shapes->push_back(x.shape());
  for (const auto& blocks : self.stages_) {
    for (const Block& blk : blocks) {
      Var y = ops::leaky_relu(apply_conv(self, tape, x, blk.conv1), slope);
      y = apply_conv(self, tape, y, blk.conv2);
      const Var shortcut = blk.proj ? apply_conv(self, tape, x, *blk.proj) : x;
      x = ops::leaky_relu(ops::add(y, shortcut), slope);
    }
    if (stage_shapes) stage_shapes->push_back(x.shape());
  }
  return ops::global_avg_pool3d(x);
}

Var BackboneModel::forward(Tape& tape, Var seq, std::vector<Shape>* stage_shapes) {
  return forward_impl(*this, tape, seq, stage_shapes);
}

Var BackboneModel::forward(Tape& tape, Var seq, std::vector<Shape>* stage_shapes) const {
  return forward_impl(*this, tape, seq, stage_shapes);
}

}  // namespace mergcn
