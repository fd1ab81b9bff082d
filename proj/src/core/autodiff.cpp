#include "core/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <string>

#include "core/error.hpp"

namespace mergcn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using ColMat = Eigen::MatrixXd;
using ColMap = Eigen::Map<ColMat>;
using ConstColMap = Eigen::Map<const ColMat>;
using ColStridedMap = Eigen::Map<ColMat, 0, Eigen::OuterStride<>>;
using ConstColStridedMap = Eigen::Map<const ColMat, 0, Eigen::OuterStride<>>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

Tape& same_tape(const Var& a, const Var& b) {
  if (!a.valid() || !b.valid()) fail(ErrorCode::InvalidArgument, "operation on an unbound Var");
  if (a.tape() != b.tape()) fail(ErrorCode::InvalidArgument, "operands recorded on different tapes");
  return *a.tape();
}

Tape& tape_of(const Var& a) {
  if (!a.valid()) fail(ErrorCode::InvalidArgument, "operation on an unbound Var");
  return *a.tape();
}

}  // namespace

const Tensor& Var::value() const {
  if (!tape_) fail(ErrorCode::InvalidArgument, "value() on an unbound Var");
  return tape_->value(id_);
}

Var Tape::push(Node node) {
  if (backward_done_) fail(ErrorCode::InvalidArgument, "cannot record onto a tape after backward()");
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Tape::check_var(const Var& v) const {
  if (v.tape() != this) fail(ErrorCode::InvalidArgument, "Var does not belong to this tape");
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::leaf(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::parameter(Parameter& param) {
  Node n;
  n.external = &param.value;
  n.param = &param;
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::parameter(const Parameter& param) {
  Node n;
  n.external = &param.value;
  return push(std::move(n));
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  for (const Var& in : inputs) {
    check_var(in);
    n.inputs.push_back(in.id());
    n.requires_grad = n.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

const Tensor& Tape::value(std::size_t id) const {
  const Node& n = nodes_.at(id);
  return n.external ? *n.external : n.value;
}

std::span<double> Tape::input_grad(std::size_t self, std::size_t k) {
  const std::size_t id = nodes_.at(self).inputs.at(k);
  Node& in = nodes_[id];
  if (!in.requires_grad) return {};
  if (in.grad.empty()) in.grad.assign(value(id).numel(), 0.0);
  return in.grad;
}

void Tape::backward(Var loss) {
  check_var(loss);
  const Tensor& lv = value(loss.id());
  if (lv.numel() != 1) {
    fail(ErrorCode::Shape, "backward() needs a scalar loss, got shape " + shape_str(lv.shape()));
  }
  for (Node& n : nodes_) n.grad.clear();
  nodes_[loss.id()].grad.assign(1, 1.0);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty() || !n.backward) continue;
    n.backward(*this, i, n.grad);
  }
  for (Node& n : nodes_) {
    if (!n.param) continue;
    auto g = n.param->value.ensure_grad();
    for (std::size_t j = 0; j < n.grad.size(); ++j) g[j] += n.grad[j];
  }
  backward_done_ = true;
}

std::vector<double> Tape::grad(Var v) const {
  check_var(v);
  const Node& n = nodes_[v.id()];
  if (n.grad.empty()) return std::vector<double>(value(v.id()).numel(), 0.0);
  return n.grad;
}

std::array<std::size_t, 3> conv3d_output_dims(std::array<std::size_t, 3> in,
                                              std::array<std::size_t, 3> kernel,
                                              const Conv3dGeometry& geom) {
  static constexpr const char* kAxis[3] = {"T", "H", "W"};
  std::array<std::size_t, 3> out{};
  for (int a = 0; a < 3; ++a) {
    if (geom.stride[a] == 0) fail(ErrorCode::InvalidArgument, std::string("conv3d stride on axis ") + kAxis[a] + " is zero");
    const std::size_t padded = in[a] + 2 * geom.padding[a];
    if (padded < kernel[a]) {
      fail(ErrorCode::Shape, std::string("conv3d output dimension on axis ") + kAxis[a] +
                                 " is not positive (input " + std::to_string(in[a]) + ", padding " +
                                 std::to_string(geom.padding[a]) + ", kernel " + std::to_string(kernel[a]) + ")");
    }
    out[a] = (padded - kernel[a]) / geom.stride[a] + 1;
  }
  return out;
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.size());
  if (logits.empty()) return p;
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

namespace ops {

Var matmul(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.ndim() != 2 || bv.ndim() != 2 || av.dim(1) != bv.dim(0)) {
    fail(ErrorCode::Shape, "matmul shape mismatch: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  MatMap(out.data(), m, n).noalias() = ConstMatMap(av.data(), m, k) * ConstMatMap(bv.data(), k, n);
  return tape.record(std::move(out), {a, b}, [m, k, n](Tape& t, std::size_t self, std::span<const double> up) {
    ConstMatMap dc(up.data(), m, n);
    const Tensor& av = t.value(t.input_id(self, 0));
    const Tensor& bv = t.value(t.input_id(self, 1));
    if (auto ga = t.input_grad(self, 0); !ga.empty()) {
      MatMap(ga.data(), m, k).noalias() += dc * ConstMatMap(bv.data(), k, n).transpose();
    }
    if (auto gb = t.input_grad(self, 1); !gb.empty()) {
      const double f = t.corrupt_backward() ? 2.0 : 1.0;
      MatMap(gb.data(), k, n).noalias() += f * (ConstMatMap(av.data(), m, k).transpose() * dc);
    }
  });
}

Var matvec(Var m, Var v) {
  Tape& tape = same_tape(m, v);
  const Tensor& mv = m.value();
  const Tensor& vv = v.value();
  if (mv.ndim() != 2 || vv.ndim() != 1 || mv.dim(1) != vv.dim(0)) {
    fail(ErrorCode::Shape, "matvec shape mismatch: " + shape_str(mv.shape()) + " x " + shape_str(vv.shape()));
  }
  const std::size_t rows = mv.dim(0), cols = mv.dim(1);
  Tensor out({rows});
  VecMap(out.data(), rows).noalias() = ConstMatMap(mv.data(), rows, cols) * ConstVecMap(vv.data(), cols);
  return tape.record(std::move(out), {m, v}, [rows, cols](Tape& t, std::size_t self, std::span<const double> up) {
    ConstVecMap dy(up.data(), rows);
    const Tensor& mv = t.value(t.input_id(self, 0));
    const Tensor& vv = t.value(t.input_id(self, 1));
    if (auto gm = t.input_grad(self, 0); !gm.empty()) {
      MatMap(gm.data(), rows, cols).noalias() += dy * ConstVecMap(vv.data(), cols).transpose();
    }
    if (auto gv = t.input_grad(self, 1); !gv.empty()) {
      VecMap(gv.data(), cols).noalias() += ConstMatMap(mv.data(), rows, cols).transpose() * dy;
    }
  });
}

Var add(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  if (a.shape() != b.shape()) {
    fail(ErrorCode::Shape, "add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const auto av = a.value().values();
  Tensor out(a.shape(), std::vector<double>(av.begin(), av.end()));
  const auto bv = b.value().values();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  return tape.record(std::move(out), {a, b}, [](Tape& t, std::size_t self, std::span<const double> up) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (auto g = t.input_grad(self, k); !g.empty()) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += up[i];
      }
    }
  });
}

Var scale(Var x, double factor) {
  Tape& tape = tape_of(x);
  Tensor out(x.shape());
  const auto xv = x.value().values();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = factor * xv[i];
  return tape.record(std::move(out), {x}, [factor](Tape& t, std::size_t self, std::span<const double> up) {
    auto g = t.input_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * up[i];
  });
}

Var sum(Var x) {
  Tape& tape = tape_of(x);
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return tape.record(Tensor::scalar(s), {x}, [](Tape& t, std::size_t self, std::span<const double> up) {
    auto g = t.input_grad(self, 0);
    for (double& v : g) v += up[0];
  });
}

Var leaky_relu(Var x, double slope) {
  Tape& tape = tape_of(x);
  if (!(slope >= 0.0 && slope < 1.0)) {
    fail(ErrorCode::InvalidArgument, "leaky_relu slope must lie in [0,1), got " + std::to_string(slope));
  }
  const auto xv = x.value().values();
  const std::size_t n = xv.size();
  auto mask = std::make_shared<std::vector<std::uint8_t>>(n);
  ActivationMasks* masks = tape.activation_masks();
  const std::vector<std::uint8_t>* replay = nullptr;
  if (masks && masks->mode == ActivationMasks::Mode::Replay) {
    if (masks->cursor >= masks->masks.size() || masks->masks[masks->cursor].size() != n) {
      fail(ErrorCode::InvalidArgument, "activation mask replay does not match the recorded graph");
    }
    replay = &masks->masks[masks->cursor++];
  }
  Tensor out(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t live = xv[i] > 0.0 ? 1 : 0;
    std::uint8_t on = live;
    if (replay) {
      on = (*replay)[i];
      if (on != live) ++masks->crossings;
    }
    (*mask)[i] = on;
    out[i] = on ? xv[i] : slope * xv[i];
  }
  if (masks && masks->mode == ActivationMasks::Mode::Record) masks->masks.push_back(*mask);
  return tape.record(std::move(out), {x}, [mask, slope](Tape& t, std::size_t self, std::span<const double> up) {
    auto g = t.input_grad(self, 0);
    const auto& mk = *mask;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += mk[i] ? up[i] : slope * up[i];
  });
}

Var global_avg_pool3d(Var x) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  if (xv.ndim() != 4) fail(ErrorCode::Shape, "global_avg_pool3d expects C x T x H x W, got " + shape_str(xv.shape()));
  const std::size_t c = xv.dim(0);
  const std::size_t vol = xv.numel() / c;
  Tensor out({c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* p = xv.data() + ch * vol;
    double s = 0.0;
    for (std::size_t i = 0; i < vol; ++i) s += p[i];
    out[ch] = s / static_cast<double>(vol);
  }
  return tape.record(std::move(out), {x}, [c, vol](Tape& t, std::size_t self, std::span<const double> up) {
    auto g = t.input_grad(self, 0);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double d = up[ch] / static_cast<double>(vol);
      double* p = g.data() + ch * vol;
      for (std::size_t i = 0; i < vol; ++i) p[i] += d;
    }
  });
}

Var linear(Var x, Var w, Var b) {
  Tape& tape = same_tape(x, w);
  same_tape(x, b);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  if (xv.ndim() != 1 || wv.ndim() != 2 || bv.ndim() != 1 || wv.dim(1) != xv.dim(0) || wv.dim(0) != bv.dim(0)) {
    fail(ErrorCode::Shape, "linear shape mismatch: x " + shape_str(xv.shape()) + ", w " + shape_str(wv.shape()) +
                               ", b " + shape_str(bv.shape()));
  }
  const std::size_t out_dim = wv.dim(0), in_dim = wv.dim(1);
  Tensor out(bv.shape(), std::vector<double>(bv.values().begin(), bv.values().end()));
  VecMap(out.data(), out_dim).noalias() += ConstMatMap(wv.data(), out_dim, in_dim) * ConstVecMap(xv.data(), in_dim);
  return tape.record(std::move(out), {x, w, b}, [out_dim, in_dim](Tape& t, std::size_t self, std::span<const double> up) {
    ConstVecMap dy(up.data(), out_dim);
    const Tensor& xv = t.value(t.input_id(self, 0));
    const Tensor& wv = t.value(t.input_id(self, 1));
    if (auto gx = t.input_grad(self, 0); !gx.empty()) {
      VecMap(gx.data(), in_dim).noalias() += ConstMatMap(wv.data(), out_dim, in_dim).transpose() * dy;
    }
    if (auto gw = t.input_grad(self, 1); !gw.empty()) {
      MatMap(gw.data(), out_dim, in_dim).noalias() += dy * ConstVecMap(xv.data(), in_dim).transpose();
    }
    if (auto gb = t.input_grad(self, 2); !gb.empty()) {
      for (std::size_t i = 0; i < out_dim; ++i) gb[i] += up[i];
    }
  });
}

Var softmax_cross_entropy(Var logits, std::size_t target) {
  Tape& tape = tape_of(logits);
  const Tensor& lv = logits.value();
  if (lv.ndim() != 1) fail(ErrorCode::Shape, "softmax_cross_entropy expects a logit vector, got " + shape_str(lv.shape()));
  const std::size_t n = lv.numel();
  if (target >= n) {
    fail(ErrorCode::InvalidArgument, "target class " + std::to_string(target) + " out of range for " +
                                         std::to_string(n) + " classes");
  }
  const auto l = lv.values();
  const std::size_t top = static_cast<std::size_t>(std::max_element(l.begin(), l.end()) - l.begin());
  const double m = l[top];
  // log-sum-exp relative to the max, kept as log1p so saturated losses stay representable
  double rest = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (i != top) rest += std::exp(l[i] - m);
  }
  const double loss = std::log1p(rest) - (l[target] - m);
  auto probs = std::make_shared<std::vector<double>>(softmax(l));
  return tape.record(Tensor::scalar(loss), {logits}, [probs, target](Tape& t, std::size_t self, std::span<const double> up) {
    auto g = t.input_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += up[0] * ((*probs)[i] - (i == target ? 1.0 : 0.0));
    }
  });
}

namespace {

struct ConvDims {
  std::size_t c_in, t, h, w;
  std::size_t c_out, kt, kh, kw;
  std::size_t to, ho, wo;
  Conv3dGeometry geom;

  std::size_t taps() const { return kt * kh * kw; }
  std::size_t plane() const { return ho * wo; }
};

constexpr std::size_t kLanes = 8;
using Lanes = double __attribute__((vector_size(kLanes * sizeof(double))));

inline Lanes load_lanes(const double* p) {
  Lanes v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

std::size_t round_up(std::size_t n, std::size_t m) { return (n + m - 1) / m * m; }

// Zero-bordered copy of a C x T x H x W volume. Each row is split into
// `phases` interleaved segments (column c lives in segment c % phases at
// offset c / phases) so that reads with a W stride of `phases` are
// contiguous. Segments carry slack for whole lane chunks past the last
// valid output column.
struct PaddedVolume {
  std::vector<double> data;
  std::size_t c = 0, t = 0, h = 0;
  std::size_t phases = 1, seg = 0;

  std::size_t row_len() const { return phases * seg; }
  const double* row(std::size_t ci, std::size_t ti, std::size_t hi) const {
    return data.data() + ((ci * t + ti) * h + hi) * row_len();
  }
  double* row(std::size_t ci, std::size_t ti, std::size_t hi) { return data.data() + ((ci * t + ti) * h + hi) * row_len(); }
  // Row offset of the lanes for output column 0 at each kernel column.
  std::vector<std::size_t> column_offsets(std::size_t kw) const {
    std::vector<std::size_t> off(kw);
    for (std::size_t k = 0; k < kw; ++k) off[k] = (k % phases) * seg + k / phases;
    return off;
  }
};

// Builds a padded (and optionally dilated) copy: source element (c,a,b,e)
// lands at (c, a*dil[0]+lead[0], ...). Elements landing outside the extent
// are dropped. `out_w` is the number of output columns the copy will feed.
PaddedVolume make_padded(const double* src, std::size_t c, std::array<std::size_t, 3> in,
                         std::array<std::size_t, 3> dil, std::array<std::ptrdiff_t, 3> lead,
                         std::array<std::size_t, 3> extent, std::size_t phases, std::size_t out_w, std::size_t kw) {
  PaddedVolume p;
  p.c = c;
  p.t = extent[0];
  p.h = extent[1];
  p.phases = phases;
  p.seg = std::max((extent[2] + phases - 1) / phases, round_up(out_w, kLanes) + (kw - 1) / phases);
  p.data.assign(p.c * p.t * p.h * p.row_len(), 0.0);
  auto place = [&](std::size_t axis, std::size_t i) -> std::ptrdiff_t {
    const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(i * dil[axis]) + lead[axis];
    return pos >= 0 && pos < static_cast<std::ptrdiff_t>(extent[axis]) ? pos : -1;
  };
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t a = 0; a < in[0]; ++a) {
      const std::ptrdiff_t ta = place(0, a);
      if (ta < 0) continue;
      for (std::size_t b = 0; b < in[1]; ++b) {
        const std::ptrdiff_t hb = place(1, b);
        if (hb < 0) continue;
        const double* s = src + ((ci * in[0] + a) * in[1] + b) * in[2];
        double* d = p.row(ci, static_cast<std::size_t>(ta), static_cast<std::size_t>(hb));
        for (std::size_t e = 0; e < in[2]; ++e) {
          const std::ptrdiff_t col = place(2, e);
          if (col < 0) continue;
          const auto uc = static_cast<std::size_t>(col);
          d[(uc % phases) * p.seg + uc / phases] = s[e];
        }
      }
    }
  }
  return p;
}

// Valid cross-correlation of a padded volume: dst[co] (+)= sum over ci, taps.
// `packed` holds weights as [ci][tap][CB] so the CB output channels of one
// tap are adjacent. Output rows are produced kLanes columns at a time.
template <std::size_t CB>
void correlate_block(const PaddedVolume& src, const double* packed, std::size_t c_in, std::array<std::size_t, 3> k,
                     std::array<std::size_t, 3> stride, std::array<std::size_t, 3> out, double* dst,
                     bool accumulate) {
  const std::size_t plane = out[1] * out[2];
  const std::size_t vol = out[0] * plane;
  const std::vector<std::size_t> koff = src.column_offsets(k[2]);
  for (std::size_t to = 0; to < out[0]; ++to) {
    for (std::size_t oh = 0; oh < out[1]; ++oh) {
      for (std::size_t ow0 = 0; ow0 < out[2]; ow0 += kLanes) {
        Lanes acc[CB] = {};
        const double* wp = packed;
        for (std::size_t ci = 0; ci < c_in; ++ci) {
          for (std::size_t kt = 0; kt < k[0]; ++kt) {
            for (std::size_t kh = 0; kh < k[1]; ++kh) {
              const double* r = src.row(ci, to * stride[0] + kt, oh * stride[1] + kh);
              for (std::size_t kw = 0; kw < k[2]; ++kw, wp += CB) {
                const Lanes v = load_lanes(r + koff[kw] + ow0);
                for (std::size_t b = 0; b < CB; ++b) acc[b] += wp[b] * v;
              }
            }
          }
        }
        const std::size_t n = std::min(kLanes, out[2] - ow0);
        for (std::size_t b = 0; b < CB; ++b) {
          double* o = dst + b * vol + to * plane + oh * out[2] + ow0;
          if (accumulate) {
            for (std::size_t j = 0; j < n; ++j) o[j] += acc[b][j];
          } else {
            for (std::size_t j = 0; j < n; ++j) o[j] = acc[b][j];
          }
        }
      }
    }
  }
}

// weight(co, ci, tap) gives the kernel entry for output channel co.
template <typename WeightFn>
void correlate(const PaddedVolume& src, std::size_t c_out, std::size_t c_in, std::array<std::size_t, 3> k,
               std::array<std::size_t, 3> stride, std::array<std::size_t, 3> out, double* dst, bool accumulate,
               WeightFn weight) {
  const std::size_t taps = k[0] * k[1] * k[2];
  const std::size_t vol = out[0] * out[1] * out[2];
  std::vector<double> packed;
  auto run = [&]<std::size_t CB>(std::size_t co0) {
    packed.resize(c_in * taps * CB);
    for (std::size_t ci = 0; ci < c_in; ++ci) {
      for (std::size_t tap = 0; tap < taps; ++tap) {
        for (std::size_t b = 0; b < CB; ++b) packed[(ci * taps + tap) * CB + b] = weight(co0 + b, ci, tap);
      }
    }
    correlate_block<CB>(src, packed.data(), c_in, k, stride, out, dst + co0 * vol, accumulate);
  };
  std::size_t co = 0;
  for (; co + 8 <= c_out; co += 8) run.template operator()<8>(co);
  for (; co + 4 <= c_out; co += 4) run.template operator()<4>(co);
  for (; co < c_out; ++co) run.template operator()<1>(co);
}

ConvDims conv_dims(const Tensor& in, const Tensor& kernel, const Conv3dGeometry& geom) {
  if (in.ndim() != 4) fail(ErrorCode::Shape, "conv3d input must be C x T x H x W, got " + shape_str(in.shape()));
  if (kernel.ndim() != 5) fail(ErrorCode::Shape, "conv3d kernel must be Cout x Cin x kT x kH x kW, got " + shape_str(kernel.shape()));
  if (kernel.dim(1) != in.dim(0)) {
    fail(ErrorCode::Shape, "conv3d kernel expects " + std::to_string(kernel.dim(1)) + " input channels, input " +
                               shape_str(in.shape()) + " has " + std::to_string(in.dim(0)));
  }
  ConvDims d{};
  d.c_in = in.dim(0);
  d.t = in.dim(1);
  d.h = in.dim(2);
  d.w = in.dim(3);
  d.c_out = kernel.dim(0);
  d.kt = kernel.dim(2);
  d.kh = kernel.dim(3);
  d.kw = kernel.dim(4);
  d.geom = geom;
  const auto o = conv3d_output_dims({d.t, d.h, d.w}, {d.kt, d.kh, d.kw}, geom);
  d.to = o[0];
  d.ho = o[1];
  d.wo = o[2];
  return d;
}

PaddedVolume pad_input(const ConvDims& d, const double* in) {
  const auto& g = d.geom;
  const std::array<std::ptrdiff_t, 3> lead{static_cast<std::ptrdiff_t>(g.padding[0]),
                                          static_cast<std::ptrdiff_t>(g.padding[1]),
                                          static_cast<std::ptrdiff_t>(g.padding[2])};
  return make_padded(in, d.c_in, {d.t, d.h, d.w}, {1, 1, 1}, lead,
                     {d.t + 2 * g.padding[0], d.h + 2 * g.padding[1], d.w + 2 * g.padding[2]}, g.stride[2], d.wo,
                     d.kw);
}

// dL/dkernel[co, ci, tap] = sum over outputs of upstream * shifted input.
void kernel_grad(const ConvDims& d, const PaddedVolume& src, std::span<const double> up, std::span<double> gk,
                 double factor) {
  const auto& g = d.geom;
  const std::size_t taps = d.taps();
  const std::size_t wo8 = round_up(d.wo, kLanes);
  const std::size_t plane = d.plane();
  // Upstream rows zero-padded to whole lane chunks.
  std::vector<double> dz(d.c_out * d.to * d.ho * wo8, 0.0);
  for (std::size_t co = 0; co < d.c_out; ++co) {
    for (std::size_t r = 0; r < d.to * d.ho; ++r) {
      const double* s = up.data() + co * d.to * plane + r * d.wo;
      std::copy(s, s + d.wo, dz.data() + (co * d.to * d.ho + r) * wo8);
    }
  }
  std::vector<Lanes> acc;
  const std::vector<std::size_t> koff = src.column_offsets(d.kw);
  auto run = [&]<std::size_t CB>(std::size_t co0) {
    for (std::size_t ci = 0; ci < d.c_in; ++ci) {
      acc.assign(CB * taps, Lanes{});
      for (std::size_t to = 0; to < d.to; ++to) {
        for (std::size_t oh = 0; oh < d.ho; ++oh) {
          const double* drow[CB];
          for (std::size_t b = 0; b < CB; ++b) drow[b] = dz.data() + (((co0 + b) * d.to + to) * d.ho + oh) * wo8;
          std::size_t tap = 0;
          for (std::size_t kt = 0; kt < d.kt; ++kt) {
            for (std::size_t kh = 0; kh < d.kh; ++kh) {
              const double* r = src.row(ci, to * g.stride[0] + kt, oh * g.stride[1] + kh);
              for (std::size_t kw = 0; kw < d.kw; ++kw, ++tap) {
                Lanes a[CB];
                for (std::size_t b = 0; b < CB; ++b) a[b] = acc[b * taps + tap];
                for (std::size_t ow0 = 0; ow0 < wo8; ow0 += kLanes) {
                  const Lanes rv = load_lanes(r + koff[kw] + ow0);
                  for (std::size_t b = 0; b < CB; ++b) a[b] += load_lanes(drow[b] + ow0) * rv;
                }
                for (std::size_t b = 0; b < CB; ++b) acc[b * taps + tap] = a[b];
              }
            }
          }
        }
      }
      for (std::size_t b = 0; b < CB; ++b) {
        double* out = gk.data() + ((co0 + b) * d.c_in + ci) * taps;
        for (std::size_t tap = 0; tap < taps; ++tap) {
          double s = 0.0;
          for (std::size_t j = 0; j < kLanes; ++j) s += acc[b * taps + tap][j];
          out[tap] += factor * s;
        }
      }
    }
  };
  std::size_t co = 0;
  for (; co + 4 <= d.c_out; co += 4) run.template operator()<4>(co);
  for (; co < d.c_out; ++co) run.template operator()<1>(co);
}

// dL/dinput is a stride-1 correlation of the dilated, padded upstream with
// the spatially flipped, channel-transposed kernel.
void input_grad(const ConvDims& d, const double* kernel, std::span<const double> up, std::span<double> gin) {
  const auto& g = d.geom;
  const std::array<std::size_t, 3> k{d.kt, d.kh, d.kw};
  std::array<std::ptrdiff_t, 3> lead{};
  for (std::size_t a = 0; a < 3; ++a) {
    lead[a] = static_cast<std::ptrdiff_t>(k[a]) - 1 - static_cast<std::ptrdiff_t>(g.padding[a]);
  }
  const std::array<std::size_t, 3> extent{d.t + d.kt - 1, d.h + d.kh - 1, d.w + d.kw - 1};
  const PaddedVolume z = make_padded(up.data(), d.c_out, {d.to, d.ho, d.wo}, g.stride, lead, extent, 1, d.w, d.kw);
  const std::size_t taps = d.taps();
  correlate(z, d.c_in, d.c_out, k, {1, 1, 1}, {d.t, d.h, d.w}, gin.data(), true,
            [&](std::size_t ci, std::size_t co, std::size_t tap) {
              return kernel[(co * d.c_in + ci) * taps + (taps - 1 - tap)];
            });
}

Var conv3d_impl(Var input, Var kernel, const Var* bias, const Conv3dGeometry& geom) {
  Tape& tape = same_tape(input, kernel);
  const Tensor& iv = input.value();
  const Tensor& kv = kernel.value();
  const ConvDims d = conv_dims(iv, kv, geom);
  if (bias) {
    same_tape(input, *bias);
    if (bias->value().ndim() != 1 || bias->value().dim(0) != d.c_out) {
      fail(ErrorCode::Shape, "conv3d bias shape " + shape_str(bias->value().shape()) + " does not match " +
                                 std::to_string(d.c_out) + " output channels");
    }
  }
  const std::size_t taps = d.taps();
  Tensor out({d.c_out, d.to, d.ho, d.wo});
  {
    const PaddedVolume src = pad_input(d, iv.data());
    const double* kd = kv.data();
    correlate(src, d.c_out, d.c_in, {d.kt, d.kh, d.kw}, geom.stride, {d.to, d.ho, d.wo}, out.data(), false,
              [&](std::size_t co, std::size_t ci, std::size_t tap) { return kd[(co * d.c_in + ci) * taps + tap]; });
  }
  if (bias) {
    const auto bv = bias->value().values();
    const std::size_t vol = d.to * d.plane();
    for (std::size_t c = 0; c < d.c_out; ++c) {
      double* p = out.data() + c * vol;
      for (std::size_t i = 0; i < vol; ++i) p[i] += bv[c];
    }
  }

  auto backward = [d, has_bias = bias != nullptr](Tape& t, std::size_t self, std::span<const double> up) {
    const Tensor& iv = t.value(t.input_id(self, 0));
    const Tensor& kv = t.value(t.input_id(self, 1));
    auto gin = t.input_grad(self, 0);
    auto gk = t.input_grad(self, 1);
    if (has_bias) {
      if (auto gb = t.input_grad(self, 2); !gb.empty()) {
        const std::size_t vol = d.to * d.plane();
        for (std::size_t c = 0; c < d.c_out; ++c) {
          const double* p = up.data() + c * vol;
          double s = 0.0;
          for (std::size_t i = 0; i < vol; ++i) s += p[i];
          gb[c] += s;
        }
      }
    }
    if (!gk.empty()) kernel_grad(d, pad_input(d, iv.data()), up, gk, t.corrupt_backward() ? 2.0 : 1.0);
    if (!gin.empty()) input_grad(d, kv.data(), up, gin);
  };
  if (bias) return tape.record(std::move(out), {input, kernel, *bias}, std::move(backward));
  return tape.record(std::move(out), {input, kernel}, std::move(backward));
}

}  // namespace

Var conv3d(Var input, Var kernel, const Conv3dGeometry& geom) { return conv3d_impl(input, kernel, nullptr, geom); }

Var conv3d(Var input, Var kernel, Var bias, const Conv3dGeometry& geom) {
  return conv3d_impl(input, kernel, &bias, geom);
}

Var channel_affine(Var x, Var gamma, Var beta) {
  Tape& tape = same_tape(x, gamma);
  same_tape(x, beta);
  const Tensor& xv = x.value();
  const std::size_t c = xv.dim(0);
  if (gamma.value().shape() != Shape{c} || beta.value().shape() != Shape{c}) {
    fail(ErrorCode::Shape, "channel_affine expects gamma/beta of length " + std::to_string(c));
  }
  const std::size_t vol = xv.numel() / c;
  Tensor out(xv.shape());
  const auto gv = gamma.value().values();
  const auto bv = beta.value().values();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < vol; ++i) out[ch * vol + i] = gv[ch] * xv[ch * vol + i] + bv[ch];
  }
  return tape.record(std::move(out), {x, gamma, beta}, [c, vol](Tape& t, std::size_t self, std::span<const double> up) {
    const Tensor& xv = t.value(t.input_id(self, 0));
    const Tensor& gv = t.value(t.input_id(self, 1));
    auto gx = t.input_grad(self, 0);
    auto gg = t.input_grad(self, 1);
    auto gb = t.input_grad(self, 2);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double sg = 0.0, sb = 0.0;
      for (std::size_t i = 0; i < vol; ++i) {
        const std::size_t j = ch * vol + i;
        if (!gx.empty()) gx[j] += gv[ch] * up[j];
        sg += xv[j] * up[j];
        sb += up[j];
      }
      if (!gg.empty()) gg[ch] += sg;
      if (!gb.empty()) gb[ch] += sb;
    }
  });
}

}  // namespace ops
}  // namespace mergcn
