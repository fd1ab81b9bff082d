#include "core/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

#include "core/error.hpp"

namespace mergcn {

namespace {

double evaluate(const LossClosure& fn, ActivationMasks* masks, ActivationMasks::Mode mode) {
  Tape tape;
  if (masks) {
    masks->start(mode);
    tape.set_activation_masks(masks);
  }
  const Var loss = fn(tape);
  if (loss.value().numel() != 1) {
    fail(ErrorCode::Shape, "grad_check closure must return a scalar, got " + shape_str(loss.shape()));
  }
  return loss.value().item();
}

}  // namespace

GradCheckReport grad_check(const LossClosure& loss_fn, std::span<Parameter* const> params,
                           const GradCheckOptions& opts) {
  if (!(opts.eps > 0.0)) fail(ErrorCode::InvalidArgument, "grad_check eps must be positive");

  for (Parameter* p : params) p->value.clear_grad();
  ActivationMasks masks;
  double base = 0.0;
  {
    Tape tape;
    tape.set_corrupt_backward(opts.corrupt_backward);
    masks.start(ActivationMasks::Mode::Record);
    tape.set_activation_masks(&masks);
    const Var loss = loss_fn(tape);
    base = loss.value().item();
    tape.backward(loss);
  }
  masks.mode = ActivationMasks::Mode::Off;

  const double again = evaluate(loss_fn, nullptr, ActivationMasks::Mode::Off);
  if (std::memcmp(&again, &base, sizeof(double)) != 0) {
    fail(ErrorCode::CheckFailed, "grad_check closure is not deterministic: " + std::to_string(base) + " vs " +
                                     std::to_string(again));
  }

  ActivationMasks* replay = opts.freeze_activation_pattern ? &masks : nullptr;
  const auto mode = opts.freeze_activation_pattern ? ActivationMasks::Mode::Replay : ActivationMasks::Mode::Off;

  GradCheckReport report;
  std::mt19937_64 rng(opts.seed);
  for (Parameter* p : params) {
    auto values = p->value.values();
    const std::vector<double> analytic(p->value.grad().begin(), p->value.grad().end());
    if (analytic.size() != values.size()) {
      fail(ErrorCode::CheckFailed, "parameter '" + p->name + "' received no gradient");
    }
    std::vector<std::size_t> coords;
    if (values.size() <= opts.samples_per_param) {
      for (std::size_t i = 0; i < values.size(); ++i) coords.push_back(i);
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, values.size() - 1);
      while (coords.size() < opts.samples_per_param) {
        const std::size_t i = pick(rng);
        if (std::find(coords.begin(), coords.end(), i) == coords.end()) coords.push_back(i);
      }
    }
    for (std::size_t i : coords) {
      const double saved = values[i];
      values[i] = saved + opts.eps;
      masks.crossings = 0;
      const double plus = evaluate(loss_fn, replay, mode);
      values[i] = saved - opts.eps;
      const double minus = evaluate(loss_fn, replay, mode);
      values[i] = saved;
      if (masks.crossings) ++report.kink_crossings;

      const double numeric = (plus - minus) / (2.0 * opts.eps);
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), opts.abs_floor});
      const double rel = std::abs(a - numeric) / denom;
      ++report.coordinates_checked;
      if (rel > report.max_rel_error || report.coordinates_checked == 1) {
        report.max_rel_error = rel;
        report.worst_param = p->name;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace mergcn
