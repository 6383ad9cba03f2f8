#pragma once

// Central finite-difference verification of taped gradients.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "tma/autodiff.hpp"
#include "tma/model.hpp"
#include "tma/random.hpp"

namespace tma {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  /// Worst error per layer group (see layer_group).
  std::map<std::string, double> per_layer;
};

/// Layer a parameter belongs to: "embedding", "enc.cur.fwd", "att.cur",
/// "dec", "init" or "out".
inline std::string layer_group(const std::string& name) {
  const auto last = name.rfind('.');
  return last == std::string::npos ? name : name.substr(0, last);
}

/// |a - n| / max(|a|, |n|, 1e-8)
inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

/// Builds a scalar loss on the given tape from the parameter map. Must be a
/// deterministic function of the parameter values.
template <class T>
using BasicGraphLoss =
    std::function<BasicVar<T>(BasicTape<T>&, const std::map<std::string, BasicTensor<T>>&)>;
using GraphLoss = BasicGraphLoss<double>;

/// Compares taped gradients with (L(x+eps) - L(x-eps)) / 2eps. Sweeps every
/// coordinate when the trainable count is below `full_sweep_limit`,
/// otherwise `full_sweep_limit` coordinates sampled with `seed`.
template <std::floating_point T>
GradCheckResult check_gradients(std::map<std::string, BasicTensor<T>>& params,
                                const std::set<std::string>& frozen,
                                const BasicGraphLoss<T>& loss, double eps,
                                std::uint64_t seed = 0,
                                std::size_t full_sweep_limit = 10000) {
  if (!(eps > 0.0 && eps <= 1e-2))
    throw std::invalid_argument("finite_diff_check: epsilon must lie in (0, 1e-2]");

  BasicGradientSet<T> analytic;
  {
    BasicTape<T> tape;
    BasicVar<T> l = loss(tape, params);
    analytic = tape.backward(l);
  }
  auto eval = [&] {
    BasicTape<T> tape(false);
    return loss(tape, params).value()[0];
  };

  std::vector<std::pair<std::string, std::size_t>> coords;
  for (const auto& [name, t] : params) {
    if (frozen.count(name)) continue;
    for (std::size_t i = 0; i < t.size(); ++i) coords.emplace_back(name, i);
  }
  if (coords.size() > full_sweep_limit) {
    Rng rng = make_rng(seed, "gradcheck");
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(full_sweep_limit);
  }

  const T h = static_cast<T>(eps);
  GradCheckResult r;
  r.coordinates = coords.size();
  for (const auto& [name, i] : coords) {
    BasicTensor<T>& t = params.at(name);
    const T orig = t[i];
    t[i] = orig + h;
    const T up = eval();
    t[i] = orig - h;
    const T down = eval();
    t[i] = orig;
    const double numeric = static_cast<double>((up - down) / (T(2) * h));
    auto it = analytic.find(name);
    const double a = it == analytic.end() ? 0.0 : static_cast<double>(it->second[i]);
    const double err = relative_error(a, numeric);
    double& layer = r.per_layer[layer_group(name)];
    layer = std::max(layer, err);
    if (r.worst_parameter.empty() || err > r.max_relative_error) {
      r.max_relative_error = err;
      r.worst_parameter = name;
      r.worst_index = i;
      r.worst_analytic = a;
      r.worst_numeric = numeric;
    }
  }
  return r;
}

/// A tiny deterministic model plus one training sample.
struct GradCheckConfig {
  Variant variant = Variant::PrevVideoCaption;
  ModelDims dims{.feature_dim = 5, .embed = 8, .encoder = 8, .decoder = 8,
                 .align = 8, .output = 8};
  std::size_t vocab_size = 12;
  std::size_t max_frames = 4;
  std::size_t target_length = 4;  // including EOS
  std::set<std::string> frozen;
  /// Check the train-mode graph (dropout masks and weight noise replayed
  /// from fixed seeds) instead of the eval graph.
  bool train_mode = false;
  double dropout_p = 0.5;
  double noise_sigma = 1e-2;
};

struct GradCheckSample {
  Tensor current;
  PreviousEventInput previous;
  std::vector<std::size_t> target;
};

inline GradCheckSample make_gradcheck_sample(const GradCheckConfig& cfg, std::uint64_t seed) {
  Rng rng = make_rng(seed, "gradcheck-sample");
  std::uniform_int_distribution<std::size_t> frames(1, std::max<std::size_t>(1, cfg.max_frames));
  std::normal_distribution<double> feat(0.0, 1.0);
  auto random_frames = [&] {
    const std::size_t J = frames(rng);
    Tensor t(Shape{J, cfg.dims.feature_dim});
    for (double& v : t.data()) v = feat(rng);
    return t;
  };
  const std::size_t first_word = std::min(kReservedTokens, cfg.vocab_size - 1);
  std::uniform_int_distribution<std::size_t> word(first_word, cfg.vocab_size - 1);
  GradCheckSample s;
  s.current = random_frames();
  if (uses_previous_video(cfg.variant)) s.previous.frames = random_frames();
  if (uses_previous_caption(cfg.variant)) {
    std::vector<std::size_t> cap(1 + rng() % 3);
    for (auto& tok : cap) tok = word(rng);
    s.previous.caption = cap;
  }
  for (std::size_t t = 0; t + 1 < cfg.target_length; ++t) s.target.push_back(word(rng));
  s.target.push_back(kEos);
  return s;
}

/// Scalar type used for both the taped and the finite-difference gradients.
/// Extended (long double) lowers the finite-difference round-off floor,
/// which dominates the error of coordinates with gradients below ~1e-6.
enum class Precision { Double, Extended };

namespace detail {

template <std::floating_point T>
GradCheckResult finite_diff_check_as(const GradCheckConfig& cfg, std::uint64_t seed,
                                     double eps) {
  ModelParams base = build_model(cfg.variant, cfg.dims, cfg.vocab_size, seed);
  BasicModelParams<T> model = base.template cast<T>();
  model.frozen = cfg.frozen;
  const GradCheckSample sample = make_gradcheck_sample(cfg, seed);
  // The tensors are perturbed in place, so the loss reads them through `model`.
  BasicGraphLoss<T> loss = [&](BasicTape<T>& tape,
                               const std::map<std::string, BasicTensor<T>>&) {
    Rng dropout_rng = make_rng(seed, "dropout");
    Rng noise_rng = make_rng(seed, "noise");
    Regularization reg;
    if (cfg.train_mode) reg = {cfg.dropout_p, cfg.noise_sigma, &dropout_rng, &noise_rng};
    ForwardPass<T> fp(model, tape, cfg.train_mode ? Mode::Train : Mode::Eval, reg);
    BasicEncodedInputs<T> in = encode_inputs(fp, sample.current, sample.previous);
    return scale(caption_logprob(fp, in, sample.target), T(-1));
  };
  return check_gradients(model.tensors, model.frozen, loss, eps, seed);
}

}  // namespace detail

/// Builds the configured model from `seed` and returns the worst relative
/// error between taped and finite-difference gradients of the caption NLL.
inline GradCheckResult finite_diff_check(const GradCheckConfig& cfg, std::uint64_t seed,
                                         double eps, Precision precision = Precision::Double) {
  return precision == Precision::Double
             ? detail::finite_diff_check_as<double>(cfg, seed, eps)
             : detail::finite_diff_check_as<long double>(cfg, seed, eps);
}

}  // namespace tma
