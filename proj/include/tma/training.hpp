#pragma once

// Caption NLL, gradient clipping, Adam and Adadelta, regularization and the
// early-stopped training loop with validation BLEU-4 model selection.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tma/data.hpp"
#include "tma/decoding.hpp"
#include "tma/metrics.hpp"
#include "tma/model.hpp"
#include "tma/random.hpp"

namespace tma {

class TrainingDivergence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class OptimizerKind { Adadelta, Adam };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::Adam ? "adam" : "adadelta"; }

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::Adam;
  if (s == "adadelta") return OptimizerKind::Adadelta;
  throw ConfigError("unknown optimizer '" + s + "' (expected adam or adadelta)");
}

struct TrainingConfig {
  OptimizerKind optimizer = OptimizerKind::Adam;
  double adadelta_lr = 1.0;
  double adadelta_rho = 0.95;
  double adadelta_eps = 1e-6;
  double adam_lr = 0.001;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double adam_decay_per_epoch = 0.995;
  double clip_norm = 10.0;
  double dropout_p = 0.5;
  double weight_decay = 1e-4;
  double noise_sigma = 1e-2;
  std::size_t batch_size = 64;
  std::size_t patience = 20;
  std::size_t eval_every_updates = 50;
  std::size_t max_epochs = 100;
  std::size_t max_updates = 0;  // 0: no limit
  std::size_t max_caption_length = 30;  // training targets, EOS included
  std::size_t val_beam_size = 10;
  std::size_t val_max_length = 30;
  Split validation_split = Split::Val;
  std::uint64_t seed = 1;

  void validate() const {
    auto positive = [](double v, const char* what) {
      if (!(v > 0.0)) throw ConfigError(std::string(what) + " must be positive");
    };
    positive(adadelta_lr, "adadelta_lr");
    positive(adam_lr, "adam_lr");
    positive(adam_decay_per_epoch, "adam_decay_per_epoch");
    positive(clip_norm, "clip_norm");
    positive(adadelta_eps, "adadelta_eps");
    positive(adam_eps, "adam_eps");
    if (!(adadelta_rho > 0.0 && adadelta_rho < 1.0)) throw ConfigError("adadelta_rho must lie in (0, 1)");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
      throw ConfigError("adam betas must lie in [0, 1)");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("dropout_p must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be non-negative");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (eval_every_updates == 0) throw ConfigError("eval_every_updates must be positive");
    if (max_caption_length < 1) throw ConfigError("max_caption_length must be positive");
    if (val_beam_size == 0 || val_max_length == 0) throw ConfigError("validation beam settings must be positive");
  }
};

// ---- loss ---------------------------------------------------------------

struct NllResult {
  double loss = 0.0;
  std::size_t clamped = 0;  // target probabilities clamped at 1e-12
};

/// -sum_t log p_t[target_t], probabilities clamped below at 1e-12.
inline NllResult nll_loss(const std::vector<std::vector<double>>& per_step,
                          std::span<const std::size_t> target) {
  if (per_step.size() != target.size())
    throw std::invalid_argument("nll_loss: " + std::to_string(per_step.size()) +
                                " distributions for " + std::to_string(target.size()) + " targets");
  NllResult r;
  for (std::size_t t = 0; t < target.size(); ++t) {
    if (target[t] >= per_step[t].size()) throw std::out_of_range("nll_loss: target outside distribution");
    double p = per_step[t][target[t]];
    if (!(p >= 1e-12)) {
      p = 1e-12;
      ++r.clamped;
    }
    r.loss -= std::log(p);
  }
  return r;
}

// ---- gradients ----------------------------------------------------------

inline double global_norm(const GradientSet& g) {
  double s = 0.0;
  for (const auto& [name, t] : g) s += squared_norm(t);
  return std::sqrt(s);
}

/// Scales every gradient by max_norm / n when the global L2 norm n exceeds
/// max_norm. Returns n.
inline double clip_gradients(GradientSet& g, double max_norm = 10.0) {
  const double n = global_norm(g);
  if (n > max_norm && n > 0.0) {
    const double s = max_norm / n;
    for (auto& [name, t] : g) t *= s;
  }
  return n;
}

/// Trainable non-recurrent weight matrices (weight decay and noise targets).
inline std::vector<std::string> decayed_parameters(const ModelParams& p) {
  std::vector<std::string> out;
  for (const auto& name : p.trainable_names())
    if (param_kind(name) == ParamKind::Weight) out.push_back(name);
  return out;
}

/// wd * sum ||W||^2 over the decayed parameters.
inline double weight_decay_penalty(const ModelParams& p, double wd) {
  if (wd == 0.0) return 0.0;
  double s = 0.0;
  for (const auto& name : decayed_parameters(p)) s += squared_norm(p.at(name));
  return wd * s;
}

/// Adds d(penalty)/dW = 2 wd W to `g`.
inline void add_weight_decay_gradient(const ModelParams& p, double wd, GradientSet& g) {
  if (wd == 0.0) return;
  for (const auto& name : decayed_parameters(p)) {
    const Tensor& w = p.at(name);
    auto it = g.find(name);
    if (it == g.end()) it = g.emplace(name, Tensor::zeros(w.shape())).first;
    for (std::size_t i = 0; i < w.size(); ++i) it->second[i] += 2.0 * wd * w[i];
  }
}

// ---- optimizers ---------------------------------------------------------

struct OptimizerState {
  std::map<std::string, Tensor> first;   // Adam m / Adadelta E[g^2]
  std::map<std::string, Tensor> second;  // Adam v / Adadelta E[dx^2]
  std::size_t step = 0;

  Tensor& slot(std::map<std::string, Tensor>& m, const std::string& name, const Tensor& like) {
    auto it = m.find(name);
    if (it == m.end()) it = m.emplace(name, Tensor::zeros(like.shape())).first;
    it->second.check_same_shape(like);
    return it->second;
  }
};

/// Adam with bias correction; `lr` is the current (decayed) rate.
inline void adam_step(ModelParams& params, const GradientSet& g, OptimizerState& st,
                      const TrainingConfig& cfg, double lr) {
  ++st.step;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  for (const auto& [name, grad] : g) {
    if (params.frozen.count(name)) continue;
    Tensor& w = params.at(name);
    grad.check_same_shape(w);
    Tensor& m = st.slot(st.first, name, w);
    Tensor& v = st.slot(st.second, name, w);
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
      v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.adam_eps);
    }
  }
}

/// Adadelta: E[g^2] <- rho E[g^2] + (1-rho) g^2;
/// dx = -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) g;
/// E[dx^2] <- rho E[dx^2] + (1-rho) dx^2; w += lr dx.
inline void adadelta_step(ModelParams& params, const GradientSet& g, OptimizerState& st,
                          const TrainingConfig& cfg) {
  ++st.step;
  const double rho = cfg.adadelta_rho, eps = cfg.adadelta_eps;
  for (const auto& [name, grad] : g) {
    if (params.frozen.count(name)) continue;
    Tensor& w = params.at(name);
    grad.check_same_shape(w);
    Tensor& eg = st.slot(st.first, name, w);
    Tensor& ex = st.slot(st.second, name, w);
    for (std::size_t i = 0; i < w.size(); ++i) {
      eg[i] = rho * eg[i] + (1.0 - rho) * grad[i] * grad[i];
      const double dx = -std::sqrt(ex[i] + eps) / std::sqrt(eg[i] + eps) * grad[i];
      ex[i] = rho * ex[i] + (1.0 - rho) * dx * dx;
      w[i] += cfg.adadelta_lr * dx;
    }
  }
}

/// Adam learning rate after `epochs` completed epochs.
inline double adam_learning_rate(const TrainingConfig& cfg, std::size_t epochs) {
  return cfg.adam_lr * std::pow(cfg.adam_decay_per_epoch, static_cast<double>(epochs));
}

/// One draw of Gaussian noise for every decayed weight.
inline std::map<std::string, Tensor> sample_weight_noise(const ModelParams& p, double sigma, Rng& rng) {
  std::map<std::string, Tensor> out;
  if (sigma <= 0.0) return out;
  std::normal_distribution<double> n(0.0, sigma);
  for (const auto& name : decayed_parameters(p)) {
    Tensor t(p.at(name).shape());
    for (double& x : t.data()) x = n(rng);
    out.emplace(name, std::move(t));
  }
  return out;
}

// ---- samples ------------------------------------------------------------

/// Target ids with EOS, truncated to `max_length` tokens including EOS.
inline std::vector<std::size_t> make_target(const std::vector<std::size_t>& caption,
                                            std::size_t max_length) {
  std::vector<std::size_t> t(caption.begin(),
                             caption.begin() + static_cast<std::ptrdiff_t>(
                                                   std::min(caption.size(), max_length - 1)));
  t.push_back(kEos);
  return t;
}

/// Model inputs of a linked sample. `prev_caption_ref` picks which reference
/// of the previous event feeds the caption stream.
inline PreviousEventInput sample_previous(const Corpus& c, Variant v, const LinkedSample& s,
                                          std::size_t prev_caption_ref) {
  const PreparedDay& day = c.days[s.day];
  const std::vector<std::size_t>* cap = nullptr;
  if (s.previous) {
    const auto& refs = day.events[*s.previous].caption_ids;
    cap = &refs[prev_caption_ref % refs.size()];
  }
  return previous_input(v, day, s.event, c.feature_dim, cap);
}

/// Caption NLL of one sample plus its gradient, scaled by `weight`.
inline double sample_loss_and_gradient(const ModelParams& params, const Tensor& frames,
                                       const PreviousEventInput& prev,
                                       const std::vector<std::size_t>& target, Mode mode,
                                       Regularization reg, double weight, GradientSet& acc) {
  Tape tape;
  ForwardPass fp(params, tape, mode, reg);
  EncodedInputs in = encode_inputs(fp, frames, prev);
  Var nll = scale(caption_logprob(fp, in, target), -1.0);
  const double value = nll.value()[0];
  GradientSet g = trainable_gradients(params, tape, scale(nll, weight));
  for (auto& [name, t] : g) {
    auto it = acc.find(name);
    if (it == acc.end())
      acc.emplace(name, std::move(t));
    else
      it->second += t;
  }
  return value;
}

// ---- evaluation ---------------------------------------------------------

/// Decodes every day of a split and pairs outputs with their references.
/// `chained` feeds generated previous captions; otherwise ground truth.
inline EvalCorpus decode_split(const ModelParams& params, const Vocabulary& vocab, const Corpus& c,
                               Split split, const DecodeConfig& dc, bool chained,
                               std::vector<EventCaption>* captions = nullptr) {
  EvalCorpus corpus;
  for (const PreparedDay& day : c.days) {
    if (day.split != split) continue;
    auto caps = chained ? caption_day(params, vocab, day, dc) : caption_day_teacher(params, vocab, day, dc);
    for (std::size_t s = 0; s < caps.size(); ++s) {
      corpus.push_back({caps[s].event_id, caps[s].words, day.events[s].references});
      if (captions) captions->push_back(caps[s]);
    }
  }
  return corpus;
}

/// Mean eval-mode caption NLL over a split (no regularization).
inline double mean_eval_loss(const ModelParams& params, const Corpus& c, Split split,
                             std::size_t max_caption_length = 30) {
  double total = 0.0;
  std::size_t n = 0;
  for (const LinkedSample& s : c.samples(split)) {
    const auto& ev = c.days[s.day].events[s.event];
    const auto target = make_target(ev.caption_ids[s.caption], max_caption_length);
    const auto prev = sample_previous(c, params.variant, s, 0);
    total -= forward_logprob(ev.frames, prev, target, params).total;
    ++n;
  }
  if (n == 0) throw std::invalid_argument("mean_eval_loss: split has no samples");
  return total / static_cast<double>(n);
}

// ---- training loop ------------------------------------------------------

struct HistoryEntry {
  std::size_t update = 0;
  std::size_t epoch = 0;
  double train_loss = 0.0;  // mean batch loss since the previous check
  double val_bleu4 = 0.0;
  double best_so_far = 0.0;
};

/// One JSON line with every double printed exactly.
inline std::string history_json(const HistoryEntry& h) {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "{\"update\": %zu, \"epoch\": %zu, \"train_loss\": %.17g, \"val_bleu4\": %.17g, "
                "\"best_so_far\": %.17g}",
                h.update, h.epoch, h.train_loss, h.val_bleu4, h.best_so_far);
  return buf;
}

struct TrainResult {
  ModelParams best;
  ModelParams last;  // weights after the final update
  std::vector<HistoryEntry> history;
  std::size_t updates = 0;
  std::size_t epochs = 0;
  std::string stop_reason;
};

/// Mini-batch training with validation BLEU-4 checks every
/// eval_every_updates updates (and once at the end if the last updates were
/// unchecked). Stops after `patience` consecutive non-improving checks, or
/// at max_epochs / max_updates. Returns the best-scoring weights.
inline TrainResult train_loop(const Corpus& corpus, const Vocabulary& vocab, Variant variant,
                              const ModelDims& dims, const TrainingConfig& cfg,
                              std::ostream* history_out = nullptr) {
  cfg.validate();
  if (dims.feature_dim != corpus.feature_dim)
    throw ConfigError("model feature_dim " + std::to_string(dims.feature_dim) +
                      " does not match corpus " + std::to_string(corpus.feature_dim));
  const auto samples = corpus.samples(Split::Train);
  if (samples.empty()) throw ConfigError("train_loop: training split is empty");
  if (corpus.day_count(cfg.validation_split) == 0)
    throw ConfigError("train_loop: validation split is empty");

  ModelParams params = build_model(variant, dims, vocab.size(), cfg.seed);
  Rng shuffle_rng = make_rng(cfg.seed, "shuffle");
  Rng dropout_rng = make_rng(cfg.seed, "dropout");
  Rng noise_rng = make_rng(cfg.seed, "noise");
  OptimizerState opt;
  const DecodeConfig dc{cfg.val_beam_size, cfg.val_max_length, false};

  TrainResult r;
  r.best = params;
  double best = -std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  double loss_sum = 0.0;
  std::size_t loss_batches = 0;
  bool stop = false;

  auto check = [&](std::size_t epoch) {
    const EvalCorpus ev = decode_split(params, vocab, corpus, cfg.validation_split, dc, false);
    const double bleu = bleu4(ev);
    if (bleu > best) {
      best = bleu;
      r.best = params;
      stale = 0;
    } else {
      ++stale;
    }
    HistoryEntry h{r.updates, epoch, loss_batches ? loss_sum / static_cast<double>(loss_batches) : 0.0,
                   bleu, best};
    r.history.push_back(h);
    if (history_out) *history_out << history_json(h) << '\n' << std::flush;
    loss_sum = 0.0;
    loss_batches = 0;
    if (stale > cfg.patience && !stop) {
      stop = true;
      r.stop_reason = "patience";
    }
  };

  std::vector<std::size_t> order(samples.size());
  std::vector<std::size_t> prev_ref(samples.size());
  for (std::size_t epoch = 0; epoch < cfg.max_epochs && !stop; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t i = 0; i < samples.size(); ++i) prev_ref[i] = shuffle_rng();
    const double lr = adam_learning_rate(cfg, epoch);

    for (std::size_t b0 = 0; b0 < order.size() && !stop; b0 += cfg.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
      const double weight = 1.0 / static_cast<double>(b1 - b0);
      const auto noise = sample_weight_noise(params, cfg.noise_sigma, noise_rng);
      Regularization reg{cfg.dropout_p, cfg.noise_sigma, &dropout_rng, &noise_rng, &noise};
      GradientSet grads;
      double batch_loss = 0.0;
      for (std::size_t k = b0; k < b1; ++k) {
        const LinkedSample& s = samples[order[k]];
        const auto& ev = corpus.days[s.day].events[s.event];
        const auto target = make_target(ev.caption_ids[s.caption], cfg.max_caption_length);
        const auto prev = sample_previous(corpus, variant, s, prev_ref[order[k]]);
        batch_loss += weight * sample_loss_and_gradient(params, ev.frames, prev, target, Mode::Train,
                                                        reg, weight, grads);
      }
      batch_loss += weight_decay_penalty(params, cfg.weight_decay);
      if (!std::isfinite(batch_loss))
        throw TrainingDivergence("training diverged: loss " + std::to_string(batch_loss) +
                                 " at update " + std::to_string(r.updates + 1) + ", epoch " +
                                 std::to_string(epoch));
      add_weight_decay_gradient(params, cfg.weight_decay, grads);
      clip_gradients(grads, cfg.clip_norm);
      if (cfg.optimizer == OptimizerKind::Adam)
        adam_step(params, grads, opt, cfg, lr);
      else
        adadelta_step(params, grads, opt, cfg);
      ++r.updates;
      loss_sum += batch_loss;
      ++loss_batches;
      if (r.updates % cfg.eval_every_updates == 0) check(epoch);
      if (!stop && cfg.max_updates && r.updates >= cfg.max_updates) {
        stop = true;
        r.stop_reason = "max_updates";
      }
    }
    r.epochs = epoch + 1;
  }
  if (r.stop_reason.empty()) r.stop_reason = "max_epochs";
  if (r.stop_reason != "patience" && loss_batches > 0) check(r.epochs ? r.epochs - 1 : 0);
  r.last = std::move(params);
  return r;
}

}  // namespace tma
