#pragma once

// Temporally-linked multi-input attention captioner: variant definitions,
// named parameter store, deterministic initialization, encoders for the
// current and previous event, and the teacher-forced log-likelihood.

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tma/autodiff.hpp"
#include "tma/layers.hpp"
#include "tma/random.hpp"
#include "tma/special_tokens.hpp"
#include "tma/tensor.hpp"

namespace tma {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Variant { Baseline, PrevCaption, PrevVideo, PrevVideoCaption };

/// Attended input streams, always in this order.
enum class Stream { CurrentVideo, PreviousVideo, PreviousCaption };

inline const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v{Variant::Baseline, Variant::PrevCaption,
                                      Variant::PrevVideo, Variant::PrevVideoCaption};
  return v;
}

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::Baseline: return "baseline";
    case Variant::PrevCaption: return "prev-caption";
    case Variant::PrevVideo: return "prev-video";
    case Variant::PrevVideoCaption: return "prev-video-caption";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (Variant v : all_variants())
    if (to_string(v) == s) return v;
  throw ConfigError("unknown variant '" + s + "'");
}

inline std::string stream_key(Stream s) {
  switch (s) {
    case Stream::CurrentVideo: return "cur";
    case Stream::PreviousVideo: return "prev_video";
    case Stream::PreviousCaption: return "prev_caption";
  }
  return "?";
}

inline std::vector<Stream> streams(Variant v) {
  switch (v) {
    case Variant::Baseline: return {Stream::CurrentVideo};
    case Variant::PrevCaption: return {Stream::CurrentVideo, Stream::PreviousCaption};
    case Variant::PrevVideo: return {Stream::CurrentVideo, Stream::PreviousVideo};
    case Variant::PrevVideoCaption:
      return {Stream::CurrentVideo, Stream::PreviousVideo, Stream::PreviousCaption};
  }
  return {};
}

inline bool uses_previous_video(Variant v) {
  return v == Variant::PrevVideo || v == Variant::PrevVideoCaption;
}
inline bool uses_previous_caption(Variant v) {
  return v == Variant::PrevCaption || v == Variant::PrevVideoCaption;
}

struct ModelDims {
  std::size_t feature_dim = 1024;
  std::size_t embed = 301;
  std::size_t encoder = 717;  // per direction
  std::size_t decoder = 484;
  std::size_t align = 512;
  std::size_t output = 301;  // shared skip-connection width
  bool tanh_on_cell_output = false;

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

/// How a parameter is treated by initialization and regularization.
enum class ParamKind { Weight, Recurrent, Bias };

inline ParamKind param_kind(const std::string& name) {
  const auto dot = name.rfind('.');
  const std::string leaf = dot == std::string::npos ? name : name.substr(dot + 1);
  if (leaf.starts_with("b")) return ParamKind::Bias;
  const bool lstm = name.starts_with("enc.") || name.starts_with("dec.");
  if (lstm && leaf.starts_with("U_")) return ParamKind::Recurrent;
  return ParamKind::Weight;
}

template <std::floating_point T>
struct BasicModelParams {
  Variant variant = Variant::Baseline;
  ModelDims dims;
  std::size_t vocab_size = 0;
  std::map<std::string, BasicTensor<T>> tensors;  // sorted by name
  std::set<std::string> frozen;

  const BasicTensor<T>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::out_of_range("model: no parameter '" + name + "'");
    return it->second;
  }
  BasicTensor<T>& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::out_of_range("model: no parameter '" + name + "'");
    return it->second;
  }

  std::vector<std::string> trainable_names() const {
    std::vector<std::string> out;
    for (const auto& [name, t] : tensors)
      if (!frozen.count(name)) out.push_back(name);
    return out;
  }

  std::size_t parameter_count(bool trainable_only = true) const {
    std::size_t n = 0;
    for (const auto& [name, t] : tensors)
      if (!trainable_only || !frozen.count(name)) n += t.size();
    return n;
  }

  std::size_t annotation_dim(Stream s) const {
    return s == Stream::PreviousCaption ? 2 * dims.encoder
                                        : dims.feature_dim + 2 * dims.encoder;
  }

  std::size_t attention_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : tensors)
      if (name.starts_with("att.") && name.ends_with(".w")) ++n;
    return n;
  }

  CellOptions cell_options() const { return {dims.tanh_on_cell_output}; }

  /// Same model with every tensor converted to another scalar type.
  template <std::floating_point U>
  BasicModelParams<U> cast() const {
    BasicModelParams<U> m;
    m.variant = variant;
    m.dims = dims;
    m.vocab_size = vocab_size;
    m.frozen = frozen;
    for (const auto& [name, t] : tensors) m.tensors.emplace(name, t.template cast<U>());
    return m;
  }
};

using ModelParams = BasicModelParams<double>;

inline const std::array<std::string, 3> kContextLetters{"A", "B", "C"};

namespace detail {

struct ShapeEntry {
  std::string name;
  Shape shape;
};

inline void add_lstm_shapes(std::vector<ShapeEntry>& out, const std::string& prefix,
                            std::size_t input, std::size_t hidden) {
  for (const char* g : kGateNames) {
    out.push_back({prefix + ".W_" + g, {hidden, input}});
    out.push_back({prefix + ".U_" + g, {hidden, hidden}});
    out.push_back({prefix + ".b_" + g, {hidden}});
  }
}

inline std::vector<ShapeEntry> parameter_shapes(Variant variant, const ModelDims& d,
                                                std::size_t vocab) {
  std::vector<ShapeEntry> out;
  out.push_back({"embedding", {vocab, d.embed}});
  const std::vector<Stream> ss = streams(variant);
  for (Stream s : ss) {
    const std::string key = stream_key(s);
    const std::size_t input = s == Stream::PreviousCaption ? d.embed : d.feature_dim;
    add_lstm_shapes(out, "enc." + key + ".fwd", input, d.encoder);
    add_lstm_shapes(out, "enc." + key + ".bwd", input, d.encoder);
  }
  auto ann = [&](Stream s) {
    return s == Stream::PreviousCaption ? 2 * d.encoder : d.feature_dim + 2 * d.encoder;
  };
  for (Stream s : ss) {
    const std::string p = "att." + stream_key(s);
    out.push_back({p + ".w", {d.align}});
    out.push_back({p + ".W_a", {d.align, d.decoder}});
    out.push_back({p + ".U_a", {d.align, ann(s)}});
    out.push_back({p + ".b", {d.align}});
  }
  for (const char* g : kGateNames) {
    out.push_back({std::string("dec.W_") + g, {d.decoder, d.embed}});
    out.push_back({std::string("dec.U_") + g, {d.decoder, d.decoder}});
    out.push_back({std::string("dec.b_") + g, {d.decoder}});
    for (std::size_t k = 0; k < ss.size(); ++k)
      out.push_back({"dec." + kContextLetters[k] + "_" + g, {d.decoder, ann(ss[k])}});
  }
  const std::size_t cur = ann(Stream::CurrentVideo);
  out.push_back({"init.W_h", {d.decoder, cur}});
  out.push_back({"init.b_h", {d.decoder}});
  out.push_back({"init.W_c", {d.decoder, cur}});
  out.push_back({"init.b_c", {d.decoder}});
  out.push_back({"out.M_h", {d.output, d.decoder}});
  for (std::size_t k = 0; k < ss.size(); ++k)
    out.push_back({"out.M_z" + std::to_string(k), {d.output, ann(ss[k])}});
  out.push_back({"out.M_e", {d.output, d.embed}});
  out.push_back({"out.b", {d.output}});
  out.push_back({"out.U_p", {vocab, d.output}});
  out.push_back({"out.b_p", {vocab}});
  return out;
}

inline void glorot_uniform(Tensor& t, Rng& rng) {
  const double fan_out = static_cast<double>(t.rows());
  const double fan_in = static_cast<double>(t.rank() == 2 ? t.cols() : 1);
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> u(-limit, limit);
  for (double& v : t.data()) v = u(rng);
}

/// Rows of a Gaussian matrix orthonormalized by modified Gram-Schmidt.
inline void orthogonal(Tensor& t, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& v : t.data()) v = n(rng);
  const std::size_t R = t.rows(), C = t.cols();
  for (std::size_t i = 0; i < R; ++i) {
    auto ri = t.row(i);
    for (std::size_t k = 0; k < i && k < C; ++k) {
      auto rk = t.row(k);
      double d = 0.0;
      for (std::size_t c = 0; c < C; ++c) d += ri[c] * rk[c];
      for (std::size_t c = 0; c < C; ++c) ri[c] -= d * rk[c];
    }
    double norm = 0.0;
    for (double v : ri) norm += v * v;
    norm = std::sqrt(norm);
    if (norm > 0)
      for (double& v : ri) v /= norm;
  }
}

}  // namespace detail

inline ModelParams build_model(Variant variant, const ModelDims& dims,
                               std::size_t vocab_size, std::uint64_t seed) {
  if (vocab_size == 0) throw std::invalid_argument("build_model: vocabulary is empty");
  if (dims.feature_dim == 0 || dims.embed == 0 || dims.encoder == 0 ||
      dims.decoder == 0 || dims.align == 0 || dims.output == 0)
    throw std::invalid_argument("build_model: all dimensions must be positive");
  ModelParams m;
  m.variant = variant;
  m.dims = dims;
  m.vocab_size = vocab_size;
  for (auto& e : detail::parameter_shapes(variant, dims, vocab_size))
    m.tensors.emplace(e.name, Tensor::zeros(e.shape));
  Rng rng = make_rng(seed, "init");
  for (auto& [name, t] : m.tensors) {
    switch (param_kind(name)) {
      case ParamKind::Weight: detail::glorot_uniform(t, rng); break;
      case ParamKind::Recurrent: detail::orthogonal(t, rng); break;
      case ParamKind::Bias:
        if ((name.starts_with("enc.") || name.starts_with("dec.")) && name.ends_with(".b_f"))
          t.fill(1.0);
        break;
    }
  }
  return m;
}

/// Previous-event input: frames for video streams, tokens for the caption
/// stream. Exactly the streams of the variant must be present.
struct PreviousEventInput {
  std::optional<Tensor> frames;                    // J x feature_dim
  std::optional<std::vector<std::size_t>> caption;  // token ids, no BOS/EOS
};

/// Artificial empty event: one all-zero frame and/or the single PAD token.
inline PreviousEventInput make_empty_event(Variant variant, std::size_t feature_dim) {
  PreviousEventInput p;
  if (uses_previous_video(variant)) p.frames = Tensor::zeros(Shape{1, feature_dim});
  if (uses_previous_caption(variant)) p.caption = std::vector<std::size_t>{kPad};
  return p;
}

enum class Mode { Train, Eval };

/// Train-time perturbations. Null generators disable the corresponding one.
struct Regularization {
  double dropout_p = 0.0;
  double noise_sigma = 0.0;
  Rng* dropout_rng = nullptr;
  Rng* noise_rng = nullptr;
  /// Fixed weight noise by parameter name, used instead of sampling from
  /// noise_rng (one draw shared by every sample of a batch).
  const std::map<std::string, Tensor>* weight_noise = nullptr;
};

/// Binds a model's parameters onto a tape for one forward pass, applying
/// weight noise and dropout in train mode.
template <std::floating_point T>
class ForwardPass {
 public:
  ForwardPass(const BasicModelParams<T>& params, BasicTape<T>& tape, Mode mode = Mode::Eval,
              Regularization reg = {})
      : params_(params), tape_(tape), mode_(mode), reg_(reg) {}

  const BasicModelParams<T>& params() const { return params_; }
  BasicTape<T>& tape() { return tape_; }
  Mode mode() const { return mode_; }
  CellOptions cell() const { return params_.cell_options(); }

  BasicVar<T> param(const std::string& name) {
    if (auto it = bound_.find(name); it != bound_.end()) return it->second;
    const BasicTensor<T>& storage = params_.at(name);
    BasicVar<T> v = tape_.param(name, storage);
    if (training() && reg_.weight_noise) {
      if (auto it = reg_.weight_noise->find(name); it != reg_.weight_noise->end())
        v = add_const(v, it->second.template cast<T>());
    } else if (training() && reg_.noise_sigma > 0 && reg_.noise_rng &&
               param_kind(name) == ParamKind::Weight) {
      std::normal_distribution<double> n(0.0, reg_.noise_sigma);
      BasicTensor<T> noise(storage.shape());
      for (T& x : noise.data()) x = static_cast<T>(n(*reg_.noise_rng));
      v = add_const(v, noise);
    }
    bound_.emplace(name, v);
    return v;
  }

  /// Inverted dropout mask for a tensor of this shape, or nullopt.
  std::optional<BasicTensor<T>> dropout_mask(const Shape& shape) {
    if (!training() || reg_.dropout_p <= 0 || !reg_.dropout_rng) return std::nullopt;
    const double keep = 1.0 - reg_.dropout_p;
    std::bernoulli_distribution b(keep);
    BasicTensor<T> m(shape);
    for (T& x : m.data()) x = b(*reg_.dropout_rng) ? static_cast<T>(1.0 / keep) : T(0);
    return m;
  }

  BasicVar<T> dropout(BasicVar<T> x) {
    auto m = dropout_mask(x.value().shape());
    return m ? mul_const(x, std::move(*m)) : x;
  }

  BasicLstmParams<T> lstm(const std::string& prefix) {
    BasicLstmParams<T> p;
    for (std::size_t g = 0; g < 4; ++g) {
      p.W[g] = param(prefix + ".W_" + kGateNames[g]);
      p.U[g] = param(prefix + ".U_" + kGateNames[g]);
      p.b[g] = param(prefix + ".b_" + kGateNames[g]);
    }
    return p;
  }

  BasicAttentionParams<T> attention(Stream s) {
    const std::string p = "att." + stream_key(s);
    return {param(p + ".w"), param(p + ".W_a"), param(p + ".U_a"), param(p + ".b")};
  }

  const BasicMultiInputLstmParams<T>& decoder() {
    if (!decoder_) {
      BasicMultiInputLstmParams<T> p;
      const std::size_t n = streams(params_.variant).size();
      p.context.resize(n);
      for (std::size_t g = 0; g < 4; ++g) {
        p.W[g] = param(std::string("dec.W_") + kGateNames[g]);
        p.U[g] = param(std::string("dec.U_") + kGateNames[g]);
        p.b[g] = param(std::string("dec.b_") + kGateNames[g]);
        for (std::size_t k = 0; k < n; ++k)
          p.context[k][g] = param("dec." + kContextLetters[k] + "_" + kGateNames[g]);
      }
      decoder_ = std::move(p);
    }
    return *decoder_;
  }

  BasicInitStateParams<T> init_state() {
    return {param("init.W_h"), param("init.b_h"), param("init.W_c"), param("init.b_c")};
  }

  const BasicOutputLayerParams<T>& output() {
    if (!output_) {
      BasicOutputLayerParams<T> p;
      p.M_h = param("out.M_h");
      for (std::size_t k = 0; k < streams(params_.variant).size(); ++k)
        p.M_context.push_back(param("out.M_z" + std::to_string(k)));
      p.M_e = param("out.M_e");
      p.b = param("out.b");
      p.U_p = param("out.U_p");
      p.b_p = param("out.b_p");
      output_ = std::move(p);
    }
    return *output_;
  }

  BasicVar<T> embedding() { return param("embedding"); }

 private:
  bool training() const { return mode_ == Mode::Train; }

  const BasicModelParams<T>& params_;
  BasicTape<T>& tape_;
  Mode mode_;
  Regularization reg_;
  std::map<std::string, BasicVar<T>> bound_;
  std::optional<BasicMultiInputLstmParams<T>> decoder_;
  std::optional<BasicOutputLayerParams<T>> output_;
};

/// One encoded stream on a tape, with its attention projection cached.
template <class T>
struct BasicEncodedStream {
  Stream source;
  BasicVar<T> annotations;  // J x annotation_dim
  BasicPreparedAnnotations<T> prepared;
};

template <class T>
struct BasicEncodedInputs {
  std::vector<BasicEncodedStream<T>> streams;
  BasicLstmState<T> initial;
};

using EncodedStream = BasicEncodedStream<double>;
using EncodedInputs = BasicEncodedInputs<double>;

namespace detail {

template <class T>
std::vector<BasicVar<T>> frame_rows(BasicTape<T>& tape, const Tensor& frames,
                                    std::size_t feature_dim, const char* what) {
  if (frames.rank() != 2 || frames.rows() == 0)
    throw std::invalid_argument(std::string(what) + ": frame sequence is empty");
  if (frames.cols() != feature_dim)
    throw std::invalid_argument(std::string(what) + ": feature dim " +
                                std::to_string(frames.cols()) + " != model " +
                                std::to_string(feature_dim));
  std::vector<BasicVar<T>> rows;
  rows.reserve(frames.rows());
  for (std::size_t j = 0; j < frames.rows(); ++j) {
    auto r = frames.row(j);
    rows.push_back(tape.constant(BasicTensor<T>::vector(std::vector<T>(r.begin(), r.end()))));
  }
  return rows;
}

/// concat(x_j, forward_j, backward_j) for every frame.
template <class T>
BasicVar<T> encode_video(ForwardPass<T>& fp, const Tensor& frames, Stream s) {
  auto rows = frame_rows(fp.tape(), frames, fp.params().dims.feature_dim, "encode");
  const std::string key = "enc." + stream_key(s);
  BasicBlstmOutput<T> r = blstm_run(std::span<const BasicVar<T>>(rows), fp.lstm(key + ".fwd"),
                                    fp.lstm(key + ".bwd"), fp.cell());
  std::vector<BasicVar<T>> ann;
  ann.reserve(rows.size());
  for (std::size_t j = 0; j < rows.size(); ++j)
    ann.push_back(concat({rows[j], r.forward[j], r.backward[j]}));
  return stack_rows(ann);
}

template <class T>
BasicVar<T> encode_caption(ForwardPass<T>& fp, std::span<const std::size_t> tokens) {
  if (tokens.empty()) throw std::invalid_argument("encode: previous caption is empty");
  BasicVar<T> E = fp.embedding();
  std::vector<BasicVar<T>> embs;
  for (std::size_t tok : tokens) embs.push_back(embed(E, tok));
  const std::string key = "enc." + stream_key(Stream::PreviousCaption);
  return stack_rows(
      blstm_encode(embs, fp.lstm(key + ".fwd"), fp.lstm(key + ".bwd"), fp.cell()));
}

inline void check_previous(Variant v, const PreviousEventInput& prev) {
  if (prev.frames.has_value() != uses_previous_video(v) ||
      prev.caption.has_value() != uses_previous_caption(v))
    throw ConfigError("previous-event input does not match the streams of variant " +
                      to_string(v));
}

}  // namespace detail

template <class T>
BasicVar<T> encode_current(ForwardPass<T>& fp, const Tensor& frames) {
  return detail::encode_video(fp, frames, Stream::CurrentVideo);
}

/// Previous-event annotation matrices in stream order (0-2 entries).
template <class T>
std::vector<std::pair<Stream, BasicVar<T>>> encode_previous(ForwardPass<T>& fp,
                                                            const PreviousEventInput& prev) {
  const Variant v = fp.params().variant;
  detail::check_previous(v, prev);
  std::vector<std::pair<Stream, BasicVar<T>>> out;
  if (uses_previous_video(v))
    out.emplace_back(Stream::PreviousVideo,
                     detail::encode_video(fp, *prev.frames, Stream::PreviousVideo));
  if (uses_previous_caption(v))
    out.emplace_back(Stream::PreviousCaption, detail::encode_caption(fp, *prev.caption));
  return out;
}

/// Encodes every stream, prepares attention and the initial decoder state.
/// Dropout (train mode) applies to annotations entering attention.
template <class T>
BasicEncodedInputs<T> encode_inputs(ForwardPass<T>& fp, const Tensor& frames,
                                    const PreviousEventInput& prev) {
  BasicEncodedInputs<T> in;
  BasicVar<T> cur = encode_current(fp, frames);
  std::vector<std::pair<Stream, BasicVar<T>>> all{{Stream::CurrentVideo, cur}};
  for (auto& p : encode_previous(fp, prev)) all.push_back(p);
  for (auto& [s, ann] : all) {
    BasicVar<T> attended = fp.dropout(ann);
    in.streams.push_back({s, attended, prepare_attention(attended, fp.attention(s))});
  }
  in.initial = init_decoder_state(cur, fp.init_state());
  return in;
}

template <class T>
struct BasicDecoderStep {
  BasicLstmState<T> state;
  BasicVar<T> probs;
};
using DecoderStep = BasicDecoderStep<double>;

/// One decoding step: attend every stream with h_{t-1}, update the
/// multi-input cell, and produce the next-word distribution.
template <class T>
BasicDecoderStep<T> decoder_step(ForwardPass<T>& fp, const BasicEncodedInputs<T>& in,
                                 const BasicLstmState<T>& prev, std::size_t prev_token) {
  BasicVar<T> emb = embed(fp.embedding(), prev_token);
  std::vector<BasicVar<T>> contexts;
  contexts.reserve(in.streams.size());
  for (const BasicEncodedStream<T>& s : in.streams)
    contexts.push_back(attend(s.prepared, prev.h, fp.attention(s.source)).z);
  BasicLstmState<T> next = multi_input_lstm_step(emb, prev, contexts, fp.decoder(), fp.cell());
  auto mask = fp.dropout_mask(Shape{fp.params().dims.output});
  BasicVar<T> p = output_distribution(next, contexts, emb, fp.output(), mask ? &*mask : nullptr);
  return {next, p};
}

inline void validate_target(std::span<const std::size_t> target, std::size_t vocab) {
  if (target.empty()) throw std::invalid_argument("target caption is empty");
  for (std::size_t tok : target)
    if (tok >= vocab)
      throw std::out_of_range("token " + std::to_string(tok) + " outside vocabulary of " +
                              std::to_string(vocab));
  if (target.back() != kEos) throw std::invalid_argument("target caption must end with EOS");
}

/// Teacher-forced sum_t log p_t[target_t] as a tape scalar. Step t consumes
/// target_{t-1} (BOS at t = 1).
template <class T>
BasicVar<T> caption_logprob(ForwardPass<T>& fp, const BasicEncodedInputs<T>& in,
                            std::span<const std::size_t> target,
                            std::vector<BasicVar<T>>* per_step = nullptr) {
  validate_target(target, fp.params().vocab_size);
  BasicLstmState<T> state = in.initial;
  std::size_t prev = kBos;
  std::vector<BasicVar<T>> logs;
  logs.reserve(target.size());
  for (std::size_t tok : target) {
    BasicDecoderStep<T> step = decoder_step(fp, in, state, prev);
    if (per_step) per_step->push_back(step.probs);
    logs.push_back(log_at(step.probs, tok));
    state = step.state;
    prev = tok;
  }
  return sum(std::span<const BasicVar<T>>(logs));
}

// ---- value-level API ----------------------------------------------------

struct EncodedEvent {
  Stream source;
  Tensor annotations;  // J x annotation_dim
};

inline EncodedEvent encode_current(const Tensor& frames, const ModelParams& params) {
  Tape tape(false);
  ForwardPass<double> fp(params, tape);
  return {Stream::CurrentVideo, encode_current(fp, frames).value()};
}

inline std::vector<EncodedEvent> encode_previous(const PreviousEventInput& prev,
                                                 const ModelParams& params) {
  Tape tape(false);
  ForwardPass<double> fp(params, tape);
  std::vector<EncodedEvent> out;
  for (auto& [s, v] : encode_previous(fp, prev)) out.push_back({s, v.value()});
  return out;
}

struct LogProbResult {
  double total = 0.0;
  std::vector<std::vector<double>> per_step;
};

inline LogProbResult forward_logprob(const Tensor& current, const PreviousEventInput& prev,
                                     std::span<const std::size_t> target,
                                     const ModelParams& params, Mode mode = Mode::Eval,
                                     Regularization reg = {}) {
  validate_target(target, params.vocab_size);
  Tape tape(false);
  ForwardPass<double> fp(params, tape, mode, reg);
  BasicEncodedInputs<double> in = encode_inputs(fp, current, prev);
  std::vector<Var> steps;
  Var total = caption_logprob(fp, in, target, &steps);
  LogProbResult r;
  r.total = total.value()[0];
  for (Var s : steps) r.per_step.push_back(s.value().values());
  return r;
}

/// Gradient of a scalar built on `tape` restricted to the trainable
/// parameters; unbound trainable parameters get zeros.
inline GradientSet trainable_gradients(const ModelParams& params, Tape& tape, Var loss) {
  GradientSet raw = tape.backward(loss);
  GradientSet out;
  for (const std::string& name : params.trainable_names()) {
    auto it = raw.find(name);
    out.emplace(name, it != raw.end() ? std::move(it->second)
                                      : Tensor::zeros(params.at(name).shape()));
  }
  return out;
}

}  // namespace tma
