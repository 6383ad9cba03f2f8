#pragma once

// Neural building blocks of the captioner: embedding lookup, LSTM and
// bidirectional encoders, additive soft attention, the multi-input decoder
// cell, decoder-state initialization and the skip-connection output layer.
//
// All layers operate on tape Vars so that the same code path serves
// training (with gradients) and inference.

#include <array>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tma/autodiff.hpp"

namespace tma {

enum Gate : std::size_t { kInputGate = 0, kForgetGate = 1, kOutputGate = 2, kCellGate = 3 };
inline constexpr std::array<const char*, 4> kGateNames{"i", "f", "o", "c"};

struct CellOptions {
  /// h = o * tanh(c) instead of the literal h = o * c.
  bool tanh_on_cell_output = false;
};

template <class T>
struct BasicLstmState {
  BasicVar<T> h;
  BasicVar<T> c;
};
using LstmState = BasicLstmState<double>;

template <class T>
struct BasicLstmParams {
  std::array<BasicVar<T>, 4> W;  // input -> gate
  std::array<BasicVar<T>, 4> U;  // recurrent
  std::array<BasicVar<T>, 4> b;
  std::size_t hidden() const { return b[0].value().size(); }
};
using LstmParams = BasicLstmParams<double>;

template <class T>
struct BasicAttentionParams {
  BasicVar<T> w;    // (align)
  BasicVar<T> W_a;  // (align x decoder)
  BasicVar<T> U_a;  // (align x annotation)
  BasicVar<T> b;    // (align)
};
using AttentionParams = BasicAttentionParams<double>;

template <class T>
struct BasicMultiInputLstmParams {
  std::array<BasicVar<T>, 4> W;  // previous-word embedding -> gate
  std::array<BasicVar<T>, 4> U;  // recurrent
  std::array<BasicVar<T>, 4> b;
  /// One matrix per gate for each attended context stream, in stream order.
  std::vector<std::array<BasicVar<T>, 4>> context;
};
using MultiInputLstmParams = BasicMultiInputLstmParams<double>;

template <class T>
struct BasicInitStateParams {
  BasicVar<T> W_h, b_h;
  BasicVar<T> W_c, b_c;
};
using InitStateParams = BasicInitStateParams<double>;

template <class T>
struct BasicOutputLayerParams {
  BasicVar<T> M_h;                     // (inter x decoder)
  std::vector<BasicVar<T>> M_context;  // (inter x annotation_k), stream order
  BasicVar<T> M_e;                     // (inter x embed)
  BasicVar<T> b;                       // (inter)
  BasicVar<T> U_p;                     // (vocab x inter)
  BasicVar<T> b_p;                     // (vocab)
};
using OutputLayerParams = BasicOutputLayerParams<double>;

template <class T>
BasicVar<T> embed(BasicVar<T> embedding, std::size_t token) {
  return row(embedding, token);
}

namespace detail {

template <class T>
void require_size(BasicVar<T> v, std::size_t n, const char* what) {
  if (v.value().rank() != 1 || v.value().size() != n)
    throw std::invalid_argument(std::string(what) + ": expected vector of size " +
                                std::to_string(n) + ", got " +
                                shape_string(v.value().shape()));
}

template <class T>
BasicLstmState<T> cell_update(BasicVar<T> i, BasicVar<T> f, BasicVar<T> o,
                              BasicVar<T> candidate, BasicVar<T> prev_c, CellOptions opt) {
  const std::array<BasicVar<T>, 2> terms{mul(f, prev_c), mul(i, candidate)};
  BasicVar<T> c = sum(std::span<const BasicVar<T>>(terms));
  BasicVar<T> h = mul(o, opt.tanh_on_cell_output ? tanh(c) : c);
  return {h, c};
}

}  // namespace detail

template <class T>
BasicLstmState<T> lstm_step(BasicVar<T> x, BasicLstmState<T> prev,
                            const BasicLstmParams<T>& p, CellOptions opt = {}) {
  const std::size_t H = p.hidden();
  detail::require_size(prev.h, H, "lstm_step prev_h");
  detail::require_size(prev.c, H, "lstm_step prev_c");
  using Term = BasicAffineTerm<T>;
  std::array<BasicVar<T>, 4> pre;
  for (std::size_t g = 0; g < 4; ++g)
    pre[g] = affine({Term{p.W[g], x}, Term{p.U[g], prev.h}}, p.b[g]);
  return detail::cell_update(sigmoid(pre[kInputGate]), sigmoid(pre[kForgetGate]),
                             sigmoid(pre[kOutputGate]), tanh(pre[kCellGate]), prev.c,
                             opt);
}

/// Hidden states of one direction, zero initial state.
template <class T>
std::vector<BasicVar<T>> lstm_run(std::span<const BasicVar<T>> seq,
                                  const BasicLstmParams<T>& p, bool reverse,
                                  CellOptions opt = {}) {
  if (seq.empty()) throw std::invalid_argument("lstm_run: empty sequence");
  BasicTape<T>& t = seq.front().tape();
  const std::size_t H = p.hidden();
  BasicLstmState<T> s{t.constant(BasicTensor<T>::zeros(Shape{H})),
                      t.constant(BasicTensor<T>::zeros(Shape{H}))};
  std::vector<BasicVar<T>> out(seq.size());
  for (std::size_t k = 0; k < seq.size(); ++k) {
    const std::size_t j = reverse ? seq.size() - 1 - k : k;
    s = lstm_step(seq[j], s, p, opt);
    out[j] = s.h;
  }
  return out;
}

template <class T>
std::vector<BasicVar<T>> lstm_run(const std::vector<BasicVar<T>>& seq,
                                  const BasicLstmParams<T>& p, bool reverse,
                                  CellOptions opt = {}) {
  return lstm_run(std::span<const BasicVar<T>>(seq), p, reverse, opt);
}

template <class T>
struct BasicBlstmOutput {
  std::vector<BasicVar<T>> forward;
  std::vector<BasicVar<T>> backward;
};

template <class T>
BasicBlstmOutput<T> blstm_run(std::span<const BasicVar<T>> seq, const BasicLstmParams<T>& fwd,
                              const BasicLstmParams<T>& bwd, CellOptions opt = {}) {
  if (seq.empty()) throw std::invalid_argument("blstm_encode: empty sequence");
  return {lstm_run(seq, fwd, false, opt), lstm_run(seq, bwd, true, opt)};
}

/// Annotation j = concat(forward_j, backward_j).
template <class T>
std::vector<BasicVar<T>> blstm_encode(std::span<const BasicVar<T>> seq,
                                      const BasicLstmParams<T>& fwd,
                                      const BasicLstmParams<T>& bwd, CellOptions opt = {}) {
  BasicBlstmOutput<T> r = blstm_run(seq, fwd, bwd, opt);
  std::vector<BasicVar<T>> out;
  out.reserve(seq.size());
  for (std::size_t j = 0; j < seq.size(); ++j)
    out.push_back(concat({r.forward[j], r.backward[j]}));
  return out;
}

template <class T>
std::vector<BasicVar<T>> blstm_encode(const std::vector<BasicVar<T>>& seq,
                                      const BasicLstmParams<T>& fwd,
                                      const BasicLstmParams<T>& bwd, CellOptions opt = {}) {
  return blstm_encode(std::span<const BasicVar<T>>(seq), fwd, bwd, opt);
}

/// Annotations with their step-independent projection U_a v_j + b cached.
template <class T>
struct BasicPreparedAnnotations {
  BasicVar<T> annotations;  // (J x annotation)
  BasicVar<T> projected;    // (J x align)
};
using PreparedAnnotations = BasicPreparedAnnotations<double>;

template <class T>
struct BasicAttentionResult {
  BasicVar<T> z;
  BasicVar<T> alpha;
};
using AttentionResult = BasicAttentionResult<double>;

template <class T>
BasicPreparedAnnotations<T> prepare_attention(BasicVar<T> annotations,
                                              const BasicAttentionParams<T>& p) {
  const auto& a = annotations.value();
  if (a.rank() != 2 || a.rows() == 0)
    throw std::invalid_argument("attend: empty annotation list");
  return {annotations, project_rows(annotations, p.U_a, p.b)};
}

template <class T>
BasicAttentionResult<T> attend(const BasicPreparedAnnotations<T>& ann, BasicVar<T> prev_h,
                               const BasicAttentionParams<T>& p) {
  BasicVar<T> query = matvec(p.W_a, prev_h);
  BasicVar<T> alpha = softmax(additive_scores(query, ann.projected, p.w));
  return {weighted_sum_rows(alpha, ann.annotations), alpha};
}

template <class T>
BasicAttentionResult<T> attend(BasicVar<T> annotations, BasicVar<T> prev_h,
                               const BasicAttentionParams<T>& p) {
  return attend(prepare_attention(annotations, p), prev_h, p);
}

template <class T>
BasicAttentionResult<T> attend(std::span<const BasicVar<T>> annotations, BasicVar<T> prev_h,
                               const BasicAttentionParams<T>& p) {
  if (annotations.empty()) throw std::invalid_argument("attend: empty annotation list");
  return attend(stack_rows(annotations), prev_h, p);
}

template <class T>
BasicAttentionResult<T> attend(const std::vector<BasicVar<T>>& annotations,
                               BasicVar<T> prev_h, const BasicAttentionParams<T>& p) {
  return attend(std::span<const BasicVar<T>>(annotations), prev_h, p);
}

template <class T>
BasicLstmState<T> multi_input_lstm_step(BasicVar<T> prev_word_emb, BasicLstmState<T> state,
                                        std::span<const BasicVar<T>> contexts,
                                        const BasicMultiInputLstmParams<T>& p,
                                        CellOptions opt = {}) {
  if (contexts.size() != p.context.size())
    throw std::invalid_argument("multi_input_lstm_step: got " +
                                std::to_string(contexts.size()) + " contexts, cell has " +
                                std::to_string(p.context.size()) + " streams");
  const std::size_t H = p.b[0].value().size();
  detail::require_size(state.h, H, "multi_input_lstm_step h");
  detail::require_size(state.c, H, "multi_input_lstm_step c");
  std::array<BasicVar<T>, 4> pre;
  std::vector<BasicAffineTerm<T>> terms;
  for (std::size_t g = 0; g < 4; ++g) {
    terms.clear();
    terms.push_back({p.W[g], prev_word_emb});
    terms.push_back({p.U[g], state.h});
    for (std::size_t k = 0; k < contexts.size(); ++k)
      terms.push_back({p.context[k][g], contexts[k]});
    pre[g] = affine(terms, p.b[g]);
  }
  return detail::cell_update(sigmoid(pre[kInputGate]), sigmoid(pre[kForgetGate]),
                             sigmoid(pre[kOutputGate]), tanh(pre[kCellGate]), state.c,
                             opt);
}

template <class T>
BasicLstmState<T> multi_input_lstm_step(BasicVar<T> prev_word_emb, BasicLstmState<T> state,
                                        const std::vector<BasicVar<T>>& contexts,
                                        const BasicMultiInputLstmParams<T>& p,
                                        CellOptions opt = {}) {
  return multi_input_lstm_step(prev_word_emb, state, std::span<const BasicVar<T>>(contexts),
                               p, opt);
}

/// h0 = tanh(W_h m + b_h), c0 = tanh(W_c m + b_c), m the mean annotation.
template <class T>
BasicLstmState<T> init_decoder_state(BasicVar<T> annotations,
                                     const BasicInitStateParams<T>& p) {
  const auto& a = annotations.value();
  if (a.rank() != 2 || a.rows() == 0)
    throw std::invalid_argument("init_decoder_state: empty annotation list");
  BasicVar<T> m = mean_rows(annotations);
  using Term = BasicAffineTerm<T>;
  return {tanh(affine({Term{p.W_h, m}}, p.b_h)), tanh(affine({Term{p.W_c, m}}, p.b_c))};
}

/// tanh(M_h h + sum_k M_k z_k + M_e emb + b): the pre-readout features.
template <class T>
BasicVar<T> output_features(BasicVar<T> h, std::span<const BasicVar<T>> contexts,
                            BasicVar<T> prev_word_emb, const BasicOutputLayerParams<T>& p) {
  if (contexts.size() != p.M_context.size())
    throw std::invalid_argument("output_distribution: context count mismatch");
  std::vector<BasicAffineTerm<T>> terms;
  terms.push_back({p.M_h, h});
  for (std::size_t k = 0; k < contexts.size(); ++k) terms.push_back({p.M_context[k], contexts[k]});
  terms.push_back({p.M_e, prev_word_emb});
  return tanh(affine(terms, p.b));
}

/// Softmax(U_p features + b_p). `feature_mask`, if given, multiplies the
/// features before the readout (dropout).
template <class T>
BasicVar<T> output_distribution(const BasicLstmState<T>& state,
                                std::span<const BasicVar<T>> contexts,
                                BasicVar<T> prev_word_emb, const BasicOutputLayerParams<T>& p,
                                const BasicTensor<T>* feature_mask = nullptr) {
  BasicVar<T> f = output_features(state.h, contexts, prev_word_emb, p);
  if (feature_mask) f = mul_const(f, *feature_mask);
  return softmax(affine({BasicAffineTerm<T>{p.U_p, f}}, p.b_p));
}

template <class T>
BasicVar<T> output_distribution(const BasicLstmState<T>& state,
                                const std::vector<BasicVar<T>>& contexts,
                                BasicVar<T> prev_word_emb, const BasicOutputLayerParams<T>& p,
                                const BasicTensor<T>* feature_mask = nullptr) {
  return output_distribution(state, std::span<const BasicVar<T>>(contexts), prev_word_emb, p,
                             feature_mask);
}

}  // namespace tma
