#pragma once

// Beam search and day-level chained captioning.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tma/data.hpp"
#include "tma/model.hpp"

namespace tma {

struct DecodeConfig {
  std::size_t beam_size = 10;
  std::size_t max_length = 30;  // generated tokens, EOS included
  bool length_normalization = false;
};

struct BeamHypothesis {
  std::vector<std::size_t> tokens;  // ends with EOS iff finished
  double logprob = 0.0;
  LstmState state;
  bool finished = false;
};

struct DecodeResult {
  std::vector<std::size_t> tokens;  // caption without EOS
  double logprob = 0.0;
  /// False when no hypothesis emitted EOS within max_length; the best live
  /// hypothesis is returned instead.
  bool finished = true;
};

namespace detail {

/// Same clamping as the training objective, so beam scores equal
/// forward_logprob totals bit for bit.
inline double clamped_log(double p) { return std::log(p >= 1e-12 ? p : 1e-12); }

inline double beam_score(const std::vector<std::size_t>& tokens, double logprob, bool normalize) {
  return normalize && !tokens.empty() ? logprob / static_cast<double>(tokens.size()) : logprob;
}

/// Higher score first, then the lexicographically smaller sequence.
inline bool better(double sa, const std::vector<std::size_t>& a, double sb,
                   const std::vector<std::size_t>& b) {
  if (sa != sb) return sa > sb;
  return a < b;
}

}  // namespace detail

/// Beam search over the full vocabulary with finished hypotheses retired
/// into a pool. Returns the pooled hypothesis with the highest log-probability.
inline DecodeResult beam_search(const ModelParams& params, const Tensor& current,
                                const PreviousEventInput& prev, const DecodeConfig& cfg = {}) {
  if (cfg.beam_size == 0) throw std::invalid_argument("beam_search: beam_size must be >= 1");
  if (cfg.max_length == 0) throw std::invalid_argument("beam_search: max_length must be >= 1");
  Tape tape(false);
  ForwardPass fp(params, tape);
  const EncodedInputs in = encode_inputs(fp, current, prev);
  const std::size_t V = params.vocab_size;

  std::vector<BeamHypothesis> live{{{}, 0.0, in.initial, false}};
  std::vector<BeamHypothesis> pool;

  struct Candidate {
    std::size_t parent;
    std::size_t token;
    double logprob;
    std::vector<std::size_t> tokens;
    double score;
  };

  for (std::size_t t = 0; t < cfg.max_length && !live.empty(); ++t) {
    std::vector<Candidate> cands;
    std::vector<LstmState> next_states;
    cands.reserve(live.size() * V);
    for (std::size_t h = 0; h < live.size(); ++h) {
      const auto& hyp = live[h];
      const std::size_t prev_tok = hyp.tokens.empty() ? kBos : hyp.tokens.back();
      DecoderStep step = decoder_step(fp, in, hyp.state, prev_tok);
      next_states.push_back(step.state);
      const Tensor& p = step.probs.value();
      for (std::size_t v = 0; v < V; ++v) {
        Candidate c{h, v, hyp.logprob + detail::clamped_log(p[v]), hyp.tokens, 0.0};
        c.tokens.push_back(v);
        c.score = detail::beam_score(c.tokens, c.logprob, cfg.length_normalization);
        cands.push_back(std::move(c));
      }
    }
    const std::size_t keep = std::min(cfg.beam_size, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Candidate& a, const Candidate& b) {
                        return detail::better(a.score, a.tokens, b.score, b.tokens);
                      });
    std::vector<BeamHypothesis> next;
    for (std::size_t k = 0; k < keep; ++k) {
      Candidate& c = cands[k];
      BeamHypothesis h{std::move(c.tokens), c.logprob, next_states[c.parent], c.token == kEos};
      (h.finished ? pool : next).push_back(std::move(h));
    }
    live = std::move(next);
  }

  auto pick = [&](const std::vector<BeamHypothesis>& hs) {
    const BeamHypothesis* best = nullptr;
    for (const auto& h : hs)
      if (!best || detail::better(detail::beam_score(h.tokens, h.logprob, cfg.length_normalization),
                                  h.tokens,
                                  detail::beam_score(best->tokens, best->logprob, cfg.length_normalization),
                                  best->tokens))
        best = &h;
    return best;
  };
  DecodeResult r;
  const BeamHypothesis* best = pick(pool);
  if (!best) {
    best = pick(live);
    r.finished = false;
  }
  r.tokens = best->tokens;
  if (r.finished) r.tokens.pop_back();
  r.logprob = best->logprob;
  return r;
}

/// Previous-event input for event `s` of a day. `previous_caption` supplies
/// the caption stream (generated or ground truth); an empty caption falls
/// back to the padding token.
inline PreviousEventInput previous_input(Variant v, const PreparedDay& day, std::size_t s,
                                         std::size_t feature_dim,
                                         const std::vector<std::size_t>* previous_caption) {
  if (s == 0) return make_empty_event(v, feature_dim);
  PreviousEventInput p;
  if (uses_previous_video(v)) p.frames = day.events[s - 1].frames;
  if (uses_previous_caption(v)) {
    if (!previous_caption) throw std::invalid_argument("previous_input: caption stream needs a caption");
    p.caption = previous_caption->empty() ? std::vector<std::size_t>{kPad} : *previous_caption;
  }
  return p;
}

struct EventCaption {
  std::string day_id;
  std::string event_id;
  std::vector<std::size_t> tokens;
  std::vector<std::string> words;
  double logprob = 0.0;
};

/// Decodes a day in event order. The caption stream of event s > 1 receives
/// the generated caption of event s - 1, re-encoded through the vocabulary.
inline std::vector<EventCaption> caption_day(const ModelParams& params, const Vocabulary& vocab,
                                             const PreparedDay& day, const DecodeConfig& cfg = {}) {
  std::vector<EventCaption> out;
  std::vector<std::size_t> generated;
  for (std::size_t s = 0; s < day.events.size(); ++s) {
    const PreviousEventInput prev =
        previous_input(params.variant, day, s, params.dims.feature_dim, &generated);
    DecodeResult r = beam_search(params, day.events[s].frames, prev, cfg);
    EventCaption c{day.id, day.events[s].id, r.tokens, vocab.decode(r.tokens), r.logprob};
    generated = vocab.encode(c.words);
    out.push_back(std::move(c));
  }
  return out;
}

/// Decodes a day feeding ground-truth previous captions (first reference),
/// as used for model selection.
inline std::vector<EventCaption> caption_day_teacher(const ModelParams& params,
                                                     const Vocabulary& vocab, const PreparedDay& day,
                                                     const DecodeConfig& cfg = {}) {
  std::vector<EventCaption> out;
  for (std::size_t s = 0; s < day.events.size(); ++s) {
    const std::vector<std::size_t>* prev_cap =
        s > 0 ? &day.events[s - 1].caption_ids.front() : nullptr;
    const PreviousEventInput prev =
        previous_input(params.variant, day, s, params.dims.feature_dim, prev_cap);
    DecodeResult r = beam_search(params, day.events[s].frames, prev, cfg);
    out.push_back({day.id, day.events[s].id, r.tokens, vocab.decode(r.tokens), r.logprob});
  }
  return out;
}

}  // namespace tma
