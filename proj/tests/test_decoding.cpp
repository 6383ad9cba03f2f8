#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "tma/decoding.hpp"

using namespace tma;

namespace {

const ModelDims kTiny{.feature_dim = 3, .embed = 4, .encoder = 3, .decoder = 5, .align = 3, .output = 4};

Tensor random_frames(Rng& rng, std::size_t J, std::size_t D) {
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor t(Shape{J, D});
  for (double& v : t.data()) v = n(rng);
  return t;
}

// Independent greedy decoder driven step by step through decoder_step.
std::vector<std::size_t> greedy(const ModelParams& m, const Tensor& cur, const PreviousEventInput& prev,
                                std::size_t max_length, double& logprob) {
  Tape tape(false);
  ForwardPass fp(m, tape);
  const EncodedInputs in = encode_inputs(fp, cur, prev);
  LstmState s = in.initial;
  std::size_t tok = kBos;
  std::vector<std::size_t> out;
  logprob = 0;
  for (std::size_t t = 0; t < max_length; ++t) {
    const DecoderStep step = decoder_step(fp, in, s, tok);
    const Tensor& p = step.probs.value();
    tok = 0;
    for (std::size_t v = 1; v < p.size(); ++v)
      if (p[v] > p[tok]) tok = v;
    logprob += std::log(p[tok]);
    s = step.state;
    if (tok == kEos) break;
    out.push_back(tok);
  }
  return out;
}

// Best EOS-terminated sequence of at most max_length tokens, by enumeration.
std::pair<std::vector<std::size_t>, double> exhaustive(const ModelParams& m, const Tensor& cur,
                                                       const PreviousEventInput& prev,
                                                       std::size_t max_length) {
  const std::size_t V = m.vocab_size;
  std::vector<std::size_t> best;
  double best_lp = -std::numeric_limits<double>::infinity();
  std::vector<std::vector<std::size_t>> frontier{{}};
  for (std::size_t len = 0; len < max_length; ++len) {
    std::vector<std::vector<std::size_t>> next;
    for (const auto& prefix : frontier) {
      auto full = prefix;
      full.push_back(kEos);
      const double lp = forward_logprob(cur, prev, full, m).total;
      if (lp > best_lp || (lp == best_lp && prefix < best)) best_lp = lp, best = prefix;
      for (std::size_t v = 0; v < V; ++v)
        if (v != kEos) {
          auto p = prefix;
          p.push_back(v);
          next.push_back(std::move(p));
        }
    }
    frontier = std::move(next);
  }
  return {best, best_lp};
}

}  // namespace

TEST(Beam, WidthOneIsGreedy) {
  Rng rng = make_rng(1, "test");
  for (Variant v : all_variants())
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const ModelParams m = build_model(v, kTiny, 9, seed);
      const Tensor cur = random_frames(rng, 3, 3);
      const PreviousEventInput prev = make_empty_event(v, 3);
      double glp = 0;
      const auto g = greedy(m, cur, prev, 8, glp);
      const DecodeResult r = beam_search(m, cur, prev, {1, 8, false});
      EXPECT_EQ(r.tokens, g) << to_string(v) << " seed " << seed;
      if (r.finished) {
        EXPECT_NEAR(r.logprob, glp, 1e-12);
      }
    }
}

TEST(Beam, WideBeamMatchesExhaustiveSearch) {
  Rng rng = make_rng(2, "test");
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const ModelParams m = build_model(Variant::PrevVideo, kTiny, 3, seed);
    const Tensor cur = random_frames(rng, 2, 3);
    PreviousEventInput prev;
    prev.frames = random_frames(rng, 2, 3);
    const auto [tokens, lp] = exhaustive(m, cur, prev, 4);
    const DecodeResult r = beam_search(m, cur, prev, {81, 4, false});
    EXPECT_TRUE(r.finished);
    EXPECT_EQ(r.tokens, tokens) << "seed " << seed;
    EXPECT_EQ(r.logprob, lp) << "seed " << seed;
  }
}

TEST(Beam, EosDominantModelGivesEmptyCaption) {
  ModelParams m = build_model(Variant::Baseline, kTiny, 9, 1);
  m.at("out.b_p")[kEos] = 60.0;
  const DecodeResult r = beam_search(m, Tensor::matrix(1, 3, {1, 2, 3}), {}, {});
  EXPECT_TRUE(r.tokens.empty());
  EXPECT_TRUE(r.finished);
  EXPECT_LE(r.logprob, 0.0);
  EXPECT_GT(r.logprob, -1e-12);
}

TEST(Beam, FallsBackToBestLiveHypothesis) {
  ModelParams m = build_model(Variant::Baseline, kTiny, 9, 1);
  m.at("out.b_p")[kEos] = -60.0;
  m.at("out.b_p")[6] = 20.0;
  const DecodeResult r = beam_search(m, Tensor::matrix(1, 3, {1, 2, 3}), {}, {3, 5, false});
  EXPECT_FALSE(r.finished);
  EXPECT_EQ(r.tokens, (std::vector<std::size_t>(5, 6)));
  EXPECT_THROW(beam_search(m, Tensor::matrix(1, 3, {1, 2, 3}), {}, {0, 5, false}), std::invalid_argument);
}

TEST(Beam, DeterministicAndNonPositive) {
  Rng rng = make_rng(3, "test");
  const ModelParams m = build_model(Variant::PrevVideoCaption, kTiny, 9, 4);
  const Tensor cur = random_frames(rng, 4, 3);
  PreviousEventInput prev;
  prev.frames = random_frames(rng, 2, 3);
  prev.caption = std::vector<std::size_t>{5, 6};
  const DecodeResult a = beam_search(m, cur, prev), b = beam_search(m, cur, prev);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_EQ(a.logprob, b.logprob);
  EXPECT_LE(a.logprob, 0.0);
  EXPECT_LE(a.tokens.size(), 30u);
}

namespace {

PreparedDay make_day(Rng& rng, std::size_t events) {
  PreparedDay d{"d", Split::Test, {}};
  for (std::size_t s = 0; s < events; ++s)
    d.events.push_back({"e" + std::to_string(s), random_frames(rng, 2, 3),
                        {{"w" + std::to_string(s)}}, {{4 + s % 5}}});
  return d;
}

Vocabulary tiny_vocab() { return build_vocab({"a b c d e"}); }

}  // namespace

TEST(Chained, OneEventDayMatchesBeamSearch) {
  Rng rng = make_rng(4, "test");
  const Vocabulary vocab = tiny_vocab();
  for (Variant v : all_variants()) {
    const ModelParams m = build_model(v, kTiny, vocab.size(), 2);
    const PreparedDay day = make_day(rng, 1);
    const auto caps = caption_day(m, vocab, day);
    ASSERT_EQ(caps.size(), 1u);
    const DecodeResult r = beam_search(m, day.events[0].frames, make_empty_event(v, 3));
    EXPECT_EQ(caps[0].tokens, r.tokens);
    EXPECT_EQ(caps[0].logprob, r.logprob);
    EXPECT_TRUE(std::isfinite(caps[0].logprob));
  }
}

TEST(Chained, GeneratedCaptionFeedsNextEvent) {
  Rng rng = make_rng(5, "test");
  const Vocabulary vocab = tiny_vocab();
  const ModelParams m = build_model(Variant::PrevCaption, kTiny, vocab.size(), 3);
  const PreparedDay day = make_day(rng, 3);
  const DecodeConfig dc{3, 6, false};
  const auto caps = caption_day(m, vocab, day, dc);
  ASSERT_EQ(caps.size(), 3u);
  for (std::size_t s = 1; s < 3; ++s) {
    PreviousEventInput prev;
    const auto ids = vocab.encode(caps[s - 1].words);
    prev.caption = ids.empty() ? std::vector<std::size_t>{kPad} : ids;
    const DecodeResult r = beam_search(m, day.events[s].frames, prev, dc);
    EXPECT_EQ(caps[s].tokens, r.tokens);
    EXPECT_EQ(caps[s].logprob, r.logprob);
  }
}

TEST(Chained, PreviousVideoIgnoresCaptionText) {
  Rng rng = make_rng(6, "test");
  const Vocabulary vocab = tiny_vocab();
  const ModelParams m = build_model(Variant::PrevVideo, kTiny, vocab.size(), 3);
  PreparedDay day = make_day(rng, 3);
  const auto a = caption_day(m, vocab, day);
  std::swap(day.events[0].caption_ids, day.events[1].caption_ids);
  std::swap(day.events[0].references, day.events[1].references);
  const auto b = caption_day(m, vocab, day);
  const auto c = caption_day_teacher(m, vocab, day);
  for (std::size_t s = 0; s < 3; ++s) {
    EXPECT_EQ(a[s].tokens, b[s].tokens);
    EXPECT_EQ(a[s].tokens, c[s].tokens);
  }
}

TEST(Chained, TeacherModeUsesFirstReference) {
  Rng rng = make_rng(7, "test");
  const Vocabulary vocab = tiny_vocab();
  const ModelParams m = build_model(Variant::PrevCaption, kTiny, vocab.size(), 8);
  const PreparedDay day = make_day(rng, 2);
  const auto caps = caption_day_teacher(m, vocab, day);
  PreviousEventInput prev;
  prev.caption = day.events[0].caption_ids[0];
  EXPECT_EQ(caps[1].tokens, beam_search(m, day.events[1].frames, prev).tokens);
}
