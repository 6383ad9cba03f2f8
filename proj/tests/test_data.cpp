#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "tma/data.hpp"

using namespace tma;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("tma_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

// Splits `total` into `parts` counts differing by at most one.
std::vector<std::size_t> spread(std::size_t total, std::size_t parts) {
  std::vector<std::size_t> out(parts, total / parts);
  for (std::size_t i = 0; i < total % parts; ++i) ++out[i];
  return out;
}

Manifest one_event_manifest(const fs::path& dir) {
  write_features(dir / "e.tmaf", Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  Manifest m;
  m.feature_dim = 3;
  m.base_dir = dir;
  m.days.push_back({"d0", Split::Train, {{"e0", "e.tmaf", {"A cap.", "another cap"}, 0}}});
  return m;
}

}  // namespace

TEST(Features, KnownPayloadDecodesExactly) {
  // "TMAF", v1, J=2, D=3, float32 LE payload
  std::string bytes = "TMAF";
  bytes += std::string("\x01\x00", 2);
  bytes += std::string("\x02\x00\x00\x00", 4);
  bytes += std::string("\x03\x00\x00\x00", 4);
  const float vals[6] = {1.5f, -2.0f, 0.25f, 0.0f, 3.0f, -0.125f};
  for (float v : vals) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
  }
  const Tensor t = decode_features(bytes);
  ASSERT_EQ(t.rows(), 2u);
  ASSERT_EQ(t.cols(), 3u);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(t[i], static_cast<double>(vals[i]));
  EXPECT_EQ(encode_features(t), bytes);
}

TEST(Features, RejectsMalformedFiles) {
  const std::string good = encode_features(Tensor::matrix(1, 2, {1, 2}));
  EXPECT_THROW(decode_features(good.substr(0, good.size() - 1)), FormatError);
  EXPECT_THROW(decode_features(good + "x"), FormatError);
  EXPECT_THROW(decode_features("TMAX" + good.substr(4)), FormatError);
  std::string nan = good;
  const float q = std::nanf("");
  std::memcpy(nan.data() + 14, &q, 4);
  EXPECT_THROW(decode_features(nan), FormatError);
  std::string zero = good;
  zero[6] = 0;  // J = 0
  EXPECT_THROW(decode_features(zero), FormatError);
}

TEST(Features, FileRoundTrip) {
  const fs::path dir = scratch("roundtrip");
  const Tensor t = Tensor::matrix(3, 2, {0.5, -1, 2, 0.125, 8, -0.75});
  write_features(dir / "sub" / "x.tmaf", t);
  EXPECT_EQ(read_features(dir / "sub" / "x.tmaf"), t);
  EXPECT_EQ(read_feature_header(dir / "sub" / "x.tmaf"), (std::pair<std::size_t, std::size_t>{3, 2}));
  EXPECT_THROW(read_features(dir / "missing.tmaf"), DataError);
}

TEST(Manifest, MinimalLoadsAndRoundTrips) {
  const fs::path dir = scratch("minimal");
  Manifest m = one_event_manifest(dir);
  write_manifest(dir / "manifest.json", m);
  const Manifest back = load_manifest(dir / "manifest.json");
  EXPECT_EQ(back.days.size(), 1u);
  EXPECT_EQ(back.days[0].events[0].frame_count, 2u);
  validate_manifest(m);
  EXPECT_EQ(back, m);
}

TEST(Manifest, RejectsInvalidStructure) {
  const fs::path dir = scratch("invalid");
  Manifest m = one_event_manifest(dir);
  Manifest dup = m;
  dup.days.push_back({"d1", Split::Val, {{"e0", "e.tmaf", {"x"}, 0}}});
  EXPECT_THROW(validate_manifest(dup), DataError);

  Manifest dim = m;
  dim.feature_dim = 4;
  EXPECT_THROW(validate_manifest(dim), DataError);

  Manifest missing = m;
  missing.days[0].events[0].frames = "nope.tmaf";
  EXPECT_THROW(validate_manifest(missing), DataError);
  EXPECT_NO_THROW(validate_manifest(missing, false));

  Manifest nocap = m;
  nocap.days[0].events[0].captions.clear();
  EXPECT_THROW(validate_manifest(nocap), DataError);

  auto j = manifest_to_json(m);
  j["days"][0]["split"] = "dev";
  EXPECT_THROW(manifest_from_json(j, dir), DataError);
  j = manifest_to_json(m);
  j["days"][0]["events"][0].erase("captions");
  EXPECT_THROW(manifest_from_json(j, dir), DataError);
}

TEST(Manifest, EgocentricSplitCountsValidate) {
  struct Row {
    Split split;
    std::size_t days, events, descriptions, images;
  };
  const Row rows[] = {{Split::Train, 39, 889, 2652, 32664},
                      {Split::Val, 7, 204, 598, 7301},
                      {Split::Test, 9, 246, 741, 8752}};
  const fs::path dir = scratch("egocentric");
  Manifest m;
  m.feature_dim = 1;
  m.base_dir = dir;
  std::size_t day_no = 0;
  for (const Row& r : rows) {
    const auto events_per_day = spread(r.events, r.days);
    const auto caps = spread(r.descriptions, r.events);
    const auto imgs = spread(r.images, r.events);
    std::size_t e = 0;
    for (std::size_t d = 0; d < r.days; ++d, ++day_no) {
      Day day{"day" + std::to_string(day_no), r.split, {}};
      for (std::size_t k = 0; k < events_per_day[d]; ++k, ++e) {
        const std::string id = day.id + "_e" + std::to_string(k);
        write_features(dir / (id + ".tmaf"), Tensor(Shape{imgs[e], 1}, 0.5));
        day.events.push_back({id, id + ".tmaf", std::vector<std::string>(caps[e], "a caption"), 0});
      }
      m.days.push_back(std::move(day));
    }
  }
  write_manifest(dir / "manifest.json", m);
  const Manifest loaded = load_manifest(dir / "manifest.json");
  const CorpusStats st = corpus_stats(loaded);
  EXPECT_EQ(st.train, (SplitStats{39, 32664, 889, 2652}));
  EXPECT_EQ(st.val, (SplitStats{7, 7301, 204, 598}));
  EXPECT_EQ(st.test, (SplitStats{9, 8752, 246, 741}));
  EXPECT_EQ(st.total(), (SplitStats{55, 48717, 1339, 3991}));

  std::size_t linked = 0;
  for (const Day& d : loaded.days) linked += link_events(d).size();
  EXPECT_EQ(linked, 3991u);

  const std::string table = format_stats(st);
  EXPECT_NE(table.find("48,717"), std::string::npos);
  EXPECT_NE(table.find("3,991"), std::string::npos);
}

TEST(Text, Tokenize) {
  EXPECT_EQ(tokenize("I went to my office"),
            (std::vector<std::string>{"i", "went", "to", "my", "office"}));
  EXPECT_TRUE(tokenize("").empty());
  EXPECT_EQ(tokenize("Hello, world."), (std::vector<std::string>{"hello", "world"}));
  EXPECT_EQ(tokenize("  don't  -- STOP!\t"), (std::vector<std::string>{"don't", "stop"}));
  for (auto name : kReservedNames) EXPECT_TRUE(tokenize(std::string(name)).size() <= 1);
  EXPECT_EQ(tokenize("<unk>"), (std::vector<std::string>{"unk"}));
}

TEST(Text, VocabularyOrderingAndMinFreq) {
  const Vocabulary v = build_vocab({"a b", "a"});
  EXPECT_EQ(v.size(), kReservedTokens + 2);
  EXPECT_EQ(v.index("a"), kReservedTokens);
  EXPECT_EQ(v.index("b"), kReservedTokens + 1);
  for (std::size_t i = 0; i < kReservedTokens; ++i) EXPECT_EQ(v.token(i), kReservedNames[i]);

  const Vocabulary v2 = build_vocab({"a b", "a"}, 2);
  EXPECT_EQ(v2.size(), kReservedTokens + 1);
  EXPECT_EQ(v2.index("b"), kUnk);

  // equal frequency breaks ties lexicographically
  const Vocabulary v3 = build_vocab({"zeta alpha mid", "mid"});
  EXPECT_EQ(v3.tokens(), (std::vector<std::string>{"<pad>", "<bos>", "<eos>", "<unk>", "mid", "alpha", "zeta"}));
  EXPECT_EQ(build_vocab({"zeta alpha mid", "mid"}), v3);

  EXPECT_THROW(build_vocab({}), DataError);
  EXPECT_THROW(build_vocab({"...", " "}), DataError);
}

TEST(Text, EncodeDecode) {
  const Vocabulary v = build_vocab({"after start did walked"});
  const auto ids = v.encode("After start did swam.");
  EXPECT_EQ(ids[3], kUnk);
  std::vector<std::size_t> with_specials{kBos, ids[0], kPad, ids[1], kEos, ids[2]};
  EXPECT_EQ(v.decode(with_specials), (std::vector<std::string>{"after", "start"}));
  EXPECT_EQ(Vocabulary::from_tokens(v.tokens()), v);
  EXPECT_THROW(Vocabulary::from_tokens({"a", "b", "c", "d", "e"}), DataError);
}

TEST(Frames, SubsampleIndices) {
  std::vector<std::size_t> expected;
  for (std::size_t i = 0; i < 26; ++i) expected.push_back(2 * i);
  EXPECT_EQ(subsample_indices(51), expected);
  EXPECT_EQ(subsample_indices(26).size(), 26u);
  EXPECT_EQ(subsample_indices(5), (std::vector<std::size_t>{0, 1, 2, 3, 4}));
  for (std::size_t J : {27u, 40u, 100u, 1000u}) {
    const auto idx = subsample_indices(J);
    ASSERT_EQ(idx.size(), 26u);
    EXPECT_EQ(idx.front(), 0u);
    EXPECT_EQ(idx.back(), J - 1);
    for (std::size_t i = 1; i < idx.size(); ++i) EXPECT_LT(idx[i - 1], idx[i]);
  }
}

TEST(Frames, SubsampleKeepsRows) {
  std::vector<double> data;
  for (std::size_t j = 0; j < 51; ++j) data.insert(data.end(), {double(j), -double(j)});
  const Tensor x = Tensor::matrix(51, 2, data);
  const Tensor s = subsample_frames(x);
  ASSERT_EQ(s.rows(), 26u);
  EXPECT_EQ(s.at(25, 0), 50.0);
  EXPECT_EQ(s.at(1, 1), -2.0);
  EXPECT_EQ(subsample_frames(Tensor::matrix(3, 2, {1, 2, 3, 4, 5, 6})).rows(), 3u);
}

TEST(Linking, PairsWithImmediatePredecessor) {
  const Day one{"d", Split::Train, {{"e0", "", {"x", "y"}, 1}}};
  const auto a = link_events(one);
  ASSERT_EQ(a.size(), 2u);
  EXPECT_FALSE(a[0].previous);
  EXPECT_FALSE(a[1].previous);
  EXPECT_EQ(a[1].caption, 1u);

  const Day three{"d", Split::Train, {{"e0", "", {"x"}, 1}, {"e1", "", {"y"}, 1}, {"e2", "", {"z"}, 1}}};
  const auto b = link_events(three, 4);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_FALSE(b[0].previous);
  EXPECT_EQ(b[1].previous, 0u);
  EXPECT_EQ(b[2].previous, 1u);
  EXPECT_EQ(b[2].event, 2u);
  EXPECT_EQ(b[2].day, 4u);
}

TEST(Synthetic, DeterministicTree) {
  SynthConfig cfg;
  cfg.seed = 11;
  cfg.n_days = 6;
  const fs::path a = scratch("synth_a"), b = scratch("synth_b");
  const Manifest ma = synth_generate(cfg, a);
  synth_generate(cfg, b);
  std::size_t files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    ++files;
    const fs::path rel = fs::relative(entry.path(), a);
    EXPECT_EQ(slurp(entry.path()), slurp(b / rel)) << rel;
  }
  EXPECT_EQ(files, 1 + 6 * cfg.events_per_day);
  EXPECT_EQ(load_manifest(a / "manifest.json"), ma);
  cfg.seed = 12;
  EXPECT_NE(synth_generate(cfg, scratch("synth_c")), ma);
}

TEST(Synthetic, CaptionsFollowTheChain) {
  SynthConfig cfg;
  cfg.seed = 3;
  cfg.n_days = 20;
  const Manifest m = synth_generate(cfg, scratch("synth_chain"));
  std::set<std::string> day_ids;
  std::map<Split, std::size_t> split_days;
  for (const Day& d : m.days) {
    EXPECT_TRUE(day_ids.insert(d.id).second);
    ++split_days[d.split];
    for (std::size_t s = 0; s < d.events.size(); ++s) {
      const Event& e = d.events[s];
      EXPECT_GE(e.frame_count, cfg.min_frames);
      EXPECT_LE(e.frame_count, cfg.max_frames);
      const auto tok = tokenize(e.captions.at(0));
      ASSERT_EQ(tok.size(), 4u);
      EXPECT_EQ(tok[0], "after");
      EXPECT_EQ(tok[2], "did");
      if (s == 0) EXPECT_EQ(tok[1], kStartWord);
      else EXPECT_EQ(tok[1], tokenize(d.events[s - 1].captions[0])[3]);
      // the current activity is the arg-max feature coordinate on average
      const Tensor x = read_features(m.feature_path(e));
      std::vector<double> mean(x.cols(), 0.0);
      for (std::size_t j = 0; j < x.rows(); ++j)
        for (std::size_t c = 0; c < x.cols(); ++c) mean[c] += x.at(j, c) / double(x.rows());
      const auto a = static_cast<std::size_t>(std::max_element(mean.begin(), mean.end()) - mean.begin());
      EXPECT_EQ(activity_name(a), tok[3]);
    }
  }
  EXPECT_EQ(split_days[Split::Train], 14u);
  EXPECT_EQ(split_days[Split::Val], 3u);
  EXPECT_EQ(split_days[Split::Test], 3u);
}

TEST(Synthetic, UniformChainDecouplesPreviousFromCurrent) {
  // Empirical mutual information between the previous-activity slot and the
  // current activity approaches zero (bias of the plug-in estimate ~ (K-1)^2/2N).
  SynthConfig cfg;
  cfg.seed = 5;
  cfg.n_days = 400;
  cfg.feature_dim = 8;
  cfg.n_activities = 4;
  cfg.min_frames = cfg.max_frames = 1;
  const Manifest m = synth_generate(cfg, scratch("synth_mi"));
  std::map<std::pair<std::string, std::string>, double> joint;
  std::map<std::string, double> prev, cur;
  double n = 0;
  for (const Day& d : m.days)
    for (std::size_t s = 1; s < d.events.size(); ++s) {
      const auto tok = tokenize(d.events[s].captions[0]);
      joint[{tok[1], tok[3]}] += 1;
      prev[tok[1]] += 1;
      cur[tok[3]] += 1;
      n += 1;
    }
  double mi = 0;
  for (const auto& [k, c] : joint) mi += c / n * std::log((c / n) / ((prev[k.first] / n) * (cur[k.second] / n)));
  EXPECT_LT(mi, 0.01);
  EXPECT_EQ(prev.size(), 4u);
}

TEST(Corpus, PrepareSubsamplesAndEncodes) {
  SynthConfig cfg;
  cfg.seed = 2;
  cfg.n_days = 4;
  cfg.min_frames = 8;
  cfg.max_frames = 8;
  const fs::path dir = scratch("corpus");
  const Manifest m = synth_generate(cfg, dir);
  const Vocabulary v = build_vocab(training_captions(m));
  const Corpus c = prepare_corpus(m, v, 5);
  EXPECT_EQ(c.days.size(), 4u);
  EXPECT_EQ(c.days[0].events[0].frames.rows(), 5u);
  std::size_t total = 0;
  for (Split s : kSplits) total += c.samples(s).size();
  EXPECT_EQ(total, 4 * cfg.events_per_day);
  for (Split s : kSplits)
    for (const auto& ls : c.samples(s)) EXPECT_EQ(c.days[ls.day].split, s);
}
