#pragma once

// Temporally-linked dataset: manifest and feature-file I/O, tokenization,
// vocabulary, frame subsampling, event linking, corpus statistics and the
// synthetic generator with a planted previous-event dependency.

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "tma/random.hpp"
#include "tma/special_tokens.hpp"
#include "tma/tensor.hpp"

namespace tma {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public DataError {
 public:
  using DataError::DataError;
};

enum class Split { Train, Val, Test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw DataError("unknown split '" + s + "' (expected train, val or test)");
}

inline constexpr std::array<Split, 3> kSplits{Split::Train, Split::Val, Split::Test};

struct Event {
  std::string id;
  std::string frames;  // feature file, relative to the manifest directory
  std::vector<std::string> captions;
  std::size_t frame_count = 0;  // J, read from the feature-file header

  friend bool operator==(const Event&, const Event&) = default;
};

struct Day {
  std::string id;
  Split split = Split::Train;
  std::vector<Event> events;

  friend bool operator==(const Day&, const Day&) = default;
};

struct Manifest {
  std::size_t feature_dim = 0;
  std::vector<Day> days;
  std::filesystem::path base_dir;  // where relative frame paths resolve

  std::filesystem::path feature_path(const Event& e) const { return base_dir / e.frames; }

  friend bool operator==(const Manifest& a, const Manifest& b) {
    return a.feature_dim == b.feature_dim && a.days == b.days;
  }
};

// ---- TMAF feature files -------------------------------------------------

inline constexpr std::array<char, 4> kFeatureMagic{'T', 'M', 'A', 'F'};
inline constexpr std::uint16_t kFeatureVersion = 1;

namespace detail {

template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i)
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

template <class U>
U get_le(std::string_view in, std::size_t& pos, const std::string& what) {
  if (in.size() - pos < sizeof(U)) throw FormatError(what + ": truncated file");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += sizeof(U);
  return static_cast<U>(v);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path.string() + "'");
  return std::string(std::istreambuf_iterator<char>(f), {});
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw DataError("cannot create '" + path.parent_path().string() + "': " + ec.message());
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write '" + path.string() + "'");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("write failed for '" + path.string() + "'");
}

struct FeatureHeader {
  std::uint32_t frames = 0;
  std::uint32_t dim = 0;
};

inline FeatureHeader parse_feature_header(std::string_view bytes, std::size_t& pos,
                                          const std::string& what) {
  if (bytes.size() < 4 || !std::equal(kFeatureMagic.begin(), kFeatureMagic.end(), bytes.begin()))
    throw FormatError(what + ": bad magic (expected TMAF)");
  pos = 4;
  const auto version = get_le<std::uint16_t>(bytes, pos, what);
  if (version != kFeatureVersion)
    throw FormatError(what + ": unsupported version " + std::to_string(version));
  FeatureHeader h;
  h.frames = get_le<std::uint32_t>(bytes, pos, what);
  h.dim = get_le<std::uint32_t>(bytes, pos, what);
  if (h.frames == 0 || h.dim == 0) throw FormatError(what + ": empty feature matrix");
  return h;
}

}  // namespace detail

/// Serializes a J x D matrix as TMAF (values stored as float32).
inline std::string encode_features(const Tensor& frames) {
  if (frames.rank() != 2 || frames.rows() == 0 || frames.cols() == 0)
    throw std::invalid_argument("write_features: expected a non-empty J x D matrix");
  std::string out(kFeatureMagic.begin(), kFeatureMagic.end());
  detail::put_le(out, kFeatureVersion);
  detail::put_le(out, static_cast<std::uint32_t>(frames.rows()));
  detail::put_le(out, static_cast<std::uint32_t>(frames.cols()));
  for (double v : frames.data())
    detail::put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  return out;
}

inline Tensor decode_features(std::string_view bytes, const std::string& what = "features") {
  std::size_t pos = 0;
  const auto h = detail::parse_feature_header(bytes, pos, what);
  const std::size_t n = static_cast<std::size_t>(h.frames) * h.dim;
  if (bytes.size() - pos < n * 4) throw FormatError(what + ": truncated payload");
  if (bytes.size() - pos > n * 4) throw FormatError(what + ": trailing bytes after payload");
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float v = std::bit_cast<float>(detail::get_le<std::uint32_t>(bytes, pos, what));
    if (!std::isfinite(v))
      throw FormatError(what + ": non-finite value at index " + std::to_string(i));
    data[i] = v;
  }
  return Tensor::matrix(h.frames, h.dim, std::move(data));
}

inline void write_features(const std::filesystem::path& path, const Tensor& frames) {
  detail::write_file(path, encode_features(frames));
}

inline Tensor read_features(const std::filesystem::path& path) {
  return decode_features(detail::read_file(path), path.string());
}

/// Reads only the header; returns (J, D).
inline std::pair<std::size_t, std::size_t> read_feature_header(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("missing feature file '" + path.string() + "'");
  std::string head(14, '\0');
  f.read(head.data(), 14);
  head.resize(static_cast<std::size_t>(f.gcount()));
  std::size_t pos = 0;
  const auto h = detail::parse_feature_header(head, pos, path.string());
  f.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(f.tellg());
  if (size != 14 + static_cast<std::size_t>(h.frames) * h.dim * 4)
    throw FormatError(path.string() + ": payload size does not match header");
  return {h.frames, h.dim};
}

// ---- manifest -----------------------------------------------------------

inline nlohmann::json manifest_to_json(const Manifest& m) {
  nlohmann::json days = nlohmann::json::array();
  for (const Day& d : m.days) {
    nlohmann::json events = nlohmann::json::array();
    for (const Event& e : d.events)
      events.push_back({{"id", e.id}, {"frames", e.frames}, {"captions", e.captions}});
    days.push_back({{"id", d.id}, {"split", to_string(d.split)}, {"events", events}});
  }
  return {{"feature_dim", m.feature_dim}, {"days", days}};
}

/// Validates structure and, if `check_files`, every feature file header.
inline void validate_manifest(Manifest& m, bool check_files = true) {
  if (m.feature_dim == 0) throw DataError("manifest: feature_dim must be positive");
  if (m.days.empty()) throw DataError("manifest: no days");
  std::set<std::string> day_ids, event_ids;
  for (Day& d : m.days) {
    if (!day_ids.insert(d.id).second) throw DataError("manifest: duplicate day id '" + d.id + "'");
    if (d.events.empty()) throw DataError("manifest: day '" + d.id + "' has no events");
    for (Event& e : d.events) {
      if (!event_ids.insert(e.id).second)
        throw DataError("manifest: duplicate event id '" + e.id + "'");
      if (e.captions.empty())
        throw DataError("manifest: event '" + e.id + "' has no captions");
      if (!check_files) continue;
      const auto [J, D] = read_feature_header(m.feature_path(e));
      if (D != m.feature_dim)
        throw DataError("manifest: event '" + e.id + "' has feature dim " + std::to_string(D) +
                        ", manifest declares " + std::to_string(m.feature_dim));
      e.frame_count = J;
    }
  }
}

inline Manifest manifest_from_json(const nlohmann::json& j, std::filesystem::path base_dir,
                                   bool check_files = true) {
  auto need = [](const nlohmann::json& o, const char* key, const std::string& where) {
    if (!o.is_object() || !o.contains(key))
      throw DataError("manifest: " + where + " is missing '" + key + "'");
    return o.at(key);
  };
  Manifest m;
  m.base_dir = std::move(base_dir);
  try {
    const auto fd = need(j, "feature_dim", "top level");
    if (!fd.is_number_unsigned()) throw DataError("manifest: feature_dim must be a positive integer");
    m.feature_dim = fd.get<std::size_t>();
    const auto days = need(j, "days", "top level");
    if (!days.is_array()) throw DataError("manifest: 'days' must be an array");
    for (const auto& jd : days) {
      Day d;
      d.id = need(jd, "id", "day").get<std::string>();
      d.split = parse_split(need(jd, "split", "day '" + d.id + "'").get<std::string>());
      const auto events = need(jd, "events", "day '" + d.id + "'");
      if (!events.is_array()) throw DataError("manifest: events of day '" + d.id + "' must be an array");
      for (const auto& je : events) {
        Event e;
        e.id = need(je, "id", "event of day '" + d.id + "'").get<std::string>();
        e.frames = need(je, "frames", "event '" + e.id + "'").get<std::string>();
        e.captions = need(je, "captions", "event '" + e.id + "'").get<std::vector<std::string>>();
        d.events.push_back(std::move(e));
      }
      m.days.push_back(std::move(d));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw DataError(std::string("manifest: schema violation: ") + ex.what());
  }
  validate_manifest(m, check_files);
  return m;
}

inline Manifest load_manifest(const std::filesystem::path& path, bool check_files = true) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_file(path));
  } catch (const nlohmann::json::parse_error& ex) {
    throw DataError("manifest '" + path.string() + "': " + ex.what());
  }
  return manifest_from_json(j, path.parent_path(), check_files);
}

inline void write_manifest(const std::filesystem::path& path, const Manifest& m) {
  detail::write_file(path, manifest_to_json(m).dump(2) + "\n");
}

// ---- text ---------------------------------------------------------------

/// Lowercase, split on whitespace, strip leading/trailing punctuation.
inline std::vector<std::string> tokenize(std::string_view raw) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    std::size_t b = 0, e = cur.size();
    while (b < e && std::ispunct(static_cast<unsigned char>(cur[b]))) ++b;
    while (e > b && std::ispunct(static_cast<unsigned char>(cur[e - 1]))) --e;
    if (e > b) out.push_back(cur.substr(b, e - b));
    cur.clear();
  };
  for (char ch : raw) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c))
      flush();
    else
      cur.push_back(static_cast<char>(std::tolower(c)));
  }
  flush();
  return out;
}

inline std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string s;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) s += ' ';
    s += tokens[i];
  }
  return s;
}

class Vocabulary {
 public:
  Vocabulary() {
    for (auto name : kReservedNames) add(std::string(name));
  }

  /// Index of a token, UNK if unknown.
  std::size_t index(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }
  bool contains(const std::string& token) const { return index_.count(token) > 0; }
  const std::string& token(std::size_t i) const {
    if (i >= tokens_.size())
      throw std::out_of_range("vocabulary: index " + std::to_string(i) + " out of range");
    return tokens_[i];
  }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<std::size_t> encode(const std::vector<std::string>& tokens) const {
    std::vector<std::size_t> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(index(t));
    return out;
  }
  std::vector<std::size_t> encode(std::string_view raw) const { return encode(tokenize(raw)); }

  /// Token strings of `ids`, stopping at EOS and skipping PAD/BOS.
  std::vector<std::string> decode(const std::vector<std::size_t>& ids) const {
    std::vector<std::string> out;
    for (std::size_t id : ids) {
      if (id == kEos) break;
      if (id == kPad || id == kBos) continue;
      out.push_back(token(id));
    }
    return out;
  }

  /// Rebuilds from an ordered token list whose first entries are the
  /// reserved names.
  static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
    if (tokens.size() < kReservedTokens)
      throw DataError("vocabulary: fewer entries than reserved tokens");
    for (std::size_t i = 0; i < kReservedTokens; ++i)
      if (tokens[i] != kReservedNames[i])
        throw DataError("vocabulary: entry " + std::to_string(i) + " must be " +
                        std::string(kReservedNames[i]));
    Vocabulary v;
    for (std::size_t i = kReservedTokens; i < tokens.size(); ++i) {
      if (v.contains(tokens[i])) throw DataError("vocabulary: duplicate token '" + tokens[i] + "'");
      v.add(tokens[i]);
    }
    return v;
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  void add(const std::string& t) {
    index_.emplace(t, tokens_.size());
    tokens_.push_back(t);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Tokens with frequency >= min_freq, ordered by frequency descending then
/// lexicographically, after the reserved tokens.
inline Vocabulary build_vocab(const std::vector<std::string>& captions, std::size_t min_freq = 1) {
  std::map<std::string, std::size_t> freq;
  for (const auto& c : captions)
    for (auto& t : tokenize(c)) ++freq[t];
  if (freq.empty()) throw DataError("build_vocab: training corpus is empty");
  std::vector<std::pair<std::string, std::size_t>> items(freq.begin(), freq.end());
  std::stable_sort(items.begin(), items.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens(kReservedNames.begin(), kReservedNames.end());
  for (const auto& [t, n] : items)
    if (n >= std::max<std::size_t>(1, min_freq) && std::find(tokens.begin(), tokens.end(), t) == tokens.end())
      tokens.push_back(t);
  return Vocabulary::from_tokens(tokens);
}

/// Every caption of the training split.
inline std::vector<std::string> training_captions(const Manifest& m) {
  std::vector<std::string> out;
  for (const Day& d : m.days)
    if (d.split == Split::Train)
      for (const Event& e : d.events) out.insert(out.end(), e.captions.begin(), e.captions.end());
  return out;
}

// ---- frames -------------------------------------------------------------

inline constexpr std::size_t kMaxFrames = 26;

/// Indices round(i (J-1) / (max-1)), i = 0..max-1, when J > max.
inline std::vector<std::size_t> subsample_indices(std::size_t J, std::size_t max_frames = kMaxFrames) {
  std::vector<std::size_t> idx;
  if (J <= max_frames || max_frames == 0) {
    for (std::size_t j = 0; j < J; ++j) idx.push_back(j);
    return idx;
  }
  if (max_frames == 1) return {0};
  for (std::size_t i = 0; i < max_frames; ++i)
    idx.push_back(static_cast<std::size_t>(
        std::llround(static_cast<double>(i) * static_cast<double>(J - 1) /
                     static_cast<double>(max_frames - 1))));
  return idx;
}

inline Tensor subsample_frames(const Tensor& seq, std::size_t max_frames = kMaxFrames) {
  if (seq.rank() != 2 || seq.rows() == 0)
    throw std::invalid_argument("subsample_frames: empty frame sequence");
  const auto idx = subsample_indices(seq.rows(), max_frames);
  if (idx.size() == seq.rows()) return seq;
  std::vector<double> data;
  data.reserve(idx.size() * seq.cols());
  for (std::size_t j : idx) {
    auto r = seq.row(j);
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor::matrix(idx.size(), seq.cols(), std::move(data));
}

// ---- linking ------------------------------------------------------------

/// A (previous event, current event, caption) triple, indices within a day.
struct LinkedSample {
  std::size_t day = 0;
  std::size_t event = 0;
  std::optional<std::size_t> previous;  // nullopt: artificial empty event
  std::size_t caption = 0;

  friend bool operator==(const LinkedSample&, const LinkedSample&) = default;
};

inline std::vector<LinkedSample> link_events(const Day& day, std::size_t day_index = 0) {
  std::vector<LinkedSample> out;
  for (std::size_t s = 0; s < day.events.size(); ++s)
    for (std::size_t c = 0; c < day.events[s].captions.size(); ++c)
      out.push_back({day_index, s, s == 0 ? std::nullopt : std::optional<std::size_t>(s - 1), c});
  return out;
}

inline std::vector<LinkedSample> link_split(const Manifest& m, Split split) {
  std::vector<LinkedSample> out;
  for (std::size_t d = 0; d < m.days.size(); ++d)
    if (m.days[d].split == split)
      for (auto& s : link_events(m.days[d], d)) out.push_back(s);
  return out;
}

struct SplitStats {
  std::size_t days = 0;
  std::size_t images = 0;
  std::size_t segments = 0;
  std::size_t descriptions = 0;

  SplitStats& operator+=(const SplitStats& o) {
    days += o.days;
    images += o.images;
    segments += o.segments;
    descriptions += o.descriptions;
    return *this;
  }
  friend bool operator==(const SplitStats&, const SplitStats&) = default;
};

struct CorpusStats {
  SplitStats train, val, test;
  SplitStats total() const {
    SplitStats t = train;
    t += val;
    t += test;
    return t;
  }
  SplitStats& at(Split s) { return s == Split::Train ? train : s == Split::Val ? val : test; }
};

inline CorpusStats corpus_stats(const Manifest& m) {
  CorpusStats st;
  for (const Day& d : m.days) {
    SplitStats& s = st.at(d.split);
    ++s.days;
    for (const Event& e : d.events) {
      ++s.segments;
      s.images += e.frame_count;
      s.descriptions += e.captions.size();
    }
  }
  return st;
}

inline std::string format_count(std::size_t n) {
  std::string s = std::to_string(n);
  for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
  return s;
}

/// Dataset figures per split, one row per quantity.
inline std::string format_stats(const CorpusStats& st) {
  const SplitStats cols[4] = {st.train, st.val, st.test, st.total()};
  std::ostringstream os;
  char line[128];
  std::snprintf(line, sizeof line, "%-15s %10s %10s %10s %10s\n", "", "Training", "Validation",
                "Test", "Total");
  os << line;
  auto row = [&](const char* name, std::size_t SplitStats::*f) {
    std::snprintf(line, sizeof line, "%-15s %10s %10s %10s %10s\n", name,
                  format_count(cols[0].*f).c_str(), format_count(cols[1].*f).c_str(),
                  format_count(cols[2].*f).c_str(), format_count(cols[3].*f).c_str());
    os << line;
  };
  row("#days", &SplitStats::days);
  row("#images", &SplitStats::images);
  row("#segments", &SplitStats::segments);
  row("#descriptions", &SplitStats::descriptions);
  return os.str();
}

// ---- synthetic corpus ---------------------------------------------------

struct SynthConfig {
  std::uint64_t seed = 0;
  std::size_t n_days = 20;
  std::size_t events_per_day = 8;
  std::size_t feature_dim = 16;
  std::size_t n_activities = 8;
  std::size_t min_frames = 3;
  std::size_t max_frames = 10;
  double noise_sigma = 0.1;
  /// Uniform transitions make the previous activity independent of the
  /// current one; otherwise each row is a seeded random distribution.
  bool uniform_chain = true;
};

inline const std::vector<std::string>& activity_names() {
  static const std::vector<std::string> names{
      "walked", "cooked", "ate",    "worked", "shopped", "drove",  "read",    "talked",
      "ran",    "swam",   "cycled", "cleaned", "painted", "danced", "studied", "played"};
  return names;
}

inline std::string activity_name(std::size_t a) {
  const auto& n = activity_names();
  return a < n.size() ? n[a] : "activity" + std::to_string(a);
}

inline constexpr std::string_view kStartWord = "start";

/// Activity labels of each day, generated by the seeded chain.
inline std::vector<std::vector<std::size_t>> synth_activities(const SynthConfig& cfg) {
  Rng rng = make_rng(cfg.seed, "datagen");
  const std::size_t A = cfg.n_activities;
  std::vector<std::vector<double>> P(A, std::vector<double>(A, 1.0));
  if (!cfg.uniform_chain) {
    std::gamma_distribution<double> g(1.0, 1.0);
    for (auto& r : P)
      for (double& p : r) p = g(rng);
  }
  std::uniform_int_distribution<std::size_t> first(0, A - 1);
  std::vector<std::vector<std::size_t>> out(cfg.n_days);
  for (auto& day : out) {
    std::size_t a = first(rng);
    for (std::size_t s = 0; s < cfg.events_per_day; ++s) {
      if (s > 0) {
        std::discrete_distribution<std::size_t> next(P[a].begin(), P[a].end());
        a = next(rng);
      }
      day.push_back(a);
    }
  }
  return out;
}

/// Writes `out_dir/manifest.json` plus one TMAF file per event and returns the
/// loaded manifest.
inline Manifest synth_generate(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
  if (cfg.n_activities < 2) throw std::invalid_argument("datagen: need at least 2 activities");
  if (cfg.feature_dim < cfg.n_activities)
    throw std::invalid_argument("datagen: feature_dim must be >= number of activities");
  if (cfg.n_days == 0 || cfg.events_per_day == 0)
    throw std::invalid_argument("datagen: need at least one day and one event per day");
  if (cfg.min_frames == 0 || cfg.min_frames > cfg.max_frames)
    throw std::invalid_argument("datagen: invalid frame-count range");

  const auto activities = synth_activities(cfg);
  Rng rng = make_rng(cfg.seed, "datagen-frames");
  std::uniform_int_distribution<std::size_t> frames(cfg.min_frames, cfg.max_frames);
  std::normal_distribution<double> noise(0.0, cfg.noise_sigma);

  std::vector<std::size_t> order(cfg.n_days);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng split_rng = make_rng(cfg.seed, "datagen-split");
  std::shuffle(order.begin(), order.end(), split_rng);
  const auto n = static_cast<double>(cfg.n_days);
  const std::size_t n_train = static_cast<std::size_t>(std::llround(0.70 * n));
  const std::size_t n_val =
      std::min(cfg.n_days - n_train, static_cast<std::size_t>(std::llround(0.15 * n)));
  std::vector<Split> split(cfg.n_days);
  for (std::size_t r = 0; r < order.size(); ++r)
    split[order[r]] = r < n_train ? Split::Train : r < n_train + n_val ? Split::Val : Split::Test;

  Manifest m;
  m.feature_dim = cfg.feature_dim;
  m.base_dir = out_dir;
  char id[64];
  for (std::size_t d = 0; d < cfg.n_days; ++d) {
    Day day;
    std::snprintf(id, sizeof id, "day%03zu", d);
    day.id = id;
    day.split = split[d];
    for (std::size_t s = 0; s < cfg.events_per_day; ++s) {
      const std::size_t a = activities[d][s];
      Event e;
      std::snprintf(id, sizeof id, "day%03zu_e%02zu", d, s);
      e.id = id;
      e.frames = "features/" + e.id + ".tmaf";
      const std::string prev = s == 0 ? std::string(kStartWord) : activity_name(activities[d][s - 1]);
      e.captions = {"after " + prev + " did " + activity_name(a)};
      const std::size_t J = frames(rng);
      Tensor x(Shape{J, cfg.feature_dim});
      for (std::size_t j = 0; j < J; ++j)
        for (std::size_t k = 0; k < cfg.feature_dim; ++k)
          x.at(j, k) = (k == a ? 1.0 : 0.0) + noise(rng);
      write_features(out_dir / e.frames, x);
      e.frame_count = J;
      day.events.push_back(std::move(e));
    }
    m.days.push_back(std::move(day));
  }
  write_manifest(out_dir / "manifest.json", m);
  return m;
}

// ---- prepared corpus ----------------------------------------------------

/// An event ready for the model: subsampled features and tokenized captions.
struct PreparedEvent {
  std::string id;
  Tensor frames;                                        // J x D, J <= max_frames
  std::vector<std::vector<std::string>> references;     // tokenized captions
  std::vector<std::vector<std::size_t>> caption_ids;    // vocabulary ids, no EOS
};

struct PreparedDay {
  std::string id;
  Split split = Split::Train;
  std::vector<PreparedEvent> events;
};

struct Corpus {
  std::size_t feature_dim = 0;
  std::vector<PreparedDay> days;

  std::vector<LinkedSample> samples(Split s) const {
    std::vector<LinkedSample> out;
    for (std::size_t d = 0; d < days.size(); ++d) {
      if (days[d].split != s) continue;
      for (std::size_t e = 0; e < days[d].events.size(); ++e)
        for (std::size_t c = 0; c < days[d].events[e].caption_ids.size(); ++c)
          out.push_back({d, e, e == 0 ? std::nullopt : std::optional<std::size_t>(e - 1), c});
    }
    return out;
  }
  std::size_t day_count(Split s) const {
    return static_cast<std::size_t>(
        std::count_if(days.begin(), days.end(), [s](const PreparedDay& d) { return d.split == s; }));
  }
};

inline Corpus prepare_corpus(const Manifest& m, const Vocabulary& vocab,
                             std::size_t max_frames = kMaxFrames) {
  Corpus c;
  c.feature_dim = m.feature_dim;
  for (const Day& d : m.days) {
    PreparedDay pd{d.id, d.split, {}};
    for (const Event& e : d.events) {
      PreparedEvent pe;
      pe.id = e.id;
      Tensor x = read_features(m.feature_path(e));
      if (x.cols() != m.feature_dim)
        throw DataError("event '" + e.id + "': feature dim " + std::to_string(x.cols()) +
                        " != manifest " + std::to_string(m.feature_dim));
      pe.frames = subsample_frames(x, max_frames);
      for (const auto& raw : e.captions) {
        pe.references.push_back(tokenize(raw));
        pe.caption_ids.push_back(vocab.encode(pe.references.back()));
      }
      pd.events.push_back(std::move(pe));
    }
    c.days.push_back(std::move(pd));
  }
  return c;
}

}  // namespace tma
