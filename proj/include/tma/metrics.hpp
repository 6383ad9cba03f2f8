#pragma once

// Corpus-level BLEU-4 and CIDEr over multi-reference caption corpora.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdlib>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace tma {

using Tokens = std::vector<std::string>;

struct EvalEntry {
  std::string id;
  Tokens hypothesis;
  std::vector<Tokens> references;  // at least one
};

using EvalCorpus = std::vector<EvalEntry>;

struct EvalReport {
  double bleu4 = 0.0;  // [0, 1]
  double cider = 0.0;  // [0, 10]
  std::vector<double> per_sentence_cider;
};

inline constexpr std::size_t kMaxNgram = 4;

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

/// Counts of every n-gram of exactly length n.
inline NgramCounts ngrams(const Tokens& t, std::size_t n) {
  NgramCounts out;
  if (t.size() < n) return out;
  for (std::size_t i = 0; i + n <= t.size(); ++i)
    ++out[std::vector<std::string>(t.begin() + static_cast<std::ptrdiff_t>(i),
                                   t.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return out;
}

namespace detail {

inline void check_corpus(const EvalCorpus& corpus, const char* what) {
  if (corpus.empty()) throw std::invalid_argument(std::string(what) + ": empty corpus");
  for (const auto& e : corpus)
    if (e.references.empty())
      throw std::invalid_argument(std::string(what) + ": entry '" + e.id + "' has no references");
}

/// Reference length closest to c; the shorter one on ties.
inline std::size_t closest_ref_length(const std::vector<Tokens>& refs, std::size_t c) {
  std::size_t best = refs.front().size();
  for (const auto& r : refs) {
    const auto d = [&](std::size_t x) { return x > c ? x - c : c - x; };
    if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
  }
  return best;
}

}  // namespace detail

/// Corpus BLEU-4: clipped n-gram precisions aggregated over the corpus,
/// geometric mean over n = 1..4, times the brevity penalty. No smoothing.
inline double bleu4(const EvalCorpus& corpus) {
  detail::check_corpus(corpus, "bleu4");
  std::size_t matched[kMaxNgram] = {}, total[kMaxNgram] = {};
  std::size_t hyp_len = 0, ref_len = 0;
  for (const auto& e : corpus) {
    hyp_len += e.hypothesis.size();
    ref_len += detail::closest_ref_length(e.references, e.hypothesis.size());
    for (std::size_t n = 1; n <= kMaxNgram; ++n) {
      const NgramCounts h = ngrams(e.hypothesis, n);
      NgramCounts max_ref;
      for (const auto& r : e.references)
        for (const auto& [g, c] : ngrams(r, n)) max_ref[g] = std::max(max_ref[g], c);
      for (const auto& [g, c] : h) {
        total[n - 1] += c;
        auto it = max_ref.find(g);
        if (it != max_ref.end()) matched[n - 1] += std::min(c, it->second);
      }
    }
  }
  double log_sum = 0.0;
  for (std::size_t n = 0; n < kMaxNgram; ++n) {
    if (matched[n] == 0 || total[n] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(matched[n]) / static_cast<double>(total[n]));
  }
  const double c = static_cast<double>(hyp_len), r = static_cast<double>(ref_len);
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return bp * std::exp(log_sum / static_cast<double>(kMaxNgram));
}

/// Document frequency of each n-gram: the number of entries whose
/// reference set contains it.
inline std::vector<NgramCounts> document_frequencies(const EvalCorpus& corpus) {
  std::vector<NgramCounts> df(kMaxNgram);
  for (const auto& e : corpus)
    for (std::size_t n = 1; n <= kMaxNgram; ++n) {
      NgramCounts seen;
      for (const auto& r : e.references)
        for (const auto& [g, c] : ngrams(r, n)) seen[g] = 1;
      for (const auto& [g, c] : seen) ++df[n - 1][g];
    }
  return df;
}

/// idf(g) = log(N / max(1, df(g))). A single-document corpus carries no
/// document-frequency information, so every n-gram gets weight 1.
inline double cider_idf(std::size_t documents, std::size_t df) {
  if (documents <= 1) return 1.0;
  return std::log(static_cast<double>(documents) / static_cast<double>(std::max<std::size_t>(1, df)));
}

namespace detail {

using TfIdf = std::map<std::vector<std::string>, double>;

inline TfIdf tfidf(const Tokens& t, std::size_t n, const NgramCounts& df, std::size_t documents) {
  TfIdf v;
  const NgramCounts counts = ngrams(t, n);
  std::size_t total = 0;
  for (const auto& [g, c] : counts) total += c;
  for (const auto& [g, c] : counts) {
    auto it = df.find(g);
    const std::size_t d = it == df.end() ? 0 : it->second;
    v[g] = static_cast<double>(c) / static_cast<double>(total) * cider_idf(documents, d);
  }
  return v;
}

inline double cosine(const TfIdf& a, const TfIdf& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (const auto& [g, x] : a) {
    na += x * x;
    auto it = b.find(g);
    if (it != b.end()) dot += x * it->second;
  }
  for (const auto& [g, y] : b) nb += y * y;
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace detail

/// Per-entry CIDEr: 10 x mean over n of the mean cosine similarity between
/// the hypothesis and each reference TF-IDF vector.
inline std::vector<double> cider_per_sentence(const EvalCorpus& corpus) {
  detail::check_corpus(corpus, "cider");
  const auto df = document_frequencies(corpus);
  const std::size_t N = corpus.size();
  std::vector<double> out;
  out.reserve(N);
  for (const auto& e : corpus) {
    double score = 0.0;
    for (std::size_t n = 1; n <= kMaxNgram; ++n) {
      const auto h = detail::tfidf(e.hypothesis, n, df[n - 1], N);
      double s = 0.0;
      for (const auto& r : e.references) s += detail::cosine(h, detail::tfidf(r, n, df[n - 1], N));
      score += s / static_cast<double>(e.references.size());
    }
    out.push_back(10.0 * score / static_cast<double>(kMaxNgram));
  }
  return out;
}

inline double cider(const EvalCorpus& corpus) {
  const auto per = cider_per_sentence(corpus);
  double s = 0.0;
  for (double v : per) s += v;
  return s / static_cast<double>(per.size());
}

inline EvalReport evaluate(const EvalCorpus& corpus) {
  EvalReport r;
  r.bleu4 = bleu4(corpus);
  r.per_sentence_cider = cider_per_sentence(corpus);
  double s = 0.0;
  for (double v : r.per_sentence_cider) s += v;
  r.cider = s / static_cast<double>(r.per_sentence_cider.size());
  return r;
}

}  // namespace tma
