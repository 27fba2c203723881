#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace orderlab::metrics {

using Tokens = std::vector<std::string>;

namespace detail {

inline std::string ngram_key(const Tokens& tokens, std::size_t start, int n) {
  std::string key;
  for (int i = 0; i < n; ++i) {
    if (i) key.push_back('\x1f');
    key += tokens[start + static_cast<std::size_t>(i)];
  }
  return key;
}

inline std::unordered_map<std::string, int> ngram_counts(const Tokens& tokens, int n) {
  std::unordered_map<std::string, int> counts;
  if (static_cast<int>(tokens.size()) >= n) {
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= tokens.size(); ++i) {
      ++counts[ngram_key(tokens, i, n)];
    }
  }
  return counts;
}

struct PrecisionCounts {
  long clipped = 0;
  long total = 0;
};

inline PrecisionCounts modified_precision(const Tokens& cand, const Tokens& ref, int n) {
  PrecisionCounts pc;
  const auto cc = ngram_counts(cand, n);
  const auto rc = ngram_counts(ref, n);
  for (const auto& [g, c] : cc) {
    pc.total += c;
    auto it = rc.find(g);
    if (it != rc.end()) pc.clipped += std::min(c, it->second);
  }
  return pc;
}

inline int lcs_length(const Tokens& a, const Tokens& b) {
  const std::size_t n = a.size(), m = b.size();
  std::vector<int> prev(m + 1, 0), cur(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

}  // namespace detail

inline constexpr double kBleuEpsilon = 1e-9;

// Sentence BLEU-n: geometric mean of epsilon-smoothed modified precisions of
// orders 1..n with the standard brevity penalty. Empty candidate scores 0.
inline double bleu_n(const Tokens& candidate, const Tokens& reference, int n) {
  if (n < 1) throw std::invalid_argument("bleu_n: order must be >= 1");
  if (reference.empty()) throw std::invalid_argument("bleu_n: empty reference");
  if (candidate.empty()) return 0.0;
  double log_sum = 0.0;
  for (int order = 1; order <= n; ++order) {
    const auto pc = detail::modified_precision(candidate, reference, order);
    const double p = pc.total > 0 && pc.clipped > 0
                         ? static_cast<double>(pc.clipped) / static_cast<double>(pc.total)
                         : kBleuEpsilon;
    log_sum += std::log(p);
  }
  const double c = static_cast<double>(candidate.size());
  const double r = static_cast<double>(reference.size());
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return bp * std::exp(log_sum / n);
}

// Corpus BLEU-n: pooled clipped counts, unsmoothed; any zero pooled
// precision gives 0.
inline double corpus_bleu_n(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references,
                            int n) {
  if (n < 1) throw std::invalid_argument("corpus_bleu_n: order must be >= 1");
  if (candidates.size() != references.size()) {
    throw std::invalid_argument("corpus_bleu_n: " + std::to_string(candidates.size()) + " candidates vs " +
                                std::to_string(references.size()) + " references");
  }
  if (candidates.empty()) throw std::invalid_argument("corpus_bleu_n: empty corpus");
  double log_sum = 0.0;
  long c_len = 0, r_len = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (references[i].empty()) throw std::invalid_argument("corpus_bleu_n: empty reference at sample " + std::to_string(i));
    c_len += static_cast<long>(candidates[i].size());
    r_len += static_cast<long>(references[i].size());
  }
  for (int order = 1; order <= n; ++order) {
    long clipped = 0, total = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      const auto pc = detail::modified_precision(candidates[i], references[i], order);
      clipped += pc.clipped;
      total += pc.total;
    }
    if (clipped == 0 || total == 0) return 0.0;
    log_sum += std::log(static_cast<double>(clipped) / static_cast<double>(total));
  }
  const double bp = c_len < r_len
                        ? std::exp(1.0 - static_cast<double>(r_len) / static_cast<double>(c_len))
                        : 1.0;
  return c_len == 0 ? 0.0 : bp * std::exp(log_sum / n);
}

// ROUGE-L F1 (beta = 1).
inline double rouge_l_f1(const Tokens& candidate, const Tokens& reference) {
  if (reference.empty()) throw std::invalid_argument("rouge_l_f1: empty reference");
  if (candidate.empty()) return 0.0;
  const int lcs = detail::lcs_length(candidate, reference);
  const double p = static_cast<double>(lcs) / static_cast<double>(candidate.size());
  const double r = static_cast<double>(lcs) / static_cast<double>(reference.size());
  return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
}

struct CiderScore {
  std::vector<double> per_sample;
  double mean = 0.0;
};

// Reference-corpus IDF table for CIDEr; reusable across candidate sets (the
// permutation sweep scores one candidate at a time against it).
class CiderIdf {
 public:
  CiderIdf(const std::vector<Tokens>& references, int n_max = 4) : n_max_(n_max) {
    if (references.size() < 2) {
      throw std::invalid_argument("cider: needs >= 2 samples, IDF is undefined on " +
                                  std::to_string(references.size()));
    }
    for (const auto& ref : references) {
      if (ref.empty()) throw std::invalid_argument("cider: empty reference");
    }
    n_samples_ = static_cast<long>(references.size());
    df_.resize(static_cast<std::size_t>(n_max_));
    for (int order = 1; order <= n_max_; ++order) {
      auto& table = df_[static_cast<std::size_t>(order - 1)];
      for (const auto& ref : references) {
        std::set<std::string> seen;
        if (static_cast<int>(ref.size()) >= order) {
          for (std::size_t i = 0; i + static_cast<std::size_t>(order) <= ref.size(); ++i) {
            seen.insert(detail::ngram_key(ref, i, order));
          }
        }
        for (const auto& g : seen) ++table[g];
      }
    }
  }

  // ln(N / df), df floored at 1.
  double idf(const std::string& gram, int order) const {
    const auto& table = df_[static_cast<std::size_t>(order - 1)];
    auto it = table.find(gram);
    const long df = it == table.end() ? 1 : std::max<long>(1, it->second);
    return std::log(static_cast<double>(n_samples_) / static_cast<double>(df));
  }

  int n_max() const { return n_max_; }

  // 10 * mean over orders of the TF-IDF cosine; orders where either side has
  // no n-grams contribute 0.
  double score(const Tokens& candidate, const Tokens& reference) const {
    double total = 0.0;
    for (int order = 1; order <= n_max_; ++order) {
      const auto cc = detail::ngram_counts(candidate, order);
      const auto rc = detail::ngram_counts(reference, order);
      if (cc.empty() || rc.empty()) continue;
      double dot = 0.0, cnorm = 0.0, rnorm = 0.0;
      for (const auto& [g, c] : cc) {
        const double w = static_cast<double>(c) * idf(g, order);
        cnorm += w * w;
        auto it = rc.find(g);
        if (it != rc.end()) dot += w * static_cast<double>(it->second) * idf(g, order);
      }
      for (const auto& [g, c] : rc) {
        const double w = static_cast<double>(c) * idf(g, order);
        rnorm += w * w;
      }
      if (cnorm > 0.0 && rnorm > 0.0) total += dot / (std::sqrt(cnorm) * std::sqrt(rnorm));
    }
    return 10.0 * total / static_cast<double>(n_max_);
  }

 private:
  int n_max_;
  long n_samples_ = 0;
  std::vector<std::map<std::string, long>> df_;
};

inline CiderScore cider(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references,
                        int n_max = 4) {
  if (candidates.size() != references.size()) {
    throw std::invalid_argument("cider: candidate/reference count mismatch");
  }
  const CiderIdf idf(references, n_max);
  CiderScore out;
  out.per_sample.reserve(candidates.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    out.per_sample.push_back(idf.score(candidates[i], references[i]));
    sum += out.per_sample.back();
  }
  out.mean = sum / static_cast<double>(candidates.size());
  return out;
}

// Entropy of the pooled empirical k-gram distribution over the generated
// corpus; responses shorter than k are skipped.
inline double entropy_k(const std::vector<Tokens>& corpus, int k = 4) {
  if (k < 1) throw std::invalid_argument("entropy_k: k must be >= 1");
  std::unordered_map<std::string, long> counts;
  long total = 0;
  for (const auto& response : corpus) {
    if (static_cast<int>(response.size()) < k) continue;
    for (std::size_t i = 0; i + static_cast<std::size_t>(k) <= response.size(); ++i) {
      ++counts[detail::ngram_key(response, i, k)];
      ++total;
    }
  }
  if (total == 0) {
    throw std::invalid_argument("entropy_k: no " + std::to_string(k) +
                                "-grams in the corpus; use a smaller k");
  }
  double h = 0.0;
  for (const auto& [g, c] : counts) {
    const double f = static_cast<double>(c) / static_cast<double>(total);
    h -= f * std::log(f);
  }
  return h;
}

// ---- persona consistency proxy ---------------------------------------------------

inline const std::unordered_set<std::string>& stopwords() {
  static const std::unordered_set<std::string> words = {
      "i",     "me",    "my",    "myself", "we",    "our",   "ours",  "you",   "your",  "yours", "he",
      "him",   "his",   "she",   "her",    "it",    "its",   "they",  "them",  "their", "what",  "which",
      "who",   "whom",  "this",  "that",   "these", "those", "am",    "is",    "are",   "was",   "were",
      "be",    "been",  "being", "have",   "has",   "had",   "do",    "does",  "did",   "a",     "an",
      "the",   "and",   "but",   "if",     "or",    "as",    "of",    "at",    "by",    "for",   "with",
      "about", "into",  "to",    "from",   "up",    "down",  "in",    "out",   "on",    "off",   "over",
      "under", "again", "then",  "once",   "here",  "there", "when",  "where", "why",   "how",   "all",
      "any",   "both",  "each",  "few",    "more",  "most",  "some",  "such",  "no",    "nor",   "not",
      "only",  "own",   "same",  "so",     "than",  "too",   "very",  "can",   "will",  "just",  "should",
      "now",   "dont",  "im",    "ive"};
  return words;
}

namespace detail {

inline std::set<std::string> content_tokens(const Tokens& tokens) {
  std::set<std::string> out;
  for (const auto& t : tokens) {
    if (stopwords().count(t)) continue;
    bool all_punct = !t.empty();
    for (unsigned char c : t) {
      if (!std::ispunct(c)) {
        all_punct = false;
        break;
      }
    }
    if (!all_punct) out.insert(t);
  }
  return out;
}

}  // namespace detail

// Max over persona sentences of the content-token F1 overlap. A lexical
// stand-in for the entailment-based C-score; see ExternalConsistencyScorer
// for plugging in a real model.
inline double persona_consistency_proxy(const Tokens& response,
                                        const std::vector<Tokens>& persona_sentences) {
  if (persona_sentences.empty()) {
    throw std::invalid_argument("persona_consistency_proxy: empty persona");
  }
  const auto cand = detail::content_tokens(response);
  double best = 0.0;
  for (const auto& sentence : persona_sentences) {
    const auto pers = detail::content_tokens(sentence);
    if (cand.empty() || pers.empty()) continue;
    long inter = 0;
    for (const auto& t : cand) {
      if (pers.count(t)) ++inter;
    }
    if (inter == 0) continue;
    const double p = static_cast<double>(inter) / static_cast<double>(cand.size());
    const double r = static_cast<double>(inter) / static_cast<double>(pers.size());
    best = std::max(best, 2.0 * p * r / (p + r));
  }
  return best;
}

}  // namespace orderlab::metrics
