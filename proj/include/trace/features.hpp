#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "trace/common.hpp"
#include "trace/corpus.hpp"
#include "trace/tokenizer.hpp"

namespace trace {

/// Token <-> dense index map with document frequencies; indices follow
/// lexicographic token order.
class Vocabulary {
 public:
  Vocabulary() = default;

  Vocabulary(std::vector<std::string> tokens, std::vector<std::uint32_t> doc_freq, std::size_t total_docs)
      : tokens_(std::move(tokens)), doc_freq_(std::move(doc_freq)), total_docs_(total_docs) {
    if (tokens_.size() != doc_freq_.size()) throw InputError("vocabulary: token/df size mismatch");
    index_.reserve(tokens_.size());
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (doc_freq_[i] > total_docs_) throw InputError("vocabulary: df exceeds document count");
      if (!index_.emplace(tokens_[i], static_cast<std::uint32_t>(i)).second) {
        throw InputError("vocabulary: duplicate token '" + tokens_[i] + "'");
      }
    }
  }

  std::size_t size() const { return tokens_.size(); }
  std::size_t total_docs() const { return total_docs_; }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(std::size_t i) const { return tokens_.at(i); }
  std::uint32_t doc_freq(std::size_t i) const { return doc_freq_.at(i); }
  const std::vector<std::uint32_t>& doc_freqs() const { return doc_freq_; }

  std::optional<std::uint32_t> index_of(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  bool contains(const std::string& token) const { return index_.count(token) > 0; }

  /// Smooth inverse document frequency: ln((1 + N) / (1 + df)) + 1.
  double idf(std::size_t i) const {
    return std::log((1.0 + static_cast<double>(total_docs_)) / (1.0 + static_cast<double>(doc_freq_[i]))) + 1.0;
  }

 private:
  std::vector<std::string> tokens_;
  std::vector<std::uint32_t> doc_freq_;
  std::size_t total_docs_ = 0;
  std::unordered_map<std::string, std::uint32_t> index_;
};

/// Vocabulary of all terms with document frequency >= min_df over pre-tokenized documents.
inline Vocabulary build_vocab(std::span<const std::vector<std::string>> docs, std::size_t min_df = 1) {
  if (docs.empty()) throw InputError("empty corpus");
  std::map<std::string, std::uint32_t> df;
  std::vector<std::string> uniq;
  for (const auto& doc : docs) {
    uniq.assign(doc.begin(), doc.end());
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    for (const auto& t : uniq) ++df[t];
  }
  std::vector<std::string> tokens;
  std::vector<std::uint32_t> freqs;
  for (const auto& [t, f] : df) {
    if (f >= min_df) {
      tokens.push_back(t);
      freqs.push_back(f);
    }
  }
  return Vocabulary(std::move(tokens), std::move(freqs), docs.size());
}

inline std::vector<std::vector<std::string>> tokenize_corpus(const Corpus& corpus, const TokenizerConfig& cfg = {}) {
  std::vector<std::vector<std::string>> out;
  out.reserve(corpus.size());
  for (const auto& s : corpus) out.push_back(tokenize(s.text, cfg));
  return out;
}

inline Vocabulary build_vocab(const Corpus& corpus, std::size_t min_df = 1, const TokenizerConfig& cfg = {}) {
  if (corpus.empty()) throw InputError("empty corpus");
  const auto docs = tokenize_corpus(corpus, cfg);
  return build_vocab(std::span<const std::vector<std::string>>(docs), min_df);
}

/// Sparse vector with strictly increasing indices.
struct FeatureVector {
  std::vector<std::uint32_t> indices;
  std::vector<double> values;
  std::size_t dim = 0;

  double dot(std::span<const double> dense) const {
    double s = 0.0;
    for (std::size_t k = 0; k < indices.size(); ++k) s += values[k] * dense[indices[k]];
    return s;
  }

  double norm() const {
    double s = 0.0;
    for (double v : values) s += v * v;
    return std::sqrt(s);
  }
};

/// tf * idf per in-vocabulary term, L2-normalized; out-of-vocabulary terms are ignored.
inline FeatureVector tfidf_vectorize(std::span<const std::string> tokens, const Vocabulary& vocab) {
  std::map<std::uint32_t, double> tf;
  for (const auto& t : tokens) {
    if (auto i = vocab.index_of(t)) tf[*i] += 1.0;
  }
  FeatureVector fv;
  fv.dim = vocab.size();
  fv.indices.reserve(tf.size());
  fv.values.reserve(tf.size());
  double sq = 0.0;
  for (const auto& [i, count] : tf) {
    const double w = count * vocab.idf(i);
    fv.indices.push_back(i);
    fv.values.push_back(w);
    sq += w * w;
  }
  if (sq > 0.0) {
    const double inv = 1.0 / std::sqrt(sq);
    for (auto& v : fv.values) v *= inv;
  }
  return fv;
}

/// All contiguous n-grams for n in [lo, hi], ordered by (n, position); parts joined with '_'.
inline std::vector<std::string> extract_ngrams(std::span<const std::string> tokens, std::size_t lo, std::size_t hi) {
  if (lo < 1 || lo > hi) throw InputError("n-gram range must satisfy 1 <= lo <= hi");
  std::vector<std::string> out;
  for (std::size_t n = lo; n <= hi; ++n) {
    if (tokens.size() < n) break;
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
      std::string g = tokens[i];
      for (std::size_t k = 1; k < n; ++k) {
        g += '_';
        g += tokens[i + k];
      }
      out.push_back(std::move(g));
    }
  }
  return out;
}

}  // namespace trace
