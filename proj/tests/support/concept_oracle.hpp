#pragma once

// Constructed latent space for concept-discovery tests.
//
// latent(text) is the sum of fixed token embeddings: "alpha" = e0,
// "bravo" = e1, "decoy" = 0.55 (e0 + e1), and noise tokens are small random
// unit-scale vectors in the remaining dimensions. The model predicts positive iff alpha
// or bravo occurs. No single direction separates {alpha, bravo} from decoy,
// so one concept caps agreement near 75% while two suffice.

#include <string>
#include <unordered_map>
#include <vector>

#include "trace/corpus.hpp"
#include "trace/predictor.hpp"

namespace trace::testing {

class ClusterOracle final : public Predictor {
 public:
  explicit ClusterOracle(std::size_t dim = 64, std::size_t n_noise = 40, double noise_scale = 1.0,
                         std::uint64_t seed = 7)
      : dim_(dim) {
    std::vector<double> e0(dim, 0.0), e1(dim, 0.0), decoy(dim, 0.0);
    e0[0] = 1.0;
    e1[1] = 1.0;
    decoy[0] = decoy[1] = 0.55;
    emb_["alpha"] = e0;
    emb_["bravo"] = e1;
    emb_["decoy"] = decoy;
    Rng rng(seed);
    for (std::size_t j = 0; j < n_noise; ++j) {
      std::vector<double> v(dim, 0.0);
      double n = 0.0;
      for (std::size_t i = 2; i < dim; ++i) {
        v[i] = standard_normal(rng);
        n += v[i] * v[i];
      }
      for (auto& x : v) x *= noise_scale / std::sqrt(n);
      noise_.push_back("n" + std::to_string(j));
      emb_[noise_.back()] = std::move(v);
    }
  }

  const std::vector<std::string>& noise_tokens() const { return noise_; }

  double log_odds(std::string_view text) const override { return log_odds_tokens(tokenize(text)); }

  double log_odds_tokens(std::span<const std::string> tokens) const override {
    for (const auto& t : tokens) {
      if (t == "alpha" || t == "bravo") return 5.0;
    }
    return -5.0;
  }

  std::size_t latent_dim() const override { return dim_; }

  std::vector<double> latent(std::string_view text) const override {
    std::vector<double> out(dim_, 0.0);
    for (const auto& t : tokenize(text)) {
      const auto it = emb_.find(t);
      if (it == emb_.end()) continue;
      for (std::size_t i = 0; i < dim_; ++i) out[i] += it->second[i];
    }
    return out;
  }

  std::string name() const override { return "cluster-oracle"; }

  // Each document holds `length` noise tokens plus at most one special token:
  // alpha, bravo, decoy or none with equal probability.
  Corpus make_corpus(std::size_t n_docs, std::uint64_t seed, std::size_t length = 12,
                     const std::string& prefix = "c") const {
    Rng rng(seed);
    std::vector<Segment> segs;
    static const char* kinds[] = {"alpha", "bravo", "decoy", nullptr};
    for (std::size_t d = 0; d < n_docs; ++d) {
      std::vector<std::string> toks;
      for (std::size_t i = 0; i < length; ++i) toks.push_back(noise_[uniform_index(rng, noise_.size())]);
      const char* special = kinds[uniform_index(rng, 4)];
      if (special) toks.insert(toks.begin() + static_cast<long>(uniform_index(rng, toks.size() + 1)), special);
      Segment s;
      s.id = prefix + std::to_string(d);
      s.text = join_tokens(toks);
      s.label = log_odds_tokens(toks) > 0 ? 1 : 0;
      s.domain = "oracle";
      segs.push_back(std::move(s));
    }
    return Corpus(std::move(segs), "oracle");
  }

 private:
  std::size_t dim_;
  std::vector<std::string> noise_;
  std::unordered_map<std::string, std::vector<double>> emb_;
};

}  // namespace trace::testing
