#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "trace/common.hpp"
#include "trace/tokenizer.hpp"

namespace trace {

/// Opaque scoring contract shared by local models and remote services.
///
/// `log_odds` returns ln(P(trauma) / P(no trauma)) and must be a pure function
/// of its input once the predictor is constructed. Implementations are safe to
/// call concurrently from multiple threads.
class Predictor {
 public:
  virtual ~Predictor() = default;

  virtual double log_odds(std::string_view text) const = 0;

  // Scores a token sequence. The default joins the tokens with spaces, which
  // the tokenizer maps back to the same sequence; local models override this
  // to skip the round-trip.
  virtual double log_odds_tokens(std::span<const std::string> tokens) const {
    return log_odds(join_tokens(tokens));
  }

  virtual std::vector<double> log_odds_batch(std::span<const std::string> texts) const {
    std::vector<double> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(log_odds(t));
    return out;
  }

  virtual std::vector<double> log_odds_tokens_batch(std::span<const std::vector<std::string>> seqs) const {
    std::vector<double> out;
    out.reserve(seqs.size());
    for (const auto& s : seqs) out.push_back(log_odds_tokens(s));
    return out;
  }

  /// Dimension of latent(); 0 when the predictor exposes no latent space.
  virtual std::size_t latent_dim() const { return 0; }

  virtual std::vector<double> latent(std::string_view) const {
    throw Error(name() + ": predictor exposes no latent space");
  }

  virtual std::vector<std::vector<double>> latent_batch(std::span<const std::string> texts) const {
    std::vector<std::vector<double>> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(latent(t));
    return out;
  }

  virtual std::string name() const = 0;
};

/// 1 iff the predictor's log-odds strictly exceed the threshold (ties go to 0).
inline int classify(const Predictor& p, std::string_view text, double threshold_log_odds = 0.0) {
  return p.log_odds(text) > threshold_log_odds ? 1 : 0;
}

inline int classify_score(double log_odds, double threshold_log_odds = 0.0) {
  return log_odds > threshold_log_odds ? 1 : 0;
}

}  // namespace trace
