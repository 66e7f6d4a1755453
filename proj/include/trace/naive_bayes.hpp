#pragma once

#include <cmath>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "trace/corpus.hpp"
#include "trace/features.hpp"
#include "trace/predictor.hpp"

namespace trace {

/// Bag-of-words Naive Bayes expressed as additive log-odds.
///
/// weight(t) = ln[(n1(t) + a) / (T1 + a|V|)] - ln[(n0(t) + a) / (T0 + a|V|)]
/// where |V| counts the training vocabulary plus one slot for unseen tokens,
/// n_c(t) are occurrence counts (use_counts) or per-document presence counts,
/// and T_c their class totals. Unseen tokens get the weight with n_c(t) = 0.
class NaiveBayesModel final : public Predictor {
 public:
  NaiveBayesModel() = default;

  NaiveBayesModel(Vocabulary vocab, std::vector<double> weights, double prior_log_odds, double unseen_weight,
                  double alpha, bool use_counts)
      : vocab_(std::move(vocab)),
        weights_(std::move(weights)),
        prior_log_odds_(prior_log_odds),
        unseen_weight_(unseen_weight),
        alpha_(alpha),
        use_counts_(use_counts) {
    if (weights_.size() != vocab_.size()) throw InputError("naive bayes: weight/vocabulary size mismatch");
    for (double w : weights_) {
      if (!std::isfinite(w)) throw InputError("naive bayes: non-finite token weight");
    }
  }

  double prior_log_odds() const { return prior_log_odds_; }
  double unseen_weight() const { return unseen_weight_; }
  double alpha() const { return alpha_; }
  bool use_counts() const { return use_counts_; }
  const Vocabulary& vocabulary() const { return vocab_; }
  const std::vector<double>& weights() const { return weights_; }

  double token_weight(const std::string& token) const {
    auto i = vocab_.index_of(token);
    return i ? weights_[*i] : unseen_weight_;
  }

  double log_odds(std::string_view text) const override { return log_odds_tokens(tokenize(text)); }

  double log_odds_tokens(std::span<const std::string> tokens) const override {
    double s = prior_log_odds_;
    if (use_counts_) {
      for (const auto& t : tokens) s += token_weight(t);
    } else {
      std::unordered_set<std::string_view> seen;
      for (const auto& t : tokens) {
        if (seen.insert(t).second) s += token_weight(t);
      }
    }
    return s;
  }

  std::string name() const override { return "naive_bayes"; }

 private:
  Vocabulary vocab_;
  std::vector<double> weights_;
  double prior_log_odds_ = 0.0;
  double unseen_weight_ = 0.0;
  double alpha_ = 1.0;
  bool use_counts_ = true;
};

inline NaiveBayesModel train_naive_bayes(const Corpus& corpus, double alpha, bool use_counts,
                                         const TokenizerConfig& cfg = {}) {
  if (!(alpha > 0.0)) throw InputError("alpha must be > 0");
  const auto labels = corpus.labels();
  const auto docs = tokenize_corpus(corpus, cfg);
  const double n1 = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  const double n0 = static_cast<double>(labels.size()) - n1;
  if (n1 == 0 || n0 == 0) throw InputError("degenerate prior: training corpus needs both classes");

  Vocabulary vocab = build_vocab(std::span<const std::vector<std::string>>(docs));
  std::vector<double> count1(vocab.size(), 0.0);
  std::vector<double> count0(vocab.size(), 0.0);
  std::vector<std::uint32_t> ids;
  for (std::size_t d = 0; d < docs.size(); ++d) {
    ids.clear();
    for (const auto& t : docs[d]) ids.push_back(*vocab.index_of(t));
    if (!use_counts) {
      std::sort(ids.begin(), ids.end());
      ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    }
    auto& target = labels[d] == 1 ? count1 : count0;
    for (auto i : ids) target[i] += 1.0;
  }
  double total1 = 0.0;
  double total0 = 0.0;
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    total1 += count1[i];
    total0 += count0[i];
  }
  const double v = static_cast<double>(vocab.size() + 1);
  const double denom1 = total1 + alpha * v;
  const double denom0 = total0 + alpha * v;
  std::vector<double> weights(vocab.size());
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    weights[i] = std::log((count1[i] + alpha) / denom1) - std::log((count0[i] + alpha) / denom0);
  }
  const double unseen = std::log(alpha / denom1) - std::log(alpha / denom0);
  return NaiveBayesModel(std::move(vocab), std::move(weights), std::log(n1 / n0), unseen, alpha, use_counts);
}

inline double nb_log_odds(const NaiveBayesModel& model, std::string_view text) { return model.log_odds(text); }

inline nlohmann::ordered_json to_json(const NaiveBayesModel& m) {
  nlohmann::ordered_json j;
  j["format"] = "trace-model";
  j["version"] = 1;
  j["type"] = "naive_bayes";
  j["alpha"] = m.alpha();
  j["use_counts"] = m.use_counts();
  j["prior_log_odds"] = m.prior_log_odds();
  j["unseen_weight"] = m.unseen_weight();
  j["total_docs"] = m.vocabulary().total_docs();
  j["tokens"] = m.vocabulary().tokens();
  j["doc_freq"] = m.vocabulary().doc_freqs();
  j["weights"] = m.weights();
  return j;
}

inline NaiveBayesModel naive_bayes_from_json(const nlohmann::json& j) {
  try {
    if (j.at("type") != "naive_bayes") throw InputError("not a naive_bayes model");
    if (j.at("version").get<int>() != 1) throw InputError("unsupported naive_bayes model version");
    Vocabulary vocab(j.at("tokens").get<std::vector<std::string>>(),
                     j.at("doc_freq").get<std::vector<std::uint32_t>>(), j.at("total_docs").get<std::size_t>());
    return NaiveBayesModel(std::move(vocab), j.at("weights").get<std::vector<double>>(),
                           j.at("prior_log_odds").get<double>(), j.at("unseen_weight").get<double>(),
                           j.at("alpha").get<double>(), j.at("use_counts").get<bool>());
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("naive_bayes model: ") + e.what());
  }
}

}  // namespace trace
