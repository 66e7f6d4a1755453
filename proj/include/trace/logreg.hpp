#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "trace/corpus.hpp"
#include "trace/features.hpp"
#include "trace/predictor.hpp"

namespace trace {

enum class Penalty { l2, none };

inline Penalty penalty_from_string(const std::string& s) {
  if (s == "l2") return Penalty::l2;
  if (s == "none") return Penalty::none;
  throw InputError("penalty must be 'l2' or 'none', got '" + s + "'");
}

inline std::string to_string(Penalty p) { return p == Penalty::l2 ? "l2" : "none"; }

struct LogRegConfig {
  std::size_t ngram_lo = 1;
  std::size_t ngram_hi = 2;
  double C = 1.0;
  Penalty penalty = Penalty::l2;
  std::size_t max_iter = 5000;
  double tol = 1e-6;
};

struct TrainingReport {
  std::size_t iterations = 0;
  bool converged = false;
  double final_loss = 0.0;
  double gradient_norm = 0.0;
  std::vector<double> loss_history;
  std::vector<std::string> warnings;
};

/// Logistic regression over L2-normalized TF-IDF n-gram features.
class LogRegModel final : public Predictor {
 public:
  LogRegModel() = default;

  LogRegModel(Vocabulary ngram_vocab, std::vector<double> weights, double bias, LogRegConfig cfg)
      : vocab_(std::move(ngram_vocab)), weights_(std::move(weights)), bias_(bias), cfg_(cfg) {
    if (weights_.size() != vocab_.size()) throw InputError("logreg: weight/vocabulary size mismatch");
    for (double w : weights_) {
      if (!std::isfinite(w)) throw InputError("logreg: non-finite weight");
    }
  }

  const Vocabulary& vocabulary() const { return vocab_; }
  const std::vector<double>& weights() const { return weights_; }
  double bias() const { return bias_; }
  const LogRegConfig& config() const { return cfg_; }
  const TrainingReport& report() const { return report_; }
  void set_report(TrainingReport r) { report_ = std::move(r); }

  FeatureVector features(std::span<const std::string> tokens) const {
    const auto grams = extract_ngrams(tokens, cfg_.ngram_lo, cfg_.ngram_hi);
    return tfidf_vectorize(grams, vocab_);
  }

  double log_odds(std::string_view text) const override { return log_odds_tokens(tokenize(text)); }

  double log_odds_tokens(std::span<const std::string> tokens) const override {
    return features(tokens).dot(weights_) + bias_;
  }

  std::string name() const override { return "logreg"; }

 private:
  Vocabulary vocab_;
  std::vector<double> weights_;
  double bias_ = 0.0;
  LogRegConfig cfg_;
  TrainingReport report_;
};

namespace detail {

struct LogRegProblem {
  std::vector<FeatureVector> x;
  std::vector<double> y;
  double inv_c = 0.0;  // 1/C, or 0 without penalty
  std::size_t dim = 0;

  // Parameters are [w_0 .. w_{dim-1}, bias].
  double loss(std::span<const double> theta) const {
    const double b = theta[dim];
    double total = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double z = x[i].dot(theta) + b;
      total += softplus(z) - y[i] * z;
    }
    double reg = 0.0;
    for (std::size_t k = 0; k < dim; ++k) reg += theta[k] * theta[k];
    return total / static_cast<double>(x.size()) + 0.5 * inv_c * reg;
  }

  std::vector<double> gradient(std::span<const double> theta) const {
    std::vector<double> g(dim + 1, 0.0);
    const double b = theta[dim];
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double r = sigmoid(x[i].dot(theta) + b) - y[i];
      for (std::size_t k = 0; k < x[i].indices.size(); ++k) g[x[i].indices[k]] += r * x[i].values[k];
      g[dim] += r;
    }
    const double inv_n = 1.0 / static_cast<double>(x.size());
    for (auto& v : g) v *= inv_n;
    for (std::size_t k = 0; k < dim; ++k) g[k] += inv_c * theta[k];
    return g;
  }
};

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace detail

/// Full-batch gradient descent with Armijo backtracking from a zero start.
///
/// Minimizes mean logistic loss + (1/(2C))||w||^2 (bias unpenalized) until the
/// gradient norm drops below cfg.tol or cfg.max_iter is hit; in the latter case
/// the model is still returned with a warning in its report.
inline LogRegModel train_ngram_logreg(const Corpus& corpus, const LogRegConfig& cfg,
                                      const TokenizerConfig& tok = {}) {
  if (cfg.penalty == Penalty::l2 && !(cfg.C > 0.0)) throw InputError("C must be > 0 with l2 penalty");
  const auto labels = corpus.labels();
  const auto pos = std::count(labels.begin(), labels.end(), 1);
  if (pos == 0 || pos == static_cast<long>(labels.size())) {
    throw InputError("logreg training corpus needs both classes");
  }
  const auto docs = tokenize_corpus(corpus, tok);
  std::vector<std::vector<std::string>> grams;
  grams.reserve(docs.size());
  for (const auto& d : docs) grams.push_back(extract_ngrams(d, cfg.ngram_lo, cfg.ngram_hi));
  Vocabulary vocab = build_vocab(std::span<const std::vector<std::string>>(grams));

  detail::LogRegProblem prob;
  prob.dim = vocab.size();
  prob.inv_c = cfg.penalty == Penalty::l2 ? 1.0 / cfg.C : 0.0;
  for (std::size_t i = 0; i < grams.size(); ++i) {
    prob.x.push_back(tfidf_vectorize(grams[i], vocab));
    prob.y.push_back(static_cast<double>(labels[i]));
  }

  std::vector<double> theta(prob.dim + 1, 0.0);
  TrainingReport report;
  double f = prob.loss(theta);
  report.loss_history.push_back(f);
  double step = 1.0;
  std::vector<double> trial(theta.size());
  for (std::size_t it = 0; it < cfg.max_iter; ++it) {
    const auto g = prob.gradient(theta);
    const double gnorm = detail::l2_norm(g);
    report.gradient_norm = gnorm;
    if (gnorm < cfg.tol) {
      report.converged = true;
      break;
    }
    step *= 2.0;
    double f_new = f;
    bool accepted = false;
    while (step > 1e-20) {
      for (std::size_t k = 0; k < theta.size(); ++k) trial[k] = theta[k] - step * g[k];
      f_new = prob.loss(trial);
      if (f_new <= f - 0.5 * step * gnorm * gnorm) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      report.warnings.push_back("line search stalled at iteration " + std::to_string(it));
      break;
    }
    theta.swap(trial);
    f = f_new;
    report.loss_history.push_back(f);
    report.iterations = it + 1;
  }
  if (!report.converged) {
    report.gradient_norm = detail::l2_norm(prob.gradient(theta));
    report.converged = report.gradient_norm < cfg.tol;
  }
  if (!report.converged) {
    report.warnings.push_back("did not converge within " + std::to_string(cfg.max_iter) +
                              " iterations (gradient norm " + std::to_string(report.gradient_norm) + ")");
  }
  report.final_loss = f;
  const double bias = theta.back();
  theta.pop_back();
  LogRegModel model(std::move(vocab), std::move(theta), bias, cfg);
  model.set_report(std::move(report));
  return model;
}

inline nlohmann::ordered_json to_json(const LogRegModel& m) {
  nlohmann::ordered_json j;
  j["format"] = "trace-model";
  j["version"] = 1;
  j["type"] = "logreg";
  j["n_gram_range"] = {m.config().ngram_lo, m.config().ngram_hi};
  j["C"] = m.config().C;
  j["penalty"] = to_string(m.config().penalty);
  j["bias"] = m.bias();
  j["total_docs"] = m.vocabulary().total_docs();
  j["ngrams"] = m.vocabulary().tokens();
  j["doc_freq"] = m.vocabulary().doc_freqs();
  j["weights"] = m.weights();
  j["training"] = {{"iterations", m.report().iterations},
                   {"converged", m.report().converged},
                   {"final_loss", m.report().final_loss},
                   {"gradient_norm", m.report().gradient_norm},
                   {"warnings", m.report().warnings}};
  return j;
}

inline LogRegModel logreg_from_json(const nlohmann::json& j) {
  try {
    if (j.at("type") != "logreg") throw InputError("not a logreg model");
    if (j.at("version").get<int>() != 1) throw InputError("unsupported logreg model version");
    LogRegConfig cfg;
    const auto range = j.at("n_gram_range").get<std::vector<std::size_t>>();
    if (range.size() != 2) throw InputError("n_gram_range must have two entries");
    cfg.ngram_lo = range[0];
    cfg.ngram_hi = range[1];
    cfg.C = j.at("C").get<double>();
    cfg.penalty = penalty_from_string(j.at("penalty").get<std::string>());
    Vocabulary vocab(j.at("ngrams").get<std::vector<std::string>>(),
                     j.at("doc_freq").get<std::vector<std::uint32_t>>(), j.at("total_docs").get<std::size_t>());
    return LogRegModel(std::move(vocab), j.at("weights").get<std::vector<double>>(), j.at("bias").get<double>(), cfg);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("logreg model: ") + e.what());
  }
}

}  // namespace trace
