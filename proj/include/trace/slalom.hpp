#pragma once

#include <cmath>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "trace/common.hpp"
#include "trace/predictor.hpp"

namespace trace {

/// Two-parameter-per-token surrogate: a sequence scores
/// sum_i softmax(s)_i * v(t_i), the importance-weighted mean of token values.
class SlalomModel {
 public:
  SlalomModel() = default;

  SlalomModel(std::vector<std::string> tokens, std::vector<double> value, std::vector<double> importance)
      : tokens_(std::move(tokens)), value_(std::move(value)), importance_(std::move(importance)) {
    if (value_.size() != tokens_.size() || importance_.size() != tokens_.size()) {
      throw InputError("slalom: value/importance length differs from vocabulary");
    }
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!std::isfinite(value_[i]) || !std::isfinite(importance_[i])) {
        throw InputError("slalom: non-finite parameter for token '" + tokens_[i] + "'");
      }
      if (!index_.emplace(tokens_[i], i).second) throw InputError("slalom: duplicate token '" + tokens_[i] + "'");
    }
  }

  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::vector<double>& values() const { return value_; }
  const std::vector<double>& importances() const { return importance_; }
  std::size_t size() const { return tokens_.size(); }

  std::size_t index_of(const std::string& token) const {
    const auto it = index_.find(token);
    if (it == index_.end()) throw InputError("token not fitted: '" + token + "'");
    return it->second;
  }

  double value(const std::string& token) const { return value_[index_of(token)]; }
  double importance(const std::string& token) const { return importance_[index_of(token)]; }

  double predict_indices(std::span<const std::size_t> idx) const {
    if (idx.empty()) throw InputError("slalom: cannot score an empty sequence");
    double mx = importance_[idx[0]];
    for (auto i : idx) mx = std::max(mx, importance_[i]);
    double z = 0.0;
    double acc = 0.0;
    for (auto i : idx) {
      const double e = std::exp(importance_[i] - mx);
      z += e;
      acc += e * value_[i];
    }
    return acc / z;
  }

  double predict(std::span<const std::string> seq) const {
    std::vector<std::size_t> idx;
    idx.reserve(seq.size());
    for (const auto& t : seq) idx.push_back(index_of(t));
    return predict_indices(idx);
  }

  double fit_loss = 0.0;
  std::size_t n_background = 0;
  std::uint64_t seed = 0;
  bool importance_identifiable = true;

 private:
  std::vector<std::string> tokens_;
  std::vector<double> value_;
  std::vector<double> importance_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline double slalom_predict(const SlalomModel& m, std::span<const std::string> tokens) { return m.predict(tokens); }

/// Exposes a SLALOM model through the Predictor contract (token sequences only;
/// text is tokenized).
class SlalomPredictor final : public Predictor {
 public:
  explicit SlalomPredictor(SlalomModel m) : model_(std::move(m)) {}
  double log_odds(std::string_view text) const override { return log_odds_tokens(tokenize(text)); }
  double log_odds_tokens(std::span<const std::string> tokens) const override { return model_.predict(tokens); }
  std::string name() const override { return "slalom"; }

 private:
  SlalomModel model_;
};

struct SlalomConfig {
  std::size_t n_background = 100000;
  std::size_t epochs = 30;
  std::size_t batch_size = 256;
  double lr = 0.05;        // Adam step size, decayed linearly to lr_final
  double lr_final = 1e-4;
  std::uint64_t seed = 0;
};

/// Fits a SLALOM surrogate to `predictor` on uniformly drawn ordered token
/// pairs, minimizing the mean squared error of the pair prediction with Adam.
///
/// Distinct pairs are scored once. Importances are reported centered to mean
/// zero; for a single-token vocabulary they are not identifiable and stay 0.
inline SlalomModel fit_slalom(const Predictor& predictor, std::vector<std::string> vocab, const SlalomConfig& cfg) {
  {
    std::map<std::string, int> seen;
    for (const auto& t : vocab) {
      if (t.empty()) throw InputError("slalom: empty token in vocabulary");
      if (seen[t]++) throw InputError("slalom: duplicate token '" + t + "' in vocabulary");
    }
  }
  if (vocab.empty()) throw InputError("slalom: vocabulary is empty");
  if (cfg.n_background == 0) throw InputError("slalom: n_background must be >= 1");
  if (cfg.batch_size == 0) throw InputError("slalom: batch_size must be >= 1");
  if (!(cfg.lr > 0.0) || cfg.lr_final < 0.0) throw InputError("slalom: learning rates must be positive");
  const std::size_t V = vocab.size();

  if (V == 1) {
    const std::vector<std::string> pair{vocab[0], vocab[0]};
    const double v = predictor.log_odds_tokens(pair);
    if (!std::isfinite(v)) throw Error("slalom diverged; reduce lr");
    SlalomModel m(std::move(vocab), {v}, {0.0});
    m.n_background = cfg.n_background;
    m.seed = cfg.seed;
    m.importance_identifiable = false;
    return m;
  }

  Rng rng(derive_seed(cfg.seed, 0));
  std::vector<std::uint32_t> a(cfg.n_background);
  std::vector<std::uint32_t> b(cfg.n_background);
  for (std::size_t k = 0; k < cfg.n_background; ++k) {
    a[k] = static_cast<std::uint32_t>(uniform_index(rng, V));
    b[k] = static_cast<std::uint32_t>(uniform_index(rng, V));
  }

  // Score each distinct pair once.
  std::unordered_map<std::uint64_t, std::size_t> pair_slot;
  std::vector<std::vector<std::string>> seqs;
  std::vector<std::size_t> slot(cfg.n_background);
  for (std::size_t k = 0; k < cfg.n_background; ++k) {
    const std::uint64_t key = (static_cast<std::uint64_t>(a[k]) << 32) | b[k];
    auto [it, fresh] = pair_slot.emplace(key, seqs.size());
    if (fresh) seqs.push_back({vocab[a[k]], vocab[b[k]]});
    slot[k] = it->second;
  }
  const auto scored = predictor.log_odds_tokens_batch(seqs);
  if (scored.size() != seqs.size()) throw Error("slalom: predictor returned a short batch");
  std::vector<double> y(cfg.n_background);
  for (std::size_t k = 0; k < cfg.n_background; ++k) {
    y[k] = scored[slot[k]];
    if (!std::isfinite(y[k])) throw Error("slalom: predictor returned a non-finite value");
  }

  // Start from the mean target of the pairs each token appears in, s = 0.
  std::vector<double> v(V, 0.0);
  std::vector<double> s(V, 0.0);
  {
    std::vector<double> cnt(V, 0.0);
    double grand = 0.0;
    for (std::size_t k = 0; k < cfg.n_background; ++k) {
      v[a[k]] += y[k];
      v[b[k]] += y[k];
      cnt[a[k]] += 1.0;
      cnt[b[k]] += 1.0;
      grand += y[k];
    }
    grand /= static_cast<double>(cfg.n_background);
    for (std::size_t t = 0; t < V; ++t) v[t] = cnt[t] > 0.0 ? v[t] / cnt[t] : grand;
  }

  auto pair_pred = [&](std::size_t k) {
    const double w = sigmoid(s[a[k]] - s[b[k]]);
    return w * v[a[k]] + (1.0 - w) * v[b[k]];
  };

  // Adam over the flat parameter vector [v..., s...].
  constexpr double beta1 = 0.9;
  constexpr double beta2 = 0.999;
  constexpr double eps = 1e-8;
  std::vector<double> m1(2 * V, 0.0);
  std::vector<double> m2(2 * V, 0.0);
  std::vector<double> g(2 * V, 0.0);
  std::vector<std::size_t> order(cfg.n_background);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffle_rng(derive_seed(cfg.seed, 1));
  const std::size_t steps_per_epoch = (cfg.n_background + cfg.batch_size - 1) / cfg.batch_size;
  const double total_steps = static_cast<double>(cfg.epochs * steps_per_epoch);
  std::size_t t_step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle(std::span<std::size_t>(order), shuffle_rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const auto stop = std::min(order.size(), start + cfg.batch_size);
      const double inv = 1.0 / static_cast<double>(stop - start);
      for (std::size_t q = start; q < stop; ++q) {
        const auto k = order[q];
        const auto i = a[k];
        const auto j = b[k];
        const double w = sigmoid(s[i] - s[j]);
        const double r = w * v[i] + (1.0 - w) * v[j] - y[k];
        // d pred / d s_i = w (1 - w) (v_i - v_j), and the negative for s_j
        const double ds = w * (1.0 - w) * (v[i] - v[j]);
        g[i] += 2.0 * r * w * inv;
        g[j] += 2.0 * r * (1.0 - w) * inv;
        g[V + i] += 2.0 * r * ds * inv;
        g[V + j] -= 2.0 * r * ds * inv;
      }
      ++t_step;
      const double frac = static_cast<double>(t_step - 1) / std::max(1.0, total_steps - 1.0);
      const double lr = cfg.lr + (cfg.lr_final - cfg.lr) * frac;
      const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_step));
      const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_step));
      // Dense moment update keeps Adam exact; V is small relative to a batch.
      for (std::size_t p = 0; p < 2 * V; ++p) {
        m1[p] = beta1 * m1[p] + (1.0 - beta1) * g[p];
        m2[p] = beta2 * m2[p] + (1.0 - beta2) * g[p] * g[p];
        const double upd = lr * (m1[p] / c1) / (std::sqrt(m2[p] / c2) + eps);
        if (p < V) {
          v[p] -= upd;
        } else {
          s[p - V] -= upd;
        }
        g[p] = 0.0;
      }
    }
    for (std::size_t p = 0; p < V; ++p) {
      if (!std::isfinite(v[p]) || !std::isfinite(s[p])) throw Error("slalom diverged; reduce lr");
    }
  }

  double mse = 0.0;
  for (std::size_t k = 0; k < cfg.n_background; ++k) {
    const double r = pair_pred(k) - y[k];
    mse += r * r;
  }
  mse /= static_cast<double>(cfg.n_background);
  if (!std::isfinite(mse)) throw Error("slalom diverged; reduce lr");

  const double s_mean = mean_of(s);
  for (auto& x : s) x -= s_mean;
  SlalomModel model(std::move(vocab), std::move(v), std::move(s));
  model.fit_loss = mse;
  model.n_background = cfg.n_background;
  model.seed = cfg.seed;
  return model;
}

inline nlohmann::ordered_json to_json(const SlalomModel& m) {
  nlohmann::ordered_json j;
  j["format"] = "trace-slalom";
  j["version"] = 1;
  j["fit_loss"] = m.fit_loss;
  j["n_background"] = m.n_background;
  j["seed"] = m.seed;
  j["importance_identifiable"] = m.importance_identifiable;
  j["tokens"] = m.tokens();
  j["value"] = m.values();
  j["importance"] = m.importances();
  return j;
}

inline SlalomModel slalom_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != "trace-slalom") throw InputError("not a slalom model");
    SlalomModel m(j.at("tokens").get<std::vector<std::string>>(), j.at("value").get<std::vector<double>>(),
                  j.at("importance").get<std::vector<double>>());
    m.fit_loss = j.at("fit_loss").get<double>();
    m.n_background = j.at("n_background").get<std::size_t>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.importance_identifiable = j.value("importance_identifiable", true);
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("slalom model: ") + e.what());
  }
}

}  // namespace trace
