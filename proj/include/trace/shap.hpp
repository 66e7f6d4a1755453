#pragma once

#include <bit>
#include <cmath>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "trace/common.hpp"
#include "trace/predictor.hpp"

namespace trace {

struct ShapReport {
  std::vector<std::string> tokens;
  std::vector<double> phi;
  std::vector<double> std_err;  // per-token standard error; zeros for exact values
  double baseline_value = 0.0;  // value of the empty coalition
  double full_value = 0.0;
  std::size_t n_samples = 0;    // sampled permutations; 0 for exact enumeration
  std::uint64_t seed = 0;
  bool exact = false;

  double residual() const {
    double s = 0.0;
    for (double p : phi) s += p;
    return s - (full_value - baseline_value);
  }

  // Standard error of sum(phi), treating per-token estimates as independent.
  double sum_std_err() const {
    double s = 0.0;
    for (double e : std_err) s += e * e;
    return std::sqrt(s);
  }
};

struct ShapConfig {
  std::size_t n_samples = 10000;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  // Removed tokens are dropped (subsequence semantics) unless a mask token is
  // given, in which case they are replaced by it.
  std::optional<std::string> mask_token;
};

/// |sum(phi) - (full - baseline)| <= k * SE, with a floating-point allowance so
/// a zero-variance estimate is not failed by rounding.
inline bool efficiency_holds(const ShapReport& r, double k = 3.0) {
  const double slack = 1e-9 * (1.0 + std::abs(r.full_value) + std::abs(r.baseline_value));
  return std::abs(r.residual()) <= k * r.sum_std_err() + slack;
}

namespace detail {

// A coalition is a byte string of 0/1 flags, one per token.
using Coalition = std::string;

inline std::vector<std::string> coalition_tokens(std::span<const std::string> tokens, const Coalition& c,
                                                 const std::optional<std::string>& mask) {
  std::vector<std::string> out;
  out.reserve(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (c[i]) {
      out.push_back(tokens[i]);
    } else if (mask) {
      out.push_back(*mask);
    }
  }
  return out;
}

// Evaluates every coalition not yet in `memo` with one batched predictor call.
inline void evaluate_coalitions(const Predictor& p, std::span<const std::string> tokens,
                                const std::vector<Coalition>& wanted, const std::optional<std::string>& mask,
                                std::unordered_map<Coalition, double>& memo) {
  std::vector<Coalition> missing;
  std::vector<std::vector<std::string>> seqs;
  for (const auto& c : wanted) {
    if (memo.count(c)) continue;
    memo.emplace(c, 0.0);
    missing.push_back(c);
    seqs.push_back(coalition_tokens(tokens, c, mask));
  }
  if (missing.empty()) return;
  std::vector<double> values;
  try {
    values = p.log_odds_tokens_batch(seqs);
  } catch (const std::exception& e) {
    for (const auto& c : missing) memo.erase(c);
    throw Error(std::string("shap: predictor failed: ") + e.what());
  }
  if (values.size() != missing.size()) throw Error("shap: predictor returned a short batch");
  for (std::size_t k = 0; k < missing.size(); ++k) {
    if (!std::isfinite(values[k])) {
      const auto at = missing[k].find('\0');
      throw Error("shap: predictor returned a non-finite value for a coalition without token " +
                  std::to_string(at == std::string::npos ? tokens.size() : at));
    }
    memo[missing[k]] = values[k];
  }
}

inline constexpr std::size_t kPermutationChunk = 256;

}  // namespace detail

/// Permutation-sampling Shapley estimate over the tokens of one instance.
///
/// Permutations are drawn in fixed chunks, each with its own derived seed, so
/// the result is identical for any job count. Within a chunk coalition values
/// are memoized and fetched in one batch.
inline ShapReport shap_sample_tokens(const Predictor& predictor, std::vector<std::string> tokens,
                                     const ShapConfig& cfg) {
  if (tokens.empty()) throw InputError("shap: text has no tokens");
  if (cfg.n_samples == 0) throw InputError("shap: n_samples must be >= 1");
  const std::size_t n = tokens.size();
  const std::size_t n_chunks = (cfg.n_samples + detail::kPermutationChunk - 1) / detail::kPermutationChunk;

  // Per chunk: sum and sum of squares of each token's marginal contribution.
  struct ChunkStats {
    std::vector<double> sum;
    std::vector<double> sumsq;
  };
  std::vector<ChunkStats> stats(n_chunks);
  double empty_value = 0.0;
  double full_value = 0.0;
  {
    std::unordered_map<detail::Coalition, double> memo;
    const detail::Coalition none(n, '\0');
    const detail::Coalition all(n, '\1');
    detail::evaluate_coalitions(predictor, tokens, {none, all}, cfg.mask_token, memo);
    empty_value = memo.at(none);
    full_value = memo.at(all);
  }

  parallel_for(n_chunks, cfg.jobs, [&](std::size_t chunk) {
    const std::size_t first = chunk * detail::kPermutationChunk;
    const std::size_t count = std::min(detail::kPermutationChunk, cfg.n_samples - first);
    Rng rng(derive_seed(cfg.seed, chunk));
    std::vector<std::vector<std::size_t>> perms(count, std::vector<std::size_t>(n));
    std::vector<detail::Coalition> wanted;
    for (auto& perm : perms) {
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      shuffle(std::span<std::size_t>(perm), rng);
      detail::Coalition c(n, '\0');
      for (std::size_t k = 0; k + 1 < n; ++k) {
        c[perm[k]] = '\1';
        wanted.push_back(c);
      }
    }
    std::unordered_map<detail::Coalition, double> memo;
    memo.emplace(detail::Coalition(n, '\0'), empty_value);
    memo.emplace(detail::Coalition(n, '\1'), full_value);
    detail::evaluate_coalitions(predictor, tokens, wanted, cfg.mask_token, memo);

    auto& st = stats[chunk];
    st.sum.assign(n, 0.0);
    st.sumsq.assign(n, 0.0);
    for (const auto& perm : perms) {
      detail::Coalition c(n, '\0');
      double prev = empty_value;
      for (std::size_t k = 0; k < n; ++k) {
        c[perm[k]] = '\1';
        const double cur = memo.at(c);
        const double d = cur - prev;
        st.sum[perm[k]] += d;
        st.sumsq[perm[k]] += d * d;
        prev = cur;
      }
    }
  });

  ShapReport r;
  r.tokens = std::move(tokens);
  r.baseline_value = empty_value;
  r.full_value = full_value;
  r.n_samples = cfg.n_samples;
  r.seed = cfg.seed;
  r.phi.assign(n, 0.0);
  r.std_err.assign(n, 0.0);
  const double m = static_cast<double>(cfg.n_samples);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    double ss = 0.0;
    for (const auto& st : stats) {
      s += st.sum[i];
      ss += st.sumsq[i];
    }
    const double mean = s / m;
    r.phi[i] = mean;
    if (cfg.n_samples > 1) {
      const double var = std::max(0.0, (ss - m * mean * mean) / (m - 1.0));
      r.std_err[i] = std::sqrt(var / m);
    }
  }
  return r;
}

inline ShapReport shap_sample(const Predictor& predictor, std::string_view text, const ShapConfig& cfg,
                              const TokenizerConfig& tok = {}) {
  return shap_sample_tokens(predictor, tokenize(text, tok), cfg);
}

inline constexpr std::size_t kExactShapLimit = 12;

/// Exact Shapley values by enumerating all 2^n coalitions (n <= 12).
inline ShapReport exact_shap_tokens(const Predictor& predictor, std::vector<std::string> tokens,
                                    const std::optional<std::string>& mask_token = std::nullopt) {
  const std::size_t n = tokens.size();
  if (n == 0) throw InputError("shap: text has no tokens");
  if (n > kExactShapLimit) {
    throw InputError("exact oracle limit exceeded (" + std::to_string(n) + " tokens > " +
                     std::to_string(kExactShapLimit) + ")");
  }
  const std::size_t subsets = std::size_t{1} << n;
  std::vector<std::vector<std::string>> seqs(subsets);
  for (std::size_t mask = 0; mask < subsets; ++mask) {
    for (std::size_t i = 0; i < n; ++i) {
      if (mask & (std::size_t{1} << i)) {
        seqs[mask].push_back(tokens[i]);
      } else if (mask_token) {
        seqs[mask].push_back(*mask_token);
      }
    }
  }
  std::vector<double> v;
  try {
    v = predictor.log_odds_tokens_batch(seqs);
  } catch (const std::exception& e) {
    throw Error(std::string("shap: predictor failed: ") + e.what());
  }
  // weight(|S|) = |S|! (n - |S| - 1)! / n!
  std::vector<double> weight(n);
  for (std::size_t s = 0; s < n; ++s) {
    weight[s] = std::exp(std::lgamma(static_cast<double>(s) + 1.0) + std::lgamma(static_cast<double>(n - s)) -
                         std::lgamma(static_cast<double>(n) + 1.0));
  }
  ShapReport r;
  r.phi.assign(n, 0.0);
  r.std_err.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t bit = std::size_t{1} << i;
    double acc = 0.0;
    for (std::size_t mask = 0; mask < subsets; ++mask) {
      if (mask & bit) continue;
      acc += weight[static_cast<std::size_t>(std::popcount(mask))] * (v[mask | bit] - v[mask]);
    }
    r.phi[i] = acc;
  }
  r.tokens = std::move(tokens);
  r.baseline_value = v.front();
  r.full_value = v.back();
  r.exact = true;
  return r;
}

inline ShapReport exact_shap(const Predictor& predictor, std::string_view text, const TokenizerConfig& tok = {}) {
  return exact_shap_tokens(predictor, tokenize(text, tok));
}

inline nlohmann::ordered_json to_json(const ShapReport& r) {
  nlohmann::ordered_json j;
  j["tokens"] = r.tokens;
  j["phi"] = r.phi;
  j["std_err"] = r.std_err;
  j["baseline_value"] = r.baseline_value;
  j["full_value"] = r.full_value;
  j["n_samples"] = r.n_samples;
  j["seed"] = r.seed;
  j["exact"] = r.exact;
  j["residual"] = r.residual();
  return j;
}

inline ShapReport shap_report_from_json(const nlohmann::json& j) {
  try {
    ShapReport r;
    r.tokens = j.at("tokens").get<std::vector<std::string>>();
    r.phi = j.at("phi").get<std::vector<double>>();
    r.std_err = j.value("std_err", std::vector<double>(r.phi.size(), 0.0));
    r.baseline_value = j.at("baseline_value").get<double>();
    r.full_value = j.at("full_value").get<double>();
    r.n_samples = j.at("n_samples").get<std::size_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.exact = j.value("exact", false);
    if (r.phi.size() != r.tokens.size() || r.std_err.size() != r.tokens.size()) {
      throw InputError("shap report: phi/std_err length differs from tokens");
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("shap report: ") + e.what());
  }
}

}  // namespace trace
