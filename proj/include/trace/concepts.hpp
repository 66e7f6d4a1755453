#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "trace/common.hpp"
#include "trace/corpus.hpp"
#include "trace/predictor.hpp"
#include "trace/tensor_io.hpp"

namespace trace {

struct ConceptConfig {
  std::size_t K = 10;
  std::size_t snippet_len = 5;
  std::size_t epochs = 3;
  std::size_t batch_size = 12;
  std::vector<double> lr_schedule{1e-3, 5e-4, 1e-4};  // one entry per epoch; the last one repeats
  std::size_t init_candidates = 48;                   // token directions considered for initialization
  std::size_t init_contrast_tokens = 6;               // per side, for positive-minus-negative token directions
  std::size_t init_min_count = 5;                     // documents a token must occur in to be a candidate
  std::size_t init_docs = 2000;                       // document subsample used by the initial selection
  std::size_t kmeans_iters = 10;                      // spherical k-means for slots without a candidate
  std::size_t head_warmup_iters = 300;                // full-batch fit of the head on the initial concepts
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
};

struct SalientSnippet {
  std::string segment_id;
  std::size_t start = 0;  // token offset in the segment
  std::string text;
  double score = 0.0;
};

struct ConceptSet {
  std::size_t dim = 0;
  std::size_t snippet_len = 5;
  std::vector<std::vector<double>> concepts;  // K unit vectors of length dim
  std::vector<double> head_weight;            // K
  double head_bias = 0.0;
  std::vector<std::vector<SalientSnippet>> salient;
  std::vector<bool> salient_shortfall;
  double train_completeness = 0.0;
  std::vector<double> epoch_loss;
  std::uint64_t seed = 0;
  std::string encoder;

  std::size_t size() const { return concepts.size(); }

  double head_logit(std::span<const double> scores) const {
    double z = head_bias;
    for (std::size_t k = 0; k < scores.size(); ++k) z += head_weight[k] * scores[k];
    return z;
  }
};

// ---------------------------------------------------------------------------
// Snippets

/// Every window of `snippet_len` tokens (stride 1) of every segment, with its
/// latent vector. Segments shorter than the window contribute no snippets.
struct SnippetIndex {
  std::size_t snippet_len = 0;
  std::vector<std::string> doc_ids;
  std::vector<std::string> doc_texts;
  std::vector<std::vector<std::string>> doc_tokens;
  std::vector<std::size_t> doc_begin;     // snippets of doc d are [doc_begin[d], doc_begin[d+1])
  std::vector<std::size_t> snippet_doc;
  std::vector<std::size_t> snippet_start;
  std::vector<std::size_t> snippet_row;   // row of `latent` (identical snippet texts share a row)
  std::vector<std::vector<double>> latent;

  std::size_t n_docs() const { return doc_ids.size(); }
  std::size_t n_snippets() const { return snippet_doc.size(); }
  bool has_snippets(std::size_t d) const { return doc_begin[d + 1] > doc_begin[d]; }

  std::string snippet_text(std::size_t s) const {
    const auto& toks = doc_tokens[snippet_doc[s]];
    return join_tokens(std::span(toks).subspan(snippet_start[s], snippet_len));
  }
};

inline SnippetIndex build_snippet_index(const Predictor& encoder, const Corpus& corpus, std::size_t snippet_len,
                                        std::size_t jobs = 1, const TokenizerConfig& tok = {}) {
  if (snippet_len == 0) throw InputError("concepts: snippet length must be >= 1");
  if (encoder.latent_dim() == 0) throw InputError("concepts: " + encoder.name() + " exposes no latent space");
  SnippetIndex ix;
  ix.snippet_len = snippet_len;
  std::unordered_map<std::string, std::size_t> row_of;
  std::vector<std::string> unique_texts;
  for (const auto& seg : corpus) {
    const std::size_t d = ix.doc_ids.size();
    ix.doc_ids.push_back(seg.id);
    ix.doc_texts.push_back(seg.text);
    ix.doc_tokens.push_back(tokenize(seg.text, tok));
    ix.doc_begin.push_back(ix.snippet_doc.size());
    const auto& toks = ix.doc_tokens.back();
    for (std::size_t s = 0; s + snippet_len <= toks.size(); ++s) {
      auto text = join_tokens(std::span(toks).subspan(s, snippet_len));
      auto [it, fresh] = row_of.emplace(text, unique_texts.size());
      if (fresh) unique_texts.push_back(std::move(text));
      ix.snippet_doc.push_back(d);
      ix.snippet_start.push_back(s);
      ix.snippet_row.push_back(it->second);
    }
  }
  ix.doc_begin.push_back(ix.snippet_doc.size());
  if (unique_texts.empty()) {
    throw InputError("no snippets: every segment is shorter than " + std::to_string(snippet_len) + " tokens");
  }

  constexpr std::size_t chunk = 256;
  const std::size_t n_chunks = (unique_texts.size() + chunk - 1) / chunk;
  ix.latent.resize(unique_texts.size());
  const std::size_t dim = encoder.latent_dim();
  parallel_for(n_chunks, jobs, [&](std::size_t c) {
    const auto first = c * chunk;
    const auto count = std::min(chunk, unique_texts.size() - first);
    auto vecs = encoder.latent_batch(std::span(unique_texts).subspan(first, count));
    if (vecs.size() != count) throw Error("concepts: encoder returned a short latent batch");
    for (std::size_t i = 0; i < count; ++i) {
      if (vecs[i].size() != dim) throw Error("concepts: latent vector has the wrong dimension");
      ix.latent[first + i] = std::move(vecs[i]);
    }
  });
  return ix;
}

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline void normalize(std::vector<double>& v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n == 0.0) return;
  for (auto& x : v) x /= n;
}

// Per-doc max over snippets of latent . c_k, and the row achieving it.
struct DocScores {
  std::vector<std::vector<double>> score;      // [doc][k]
  std::vector<std::vector<std::size_t>> arg;   // latent row of the maximizing snippet
};

inline DocScores doc_scores(const SnippetIndex& ix, const std::vector<std::vector<double>>& concepts,
                            std::span<const std::size_t> docs) {
  const std::size_t K = concepts.size();
  DocScores out;
  out.score.assign(docs.size(), std::vector<double>(K, 0.0));
  out.arg.assign(docs.size(), std::vector<std::size_t>(K, 0));
  for (std::size_t q = 0; q < docs.size(); ++q) {
    const auto d = docs[q];
    for (std::size_t k = 0; k < K; ++k) {
      double best = -std::numeric_limits<double>::infinity();
      std::size_t best_row = 0;
      for (auto s = ix.doc_begin[d]; s < ix.doc_begin[d + 1]; ++s) {
        const auto r = ix.snippet_row[s];
        const double v = dot(ix.latent[r], concepts[k]);
        if (v > best) {
          best = v;
          best_row = r;
        }
      }
      out.score[q][k] = best;
      out.arg[q][k] = best_row;
    }
  }
  return out;
}

inline double bce_with_logit(double z, double y) { return softplus(z) - y * z; }

// Seeded k-means++ followed by spherical Lloyd iterations on unit-normalized
// latent rows; returns K unit vectors.
inline std::vector<std::vector<double>> spherical_kmeans(const std::vector<std::vector<double>>& rows, std::size_t K,
                                                         std::size_t iters, Rng& rng) {
  const std::size_t dim = rows.front().size();
  std::vector<std::vector<double>> pts;
  pts.reserve(rows.size());
  for (const auto& r : rows) {
    auto p = r;
    normalize(p);
    pts.push_back(std::move(p));
  }
  std::vector<std::vector<double>> centers;
  centers.push_back(pts[uniform_index(rng, pts.size())]);
  std::vector<double> dist(pts.size());
  while (centers.size() < K) {
    double total = 0.0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : centers) best = std::min(best, 1.0 - dot(pts[i], c));
      dist[i] = std::max(0.0, best);
      total += dist[i];
    }
    if (total <= 0.0) {
      // fewer distinct directions than concepts: fall back to random directions
      std::vector<double> c(dim);
      for (auto& x : c) x = standard_normal(rng);
      normalize(c);
      centers.push_back(std::move(c));
      continue;
    }
    double u = uniform01(rng) * total;
    std::size_t pick = pts.size() - 1;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      u -= dist[i];
      if (u < 0.0) {
        pick = i;
        break;
      }
    }
    centers.push_back(pts[pick]);
  }
  std::vector<std::size_t> assign(pts.size(), 0);
  for (std::size_t it = 0; it < iters; ++it) {
    for (std::size_t i = 0; i < pts.size(); ++i) {
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < K; ++k) {
        const double sim = dot(pts[i], centers[k]);
        if (sim > best) {
          best = sim;
          assign[i] = k;
        }
      }
    }
    std::vector<std::vector<double>> sums(K, std::vector<double>(dim, 0.0));
    for (std::size_t i = 0; i < pts.size(); ++i) {
      for (std::size_t j = 0; j < dim; ++j) sums[assign[i]][j] += pts[i][j];
    }
    for (std::size_t k = 0; k < K; ++k) {
      double n = 0.0;
      for (double x : sums[k]) n += x * x;
      if (n > 0.0) {
        normalize(sums[k]);
        centers[k] = std::move(sums[k]);
      }
    }
  }
  return centers;
}

// Candidate directions for initialization. A token's direction is the mean
// latent of the snippets containing it minus the mean latent of all snippets.
// Tokens are ranked by how far the positive-prediction rate of the documents
// containing them deviates from the overall rate (scaled by sqrt(doc count)).
// Besides the top token directions, differences between a positively and a
// negatively associated token direction are offered, since a concept often
// has to separate a signal from a look-alike.
inline std::vector<std::vector<double>> token_candidates(const SnippetIndex& ix, std::span<const double> y_doc,
                                                         std::span<const std::size_t> docs, std::size_t max_tokens,
                                                         std::size_t min_count, std::size_t contrast_tokens) {
  const std::size_t dim = ix.latent.front().size();
  std::vector<double> mu(dim, 0.0);
  for (std::size_t s = 0; s < ix.n_snippets(); ++s) {
    const auto& z = ix.latent[ix.snippet_row[s]];
    for (std::size_t j = 0; j < dim; ++j) mu[j] += z[j];
  }
  for (auto& x : mu) x /= static_cast<double>(ix.n_snippets());

  struct TokenStats {
    std::size_t docs = 0;
    double positives = 0.0;
    std::size_t last_doc = static_cast<std::size_t>(-1);
  };
  std::map<std::string, TokenStats> stats;
  double overall = 0.0;
  for (auto d : docs) {
    overall += y_doc[d];
    for (const auto& t : ix.doc_tokens[d]) {
      auto& st = stats[t];
      if (st.last_doc == d) continue;
      st.last_doc = d;
      ++st.docs;
      st.positives += y_doc[d];
    }
  }
  overall /= static_cast<double>(docs.size());
  struct Ranked {
    double strength;
    double sign;
    std::string token;
  };
  std::vector<Ranked> ranked;
  for (const auto& [tok, st] : stats) {
    if (st.docs < min_count) continue;
    const double dev = st.positives / static_cast<double>(st.docs) - overall;
    if (dev == 0.0) continue;
    ranked.push_back({std::abs(dev) * std::sqrt(static_cast<double>(st.docs)), dev > 0 ? 1.0 : -1.0, tok});
  }
  std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
    if (a.strength != b.strength) return a.strength > b.strength;
    return a.token < b.token;
  });
  if (ranked.size() > max_tokens) ranked.resize(max_tokens);

  std::unordered_map<std::string, std::size_t> slot;
  for (std::size_t i = 0; i < ranked.size(); ++i) slot.emplace(ranked[i].token, i);
  std::vector<std::vector<double>> dir(ranked.size(), std::vector<double>(dim, 0.0));
  std::vector<double> count(ranked.size(), 0.0);
  std::vector<std::size_t> seen;
  for (std::size_t s = 0; s < ix.n_snippets(); ++s) {
    const auto& toks = ix.doc_tokens[ix.snippet_doc[s]];
    seen.clear();
    for (std::size_t i = 0; i < ix.snippet_len; ++i) {
      const auto it = slot.find(toks[ix.snippet_start[s] + i]);
      if (it == slot.end() || std::find(seen.begin(), seen.end(), it->second) != seen.end()) continue;
      seen.push_back(it->second);
      const auto& z = ix.latent[ix.snippet_row[s]];
      for (std::size_t j = 0; j < dim; ++j) dir[it->second][j] += z[j];
      count[it->second] += 1.0;
    }
  }
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    for (std::size_t j = 0; j < dim; ++j) dir[i][j] = count[i] > 0.0 ? dir[i][j] / count[i] - mu[j] : 0.0;
  }

  std::vector<std::vector<double>> out;
  auto offer = [&](std::vector<double> v) {
    double n2 = 0.0;
    for (double x : v) n2 += x * x;
    if (n2 <= 1e-24) return;
    normalize(v);
    out.push_back(std::move(v));
  };
  for (const auto& d : dir) offer(d);
  std::vector<std::size_t> pos;
  std::vector<std::size_t> neg;
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    auto& side = ranked[i].sign > 0 ? pos : neg;
    if (side.size() < contrast_tokens) side.push_back(i);
  }
  for (auto p : pos) {
    for (auto n : neg) {
      std::vector<double> v(dim);
      for (std::size_t j = 0; j < dim; ++j) v[j] = dir[p][j] - dir[n][j];
      offer(std::move(v));
    }
  }
  return out;
}

struct Adam {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t t = 0;

  explicit Adam(std::size_t n) : m(n, 0.0), v(n, 0.0) {}

  void step(std::span<double> params, std::span<const double> grad, double lr) {
    constexpr double b1 = 0.9;
    constexpr double b2 = 0.999;
    constexpr double eps = 1e-8;
    ++t;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
      v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
      params[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
};

// Full-batch gradient descent on the head alone (concepts fixed).
inline void fit_head(const std::vector<std::vector<double>>& scores, std::span<const double> y, std::size_t iters,
                     std::vector<double>& w, double& b) {
  const std::size_t K = w.size();
  const double n = static_cast<double>(scores.size());
  Adam opt(K + 1);
  std::vector<double> params(K + 1);
  std::vector<double> grad(K + 1);
  std::copy(w.begin(), w.end(), params.begin());
  params[K] = b;
  for (std::size_t it = 0; it < iters; ++it) {
    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::size_t q = 0; q < scores.size(); ++q) {
      double z = params[K];
      for (std::size_t k = 0; k < K; ++k) z += params[k] * scores[q][k];
      const double r = sigmoid(z) - y[q];
      for (std::size_t k = 0; k < K; ++k) grad[k] += r * scores[q][k] / n;
      grad[K] += r / n;
    }
    opt.step(params, grad, 0.05);
  }
  std::copy(params.begin(), params.begin() + static_cast<long>(K), w.begin());
  b = params[K];
}

// Greedy forward selection of K candidates: each round adds the candidate
// whose inclusion gives the lowest head loss after a short refit. Returns
// indices into `candidates`.
inline std::vector<std::size_t> pursue_candidates(const SnippetIndex& ix,
                                                  const std::vector<std::vector<double>>& candidates,
                                                  std::span<const std::size_t> docs, std::span<const double> y,
                                                  std::size_t K, std::size_t head_iters) {
  const auto cand_scores = doc_scores(ix, candidates, docs);
  std::vector<std::size_t> chosen;
  std::vector<std::vector<double>> sub(docs.size());
  while (chosen.size() < std::min(K, candidates.size())) {
    double best_loss = std::numeric_limits<double>::infinity();
    std::size_t pick = candidates.size();
    for (std::size_t c = 0; c < candidates.size(); ++c) {
      if (std::find(chosen.begin(), chosen.end(), c) != chosen.end()) continue;
      for (std::size_t q = 0; q < docs.size(); ++q) {
        sub[q].clear();
        for (auto k : chosen) sub[q].push_back(cand_scores.score[q][k]);
        sub[q].push_back(cand_scores.score[q][c]);
      }
      std::vector<double> w(chosen.size() + 1, 0.0);
      double b = 0.0;
      fit_head(sub, y, head_iters, w, b);
      double loss = 0.0;
      for (std::size_t q = 0; q < docs.size(); ++q) {
        double z = b;
        for (std::size_t k = 0; k < w.size(); ++k) z += w[k] * sub[q][k];
        loss += bce_with_logit(z, y[q]);
      }
      if (loss < best_loss) {
        best_loss = loss;
        pick = c;
      }
    }
    if (pick == candidates.size()) break;
    chosen.push_back(pick);
  }
  return chosen;
}

inline std::vector<double> hard_predictions(const Predictor& model, const SnippetIndex& ix) {
  const auto lo = model.log_odds_batch(ix.doc_texts);
  std::vector<double> y(lo.size());
  for (std::size_t i = 0; i < lo.size(); ++i) y[i] = classify_score(lo[i]);
  return y;
}

}  // namespace detail

/// Fraction of documents (with at least one snippet) where the concept head
/// agrees with the model's own hard prediction.
inline double completeness_score(const ConceptSet& cs, const SnippetIndex& ix, const Predictor& model) {
  std::vector<std::size_t> docs;
  for (std::size_t d = 0; d < ix.n_docs(); ++d) {
    if (ix.has_snippets(d)) docs.push_back(d);
  }
  if (docs.empty()) throw InputError("no snippets");
  const auto y = detail::hard_predictions(model, ix);
  const auto sc = detail::doc_scores(ix, cs.concepts, docs);
  std::size_t agree = 0;
  for (std::size_t q = 0; q < docs.size(); ++q) {
    const int pred = classify_score(cs.head_logit(sc.score[q]));
    agree += pred == static_cast<int>(y[docs[q]]) ? 1 : 0;
  }
  return static_cast<double>(agree) / static_cast<double>(docs.size());
}

inline double completeness_score(const ConceptSet& cs, const Corpus& corpus, const Predictor& model,
                                 std::size_t jobs = 1) {
  return completeness_score(cs, build_snippet_index(model, corpus, cs.snippet_len, jobs), model);
}

/// Discovers K unit-norm concept directions in the encoder's latent space and
/// a linear head over per-document concept scores, trained with Adam to
/// reproduce the encoder's own hard predictions.
///
/// A document's score for concept k is the max over its snippets of
/// latent(snippet) . c_k. Concepts start from token directions chosen greedily
/// against the model's predictions and are renormalized after every step.
inline ConceptSet discover_concepts(const Predictor& encoder, const SnippetIndex& ix, const ConceptConfig& cfg) {
  if (cfg.K == 0) throw InputError("concepts: K must be >= 1");
  if (cfg.batch_size == 0) throw InputError("concepts: batch size must be >= 1");
  if (cfg.lr_schedule.empty()) throw InputError("concepts: empty learning-rate schedule");
  if (ix.snippet_len != cfg.snippet_len) throw InputError("concepts: snippet index built with another length");
  std::vector<std::size_t> docs;
  for (std::size_t d = 0; d < ix.n_docs(); ++d) {
    if (ix.has_snippets(d)) docs.push_back(d);
  }
  if (docs.empty()) throw InputError("no snippets");
  const std::size_t K = cfg.K;
  const std::size_t dim = ix.latent.front().size();
  const auto y_all = detail::hard_predictions(encoder, ix);
  std::vector<double> y;
  for (auto d : docs) y.push_back(y_all[d]);

  ConceptSet cs;
  cs.dim = dim;
  cs.snippet_len = cfg.snippet_len;
  cs.seed = cfg.seed;
  cs.encoder = encoder.name();
  Rng init_rng(derive_seed(cfg.seed, 0));
  {
    // Greedy pursuit over token directions on a document subsample; k-means
    // centers fill any slots left when there are too few candidates.
    std::vector<std::size_t> sub(docs);
    if (sub.size() > cfg.init_docs) {
      shuffle(std::span<std::size_t>(sub), init_rng);
      sub.resize(cfg.init_docs);
      std::sort(sub.begin(), sub.end());
    }
    std::vector<double> y_sub;
    for (auto d : sub) y_sub.push_back(y_all[d]);
    const auto cands = detail::token_candidates(ix, y_all, docs, cfg.init_candidates, cfg.init_min_count,
                                                cfg.init_contrast_tokens);
    for (auto c : detail::pursue_candidates(ix, cands, sub, y_sub, K, 100)) cs.concepts.push_back(cands[c]);
  }
  if (cs.concepts.size() < K) {
    constexpr std::size_t kKmeansSample = 20000;
    std::vector<std::vector<double>> sample;
    if (ix.latent.size() <= kKmeansSample) {
      sample = ix.latent;
    } else {
      std::vector<std::size_t> rows(ix.latent.size());
      std::iota(rows.begin(), rows.end(), std::size_t{0});
      shuffle(std::span<std::size_t>(rows), init_rng);
      for (std::size_t i = 0; i < kKmeansSample; ++i) sample.push_back(ix.latent[rows[i]]);
    }
    auto fill = detail::spherical_kmeans(sample, K - cs.concepts.size(), cfg.kmeans_iters, init_rng);
    for (auto& c : fill) cs.concepts.push_back(std::move(c));
  }
  cs.head_weight.assign(K, 0.0);
  {
    const auto sc = detail::doc_scores(ix, cs.concepts, docs);
    detail::fit_head(sc.score, y, cfg.head_warmup_iters, cs.head_weight, cs.head_bias);
  }

  // Flat parameters: [c_0 .. c_{K-1}, w, b].
  const std::size_t n_params = K * dim + K + 1;
  std::vector<double> params(n_params);
  auto pack = [&] {
    for (std::size_t k = 0; k < K; ++k) std::copy(cs.concepts[k].begin(), cs.concepts[k].end(), params.begin() + static_cast<long>(k * dim));
    std::copy(cs.head_weight.begin(), cs.head_weight.end(), params.begin() + static_cast<long>(K * dim));
    params.back() = cs.head_bias;
  };
  auto unpack = [&] {
    for (std::size_t k = 0; k < K; ++k) {
      std::copy_n(params.begin() + static_cast<long>(k * dim), dim, cs.concepts[k].begin());
      detail::normalize(cs.concepts[k]);
      std::copy(cs.concepts[k].begin(), cs.concepts[k].end(), params.begin() + static_cast<long>(k * dim));
    }
    std::copy_n(params.begin() + static_cast<long>(K * dim), K, cs.head_weight.begin());
    cs.head_bias = params.back();
  };
  pack();
  detail::Adam opt(n_params);
  std::vector<double> grad(n_params);
  Rng order_rng(derive_seed(cfg.seed, 1));
  std::vector<std::size_t> order(docs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<std::size_t> batch_docs;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr_schedule[std::min(epoch, cfg.lr_schedule.size() - 1)];
    shuffle(std::span<std::size_t>(order), order_rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const auto stop = std::min(order.size(), start + cfg.batch_size);
      batch_docs.clear();
      for (auto q = start; q < stop; ++q) batch_docs.push_back(docs[order[q]]);
      const auto sc = detail::doc_scores(ix, cs.concepts, batch_docs);
      std::fill(grad.begin(), grad.end(), 0.0);
      const double inv = 1.0 / static_cast<double>(batch_docs.size());
      for (std::size_t q = 0; q < batch_docs.size(); ++q) {
        const double target = y[order[start + q]];
        const double z = cs.head_logit(sc.score[q]);
        epoch_loss += detail::bce_with_logit(z, target);
        const double r = (sigmoid(z) - target) * inv;
        for (std::size_t k = 0; k < K; ++k) {
          grad[K * dim + k] += r * sc.score[q][k];
          const auto& zrow = ix.latent[sc.arg[q][k]];
          const double scale = r * cs.head_weight[k];
          for (std::size_t j = 0; j < dim; ++j) grad[k * dim + j] += scale * zrow[j];
        }
        grad.back() += r;
      }
      opt.step(params, grad, lr);
      unpack();
    }
    epoch_loss /= static_cast<double>(docs.size());
    if (!std::isfinite(epoch_loss)) throw Error("concepts: optimization diverged");
    cs.epoch_loss.push_back(epoch_loss);
  }
  cs.train_completeness = completeness_score(cs, ix, encoder);
  return cs;
}

inline ConceptSet discover_concepts(const Predictor& encoder, const Corpus& corpus, const ConceptConfig& cfg,
                                    const TokenizerConfig& tok = {}) {
  return discover_concepts(encoder, build_snippet_index(encoder, corpus, cfg.snippet_len, cfg.jobs, tok), cfg);
}

/// Unit-norm random directions with a head fitted on their scores; the
/// uninformed baseline for completeness.
inline ConceptSet random_concepts(const Predictor& encoder, const SnippetIndex& ix, std::size_t K, std::uint64_t seed,
                                  std::size_t head_iters = 300) {
  std::vector<std::size_t> docs;
  for (std::size_t d = 0; d < ix.n_docs(); ++d) {
    if (ix.has_snippets(d)) docs.push_back(d);
  }
  if (docs.empty()) throw InputError("no snippets");
  ConceptSet cs;
  cs.dim = ix.latent.front().size();
  cs.snippet_len = ix.snippet_len;
  cs.seed = seed;
  cs.encoder = encoder.name();
  Rng rng(seed);
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<double> c(cs.dim);
    for (auto& x : c) x = standard_normal(rng);
    detail::normalize(c);
    cs.concepts.push_back(std::move(c));
  }
  cs.head_weight.assign(K, 0.0);
  const auto y_all = detail::hard_predictions(encoder, ix);
  std::vector<double> y;
  for (auto d : docs) y.push_back(y_all[d]);
  const auto sc = detail::doc_scores(ix, cs.concepts, docs);
  detail::fit_head(sc.score, y, head_iters, cs.head_weight, cs.head_bias);
  cs.train_completeness = completeness_score(cs, ix, encoder);
  return cs;
}

/// Top-m snippets per concept by latent . c_k, sorted by descending score
/// (ties: segment order, then offset). Fewer than m available sets the
/// concept's shortfall flag.
inline void attach_salient_examples(ConceptSet& cs, const SnippetIndex& ix, std::size_t top_m = 25) {
  if (top_m == 0) throw InputError("concepts: top_m must be >= 1");
  cs.salient.assign(cs.size(), {});
  cs.salient_shortfall.assign(cs.size(), false);
  std::vector<std::size_t> idx(ix.n_snippets());
  std::vector<double> score(ix.n_snippets());
  for (std::size_t k = 0; k < cs.size(); ++k) {
    for (std::size_t s = 0; s < ix.n_snippets(); ++s) score[s] = detail::dot(ix.latent[ix.snippet_row[s]], cs.concepts[k]);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const auto m = std::min(top_m, idx.size());
    std::partial_sort(idx.begin(), idx.begin() + static_cast<long>(m), idx.end(), [&](std::size_t a, std::size_t b) {
      if (score[a] != score[b]) return score[a] > score[b];
      return a < b;
    });
    for (std::size_t r = 0; r < m; ++r) {
      const auto s = idx[r];
      cs.salient[k].push_back({ix.doc_ids[ix.snippet_doc[s]], ix.snippet_start[s], ix.snippet_text(s), score[s]});
    }
    cs.salient_shortfall[k] = m < top_m;
  }
}

inline std::vector<std::vector<SalientSnippet>> salient_examples(ConceptSet cs, const Corpus& corpus,
                                                                 const Predictor& encoder, std::size_t top_m = 25,
                                                                 std::size_t jobs = 1) {
  attach_salient_examples(cs, build_snippet_index(encoder, corpus, cs.snippet_len, jobs), top_m);
  return cs.salient;
}

/// Plain-text card for one concept: each salient snippet shown in its segment
/// with the snippet span bracketed and a few tokens of context either side.
inline std::string concept_card(const ConceptSet& cs, std::size_t k, const SnippetIndex* context = nullptr,
                                std::size_t context_tokens = 5) {
  std::ostringstream out;
  out << "concept " << k << "  head_weight=" << cs.head_weight.at(k) << "\n";
  std::unordered_map<std::string, std::size_t> doc_of;
  if (context) {
    for (std::size_t d = 0; d < context->n_docs(); ++d) doc_of.emplace(context->doc_ids[d], d);
  }
  std::size_t rank = 0;
  for (const auto& s : cs.salient.at(k)) {
    out << ++rank << ".\t" << s.score << "\t" << s.segment_id << "\t";
    const auto it = doc_of.find(s.segment_id);
    if (it == doc_of.end()) {
      out << "[[" << s.text << "]]\n";
      continue;
    }
    const auto& toks = context->doc_tokens[it->second];
    const auto lo = s.start > context_tokens ? s.start - context_tokens : 0;
    const auto end = std::min(toks.size(), s.start + cs.snippet_len);
    const auto hi = std::min(toks.size(), end + context_tokens);
    if (lo > 0) out << "... ";
    for (auto i = lo; i < hi; ++i) {
      if (i == s.start) out << "[[";
      out << toks[i];
      if (i + 1 == end) out << "]]";
      if (i + 1 < hi) out << ' ';
    }
    if (hi < toks.size()) out << " ...";
    out << "\n";
  }
  if (!cs.salient_shortfall.empty() && cs.salient_shortfall[k]) out << "(fewer snippets available than requested)\n";
  return out.str();
}

inline constexpr std::string_view kConceptMagic = "TRCS";

inline TensorContainer to_container(const ConceptSet& cs) {
  TensorContainer c;
  c.header["format"] = "trace-concepts";
  c.header["version"] = 1;
  c.header["dim"] = cs.dim;
  c.header["snippet_len"] = cs.snippet_len;
  c.header["seed"] = cs.seed;
  c.header["encoder"] = cs.encoder;
  c.header["train_completeness"] = cs.train_completeness;
  c.header["epoch_loss"] = cs.epoch_loss;
  auto salient = nlohmann::ordered_json::array();
  for (std::size_t k = 0; k < cs.salient.size(); ++k) {
    auto list = nlohmann::ordered_json::array();
    for (const auto& s : cs.salient[k]) {
      list.push_back({{"segment_id", s.segment_id}, {"start", s.start}, {"text", s.text}, {"score", s.score}});
    }
    salient.push_back({{"snippets", list}, {"shortfall", cs.salient_shortfall.at(k)}});
  }
  c.header["salient"] = salient;
  std::vector<double> flat;
  for (const auto& v : cs.concepts) flat.insert(flat.end(), v.begin(), v.end());
  c.tensors.push_back({"concepts", {cs.concepts.size(), cs.dim}, flat});
  c.tensors.push_back({"head.weight", {cs.head_weight.size()}, cs.head_weight});
  c.tensors.push_back({"head.bias", {1}, {cs.head_bias}});
  return c;
}

inline ConceptSet concepts_from_container(const TensorContainer& c) {
  try {
    if (c.header.at("format") != "trace-concepts") throw InputError("not a concept set");
    ConceptSet cs;
    cs.dim = c.header.at("dim").get<std::size_t>();
    cs.snippet_len = c.header.at("snippet_len").get<std::size_t>();
    cs.seed = c.header.at("seed").get<std::uint64_t>();
    cs.encoder = c.header.at("encoder").get<std::string>();
    cs.train_completeness = c.header.at("train_completeness").get<double>();
    cs.epoch_loss = c.header.at("epoch_loss").get<std::vector<double>>();
    const auto& flat = c.get("concepts");
    if (flat.shape.size() != 2 || flat.shape[1] != cs.dim) throw InputError("concept tensor has the wrong shape");
    for (std::size_t k = 0; k < flat.shape[0]; ++k) {
      cs.concepts.emplace_back(flat.data.begin() + static_cast<long>(k * cs.dim),
                               flat.data.begin() + static_cast<long>((k + 1) * cs.dim));
    }
    cs.head_weight = c.get("head.weight").data;
    cs.head_bias = c.get("head.bias").data.at(0);
    if (cs.head_weight.size() != cs.concepts.size()) throw InputError("head size differs from concept count");
    for (const auto& entry : c.header.at("salient")) {
      std::vector<SalientSnippet> list;
      for (const auto& s : entry.at("snippets")) {
        list.push_back({s.at("segment_id").get<std::string>(), s.at("start").get<std::size_t>(),
                        s.at("text").get<std::string>(), s.at("score").get<double>()});
      }
      cs.salient.push_back(std::move(list));
      cs.salient_shortfall.push_back(entry.at("shortfall").get<bool>());
    }
    return cs;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("concept set: ") + e.what());
  }
}

}  // namespace trace
