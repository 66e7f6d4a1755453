#pragma once

#include <functional>
#include <memory>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "trace/corpus.hpp"
#include "trace/metrics.hpp"
#include "trace/predictor.hpp"

namespace trace {

/// Builds a predictor from a training corpus; the seed is the caller's
/// derived substream for this particular fit.
using Trainer = std::function<std::shared_ptr<const Predictor>(const Corpus& train, std::uint64_t seed)>;

enum class SplitMode { random, cv };

inline SplitMode split_mode_from_string(const std::string& s) {
  if (s == "random") return SplitMode::random;
  if (s == "cv") return SplitMode::cv;
  throw InputError("split mode must be 'random' or 'cv', got '" + s + "'");
}

inline std::string to_string(SplitMode m) { return m == SplitMode::random ? "random" : "cv"; }

struct ValidationConfig {
  std::size_t runs = 5;         // random splits, or folds in cv mode
  SplitMode mode = SplitMode::random;
  double test_fraction = 0.2;   // random mode only
  double threshold = 0.0;       // log-odds decision threshold
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
};

inline std::vector<Split> make_splits(const Corpus& corpus, const ValidationConfig& cfg, std::uint64_t seed) {
  if (cfg.mode == SplitMode::cv) return stratified_splits(corpus, cfg.runs, seed);
  return random_splits(corpus, cfg.runs, cfg.test_fraction, seed);
}

inline RunMetrics evaluate_predictor(const Predictor& p, const Corpus& test, double threshold = 0.0) {
  const auto scores = p.log_odds_batch(test.texts());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i])) throw Error("non-finite log-odds for segment '" + test[i].id + "'");
  }
  return score_run(scores, test.labels(), threshold);
}

/// Trains once per split and reports mean and standard error of every metric.
/// Split k trains with seed derive_seed(seed, k); results do not depend on jobs.
inline MetricsReport cross_validate(const Trainer& trainer, const Corpus& corpus, const ValidationConfig& cfg,
                                    const std::string& model_tag) {
  const auto splits = make_splits(corpus, cfg, cfg.seed);
  std::vector<RunMetrics> runs(splits.size());
  parallel_for(splits.size(), cfg.jobs, [&](std::size_t k) {
    try {
      const auto train = corpus.subset(splits[k].train);
      const auto test = corpus.subset(splits[k].test);
      const auto model = trainer(train, derive_seed(cfg.seed, k));
      runs[k] = evaluate_predictor(*model, test, cfg.threshold);
    } catch (...) {
      rethrow_with_context("fold " + std::to_string(k) + ": ");
    }
  });
  return aggregate_runs(runs, corpus.domain(), model_tag);
}

// ---------------------------------------------------------------------------
// Cross-domain testing

inline constexpr std::string_view kCombinedDomain = "All";

struct CrossDomainMatrix {
  std::string model;
  std::vector<std::string> train_domains;  // domain names, then "All" when requested
  std::vector<std::string> test_domains;
  std::vector<std::vector<MetricsReport>> cells;  // [train][test]

  const MetricsReport& cell(std::string_view train, std::string_view test) const {
    for (std::size_t i = 0; i < train_domains.size(); ++i) {
      if (train_domains[i] != train) continue;
      for (std::size_t j = 0; j < test_domains.size(); ++j) {
        if (test_domains[j] == test) return cells[i][j];
      }
    }
    throw InputError("no cell " + std::string(train) + " -> " + std::string(test));
  }
};

namespace detail {

inline std::string qualified_id(const Segment& s, const std::string& domain) { return domain + "/" + s.id; }

inline Segment qualify(Segment s, const std::string& domain) {
  s.id = qualified_id(s, domain);
  return s;
}

}  // namespace detail

/// One model per training domain (and optionally one on the concatenation of
/// every domain's training part) evaluated on every domain's held-out part,
/// repeated over cfg.runs splits. Every cell verifies that no training segment
/// id (qualified by domain) appears in its test set.
inline CrossDomainMatrix cross_domain(const Trainer& trainer, std::span<const Corpus> domains, bool include_combined,
                                      const ValidationConfig& cfg, const std::string& model_tag) {
  if (domains.size() < 2) throw InputError("cross-domain testing needs at least two domains");
  std::set<std::string> names;
  for (const auto& d : domains) {
    if (d.domain() == kCombinedDomain) throw InputError("domain name 'All' is reserved");
    if (!names.insert(d.domain()).second) throw InputError("duplicate domain '" + d.domain() + "'");
  }
  const std::size_t D = domains.size();
  std::vector<std::vector<Split>> splits;
  for (std::size_t j = 0; j < D; ++j) splits.push_back(make_splits(domains[j], cfg, derive_seed(cfg.seed, j)));

  CrossDomainMatrix m;
  m.model = model_tag;
  for (const auto& d : domains) {
    m.train_domains.push_back(d.domain());
    m.test_domains.push_back(d.domain());
  }
  if (include_combined) m.train_domains.emplace_back(kCombinedDomain);
  const std::size_t rows = m.train_domains.size();
  const std::size_t R = cfg.runs;

  // results[(r * rows + i) * D + j]
  std::vector<RunMetrics> results(R * rows * D);
  parallel_for(R * rows, cfg.jobs, [&](std::size_t task) {
    const std::size_t r = task / rows;
    const std::size_t i = task % rows;
    try {
      std::vector<Segment> train_segs;
      if (i < D) {
        for (auto k : splits[i][r].train) train_segs.push_back(detail::qualify(domains[i][k], domains[i].domain()));
      } else {
        for (std::size_t d = 0; d < D; ++d) {
          for (auto k : splits[d][r].train) train_segs.push_back(detail::qualify(domains[d][k], domains[d].domain()));
        }
      }
      std::set<std::string> train_ids;
      for (const auto& s : train_segs) train_ids.insert(s.id);
      const Corpus train(std::move(train_segs), m.train_domains[i]);
      const auto model = trainer(train, derive_seed(derive_seed(cfg.seed, 1000 + i), r));
      for (std::size_t j = 0; j < D; ++j) {
        std::vector<Segment> test_segs;
        for (auto k : splits[j][r].test) {
          auto s = detail::qualify(domains[j][k], domains[j].domain());
          if (train_ids.count(s.id)) throw Error("train/test overlap: segment '" + s.id + "'");
          test_segs.push_back(std::move(s));
        }
        results[task * D + j] = evaluate_predictor(*model, Corpus(std::move(test_segs), domains[j].domain()),
                                                   cfg.threshold);
      }
    } catch (...) {
      rethrow_with_context("cross-domain " + m.train_domains[i] + " run " + std::to_string(r) + ": ");
    }
  });

  m.cells.assign(rows, {});
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < D; ++j) {
      std::vector<RunMetrics> cell_runs;
      for (std::size_t r = 0; r < R; ++r) cell_runs.push_back(results[(r * rows + i) * D + j]);
      m.cells[i].push_back(aggregate_runs(cell_runs, m.train_domains[i] + "->" + m.test_domains[j], model_tag));
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::ordered_json to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["dataset"] = r.dataset;
  j["model"] = r.model;
  auto metrics = nlohmann::ordered_json::object();
  for (std::size_t m = 0; m < metric_names().size(); ++m) {
    const auto& s = r.metrics[m];
    metrics[metric_names()[m]] = {{"mean", s.mean}, {"std_error", s.std_error}, {"n_runs", s.n_runs}, {"runs", s.runs}};
  }
  j["metrics"] = metrics;
  return j;
}

inline void write_metrics_csv(std::ostream& out, std::span<const MetricsReport> reports) {
  out << "dataset,model,metric,mean,std_error,n_runs\n";
  for (const auto& r : reports) {
    for (std::size_t m = 0; m < metric_names().size(); ++m) {
      const auto& s = r.metrics[m];
      out << r.dataset << ',' << r.model << ',' << metric_names()[m] << ',' << nlohmann::json(s.mean).dump() << ','
          << nlohmann::json(s.std_error).dump() << ',' << s.n_runs << '\n';
    }
  }
}

inline nlohmann::ordered_json to_json(const CrossDomainMatrix& m) {
  nlohmann::ordered_json j;
  j["model"] = m.model;
  j["train_domains"] = m.train_domains;
  j["test_domains"] = m.test_domains;
  auto cells = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < m.train_domains.size(); ++i) {
    for (std::size_t k = 0; k < m.test_domains.size(); ++k) {
      auto c = to_json(m.cells[i][k]);
      c["train_domain"] = m.train_domains[i];
      c["test_domain"] = m.test_domains[k];
      cells.push_back(std::move(c));
    }
  }
  j["cells"] = cells;
  return j;
}

inline void write_matrix_csv(std::ostream& out, const CrossDomainMatrix& m) {
  out << "train_domain,test_domain,metric,mean,std_error,n_runs\n";
  for (std::size_t i = 0; i < m.train_domains.size(); ++i) {
    for (std::size_t k = 0; k < m.test_domains.size(); ++k) {
      const auto& r = m.cells[i][k];
      for (std::size_t q = 0; q < metric_names().size(); ++q) {
        const auto& s = r.metrics[q];
        out << m.train_domains[i] << ',' << m.test_domains[k] << ',' << metric_names()[q] << ','
            << nlohmann::json(s.mean).dump() << ',' << nlohmann::json(s.std_error).dump() << ',' << s.n_runs << '\n';
      }
    }
  }
}

/// Train-by-test grid of one metric's means, three decimals ("0.967").
inline void write_matrix_grid(std::ostream& out, const CrossDomainMatrix& m, std::string_view metric = "auroc") {
  out << "train\\test";
  for (const auto& t : m.test_domains) out << ',' << t;
  out << '\n';
  for (std::size_t i = 0; i < m.train_domains.size(); ++i) {
    out << m.train_domains[i];
    for (std::size_t k = 0; k < m.test_domains.size(); ++k) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.3f", m.cells[i][k].get(metric).mean);
      out << ',' << buf;
    }
    out << '\n';
  }
}

}  // namespace trace
