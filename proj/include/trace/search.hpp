#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "trace/validation.hpp"

namespace trace {

struct ParamDomain {
  enum class Kind { categorical, integer, log_uniform, uniform };
  std::string name;
  Kind kind = Kind::categorical;
  std::vector<nlohmann::json> choices;  // categorical
  double lo = 0.0;                      // numeric kinds, inclusive
  double hi = 0.0;
};

struct SearchSpace {
  std::vector<ParamDomain> params;
  std::size_t budget = 50;
  std::string objective = "auroc";
};

/// Parses
///   {"budget": 50, "objective": "auroc",
///    "params": {"alpha": {"log_uniform": [0.01, 100]},
///               "use_counts": {"choice": [true, false]},
///               "hidden1": {"int": [10, 100]}, "lr": {"uniform": [0.1, 1]}}}
/// Parameters are kept in key order so sampling is stable.
inline SearchSpace search_space_from_json(const nlohmann::json& j) {
  SearchSpace s;
  try {
    s.budget = j.value("budget", std::size_t{50});
    s.objective = j.value("objective", std::string("auroc"));
    for (const auto& [name, dom] : j.at("params").items()) {
      ParamDomain p;
      p.name = name;
      if (!dom.is_object() || dom.size() != 1) throw InputError("param '" + name + "': expected one domain key");
      const auto& [kind, arg] = *dom.items().begin();
      if (kind == "choice") {
        p.kind = ParamDomain::Kind::categorical;
        p.choices = arg.get<std::vector<nlohmann::json>>();
        if (p.choices.empty()) throw InputError("param '" + name + "': empty choice list");
      } else if (kind == "int" || kind == "log_uniform" || kind == "uniform") {
        p.kind = kind == "int"           ? ParamDomain::Kind::integer
                 : kind == "log_uniform" ? ParamDomain::Kind::log_uniform
                                         : ParamDomain::Kind::uniform;
        const auto r = arg.get<std::vector<double>>();
        if (r.size() != 2 || !(r[0] <= r[1])) throw InputError("param '" + name + "': range must be [lo, hi], lo <= hi");
        p.lo = r[0];
        p.hi = r[1];
        if (p.kind == ParamDomain::Kind::log_uniform && !(p.lo > 0.0)) {
          throw InputError("param '" + name + "': log_uniform needs lo > 0");
        }
        if (p.kind == ParamDomain::Kind::integer && (p.lo != std::floor(p.lo) || p.hi != std::floor(p.hi))) {
          throw InputError("param '" + name + "': int range needs integer bounds");
        }
      } else {
        throw InputError("param '" + name + "': unknown domain '" + kind + "'");
      }
      s.params.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("search space: ") + e.what());
  }
  if (s.budget == 0) throw InputError("search space: budget must be >= 1");
  (void)metric_index(s.objective);
  return s;
}

inline nlohmann::ordered_json sample_params(const SearchSpace& space, Rng& rng) {
  nlohmann::ordered_json out = nlohmann::ordered_json::object();
  for (const auto& p : space.params) {
    switch (p.kind) {
      case ParamDomain::Kind::categorical:
        out[p.name] = p.choices[uniform_index(rng, p.choices.size())];
        break;
      case ParamDomain::Kind::integer: {
        const auto span = static_cast<std::size_t>(p.hi - p.lo) + 1;
        out[p.name] = static_cast<long long>(p.lo) + static_cast<long long>(uniform_index(rng, span));
        break;
      }
      case ParamDomain::Kind::log_uniform:
        out[p.name] = std::exp(uniform_real(rng, std::log(p.lo), std::log(p.hi)));
        break;
      case ParamDomain::Kind::uniform:
        out[p.name] = uniform_real(rng, p.lo, p.hi);
        break;
    }
  }
  return out;
}

/// Maps one sampled parameter set to a trainer.
using TrainerFactory = std::function<Trainer(const nlohmann::ordered_json& params)>;

struct SearchConfig {
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  std::size_t inner_splits = 1;  // validation splits averaged per trial
  double test_fraction = 0.2;
};

struct Trial {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  nlohmann::ordered_json params;
  std::optional<double> objective;
  std::string error;
};

struct SearchResult {
  std::size_t best = 0;
  std::vector<Trial> trials;

  const Trial& best_trial() const { return trials.at(best); }
};

/// Seeded random search. Trial i draws its parameters from derive_seed(seed, i)
/// and every trial is validated on the same inner splits, so the log is the
/// same for any job count. The best trial is the highest objective, earliest
/// index on ties.
inline SearchResult hyperparameter_search(const TrainerFactory& factory, const SearchSpace& space,
                                          const Corpus& corpus, const SearchConfig& cfg) {
  if (space.budget == 0) throw InputError("search budget must be >= 1");
  const std::size_t metric = metric_index(space.objective);
  ValidationConfig inner;
  inner.runs = cfg.inner_splits;
  inner.test_fraction = cfg.test_fraction;
  const auto splits = make_splits(corpus, inner, derive_seed(cfg.seed, 0x5eed));
  std::vector<Corpus> train_parts;
  std::vector<Corpus> test_parts;
  for (const auto& s : splits) {
    train_parts.push_back(corpus.subset(s.train));
    test_parts.push_back(corpus.subset(s.test));
  }

  SearchResult res;
  res.trials.resize(space.budget);
  parallel_for(space.budget, cfg.jobs, [&](std::size_t i) {
    auto& t = res.trials[i];
    t.index = i;
    t.seed = derive_seed(cfg.seed, i);
    Rng rng(t.seed);
    t.params = sample_params(space, rng);
    try {
      const auto trainer = factory(t.params);
      double sum = 0.0;
      for (std::size_t k = 0; k < splits.size(); ++k) {
        const auto model = trainer(train_parts[k], derive_seed(t.seed, k));
        sum += evaluate_predictor(*model, test_parts[k]).get(metric);
      }
      const double obj = sum / static_cast<double>(splits.size());
      if (!std::isfinite(obj)) throw Error("objective is not finite");
      t.objective = obj;
    } catch (const std::exception& e) {
      t.error = e.what();
    }
  });

  std::optional<std::size_t> best;
  for (const auto& t : res.trials) {
    if (t.objective && (!best || *t.objective > *res.trials[*best].objective)) best = t.index;
  }
  if (!best) {
    std::string msg = "all " + std::to_string(res.trials.size()) + " trials failed:";
    for (const auto& t : res.trials) msg += "\n  trial " + std::to_string(t.index) + ": " + t.error;
    throw Error(msg);
  }
  res.best = *best;
  return res;
}

inline nlohmann::ordered_json to_json(const Trial& t) {
  nlohmann::ordered_json j;
  j["trial"] = t.index;
  j["seed"] = t.seed;
  j["params"] = t.params;
  if (t.objective) {
    j["objective"] = *t.objective;
  } else {
    j["error"] = t.error;
  }
  return j;
}

inline void write_trials_jsonl(std::ostream& out, const SearchResult& r) {
  for (const auto& t : r.trials) out << to_json(t).dump() << '\n';
}

}  // namespace trace
