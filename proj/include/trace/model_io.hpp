#pragma once

#include <fstream>
#include <memory>
#include <set>
#include <string>

#include <json.hpp>

#include "trace/bridge.hpp"
#include "trace/ffnn.hpp"
#include "trace/llm_client.hpp"
#include "trace/logreg.hpp"
#include "trace/naive_bayes.hpp"
#include "trace/validation.hpp"

namespace trace {

// A model spec is a JSON object {"type": ..., <hyperparameters>}:
//   naive_bayes  alpha, use_counts
//   logreg       C, penalty, n_gram_range, max_iter, tol
//   ffnn         hidden_dims, lr, epochs, batch_size
//   api          endpoint, model, api_key_env, timeout_seconds, max_retries,
//                backoff_seconds, top_logprobs, max_in_flight, cache_dir,
//                seed, domain_context, system_text
//   bridge       transport (stdio|tcp), command, host, port, timeout_seconds,
//                batch_size
// api and bridge models are not trained; "training" returns the remote
// predictor unchanged.

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& known, const std::string& what) {
  if (!j.is_object()) throw InputError(what + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw InputError(what + ": unknown field '" + k + "'");
  }
}

inline std::string model_type(const nlohmann::json& spec) {
  if (!spec.is_object() || !spec.contains("type") || !spec["type"].is_string()) {
    throw InputError("model spec needs a string 'type'");
  }
  return spec["type"].get<std::string>();
}

}  // namespace detail

inline ApiPredictorConfig api_config_from_json(const nlohmann::json& j) {
  detail::check_keys(j,
                     {"type", "endpoint", "model", "api_key_env", "timeout_seconds", "max_retries", "backoff_seconds",
                      "top_logprobs", "max_in_flight", "cache_dir", "seed", "domain_context", "system_text"},
                     "api model");
  ApiPredictorConfig c;
  try {
    c.endpoint = j.value("endpoint", c.endpoint);
    c.model = j.value("model", c.model);
    c.api_key_env = j.value("api_key_env", c.api_key_env);
    c.timeout_seconds = j.value("timeout_seconds", c.timeout_seconds);
    c.max_retries = j.value("max_retries", c.max_retries);
    c.backoff_seconds = j.value("backoff_seconds", c.backoff_seconds);
    c.top_logprobs = j.value("top_logprobs", c.top_logprobs);
    c.max_in_flight = j.value("max_in_flight", c.max_in_flight);
    c.cache_dir = j.value("cache_dir", c.cache_dir);
    if (j.contains("seed") && !j["seed"].is_null()) c.seed = j["seed"].get<std::uint64_t>();
    c.prompt.domain_context = j.value("domain_context", c.prompt.domain_context);
    c.prompt.system_text = j.value("system_text", c.prompt.system_text);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("api model: ") + e.what());
  }
  validate(c);
  return c;
}

inline nlohmann::ordered_json to_json(const ApiPredictorConfig& c) {
  nlohmann::ordered_json j;
  j["type"] = "api";
  j["endpoint"] = c.endpoint;
  j["model"] = c.model;
  j["api_key_env"] = c.api_key_env;
  j["timeout_seconds"] = c.timeout_seconds;
  j["max_retries"] = c.max_retries;
  j["backoff_seconds"] = c.backoff_seconds;
  j["top_logprobs"] = c.top_logprobs;
  j["max_in_flight"] = c.max_in_flight;
  j["cache_dir"] = c.cache_dir;
  j["seed"] = c.seed ? nlohmann::ordered_json(*c.seed) : nlohmann::ordered_json(nullptr);
  j["domain_context"] = c.prompt.domain_context;
  if (c.prompt.system_text != default_system_prompt()) j["system_text"] = c.prompt.system_text;
  return j;
}

inline BridgeEndpoint bridge_endpoint_from_json(const nlohmann::json& j) {
  detail::check_keys(j, {"type", "transport", "command", "host", "port", "timeout_seconds", "batch_size"},
                     "bridge model");
  BridgeEndpoint e;
  try {
    const auto t = j.value("transport", std::string("stdio"));
    if (t == "stdio") {
      e.transport = BridgeEndpoint::Transport::stdio;
    } else if (t == "tcp") {
      e.transport = BridgeEndpoint::Transport::tcp;
    } else {
      throw InputError("bridge transport must be 'stdio' or 'tcp'");
    }
    e.command = j.value("command", e.command);
    e.host = j.value("host", e.host);
    e.port = j.value("port", e.port);
    e.timeout_seconds = j.value("timeout_seconds", e.timeout_seconds);
  } catch (const nlohmann::json::exception& ex) {
    throw InputError(std::string("bridge model: ") + ex.what());
  }
  if (e.transport == BridgeEndpoint::Transport::stdio && e.command.empty()) {
    throw InputError("bridge model: stdio transport needs 'command'");
  }
  if (e.transport == BridgeEndpoint::Transport::tcp && (e.port <= 0 || e.port > 65535)) {
    throw InputError("bridge model: tcp transport needs a port in 1..65535");
  }
  return e;
}

inline std::shared_ptr<const Predictor> open_bridge(const nlohmann::json& spec) {
  const auto endpoint = bridge_endpoint_from_json(spec);
  const auto batch = spec.value("batch_size", std::size_t{64});
  if (batch == 0) throw InputError("bridge model: batch_size must be >= 1");
  return std::make_shared<BridgePredictor>(std::make_shared<BridgeClient>(endpoint), batch);
}

/// Checks a model spec without training anything.
inline void validate_model_spec(const nlohmann::json& spec) {
  const auto type = detail::model_type(spec);
  try {
    if (type == "naive_bayes") {
      detail::check_keys(spec, {"type", "alpha", "use_counts"}, "naive_bayes model");
      if (!(spec.value("alpha", 1.0) > 0.0)) throw InputError("naive_bayes model: alpha must be > 0");
      (void)spec.value("use_counts", true);
    } else if (type == "logreg") {
      detail::check_keys(spec, {"type", "C", "penalty", "n_gram_range", "max_iter", "tol"}, "logreg model");
      if (!(spec.value("C", 1.0) > 0.0)) throw InputError("logreg model: C must be > 0");
      (void)penalty_from_string(spec.value("penalty", std::string("l2")));
      const auto r = spec.value("n_gram_range", std::vector<std::size_t>{1, 2});
      if (r.size() != 2 || r[0] < 1 || r[0] > r[1]) throw InputError("logreg model: n_gram_range must be [lo, hi]");
    } else if (type == "ffnn") {
      detail::check_keys(spec, {"type", "hidden_dims", "lr", "epochs", "batch_size"}, "ffnn model");
      const auto h = spec.value("hidden_dims", std::vector<std::size_t>{50});
      if (h.empty() || h.size() > 2) throw InputError("ffnn model: hidden_dims needs one or two widths");
      for (auto d : h) {
        if (d == 0) throw InputError("ffnn model: hidden widths must be >= 1");
      }
      if (!(spec.value("lr", 0.5) > 0.0)) throw InputError("ffnn model: lr must be > 0");
      if (spec.value("batch_size", std::size_t{32}) == 0) throw InputError("ffnn model: batch_size must be >= 1");
      (void)spec.value("epochs", std::size_t{10});
    } else if (type == "api") {
      (void)api_config_from_json(spec);
    } else if (type == "bridge") {
      (void)bridge_endpoint_from_json(spec);
    } else {
      throw InputError("unknown model type '" + type + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(type + " model: " + e.what());
  }
}

/// Trainer for a model spec. Hyperparameter types are checked up front.
inline Trainer make_trainer(const nlohmann::json& spec, const TokenizerConfig& tok = {}) {
  validate_model_spec(spec);
  const auto type = detail::model_type(spec);
  if (type == "naive_bayes") {
    const double alpha = spec.value("alpha", 1.0);
    const bool counts = spec.value("use_counts", true);
    return [=](const Corpus& c, std::uint64_t) -> std::shared_ptr<const Predictor> {
      return std::make_shared<NaiveBayesModel>(train_naive_bayes(c, alpha, counts, tok));
    };
  }
  if (type == "logreg") {
    LogRegConfig cfg;
    cfg.C = spec.value("C", cfg.C);
    cfg.penalty = penalty_from_string(spec.value("penalty", std::string("l2")));
    const auto r = spec.value("n_gram_range", std::vector<std::size_t>{cfg.ngram_lo, cfg.ngram_hi});
    cfg.ngram_lo = r[0];
    cfg.ngram_hi = r[1];
    cfg.max_iter = spec.value("max_iter", cfg.max_iter);
    cfg.tol = spec.value("tol", cfg.tol);
    return [=](const Corpus& c, std::uint64_t) -> std::shared_ptr<const Predictor> {
      return std::make_shared<LogRegModel>(train_ngram_logreg(c, cfg, tok));
    };
  }
  if (type == "ffnn") {
    FfnnConfig cfg;
    cfg.hidden_dims = spec.value("hidden_dims", cfg.hidden_dims);
    cfg.lr = spec.value("lr", cfg.lr);
    cfg.epochs = spec.value("epochs", cfg.epochs);
    cfg.batch_size = spec.value("batch_size", cfg.batch_size);
    return [=](const Corpus& c, std::uint64_t seed) -> std::shared_ptr<const Predictor> {
      auto run = cfg;
      run.seed = seed;
      return std::make_shared<FeedForwardModel>(train_ffnn(c, run, tok));
    };
  }
  if (type == "api") {
    auto p = std::make_shared<ApiPredictor>(api_config_from_json(spec));
    return [p](const Corpus&, std::uint64_t) -> std::shared_ptr<const Predictor> { return p; };
  }
  // bridge: one session shared by every fold
  auto p = open_bridge(spec);
  return [p](const Corpus&, std::uint64_t) -> std::shared_ptr<const Predictor> { return p; };
}

/// Spec with `overrides` applied on top of `base` (both objects).
inline nlohmann::json merge_spec(const nlohmann::json& base, const nlohmann::json& overrides) {
  auto out = base;
  for (const auto& [k, v] : overrides.items()) out[k] = v;
  return out;
}

// ---------------------------------------------------------------------------
// Files: naive_bayes/logreg as JSON, ffnn as a tensor container, api/bridge as
// a JSON reference to the remote endpoint.

/// `run` (if not empty) is stored alongside the model under the key "run".
inline void save_predictor(const std::string& path, const Predictor& p, const nlohmann::json& spec,
                           const nlohmann::ordered_json& run = {}) {
  const auto type = detail::model_type(spec);
  if (type == "ffnn") {
    const auto* m = dynamic_cast<const FeedForwardModel*>(&p);
    if (!m) throw Error("save: predictor is not an ffnn");
    auto c = to_container(*m);
    if (!run.is_null()) c.header["run"] = run;
    write_tensor_file(path, kFfnnMagic, c);
    return;
  }
  nlohmann::ordered_json j;
  if (type == "naive_bayes") {
    const auto* m = dynamic_cast<const NaiveBayesModel*>(&p);
    if (!m) throw Error("save: predictor is not a naive_bayes model");
    j = to_json(*m);
  } else if (type == "logreg") {
    const auto* m = dynamic_cast<const LogRegModel*>(&p);
    if (!m) throw Error("save: predictor is not a logreg model");
    j = to_json(*m);
  } else {
    j["format"] = "trace-model";
    j["version"] = 1;
    j["type"] = type;
    j["reference"] = spec;
  }
  if (!run.is_null()) j["run"] = run;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  out << j.dump(1) << '\n';
  if (!out) throw Error("write failed for '" + path + "'");
}

inline std::shared_ptr<const Predictor> load_predictor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open model '" + path + "'");
  char magic[4] = {};
  in.read(magic, 4);
  in.clear();
  in.seekg(0);
  if (std::string_view(magic, 4) == kFfnnMagic) {
    return std::make_shared<FeedForwardModel>(ffnn_from_container(read_tensor_container(in, kFfnnMagic)));
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw InputError("model '" + path + "': " + e.what());
  }
  if (!j.is_object() || j.value("format", std::string()) != "trace-model") {
    throw InputError("model '" + path + "': not a trace model file");
  }
  const auto type = detail::model_type(j);
  if (type == "naive_bayes") return std::make_shared<NaiveBayesModel>(naive_bayes_from_json(j));
  if (type == "logreg") return std::make_shared<LogRegModel>(logreg_from_json(j));
  if (type == "api") return std::make_shared<ApiPredictor>(api_config_from_json(j.at("reference")));
  if (type == "bridge") return open_bridge(j.at("reference"));
  throw InputError("model '" + path + "': unknown type '" + type + "'");
}

}  // namespace trace
