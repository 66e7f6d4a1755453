#pragma once

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "trace/common.hpp"
#include "trace/predictor.hpp"

namespace trace {

// ---------------------------------------------------------------------------
// Prompt protocol

inline constexpr std::string_view kLabelInstruction = "Only answer with either '0' or '1'";

inline const std::string& default_system_prompt() {
  static const std::string text =
      "You are tasked with detecting trauma in text segments of {domain}. Specifically, detect instances that "
      "meet the APA’s definition of trauma. Psychological trauma, as defined by the APA, includes experiences "
      "of exposure to actual or threatened death, serious injury, or sexual violence, either directly encountered "
      "or witnessed. It also includes instances where individuals learn that the traumatic event(s) occurred to a "
      "close family member or friend. Label the text with '1' if there are indicators of trauma based on this "
      "definition, and '0' if there are no indicators of trauma. Note that trauma is rare and occurs in less than "
      "20% of the cases. Only answer with either '0' or '1'.";
  return text;
}

struct PromptTemplate {
  std::string system_text = default_system_prompt();
  std::string domain_slot = "{domain}";
  std::string domain_context = "transcripts of genocide tribunals";
};

struct ChatMessages {
  std::string system;
  std::string user;
};

inline std::string render_system_message(const PromptTemplate& tpl) {
  if (tpl.system_text.find(kLabelInstruction) == std::string::npos) {
    throw InputError("prompt template must contain the instruction \"" + std::string(kLabelInstruction) + "\"");
  }
  std::string system = tpl.system_text;
  if (!tpl.domain_slot.empty()) {
    for (auto at = system.find(tpl.domain_slot); at != std::string::npos;
         at = system.find(tpl.domain_slot, at + tpl.domain_context.size())) {
      system.replace(at, tpl.domain_slot.size(), tpl.domain_context);
    }
  }
  return system;
}

/// System message = template with the domain slot substituted; user message = the sample verbatim.
inline ChatMessages render_prompt(const PromptTemplate& tpl, std::string_view sample) {
  if (sample.empty()) throw InputError("cannot prompt with an empty sample");
  return {render_system_message(tpl), std::string(sample)};
}

// ---------------------------------------------------------------------------
// Log-odds extraction from a chat-completions response

inline constexpr double kFallbackLogOdds = 10.0;

namespace detail {

inline std::string trim_copy(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace detail

/// Class log-odds lp(positive) - lp(negative) from the first generated token.
///
/// Tokens are matched after trimming whitespace; when only one label is among
/// the returned top tokens, the other is floored at (min returned logprob -
/// ln 10). Without either label the completion text decides, mapped to
/// +/-10. Swapping the label roles negates the result.
inline double extract_log_odds(const nlohmann::json& response, const std::string& positive = "1",
                               const std::string& negative = "0") {
  const nlohmann::json* choice = nullptr;
  if (response.contains("choices") && response["choices"].is_array() && !response["choices"].empty()) {
    choice = &response["choices"][0];
  }
  if (choice == nullptr) throw Error("unparseable completion: response has no choices");

  std::optional<double> lp_pos;
  std::optional<double> lp_neg;
  std::optional<double> lp_min;
  const auto* lp = choice->contains("logprobs") ? &(*choice)["logprobs"] : nullptr;
  if (lp && lp->is_object() && lp->contains("content") && (*lp)["content"].is_array() &&
      !(*lp)["content"].empty()) {
    const auto& first = (*lp)["content"][0];
    auto consider = [&](const nlohmann::json& entry) {
      if (!entry.contains("token") || !entry.contains("logprob") || !entry["logprob"].is_number()) return;
      const double v = entry["logprob"].get<double>();
      lp_min = lp_min ? std::min(*lp_min, v) : v;
      const auto tok = detail::trim_copy(entry["token"].get<std::string>());
      if (tok == positive) lp_pos = lp_pos ? std::max(*lp_pos, v) : v;
      if (tok == negative) lp_neg = lp_neg ? std::max(*lp_neg, v) : v;
    };
    if (first.contains("top_logprobs") && first["top_logprobs"].is_array()) {
      for (const auto& e : first["top_logprobs"]) consider(e);
    }
    consider(first);
  }
  if (lp_pos || lp_neg) {
    const double floor = *lp_min - std::log(10.0);
    return lp_pos.value_or(floor) - lp_neg.value_or(floor);
  }
  std::string text;
  if (choice->contains("message") && (*choice)["message"].contains("content") &&
      (*choice)["message"]["content"].is_string()) {
    text = detail::trim_copy((*choice)["message"]["content"].get<std::string>());
  }
  if (text == positive) return kFallbackLogOdds;
  if (text == negative) return -kFallbackLogOdds;
  throw Error("unparseable completion: '" + text + "'");
}

// ---------------------------------------------------------------------------
// HTTP client

struct ApiPredictorConfig {
  std::string endpoint = "https://api.openai.com/v1/chat/completions";
  std::string model = "gpt-4-turbo";
  std::string api_key_env = "TRACE_API_KEY";
  double timeout_seconds = 60.0;
  int max_retries = 3;
  double backoff_seconds = 0.5;  // doubled after every failed attempt
  std::optional<std::uint64_t> seed;
  int top_logprobs = 20;
  std::size_t max_in_flight = 4;
  std::string cache_dir;  // empty: no response cache
  PromptTemplate prompt;
};

inline void validate(const ApiPredictorConfig& c) {
  if (!(c.timeout_seconds > 0.0)) throw InputError("api timeout must be > 0");
  if (c.max_retries < 0) throw InputError("api retries must be >= 0");
  if (c.max_in_flight == 0) throw InputError("api max_in_flight must be >= 1");
}

namespace detail {

struct SplitUrl {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

inline SplitUrl split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw InputError("endpoint URL needs a scheme: '" + url + "'");
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

inline nlohmann::ordered_json chat_request(const ApiPredictorConfig& cfg, const ChatMessages& m) {
  nlohmann::ordered_json body;
  body["model"] = cfg.model;
  body["messages"] = nlohmann::ordered_json::array(
      {{{"role", "system"}, {"content", m.system}}, {{"role", "user"}, {"content", m.user}}});
  body["temperature"] = 0;
  body["max_tokens"] = 1;
  body["logprobs"] = true;
  body["top_logprobs"] = cfg.top_logprobs;
  if (cfg.seed) body["seed"] = *cfg.seed;
  return body;
}

inline std::string cache_key(const ApiPredictorConfig& cfg, const ChatMessages& m) {
  std::uint64_t h = fnv1a64(cfg.model);
  h = fnv1a64(std::string_view("\0", 1), h);
  h = fnv1a64(chat_request(cfg, m).dump(), h);
  return hex64(h);
}

}  // namespace detail

/// Raw response for one prompt, served from the on-disk cache when present.
inline nlohmann::json api_fetch(const ApiPredictorConfig& cfg, const ChatMessages& messages) {
  namespace fs = std::filesystem;
  fs::path cache_file;
  if (!cfg.cache_dir.empty()) {
    cache_file = fs::path(cfg.cache_dir) / (detail::cache_key(cfg, messages) + ".json");
    std::ifstream in(cache_file, std::ios::binary);
    if (in) {
      try {
        return nlohmann::json::parse(in);
      } catch (const nlohmann::json::exception&) {
        // corrupt entry: refetch and overwrite
      }
    }
  }

  const auto url = detail::split_url(cfg.endpoint);
  const auto body = detail::chat_request(cfg, messages).dump();
  httplib::Headers headers;
  if (const char* key = std::getenv(cfg.api_key_env.c_str()); key != nullptr && *key != '\0') {
    headers.emplace("Authorization", std::string("Bearer ") + key);
  }
  std::string last_error = "no attempt made";
  double backoff = cfg.backoff_seconds;
  for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(std::chrono::duration<double>(backoff));
      backoff *= 2.0;
    }
    httplib::Client client(url.origin);
    const auto secs = static_cast<time_t>(cfg.timeout_seconds);
    const auto usecs = static_cast<time_t>((cfg.timeout_seconds - static_cast<double>(secs)) * 1e6);
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);
    auto res = client.Post(url.path, headers, body, "application/json");
    if (!res) {
      last_error = httplib::to_string(res.error());
      continue;
    }
    if (res->status == 429 || res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200) {
      throw Error("api unavailable: HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200));
    }
    nlohmann::json parsed;
    try {
      parsed = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception&) {
      last_error = "response is not JSON";
      continue;
    }
    if (!cache_file.empty()) {
      fs::create_directories(cache_file.parent_path());
      const auto tmp = cache_file.string() + ".tmp" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
      {
        std::ofstream out(tmp, std::ios::binary);
        out << res->body;
      }
      fs::rename(tmp, cache_file);
    }
    return parsed;
  }
  throw Error("api unavailable after " + std::to_string(cfg.max_retries + 1) + " attempts: " + last_error);
}

inline double api_log_odds(const ApiPredictorConfig& cfg, const ChatMessages& messages) {
  return extract_log_odds(api_fetch(cfg, messages));
}

/// Chat-completions model behind the Predictor contract.
class ApiPredictor final : public Predictor {
 public:
  explicit ApiPredictor(ApiPredictorConfig cfg) : cfg_(std::move(cfg)) { validate(cfg_); }

  const ApiPredictorConfig& config() const { return cfg_; }

  // An empty text (the all-removed coalition in attribution) is sent as an
  // empty user message.
  double log_odds(std::string_view text) const override {
    if (text.empty()) return api_log_odds(cfg_, {render_system_message(cfg_.prompt), ""});
    return api_log_odds(cfg_, render_prompt(cfg_.prompt, text));
  }

  std::vector<double> log_odds_batch(std::span<const std::string> texts) const override {
    std::vector<double> out(texts.size());
    parallel_for(texts.size(), cfg_.max_in_flight, [&](std::size_t i) { out[i] = log_odds(texts[i]); });
    return out;
  }

  std::vector<double> log_odds_tokens_batch(std::span<const std::vector<std::string>> seqs) const override {
    std::vector<std::string> texts;
    texts.reserve(seqs.size());
    for (const auto& s : seqs) texts.push_back(join_tokens(s));
    return log_odds_batch(texts);
  }

  std::string name() const override { return "api:" + cfg_.model; }

 private:
  ApiPredictorConfig cfg_;
};

}  // namespace trace
