#include <atomic>
#include <filesystem>
#include <thread>

#include <gtest/gtest.h>

#include "trace/llm_client.hpp"
#include "trace/model_io.hpp"

using namespace trace;
namespace fs = std::filesystem;

namespace {

nlohmann::json completion(const std::string& content, std::vector<std::pair<std::string, double>> top) {
  nlohmann::json tops = nlohmann::json::array();
  for (const auto& [t, lp] : top) tops.push_back({{"token", t}, {"logprob", lp}, {"bytes", nullptr}});
  nlohmann::json first{{"token", top.empty() ? content : top.front().first},
                       {"logprob", top.empty() ? 0.0 : top.front().second},
                       {"top_logprobs", tops}};
  return {{"choices", {{{"index", 0},
                        {"message", {{"role", "assistant"}, {"content", content}}},
                        {"logprobs", {{"content", {first}}}}}}}};
}

// Chat-completions stand-in: answers "1" for texts containing "wounded". The
// first `fail_first` requests get `fail_status`.
class StubApi {
 public:
  StubApi() {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      const auto n = requests_++;
      last_auth_ = req.get_header_value("Authorization");
      if (n < fail_first_) {
        res.status = fail_status_;
        res.set_content("{\"error\":\"try later\"}", "application/json");
        return;
      }
      const auto body = nlohmann::json::parse(req.body);
      last_body_ = body;
      const auto user = body["messages"][1]["content"].get<std::string>();
      const bool pos = user.find("wounded") != std::string::npos;
      const auto reply = pos ? completion("1", {{"1", -0.1}, {"0", -2.4}}) : completion("0", {{"0", -0.05}, {"1", -3.0}});
      res.set_content(reply.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~StubApi() {
    server_.stop();
    thread_.join();
  }

  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat/completions"; }
  void fail(int first, int status) {
    fail_first_ = first;
    fail_status_ = status;
  }
  int requests() const { return requests_; }
  std::string last_auth() const { return last_auth_; }
  nlohmann::json last_body() const { return last_body_; }

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<int> requests_{0};
  int fail_first_ = 0;
  int fail_status_ = 500;
  std::string last_auth_;
  nlohmann::json last_body_;
};

ApiPredictorConfig config_for(const StubApi& api) {
  ApiPredictorConfig c;
  c.endpoint = api.endpoint();
  c.model = "stub-model";
  c.timeout_seconds = 5;
  c.backoff_seconds = 0.01;
  c.max_retries = 2;
  c.max_in_flight = 1;
  return c;
}

}  // namespace

TEST(Prompt, SubstitutesDomainAndKeepsSampleVerbatim) {
  PromptTemplate tpl;
  tpl.domain_context = "counseling sessions";
  const auto m = render_prompt(tpl, "  He was hurt.  ");
  EXPECT_NE(m.system.find("text segments of counseling sessions."), std::string::npos);
  EXPECT_EQ(m.system.find("{domain}"), std::string::npos);
  EXPECT_NE(m.system.find(kLabelInstruction), std::string::npos);
  EXPECT_EQ(m.user, "  He was hurt.  ");
  EXPECT_THROW(render_prompt(tpl, ""), InputError);
}

TEST(Extract, LogOddsFromTopLogprobs) {
  EXPECT_NEAR(extract_log_odds(completion("1", {{"1", -0.1}, {" 0", -2.4}})), 2.3, 1e-12);
  // swapping label roles negates
  EXPECT_NEAR(extract_log_odds(completion("1", {{"1", -0.1}, {"0", -2.4}}), "0", "1"), -2.3, 1e-12);
}

TEST(Extract, MissingLabelIsFlooredBelowMinimum) {
  const auto r = completion("1", {{"1", -0.2}, {"Yes", -4.0}});
  EXPECT_NEAR(extract_log_odds(r), -0.2 - (-4.0 - std::log(10.0)), 1e-12);
}

TEST(Extract, FallsBackToCompletionText) {
  nlohmann::json r{{"choices", {{{"message", {{"content", " 0\n"}}}}}}};
  EXPECT_EQ(extract_log_odds(r), -kFallbackLogOdds);
  r["choices"][0]["message"]["content"] = "maybe";
  EXPECT_THROW(extract_log_odds(r), Error);
  EXPECT_THROW(extract_log_odds(nlohmann::json::object()), Error);
}

TEST(ApiClient, RequestShapeAndScores) {
  StubApi api;
  ::setenv("TRACE_TEST_KEY", "sk-test", 1);
  auto cfg = config_for(api);
  cfg.api_key_env = "TRACE_TEST_KEY";
  cfg.seed = 11;
  const ApiPredictor p(cfg);
  EXPECT_NEAR(p.log_odds("soldier wounded"), 2.3, 1e-12);
  EXPECT_EQ(api.last_auth(), "Bearer sk-test");
  const auto body = api.last_body();
  EXPECT_EQ(body["model"], "stub-model");
  EXPECT_EQ(body["max_tokens"], 1);
  EXPECT_EQ(body["temperature"], 0);
  EXPECT_EQ(body["logprobs"], true);
  EXPECT_EQ(body["seed"], 11);
  EXPECT_EQ(body["messages"][0]["role"], "system");
  EXPECT_NEAR(p.log_odds("calm"), -2.95, 1e-12);
}

TEST(ApiClient, RetriesTransientFailures) {
  StubApi api;
  api.fail(2, 503);
  const ApiPredictor p(config_for(api));
  EXPECT_NEAR(p.log_odds("wounded"), 2.3, 1e-12);
  EXPECT_EQ(api.requests(), 3);
}

TEST(ApiClient, GivesUpAfterRetries) {
  StubApi api;
  api.fail(100, 429);
  const ApiPredictor p(config_for(api));
  try {
    p.log_odds("x");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("api unavailable after 3 attempts: HTTP 429"), std::string::npos) << e.what();
  }
  EXPECT_EQ(api.requests(), 3);
}

TEST(ApiClient, ClientErrorsAreNotRetried) {
  StubApi api;
  api.fail(100, 401);
  const ApiPredictor p(config_for(api));
  EXPECT_THROW(p.log_odds("x"), Error);
  EXPECT_EQ(api.requests(), 1);
}

TEST(ApiClient, UnreachableEndpoint) {
  ApiPredictorConfig cfg;
  cfg.endpoint = "http://127.0.0.1:1/v1/chat/completions";
  cfg.max_retries = 0;
  cfg.timeout_seconds = 2;
  EXPECT_THROW(ApiPredictor(cfg).log_odds("x"), Error);
}

TEST(ApiClient, CacheServesRepeatsWithoutNetwork) {
  const auto dir = fs::temp_directory_path() / ("trace_api_cache_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  std::vector<std::string> texts{"a wounded man", "quiet", "wounded", "quiet"};
  std::vector<double> first;
  std::string endpoint;
  {
    StubApi api;
    auto cfg = config_for(api);
    cfg.cache_dir = dir.string();
    cfg.max_in_flight = 3;
    first = ApiPredictor(cfg).log_odds_batch(texts);
    EXPECT_LE(api.requests(), 4);
    endpoint = api.endpoint();
  }
  // server gone: every answer must come from the cache
  ApiPredictorConfig cfg;
  cfg.endpoint = endpoint;
  cfg.model = "stub-model";
  cfg.cache_dir = dir.string();
  cfg.max_retries = 0;
  cfg.timeout_seconds = 1;
  EXPECT_EQ(ApiPredictor(cfg).log_odds_batch(texts), first);
  cfg.model = "other-model";
  EXPECT_THROW(ApiPredictor(cfg).log_odds("quiet"), Error);
  fs::remove_all(dir);
}

TEST(ApiClient, ConfigValidation) {
  ApiPredictorConfig cfg;
  cfg.max_in_flight = 0;
  EXPECT_THROW(ApiPredictor{cfg}, InputError);
  EXPECT_THROW(api_config_from_json({{"type", "api"}, {"modle", "x"}}), InputError);
  const auto c = api_config_from_json({{"type", "api"}, {"model", "m"}, {"seed", 3}});
  EXPECT_EQ(c.model, "m");
  EXPECT_EQ(*c.seed, 3u);
  EXPECT_EQ(api_config_from_json(to_json(c)).model, "m");
}

TEST(ApiClient, SavedReferenceReloads) {
  StubApi api;
  const auto dir = fs::temp_directory_path() / ("trace_api_ref_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  const nlohmann::json spec{{"type", "api"}, {"endpoint", api.endpoint()}, {"model", "stub-model"},
                            {"max_retries", 0}, {"timeout_seconds", 5}};
  const auto p = make_trainer(spec)(Corpus{}, 0);
  const auto path = (dir / "model.json").string();
  save_predictor(path, *p, spec);
  const auto back = load_predictor(path);
  EXPECT_EQ(back->name(), "api:stub-model");
  EXPECT_NEAR(back->log_odds("wounded"), 2.3, 1e-12);
  fs::remove_all(dir);
}
