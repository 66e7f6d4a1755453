#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include <sys/wait.h>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("trace_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()) + "_" +
            std::to_string(::getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    std::ofstream(dir_ / "gen.json") << R"({"n_docs": 160, "positive_rate": 0.3, "signal_tokens": ["wounded", "killed"],
      "noise_vocab_size": 60, "doc_length": 10, "domain": "gtc"})";
  }
  void TearDown() override { fs::remove_all(dir_); }

  // Runs the CLI inside the scratch directory; returns the exit code.
  int run(const std::string& args) {
    const std::string cmd = "cd '" + dir_.string() + "' && '" + std::string(TRACE_CLI) + "' " + args +
                            " > stdout.txt 2> stderr.txt";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  json error_json() { return json::parse(slurp(dir_ / "stderr.txt")); }
  json read_json(const std::string& rel) { return json::parse(slurp(dir_ / rel)); }

  void ingest() { ASSERT_EQ(run("ingest --data gen.json --set ingest.format=generator --seed 3 --out ing"), 0); }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, IngestWritesStampedArtifactsAndManifest) {
  ingest();
  const auto stats = read_json("ing/stats.json");
  const auto manifest = read_json("ing/manifest.json");
  EXPECT_EQ(stats.begin().key(), "config_hash");
  EXPECT_EQ(stats["config_hash"], manifest["config_hash"]);
  EXPECT_EQ(stats["seed"], 3);
  EXPECT_EQ(stats["documents"], 160);
  EXPECT_TRUE(std::regex_match(stats["size_and_balance"].get<std::string>(), std::regex(R"(160 \(\d+\.\d%\))")));
  std::set<std::string> listed;
  for (const auto& f : manifest["files"]) {
    listed.insert(f["path"].get<std::string>());
    EXPECT_EQ(f["bytes"].get<std::size_t>(), fs::file_size(dir_ / "ing" / f["path"].get<std::string>()));
  }
  EXPECT_EQ(listed, (std::set<std::string>{"config.json", "corpus.jsonl", "stats.json"}));
}

TEST_F(Cli, TrainEvalAndExplainPipeline) {
  ingest();
  ASSERT_EQ(run("train --data ing/corpus.jsonl --model-type naive_bayes --out nb"), 0);
  ASSERT_EQ(run("eval --data ing/corpus.jsonl --model-path nb/model.json --out fixed"), 0);
  const auto csv = slurp(dir_ / "fixed/metrics.csv");
  EXPECT_EQ(csv.rfind("# config_hash=", 0), 0u);
  EXPECT_NE(csv.find("dataset,model,metric,mean,std_error,n_runs\n"), std::string::npos);

  ASSERT_EQ(run("eval --data ing/corpus.jsonl --model-type naive_bayes --runs 3 --mode cv --out cv"), 0);
  const auto m = read_json("cv/metrics.json");
  const auto& rep = m["reports"][0];
  EXPECT_EQ(rep["metrics"]["auroc"]["n_runs"], 3);
  EXPECT_GT(rep["metrics"]["auroc"]["mean"].get<double>(), 0.9);

  ASSERT_EQ(run("explain --data ing/corpus.jsonl --model-path nb/model.json --kind shap --instances 3 "
                "--n-samples 300 --out shap"),
            0);
  const auto index = read_json("shap/shap/index.json");
  ASSERT_EQ(index["instances"].size(), 3u);
  for (const auto& inst : index["instances"]) {
    const auto r = read_json("shap/" + inst["file"].get<std::string>());
    EXPECT_TRUE(r["efficiency_holds"].get<bool>());
  }
}

TEST_F(Cli, ConceptCardsHoldTopSnippets) {
  ingest();
  ASSERT_EQ(run("train --data ing/corpus.jsonl --model-type ffnn --set model.hidden_dims=[12] --set model.epochs=3 "
                "--out ff"),
            0);
  ASSERT_EQ(run("explain --data ing/corpus.jsonl --model-path ff/model.bin --kind concepts --concepts 3 --out cc"), 0)
      << slurp(dir_ / "stderr.txt");
  for (int k = 0; k < 3; ++k) {
    const auto card = slurp(dir_ / ("cc/cards/concept_0" + std::to_string(k) + ".txt"));
    std::size_t ranked = 0;
    std::istringstream lines(card);
    std::string line;
    while (std::getline(lines, line)) ranked += std::regex_search(line, std::regex(R"(^\d+\.\t)"));
    EXPECT_EQ(ranked, 25u) << card;
  }
}

TEST_F(Cli, SlalomCsvIsScatterReady) {
  ingest();
  ASSERT_EQ(run("train --data ing/corpus.jsonl --model-type naive_bayes --out nb"), 0);
  ASSERT_EQ(run("explain --data ing/corpus.jsonl --model-path nb/model.json --kind slalom "
                "--set explain.max_vocab=20 --set explain.n_background=2000 --set explain.epochs=5 --out sl"),
            0);
  std::istringstream csv(slurp(dir_ / "sl/slalom.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line.rfind("# config_hash=", 0), 0u);
  std::getline(csv, line);
  EXPECT_EQ(line, "token,value,importance");
  std::size_t rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 20u);
}

TEST_F(Cli, AgreeWithoutExpertOmitsF1) {
  std::ofstream(dir_ / "ann.csv") << "item_id,annotator_id,label\na,x,1\na,y,1\na,z,1\nb,x,0\nb,y,0\nb,z,0\n";
  ASSERT_EQ(run("agree --annotations ann.csv --out ag"), 0);
  const auto r = read_json("ag/agreement.json");
  EXPECT_EQ(r["alpha"], 1.0);
  EXPECT_FALSE(r.contains("expert_f1"));
  EXPECT_NE(slurp(dir_ / "ag/agreement.txt").find("(1) α = 1.00"), std::string::npos);
}

TEST_F(Cli, JobsDoNotChangeOutputs) {
  ingest();
  ASSERT_EQ(run("eval --data ing/corpus.jsonl --model-type naive_bayes --jobs 1 --out j1"), 0);
  ASSERT_EQ(run("eval --data ing/corpus.jsonl --model-type naive_bayes --jobs 3 --out j3"), 0);
  for (const char* f : {"metrics.csv", "metrics.json", "manifest.json"}) {
    EXPECT_EQ(slurp(dir_ / "j1" / f), slurp(dir_ / "j3" / f)) << f;
  }
}

TEST_F(Cli, InputErrorsExitTwo) {
  EXPECT_EQ(run("eval --data missing.jsonl --model-type naive_bayes --out x"), 2);
  EXPECT_EQ(error_json()["error"]["kind"], "input");
  EXPECT_EQ(error_json()["error"]["exit_code"], 2);

  ingest();
  EXPECT_EQ(run("eval --data ing/corpus.jsonl --model-type naive_bayes --set validation.runs=0 --out x"), 2);
  EXPECT_NE(error_json()["error"]["message"].get<std::string>().find("/validation/runs"), std::string::npos);
  EXPECT_EQ(run("eval --data ing/corpus.jsonl --model-type naive_bayes --set model.alpah=1 --out x"), 2);
  EXPECT_EQ(run("eval --data ing/corpus.jsonl --no-such-flag"), 2);
  EXPECT_EQ(run("frobnicate"), 2);

  std::ofstream(dir_ / "train.json") << R"({"command": "train"})";
  EXPECT_EQ(run("eval --config train.json --data ing/corpus.jsonl --model-type naive_bayes --out x"), 2);
  EXPECT_EQ(run("explain --data ing/corpus.jsonl --model-path nope.json --kind shap --out x"), 2);
}

TEST_F(Cli, RuntimeFailuresExitOne) {
  ingest();
  EXPECT_EQ(run("eval --data ing/corpus.jsonl --model-type api "
                "--set model.endpoint=http://127.0.0.1:1/v1/chat/completions --set model.max_retries=0 "
                "--set model.timeout_seconds=1 --out x"),
            1);
  const auto e = error_json();
  EXPECT_EQ(e["error"]["kind"], "runtime");
  EXPECT_NE(e["error"]["message"].get<std::string>().find("api unavailable"), std::string::npos);
}

TEST_F(Cli, FlagsOverrideConfigFile) {
  ingest();
  std::ofstream(dir_ / "cfg.json") << R"({"command": "eval", "seed": 5, "data": "ing/corpus.jsonl",
    "model": {"type": "naive_bayes", "alpha": 2.0}, "validation": {"runs": 2}})";
  ASSERT_EQ(run("eval --config cfg.json --seed 9 --runs 3 --out o"), 0);
  const auto cfg = read_json("o/config.json");
  EXPECT_EQ(cfg["seed"], 9);
  EXPECT_EQ(cfg["validation"]["runs"], 3);
  EXPECT_EQ(cfg["model"]["alpha"], 2.0);
  EXPECT_EQ(read_json("o/metrics.json")["seed"], 9);
}
