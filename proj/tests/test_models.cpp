#include <filesystem>

#include <gtest/gtest.h>

#include "trace/ffnn.hpp"
#include "trace/logreg.hpp"
#include "trace/model_io.hpp"
#include "trace/naive_bayes.hpp"
#include "trace/shap.hpp"

using namespace trace;
namespace fs = std::filesystem;

namespace {

Segment seg(std::string id, std::string text, int label) {
  Segment s;
  s.id = std::move(id);
  s.text = std::move(text);
  s.label = label;
  return s;
}

// Three positives, one negative; worked by hand below.
Corpus toy_corpus() {
  return Corpus({seg("d1", "wounded soldier wounded", 1), seg("d2", "soldier killed", 1),
                 seg("d3", "soldier walked", 1), seg("d4", "calm day", 0)});
}

Corpus synthetic(std::size_t n, std::uint64_t seed) {
  GeneratorConfig g;
  g.n_docs = n;
  g.positive_rate = 0.3;
  g.signal_tokens = {"wounded", "killed"};
  g.noise_vocab_size = 60;
  g.doc_length = 8;
  g.doc_length_max = 12;
  return synthesize_corpus(g, seed);
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("trace_models_" + name + "_" + std::to_string(::getpid()));
  fs::create_directories(p);
  return p;
}

}  // namespace

// Count mode, alpha = 1, vocabulary {calm day killed soldier walked wounded}:
//   class 1 counts: wounded 2, soldier 3, killed 1, walked 1  (total 7, denominator 7 + 7 = 14)
//   class 0 counts: calm 1, day 1                             (total 2, denominator 2 + 7 = 9)
//   prior ln(3/1)
//   w(wounded) = ln(3/14) - ln(1/9),  w(soldier) = ln(4/14) - ln(1/9)
//   w(calm)    = ln(1/14) - ln(2/9),  unseen     = ln(1/14) - ln(1/9)
TEST(NaiveBayes, MatchesHandComputedSheet) {
  const auto m = train_naive_bayes(toy_corpus(), 1.0, true);
  EXPECT_NEAR(m.prior_log_odds(), std::log(3.0), 1e-12);
  EXPECT_NEAR(m.token_weight("wounded"), std::log(27.0 / 14.0), 1e-12);
  EXPECT_NEAR(m.token_weight("soldier"), std::log(36.0 / 14.0), 1e-12);
  EXPECT_NEAR(m.token_weight("calm"), std::log(9.0 / 28.0), 1e-12);
  EXPECT_NEAR(m.unseen_weight(), std::log(9.0 / 14.0), 1e-12);
  // 3 * 27/14 * 36/14 * 9/28 * 9/14
  EXPECT_NEAR(nb_log_odds(m, "Wounded soldier, calm stranger"), std::log(236196.0 / 76832.0), 1e-12);
}

// Presence mode: class 1 doc counts wounded 1, soldier 3, killed 1, walked 1
// (total 6, denominator 13); class 0 unchanged (denominator 9).
TEST(NaiveBayes, PresenceModeCountsDocumentsOnce) {
  const auto m = train_naive_bayes(toy_corpus(), 1.0, false);
  EXPECT_NEAR(m.token_weight("wounded"), std::log(2.0 / 13.0) - std::log(1.0 / 9.0), 1e-12);
  EXPECT_NEAR(nb_log_odds(m, "wounded wounded"), std::log(3.0) + std::log(18.0 / 13.0), 1e-12);
}

TEST(NaiveBayes, AdditiveOverTokens) {
  const auto m = train_naive_bayes(synthetic(300, 2), 0.5, true);
  const std::vector<std::string> a{"wounded", "w3"};
  const std::vector<std::string> b{"killed", "w17", "w3"};
  std::vector<std::string> ab = a;
  ab.insert(ab.end(), b.begin(), b.end());
  EXPECT_NEAR(m.log_odds_tokens(ab) - m.prior_log_odds(),
              (m.log_odds_tokens(a) - m.prior_log_odds()) + (m.log_odds_tokens(b) - m.prior_log_odds()), 1e-12);
}

TEST(NaiveBayes, ExactShapleyEqualsTokenWeights) {
  const auto m = train_naive_bayes(toy_corpus(), 1.0, true);
  const std::vector<std::string> toks{"wounded", "soldier", "soldier", "calm", "stranger"};
  const auto r = exact_shap_tokens(m, toks);
  for (std::size_t i = 0; i < toks.size(); ++i) EXPECT_NEAR(r.phi[i], m.token_weight(toks[i]), 1e-10) << toks[i];
}

TEST(NaiveBayes, RejectsDegenerateTraining) {
  EXPECT_THROW(train_naive_bayes(toy_corpus(), 0.0, true), InputError);
  EXPECT_THROW(train_naive_bayes(Corpus({seg("a", "x", 1)}), 1.0, true), InputError);
}

TEST(NaiveBayes, ClassifiesSyntheticSignal) {
  const auto m = train_naive_bayes(synthetic(400, 1), 1.0, true);
  EXPECT_EQ(classify(m, "w1 w2 wounded w4"), 1);
  EXPECT_EQ(classify(m, "w1 w2 w3 w4"), 0);
}

TEST(LogReg, GradientMatchesFiniteDifferences) {
  const auto c = synthetic(60, 4);
  const auto docs = tokenize_corpus(c);
  const auto vocab = build_vocab(std::span<const std::vector<std::string>>(docs));
  detail::LogRegProblem prob;
  prob.dim = vocab.size();
  prob.inv_c = 0.5;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    prob.x.push_back(tfidf_vectorize(docs[i], vocab));
    prob.y.push_back(*c[i].label);
  }
  Rng rng(9);
  std::vector<double> theta(prob.dim + 1);
  for (auto& t : theta) t = 0.3 * standard_normal(rng);
  const auto g = prob.gradient(theta);
  const double h = 1e-6;
  for (std::size_t k : {std::size_t{0}, prob.dim / 2, prob.dim}) {
    auto tp = theta;
    auto tm = theta;
    tp[k] += h;
    tm[k] -= h;
    EXPECT_NEAR(g[k], (prob.loss(tp) - prob.loss(tm)) / (2 * h), 1e-7);
  }
}

TEST(LogReg, LossDecreasesAndConverges) {
  LogRegConfig cfg;
  cfg.C = 10.0;
  cfg.tol = 1e-5;
  const auto m = train_ngram_logreg(synthetic(200, 5), cfg);
  const auto& hist = m.report().loss_history;
  ASSERT_GE(hist.size(), 2u);
  for (std::size_t i = 1; i < hist.size(); ++i) EXPECT_LE(hist[i], hist[i - 1]);
  EXPECT_TRUE(m.report().converged);
  EXPECT_GT(m.log_odds("w1 wounded w2"), m.log_odds("w1 w5 w2"));
}

TEST(LogReg, BigramsAreFeatures) {
  LogRegConfig cfg;
  const auto m = train_ngram_logreg(synthetic(50, 6), cfg);
  bool has_bigram = false;
  for (const auto& t : m.vocabulary().tokens()) has_bigram |= t.find('_') != std::string::npos;
  EXPECT_TRUE(has_bigram);
}

TEST(LogReg, MaxIterReportsWarning) {
  LogRegConfig cfg;
  cfg.max_iter = 2;
  cfg.tol = 1e-12;
  const auto m = train_ngram_logreg(synthetic(80, 7), cfg);
  EXPECT_FALSE(m.report().converged);
  EXPECT_FALSE(m.report().warnings.empty());
}

TEST(Ffnn, BackpropMatchesFiniteDifferences) {
  const auto c = synthetic(40, 8);
  const auto docs = tokenize_corpus(c);
  FeedForwardModel m(build_vocab(std::span<const std::vector<std::string>>(docs)), {6, 4}, 3);
  std::vector<FeatureVector> xs;
  std::vector<int> ys;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    xs.push_back(m.features(docs[i]));
    ys.push_back(*c[i].label);
  }
  const auto g = m.loss_gradient(xs, ys);
  const auto p = m.flat_parameters();
  const double h = 1e-6;
  Rng rng(1);
  for (int trial = 0; trial < 25; ++trial) {
    const auto k = uniform_index(rng, p.size());
    auto q = p;
    q[k] += h;
    m.set_flat_parameters(q);
    const double up = m.loss(xs, ys);
    q[k] -= 2 * h;
    m.set_flat_parameters(q);
    const double down = m.loss(xs, ys);
    EXPECT_NEAR(g[k], (up - down) / (2 * h), 1e-6) << "parameter " << k;
  }
  m.set_flat_parameters(p);
}

TEST(Ffnn, TrainingIsSeededAndLearns) {
  const auto c = synthetic(300, 10);
  FfnnConfig cfg;
  cfg.seed = 42;
  cfg.epochs = 15;
  const auto a = train_ffnn(c, cfg);
  const auto b = train_ffnn(c, cfg);
  EXPECT_EQ(a.flat_parameters(), b.flat_parameters());
  cfg.seed = 43;
  EXPECT_NE(train_ffnn(c, cfg).flat_parameters(), a.flat_parameters());
  EXPECT_GT(a.log_odds("w1 w2 wounded w3"), a.log_odds("w1 w2 w4 w3"));
  EXPECT_EQ(a.latent("w1 wounded").size(), a.latent_dim());
}

TEST(Ffnn, RejectsBadShapes) {
  const std::vector<std::vector<std::string>> docs{{"a"}};
  const auto v = build_vocab(std::span<const std::vector<std::string>>(docs));
  EXPECT_THROW(FeedForwardModel(v, std::vector<std::size_t>{}, 0), InputError);
  EXPECT_THROW(FeedForwardModel(v, std::vector<std::size_t>{2, 2, 2}, 0), InputError);
}

TEST(ModelFiles, RoundTripPreservesPredictions) {
  const auto dir = temp_dir("roundtrip");
  const auto c = synthetic(120, 12);
  const std::vector<std::string> probes{"w1 wounded w9", "w3 w4", "killed killed", "nothing known"};
  const std::vector<nlohmann::json> specs{
      {{"type", "naive_bayes"}, {"alpha", 0.7}, {"use_counts", false}},
      {{"type", "logreg"}, {"C", 2.0}, {"n_gram_range", {1, 2}}},
      {{"type", "ffnn"}, {"hidden_dims", {5}}, {"epochs", 3}},
  };
  for (const auto& spec : specs) {
    const auto model = make_trainer(spec)(c, 5);
    const auto path = (dir / (spec["type"].get<std::string>() + ".model")).string();
    save_predictor(path, *model, spec, {{"config_hash", "abc"}});
    const auto back = load_predictor(path);
    for (const auto& t : probes) EXPECT_EQ(back->log_odds(t), model->log_odds(t)) << spec.dump() << " " << t;
  }
  fs::remove_all(dir);
}

TEST(ModelFiles, RejectsGarbage) {
  const auto dir = temp_dir("garbage");
  const auto path = (dir / "bad.json").string();
  {
    std::ofstream(path) << "{\"format\":\"other\"}";
  }
  EXPECT_THROW(load_predictor(path), InputError);
  EXPECT_THROW(load_predictor((dir / "missing").string()), InputError);
  fs::remove_all(dir);
}

TEST(ModelSpec, UnknownKeysAndBadValuesAreInputErrors) {
  EXPECT_THROW(validate_model_spec({{"type", "naive_bayes"}, {"alpah", 1.0}}), InputError);
  EXPECT_THROW(validate_model_spec({{"type", "nope"}}), InputError);
  EXPECT_THROW(validate_model_spec({{"type", "logreg"}, {"n_gram_range", {2, 1}}}), InputError);
  EXPECT_NO_THROW(validate_model_spec({{"type", "ffnn"}, {"hidden_dims", {50, 80}}}));
}
