#include <gtest/gtest.h>

#include "support/concept_oracle.hpp"
#include "trace/concepts.hpp"
#include "trace/ffnn.hpp"
#include "trace/naive_bayes.hpp"
#include "trace/shap.hpp"
#include "trace/slalom.hpp"

using namespace trace;

namespace {

// f(S) = 2 [a in S] + 3 [b in S] + 4 [a in S][b in S] - 1 [c in S]; d is a dummy.
class Interaction final : public Predictor {
 public:
  double log_odds(std::string_view text) const override { return log_odds_tokens(tokenize(text)); }
  double log_odds_tokens(std::span<const std::string> t) const override {
    auto has = [&](const char* w) { return std::find(t.begin(), t.end(), w) != t.end(); };
    return 2.0 * has("a") + 3.0 * has("b") + 4.0 * (has("a") && has("b")) - 1.0 * has("c") + 0.5;
  }
  std::string name() const override { return "interaction"; }
};

Corpus synthetic(std::size_t n, std::uint64_t seed) {
  GeneratorConfig g;
  g.n_docs = n;
  g.positive_rate = 0.3;
  g.signal_tokens = {"wounded", "killed"};
  g.noise_vocab_size = 40;
  g.doc_length = 6;
  return synthesize_corpus(g, seed);
}

SlalomModel planted(std::size_t V, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::string> toks;
  std::vector<double> v, s;
  for (std::size_t i = 0; i < V; ++i) {
    toks.push_back("t" + std::to_string(i));
    v.push_back(2.0 * standard_normal(rng));
    s.push_back(standard_normal(rng));
  }
  return SlalomModel(toks, v, s);
}

}  // namespace

TEST(ExactShap, InteractionSplitsEvenly) {
  const auto r = exact_shap(Interaction{}, "a b c d");
  EXPECT_NEAR(r.phi[0], 4.0, 1e-12);
  EXPECT_NEAR(r.phi[1], 5.0, 1e-12);
  EXPECT_NEAR(r.phi[2], -1.0, 1e-12);
  EXPECT_NEAR(r.phi[3], 0.0, 1e-12);
  EXPECT_NEAR(r.baseline_value, 0.5, 1e-12);
  EXPECT_NEAR(r.residual(), 0.0, 1e-12);
  EXPECT_TRUE(r.exact);
}

TEST(ExactShap, LimitAndEmptyInput) {
  std::string long_text;
  for (int i = 0; i < 13; ++i) long_text += "w ";
  EXPECT_THROW(exact_shap(Interaction{}, long_text), InputError);
  EXPECT_THROW(exact_shap(Interaction{}, "  ,, "), InputError);
}

TEST(SampledShap, ConvergesToExact) {
  ShapConfig cfg;
  cfg.n_samples = 4000;
  cfg.seed = 3;
  const auto s = shap_sample(Interaction{}, "a b c d", cfg);
  const auto e = exact_shap(Interaction{}, "a b c d");
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(s.phi[i], e.phi[i], 4 * s.std_err[i] + 1e-9);
  EXPECT_TRUE(efficiency_holds(s));
  EXPECT_EQ(s.n_samples, 4000u);
}

TEST(SampledShap, IdenticalForAnyJobCount) {
  const auto nb = train_naive_bayes(synthetic(200, 1), 1.0, false);
  ShapConfig cfg;
  cfg.n_samples = 1000;
  cfg.seed = 17;
  cfg.jobs = 1;
  const auto a = shap_sample(nb, "w1 wounded w2 w3 killed w1", cfg);
  cfg.jobs = 3;
  const auto b = shap_sample(nb, "w1 wounded w2 w3 killed w1", cfg);
  EXPECT_EQ(a.phi, b.phi);
  EXPECT_EQ(a.std_err, b.std_err);
  cfg.seed = 18;
  EXPECT_NE(shap_sample(nb, "w1 wounded w2 w3 killed w1", cfg).phi, a.phi);
}

TEST(SampledShap, MaskTokenReplacesRemovedTokens) {
  ShapConfig cfg;
  cfg.mask_token = "a";
  cfg.n_samples = 200;
  // with "a" as mask every coalition contains a, so a itself gets nothing
  const auto r = shap_sample(Interaction{}, "a b", cfg);
  EXPECT_NEAR(r.phi[0], 0.0, 1e-12);
  EXPECT_NEAR(r.phi[1], 7.0, 1e-12);
  const auto e = exact_shap_tokens(Interaction{}, {"a", "b"}, std::string("a"));
  EXPECT_NEAR(e.phi[1], 7.0, 1e-12);
}

TEST(SampledShap, ReportJsonRoundTrip) {
  ShapConfig cfg;
  cfg.n_samples = 50;
  const auto r = shap_sample(Interaction{}, "a c", cfg);
  const auto back = shap_report_from_json(to_json(r));
  EXPECT_EQ(back.tokens, r.tokens);
  EXPECT_EQ(back.phi, r.phi);
  EXPECT_EQ(back.std_err, r.std_err);
  EXPECT_EQ(back.n_samples, r.n_samples);
}

TEST(SampledShap, FfnnEfficiency) {
  FfnnConfig fc;
  fc.epochs = 3;
  fc.hidden_dims = {8};
  const auto m = train_ffnn(synthetic(150, 2), fc);
  ShapConfig cfg;
  cfg.n_samples = 500;
  const auto r = shap_sample(m, "w4 wounded w7 w2 killed", cfg);
  EXPECT_NEAR(r.residual(), 0.0, 1e-9);
  EXPECT_TRUE(efficiency_holds(r));
}

TEST(Slalom, RecoversPlantedModel) {
  const auto truth = planted(20, 5);
  SlalomConfig cfg;
  cfg.n_background = 20000;
  cfg.seed = 1;
  const auto fit = fit_slalom(SlalomPredictor(truth), truth.tokens(), cfg);
  EXPECT_LT(fit.fit_loss, 1e-4);
  const double sm = mean_of(truth.importances());
  for (std::size_t i = 0; i < truth.size(); ++i) {
    EXPECT_NEAR(fit.values()[i], truth.values()[i], 1e-2);
    EXPECT_NEAR(fit.importances()[i], truth.importances()[i] - sm, 1e-2);
  }
}

TEST(Slalom, SingleTokenPredictsValue) {
  const auto m = planted(10, 2);
  for (const auto& t : m.tokens()) {
    const std::vector<std::string> one{t};
    EXPECT_DOUBLE_EQ(m.predict(one), m.value(t));
  }
}

TEST(Slalom, ImportanceShiftInvariance) {
  const auto m = planted(12, 3);
  auto shifted = m.importances();
  for (auto& s : shifted) s += 7.25;
  const SlalomModel m2(m.tokens(), m.values(), shifted);
  const std::vector<std::string> seq{"t1", "t4", "t4", "t9", "t0"};
  EXPECT_NEAR(m.predict(seq), m2.predict(seq), 1e-12);
}

TEST(Slalom, SingleTokenVocabularyIsNotIdentifiable) {
  const auto truth = planted(3, 4);
  const auto fit = fit_slalom(SlalomPredictor(truth), {"t2"}, {});
  EXPECT_FALSE(fit.importance_identifiable);
  EXPECT_DOUBLE_EQ(fit.value("t2"), truth.value("t2"));
}

TEST(Slalom, RejectsBadInput) {
  const auto truth = planted(3, 4);
  EXPECT_THROW(fit_slalom(SlalomPredictor(truth), {}, {}), InputError);
  EXPECT_THROW(fit_slalom(SlalomPredictor(truth), {"t1", "t1"}, {}), InputError);
  EXPECT_THROW(truth.value("zz"), InputError);
}

TEST(Slalom, JsonRoundTrip) {
  auto m = planted(5, 6);
  m.fit_loss = 0.25;
  const auto back = slalom_from_json(to_json(m));
  EXPECT_EQ(back.tokens(), m.tokens());
  EXPECT_EQ(back.values(), m.values());
  EXPECT_EQ(back.importances(), m.importances());
  EXPECT_EQ(back.fit_loss, 0.25);
}

TEST(Slalom, NbValuesTrackTokenWeights) {
  // for an additive model the standalone value ranks tokens like their weights
  const auto nb = train_naive_bayes(synthetic(300, 3), 1.0, true);
  SlalomConfig cfg;
  cfg.n_background = 5000;
  const auto fit = fit_slalom(nb, {"wounded", "killed", "w1", "w2", "w3"}, cfg);
  EXPECT_GT(fit.value("wounded"), fit.value("w1"));
  EXPECT_GT(fit.value("killed"), fit.value("w2"));
}

class ConceptsTest : public ::testing::Test {
 protected:
  trace::testing::ClusterOracle oracle;
};

TEST_F(ConceptsTest, TwoConceptsAreCompleteOneIsNot) {
  const auto train = oracle.make_corpus(1000, 100, 12, "tr");
  const auto test = oracle.make_corpus(300, 900, 12, "te");
  const auto tix = build_snippet_index(oracle, test, 5);
  ConceptConfig cfg;
  cfg.K = 2;
  const auto two = discover_concepts(oracle, train, cfg);
  cfg.K = 1;
  const auto one = discover_concepts(oracle, train, cfg);
  EXPECT_GE(completeness_score(two, tix, oracle), 0.95);
  EXPECT_LT(completeness_score(one, tix, oracle), completeness_score(two, tix, oracle));
  for (const auto& c : two.concepts) {
    double n = 0.0;
    for (double x : c) n += x * x;
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-6);
  }
}

TEST_F(ConceptsTest, SalientSnippetsCarryPlantedTokens) {
  const auto train = oracle.make_corpus(800, 101, 12, "tr");
  ConceptConfig cfg;
  cfg.K = 2;
  auto cs = discover_concepts(oracle, train, cfg);
  const auto ix = build_snippet_index(oracle, train, 5);
  attach_salient_examples(cs, ix, 25);
  std::set<std::string> found;
  for (const auto& list : cs.salient) {
    ASSERT_EQ(list.size(), 25u);
    for (std::size_t r = 1; r < list.size(); ++r) EXPECT_GE(list[r - 1].score, list[r].score);
    for (const char* w : {"alpha", "bravo"}) {
      std::size_t hits = 0;
      for (const auto& s : list) hits += s.text.find(w) != std::string::npos;
      if (hits >= 20) found.insert(w);
    }
  }
  EXPECT_EQ(found, (std::set<std::string>{"alpha", "bravo"}));
  const auto card = concept_card(cs, 0, &ix);
  EXPECT_NE(card.find('['), std::string::npos);
}

TEST_F(ConceptsTest, ShortfallWhenFewSnippets) {
  const auto small = oracle.make_corpus(2, 5, 5, "s");
  ConceptConfig cfg;
  cfg.K = 1;
  cfg.init_min_count = 1;
  auto cs = random_concepts(oracle, build_snippet_index(oracle, small, 5), 1, 0);
  attach_salient_examples(cs, build_snippet_index(oracle, small, 5), 25);
  EXPECT_TRUE(cs.salient_shortfall[0]);
  EXPECT_LT(cs.salient[0].size(), 25u);
}

TEST_F(ConceptsTest, ContainerRoundTrip) {
  const auto train = oracle.make_corpus(300, 7, 12, "tr");
  ConceptConfig cfg;
  cfg.K = 2;
  const auto cs = discover_concepts(oracle, train, cfg);
  const auto back = concepts_from_container(to_container(cs));
  EXPECT_EQ(back.concepts, cs.concepts);
  EXPECT_EQ(back.head_weight, cs.head_weight);
  EXPECT_EQ(back.head_bias, cs.head_bias);
  EXPECT_EQ(back.snippet_len, cs.snippet_len);
}

TEST_F(ConceptsTest, NeedsLatentSpace) {
  const auto nb_corpus = synthetic(50, 1);
  const auto nb = train_naive_bayes(nb_corpus, 1.0, true);
  ConceptConfig cfg;
  EXPECT_THROW(discover_concepts(nb, nb_corpus, cfg), Error);
}
