// trace: command-line front end for the trace toolkit.
//
// Every subcommand reads an optional JSON run config, applies flag overrides
// (flags > file > defaults), checks the result against the run-config schema
// and writes its artifacts under --out together with config.json and
// manifest.json. Exit codes: 0 success, 1 runtime failure, 2 input/config error.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "run_schema.hpp"
#include "trace/agreement.hpp"
#include "trace/concepts.hpp"
#include "trace/model_io.hpp"
#include "trace/schema.hpp"
#include "trace/search.hpp"
#include "trace/shap.hpp"
#include "trace/slalom.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

// ---------------------------------------------------------------------------
// Config assembly

void deep_merge(json& base, const json& over) {
  if (!base.is_object() || !over.is_object()) {
    base = over;
    return;
  }
  for (const auto& [k, v] : over.items()) {
    if (base.contains(k) && base[k].is_object() && v.is_object()) {
      deep_merge(base[k], v);
    } else {
      base[k] = v;
    }
  }
}

json defaults_for(const std::string& command) {
  json d;
  d["command"] = command;
  d["seed"] = 0;
  d["tokenizer"] = {{"lowercase", true}, {"strip_urls", true}};
  if (command == "ingest") {
    d["ingest"] = {{"format", "jsonl"}, {"max_tokens", 512}, {"domain", nullptr}};
  }
  if (command == "eval" || command == "crosstest") {
    d["validation"] = {{"runs", 5}, {"mode", "random"}, {"test_fraction", 0.2}, {"threshold", 0.0}};
  }
  if (command == "crosstest") d["include_combined"] = true;
  if (command == "search") {
    d["search"] = {{"budget", 50}, {"objective", "auroc"}, {"inner_splits", 1}, {"test_fraction", 0.2}};
  }
  return d;
}

// Per-kind explain defaults; filled after the kind is known.
json explain_defaults(const std::string& kind) {
  if (kind == "shap") return {{"instances", 5}, {"n_samples", 10000}, {"mask_token", nullptr}};
  if (kind == "slalom") {
    return {{"vocab_min_count", 1}, {"max_vocab", 0},     {"n_background", 100000},
            {"epochs", 30},         {"batch_size", 256}, {"lr", 0.05}};
  }
  return {{"K", 10},         {"snippet_len", 5}, {"top_m", 25},
          {"epochs", 3},     {"batch_size", 12}, {"lr", 1e-3},
          {"test_fraction", 0.2}};
}

json parse_value(const std::string& raw) {
  try {
    return json::parse(raw);
  } catch (const json::exception&) {
    return raw;
  }
}

void set_path(json& cfg, const std::string& dotted, json value) {
  json* node = &cfg;
  std::size_t start = 0;
  for (;;) {
    const auto dot = dotted.find('.', start);
    const auto key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw trace::InputError("--set: bad key '" + dotted + "'");
    if (dot == std::string::npos) {
      (*node)[key] = std::move(value);
      return;
    }
    if (!node->contains(key) || !(*node)[key].is_object()) (*node)[key] = json::object();
    node = &(*node)[key];
    start = dot + 1;
  }
}

json read_json_file(const std::string& path, const std::string& what) {
  std::ifstream in(path);
  if (!in) throw trace::InputError("cannot open " + what + " '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw trace::InputError(what + " '" + path + "': " + e.what());
  }
}

struct Flags {
  std::string config;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
  std::vector<std::string> data;
  std::vector<std::string> set;
  std::optional<std::string> model_type;
  std::optional<std::string> model_path;
  std::optional<std::string> format;
  std::optional<std::size_t> max_tokens;
  std::optional<std::string> domain;
  std::optional<std::size_t> runs;
  std::optional<std::string> mode;
  std::optional<std::size_t> budget;
  std::optional<std::string> kind;
  std::optional<std::size_t> instances;
  std::optional<std::size_t> n_samples;
  std::optional<std::size_t> concepts;
  std::optional<std::string> annotations;
  std::optional<std::string> expert;
};

std::vector<std::string> data_paths(const json& cfg) {
  if (!cfg.contains("data")) return {};
  if (cfg["data"].is_string()) return {cfg["data"].get<std::string>()};
  return cfg["data"].get<std::vector<std::string>>();
}

// ---------------------------------------------------------------------------
// Output directory bookkeeping

class Run {
 public:
  Run(std::string command, json cfg, fs::path out, std::size_t jobs)
      : command_(std::move(command)), cfg_(std::move(cfg)), out_(std::move(out)), jobs_(jobs) {
    seed_ = cfg_.at("seed").get<std::uint64_t>();
    hash_ = trace::hex64(trace::fnv1a64(cfg_.dump()));
    const auto& t = cfg_.at("tokenizer");
    tok_.lowercase = t.value("lowercase", true);
    tok_.strip_urls = t.value("strip_urls", true);
    std::error_code ec;
    fs::create_directories(out_, ec);
    if (ec) throw trace::Error("cannot create output directory '" + out_.string() + "': " + ec.message());
  }

  const json& cfg() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t jobs() const { return jobs_; }
  const std::string& hash() const { return hash_; }
  const trace::TokenizerConfig& tok() const { return tok_; }
  const fs::path& out() const { return out_; }

  json stamp() const { return {{"config_hash", hash_}, {"seed", seed_}}; }

  // JSON artifacts lead with the config hash and seed.
  json stamped(const json& body) const {
    json j = stamp();
    for (const auto& [k, v] : body.items()) j[k] = v;
    return j;
  }

  std::string csv_preamble() const { return "# config_hash=" + hash_ + " seed=" + std::to_string(seed_) + "\n"; }

  fs::path path(const std::string& rel) {
    const auto p = out_ / rel;
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
    if (ec) throw trace::Error("cannot create '" + p.parent_path().string() + "': " + ec.message());
    files_.push_back(rel);
    return p;
  }

  void write(const std::string& rel, const std::string& bytes) {
    const auto p = path(rel);
    std::ofstream f(p, std::ios::binary);
    if (!f) throw trace::Error("cannot write '" + p.string() + "'");
    f << bytes;
    if (!f) throw trace::Error("write failed for '" + p.string() + "'");
  }

  void write_json(const std::string& rel, const json& body) { write(rel, stamped(body).dump(2) + "\n"); }
  void write_csv(const std::string& rel, const std::string& body) { write(rel, csv_preamble() + body); }

  void finish() {
    write("config.json", cfg_.dump(2) + "\n");
    std::sort(files_.begin(), files_.end());
    files_.erase(std::unique(files_.begin(), files_.end()), files_.end());
    json list = json::array();
    for (const auto& rel : files_) {
      std::ifstream f(out_ / rel, std::ios::binary);
      std::ostringstream ss;
      ss << f.rdbuf();
      const auto bytes = ss.str();
      list.push_back({{"path", rel}, {"bytes", bytes.size()}, {"fnv1a64", trace::hex64(trace::fnv1a64(bytes))}});
    }
    json m = stamp();
    m["command"] = command_;
    m["files"] = list;
    std::ofstream f(out_ / "manifest.json", std::ios::binary);
    f << m.dump(2) << "\n";
    if (!f) throw trace::Error("cannot write manifest.json");
  }

 private:
  std::string command_;
  json cfg_;
  fs::path out_;
  std::size_t jobs_;
  std::uint64_t seed_ = 0;
  std::string hash_;
  trace::TokenizerConfig tok_;
  std::vector<std::string> files_;
};

// ---------------------------------------------------------------------------
// Shared helpers

std::string format_number(double x) { return nlohmann::json(x).dump(); }

std::string file_stem(const std::string& path) { return fs::path(path).stem().string(); }

trace::Corpus load_corpus(const std::string& path) { return trace::read_corpus_jsonl(path); }

// A corpus named after its domain tag, or after the file when it mixes tags.
trace::Corpus load_named_corpus(const std::string& path) {
  auto c = load_corpus(path);
  if (c.domain() != "mixed") return c;
  return trace::Corpus(std::vector<trace::Segment>(c.begin(), c.end()), file_stem(path));
}

trace::Corpus load_single_corpus(const Run& run) {
  const auto paths = data_paths(run.cfg());
  if (paths.empty()) throw trace::InputError("no input: set 'data' or pass --data");
  if (paths.size() == 1) return load_named_corpus(paths[0]);
  std::vector<trace::Corpus> parts;
  for (const auto& p : paths) parts.push_back(load_named_corpus(p));
  return trace::Corpus::concat(parts, "mixed");
}

const json& require(const json& cfg, const char* key, const std::string& hint) {
  if (!cfg.contains(key) || cfg[key].is_null()) throw trace::InputError("missing '" + std::string(key) + "': " + hint);
  return cfg[key];
}

trace::ValidationConfig validation_config(const Run& run) {
  const auto& v = run.cfg().at("validation");
  trace::ValidationConfig c;
  c.runs = v.at("runs").get<std::size_t>();
  c.mode = trace::split_mode_from_string(v.at("mode").get<std::string>());
  c.test_fraction = v.at("test_fraction").get<double>();
  c.threshold = v.at("threshold").get<double>();
  c.seed = run.seed();
  c.jobs = run.jobs();
  if (c.mode == trace::SplitMode::cv && c.runs < 2) throw trace::InputError("cv mode needs runs >= 2");
  return c;
}

std::string model_tag(const json& spec) { return spec.at("type").get<std::string>(); }

json report_json(const trace::MetricsReport& r) {
  auto j = trace::to_json(r);
  json formatted;
  for (const auto& name : trace::metric_names()) {
    const auto& s = r.get(name);
    formatted[name] = trace::format_pm(s.mean, s.std_error);
  }
  j["formatted"] = formatted;
  return j;
}

// ---------------------------------------------------------------------------
// Commands

std::vector<trace::Segment> read_csv_segments(const std::string& path, const std::string& domain) {
  std::ifstream in(path);
  if (!in) throw trace::InputError("cannot open '" + path + "'");
  const auto rows = trace::read_csv(in);
  if (rows.empty()) throw trace::InputError("'" + path + "' is empty");
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < rows[0].fields.size(); ++i) col[rows[0].fields[i]] = i;
  if (!col.count("id") || !col.count("text")) throw trace::InputError("csv header needs 'id' and 'text' columns");
  std::vector<trace::Segment> out;
  std::vector<std::string> problems;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& f = rows[r].fields;
    try {
      if (f.size() != rows[0].fields.size()) throw trace::InputError("expected " + std::to_string(rows[0].fields.size()) + " fields");
      trace::Segment s;
      s.id = f[col["id"]];
      s.text = f[col["text"]];
      s.domain = col.count("domain") ? f[col["domain"]] : domain;
      if (col.count("label")) {
        const auto& l = f[col["label"]];
        if (l == "0" || l == "1") {
          s.label = l == "1" ? 1 : 0;
        } else if (!l.empty()) {
          throw trace::InputError("label must be 0, 1 or empty");
        }
      }
      trace::validate_segment(s);
      out.push_back(std::move(s));
    } catch (const std::exception& e) {
      problems.push_back("line " + std::to_string(rows[r].line) + ": " + e.what());
    }
  }
  if (!problems.empty()) {
    std::string msg = "corpus schema violations:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw trace::InputError(msg);
  }
  return out;
}

void cmd_ingest(Run& run) {
  const auto paths = data_paths(run.cfg());
  if (paths.size() != 1) throw trace::InputError("ingest takes exactly one input file");
  const auto& ing = run.cfg().at("ingest");
  const auto format = ing.at("format").get<std::string>();
  const auto max_tokens = ing.at("max_tokens").get<std::size_t>();
  const std::optional<std::string> domain =
      ing["domain"].is_null() ? std::nullopt : std::optional(ing["domain"].get<std::string>());

  std::vector<trace::Segment> segs;
  if (format == "jsonl") {
    auto c = load_corpus(paths[0]);
    segs.assign(c.begin(), c.end());
  } else if (format == "csv") {
    segs = read_csv_segments(paths[0], domain.value_or(file_stem(paths[0])));
  } else {
    const auto g = trace::generator_config_from_json(read_json_file(paths[0], "generator config"));
    auto c = trace::synthesize_corpus(g, run.seed());
    segs.assign(c.begin(), c.end());
  }
  const std::size_t n_docs = segs.size();
  if (domain) {
    for (auto& s : segs) s.domain = *domain;
  }
  std::string name = domain.value_or("mixed");
  if (!domain && !segs.empty() &&
      std::all_of(segs.begin(), segs.end(), [&](const trace::Segment& s) { return s.domain == segs[0].domain; })) {
    name = segs[0].domain;
  }
  const auto corpus = trace::segment_documents(trace::Corpus(std::move(segs), name), max_tokens, run.tok());

  std::ostringstream body;
  trace::write_corpus_jsonl(body, corpus);
  run.write("corpus.jsonl", body.str());

  std::size_t split = 0;
  for (const auto& s : corpus) split += s.parent_id ? 1 : 0;
  const double rate = corpus.labeled_count() ? corpus.class_balance() : 0.0;
  char pct[32];
  std::snprintf(pct, sizeof pct, "%.1f%%", 100.0 * rate);
  json stats;
  stats["dataset"] = corpus.domain();
  stats["documents"] = n_docs;
  stats["size"] = corpus.size();
  stats["labeled"] = corpus.labeled_count();
  stats["positives"] = corpus.positive_count();
  stats["trauma_rate"] = rate;
  stats["size_and_balance"] = std::to_string(corpus.size()) + " (" + pct + ")";
  stats["max_tokens"] = max_tokens;
  stats["split_segments"] = split;
  stats["split_fraction"] = corpus.empty() ? 0.0 : static_cast<double>(split) / static_cast<double>(corpus.size());
  run.write_json("stats.json", stats);
  std::cout << "ingested " << corpus.size() << " segments, " << stats["size_and_balance"].get<std::string>() << "\n";
}

void cmd_train(Run& run) {
  const auto& spec = require(run.cfg(), "model", "training needs a model spec");
  const auto corpus = load_single_corpus(run);
  const auto trainer = trace::make_trainer(spec, run.tok());
  const auto model = trainer(corpus, trace::derive_seed(run.seed(), 0));
  const auto type = model_tag(spec);
  const std::string file = type == "ffnn" ? "model.bin" : "model.json";
  const auto path = run.path(file);
  json stamp = run.stamp();
  trace::save_predictor(path.string(), *model, spec, stamp);

  json info;
  info["model"] = spec;
  info["model_file"] = file;
  info["train_segments"] = corpus.size();
  if (const auto* lr = dynamic_cast<const trace::LogRegModel*>(model.get())) {
    const auto& r = lr->report();
    info["training"] = {{"iterations", r.iterations},
                        {"converged", r.converged},
                        {"final_loss", r.final_loss},
                        {"gradient_norm", r.gradient_norm},
                        {"warnings", r.warnings}};
  }
  if (corpus.labeled_count() == corpus.size()) {
    info["train_metrics"] = report_json(trace::aggregate_runs(
        std::vector<trace::RunMetrics>{trace::evaluate_predictor(*model, corpus)}, corpus.domain(), type));
  }
  run.write_json("train.json", info);
  std::cout << "trained " << type << " on " << corpus.size() << " segments -> " << path.string() << "\n";
}

void cmd_eval(Run& run) {
  const auto paths = data_paths(run.cfg());
  if (paths.empty()) throw trace::InputError("no input: set 'data' or pass --data");
  std::vector<trace::MetricsReport> reports;
  if (run.cfg().contains("model_path")) {
    // Fixed model scored once per dataset.
    const auto model = trace::load_predictor(run.cfg()["model_path"].get<std::string>());
    const double threshold = run.cfg().at("validation").at("threshold").get<double>();
    for (const auto& p : paths) {
      const auto corpus = load_named_corpus(p);
      reports.push_back(trace::aggregate_runs(
          std::vector<trace::RunMetrics>{trace::evaluate_predictor(*model, corpus, threshold)}, corpus.domain(),
          model->name()));
    }
  } else {
    const auto& spec = require(run.cfg(), "model", "eval needs a model spec or model_path");
    const auto trainer = trace::make_trainer(spec, run.tok());
    auto vcfg = validation_config(run);
    for (std::size_t i = 0; i < paths.size(); ++i) {
      const auto corpus = load_named_corpus(paths[i]);
      vcfg.seed = trace::derive_seed(run.seed(), i);
      reports.push_back(trace::cross_validate(trainer, corpus, vcfg, model_tag(spec)));
    }
  }
  std::ostringstream csv;
  trace::write_metrics_csv(csv, reports);
  run.write_csv("metrics.csv", csv.str());
  json list = json::array();
  for (const auto& r : reports) list.push_back(report_json(r));
  run.write_json("metrics.json", {{"reports", list}});
  for (const auto& r : reports) {
    const auto& f1 = r.get("f1_binary");
    const auto& auc = r.get("auroc");
    std::cout << r.dataset << "\t" << r.model << "\tF1 " << trace::format_pm(f1.mean, f1.std_error) << "\tAU-ROC "
              << trace::format_pm(auc.mean, auc.std_error) << "\n";
  }
}

void cmd_crosstest(Run& run) {
  const auto paths = data_paths(run.cfg());
  if (paths.size() < 2) throw trace::InputError("crosstest needs at least two corpora in 'data'");
  const auto& spec = require(run.cfg(), "model", "crosstest needs a model spec");
  std::vector<trace::Corpus> domains;
  for (const auto& p : paths) domains.push_back(load_named_corpus(p));
  const auto trainer = trace::make_trainer(spec, run.tok());
  const auto m = trace::cross_domain(trainer, domains, run.cfg().at("include_combined").get<bool>(),
                                     validation_config(run), model_tag(spec));
  std::ostringstream csv;
  trace::write_matrix_csv(csv, m);
  run.write_csv("matrix.csv", csv.str());
  std::ostringstream grid;
  trace::write_matrix_grid(grid, m, "auroc");
  run.write_csv("matrix_auroc.csv", grid.str());
  run.write_json("matrix.json", trace::to_json(m));
  std::cout << grid.str();
}

void cmd_search(Run& run) {
  const auto& base = require(run.cfg(), "model", "search needs a base model spec");
  const auto& s = require(run.cfg(), "search", "search needs a 'search' block with 'params'");
  const auto space = trace::search_space_from_json(s);
  trace::SearchConfig scfg;
  scfg.seed = run.seed();
  scfg.jobs = run.jobs();
  scfg.inner_splits = s.at("inner_splits").get<std::size_t>();
  scfg.test_fraction = s.at("test_fraction").get<double>();
  const auto corpus = load_single_corpus(run);
  const auto tok = run.tok();
  const trace::TrainerFactory factory = [&](const json& params) {
    return trace::make_trainer(trace::merge_spec(base, params), tok);
  };
  const auto res = trace::hyperparameter_search(factory, space, corpus, scfg);
  std::string lines;
  for (const auto& t : res.trials) lines += run.stamped(trace::to_json(t)).dump() + "\n";
  run.write("trials.jsonl", lines);
  const auto& best = res.best_trial();
  json b;
  b["objective_metric"] = space.objective;
  b["best_trial"] = best.index;
  b["objective"] = *best.objective;
  b["params"] = best.params;
  b["model"] = trace::merge_spec(base, best.params);
  std::size_t failed = 0;
  for (const auto& t : res.trials) failed += t.objective ? 0 : 1;
  b["failed_trials"] = failed;
  run.write_json("best.json", b);
  std::cout << "best trial " << best.index << ": " << space.objective << " " << format_number(*best.objective) << " "
            << best.params.dump() << "\n";
}

std::string safe_file_name(const std::string& id) {
  std::string out;
  for (unsigned char c : id) out += std::isalnum(c) || c == '-' || c == '_' || c == '.' ? static_cast<char>(c) : '_';
  return out.empty() ? "_" : out;
}

void explain_shap(Run& run, const trace::Predictor& model, const trace::Corpus& corpus, const json& e) {
  std::vector<std::size_t> chosen;
  if (e.contains("ids")) {
    std::map<std::string, std::size_t> at;
    for (std::size_t i = 0; i < corpus.size(); ++i) at[corpus[i].id] = i;
    for (const auto& id : e["ids"]) {
      const auto it = at.find(id.get<std::string>());
      if (it == at.end()) throw trace::InputError("explain: no segment with id '" + id.get<std::string>() + "'");
      chosen.push_back(it->second);
    }
  } else {
    const auto n = std::min(corpus.size(), e.at("instances").get<std::size_t>());
    for (std::size_t i = 0; i < n; ++i) chosen.push_back(i);
  }
  trace::ShapConfig cfg;
  cfg.n_samples = e.at("n_samples").get<std::size_t>();
  cfg.jobs = run.jobs();
  if (!e.at("mask_token").is_null()) cfg.mask_token = e["mask_token"].get<std::string>();
  std::ostringstream csv;
  csv << "segment_id,position,token,phi,std_err\n";
  json index = json::array();
  std::map<std::string, int> used_names;
  for (std::size_t q = 0; q < chosen.size(); ++q) {
    const auto& seg = corpus[chosen[q]];
    cfg.seed = trace::derive_seed(run.seed(), chosen[q]);
    trace::ShapReport r;
    try {
      r = trace::shap_sample_tokens(model, trace::tokenize(seg.text, run.tok()), cfg);
    } catch (...) {
      trace::rethrow_with_context("segment '" + seg.id + "': ");
    }
    auto j = trace::to_json(r);
    j["segment_id"] = seg.id;
    j["efficiency_holds"] = trace::efficiency_holds(r);
    auto name = safe_file_name(seg.id);
    if (used_names[name]++) name += "~" + std::to_string(used_names[name] - 1);
    run.write_json("shap/" + name + ".json", j);
    index.push_back({{"segment_id", seg.id},
                     {"file", "shap/" + name + ".json"},
                     {"tokens", r.tokens.size()},
                     {"residual", r.residual()},
                     {"efficiency_holds", trace::efficiency_holds(r)}});
    for (std::size_t i = 0; i < r.tokens.size(); ++i) {
      csv << trace::csv_escape(seg.id) << ',' << i << ',' << trace::csv_escape(r.tokens[i]) << ','
          << format_number(r.phi[i]) << ',' << format_number(r.std_err[i]) << '\n';
    }
  }
  run.write_csv("shap/attributions.csv", csv.str());
  run.write_json("shap/index.json", {{"instances", index}});
  std::cout << "explained " << chosen.size() << " instances with shap\n";
}

void explain_slalom(Run& run, const trace::Predictor& model, const trace::Corpus& corpus, const json& e) {
  std::map<std::string, std::size_t> freq;
  for (const auto& s : corpus) {
    for (auto& t : trace::tokenize(s.text, run.tok())) ++freq[t];
  }
  const auto min_count = e.at("vocab_min_count").get<std::size_t>();
  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (const auto& [t, n] : freq) {
    if (n >= min_count) ranked.emplace_back(t, n);
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  const auto max_vocab = e.at("max_vocab").get<std::size_t>();
  if (max_vocab > 0 && ranked.size() > max_vocab) ranked.resize(max_vocab);
  std::vector<std::string> vocab;
  for (const auto& [t, n] : ranked) vocab.push_back(t);
  std::sort(vocab.begin(), vocab.end());

  trace::SlalomConfig cfg;
  cfg.n_background = e.at("n_background").get<std::size_t>();
  cfg.epochs = e.at("epochs").get<std::size_t>();
  cfg.batch_size = e.at("batch_size").get<std::size_t>();
  cfg.lr = e.at("lr").get<double>();
  cfg.seed = run.seed();
  const auto m = trace::fit_slalom(model, std::move(vocab), cfg);
  run.write_json("slalom.json", trace::to_json(m));
  std::ostringstream csv;
  csv << "token,value,importance\n";
  for (std::size_t i = 0; i < m.size(); ++i) {
    csv << trace::csv_escape(m.tokens()[i]) << ',' << format_number(m.values()[i]) << ','
        << format_number(m.importances()[i]) << '\n';
  }
  run.write_csv("slalom.csv", csv.str());
  std::cout << "fitted slalom over " << m.size() << " tokens, fit mse " << format_number(m.fit_loss) << "\n";
}

void explain_concepts(Run& run, const trace::Predictor& model, const trace::Corpus& corpus, const json& e) {
  if (model.latent_dim() == 0) throw trace::InputError("concepts: model '" + model.name() + "' exposes no latent space");
  // Discover on one part, report completeness and salient snippets on the rest.
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  trace::Rng rng(trace::derive_seed(run.seed(), 1));
  trace::shuffle(std::span<std::size_t>(order), rng);
  const auto n_test = static_cast<std::size_t>(std::llround(e.at("test_fraction").get<double>() * static_cast<double>(corpus.size())));
  if (n_test == 0 || n_test >= corpus.size()) throw trace::InputError("concepts: corpus too small to hold out a test part");
  std::vector<std::size_t> test_ix(order.begin(), order.begin() + static_cast<long>(n_test));
  std::vector<std::size_t> train_ix(order.begin() + static_cast<long>(n_test), order.end());
  std::sort(test_ix.begin(), test_ix.end());
  std::sort(train_ix.begin(), train_ix.end());
  const auto train = corpus.subset(train_ix);
  const auto test = corpus.subset(test_ix);

  trace::ConceptConfig cfg;
  cfg.K = e.at("K").get<std::size_t>();
  cfg.snippet_len = e.at("snippet_len").get<std::size_t>();
  cfg.epochs = e.at("epochs").get<std::size_t>();
  cfg.batch_size = e.at("batch_size").get<std::size_t>();
  const double lr = e.at("lr").get<double>();
  cfg.lr_schedule = {lr, lr / 2.0, lr / 10.0};
  cfg.seed = trace::derive_seed(run.seed(), 2);
  cfg.jobs = run.jobs();
  const auto top_m = e.at("top_m").get<std::size_t>();

  const auto train_ix_snip = trace::build_snippet_index(model, train, cfg.snippet_len, run.jobs(), run.tok());
  auto cs = trace::discover_concepts(model, train_ix_snip, cfg);
  const auto test_snip = trace::build_snippet_index(model, test, cfg.snippet_len, run.jobs(), run.tok());
  const double test_completeness = trace::completeness_score(cs, test_snip, model);
  trace::attach_salient_examples(cs, test_snip, top_m);

  auto container = trace::to_container(cs);
  container.header["config_hash"] = run.hash();
  container.header["run_seed"] = run.seed();
  trace::write_tensor_file(run.path("concepts.bin").string(), trace::kConceptMagic, container);

  json summary;
  summary["K"] = cs.size();
  summary["dim"] = cs.dim;
  summary["snippet_len"] = cs.snippet_len;
  summary["top_m"] = top_m;
  summary["train_segments"] = train.size();
  summary["test_segments"] = test.size();
  summary["train_completeness"] = cs.train_completeness;
  summary["test_completeness"] = test_completeness;
  summary["epoch_loss"] = cs.epoch_loss;
  summary["head_weight"] = cs.head_weight;
  summary["head_bias"] = cs.head_bias;
  json concepts = json::array();
  for (std::size_t k = 0; k < cs.size(); ++k) {
    json list = json::array();
    for (const auto& s : cs.salient[k]) {
      list.push_back({{"segment_id", s.segment_id}, {"start", s.start}, {"text", s.text}, {"score", s.score}});
    }
    concepts.push_back({{"concept", k}, {"shortfall", static_cast<bool>(cs.salient_shortfall[k])}, {"salient", list}});
  }
  summary["concepts"] = concepts;
  run.write_json("concepts.json", summary);
  for (std::size_t k = 0; k < cs.size(); ++k) {
    char name[64];
    std::snprintf(name, sizeof name, "cards/concept_%02zu.txt", k);
    run.write(name, "# config_hash=" + run.hash() + " seed=" + std::to_string(run.seed()) + "\n" +
                        trace::concept_card(cs, k, &test_snip));
  }
  std::cout << "discovered " << cs.size() << " concepts, test completeness " << format_number(test_completeness)
            << "\n";
}

void cmd_explain(Run& run) {
  const auto& path = require(run.cfg(), "model_path", "explain needs a trained model file");
  const auto model = trace::load_predictor(path.get<std::string>());
  const auto corpus = load_single_corpus(run);
  const auto& e = run.cfg().at("explain");
  const auto kind = e.at("kind").get<std::string>();
  if (kind == "shap") {
    explain_shap(run, *model, corpus, e);
  } else if (kind == "slalom") {
    explain_slalom(run, *model, corpus, e);
  } else {
    explain_concepts(run, *model, corpus, e);
  }
}

void cmd_agree(Run& run) {
  const auto& a = require(run.cfg(), "agree", "agree needs 'agree.annotations' or --annotations");
  const auto set = trace::read_annotations_csv(a.at("annotations").get<std::string>());
  std::optional<std::map<std::string, int>> expert;
  if (a.contains("expert") && !a["expert"].is_null()) expert = trace::read_expert_csv(a["expert"].get<std::string>());
  const auto r = trace::agreement_report(set, expert ? &*expert : nullptr);
  run.write_json("agreement.json", trace::to_json(r));
  run.write("agreement.txt", "# config_hash=" + run.hash() + " seed=" + std::to_string(run.seed()) + "\n" +
                                 trace::format_agreement(r) + "\n");
  std::cout << trace::format_agreement(r) << "\n";
}

// ---------------------------------------------------------------------------
// Driver

json assemble_config(const std::string& command, const Flags& f) {
  json cfg = defaults_for(command);
  if (!f.config.empty()) {
    const auto file = read_json_file(f.config, "config");
    if (!file.is_object()) throw trace::InputError("config must be a JSON object");
    if (file.contains("command") && file["command"] != command) {
      throw trace::InputError("config is for command " + file["command"].dump() + ", not '" + command + "'");
    }
    deep_merge(cfg, file);
  }
  if (f.out) cfg["out"] = *f.out;
  if (f.seed) cfg["seed"] = *f.seed;
  if (!f.data.empty()) cfg["data"] = f.data.size() == 1 ? json(f.data[0]) : json(f.data);
  if (f.model_type) {
    if (!cfg.contains("model") || !cfg["model"].is_object() || cfg["model"].value("type", "") != *f.model_type) {
      cfg["model"] = {{"type", *f.model_type}};
    }
  }
  if (f.model_path) cfg["model_path"] = *f.model_path;
  if (f.format) cfg["ingest"]["format"] = *f.format;
  if (f.max_tokens) cfg["ingest"]["max_tokens"] = *f.max_tokens;
  if (f.domain) cfg["ingest"]["domain"] = *f.domain;
  if (f.runs) cfg["validation"]["runs"] = *f.runs;
  if (f.mode) cfg["validation"]["mode"] = *f.mode;
  if (f.budget) cfg["search"]["budget"] = *f.budget;
  if (f.kind) cfg["explain"]["kind"] = *f.kind;
  if (f.instances) cfg["explain"]["instances"] = *f.instances;
  if (f.n_samples) cfg["explain"]["n_samples"] = *f.n_samples;
  if (f.concepts) cfg["explain"]["K"] = *f.concepts;
  if (f.annotations) cfg["agree"]["annotations"] = *f.annotations;
  if (f.expert) cfg["agree"]["expert"] = *f.expert;
  for (const auto& kv : f.set) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw trace::InputError("--set expects KEY=VALUE, got '" + kv + "'");
    set_path(cfg, kv.substr(0, eq), parse_value(kv.substr(eq + 1)));
  }
  if (command == "explain") {
    if (!cfg.contains("explain") || !cfg["explain"].contains("kind")) {
      throw trace::InputError("explain needs a kind: shap, slalom or concepts");
    }
    const auto kind = cfg["explain"]["kind"];
    if (kind.is_string()) {
      json e = explain_defaults(kind.get<std::string>());
      deep_merge(e, cfg["explain"]);
      cfg["explain"] = e;
    }
  }

  static const trace::SchemaChecker checker(json::parse(trace_cli::kRunConfigSchema));
  const auto errors = checker.check(cfg);
  if (!errors.empty()) {
    std::string msg = "config does not match the run-config schema:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw trace::InputError(msg);
  }
  if (cfg.contains("model")) trace::validate_model_spec(cfg["model"]);
  if (command == "explain") {
    const auto kind = cfg["explain"]["kind"].get<std::string>();
    static const std::map<std::string, std::set<std::string>> allowed{
        {"shap", {"kind", "instances", "ids", "n_samples", "mask_token"}},
        {"slalom", {"kind", "vocab_min_count", "max_vocab", "n_background", "epochs", "batch_size", "lr"}},
        {"concepts", {"kind", "K", "snippet_len", "top_m", "epochs", "batch_size", "lr", "test_fraction"}}};
    for (const auto& [k, v] : cfg["explain"].items()) {
      if (!allowed.at(kind).count(k)) throw trace::InputError("explain." + k + " does not apply to kind '" + kind + "'");
    }
  }
  return cfg;
}

int fail(int code, const std::string& kind, const std::string& message) {
  json err;
  err["error"] = {{"kind", kind}, {"exit_code", code}, {"message", message}};
  std::cerr << err.dump() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"trace: trauma text classification, evaluation and explanation toolkit"};
  app.require_subcommand(1);
  Flags f;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "JSON run config")->check(CLI::ExistingFile);
    sub->add_option("--out", f.out, "output directory");
    sub->add_option("--seed", f.seed, "master seed");
    sub->add_option("--jobs", f.jobs, "worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--set", f.set, "override a config field, KEY=VALUE (dotted keys, JSON values)");
  };
  auto with_data = [&](CLI::App* sub) { sub->add_option("--data", f.data, "corpus file(s), JSONL"); };
  auto with_model = [&](CLI::App* sub) {
    sub->add_option("--model-type", f.model_type, "naive_bayes | logreg | ffnn | api | bridge");
  };

  auto* ingest = app.add_subcommand("ingest", "normalize, segment and summarize a corpus");
  common(ingest);
  with_data(ingest);
  ingest->add_option("--format", f.format, "jsonl | csv | generator");
  ingest->add_option("--max-tokens", f.max_tokens, "segment length limit");
  ingest->add_option("--domain", f.domain, "domain tag for every segment");

  auto* train = app.add_subcommand("train", "train a model and save it");
  common(train);
  with_data(train);
  with_model(train);

  auto* eval = app.add_subcommand("eval", "cross-validate a model spec or score a saved model");
  common(eval);
  with_data(eval);
  with_model(eval);
  eval->add_option("--model-path", f.model_path, "saved model to score instead of cross-validating");
  eval->add_option("--runs", f.runs, "splits or folds");
  eval->add_option("--mode", f.mode, "random | cv");

  auto* cross = app.add_subcommand("crosstest", "train on each domain, test on every domain");
  common(cross);
  with_data(cross);
  with_model(cross);
  cross->add_option("--runs", f.runs, "splits or folds");
  cross->add_option("--mode", f.mode, "random | cv");

  auto* search = app.add_subcommand("search", "seeded random hyperparameter search");
  common(search);
  with_data(search);
  with_model(search);
  search->add_option("--budget", f.budget, "number of trials");

  auto* explain = app.add_subcommand("explain", "shap, slalom or concept explanations of a saved model");
  common(explain);
  with_data(explain);
  explain->add_option("--model-path", f.model_path, "saved model");
  explain->add_option("--kind", f.kind, "shap | slalom | concepts");
  explain->add_option("--instances", f.instances, "shap: first N segments");
  explain->add_option("--n-samples", f.n_samples, "shap: sampled permutations");
  explain->add_option("--concepts", f.concepts, "concepts: K");

  auto* agree = app.add_subcommand("agree", "annotator agreement statistics");
  common(agree);
  agree->add_option("--annotations", f.annotations, "CSV item_id,annotator_id,label");
  agree->add_option("--expert", f.expert, "CSV item_id,label");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(2, "input", e.what());
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    const auto cfg = assemble_config(command, f);
    if (!cfg.contains("out")) throw trace::InputError("no output directory: set 'out' or pass --out");
    auto hashed = cfg;
    hashed.erase("out");
    Run run(command, hashed, cfg["out"].get<std::string>(), f.jobs);
    if (command == "ingest") cmd_ingest(run);
    if (command == "train") cmd_train(run);
    if (command == "eval") cmd_eval(run);
    if (command == "crosstest") cmd_crosstest(run);
    if (command == "search") cmd_search(run);
    if (command == "explain") cmd_explain(run);
    if (command == "agree") cmd_agree(run);
    run.finish();
    return 0;
  } catch (const trace::InputError& e) {
    return fail(2, "input", e.what());
  } catch (const std::exception& e) {
    return fail(1, "runtime", e.what());
  }
}
