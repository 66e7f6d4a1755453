#pragma once

#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "trace/common.hpp"
#include "trace/tokenizer.hpp"

namespace trace {

using ordered_json = nlohmann::ordered_json;

/// One labeled text unit; the unit of training, evaluation and explanation.
struct Segment {
  std::string id;
  std::string text;
  std::optional<int> label;  // 1 = trauma, 0 = no trauma
  std::string domain;
  std::optional<std::string> parent_id;
  ordered_json extra = ordered_json::object();  // unknown JSONL keys, kept for round-trip
};

namespace detail {

inline bool blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c) != 0; });
}

}  // namespace detail

inline void validate_segment(const Segment& s) {
  if (s.id.empty()) throw InputError("segment id must be non-empty");
  if (detail::blank(s.text)) throw InputError("segment '" + s.id + "' has empty text");
  if (s.label && *s.label != 0 && *s.label != 1) {
    throw InputError("segment '" + s.id + "' has label outside {0,1}");
  }
  if (s.parent_id && *s.parent_id == s.id) {
    throw InputError("segment '" + s.id + "' is its own parent");
  }
}

/// Ordered, immutable collection of segments with unique ids.
class Corpus {
 public:
  Corpus() = default;

  explicit Corpus(std::vector<Segment> segments, std::string domain = "mixed")
      : segments_(std::move(segments)), domain_(std::move(domain)) {
    std::unordered_set<std::string> seen;
    seen.reserve(segments_.size());
    for (const auto& s : segments_) {
      validate_segment(s);
      if (!seen.insert(s.id).second) throw InputError("duplicate segment id '" + s.id + "'");
    }
  }

  const std::vector<Segment>& segments() const { return segments_; }
  const Segment& operator[](std::size_t i) const { return segments_[i]; }
  std::size_t size() const { return segments_.size(); }
  bool empty() const { return segments_.empty(); }
  auto begin() const { return segments_.begin(); }
  auto end() const { return segments_.end(); }
  const std::string& domain() const { return domain_; }

  std::size_t labeled_count() const {
    return static_cast<std::size_t>(std::count_if(segments_.begin(), segments_.end(),
                                                  [](const Segment& s) { return s.label.has_value(); }));
  }

  std::size_t positive_count() const {
    return static_cast<std::size_t>(std::count_if(segments_.begin(), segments_.end(),
                                                  [](const Segment& s) { return s.label == 1; }));
  }

  /// Fraction of labeled segments with label 1 (0 when nothing is labeled).
  double class_balance() const {
    const auto n = labeled_count();
    return n == 0 ? 0.0 : static_cast<double>(positive_count()) / static_cast<double>(n);
  }

  std::vector<int> labels() const {
    std::vector<int> out;
    out.reserve(segments_.size());
    for (const auto& s : segments_) {
      if (!s.label) throw InputError("segment '" + s.id + "' is unlabeled");
      out.push_back(*s.label);
    }
    return out;
  }

  std::vector<std::string> texts() const {
    std::vector<std::string> out;
    out.reserve(segments_.size());
    for (const auto& s : segments_) out.push_back(s.text);
    return out;
  }

  Corpus subset(std::span<const std::size_t> indices) const {
    std::vector<Segment> out;
    out.reserve(indices.size());
    for (auto i : indices) out.push_back(segments_.at(i));
    return Corpus(std::move(out), domain_);
  }

  static Corpus concat(std::span<const Corpus> parts, std::string domain = "mixed") {
    std::vector<Segment> out;
    for (const auto& p : parts) out.insert(out.end(), p.segments_.begin(), p.segments_.end());
    return Corpus(std::move(out), std::move(domain));
  }

 private:
  std::vector<Segment> segments_;
  std::string domain_ = "mixed";
};

// ---------------------------------------------------------------------------
// JSON Lines I/O: {"id","text","label","domain","parent_id", ...unknown keys}

inline ordered_json segment_to_json(const Segment& s) {
  ordered_json j;
  j["id"] = s.id;
  j["text"] = s.text;
  j["label"] = s.label ? ordered_json(*s.label) : ordered_json(nullptr);
  j["domain"] = s.domain;
  j["parent_id"] = s.parent_id ? ordered_json(*s.parent_id) : ordered_json(nullptr);
  for (const auto& [k, v] : s.extra.items()) j[k] = v;
  return j;
}

inline Segment segment_from_json(const ordered_json& j) {
  if (!j.is_object()) throw InputError("expected a JSON object");
  Segment s;
  if (!j.contains("id") || !j["id"].is_string()) throw InputError("missing string field 'id'");
  if (!j.contains("text") || !j["text"].is_string()) throw InputError("missing string field 'text'");
  s.id = j["id"].get<std::string>();
  s.text = j["text"].get<std::string>();
  if (j.contains("label") && !j["label"].is_null()) {
    const auto& l = j["label"];
    if (!l.is_number_integer() || (l.get<int>() != 0 && l.get<int>() != 1)) {
      throw InputError("field 'label' must be 0, 1 or null");
    }
    s.label = l.get<int>();
  }
  if (j.contains("domain")) {
    if (!j["domain"].is_string()) throw InputError("field 'domain' must be a string");
    s.domain = j["domain"].get<std::string>();
  }
  if (j.contains("parent_id") && !j["parent_id"].is_null()) {
    if (!j["parent_id"].is_string()) throw InputError("field 'parent_id' must be a string or null");
    s.parent_id = j["parent_id"].get<std::string>();
  }
  for (const auto& [k, v] : j.items()) {
    if (k != "id" && k != "text" && k != "label" && k != "domain" && k != "parent_id") s.extra[k] = v;
  }
  validate_segment(s);
  return s;
}

/// Parses JSONL; every schema violation is reported with its 1-based line number.
inline Corpus read_corpus_jsonl(std::istream& in, std::string domain = "mixed") {
  std::vector<Segment> segments;
  std::vector<std::string> problems;
  std::unordered_set<std::string> ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::blank(line)) continue;
    try {
      auto s = segment_from_json(ordered_json::parse(line));
      if (!ids.insert(s.id).second) throw InputError("duplicate segment id '" + s.id + "'");
      segments.push_back(std::move(s));
    } catch (const std::exception& e) {
      problems.push_back("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!problems.empty()) {
    std::string msg = "corpus schema violations:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw InputError(msg);
  }
  if (domain == "mixed" && !segments.empty()) {
    const auto& d = segments.front().domain;
    if (std::all_of(segments.begin(), segments.end(), [&](const Segment& s) { return s.domain == d; }) &&
        !d.empty()) {
      domain = d;
    }
  }
  return Corpus(std::move(segments), std::move(domain));
}

inline Corpus read_corpus_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open corpus file '" + path + "'");
  return read_corpus_jsonl(in);
}

inline void write_corpus_jsonl(std::ostream& out, const Corpus& corpus) {
  for (const auto& s : corpus) out << segment_to_json(s).dump() << '\n';
}

inline void write_corpus_jsonl(const std::string& path, const Corpus& corpus) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  write_corpus_jsonl(out, corpus);
}

// ---------------------------------------------------------------------------
// Segmentation

/// Greedy left-to-right split of every segment longer than `max_tokens`.
///
/// Pieces are exact substrings of the parent text (cuts fall on token
/// boundaries), carry `parent_id`, inherit the parent label, and get ids of
/// the form `<parent>#<k>`.
inline Corpus segment_documents(const Corpus& corpus, std::size_t max_tokens = 512,
                                const TokenizerConfig& cfg = {}) {
  if (max_tokens == 0) throw InputError("max_tokens must be >= 1");
  std::vector<Segment> out;
  out.reserve(corpus.size());
  for (const auto& seg : corpus) {
    const auto units = text_units(seg.text, cfg);
    std::size_t total = 0;
    for (const auto& u : units) total += u.n_tokens;
    if (total <= max_tokens) {
      out.push_back(seg);
      continue;
    }

    // Cut positions (byte offsets) where a new piece starts.
    std::vector<std::size_t> cuts{0};
    std::vector<std::string> oversized;  // normalized fallback text for units alone above the limit
    std::size_t in_piece = 0;
    for (std::size_t u = 0; u < units.size(); ++u) {
      const auto n = units[u].n_tokens;
      if (n == 0) continue;
      if (in_piece > 0 && in_piece + n > max_tokens) {
        cuts.push_back(units[u].begin);
        in_piece = 0;
      }
      in_piece += n;
    }
    cuts.push_back(seg.text.size());

    std::size_t k = 0;
    auto emit = [&](std::string text) {
      Segment piece;
      piece.id = seg.id + "#" + std::to_string(k++);
      piece.text = std::move(text);
      piece.label = seg.label;
      piece.domain = seg.domain;
      piece.parent_id = seg.id;
      piece.extra = seg.extra;
      out.push_back(std::move(piece));
    };
    for (std::size_t c = 0; c + 1 < cuts.size(); ++c) {
      std::string text = seg.text.substr(cuts[c], cuts[c + 1] - cuts[c]);
      auto toks = tokenize(text, cfg);
      if (toks.size() <= max_tokens) {
        emit(std::move(text));
        continue;
      }
      // A single unit (e.g. one enormous hyphenated run) exceeds the limit:
      // fall back to normalized token text for that piece.
      for (std::size_t at = 0; at < toks.size(); at += max_tokens) {
        const auto stop = std::min(toks.size(), at + max_tokens);
        emit(join_tokens(std::span<const std::string>(toks).subspan(at, stop - at)));
      }
    }
  }
  return Corpus(std::move(out), corpus.domain());
}

// ---------------------------------------------------------------------------
// Splits

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

namespace detail {

inline void require_both_classes(const Corpus& corpus, const char* what) {
  const auto labels = corpus.labels();
  const auto pos = std::count(labels.begin(), labels.end(), 1);
  if (pos == 0 || pos == static_cast<long>(labels.size())) throw InputError(what);
}

inline Split complement_split(std::size_t n, std::vector<std::size_t> test) {
  std::sort(test.begin(), test.end());
  Split s;
  s.test = std::move(test);
  std::size_t t = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (t < s.test.size() && s.test[t] == i) {
      ++t;
    } else {
      s.train.push_back(i);
    }
  }
  return s;
}

}  // namespace detail

/// Stratified k-fold partition: test folds are disjoint, cover the corpus, and
/// hold per-class counts within one of the ideal share.
inline std::vector<Split> stratified_splits(const Corpus& corpus, std::size_t folds, std::uint64_t seed) {
  if (folds < 2) throw InputError("folds must be >= 2");
  detail::require_both_classes(corpus, "cannot stratify: corpus needs both classes");
  const auto labels = corpus.labels();
  Rng rng(seed);
  std::vector<std::vector<std::size_t>> fold_members(folds);
  std::size_t cursor = 0;
  for (int cls : {1, 0}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == cls) idx.push_back(i);
    }
    shuffle(std::span<std::size_t>(idx), rng);
    for (auto i : idx) {
      fold_members[cursor % folds].push_back(i);
      ++cursor;
    }
  }
  std::vector<Split> out;
  out.reserve(folds);
  for (auto& m : fold_members) out.push_back(detail::complement_split(labels.size(), std::move(m)));
  return out;
}

/// Independent stratified shuffle splits (`runs` of them), each holding out
/// round(test_fraction * n_class) segments of every class.
inline std::vector<Split> random_splits(const Corpus& corpus, std::size_t runs, double test_fraction,
                                        std::uint64_t seed) {
  if (runs < 1) throw InputError("runs must be >= 1");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw InputError("test_fraction must be in (0,1)");
  detail::require_both_classes(corpus, "cannot stratify: corpus needs both classes");
  const auto labels = corpus.labels();
  std::vector<Split> out;
  for (std::size_t r = 0; r < runs; ++r) {
    Rng rng(derive_seed(seed, r));
    std::vector<std::size_t> test;
    for (int cls : {1, 0}) {
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == cls) idx.push_back(i);
      }
      shuffle(std::span<std::size_t>(idx), rng);
      auto take = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(idx.size())));
      take = std::clamp<std::size_t>(take, 1, idx.size() - (idx.size() > 1 ? 1 : 0));
      test.insert(test.end(), idx.begin(), idx.begin() + static_cast<long>(take));
    }
    out.push_back(detail::complement_split(labels.size(), std::move(test)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpora

struct GeneratorConfig {
  std::size_t n_docs = 1000;
  double positive_rate = 0.2;
  std::vector<std::string> signal_tokens{"wounded"};
  std::size_t noise_vocab_size = 500;
  std::size_t doc_length = 30;
  std::size_t doc_length_max = 0;  // 0: every document has doc_length tokens
  std::size_t max_signal_per_doc = 2;
  std::string domain = "synthetic";
  std::string id_prefix;  // defaults to domain
  std::string noise_prefix = "w";
};

inline GeneratorConfig generator_config_from_json(const nlohmann::json& j) {
  GeneratorConfig c;
  static const std::set<std::string> known{"n_docs", "positive_rate", "signal_tokens", "noise_vocab_size",
                                           "doc_length", "doc_length_max", "max_signal_per_doc",
                                           "domain", "id_prefix", "noise_prefix"};
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw InputError("unknown generator field '" + k + "'");
  }
  try {
    c.n_docs = j.value("n_docs", c.n_docs);
    c.positive_rate = j.value("positive_rate", c.positive_rate);
    c.signal_tokens = j.value("signal_tokens", c.signal_tokens);
    c.noise_vocab_size = j.value("noise_vocab_size", c.noise_vocab_size);
    c.doc_length = j.value("doc_length", c.doc_length);
    c.doc_length_max = j.value("doc_length_max", c.doc_length_max);
    c.max_signal_per_doc = j.value("max_signal_per_doc", c.max_signal_per_doc);
    c.domain = j.value("domain", c.domain);
    c.id_prefix = j.value("id_prefix", c.id_prefix);
    c.noise_prefix = j.value("noise_prefix", c.noise_prefix);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("generator config: ") + e.what());
  }
  return c;
}

/// Generates a labeled corpus where every positive document holds at least one
/// signal token and no negative document holds any.
inline Corpus synthesize_corpus(const GeneratorConfig& cfg, std::uint64_t seed) {
  if (!(cfg.positive_rate > 0.0 && cfg.positive_rate < 1.0)) {
    throw InputError("positive_rate must be in (0,1)");
  }
  if (cfg.signal_tokens.empty()) throw InputError("signal_tokens must be non-empty");
  if (cfg.noise_vocab_size == 0 || cfg.doc_length == 0) {
    throw InputError("noise_vocab_size and doc_length must be positive");
  }
  const std::set<std::string> signal(cfg.signal_tokens.begin(), cfg.signal_tokens.end());
  std::vector<std::string> noise;
  noise.reserve(cfg.noise_vocab_size);
  for (std::size_t i = 0; noise.size() < cfg.noise_vocab_size; ++i) {
    std::string w = cfg.noise_prefix + std::to_string(i);
    if (!signal.count(w)) noise.push_back(std::move(w));
  }
  const std::size_t len_max = std::max(cfg.doc_length, cfg.doc_length_max);
  const std::string prefix = cfg.id_prefix.empty() ? cfg.domain : cfg.id_prefix;

  Rng rng(seed);
  std::vector<Segment> docs;
  docs.reserve(cfg.n_docs);
  for (std::size_t d = 0; d < cfg.n_docs; ++d) {
    const bool positive = uniform01(rng) < cfg.positive_rate;
    const std::size_t len = cfg.doc_length + uniform_index(rng, len_max - cfg.doc_length + 1);
    std::vector<std::string> words(len);
    for (auto& w : words) w = noise[uniform_index(rng, noise.size())];
    if (positive) {
      const std::size_t k = 1 + uniform_index(rng, std::min(cfg.max_signal_per_doc, len));
      for (std::size_t j = 0; j < k; ++j) {
        words[uniform_index(rng, len)] = cfg.signal_tokens[uniform_index(rng, cfg.signal_tokens.size())];
      }
      // a later placement may overwrite an earlier one; guarantee at least one
      if (std::none_of(words.begin(), words.end(), [&](const std::string& w) { return signal.count(w) > 0; })) {
        words[0] = cfg.signal_tokens[0];
      }
    }
    std::string text = join_tokens(words);
    text[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(text[0])));
    text += '.';
    Segment s;
    s.id = prefix + "-" + std::to_string(d);
    s.text = std::move(text);
    s.label = positive ? 1 : 0;
    s.domain = cfg.domain;
    docs.push_back(std::move(s));
  }
  return Corpus(std::move(docs), cfg.domain);
}

}  // namespace trace
