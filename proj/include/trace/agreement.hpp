#pragma once

#include <array>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "trace/csv.hpp"
#include "trace/metrics.hpp"

namespace trace {

inline constexpr int kMissingVote = -1;

/// Items x annotators vote matrix; kMissingVote marks an absent vote.
struct AnnotationSet {
  std::vector<std::string> items;
  std::vector<std::string> annotators;
  std::vector<std::vector<int>> votes;  // [item][annotator]

  std::size_t item_index(const std::string& id) const {
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (items[i] == id) return i;
    }
    throw InputError("unknown item '" + id + "'");
  }

  void validate() const {
    if (annotators.size() < 2) throw InputError("annotations need at least two annotators");
    if (votes.size() != items.size()) throw InputError("annotations: vote rows differ from item count");
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (votes[i].size() != annotators.size()) throw InputError("annotations: ragged vote matrix");
      bool any = false;
      for (int v : votes[i]) {
        if (v != kMissingVote && v != 0 && v != 1) throw InputError("annotations: votes must be 0 or 1");
        any = any || v != kMissingVote;
      }
      if (!any) throw InputError("item '" + items[i] + "' has no votes");
    }
  }
};

namespace detail {

inline int parse_label(const std::string& s, std::size_t line) {
  if (s == "0") return 0;
  if (s == "1") return 1;
  throw InputError("line " + std::to_string(line) + ": label must be 0 or 1, got '" + s + "'");
}

inline bool is_header(const CsvRow& row, const char* first) { return !row.fields.empty() && row.fields[0] == first; }

}  // namespace detail

/// Long-format CSV "item_id,annotator_id,label" (header optional). Items and
/// annotators keep first-appearance order; an empty label is a missing vote.
inline AnnotationSet read_annotations_csv(std::istream& in) {
  AnnotationSet set;
  std::unordered_map<std::string, std::size_t> item_ix;
  std::unordered_map<std::string, std::size_t> ann_ix;
  struct Vote {
    std::size_t item, annotator;
    int label;
    std::size_t line;
  };
  std::vector<Vote> raw;
  const auto rows = read_csv(in);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (r == 0 && detail::is_header(row, "item_id")) continue;
    if (row.fields.size() != 3) {
      throw InputError("line " + std::to_string(row.line) + ": expected item_id,annotator_id,label");
    }
    const std::string& item = row.fields[0];
    const std::string& ann = row.fields[1];
    const std::string& label = row.fields[2];
    if (item.empty() || ann.empty()) throw InputError("line " + std::to_string(row.line) + ": empty id");
    auto [it, new_item] = item_ix.emplace(item, set.items.size());
    if (new_item) set.items.push_back(item);
    auto [at, new_ann] = ann_ix.emplace(ann, set.annotators.size());
    if (new_ann) set.annotators.push_back(ann);
    raw.push_back({it->second, at->second, label.empty() ? kMissingVote : detail::parse_label(label, row.line), row.line});
  }
  set.votes.assign(set.items.size(), std::vector<int>(set.annotators.size(), kMissingVote));
  std::vector<std::vector<bool>> seen(set.items.size(), std::vector<bool>(set.annotators.size(), false));
  for (const auto& v : raw) {
    if (seen[v.item][v.annotator]) {
      throw InputError("line " + std::to_string(v.line) + ": duplicate vote for item '" + set.items[v.item] +
                       "' by '" + set.annotators[v.annotator] + "'");
    }
    seen[v.item][v.annotator] = true;
    set.votes[v.item][v.annotator] = v.label;
  }
  set.validate();
  return set;
}

inline AnnotationSet read_annotations_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open annotations '" + path + "'");
  return read_annotations_csv(in);
}

/// "item_id,label" reference labels.
inline std::map<std::string, int> read_expert_csv(std::istream& in) {
  std::map<std::string, int> out;
  const auto rows = read_csv(in);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (r == 0 && detail::is_header(row, "item_id")) continue;
    if (row.fields.size() != 2) throw InputError("line " + std::to_string(row.line) + ": expected item_id,label");
    if (!out.emplace(row.fields[0], detail::parse_label(row.fields[1], row.line)).second) {
      throw InputError("line " + std::to_string(row.line) + ": duplicate item '" + row.fields[0] + "'");
    }
  }
  return out;
}

inline std::map<std::string, int> read_expert_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open expert labels '" + path + "'");
  return read_expert_csv(in);
}

/// Nominal binary coincidence matrix: o[c][k] sums, over items with m >= 2
/// votes, the ordered pairs (c, k) of distinct annotators divided by m - 1.
inline std::array<std::array<double, 2>, 2> coincidence_matrix(const AnnotationSet& a) {
  std::array<std::array<double, 2>, 2> o{};
  for (const auto& row : a.votes) {
    std::array<double, 2> n{};
    for (int v : row) {
      if (v != kMissingVote) n[static_cast<std::size_t>(v)] += 1.0;
    }
    const double m = n[0] + n[1];
    if (m < 2.0) continue;
    for (std::size_t c = 0; c < 2; ++c) {
      for (std::size_t k = 0; k < 2; ++k) o[c][k] += (c == k ? n[c] * (n[c] - 1.0) : n[c] * n[k]) / (m - 1.0);
    }
  }
  return o;
}

inline double krippendorff_alpha(const AnnotationSet& a) {
  if (a.annotators.size() < 2) throw InputError("alpha needs at least two annotators");
  const auto o = coincidence_matrix(a);
  const double n0 = o[0][0] + o[0][1];
  const double n1 = o[1][0] + o[1][1];
  const double n = n0 + n1;
  if (n <= 0.0) throw Error("alpha undefined: no pairable values");
  const double d_expected = 2.0 * n0 * n1 / (n * (n - 1.0));
  if (d_expected <= 0.0) throw Error("alpha undefined: only one category among pairable values");
  const double d_observed = (o[0][1] + o[1][0]) / n;
  return 1.0 - d_observed / d_expected;
}

struct MajorityVote {
  std::vector<int> labels;
  std::vector<bool> tie;
  std::size_t tie_count = 0;
};

/// Strict majority of the present votes; ties go to 0 and are flagged.
inline MajorityVote majority_vote(const AnnotationSet& a) {
  MajorityVote out;
  for (std::size_t i = 0; i < a.items.size(); ++i) {
    std::size_t ones = 0;
    std::size_t zeros = 0;
    for (int v : a.votes[i]) {
      ones += v == 1 ? 1 : 0;
      zeros += v == 0 ? 1 : 0;
    }
    if (ones + zeros == 0) throw InputError("item '" + a.items[i] + "' has no votes");
    const bool tie = ones == zeros;
    out.labels.push_back(ones > zeros ? 1 : 0);
    out.tie.push_back(tie);
    out.tie_count += tie ? 1 : 0;
  }
  return out;
}

/// Binary F1 of the majority labels with the expert as reference. Both sides
/// must cover exactly the same item ids.
inline double expert_agreement(std::span<const std::string> items, std::span<const int> majority,
                               const std::map<std::string, int>& expert) {
  if (items.size() != majority.size()) throw InputError("expert agreement: length mismatch");
  if (items.size() != expert.size()) {
    throw InputError("misaligned ids: " + std::to_string(items.size()) + " annotated items vs " +
                     std::to_string(expert.size()) + " expert labels");
  }
  std::vector<int> ref;
  for (const auto& id : items) {
    const auto it = expert.find(id);
    if (it == expert.end()) throw InputError("misaligned ids: no expert label for '" + id + "'");
    ref.push_back(it->second);
  }
  return binary_f1(majority, ref);
}

inline double cohens_kappa(std::span<const int> a, std::span<const int> b) {
  const auto c = confusion(a, b);
  const double n = static_cast<double>(c.total());
  const double p_o = static_cast<double>(c.tp + c.tn) / n;
  const double a1 = static_cast<double>(c.tp + c.fp) / n;
  const double b1 = static_cast<double>(c.tp + c.fn) / n;
  const double p_e = a1 * b1 + (1.0 - a1) * (1.0 - b1);
  if (p_e >= 1.0) throw Error("kappa undefined: both raters use a single identical category");
  return (p_o - p_e) / (1.0 - p_e);
}

struct AgreementReport {
  std::size_t n_items = 0;
  std::size_t n_annotators = 0;
  std::optional<double> alpha;
  std::string alpha_error;
  std::size_t tie_count = 0;
  std::optional<double> expert_f1;
  std::optional<double> kappa;  // majority vs expert
  std::string kappa_error;
};

inline AgreementReport agreement_report(const AnnotationSet& a, const std::map<std::string, int>* expert) {
  AgreementReport r;
  r.n_items = a.items.size();
  r.n_annotators = a.annotators.size();
  try {
    r.alpha = krippendorff_alpha(a);
  } catch (const InputError&) {
    throw;
  } catch (const Error& e) {
    r.alpha_error = e.what();
  }
  const auto mv = majority_vote(a);
  r.tie_count = mv.tie_count;
  if (expert) {
    r.expert_f1 = expert_agreement(a.items, mv.labels, *expert);
    std::vector<int> ref;
    for (const auto& id : a.items) ref.push_back(expert->at(id));
    try {
      r.kappa = cohens_kappa(mv.labels, ref);
    } catch (const InputError&) {
      throw;
    } catch (const Error& e) {
      r.kappa_error = e.what();
    }
  }
  return r;
}

/// "(1) α = .63 (2) F1 = .77"; the F1 part only with an expert reference.
inline std::string format_agreement(const AgreementReport& r) {
  std::string s = "(1) α = " + (r.alpha ? format_short(*r.alpha) : std::string("undefined"));
  if (r.expert_f1) s += " (2) F1 = " + format_short(*r.expert_f1);
  return s;
}

inline nlohmann::ordered_json to_json(const AgreementReport& r) {
  nlohmann::ordered_json j;
  j["n_items"] = r.n_items;
  j["n_annotators"] = r.n_annotators;
  if (r.alpha) {
    j["alpha"] = *r.alpha;
  } else {
    j["alpha"] = nullptr;
    j["alpha_error"] = r.alpha_error;
  }
  j["majority_ties"] = r.tie_count;
  if (r.expert_f1) j["expert_f1"] = *r.expert_f1;
  if (r.kappa) j["kappa"] = *r.kappa;
  if (!r.kappa_error.empty()) j["kappa_error"] = r.kappa_error;
  j["summary"] = format_agreement(r);
  return j;
}

}  // namespace trace
