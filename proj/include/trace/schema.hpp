#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

namespace trace {

/// Checks a document against the JSON Schema keywords the run-config schema
/// uses: type, enum, properties, additionalProperties (boolean), required,
/// items, minItems, minLength, minimum, maximum, exclusiveMinimum and
/// exclusiveMaximum. Other keywords are ignored. Returns one message per
/// violation, each prefixed by the JSON pointer of the offending value.
class SchemaChecker {
 public:
  explicit SchemaChecker(nlohmann::json schema) : schema_(std::move(schema)) {}

  std::vector<std::string> check(const nlohmann::json& doc) const {
    std::vector<std::string> errors;
    visit(schema_, doc, "", errors);
    return errors;
  }

 private:
  static bool has_type(const nlohmann::json& v, const std::string& t) {
    if (t == "object") return v.is_object();
    if (t == "array") return v.is_array();
    if (t == "string") return v.is_string();
    if (t == "boolean") return v.is_boolean();
    if (t == "null") return v.is_null();
    if (t == "integer") return v.is_number_integer() || (v.is_number_float() && v.get<double>() == std::floor(v.get<double>()));
    if (t == "number") return v.is_number();
    return false;
  }

  static void visit(const nlohmann::json& s, const nlohmann::json& v, const std::string& at,
                    std::vector<std::string>& errors) {
    const std::string where = at.empty() ? "/" : at;
    if (s.contains("type")) {
      bool ok = false;
      if (s["type"].is_array()) {
        for (const auto& t : s["type"]) ok = ok || has_type(v, t.get<std::string>());
      } else {
        ok = has_type(v, s["type"].get<std::string>());
      }
      if (!ok) {
        errors.push_back(where + ": expected type " + s["type"].dump());
        return;
      }
    }
    if (s.contains("enum")) {
      bool ok = false;
      for (const auto& e : s["enum"]) ok = ok || e == v;
      if (!ok) errors.push_back(where + ": must be one of " + s["enum"].dump());
    }
    if (v.is_number()) {
      const double x = v.get<double>();
      if (s.contains("minimum") && x < s["minimum"].get<double>()) {
        errors.push_back(where + ": must be >= " + s["minimum"].dump());
      }
      if (s.contains("maximum") && x > s["maximum"].get<double>()) {
        errors.push_back(where + ": must be <= " + s["maximum"].dump());
      }
      if (s.contains("exclusiveMinimum") && x <= s["exclusiveMinimum"].get<double>()) {
        errors.push_back(where + ": must be > " + s["exclusiveMinimum"].dump());
      }
      if (s.contains("exclusiveMaximum") && x >= s["exclusiveMaximum"].get<double>()) {
        errors.push_back(where + ": must be < " + s["exclusiveMaximum"].dump());
      }
    }
    if (v.is_string() && s.contains("minLength") && v.get<std::string>().size() < s["minLength"].get<std::size_t>()) {
      errors.push_back(where + ": string too short");
    }
    if (v.is_array()) {
      if (s.contains("minItems") && v.size() < s["minItems"].get<std::size_t>()) {
        errors.push_back(where + ": needs at least " + s["minItems"].dump() + " items");
      }
      if (s.contains("items")) {
        for (std::size_t i = 0; i < v.size(); ++i) visit(s["items"], v[i], at + "/" + std::to_string(i), errors);
      }
    }
    if (v.is_object()) {
      if (s.contains("required")) {
        for (const auto& r : s["required"]) {
          if (!v.contains(r.get<std::string>())) errors.push_back(where + ": missing required field " + r.dump());
        }
      }
      const auto* props = s.contains("properties") ? &s["properties"] : nullptr;
      for (const auto& [k, child] : v.items()) {
        if (props && props->contains(k)) {
          visit((*props)[k], child, at + "/" + k, errors);
        } else if (s.value("additionalProperties", true) == false) {
          errors.push_back(where + ": unknown field \"" + k + "\"");
        }
      }
    }
  }

  nlohmann::json schema_;
};

}  // namespace trace
