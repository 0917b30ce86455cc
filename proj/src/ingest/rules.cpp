#include <sstream>

#include "secforge/common.hpp"
#include "secforge/ingest.hpp"

namespace secforge {
namespace {

using raw_json = nlohmann::json;

template <class Fn>
void for_each_line(std::string_view text, Fn&& fn) {
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    ++line_no;
    std::string_view line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!trim(line).empty()) fn(line_no, line);
    start = end + 1;
  }
}

std::string field_text(const raw_json& obj, const std::string& key) {
  const auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return {};
  if (it->is_string()) return it->get<std::string>();
  if (it->is_number() || it->is_boolean()) return it->dump();
  return {};
}

}  // namespace

ParseResult parse_detection_rules(std::string_view jsonl, const DetectionRuleSchema& schema) {
  ParseResult result;
  for_each_line(jsonl, [&](std::size_t line_no, std::string_view line) {
    raw_json obj;
    try {
      obj = raw_json::parse(line);
    } catch (const raw_json::parse_error& e) {
      result.diagnostics.record_errors.push_back({"detection_rules", line_no, std::string("invalid JSON: ") + e.what()});
      return;
    }
    if (!obj.is_object()) {
      result.diagnostics.record_errors.push_back({"detection_rules", line_no, "line is not a JSON object"});
      return;
    }
    const std::string id = field_text(obj, schema.id);
    if (id.empty()) {
      result.diagnostics.record_errors.push_back({"detection_rules", line_no, "missing field '" + schema.id + "'"});
      return;
    }
    Entity e;
    e.id = id;
    e.kind = EntityKind::detection_rule;
    e.source = SourceCorpus::detection_rules;
    e.name = field_text(obj, schema.name);
    e.description = collapse_whitespace(field_text(obj, schema.description));
    if (e.name.empty()) e.name = id;
    if (auto pattern = field_text(obj, schema.pattern); !pattern.empty()) e.set_attr("pattern", pattern);
    if (auto risk = field_text(obj, schema.risk_level); !risk.empty()) e.set_attr("risk_level", to_lower(risk));

    std::vector<std::string> ttps;
    if (const auto it = obj.find(schema.ttp_ids); it != obj.end()) {
      if (it->is_string()) {
        ttps.push_back(it->get<std::string>());
      } else if (it->is_array()) {
        for (const auto& v : *it) {
          if (v.is_string()) ttps.push_back(v.get<std::string>());
        }
      } else if (!it->is_null()) {
        result.diagnostics.record_errors.push_back(
            {"detection_rules", line_no, "field '" + schema.ttp_ids + "' must be a string or list"});
        return;
      }
    }
    for (const auto& raw : ttps) {
      const std::string ttp = canonical_attack_id(trim(raw));
      if (ttp.rfind("TA", 0) == 0) {
        e.add_reference(Relation::maps_to_tactic, ttp);
      } else if (!ttp.empty() && ttp.front() == 'T') {
        e.add_reference(Relation::maps_to_technique, ttp);
      } else {
        result.diagnostics.record_errors.push_back({"detection_rules", line_no, "unrecognised TTP id '" + raw + "'"});
      }
    }
    e.fragment = std::string(line);
    e.seal();
    result.entities.push_back(std::move(e));
  });
  return result;
}

ParseResult parse_documents(std::string_view jsonl, std::string_view default_category) {
  ParseResult result;
  for_each_line(jsonl, [&](std::size_t line_no, std::string_view line) {
    raw_json obj;
    try {
      obj = raw_json::parse(line);
    } catch (const raw_json::parse_error& e) {
      result.diagnostics.record_errors.push_back({"documents", line_no, std::string("invalid JSON: ") + e.what()});
      return;
    }
    const std::string id = obj.is_object() ? field_text(obj, "id") : std::string{};
    const std::string text = obj.is_object() ? field_text(obj, "text") : std::string{};
    if (id.empty() || trim(text).empty()) {
      result.diagnostics.record_errors.push_back({"documents", line_no, "document needs non-empty id and text"});
      return;
    }
    Entity e;
    e.id = id;
    e.kind = EntityKind::document;
    e.source = SourceCorpus::documents;
    e.name = field_text(obj, "title");
    if (e.name.empty()) e.name = id;
    e.description = collapse_whitespace(text);
    std::string category = field_text(obj, "category");
    e.set_attr("category", category.empty() ? std::string(default_category) : to_lower(category));
    e.fragment = std::string(line);
    e.seal();
    result.entities.push_back(std::move(e));
  });
  return result;
}

}  // namespace secforge
