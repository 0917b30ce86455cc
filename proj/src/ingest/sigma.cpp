#include <algorithm>
#include <cctype>
#include <filesystem>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "secforge/common.hpp"
#include "secforge/ingest.hpp"

namespace secforge {
namespace {

// Splits a YAML stream on "---" document markers, keeping each document's text verbatim.
std::vector<std::string> split_documents(std::string_view text) {
  std::vector<std::string> docs;
  std::string current;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    const std::string t = trim(line);
    if (t == "---" || t.rfind("--- ", 0) == 0) {
      docs.push_back(std::move(current));
      current.clear();
      continue;
    }
    if (t == "...") continue;
    current += line;
    current.push_back('\n');
  }
  docs.push_back(std::move(current));
  docs.erase(std::remove_if(docs.begin(), docs.end(),
                            [](const std::string& d) {
                              std::istringstream lines(d);
                              std::string l;
                              while (std::getline(lines, l)) {
                                const std::string t = trim(l);
                                if (!t.empty() && t.front() != '#') return false;
                              }
                              return true;
                            }),
             docs.end());
  return docs;
}

// The verbatim text of a top-level key's block: its line plus following indented lines.
std::string top_level_block(const std::string& doc, std::string_view key) {
  std::istringstream in(doc);
  std::string line;
  std::string block;
  bool inside = false;
  const std::string prefix = std::string(key) + ":";
  while (std::getline(in, line)) {
    const bool top = !line.empty() && !std::isspace(static_cast<unsigned char>(line.front())) && line.front() != '#';
    if (inside) {
      if (top) break;
      block += line;
      block.push_back('\n');
    } else if (line.rfind(prefix, 0) == 0) {
      inside = true;
      block += line;
      block.push_back('\n');
    }
  }
  while (!block.empty() && (block.back() == '\n' || block.back() == ' ')) block.pop_back();
  return block;
}

std::vector<std::string> scalar_list(const YAML::Node& node) {
  std::vector<std::string> out;
  if (!node) return out;
  if (node.IsSequence()) {
    for (const auto& v : node) {
      if (v.IsScalar()) out.push_back(v.as<std::string>());
    }
  } else if (node.IsScalar()) {
    out.push_back(node.as<std::string>());
  }
  return out;
}

std::string scalar(const YAML::Node& node) { return node && node.IsScalar() ? node.as<std::string>() : std::string{}; }

bool is_technique_tag(std::string_view body) {
  if (body.size() < 5 || (body[0] != 't' && body[0] != 'T')) return false;
  for (std::size_t i = 1; i < body.size(); ++i) {
    if (!std::isdigit(static_cast<unsigned char>(body[i])) && body[i] != '.') return false;
  }
  return std::isdigit(static_cast<unsigned char>(body[1])) != 0;
}

bool is_other_attack_id(std::string_view body) {
  // attack.g0016 (group), attack.s0002 (software) and similar id tags.
  return body.size() >= 5 && std::isalpha(static_cast<unsigned char>(body[0])) &&
         std::all_of(body.begin() + 1, body.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); });
}

}  // namespace

ParseResult parse_sigma_text(std::string_view text, std::string_view origin) {
  ParseResult result;
  YAML::Node global;
  std::size_t position = 0;
  for (const auto& doc : split_documents(text)) {
    ++position;
    YAML::Node node;
    try {
      node = YAML::Load(doc);
    } catch (const YAML::Exception& e) {
      throw ParseError(std::string(origin) + ": YAML parse failure: " + e.what());
    }
    if (!node.IsMap()) {
      result.diagnostics.record_errors.push_back({std::string(origin), position, "rule document is not a mapping"});
      continue;
    }
    if (scalar(node["action"]) == "global") {
      global = node;
      continue;
    }
    if (global) {
      for (const auto& kv : global) {
        const std::string key = kv.first.as<std::string>();
        if (key != "action" && !node[key]) node[key] = kv.second;
      }
    }
    if (!node["detection"]) {
      result.diagnostics.record_errors.push_back({std::string(origin), position, "rule missing detection field"});
      continue;
    }
    const std::string rule_id = scalar(node["id"]);
    if (rule_id.empty()) {
      result.diagnostics.record_errors.push_back({std::string(origin), position, "rule missing id"});
      continue;
    }

    Entity e;
    e.id = rule_id;
    e.kind = EntityKind::sigma_rule;
    e.source = SourceCorpus::sigma;
    e.name = scalar(node["title"]);
    e.description = collapse_whitespace(scalar(node["description"]));
    e.fragment = doc;

    std::string detection = top_level_block(doc, "detection");
    if (detection.empty()) detection = "detection:\n" + YAML::Dump(node["detection"]);
    e.set_attr("detection", detection);
    std::string logsource = top_level_block(doc, "logsource");
    if (logsource.empty() && node["logsource"]) logsource = "logsource:\n" + YAML::Dump(node["logsource"]);
    if (!logsource.empty()) e.set_attr("logsource", logsource);
    if (auto level = scalar(node["level"]); !level.empty()) e.set_attr("level", to_lower(level));
    if (auto status = scalar(node["status"]); !status.empty()) e.set_attr("status", status);
    if (auto fp = scalar_list(node["falsepositives"]); !fp.empty()) e.set_attr("falsepositives", fp);

    const auto tags = scalar_list(node["tags"]);
    if (!tags.empty()) e.set_attr("tags", tags);
    for (const auto& tag : tags) {
      const std::string lower = to_lower(tag);
      if (lower.rfind("attack.", 0) != 0) continue;
      std::string body = lower.substr(7);
      if (is_technique_tag(body)) {
        e.add_reference(Relation::maps_to_technique, canonical_attack_id(body));
      } else if (!is_other_attack_id(body)) {
        std::replace(body.begin(), body.end(), '_', '-');
        e.add_reference(Relation::maps_to_tactic, body);
      }
    }
    e.seal();
    result.entities.push_back(std::move(e));
  }
  return result;
}

ParseResult parse_sigma_rules(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  ParseResult result;
  if (!fs::exists(dir)) throw Error("sigma rule directory does not exist: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const auto ext = to_lower(entry.path().extension().string());
    if (ext == ".yml" || ext == ".yaml") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& file : files) {
    const std::string origin = fs::relative(file, dir).string();
    try {
      auto part = parse_sigma_text(read_file(file.string()), origin);
      result.diagnostics.merge(part.diagnostics);
      for (auto& e : part.entities) result.entities.push_back(std::move(e));
    } catch (const Error& e) {
      result.diagnostics.record_errors.push_back({origin, 0, e.what()});
    }
  }
  return result;
}

}  // namespace secforge
