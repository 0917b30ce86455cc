#include <algorithm>
#include <set>
#include <unordered_map>

#include "ingest_util.hpp"
#include "secforge/common.hpp"
#include "secforge/ingest.hpp"

namespace secforge {
namespace {

using raw_json = nlohmann::json;

// Structural STIX objects that carry no entity of their own.
const std::set<std::string> kIgnoredTypes = {
    "identity", "marking-definition", "x-mitre-matrix", "x-mitre-collection", "x-mitre-analytic",
    "x-mitre-detection-strategy", "x-mitre-asset", "note", "report",
};

bool is_dropped(const raw_json& obj) {
  return obj.value("revoked", false) || obj.value("x_mitre_deprecated", false);
}

bool in_domains(const raw_json& obj, const AttackOptions& options) {
  const auto it = obj.find("x_mitre_domains");
  if (it == obj.end() || !it->is_array() || options.domains.empty()) return true;
  for (const auto& d : *it) {
    if (d.is_string() && std::find(options.domains.begin(), options.domains.end(), d.get<std::string>()) !=
                             options.domains.end()) {
      return true;
    }
  }
  return false;
}

std::string external_id(const raw_json& obj, std::string_view source_name = "mitre-attack") {
  const auto it = obj.find("external_references");
  if (it == obj.end() || !it->is_array()) return {};
  for (const auto& ref : *it) {
    if (ref.value("source_name", "") == source_name && ref.contains("external_id")) {
      return ref["external_id"].get<std::string>();
    }
  }
  return {};
}

std::vector<std::string> string_list(const raw_json& obj, const char* key) {
  std::vector<std::string> out;
  const auto it = obj.find(key);
  if (it == obj.end() || !it->is_array()) return out;
  for (const auto& v : *it) {
    if (v.is_string()) out.push_back(v.get<std::string>());
  }
  return out;
}

std::optional<EntityKind> kind_for(const raw_json& obj) {
  const std::string type = obj.value("type", "");
  if (type == "x-mitre-tactic") return EntityKind::tactic;
  if (type == "attack-pattern") {
    return obj.value("x_mitre_is_subtechnique", false) ? EntityKind::subtechnique : EntityKind::technique;
  }
  if (type == "malware" || type == "tool") return EntityKind::software;
  if (type == "intrusion-set") return EntityKind::group;
  if (type == "campaign") return EntityKind::campaign;
  if (type == "course-of-action") return EntityKind::mitigation;
  if (type == "x-mitre-data-source") return EntityKind::detection_source;
  return std::nullopt;
}

}  // namespace

ParseResult parse_attack_bundle(std::string_view bundle, const AttackOptions& options) {
  raw_json doc;
  try {
    doc = raw_json::parse(bundle.begin(), bundle.end());
  } catch (const raw_json::parse_error& e) {
    throw ParseError(std::string("malformed STIX bundle: ") + e.what(), e.byte);
  }
  if (!doc.is_object() || doc.value("type", "") != "bundle") {
    throw ParseError("input is not a STIX bundle (missing type=bundle)");
  }

  ParseResult result;
  const auto objects_it = doc.find("objects");
  if (objects_it == doc.end() || !objects_it->is_array() || objects_it->empty()) return result;
  const auto& objects = *objects_it;

  // Pass 1: entity objects and the lookups relationships need.
  std::unordered_map<std::string, std::size_t> by_stix_id;  // stix id -> index into entities
  std::unordered_map<std::string, std::string> tactic_by_shortname;
  std::unordered_map<std::string, std::string> component_to_source;  // data component stix id -> data source stix id
  std::unordered_map<std::string, std::string> source_by_name;  // data source name -> DS id
  std::vector<std::size_t> pending_techniques;  // entity indices
  std::size_t index = 0;

  for (const auto& obj : objects) {
    const std::size_t position = index++;
    if (!obj.is_object()) {
      result.diagnostics.record_errors.push_back({"attack", position, "non-object entry in objects"});
      continue;
    }
    const std::string type = obj.value("type", "");
    if (type == "relationship") continue;
    if (type == "x-mitre-data-component") {
      if (!is_dropped(obj) && obj.contains("x_mitre_data_source_ref")) {
        component_to_source[obj.value("id", "")] = obj["x_mitre_data_source_ref"].get<std::string>();
      }
      continue;
    }
    const auto kind = kind_for(obj);
    if (!kind) {
      if (!kIgnoredTypes.count(type)) ++result.diagnostics.skipped_unknown;
      continue;
    }
    if (is_dropped(obj) || !in_domains(obj, options)) {
      ++result.diagnostics.dropped_deprecated;
      continue;
    }
    const std::string ext = external_id(obj);
    if (ext.empty()) {
      result.diagnostics.record_errors.push_back(
          {"attack", position, "object " + obj.value("id", "?") + " has no mitre-attack external id"});
      continue;
    }

    Entity e;
    e.id = canonical_attack_id(ext);
    e.kind = *kind;
    e.source = SourceCorpus::attack;
    e.name = obj.value("name", "");
    e.description = detail::strip_citations(obj.value("description", ""));
    e.fragment = obj.dump();

    if (auto platforms = string_list(obj, "x_mitre_platforms"); !platforms.empty()) {
      e.set_attr("platforms", std::move(platforms));
    }
    switch (*kind) {
      case EntityKind::tactic: {
        const std::string shortname = obj.value("x_mitre_shortname", "");
        if (!shortname.empty()) {
          e.set_attr("shortname", shortname);
          tactic_by_shortname[shortname] = e.id;
        }
        break;
      }
      case EntityKind::technique:
      case EntityKind::subtechnique: {
        if (obj.contains("x_mitre_detection") && obj["x_mitre_detection"].is_string()) {
          e.set_attr("detection", detail::strip_citations(obj["x_mitre_detection"].get<std::string>()));
        }
        if (auto ds = string_list(obj, "x_mitre_data_sources"); !ds.empty()) e.set_attr("data_sources", std::move(ds));
        for (const auto& ref : obj.value("external_references", raw_json::array())) {
          if (ref.value("source_name", "") == "capec" && ref.contains("external_id")) {
            e.add_reference(Relation::related_capec, canonical_capec_id(ref["external_id"].get<std::string>()));
          }
        }
        pending_techniques.push_back(result.entities.size());
        break;
      }
      case EntityKind::software:
        e.set_attr("software_type", type);
        if (auto aliases = string_list(obj, "x_mitre_aliases"); !aliases.empty()) {
          e.set_attr("aliases", std::move(aliases));
        }
        break;
      case EntityKind::group:
      case EntityKind::campaign:
        if (auto aliases = string_list(obj, "aliases"); !aliases.empty()) e.set_attr("aliases", std::move(aliases));
        break;
      case EntityKind::detection_source:
        source_by_name[e.name] = e.id;
        break;
      default:
        break;
    }
    by_stix_id[obj.value("id", "")] = result.entities.size();
    result.entities.push_back(std::move(e));
  }

  // Kill-chain phases become accomplishes references; resolved to tactic ids when the tactic is in the bundle.
  {
    std::unordered_map<std::size_t, const raw_json*> object_of_entity;
    for (const auto& obj : objects) {
      if (!obj.is_object()) continue;
      const auto it = by_stix_id.find(obj.value("id", ""));
      if (it != by_stix_id.end() && obj.value("type", "") != "relationship") object_of_entity[it->second] = &obj;
    }
    for (std::size_t ei : pending_techniques) {
      const raw_json& obj = *object_of_entity.at(ei);
      Entity& e = result.entities[ei];
      for (const auto& phase : obj.value("kill_chain_phases", raw_json::array())) {
        const std::string chain = phase.value("kill_chain_name", "");
        if (chain.rfind("mitre", 0) != 0) continue;
        const std::string shortname = phase.value("phase_name", "");
        const auto t = tactic_by_shortname.find(shortname);
        e.add_reference(Relation::accomplishes, t != tactic_by_shortname.end() ? t->second : shortname);
      }
      for (const auto& ds : e.attr_list("data_sources")) {
        const std::string source_name = trim(ds.substr(0, ds.find(':')));
        const auto s = source_by_name.find(source_name);
        if (s != source_by_name.end()) e.add_reference(Relation::detected_by, s->second);
      }
    }
  }

  // Pass 2: relationship objects become references on the semantic source side.
  std::size_t position = 0;
  for (const auto& obj : objects) {
    ++position;
    if (!obj.is_object() || obj.value("type", "") != "relationship") continue;
    if (is_dropped(obj)) continue;
    const std::string rel = obj.value("relationship_type", "");
    const std::string src = obj.value("source_ref", "");
    const std::string dst = obj.value("target_ref", "");
    const std::string note = detail::strip_citations(obj.value("description", ""));
    const auto dst_it = by_stix_id.find(dst);
    if (dst_it == by_stix_id.end()) continue;

    if (rel == "detects") {
      auto comp = component_to_source.find(src);
      std::string source_stix = comp != component_to_source.end() ? comp->second : src;
      const auto ds = by_stix_id.find(source_stix);
      if (ds == by_stix_id.end()) continue;
      result.entities[dst_it->second].add_reference(Relation::detected_by, result.entities[ds->second].id, note);
      continue;
    }
    const auto src_it = by_stix_id.find(src);
    if (src_it == by_stix_id.end()) continue;
    Entity& source = result.entities[src_it->second];
    Entity& target = result.entities[dst_it->second];
    if (rel == "uses") {
      source.add_reference(Relation::uses, target.id, note);
    } else if (rel == "mitigates") {
      target.add_reference(Relation::mitigated_by, source.id, note);
    } else if (rel == "subtechnique-of") {
      source.add_reference(Relation::subtechnique_of, target.id, note);
    }
  }

  for (auto& e : result.entities) e.seal();
  return result;
}

}  // namespace secforge
