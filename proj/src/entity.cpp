#include "secforge/entity.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <sstream>

#include "secforge/common.hpp"

namespace secforge {
namespace {

constexpr std::array<std::pair<EntityKind, std::string_view>, 14> kKindNames{{
    {EntityKind::tactic, "tactic"},
    {EntityKind::technique, "technique"},
    {EntityKind::subtechnique, "subtechnique"},
    {EntityKind::software, "software"},
    {EntityKind::group, "group"},
    {EntityKind::campaign, "campaign"},
    {EntityKind::mitigation, "mitigation"},
    {EntityKind::detection_source, "detection_source"},
    {EntityKind::capec, "capec"},
    {EntityKind::cwe, "cwe"},
    {EntityKind::cve, "cve"},
    {EntityKind::sigma_rule, "sigma_rule"},
    {EntityKind::detection_rule, "detection_rule"},
    {EntityKind::document, "document"},
}};

constexpr std::array<std::pair<Relation, std::string_view>, 12> kRelationNames{{
    {Relation::accomplishes, "accomplishes"},
    {Relation::subtechnique_of, "subtechnique-of"},
    {Relation::uses, "uses"},
    {Relation::detected_by, "detected-by"},
    {Relation::mitigated_by, "mitigated-by"},
    {Relation::related_capec, "related-capec"},
    {Relation::related_cwe, "related-cwe"},
    {Relation::related_weakness, "related-weakness"},
    {Relation::related_attack_pattern, "related-attack-pattern"},
    {Relation::maps_to_technique, "maps-to-technique"},
    {Relation::maps_to_tactic, "maps-to-tactic"},
    {Relation::observed_example, "observed-example"},
}};

constexpr std::array<std::pair<SourceCorpus, std::string_view>, 7> kSourceNames{{
    {SourceCorpus::attack, "attack"},
    {SourceCorpus::cwe, "cwe"},
    {SourceCorpus::capec, "capec"},
    {SourceCorpus::cve, "cve"},
    {SourceCorpus::sigma, "sigma"},
    {SourceCorpus::detection_rules, "detection_rules"},
    {SourceCorpus::documents, "documents"},
}};

template <class Table, class Enum>
std::string_view lookup_name(const Table& table, Enum value) {
  for (const auto& [v, name] : table) {
    if (v == value) return name;
  }
  return "unknown";
}

template <class Enum, class Table>
std::optional<Enum> lookup_value(const Table& table, std::string_view text) {
  for (const auto& [v, name] : table) {
    if (name == text) return v;
  }
  return std::nullopt;
}

std::string digits_after_prefix(std::string_view raw, std::string_view prefix) {
  std::string s = trim(raw);
  if (starts_with_icase(s, prefix)) s = s.substr(prefix.size());
  if (!s.empty() && (s.front() == '-' || s.front() == '_')) s.erase(s.begin());
  return s;
}

}  // namespace

std::string_view to_string(EntityKind kind) { return lookup_name(kKindNames, kind); }
std::string_view to_string(Relation relation) { return lookup_name(kRelationNames, relation); }
std::string_view to_string(SourceCorpus source) { return lookup_name(kSourceNames, source); }

std::optional<EntityKind> parse_kind(std::string_view text) { return lookup_value<EntityKind>(kKindNames, text); }
std::optional<Relation> parse_relation(std::string_view text) {
  return lookup_value<Relation>(kRelationNames, text);
}
std::optional<SourceCorpus> parse_source(std::string_view text) {
  return lookup_value<SourceCorpus>(kSourceNames, text);
}

const std::vector<EntityKind>& all_kinds() {
  static const std::vector<EntityKind> kinds = [] {
    std::vector<EntityKind> out;
    for (const auto& [k, _] : kKindNames) out.push_back(k);
    return out;
  }();
  return kinds;
}

const std::vector<Relation>& all_relations() {
  static const std::vector<Relation> relations = [] {
    std::vector<Relation> out;
    for (const auto& [r, _] : kRelationNames) out.push_back(r);
    return out;
  }();
  return relations;
}

std::string_view display_name(EntityKind kind) {
  switch (kind) {
    case EntityKind::tactic: return "tactic";
    case EntityKind::technique: return "technique";
    case EntityKind::subtechnique: return "sub-technique";
    case EntityKind::software: return "software";
    case EntityKind::group: return "threat group";
    case EntityKind::campaign: return "campaign";
    case EntityKind::mitigation: return "mitigation";
    case EntityKind::detection_source: return "data source";
    case EntityKind::capec: return "attack pattern";
    case EntityKind::cwe: return "weakness";
    case EntityKind::cve: return "vulnerability";
    case EntityKind::sigma_rule: return "Sigma rule";
    case EntityKind::detection_rule: return "detection rule";
    case EntityKind::document: return "document";
  }
  return "entity";
}

bool Entity::has_attr(std::string_view key) const {
  const auto it = attributes.find(std::string(key));
  if (it == attributes.end()) return false;
  if (const auto* s = std::get_if<std::string>(&it->second)) return !s->empty();
  return !std::get<std::vector<std::string>>(it->second).empty();
}

std::string Entity::attr_text(std::string_view key) const {
  const auto it = attributes.find(std::string(key));
  if (it == attributes.end()) return {};
  if (const auto* s = std::get_if<std::string>(&it->second)) return *s;
  return join(std::get<std::vector<std::string>>(it->second), ", ");
}

std::vector<std::string> Entity::attr_list(std::string_view key) const {
  const auto it = attributes.find(std::string(key));
  if (it == attributes.end()) return {};
  if (const auto* s = std::get_if<std::string>(&it->second)) {
    if (s->empty()) return {};
    return {*s};
  }
  return std::get<std::vector<std::string>>(it->second);
}

void Entity::set_attr(std::string key, std::string value) { attributes[std::move(key)] = std::move(value); }

void Entity::set_attr(std::string key, std::vector<std::string> values) {
  attributes[std::move(key)] = std::move(values);
}

void Entity::add_reference(Relation relation, std::string target, std::string note) {
  Reference ref{relation, std::move(target), std::move(note)};
  for (const auto& existing : references) {
    if (existing.relation == ref.relation && existing.target == ref.target) return;
  }
  references.push_back(std::move(ref));
}

void Entity::seal() { raw_digest = sha256_hex(fragment); }

const Entity* Corpus::find(std::string_view id) const {
  if (index_.size() != entities.size()) {
    for (const auto& e : entities) {
      if (e.id == id) return &e;
    }
    return nullptr;
  }
  const auto it = index_.find(std::string(id));
  return it == index_.end() ? nullptr : &entities[it->second];
}

void Corpus::reindex() {
  index_.clear();
  for (std::size_t i = 0; i < entities.size(); ++i) index_.emplace(entities[i].id, i);
}

json to_json(const Entity& e) {
  json attrs = json::object();
  for (const auto& [k, v] : e.attributes) {
    if (const auto* s = std::get_if<std::string>(&v)) {
      attrs[k] = *s;
    } else {
      attrs[k] = std::get<std::vector<std::string>>(v);
    }
  }
  json refs = json::array();
  for (const auto& r : e.references) {
    json ref = {{"relation", to_string(r.relation)}, {"target", r.target}};
    if (!r.note.empty()) ref["note"] = r.note;
    refs.push_back(std::move(ref));
  }
  return json{{"id", e.id},
              {"kind", to_string(e.kind)},
              {"name", e.name},
              {"description", e.description},
              {"attributes", std::move(attrs)},
              {"references", std::move(refs)},
              {"source", to_string(e.source)},
              {"raw_digest", e.raw_digest},
              {"fragment", e.fragment}};
}

Entity entity_from_json(const json& j) {
  Entity e;
  e.id = j.at("id").get<std::string>();
  const auto kind = parse_kind(j.at("kind").get<std::string>());
  if (!kind) throw ParseError("unknown entity kind for " + e.id);
  e.kind = *kind;
  e.name = j.value("name", "");
  e.description = j.value("description", "");
  if (j.contains("attributes")) {
    for (const auto& [k, v] : j.at("attributes").items()) {
      if (v.is_array()) {
        e.attributes[k] = v.get<std::vector<std::string>>();
      } else {
        e.attributes[k] = v.get<std::string>();
      }
    }
  }
  if (j.contains("references")) {
    for (const auto& r : j.at("references")) {
      const auto rel = parse_relation(r.at("relation").get<std::string>());
      if (!rel) throw ParseError("unknown relation in " + e.id);
      e.references.push_back({*rel, r.at("target").get<std::string>(), r.value("note", "")});
    }
  }
  const auto source = parse_source(j.value("source", "documents"));
  e.source = source.value_or(SourceCorpus::documents);
  e.fragment = j.value("fragment", "");
  e.raw_digest = j.value("raw_digest", "");
  return e;
}

std::string entities_to_jsonl(const std::vector<Entity>& entities) {
  std::string out;
  for (const auto& e : entities) {
    out += to_json(e).dump();
    out.push_back('\n');
  }
  return out;
}

std::vector<Entity> entities_from_jsonl(std::string_view text) {
  std::vector<Entity> out;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    out.push_back(entity_from_json(json::parse(line)));
  }
  return out;
}

std::string canonical_attack_id(std::string_view raw) {
  std::string s = trim(raw);
  for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

std::string canonical_cwe_id(std::string_view raw) { return "CWE-" + digits_after_prefix(raw, "CWE"); }

std::string canonical_capec_id(std::string_view raw) { return "CAPEC-" + digits_after_prefix(raw, "CAPEC"); }

std::string canonical_cve_id(std::string_view raw) {
  std::string s = trim(raw);
  for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace secforge
