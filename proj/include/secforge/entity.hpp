#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include <json.hpp>

namespace secforge {

using json = nlohmann::ordered_json;

enum class EntityKind {
  tactic,
  technique,
  subtechnique,
  software,
  group,
  campaign,
  mitigation,
  detection_source,
  capec,
  cwe,
  cve,
  sigma_rule,
  detection_rule,
  document,
};

// Closed relation vocabulary shared by parsers and the graph.
enum class Relation {
  accomplishes,
  subtechnique_of,
  uses,
  detected_by,
  mitigated_by,
  related_capec,
  related_cwe,
  related_weakness,
  related_attack_pattern,
  maps_to_technique,
  maps_to_tactic,
  observed_example,
};

enum class SourceCorpus { attack, cwe, capec, cve, sigma, detection_rules, documents };

std::string_view to_string(EntityKind kind);
std::string_view to_string(Relation relation);
std::string_view to_string(SourceCorpus source);
std::optional<EntityKind> parse_kind(std::string_view text);
std::optional<Relation> parse_relation(std::string_view text);
std::optional<SourceCorpus> parse_source(std::string_view text);

const std::vector<EntityKind>& all_kinds();
const std::vector<Relation>& all_relations();

// Human label used in rendered text ("sub-technique", "data source", ...).
std::string_view display_name(EntityKind kind);

using AttributeValue = std::variant<std::string, std::vector<std::string>>;

struct Reference {
  Relation relation;
  std::string target;
  std::string note;  // relationship description when the source provides one

  friend bool operator==(const Reference&, const Reference&) = default;
};

struct Entity {
  std::string id;
  EntityKind kind = EntityKind::document;
  std::string name;
  std::string description;
  std::map<std::string, AttributeValue> attributes;
  std::vector<Reference> references;
  SourceCorpus source = SourceCorpus::documents;
  std::string fragment;  // serialized source fragment the entity was parsed from
  std::string raw_digest;

  bool has_attr(std::string_view key) const;
  // Scalar attribute, or list joined with ", ". Empty when absent.
  std::string attr_text(std::string_view key) const;
  std::vector<std::string> attr_list(std::string_view key) const;

  void set_attr(std::string key, std::string value);
  void set_attr(std::string key, std::vector<std::string> values);
  void add_reference(Relation relation, std::string target, std::string note = {});
  void seal();  // computes raw_digest from fragment

  friend bool operator==(const Entity&, const Entity&) = default;
};

struct ManifestEntry {
  std::string path;
  std::string format;
  std::string digest;
  std::size_t entity_count = 0;
};

struct Corpus {
  std::vector<Entity> entities;
  std::vector<ManifestEntry> source_manifest;
  std::uint64_t load_seed = 0;

  const Entity* find(std::string_view id) const;
  void reindex();

 private:
  std::unordered_map<std::string, std::size_t> index_;
};

json to_json(const Entity& e);
Entity entity_from_json(const json& j);

std::string entities_to_jsonl(const std::vector<Entity>& entities);
std::vector<Entity> entities_from_jsonl(std::string_view text);

// Canonical spellings: "T1055.001", "TA0002", "CWE-79", "CAPEC-66", "CVE-2021-44228".
std::string canonical_attack_id(std::string_view raw);
std::string canonical_cwe_id(std::string_view raw);
std::string canonical_capec_id(std::string_view raw);
std::string canonical_cve_id(std::string_view raw);

}  // namespace secforge
