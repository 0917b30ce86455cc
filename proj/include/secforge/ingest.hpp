#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "secforge/entity.hpp"

namespace secforge {

/// A problem confined to one record; the record is skipped and parsing continues.
struct RecordError {
  std::string origin;  // file name or format tag
  std::size_t position = 0;  // line number (JSONL) or element index
  std::string message;
};

struct ParseDiagnostics {
  std::size_t skipped_unknown = 0;  // unknown object types (STIX)
  std::size_t dropped_deprecated = 0;  // revoked / deprecated / rejected records
  std::vector<RecordError> record_errors;

  void merge(const ParseDiagnostics& other);
};

struct ParseResult {
  std::vector<Entity> entities;
  ParseDiagnostics diagnostics;
};

struct AttackOptions {
  // Objects whose x_mitre_domains do not intersect this list are dropped.
  // Objects without the field are kept.
  std::vector<std::string> domains{"enterprise-attack"};
};

ParseResult parse_attack_bundle(std::string_view bundle, const AttackOptions& options = {});
ParseResult parse_cwe_xml(std::string_view doc);
ParseResult parse_capec_xml(std::string_view doc);

// Accepts NVD JSON 1.1 feeds ("CVE_Items") and NVD API 2.0 pages ("vulnerabilities").
ParseResult parse_cve_feed(std::string_view doc);

// One YAML stream (possibly multi-document). `origin` labels errors.
ParseResult parse_sigma_text(std::string_view text, std::string_view origin);

// Recursively reads *.yml / *.yaml under dir. A file that fails to parse is
// reported and the remaining files continue.
ParseResult parse_sigma_rules(const std::filesystem::path& dir);

/// Caller field names for the generic detection-rule JSONL format.
struct DetectionRuleSchema {
  std::string id = "id";
  std::string name = "name";
  std::string description = "description";
  std::string pattern = "pattern";
  std::string ttp_ids = "ttp_ids";
  std::string risk_level = "risk_level";
};

ParseResult parse_detection_rules(std::string_view jsonl, const DetectionRuleSchema& schema = {});

// Documents as JSONL {id, title, text, category?}; category defaults to `default_category`.
ParseResult parse_documents(std::string_view jsonl, std::string_view default_category);

enum class CorpusFormat { attack_stix, cwe_xml, capec_xml, cve_json, sigma_dir, detection_rules_jsonl, documents_jsonl };

std::string_view to_string(CorpusFormat format);

struct CorpusSource {
  std::filesystem::path path;
  CorpusFormat format;
  DetectionRuleSchema rule_schema{};
  std::string document_category = "wiki";
  AttackOptions attack{};
};

/// Parses all sources (in parallel) and assembles them in source order.
/// Duplicate ids across sources keep the first occurrence and are reported.
Corpus load_corpus(const std::vector<CorpusSource>& sources, std::uint64_t seed,
                   ParseDiagnostics* diagnostics = nullptr);

// The eight canonical technical impacts, lower-cased.
const std::vector<std::string>& technical_impact_vocabulary();

// Maps a raw CWE/CAPEC impact string onto the canonical vocabulary; empty if it has no counterpart.
std::string canonical_technical_impact(std::string_view raw);

}  // namespace secforge
