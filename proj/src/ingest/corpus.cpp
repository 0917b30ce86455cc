#include <exception>
#include <unordered_set>

#include "secforge/common.hpp"
#include "secforge/ingest.hpp"

namespace secforge {

void ParseDiagnostics::merge(const ParseDiagnostics& other) {
  skipped_unknown += other.skipped_unknown;
  dropped_deprecated += other.dropped_deprecated;
  record_errors.insert(record_errors.end(), other.record_errors.begin(), other.record_errors.end());
}

std::string_view to_string(CorpusFormat format) {
  switch (format) {
    case CorpusFormat::attack_stix: return "attack_stix";
    case CorpusFormat::cwe_xml: return "cwe_xml";
    case CorpusFormat::capec_xml: return "capec_xml";
    case CorpusFormat::cve_json: return "cve_json";
    case CorpusFormat::sigma_dir: return "sigma_dir";
    case CorpusFormat::detection_rules_jsonl: return "detection_rules_jsonl";
    case CorpusFormat::documents_jsonl: return "documents_jsonl";
  }
  return "unknown";
}

namespace {

struct Loaded {
  ParseResult result;
  std::string digest;
};

Loaded load_one(const CorpusSource& source) {
  Loaded out;
  if (source.format == CorpusFormat::sigma_dir) {
    out.result = parse_sigma_rules(source.path);
    // Directory digest: over the per-entity fragment digests, in parse order.
    std::string acc;
    for (const auto& e : out.result.entities) acc += e.raw_digest;
    out.digest = sha256_hex(acc);
    return out;
  }
  const std::string bytes = read_file(source.path.string());
  out.digest = sha256_hex(bytes);
  switch (source.format) {
    case CorpusFormat::attack_stix: out.result = parse_attack_bundle(bytes, source.attack); break;
    case CorpusFormat::cwe_xml: out.result = parse_cwe_xml(bytes); break;
    case CorpusFormat::capec_xml: out.result = parse_capec_xml(bytes); break;
    case CorpusFormat::cve_json: out.result = parse_cve_feed(bytes); break;
    case CorpusFormat::detection_rules_jsonl: out.result = parse_detection_rules(bytes, source.rule_schema); break;
    case CorpusFormat::documents_jsonl: out.result = parse_documents(bytes, source.document_category); break;
    case CorpusFormat::sigma_dir: break;
  }
  return out;
}

}  // namespace

Corpus load_corpus(const std::vector<CorpusSource>& sources, std::uint64_t seed, ParseDiagnostics* diagnostics) {
  std::vector<Loaded> loaded(sources.size());
  std::vector<std::exception_ptr> failures(sources.size());

#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(sources.size()); ++i) {
    try {
      loaded[i] = load_one(sources[i]);
    } catch (...) {
      failures[i] = std::current_exception();
    }
  }
  for (std::size_t i = 0; i < sources.size(); ++i) {
    if (!failures[i]) continue;
    try {
      std::rethrow_exception(failures[i]);
    } catch (const Error& e) {
      throw Error(sources[i].path.string() + ": " + e.what());
    }
  }

  Corpus corpus;
  corpus.load_seed = seed;
  ParseDiagnostics merged;
  std::unordered_set<std::string> seen;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    auto& part = loaded[i];
    merged.merge(part.result.diagnostics);
    std::size_t kept = 0;
    for (auto& e : part.result.entities) {
      if (!seen.insert(e.id).second) {
        merged.record_errors.push_back({sources[i].path.string(), 0, "duplicate id " + e.id + " ignored"});
        continue;
      }
      corpus.entities.push_back(std::move(e));
      ++kept;
    }
    corpus.source_manifest.push_back(
        {sources[i].path.string(), std::string(to_string(sources[i].format)), part.digest, kept});
  }
  corpus.reindex();
  if (diagnostics) diagnostics->merge(merged);
  return corpus;
}

}  // namespace secforge
