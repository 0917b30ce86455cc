#include <algorithm>

#include "secforge/common.hpp"
#include "secforge/ingest.hpp"

namespace secforge {
namespace {

using raw_json = nlohmann::json;

void push_unique(std::vector<std::string>& list, std::string value) {
  if (value.empty()) return;
  if (std::find(list.begin(), list.end(), value) == list.end()) list.push_back(std::move(value));
}

// "cpe:2.3:a:apache:log4j:2.14:..." -> "apache log4j"
std::string product_from_cpe(const std::string& cpe) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (start <= cpe.size()) {
    const auto colon = cpe.find(':', start);
    parts.push_back(cpe.substr(start, colon == std::string::npos ? std::string::npos : colon - start));
    if (colon == std::string::npos) break;
    start = colon + 1;
  }
  if (parts.size() < 5) return {};
  std::string vendor = parts[3];
  std::string product = parts[4];
  std::replace(vendor.begin(), vendor.end(), '_', ' ');
  std::replace(product.begin(), product.end(), '_', ' ');
  return vendor + " " + product;
}

void collect_cpes(const raw_json& node, std::vector<std::string>& products) {
  if (node.is_object()) {
    for (const char* key : {"cpe23Uri", "criteria"}) {
      if (node.contains(key) && node[key].is_string() && node.value("vulnerable", true)) {
        push_unique(products, product_from_cpe(node[key].get<std::string>()));
      }
    }
    for (const auto& [_, v] : node.items()) collect_cpes(v, products);
  } else if (node.is_array()) {
    for (const auto& v : node) collect_cpes(v, products);
  }
}

void add_cwe_refs(Entity& e, const std::string& value) {
  if (!starts_with_icase(value, "CWE-")) return;  // skips NVD-CWE-Other / NVD-CWE-noinfo
  e.add_reference(Relation::related_cwe, canonical_cwe_id(value));
}

std::string score_text(const raw_json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

// NVD JSON 1.1 item.
std::optional<Entity> from_legacy_item(const raw_json& item, ParseDiagnostics& diag, std::size_t position) {
  const auto& cve = item.value("cve", raw_json::object());
  const std::string id = cve.value("CVE_data_meta", raw_json::object()).value("ID", "");
  if (id.empty()) {
    diag.record_errors.push_back({"cve", position, "CVE item without ID"});
    return std::nullopt;
  }
  Entity e;
  e.id = canonical_cve_id(id);
  e.kind = EntityKind::cve;
  e.source = SourceCorpus::cve;
  e.name = e.id;
  for (const auto& d : cve.value("description", raw_json::object()).value("description_data", raw_json::array())) {
    if (d.value("lang", "en") == "en") {
      e.description = collapse_whitespace(d.value("value", ""));
      break;
    }
  }
  if (e.description.rfind("** REJECT **", 0) == 0) {
    ++diag.dropped_deprecated;
    return std::nullopt;
  }
  for (const auto& pt : cve.value("problemtype", raw_json::object()).value("problemtype_data", raw_json::array())) {
    for (const auto& d : pt.value("description", raw_json::array())) add_cwe_refs(e, d.value("value", ""));
  }
  const auto& impact = item.value("impact", raw_json::object());
  if (impact.contains("baseMetricV3")) {
    const auto& v3 = impact["baseMetricV3"].value("cvssV3", raw_json::object());
    if (v3.contains("baseScore")) e.set_attr("cvss_score", score_text(v3["baseScore"]));
    if (v3.contains("baseSeverity")) e.set_attr("severity", to_lower(v3["baseSeverity"].get<std::string>()));
  } else if (impact.contains("baseMetricV2")) {
    const auto& v2 = impact["baseMetricV2"].value("cvssV2", raw_json::object());
    if (v2.contains("baseScore")) e.set_attr("cvss_score", score_text(v2["baseScore"]));
  }
  std::vector<std::string> products;
  if (item.contains("configurations")) collect_cpes(item["configurations"], products);
  if (!products.empty()) e.set_attr("affected_products", products);
  e.fragment = item.dump();
  return e;
}

// NVD API 2.0 "vulnerabilities" entry.
std::optional<Entity> from_api_item(const raw_json& item, ParseDiagnostics& diag, std::size_t position) {
  const auto& cve = item.value("cve", raw_json::object());
  const std::string id = cve.value("id", "");
  if (id.empty()) {
    diag.record_errors.push_back({"cve", position, "CVE record without id"});
    return std::nullopt;
  }
  if (to_lower(cve.value("vulnStatus", "")) == "rejected") {
    ++diag.dropped_deprecated;
    return std::nullopt;
  }
  Entity e;
  e.id = canonical_cve_id(id);
  e.kind = EntityKind::cve;
  e.source = SourceCorpus::cve;
  e.name = e.id;
  for (const auto& d : cve.value("descriptions", raw_json::array())) {
    if (d.value("lang", "en") == "en") {
      e.description = collapse_whitespace(d.value("value", ""));
      break;
    }
  }
  for (const auto& w : cve.value("weaknesses", raw_json::array())) {
    for (const auto& d : w.value("description", raw_json::array())) add_cwe_refs(e, d.value("value", ""));
  }
  const auto& metrics = cve.value("metrics", raw_json::object());
  for (const char* key : {"cvssMetricV40", "cvssMetricV31", "cvssMetricV30", "cvssMetricV2"}) {
    if (!metrics.contains(key) || metrics[key].empty()) continue;
    const auto& data = metrics[key][0].value("cvssData", raw_json::object());
    if (data.contains("baseScore")) e.set_attr("cvss_score", score_text(data["baseScore"]));
    if (data.contains("baseSeverity")) e.set_attr("severity", to_lower(data["baseSeverity"].get<std::string>()));
    break;
  }
  std::vector<std::string> products;
  if (cve.contains("configurations")) collect_cpes(cve["configurations"], products);
  if (!products.empty()) e.set_attr("affected_products", products);
  e.fragment = item.dump();
  return e;
}

}  // namespace

ParseResult parse_cve_feed(std::string_view doc) {
  raw_json j;
  try {
    j = raw_json::parse(doc.begin(), doc.end());
  } catch (const raw_json::parse_error& e) {
    throw ParseError(std::string("malformed CVE feed: ") + e.what(), e.byte);
  }
  ParseResult result;
  if (!j.is_object()) throw ParseError("CVE feed root must be an object");

  std::size_t position = 0;
  if (j.contains("CVE_Items")) {
    for (const auto& item : j["CVE_Items"]) {
      if (auto e = from_legacy_item(item, result.diagnostics, position++)) result.entities.push_back(std::move(*e));
    }
  } else if (j.contains("vulnerabilities")) {
    for (const auto& item : j["vulnerabilities"]) {
      if (auto e = from_api_item(item, result.diagnostics, position++)) result.entities.push_back(std::move(*e));
    }
  } else {
    throw ParseError("CVE feed has neither CVE_Items nor vulnerabilities");
  }
  for (auto& e : result.entities) e.seal();
  return result;
}

}  // namespace secforge
