#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "secforge/ingest.hpp"
#include "toy.hpp"

using namespace secforge;

namespace {

std::string tactic_obj(const std::string& stix, const std::string& id, const std::string& shortname) {
  return R"({"type":"x-mitre-tactic","id":")" + stix + R"(","name":")" + shortname +
         R"(","description":"Tactic.","x_mitre_shortname":")" + shortname +
         R"(","external_references":[{"source_name":"mitre-attack","external_id":")" + id + R"("}]})";
}

std::string bundle(const std::string& objects) { return R"({"type":"bundle","id":"bundle--1","objects":[)" + objects + "]}"; }

const Entity& by_id(const ParseResult& r, const std::string& id) {
  for (const auto& e : r.entities) {
    if (e.id == id) return e;
  }
  FAIL("missing entity " << id);
  throw std::logic_error("unreachable");
}

std::string cwe_doc(const std::string& weaknesses, const std::string& categories = {}) {
  return R"(<?xml version="1.0"?><Weakness_Catalog Name="CWE"><Weaknesses>)" + weaknesses + "</Weaknesses>" +
         (categories.empty() ? "" : "<Categories>" + categories + "</Categories>") + "</Weakness_Catalog>";
}

std::string capec_doc(const std::string& patterns) {
  return R"(<?xml version="1.0"?><Attack_Pattern_Catalog><Attack_Patterns>)" + patterns +
         "</Attack_Patterns></Attack_Pattern_Catalog>";
}

std::string nvd_item(const std::string& id, const std::string& desc, const std::string& extra = {}) {
  return R"({"cve":{"CVE_data_meta":{"ID":")" + id +
         R"("},"problemtype":{"problemtype_data":[{"description":[{"lang":"en","value":"CWE-79"}]}]},"description":{"description_data":[{"lang":"en","value":")" +
         desc + R"("}]}},"impact":{)" + extra + "}}";
}

}  // namespace

TEST_CASE("attack: empty bundle yields nothing") {
  CHECK(parse_attack_bundle(bundle("")).entities.empty());
}

TEST_CASE("attack: kill-chain phase becomes an accomplishes reference") {
  const std::string tech =
      R"({"type":"attack-pattern","id":"attack-pattern--1","name":"Command and Scripting Interpreter","description":"Run commands.",
          "kill_chain_phases":[{"kill_chain_name":"mitre-attack","phase_name":"execution"}],
          "external_references":[{"source_name":"mitre-attack","external_id":"T1059"}]})";
  const auto r = parse_attack_bundle(bundle(tactic_obj("x-mitre-tactic--1", "TA0002", "execution") + "," + tech));
  REQUIRE(r.entities.size() == 2);
  const auto& t = by_id(r, "T1059");
  CHECK(t.kind == EntityKind::technique);
  REQUIRE(t.references.size() == 1);
  CHECK(t.references[0].relation == Relation::accomplishes);
  CHECK(t.references[0].target == "TA0002");
  CHECK(by_id(r, "TA0002").kind == EntityKind::tactic);
}

TEST_CASE("attack: malformed JSON reports a byte offset") {
  try {
    parse_attack_bundle(R"({"type":"bundle","objects":[{"type": })");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.byte_offset().has_value());
  }
}

TEST_CASE("attack: unknown types are counted, revoked and deprecated dropped") {
  const std::string objs = tactic_obj("x-mitre-tactic--1", "TA0001", "initial-access") +
                           R"(,{"type":"x-unknown-thing","id":"x--1"},
      {"type":"attack-pattern","id":"attack-pattern--9","name":"Old","revoked":true,
       "external_references":[{"source_name":"mitre-attack","external_id":"T1086"}]},
      {"type":"attack-pattern","id":"attack-pattern--8","name":"Older","x_mitre_deprecated":true,
       "external_references":[{"source_name":"mitre-attack","external_id":"T1064"}]})";
  const auto r = parse_attack_bundle(bundle(objs));
  CHECK(r.entities.size() == 1);
  CHECK(r.diagnostics.skipped_unknown == 1);
  CHECK(r.diagnostics.dropped_deprecated == 2);
}

TEST_CASE("attack: relationships land on the semantic source side") {
  const auto text = read_file((toy::mini_dir() / "attack.json").string());
  const auto r = parse_attack_bundle(text);
  const auto& mimikatz = by_id(r, "S0002");
  bool uses = false;
  for (const auto& ref : mimikatz.references) uses |= ref.relation == Relation::uses;
  CHECK(uses);
  const auto& sub = by_id(r, "T1059.001");
  CHECK(sub.kind == EntityKind::subtechnique);
  bool parent = false;
  for (const auto& ref : sub.references) parent |= ref.relation == Relation::subtechnique_of && ref.target == "T1059";
  CHECK(parent);
  std::size_t tactics = 0;
  for (const auto& e : r.entities) tactics += e.kind == EntityKind::tactic;
  CHECK(tactics == 4);
  CHECK(parse_attack_bundle(text).entities == r.entities);
}

TEST_CASE("cwe: consequences map onto the impact vocabulary") {
  const auto r = parse_cwe_xml(cwe_doc(R"(
    <Weakness ID="200" Name="Exposure" Abstraction="Class" Status="Draft">
      <Description>Exposes information.</Description>
      <Common_Consequences><Consequence><Scope>Confidentiality</Scope><Impact>Read Data</Impact></Consequence></Common_Consequences>
    </Weakness>)"));
  REQUIRE(r.entities.size() == 1);
  const auto& e = r.entities[0];
  CHECK(e.id == "CWE-200");
  CHECK(e.attr_list("technical_impacts") == std::vector<std::string>{"read data"});
  for (const auto& ref : e.references) CHECK(ref.relation != Relation::related_capec);
}

TEST_CASE("cwe: categories are not weaknesses; missing id is a record error") {
  const auto r = parse_cwe_xml(cwe_doc(R"(
    <Weakness ID="1" Name="A" Status="Draft"><Description>a</Description></Weakness>
    <Weakness ID="2" Name="B" Status="Draft"><Description>b</Description>
      <Related_Attack_Patterns><Related_Attack_Pattern CAPEC_ID="66"/></Related_Attack_Patterns></Weakness>
    <Weakness Name="no id"><Description>c</Description></Weakness>)",
                                       R"(<Category ID="3" Name="Cat" Status="Draft"><Summary>s</Summary></Category>)"));
  CHECK(r.entities.size() == 2);
  CHECK(r.diagnostics.record_errors.size() == 1);
  REQUIRE(r.entities[1].references.size() == 1);
  CHECK(r.entities[1].references[0].target == "CAPEC-66");
  CHECK_THROWS_AS(parse_cwe_xml("<Weakness_Catalog><Weaknesses>"), ParseError);
}

TEST_CASE("capec: severity is lower-cased and deprecated patterns dropped") {
  const auto r = parse_capec_xml(capec_doc(R"(
    <Attack_Pattern ID="66" Name="SQL Injection" Status="Stable">
      <Description>Inject SQL.</Description><Typical_Severity>High</Typical_Severity>
      <Related_Weaknesses></Related_Weaknesses>
    </Attack_Pattern>
    <Attack_Pattern ID="1000" Name="Gone" Status="Deprecated"><Description>x</Description></Attack_Pattern>)"));
  REQUIRE(r.entities.size() == 1);
  CHECK(r.entities[0].attr_text("severity") == "high");
  CHECK(r.entities[0].references.empty());
  CHECK(r.diagnostics.dropped_deprecated == 1);
}

TEST_CASE("cve: score, weakness link, empty description and rejected records") {
  const std::string v3 = R"("baseMetricV3":{"cvssV3":{"baseScore":9.8,"baseSeverity":"CRITICAL"}})";
  std::string feed = R"({"CVE_Items":[)" + nvd_item("CVE-2021-0001", "First.", v3) + "," +
                     nvd_item("CVE-2021-0002", "") + "," + nvd_item("CVE-2021-0003", "Third.") + "," +
                     nvd_item("CVE-2021-0004", "Fourth.") + "," +
                     nvd_item("CVE-2021-0005", "** REJECT ** DO NOT USE THIS CANDIDATE NUMBER.") + "]}";
  const auto r = parse_cve_feed(feed);
  REQUIRE(r.entities.size() == 4);
  const auto& first = by_id(r, "CVE-2021-0001");
  CHECK(first.attr_text("cvss_score") == "9.8");
  REQUIRE(first.references.size() == 1);
  CHECK(first.references[0].relation == Relation::related_cwe);
  CHECK(first.references[0].target == "CWE-79");
  CHECK(by_id(r, "CVE-2021-0002").description.empty());
}

TEST_CASE("cve: API 2.0 page") {
  const auto r = parse_cve_feed(R"({"vulnerabilities":[{"cve":{"id":"CVE-2023-1","vulnStatus":"Analyzed",
    "descriptions":[{"lang":"en","value":"Bug."}],
    "weaknesses":[{"description":[{"lang":"en","value":"CWE-787"}]}],
    "metrics":{"cvssMetricV31":[{"cvssData":{"baseScore":7.5,"baseSeverity":"HIGH"}}]}}},
    {"cve":{"id":"CVE-2023-2","vulnStatus":"Rejected","descriptions":[{"lang":"en","value":"x"}]}}]})");
  REQUIRE(r.entities.size() == 1);
  CHECK(r.entities[0].attr_text("cvss_score") == "7.5");
  CHECK(r.entities[0].references.at(0).target == "CWE-787");
}

TEST_CASE("sigma: attack tags become technique and tactic references") {
  const auto r = parse_sigma_text(R"(title: Encoded PowerShell
id: 11111111-2222-3333-4444-555555555555
description: Detects encoded commands.
tags:
  - attack.t1059
  - attack.execution
logsource:
  product: windows
  category: process_creation
detection:
  sel:
    CommandLine|contains: ' -enc '
  condition: sel
level: high
)",
                                  "inline");
  REQUIRE(r.entities.size() == 1);
  const auto& refs = r.entities[0].references;
  REQUIRE(refs.size() == 2);
  CHECK(refs[0] == Reference{Relation::maps_to_technique, "T1059", {}});
  CHECK(refs[1] == Reference{Relation::maps_to_tactic, "execution", {}});
  CHECK(r.entities[0].kind == EntityKind::sigma_rule);
}

TEST_CASE("sigma: missing detection is a record error; bad files do not stop the directory") {
  toy::TempDir dir("sigma");
  std::filesystem::create_directories(dir.path() / "sub");
  std::ofstream(dir.path() / "good.yml") << "title: ok\nid: a\ndetection:\n  sel:\n    x: 1\n  condition: sel\n";
  std::ofstream(dir.path() / "sub" / "nodet.yaml") << "title: no detection\nid: b\n";
  std::ofstream(dir.path() / "broken.yml") << "title: [unclosed\n";
  std::ofstream(dir.path() / "readme.txt") << "not yaml";
  const auto r = parse_sigma_rules(dir.path());
  CHECK(r.entities.size() == 1);
  CHECK(r.diagnostics.record_errors.size() == 2);

  toy::TempDir empty("sigma-empty");
  CHECK(parse_sigma_rules(empty.path()).entities.empty());
}

TEST_CASE("detection rules: caller schema and line-numbered errors") {
  DetectionRuleSchema schema;
  schema.id = "rid";
  schema.description = "desc";
  schema.ttp_ids = "ttp";
  const auto r = parse_detection_rules(R"({"rid":"R1","desc":"Brute force","ttp":["T1110"]}
{"desc":"no id"}
not json
)",
                                       schema);
  REQUIRE(r.entities.size() == 1);
  CHECK(r.entities[0].id == "R1");
  REQUIRE(r.entities[0].references.size() == 1);
  CHECK(r.entities[0].references[0].relation == Relation::maps_to_technique);
  CHECK(r.entities[0].references[0].target == "T1110");
  REQUIRE(r.diagnostics.record_errors.size() == 2);
  CHECK(r.diagnostics.record_errors[0].position == 2);
  CHECK(r.diagnostics.record_errors[1].position == 3);
  CHECK(parse_detection_rules("", schema).entities.empty());
}

TEST_CASE("detection rules: a 400-line corpus yields 400 entities") {
  std::string text;
  const char* ttps[] = {"T1110", "T1059.001", "T1003", "T1566"};
  for (int i = 0; i < 400; ++i) {
    text += R"({"id":"SIEM-)" + std::to_string(i) + R"(","name":"Rule )" + std::to_string(i) +
            R"(","description":"Correlation rule.","pattern":"event.count > )" + std::to_string(i) +
            R"(","ttp_ids":[")" + ttps[i % 4] + R"("],"risk_level":"Medium"})" + "\n";
  }
  const auto r = parse_detection_rules(text);
  CHECK(r.entities.size() == 400);
  CHECK(r.diagnostics.record_errors.empty());
  CHECK(r.entities[7].attr_text("risk_level") == "medium");
}

TEST_CASE("documents default their category") {
  const auto r = parse_documents(R"({"id":"D1","title":"t","text":"body"}
{"id":"D2","title":"t","text":"body","category":"Interview"})",
                                 "wiki");
  REQUIRE(r.entities.size() == 2);
  CHECK(r.entities[0].attr_text("category") == "wiki");
  CHECK(r.entities[1].attr_text("category") == "interview");
}

TEST_CASE("impact canonicalisation") {
  CHECK(canonical_technical_impact("Read Application Data") == "read data");
  CHECK(canonical_technical_impact("DoS: Crash, Exit, or Restart") == "dos: unreliable execution");
  CHECK(canonical_technical_impact("Varies by Context").empty());
  CHECK(technical_impact_vocabulary().size() == 8);
}

TEST_CASE("load_corpus assembles the miniature fixture deterministically") {
  ParseDiagnostics diag;
  const Corpus a = toy::mini_corpus();
  const Corpus b = load_corpus(toy::mini_sources(), 1, &diag);
  CHECK(a.entities == b.entities);
  CHECK(a.entities.size() == 51);
  CHECK(a.source_manifest.size() == 7);
  CHECK(a.find("T1059") != nullptr);
  CHECK(a.find("CVE-1999-0000") == nullptr);
  CHECK(diag.dropped_deprecated >= 4);
}
