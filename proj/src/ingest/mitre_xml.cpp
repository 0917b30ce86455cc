#include <algorithm>
#include <sstream>

#include <boost/property_tree/xml_parser.hpp>

#include "ingest_util.hpp"
#include "secforge/common.hpp"
#include "secforge/ingest.hpp"

namespace secforge {
namespace detail {

std::string strip_citations(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  std::size_t i = 0;
  constexpr std::string_view kMarker = "(Citation:";
  while (i < text.size()) {
    if (text.substr(i, kMarker.size()) == kMarker) {
      const auto close = text.find(')', i);
      if (close == std::string_view::npos) break;
      i = close + 1;
      continue;
    }
    out.push_back(text[i++]);
  }
  return collapse_whitespace(out);
}

Ptree read_xml_tree(std::string_view doc) {
  Ptree tree;
  std::istringstream in{std::string(doc)};
  try {
    boost::property_tree::read_xml(in, tree, boost::property_tree::xml_parser::no_comments);
  } catch (const boost::property_tree::xml_parser_error& e) {
    throw ParseError("malformed XML: " + e.message() + " at line " + std::to_string(e.line()));
  }
  return tree;
}

namespace {
void collect_text(const Ptree& node, std::string& out) {
  const std::string own = trim(node.data());
  if (!own.empty()) {
    if (!out.empty()) out.push_back(' ');
    out += own;
  }
  for (const auto& [tag, child] : node) {
    if (tag == "<xmlattr>" || tag == "<xmlcomment>") continue;
    collect_text(child, out);
  }
}
}  // namespace

std::string xml_text(const Ptree& node) {
  std::string out;
  collect_text(node, out);
  return collapse_whitespace(out);
}

std::string xml_attr(const Ptree& node, const char* name) {
  return node.get<std::string>(std::string("<xmlattr>.") + name, "");
}

std::string xml_fragment(const std::string& tag, const Ptree& node) {
  Ptree wrapper;
  wrapper.add_child(tag, node);
  std::ostringstream out;
  boost::property_tree::write_xml(out, wrapper);
  return out.str();
}

}  // namespace detail

namespace {

using detail::Ptree;
using detail::xml_attr;
using detail::xml_text;

const Ptree* child(const Ptree& node, const char* tag) {
  const auto it = node.find(tag);
  return it == node.not_found() ? nullptr : &it->second;
}

template <class Fn>
void for_each_child(const Ptree* node, const char* tag, Fn&& fn) {
  if (!node) return;
  for (const auto& [name, c] : *node) {
    if (name == tag) fn(c);
  }
}

std::string text_of(const Ptree& node, const char* tag) {
  const Ptree* c = child(node, tag);
  return c ? xml_text(*c) : std::string{};
}

void push_unique(std::vector<std::string>& list, std::string value) {
  if (value.empty()) return;
  if (std::find(list.begin(), list.end(), value) == list.end()) list.push_back(std::move(value));
}

bool is_retired_status(const std::string& status) { return status == "Deprecated" || status == "Obsolete"; }

// Canonical impacts present among the raw impact strings, in vocabulary order.
std::vector<std::string> canonical_impacts(const std::vector<std::string>& raw) {
  std::vector<std::string> found;
  for (const auto& r : raw) push_unique(found, canonical_technical_impact(r));
  std::vector<std::string> ordered;
  for (const auto& v : technical_impact_vocabulary()) {
    if (std::find(found.begin(), found.end(), v) != found.end()) ordered.push_back(v);
  }
  return ordered;
}

const Ptree& catalog_root(const Ptree& tree, const char* root_tag) {
  const Ptree* root = child(tree, root_tag);
  if (!root) throw ParseError(std::string("missing root element ") + root_tag);
  return *root;
}

}  // namespace

const std::vector<std::string>& technical_impact_vocabulary() {
  static const std::vector<std::string> vocab = {
      "modify data",
      "read data",
      "dos: unreliable execution",
      "dos: resource consumption",
      "execute unauthorized code or commands",
      "gain privileges / assume identity",
      "bypass protection mechanism",
      "hide activities",
  };
  return vocab;
}

std::string canonical_technical_impact(std::string_view raw) {
  const std::string s = to_lower(trim(raw));
  if (s.rfind("read ", 0) == 0) return "read data";
  if (s.rfind("modify ", 0) == 0) return "modify data";
  if (s.rfind("dos: resource consumption", 0) == 0 || s == "dos: amplification") return "dos: resource consumption";
  if (s.rfind("dos:", 0) == 0) return "dos: unreliable execution";
  if (s == "execute unauthorized code or commands") return s;
  if (s == "gain privileges or assume identity" || s == "gain privileges / assume identity") {
    return "gain privileges / assume identity";
  }
  if (s == "bypass protection mechanism") return s;
  if (s == "hide activities") return s;
  return {};
}

ParseResult parse_cwe_xml(std::string_view doc) {
  const Ptree tree = detail::read_xml_tree(doc);
  const Ptree& root = catalog_root(tree, "Weakness_Catalog");
  ParseResult result;
  std::size_t position = 0;
  for_each_child(child(root, "Weaknesses"), "Weakness", [&](const Ptree& w) {
    ++position;
    const std::string raw_id = xml_attr(w, "ID");
    if (raw_id.empty()) {
      result.diagnostics.record_errors.push_back({"cwe", position, "weakness without ID attribute"});
      return;
    }
    if (is_retired_status(xml_attr(w, "Status"))) {
      ++result.diagnostics.dropped_deprecated;
      return;
    }
    Entity e;
    e.id = canonical_cwe_id(raw_id);
    e.kind = EntityKind::cwe;
    e.source = SourceCorpus::cwe;
    e.name = xml_attr(w, "Name");
    e.description = text_of(w, "Description");
    e.fragment = detail::xml_fragment("Weakness", w);

    if (auto ext = text_of(w, "Extended_Description"); !ext.empty()) e.set_attr("extended_description", ext);
    if (auto abstraction = xml_attr(w, "Abstraction"); !abstraction.empty()) e.set_attr("abstraction", abstraction);
    if (auto likelihood = text_of(w, "Likelihood_Of_Exploit"); !likelihood.empty()) {
      e.set_attr("likelihood", to_lower(likelihood));
    }

    std::vector<std::string> platforms;
    if (const Ptree* ap = child(w, "Applicable_Platforms")) {
      for (const auto& [tag, p] : *ap) {
        if (tag == "<xmlattr>") continue;
        std::string name = xml_attr(p, "Name");
        if (name.empty()) name = xml_attr(p, "Class");
        push_unique(platforms, name);
      }
    }
    if (!platforms.empty()) e.set_attr("applicable_platforms", platforms);

    std::vector<std::string> raw_impacts;
    std::vector<std::string> consequences;
    for_each_child(child(w, "Common_Consequences"), "Consequence", [&](const Ptree& c) {
      std::vector<std::string> scopes;
      std::vector<std::string> impacts;
      for (const auto& [tag, v] : c) {
        if (tag == "Scope") scopes.push_back(xml_text(v));
        if (tag == "Impact") impacts.push_back(xml_text(v));
      }
      raw_impacts.insert(raw_impacts.end(), impacts.begin(), impacts.end());
      if (!impacts.empty()) {
        push_unique(consequences, join(impacts, ", ") + (scopes.empty() ? "" : " (scope: " + join(scopes, ", ") + ")"));
      }
    });
    if (!consequences.empty()) e.set_attr("consequences", consequences);
    if (auto impacts = canonical_impacts(raw_impacts); !impacts.empty()) e.set_attr("technical_impacts", impacts);

    std::vector<std::string> mitigations;
    for_each_child(child(w, "Potential_Mitigations"), "Mitigation", [&](const Ptree& m) {
      push_unique(mitigations, text_of(m, "Description"));
    });
    if (!mitigations.empty()) e.set_attr("potential_mitigations", mitigations);

    for_each_child(child(w, "Related_Weaknesses"), "Related_Weakness", [&](const Ptree& r) {
      const std::string target = xml_attr(r, "CWE_ID");
      if (!target.empty()) e.add_reference(Relation::related_weakness, canonical_cwe_id(target), xml_attr(r, "Nature"));
    });
    for_each_child(child(w, "Related_Attack_Patterns"), "Related_Attack_Pattern", [&](const Ptree& r) {
      const std::string target = xml_attr(r, "CAPEC_ID");
      if (!target.empty()) e.add_reference(Relation::related_capec, canonical_capec_id(target));
    });
    for_each_child(child(w, "Observed_Examples"), "Observed_Example", [&](const Ptree& r) {
      const std::string target = text_of(r, "Reference");
      if (starts_with_icase(target, "CVE-")) {
        e.add_reference(Relation::observed_example, canonical_cve_id(target), text_of(r, "Description"));
      }
    });
    e.seal();
    result.entities.push_back(std::move(e));
  });
  return result;
}

ParseResult parse_capec_xml(std::string_view doc) {
  const Ptree tree = detail::read_xml_tree(doc);
  const Ptree& root = catalog_root(tree, "Attack_Pattern_Catalog");
  ParseResult result;
  std::size_t position = 0;
  for_each_child(child(root, "Attack_Patterns"), "Attack_Pattern", [&](const Ptree& ap) {
    ++position;
    const std::string raw_id = xml_attr(ap, "ID");
    if (raw_id.empty()) {
      result.diagnostics.record_errors.push_back({"capec", position, "attack pattern without ID attribute"});
      return;
    }
    if (is_retired_status(xml_attr(ap, "Status"))) {
      ++result.diagnostics.dropped_deprecated;
      return;
    }
    Entity e;
    e.id = canonical_capec_id(raw_id);
    e.kind = EntityKind::capec;
    e.source = SourceCorpus::capec;
    e.name = xml_attr(ap, "Name");
    e.description = text_of(ap, "Description");
    e.fragment = detail::xml_fragment("Attack_Pattern", ap);

    if (auto ext = text_of(ap, "Extended_Description"); !ext.empty()) e.set_attr("extended_description", ext);
    if (auto v = text_of(ap, "Typical_Severity"); !v.empty()) e.set_attr("severity", to_lower(v));
    if (auto v = text_of(ap, "Likelihood_Of_Attack"); !v.empty()) e.set_attr("likelihood", to_lower(v));
    if (auto v = xml_attr(ap, "Abstraction"); !v.empty()) e.set_attr("abstraction", v);

    std::vector<std::string> prerequisites;
    for_each_child(child(ap, "Prerequisites"), "Prerequisite", [&](const Ptree& p) { push_unique(prerequisites, xml_text(p)); });
    if (!prerequisites.empty()) e.set_attr("prerequisites", prerequisites);

    std::vector<std::string> steps;
    for_each_child(child(ap, "Execution_Flow"), "Attack_Step", [&](const Ptree& s) {
      const std::string phase = text_of(s, "Phase");
      std::string line = "Step " + text_of(s, "Step");
      if (!phase.empty()) line += " (" + phase + ")";
      line += ": " + text_of(s, "Description");
      steps.push_back(std::move(line));
    });
    if (!steps.empty()) e.set_attr("execution_flow", steps);

    std::vector<std::string> raw_impacts;
    std::vector<std::string> consequences;
    for_each_child(child(ap, "Consequences"), "Consequence", [&](const Ptree& c) {
      for (const auto& [tag, v] : c) {
        if (tag == "Impact") {
          raw_impacts.push_back(xml_text(v));
          push_unique(consequences, xml_text(v));
        }
      }
    });
    if (!consequences.empty()) e.set_attr("consequences", consequences);
    if (auto impacts = canonical_impacts(raw_impacts); !impacts.empty()) e.set_attr("technical_impacts", impacts);

    std::vector<std::string> mitigations;
    for_each_child(child(ap, "Mitigations"), "Mitigation", [&](const Ptree& m) { push_unique(mitigations, xml_text(m)); });
    if (!mitigations.empty()) e.set_attr("mitigations", mitigations);

    std::vector<std::string> skills;
    for_each_child(child(ap, "Skills_Required"), "Skill", [&](const Ptree& s) {
      const std::string level = xml_attr(s, "Level");
      const std::string text = xml_text(s);
      if (!text.empty()) push_unique(skills, level.empty() ? text : level + ": " + text);
    });
    if (!skills.empty()) e.set_attr("skills_required", skills);

    for_each_child(child(ap, "Related_Attack_Patterns"), "Related_Attack_Pattern", [&](const Ptree& r) {
      const std::string target = xml_attr(r, "CAPEC_ID");
      if (!target.empty()) {
        e.add_reference(Relation::related_attack_pattern, canonical_capec_id(target), xml_attr(r, "Nature"));
      }
    });
    for_each_child(child(ap, "Related_Weaknesses"), "Related_Weakness", [&](const Ptree& r) {
      const std::string target = xml_attr(r, "CWE_ID");
      if (!target.empty()) e.add_reference(Relation::related_cwe, canonical_cwe_id(target));
    });
    e.seal();
    result.entities.push_back(std::move(e));
  });
  return result;
}

}  // namespace secforge
