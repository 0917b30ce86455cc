#include "secforge/templates.hpp"

#include <algorithm>
#include <cctype>
#include <exception>
#include <set>

#include "templates_data.hpp"

namespace secforge {
namespace {

constexpr const char* kAuthorRole =
    "You are a cyber threat intelligence analyst. Answer concisely and only from the supplied information.";

const std::set<std::string>& known_scopes() {
  static const std::set<std::string> scopes{
      "entity",          "relation",          "relation_each",       "relation_choice",
      "attack_cot",      "bron_direct_positive", "bron_direct_negative", "bron_hop",
      "bron_indirect",   "bron_type_to_node_source", "bron_type_to_node_target", "bron_type_to_type",
      "bron_two_step",   "rule_ttp_reasoning", "rule_detection_explanation", "rule_attack_mapping",
      "rule_generation", "document"};
  return scopes;
}

bool slot_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

// Length of a `{slot}` token starting at `pos`, or 0 when the brace does not open one.
std::size_t slot_token(std::string_view p, std::size_t pos) {
  std::size_t end = pos + 1;
  while (end < p.size() && slot_char(p[end])) ++end;
  if (end == pos + 1 || end >= p.size() || p[end] != '}') return 0;
  return end - pos + 1;
}

bool bound(const Bindings& b, const std::string& slot) {
  const auto it = b.find(slot);
  return it != b.end() && !trim(it->second).empty();
}

bool applicable(const Template& t, const Bindings& b) {
  return std::all_of(t.slots.begin(), t.slots.end(),
                     [&](const std::string& s) { return s == "passage" || bound(b, s); });
}

std::string bullet_list(const std::vector<std::string>& items) {
  std::string out;
  for (const auto& i : items) {
    if (!out.empty()) out.push_back('\n');
    out += "- " + i;
  }
  return out;
}

std::string label(const Entity& e) { return e.name == e.id ? e.id : e.name + " (" + e.id + ")"; }

std::string display(EntityKind k) { return std::string(display_name(k)); }

std::string rendered_instruction(const Template& t, const Bindings& b, std::string_view key, std::uint64_t seed) {
  return render_pattern(t.instructions[variant_index(t, key, seed)], b);
}

struct RecordSpec {
  std::string key;
  std::string grounding;
  std::vector<std::string> lineage;
  std::string category;
  std::optional<std::string> teacher_model;
};

std::optional<InstructionRecord> make_record(const Template& t, const Bindings& b, const RecordSpec& spec,
                                             std::uint64_t seed) {
  InstructionRecord r;
  r.instruction = trim(rendered_instruction(t, b, spec.key, seed));
  r.input = trim(render_pattern(t.input, b));
  r.output = trim(render_pattern(t.output, b));
  if (r.instruction.empty() || r.output.empty()) return std::nullopt;
  r.task_type = t.task_type;
  r.source_category = spec.category;
  r.grounding_doc_id = spec.grounding;
  r.lineage_ids = spec.lineage;
  r.template_name = t.name;
  if (spec.teacher_model) {
    r.generation.teacher_model = spec.teacher_model;
    r.generation.method = "template+teacher";
  }
  finalize(r);
  return r;
}

const Edge* find_edge(const CtiGraph& g, std::size_t a, Relation rel, std::size_t b) {
  for (std::size_t ei : g.out_edges(a)) {
    const Edge& e = g.edges()[ei];
    if (e.dst == b && e.label == rel) return &e;
  }
  for (std::size_t ei : g.out_edges(b)) {
    const Edge& e = g.edges()[ei];
    if (e.dst == a && e.label == rel) return &e;
  }
  return nullptr;
}

// Sentence for hop i of a path, in the direction the source data stated it.
std::string hop_sentence(const CtiGraph& g, const Path& p, std::size_t i);

struct Stated {
  Relation relation;
  std::size_t target;
};

// References the node stated itself, in edge order, without duplicates.
std::vector<Stated> stated_references(const CtiGraph& g, std::size_t node) {
  std::vector<Stated> out;
  std::set<std::pair<int, std::size_t>> seen;
  auto add = [&](Relation r, std::size_t t) {
    if (seen.emplace(static_cast<int>(r), t).second) out.push_back({r, t});
  };
  for (std::size_t ei : g.out_edges(node)) {
    if (!g.edges()[ei].reversed) add(g.edges()[ei].label, g.edges()[ei].dst);
  }
  for (std::size_t ei : g.in_edges(node)) {
    if (g.edges()[ei].reversed) add(g.edges()[ei].label, g.edges()[ei].src);
  }
  return out;
}

std::vector<const Entity*> relation_targets(const CtiGraph& g, const Entity& e, const Template& t) {
  std::vector<const Entity*> out;
  if (!t.relation) return out;
  const auto ids = t.outgoing ? g.referenced(e.id, *t.relation) : g.referenced_by(e.id, *t.relation);
  for (const auto& id : ids) {
    const Entity& target = g.node(id);
    if (t.target_kinds.empty() ||
        std::find(t.target_kinds.begin(), t.target_kinds.end(), target.kind) != t.target_kinds.end()) {
      out.push_back(&target);
    }
  }
  return out;
}

void bind_pair(Bindings& b, const Entity& a, const Entity& c) {
  b["a_name"] = a.name;
  b["a_id"] = a.id;
  b["a_kind"] = display(a.kind);
  b["a_description"] = a.description;
  b["b_name"] = c.name;
  b["b_id"] = c.id;
  b["b_kind"] = display(c.kind);
  b["b_description"] = c.description;
}

std::string pair_context(const Entity& a, const Entity& b) {
  return a.id + ": " + a.description + "\n\n" + b.id + ": " + b.description;
}

// Runs `fn(i, records, tally)` for every index in parallel and concatenates results in index order.
template <class Fn>
std::vector<InstructionRecord> ordered_parallel(std::size_t n, ForgeTally& tally, Fn&& fn) {
  std::vector<std::vector<InstructionRecord>> parts(n);
  std::vector<ForgeTally> tallies(n);
  std::vector<std::exception_ptr> errors(n);
  const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    try {
      fn(static_cast<std::size_t>(i), parts[i], tallies[i]);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  std::vector<InstructionRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    tally.merge(tallies[i]);
    for (auto& r : parts[i]) out.push_back(std::move(r));
  }
  return out;
}

std::string defense_info(const CtiGraph& g, const Entity& e) {
  std::vector<std::string> parts;
  switch (e.kind) {
    case EntityKind::capec:
      if (e.has_attr("mitigations")) parts.push_back("mitigate by: " + join(e.attr_list("mitigations"), "; "));
      break;
    case EntityKind::cwe:
      if (e.has_attr("potential_mitigations")) {
        parts.push_back("mitigate by: " + join(e.attr_list("potential_mitigations"), "; "));
      }
      break;
    case EntityKind::technique:
    case EntityKind::subtechnique: {
      std::vector<std::string> names;
      for (const auto& id : g.referenced(e.id, Relation::mitigated_by)) names.push_back(g.node(id).name);
      if (!names.empty()) parts.push_back("mitigate with " + join(names, ", "));
      if (e.has_attr("detection")) parts.push_back("detect by: " + first_sentence(e.attr_text("detection")));
      break;
    }
    case EntityKind::cve:
      if (e.has_attr("severity")) parts.push_back("severity " + e.attr_text("severity"));
      break;
    default:
      break;
  }
  return join(parts, "; ");
}

}  // namespace

bool Template::applies_to(EntityKind kind) const {
  return kinds.empty() || std::find(kinds.begin(), kinds.end(), kind) != kinds.end();
}

std::vector<std::string> pattern_slots(std::string_view pattern) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < pattern.size(); ++i) {
    if (pattern[i] != '{') continue;
    if (const auto len = slot_token(pattern, i)) {
      std::string name(pattern.substr(i + 1, len - 2));
      if (std::find(out.begin(), out.end(), name) == out.end()) out.push_back(std::move(name));
      i += len - 1;
    }
  }
  return out;
}

std::string render_pattern(std::string_view pattern, const Bindings& slots) {
  std::string out;
  out.reserve(pattern.size());
  for (std::size_t i = 0; i < pattern.size(); ++i) {
    if (pattern[i] == '{') {
      if (const auto len = slot_token(pattern, i)) {
        const std::string name(pattern.substr(i + 1, len - 2));
        const auto it = slots.find(name);
        if (it == slots.end()) throw PreconditionError("unbound template slot {" + name + "}");
        out += it->second;
        i += len - 1;
        continue;
      }
    }
    out.push_back(pattern[i]);
  }
  return out;
}

TemplateRegistry TemplateRegistry::from_json(const json& j) {
  TemplateRegistry reg;
  std::set<std::string> names;
  if (!j.contains("templates") || !j["templates"].is_array()) throw ParseError("template file has no templates array");
  for (const auto& t : j["templates"]) {
    Template tpl;
    try {
      tpl.name = t.at("name").get<std::string>();
      tpl.scope = t.at("scope").get<std::string>();
      const auto type = parse_task_type(t.at("task_type").get<std::string>());
      if (!type) throw ParseError("template " + tpl.name + ": unknown task_type");
      tpl.task_type = *type;
      for (const auto& k : t.value("kinds", std::vector<std::string>{})) {
        const auto kind = parse_kind(k);
        if (!kind) throw ParseError("template " + tpl.name + ": unknown kind '" + k + "'");
        tpl.kinds.push_back(*kind);
      }
      for (const auto& k : t.value("target_kinds", std::vector<std::string>{})) {
        const auto kind = parse_kind(k);
        if (!kind) throw ParseError("template " + tpl.name + ": unknown target kind '" + k + "'");
        tpl.target_kinds.push_back(*kind);
      }
      tpl.categories = t.value("categories", std::vector<std::string>{});
      if (t.contains("relation")) {
        tpl.relation = parse_relation(t["relation"].get<std::string>());
        if (!tpl.relation) throw ParseError("template " + tpl.name + ": unknown relation");
      }
      const auto direction = t.value("direction", std::string("out"));
      if (direction != "out" && direction != "in") throw ParseError("template " + tpl.name + ": bad direction");
      tpl.outgoing = direction == "out";
      tpl.slots = t.at("slots").get<std::vector<std::string>>();
      tpl.instructions = t.at("instructions").get<std::vector<std::string>>();
      tpl.input = t.value("input", "");
      tpl.output = t.at("output").get<std::string>();
      if (t.contains("teacher_prompt")) tpl.teacher_prompt = t["teacher_prompt"].get<std::string>();
    } catch (const json::exception& e) {
      throw ParseError("malformed template definition: " + std::string(e.what()));
    }

    if (!names.insert(tpl.name).second) throw ParseError("duplicate template name " + tpl.name);
    if (!known_scopes().count(tpl.scope)) throw ParseError("template " + tpl.name + ": unknown scope " + tpl.scope);
    if (tpl.instructions.size() < 2 || tpl.instructions.size() > 4) {
      throw ParseError("template " + tpl.name + " needs 2-4 instruction variants");
    }
    if (trim(tpl.output).empty()) throw ParseError("template " + tpl.name + " has an empty output pattern");
    if ((tpl.scope == "relation" || tpl.scope == "relation_choice") && !tpl.relation) {
      throw ParseError("template " + tpl.name + " needs a relation");
    }
    std::vector<std::string> patterns = tpl.instructions;
    patterns.push_back(tpl.input);
    patterns.push_back(tpl.output);
    if (tpl.teacher_prompt) patterns.push_back(*tpl.teacher_prompt);
    for (const auto& p : patterns) {
      for (std::size_t i = 0; i < p.size(); ++i) {
        if ((p[i] == '{' && !slot_token(p, i)) || (p[i] == '}' && (i == 0 || !slot_char(p[i - 1])))) {
          throw ParseError("template " + tpl.name + ": stray brace in pattern");
        }
      }
      for (const auto& s : pattern_slots(p)) {
        if (std::find(tpl.slots.begin(), tpl.slots.end(), s) == tpl.slots.end()) {
          throw ParseError("template " + tpl.name + ": slot {" + s + "} is not declared");
        }
      }
    }
    if (tpl.teacher_prompt) {
      const auto used = pattern_slots(*tpl.teacher_prompt);
      if (std::find(used.begin(), used.end(), "passage") != used.end()) {
        throw ParseError("template " + tpl.name + ": teacher prompt cannot use {passage}");
      }
    }
    reg.templates_.push_back(std::move(tpl));
  }
  return reg;
}

TemplateRegistry TemplateRegistry::from_file(const std::string& path) {
  try {
    return from_json(json::parse(read_file(path)));
  } catch (const json::parse_error& e) {
    throw ParseError(path + ": " + e.what(), e.byte);
  }
}

const TemplateRegistry& TemplateRegistry::builtin() {
  static const TemplateRegistry reg = from_json(json::parse(kBuiltinTemplates));
  return reg;
}

const Template& TemplateRegistry::named(std::string_view name) const {
  for (const auto& t : templates_) {
    if (t.name == name) return t;
  }
  throw PreconditionError("no template named " + std::string(name));
}

std::vector<const Template*> TemplateRegistry::scope(std::string_view scope) const {
  std::vector<const Template*> out;
  for (const auto& t : templates_) {
    if (t.scope == scope) out.push_back(&t);
  }
  return out;
}

Bindings entity_slots(const Entity& e) {
  Bindings b;
  b["name"] = e.name;
  b["id"] = e.id;
  b["description"] = e.description;
  b["kind"] = display(e.kind);
  b["lead"] = first_sentence(e.description);
  for (const auto& [key, value] : e.attributes) {
    if (const auto* s = std::get_if<std::string>(&value)) {
      b[key] = *s;
    } else {
      const auto& list = std::get<std::vector<std::string>>(value);
      b[key] = join(list, "; ");
      b[key + "_list"] = bullet_list(list);
    }
  }
  return b;
}

std::string source_category_for(const Entity& e) {
  switch (e.kind) {
    case EntityKind::capec: return "capec";
    case EntityKind::cwe: return "cwe";
    case EntityKind::cve: return "cve";
    case EntityKind::sigma_rule: return "sigma";
    case EntityKind::detection_rule: return "siem";
    case EntityKind::document: return e.attr_text("category");
    default: return "attack";
  }
}

std::size_t variant_index(const Template& t, std::string_view key, std::uint64_t seed) {
  return static_cast<std::size_t>(derive_seed(seed, t.name + "|" + std::string(key)) % t.instructions.size());
}

std::vector<InstructionRecord> render_characteristics(const Entity& e, const TemplateRegistry& registry,
                                                      std::uint64_t seed) {
  const auto templates = registry.scope("entity");
  if (std::none_of(templates.begin(), templates.end(), [&](const Template* t) { return t->applies_to(e.kind); })) {
    throw PreconditionError("no characteristic template for kind " + std::string(to_string(e.kind)));
  }
  const Bindings b = entity_slots(e);
  const RecordSpec spec{e.id, e.id, {e.id}, source_category_for(e), std::nullopt};
  std::vector<InstructionRecord> out;
  for (const Template* t : templates) {
    if (!t->applies_to(e.kind) || !applicable(*t, b)) continue;
    if (auto r = make_record(*t, b, spec, seed)) out.push_back(std::move(*r));
  }
  return out;
}

std::vector<InstructionRecord> render_intra_relations(const CtiGraph& g, const Entity& e,
                                                      const TemplateRegistry& registry, std::uint64_t seed) {
  std::vector<InstructionRecord> out;
  const auto node = g.index_of(e.id);
  if (!node) return out;
  const Bindings base = entity_slots(e);
  const std::string category = source_category_for(e);

  for (const Template* t : registry.scope("relation")) {
    if (!t->applies_to(e.kind)) continue;
    const auto targets = relation_targets(g, e, *t);
    if (targets.empty()) continue;
    Bindings b = base;
    std::vector<std::string> lines;
    std::vector<std::string> names;
    std::vector<std::string> lineage{e.id};
    for (const Entity* x : targets) {
      lines.push_back(label(*x));
      names.push_back(label(*x));
      lineage.push_back(x->id);
    }
    b["targets"] = bullet_list(lines);
    b["target_names"] = join(names, ", ");
    b["count"] = std::to_string(targets.size());
    b["target_kind"] = display(targets.front()->kind);
    if (!applicable(*t, b)) continue;
    if (auto r = make_record(*t, b, {e.id, e.id, lineage, category, std::nullopt}, seed)) out.push_back(std::move(*r));
  }

  for (const Template* t : registry.scope("relation_each")) {
    if (!t->applies_to(e.kind)) continue;
    for (const auto& s : stated_references(g, *node)) {
      const Entity& target = g.node(s.target);
      Bindings b = base;
      b["target_name"] = target.name;
      b["target_id"] = target.id;
      b["target_kind"] = display(target.kind);
      b["target_description"] = target.description;
      b["relation"] = std::string(to_string(s.relation));
      b["sentence"] = relation_sentence(g, e.id, s.relation, target.id);
      if (!applicable(*t, b)) continue;
      const std::string key = e.id + ">" + std::string(to_string(s.relation)) + ">" + target.id;
      if (auto r = make_record(*t, b, {key, e.id, {e.id, target.id}, category, std::nullopt}, seed)) {
        out.push_back(std::move(*r));
      }
    }
  }

  static const char* kLetters = "ABCD";
  for (const Template* t : registry.scope("relation_choice")) {
    if (!t->applies_to(e.kind)) continue;
    const auto targets = relation_targets(g, e, *t);
    if (targets.empty()) continue;
    const bool odd = t->task_type == TaskType::odd_one_out;
    if (odd && targets.size() < 3) continue;
    std::set<std::string> related;
    for (const Entity* x : targets) related.insert(x->id);

    Rng rng(derive_seed(seed, t->name + "|" + e.id));
    std::vector<const Entity*> members;
    const Entity* answer = nullptr;
    EntityKind pool_kind;
    if (odd) {
      for (std::size_t i : rng.sample_indices(targets.size(), 3)) members.push_back(targets[i]);
      pool_kind = members.front()->kind;
    } else {
      answer = targets[rng.below(targets.size())];
      members.push_back(answer);
      pool_kind = answer->kind;
    }
    std::vector<const Entity*> pool;
    for (std::size_t i : g.of_kind(pool_kind)) {
      if (!related.count(g.node(i).id) && g.node(i).id != e.id) pool.push_back(&g.node(i));
    }
    const std::size_t need = odd ? 1 : 3;
    if (pool.size() < need) continue;
    std::vector<const Entity*> extra;
    for (std::size_t i : rng.sample_indices(pool.size(), need)) extra.push_back(pool[i]);
    if (odd) answer = extra.front();
    members.insert(members.end(), extra.begin(), extra.end());
    rng.shuffle(members);

    Bindings b = base;
    std::vector<std::string> lines;
    std::vector<std::string> lineage{e.id};
    for (std::size_t i = 0; i < members.size(); ++i) {
      lines.push_back(std::string(1, kLetters[i]) + ". " + label(*members[i]));
      if (members[i] == answer) b["answer"] = lines.back();
      lineage.push_back(members[i]->id);
    }
    b["options"] = join(lines, "\n");
    if (!applicable(*t, b)) continue;
    if (auto r = make_record(*t, b, {e.id, e.id, lineage, category, std::nullopt}, seed)) out.push_back(std::move(*r));
  }
  return out;
}

std::vector<InstructionRecord> render_document(const Entity& doc, const TemplateRegistry& registry,
                                               std::uint64_t seed) {
  std::vector<InstructionRecord> out;
  const Bindings b = entity_slots(doc);
  const std::string category = source_category_for(doc);
  for (const Template* t : registry.scope("document")) {
    if (!t->categories.empty() &&
        std::find(t->categories.begin(), t->categories.end(), category) == t->categories.end()) {
      continue;
    }
    if (!applicable(*t, b)) continue;
    if (auto r = make_record(*t, b, {doc.id, doc.id, {doc.id}, category, std::nullopt}, seed)) {
      out.push_back(std::move(*r));
    }
  }
  return out;
}

std::string relation_sentence(const CtiGraph& g, std::string_view from, Relation relation, std::string_view to) {
  const Entity& a = g.node(from);
  const Entity& b = g.node(to);
  const std::string x = label(a);
  const std::string y = label(b);
  switch (relation) {
    case Relation::accomplishes: return x + " is used to accomplish the " + b.name + " tactic (" + b.id + ").";
    case Relation::subtechnique_of: return x + " is a sub-technique of " + y + ".";
    case Relation::uses: return x + " uses " + y + ".";
    case Relation::detected_by: return x + " can be detected with the data source " + y + ".";
    case Relation::mitigated_by: return x + " can be mitigated by " + y + ".";
    case Relation::related_capec: return x + " is related to the attack pattern " + y + ".";
    case Relation::related_cwe:
      return a.kind == EntityKind::cve ? x + " is an instance of the weakness " + y + "."
                                       : x + " targets the weakness " + y + ".";
    case Relation::related_weakness: return x + " is related to the weakness " + y + ".";
    case Relation::related_attack_pattern: return x + " is related to the attack pattern " + y + ".";
    case Relation::maps_to_technique: return x + " detects activity of the technique " + y + ".";
    case Relation::maps_to_tactic: return x + " detects activity of the tactic " + y + ".";
    case Relation::observed_example: return y + " is an observed example of " + x + ".";
  }
  return x + " is related to " + y + ".";
}

namespace {

std::string hop_sentence(const CtiGraph& g, const Path& p, std::size_t i) {
  const auto a = *g.index_of(p.nodes[i]);
  const auto b = *g.index_of(p.nodes[i + 1]);
  const Edge* e = find_edge(g, a, p.relations[i], b);
  const bool flip = e && ((e->src == a) == e->reversed);
  return flip ? relation_sentence(g, p.nodes[i + 1], p.relations[i], p.nodes[i])
              : relation_sentence(g, p.nodes[i], p.relations[i], p.nodes[i + 1]);
}

}  // namespace

std::string render_chain(const CtiGraph& g, const CoTChain& chain) {
  std::string out;
  for (std::size_t i = 0; i < chain.steps.size(); ++i) {
    const auto& s = chain.steps[i];
    out += "Step " + std::to_string(i + 1) + " (" + label(g.node(s.from)) + " -> " + label(g.node(s.to)) +
           "): " + s.explanation + "\n";
  }
  return out + "Answer: " + chain.final_answer + " (" + chain.final_answer_id + ")";
}

bool chain_consistent(const CtiGraph& g, const CoTChain& chain) {
  if (chain.steps.empty()) return false;
  for (std::size_t i = 0; i < chain.steps.size(); ++i) {
    const auto& s = chain.steps[i];
    const auto a = g.index_of(s.from);
    const auto b = g.index_of(s.to);
    if (!a || !b || !find_edge(g, *a, s.relation, *b)) return false;
    if (trim(s.explanation).empty()) return false;
    if (i + 1 < chain.steps.size() && s.to != chain.steps[i + 1].from) return false;
  }
  const auto* last = g.find(chain.steps.back().to);
  return chain.steps.back().to == chain.final_answer_id && last && last->name == chain.final_answer;
}

std::vector<SoftwareUsage> software_usages(const CtiGraph& g) {
  std::vector<SoftwareUsage> out;
  for (std::size_t i : g.of_kind(EntityKind::software)) {
    const auto& sw = g.node(i).id;
    for (const auto& t : g.referenced(sw, Relation::uses)) {
      if (g.node(t).kind == EntityKind::subtechnique) out.push_back({sw, t});
    }
  }
  std::sort(out.begin(), out.end(), [](const SoftwareUsage& a, const SoftwareUsage& b) {
    return std::tie(a.software, a.subtechnique) < std::tie(b.software, b.subtechnique);
  });
  return out;
}

CoTChain build_attack_cot(const CtiGraph& g, const SoftwareUsage& usage, const std::optional<std::string>& tactic) {
  const Entity* sw = g.find(usage.software);
  const Entity* sub = g.find(usage.subtechnique);
  if (!sw || sw->kind != EntityKind::software) throw ChainIncompleteError("unknown software " + usage.software);
  if (!sub || sub->kind != EntityKind::subtechnique) {
    throw ChainIncompleteError("unknown sub-technique " + usage.subtechnique);
  }
  const auto used = g.referenced(sw->id, Relation::uses);
  if (!std::binary_search(used.begin(), used.end(), sub->id)) {
    throw ChainIncompleteError("missing hop software -> sub-technique: " + sw->id + " does not use " + sub->id);
  }
  const auto parents = g.referenced(sub->id, Relation::subtechnique_of);
  if (parents.empty()) throw ChainIncompleteError("missing hop sub-technique -> technique for " + sub->id);
  const std::string& technique = parents.front();
  const auto tactics = g.referenced(technique, Relation::accomplishes);
  if (tactics.empty()) throw ChainIncompleteError("missing hop technique -> tactic for " + technique);
  const std::string chosen = tactic.value_or(tactics.front());
  if (!std::binary_search(tactics.begin(), tactics.end(), chosen)) {
    throw ChainIncompleteError("missing hop technique -> tactic: " + technique + " does not accomplish " + chosen);
  }

  auto explain = [&](const std::string& from, Relation rel, const std::string& to) {
    auto note = trim(g.note_for(from, rel, to));
    return note.empty() ? relation_sentence(g, from, rel, to) : note;
  };
  CoTChain chain;
  chain.steps.push_back({sw->id, Relation::uses, sub->id, explain(sw->id, Relation::uses, sub->id)});
  chain.steps.push_back(
      {sub->id, Relation::subtechnique_of, technique, explain(sub->id, Relation::subtechnique_of, technique)});
  chain.steps.push_back({technique, Relation::accomplishes, chosen, explain(technique, Relation::accomplishes, chosen)});
  chain.question = "Which tactic does " + sw->name + " achieve by using " + sub->name + "?";
  chain.final_answer = g.node(chosen).name;
  chain.final_answer_id = chosen;
  return chain;
}

std::vector<CoTChain> build_attack_cots(const CtiGraph& g) {
  std::vector<CoTChain> out;
  for (const auto& u : software_usages(g)) {
    const auto parents = g.referenced(u.subtechnique, Relation::subtechnique_of);
    if (parents.empty()) continue;
    for (const auto& tactic : g.referenced(parents.front(), Relation::accomplishes)) {
      out.push_back(build_attack_cot(g, u, tactic));
    }
  }
  return out;
}

std::vector<InstructionRecord> render_attack_cot(const CtiGraph& g, const CoTChain& chain,
                                                 const TemplateRegistry& registry, std::uint64_t seed) {
  std::vector<InstructionRecord> out;
  if (chain.steps.size() < 2) return out;
  const Entity& sw = g.node(chain.steps[0].from);
  const Entity& sub = g.node(chain.steps[0].to);
  Bindings b;
  b["software"] = sw.name;
  b["software_id"] = sw.id;
  b["usage"] = sub.name;
  b["usage_id"] = sub.id;
  b["chain"] = render_chain(g, chain);
  std::vector<std::string> lineage;
  for (const auto& s : chain.steps) lineage.push_back(s.from);
  lineage.push_back(chain.final_answer_id);
  const std::string key = join(lineage, ">");
  for (const Template* t : registry.scope("attack_cot")) {
    if (!applicable(*t, b)) continue;
    if (auto r = make_record(*t, b, {key, sw.id, lineage, "attack", std::nullopt}, seed)) out.push_back(std::move(*r));
  }
  return out;
}

void ForgeTally::merge(const ForgeTally& other) {
  attempts += other.attempts;
  refused += other.refused;
  rejected += other.rejected;
  dropped += other.dropped;
  transport_failures += other.transport_failures;
  record_errors.insert(record_errors.end(), other.record_errors.begin(), other.record_errors.end());
  audit.insert(audit.end(), other.audit.begin(), other.audit.end());
}

json ForgeTally::summary() const {
  json j;
  j["teacher_attempts"] = attempts;
  j["refused"] = refused;
  j["rejected"] = rejected;
  j["dropped"] = dropped;
  j["transport_failures"] = transport_failures;
  j["record_errors"] = record_errors.size();
  return j;
}

std::optional<std::string> author_passage(const TeacherLink& link, const std::string& prompt,
                                          const std::string& context, const std::string& question,
                                          const std::string& tag, ForgeTally& tally) {
  for (int attempt = 0; attempt < 2; ++attempt) {
    ++tally.attempts;
    // The retry changes the prompt so it does not replay the cached first answer.
    const std::string body =
        attempt == 0 ? prompt : prompt + "\n\nYour previous explanation was rejected. Write a more careful one.";
    std::string text;
    try {
      text = trim(link.author.complete(make_request(Purpose::generate, kAuthorRole, body, tag)).text);
    } catch (const TransportError&) {
      ++tally.transport_failures;
      ++tally.dropped;
      return std::nullopt;
    }
    if (is_refusal(text)) {
      ++tally.refused;
      continue;
    }
    bool ok = false;
    try {
      ok = verify_passage(link.evaluator, context, question, text, &tally.audit);
    } catch (const TransportError&) {
      ++tally.transport_failures;
      ++tally.dropped;
      return std::nullopt;
    }
    if (ok) return text;
    ++tally.rejected;
  }
  ++tally.dropped;
  return std::nullopt;
}

std::string_view to_string(BronFamily f) {
  switch (f) {
    case BronFamily::direct: return "direct";
    case BronFamily::indirect: return "indirect";
    case BronFamily::type_to_node: return "type_to_node";
    case BronFamily::type_to_type: return "type_to_type";
    case BronFamily::two_step: return "two_step";
  }
  return "direct";
}

const std::vector<BronFamily>& all_bron_families() {
  static const std::vector<BronFamily> all{BronFamily::direct, BronFamily::indirect, BronFamily::type_to_node,
                                           BronFamily::type_to_type, BronFamily::two_step};
  return all;
}

std::optional<CoTChain> build_path_cot(const CtiGraph& g, const Path& path, const TeacherLink& link,
                                       const TemplateRegistry& registry, ForgeTally& tally) {
  if (path.length() == 0) throw PreconditionError("path has no hops");
  const auto hop_templates = registry.scope("bron_hop");
  if (hop_templates.empty()) throw PreconditionError("no bron_hop template registered");
  const Template& hop = *hop_templates.front();
  CoTChain chain;
  for (std::size_t i = 0; i < path.length(); ++i) {
    const auto a = g.index_of(path.nodes[i]);
    const auto b = g.index_of(path.nodes[i + 1]);
    const Edge* edge = a && b ? find_edge(g, *a, path.relations[i], *b) : nullptr;
    if (!edge) throw PreconditionError("path " + path.id() + " is not a walk in the graph");
    std::string explanation = trim(edge->note);
    if (explanation.empty()) {
      const Entity& x = g.node(*a);
      const Entity& y = g.node(*b);
      Bindings bind;
      bind_pair(bind, x, y);
      if (!applicable(hop, bind) || !hop.teacher_prompt) {
        explanation = hop_sentence(g, path, i);
      } else {
        auto passage = author_passage(link, render_pattern(*hop.teacher_prompt, bind), pair_context(x, y),
                                      render_pattern(hop.instructions.front(), bind), "bron_hop", tally);
        if (!passage) return std::nullopt;
        explanation = *passage;
      }
    }
    chain.steps.push_back({path.nodes[i], path.relations[i], path.nodes[i + 1], explanation});
  }
  const Entity& dst = g.node(path.nodes.back());
  chain.question = "How is " + g.node(path.nodes.front()).name + " connected to " + dst.name + "?";
  chain.final_answer = dst.name;
  chain.final_answer_id = dst.id;
  return chain;
}

std::vector<InstructionRecord> build_bron_instructions(const CtiGraph& g, const std::vector<Path>& paths,
                                                       const std::vector<NegativePair>& negatives,
                                                       const TeacherLink& link, BronFamily family,
                                                       const TemplateRegistry& registry, std::uint64_t seed,
                                                       ForgeTally& tally) {
  const std::string model = link.author.model_name();
  std::vector<const Path*> single;
  std::vector<const Path*> multi;
  for (const auto& p : paths) {
    if (!path_is_valid(g, p)) throw PreconditionError("path " + p.id() + " is not drawn from the graph");
    (p.length() == 1 ? single : multi).push_back(&p);
  }

  switch (family) {
    case BronFamily::direct: {
      const auto pos = registry.scope("bron_direct_positive");
      const auto neg = registry.scope("bron_direct_negative");
      return ordered_parallel(single.size() + negatives.size(), tally, [&](std::size_t i, auto& out, auto& local) {
        const bool positive = i < single.size();
        const Entity& a = g.node(positive ? single[i]->nodes[0] : negatives[i - single.size()].a);
        const Entity& b = g.node(positive ? single[i]->nodes[1] : negatives[i - single.size()].b);
        std::string note;
        if (positive) {
          const Edge* e = find_edge(g, *g.index_of(a.id), single[i]->relations[0], *g.index_of(b.id));
          note = e ? trim(e->note) : std::string();
        }
        const std::string key = a.id + (positive ? "+" : "-") + b.id;
        for (const Template* t : positive ? pos : neg) {
          Bindings bind;
          bind_pair(bind, a, b);
          if (!applicable(*t, bind)) continue;
          std::optional<std::string> teacher_model;
          if (!note.empty()) {
            bind["passage"] = note;
          } else if (t->teacher_prompt) {
            auto passage = author_passage(link, render_pattern(*t->teacher_prompt, bind), pair_context(a, b),
                                          rendered_instruction(*t, bind, key, seed), t->name, local);
            if (!passage) continue;
            bind["passage"] = *passage;
            teacher_model = model;
          } else if (positive) {
            bind["passage"] = hop_sentence(g, *single[i], 0);
          } else {
            continue;
          }
          if (auto r = make_record(*t, bind, {key, a.id, {a.id, b.id}, "bron", teacher_model}, seed)) {
            out.push_back(std::move(*r));
          }
        }
      });
    }
    case BronFamily::indirect: {
      const auto templates = registry.scope("bron_indirect");
      return ordered_parallel(multi.size(), tally, [&](std::size_t i, auto& out, auto& local) {
        const Path& p = *multi[i];
        const auto chain = build_path_cot(g, p, link, registry, local);
        if (!chain) return;
        bool authored = false;
        for (std::size_t h = 0; h < p.length(); ++h) {
          const Edge* e = find_edge(g, *g.index_of(p.nodes[h]), p.relations[h], *g.index_of(p.nodes[h + 1]));
          authored = authored || trim(e->note).empty();
        }
        const Entity& src = g.node(p.nodes.front());
        const Entity& dst = g.node(p.nodes.back());
        Bindings bind;
        bind["src_name"] = src.name;
        bind["src_id"] = src.id;
        bind["src_kind"] = display(src.kind);
        bind["dst_name"] = dst.name;
        bind["dst_id"] = dst.id;
        bind["dst_kind"] = display(dst.kind);
        bind["hops"] = std::to_string(p.length());
        bind["chain"] = render_chain(g, *chain);
        for (const Template* t : templates) {
          if (!applicable(*t, bind)) continue;
          const RecordSpec spec{p.id(), src.id, p.nodes, "bron", authored ? std::optional(model) : std::nullopt};
          if (auto r = make_record(*t, bind, spec, seed)) out.push_back(std::move(*r));
        }
      });
    }
    case BronFamily::type_to_node: {
      // Grouped by (node, counterpart kind), both directions.
      std::map<std::pair<std::string, EntityKind>, std::vector<std::string>> by_src;
      std::map<std::pair<std::string, EntityKind>, std::vector<std::string>> by_dst;
      for (const Path* p : single) {
        by_src[{p->nodes[0], p->dst_kind}].push_back(p->nodes[1]);
        by_dst[{p->nodes[1], p->src_kind}].push_back(p->nodes[0]);
      }
      std::vector<InstructionRecord> out;
      auto emit = [&](const auto& groups, std::string_view scope, const char* list_slot, const char* kind_slot) {
        for (const auto& [key, members] : groups) {
          const Entity& e = g.node(key.first);
          Bindings bind = entity_slots(e);
          std::vector<std::string> lines;
          std::vector<std::string> lineage{e.id};
          for (const auto& m : members) {
            lines.push_back(label(g.node(m)));
            lineage.push_back(m);
          }
          bind[list_slot] = bullet_list(lines);
          bind[kind_slot] = display(key.second);
          bind["count"] = std::to_string(members.size());
          for (const Template* t : registry.scope(scope)) {
            if (!applicable(*t, bind)) continue;
            const std::string rkey = e.id + "|" + std::string(to_string(key.second));
            if (auto r = make_record(*t, bind, {rkey, e.id, lineage, "bron", std::nullopt}, seed)) {
              out.push_back(std::move(*r));
            }
          }
        }
      };
      emit(by_src, "bron_type_to_node_source", "targets", "target_kind");
      emit(by_dst, "bron_type_to_node_target", "sources", "source_kind");
      return out;
    }
    case BronFamily::type_to_type: {
      std::map<std::pair<EntityKind, EntityKind>, std::vector<const Path*>> groups;
      for (const Path* p : single) groups[{p->src_kind, p->dst_kind}].push_back(p);
      std::vector<InstructionRecord> out;
      for (const auto& [kinds, members] : groups) {
        const std::string key = std::string(to_string(kinds.first)) + ">" + std::string(to_string(kinds.second));
        Rng rng(derive_seed(seed, "type_to_type:" + key));
        std::vector<std::string> lines;
        std::vector<std::string> lineage;
        for (std::size_t i : rng.sample_indices(members.size(), std::min<std::size_t>(5, members.size()))) {
          const Path& p = *members[i];
          lines.push_back(hop_sentence(g, p, 0));
          lineage.push_back(p.nodes[0]);
          lineage.push_back(p.nodes[1]);
        }
        Bindings bind;
        bind["src_kind"] = display(kinds.first);
        bind["dst_kind"] = display(kinds.second);
        bind["examples"] = bullet_list(lines);
        bind["count"] = std::to_string(lines.size());
        for (const Template* t : registry.scope("bron_type_to_type")) {
          if (!applicable(*t, bind)) continue;
          if (auto r = make_record(*t, bind, {key, lineage.front(), lineage, "bron", std::nullopt}, seed)) {
            out.push_back(std::move(*r));
          }
        }
      }
      return out;
    }
    case BronFamily::two_step: {
      std::map<std::pair<std::string, EntityKind>, std::vector<std::string>> groups;
      for (const Path* p : single) {
        groups[{p->nodes[0], p->dst_kind}].push_back(p->nodes[1]);
        groups[{p->nodes[1], p->src_kind}].push_back(p->nodes[0]);
      }
      std::vector<InstructionRecord> out;
      for (const auto& [key, members] : groups) {
        const Entity& e = g.node(key.first);
        std::vector<std::string> lines;
        std::vector<std::string> lineage{e.id};
        bool any_info = false;
        for (const auto& m : members) {
          const Entity& x = g.node(m);
          const std::string info = defense_info(g, x);
          any_info = any_info || !info.empty();
          lines.push_back(label(x) + (info.empty() ? "" : ": " + info));
          lineage.push_back(m);
        }
        if (!any_info) continue;
        Bindings bind = entity_slots(e);
        bind["target_kind"] = display(key.second);
        bind["details"] = label(e) + " is related to " + std::to_string(members.size()) + " " + display(key.second) +
                          " entries.\n" + bullet_list(lines);
        for (const Template* t : registry.scope("bron_two_step")) {
          if (!applicable(*t, bind)) continue;
          const std::string rkey = e.id + "|" + std::string(to_string(key.second));
          if (auto r = make_record(*t, bind, {rkey, e.id, lineage, "bron", std::nullopt}, seed)) {
            out.push_back(std::move(*r));
          }
        }
      }
      return out;
    }
  }
  return {};
}

std::string_view to_string(RuleTask t) {
  switch (t) {
    case RuleTask::ttp_reasoning: return "ttp_reasoning";
    case RuleTask::detection_explanation: return "detection_explanation";
    case RuleTask::attack_mapping: return "attack_mapping";
    case RuleTask::rule_generation: return "rule_generation";
  }
  return "ttp_reasoning";
}

const std::vector<RuleTask>& all_rule_tasks() {
  static const std::vector<RuleTask> all{RuleTask::ttp_reasoning, RuleTask::detection_explanation,
                                         RuleTask::attack_mapping, RuleTask::rule_generation};
  return all;
}

std::vector<InstructionRecord> build_rule_instructions(const Entity& rule, const CtiGraph& g, const TeacherLink& link,
                                                       RuleTask task, const TemplateRegistry& registry,
                                                       std::uint64_t seed, ForgeTally& tally) {
  if (rule.kind != EntityKind::sigma_rule && rule.kind != EntityKind::detection_rule) {
    throw PreconditionError(rule.id + " is not a detection rule");
  }
  const bool sigma = rule.kind == EntityKind::sigma_rule;
  Bindings base = entity_slots(rule);
  base["format"] = sigma ? "Sigma rule" : "SIEM correlation rule";
  base["body"] = sigma ? rule.fragment : rule.attr_text("pattern");
  const std::string category = source_category_for(rule);
  const std::string model = link.author.model_name();
  const std::string scope =
      task == RuleTask::rule_generation ? std::string("rule_generation") : "rule_" + std::string(to_string(task));

  std::vector<InstructionRecord> out;
  auto emit = [&](const Bindings& b, const std::string& key, std::vector<std::string> lineage,
                  const std::string& context) {
    for (const Template* t : registry.scope(scope)) {
      if (!t->applies_to(rule.kind) || !applicable(*t, b)) continue;
      Bindings bind = b;
      std::optional<std::string> teacher_model;
      if (t->teacher_prompt) {
        auto passage = author_passage(link, render_pattern(*t->teacher_prompt, bind), context,
                                      rendered_instruction(*t, bind, key, seed), t->name, tally);
        if (!passage) continue;
        bind["passage"] = *passage;
        teacher_model = model;
      }
      if (auto r = make_record(*t, bind, {key, rule.id, lineage, category, teacher_model}, seed)) {
        out.push_back(std::move(*r));
      }
    }
  };

  if (task == RuleTask::detection_explanation || task == RuleTask::rule_generation) {
    emit(base, rule.id, {rule.id}, base["body"]);
    return out;
  }

  std::vector<std::string> ttps;
  if (g.contains(rule.id)) {
    for (Relation rel : {Relation::maps_to_technique, Relation::maps_to_tactic}) {
      for (const auto& id : g.referenced(rule.id, rel)) ttps.push_back(id);
    }
    for (const auto& d : g.dangling()) {
      if (d.source_id == rule.id &&
          (d.relation == Relation::maps_to_technique || d.relation == Relation::maps_to_tactic)) {
        tally.record_errors.push_back(rule.id + ": unresolvable TTP reference " + d.target);
      }
    }
  } else {
    for (const auto& ref : rule.references) {
      if (ref.relation != Relation::maps_to_technique && ref.relation != Relation::maps_to_tactic) continue;
      if (g.contains(ref.target)) {
        ttps.push_back(ref.target);
      } else {
        tally.record_errors.push_back(rule.id + ": unresolvable TTP reference " + ref.target);
      }
    }
  }
  for (const auto& id : ttps) {
    const Entity& ttp = g.node(id);
    Bindings b = base;
    b["ttp_kind"] = display(ttp.kind);
    b["ttp_name"] = ttp.name;
    b["ttp_id"] = ttp.id;
    b["ttp_description"] = ttp.description;
    emit(b, rule.id + ">" + ttp.id, {rule.id, ttp.id}, b["body"] + "\n\n" + ttp.id + ": " + ttp.description);
  }
  return out;
}

}  // namespace secforge
