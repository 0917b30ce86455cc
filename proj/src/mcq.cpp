#include "secforge/mcq.hpp"

#include <algorithm>
#include <exception>
#include <set>

#include "secforge/ingest.hpp"

namespace secforge {
namespace {

std::string label(const Entity& e) { return e.name == e.id ? e.id : e.name + " (" + e.id + ")"; }

std::vector<std::string> names_of(const CtiGraph& g, const std::vector<std::string>& ids) {
  std::vector<std::string> out;
  for (const auto& id : ids) out.push_back(g.node(id).name);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

OptionVocabulary text_vocabulary(std::string id, std::string kind, const CtiGraph& g, EntityKind of,
                                 const std::string& attribute) {
  std::set<std::string> members;
  for (std::size_t i : g.of_kind(of)) {
    for (const auto& m : g.node(i).attr_list(attribute)) members.insert(m);
  }
  return {std::move(id), std::move(kind), {members.begin(), members.end()}};
}

bool in_test(const std::unordered_set<std::string>& test, const std::string& id) { return test.count(id) > 0; }

}  // namespace

bool OptionVocabulary::contains(std::string_view option) const {
  return std::find(members.begin(), members.end(), option) != members.end();
}

void OptionVocabulary::validate() const {
  if (members.size() < 4) throw PreconditionError("vocabulary " + id + " has fewer than 4 members");
  std::set<std::string> seen(members.begin(), members.end());
  if (seen.size() != members.size()) throw PreconditionError("vocabulary " + id + " has duplicate members");
}

OptionVocabulary vocabulary_of_kind(const CtiGraph& g, EntityKind kind) {
  std::vector<std::string> ids;
  for (std::size_t i : g.of_kind(kind)) ids.push_back(g.node(i).id);
  std::sort(ids.begin(), ids.end());
  std::vector<std::string> members;
  std::set<std::string> seen;
  for (const auto& id : ids) {
    if (seen.insert(g.node(id).name).second) members.push_back(g.node(id).name);
  }
  return {std::string(to_string(kind)), std::string(to_string(kind)), std::move(members)};
}

OptionVocabulary impact_vocabulary() { return {"technical_impact", "technical_impact", technical_impact_vocabulary()}; }

std::string binary_query(std::string_view question, std::string_view correct, std::string_view false_option) {
  return std::string(question) + "\nOption 1: " + std::string(correct) + "\nOption 2: " + std::string(false_option) +
         "\nAnswer:";
}

std::vector<std::pair<std::string, double>> top_distractors(std::vector<std::pair<std::string, double>> scored,
                                                            std::size_t m) {
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (scored.size() > m) scored.resize(m);
  return scored;
}

std::vector<std::pair<std::string, double>> select_adversarial_distractors(std::string_view question,
                                                                           const std::string& correct,
                                                                           const OptionVocabulary& vocab,
                                                                           TeacherGateway& scorer, std::size_t m) {
  if (!vocab.contains(correct)) throw PreconditionError("correct option is not in vocabulary " + vocab.id);
  if (vocab.members.size() < m + 1) throw PreconditionError("vocabulary " + vocab.id + " is too small");
  std::vector<std::string> falses;
  for (const auto& o : vocab.members) {
    if (o != correct) falses.push_back(o);
  }
  std::vector<std::pair<std::string, double>> scored(falses.size());
  std::vector<std::exception_ptr> errors(falses.size());
  const auto n = static_cast<std::ptrdiff_t>(falses.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    try {
      const auto choices = scorer.score_options(binary_query(question, correct, falses[i]), {" 1", " 2"});
      scored[i] = {falses[i], choices[1].logprob};
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return top_distractors(std::move(scored), m);
}

McqOutcome build_mcq_item(const McqRequest& request, const OptionVocabulary& vocab, TeacherGateway* scorer,
                          std::uint64_t seed) {
  McqOutcome out;
  std::vector<std::string> correct = request.correct;
  std::sort(correct.begin(), correct.end());
  correct.erase(std::unique(correct.begin(), correct.end()), correct.end());
  if (correct.empty()) {
    out.skip_reason = "no vocabulary member maps to the source";
    return out;
  }
  if (correct.size() > 1 && request.require_unique) {
    out.skip_reason = "source maps to " + std::to_string(correct.size()) + " members of " + vocab.id;
    return out;
  }
  for (const auto& c : correct) {
    if (!vocab.contains(c)) {
      out.skip_reason = "'" + c + "' is not in vocabulary " + vocab.id;
      return out;
    }
  }
  const std::string& answer = correct.front();
  OptionVocabulary pool{vocab.id, vocab.kind, {}};
  for (const auto& m : vocab.members) {
    if (m == answer || !std::binary_search(correct.begin(), correct.end(), m)) pool.members.push_back(m);
  }
  if (pool.members.size() < 4) {
    out.skip_reason = "fewer than 3 false options remain in " + vocab.id;
    return out;
  }

  McqItem item;
  item.task = request.task;
  item.question = request.question;
  item.option_vocabulary_id = vocab.id;
  item.source_ids = request.source_ids;
  Rng rng(derive_seed(seed, "mcq:" + request.task + "|" + join(request.source_ids, ",")));
  std::vector<std::string> distractors;
  if (scorer) {
    auto picked = select_adversarial_distractors(request.question, answer, pool, *scorer, 3);
    for (const auto& [o, _] : picked) distractors.push_back(o);
    item.distractor_scores = std::move(picked);
    item.adversarial = true;
    item.reference_model = scorer->model_name();
  } else {
    std::vector<std::string> falses;
    for (const auto& m : pool.members) {
      if (m != answer) falses.push_back(m);
    }
    for (std::size_t i : rng.sample_indices(falses.size(), 3)) distractors.push_back(falses[i]);
  }
  item.answer_index = rng.below(4);
  for (std::size_t pos = 0, d = 0; pos < 4; ++pos) {
    item.options.push_back(pos == item.answer_index ? answer : distractors[d++]);
  }
  validate(item);
  out.item = std::move(item);
  return out;
}

const std::vector<std::string>& eval_task_names() {
  static const std::vector<std::string> names{"adversarial_mitre_attack",  "siem_ttp_mapping",
                                              "cti_detection_mitigation",  "cwe_impact_mapping",
                                              "cti_relationship_prediction", "cti_entity_classification",
                                              "cwe_summarization"};
  return names;
}

EvalSets build_eval_sets(const CtiGraph& g, const std::unordered_set<std::string>& test_ids, TeacherGateway& scorer,
                         const TeacherLink& link, const EvalSetConfig& config, std::uint64_t seed,
                         const TemplateRegistry& registry) {
  EvalSets sets;
  for (const auto& name : eval_task_names()) sets.tasks[name];
  auto test_nodes = [&](EntityKind kind) {
    std::vector<const Entity*> out;
    for (std::size_t i : g.of_kind(kind)) {
      if (in_test(test_ids, g.node(i).id)) out.push_back(&g.node(i));
    }
    std::sort(out.begin(), out.end(), [](const Entity* a, const Entity* b) { return a->id < b->id; });
    return out;
  };
  auto add_mcq = [&](const McqRequest& req, const OptionVocabulary& vocab, TeacherGateway* sc) {
    try {
      auto outcome = build_mcq_item(req, vocab, sc, seed);
      if (outcome.item) {
        sets.tasks[req.task].push_back(std::move(*outcome.item));
      } else {
        sets.skipped.push_back(req.task + " " + join(req.source_ids, ",") + ": " + outcome.skip_reason);
      }
    } catch (const PreconditionError& e) {
      sets.skipped.push_back(req.task + " " + join(req.source_ids, ",") + ": " + e.what());
    }
  };

  // Technique description -> tactic, over the closed tactic list.
  const auto tactics = vocabulary_of_kind(g, EntityKind::tactic);
  if (tactics.members.size() >= 4) {
    for (EntityKind kind : {EntityKind::technique, EntityKind::subtechnique}) {
      for (const Entity* e : test_nodes(kind)) {
        if (trim(e->description).empty()) continue;
        auto ids = g.referenced(e->id, Relation::accomplishes);
        if (ids.empty() && kind == EntityKind::subtechnique) {
          for (const auto& parent : g.referenced(e->id, Relation::subtechnique_of)) {
            for (const auto& t : g.referenced(parent, Relation::accomplishes)) ids.push_back(t);
          }
        }
        add_mcq({"adversarial_mitre_attack",
                 e->description + "\nWhich MITRE ATT&CK tactic does the behaviour described above serve?",
                 names_of(g, ids), {e->id}, true},
                tactics, config.adversarial ? &scorer : nullptr);
      }
    }
  }

  // Rule body -> technique (or tactic); several tags may be correct.
  const auto techniques = vocabulary_of_kind(g, EntityKind::technique);
  for (EntityKind kind : {EntityKind::detection_rule, EntityKind::sigma_rule}) {
    for (const Entity* rule : test_nodes(kind)) {
      const std::string body = kind == EntityKind::sigma_rule ? rule->fragment : rule->attr_text("pattern");
      const std::string shown = rule->name + "\n" + body;
      std::vector<std::string> tech_ids;
      for (const auto& id : g.referenced(rule->id, Relation::maps_to_technique)) {
        const Entity& t = g.node(id);
        if (t.kind == EntityKind::technique) {
          tech_ids.push_back(id);
        } else {
          for (const auto& p : g.referenced(id, Relation::subtechnique_of)) tech_ids.push_back(p);
        }
      }
      const auto tactic_ids = g.referenced(rule->id, Relation::maps_to_tactic);
      if (!tech_ids.empty() && techniques.members.size() >= 4) {
        add_mcq({"siem_ttp_mapping", shown + "\nWhich MITRE ATT&CK technique does this rule detect?",
                 names_of(g, tech_ids), {rule->id}, false},
                techniques, nullptr);
      } else if (!tactic_ids.empty() && tactics.members.size() >= 4) {
        add_mcq({"siem_ttp_mapping", shown + "\nWhich MITRE ATT&CK tactic does this rule detect?",
                 names_of(g, tactic_ids), {rule->id}, false},
                tactics, nullptr);
      } else if (tech_ids.empty() && tactic_ids.empty()) {
        sets.skipped.push_back("siem_ttp_mapping " + rule->id + ": rule has no resolvable TTP");
      }
    }
  }

  // Detection and mitigation mapping.
  const auto mitigations = vocabulary_of_kind(g, EntityKind::mitigation);
  const auto data_sources = vocabulary_of_kind(g, EntityKind::detection_source);
  const auto capec_mitigations = text_vocabulary("capec_mitigation", "mitigation", g, EntityKind::capec, "mitigations");
  const auto cwe_mitigations =
      text_vocabulary("cwe_mitigation", "mitigation", g, EntityKind::cwe, "potential_mitigations");
  for (EntityKind kind : {EntityKind::technique, EntityKind::subtechnique}) {
    for (const Entity* e : test_nodes(kind)) {
      const auto mit = g.referenced(e->id, Relation::mitigated_by);
      if (!mit.empty() && mitigations.members.size() >= 4) {
        add_mcq({"cti_detection_mitigation", "Which mitigation applies to " + label(*e) + "?", names_of(g, mit),
                 {e->id}, false},
                mitigations, nullptr);
      }
      const auto det = g.referenced(e->id, Relation::detected_by);
      if (!det.empty() && data_sources.members.size() >= 4) {
        add_mcq({"cti_detection_mitigation", "Which data source can detect " + label(*e) + "?", names_of(g, det),
                 {e->id}, false},
                data_sources, nullptr);
      }
    }
  }
  for (const Entity* e : test_nodes(EntityKind::capec)) {
    if (e->has_attr("mitigations") && capec_mitigations.members.size() >= 4) {
      add_mcq({"cti_detection_mitigation", "Which of the following mitigates the attack pattern " + label(*e) + "?",
               e->attr_list("mitigations"), {e->id}, false},
              capec_mitigations, nullptr);
    }
  }
  for (const Entity* e : test_nodes(EntityKind::cwe)) {
    if (e->has_attr("potential_mitigations") && cwe_mitigations.members.size() >= 4) {
      add_mcq({"cti_detection_mitigation", "Which of the following mitigates the weakness " + label(*e) + "?",
               e->attr_list("potential_mitigations"), {e->id}, false},
              cwe_mitigations, nullptr);
    }
  }

  // Technical impacts: one impact is an 8-way classification, several become an MCQ.
  const auto impacts = impact_vocabulary();
  for (const Entity* e : test_nodes(EntityKind::cwe)) {
    const auto own = e->attr_list("technical_impacts");
    if (own.empty()) continue;
    const std::string text = label(*e) + "\n" + e->description;
    if (own.size() == 1) {
      sets.tasks["cwe_impact_mapping"].push_back(ClassificationItem{
          "cwe_impact_mapping", text + "\nWhat is the technical impact of this weakness?", own.front(),
          impacts.members, {e->id}});
    } else {
      add_mcq({"cwe_impact_mapping", text + "\nWhich of the following is a technical impact of this weakness?", own,
               {e->id}, false},
              impacts, nullptr);
    }
  }

  // Relationship prediction over test-only pairs: gold is the matching explanation.
  const CtiGraph test_graph = g.induced(test_ids);
  const auto& pos_t = registry.scope("bron_direct_positive");
  const auto& neg_t = registry.scope("bron_direct_negative");
  if (!pos_t.empty() && !neg_t.empty()) {
    struct Pair {
      std::string a;
      std::string b;
      bool related;
    };
    std::vector<Pair> pairs;
    const std::vector<std::pair<EntityKind, EntityKind>> kind_pairs{{EntityKind::tactic, EntityKind::technique},
                                                                    {EntityKind::technique, EntityKind::capec},
                                                                    {EntityKind::capec, EntityKind::cwe},
                                                                    {EntityKind::cwe, EntityKind::cve}};
    for (const auto& [src, dst] : kind_pairs) {
      auto paths = one_step_paths(test_graph, src, dst);
      Rng rng(derive_seed(seed, "relpred:" + std::string(to_string(src)) + ">" + std::string(to_string(dst))));
      const std::size_t take = std::min(paths.size(), config.negatives_per_kind_pair);
      std::vector<std::string> anchors;
      for (std::size_t i : rng.sample_indices(paths.size(), take)) {
        pairs.push_back({paths[i].nodes[0], paths[i].nodes[1], true});
        anchors.push_back(paths[i].nodes[0]);
      }
      for (const auto& a : anchors) {
        try {
          const auto neg = sample_negatives(test_graph, a, dst, config.negative_candidates,
                                            derive_seed(seed, "relpred-neg"), Hardness::similar);
          pairs.push_back({neg.a, neg.b, false});
        } catch (const NoCandidatesError&) {
        }
      }
    }
    const Template& pos = *pos_t.front();
    const Template& neg = *neg_t.front();
    std::vector<std::optional<ClassificationItem>> built(pairs.size());
    std::vector<ForgeTally> tallies(pairs.size());
    std::vector<std::exception_ptr> errors(pairs.size());
    const auto n = static_cast<std::ptrdiff_t>(pairs.size());
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
      try {
        const Entity& a = g.node(pairs[i].a);
        const Entity& b = g.node(pairs[i].b);
        Bindings bind{{"a_name", a.name},         {"a_id", a.id}, {"a_kind", std::string(display_name(a.kind))},
                      {"a_description", a.description}, {"b_name", b.name}, {"b_id", b.id},
                      {"b_kind", std::string(display_name(b.kind))}, {"b_description", b.description}};
        if (a.description.empty() || b.description.empty()) continue;
        const std::string context = a.id + ": " + a.description + "\n\n" + b.id + ": " + b.description;
        auto explain = [&](const Template& t) -> std::optional<std::string> {
          auto passage = author_passage(link, render_pattern(*t.teacher_prompt, bind), context,
                                        render_pattern(t.instructions.front(), bind), "relpred:" + t.name, tallies[i]);
          if (!passage) return std::nullopt;
          Bindings full = bind;
          full["passage"] = *passage;
          return trim(render_pattern(t.output, full));
        };
        const auto yes = explain(pos);
        const auto no = explain(neg);
        if (!yes || !no || *yes == *no) continue;
        ClassificationItem item;
        item.task = "cti_relationship_prediction";
        item.input = label(a) + ": " + a.description + "\n" + label(b) + ": " + b.description +
                     "\nWhich explanation of the relationship between these entities is correct?";
        item.label = pairs[i].related ? *yes : *no;
        item.label_vocabulary = {*yes, *no};
        if (Rng(derive_seed(seed, "relpred-order:" + a.id + ">" + b.id)).below(2) == 1) {
          std::swap(item.label_vocabulary[0], item.label_vocabulary[1]);
        }
        item.source_ids = {a.id, b.id};
        built[i] = std::move(item);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      sets.tally.merge(tallies[i]);
      if (built[i]) sets.tasks["cti_relationship_prediction"].push_back(std::move(*built[i]));
    }
  }

  // Entity classification: does the description belong to the named entity?
  for (EntityKind kind : {EntityKind::tactic, EntityKind::technique, EntityKind::subtechnique, EntityKind::software,
                          EntityKind::group, EntityKind::mitigation, EntityKind::capec, EntityKind::cwe}) {
    const auto members = test_nodes(kind);
    for (const Entity* e : members) {
      if (trim(e->description).empty()) continue;
      Rng rng(derive_seed(seed, "entity-class:" + e->id));
      const Entity* described = e;
      if (rng.below(2) == 1 && members.size() > 1) {
        std::vector<const Entity*> others;
        for (const Entity* o : members) {
          if (o != e && !trim(o->description).empty() && o->description != e->description) others.push_back(o);
        }
        if (!others.empty()) described = others[rng.below(others.size())];
      }
      ClassificationItem item;
      item.task = "cti_entity_classification";
      item.input = "Entity: " + label(*e) + " (" + std::string(display_name(e->kind)) + ")\nDescription: " +
                   described->description + "\nIs the description related to the entity?";
      item.label = described == e ? "yes" : "no";
      item.label_vocabulary = {"yes", "no"};
      item.source_ids = {e->id};
      if (described != e) item.source_ids.push_back(described->id);
      sets.tasks["cti_entity_classification"].push_back(std::move(item));
    }
  }

  for (const Entity* e : test_nodes(EntityKind::cwe)) {
    if (!e->has_attr("extended_description") || trim(e->description).empty()) continue;
    sets.tasks["cwe_summarization"].push_back(
        SummarizationItem{"cwe_summarization", e->attr_text("extended_description"), e->description, {e->id}});
  }

  for (auto& [name, items] : sets.tasks) {
    if (config.max_items_per_task > 0 && items.size() > config.max_items_per_task) {
      Rng rng(derive_seed(seed, "cap:" + name));
      auto keep = rng.sample_indices(items.size(), config.max_items_per_task);
      std::sort(keep.begin(), keep.end());
      std::vector<EvalItem> kept;
      for (std::size_t i : keep) kept.push_back(std::move(items[i]));
      items = std::move(kept);
    }
    if (items.size() < config.min_items_per_task) {
      sets.warnings.push_back("task " + name + " has " + std::to_string(items.size()) + " items (wanted at least " +
                              std::to_string(config.min_items_per_task) + ")");
    }
  }
  return sets;
}

}  // namespace secforge
