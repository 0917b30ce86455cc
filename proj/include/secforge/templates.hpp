#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "secforge/graph.hpp"
#include "secforge/record.hpp"
#include "secforge/sdg.hpp"
#include "secforge/teacher.hpp"

namespace secforge {

using Bindings = std::map<std::string, std::string>;

/// One instruction schema. Patterns reference slots as `{slot}`; every referenced slot
/// must be declared. The slot `passage` is authored by the teacher from `teacher_prompt`
/// (or bound from stored relationship text) and is therefore exempt from the
/// applicability check.
struct Template {
  std::string name;
  std::string scope;
  TaskType task_type = TaskType::open_qa;
  std::vector<EntityKind> kinds;  // subject kinds; empty means any
  std::vector<std::string> categories;  // document categories; empty means any
  std::optional<Relation> relation;
  bool outgoing = true;  // relation as stated by the subject (false: stated by the target)
  std::vector<EntityKind> target_kinds;  // empty means any
  std::vector<std::string> slots;
  std::vector<std::string> instructions;  // paraphrase variants
  std::string input;
  std::string output;
  std::optional<std::string> teacher_prompt;

  bool applies_to(EntityKind kind) const;
  bool needs_teacher() const { return teacher_prompt.has_value(); }
};

class TemplateRegistry {
 public:
  // Throws ParseError for a malformed definition or an undeclared slot.
  static TemplateRegistry from_json(const json& j);
  static TemplateRegistry from_file(const std::string& path);
  // The definition file compiled into the binary.
  static const TemplateRegistry& builtin();

  const std::vector<Template>& all() const { return templates_; }
  const Template& named(std::string_view name) const;
  std::vector<const Template*> scope(std::string_view scope) const;

 private:
  std::vector<Template> templates_;
};

// Replaces every `{slot}`; throws PreconditionError for an unbound slot.
std::string render_pattern(std::string_view pattern, const Bindings& slots);
// Slots named in a pattern, in order of first use.
std::vector<std::string> pattern_slots(std::string_view pattern);

// name, id, description, kind, plus every attribute under its own key
// (lists joined with "; ") and as `<key>_list` (one "- item" line per member).
Bindings entity_slots(const Entity& e);

// Source category of records derived from one entity.
std::string source_category_for(const Entity& e);

// Deterministic paraphrase choice for a template and a record key.
std::size_t variant_index(const Template& t, std::string_view key, std::uint64_t seed);

std::vector<InstructionRecord> render_characteristics(const Entity& e, const TemplateRegistry& registry,
                                                      std::uint64_t seed);
std::vector<InstructionRecord> render_intra_relations(const CtiGraph& g, const Entity& e,
                                                      const TemplateRegistry& registry, std::uint64_t seed);
std::vector<InstructionRecord> render_document(const Entity& doc, const TemplateRegistry& registry,
                                               std::uint64_t seed);

struct CoTStep {
  std::string from;
  Relation relation = Relation::uses;
  std::string to;
  std::string explanation;
};

struct CoTChain {
  std::vector<CoTStep> steps;
  std::string question;
  std::string final_answer;
  std::string final_answer_id;
};

class ChainIncompleteError : public Error {
 public:
  using Error::Error;
};

// "Step i: ..." lines followed by "Answer: ...".
std::string render_chain(const CtiGraph& g, const CoTChain& chain);

// True when every step is an edge of g with the stated label, steps are contiguous
// and the last step ends at final_answer_id.
bool chain_consistent(const CtiGraph& g, const CoTChain& chain);

// Sentence describing a stored relationship in the direction the source stated it.
std::string relation_sentence(const CtiGraph& g, std::string_view from, Relation relation, std::string_view to);

struct SoftwareUsage {
  std::string software;
  std::string subtechnique;
};

// Every stated (software uses subtechnique) pair, sorted.
std::vector<SoftwareUsage> software_usages(const CtiGraph& g);

// software -> subtechnique -> technique -> tactic, explained from stored text only.
// Picks the smallest tactic id unless `tactic` is given. Throws ChainIncompleteError naming the missing hop.
CoTChain build_attack_cot(const CtiGraph& g, const SoftwareUsage& usage,
                          const std::optional<std::string>& tactic = std::nullopt);

// One chain per (usage, tactic); incomplete usages are skipped.
std::vector<CoTChain> build_attack_cots(const CtiGraph& g);

std::vector<InstructionRecord> render_attack_cot(const CtiGraph& g, const CoTChain& chain,
                                                 const TemplateRegistry& registry, std::uint64_t seed);

// Teacher-side bookkeeping for template builders.
struct ForgeTally {
  std::size_t attempts = 0;
  std::size_t refused = 0;
  std::size_t rejected = 0;
  std::size_t dropped = 0;
  std::size_t transport_failures = 0;
  std::vector<std::string> record_errors;
  std::vector<AuditEntry> audit;

  void merge(const ForgeTally& other);
  json summary() const;
};

struct TeacherLink {
  TeacherGateway& author;
  TeacherGateway& evaluator;
};

// Authors a passage and gates it with one evaluator check; one retry, then nullopt.
std::optional<std::string> author_passage(const TeacherLink& link, const std::string& prompt,
                                          const std::string& context, const std::string& question,
                                          const std::string& tag, ForgeTally& tally);

enum class BronFamily { direct, indirect, type_to_node, type_to_type, two_step };

std::string_view to_string(BronFamily f);
const std::vector<BronFamily>& all_bron_families();

// Per-hop explanations for a multi-hop path; nullopt when a hop cannot be explained.
std::optional<CoTChain> build_path_cot(const CtiGraph& g, const Path& path, const TeacherLink& link,
                                       const TemplateRegistry& registry, ForgeTally& tally);

std::vector<InstructionRecord> build_bron_instructions(const CtiGraph& g, const std::vector<Path>& paths,
                                                       const std::vector<NegativePair>& negatives,
                                                       const TeacherLink& link, BronFamily family,
                                                       const TemplateRegistry& registry, std::uint64_t seed,
                                                       ForgeTally& tally);

enum class RuleTask { ttp_reasoning, detection_explanation, attack_mapping, rule_generation };

std::string_view to_string(RuleTask t);
const std::vector<RuleTask>& all_rule_tasks();

// Throws PreconditionError unless rule is a sigma_rule or detection_rule.
std::vector<InstructionRecord> build_rule_instructions(const Entity& rule, const CtiGraph& g, const TeacherLink& link,
                                                       RuleTask task, const TemplateRegistry& registry,
                                                       std::uint64_t seed, ForgeTally& tally);

}  // namespace secforge
