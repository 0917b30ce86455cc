#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "secforge/graph.hpp"
#include "secforge/items.hpp"
#include "secforge/teacher.hpp"
#include "secforge/templates.hpp"

namespace secforge {

struct OptionVocabulary {
  std::string id;
  std::string kind;
  std::vector<std::string> members;

  bool contains(std::string_view option) const;
  // Throws PreconditionError unless there are at least 4 distinct members.
  void validate() const;
};

// Names of every node of `kind`, in id order, de-duplicated.
OptionVocabulary vocabulary_of_kind(const CtiGraph& g, EntityKind kind);

// The eight CWE technical impacts.
OptionVocabulary impact_vocabulary();

// Binary query for one false option: the scorer picks between the correct option (1) and it (2).
std::string binary_query(std::string_view question, std::string_view correct, std::string_view false_option);

/// Scores every false option of `vocab` against `correct` with one binary query each and
/// keeps the m options the scorer is most likely to pick over the correct one
/// (highest log-likelihood of label "2"; ties by ascending text). CapabilityError propagates.
std::vector<std::pair<std::string, double>> select_adversarial_distractors(std::string_view question,
                                                                           const std::string& correct,
                                                                           const OptionVocabulary& vocab,
                                                                           TeacherGateway& scorer, std::size_t m = 3);

// Top m of (option, score) pairs by descending score, ties by ascending option text.
std::vector<std::pair<std::string, double>> top_distractors(std::vector<std::pair<std::string, double>> scored,
                                                            std::size_t m);

struct McqRequest {
  std::string task;
  std::string question;
  std::vector<std::string> correct;  // vocabulary members the source maps to
  std::vector<std::string> source_ids;
  bool require_unique = true;  // more than one correct member makes the item ambiguous
};

struct McqOutcome {
  std::optional<McqItem> item;
  std::string skip_reason;
};

/// Four-option item over `vocab`. With several correct members (and require_unique off)
/// the smallest is asked and the others never appear as distractors. Distractors are
/// adversarial when `scorer` is given, otherwise a seeded uniform draw; the answer
/// position is drawn uniformly from the seed.
McqOutcome build_mcq_item(const McqRequest& request, const OptionVocabulary& vocab, TeacherGateway* scorer,
                          std::uint64_t seed);

struct EvalSetConfig {
  bool adversarial = true;
  std::size_t max_items_per_task = 0;  // 0: no cap
  std::size_t min_items_per_task = 1;  // fewer triggers a shortfall warning
  std::size_t negatives_per_kind_pair = 25;
  std::size_t negative_candidates = 10;
};

struct EvalSets {
  std::map<std::string, std::vector<EvalItem>> tasks;
  std::vector<std::string> warnings;
  std::vector<std::string> skipped;
  ForgeTally tally;
};

// Names of the seven constructible evaluation tasks.
const std::vector<std::string>& eval_task_names();

/// Builds every evaluation task from the test-split members of `g`. Option vocabularies
/// span the whole graph; questions, explanations and pairs use test ids only.
EvalSets build_eval_sets(const CtiGraph& g, const std::unordered_set<std::string>& test_ids, TeacherGateway& scorer,
                         const TeacherLink& link, const EvalSetConfig& config, std::uint64_t seed,
                         const TemplateRegistry& registry = TemplateRegistry::builtin());

}  // namespace secforge
