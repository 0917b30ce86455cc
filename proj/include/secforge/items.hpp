#pragma once

#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "secforge/entity.hpp"

namespace secforge {

struct McqItem {
  std::string task;
  std::string question;
  std::vector<std::string> options;  // exactly 4
  std::size_t answer_index = 0;
  std::string option_vocabulary_id;
  std::optional<std::vector<std::pair<std::string, double>>> distractor_scores;
  std::vector<std::string> source_ids;
  bool adversarial = false;
  std::string reference_model;
};

struct ClassificationItem {
  std::string task;
  std::string input;
  std::string label;
  std::vector<std::string> label_vocabulary;
  std::vector<std::string> source_ids;
};

struct SummarizationItem {
  std::string task;
  std::string input;
  std::string reference;
  std::vector<std::string> source_ids;
};

using EvalItem = std::variant<McqItem, ClassificationItem, SummarizationItem>;

std::string_view item_kind(const EvalItem& item);  // "mcq", "classification", "summarization"
const std::string& item_task(const EvalItem& item);
const std::vector<std::string>& item_source_ids(const EvalItem& item);

// Throws PreconditionError when an MCQ breaks its invariants (4 distinct options, index in range).
void validate(const McqItem& item);

json to_json(const EvalItem& item);
// Shape is inferred from the fields present; throws ParseError on a line that fits none.
EvalItem eval_item_from_json(const json& j);

std::string items_to_jsonl(const std::vector<EvalItem>& items);
std::vector<EvalItem> items_from_jsonl(std::string_view text);

}  // namespace secforge
