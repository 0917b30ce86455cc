#pragma once

#include <optional>
#include <string>
#include <vector>

#include "secforge/entity.hpp"

namespace secforge {

enum class TaskType {
  open_qa,
  closed_qa,
  yes_no,
  multi_choice,
  cot,
  summarization,
  logic_validation,
  odd_one_out,
  question_generation,
  rule_explanation,
  rule_generation,
  ttp_mapping,
  relationship,
};

std::string_view to_string(TaskType t);
std::optional<TaskType> parse_task_type(std::string_view text);

enum class Stage { schema, sdg };

std::string_view to_string(Stage s);

// Source categories, one per corpus row of the dataset inventory.
const std::vector<std::string>& source_categories();
bool is_source_category(std::string_view c);

struct Generation {
  Stage stage = Stage::schema;
  int iteration = 0;
  std::optional<std::string> parent_id;
  std::optional<std::string> teacher_model;
  // "template", "template+teacher", "evol:<op>" or "self_instruct".
  std::string method = "template";

  friend bool operator==(const Generation&, const Generation&) = default;
};

struct InstructionRecord {
  std::string id;
  std::string instruction;
  std::string input;
  std::string output;
  TaskType task_type = TaskType::open_qa;
  std::string source_category;
  std::optional<std::string> grounding_doc_id;
  Generation generation;
  std::size_t output_length = 0;  // whitespace tokens of output
  std::vector<std::string> lineage_ids;  // entity ids the record was derived from
  std::string template_name;

  friend bool operator==(const InstructionRecord&, const InstructionRecord&) = default;
};

// Sets output_length and derives id from content, template, grounding and lineage.
void finalize(InstructionRecord& r);

// Throws PreconditionError naming the first broken invariant.
void validate(const InstructionRecord& r);

json to_json(const InstructionRecord& r);
InstructionRecord record_from_json(const json& j);

std::string records_to_jsonl(const std::vector<InstructionRecord>& records);
std::vector<InstructionRecord> records_from_jsonl(std::string_view text);

}  // namespace secforge
