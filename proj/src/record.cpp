#include "secforge/record.hpp"

#include <algorithm>
#include <array>
#include <sstream>

#include "secforge/common.hpp"

namespace secforge {
namespace {

constexpr std::array<std::pair<TaskType, std::string_view>, 13> kTaskNames{{
    {TaskType::open_qa, "open_qa"},
    {TaskType::closed_qa, "closed_qa"},
    {TaskType::yes_no, "yes_no"},
    {TaskType::multi_choice, "multi_choice"},
    {TaskType::cot, "cot"},
    {TaskType::summarization, "summarization"},
    {TaskType::logic_validation, "logic_validation"},
    {TaskType::odd_one_out, "odd_one_out"},
    {TaskType::question_generation, "question_generation"},
    {TaskType::rule_explanation, "rule_explanation"},
    {TaskType::rule_generation, "rule_generation"},
    {TaskType::ttp_mapping, "ttp_mapping"},
    {TaskType::relationship, "relationship"},
}};

}  // namespace

std::string_view to_string(TaskType t) {
  for (const auto& [v, name] : kTaskNames) {
    if (v == t) return name;
  }
  return "open_qa";
}

std::optional<TaskType> parse_task_type(std::string_view text) {
  for (const auto& [v, name] : kTaskNames) {
    if (name == text) return v;
  }
  return std::nullopt;
}

std::string_view to_string(Stage s) { return s == Stage::schema ? "schema" : "sdg"; }

const std::vector<std::string>& source_categories() {
  static const std::vector<std::string> cats{"attack", "cwe",   "cve",  "capec", "wiki",          "interview",
                                             "threat_report", "bron", "siem", "sigma", "stack_exchange"};
  return cats;
}

bool is_source_category(std::string_view c) {
  const auto& cats = source_categories();
  return std::find(cats.begin(), cats.end(), c) != cats.end();
}

void finalize(InstructionRecord& r) {
  r.output_length = whitespace_token_count(r.output);
  std::string key = r.template_name + "\x1f" + r.instruction + "\x1f" + r.input + "\x1f" + r.output + "\x1f" +
                    r.grounding_doc_id.value_or("") + "\x1f" + join(r.lineage_ids, ",") + "\x1f" +
                    std::string(to_string(r.generation.stage)) + "\x1f" + r.generation.parent_id.value_or("");
  r.id = "rec-" + short_digest(key);
}

void validate(const InstructionRecord& r) {
  if (trim(r.instruction).empty()) throw PreconditionError("record " + r.id + " has an empty instruction");
  if (trim(r.output).empty()) throw PreconditionError("record " + r.id + " has an empty output");
  if (r.generation.stage == Stage::schema && r.generation.iteration != 0) {
    throw PreconditionError("schema-stage record " + r.id + " has a non-zero iteration");
  }
  if (r.generation.stage == Stage::sdg && (r.generation.iteration < 1 || !r.generation.parent_id)) {
    throw PreconditionError("sdg record " + r.id + " lacks lineage");
  }
  if (!is_source_category(r.source_category)) {
    throw PreconditionError("record " + r.id + " has unknown source category '" + r.source_category + "'");
  }
  if (!r.grounding_doc_id) throw PreconditionError("record " + r.id + " has no grounding document");
  if (r.output_length != whitespace_token_count(r.output)) {
    throw PreconditionError("record " + r.id + " has a stale output_length");
  }
}

json to_json(const InstructionRecord& r) {
  json j;
  j["id"] = r.id;
  j["instruction"] = r.instruction;
  j["input"] = r.input;
  j["output"] = r.output;
  j["task_type"] = std::string(to_string(r.task_type));
  j["source_category"] = r.source_category;
  j["grounding_doc_id"] = r.grounding_doc_id ? json(*r.grounding_doc_id) : json(nullptr);
  json g;
  g["stage"] = std::string(to_string(r.generation.stage));
  g["iteration"] = r.generation.iteration;
  g["parent_id"] = r.generation.parent_id ? json(*r.generation.parent_id) : json(nullptr);
  g["teacher_model"] = r.generation.teacher_model ? json(*r.generation.teacher_model) : json(nullptr);
  g["method"] = r.generation.method;
  j["generation"] = std::move(g);
  j["output_length"] = r.output_length;
  j["lineage_ids"] = r.lineage_ids;
  j["template"] = r.template_name;
  return j;
}

InstructionRecord record_from_json(const json& j) {
  InstructionRecord r;
  try {
    r.id = j.at("id").get<std::string>();
    r.instruction = j.at("instruction").get<std::string>();
    r.input = j.value("input", "");
    r.output = j.at("output").get<std::string>();
    const auto t = parse_task_type(j.at("task_type").get<std::string>());
    if (!t) throw ParseError("unknown task_type in record " + r.id);
    r.task_type = *t;
    r.source_category = j.at("source_category").get<std::string>();
    if (j.contains("grounding_doc_id") && !j["grounding_doc_id"].is_null()) {
      r.grounding_doc_id = j["grounding_doc_id"].get<std::string>();
    }
    const auto& g = j.at("generation");
    r.generation.stage = g.at("stage").get<std::string>() == "sdg" ? Stage::sdg : Stage::schema;
    r.generation.iteration = g.at("iteration").get<int>();
    if (g.contains("parent_id") && !g["parent_id"].is_null()) r.generation.parent_id = g["parent_id"].get<std::string>();
    if (g.contains("teacher_model") && !g["teacher_model"].is_null()) {
      r.generation.teacher_model = g["teacher_model"].get<std::string>();
    }
    r.generation.method = g.value("method", "template");
    r.output_length = j.at("output_length").get<std::size_t>();
    r.lineage_ids = j.value("lineage_ids", std::vector<std::string>{});
    r.template_name = j.value("template", "");
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed instruction record: ") + e.what());
  }
  return r;
}

std::string records_to_jsonl(const std::vector<InstructionRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    out += to_json(r).dump();
    out.push_back('\n');
  }
  return out;
}

std::vector<InstructionRecord> records_from_jsonl(std::string_view text) {
  std::vector<InstructionRecord> out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      out.push_back(record_from_json(json::parse(line)));
    } catch (const json::parse_error& e) {
      throw ParseError("record line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace secforge
