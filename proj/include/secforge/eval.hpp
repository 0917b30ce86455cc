#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "secforge/items.hpp"
#include "secforge/teacher.hpp"

namespace secforge {

struct RougeScores {
  double rouge1 = 0.0;
  double rouge2 = 0.0;
  double rougeL = 0.0;
  bool empty_convention = false;  // both sides had no tokens; scored 1.0 by convention

  double mean() const { return (rouge1 + rouge2 + rougeL) / 3.0; }
};

// F1 ROUGE-1/2/L over lower-cased alphanumeric tokens.
// When both n-gram multisets are empty the score is 1.0 if the token lists are equal, else 0.0.
RougeScores rouge(std::string_view candidate, std::string_view reference);
RougeScores rouge_tokens(const std::vector<std::string>& candidate, const std::vector<std::string>& reference);

class EmptyReportError : public Error {
 public:
  using Error::Error;
};

struct McqChoice {
  std::size_t index = 0;
  bool tie = false;
};

// Question, lettered options and "Answer:"; the option letters are what gets scored.
std::string mcq_context(const McqItem& item);
std::string classification_context(const ClassificationItem& item);

// Argmax over the scored option letters; ties go to the lowest index and are flagged.
// Returns nullopt when the model cannot score (the item is then unscored).
std::optional<McqChoice> score_mcq(const McqItem& item, TeacherGateway& model, const std::string& prefix = {});
std::optional<bool> score_classification(const ClassificationItem& item, TeacherGateway& model,
                                         const std::string& prefix = {});
RougeScores score_summarization(const SummarizationItem& item, TeacherGateway& model, const std::string& prefix = {});

struct TaskResult {
  std::string task;
  std::string kind;  // mcq | classification | summarization
  std::size_t items = 0;
  std::size_t scored = 0;
  std::size_t unscored = 0;
  std::size_t ties = 0;
  std::size_t correct = 0;
  RougeScores rouge_mean{};

  double accuracy() const { return scored == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(scored); }
  // Summarization collapses to mean(rouge1, rouge2, rougeL); other kinds report accuracy.
  double value() const { return kind == "summarization" ? rouge_mean.mean() : accuracy(); }
};

struct EvalReport {
  std::vector<TaskResult> tasks;
  double overall = 0.0;
  std::string model;
  std::string timestamp;
  std::string config_digest;
};

// Unweighted mean of per-task values over tasks with at least one scored item.
EvalReport aggregate(std::vector<TaskResult> tasks, std::string model = {}, std::string timestamp = {},
                     std::string config_digest = {});

json to_json(const EvalReport& report);

struct EvalOptions {
  // Prepended to every prompt. Empty keeps evaluation zero-shot.
  std::string few_shot_prefix;
};

TaskResult evaluate_task(const std::string& task, const std::vector<EvalItem>& items, TeacherGateway& model,
                         const EvalOptions& options = {});

// Scores every <task>.jsonl in dir (sorted by file name).
EvalReport evaluate_directory(const std::filesystem::path& dir, TeacherGateway& model, const EvalOptions& options = {},
                              std::string timestamp = {}, std::string config_digest = {});

}  // namespace secforge
