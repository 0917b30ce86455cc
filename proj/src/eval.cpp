#include "secforge/eval.hpp"

#include <algorithm>
#include <map>
#include <numeric>

namespace secforge {
namespace {

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

NgramCounts ngrams(const std::vector<std::string>& tokens, std::size_t n) {
  NgramCounts out;
  if (tokens.size() < n) return out;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++out[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                   tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return out;
}

double f1(std::size_t overlap, std::size_t cand_total, std::size_t ref_total) {
  if (overlap == 0 || cand_total == 0 || ref_total == 0) return 0.0;
  const double p = static_cast<double>(overlap) / static_cast<double>(cand_total);
  const double r = static_cast<double>(overlap) / static_cast<double>(ref_total);
  return 2.0 * p * r / (p + r);
}

double rouge_n(const std::vector<std::string>& cand, const std::vector<std::string>& ref, std::size_t n) {
  const auto c = ngrams(cand, n);
  const auto r = ngrams(ref, n);
  if (c.empty() && r.empty()) return cand == ref ? 1.0 : 0.0;
  std::size_t overlap = 0;
  std::size_t c_total = 0;
  std::size_t r_total = 0;
  for (const auto& [g, k] : c) {
    c_total += k;
    if (auto it = r.find(g); it != r.end()) overlap += std::min(k, it->second);
  }
  for (const auto& [g, k] : r) r_total += k;
  return f1(overlap, c_total, r_total);
}

std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0);
  std::vector<std::size_t> cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

std::string with_prefix(const std::string& prefix, std::string body) {
  return prefix.empty() ? body : prefix + "\n\n" + body;
}

const char* kLetters[] = {"A", "B", "C", "D", "E", "F", "G", "H", "I", "J", "K", "L", "M", "N", "O", "P"};

}  // namespace

RougeScores rouge_tokens(const std::vector<std::string>& candidate, const std::vector<std::string>& reference) {
  RougeScores s;
  s.rouge1 = rouge_n(candidate, reference, 1);
  s.rouge2 = rouge_n(candidate, reference, 2);
  if (candidate.empty() && reference.empty()) {
    s.rougeL = 1.0;
    s.empty_convention = true;
  } else {
    s.rougeL = f1(lcs_length(candidate, reference), candidate.size(), reference.size());
  }
  return s;
}

RougeScores rouge(std::string_view candidate, std::string_view reference) {
  return rouge_tokens(alnum_tokens(candidate), alnum_tokens(reference));
}

std::string mcq_context(const McqItem& item) {
  if (item.options.size() > std::size(kLetters)) throw PreconditionError("too many MCQ options");
  std::string out = item.question + "\n";
  for (std::size_t i = 0; i < item.options.size(); ++i) out += std::string(kLetters[i]) + ". " + item.options[i] + "\n";
  return out + "Answer:";
}

std::string classification_context(const ClassificationItem& item) {
  return item.input + "\nChoose one of: " + join(item.label_vocabulary, "; ") + "\nAnswer:";
}

std::optional<McqChoice> score_mcq(const McqItem& item, TeacherGateway& model, const std::string& prefix) {
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < item.options.size(); ++i) labels.emplace_back(std::string(" ") + kLetters[i]);
  std::vector<ScoredChoice> scores;
  try {
    scores = model.score_options(with_prefix(prefix, mcq_context(item)), labels);
  } catch (const CapabilityError&) {
    return std::nullopt;
  }
  McqChoice choice;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i].logprob > scores[choice.index].logprob) choice.index = i;
  }
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (i != choice.index && scores[i].logprob == scores[choice.index].logprob) choice.tie = true;
  }
  return choice;
}

std::optional<bool> score_classification(const ClassificationItem& item, TeacherGateway& model,
                                         const std::string& prefix) {
  if (item.label_vocabulary.size() < 2) throw PreconditionError("classification item needs a label vocabulary");
  std::vector<std::string> options;
  for (const auto& l : item.label_vocabulary) options.push_back(" " + l);
  std::vector<ScoredChoice> scores;
  try {
    scores = model.score_options(with_prefix(prefix, classification_context(item)), options);
  } catch (const CapabilityError&) {
    return std::nullopt;
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i].logprob > scores[best].logprob) best = i;
  }
  return item.label_vocabulary[best] == item.label;
}

RougeScores score_summarization(const SummarizationItem& item, TeacherGateway& model, const std::string& prefix) {
  auto req = make_request(Purpose::generate, "You are a concise cyber-security analyst.",
                          with_prefix(prefix, "Summarize the following text in one sentence.\n\n" + item.input),
                          "summarize");
  req.temperature = 0.0;
  req.max_output = 128;
  return rouge(model.complete(req).text, item.reference);
}

EvalReport aggregate(std::vector<TaskResult> tasks, std::string model, std::string timestamp,
                     std::string config_digest) {
  std::vector<double> values;
  for (const auto& t : tasks) {
    if (t.scored > 0) values.push_back(t.value());
  }
  if (values.empty()) throw EmptyReportError("no task has a scored item");
  // Summed in sorted order so the result does not depend on task order.
  std::sort(values.begin(), values.end());
  EvalReport r;
  r.overall = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  std::sort(tasks.begin(), tasks.end(), [](const TaskResult& a, const TaskResult& b) { return a.task < b.task; });
  r.tasks = std::move(tasks);
  r.model = std::move(model);
  r.timestamp = std::move(timestamp);
  r.config_digest = std::move(config_digest);
  return r;
}

json to_json(const EvalReport& report) {
  json j;
  j["model"] = report.model;
  if (!report.timestamp.empty()) j["timestamp"] = report.timestamp;
  if (!report.config_digest.empty()) j["config_digest"] = report.config_digest;
  json tasks = json::object();
  for (const auto& t : report.tasks) {
    json e;
    e["kind"] = t.kind;
    e["items"] = t.items;
    e["scored"] = t.scored;
    e["unscored"] = t.unscored;
    if (t.kind == "summarization") {
      e["rouge1"] = t.rouge_mean.rouge1;
      e["rouge2"] = t.rouge_mean.rouge2;
      e["rougeL"] = t.rouge_mean.rougeL;
    } else {
      e["correct"] = t.correct;
      e["accuracy"] = t.accuracy();
      e["ties"] = t.ties;
    }
    e["value"] = t.value();
    tasks[t.task] = std::move(e);
  }
  j["tasks"] = std::move(tasks);
  j["overall"] = report.overall;
  return j;
}

TaskResult evaluate_task(const std::string& task, const std::vector<EvalItem>& items, TeacherGateway& model,
                         const EvalOptions& options) {
  TaskResult r;
  r.task = task;
  r.items = items.size();
  if (items.empty()) return r;
  r.kind = std::string(item_kind(items.front()));

  struct Outcome {
    bool scored = false;
    bool correct = false;
    bool tie = false;
    RougeScores rouge{};
  };
  std::vector<Outcome> outcomes(items.size());
  std::vector<std::exception_ptr> errors(items.size());
  const auto n = static_cast<std::ptrdiff_t>(items.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    try {
      Outcome& o = outcomes[i];
      if (item_kind(items[i]) != r.kind) throw ParseError("task " + task + " mixes item shapes");
      if (const auto* m = std::get_if<McqItem>(&items[i])) {
        if (auto c = score_mcq(*m, model, options.few_shot_prefix)) {
          o.scored = true;
          o.correct = c->index == m->answer_index;
          o.tie = c->tie;
        }
      } else if (const auto* c = std::get_if<ClassificationItem>(&items[i])) {
        if (auto ok = score_classification(*c, model, options.few_shot_prefix)) {
          o.scored = true;
          o.correct = *ok;
        }
      } else {
        o.rouge = score_summarization(std::get<SummarizationItem>(items[i]), model, options.few_shot_prefix);
        o.scored = true;
      }
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  for (const auto& o : outcomes) {
    if (!o.scored) {
      ++r.unscored;
      continue;
    }
    ++r.scored;
    r.correct += o.correct ? 1 : 0;
    r.ties += o.tie ? 1 : 0;
    r.rouge_mean.rouge1 += o.rouge.rouge1;
    r.rouge_mean.rouge2 += o.rouge.rouge2;
    r.rouge_mean.rougeL += o.rouge.rougeL;
  }
  if (r.scored > 0) {
    const double k = static_cast<double>(r.scored);
    r.rouge_mean.rouge1 /= k;
    r.rouge_mean.rouge2 /= k;
    r.rouge_mean.rougeL /= k;
  }
  return r;
}

EvalReport evaluate_directory(const std::filesystem::path& dir, TeacherGateway& model, const EvalOptions& options,
                              std::string timestamp, std::string config_digest) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw Error("task directory does not exist: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".jsonl") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<TaskResult> results;
  for (const auto& f : files) {
    const auto items = items_from_jsonl(read_file(f.string()));
    results.push_back(evaluate_task(f.stem().string(), items, model, options));
  }
  return aggregate(std::move(results), model.model_name(), std::move(timestamp), std::move(config_digest));
}

}  // namespace secforge
