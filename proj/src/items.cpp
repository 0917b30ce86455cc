#include "secforge/items.hpp"

#include <set>
#include <sstream>

#include "secforge/common.hpp"

namespace secforge {
namespace {

json metadata_for(const std::vector<std::string>& source_ids) {
  json m;
  m["source_ids"] = source_ids;
  return m;
}

std::vector<std::string> source_ids_of(const json& j) {
  if (!j.contains("metadata") || !j["metadata"].contains("source_ids")) return {};
  return j["metadata"]["source_ids"].get<std::vector<std::string>>();
}

}  // namespace

std::string_view item_kind(const EvalItem& item) {
  switch (item.index()) {
    case 0: return "mcq";
    case 1: return "classification";
    default: return "summarization";
  }
}

const std::string& item_task(const EvalItem& item) {
  return std::visit([](const auto& i) -> const std::string& { return i.task; }, item);
}

const std::vector<std::string>& item_source_ids(const EvalItem& item) {
  return std::visit([](const auto& i) -> const std::vector<std::string>& { return i.source_ids; }, item);
}

void validate(const McqItem& item) {
  if (item.options.size() != 4) throw PreconditionError("MCQ item needs exactly 4 options");
  if (item.answer_index >= item.options.size()) throw PreconditionError("MCQ answer index out of range");
  if (std::set<std::string>(item.options.begin(), item.options.end()).size() != item.options.size()) {
    throw PreconditionError("MCQ options must be pairwise distinct");
  }
  if (item.adversarial && (!item.distractor_scores || item.distractor_scores->size() != 3)) {
    throw PreconditionError("adversarial MCQ item needs scores for its 3 distractors");
  }
}

json to_json(const EvalItem& item) {
  json j;
  if (const auto* m = std::get_if<McqItem>(&item)) {
    j["task"] = m->task;
    j["question"] = m->question;
    j["options"] = m->options;
    j["answer_index"] = m->answer_index;
    json meta = metadata_for(m->source_ids);
    meta["vocabulary"] = m->option_vocabulary_id;
    meta["adversarial"] = m->adversarial;
    if (!m->reference_model.empty()) meta["reference_model"] = m->reference_model;
    if (m->distractor_scores) {
      json scores = json::array();
      for (const auto& [option, lp] : *m->distractor_scores) scores.push_back({{"option", option}, {"logprob", lp}});
      meta["distractor_scores"] = std::move(scores);
    }
    j["metadata"] = std::move(meta);
  } else if (const auto* c = std::get_if<ClassificationItem>(&item)) {
    j["task"] = c->task;
    j["input"] = c->input;
    j["label"] = c->label;
    j["label_vocabulary"] = c->label_vocabulary;
    j["metadata"] = metadata_for(c->source_ids);
  } else {
    const auto& s = std::get<SummarizationItem>(item);
    j["task"] = s.task;
    j["input"] = s.input;
    j["reference"] = s.reference;
    j["metadata"] = metadata_for(s.source_ids);
  }
  return j;
}

EvalItem eval_item_from_json(const json& j) {
  try {
    if (j.contains("options")) {
      McqItem m;
      m.task = j.at("task").get<std::string>();
      m.question = j.at("question").get<std::string>();
      m.options = j.at("options").get<std::vector<std::string>>();
      m.answer_index = j.at("answer_index").get<std::size_t>();
      m.source_ids = source_ids_of(j);
      if (j.contains("metadata")) {
        const auto& meta = j["metadata"];
        m.option_vocabulary_id = meta.value("vocabulary", "");
        m.adversarial = meta.value("adversarial", false);
        m.reference_model = meta.value("reference_model", "");
        if (meta.contains("distractor_scores")) {
          std::vector<std::pair<std::string, double>> scores;
          for (const auto& s : meta["distractor_scores"]) {
            scores.emplace_back(s.at("option").get<std::string>(), s.at("logprob").get<double>());
          }
          m.distractor_scores = std::move(scores);
        }
      }
      return m;
    }
    if (j.contains("label")) {
      ClassificationItem c;
      c.task = j.at("task").get<std::string>();
      c.input = j.at("input").get<std::string>();
      c.label = j.at("label").get<std::string>();
      c.label_vocabulary = j.at("label_vocabulary").get<std::vector<std::string>>();
      c.source_ids = source_ids_of(j);
      return c;
    }
    if (j.contains("reference")) {
      SummarizationItem s;
      s.task = j.at("task").get<std::string>();
      s.input = j.at("input").get<std::string>();
      s.reference = j.at("reference").get<std::string>();
      s.source_ids = source_ids_of(j);
      return s;
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed eval item: ") + e.what());
  }
  throw ParseError("eval item is neither mcq, classification nor summarization");
}

std::string items_to_jsonl(const std::vector<EvalItem>& items) {
  std::string out;
  for (const auto& item : items) {
    out += to_json(item).dump();
    out.push_back('\n');
  }
  return out;
}

std::vector<EvalItem> items_from_jsonl(std::string_view text) {
  std::vector<EvalItem> out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError("eval line " + std::to_string(line_no) + ": " + e.what());
    }
    out.push_back(eval_item_from_json(j));
  }
  return out;
}

}  // namespace secforge
