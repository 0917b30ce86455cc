#include "secforge/sdg.hpp"

#include <algorithm>
#include <cmath>

namespace secforge {
namespace {

constexpr const char* kRewriterRole =
    "You rewrite cyber-security instructions. Keep every rewritten instruction answerable from the given document.";
constexpr const char* kAnswerRole =
    "You are a cyber-security expert. Answer using only facts stated in the given document.";
constexpr const char* kEvaluatorRole =
    "You are a strict reviewer of cyber-security training data. Reply with a single word: yes or no.";

std::string describe(const InstructionRecord& r) {
  return r.input.empty() ? r.instruction : r.instruction + "\n" + r.input;
}

std::optional<std::string> ask(TeacherGateway& teacher, TeacherRequest req) {
  try {
    auto c = teacher.complete(req);
    if (is_refusal(c.text)) return std::nullopt;
    return trim(c.text);
  } catch (const TransportError&) {
    return std::nullopt;
  }
}

std::optional<std::string> answer(TeacherGateway& teacher, const std::string& doc, const std::string& instruction) {
  return ask(teacher, make_request(Purpose::generate, kAnswerRole,
                                   "#Document#\n" + doc + "\n\n#Instruction#\n" + instruction, "sdg_answer"));
}

// Pulls "Task type:" and "Instruction:" lines out of a self-instruct reply.
std::pair<std::optional<TaskType>, std::string> parse_new_task(const std::string& text) {
  std::optional<TaskType> type;
  std::string instruction;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    const std::string line = trim(std::string_view(text).substr(start, end - start));
    if (starts_with_icase(line, "task type:")) {
      type = parse_task_type(to_lower(trim(line.substr(10))));
    } else if (starts_with_icase(line, "instruction:")) {
      instruction = trim(line.substr(12));
    }
    start = end + 1;
  }
  return {type, instruction.empty() ? text : instruction};
}

const char* objective_question(Objective o) {
  switch (o) {
    case Objective::complexity:
      return "Is the new instruction more challenging, complex, rare or diverse than the original instruction?";
    case Objective::domain_grounding:
      return "Is the new instruction in the same domain as the original instruction, and can it be answered from "
             "the document?";
    case Objective::answer_grounding:
      return "Does the answer correctly answer the new instruction, and is every claim in it supported by the "
             "document?";
  }
  return "";
}

}  // namespace

const std::vector<EvolOperation>& evol_operations() {
  static const std::vector<EvolOperation> ops{
      {EvolOp::add_constraints, "add_constraints",
       "Rewrite the instruction so that it adds one more constraint or requirement the answer must satisfy."},
      {EvolOp::deepening, "deepening",
       "Rewrite the instruction so that it asks about the topic in greater depth and breadth."},
      {EvolOp::concretizing, "concretizing",
       "Rewrite the instruction so that it replaces general concepts with more specific ones from the document."},
      {EvolOp::increase_reasoning, "increase_reasoning",
       "Rewrite the instruction so that answering it explicitly requires multiple reasoning steps."},
      {EvolOp::complicate_input, "complicate_input",
       "Rewrite the instruction so that it includes a more complex input, such as an excerpt or scenario from the "
       "document."},
  };
  return ops;
}

double RouterState::p() const { return std::min(1.0, p0 * std::ldexp(1.0, std::max(0, t) / 2)); }

std::string_view to_string(Route r) { return r == Route::self_instruct ? "self_instruct" : "evol_in_depth"; }

Route route(const RouterState& state, double u) {
  if (state.t < 0 || !(state.p0 > 0.0 && state.p0 <= 1.0)) throw PreconditionError("invalid router state");
  return u < state.p() ? Route::self_instruct : Route::evol_in_depth;
}

std::string_view to_string(Objective o) {
  switch (o) {
    case Objective::complexity: return "complexity";
    case Objective::domain_grounding: return "domain_grounding";
    case Objective::answer_grounding: return "answer_grounding";
  }
  return "complexity";
}

std::optional<InstructionRecord> evolve(const InstructionRecord& parent, const std::string& doc,
                                        const EvolOperation& op, TeacherGateway& teacher) {
  if (!parent.grounding_doc_id) throw PreconditionError("evolve needs a parent with a grounding document");
  auto rewritten = ask(teacher, make_request(Purpose::generate, kRewriterRole,
                                             op.prompt + " Reply with the rewritten instruction only.\n\n#Document#\n" +
                                                 doc + "\n\n#Given Instruction#\n" + describe(parent),
                                             "evol_rewrite:" + op.name));
  if (!rewritten) return std::nullopt;
  auto reply = answer(teacher, doc, *rewritten);
  if (!reply) return std::nullopt;

  InstructionRecord child = parent;
  child.instruction = *rewritten;
  child.input.clear();
  child.output = *reply;
  child.generation.stage = Stage::sdg;
  child.generation.iteration = parent.generation.iteration + 1;
  child.generation.parent_id = parent.id;
  child.generation.teacher_model = teacher.model_name();
  child.generation.method = "evol:" + op.name;
  finalize(child);
  return child;
}

std::optional<InstructionRecord> self_instruct(const std::vector<InstructionRecord>& exemplars, const std::string& doc,
                                               TeacherGateway& teacher) {
  if (exemplars.empty()) throw PreconditionError("self_instruct needs at least one exemplar");
  const InstructionRecord& anchor = exemplars.front();
  if (!anchor.grounding_doc_id) throw PreconditionError("self_instruct exemplar has no grounding document");
  std::string prompt =
      "Here are example tasks from the same domain. Write one new task of a different kind that can be answered "
      "from the document. Reply as two lines: 'Task type: <type>' and 'Instruction: <text>'.\n\n#Examples#\n";
  for (const auto& e : exemplars) prompt += "- " + describe(e) + "\n";
  prompt += "\n#Document#\n" + doc;
  auto reply = ask(teacher, make_request(Purpose::generate, kRewriterRole, prompt, "self_instruct"));
  if (!reply) return std::nullopt;
  auto [type, instruction] = parse_new_task(*reply);
  instruction = trim(instruction);
  if (instruction.empty()) return std::nullopt;
  auto ans = answer(teacher, doc, instruction);
  if (!ans) return std::nullopt;

  InstructionRecord child;
  child.instruction = instruction;
  child.output = *ans;
  child.task_type = type.value_or(TaskType::open_qa);
  child.source_category = anchor.source_category;
  child.grounding_doc_id = anchor.grounding_doc_id;
  child.lineage_ids = anchor.lineage_ids;
  child.template_name = anchor.template_name;
  child.generation.stage = Stage::sdg;
  child.generation.iteration = anchor.generation.iteration + 1;
  child.generation.parent_id = anchor.id;
  child.generation.teacher_model = teacher.model_name();
  child.generation.method = "self_instruct";
  finalize(child);
  return child;
}

GateVerdict gate(const InstructionRecord& candidate, const InstructionRecord& parent, const std::string& doc,
                 TeacherGateway& evaluator) {
  if (trim(candidate.instruction).empty() || trim(candidate.output).empty()) {
    throw PreconditionError("gate needs a complete candidate");
  }
  GateVerdict v;
  const std::string body = "#Document#\n" + doc + "\n\n#Original Instruction#\n" + describe(parent) +
                           "\n\n#New Instruction#\n" + describe(candidate) + "\n\n#Answer#\n" + candidate.output;
  for (Objective o : {Objective::complexity, Objective::domain_grounding, Objective::answer_grounding}) {
    std::string reply;
    try {
      reply = evaluator
                  .complete(make_request(Purpose::evaluate, kEvaluatorRole,
                                         body + "\n\n#Question#\n" + objective_question(o),
                                         "gate:" + std::string(to_string(o))))
                  .text;
    } catch (const TransportError&) {
      v.deferred = true;
      return v;
    }
    const bool yes = parse_verdict(reply).value_or(false);
    v.audit.push_back({candidate.id, std::string(to_string(o)), trim(reply), yes});
    if (!yes) {
      v.failed = o;
      return v;
    }
  }
  v.accepted = true;
  return v;
}

bool verify_passage(TeacherGateway& evaluator, std::string_view context, std::string_view question,
                    std::string_view passage, std::vector<AuditEntry>* audit) {
  const std::string reply =
      evaluator
          .complete(make_request(Purpose::evaluate, kEvaluatorRole,
                                 "#Information#\n" + std::string(context) + "\n\n#Task#\n" + std::string(question) +
                                     "\n\n#Response#\n" + std::string(passage) +
                                     "\n\n#Question#\nIs the response correct and supported by the information?",
                                 "verify_passage"))
          .text;
  const bool yes = parse_verdict(reply).value_or(false);
  if (audit) audit->push_back({short_digest(passage), "passage", trim(reply), yes});
  return yes;
}

InstructionPool::InstructionPool(std::vector<InstructionRecord> seed) {
  for (auto& r : seed) append(std::move(r));
}

bool InstructionPool::append(InstructionRecord r) {
  if (index_.count(r.id)) return false;
  index_.emplace(r.id, records_.size());
  records_.push_back(std::move(r));
  return true;
}

const InstructionRecord* InstructionPool::find(std::string_view id) const {
  const auto it = index_.find(std::string(id));
  return it == index_.end() ? nullptr : &records_[it->second];
}

std::string InstructionPool::to_jsonl() const { return records_to_jsonl(records_); }

std::string InstructionPool::lineage_jsonl() const {
  std::string out;
  for (const auto& r : records_) {
    json j;
    j["id"] = r.id;
    j["parent_id"] = r.generation.parent_id ? json(*r.generation.parent_id) : json(nullptr);
    j["iteration"] = r.generation.iteration;
    j["method"] = r.generation.method;
    out += j.dump();
    out.push_back('\n');
  }
  return out;
}

std::string InstructionPool::audit_jsonl() const {
  std::string out;
  for (const auto& a : audit) {
    json j;
    j["candidate_id"] = a.candidate_id;
    j["check"] = a.check;
    j["answer"] = a.answer;
    j["passed"] = a.passed;
    out += j.dump();
    out.push_back('\n');
  }
  for (const auto& r : rejections) {
    json j;
    j["rejected"] = r.candidate_id;
    j["objective"] = r.objective;
    out += j.dump();
    out.push_back('\n');
  }
  return out;
}

void check_pool(const InstructionPool& pool) {
  std::unordered_map<std::string, std::set<std::string>> passed;
  for (const auto& a : pool.audit) {
    if (a.passed) passed[a.candidate_id].insert(a.check);
  }
  for (const auto& r : pool.records()) {
    if (r.generation.stage == Stage::schema) {
      if (r.generation.iteration != 0) throw PreconditionError("schema record " + r.id + " has iteration != 0");
      continue;
    }
    const auto* parent = r.generation.parent_id ? pool.find(*r.generation.parent_id) : nullptr;
    if (!parent) throw PreconditionError("sdg record " + r.id + " has no pooled parent");
    if (r.generation.iteration != parent->generation.iteration + 1) {
      throw PreconditionError("sdg record " + r.id + " skips an iteration");
    }
    if (r.grounding_doc_id != parent->grounding_doc_id) {
      throw PreconditionError("sdg record " + r.id + " changed grounding document");
    }
    if (passed[r.id].size() != 3) throw PreconditionError("sdg record " + r.id + " lacks three passing verdicts");
  }
}

const std::set<std::string>& default_sdg_categories() {
  static const std::set<std::string> cats{"wiki", "interview", "stack_exchange", "attack", "cwe", "cve", "capec"};
  return cats;
}

InstructionPool run_sdg(std::vector<InstructionRecord> seed_pool, const DocLookup& docs, const SdgConfig& config,
                        TeacherGateway& generator, TeacherGateway& evaluator, std::uint64_t seed) {
  if (seed_pool.empty()) throw PreconditionError("run_sdg needs a non-empty seed pool");
  if (config.max_iterations < 0) throw PreconditionError("max_iterations must be >= 0");
  const std::size_t budget = config.budget.value_or(
      static_cast<std::size_t>(std::llround(config.budget_ratio * static_cast<double>(seed_pool.size()))));
  InstructionPool pool(std::move(seed_pool));
  if (budget == 0) return pool;

  Rng rng(derive_seed(seed, "sdg"));
  std::size_t accepted = 0;
  double observed_rate = 0.5;
  const auto& ops = evol_operations();

  for (int t = 0; t < config.max_iterations && accepted < budget; ++t) {
    // Barrier: this iteration samples only from the pool as it stood at the end of t - 1.
    std::vector<std::size_t> parents;
    std::unordered_map<std::string, std::vector<std::size_t>> by_category;
    for (std::size_t i = 0; i < pool.records().size(); ++i) {
      const auto& r = pool.records()[i];
      if (r.generation.iteration >= config.max_iterations || !r.grounding_doc_id) continue;
      if (!config.categories.count(r.source_category)) continue;
      parents.push_back(i);
      by_category[r.source_category].push_back(i);
    }
    if (parents.empty()) break;

    const std::size_t remaining = budget - accepted;
    const auto iterations_left = static_cast<std::size_t>(config.max_iterations - t);
    const std::size_t target = (remaining + iterations_left - 1) / iterations_left;
    const auto attempts = std::min<std::size_t>(
        config.max_attempts_per_iteration,
        static_cast<std::size_t>(std::ceil(1.25 * static_cast<double>(target) / std::max(0.05, observed_rate))));

    struct Plan {
      std::size_t parent;
      Route route;
      std::size_t op;
      std::vector<std::size_t> extra_exemplars;
    };
    std::vector<Plan> plans;
    plans.reserve(attempts);
    const RouterState state{t, config.p0};
    for (std::size_t a = 0; a < attempts; ++a) {
      Plan p{parents[rng.below(parents.size())], Route::evol_in_depth, 0, {}};
      p.route = route(state, rng.uniform01());
      if (p.route == Route::evol_in_depth) {
        p.op = rng.below(ops.size());
      } else {
        const auto& same = by_category[pool.records()[p.parent].source_category];
        for (int k = 0; k < 2 && same.size() > 1; ++k) p.extra_exemplars.push_back(same[rng.below(same.size())]);
      }
      plans.push_back(std::move(p));
    }

    struct Outcome {
      std::optional<InstructionRecord> candidate;
      GateVerdict verdict;
    };
    std::vector<Outcome> outcomes(plans.size());
    const auto snapshot = pool.records();  // workers read a copy; appends happen after the barrier
    const auto n = static_cast<std::ptrdiff_t>(plans.size());
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
      const Plan& p = plans[i];
      const InstructionRecord& parent = snapshot[p.parent];
      const auto doc = docs(*parent.grounding_doc_id);
      if (!doc) continue;
      Outcome& o = outcomes[i];
      if (p.route == Route::evol_in_depth) {
        o.candidate = evolve(parent, *doc, ops[p.op], generator);
      } else {
        std::vector<InstructionRecord> exemplars{parent};
        for (std::size_t e : p.extra_exemplars) exemplars.push_back(snapshot[e]);
        o.candidate = self_instruct(exemplars, *doc, generator);
      }
      if (o.candidate) o.verdict = gate(*o.candidate, parent, *doc, evaluator);
    }

    std::size_t accepted_now = 0;
    for (auto& o : outcomes) {
      if (!o.candidate) {
        ++pool.generation_failures;
        continue;
      }
      if (o.verdict.deferred) {
        ++pool.deferred;
        continue;
      }
      if (!o.verdict.accepted) {
        pool.rejections.push_back({o.candidate->id, std::string(to_string(*o.verdict.failed))});
        pool.audit.insert(pool.audit.end(), o.verdict.audit.begin(), o.verdict.audit.end());
        continue;
      }
      if (accepted >= budget) break;
      if (!pool.append(*o.candidate)) {
        ++pool.duplicates;
        continue;
      }
      pool.audit.insert(pool.audit.end(), o.verdict.audit.begin(), o.verdict.audit.end());
      ++accepted;
      ++accepted_now;
    }
    observed_rate = plans.empty() ? observed_rate : static_cast<double>(accepted_now) / static_cast<double>(plans.size());
  }
  return pool;
}

}  // namespace secforge
