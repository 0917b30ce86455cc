#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "secforge/record.hpp"
#include "secforge/teacher.hpp"

namespace secforge {

enum class EvolOp { add_constraints, deepening, concretizing, increase_reasoning, complicate_input };

struct EvolOperation {
  EvolOp op;
  std::string name;
  std::string prompt;
};

// The five in-depth evolving operations, in enum order.
const std::vector<EvolOperation>& evol_operations();

struct RouterState {
  int t = 0;
  double p0 = 0.1;

  double p() const;  // min(1, p0 * 2^floor(t/2))
};

enum class Route { self_instruct, evol_in_depth };

std::string_view to_string(Route r);

// self_instruct iff u < p(t).
Route route(const RouterState& state, double u);

enum class Objective { complexity, domain_grounding, answer_grounding };

std::string_view to_string(Objective o);

struct AuditEntry {
  std::string candidate_id;
  std::string check;  // objective name, or "passage" for template passages
  std::string answer;
  bool passed = false;
};

struct GateVerdict {
  bool accepted = false;
  std::optional<Objective> failed;  // first objective answered "no"
  bool deferred = false;  // evaluator unreachable; neither accepted nor rejected
  std::vector<AuditEntry> audit;
};

// Rewrites `parent` with `op`, then has the teacher answer the new instruction from `doc`.
// Throws PreconditionError when the parent has no grounding document; returns nullopt
// on teacher failure or refusal.
std::optional<InstructionRecord> evolve(const InstructionRecord& parent, const std::string& doc,
                                        const EvolOperation& op, TeacherGateway& teacher);

// New task grounded in `doc`; exemplars[0] is recorded as the parent.
std::optional<InstructionRecord> self_instruct(const std::vector<InstructionRecord>& exemplars, const std::string& doc,
                                               TeacherGateway& teacher);

// Three sequential yes/no evaluator calls; stops at the first "no".
GateVerdict gate(const InstructionRecord& candidate, const InstructionRecord& parent, const std::string& doc,
                 TeacherGateway& evaluator);

// Single yes/no correctness check for a teacher-authored passage in a template record.
bool verify_passage(TeacherGateway& evaluator, std::string_view context, std::string_view question,
                    std::string_view passage, std::vector<AuditEntry>* audit = nullptr);

struct Rejection {
  std::string candidate_id;
  std::string objective;
};

/// Append-only pool with its rejection ledger and evaluator audit log.
class InstructionPool {
 public:
  InstructionPool() = default;
  explicit InstructionPool(std::vector<InstructionRecord> seed);

  // Returns false (and stores nothing) for a record id already in the pool.
  bool append(InstructionRecord r);

  const std::vector<InstructionRecord>& records() const { return records_; }
  const InstructionRecord* find(std::string_view id) const;

  std::vector<Rejection> rejections;
  std::vector<AuditEntry> audit;
  std::size_t deferred = 0;
  std::size_t generation_failures = 0;
  std::size_t duplicates = 0;

  std::string to_jsonl() const;
  std::string lineage_jsonl() const;  // {id, parent_id, iteration, method} per record
  std::string audit_jsonl() const;

 private:
  std::vector<InstructionRecord> records_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Pool invariants: sdg records have a pooled parent one iteration below, share its grounding,
// and carry three passing verdicts in the audit log. Throws PreconditionError on the first violation.
void check_pool(const InstructionPool& pool);

const std::set<std::string>& default_sdg_categories();

struct SdgConfig {
  int max_iterations = 6;
  std::optional<std::size_t> budget;  // accepted sdg records; default ratio x schema records
  double budget_ratio = 1.6;
  double p0 = 0.1;
  std::size_t max_attempts_per_iteration = 20000;
  std::set<std::string> categories = default_sdg_categories();
};

// Grounding text for a document id; nullopt when unknown.
using DocLookup = std::function<std::optional<std::string>(const std::string&)>;

InstructionPool run_sdg(std::vector<InstructionRecord> seed_pool, const DocLookup& docs, const SdgConfig& config,
                        TeacherGateway& generator, TeacherGateway& evaluator, std::uint64_t seed);

}  // namespace secforge
