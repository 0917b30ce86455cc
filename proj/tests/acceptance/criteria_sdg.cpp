#include <cmath>
#include <map>
#include <mutex>
#include <set>

#include "harness.hpp"
#include "oracles.hpp"
#include "secforge/mcq.hpp"
#include "secforge/sdg.hpp"

namespace acceptance {

using namespace secforge;

namespace {

const Objective kObjectives[] = {Objective::complexity, Objective::domain_grounding, Objective::answer_grounding};

// The scripted evaluator's transcript: "no" for roughly one objective in five, keyed by
// the candidate answer and the objective so the oracle can replay it from the record alone.
bool scripted_yes(const std::string& answer, Objective o) {
  return derive_seed(4242, answer + "|" + std::string(to_string(o))) % 5 != 0;
}

// First objective the transcript answers "no", if any.
std::optional<Objective> first_no(const std::string& answer) {
  for (auto o : kObjectives) {
    if (!scripted_yes(answer, o)) return o;
  }
  return std::nullopt;
}

std::string between(const std::string& text, const std::string& open, const std::string& close) {
  const auto a = text.find(open);
  if (a == std::string::npos) return {};
  const auto start = a + open.size();
  const auto b = text.find(close, start);
  return text.substr(start, b == std::string::npos ? std::string::npos : b - start);
}

std::optional<Objective> objective_of_tag(const std::string& tag) {
  for (auto o : kObjectives) {
    if (tag == "gate:" + std::string(to_string(o))) return o;
  }
  return std::nullopt;
}

InstructionRecord seed_record(int i) {
  InstructionRecord r;
  r.instruction = "Explain weakness " + std::to_string(i) + " and its consequences.";
  r.output = "Weakness " + std::to_string(i) + " exposes memory to an attacker.";
  r.source_category = i % 2 ? "cwe" : "wiki";
  r.grounding_doc_id = "DOC-" + std::to_string(i % 7);
  r.lineage_ids = {"CWE-" + std::to_string(i)};
  r.template_name = "describe_entity";
  finalize(r);
  return r;
}

std::shared_ptr<ScriptedBackend> generator() {
  auto b = std::make_shared<ScriptedBackend>("scripted-teacher");
  b->set_handler([](const TeacherRequest& r) -> std::optional<std::string> {
    const std::string key = short_digest(r.user_prompt);
    if (r.tag == "self_instruct") return "Task type: closed_qa\nInstruction: Which control mitigates case " + key + "?";
    if (r.tag == "sdg_answer") return "Answer " + key + " cites the document.";
    return "Rewritten instruction " + key + " with an added constraint.";
  });
  return b;
}

std::string option_two(const std::string& context) {
  return between(context, "\nOption 2: ", "\n");
}

}  // namespace

Outcome router_schedule() {
  Checker ck;
  for (double p0 : {0.01, 0.05, 0.1, 0.125, 0.3, 0.7, 1.0}) {
    for (int t = 0; t <= 16; ++t) {
      const double got = RouterState{t, p0}.p();
      const double want = std::min(1.0, p0 * std::pow(2.0, std::floor(t / 2.0)));
      ck.expect(std::abs(got - want) <= 1e-15, "p(" + std::to_string(t) + ") for p0 " + std::to_string(p0));
      ck.expect(std::abs(got - oracle::router_p(p0, t)) <= 1e-15, "router disagrees with the doubling oracle");
    }
  }
  double worst = 0.0;
  constexpr int kDraws = 100000;
  for (int t = 0; t <= 16; ++t) {
    const RouterState state{t, 0.1};
    Rng rng(derive_seed(31, "router:" + std::to_string(t)));
    int self = 0;
    for (int i = 0; i < kDraws; ++i) self += route(state, rng.uniform01()) == Route::self_instruct ? 1 : 0;
    const double rate = static_cast<double>(self) / kDraws;
    worst = std::max(worst, std::abs(rate - state.p()));
    ck.expect(std::abs(rate - state.p()) <= 0.01, "empirical rate off at t=" + std::to_string(t));
  }
  std::ostringstream s;
  s << "7 values of p0 x t in [0,16] exact; 17 x 1e5 draws, worst deviation " << worst;
  return ck.outcome(s.str());
}

Outcome gate_soundness() {
  Checker ck;
  auto evaluator_backend = [](std::vector<std::pair<std::string, Objective>>* log, std::mutex* mu) {
    auto b = std::make_shared<ScriptedBackend>("scripted-evaluator");
    b->set_handler([log, mu](const TeacherRequest& r) -> std::optional<std::string> {
      const auto o = objective_of_tag(r.tag);
      if (!o) return "no";
      const std::string answer = between(r.user_prompt, "#Answer#\n", "\n\n#Question#");
      if (log) {
        std::lock_guard lock(*mu);
        log->emplace_back(answer, *o);
      }
      return scripted_yes(answer, *o) ? "Yes, it does." : "No.";
    });
    return b;
  };

  // Part 1: the gate itself over 600 candidates against one parent.
  const auto parent = seed_record(0);
  TeacherGateway ev(evaluator_backend(nullptr, nullptr));
  InstructionPool pool({parent});
  std::set<std::string> want_members;
  std::size_t direct = 0;
  for (int i = 1; i <= 600; ++i, ++direct) {
    auto c = seed_record(i);
    c.generation = {Stage::sdg, 1, parent.id, "scripted-teacher", "evol:deepening"};
    finalize(c);
    const auto expect_fail = first_no(c.output);
    const auto v = gate(c, parent, "Document about memory safety.", ev);
    ck.expect(v.accepted == !expect_fail.has_value(), "acceptance differs for candidate " + std::to_string(i));
    ck.expect(v.failed == expect_fail, "first failed objective differs for candidate " + std::to_string(i));
    const std::size_t asked = expect_fail ? static_cast<std::size_t>(*expect_fail) + 1 : 3;
    ck.expect(v.audit.size() == asked, "gate asked past the first no");
    if (v.accepted) pool.append(c);
    if (!expect_fail) want_members.insert(c.id);
  }
  std::set<std::string> members;
  for (const auto& r : pool.records()) {
    if (r.id != parent.id) members.insert(r.id);
  }
  ck.expect(members == want_members, "direct gate pool differs from the all-yes set");

  // Part 2: the full loop. The budget is out of reach so no accepted candidate is cut.
  std::vector<InstructionRecord> seeds;
  for (int i = 0; i < 40; ++i) seeds.push_back(seed_record(1000 + i));
  SdgConfig cfg;
  cfg.max_iterations = 3;
  cfg.budget = 1000000;
  cfg.p0 = 0.25;
  cfg.max_attempts_per_iteration = 250;
  std::vector<std::pair<std::string, Objective>> log;
  std::mutex mu;
  TeacherGateway gen(generator());
  TeacherGateway ev2(evaluator_backend(&log, &mu));
  const auto docs = [](const std::string& id) -> std::optional<std::string> { return "Document " + id + "."; };
  const auto result = run_sdg(seeds, docs, cfg, gen, ev2, 2024);

  std::set<std::string> evaluated;
  for (const auto& [answer, o] : log) {
    if (o == Objective::complexity) evaluated.insert(answer);
  }
  std::set<std::string> want_outputs;
  std::map<std::string, std::size_t> want_rejected;  // first failed objective -> distinct candidates
  for (const auto& answer : evaluated) {
    if (const auto f = first_no(answer)) {
      ++want_rejected[std::string(to_string(*f))];
    } else {
      want_outputs.insert(answer);
    }
  }
  // The transcript must never be consulted past a "no".
  for (const auto& [answer, o] : log) {
    const auto f = first_no(answer);
    ck.expect(!f || static_cast<int>(o) <= static_cast<int>(*f), "evaluator asked after a no");
  }
  std::set<std::string> got_outputs;
  for (const auto& r : result.records()) {
    if (r.generation.stage != Stage::sdg) continue;
    got_outputs.insert(r.output);
    ck.expect(!first_no(r.output).has_value(), "pooled record has a no in its transcript");
  }
  ck.expect(got_outputs == want_outputs, "pool membership differs from the all-yes candidate set");

  std::map<std::string, std::string> rejected_as;
  for (const auto& rej : result.rejections) {
    const auto [it, fresh] = rejected_as.emplace(rej.candidate_id, rej.objective);
    ck.expect(fresh || it->second == rej.objective, "candidate rejected for two different objectives");
  }
  std::map<std::string, std::size_t> got_rejected;
  for (const auto& [id, objective] : rejected_as) ++got_rejected[objective];
  ck.expect(got_rejected == want_rejected, "rejection ledger objectives differ from the transcript");
  std::map<std::string, std::set<std::string>> failing_checks;
  for (const auto& a : result.audit) {
    if (!a.passed) failing_checks[a.candidate_id].insert(a.check);
  }
  for (const auto& [id, objective] : rejected_as) {
    ck.expect(failing_checks[id] == std::set<std::string>{objective}, "audit log does not name " + objective);
  }
  try {
    check_pool(result);
  } catch (const std::exception& e) {
    ck.expect(false, e.what());
  }
  std::ostringstream s;
  s << direct << " direct candidates (" << want_members.size() << " all-yes) + " << evaluated.size()
    << " loop candidates (" << want_outputs.size() << " pooled, " << rejected_as.size()
    << " rejected); membership and ledger agree with the transcript";
  ck.expect(direct + evaluated.size() >= 500, "fewer than 500 scripted candidates");
  return ck.outcome(s.str());
}

Outcome adversarial_distractors() {
  Checker ck;
  Rng rng(606);
  std::size_t with_ties = 0;
  std::size_t cases = 0;
  for (int c = 0; c < 300; ++c) {
    const std::size_t n = 4 + rng.below(14);
    std::vector<std::string> members;
    for (std::size_t i = 0; i < n; ++i) members.push_back("Option " + std::to_string(1000 + rng.below(100000)));
    std::sort(members.begin(), members.end());
    members.erase(std::unique(members.begin(), members.end()), members.end());
    if (members.size() < 4) continue;
    ++cases;
    const std::string correct = members[rng.below(members.size())];
    // Coarse score levels make ties frequent; every third case uses continuous scores.
    std::map<std::string, double> table;
    for (const auto& m : members) {
      if (m == correct) continue;
      table[m] = c % 3 == 0 ? -5.0 * rng.uniform01() : -0.5 * static_cast<double>(1 + rng.below(4));
    }
    auto scorer = std::make_shared<ScriptedBackend>("scripted-scorer");
    scorer->set_score_handler([table](const std::string& ctx, const std::vector<std::string>& opts) {
      std::vector<double> v(opts.size(), -1.0);
      if (opts.size() == 2) v[1] = table.at(option_two(ctx));
      return v;
    });
    TeacherGateway gw(scorer);
    const OptionVocabulary vocab{"case-" + std::to_string(c), "option", members};
    const auto got = select_adversarial_distractors("Which option fits case " + std::to_string(c) + "?", correct,
                                                    vocab, gw, 3);
    std::vector<std::pair<std::string, double>> all(table.begin(), table.end());
    const auto want = oracle::top_m(all, 3);
    ck.expect(got == want, "top-3 differs from the exhaustive sort in case " + std::to_string(c));
    ck.expect(top_distractors(all, 3) == want, "top_distractors differs in case " + std::to_string(c));
    std::map<double, int> levels;
    for (const auto& [_, s] : all) ++levels[s];
    for (const auto& [s, k] : levels) {
      if (k > 1 && s >= want.back().second) {
        ++with_ties;
        break;
      }
    }
  }
  ck.expect(with_ties > 0, "no case exercised a tie");
  ck.expect(cases >= 200, "fewer than 200 cases");
  std::ostringstream s;
  s << cases << " randomized cases (" << with_ties << " with ties in the top 3), 100% agreement";
  return ck.outcome(s.str());
}

}  // namespace acceptance
