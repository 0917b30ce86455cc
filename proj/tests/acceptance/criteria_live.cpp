#include <cmath>
#include <cstdlib>
#include <memory>
#include <unistd.h>

#include "harness.hpp"
#include "secforge/mcq.hpp"
#include "secforge/sdg.hpp"
#include "stub_server.hpp"

namespace acceptance {

using namespace secforge;
namespace fs = std::filesystem;

namespace {

std::string env_or(const char* name, std::string fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : fallback;
}

struct RoundTrip {
  std::optional<InstructionRecord> candidate;
  GateVerdict verdict;
  std::vector<ScoredChoice> scores;
};

RoundTrip round_trip(const HttpBackendConfig& endpoint, const fs::path& cache, std::vector<HttpBackend*>& backends,
                     std::vector<std::shared_ptr<Backend>>& keep) {
  auto gateway = [&](const std::string& role) {
    auto backend = std::make_shared<HttpBackend>(endpoint);
    backends.push_back(backend.get());
    keep.push_back(backend);
    GatewayConfig cfg;
    cfg.cache_dir = (cache / role).string();
    return std::make_unique<TeacherGateway>(backend, cfg);
  };
  auto teacher = gateway("teacher");
  auto evaluator = gateway("evaluator");
  auto scorer = gateway("scorer");

  InstructionRecord parent;
  parent.instruction = "Which tactic does the technique Brute Force serve?";
  parent.output = "Brute Force serves the Credential Access tactic.";
  parent.task_type = TaskType::closed_qa;
  parent.source_category = "attack";
  parent.grounding_doc_id = "T1110";
  parent.lineage_ids = {"T1110", "TA0006"};
  parent.template_name = "technique_tactic";
  finalize(parent);
  const std::string doc =
      "Brute Force (T1110): adversaries may use brute force techniques to gain access to accounts when passwords "
      "are unknown or when password hashes are obtained. Tactic: Credential Access (TA0006).";

  RoundTrip out;
  out.candidate = evolve(parent, doc, evol_operations().front(), *teacher);
  if (out.candidate) out.verdict = gate(*out.candidate, parent, doc, *evaluator);
  out.scores = scorer->score_options(
      binary_query("Which tactic does Brute Force (T1110) serve?", "Credential Access", "Lateral Movement"),
      {" 1", " 2"});
  return out;
}

std::size_t cache_entries(const fs::path& dir) {
  std::size_t n = 0;
  if (!fs::exists(dir)) return 0;
  for (const auto& e : fs::recursive_directory_iterator(dir)) n += e.is_regular_file() ? 1 : 0;
  return n;
}

}  // namespace

Outcome live_endpoint() {
  Checker ck;
  std::unique_ptr<stub::ChatServer> stub;
  HttpBackendConfig endpoint;
  std::string label;
  if (const std::string live = env_or("SECFORGE_LIVE_ENDPOINT", ""); !live.empty()) {
    endpoint.endpoint = live;
    endpoint.model = env_or("SECFORGE_LIVE_MODEL", "default");
    endpoint.api_key_env = env_or("SECFORGE_LIVE_API_KEY_ENV", "");
    endpoint.score_mode =
        env_or("SECFORGE_LIVE_SCORE_MODE", "echo") == "chat" ? ScoreMode::chat_top_logprobs : ScoreMode::completions_echo;
    label = "live endpoint " + live;
  } else {
    stub = std::make_unique<stub::ChatServer>();
    endpoint.endpoint = stub->base_url();
    endpoint.model = "stub-model";
    label = "loopback stub endpoint (SECFORGE_LIVE_ENDPOINT unset)";
  }
  endpoint.timeout = std::chrono::seconds(120);

  const fs::path cache = fs::temp_directory_path() / ("secforge-acceptance-cache-" + std::to_string(::getpid()));
  fs::remove_all(cache);

  std::vector<HttpBackend*> first_backends;
  std::vector<std::shared_ptr<Backend>> keep;
  const auto first = round_trip(endpoint, cache, first_backends, keep);
  std::size_t first_calls = 0;
  for (auto* b : first_backends) first_calls += b->network_calls();
  ck.expect(first.candidate.has_value(), "evolve returned no candidate");
  ck.expect(first.candidate && !first.verdict.deferred && !first.verdict.audit.empty(), "gate did not complete");
  ck.expect(first.scores.size() == 2 && std::isfinite(first.scores[0].logprob) && std::isfinite(first.scores[1].logprob),
            "score_options did not return two finite scores");
  ck.expect(first_calls >= 4, "expected network calls for rewrite, answer, gate and scoring");
  const std::size_t cached = cache_entries(cache);
  ck.expect(cached >= 4, "replay cache holds " + std::to_string(cached) + " entries");

  // Same calls through fresh gateways and clients: everything must come from the cache.
  std::vector<HttpBackend*> second_backends;
  const auto second = round_trip(endpoint, cache, second_backends, keep);
  std::size_t second_calls = 0;
  for (auto* b : second_backends) second_calls += b->network_calls();
  ck.expect(second_calls == 0, std::to_string(second_calls) + " network calls on replay");
  ck.expect(first.candidate.has_value() == second.candidate.has_value() &&
                (!first.candidate || first.candidate->id == second.candidate->id),
            "replayed candidate differs");
  ck.expect(first.verdict.accepted == second.verdict.accepted, "replayed verdict differs");
  ck.expect(first.scores.size() == second.scores.size() &&
                (first.scores.empty() || first.scores[0].logprob == second.scores[0].logprob),
            "replayed scores differ");
  fs::remove_all(cache);

  std::ostringstream s;
  s << label << ": " << first_calls << " network calls, " << cached << " cache entries, verdict "
    << (first.verdict.accepted ? "accepted" : "rejected") << ", scores " << (first.scores.empty() ? 0.0 : first.scores[0].logprob)
    << "/" << (first.scores.size() > 1 ? first.scores[1].logprob : 0.0) << "; replay made " << second_calls
    << " network calls";
  return ck.outcome(s.str());
}

}  // namespace acceptance
