#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "secforge/common.hpp"
#include "secforge/entity.hpp"

namespace secforge {

enum class Purpose { generate, evaluate, score };

std::string_view to_string(Purpose p);

/**
 * One call to a teacher, evaluator or scorer model.
 *
 * `tag` names the call site ("evol_rewrite:deepening", "gate:complexity", ...).
 * It is not part of the request digest, so two call sites that send identical
 * prompts share a cache entry.
 */
struct TeacherRequest {
  std::string role_prompt;
  std::string user_prompt;
  std::size_t max_output = 512;
  double temperature = 0.7;
  Purpose purpose = Purpose::generate;
  std::string tag;
};

// Default temperatures: 0.7 for generation, 0 for evaluation and scoring.
TeacherRequest make_request(Purpose purpose, std::string role_prompt, std::string user_prompt, std::string tag = {});

struct Completion {
  std::string text;
  bool truncated = false;  // output budget exhausted
  bool from_cache = false;
};

// Summed log-probability of an option's tokens, with the token count for normalization.
struct OptionScore {
  double logprob = 0.0;
  std::size_t token_count = 1;
};

struct ScoredChoice {
  std::string option_text;
  double logprob = 0.0;
  bool length_normalized = false;
};

// Connection-level or 5xx/429 failure; the gateway retries these.
class TransportError : public Error {
 public:
  using Error::Error;
};

// The endpoint cannot do what was asked (e.g. no token log-probabilities).
class CapabilityError : public Error {
 public:
  using Error::Error;
};

class Backend {
 public:
  virtual ~Backend() = default;
  virtual Completion complete(const TeacherRequest& req) = 0;
  // Log-likelihood of each option as the continuation of `context`, order-preserving.
  virtual std::vector<OptionScore> score(const std::string& context, const std::vector<std::string>& options) = 0;
  virtual std::string model_name() const = 0;
};

struct RetryPolicy {
  int max_attempts = 5;
  std::chrono::milliseconds base_delay{250};
  double multiplier = 2.0;
  std::chrono::milliseconds max_delay{8000};

  // Delay before attempt `attempt + 1`, given `attempt` failures so far (1-based).
  std::chrono::milliseconds delay_after(int attempt) const;
};

struct GatewayConfig {
  RetryPolicy retry{};
  std::size_t max_in_flight = 8;
  std::chrono::milliseconds min_interval{0};  // between request starts
  std::string cache_dir;  // empty: in-memory replay cache only
  bool length_normalize = false;
};

/**
 * Front door for every model call.
 *
 * Adds a replay cache keyed by request digest (in memory, mirrored to
 * `<cache_dir>/<digest>.json` when configured), bounded retry with exponential
 * backoff on TransportError, a bounded in-flight window and a minimum interval
 * between request starts. Safe to share between threads.
 */
class TeacherGateway {
 public:
  using Sleeper = std::function<void(std::chrono::milliseconds)>;

  explicit TeacherGateway(std::shared_ptr<Backend> backend, GatewayConfig config = {});

  Completion complete(const TeacherRequest& req);

  // Throws PreconditionError for fewer than two options; CapabilityError propagates.
  std::vector<ScoredChoice> score_options(const std::string& context, const std::vector<std::string>& options);

  std::string model_name() const { return model_; }
  const GatewayConfig& config() const { return config_; }

  std::size_t in_flight() const { return in_flight_.load(); }
  std::size_t peak_in_flight() const { return peak_in_flight_.load(); }
  std::size_t backend_calls() const { return backend_calls_.load(); }
  std::size_t cache_hits() const { return cache_hits_.load(); }

  void set_sleeper(Sleeper sleeper) { sleeper_ = std::move(sleeper); }

  // Digests the fields that determine the answer (prompts, budget, temperature, purpose, model).
  std::string request_digest(const TeacherRequest& req) const;
  std::string score_digest(const std::string& context, const std::vector<std::string>& options) const;

 private:
  std::optional<json> cache_get(const std::string& digest);
  void cache_put(const std::string& digest, const json& request, const json& response);
  template <class Fn>
  auto call_backend(Fn&& fn) -> decltype(fn());

  std::shared_ptr<Backend> backend_;
  GatewayConfig config_;
  std::string model_;
  Sleeper sleeper_;

  std::mutex cache_mutex_;
  std::unordered_map<std::string, json> cache_;

  std::mutex window_mutex_;
  std::condition_variable window_cv_;
  std::atomic<std::size_t> in_flight_{0};
  std::atomic<std::size_t> peak_in_flight_{0};
  std::chrono::steady_clock::time_point next_start_{};

  std::atomic<std::size_t> backend_calls_{0};
  std::atomic<std::size_t> cache_hits_{0};
};

// True for an empty answer or a stock refusal ("I cannot", "I can't", "I'm sorry").
bool is_refusal(std::string_view text);

// Reads a yes/no verdict from the first word of an evaluator answer.
std::optional<bool> parse_verdict(std::string_view text);

/// Offline backend answering from a script: exact request digests first, then
/// the handler. Failure injection makes the next N calls raise TransportError.
class ScriptedBackend : public Backend {
 public:
  using Handler = std::function<std::optional<std::string>(const TeacherRequest&)>;
  using ScoreHandler = std::function<std::vector<double>(const std::string&, const std::vector<std::string>&)>;

  explicit ScriptedBackend(std::string model = "scripted-mock") : model_(std::move(model)) {}

  void script(std::string digest, std::string response) { by_digest_[std::move(digest)] = std::move(response); }
  void set_handler(Handler h) { handler_ = std::move(h); }
  void set_score_handler(ScoreHandler h) { score_handler_ = std::move(h); }
  void fail_next(int n) { failures_ = n; }
  void set_truncate(bool t) { truncate_ = t; }

  Completion complete(const TeacherRequest& req) override;
  std::vector<OptionScore> score(const std::string& context, const std::vector<std::string>& options) override;
  std::string model_name() const override { return model_; }

  std::size_t calls() const { return calls_.load(); }

 private:
  std::string model_;
  std::map<std::string, std::string> by_digest_;
  Handler handler_;
  ScoreHandler score_handler_;
  std::atomic<int> failures_{0};
  std::atomic<std::size_t> calls_{0};
  bool truncate_ = false;
};

// Digest of a request as ScriptedBackend keys it (same fields as the gateway, without the model).
std::string script_digest(const TeacherRequest& req);

/// Deterministic stand-in teacher used by the pipeline's `mock` endpoint.
/// Evaluator calls answer "yes" with probability accept_rate (hashed, not sampled);
/// generation calls echo a tagged, digest-stamped excerpt of the prompt;
/// scoring returns hashed log-probabilities.
class DeterministicMockBackend : public Backend {
 public:
  explicit DeterministicMockBackend(std::uint64_t seed, double accept_rate = 0.85, std::string model = "mock-teacher")
      : seed_(seed), accept_rate_(accept_rate), model_(std::move(model)) {}

  Completion complete(const TeacherRequest& req) override;
  std::vector<OptionScore> score(const std::string& context, const std::vector<std::string>& options) override;
  std::string model_name() const override { return model_; }

 private:
  std::uint64_t seed_;
  double accept_rate_;
  std::string model_;
};

enum class ScoreMode {
  completions_echo,  // POST /completions with echo + logprobs; sums the option's tokens
  chat_top_logprobs  // POST /chat/completions, max_tokens 1, reads top_logprobs for each option label
};

struct HttpBackendConfig {
  std::string endpoint;  // base URL, e.g. "http://localhost:8000/v1"
  std::string model;
  std::string api_key_env;  // name of the environment variable holding the key
  std::chrono::seconds timeout{60};
  ScoreMode score_mode = ScoreMode::completions_echo;
};

/// Chat-completions-compatible HTTP client.
class HttpBackend : public Backend {
 public:
  explicit HttpBackend(HttpBackendConfig config);

  Completion complete(const TeacherRequest& req) override;
  std::vector<OptionScore> score(const std::string& context, const std::vector<std::string>& options) override;
  std::string model_name() const override { return config_.model; }

  std::size_t network_calls() const { return network_calls_.load(); }

 private:
  std::string post(const std::string& path, const std::string& body);

  HttpBackendConfig config_;
  std::string scheme_host_port_;
  std::string base_path_;
  std::string api_key_;
  std::atomic<std::size_t> network_calls_{0};
};

}  // namespace secforge
