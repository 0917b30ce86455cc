#include "secforge/teacher.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <regex>
#include <thread>

#include <httplib.h>

namespace secforge {
namespace {

using raw_json = nlohmann::json;

json request_fields(const TeacherRequest& req) {
  json j;
  j["role_prompt"] = req.role_prompt;
  j["user_prompt"] = req.user_prompt;
  j["max_output"] = req.max_output;
  j["temperature"] = req.temperature;
  j["purpose"] = std::string(to_string(req.purpose));
  return j;
}

std::string first_words(std::string_view text, std::size_t n) {
  std::vector<std::string> words;
  std::string current;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!current.empty()) words.push_back(std::move(current));
      current.clear();
      if (words.size() >= n) break;
    } else {
      current.push_back(c);
    }
  }
  if (!current.empty() && words.size() < n) words.push_back(std::move(current));
  return join(words, " ");
}

std::string last_paragraph(std::string_view text) {
  std::string s = trim(text);
  const auto cut = s.rfind("\n\n");
  return cut == std::string::npos ? s : trim(std::string_view(s).substr(cut + 2));
}

double unit_hash(std::uint64_t h) { return static_cast<double>(h >> 11) * 0x1.0p-53; }

}  // namespace

std::string_view to_string(Purpose p) {
  switch (p) {
    case Purpose::generate: return "generate";
    case Purpose::evaluate: return "evaluate";
    case Purpose::score: return "score";
  }
  return "generate";
}

TeacherRequest make_request(Purpose purpose, std::string role_prompt, std::string user_prompt, std::string tag) {
  TeacherRequest r;
  r.purpose = purpose;
  r.role_prompt = std::move(role_prompt);
  r.user_prompt = std::move(user_prompt);
  r.tag = std::move(tag);
  r.temperature = purpose == Purpose::generate ? 0.7 : 0.0;
  if (purpose == Purpose::evaluate) r.max_output = 8;
  return r;
}

std::chrono::milliseconds RetryPolicy::delay_after(int attempt) const {
  const double ms = static_cast<double>(base_delay.count()) * std::pow(multiplier, std::max(0, attempt - 1));
  return std::chrono::milliseconds(static_cast<std::int64_t>(std::min(ms, static_cast<double>(max_delay.count()))));
}

bool is_refusal(std::string_view text) {
  const std::string t = trim(text);
  if (t.empty()) return true;
  for (std::string_view prefix : {"I cannot", "I can't", "I can’t", "I'm sorry", "I am sorry"}) {
    if (starts_with_icase(t, prefix)) return true;
  }
  return false;
}

std::optional<bool> parse_verdict(std::string_view text) {
  const auto tokens = alnum_tokens(text);
  if (tokens.empty()) return std::nullopt;
  if (tokens.front() == "yes") return true;
  if (tokens.front() == "no") return false;
  return std::nullopt;
}

// ---- gateway --------------------------------------------------------------

TeacherGateway::TeacherGateway(std::shared_ptr<Backend> backend, GatewayConfig config)
    : backend_(std::move(backend)), config_(std::move(config)) {
  if (!backend_) throw PreconditionError("gateway needs a backend");
  if (config_.max_in_flight == 0) throw PreconditionError("max_in_flight must be at least 1");
  if (config_.retry.max_attempts < 1) throw PreconditionError("retry.max_attempts must be at least 1");
  model_ = backend_->model_name();
  sleeper_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
  if (!config_.cache_dir.empty()) std::filesystem::create_directories(config_.cache_dir);
}

std::string TeacherGateway::request_digest(const TeacherRequest& req) const {
  json j = request_fields(req);
  j["model"] = model_;
  return sha256_hex(j.dump());
}

std::string TeacherGateway::score_digest(const std::string& context, const std::vector<std::string>& options) const {
  json j;
  j["kind"] = "score";
  j["context"] = context;
  j["options"] = options;
  j["model"] = model_;
  return sha256_hex(j.dump());
}

std::optional<json> TeacherGateway::cache_get(const std::string& digest) {
  std::lock_guard lock(cache_mutex_);
  if (auto it = cache_.find(digest); it != cache_.end()) return it->second;
  if (config_.cache_dir.empty()) return std::nullopt;
  const auto path = std::filesystem::path(config_.cache_dir) / (digest + ".json");
  if (!std::filesystem::exists(path)) return std::nullopt;
  json entry = json::parse(read_file(path.string()));
  cache_[digest] = entry.at("response");
  return cache_[digest];
}

void TeacherGateway::cache_put(const std::string& digest, const json& request, const json& response) {
  std::lock_guard lock(cache_mutex_);
  cache_[digest] = response;
  if (config_.cache_dir.empty()) return;
  json entry;
  entry["digest"] = digest;
  entry["model"] = model_;
  entry["request"] = request;
  entry["response"] = response;
  write_file_atomic((std::filesystem::path(config_.cache_dir) / (digest + ".json")).string(), entry.dump(2) + "\n");
}

template <class Fn>
auto TeacherGateway::call_backend(Fn&& fn) -> decltype(fn()) {
  for (int attempt = 1;; ++attempt) {
    std::chrono::milliseconds wait{0};
    {
      std::unique_lock lock(window_mutex_);
      window_cv_.wait(lock, [&] { return in_flight_.load() < config_.max_in_flight; });
      const std::size_t now_in_flight = ++in_flight_;
      std::size_t peak = peak_in_flight_.load();
      while (now_in_flight > peak && !peak_in_flight_.compare_exchange_weak(peak, now_in_flight)) {
      }
      const auto now = std::chrono::steady_clock::now();
      if (config_.min_interval.count() > 0) {
        const auto start = std::max(now, next_start_);
        wait = std::chrono::duration_cast<std::chrono::milliseconds>(start - now);
        next_start_ = start + config_.min_interval;
      }
    }
    auto release = [&] {
      {
        std::lock_guard lock(window_mutex_);
        --in_flight_;
      }
      window_cv_.notify_one();
    };
    if (wait.count() > 0) sleeper_(wait);
    ++backend_calls_;
    try {
      auto result = fn();
      release();
      return result;
    } catch (const TransportError& e) {
      release();
      if (attempt >= config_.retry.max_attempts) {
        throw TransportError("giving up after " + std::to_string(attempt) + " attempts: " + e.what());
      }
      sleeper_(config_.retry.delay_after(attempt));
    } catch (...) {
      release();
      throw;
    }
  }
}

Completion TeacherGateway::complete(const TeacherRequest& req) {
  if (trim(req.role_prompt).empty() || trim(req.user_prompt).empty()) {
    throw PreconditionError("teacher request prompts must be non-empty");
  }
  if (req.temperature < 0) throw PreconditionError("temperature must be >= 0");
  if (req.purpose == Purpose::score && req.temperature != 0.0) {
    throw PreconditionError("scoring requests must use temperature 0");
  }
  const std::string digest = request_digest(req);
  if (auto hit = cache_get(digest)) {
    ++cache_hits_;
    return {hit->at("text").get<std::string>(), hit->value("truncated", false), true};
  }
  Completion c = call_backend([&] { return backend_->complete(req); });
  json response;
  response["text"] = c.text;
  response["truncated"] = c.truncated;
  cache_put(digest, request_fields(req), response);
  c.from_cache = false;
  return c;
}

std::vector<ScoredChoice> TeacherGateway::score_options(const std::string& context,
                                                        const std::vector<std::string>& options) {
  if (options.size() < 2) throw PreconditionError("score_options needs at least two options");
  const std::string digest = score_digest(context, options);
  std::vector<OptionScore> scores;
  if (auto hit = cache_get(digest)) {
    ++cache_hits_;
    for (const auto& s : hit->at("scores")) scores.push_back({s.at("logprob").get<double>(), s.at("tokens").get<std::size_t>()});
  } else {
    scores = call_backend([&] { return backend_->score(context, options); });
    if (scores.size() != options.size()) throw Error("backend returned a score count that does not match the options");
    json response;
    response["scores"] = json::array();
    for (const auto& s : scores) {
      if (!std::isfinite(s.logprob)) throw Error("backend returned a non-finite log-probability");
      response["scores"].push_back({{"logprob", s.logprob}, {"tokens", s.token_count}});
    }
    json request;
    request["context"] = context;
    request["options"] = options;
    cache_put(digest, request, response);
  }
  std::vector<ScoredChoice> out;
  out.reserve(options.size());
  for (std::size_t i = 0; i < options.size(); ++i) {
    double lp = scores[i].logprob;
    if (config_.length_normalize) lp /= static_cast<double>(std::max<std::size_t>(1, scores[i].token_count));
    out.push_back({options[i], lp, config_.length_normalize});
  }
  return out;
}

// ---- scripted mock --------------------------------------------------------

std::string script_digest(const TeacherRequest& req) { return sha256_hex(request_fields(req).dump()); }

Completion ScriptedBackend::complete(const TeacherRequest& req) {
  ++calls_;
  if (failures_.load() > 0) {
    --failures_;
    throw TransportError("scripted transport failure");
  }
  std::optional<std::string> text;
  if (auto it = by_digest_.find(script_digest(req)); it != by_digest_.end()) text = it->second;
  if (!text && handler_) text = handler_(req);
  if (!text) throw Error("scripted backend has no response for request tagged '" + req.tag + "'");
  return {*text, truncate_, false};
}

std::vector<OptionScore> ScriptedBackend::score(const std::string& context, const std::vector<std::string>& options) {
  ++calls_;
  if (failures_.load() > 0) {
    --failures_;
    throw TransportError("scripted transport failure");
  }
  if (!score_handler_) throw CapabilityError("scripted backend has no log-probability script");
  const auto values = score_handler_(context, options);
  std::vector<OptionScore> out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    out.push_back({values[i], std::max<std::size_t>(1, whitespace_token_count(options[i]))});
  }
  return out;
}

// ---- deterministic mock ---------------------------------------------------

Completion DeterministicMockBackend::complete(const TeacherRequest& req) {
  const std::string digest = script_digest(req);
  Completion c;
  if (req.purpose == Purpose::evaluate) {
    c.text = unit_hash(derive_seed(seed_, digest)) < accept_rate_ ? "yes" : "no";
    return c;
  }
  std::string body = first_words(last_paragraph(req.user_prompt), 48);
  c.text = body.empty() ? "(" + req.tag + ")" : body;
  if (!req.tag.empty()) c.text = req.tag + " [" + digest.substr(0, 8) + "]: " + c.text;
  if (whitespace_token_count(c.text) > req.max_output) {
    c.text = first_words(c.text, req.max_output);
    c.truncated = true;
  }
  return c;
}

std::vector<OptionScore> DeterministicMockBackend::score(const std::string& context,
                                                         const std::vector<std::string>& options) {
  std::vector<OptionScore> out;
  for (const auto& o : options) {
    const double u = unit_hash(derive_seed(seed_, context + "\x1f" + o));
    out.push_back({-0.01 - 8.0 * u, std::max<std::size_t>(1, whitespace_token_count(o))});
  }
  return out;
}

// ---- HTTP -----------------------------------------------------------------

HttpBackend::HttpBackend(HttpBackendConfig config) : config_(std::move(config)) {
  static const std::regex url(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(config_.endpoint, m, url)) throw PreconditionError("invalid endpoint URL: " + config_.endpoint);
  scheme_host_port_ = m[1].str();
  base_path_ = m[2].matched ? m[2].str() : "";
  while (!base_path_.empty() && base_path_.back() == '/') base_path_.pop_back();
  if (!config_.api_key_env.empty()) {
    if (const char* key = std::getenv(config_.api_key_env.c_str())) api_key_ = key;
  }
  if (config_.model.empty()) throw PreconditionError("HTTP backend needs a model name");
}

std::string HttpBackend::post(const std::string& path, const std::string& body) {
  httplib::Client client(scheme_host_port_);
  const auto seconds = static_cast<time_t>(config_.timeout.count());
  client.set_connection_timeout(seconds, 0);
  client.set_read_timeout(seconds, 0);
  client.set_write_timeout(seconds, 0);
  httplib::Headers headers;
  if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
  ++network_calls_;
  auto res = client.Post(base_path_ + path, headers, body, "application/json");
  if (!res) throw TransportError("request to " + scheme_host_port_ + " failed: " + httplib::to_string(res.error()));
  if (res->status == 429 || res->status >= 500) {
    throw TransportError("endpoint returned HTTP " + std::to_string(res->status));
  }
  if (res->status >= 400) {
    throw Error("endpoint returned HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 300));
  }
  return res->body;
}

Completion HttpBackend::complete(const TeacherRequest& req) {
  raw_json body;
  body["model"] = config_.model;
  body["messages"] = raw_json::array({{{"role", "system"}, {"content", req.role_prompt}},
                                      {{"role", "user"}, {"content", req.user_prompt}}});
  body["max_tokens"] = req.max_output;
  body["temperature"] = req.temperature;
  const std::string text = post("/chat/completions", body.dump());
  raw_json resp;
  try {
    resp = raw_json::parse(text);
    const auto& choice = resp.at("choices").at(0);
    Completion c;
    const auto& content = choice.at("message").at("content");
    c.text = content.is_string() ? content.get<std::string>() : std::string{};
    c.truncated = choice.value("finish_reason", "") == "length";
    return c;
  } catch (const raw_json::exception& e) {
    throw Error(std::string("malformed chat completion response: ") + e.what());
  }
}

std::vector<OptionScore> HttpBackend::score(const std::string& context, const std::vector<std::string>& options) {
  std::vector<OptionScore> out;
  if (config_.score_mode == ScoreMode::completions_echo) {
    for (const auto& option : options) {
      raw_json body;
      body["model"] = config_.model;
      body["prompt"] = context + option;
      body["max_tokens"] = 0;
      body["echo"] = true;
      body["logprobs"] = 1;
      body["temperature"] = 0;
      const raw_json resp = raw_json::parse(post("/completions", body.dump()), nullptr, false);
      if (resp.is_discarded() || !resp.contains("choices") || resp["choices"].empty()) {
        throw Error("malformed completions response");
      }
      const auto& lp = resp["choices"][0].value("logprobs", raw_json());
      if (!lp.is_object() || !lp.contains("token_logprobs") || !lp.contains("text_offset") || !lp.contains("tokens")) {
        throw CapabilityError("endpoint returned no token log-probabilities");
      }
      OptionScore s{0.0, 0};
      const auto& tokens = lp["tokens"];
      for (std::size_t i = 0; i < tokens.size(); ++i) {
        const auto offset = lp["text_offset"][i].get<std::size_t>();
        const auto len = tokens[i].get<std::string>().size();
        if (offset + len <= context.size() || lp["token_logprobs"][i].is_null()) continue;
        s.logprob += lp["token_logprobs"][i].get<double>();
        ++s.token_count;
      }
      if (s.token_count == 0) throw CapabilityError("option tokens not found in echoed log-probabilities");
      out.push_back(s);
    }
    return out;
  }

  raw_json body;
  body["model"] = config_.model;
  body["messages"] = raw_json::array({{{"role", "user"}, {"content", context}}});
  body["max_tokens"] = 1;
  body["temperature"] = 0;
  body["logprobs"] = true;
  body["top_logprobs"] = 20;
  const raw_json resp = raw_json::parse(post("/chat/completions", body.dump()), nullptr, false);
  if (resp.is_discarded() || !resp.contains("choices") || resp["choices"].empty()) {
    throw Error("malformed chat completion response");
  }
  const auto& lp = resp["choices"][0].value("logprobs", raw_json());
  if (!lp.is_object() || !lp.contains("content") || lp["content"].empty() ||
      !lp["content"][0].contains("top_logprobs")) {
    throw CapabilityError("endpoint returned no top_logprobs");
  }
  const auto& top = lp["content"][0]["top_logprobs"];
  double floor = 0.0;
  for (const auto& t : top) floor = std::min(floor, t.value("logprob", 0.0));
  floor -= 10.0;  // options outside the returned top list rank below all of it
  for (const auto& option : options) {
    const std::string want = trim(option);
    std::optional<double> best;
    for (const auto& t : top) {
      const std::string tok = trim(t.value("token", ""));
      if (tok.empty() || (tok != want && want.rfind(tok, 0) != 0)) continue;
      const double v = t.value("logprob", floor);
      if (!best || v > *best) best = v;
    }
    out.push_back({best.value_or(floor), 1});
  }
  return out;
}

}  // namespace secforge
