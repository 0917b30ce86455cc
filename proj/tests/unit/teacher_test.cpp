#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <thread>

#include "secforge/teacher.hpp"
#include "stub_server.hpp"
#include "toy.hpp"

using namespace secforge;

namespace {

GatewayConfig quick(std::string cache_dir = {}) {
  GatewayConfig c;
  c.retry.base_delay = std::chrono::milliseconds(0);
  c.cache_dir = std::move(cache_dir);
  return c;
}

TeacherRequest ask(std::string text) { return make_request(Purpose::generate, "role", std::move(text), "t"); }

}  // namespace

TEST_CASE("scripted digest answers the matching request") {
  auto backend = std::make_shared<ScriptedBackend>();
  const auto req = ask("hello");
  backend->script(script_digest(req), "OK");
  TeacherGateway gw(backend, quick());
  CHECK(gw.complete(req).text == "OK");
  CHECK_THROWS_AS(gw.complete(ask("other")), Error);
}

TEST_CASE("retry: four failures recover, five are terminal") {
  std::vector<std::chrono::milliseconds> waits;
  auto backend = std::make_shared<ScriptedBackend>();
  backend->set_handler([](const TeacherRequest&) { return std::optional<std::string>("fine"); });
  GatewayConfig cfg;
  TeacherGateway gw(backend, cfg);
  gw.set_sleeper([&](std::chrono::milliseconds d) { waits.push_back(d); });

  backend->fail_next(4);
  CHECK(gw.complete(ask("a")).text == "fine");
  CHECK(backend->calls() == 5);
  REQUIRE(waits.size() == 4);
  CHECK(waits[0] == std::chrono::milliseconds(250));
  CHECK(waits[1] == std::chrono::milliseconds(500));
  CHECK(waits[3] == std::chrono::milliseconds(2000));

  backend->fail_next(5);
  CHECK_THROWS_AS(gw.complete(ask("b")), TransportError);
  CHECK(backend->calls() == 10);
}

TEST_CASE("backoff is capped") {
  RetryPolicy p;
  CHECK(p.delay_after(1) == std::chrono::milliseconds(250));
  CHECK(p.delay_after(10) == std::chrono::milliseconds(8000));
}

TEST_CASE("replay cache hits skip the backend, also from disk") {
  toy::TempDir dir("cache");
  auto backend = std::make_shared<ScriptedBackend>();
  std::size_t n = 0;
  backend->set_handler([&](const TeacherRequest&) { return std::optional<std::string>("answer " + std::to_string(++n)); });
  {
    TeacherGateway gw(backend, quick(dir.path().string()));
    const auto first = gw.complete(ask("q"));
    const auto second = gw.complete(ask("q"));
    CHECK(first.text == second.text);
    CHECK_FALSE(first.from_cache);
    CHECK(second.from_cache);
    CHECK(gw.cache_hits() == 1);
    CHECK(gw.backend_calls() == 1);
  }
  TeacherGateway fresh(backend, quick(dir.path().string()));
  CHECK(fresh.complete(ask("q")).text == "answer 1");
  CHECK(fresh.backend_calls() == 0);
  CHECK(std::distance(std::filesystem::directory_iterator(dir.path()), std::filesystem::directory_iterator()) == 1);
}

TEST_CASE("truncation flag passes through") {
  auto backend = std::make_shared<ScriptedBackend>();
  backend->set_handler([](const TeacherRequest&) { return std::optional<std::string>("partial"); });
  backend->set_truncate(true);
  TeacherGateway gw(backend, quick());
  CHECK(gw.complete(ask("x")).truncated);

  DeterministicMockBackend mock(1);
  auto req = ask("one two three four five six seven eight");
  req.max_output = 3;
  const auto c = mock.complete(req);
  CHECK(c.truncated);
  CHECK(whitespace_token_count(c.text) == 3);
}

TEST_CASE("request validation") {
  TeacherGateway gw(std::make_shared<ScriptedBackend>(), quick());
  CHECK_THROWS_AS(gw.complete(make_request(Purpose::generate, "", "x")), PreconditionError);
  auto scoring = make_request(Purpose::score, "r", "x");
  CHECK(scoring.temperature == 0.0);
  scoring.temperature = 0.5;
  CHECK_THROWS_AS(gw.complete(scoring), PreconditionError);
  CHECK(make_request(Purpose::generate, "r", "x").temperature == doctest::Approx(0.7));
}

TEST_CASE("score_options passes mock log-probabilities through") {
  auto backend = std::make_shared<ScriptedBackend>();
  backend->set_score_handler([](const std::string&, const std::vector<std::string>& opts) {
    std::vector<double> out;
    for (const auto& o : opts) out.push_back(o == "X" ? -0.2 : -1.7);
    return out;
  });
  TeacherGateway gw(backend, quick());
  const auto s = gw.score_options("ctx", {"X", "Y"});
  REQUIRE(s.size() == 2);
  CHECK(s[0].logprob == -0.2);
  CHECK(s[1].logprob == -1.7);
  CHECK_THROWS_AS(gw.score_options("ctx", {"X"}), PreconditionError);

  DeterministicMockBackend mock(4);
  const auto same = mock.score("ctx", {"same", "same"});
  CHECK(same[0].logprob == same[1].logprob);

  TeacherGateway no_scores(std::make_shared<ScriptedBackend>(), quick());
  CHECK_THROWS_AS(no_scores.score_options("ctx", {"a", "b"}), CapabilityError);
}

TEST_CASE("in-flight window is bounded") {
  auto backend = std::make_shared<ScriptedBackend>();
  backend->set_handler([](const TeacherRequest& r) {
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
    return std::optional<std::string>(r.user_prompt);
  });
  GatewayConfig cfg = quick();
  cfg.max_in_flight = 2;
  TeacherGateway gw(backend, cfg);
  std::vector<std::thread> threads;
  for (int t = 0; t < 6; ++t) {
    threads.emplace_back([&, t] {
      for (int i = 0; i < 5; ++i) gw.complete(ask("q" + std::to_string(t) + "-" + std::to_string(i)));
    });
  }
  for (auto& t : threads) t.join();
  CHECK(gw.backend_calls() == 30);
  CHECK(gw.peak_in_flight() <= 2);
  CHECK(gw.peak_in_flight() >= 1);
  CHECK(gw.in_flight() == 0);
}

TEST_CASE("minimum interval spaces request starts") {
  std::vector<std::chrono::milliseconds> waits;
  auto backend = std::make_shared<ScriptedBackend>();
  backend->set_handler([](const TeacherRequest& r) { return std::optional<std::string>(r.user_prompt); });
  GatewayConfig cfg = quick();
  cfg.min_interval = std::chrono::milliseconds(1000);
  TeacherGateway gw(backend, cfg);
  gw.set_sleeper([&](std::chrono::milliseconds d) { waits.push_back(d); });
  gw.complete(ask("a"));
  gw.complete(ask("b"));
  REQUIRE(waits.size() == 1);
  CHECK(waits[0].count() > 900);
}

TEST_CASE("verdicts and refusals") {
  CHECK(parse_verdict("Yes.") == true);
  CHECK(parse_verdict("no, because") == false);
  CHECK_FALSE(parse_verdict("maybe").has_value());
  CHECK(is_refusal("I'm sorry, I can't help"));
  CHECK(is_refusal("   "));
  CHECK_FALSE(is_refusal("Sure."));
}

TEST_CASE("mock evaluator acceptance rate follows its setting") {
  DeterministicMockBackend mock(9, 0.3);
  int yes = 0;
  for (int i = 0; i < 4000; ++i) {
    yes += mock.complete(make_request(Purpose::evaluate, "r", "candidate " + std::to_string(i))).text == "yes";
  }
  CHECK(yes / 4000.0 == doctest::Approx(0.3).epsilon(0.1));
}

TEST_CASE("http backend: chat completion, retry on 503, bearer key") {
  stub::ChatServer server;
  ::setenv("SECFORGE_TEST_KEY", "sk-test", 1);
  auto backend = std::make_shared<HttpBackend>(
      HttpBackendConfig{server.base_url(), "stub-model", "SECFORGE_TEST_KEY", std::chrono::seconds(5)});
  TeacherGateway gw(backend, quick());
  const auto c = gw.complete(ask("line one\nlast line"));
  CHECK(c.text == "Stub reply: last line");
  CHECK(server.authorizations().back() == "Bearer sk-test");

  server.fail_next(2, 503);
  CHECK(gw.complete(ask("again")).text == "Stub reply: again");
  CHECK(backend->network_calls() == 4);

  server.fail_next(1, 429);
  CHECK(gw.complete(ask("limited")).text == "Stub reply: limited");

  const auto before = backend->network_calls();
  CHECK(gw.complete(ask("again")).from_cache);
  CHECK(backend->network_calls() == before);

  server.set_verdict("no");
  CHECK(gw.complete(make_request(Purpose::evaluate, "Reply with yes or no.", "ok?")).text == "no");
}

TEST_CASE("http backend: both scoring modes") {
  stub::ChatServer server;
  auto echo = std::make_shared<HttpBackend>(HttpBackendConfig{server.base_url(), "m", "", std::chrono::seconds(5)});
  const auto s = echo->score("Question?\nAnswer:", {" A", " Bravo"});
  REQUIRE(s.size() == 2);
  CHECK(s[0].logprob == doctest::Approx(-0.2));
  CHECK(s[1].logprob == doctest::Approx(-0.6));
  CHECK(s[0].token_count == 1);

  HttpBackendConfig cfg{server.base_url(), "m", "", std::chrono::seconds(5), ScoreMode::chat_top_logprobs};
  auto chat = std::make_shared<HttpBackend>(cfg);
  TeacherGateway gw(chat, quick());
  const auto t = gw.score_options("Pick 1 or 2", {"1", "2", "3"});
  CHECK(t[0].logprob == doctest::Approx(-0.2));
  CHECK(t[1].logprob == doctest::Approx(-1.7));
  CHECK(t[2].logprob < t[1].logprob);
}

TEST_CASE("http backend: unreachable endpoint is a transport error") {
  HttpBackend dead(HttpBackendConfig{"http://127.0.0.1:9", "m", "", std::chrono::seconds(1)});
  CHECK_THROWS_AS(dead.complete(ask("x")), TransportError);
  CHECK_THROWS_AS(HttpBackend(HttpBackendConfig{"not a url", "m"}), PreconditionError);
}
