#pragma once

#include <chrono>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

namespace acceptance {

enum class Status { pass, fail, unavailable };

struct Outcome {
  Status status = Status::pass;
  std::string detail;
};

// Collects violations; the outcome reports how many and the first few.
class Checker {
 public:
  void expect(bool ok, const std::string& what) {
    ++checks_;
    if (ok) return;
    if (failures_.size() < 5) failures_.push_back(what);
    ++violations_;
  }

  std::size_t checks() const { return checks_; }
  std::size_t violations() const { return violations_; }

  Outcome outcome(const std::string& summary) const {
    if (violations_ == 0) return {Status::pass, summary};
    std::ostringstream out;
    out << violations_ << " of " << checks_ << " checks violated";
    for (const auto& f : failures_) out << "; " << f;
    return {Status::fail, out.str()};
  }

 private:
  std::size_t checks_ = 0;
  std::size_t violations_ = 0;
  std::vector<std::string> failures_;
};

inline double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

// Copies the mini fixture into a fresh scratch directory and returns its config path.
std::filesystem::path stage_fixture(const std::string& tag);

Outcome parsers();
Outcome graph_oracles();
Outcome path_cap_and_negatives();
Outcome router_schedule();
Outcome gate_soundness();
Outcome adversarial_distractors();
Outcome metrics();
Outcome leakage();
Outcome end_to_end();
Outcome live_endpoint();

}  // namespace acceptance
