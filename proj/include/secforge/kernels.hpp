#pragma once

// Data-parallel kernels. Each has a serial reference and an OpenMP version;
// the two must return identical results (tests compare them element-wise).

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "secforge/eval.hpp"
#include "secforge/graph.hpp"
#include "secforge/similarity.hpp"

namespace secforge::kernels {

std::vector<double> cosine_scores_serial(const SparseVector& query, const std::vector<SparseVector>& candidates);
std::vector<double> cosine_scores_parallel(const SparseVector& query, const std::vector<SparseVector>& candidates);

struct NegativeRequest {
  std::string node;
  EntityKind other_kind;
};

// Either a pair or the reason none exists (e.g. every candidate is connected).
struct NegativeOutcome {
  std::optional<NegativePair> pair;
  std::string error;
};

std::vector<NegativeOutcome> mine_negatives_serial(const CtiGraph& g, const std::vector<NegativeRequest>& requests,
                                                   std::size_t n_candidates, std::uint64_t seed, Hardness hardness);
std::vector<NegativeOutcome> mine_negatives_parallel(const CtiGraph& g, const std::vector<NegativeRequest>& requests,
                                                     std::size_t n_candidates, std::uint64_t seed, Hardness hardness);

// (candidate, reference) pairs.
std::vector<RougeScores> rouge_batch_serial(const std::vector<std::pair<std::string, std::string>>& pairs);
std::vector<RougeScores> rouge_batch_parallel(const std::vector<std::pair<std::string, std::string>>& pairs);

}  // namespace secforge::kernels
