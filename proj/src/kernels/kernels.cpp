#include "secforge/kernels.hpp"

namespace secforge::kernels {
namespace {

NegativeOutcome mine_one(const CtiGraph& g, const NegativeRequest& r, std::size_t n_candidates, std::uint64_t seed,
                         Hardness hardness) {
  NegativeOutcome out;
  try {
    out.pair = sample_negatives(g, r.node, r.other_kind, n_candidates, seed, hardness);
  } catch (const Error& e) {
    out.error = e.what();
  }
  return out;
}

}  // namespace

std::vector<double> cosine_scores_serial(const SparseVector& query, const std::vector<SparseVector>& candidates) {
  std::vector<double> out(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) out[i] = cosine(query, candidates[i]);
  return out;
}

std::vector<double> cosine_scores_parallel(const SparseVector& query, const std::vector<SparseVector>& candidates) {
  std::vector<double> out(candidates.size());
  const auto n = static_cast<std::ptrdiff_t>(candidates.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) out[i] = cosine(query, candidates[i]);
  return out;
}

std::vector<NegativeOutcome> mine_negatives_serial(const CtiGraph& g, const std::vector<NegativeRequest>& requests,
                                                   std::size_t n_candidates, std::uint64_t seed, Hardness hardness) {
  std::vector<NegativeOutcome> out;
  out.reserve(requests.size());
  for (const auto& r : requests) out.push_back(mine_one(g, r, n_candidates, seed, hardness));
  return out;
}

std::vector<NegativeOutcome> mine_negatives_parallel(const CtiGraph& g, const std::vector<NegativeRequest>& requests,
                                                     std::size_t n_candidates, std::uint64_t seed, Hardness hardness) {
  g.similarity_model();  // build the shared model before workers read it
  std::vector<NegativeOutcome> out(requests.size());
  const auto n = static_cast<std::ptrdiff_t>(requests.size());
#pragma omp parallel for schedule(dynamic, 8)
  for (std::ptrdiff_t i = 0; i < n; ++i) out[i] = mine_one(g, requests[i], n_candidates, seed, hardness);
  return out;
}

std::vector<RougeScores> rouge_batch_serial(const std::vector<std::pair<std::string, std::string>>& pairs) {
  std::vector<RougeScores> out;
  out.reserve(pairs.size());
  for (const auto& [cand, ref] : pairs) out.push_back(rouge(cand, ref));
  return out;
}

std::vector<RougeScores> rouge_batch_parallel(const std::vector<std::pair<std::string, std::string>>& pairs) {
  std::vector<RougeScores> out(pairs.size());
  const auto n = static_cast<std::ptrdiff_t>(pairs.size());
#pragma omp parallel for schedule(dynamic, 16)
  for (std::ptrdiff_t i = 0; i < n; ++i) out[i] = rouge(pairs[i].first, pairs[i].second);
  return out;
}

}  // namespace secforge::kernels
