#include <doctest.h>

#include <omp.h>

#include "secforge/kernels.hpp"
#include "toy.hpp"

using namespace secforge;

namespace {

struct Threads {
  explicit Threads(int n) : saved(omp_get_max_threads()) { omp_set_num_threads(n); }
  ~Threads() { omp_set_num_threads(saved); }
  int saved;
};

bool same(const kernels::NegativeOutcome& a, const kernels::NegativeOutcome& b) {
  if (a.error != b.error || a.pair.has_value() != b.pair.has_value()) return false;
  if (!a.pair) return true;
  return a.pair->a == b.pair->a && a.pair->b == b.pair->b && a.pair->hardness == b.pair->hardness &&
         a.pair->similarity_score == b.pair->similarity_score;
}

}  // namespace

TEST_CASE("cosine kernels agree element-wise") {
  const Threads threads(4);
  Rng rng(1);
  std::vector<std::string> docs;
  for (int i = 0; i < 500; ++i) docs.push_back(toy::random_text(rng, 1 + rng.below(20)));
  const TfidfModel model(docs);
  std::vector<SparseVector> vecs;
  for (const auto& d : docs) vecs.push_back(model.vectorize(d));
  for (int q = 0; q < 10; ++q) {
    const auto query = model.vectorize(toy::random_text(rng, 8));
    CHECK(kernels::cosine_scores_serial(query, vecs) == kernels::cosine_scores_parallel(query, vecs));
  }
  CHECK(kernels::cosine_scores_parallel(SparseVector{}, {}).empty());
}

TEST_CASE("negative mining kernels agree element-wise") {
  const Threads threads(4);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto g = toy::random_graph(seed, 30);
    std::vector<kernels::NegativeRequest> requests;
    for (const auto& n : g.nodes()) {
      requests.push_back({n.id, EntityKind::cwe});
      requests.push_back({n.id, EntityKind::tactic});
    }
    for (auto h : {Hardness::similar, Hardness::random}) {
      const auto a = kernels::mine_negatives_serial(g, requests, 5, seed, h);
      const auto b = kernels::mine_negatives_parallel(g, requests, 5, seed, h);
      REQUIRE(a.size() == b.size());
      for (std::size_t i = 0; i < a.size(); ++i) CHECK(same(a[i], b[i]));
    }
  }
}

TEST_CASE("rouge kernels agree element-wise") {
  const Threads threads(4);
  Rng rng(3);
  std::vector<std::pair<std::string, std::string>> pairs;
  for (int i = 0; i < 300; ++i) pairs.emplace_back(toy::random_text(rng, rng.below(15)), toy::random_text(rng, rng.below(15)));
  const auto a = kernels::rouge_batch_serial(pairs);
  const auto b = kernels::rouge_batch_parallel(pairs);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].rouge1 == b[i].rouge1);
    CHECK(a[i].rouge2 == b[i].rouge2);
    CHECK(a[i].rougeL == b[i].rougeL);
    CHECK(a[i].empty_convention == b[i].empty_convention);
  }
}
