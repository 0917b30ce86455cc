// Serial reference vs OpenMP kernels. Thread count follows OMP_NUM_THREADS.

#include <benchmark/benchmark.h>

#include "secforge/kernels.hpp"
#include "toy.hpp"

using namespace secforge;

namespace {

struct CosineData {
  SparseVector query;
  std::vector<SparseVector> candidates;
};

const CosineData& cosine_data(std::size_t n) {
  static std::map<std::size_t, CosineData> cache;
  auto& d = cache[n];
  if (d.candidates.empty()) {
    Rng rng(1);
    std::vector<std::string> docs;
    for (std::size_t i = 0; i < n; ++i) docs.push_back(toy::random_text(rng, 10 + rng.below(40)));
    const TfidfModel model(docs);
    for (const auto& doc : docs) d.candidates.push_back(model.vectorize(doc));
    d.query = model.vectorize(toy::random_text(rng, 30));
  }
  return d;
}

template <bool Parallel>
void BM_cosine(benchmark::State& state) {
  const auto& d = cosine_data(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) {
    auto scores = Parallel ? kernels::cosine_scores_parallel(d.query, d.candidates)
                           : kernels::cosine_scores_serial(d.query, d.candidates);
    benchmark::DoNotOptimize(scores);
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

template <bool Parallel>
void BM_negatives(benchmark::State& state) {
  static const CtiGraph g = toy::random_graph(3, 1500, 0.003);
  std::vector<kernels::NegativeRequest> requests;
  for (const auto& n : g.nodes()) requests.push_back({n.id, EntityKind::cwe});
  (void)g.similarity_model();  // built lazily; keep it out of the timed region
  for (auto _ : state) {
    auto out = Parallel ? kernels::mine_negatives_parallel(g, requests, 50, 7, Hardness::similar)
                        : kernels::mine_negatives_serial(g, requests, 50, 7, Hardness::similar);
    benchmark::DoNotOptimize(out);
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(requests.size()));
}

template <bool Parallel>
void BM_rouge(benchmark::State& state) {
  Rng rng(5);
  std::vector<std::pair<std::string, std::string>> pairs;
  for (std::int64_t i = 0; i < state.range(0); ++i) {
    pairs.emplace_back(toy::random_text(rng, 20 + rng.below(40)), toy::random_text(rng, 20 + rng.below(40)));
  }
  for (auto _ : state) {
    auto out = Parallel ? kernels::rouge_batch_parallel(pairs) : kernels::rouge_batch_serial(pairs);
    benchmark::DoNotOptimize(out);
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

}  // namespace

BENCHMARK(BM_cosine<false>)->Name("cosine/serial")->Arg(1000)->Arg(20000)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_cosine<true>)->Name("cosine/parallel")->Arg(1000)->Arg(20000)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_negatives<false>)->Name("negatives/serial")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_negatives<true>)->Name("negatives/parallel")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_rouge<false>)->Name("rouge/serial")->Arg(2000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_rouge<true>)->Name("rouge/parallel")->Arg(2000)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
