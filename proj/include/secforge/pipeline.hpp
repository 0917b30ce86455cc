#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "secforge/ingest.hpp"
#include "secforge/items.hpp"
#include "secforge/mcq.hpp"
#include "secforge/record.hpp"
#include "secforge/sdg.hpp"
#include "secforge/teacher.hpp"

namespace secforge {

// How to reach one model role (teacher, evaluator, scorer, evaluated model).
struct EndpointConfig {
  std::string kind = "mock";  // "mock" or "http"
  std::string endpoint;
  std::string model = "mock-teacher";
  std::string api_key_env;
  double accept_rate = 0.85;  // mock evaluators only
  ScoreMode score_mode = ScoreMode::completions_echo;
  int timeout_seconds = 60;
  std::size_t max_in_flight = 8;
  int min_interval_ms = 0;
};

struct PipelineConfig {
  std::filesystem::path base_dir;
  std::vector<CorpusSource> sources;
  std::uint64_t seed = 0;
  double split_ratio = 0.8;
  std::filesystem::path out_dir;
  std::filesystem::path cache_dir;  // teacher replay cache; empty disables the on-disk mirror

  EndpointConfig teacher;
  EndpointConfig evaluator;
  EndpointConfig scorer;
  EndpointConfig eval_model;

  std::size_t path_cap = 5000;
  std::vector<std::pair<EntityKind, EntityKind>> kind_pairs;
  std::size_t negatives_per_kind_pair = 50;
  std::size_t negative_candidates = 10;

  bool sdg_enabled = true;
  SdgConfig sdg;
  std::map<std::string, std::size_t> budgets;  // per source category; absent means unlimited
  std::map<std::string, int> category_ranks;
  EvalSetConfig eval;

  std::string digest;  // effective configuration plus source content digests
};

// Record counts per source category from the reference mix, scaled and rounded.
std::map<std::string, std::size_t> table1_budgets(double scale);
const std::map<std::string, int>& default_category_ranks();
const std::vector<std::pair<EntityKind, EntityKind>>& default_kind_pairs();

std::optional<CorpusFormat> parse_format(std::string_view text);

// Reads and validates a TOML configuration. Throws Error naming the offending key or path.
PipelineConfig load_config(const std::filesystem::path& path);

struct Split {
  std::vector<std::string> train;
  std::vector<std::string> test;

  std::string digest() const;
};

/// Entity-level train/test partition. Kinds are interleaved so each side gets a
/// proportional share of every kind; sub-techniques follow their parent technique.
/// Throws PreconditionError when either side would be empty.
Split split_corpus(const Corpus& corpus, double ratio, std::uint64_t seed);

// Stable sort by (category rank, output_length). Throws PreconditionError listing
// records whose category has no rank.
std::vector<InstructionRecord> curriculum_sort(std::vector<InstructionRecord> records,
                                               const std::map<std::string, int>& ranks = default_category_ranks());

struct DatasetManifest {
  std::map<std::string, std::size_t> per_source;
  std::map<std::string, std::size_t> per_stage;
  std::map<std::string, std::size_t> per_task_type;
  std::size_t total = 0;
  std::string split_digest;
  std::string config_digest;
  std::string tool_version = std::string(kToolVersion);
  std::string dataset_sha256;

  json to_json() const;
  std::string digest() const;
};

// Writes dataset.jsonl and manifest.json into out_dir. On failure neither file is left behind.
DatasetManifest emit_dataset(const std::vector<InstructionRecord>& ordered, const std::filesystem::path& out_dir,
                             const std::string& config_digest, const std::string& split_digest);

// Source ids of eval items that also appear in training lineage or grounding.
std::vector<std::string> leakage_audit(const std::vector<InstructionRecord>& training,
                                       const std::map<std::string, std::vector<EvalItem>>& eval_sets);

std::shared_ptr<TeacherGateway> make_gateway(const EndpointConfig& endpoint, const std::filesystem::path& cache_dir,
                                             std::uint64_t seed);

enum class StageName { ingest, graph, generate, sdg, evalset, evaluate, all };

std::optional<StageName> parse_stage(std::string_view text);
std::string_view to_string(StageName s);

struct RunOptions {
  bool force = false;
  bool quiet = false;
};

// Runs `stage` (and for `all`, every stage in order). Returns 0 on success; errors are thrown.
int run(StageName stage, const PipelineConfig& config, const RunOptions& options = {});

std::filesystem::path checkpoint_dir(const PipelineConfig& config, StageName stage);

}  // namespace secforge
