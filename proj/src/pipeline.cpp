#include "secforge/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <iostream>
#include <set>
#include <unordered_set>

#include <toml.hpp>

#include "secforge/eval.hpp"
#include "secforge/graph.hpp"
#include "secforge/kernels.hpp"
#include "secforge/templates.hpp"

namespace secforge {
namespace fs = std::filesystem;

namespace {

const std::vector<std::pair<std::string, std::size_t>> kReferenceMix{
    {"attack", 45901}, {"cwe", 4080},  {"cve", 8447},  {"capec", 3917}, {"wiki", 11000},         {"interview", 500},
    {"threat_report", 4500}, {"bron", 62227}, {"siem", 400}, {"sigma", 9329}, {"stack_exchange", 2573},
};

std::string json_lines(const std::vector<json>& rows) {
  std::string out;
  for (const auto& r : rows) {
    out += r.dump();
    out.push_back('\n');
  }
  return out;
}

std::size_t count_lines(std::string_view text) { return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')); }

std::string digest_path(const fs::path& p) {
  if (fs::is_regular_file(p)) return sha256_hex(read_file(p.string()));
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(p)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::string acc;
  for (const auto& f : files) acc += fs::relative(f, p).generic_string() + "=" + sha256_hex(read_file(f.string())) + "\n";
  return sha256_hex(acc);
}

// ---- TOML helpers --------------------------------------------------------

template <class T>
T get_or(const toml::table& t, std::string_view key, T fallback) {
  if (const auto* node = t.get(key)) {
    if (auto v = node->value<T>()) return *v;
    throw Error("config key '" + std::string(key) + "' has the wrong type");
  }
  return fallback;
}

std::vector<std::string> string_array(const toml::table& t, std::string_view key) {
  std::vector<std::string> out;
  const auto* arr = t.get_as<toml::array>(key);
  if (!arr) return out;
  for (const auto& n : *arr) {
    const auto v = n.value<std::string>();
    if (!v) throw Error("config key '" + std::string(key) + "' must hold strings");
    out.push_back(*v);
  }
  return out;
}

EndpointConfig endpoint_from(const toml::table* t, std::string default_model) {
  EndpointConfig e;
  e.model = std::move(default_model);
  if (!t) return e;
  e.kind = get_or<std::string>(*t, "kind", e.kind);
  if (e.kind != "mock" && e.kind != "http") throw Error("endpoint kind must be 'mock' or 'http'");
  e.endpoint = get_or<std::string>(*t, "endpoint", "");
  e.model = get_or<std::string>(*t, "model", e.model);
  e.api_key_env = get_or<std::string>(*t, "api_key_env", "");
  e.accept_rate = get_or<double>(*t, "accept_rate", e.accept_rate);
  e.timeout_seconds = static_cast<int>(get_or<std::int64_t>(*t, "timeout_seconds", e.timeout_seconds));
  e.max_in_flight = static_cast<std::size_t>(get_or<std::int64_t>(*t, "max_in_flight", 8));
  e.min_interval_ms = static_cast<int>(get_or<std::int64_t>(*t, "min_interval_ms", 0));
  const auto mode = get_or<std::string>(*t, "score_mode", "completions_echo");
  if (mode == "completions_echo") {
    e.score_mode = ScoreMode::completions_echo;
  } else if (mode == "chat_top_logprobs") {
    e.score_mode = ScoreMode::chat_top_logprobs;
  } else {
    throw Error("unknown score_mode '" + mode + "'");
  }
  if (e.kind == "http" && e.endpoint.empty()) throw Error("http endpoint needs an 'endpoint' URL");
  return e;
}

json endpoint_json(const EndpointConfig& e) {
  return {{"kind", e.kind},
          {"endpoint", e.endpoint},
          {"model", e.model},
          {"accept_rate", e.accept_rate},
          {"score_mode", e.score_mode == ScoreMode::completions_echo ? "completions_echo" : "chat_top_logprobs"}};
}

// ---- stage plumbing ------------------------------------------------------

void log_summary(const RunOptions& options, const json& summary) {
  if (!options.quiet) std::clog << summary.dump() << '\n';
}

fs::path require(const PipelineConfig& config, StageName upstream) {
  const fs::path dir = checkpoint_dir(config, upstream);
  if (!fs::exists(dir / "_SUCCESS")) throw PreconditionError("run " + std::string(to_string(upstream)) + " first");
  return dir;
}

void mark_done(const fs::path& dir, const json& summary) {
  write_file_atomic((dir / "summary.json").string(), summary.dump(2) + "\n");
  write_file_atomic((dir / "_SUCCESS").string(), "");
}

CtiGraph load_graph(const fs::path& graph_dir) { return CtiGraph::from_jsonl(read_file((graph_dir / "graph.jsonl").string())); }

Split load_split(const fs::path& graph_dir) {
  const auto j = json::parse(read_file((graph_dir / "split.json").string()));
  return {j.at("train").get<std::vector<std::string>>(), j.at("test").get<std::vector<std::string>>()};
}

std::vector<Path> load_paths(const fs::path& file) {
  std::vector<Path> out;
  std::istringstream in(read_file(file.string()));
  std::string line;
  while (std::getline(in, line)) {
    if (!trim(line).empty()) out.push_back(path_from_json(json::parse(line)));
  }
  return out;
}

std::vector<NegativePair> load_negatives(const fs::path& file) {
  std::vector<NegativePair> out;
  std::istringstream in(read_file(file.string()));
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto j = json::parse(line);
    out.push_back({j.at("a").get<std::string>(), j.at("b").get<std::string>(),
                   j.at("hardness").get<std::string>() == "random" ? Hardness::random : Hardness::similar,
                   j.at("similarity").get<double>()});
  }
  return out;
}

std::string grounding_text(const Entity& e) {
  std::string out = e.name + " (" + e.id + ")\n" + e.description;
  for (const auto& [key, value] : e.attributes) {
    if (key == "category") continue;
    std::string text = e.attr_text(key);
    if (!text.empty()) out += "\n" + key + ": " + text;
  }
  return out;
}

struct Gateways {
  std::shared_ptr<TeacherGateway> teacher;
  std::shared_ptr<TeacherGateway> evaluator;
};

Gateways authoring_gateways(const PipelineConfig& config) {
  return {make_gateway(config.teacher, config.cache_dir.empty() ? fs::path() : config.cache_dir / "teacher",
                       derive_seed(config.seed, "teacher")),
          make_gateway(config.evaluator, config.cache_dir.empty() ? fs::path() : config.cache_dir / "evaluator",
                       derive_seed(config.seed, "evaluator"))};
}

// ---- stages ----------------------------------------------------------------

json stage_ingest(const PipelineConfig& config, const fs::path& dir) {
  ParseDiagnostics diag;
  const Corpus corpus = load_corpus(config.sources, config.seed, &diag);
  write_file_atomic((dir / "corpus.jsonl").string(), entities_to_jsonl(corpus.entities));
  json sources = json::array();
  for (const auto& m : corpus.source_manifest) {
    sources.push_back({{"path", m.path}, {"format", m.format}, {"digest", m.digest}, {"entities", m.entity_count}});
  }
  json errors = json::array();
  for (const auto& e : diag.record_errors) {
    errors.push_back({{"origin", e.origin}, {"position", e.position}, {"message", e.message}});
  }
  write_file_atomic((dir / "sources.json").string(), sources.dump(2) + "\n");
  write_file_atomic((dir / "record_errors.json").string(), errors.dump(2) + "\n");
  std::map<std::string, std::size_t> kinds;
  for (const auto& e : corpus.entities) ++kinds[std::string(to_string(e.kind))];
  return {{"entities", corpus.entities.size()},
          {"kinds", kinds},
          {"record_errors", diag.record_errors.size()},
          {"skipped_unknown", diag.skipped_unknown},
          {"dropped_deprecated", diag.dropped_deprecated}};
}

json stage_graph(const PipelineConfig& config, const fs::path& dir) {
  const fs::path ingest = require(config, StageName::ingest);
  Corpus corpus;
  corpus.entities = entities_from_jsonl(read_file((ingest / "corpus.jsonl").string()));
  corpus.reindex();
  const CtiGraph g = build_graph(corpus);
  const Split split = split_corpus(corpus, config.split_ratio, config.seed);
  write_file_atomic((dir / "graph.jsonl").string(), g.to_jsonl());
  json sj;
  sj["ratio"] = config.split_ratio;
  sj["digest"] = split.digest();
  sj["train"] = split.train;
  sj["test"] = split.test;
  write_file_atomic((dir / "split.json").string(), sj.dump() + "\n");

  // Paths and negatives for the training side only.
  const CtiGraph train = g.induced({split.train.begin(), split.train.end()});
  std::vector<json> path_rows;
  std::set<std::string> seen;
  json per_pair = json::object();
  std::vector<kernels::NegativeRequest> requests;
  for (const auto& [src, dst] : config.kind_pairs) {
    const std::string pair_name = std::string(to_string(src)) + ">" + std::string(to_string(dst));
    auto paths = filter_subsumed(
        sample_paths(train, src, dst, config.path_cap, derive_seed(config.seed, "paths:" + pair_name)));
    per_pair[pair_name] = paths.size();
    std::vector<std::string> anchors;
    for (const auto& p : paths) {
      if (!seen.insert(p.id()).second) continue;
      path_rows.push_back(to_json(p));
      if (p.length() == 1) anchors.push_back(p.nodes.front());
    }
    std::sort(anchors.begin(), anchors.end());
    anchors.erase(std::unique(anchors.begin(), anchors.end()), anchors.end());
    Rng rng(derive_seed(config.seed, "negative-anchors:" + pair_name));
    for (std::size_t i : rng.sample_indices(anchors.size(), std::min(anchors.size(), config.negatives_per_kind_pair))) {
      requests.push_back({anchors[i], dst});
    }
  }
  write_file_atomic((dir / "paths.jsonl").string(), json_lines(path_rows));

  // Half of the requests get the most similar candidate, the other half a uniform one.
  std::vector<kernels::NegativeRequest> hard;
  std::vector<kernels::NegativeRequest> easy;
  for (std::size_t i = 0; i < requests.size(); ++i) (i % 2 == 0 ? hard : easy).push_back(requests[i]);
  const auto seed = derive_seed(config.seed, "negatives");
  auto outcomes = kernels::mine_negatives_parallel(train, hard, config.negative_candidates, seed, Hardness::similar);
  auto more = kernels::mine_negatives_parallel(train, easy, config.negative_candidates, seed, Hardness::random);
  outcomes.insert(outcomes.end(), more.begin(), more.end());
  std::vector<json> neg_rows;
  std::size_t no_candidates = 0;
  for (const auto& o : outcomes) {
    if (!o.pair) {
      ++no_candidates;
      continue;
    }
    neg_rows.push_back({{"a", o.pair->a},
                        {"b", o.pair->b},
                        {"hardness", std::string(to_string(o.pair->hardness))},
                        {"similarity", o.pair->similarity_score}});
  }
  write_file_atomic((dir / "negatives.jsonl").string(), json_lines(neg_rows));
  return {{"nodes", g.size()},
          {"edges", g.edge_count()},
          {"dangling", g.dangling().size()},
          {"train", split.train.size()},
          {"test", split.test.size()},
          {"paths", path_rows.size()},
          {"paths_per_pair", per_pair},
          {"negatives", neg_rows.size()},
          {"negatives_without_candidates", no_candidates}};
}

json stage_generate(const PipelineConfig& config, const fs::path& dir) {
  const fs::path graph_dir = require(config, StageName::graph);
  const CtiGraph g = load_graph(graph_dir);
  const Split split = load_split(graph_dir);
  const CtiGraph train = g.induced({split.train.begin(), split.train.end()});
  const auto paths = load_paths(graph_dir / "paths.jsonl");
  const auto negatives = load_negatives(graph_dir / "negatives.jsonl");
  const TemplateRegistry& registry = TemplateRegistry::builtin();
  const std::uint64_t seed = derive_seed(config.seed, "templates");
  auto gw = authoring_gateways(config);
  const TeacherLink link{*gw.teacher, *gw.evaluator};
  ForgeTally tally;

  // Teacher-free rendering, per entity, in parallel with ordered output.
  const auto n = static_cast<std::ptrdiff_t>(train.size());
  std::vector<std::vector<InstructionRecord>> parts(train.size());
  std::vector<std::exception_ptr> errors(train.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    try {
      const Entity& e = train.node(static_cast<std::size_t>(i));
      auto& out = parts[i];
      if (e.kind == EntityKind::document) {
        out = render_document(e, registry, seed);
        continue;
      }
      out = render_characteristics(e, registry, seed);
      auto rel = render_intra_relations(train, e, registry, seed);
      out.insert(out.end(), rel.begin(), rel.end());
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  std::vector<InstructionRecord> records;
  for (auto& p : parts) {
    for (auto& r : p) records.push_back(std::move(r));
  }

  std::size_t cot_chains = 0;
  for (const auto& chain : build_attack_cots(train)) {
    if (!chain_consistent(train, chain)) throw Error("inconsistent ATT&CK chain for " + chain.steps.front().from);
    ++cot_chains;
    for (auto& r : render_attack_cot(train, chain, registry, seed)) records.push_back(std::move(r));
  }

  json families = json::object();
  for (BronFamily f : all_bron_families()) {
    auto built = build_bron_instructions(train, paths, f == BronFamily::direct ? negatives : std::vector<NegativePair>{},
                                         link, f, registry, seed, tally);
    families[std::string(to_string(f))] = built.size();
    for (auto& r : built) records.push_back(std::move(r));
  }

  std::vector<const Entity*> rules;
  for (EntityKind k : {EntityKind::sigma_rule, EntityKind::detection_rule}) {
    for (std::size_t i : train.of_kind(k)) rules.push_back(&train.node(i));
  }
  const auto nr = static_cast<std::ptrdiff_t>(rules.size());
  std::vector<std::vector<InstructionRecord>> rule_parts(rules.size());
  std::vector<ForgeTally> rule_tallies(rules.size());
  std::vector<std::exception_ptr> rule_errors(rules.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < nr; ++i) {
    try {
      for (RuleTask task : all_rule_tasks()) {
        auto built = build_rule_instructions(*rules[i], train, link, task, registry, seed, rule_tallies[i]);
        rule_parts[i].insert(rule_parts[i].end(), built.begin(), built.end());
      }
    } catch (...) {
      rule_errors[i] = std::current_exception();
    }
  }
  for (const auto& e : rule_errors) {
    if (e) std::rethrow_exception(e);
  }
  for (std::size_t i = 0; i < rules.size(); ++i) {
    tally.merge(rule_tallies[i]);
    for (auto& r : rule_parts[i]) records.push_back(std::move(r));
  }

  // De-duplicate, then apply per-source budgets with a seeded subset that keeps record order.
  std::vector<InstructionRecord> unique;
  std::unordered_set<std::string> ids;
  for (auto& r : records) {
    if (ids.insert(r.id).second) unique.push_back(std::move(r));
  }
  std::map<std::string, std::vector<std::size_t>> by_source;
  for (std::size_t i = 0; i < unique.size(); ++i) by_source[unique[i].source_category].push_back(i);
  std::vector<bool> keep(unique.size(), true);
  json trimmed = json::object();
  for (const auto& [cat, idx] : by_source) {
    const auto b = config.budgets.find(cat);
    if (b == config.budgets.end() || idx.size() <= b->second) continue;
    std::vector<bool> chosen(idx.size(), false);
    Rng rng(derive_seed(config.seed, "budget:" + cat));
    for (std::size_t k : rng.sample_indices(idx.size(), b->second)) chosen[k] = true;
    for (std::size_t k = 0; k < idx.size(); ++k) keep[idx[k]] = chosen[k];
    trimmed[cat] = idx.size() - b->second;
  }
  std::vector<InstructionRecord> schema;
  for (std::size_t i = 0; i < unique.size(); ++i) {
    if (!keep[i]) continue;
    validate(unique[i]);
    schema.push_back(std::move(unique[i]));
  }
  write_file_atomic((dir / "schema.jsonl").string(), records_to_jsonl(schema));

  std::vector<json> audit;
  for (const auto& a : tally.audit) {
    audit.push_back({{"candidate_id", a.candidate_id}, {"check", a.check}, {"answer", a.answer}, {"passed", a.passed}});
  }
  write_file_atomic((dir / "passage_audit.jsonl").string(), json_lines(audit));
  json errs = tally.record_errors;
  write_file_atomic((dir / "record_errors.json").string(), errs.dump(2) + "\n");

  std::map<std::string, std::size_t> per_source;
  std::map<std::string, std::size_t> per_type;
  for (const auto& r : schema) {
    ++per_source[r.source_category];
    ++per_type[std::string(to_string(r.task_type))];
  }
  json summary = tally.summary();
  summary["records"] = schema.size();
  summary["per_source"] = per_source;
  summary["per_task_type"] = per_type;
  summary["attack_cot_chains"] = cot_chains;
  summary["bron_families"] = families;
  summary["trimmed_by_budget"] = trimmed;
  return summary;
}

json stage_sdg(const PipelineConfig& config, const fs::path& dir) {
  const fs::path gen = require(config, StageName::generate);
  const fs::path graph_dir = require(config, StageName::graph);
  auto schema = records_from_jsonl(read_file((gen / "schema.jsonl").string()));
  const CtiGraph g = load_graph(graph_dir);
  const Split split = load_split(graph_dir);

  InstructionPool pool;
  if (config.sdg_enabled && !schema.empty()) {
    std::unordered_set<std::string> train(split.train.begin(), split.train.end());
    const DocLookup docs = [&](const std::string& id) -> std::optional<std::string> {
      if (!train.count(id)) return std::nullopt;
      const Entity* e = g.find(id);
      if (!e) return std::nullopt;
      return grounding_text(*e);
    };
    auto gw = authoring_gateways(config);
    pool = run_sdg(schema, docs, config.sdg, *gw.teacher, *gw.evaluator, derive_seed(config.seed, "sdg"));
  } else {
    pool = InstructionPool(schema);
  }
  check_pool(pool);
  for (const auto& r : pool.records()) validate(r);
  write_file_atomic((dir / "lineage.jsonl").string(), pool.lineage_jsonl());
  write_file_atomic((dir / "audit.jsonl").string(), pool.audit_jsonl());

  const auto ordered = curriculum_sort(pool.records(), config.category_ranks);
  const auto manifest = emit_dataset(ordered, config.out_dir, config.digest, split.digest());
  std::size_t sdg_count = manifest.per_stage.count("sdg") ? manifest.per_stage.at("sdg") : 0;
  return {{"schema_records", schema.size()},
          {"sdg_records", sdg_count},
          {"rejections", pool.rejections.size()},
          {"deferred", pool.deferred},
          {"generation_failures", pool.generation_failures},
          {"duplicates", pool.duplicates},
          {"total", manifest.total},
          {"manifest_digest", manifest.digest()}};
}

json stage_evalset(const PipelineConfig& config, const fs::path& dir) {
  const fs::path graph_dir = require(config, StageName::graph);
  require(config, StageName::sdg);
  const CtiGraph g = load_graph(graph_dir);
  const Split split = load_split(graph_dir);
  auto gw = authoring_gateways(config);
  auto scorer = make_gateway(config.scorer, config.cache_dir.empty() ? fs::path() : config.cache_dir / "scorer",
                             derive_seed(config.seed, "scorer"));
  const TeacherLink link{*gw.teacher, *gw.evaluator};
  const auto sets = build_eval_sets(g, {split.test.begin(), split.test.end()}, *scorer, link, config.eval,
                                    derive_seed(config.seed, "evalset"));

  const auto training = records_from_jsonl(read_file((config.out_dir / "dataset.jsonl").string()));
  const auto leaks = leakage_audit(training, sets.tasks);
  if (!leaks.empty()) {
    throw Error("leakage audit failed: " + std::to_string(leaks.size()) + " eval source ids appear in training lineage (" +
                leaks.front() + ", ...)");
  }

  const fs::path eval_dir = config.out_dir / "eval";
  fs::create_directories(eval_dir);
  json counts = json::object();
  for (const auto& [task, items] : sets.tasks) {
    write_file_atomic((eval_dir / (task + ".jsonl")).string(), items_to_jsonl(items));
    counts[task] = items.size();
  }
  json skipped = sets.skipped;
  write_file_atomic((dir / "skipped.json").string(), skipped.dump(2) + "\n");
  json summary = sets.tally.summary();
  summary["items"] = counts;
  summary["warnings"] = sets.warnings;
  summary["skipped"] = sets.skipped.size();
  summary["leakage"] = 0;
  return summary;
}

json stage_evaluate(const PipelineConfig& config, const fs::path&) {
  require(config, StageName::evalset);
  auto model = make_gateway(config.eval_model,
                            config.cache_dir.empty() ? fs::path() : config.cache_dir / "eval_model",
                            derive_seed(config.seed, "eval_model"));
  const auto report = evaluate_directory(config.out_dir / "eval", *model, {}, "", config.digest);
  write_file_atomic((config.out_dir / "report.json").string(), to_json(report).dump(2) + "\n");
  return {{"model", report.model}, {"overall", report.overall}, {"tasks", report.tasks.size()}};
}

}  // namespace

std::map<std::string, std::size_t> table1_budgets(double scale) {
  if (!(scale > 0.0)) throw PreconditionError("budget scale must be positive");
  std::map<std::string, std::size_t> out;
  for (const auto& [cat, n] : kReferenceMix) {
    out[cat] = static_cast<std::size_t>(std::llround(static_cast<double>(n) * scale));
  }
  return out;
}

const std::map<std::string, int>& default_category_ranks() {
  // Base frameworks and document corpora first, cross-framework BRON after them, rule corpora last.
  static const std::map<std::string, int> ranks{
      {"attack", 0}, {"cwe", 0},  {"cve", 0},  {"capec", 0}, {"wiki", 0},  {"interview", 0},
      {"threat_report", 0}, {"stack_exchange", 0}, {"bron", 1}, {"siem", 2}, {"sigma", 2},
  };
  return ranks;
}

const std::vector<std::pair<EntityKind, EntityKind>>& default_kind_pairs() {
  static const std::vector<std::pair<EntityKind, EntityKind>> pairs{
      {EntityKind::tactic, EntityKind::technique}, {EntityKind::technique, EntityKind::capec},
      {EntityKind::capec, EntityKind::cwe},        {EntityKind::cwe, EntityKind::cve},
      {EntityKind::technique, EntityKind::cwe},    {EntityKind::capec, EntityKind::cve},
      {EntityKind::tactic, EntityKind::capec},
  };
  return pairs;
}

std::optional<CorpusFormat> parse_format(std::string_view text) {
  for (CorpusFormat f : {CorpusFormat::attack_stix, CorpusFormat::cwe_xml, CorpusFormat::capec_xml,
                         CorpusFormat::cve_json, CorpusFormat::sigma_dir, CorpusFormat::detection_rules_jsonl,
                         CorpusFormat::documents_jsonl}) {
    if (to_string(f) == text) return f;
  }
  return std::nullopt;
}

PipelineConfig load_config(const fs::path& path) {
  toml::table root;
  try {
    root = toml::parse_file(path.string());
  } catch (const toml::parse_error& e) {
    throw ParseError(path.string() + ": " + std::string(e.description()));
  }
  PipelineConfig c;
  c.base_dir = fs::absolute(path).parent_path();
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : c.base_dir / p; };

  const auto* seed = root.get("seed");
  if (!seed || !seed->value<std::int64_t>()) throw Error("config needs an explicit integer 'seed'");
  c.seed = static_cast<std::uint64_t>(*seed->value<std::int64_t>());
  c.split_ratio = get_or<double>(root, "split_ratio", c.split_ratio);
  if (!(c.split_ratio > 0.0 && c.split_ratio < 1.0)) throw Error("split_ratio must lie in (0, 1)");
  c.out_dir = resolve(get_or<std::string>(root, "out_dir", "out"));
  const auto cache = get_or<std::string>(root, "cache_dir", "");
  c.cache_dir = cache.empty() ? c.out_dir / "cache" : resolve(cache);

  const auto* sources = root.get_as<toml::array>("sources");
  if (!sources || sources->empty()) throw Error("config needs at least one [[sources]] entry");
  json source_json = json::array();
  for (const auto& node : *sources) {
    const auto* t = node.as_table();
    if (!t) throw Error("[[sources]] entries must be tables");
    CorpusSource s;
    const auto raw_path = get_or<std::string>(*t, "path", "");
    const auto format = get_or<std::string>(*t, "format", "");
    const auto f = parse_format(format);
    if (!f) throw Error("unknown source format '" + format + "'");
    s.format = *f;
    s.path = resolve(raw_path);
    if (raw_path.empty() || !fs::exists(s.path)) throw Error("source path does not exist: " + s.path.string());
    s.document_category = get_or<std::string>(*t, "category", s.document_category);
    if (s.format == CorpusFormat::documents_jsonl && !is_source_category(s.document_category)) {
      throw Error("unknown document category '" + s.document_category + "'");
    }
    if (const auto* schema = t->get_as<toml::table>("schema")) {
      s.rule_schema.id = get_or<std::string>(*schema, "id", s.rule_schema.id);
      s.rule_schema.name = get_or<std::string>(*schema, "name", s.rule_schema.name);
      s.rule_schema.description = get_or<std::string>(*schema, "description", s.rule_schema.description);
      s.rule_schema.pattern = get_or<std::string>(*schema, "pattern", s.rule_schema.pattern);
      s.rule_schema.ttp_ids = get_or<std::string>(*schema, "ttp_ids", s.rule_schema.ttp_ids);
      s.rule_schema.risk_level = get_or<std::string>(*schema, "risk_level", s.rule_schema.risk_level);
    }
    if (auto domains = string_array(*t, "domains"); !domains.empty()) s.attack.domains = domains;
    source_json.push_back({{"path", raw_path},
                           {"format", format},
                           {"category", s.document_category},
                           {"content", digest_path(s.path)}});
    c.sources.push_back(std::move(s));
  }

  c.teacher = endpoint_from(root.get_as<toml::table>("teacher"), "mock-teacher");
  c.evaluator = endpoint_from(root.get_as<toml::table>("evaluator"), "mock-evaluator");
  c.scorer = endpoint_from(root.get_as<toml::table>("scorer"), "mock-scorer");
  c.eval_model = endpoint_from(root.get_as<toml::table>("eval_model"), "mock-student");

  c.kind_pairs = default_kind_pairs();
  if (const auto* p = root.get_as<toml::table>("paths")) {
    c.path_cap = static_cast<std::size_t>(get_or<std::int64_t>(*p, "cap", 5000));
    c.negatives_per_kind_pair = static_cast<std::size_t>(get_or<std::int64_t>(*p, "negatives_per_kind_pair", 50));
    c.negative_candidates = static_cast<std::size_t>(get_or<std::int64_t>(*p, "negative_candidates", 10));
    if (const auto* pairs = p->get_as<toml::array>("kind_pairs")) {
      c.kind_pairs.clear();
      for (const auto& pn : *pairs) {
        const auto* arr = pn.as_array();
        if (!arr || arr->size() != 2) throw Error("paths.kind_pairs entries must be [src, dst]");
        const auto a = parse_kind((*arr)[0].value_or(std::string()));
        const auto b = parse_kind((*arr)[1].value_or(std::string()));
        if (!a || !b || *a == *b) throw Error("paths.kind_pairs has an invalid kind pair");
        c.kind_pairs.emplace_back(*a, *b);
      }
    }
  }

  if (const auto* s = root.get_as<toml::table>("sdg")) {
    c.sdg_enabled = get_or<bool>(*s, "enabled", true);
    c.sdg.p0 = get_or<double>(*s, "p0", c.sdg.p0);
    c.sdg.max_iterations = static_cast<int>(get_or<std::int64_t>(*s, "max_iterations", c.sdg.max_iterations));
    c.sdg.budget_ratio = get_or<double>(*s, "budget_ratio", c.sdg.budget_ratio);
    if (const auto* b = s->get("budget")) c.sdg.budget = static_cast<std::size_t>(b->value_or<std::int64_t>(0));
    if (auto cats = string_array(*s, "categories"); !cats.empty()) c.sdg.categories = {cats.begin(), cats.end()};
    c.sdg.max_attempts_per_iteration =
        static_cast<std::size_t>(get_or<std::int64_t>(*s, "max_attempts_per_iteration", 20000));
    if (!(c.sdg.p0 > 0.0 && c.sdg.p0 <= 1.0)) throw Error("sdg.p0 must lie in (0, 1]");
  }

  std::string preset = "table1";
  double scale = 1.0;
  if (const auto* b = root.get_as<toml::table>("budgets")) {
    preset = get_or<std::string>(*b, "preset", preset);
    scale = get_or<double>(*b, "scale", scale);
  }
  if (preset == "table1") {
    c.budgets = table1_budgets(scale);
  } else if (preset != "none") {
    throw Error("budgets.preset must be 'table1' or 'none'");
  }
  if (const auto* b = root.get_as<toml::table>("budgets")) {
    if (const auto* o = b->get_as<toml::table>("overrides")) {
      for (const auto& [k, v] : *o) {
        const std::string cat(k.str());
        if (!is_source_category(cat)) throw Error("budgets.overrides names unknown category '" + cat + "'");
        c.budgets[cat] = static_cast<std::size_t>(v.value_or<std::int64_t>(0));
      }
    }
  }

  c.category_ranks = default_category_ranks();
  if (const auto* cur = root.get_as<toml::table>("curriculum")) {
    if (const auto* ranks = cur->get_as<toml::table>("ranks")) {
      for (const auto& [k, v] : *ranks) c.category_ranks[std::string(k.str())] = static_cast<int>(v.value_or<std::int64_t>(0));
    }
  }

  if (const auto* e = root.get_as<toml::table>("eval")) {
    c.eval.adversarial = get_or<bool>(*e, "adversarial", c.eval.adversarial);
    c.eval.max_items_per_task = static_cast<std::size_t>(get_or<std::int64_t>(*e, "max_items_per_task", 0));
    c.eval.min_items_per_task = static_cast<std::size_t>(get_or<std::int64_t>(*e, "min_items_per_task", 1));
    c.eval.negatives_per_kind_pair =
        static_cast<std::size_t>(get_or<std::int64_t>(*e, "pairs_per_kind_pair", c.eval.negatives_per_kind_pair));
  }

  json eff;
  eff["tool_version"] = std::string(kToolVersion);
  eff["seed"] = c.seed;
  eff["split_ratio"] = c.split_ratio;
  eff["sources"] = source_json;
  eff["teacher"] = endpoint_json(c.teacher);
  eff["evaluator"] = endpoint_json(c.evaluator);
  eff["scorer"] = endpoint_json(c.scorer);
  eff["eval_model"] = endpoint_json(c.eval_model);
  eff["path_cap"] = c.path_cap;
  json pairs = json::array();
  for (const auto& [a, b] : c.kind_pairs) pairs.push_back({std::string(to_string(a)), std::string(to_string(b))});
  eff["kind_pairs"] = pairs;
  eff["negatives"] = {c.negatives_per_kind_pair, c.negative_candidates};
  eff["sdg"] = {{"enabled", c.sdg_enabled},
                {"p0", c.sdg.p0},
                {"max_iterations", c.sdg.max_iterations},
                {"budget", c.sdg.budget ? json(*c.sdg.budget) : json(nullptr)},
                {"budget_ratio", c.sdg.budget_ratio},
                {"categories", std::vector<std::string>(c.sdg.categories.begin(), c.sdg.categories.end())}};
  eff["budgets"] = c.budgets;
  eff["ranks"] = c.category_ranks;
  eff["eval"] = {{"adversarial", c.eval.adversarial},
                 {"max_items", c.eval.max_items_per_task},
                 {"min_items", c.eval.min_items_per_task},
                 {"pairs", c.eval.negatives_per_kind_pair}};
  c.digest = short_digest(eff.dump());
  return c;
}

std::string Split::digest() const {
  return short_digest("train:" + join(train, ",") + "\ntest:" + join(test, ","));
}

Split split_corpus(const Corpus& corpus, double ratio, std::uint64_t seed) {
  if (corpus.entities.empty()) throw PreconditionError("cannot split an empty corpus");
  if (!(ratio > 0.0 && ratio < 1.0)) throw PreconditionError("split ratio must lie in (0, 1)");
  std::unordered_set<std::string> ids;
  for (const auto& e : corpus.entities) ids.insert(e.id);

  // Sub-techniques whose parent is in the corpus are placed with that parent.
  std::map<std::string, std::string> parent_of;
  for (const auto& e : corpus.entities) {
    if (e.kind != EntityKind::subtechnique) continue;
    for (const auto& r : e.references) {
      if (r.relation == Relation::subtechnique_of && ids.count(r.target)) {
        parent_of[e.id] = r.target;
        break;
      }
    }
  }
  std::map<EntityKind, std::vector<std::string>> roots;
  for (const auto& e : corpus.entities) {
    if (!parent_of.count(e.id)) roots[e.kind].push_back(e.id);
  }
  std::size_t n_roots = 0;
  struct Ranked {
    double key;
    int kind;
    std::string id;
  };
  std::vector<Ranked> order;
  for (auto& [kind, members] : roots) {
    std::sort(members.begin(), members.end());
    Rng(derive_seed(seed, "split:" + std::string(to_string(kind)))).shuffle(members);
    for (std::size_t i = 0; i < members.size(); ++i) {
      order.push_back({(static_cast<double>(i) + 0.5) / static_cast<double>(members.size()), static_cast<int>(kind),
                       members[i]});
    }
    n_roots += members.size();
  }
  // Interleave kinds by relative position so every prefix holds a proportional share of each kind.
  std::sort(order.begin(), order.end(), [](const Ranked& a, const Ranked& b) {
    if (a.key != b.key) return a.key < b.key;
    if (a.kind != b.kind) return a.kind < b.kind;
    return a.id < b.id;
  });
  const auto n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n_roots)));
  if (n_train == 0 || n_train >= n_roots) throw PreconditionError("split ratio leaves one side empty");

  std::unordered_set<std::string> train;
  for (std::size_t i = 0; i < n_train; ++i) train.insert(order[i].id);
  Split s;
  for (const auto& e : corpus.entities) {
    const auto p = parent_of.find(e.id);
    const std::string& anchor = p == parent_of.end() ? e.id : p->second;
    (train.count(anchor) ? s.train : s.test).push_back(e.id);
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

std::vector<InstructionRecord> curriculum_sort(std::vector<InstructionRecord> records,
                                               const std::map<std::string, int>& ranks) {
  std::vector<std::string> unknown;
  for (const auto& r : records) {
    if (!ranks.count(r.source_category)) unknown.push_back(r.id + " (" + r.source_category + ")");
  }
  if (!unknown.empty()) {
    throw PreconditionError("no curriculum rank for " + std::to_string(unknown.size()) + " records: " +
                            join(std::vector<std::string>(unknown.begin(), unknown.begin() +
                                                                               static_cast<std::ptrdiff_t>(std::min<std::size_t>(unknown.size(), 5))),
                                 ", "));
  }
  std::stable_sort(records.begin(), records.end(), [&](const InstructionRecord& a, const InstructionRecord& b) {
    const int ra = ranks.at(a.source_category);
    const int rb = ranks.at(b.source_category);
    if (ra != rb) return ra < rb;
    return a.output_length < b.output_length;
  });
  return records;
}

json DatasetManifest::to_json() const {
  json j;
  j["tool_version"] = tool_version;
  j["config_digest"] = config_digest;
  j["split_digest"] = split_digest;
  j["total"] = total;
  j["per_source"] = per_source;
  j["per_stage"] = per_stage;
  j["per_task_type"] = per_task_type;
  j["dataset_sha256"] = dataset_sha256;
  return j;
}

std::string DatasetManifest::digest() const { return sha256_hex(to_json().dump()); }

DatasetManifest emit_dataset(const std::vector<InstructionRecord>& ordered, const fs::path& out_dir,
                             const std::string& config_digest, const std::string& split_digest) {
  DatasetManifest m;
  m.config_digest = config_digest;
  m.split_digest = split_digest;
  m.total = ordered.size();
  for (const auto& r : ordered) {
    ++m.per_source[r.source_category];
    ++m.per_stage[std::string(to_string(r.generation.stage))];
    ++m.per_task_type[std::string(to_string(r.task_type))];
  }
  const std::string body = records_to_jsonl(ordered);
  if (count_lines(body) != m.total) throw Error("dataset line count does not match record count");
  m.dataset_sha256 = sha256_hex(body);
  const fs::path data = out_dir / "dataset.jsonl";
  const fs::path manifest = out_dir / "manifest.json";
  try {
    fs::create_directories(out_dir);
    write_file_atomic(data.string(), body);
    json j = m.to_json();
    j["manifest_digest"] = m.digest();
    write_file_atomic(manifest.string(), j.dump(2) + "\n");
  } catch (...) {
    std::error_code ec;
    fs::remove(data, ec);
    fs::remove(manifest, ec);
    throw;
  }
  return m;
}

std::vector<std::string> leakage_audit(const std::vector<InstructionRecord>& training,
                                       const std::map<std::string, std::vector<EvalItem>>& eval_sets) {
  std::unordered_set<std::string> seen;
  for (const auto& r : training) {
    seen.insert(r.lineage_ids.begin(), r.lineage_ids.end());
    if (r.grounding_doc_id) seen.insert(*r.grounding_doc_id);
  }
  std::set<std::string> leaks;
  for (const auto& [_, items] : eval_sets) {
    for (const auto& item : items) {
      for (const auto& id : item_source_ids(item)) {
        if (seen.count(id)) leaks.insert(id);
      }
    }
  }
  return {leaks.begin(), leaks.end()};
}

std::shared_ptr<TeacherGateway> make_gateway(const EndpointConfig& endpoint, const fs::path& cache_dir,
                                             std::uint64_t seed) {
  GatewayConfig gc;
  gc.max_in_flight = std::max<std::size_t>(1, endpoint.max_in_flight);
  gc.min_interval = std::chrono::milliseconds(endpoint.min_interval_ms);
  gc.cache_dir = cache_dir.string();
  std::shared_ptr<Backend> backend;
  if (endpoint.kind == "http") {
    backend = std::make_shared<HttpBackend>(HttpBackendConfig{endpoint.endpoint, endpoint.model, endpoint.api_key_env,
                                                              std::chrono::seconds(endpoint.timeout_seconds),
                                                              endpoint.score_mode});
  } else {
    backend = std::make_shared<DeterministicMockBackend>(seed, endpoint.accept_rate, endpoint.model);
  }
  return std::make_shared<TeacherGateway>(std::move(backend), gc);
}

std::optional<StageName> parse_stage(std::string_view text) {
  for (StageName s : {StageName::ingest, StageName::graph, StageName::generate, StageName::sdg, StageName::evalset,
                      StageName::evaluate, StageName::all}) {
    if (to_string(s) == text) return s;
  }
  return std::nullopt;
}

std::string_view to_string(StageName s) {
  switch (s) {
    case StageName::ingest: return "ingest";
    case StageName::graph: return "graph";
    case StageName::generate: return "generate";
    case StageName::sdg: return "sdg";
    case StageName::evalset: return "evalset";
    case StageName::evaluate: return "evaluate";
    case StageName::all: return "all";
  }
  return "all";
}

fs::path checkpoint_dir(const PipelineConfig& config, StageName stage) {
  return config.out_dir / "checkpoints" / (std::string(to_string(stage)) + "-" + config.digest);
}

int run(StageName stage, const PipelineConfig& config, const RunOptions& options) {
  if (stage == StageName::all) {
    for (StageName s : {StageName::ingest, StageName::graph, StageName::generate, StageName::sdg, StageName::evalset,
                        StageName::evaluate}) {
      run(s, config, options);
    }
    return 0;
  }
  const fs::path dir = checkpoint_dir(config, stage);
  if (!options.force && fs::exists(dir / "_SUCCESS")) {
    log_summary(options, {{"stage", std::string(to_string(stage))}, {"status", "reused"}, {"checkpoint", dir.string()}});
    return 0;
  }
  std::error_code ec;
  fs::remove_all(dir, ec);
  fs::create_directories(dir);
  const auto started = std::chrono::steady_clock::now();
  json summary;
  switch (stage) {
    case StageName::ingest: summary = stage_ingest(config, dir); break;
    case StageName::graph: summary = stage_graph(config, dir); break;
    case StageName::generate: summary = stage_generate(config, dir); break;
    case StageName::sdg: summary = stage_sdg(config, dir); break;
    case StageName::evalset: summary = stage_evalset(config, dir); break;
    case StageName::evaluate: summary = stage_evaluate(config, dir); break;
    case StageName::all: break;
  }
  mark_done(dir, summary);
  json line{{"stage", std::string(to_string(stage))}, {"status", "done"}};
  line["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  line["summary"] = summary;
  log_summary(options, line);
  return 0;
}

}  // namespace secforge
