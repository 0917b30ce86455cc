#include <doctest.h>

#include <set>

#include "secforge/pipeline.hpp"
#include "toy.hpp"

using namespace secforge;
using toy::entity;
namespace fs = std::filesystem;

namespace {

Corpus corpus_of(std::vector<Entity> entities) {
  Corpus c;
  c.entities = std::move(entities);
  c.reindex();
  return c;
}

InstructionRecord record(std::string category, std::string output, std::string tag = {}) {
  InstructionRecord r;
  r.instruction = "Describe " + tag;
  r.output = std::move(output);
  r.source_category = std::move(category);
  r.lineage_ids = {"X-" + tag};
  r.template_name = "toy";
  finalize(r);
  return r;
}

std::string replace(std::string text, const std::string& from, const std::string& to) {
  const auto at = text.find(from);
  REQUIRE(at != std::string::npos);
  return text.replace(at, from.size(), to);
}

// Writes a variant of the mini configuration next to the staged fixture.
fs::path variant(const fs::path& staged, const std::string& name, const std::string& from, const std::string& to) {
  const fs::path out = staged.parent_path() / name;
  write_file_atomic(out.string(), replace(read_file(staged.string()), from, to));
  return out;
}

std::string error_of(const fs::path& config) {
  try {
    load_config(config);
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("split keeps the ratio, is seeded and keeps sub-techniques with their parent") {
  std::vector<Entity> es;
  for (int i = 0; i < 10; ++i) es.push_back(entity("CWE-" + std::to_string(i), EntityKind::cwe, "w" + std::to_string(i)));
  const auto c = corpus_of(es);
  const auto s = split_corpus(c, 0.9, 3);
  CHECK(s.train.size() == 9);
  CHECK(s.test.size() == 1);
  CHECK(split_corpus(c, 0.9, 3).digest() == s.digest());

  std::set<std::string> tests;
  for (std::uint64_t seed = 0; seed < 20; ++seed) tests.insert(split_corpus(c, 0.9, seed).test.front());
  CHECK(tests.size() > 1);

  CHECK_THROWS_AS(split_corpus(c, 0.01, 1), PreconditionError);
  CHECK_THROWS_AS(split_corpus(c, 1.0, 1), PreconditionError);
  CHECK_THROWS_AS(split_corpus(Corpus{}, 0.5, 1), PreconditionError);

  std::vector<Entity> att;
  for (int i = 0; i < 12; ++i) {
    const std::string parent = "T10" + std::to_string(10 + i);
    att.push_back(entity(parent, EntityKind::technique, "t" + std::to_string(i)));
    for (int k = 1; k <= 2; ++k) {
      auto sub = entity(parent + ".00" + std::to_string(k), EntityKind::subtechnique, "s");
      sub.add_reference(Relation::subtechnique_of, parent);
      att.push_back(sub);
    }
  }
  const auto ac = corpus_of(att);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto sp = split_corpus(ac, 0.75, seed);
    const std::set<std::string> train(sp.train.begin(), sp.train.end());
    CHECK(sp.train.size() + sp.test.size() == att.size());
    for (const auto& e : att) {
      if (e.kind != EntityKind::subtechnique) continue;
      CHECK(train.count(e.id) == train.count(e.id.substr(0, e.id.find('.'))));
    }
  }
}

TEST_CASE("split gives each kind a proportional share") {
  std::vector<Entity> es;
  for (int i = 0; i < 40; ++i) es.push_back(entity("CWE-" + std::to_string(i), EntityKind::cwe, "w"));
  for (int i = 0; i < 10; ++i) es.push_back(entity("CAPEC-" + std::to_string(i), EntityKind::capec, "c"));
  const auto s = split_corpus(corpus_of(es), 0.8, 11);
  std::size_t capec_test = 0;
  for (const auto& id : s.test) capec_test += id.rfind("CAPEC-", 0) == 0 ? 1 : 0;
  CHECK(s.test.size() == 10);
  CHECK(capec_test == 2);
}

TEST_CASE("curriculum orders by category rank then output length") {
  std::vector<InstructionRecord> rs{
      record("siem", "a b c", "1"), record("attack", "one two three four", "2"), record("bron", "x", "3"),
      record("cwe", "short", "4"),  record("attack", "a b", "5"),
  };
  const auto sorted = curriculum_sort(rs);
  std::vector<std::string> cats;
  std::vector<std::size_t> lens;
  for (const auto& r : sorted) {
    cats.push_back(r.source_category);
    lens.push_back(r.output_length);
  }
  CHECK(cats == std::vector<std::string>{"cwe", "attack", "attack", "bron", "siem"});
  CHECK(lens == std::vector<std::size_t>{1, 2, 4, 1, 3});

  // Equal keys keep their input order.
  std::vector<InstructionRecord> same{record("cwe", "p q", "a"), record("cwe", "r s", "b"), record("cwe", "t u", "c")};
  const auto kept = curriculum_sort(same);
  for (std::size_t i = 0; i < same.size(); ++i) CHECK(kept[i].id == same[i].id);

  CHECK_THROWS_AS(curriculum_sort({record("mystery", "x", "m")}), PreconditionError);
}

TEST_CASE("curriculum sort is a stable permutation with non-decreasing keys") {
  Rng rng(99);
  const auto& cats = source_categories();
  const auto& ranks = default_category_ranks();
  std::vector<InstructionRecord> rs;
  for (int i = 0; i < 1000; ++i) {
    rs.push_back(record(cats[rng.below(cats.size())], toy::random_text(rng, 1 + rng.below(12)), std::to_string(i)));
  }
  const auto sorted = curriculum_sort(rs);
  REQUIRE(sorted.size() == rs.size());
  std::multiset<std::string> a;
  std::multiset<std::string> b;
  for (const auto& r : rs) a.insert(r.id);
  for (const auto& r : sorted) b.insert(r.id);
  CHECK(a == b);
  std::map<std::string, std::size_t> position;
  for (std::size_t i = 0; i < rs.size(); ++i) position.emplace(rs[i].id, i);
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    const auto ka = std::make_pair(ranks.at(sorted[i - 1].source_category), sorted[i - 1].output_length);
    const auto kb = std::make_pair(ranks.at(sorted[i].source_category), sorted[i].output_length);
    CHECK(ka <= kb);
    if (ka == kb) CHECK(position[sorted[i - 1].id] < position[sorted[i].id]);
  }
}

TEST_CASE("emit_dataset writes records and a deterministic manifest") {
  toy::TempDir dir("emit");
  const auto empty = emit_dataset({}, dir.path() / "a", "cfg", "split");
  CHECK(empty.total == 0);
  CHECK(read_file((dir.path() / "a" / "dataset.jsonl").string()).empty());
  CHECK(fs::exists(dir.path() / "a" / "manifest.json"));

  const std::vector<InstructionRecord> rs{record("cwe", "x y", "1"), record("sigma", "z", "2")};
  const auto m1 = emit_dataset(rs, dir.path() / "b", "cfg", "split");
  const auto m2 = emit_dataset(rs, dir.path() / "c", "cfg", "split");
  CHECK(m1.total == 2);
  CHECK(m1.per_source.at("sigma") == 1);
  CHECK(m1.per_stage.at("schema") == 2);
  CHECK(m1.digest() == m2.digest());
  CHECK(read_file((dir.path() / "b" / "manifest.json").string()) ==
        read_file((dir.path() / "c" / "manifest.json").string()));
  CHECK(records_from_jsonl(read_file((dir.path() / "b" / "dataset.jsonl").string())) == rs);
  CHECK(emit_dataset(rs, dir.path() / "d", "other", "split").digest() != m1.digest());
}

TEST_CASE("leakage audit reports shared ids") {
  auto r = record("cwe", "x", "1");
  r.lineage_ids = {"CWE-1", "CWE-2"};
  r.grounding_doc_id = "DOC-1";
  ClassificationItem c;
  c.source_ids = {"CWE-2"};
  SummarizationItem s;
  s.source_ids = {"DOC-1"};
  ClassificationItem clean;
  clean.source_ids = {"CWE-9"};
  CHECK(leakage_audit({r}, {{"a", {EvalItem(c), EvalItem(clean)}}, {"b", {EvalItem(s)}}}) ==
        std::vector<std::string>{"CWE-2", "DOC-1"});
  CHECK(leakage_audit({r}, {{"a", {EvalItem(clean)}}}).empty());
}

TEST_CASE("reference mix budgets scale and round") {
  const auto full = table1_budgets(1.0);
  CHECK(full.size() == 11);
  CHECK(full.at("bron") == 62227);
  CHECK(full.at("siem") == 400);
  const auto small = table1_budgets(0.01);
  CHECK(small.at("attack") == 459);
  CHECK(small.at("interview") == 5);
  CHECK_THROWS_AS(table1_budgets(0.0), PreconditionError);
  for (const auto& c : source_categories()) CHECK(default_category_ranks().count(c) == 1);
}

TEST_CASE("config loading validates keys and paths") {
  toy::TempDir dir("cfg");
  const auto staged = toy::stage_mini(dir.path() / "mini");
  const auto c = load_config(staged);
  CHECK(c.seed == 20240601);
  CHECK(c.sources.size() == 7);
  CHECK(c.out_dir == dir.path() / "mini" / "out");
  CHECK(c.sources[5].rule_schema.pattern == "query");
  CHECK(c.sources[6].document_category == "wiki");
  CHECK(c.teacher.kind == "mock");
  CHECK(c.budgets.at("attack") == 45901);
  CHECK(load_config(staged).digest == c.digest);

  CHECK(error_of(variant(staged, "a.toml", "seed = 20240601", "")).find("seed") != std::string::npos);
  CHECK(error_of(variant(staged, "b.toml", "\"cwe.xml\"", "\"missing.xml\"")).find("missing.xml") !=
        std::string::npos);
  CHECK(error_of(variant(staged, "c.toml", "\"capec_xml\"", "\"capec_json\"")).find("capec_json") !=
        std::string::npos);
  CHECK(error_of(variant(staged, "d.toml", "split_ratio = 0.8", "split_ratio = 1.5")).find("split_ratio") !=
        std::string::npos);
  CHECK(error_of(variant(staged, "e.toml", "preset = \"table1\"", "preset = \"huge\"")).find("preset") !=
        std::string::npos);
  CHECK(error_of(variant(staged, "f.toml", "category = \"wiki\"", "category = \"blog\"")).find("blog") !=
        std::string::npos);
  CHECK(error_of(variant(staged, "g.toml", "p0 = 0.125", "p0 = 0.0")).find("p0") != std::string::npos);
  CHECK(error_of(variant(staged, "h.toml", "[teacher]\nkind = \"mock\"", "[teacher]\nkind = \"http\"")).find(
            "endpoint") != std::string::npos);
  CHECK_THROWS_AS(load_config(variant(staged, "i.toml", "seed = 20240601", "seed = [")), ParseError);

  const auto other_seed = load_config(variant(staged, "j.toml", "seed = 20240601", "seed = 7"));
  CHECK(other_seed.digest != c.digest);
  const auto no_budget = load_config(variant(staged, "k.toml", "preset = \"table1\"", "preset = \"none\""));
  CHECK(no_budget.budgets.empty());
}

TEST_CASE("stages demand their upstream checkpoint") {
  toy::TempDir dir("order");
  const auto config = load_config(toy::stage_mini(dir.path() / "mini"));
  RunOptions quiet{false, true};
  try {
    run(StageName::generate, config, quiet);
    FAIL("generate ran without a graph checkpoint");
  } catch (const PreconditionError& e) {
    CHECK(std::string(e.what()) == "run graph first");
  }
  CHECK_THROWS_AS(run(StageName::graph, config, quiet), PreconditionError);

  run(StageName::ingest, config, quiet);
  const auto marker = checkpoint_dir(config, StageName::ingest) / "_SUCCESS";
  REQUIRE(fs::exists(marker));
  const auto corpus = checkpoint_dir(config, StageName::ingest) / "corpus.jsonl";
  const auto before = read_file(corpus.string());
  write_file_atomic(corpus.string(), before + "tampered\n");
  run(StageName::ingest, config, quiet);
  CHECK(read_file(corpus.string()) != before);
  run(StageName::ingest, config, {true, true});
  CHECK(read_file(corpus.string()) == before);

  CHECK(parse_stage("evalset") == StageName::evalset);
  CHECK_FALSE(parse_stage("train").has_value());
}

TEST_CASE("full run on the mini fixture is complete and reproducible") {
  toy::TempDir dir("full");
  const auto config = load_config(toy::stage_mini(dir.path() / "mini"));
  RunOptions quiet{false, true};
  run(StageName::all, config, quiet);

  const auto dataset = read_file((config.out_dir / "dataset.jsonl").string());
  const auto records = records_from_jsonl(dataset);
  REQUIRE_FALSE(records.empty());
  std::set<TaskType> types;
  std::size_t sdg = 0;
  for (const auto& r : records) {
    validate(r);
    types.insert(r.task_type);
    sdg += r.generation.stage == Stage::sdg ? 1 : 0;
  }
  CHECK(types.size() >= 5);
  CHECK(sdg > 0);
  CHECK(curriculum_sort(records, config.category_ranks) == records);

  const auto manifest = json::parse(read_file((config.out_dir / "manifest.json").string()));
  CHECK(manifest["total"] == records.size());
  CHECK(manifest["dataset_sha256"] == sha256_hex(dataset));

  std::size_t tasks = 0;
  for (const auto& f : fs::directory_iterator(config.out_dir / "eval")) tasks += f.path().extension() == ".jsonl";
  CHECK(tasks == eval_task_names().size());
  const auto report = json::parse(read_file((config.out_dir / "report.json").string()));
  CHECK(report["model"] == "mock-student");

  // A fresh output directory with the same config reproduces the dataset byte for byte.
  auto again = config;
  again.out_dir = dir.path() / "again";
  again.cache_dir = again.out_dir / "cache";
  run(StageName::all, again, quiet);
  CHECK(read_file((again.out_dir / "dataset.jsonl").string()) == dataset);
  CHECK(read_file((again.out_dir / "manifest.json").string()) ==
        read_file((config.out_dir / "manifest.json").string()));
}
