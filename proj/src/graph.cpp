#include "secforge/graph.hpp"

#include <algorithm>
#include <deque>
#include <mutex>
#include <sstream>

namespace secforge {
namespace {

std::mutex g_model_mutex;

std::string edge_key(std::size_t src, Relation label, std::size_t dst) {
  return std::to_string(src) + ":" + std::to_string(static_cast<int>(label)) + ":" + std::to_string(dst);
}

const std::vector<std::size_t>& empty_list() {
  static const std::vector<std::size_t> empty;
  return empty;
}

std::string slug(std::string_view name) {
  std::string s = to_lower(trim(name));
  std::replace(s.begin(), s.end(), ' ', '-');
  std::replace(s.begin(), s.end(), '_', '-');
  return s;
}

// Sorted, de-duplicated out-neighbours with the smallest label on each pair.
struct Adjacency {
  std::vector<std::vector<std::pair<std::size_t, Relation>>> out;

  explicit Adjacency(const CtiGraph& g) : out(g.size()) {
    for (std::size_t n = 0; n < g.size(); ++n) {
      auto& list = out[n];
      for (std::size_t ei : g.out_edges(n)) {
        const Edge& e = g.edges()[ei];
        auto it = std::find_if(list.begin(), list.end(), [&](const auto& p) { return p.first == e.dst; });
        if (it == list.end()) {
          list.emplace_back(e.dst, e.label);
        } else if (e.label < it->second) {
          it->second = e.label;
        }
      }
      std::sort(list.begin(), list.end(),
                [&](const auto& a, const auto& b) { return g.node(a.first).id < g.node(b.first).id; });
    }
  }
};

Path make_path(const CtiGraph& g, const std::vector<std::size_t>& nodes, const std::vector<Relation>& rels,
               EntityKind src_kind, EntityKind dst_kind) {
  Path p;
  p.src_kind = src_kind;
  p.dst_kind = dst_kind;
  p.relations = rels;
  p.nodes.reserve(nodes.size());
  for (std::size_t n : nodes) p.nodes.push_back(g.node(n).id);
  return p;
}

std::vector<std::size_t> sorted_by_id(const CtiGraph& g, std::vector<std::size_t> nodes) {
  std::sort(nodes.begin(), nodes.end(), [&](std::size_t a, std::size_t b) { return g.node(a).id < g.node(b).id; });
  return nodes;
}

}  // namespace

int kind_rank(EntityKind kind) {
  switch (kind) {
    case EntityKind::tactic: return 0;
    case EntityKind::technique: return 1;
    case EntityKind::subtechnique: return 2;
    case EntityKind::capec: return 3;
    case EntityKind::cwe: return 4;
    case EntityKind::cve: return 5;
    case EntityKind::mitigation:
    case EntityKind::detection_source: return 6;
    case EntityKind::software:
    case EntityKind::group:
    case EntityKind::campaign:
    case EntityKind::sigma_rule:
    case EntityKind::detection_rule:
    case EntityKind::document: return -1;
  }
  return -1;
}

std::size_t CtiGraph::add_node(Entity e) {
  if (e.id.empty()) throw PreconditionError("graph node needs a non-empty id");
  if (index_.count(e.id)) throw PreconditionError("duplicate graph node " + e.id);
  const std::size_t i = nodes_.size();
  index_.emplace(e.id, i);
  by_kind_[static_cast<int>(e.kind)].push_back(i);
  nodes_.push_back(std::move(e));
  out_.emplace_back();
  in_.emplace_back();
  model_.reset();
  vectors_.clear();
  return i;
}

bool CtiGraph::add_edge(const std::string& src, Relation label, const std::string& dst, std::string note,
                        bool reversed) {
  const auto s = index_of(src);
  const auto d = index_of(dst);
  if (!s || !d || *s == *d) return false;
  if (!edge_keys_.insert(edge_key(*s, label, *d)).second) return false;
  out_[*s].push_back(edges_.size());
  in_[*d].push_back(edges_.size());
  edges_.push_back({*s, *d, label, reversed, std::move(note)});
  return true;
}

std::optional<std::size_t> CtiGraph::index_of(std::string_view id) const {
  const auto it = index_.find(std::string(id));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const Entity& CtiGraph::node(std::string_view id) const {
  const auto i = index_of(id);
  if (!i) throw PreconditionError("unknown graph node " + std::string(id));
  return nodes_[*i];
}

const Entity* CtiGraph::find(std::string_view id) const {
  const auto i = index_of(id);
  return i ? &nodes_[*i] : nullptr;
}

const std::vector<std::size_t>& CtiGraph::of_kind(EntityKind kind) const {
  const auto it = by_kind_.find(static_cast<int>(kind));
  return it == by_kind_.end() ? empty_list() : it->second;
}

bool CtiGraph::adjacent(std::size_t a, std::size_t b) const {
  for (std::size_t ei : out_[a]) {
    if (edges_[ei].dst == b) return true;
  }
  for (std::size_t ei : in_[a]) {
    if (edges_[ei].src == b) return true;
  }
  return false;
}

std::vector<std::string> CtiGraph::referenced(std::string_view id, Relation relation) const {
  std::vector<std::string> out;
  const auto i = index_of(id);
  if (!i) return out;
  for (std::size_t ei : out_[*i]) {
    const Edge& e = edges_[ei];
    if (e.label == relation && !e.reversed) out.push_back(nodes_[e.dst].id);
  }
  for (std::size_t ei : in_[*i]) {
    const Edge& e = edges_[ei];
    if (e.label == relation && e.reversed) out.push_back(nodes_[e.src].id);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::vector<std::string> CtiGraph::referenced_by(std::string_view id, Relation relation) const {
  std::vector<std::string> out;
  const auto i = index_of(id);
  if (!i) return out;
  for (std::size_t ei : in_[*i]) {
    const Edge& e = edges_[ei];
    if (e.label == relation && !e.reversed) out.push_back(nodes_[e.src].id);
  }
  for (std::size_t ei : out_[*i]) {
    const Edge& e = edges_[ei];
    if (e.label == relation && e.reversed) out.push_back(nodes_[e.dst].id);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::string CtiGraph::note_for(std::string_view from, Relation relation, std::string_view to) const {
  const auto a = index_of(from);
  const auto b = index_of(to);
  if (!a || !b) return {};
  for (std::size_t ei : out_[*a]) {
    const Edge& e = edges_[ei];
    if (e.dst == *b && e.label == relation && !e.reversed) return e.note;
  }
  for (std::size_t ei : in_[*a]) {
    const Edge& e = edges_[ei];
    if (e.src == *b && e.label == relation && e.reversed) return e.note;
  }
  return {};
}

CtiGraph CtiGraph::induced(const std::unordered_set<std::string>& keep) const {
  CtiGraph g;
  for (const auto& n : nodes_) {
    if (keep.count(n.id)) g.add_node(n);
  }
  for (const auto& e : edges_) {
    const auto& s = nodes_[e.src].id;
    const auto& d = nodes_[e.dst].id;
    if (keep.count(s) && keep.count(d)) g.add_edge(s, e.label, d, e.note, e.reversed);
  }
  return g;
}

std::string CtiGraph::to_jsonl() const {
  std::string out;
  for (const auto& n : nodes_) {
    json line;
    line["node"] = to_json(n);
    out += line.dump();
    out.push_back('\n');
  }
  for (const auto& e : edges_) {
    json edge;
    edge["src"] = nodes_[e.src].id;
    edge["label"] = std::string(to_string(e.label));
    edge["dst"] = nodes_[e.dst].id;
    edge["reversed"] = e.reversed;
    edge["note"] = e.note;
    json line;
    line["edge"] = std::move(edge);
    out += line.dump();
    out.push_back('\n');
  }
  for (const auto& d : dangling_) {
    json entry;
    entry["source_id"] = d.source_id;
    entry["relation"] = std::string(to_string(d.relation));
    entry["target"] = d.target;
    json line;
    line["dangling"] = std::move(entry);
    out += line.dump();
    out.push_back('\n');
  }
  return out;
}

CtiGraph CtiGraph::from_jsonl(std::string_view text) {
  CtiGraph g;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError("graph line " + std::to_string(line_no) + ": " + e.what());
    }
    if (j.contains("node")) {
      g.add_node(entity_from_json(j["node"]));
    } else if (j.contains("edge")) {
      const auto& e = j["edge"];
      const auto label = parse_relation(e.at("label").get<std::string>());
      if (!label) throw ParseError("graph line " + std::to_string(line_no) + ": unknown relation");
      if (!g.add_edge(e.at("src").get<std::string>(), *label, e.at("dst").get<std::string>(),
                      e.value("note", ""), e.value("reversed", false))) {
        throw ParseError("graph line " + std::to_string(line_no) + ": edge endpoint missing or duplicate edge");
      }
    } else if (j.contains("dangling")) {
      const auto& d = j["dangling"];
      const auto rel = parse_relation(d.at("relation").get<std::string>());
      if (!rel) throw ParseError("graph line " + std::to_string(line_no) + ": unknown relation");
      g.add_dangling({d.at("source_id").get<std::string>(), *rel, d.at("target").get<std::string>()});
    } else {
      throw ParseError("graph line " + std::to_string(line_no) + ": expected node, edge or dangling");
    }
  }
  return g;
}

const TfidfModel& CtiGraph::similarity_model() const {
  std::lock_guard lock(g_model_mutex);
  if (!model_) {
    std::vector<std::string> docs;
    docs.reserve(nodes_.size());
    for (const auto& n : nodes_) docs.push_back(n.description);
    model_.emplace(docs);
    vectors_.clear();
    vectors_.reserve(nodes_.size());
    for (const auto& n : nodes_) vectors_.push_back(model_->vectorize(n.description));
  }
  return *model_;
}

const SparseVector& CtiGraph::description_vector(std::size_t node) const {
  similarity_model();
  return vectors_[node];
}

CtiGraph build_graph(const Corpus& corpus) {
  CtiGraph g;
  std::unordered_map<std::string, std::string> tactic_alias;
  for (const auto& e : corpus.entities) {
    if (g.contains(e.id)) continue;
    g.add_node(e);
    if (e.kind == EntityKind::tactic) {
      if (e.has_attr("shortname")) tactic_alias.emplace(slug(e.attr_text("shortname")), e.id);
      tactic_alias.emplace(slug(e.name), e.id);
    }
  }
  for (const auto& e : corpus.entities) {
    for (const auto& ref : e.references) {
      std::string target = ref.target;
      if (!g.contains(target) && (ref.relation == Relation::maps_to_tactic || ref.relation == Relation::accomplishes)) {
        const auto alias = tactic_alias.find(slug(target));
        if (alias != tactic_alias.end()) target = alias->second;
      }
      if (!g.contains(target)) {
        g.add_dangling({e.id, ref.relation, ref.target});
        continue;
      }
      if (target == e.id) continue;
      const EntityKind dst_kind = g.node(target).kind;
      if (kind_rank(e.kind) > kind_rank(dst_kind)) {
        g.add_edge(target, ref.relation, e.id, ref.note, true);
      } else {
        g.add_edge(e.id, ref.relation, target, ref.note, false);
      }
    }
  }
  g.similarity_model();
  return g;
}

std::string Path::id() const { return "path-" + short_digest(join(nodes, "\x1f")); }

json to_json(const Path& p) {
  json j;
  j["id"] = p.id();
  j["src_kind"] = std::string(to_string(p.src_kind));
  j["dst_kind"] = std::string(to_string(p.dst_kind));
  j["nodes"] = p.nodes;
  json rels = json::array();
  for (auto r : p.relations) rels.push_back(std::string(to_string(r)));
  j["relations"] = std::move(rels);
  return j;
}

Path path_from_json(const json& j) {
  Path p;
  const auto src = parse_kind(j.at("src_kind").get<std::string>());
  const auto dst = parse_kind(j.at("dst_kind").get<std::string>());
  if (!src || !dst) throw ParseError("path with unknown endpoint kind");
  p.src_kind = *src;
  p.dst_kind = *dst;
  p.nodes = j.at("nodes").get<std::vector<std::string>>();
  for (const auto& r : j.at("relations")) {
    const auto rel = parse_relation(r.get<std::string>());
    if (!rel) throw ParseError("path with unknown relation");
    p.relations.push_back(*rel);
  }
  if (p.nodes.size() != p.relations.size() + 1) throw ParseError("path nodes/relations size mismatch");
  return p;
}

bool path_is_valid(const CtiGraph& g, const Path& p) {
  if (p.relations.empty() || p.nodes.size() != p.relations.size() + 1) return false;
  for (std::size_t i = 0; i < p.relations.size(); ++i) {
    const auto a = g.index_of(p.nodes[i]);
    const auto b = g.index_of(p.nodes[i + 1]);
    if (!a || !b) return false;
    const bool found = std::any_of(g.out_edges(*a).begin(), g.out_edges(*a).end(), [&](std::size_t ei) {
      return g.edges()[ei].dst == *b && g.edges()[ei].label == p.relations[i];
    });
    if (!found) return false;
  }
  const auto first = g.find(p.nodes.front());
  const auto last = g.find(p.nodes.back());
  return first->kind == p.src_kind && last->kind == p.dst_kind;
}

std::vector<Path> one_step_paths(const CtiGraph& g, EntityKind src_kind, EntityKind dst_kind) {
  if (src_kind == dst_kind) throw PreconditionError("one_step_paths needs two different kinds");
  const Adjacency adj(g);
  std::vector<Path> out;
  for (std::size_t s : sorted_by_id(g, g.of_kind(src_kind))) {
    for (const auto& [d, label] : adj.out[s]) {
      if (g.node(d).kind == dst_kind) out.push_back(make_path(g, {s, d}, {label}, src_kind, dst_kind));
    }
  }
  return out;
}

std::vector<Path> sample_paths(const CtiGraph& g, EntityKind src_kind, EntityKind dst_kind, std::size_t cap,
                               std::uint64_t seed) {
  if (cap == 0 || src_kind == dst_kind) return {};
  const Adjacency adj(g);

  // Nodes from which a dst_kind node is reachable through non-dst interior nodes.
  std::vector<char> productive(g.size(), 0);
  {
    std::deque<std::size_t> queue;
    for (std::size_t d : g.of_kind(dst_kind)) {
      productive[d] = 1;
      queue.push_back(d);
    }
    while (!queue.empty()) {
      const std::size_t n = queue.front();
      queue.pop_front();
      for (std::size_t ei : g.in_edges(n)) {
        const std::size_t p = g.edges()[ei].src;
        if (!productive[p] && g.node(p).kind != dst_kind) {
          productive[p] = 1;
          queue.push_back(p);
        }
      }
    }
  }
  std::vector<std::size_t> starts;
  for (std::size_t s : sorted_by_id(g, g.of_kind(src_kind))) {
    if (productive[s]) starts.push_back(s);
  }
  if (starts.empty()) return {};

  // Exhaustive enumeration, abandoned once it exceeds cap or its step budget.
  const std::size_t step_budget = cap == kUnboundedCap ? kUnboundedCap : std::max<std::size_t>(2'000'000, 100 * cap);
  std::vector<Path> found;
  std::size_t steps = 0;
  bool complete = true;
  std::vector<std::size_t> stack_nodes;
  std::vector<Relation> stack_rels;
  std::vector<char> on_path(g.size(), 0);

  auto dfs = [&](auto&& self, std::size_t n) -> void {
    if (!complete) return;
    for (const auto& [m, label] : adj.out[n]) {
      if (!complete) return;
      if (on_path[m] || !productive[m]) continue;
      if (++steps > step_budget) {
        complete = false;
        return;
      }
      stack_nodes.push_back(m);
      stack_rels.push_back(label);
      if (g.node(m).kind == dst_kind) {
        found.push_back(make_path(g, stack_nodes, stack_rels, src_kind, dst_kind));
        if (found.size() > cap) complete = false;
      } else {
        on_path[m] = 1;
        self(self, m);
        on_path[m] = 0;
      }
      stack_nodes.pop_back();
      stack_rels.pop_back();
    }
  };
  for (std::size_t s : starts) {
    if (!complete) break;
    stack_nodes = {s};
    stack_rels.clear();
    on_path[s] = 1;
    dfs(dfs, s);
    on_path[s] = 0;
  }
  if (complete) {
    std::sort(found.begin(), found.end(), [](const Path& a, const Path& b) { return a.nodes < b.nodes; });
    return found;
  }

  // Seeded random walks along edge direction.
  Rng rng(derive_seed(seed, "sample_paths:" + std::string(to_string(src_kind)) + ">" + std::string(to_string(dst_kind))));
  std::vector<Path> out;
  std::unordered_set<std::string> seen;
  std::fill(on_path.begin(), on_path.end(), 0);
  const std::size_t attempts = cap > kUnboundedCap / 50 ? kUnboundedCap : 50 * cap;
  std::vector<std::pair<std::size_t, Relation>> options;
  for (std::size_t attempt = 0; attempt < attempts && out.size() < cap; ++attempt) {
    std::vector<std::size_t> nodes{starts[rng.below(starts.size())]};
    std::vector<Relation> rels;
    on_path[nodes.back()] = 1;
    bool reached = false;
    while (true) {
      options.clear();
      for (const auto& opt : adj.out[nodes.back()]) {
        if (productive[opt.first] && !on_path[opt.first]) options.push_back(opt);
      }
      if (options.empty()) break;
      const auto [next, label] = options[rng.below(options.size())];
      nodes.push_back(next);
      rels.push_back(label);
      on_path[next] = 1;
      if (g.node(next).kind == dst_kind) {
        reached = true;
        break;
      }
    }
    for (std::size_t n : nodes) on_path[n] = 0;
    if (!reached) continue;
    Path p = make_path(g, nodes, rels, src_kind, dst_kind);
    if (seen.insert(join(p.nodes, "\x1f")).second) out.push_back(std::move(p));
  }
  return out;
}

std::vector<Path> filter_subsumed(const std::vector<Path>& paths) {
  std::unordered_set<std::string> keys;
  for (const auto& p : paths) keys.insert(join(p.nodes, "\x1f"));
  std::vector<Path> out;
  for (const auto& p : paths) {
    const std::size_t n = p.nodes.size();
    bool subsumed = false;
    for (std::size_t len = 2; len < n && !subsumed; ++len) {
      for (std::size_t start = 0; start + len <= n && !subsumed; ++start) {
        std::vector<std::string> window(p.nodes.begin() + static_cast<std::ptrdiff_t>(start),
                                        p.nodes.begin() + static_cast<std::ptrdiff_t>(start + len));
        subsumed = keys.count(join(window, "\x1f")) > 0;
      }
    }
    if (!subsumed) out.push_back(p);
  }
  return out;
}

std::string_view to_string(Hardness h) { return h == Hardness::random ? "random" : "similar"; }

NegativePair sample_negatives(const CtiGraph& g, std::string_view node, EntityKind other_kind,
                              std::size_t n_candidates, std::uint64_t seed, Hardness hardness) {
  const auto anchor = g.index_of(node);
  if (!anchor) throw PreconditionError("unknown node " + std::string(node));
  std::vector<std::size_t> available;
  for (std::size_t c : sorted_by_id(g, g.of_kind(other_kind))) {
    if (c != *anchor && !g.adjacent(*anchor, c)) available.push_back(c);
  }
  if (available.empty()) {
    throw NoCandidatesError("every " + std::string(to_string(other_kind)) + " node is connected to " +
                            std::string(node));
  }
  Rng rng(derive_seed(seed, "negatives:" + std::string(node) + ">" + std::string(to_string(other_kind))));
  const std::size_t k = std::min(n_candidates, available.size());
  if (k == 0) throw PreconditionError("n_candidates must be positive");
  const auto picks = rng.sample_indices(available.size(), k);

  const SparseVector& query = g.description_vector(*anchor);
  NegativePair out;
  out.a = std::string(node);
  out.hardness = hardness;
  if (hardness == Hardness::random) {
    const std::size_t c = available[picks[rng.below(picks.size())]];
    out.b = g.node(c).id;
    out.similarity_score = cosine(query, g.description_vector(c));
    return out;
  }
  double best = -1.0;
  for (std::size_t pi : picks) {
    const std::size_t c = available[pi];
    const double s = cosine(query, g.description_vector(c));
    if (s > best || (s == best && g.node(c).id < out.b)) {
      best = s;
      out.b = g.node(c).id;
    }
  }
  out.similarity_score = best;
  return out;
}

}  // namespace secforge
