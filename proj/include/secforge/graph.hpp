#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "secforge/common.hpp"
#include "secforge/entity.hpp"
#include "secforge/similarity.hpp"

namespace secforge {

// Position of a kind in the top-down layering (tactic above technique above
// CAPEC above CWE above CVE). Cross-kind edges point from lower to higher rank.
int kind_rank(EntityKind kind);

/// A stored edge. Edges are kept in top-down orientation; `reversed` is set when
/// that orientation is the opposite of the reference it came from
/// (e.g. a CVE's related-cwe reference becomes CWE -> CVE).
struct Edge {
  std::size_t src = 0;
  std::size_t dst = 0;
  Relation label = Relation::uses;
  bool reversed = false;
  std::string note;
};

struct DanglingReference {
  std::string source_id;
  Relation relation;
  std::string target;
};

class NoCandidatesError : public Error {
 public:
  using Error::Error;
};

class CtiGraph {
 public:
  std::size_t size() const { return nodes_.size(); }
  std::size_t edge_count() const { return edges_.size(); }

  // Adds a node; a second node with the same id is rejected.
  std::size_t add_node(Entity e);
  // Adds an edge exactly as given. Returns false for a duplicate (src, label, dst) or unknown endpoint.
  bool add_edge(const std::string& src, Relation label, const std::string& dst, std::string note = {},
                bool reversed = false);

  bool contains(std::string_view id) const { return index_.count(std::string(id)) > 0; }
  std::optional<std::size_t> index_of(std::string_view id) const;
  const Entity& node(std::size_t i) const { return nodes_[i]; }
  const Entity& node(std::string_view id) const;
  const Entity* find(std::string_view id) const;
  const std::vector<Entity>& nodes() const { return nodes_; }

  const std::vector<Edge>& edges() const { return edges_; }
  const std::vector<std::size_t>& out_edges(std::size_t node) const { return out_[node]; }
  const std::vector<std::size_t>& in_edges(std::size_t node) const { return in_[node]; }

  // Node indices of a kind, in insertion order.
  const std::vector<std::size_t>& of_kind(EntityKind kind) const;

  // True when any edge joins a and b, in either direction.
  bool adjacent(std::size_t a, std::size_t b) const;

  // Targets of references `id --relation--> X` as the source data stated them,
  // independent of the stored orientation. Sorted by id.
  std::vector<std::string> referenced(std::string_view id, Relation relation) const;
  // Inverse: ids X that stated `X --relation--> id`.
  std::vector<std::string> referenced_by(std::string_view id, Relation relation) const;
  // Note stored on the edge for the stated reference, empty when none.
  std::string note_for(std::string_view from, Relation relation, std::string_view to) const;

  const std::vector<DanglingReference>& dangling() const { return dangling_; }
  void add_dangling(DanglingReference d) { dangling_.push_back(std::move(d)); }

  // Node-induced subgraph over `keep` (dangling report is not carried over).
  CtiGraph induced(const std::unordered_set<std::string>& keep) const;

  // One JSON object per line: nodes first ({"node": entity}), then edges.
  std::string to_jsonl() const;
  static CtiGraph from_jsonl(std::string_view text);

  // TF-IDF model over all node descriptions; built lazily, not thread-safe on first use.
  const TfidfModel& similarity_model() const;
  const SparseVector& description_vector(std::size_t node) const;

 private:
  std::vector<Entity> nodes_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<Edge> edges_;
  std::vector<std::vector<std::size_t>> out_;
  std::vector<std::vector<std::size_t>> in_;
  std::unordered_map<int, std::vector<std::size_t>> by_kind_;
  std::unordered_set<std::string> edge_keys_;
  std::vector<DanglingReference> dangling_;
  mutable std::optional<TfidfModel> model_;
  mutable std::vector<SparseVector> vectors_;
};

// Resolves every entity reference into an oriented edge; unresolvable ones go to dangling().
// ATT&CK tactic slugs ("execution", "lateral-movement") resolve through the tactic's shortname.
CtiGraph build_graph(const Corpus& corpus);

struct Path {
  std::vector<std::string> nodes;
  std::vector<Relation> relations;  // relations[i] joins nodes[i] and nodes[i + 1]
  EntityKind src_kind = EntityKind::tactic;
  EntityKind dst_kind = EntityKind::tactic;

  std::size_t length() const { return relations.size(); }
  std::string id() const;  // "path-" + digest of the node sequence

  friend bool operator==(const Path&, const Path&) = default;
};

json to_json(const Path& p);
Path path_from_json(const json& j);

// True when every hop of p is a stored edge (src -> dst) with the recorded label.
bool path_is_valid(const CtiGraph& g, const Path& p);

// All edges src_kind -> dst_kind as length-1 paths, sorted by (src id, dst id).
// Parallel edges between one pair collapse to one path carrying the smallest label.
std::vector<Path> one_step_paths(const CtiGraph& g, EntityKind src_kind, EntityKind dst_kind);

inline constexpr std::size_t kUnboundedCap = std::numeric_limits<std::size_t>::max();

/// Simple directed paths from a src_kind node to a dst_kind node whose interior
/// avoids dst_kind. When the full set has at most `cap` members it is returned
/// in lexicographic order; otherwise up to `cap` distinct paths are collected by
/// seeded random walks (50 x cap attempts) in discovery order.
std::vector<Path> sample_paths(const CtiGraph& g, EntityKind src_kind, EntityKind dst_kind, std::size_t cap,
                               std::uint64_t seed);

// Drops a path when a strictly shorter input path's node sequence occurs contiguously inside it.
// Survivors keep their input order.
std::vector<Path> filter_subsumed(const std::vector<Path>& paths);

enum class Hardness { random, similar };

std::string_view to_string(Hardness h);

struct NegativePair {
  std::string a;
  std::string b;
  Hardness hardness = Hardness::similar;
  double similarity_score = 0.0;
};

/// Draws min(n_candidates, available) nodes of other_kind not adjacent to `node`.
/// Hardness::similar returns the most description-similar candidate (ties: smaller id);
/// Hardness::random returns a uniform pick from the same draw.
/// Throws NoCandidatesError when every other_kind node is adjacent.
NegativePair sample_negatives(const CtiGraph& g, std::string_view node, EntityKind other_kind,
                              std::size_t n_candidates, std::uint64_t seed, Hardness hardness = Hardness::similar);

}  // namespace secforge
