#include "secforge/similarity.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <unordered_set>

#include "secforge/common.hpp"

namespace secforge {

std::uint64_t term_key(std::string_view token) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : token) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

double cosine(const SparseVector& a, const SparseVector& b) {
  if (a.norm == 0.0 || b.norm == 0.0) return 0.0;
  double dot = 0.0;
  auto i = a.terms.begin();
  auto j = b.terms.begin();
  while (i != a.terms.end() && j != b.terms.end()) {
    if (i->first < j->first) {
      ++i;
    } else if (j->first < i->first) {
      ++j;
    } else {
      dot += i->second * j->second;
      ++i;
      ++j;
    }
  }
  return std::clamp(dot / (a.norm * b.norm), 0.0, 1.0);
}

TfidfModel::TfidfModel(const std::vector<std::string>& documents) : n_docs_(documents.size()) {
  for (const auto& doc : documents) {
    std::unordered_set<std::uint64_t> seen;
    for (const auto& tok : alnum_tokens(doc)) {
      if (seen.insert(term_key(tok)).second) ++df_[term_key(tok)];
    }
  }
}

double TfidfModel::idf(std::string_view token) const {
  const auto it = df_.find(term_key(to_lower(token)));
  const double df = it == df_.end() ? 0.0 : static_cast<double>(it->second);
  return std::log((1.0 + static_cast<double>(n_docs_)) / (1.0 + df)) + 1.0;
}

SparseVector TfidfModel::vectorize(std::string_view text) const {
  std::map<std::uint64_t, double> counts;
  for (const auto& tok : alnum_tokens(text)) counts[term_key(tok)] += 1.0;
  SparseVector v;
  v.terms.reserve(counts.size());
  double sq = 0.0;
  for (const auto& [key, tf] : counts) {
    const auto it = df_.find(key);
    const double df = it == df_.end() ? 0.0 : static_cast<double>(it->second);
    const double w = tf * (std::log((1.0 + static_cast<double>(n_docs_)) / (1.0 + df)) + 1.0);
    v.terms.emplace_back(key, w);
    sq += w * w;
  }
  v.norm = std::sqrt(sq);
  return v;
}

}  // namespace secforge
