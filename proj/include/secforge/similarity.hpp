#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace secforge {

/// Term weights keyed by a 64-bit FNV-1a hash of the token, sorted by key.
struct SparseVector {
  std::vector<std::pair<std::uint64_t, double>> terms;
  double norm = 0.0;
};

std::uint64_t term_key(std::string_view token);

// Cosine of two sparse vectors; 0 when either is empty.
double cosine(const SparseVector& a, const SparseVector& b);

/// TF-IDF over lower-cased alphanumeric tokens.
/// idf(t) = ln((1 + N) / (1 + df(t))) + 1, tf is the raw count.
class TfidfModel {
 public:
  TfidfModel() = default;
  explicit TfidfModel(const std::vector<std::string>& documents);

  SparseVector vectorize(std::string_view text) const;
  double idf(std::string_view token) const;
  double similarity(std::string_view a, std::string_view b) const { return cosine(vectorize(a), vectorize(b)); }

  std::size_t document_count() const { return n_docs_; }

 private:
  std::size_t n_docs_ = 0;
  std::unordered_map<std::uint64_t, std::size_t> df_;
};

}  // namespace secforge
