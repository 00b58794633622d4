#pragma once

// Exact cosine k-NN over unit embeddings and truncated mean average precision.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "guie/error.hpp"
#include "guie/tensor.hpp"

namespace guie {

inline constexpr double kUnitTolerance = 1e-4;

template <class T = float>
class RetrievalIndex {
public:
  RetrievalIndex() = default;

  /// Rows of `embeddings` pair with `ids` and `labels` by position.
  RetrievalIndex(std::vector<std::string> ids, Matrix<T> embeddings, std::vector<std::uint32_t> labels)
      : ids_(std::move(ids)), emb_(std::move(embeddings)), labels_(std::move(labels)) {
    if (static_cast<Eigen::Index>(ids_.size()) != emb_.rows() || ids_.size() != labels_.size())
      throw DomainError("build_index: ids, embeddings and labels differ in length");
    for (std::size_t i = 0; i < ids_.size(); ++i) {
      if (!pos_.emplace(ids_[i], i).second) throw DuplicateIdError(ids_[i]);
      const double norm = emb_.row(static_cast<Eigen::Index>(i)).template cast<double>().norm();
      if (std::abs(norm - 1.0) > kUnitTolerance)
        throw DomainError("build_index: row \"" + ids_[i] + "\" is not unit-norm (" + std::to_string(norm) + ")");
    }
  }

  std::size_t size() const noexcept { return ids_.size(); }
  bool empty() const noexcept { return ids_.empty(); }
  Eigen::Index dim() const noexcept { return emb_.cols(); }
  const std::vector<std::string>& ids() const noexcept { return ids_; }
  const std::vector<std::uint32_t>& labels() const noexcept { return labels_; }
  const Matrix<T>& embeddings() const noexcept { return emb_; }

  std::optional<std::size_t> position(const std::string& id) const {
    auto it = pos_.find(id);
    if (it == pos_.end()) return std::nullopt;
    return it->second;
  }

private:
  std::vector<std::string> ids_;
  Matrix<T> emb_;
  std::vector<std::uint32_t> labels_;
  std::unordered_map<std::string, std::size_t> pos_;
};

template <class T>
RetrievalIndex<T> build_index(std::vector<std::string> ids, Matrix<T> embeddings, std::vector<std::uint32_t> labels) {
  return RetrievalIndex<T>(std::move(ids), std::move(embeddings), std::move(labels));
}

struct Neighbor {
  std::string image_id;
  double score = 0.0;
  bool operator==(const Neighbor&) const = default;
};

struct Ranking {
  std::string query_id;
  std::vector<Neighbor> neighbors;
  bool truncated = false;  // fewer than k candidates were available
};

/// Top-k by cosine, ties by ascending image_id. Scores are double dot
/// products of the stored rows.
template <class T, class Q>
Ranking knn(const RetrievalIndex<T>& index, const Q& query, std::size_t k,
            const std::optional<std::string>& exclude_id = std::nullopt, std::string query_id = {}) {
  if (k == 0) throw DomainError("knn: k must be at least 1");
  if (static_cast<Eigen::Index>(query.size()) != index.dim() && !index.empty())
    throw DomainError("knn: query width differs from index");
  std::vector<Neighbor> cand;
  cand.reserve(index.size());
  const auto& e = index.embeddings();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (exclude_id && index.ids()[i] == *exclude_id) continue;
    double s = 0.0;
    for (Eigen::Index d = 0; d < e.cols(); ++d)
      s += static_cast<double>(e(static_cast<Eigen::Index>(i), d)) * static_cast<double>(query(d));
    cand.push_back({index.ids()[i], s});
  }
  if (cand.empty()) throw DomainError("knn: no candidates in index");
  const auto better = [](const Neighbor& a, const Neighbor& b) {
    return a.score != b.score ? a.score > b.score : a.image_id < b.image_id;
  };
  Ranking r;
  r.query_id = query_id.empty() && exclude_id ? *exclude_id : std::move(query_id);
  r.truncated = cand.size() < k;
  const std::size_t take = std::min(k, cand.size());
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(take), cand.end(), better);
  cand.resize(take);
  r.neighbors = std::move(cand);
  return r;
}

using RelevanceMap = std::unordered_map<std::string, std::unordered_set<std::string>>;

/// AP@k = (1 / min(m_q, k)) Σ_j P(j) rel(j); returns the mean over rankings.
/// An empty ranking list scores 0.
inline double map_at_k(const std::vector<Ranking>& rankings, const RelevanceMap& relevant, std::size_t k = 5) {
  if (k == 0) throw DomainError("map_at_k: k must be at least 1");
  if (rankings.empty()) return 0.0;
  double total = 0.0;
  for (const auto& r : rankings) {
    auto it = relevant.find(r.query_id);
    if (it == relevant.end() || it->second.empty())
      throw DomainError("map_at_k: query \"" + r.query_id + "\" has no relevant items");
    if (r.neighbors.size() > k) throw DomainError("map_at_k: ranking longer than k");
    std::size_t hits = 0;
    double ap = 0.0;
    for (std::size_t j = 0; j < r.neighbors.size(); ++j) {
      if (!it->second.contains(r.neighbors[j].image_id)) continue;
      ++hits;
      ap += static_cast<double>(hits) / static_cast<double>(j + 1);
    }
    total += ap / static_cast<double>(std::min(it->second.size(), k));
  }
  return total / static_cast<double>(rankings.size());
}

/// Leave-one-out protocol: every item whose class has another member is a
/// query against all other items; relevance is same class.
template <class T>
double leave_one_out_map(const RetrievalIndex<T>& index, std::size_t k = 5) {
  std::unordered_map<std::uint32_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < index.size(); ++i) by_class[index.labels()[i]].push_back(i);
  std::vector<Ranking> rankings;
  RelevanceMap relevant;
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto& members = by_class[index.labels()[i]];
    if (members.size() < 2) continue;
    const auto& id = index.ids()[i];
    auto& rel = relevant[id];
    for (auto j : members)
      if (j != i) rel.insert(index.ids()[j]);
    rankings.push_back(knn(index, index.embeddings().row(static_cast<Eigen::Index>(i)), k, id));
  }
  if (rankings.empty()) throw DomainError("leave-one-out evaluation: no class has two or more items");
  return map_at_k(rankings, relevant, k);
}

}  // namespace guie
