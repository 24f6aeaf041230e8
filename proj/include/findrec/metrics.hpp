#pragma once

// Single-target ranking metrics and length-bucketed aggregation.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "findrec/errors.hpp"

namespace findrec {

// 1 + number of candidates that outrank the target. A candidate outranks it
// with a strictly higher score, or an equal score and a smaller item id.
// Item 0 (padding) and `exclusions` are not candidates.
inline std::size_t rank_of_target(std::span<const double> scores, std::int64_t target,
                                  const std::unordered_set<std::int64_t>& exclusions) {
  if (target < 1 || static_cast<std::size_t>(target) >= scores.size()) {
    throw IndexError("target " + std::to_string(target) + " outside the catalog");
  }
  if (exclusions.count(target)) throw TargetExcluded("target " + std::to_string(target) + " is excluded");
  const double ts = scores[static_cast<std::size_t>(target)];
  std::size_t rank = 1;
  for (std::size_t j = 1; j < scores.size(); ++j) {
    const auto id = static_cast<std::int64_t>(j);
    if (id == target || exclusions.count(id)) continue;
    if (scores[j] > ts || (scores[j] == ts && id < target)) ++rank;
  }
  return rank;
}

inline double ndcg_at_k(std::size_t rank, std::size_t k) {
  return rank >= 1 && rank <= k ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0;
}

inline double mrr_at_k(std::size_t rank, std::size_t k) {
  return rank >= 1 && rank <= k ? 1.0 / static_cast<double>(rank) : 0.0;
}

struct RankResult {
  std::size_t user = 0;
  std::size_t rank = 0;
  std::size_t excluded = 0;
  std::size_t seq_len = 0;
};

struct MetricSet {
  std::size_t n_users = 0;
  double ndcg5 = 0.0;
  double ndcg10 = 0.0;
  double mrr5 = 0.0;
  double mrr10 = 0.0;
};

// Sequence-length buckets: [5, 10], (10, 30], (30, inf).
inline constexpr std::array<const char*, 3> kBucketLabels = {"5-10", "10-30", ">30"};

inline std::size_t length_bucket(std::size_t seq_len) {
  if (seq_len <= 10) return 0;
  if (seq_len <= 30) return 1;
  return 2;
}

struct MetricsReport {
  MetricSet overall;
  std::array<MetricSet, 3> buckets;
};

inline MetricSet aggregate(std::span<const RankResult> ranks) {
  MetricSet m;
  m.n_users = ranks.size();
  if (ranks.empty()) return m;
  for (const auto& r : ranks) {
    m.ndcg5 += ndcg_at_k(r.rank, 5);
    m.ndcg10 += ndcg_at_k(r.rank, 10);
    m.mrr5 += mrr_at_k(r.rank, 5);
    m.mrr10 += mrr_at_k(r.rank, 10);
  }
  const double n = static_cast<double>(ranks.size());
  m.ndcg5 /= n;
  m.ndcg10 /= n;
  m.mrr5 /= n;
  m.mrr10 /= n;
  return m;
}

// `ranks` is aggregated in the order given; callers pass ascending user order.
inline MetricsReport build_report(std::span<const RankResult> ranks) {
  MetricsReport rep;
  rep.overall = aggregate(ranks);
  std::array<std::vector<RankResult>, 3> per;
  for (const auto& r : ranks) per[length_bucket(r.seq_len)].push_back(r);
  for (std::size_t b = 0; b < 3; ++b) rep.buckets[b] = aggregate(per[b]);
  return rep;
}

inline nlohmann::json to_json(const MetricSet& m) {
  nlohmann::json j;
  j["n_users"] = m.n_users;
  if (m.n_users == 0) {
    for (const char* k : {"ndcg@5", "ndcg@10", "mrr@5", "mrr@10"}) j[k] = nullptr;
  } else {
    j["ndcg@5"] = m.ndcg5;
    j["ndcg@10"] = m.ndcg10;
    j["mrr@5"] = m.mrr5;
    j["mrr@10"] = m.mrr10;
  }
  return j;
}

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["overall"] = to_json(r.overall);
  nlohmann::json b = nlohmann::json::object();
  for (std::size_t i = 0; i < 3; ++i) b[kBucketLabels[i]] = to_json(r.buckets[i]);
  j["buckets"] = std::move(b);
  return j;
}

}  // namespace findrec
