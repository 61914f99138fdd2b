#pragma once

#include <algorithm>
#include <cmath>
#include <iostream>
#include <string>
#include <vector>

#include "bs3fa/common.hpp"
#include "bs3fa/gibbs.hpp"

namespace bs3fa {

enum class WeightMode { TauWeighted, Unweighted };

// Expected pairwise distance in factor-score space with optional per-pair
// credible intervals. Each draw induces a weighted Euclidean metric; the
// expectation is taken over draws (expectation of distance, not distance of
// the posterior-mean scores).
struct DistanceMatrix {
  std::vector<std::string> items;
  Matrix mean;
  Matrix lo, hi;
  bool has_intervals = false;

  int find(const std::string& id) const {
    for (int i = 0; i < static_cast<int>(items.size()); ++i)
      if (items[static_cast<size_t>(i)] == id) return i;
    throw DataError("item '" + id + "' not in distance matrix");
  }
};

// Per-draw weights: tau_weighted uses w_k proportional to 1/tau_k normalized
// to sum one (comparable across runs with different K); unweighted uses 1.
inline Vector distance_weights(const Vector& tau, WeightMode mode) {
  const int K = static_cast<int>(tau.size());
  if (mode == WeightMode::Unweighted) return Vector::Ones(K);
  Vector w = tau.cwiseInverse();
  double s = w.sum();
  require(s > 0.0, "distance_weights: degenerate tau");
  return w / s;
}

inline DistanceMatrix pairwise_distance(const PosteriorDraws& draws,
                                        WeightMode mode,
                                        const std::vector<int>& subset = {},
                                        bool with_intervals = false,
                                        double interval_level = 0.95) {
  const int T = draws.n_draws();
  require(T >= 1, "pairwise_distance: zero draws");
  std::vector<int> idx = subset;
  if (idx.empty())
    for (int i = 0; i < static_cast<int>(draws.items.size()); ++i) idx.push_back(i);
  const int n = static_cast<int>(idx.size());

  DistanceMatrix dm;
  for (int i : idx) dm.items.push_back(draws.items[static_cast<size_t>(i)]);
  dm.mean = Matrix::Zero(n, n);
  std::vector<std::vector<double>> samples;
  if (with_intervals)
    samples.assign(static_cast<size_t>(n) * n, {});

  for (int t = 0; t < T; ++t) {
    Vector w = distance_weights(draws.tau[static_cast<size_t>(t)], mode);
    const Matrix& eta = draws.Eta[static_cast<size_t>(t)];
    for (int a = 0; a < n; ++a) {
      for (int b = a + 1; b < n; ++b) {
        Vector diff = eta.col(idx[static_cast<size_t>(a)]) -
                      eta.col(idx[static_cast<size_t>(b)]);
        double d = std::sqrt((w.array() * diff.array().square()).sum());
        dm.mean(a, b) += d;
        dm.mean(b, a) += d;
        if (with_intervals)
          samples[static_cast<size_t>(a) * n + b].push_back(d);
      }
    }
  }
  dm.mean /= T;
  if (with_intervals) {
    dm.lo = Matrix::Zero(n, n);
    dm.hi = Matrix::Zero(n, n);
    double tail = 0.5 * (1.0 - interval_level);
    for (int a = 0; a < n; ++a)
      for (int b = a + 1; b < n; ++b) {
        auto& v = samples[static_cast<size_t>(a) * n + b];
        std::sort(v.begin(), v.end());
        int ilo = static_cast<int>(std::floor(tail * (v.size() - 1)));
        int ihi = static_cast<int>(std::ceil((1.0 - tail) * (v.size() - 1)));
        dm.lo(a, b) = dm.lo(b, a) = v[static_cast<size_t>(ilo)];
        dm.hi(a, b) = dm.hi(b, a) = v[static_cast<size_t>(ihi)];
      }
    dm.has_intervals = true;
  }
  return dm;
}

// k nearest items to the query by expected distance, self excluded, ties
// broken by item id. k larger than N-1 is clipped with a warning.
inline std::vector<std::pair<std::string, double>> neighbors(
    const DistanceMatrix& dm, const std::string& query, int k) {
  int q = dm.find(query);
  const int n = static_cast<int>(dm.items.size());
  if (k > n - 1) {
    std::cerr << "neighbors: k=" << k << " clipped to " << n - 1 << "\n";
    k = n - 1;
  }
  std::vector<std::pair<std::string, double>> all;
  for (int i = 0; i < n; ++i) {
    if (i == q) continue;
    all.emplace_back(dm.items[static_cast<size_t>(i)], dm.mean(q, i));
  }
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second < b.second;
    return a.first < b.first;
  });
  all.resize(static_cast<size_t>(std::max(k, 0)));
  return all;
}

enum class DesignMode { FillIn, VentureOut };

// fill_in: candidates with the smallest average distance to the designated
// training cluster. venture_out: iterative farthest-point selection, each pick
// maximizing the minimum distance to the training set plus earlier picks.
inline std::vector<std::string> coverage_design(const DistanceMatrix& dm,
                                                const std::vector<std::string>& train_ids,
                                                const std::vector<std::string>& candidate_ids,
                                                int n_pick, DesignMode mode) {
  require(!candidate_ids.empty(), "coverage_design: no candidates");
  for (const auto& t : train_ids)
    for (const auto& c : candidate_ids)
      require(t != c, "coverage_design: train and candidate sets overlap");
  std::vector<int> train, cand;
  for (const auto& id : train_ids) train.push_back(dm.find(id));
  for (const auto& id : candidate_ids) cand.push_back(dm.find(id));
  n_pick = std::min<int>(n_pick, static_cast<int>(cand.size()));

  std::vector<std::string> picks;
  if (mode == DesignMode::FillIn) {
    std::vector<std::pair<double, std::string>> scored;
    for (int c : cand) {
      double avg = 0.0;
      for (int t : train) avg += dm.mean(c, t);
      avg /= std::max<size_t>(train.size(), 1);
      scored.emplace_back(avg, dm.items[static_cast<size_t>(c)]);
    }
    std::sort(scored.begin(), scored.end());
    for (int i = 0; i < n_pick; ++i)
      picks.push_back(scored[static_cast<size_t>(i)].second);
    return picks;
  }

  // venture_out
  std::vector<int> anchor = train;
  std::vector<bool> taken(cand.size(), false);
  for (int pick = 0; pick < n_pick; ++pick) {
    double best = -1.0;
    int best_c = -1;
    for (size_t ci = 0; ci < cand.size(); ++ci) {
      if (taken[ci]) continue;
      double mind = std::numeric_limits<double>::infinity();
      for (int a : anchor) mind = std::min(mind, dm.mean(cand[ci], a));
      if (anchor.empty()) mind = std::numeric_limits<double>::infinity();
      std::string id = dm.items[static_cast<size_t>(cand[ci])];
      if (mind > best ||
          (mind == best && best_c >= 0 &&
           id < dm.items[static_cast<size_t>(cand[static_cast<size_t>(best_c)])])) {
        best = mind;
        best_c = static_cast<int>(ci);
      }
    }
    taken[static_cast<size_t>(best_c)] = true;
    anchor.push_back(cand[static_cast<size_t>(best_c)]);
    picks.push_back(dm.items[static_cast<size_t>(cand[static_cast<size_t>(best_c)])]);
  }
  return picks;
}

}  // namespace bs3fa
