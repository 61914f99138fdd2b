#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/SVD>

#include "bs3fa/common.hpp"
#include "bs3fa/gibbs.hpp"

namespace bs3fa {

struct AlignmentReport {
  int pivot_index = 0;
  std::vector<std::vector<int>> permutations;  // per draw, target slot -> source column
  std::vector<std::vector<int>> signs;         // per draw, +-1 per column
  double misalignment = 0.0;  // mean relative Frobenius distance to the pivot
  bool degenerate = false;    // all-zero loadings, identity alignment applied
};

// Varimax rotation via the SVD-based gradient projection iteration. Returns an
// orthogonal K x K matrix R maximizing the varimax criterion of L * R.
inline Matrix varimax_rotation(const Matrix& L, int max_iter = 200,
                               double tol = 1e-8) {
  const int K = static_cast<int>(L.cols());
  const double p = static_cast<double>(L.rows());
  Matrix R = Matrix::Identity(K, K);
  if (K < 2 || L.norm() == 0.0) return R;
  double last = 0.0;
  for (int it = 0; it < max_iter; ++it) {
    Matrix Lr = L * R;
    Matrix cube = Lr.array().cube().matrix();
    Matrix G = L.transpose() *
               (cube - Lr * (Lr.array().square().colwise().sum() / p)
                                .matrix()
                                .asDiagonal());
    Eigen::JacobiSVD<Matrix> svd(G, Eigen::ComputeFullU | Eigen::ComputeFullV);
    R = svd.matrixU() * svd.matrixV().transpose();
    double s = svd.singularValues().sum();
    if (s < last * (1.0 + tol) && it > 0) break;
    last = s;
  }
  return R;
}

namespace detail {

// Rotation-invariant draw distance used for pivot selection.
inline double gram_distance(const Matrix& A, const Matrix& B) {
  return (A * A.transpose() - B * B.transpose()).norm();
}

}  // namespace detail

// Resolves rotation, column-label and sign ambiguity across saved draws. Each
// draw's stacked loadings [Lambda; Theta] are varimax-rotated, then columns are
// greedily matched by absolute inner product and sign-fixed against the pivot
// (the draw minimizing total Gram distance to the others within a subsample).
// Eta rows receive the inverse transform, so Lambda*Eta and Theta*Eta are
// unchanged draw by draw; tau/alpha follow the column permutation.
inline std::pair<PosteriorDraws, AlignmentReport> align_draws(
    const PosteriorDraws& raw) {
  const int T = raw.n_draws();
  require(T >= 2, "align_draws needs at least two draws");
  const int K = static_cast<int>(raw.Lambda[0].cols());
  PosteriorDraws out = raw;
  AlignmentReport rep;
  rep.permutations.resize(static_cast<size_t>(T));
  rep.signs.resize(static_cast<size_t>(T));

  auto stacked = [&](int t) {
    Matrix L(raw.Lambda[static_cast<size_t>(t)].rows() +
                 raw.Theta[static_cast<size_t>(t)].rows(),
             K);
    L.topRows(raw.Lambda[static_cast<size_t>(t)].rows()) =
        raw.Lambda[static_cast<size_t>(t)];
    L.bottomRows(raw.Theta[static_cast<size_t>(t)].rows()) =
        raw.Theta[static_cast<size_t>(t)];
    return L;
  };

  double total_norm = 0.0;
  for (int t = 0; t < T; ++t) total_norm += stacked(t).norm();
  if (total_norm == 0.0) {
    rep.degenerate = true;
    for (int t = 0; t < T; ++t) {
      rep.permutations[static_cast<size_t>(t)].resize(static_cast<size_t>(K));
      for (int k = 0; k < K; ++k)
        rep.permutations[static_cast<size_t>(t)][static_cast<size_t>(k)] = k;
      rep.signs[static_cast<size_t>(t)].assign(static_cast<size_t>(K), 1);
    }
    return {out, rep};
  }

  // Pivot: medoid under the rotation-invariant Gram distance over a subsample.
  const int max_pivot_sample = 32;
  std::vector<int> sample_idx;
  int step = std::max(1, T / max_pivot_sample);
  for (int t = 0; t < T; t += step) sample_idx.push_back(t);
  double best = std::numeric_limits<double>::infinity();
  int pivot = 0;
  for (int a : sample_idx) {
    double tot = 0.0;
    Matrix La = stacked(a);
    for (int b : sample_idx)
      if (b != a) tot += detail::gram_distance(La, stacked(b));
    if (tot < best) {
      best = tot;
      pivot = a;
    }
  }
  rep.pivot_index = pivot;

  Matrix Lp = stacked(pivot);
  Matrix Rp = varimax_rotation(Lp);
  Matrix pivot_aligned = Lp * Rp;

  double mis = 0.0;
  const double pnorm = std::max(pivot_aligned.norm(), 1e-300);
  for (int t = 0; t < T; ++t) {
    Matrix Lt = stacked(t);
    Matrix Rt = varimax_rotation(Lt);
    Matrix Lrot = Lt * Rt;

    // Greedy match: repeatedly take the (pivot column, draw column) pair with
    // the largest absolute inner product.
    Matrix ip = pivot_aligned.transpose() * Lrot;  // K x K
    std::vector<int> perm(static_cast<size_t>(K), -1);
    std::vector<int> sign(static_cast<size_t>(K), 1);
    std::vector<bool> used_row(static_cast<size_t>(K), false),
        used_col(static_cast<size_t>(K), false);
    for (int n = 0; n < K; ++n) {
      int bi = -1, bj = -1;
      double bv = -1.0;
      for (int i = 0; i < K; ++i) {
        if (used_row[static_cast<size_t>(i)]) continue;
        for (int j = 0; j < K; ++j) {
          if (used_col[static_cast<size_t>(j)]) continue;
          if (std::abs(ip(i, j)) > bv) {
            bv = std::abs(ip(i, j));
            bi = i;
            bj = j;
          }
        }
      }
      used_row[static_cast<size_t>(bi)] = true;
      used_col[static_cast<size_t>(bj)] = true;
      perm[static_cast<size_t>(bi)] = bj;
      sign[static_cast<size_t>(bi)] = ip(bi, bj) >= 0.0 ? 1 : -1;
    }

    // Full transform: columns rotated, permuted, sign-flipped; factor scores
    // get the transpose so reconstructions are untouched.
    Matrix Tm = Matrix::Zero(K, K);
    for (int i = 0; i < K; ++i)
      Tm(perm[static_cast<size_t>(i)], i) = static_cast<double>(sign[static_cast<size_t>(i)]);
    Matrix full = Rt * Tm;
    out.Lambda[static_cast<size_t>(t)] = raw.Lambda[static_cast<size_t>(t)] * full;
    out.Theta[static_cast<size_t>(t)] = raw.Theta[static_cast<size_t>(t)] * full;
    out.Eta[static_cast<size_t>(t)] =
        full.transpose() * raw.Eta[static_cast<size_t>(t)];
    Vector tau_p(K);
    for (int i = 0; i < K; ++i)
      tau_p[i] = raw.tau[static_cast<size_t>(t)][perm[static_cast<size_t>(i)]];
    out.tau[static_cast<size_t>(t)] = tau_p;

    rep.permutations[static_cast<size_t>(t)] = perm;
    rep.signs[static_cast<size_t>(t)] = sign;
    Matrix aligned_stack(pivot_aligned.rows(), K);
    aligned_stack.topRows(out.Lambda[static_cast<size_t>(t)].rows()) =
        out.Lambda[static_cast<size_t>(t)];
    aligned_stack.bottomRows(out.Theta[static_cast<size_t>(t)].rows()) =
        out.Theta[static_cast<size_t>(t)];
    mis += (pivot_aligned - aligned_stack).norm() / pnorm;
  }
  rep.misalignment = mis / T;
  return {out, rep};
}

}  // namespace bs3fa
