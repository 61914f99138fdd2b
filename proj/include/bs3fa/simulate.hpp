#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "bs3fa/common.hpp"
#include "bs3fa/data.hpp"
#include "bs3fa/pipeline.hpp"
#include "bs3fa/rng.hpp"

namespace bs3fa {

enum class SimFamily { Aligned, Polynomial };

inline std::string family_name(SimFamily f) {
  return f == SimFamily::Aligned ? "aligned" : "polynomial";
}

struct SimSpec {
  SimFamily family = SimFamily::Aligned;
  int N = 300;
  int D = 10;
  int S = 40;  // aligned family
  int K_true = 3;
  int J_true = 5;
  double sigmaY = 0.2;
  double sigmaX = 0.1;
  double inactive_frac = 0.5;
  double holdout_frac = 0.25;
  int S_relevant = 1;  // polynomial family
  int S_irrelevant = 10;
  std::uint64_t seed = 0;

  void validate() const {
    require(N >= 2 && D >= 2, "SimSpec: need N >= 2, D >= 2");
    require(inactive_frac >= 0.0 && inactive_frac <= 1.0 &&
                holdout_frac >= 0.0 && holdout_frac <= 1.0,
            "SimSpec: fractions must lie in [0,1]");
    if (family == SimFamily::Aligned) {
      require(K_true >= 1 && K_true <= D, "SimSpec: need 1 <= K_true <= D");
      require(J_true >= 0 && S >= 1, "SimSpec: need J_true >= 0, S >= 1");
    } else {
      require(S_relevant >= 1 && S_irrelevant >= 0,
              "SimSpec: need S_relevant >= 1, S_irrelevant >= 0");
    }
  }
};

struct SimTruth {
  Matrix Lambda, Theta, Xi;  // aligned family only
  Matrix Eta, Nu;
  std::vector<bool> active;
  Matrix true_curves;  // D x N, original units
  Matrix true_dist;    // N x N
};

struct SimMetrics {
  double mspe = 0.0;
  double coverage = 0.0;
  double dist_corr = 0.0;
  double tpr = 0.0, fpr = 0.0, fdr = 0.0;
  std::map<std::string, double> component_mse;
  double mspe_strawman = 0.0;  // training-mean predictor
  double mspe_zero = 0.0;      // all-inactive predictor
  double min_inv_tau = 0.0;    // truncation diagnostic of the fit
};

namespace sim_detail {

inline std::string zpad(int v, int width) {
  std::string s = std::to_string(v);
  while (static_cast<int>(s.size()) < width) s = "0" + s;
  return s;
}

// Modified Gram-Schmidt; keeps the leading column's support, later columns
// pick up only the fill-in needed for orthogonality.
inline Matrix orthonormalize_columns(Matrix M) {
  for (int k = 0; k < M.cols(); ++k) {
    for (int h = 0; h < k; ++h)
      M.col(k) -= M.col(h).dot(M.col(k)) * M.col(h);
    double n = M.col(k).norm();
    require(n > 1e-12, "orthonormalize_columns: rank-deficient input");
    M.col(k) /= n;
  }
  return M;
}

// Random matrix with Bernoulli support mask and orthonormalized columns, the
// sparse-orthogonal surrogate used for Theta and Xi.
inline Matrix masked_orthonormal(int rows, int cols, double keep_prob, Rng& rng) {
  Matrix M = Matrix::Zero(rows, cols);
  for (int c = 0; c < cols; ++c) {
    bool any = false;
    for (int r = 0; r < rows; ++r)
      if (rng.uniform() < keep_prob) {
        M(r, c) = rng.normal();
        any = true;
      }
    if (!any) M(rng.uniform_int(static_cast<std::uint64_t>(rows)), c) = rng.normal();
  }
  return orthonormalize_columns(std::move(M));
}

inline std::vector<bool> draw_holdout_mask(int N, double frac, Rng& rng) {
  std::vector<int> order(static_cast<size_t>(N));
  for (int i = 0; i < N; ++i) order[static_cast<size_t>(i)] = i;
  for (int i = N - 1; i > 0; --i)
    std::swap(order[static_cast<size_t>(i)],
              order[static_cast<size_t>(rng.uniform_int(static_cast<std::uint64_t>(i + 1)))]);
  int n_hold = static_cast<int>(std::lround(frac * N));
  std::vector<bool> mask(static_cast<size_t>(N), false);
  for (int i = 0; i < n_hold; ++i) mask[static_cast<size_t>(order[static_cast<size_t>(i)])] = true;
  return mask;
}

inline Matrix euclidean_distance_matrix(const Matrix& cols) {
  const int N = static_cast<int>(cols.cols());
  Matrix D = Matrix::Zero(N, N);
  for (int i = 0; i < N; ++i)
    for (int j = i + 1; j < N; ++j) {
      double d = (cols.col(i) - cols.col(j)).norm();
      D(i, j) = d;
      D(j, i) = d;
    }
  return D;
}

inline Dataset dataset_skeleton(int N, int S, const std::string& item_prefix) {
  Dataset ds;
  for (int i = 0; i < N; ++i) ds.items.push_back(item_prefix + zpad(i, 4));
  for (int s = 0; s < S; ++s) ds.feature_ids.push_back("f" + zpad(s, 4));
  ds.kinds.assign(static_cast<size_t>(S), FeatureKind::Continuous);
  ds.X = Matrix::Zero(S, N);
  ds.obs.resize(static_cast<size_t>(N));
  ds.holdout_obs.resize(static_cast<size_t>(N));
  ds.holdout.assign(static_cast<size_t>(N), false);
  ds.feature_center = Vector::Zero(S);
  ds.feature_scale = Vector::Ones(S);
  return ds;
}

}  // namespace sim_detail

// Truth-aligned generator: smooth GP loadings for the response block
// (orthonormalized, drawn with geometrically decaying function variance),
// masked-orthonormal sparse loadings for the feature block, inactive items
// with zero scores. Fully observed regular dose grid on [0,1].
inline std::pair<Dataset, SimTruth> gen_aligned(const SimSpec& spec,
                                                std::uint64_t seed) {
  spec.validate();
  require(spec.family == SimFamily::Aligned, "gen_aligned: wrong family");
  Rng rng(stream_seed(seed, 0xA11));
  const int N = spec.N, D = spec.D, S = spec.S;
  const int K = spec.K_true, J = spec.J_true;

  Dataset ds = sim_detail::dataset_skeleton(N, S, "item");
  Vector doses(D);
  for (int d = 0; d < D; ++d)
    doses[d] = static_cast<double>(d) / (D - 1);

  // Smooth loadings: GP draws with alpha2_k = 0.6^k, orthonormalized.
  Matrix corr = kernel_matrix(1.0, 0.3, doses);
  corr.diagonal().array() += 1e-8;
  Eigen::LLT<Matrix> llt(corr);
  Matrix raw(D, K);
  for (int k = 0; k < K; ++k) {
    Vector z(D);
    for (int d = 0; d < D; ++d) z[d] = rng.normal();
    raw.col(k) = std::sqrt(std::pow(0.6, k)) * (llt.matrixL() * z);
  }
  SimTruth truth;
  truth.Lambda = sim_detail::orthonormalize_columns(raw);
  truth.Theta = sim_detail::masked_orthonormal(S, K, 0.3, rng);
  truth.Xi = J > 0 ? sim_detail::masked_orthonormal(S, J, 0.3, rng) : Matrix::Zero(S, 0);

  truth.Eta = Matrix::Zero(K, N);
  truth.Nu = Matrix::Zero(std::max(J, 0), N);
  truth.active.assign(static_cast<size_t>(N), false);
  for (int i = 0; i < N; ++i) {
    bool inactive = rng.uniform() < spec.inactive_frac;
    truth.active[static_cast<size_t>(i)] = !inactive;
    if (!inactive)
      for (int k = 0; k < K; ++k) truth.Eta(k, i) = rng.normal();
    for (int j = 0; j < J; ++j) truth.Nu(j, i) = rng.normal();
  }

  truth.true_curves = truth.Lambda * truth.Eta;
  truth.true_dist = sim_detail::euclidean_distance_matrix(truth.Eta);

  ds.X = truth.Theta * truth.Eta;
  if (J > 0) ds.X += truth.Xi * truth.Nu;
  for (int s = 0; s < S; ++s)
    for (int i = 0; i < N; ++i) ds.X(s, i) += spec.sigmaX * rng.normal();

  ds.holdout = sim_detail::draw_holdout_mask(N, spec.holdout_frac, rng);
  for (int i = 0; i < N; ++i) {
    auto& target = ds.holdout[static_cast<size_t>(i)] ? ds.holdout_obs : ds.obs;
    for (int d = 0; d < D; ++d) {
      ResponseObs o;
      o.dose = doses[d];
      o.value = truth.true_curves(d, i) + spec.sigmaY * rng.normal();
      target[static_cast<size_t>(i)].push_back(o);
    }
  }
  ds.rebuild_dose_grid();
  ds.validate();
  return {std::move(ds), std::move(truth)};
}

// Misaligned generator: the response is a polynomial in dose whose
// coefficients are the relevant feature entries; irrelevant features are
// independent noise. True distances are Euclidean over the relevant columns.
inline std::pair<Dataset, SimTruth> gen_polynomial(const SimSpec& spec,
                                                   std::uint64_t seed) {
  spec.validate();
  require(spec.family == SimFamily::Polynomial, "gen_polynomial: wrong family");
  Rng rng(stream_seed(seed, 0xB01));
  const int N = spec.N, D = spec.D;
  const int Sr = spec.S_relevant, Si = spec.S_irrelevant, S = Sr + Si;

  Dataset ds = sim_detail::dataset_skeleton(N, S, "item");
  Vector doses(D);
  for (int d = 0; d < D; ++d)
    doses[d] = static_cast<double>(d) / (D - 1);

  for (int s = 0; s < S; ++s)
    for (int i = 0; i < N; ++i) ds.X(s, i) = rng.normal();

  SimTruth truth;
  truth.true_curves = Matrix::Zero(D, N);
  for (int i = 0; i < N; ++i)
    for (int d = 0; d < D; ++d) {
      double y = 0.0, dm = 1.0;
      for (int m = 1; m <= Sr; ++m) {
        dm *= doses[d];
        y += ds.X(m - 1, i) * dm;
      }
      truth.true_curves(d, i) = y;
    }
  truth.active.assign(static_cast<size_t>(N), false);
  for (int i = 0; i < N; ++i)
    truth.active[static_cast<size_t>(i)] =
        truth.true_curves.col(i).cwiseAbs().maxCoeff() > 0.0;
  truth.true_dist = sim_detail::euclidean_distance_matrix(ds.X.topRows(Sr));

  ds.holdout = sim_detail::draw_holdout_mask(N, spec.holdout_frac, rng);
  for (int i = 0; i < N; ++i) {
    auto& target = ds.holdout[static_cast<size_t>(i)] ? ds.holdout_obs : ds.obs;
    for (int d = 0; d < D; ++d) {
      ResponseObs o;
      o.dose = doses[d];
      o.value = truth.true_curves(d, i) + spec.sigmaY * rng.normal();
      target[static_cast<size_t>(i)].push_back(o);
    }
  }
  ds.rebuild_dose_grid();
  ds.validate();
  return {std::move(ds), std::move(truth)};
}

// Synthetic stand-in for the real assay analysis: mixed-kind features driven
// by a shared latent space, a nonzero mean curve, an irregular dose grid with
// heavy missingness at rare doses, a few replicated curves, and a handful of
// doses below the conventional floor.
inline std::pair<Dataset, SimTruth> gen_toxlike(std::uint64_t seed, int N = 400,
                                                int S_continuous = 80,
                                                int S_binary = 20,
                                                int S_count = 20) {
  Rng rng(stream_seed(seed, 0x70c5));
  const int S = S_continuous + S_binary + S_count;
  const int K = 4, J = 6;
  const double sigmaY = 0.25, sigmaX = 0.3;

  std::vector<double> dose_vals = {-2.6, -2.2, -2.0, -1.5, -1.05, -0.52, -0.1,
                                   0.3,  0.6,  0.85, 1.3,  1.85,  2.0,   2.3};
  const int D = static_cast<int>(dose_vals.size());
  Vector doses(D);
  for (int d = 0; d < D; ++d) doses[d] = dose_vals[static_cast<size_t>(d)];
  // The 8 common assay doses get dense coverage; the rest are sparse.
  std::set<int> common = {4, 5, 6, 7, 9, 10, 11, 13};

  Dataset ds = sim_detail::dataset_skeleton(N, S, "chem");
  for (int s = S_continuous; s < S_continuous + S_binary; ++s)
    ds.kinds[static_cast<size_t>(s)] = FeatureKind::Binary;
  for (int s = S_continuous + S_binary; s < S; ++s)
    ds.kinds[static_cast<size_t>(s)] = FeatureKind::Count;

  SimTruth truth;
  Vector muY(D);
  for (int d = 0; d < D; ++d)
    muY[d] = 0.25 / (1.0 + std::exp(-1.5 * (doses[d] - 1.0)));

  Matrix corr = kernel_matrix(1.0, 1.2, doses);
  corr.diagonal().array() += 1e-8;
  Eigen::LLT<Matrix> llt(corr);
  Matrix raw(D, K);
  for (int k = 0; k < K; ++k) {
    Vector z(D);
    for (int d = 0; d < D; ++d) z[d] = rng.normal();
    raw.col(k) = std::sqrt(std::pow(0.7, k)) * (llt.matrixL() * z);
  }
  Matrix Lambda = 1.2 * sim_detail::orthonormalize_columns(raw);
  Matrix Theta = 2.0 * sim_detail::masked_orthonormal(S, K, 0.3, rng);
  Matrix Xi = 1.5 * sim_detail::masked_orthonormal(S, J, 0.3, rng);

  truth.Eta = Matrix::Zero(K, N);
  truth.Nu = Matrix::Zero(J, N);
  truth.active.assign(static_cast<size_t>(N), false);
  for (int i = 0; i < N; ++i) {
    bool inactive = rng.uniform() < 0.55;
    truth.active[static_cast<size_t>(i)] = !inactive;
    if (!inactive)
      for (int k = 0; k < K; ++k) truth.Eta(k, i) = rng.normal();
    for (int j = 0; j < J; ++j) truth.Nu(j, i) = rng.normal();
  }
  truth.true_curves = muY * Eigen::RowVectorXd::Ones(N) + Lambda * truth.Eta;
  truth.true_dist = sim_detail::euclidean_distance_matrix(truth.Eta);

  // Latent feature surface, mapped through the per-kind links.
  Matrix Zlat = Theta * truth.Eta + Xi * truth.Nu;
  for (int s = 0; s < S; ++s) {
    FeatureKind kind = ds.kinds[static_cast<size_t>(s)];
    if (kind == FeatureKind::Continuous) {
      double mu = rng.normal(0.0, 0.25);
      for (int i = 0; i < N; ++i)
        ds.X(s, i) = mu + Zlat(s, i) + sigmaX * rng.normal();
    } else if (kind == FeatureKind::Binary) {
      double mu = rng.normal(0.0, 0.5);
      for (int i = 0; i < N; ++i)
        ds.X(s, i) = (mu + Zlat(s, i) + rng.normal()) > 0.0 ? 1.0 : 0.0;
    } else {
      bool big = (s - S_continuous - S_binary) >= S_count / 2;
      double mu = big ? 40.0 + 10.0 * rng.uniform() : 0.5 + 3.5 * rng.uniform();
      double scale = big ? 3.0 : 1.0;
      double noise_sd = big ? 5.0 : 1.0;
      for (int i = 0; i < N; ++i) {
        double z = mu + scale * Zlat(s, i) + noise_sd * rng.normal();
        ds.X(s, i) = z < 0.0 ? 0.0 : std::floor(z) + 1.0;
      }
    }
  }

  ds.holdout = sim_detail::draw_holdout_mask(N, 0.25, rng);
  auto draw_curve_obs = [&](int i) {
    auto& target = ds.holdout[static_cast<size_t>(i)] ? ds.holdout_obs : ds.obs;
    int added = 0;
    for (int d = 0; d < D; ++d) {
      double p = common.count(d) ? 0.92 : (doses[d] < -2.0 ? 0.10 : 0.30);
      if (rng.uniform() >= p) continue;
      ResponseObs o;
      o.dose = doses[d];
      o.value = truth.true_curves(d, i) + sigmaY * rng.normal();
      target[static_cast<size_t>(i)].push_back(o);
      ++added;
    }
    // Guarantee a usable curve even under unlucky missingness draws.
    if (added < 4)
      for (int d : {4, 6, 9, 13}) {
        ResponseObs o;
        o.dose = doses[d];
        o.value = truth.true_curves(d, i) + sigmaY * rng.normal();
        target[static_cast<size_t>(i)].push_back(o);
      }
  };
  for (int i = 0; i < N; ++i) {
    draw_curve_obs(i);
    if (rng.uniform() < 0.04) draw_curve_obs(i);  // replicated curve
  }
  ds.rebuild_dose_grid();
  ds.validate();
  return {std::move(ds), std::move(truth)};
}

// Straw-man predictors evaluated against the model: the per-dose mean of
// training observations, and the all-inactive zero curve. Values in original
// response units.
inline Vector strawman_training_mean(const Dataset& ds) {
  const int D = ds.n_doses();
  Vector mean = Vector::Zero(D);
  Vector count = Vector::Zero(D);
  for (int i = 0; i < ds.n_items(); ++i)
    for (const auto& o : ds.obs[static_cast<size_t>(i)]) {
      int d = ds.dose_index(o.dose);
      mean[d] += o.value / ds.y_scale;
      count[d] += 1.0;
    }
  double overall = count.sum() > 0 ? mean.sum() / count.sum() : 0.0;
  for (int d = 0; d < D; ++d) mean[d] = count[d] > 0 ? mean[d] / count[d] : overall;
  return mean;
}

// Scores a fit against simulation truth over the holdout items. MSPE compares
// posterior mean curves with true mean curves; coverage counts withheld noisy
// observations inside the 95% data bands; distances use expected pairwise
// tau-weighted distance vs the true metric.
inline SimMetrics score(const std::vector<CurveSummary>& curves,
                        const DistanceMatrix& dist_holdout,
                        const ComponentSummaries& comps, const Dataset& ds,
                        const SimTruth& truth, double alpha = 0.05) {
  const int N = ds.n_items(), D = ds.n_doses();
  require(static_cast<int>(curves.size()) == N, "score: curve/item count mismatch");
  require(static_cast<int>(truth.active.size()) == N, "score: truth size mismatch");
  std::map<std::string, const CurveSummary*> by_id;
  for (const auto& cs : curves) by_id[cs.item_id] = &cs;

  SimMetrics m;
  Vector straw = strawman_training_mean(ds);
  double se = 0.0, se_straw = 0.0, se_zero = 0.0;
  int n_cells = 0;
  int covered = 0, total_obs = 0;
  int tp = 0, fp = 0, fn = 0, tn = 0;
  for (int i = 0; i < N; ++i) {
    if (!ds.holdout[static_cast<size_t>(i)]) continue;
    const auto* cs = by_id.at(ds.items[static_cast<size_t>(i)]);
    require(cs->mean_curve.size() == D, "score: dose grid mismatch");
    for (int d = 0; d < D; ++d) {
      double tr = truth.true_curves(d, i);
      se += (cs->mean_curve[d] - tr) * (cs->mean_curve[d] - tr);
      se_straw += (straw[d] - tr) * (straw[d] - tr);
      se_zero += tr * tr;
      ++n_cells;
    }
    for (const auto& o : ds.holdout_obs[static_cast<size_t>(i)]) {
      int d = ds.dose_index(o.dose);
      double orig = o.value / ds.y_scale;
      if (orig >= cs->data_band_lo[d] && orig <= cs->data_band_hi[d]) ++covered;
      ++total_obs;
    }
    bool pred = cs->active;
    bool act = truth.active[static_cast<size_t>(i)];
    if (pred && act) ++tp;
    else if (pred && !act) ++fp;
    else if (!pred && act) ++fn;
    else ++tn;
  }
  m.mspe = n_cells ? se / n_cells : 0.0;
  m.mspe_strawman = n_cells ? se_straw / n_cells : 0.0;
  m.mspe_zero = n_cells ? se_zero / n_cells : 0.0;
  m.coverage = total_obs ? static_cast<double>(covered) / total_obs : 0.0;
  m.tpr = (tp + fn) ? static_cast<double>(tp) / (tp + fn) : 0.0;
  m.fpr = (fp + tn) ? static_cast<double>(fp) / (fp + tn) : 0.0;
  m.fdr = (fp + tp) ? static_cast<double>(fp) / (fp + tp) : 0.0;

  // Distance correlation over holdout pairs.
  std::vector<int> hold_idx;
  for (int i = 0; i < N; ++i)
    if (ds.holdout[static_cast<size_t>(i)]) hold_idx.push_back(i);
  std::map<std::string, int> truth_col;
  for (int i = 0; i < N; ++i) truth_col[ds.items[static_cast<size_t>(i)]] = i;
  std::vector<double> xs, ys;
  const int nh = static_cast<int>(dist_holdout.items.size());
  for (int a = 0; a < nh; ++a)
    for (int b = a + 1; b < nh; ++b) {
      int ia = truth_col.at(dist_holdout.items[static_cast<size_t>(a)]);
      int ib = truth_col.at(dist_holdout.items[static_cast<size_t>(b)]);
      xs.push_back(dist_holdout.mean(a, b));
      ys.push_back(truth.true_dist(ia, ib));
    }
  if (xs.size() >= 2) {
    double mx = 0, my = 0;
    for (size_t p = 0; p < xs.size(); ++p) {
      mx += xs[p];
      my += ys[p];
    }
    mx /= xs.size();
    my /= ys.size();
    double sxy = 0, sxx = 0, syy = 0;
    for (size_t p = 0; p < xs.size(); ++p) {
      sxy += (xs[p] - mx) * (ys[p] - my);
      sxx += (xs[p] - mx) * (xs[p] - mx);
      syy += (ys[p] - my) * (ys[p] - my);
    }
    m.dist_corr = (sxx > 0 && syy > 0) ? sxy / std::sqrt(sxx * syy) : 0.0;
  }

  // Component MSEs in original data units (undo Frobenius and feature scaling).
  const double c2 = ds.y_scale * ds.y_scale;
  if (truth.Lambda.size() > 0) {
    Matrix est = comps.lambda_gram_mean / c2;
    Matrix tru = truth.Lambda * truth.Lambda.transpose();
    m.component_mse["lambda_gram"] = (est - tru).array().square().mean();
    Matrix scale = ds.feature_scale.asDiagonal();
    Matrix est_t = scale * comps.theta_gram_mean * scale;
    Matrix tru_t = truth.Theta * truth.Theta.transpose();
    m.component_mse["theta_gram"] = (est_t - tru_t).array().square().mean();
  }
  {
    double est = comps.sigmaY2_mean / c2;
    double tru = 0.2 * 0.2;
    m.component_mse["sigma_y2"] = (est - tru) * (est - tru);
  }
  if (truth.Lambda.size() > 0) {
    double acc = 0.0;
    for (int s = 0; s < ds.n_features(); ++s) {
      double est = comps.sigmaX2_mean[s] * ds.feature_scale[s] * ds.feature_scale[s];
      double tru = 0.1 * 0.1;
      acc += (est - tru) * (est - tru);
    }
    m.component_mse["sigma_x2"] = acc / ds.n_features();
  }
  m.min_inv_tau = comps.inv_tau.size() ? comps.inv_tau.minCoeff() : 0.0;
  (void)alpha;
  return m;
}

// ---------------------------------------------------------------------------
// Study driver: cells x reps, each rep generating, fitting and scoring one
// data set. Failures are recorded and the study continues.

struct StudyRow {
  SimSpec spec;
  int rep = 0;
  SimMetrics metrics;
  std::string error;
};

struct StudyOptions {
  ChainConfig cc;
  int extra_factors = 5;  // K_run = K_true + extra, J_run = J_true + extra
  double alpha = 0.05;
  int threads = 0;
};

inline SimMetrics run_sim_rep(const SimSpec& spec, std::uint64_t rep_seed,
                              const StudyOptions& opt) {
  auto [raw_ds, truth] = spec.family == SimFamily::Aligned
                             ? gen_aligned(spec, rep_seed)
                             : gen_polynomial(spec, rep_seed);
  PreprocessOptions popt;
  auto pre = preprocess(raw_ds, popt);

  Hyperparams hp;
  if (spec.family == SimFamily::Aligned) {
    hp.K = spec.K_true + opt.extra_factors;
    hp.J = spec.J_true + opt.extra_factors;
  } else {
    hp.K = spec.S_relevant + opt.extra_factors;
    hp.J = opt.extra_factors;
  }
  ChainConfig cc = opt.cc;
  cc.seed = rep_seed;

  FitResult fit = fit_model(pre.ds, hp, cc, opt.alpha, opt.threads);

  std::vector<int> hold_idx;
  for (int i = 0; i < pre.ds.n_items(); ++i)
    if (pre.ds.holdout[static_cast<size_t>(i)]) hold_idx.push_back(i);
  DistanceMatrix dm =
      pairwise_distance(fit.raw, WeightMode::TauWeighted, hold_idx, false);
  return score(fit.curves, dm, fit.components, pre.ds, truth, opt.alpha);
}

inline std::vector<StudyRow> run_study(const std::vector<SimSpec>& grid, int reps,
                                       const StudyOptions& opt,
                                       std::uint64_t master_seed) {
  std::vector<StudyRow> rows;
  for (size_t cell = 0; cell < grid.size(); ++cell)
    for (int rep = 0; rep < reps; ++rep) {
      StudyRow row;
      row.spec = grid[cell];
      row.rep = rep;
      rows.push_back(row);
    }
  std::atomic<size_t> next{0};
  int threads = opt.threads > 0
                    ? opt.threads
                    : static_cast<int>(std::thread::hardware_concurrency());
  threads = std::max(1, std::min<int>(threads, static_cast<int>(rows.size())));
  auto work = [&] {
    for (;;) {
      size_t r = next.fetch_add(1);
      if (r >= rows.size()) return;
      auto& row = rows[r];
      std::uint64_t rep_seed = stream_seed(
          master_seed ^ row.spec.seed,
          0x51ed * (static_cast<std::uint64_t>(r / std::max(reps, 1)) + 1) +
              static_cast<std::uint64_t>(row.rep));
      StudyOptions inner = opt;
      inner.threads = 1;  // rep-level parallelism only
      try {
        row.metrics = run_sim_rep(row.spec, rep_seed, inner);
      } catch (const std::exception& e) {
        row.error = e.what();
      }
    }
  };
  if (threads == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  return rows;
}

inline std::map<std::string, double> metrics_as_map(const SimMetrics& m) {
  std::map<std::string, double> out;
  out["mspe"] = m.mspe;
  out["coverage"] = m.coverage;
  out["dist_corr"] = m.dist_corr;
  out["tpr"] = m.tpr;
  out["fpr"] = m.fpr;
  out["fdr"] = m.fdr;
  out["mspe_strawman"] = m.mspe_strawman;
  out["mspe_zero"] = m.mspe_zero;
  out["min_inv_tau"] = m.min_inv_tau;
  for (const auto& [k, v] : m.component_mse) out["mse_" + k] = v;
  return out;
}

inline void write_study_csv(const std::string& path,
                            const std::vector<StudyRow>& rows) {
  csv::Writer w(path);
  w.row("family", "K", "J", "S_rel", "S_irr", "rep", "metric", "value");
  for (const auto& row : rows) {
    if (!row.error.empty()) {
      w.row(family_name(row.spec.family), row.spec.K_true, row.spec.J_true,
            row.spec.S_relevant, row.spec.S_irrelevant, row.rep, "error", 0);
      continue;
    }
    for (const auto& [k, v] : metrics_as_map(row.metrics))
      w.row(family_name(row.spec.family), row.spec.K_true, row.spec.J_true,
            row.spec.S_relevant, row.spec.S_irrelevant, row.rep, k, v);
  }
}

// Per-cell mean and 2.5/97.5 percentiles of each metric.
inline void write_study_summary_csv(const std::string& path,
                                    const std::vector<StudyRow>& rows) {
  std::map<std::string, std::map<std::string, std::vector<double>>> cells;
  for (const auto& row : rows) {
    if (!row.error.empty()) continue;
    std::string cell = family_name(row.spec.family) + ",K=" +
                       std::to_string(row.spec.K_true) + ",J=" +
                       std::to_string(row.spec.J_true) + ",Sr=" +
                       std::to_string(row.spec.S_relevant) + ",Si=" +
                       std::to_string(row.spec.S_irrelevant);
    for (const auto& [k, v] : metrics_as_map(row.metrics))
      cells[cell][k].push_back(v);
  }
  auto pct = [](std::vector<double> v, double p) {
    std::sort(v.begin(), v.end());
    double pos = p * (v.size() - 1);
    size_t lo = static_cast<size_t>(std::floor(pos));
    size_t hi = static_cast<size_t>(std::ceil(pos));
    double frac = pos - lo;
    return v[lo] * (1.0 - frac) + v[hi] * frac;
  };
  csv::Writer w(path);
  w.row("cell", "metric", "mean", "p2.5", "p97.5", "n");
  for (const auto& [cell, metrics] : cells)
    for (const auto& [k, vals] : metrics) {
      double mean = 0.0;
      for (double v : vals) mean += v;
      mean /= vals.size();
      w.row(cell, k, mean, pct(vals, 0.025), pct(vals, 0.975), vals.size());
    }
}

}  // namespace bs3fa
