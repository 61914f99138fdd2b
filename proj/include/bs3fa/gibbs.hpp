#pragma once

#include <atomic>
#include <cmath>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Cholesky>

#include "bs3fa/common.hpp"
#include "bs3fa/config.hpp"
#include "bs3fa/data.hpp"
#include "bs3fa/rng.hpp"
#include "bs3fa/state.hpp"

namespace bs3fa {

struct ConditionalGaussian {
  Vector mean;
  Matrix cov;
};

struct GammaParams {
  double shape = 1.0;
  double rate = 1.0;
};

// Per-run cached quantities: the correlation matrix, Cholesky factor and log
// determinant for every length-scale grid point (doses never change within a
// chain).
struct GibbsWorkspace {
  std::vector<double> ell_grid;
  std::vector<Matrix> corr;                  // jittered unit-variance kernels
  std::vector<Eigen::LLT<Matrix>> corr_llt;
  std::vector<double> corr_logdet;

  static GibbsWorkspace build(const Dataset& ds, const Hyperparams& hp) {
    GibbsWorkspace ws;
    ws.ell_grid =
        hp.ell_grid.empty() ? make_ell_grid(ds.doses, hp.ell_grid_size) : hp.ell_grid;
    for (double l : ws.ell_grid) {
      Matrix C = kernel_matrix(1.0, l, ds.doses);
      C.diagonal().array() += hp.gp_jitter;
      Eigen::LLT<Matrix> llt(C);
      if (llt.info() != Eigen::Success)
        throw NumericalError("kernel matrix not factorizable at ell=" +
                             std::to_string(l));
      double logdet = 0.0;
      for (int i = 0; i < C.rows(); ++i)
        logdet += 2.0 * std::log(llt.matrixL()(i, i));
      ws.corr.push_back(std::move(C));
      ws.corr_llt.push_back(std::move(llt));
      ws.corr_logdet.push_back(logdet);
    }
    return ws;
  }

  double quad_form(int grid_idx, const Vector& x) const {
    Vector half = corr_llt[static_cast<size_t>(grid_idx)].matrixL().solve(x);
    return half.squaredNorm();
  }
};

// Draw from N(mean, cov) via Cholesky with escalating diagonal jitter.
inline Vector draw_mvn(const ConditionalGaussian& cg, Rng& rng) {
  const int n = static_cast<int>(cg.mean.size());
  Matrix C = 0.5 * (cg.cov + cg.cov.transpose());
  double scale = std::max(C.diagonal().maxCoeff(), 1e-300);
  double jitter = 0.0;
  for (int attempt = 0; attempt < 8; ++attempt) {
    Matrix Cj = C;
    if (jitter > 0.0) Cj.diagonal().array() += jitter;
    Eigen::LLT<Matrix> llt(Cj);
    if (llt.info() == Eigen::Success) {
      Vector z(n);
      for (int i = 0; i < n; ++i) z[i] = rng.normal();
      return cg.mean + llt.matrixL() * z;
    }
    jitter = jitter == 0.0 ? 1e-12 * scale : jitter * 100.0;
  }
  throw NumericalError("draw_mvn: covariance not positive definite");
}

// Posterior of a GP with prior N(0, alpha2 * corr) observed through
// independent pseudo-observations s_d with precision w_d (w_d = 0 marks an
// unobserved dose, conditioned through the prior covariance only).
inline ConditionalGaussian gp_weighted_conditional(const Matrix& corr, double alpha2,
                                                   const Vector& w, const Vector& s) {
  const int D = static_cast<int>(w.size());
  Matrix C = alpha2 * corr;
  std::vector<int> idx;
  for (int d = 0; d < D; ++d)
    if (w[d] > 1e-300) idx.push_back(d);
  ConditionalGaussian out;
  if (idx.empty()) {
    out.mean = Vector::Zero(D);
    out.cov = C;
    return out;
  }
  const int A = static_cast<int>(idx.size());
  Matrix Caa(A, A);
  Matrix Cfa(D, A);
  Vector sa(A);
  for (int a = 0; a < A; ++a) {
    sa[a] = s[idx[static_cast<size_t>(a)]];
    for (int b = 0; b < A; ++b)
      Caa(a, b) = C(idx[static_cast<size_t>(a)], idx[static_cast<size_t>(b)]);
    Cfa.col(a) = C.col(idx[static_cast<size_t>(a)]);
    Caa(a, a) += 1.0 / w[idx[static_cast<size_t>(a)]];
  }
  Eigen::LLT<Matrix> llt(Caa);
  if (llt.info() != Eigen::Success) {
    Caa.diagonal().array() += 1e-10 * Caa.diagonal().maxCoeff();
    llt.compute(Caa);
    if (llt.info() != Eigen::Success)
      throw NumericalError("gp_weighted_conditional: factorization failed");
  }
  out.mean = Cfa * llt.solve(sa);
  out.cov = C - Cfa * llt.solve(Cfa.transpose());
  out.cov = 0.5 * (out.cov + out.cov.transpose());
  return out;
}

// ---------------------------------------------------------------------------
// Step 1: response loadings Lambda, one column at a time, plus its hyper
// parameters (discrete length scale, global precision phi, shared column
// shrinkage chain delta).

// Conditional for column k given the rest. Replicates enter through the
// per-dose counts O and sums Ysum; the pseudo-observation at dose d has
// precision sum_i eta_{k,i}^2 O_{d,i} / sigmaY2. An all-zero eta row leaves
// every weight at zero and returns the GP prior.
inline ConditionalGaussian lambda_column_conditional(int k, const ModelState& st,
                                                     const Dataset& ds,
                                                     const Matrix& corr) {
  const int D = ds.n_doses(), N = ds.n_items();
  Vector etak = st.Eta.row(k).transpose();
  Matrix fit = st.Lambda * st.Eta - st.Lambda.col(k) * etak.transpose();
  Vector w = Vector::Zero(D), num = Vector::Zero(D);
  for (int i = 0; i < N; ++i) {
    if (etak[i] == 0.0) continue;
    for (int d = 0; d < D; ++d) {
      if (ds.O(d, i) == 0.0) continue;
      double resid = ds.Ysum(d, i) - ds.O(d, i) * (st.muY[d] + fit(d, i));
      num[d] += etak[i] * resid / st.sigmaY2;
      w[d] += etak[i] * etak[i] * ds.O(d, i) / st.sigmaY2;
    }
  }
  Vector s = Vector::Zero(D);
  for (int d = 0; d < D; ++d)
    if (w[d] > 0.0) s[d] = num[d] / w[d];
  double a2 = st.alpha2()[k];
  return gp_weighted_conditional(corr, a2, w, s);
}

inline void sample_lambda(ModelState& st, const Dataset& ds,
                          const GibbsWorkspace& ws, Rng& rng) {
  const Matrix& corr = ws.corr[static_cast<size_t>(st.ell_index)];
  for (int k = 0; k < st.Lambda.cols(); ++k) {
    auto cond = lambda_column_conditional(k, st, ds, corr);
    st.Lambda.col(k) = draw_mvn(cond, rng);
  }
}

// Unnormalized log posterior over the length-scale grid. Both the Lambda
// columns and (when sampled) the mean curve muY depend on the kernel, so both
// contribute.
inline Vector ell_log_weights(const ModelState& st, const Hyperparams& hp,
                              const GibbsWorkspace& ws) {
  const int G = static_cast<int>(ws.ell_grid.size());
  const int K = static_cast<int>(st.Lambda.cols());
  Vector tau = st.tau();
  Vector logw(G);
  for (int g = 0; g < G; ++g) {
    double lw = -0.5 * K * ws.corr_logdet[static_cast<size_t>(g)];
    for (int k = 0; k < K; ++k)
      lw -= 0.5 * st.phi * tau[k] * ws.quad_form(g, st.Lambda.col(k));
    if (!hp.center_y) {
      lw -= 0.5 * ws.corr_logdet[static_cast<size_t>(g)];
      lw -= 0.5 * ws.quad_form(g, st.muY);
    }
    logw[g] = lw;
  }
  return logw;
}

inline GammaParams phi_conditional(const ModelState& st, const Hyperparams& hp,
                                   const GibbsWorkspace& ws) {
  const int D = static_cast<int>(st.Lambda.rows());
  const int K = static_cast<int>(st.Lambda.cols());
  Vector tau = st.tau();
  double quad = 0.0;
  for (int k = 0; k < K; ++k)
    quad += tau[k] * ws.quad_form(st.ell_index, st.Lambda.col(k));
  return {(hp.g_phi + D * K) / 2.0, (hp.g_phi + quad) / 2.0};
}

// Conditional for delta_h (0-based); columns k >= h carry delta_h in their
// cumulative product, through both the Lambda GP precision and the Theta
// column shrinkage.
inline GammaParams delta_conditional(int h, const ModelState& st,
                                     const Hyperparams& hp,
                                     const GibbsWorkspace& ws) {
  const int D = static_cast<int>(st.Lambda.rows());
  const int S = static_cast<int>(st.Theta.rows());
  const int K = static_cast<int>(st.Lambda.cols());
  GammaParams gp;
  gp.shape = (h == 0 ? hp.a1 : hp.a2) + 0.5 * (K - h) * (D + S);
  gp.rate = 1.0;
  double tau_minus = 1.0;  // prod_{l<=k, l!=h} delta_l
  for (int k = 0; k < K; ++k) {
    if (k != h) tau_minus *= st.delta[k];
    if (k < h) continue;
    double ql = st.phi * ws.quad_form(st.ell_index, st.Lambda.col(k));
    double qt = 0.0;
    for (int s = 0; s < S; ++s)
      qt += st.Theta(s, k) * st.Theta(s, k) / st.gamma2(s, k);
    qt /= st.beta2;
    gp.rate += 0.5 * tau_minus * (ql + qt);
  }
  return gp;
}

inline void sample_lambda_hypers(ModelState& st, const Hyperparams& hp,
                                 const GibbsWorkspace& ws, Rng& rng) {
  Vector logw = ell_log_weights(st, hp, ws);
  if (!logw.allFinite())
    throw NumericalError("length-scale posterior has non-finite log-weights");
  st.ell_index = rng.categorical_log(logw);
  st.ell = ws.ell_grid[static_cast<size_t>(st.ell_index)];

  auto pp = phi_conditional(st, hp, ws);
  st.phi = rng.gamma(pp.shape, pp.rate);

  for (int h = 0; h < st.delta.size(); ++h) {
    auto dp = delta_conditional(h, st, hp, ws);
    st.delta[h] = rng.gamma(dp.shape, dp.rate);
  }
}

// ---------------------------------------------------------------------------
// Step 2: latent continuous surrogates for binary and count features.
// Binary entries use unit variance (sigmaX2 pinned at 1); count entries use
// the feature's sampled noise variance, truncated to the rounding cell.

inline void sample_latent_z(ModelState& st, const Dataset& ds, Rng& rng) {
  const int S = ds.n_features(), N = ds.n_items();
  Matrix ex = st.Theta * st.Eta;
  if (st.Xi.cols() > 0) ex += st.Xi * st.Nu;
  for (int s = 0; s < S; ++s) {
    FeatureKind kind = ds.kinds[static_cast<size_t>(s)];
    if (kind != FeatureKind::Binary && kind != FeatureKind::Count) continue;
    double var = kind == FeatureKind::Binary ? 1.0 : st.sigmaX2[s];
    for (int i = 0; i < N; ++i) {
      double mean = st.muZ[s] + ex(s, i);
      double x = ds.X(s, i);
      if (kind == FeatureKind::Binary) {
        st.Z(s, i) = x > 0.5 ? rng.truncated_normal(mean, var, 0.0, INFINITY)
                             : rng.truncated_normal(mean, var, -INFINITY, 0.0);
      } else {
        st.Z(s, i) = x == 0.0
                         ? rng.truncated_normal(mean, var, -INFINITY, 0.0)
                         : rng.truncated_normal(mean, var, x - 1.0, x);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Step 3: feature-only factors nu, loadings Xi, and their shrinkage chain.

// Common conditional covariance for every nu_i: (Xi' Sigma^-1 Xi + I)^-1.
inline ConditionalGaussian nu_conditional(int item, const ModelState& st,
                                          const Dataset& ds) {
  const int J = static_cast<int>(st.Xi.cols());
  Matrix xistar = st.sigmaX2.cwiseInverse().asDiagonal() * st.Xi;  // S x J
  Matrix M = st.Xi.transpose() * xistar + Matrix::Identity(J, J);
  Vector d = st.Z.col(item) - st.muZ - st.Theta * st.Eta.col(item);
  ConditionalGaussian out;
  Eigen::LLT<Matrix> llt(M);
  out.cov = llt.solve(Matrix::Identity(J, J));
  out.mean = llt.solve(xistar.transpose() * d);
  return out;
}

inline ConditionalGaussian xi_row_conditional(int s, const ModelState& st,
                                              const Dataset& ds,
                                              const Matrix& nu_gram) {
  const int J = static_cast<int>(st.Xi.cols());
  Vector omega = st.omega();
  Matrix M = nu_gram / st.sigmaX2[s];
  for (int j = 0; j < J; ++j) M(j, j) += st.kappa(s, j) * omega[j];
  Vector dr = (st.Z.row(s).transpose() - Vector::Constant(ds.n_items(), st.muZ[s]) -
               (st.Theta.row(s) * st.Eta).transpose());
  ConditionalGaussian out;
  Eigen::LLT<Matrix> llt(M);
  out.cov = llt.solve(Matrix::Identity(J, J));
  out.mean = llt.solve(st.Nu * dr) / st.sigmaX2[s];
  return out;
}

inline GammaParams kappa_conditional(int s, int j, const ModelState& st,
                                     const Hyperparams& hp) {
  double omega_j = st.omega()[j];
  double xi2 = st.Xi(s, j) * st.Xi(s, j);
  return {(hp.g_kappa + 1.0) / 2.0, (hp.g_kappa + xi2 * omega_j) / 2.0};
}

inline GammaParams zeta_conditional(int h, const ModelState& st,
                                    const Hyperparams& hp) {
  const int S = static_cast<int>(st.Xi.rows());
  const int J = static_cast<int>(st.Xi.cols());
  GammaParams gp;
  gp.shape = (h == 0 ? hp.m1 : hp.m2) + 0.5 * static_cast<double>(S) * (J - h);
  gp.rate = 1.0;
  double omega_minus = 1.0;
  for (int j = 0; j < J; ++j) {
    if (j != h) omega_minus *= st.zeta[j];
    if (j < h) continue;
    double q = 0.0;
    for (int s = 0; s < S; ++s)
      q += st.kappa(s, j) * st.Xi(s, j) * st.Xi(s, j);
    gp.rate += 0.5 * omega_minus * q;
  }
  return gp;
}

inline void sample_nu_xi(ModelState& st, const Dataset& ds, const Hyperparams& hp,
                         Rng& rng) {
  const int J = static_cast<int>(st.Xi.cols());
  if (J == 0) return;
  const int S = ds.n_features(), N = ds.n_items();

  // nu: shared covariance, per-item mean.
  {
    Matrix xistar = st.sigmaX2.cwiseInverse().asDiagonal() * st.Xi;
    Matrix M = st.Xi.transpose() * xistar + Matrix::Identity(J, J);
    Eigen::LLT<Matrix> llt(M);
    if (llt.info() != Eigen::Success)
      throw NumericalError("nu conditional precision not positive definite");
    Matrix Dresid = st.Z - st.muZ * Eigen::RowVectorXd::Ones(N) - st.Theta * st.Eta;
    Matrix rhs = xistar.transpose() * Dresid;  // J x N
    Matrix Lt = llt.matrixL().transpose();
    for (int i = 0; i < N; ++i) {
      Vector mean = llt.solve(rhs.col(i));
      Vector z(J);
      for (int j = 0; j < J; ++j) z[j] = rng.normal();
      st.Nu.col(i) = mean + Lt.template triangularView<Eigen::Upper>().solve(z);
    }
  }

  // Xi rows.
  {
    Matrix nu_gram = st.Nu * st.Nu.transpose();
    Matrix Dresid = st.Z - st.muZ * Eigen::RowVectorXd::Ones(N) - st.Theta * st.Eta;
    Vector omega = st.omega();
    for (int s = 0; s < S; ++s) {
      Matrix M = nu_gram / st.sigmaX2[s];
      for (int j = 0; j < J; ++j) M(j, j) += st.kappa(s, j) * omega[j];
      Eigen::LLT<Matrix> llt(M);
      if (llt.info() != Eigen::Success)
        throw NumericalError("xi row conditional not positive definite");
      Vector mean = llt.solve(st.Nu * Dresid.row(s).transpose()) / st.sigmaX2[s];
      Vector z(J);
      for (int j = 0; j < J; ++j) z[j] = rng.normal();
      st.Xi.row(s) =
          (mean + llt.matrixL().transpose().template triangularView<Eigen::Upper>().solve(z))
              .transpose();
    }
  }

  Vector omega = st.omega();
  for (int s = 0; s < S; ++s)
    for (int j = 0; j < J; ++j) {
      double xi2 = st.Xi(s, j) * st.Xi(s, j);
      st.kappa(s, j) =
          rng.gamma((hp.g_kappa + 1.0) / 2.0, (hp.g_kappa + xi2 * omega[j]) / 2.0);
    }
  for (int h = 0; h < J; ++h) {
    auto zp = zeta_conditional(h, st, hp);
    st.zeta[h] = rng.gamma(zp.shape, zp.rate);
  }
}

// ---------------------------------------------------------------------------
// Step 4: shared-factor feature loadings Theta and the horseshoe hierarchy
// (Makalic-Schmidt auxiliary parameterization).

inline ConditionalGaussian theta_row_conditional(int s, const ModelState& st,
                                                 const Dataset& ds,
                                                 const Matrix& eta_gram) {
  const int K = static_cast<int>(st.Theta.cols());
  Vector tau = st.tau();
  Matrix M = eta_gram / st.sigmaX2[s];
  for (int k = 0; k < K; ++k)
    M(k, k) += tau[k] / (st.beta2 * st.gamma2(s, k));
  Vector dr = (st.Z.row(s).transpose() - Vector::Constant(ds.n_items(), st.muZ[s]));
  if (st.Xi.cols() > 0) dr -= (st.Xi.row(s) * st.Nu).transpose();
  ConditionalGaussian out;
  Eigen::LLT<Matrix> llt(M);
  out.cov = llt.solve(Matrix::Identity(K, K));
  out.mean = llt.solve(st.Eta * dr) / st.sigmaX2[s];
  return out;
}

inline void sample_theta(ModelState& st, const Dataset& ds, Rng& rng) {
  const int S = ds.n_features(), N = ds.n_items();
  const int K = static_cast<int>(st.Theta.cols());
  Matrix eta_gram = st.Eta * st.Eta.transpose();
  Matrix Dresid = st.Z - st.muZ * Eigen::RowVectorXd::Ones(N);
  if (st.Xi.cols() > 0) Dresid -= st.Xi * st.Nu;
  Vector tau = st.tau();
  for (int s = 0; s < S; ++s) {
    Matrix M = eta_gram / st.sigmaX2[s];
    for (int k = 0; k < K; ++k)
      M(k, k) += tau[k] / (st.beta2 * st.gamma2(s, k));
    Eigen::LLT<Matrix> llt(M);
    if (llt.info() != Eigen::Success)
      throw NumericalError("theta row conditional not positive definite");
    Vector mean = llt.solve(st.Eta * Dresid.row(s).transpose()) / st.sigmaX2[s];
    Vector z(K);
    for (int k = 0; k < K; ++k) z[k] = rng.normal();
    st.Theta.row(s) =
        (mean + llt.matrixL().transpose().template triangularView<Eigen::Upper>().solve(z))
            .transpose();
  }
}

inline void sample_horseshoe(ModelState& st, Rng& rng) {
  const int S = static_cast<int>(st.Theta.rows());
  const int K = static_cast<int>(st.Theta.cols());
  Vector tau = st.tau();
  double quad = 0.0;
  for (int k = 0; k < K; ++k)
    for (int s = 0; s < S; ++s)
      quad += tau[k] * st.Theta(s, k) * st.Theta(s, k) / st.gamma2(s, k);
  st.beta2 = rng.inverse_gamma((S * K + 1.0) / 2.0, 1.0 / st.t + 0.5 * quad);
  for (int s = 0; s < S; ++s)
    for (int k = 0; k < K; ++k) {
      double rate = 1.0 / st.b(s, k) +
                    tau[k] * st.Theta(s, k) * st.Theta(s, k) / (2.0 * st.beta2);
      st.gamma2(s, k) = rng.inverse_gamma(1.0, rate);
    }
  st.t = rng.inverse_gamma(1.0, 1.0 + 1.0 / st.beta2);
  for (int s = 0; s < S; ++s)
    for (int k = 0; k < K; ++k)
      st.b(s, k) = rng.inverse_gamma(1.0, 1.0 + 1.0 / st.gamma2(s, k));
}

// ---------------------------------------------------------------------------
// Step 5: shared factor scores eta. The response block enters through
// replicate sums and counts restricted to each item's observed doses; holdout
// items condition on the feature block alone.

inline ConditionalGaussian eta_conditional(int item, const ModelState& st,
                                           const Dataset& ds) {
  const int D = ds.n_doses();
  const int K = static_cast<int>(st.Eta.rows());
  Matrix P =
      Matrix::Identity(K, K) +
      st.Theta.transpose() * st.sigmaX2.cwiseInverse().asDiagonal() * st.Theta;
  Vector xresid = st.Z.col(item) - st.muZ;
  if (st.Xi.cols() > 0) xresid -= st.Xi * st.Nu.col(item);
  Vector rhs = st.Theta.transpose() * (xresid.array() / st.sigmaX2.array()).matrix();
  for (int d = 0; d < D; ++d) {
    double o = ds.O(d, item);
    if (o == 0.0) continue;
    Vector lam = st.Lambda.row(d).transpose();
    P += (o / st.sigmaY2) * lam * lam.transpose();
    rhs += lam * (ds.Ysum(d, item) - o * st.muY[d]) / st.sigmaY2;
  }
  ConditionalGaussian out;
  Eigen::LLT<Matrix> llt(P);
  out.cov = llt.solve(Matrix::Identity(K, K));
  out.mean = llt.solve(rhs);
  return out;
}

inline void sample_eta(ModelState& st, const Dataset& ds, Rng& rng) {
  const int N = ds.n_items(), D = ds.n_doses();
  const int K = static_cast<int>(st.Eta.rows());
  Matrix x_gram =
      st.Theta.transpose() * st.sigmaX2.cwiseInverse().asDiagonal() * st.Theta;
  Matrix xresid = st.Z - st.muZ * Eigen::RowVectorXd::Ones(N);
  if (st.Xi.cols() > 0) xresid -= st.Xi * st.Nu;
  Matrix xrhs = st.Theta.transpose() *
                (xresid.array().colwise() / st.sigmaX2.array()).matrix();
  for (int i = 0; i < N; ++i) {
    Matrix P = Matrix::Identity(K, K) + x_gram;
    Vector rhs = xrhs.col(i);
    for (int d = 0; d < D; ++d) {
      double o = ds.O(d, i);
      if (o == 0.0) continue;
      Vector lam = st.Lambda.row(d).transpose();
      P.noalias() += (o / st.sigmaY2) * lam * lam.transpose();
      rhs += lam * (ds.Ysum(d, i) - o * st.muY[d]) / st.sigmaY2;
    }
    Eigen::LLT<Matrix> llt(P);
    if (llt.info() != Eigen::Success)
      throw NumericalError("eta conditional not positive definite");
    Vector mean = llt.solve(rhs);
    Vector z(K);
    for (int k = 0; k < K; ++k) z[k] = rng.normal();
    st.Eta.col(i) =
        mean + llt.matrixL().transpose().template triangularView<Eigen::Upper>().solve(z);
  }
}

// ---------------------------------------------------------------------------
// Step 6: noise variances. RSS for the response sums over every replicate
// observation; binary features keep sigmaX2 = 1.

inline GammaParams sigma_y_conditional(const ModelState& st, const Dataset& ds,
                                       const Hyperparams& hp) {
  Matrix fit = st.Lambda * st.Eta;
  double rss = 0.0, n = 0.0;
  for (int i = 0; i < ds.n_items(); ++i)
    for (const auto& o : ds.obs[static_cast<size_t>(i)]) {
      int d = ds.dose_index(o.dose);
      double e = o.value - st.muY[d] - fit(d, i);
      rss += e * e;
      n += 1.0;
    }
  return {(hp.a_sigY + n) / 2.0, (hp.b_sigY + rss) / 2.0};
}

inline GammaParams sigma_x_conditional(int s, const ModelState& st,
                                       const Dataset& ds, const Hyperparams& hp) {
  const int N = ds.n_items();
  Eigen::RowVectorXd fit = st.Theta.row(s) * st.Eta;
  if (st.Xi.cols() > 0) fit += st.Xi.row(s) * st.Nu;
  double rss = 0.0;
  for (int i = 0; i < N; ++i) {
    double e = st.Z(s, i) - st.muZ[s] - fit[i];
    rss += e * e;
  }
  return {(hp.a_sigX + N) / 2.0, (hp.b_sigX + rss) / 2.0};
}

inline void sample_variances(ModelState& st, const Dataset& ds,
                             const Hyperparams& hp, Rng& rng) {
  auto yp = sigma_y_conditional(st, ds, hp);
  st.sigmaY2 = 1.0 / rng.gamma(yp.shape, yp.rate);
  for (int s = 0; s < ds.n_features(); ++s) {
    if (ds.kinds[static_cast<size_t>(s)] == FeatureKind::Binary) continue;
    auto xp = sigma_x_conditional(s, st, ds, hp);
    st.sigmaX2[s] = 1.0 / rng.gamma(xp.shape, xp.rate);
  }
}

// ---------------------------------------------------------------------------
// Mean updates. muY gets the same GP machinery as a Lambda column with unit
// scores and unit function variance; muZ entries get a normal-normal update
// under the Cauchy scale-mixture prior.

inline ConditionalGaussian mu_y_conditional(const ModelState& st, const Dataset& ds,
                                            const Matrix& corr) {
  const int D = ds.n_doses(), N = ds.n_items();
  Matrix fit = st.Lambda * st.Eta;
  Vector w = Vector::Zero(D), num = Vector::Zero(D);
  for (int i = 0; i < N; ++i)
    for (int d = 0; d < D; ++d) {
      if (ds.O(d, i) == 0.0) continue;
      num[d] += (ds.Ysum(d, i) - ds.O(d, i) * fit(d, i)) / st.sigmaY2;
      w[d] += ds.O(d, i) / st.sigmaY2;
    }
  Vector s = Vector::Zero(D);
  for (int d = 0; d < D; ++d)
    if (w[d] > 0.0) s[d] = num[d] / w[d];
  return gp_weighted_conditional(corr, 1.0, w, s);
}

inline void sample_means(ModelState& st, const Dataset& ds, const Hyperparams& hp,
                         const GibbsWorkspace& ws, Rng& rng) {
  const int N = ds.n_items();
  if (!hp.center_y) {
    auto cond = mu_y_conditional(st, ds, ws.corr[static_cast<size_t>(st.ell_index)]);
    st.muY = draw_mvn(cond, rng);
  }
  Matrix ex = st.Theta * st.Eta;
  if (st.Xi.cols() > 0) ex += st.Xi * st.Nu;
  for (int s = 0; s < ds.n_features(); ++s) {
    if (!mu_z_active(hp, ds.kinds, s)) continue;
    double resid_sum = (st.Z.row(s) - ex.row(s)).sum();
    double prec = st.zetaS[s] + N / st.sigmaX2[s];
    double mean = resid_sum / st.sigmaX2[s] / prec;
    st.muZ[s] = rng.normal(mean, 1.0 / prec);
    st.zetaS[s] = rng.gamma(1.0, 0.5 * (1.0 + st.muZ[s] * st.muZ[s]));
  }
}

// ---------------------------------------------------------------------------
// Sweep and chain drivers.

inline void check_finite(const ModelState& st, const std::string& step, int iter) {
  if (!st.all_finite())
    throw NumericalError("non-finite parameter after " + step + " at iteration " +
                         std::to_string(iter));
}

inline void gibbs_sweep(ModelState& st, const Dataset& ds, const Hyperparams& hp,
                        const GibbsWorkspace& ws, Rng& rng, int iter = -1) {
  sample_lambda(st, ds, ws, rng);
  sample_lambda_hypers(st, hp, ws, rng);
  check_finite(st, "step 1 (lambda)", iter);
  sample_latent_z(st, ds, rng);
  check_finite(st, "step 2 (latent z)", iter);
  sample_nu_xi(st, ds, hp, rng);
  check_finite(st, "step 3 (nu, xi)", iter);
  sample_theta(st, ds, rng);
  sample_horseshoe(st, rng);
  check_finite(st, "step 4 (theta)", iter);
  sample_eta(st, ds, rng);
  check_finite(st, "step 5 (eta)", iter);
  sample_variances(st, ds, hp, rng);
  check_finite(st, "step 6 (variances)", iter);
  sample_means(st, ds, hp, ws, rng);
  check_finite(st, "mean update", iter);
}

// Thinned, pooled draws of the identifiable state projection plus scalar
// traces. Raw (unaligned) until run through align_draws.
struct PosteriorDraws {
  std::vector<std::string> items;
  std::vector<bool> holdout;
  Vector doses;
  double y_scale = 1.0;

  std::vector<Matrix> Lambda, Theta, Eta;
  std::vector<Vector> tau, omega, sigmaX2, muY, muZ;
  std::vector<double> sigmaY2, phi, ell;
  std::vector<int> chain, iter;

  struct TraceRow {
    int chain = 0, iter = 0;
    double sigmaY2 = 0, phi = 0, ell = 0, beta2 = 0;
    double inv_tau_min = 0, inv_omega_min = 0;
  };
  std::vector<TraceRow> trace;

  int n_draws() const { return static_cast<int>(Lambda.size()); }

  void append(const PosteriorDraws& other) {
    auto cat = [](auto& a, const auto& b) { a.insert(a.end(), b.begin(), b.end()); };
    cat(Lambda, other.Lambda);
    cat(Theta, other.Theta);
    cat(Eta, other.Eta);
    cat(tau, other.tau);
    cat(omega, other.omega);
    cat(sigmaX2, other.sigmaX2);
    cat(muY, other.muY);
    cat(muZ, other.muZ);
    cat(sigmaY2, other.sigmaY2);
    cat(phi, other.phi);
    cat(ell, other.ell);
    cat(chain, other.chain);
    cat(iter, other.iter);
    cat(trace, other.trace);
  }
};

inline PosteriorDraws run_chain(const Dataset& ds, const Hyperparams& hp,
                                const ChainConfig& cc, int chain_index = 0) {
  hp.validate();
  cc.validate();
  GibbsWorkspace ws = GibbsWorkspace::build(ds, hp);
  Rng rng(stream_seed(cc.seed, static_cast<std::uint64_t>(chain_index)));
  ModelState st = init_state(ds, hp, cc.init,
                             stream_seed(cc.seed, 0x1000 + chain_index));

  PosteriorDraws out;
  out.items = ds.items;
  out.holdout = ds.holdout;
  out.doses = ds.doses;
  out.y_scale = ds.y_scale;

  for (int it = 1; it <= cc.n_iter; ++it) {
    gibbs_sweep(st, ds, hp, ws, rng, it);
    Vector tau = st.tau();
    Vector omega = st.omega();
    PosteriorDraws::TraceRow tr;
    tr.chain = chain_index;
    tr.iter = it;
    tr.sigmaY2 = st.sigmaY2;
    tr.phi = st.phi;
    tr.ell = st.ell;
    tr.beta2 = st.beta2;
    tr.inv_tau_min = tau.size() ? 1.0 / tau.maxCoeff() : 0.0;
    tr.inv_omega_min = omega.size() ? 1.0 / omega.maxCoeff() : 0.0;
    out.trace.push_back(tr);
    if (it > cc.burn_in && (it - cc.burn_in) % cc.thin == 0) {
      out.Lambda.push_back(st.Lambda);
      out.Theta.push_back(st.Theta);
      out.Eta.push_back(st.Eta);
      out.tau.push_back(tau);
      out.omega.push_back(omega);
      out.sigmaX2.push_back(st.sigmaX2);
      out.muY.push_back(st.muY);
      out.muZ.push_back(st.muZ);
      out.sigmaY2.push_back(st.sigmaY2);
      out.phi.push_back(st.phi);
      out.ell.push_back(st.ell);
      out.chain.push_back(chain_index);
      out.iter.push_back(it);
    }
  }
  return out;
}

// Runs cc.n_chains independent chains (parallel when threads > 1) and pools
// the post-burn-in draws. Seed streams are split per chain, so results do not
// depend on scheduling.
inline PosteriorDraws run_chains(const Dataset& ds, const Hyperparams& hp,
                                 const ChainConfig& cc, int threads = 0) {
  if (threads <= 0)
    threads = static_cast<int>(std::thread::hardware_concurrency());
  threads = std::max(1, std::min(threads, cc.n_chains));
  std::vector<PosteriorDraws> per_chain(static_cast<size_t>(cc.n_chains));
  std::vector<std::string> errors(static_cast<size_t>(cc.n_chains));
  if (threads == 1) {
    for (int c = 0; c < cc.n_chains; ++c)
      per_chain[static_cast<size_t>(c)] = run_chain(ds, hp, cc, c);
  } else {
    std::vector<std::thread> pool;
    std::atomic<int> next{0};
    for (int t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (;;) {
          int c = next.fetch_add(1);
          if (c >= cc.n_chains) return;
          try {
            per_chain[static_cast<size_t>(c)] = run_chain(ds, hp, cc, c);
          } catch (const std::exception& e) {
            errors[static_cast<size_t>(c)] = e.what();
          }
        }
      });
    for (auto& th : pool) th.join();
    for (const auto& e : errors)
      if (!e.empty()) throw NumericalError(e);
  }
  PosteriorDraws pooled = std::move(per_chain[0]);
  for (int c = 1; c < cc.n_chains; ++c) pooled.append(per_chain[static_cast<size_t>(c)]);
  return pooled;
}

}  // namespace bs3fa
