#pragma once

#include <cmath>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/SVD>

#include "bs3fa/common.hpp"
#include "bs3fa/config.hpp"
#include "bs3fa/data.hpp"
#include "bs3fa/rng.hpp"

namespace bs3fa {

// Squared-exponential kernel matrix: entry (a,b) = alpha2 * exp(-(d_a-d_b)^2 / (2 ell^2)).
inline Matrix kernel_matrix(double alpha2, double ell, const Vector& doses) {
  const int D = static_cast<int>(doses.size());
  Matrix C(D, D);
  const double inv2l2 = 1.0 / (2.0 * ell * ell);
  for (int a = 0; a < D; ++a) {
    C(a, a) = alpha2;
    for (int b = a + 1; b < D; ++b) {
      double diff = doses[a] - doses[b];
      double v = alpha2 * std::exp(-diff * diff * inv2l2);
      C(a, b) = v;
      C(b, a) = v;
    }
  }
  return C;
}

struct GpKernel {
  double alpha2 = 1.0;
  double ell = 1.0;
  Vector doses;
  Matrix matrix() const { return kernel_matrix(alpha2, ell, doses); }
};

// Full parameter block for one Gibbs chain.
//
// Lambda (D x K): smooth response loadings, column k ~ GP(0, alpha2_k * C_ell).
// Theta  (S x K): feature loadings on the shared factors, horseshoe entries.
// Xi     (S x J): feature-only loadings, multiplicative-gamma entries.
// Eta    (K x N), Nu (J x N): factor scores, standard normal priors.
// Z      (S x N): latent continuous surrogate; equals X rows for continuous
//                 features, sampled for binary/count entries.
struct ModelState {
  Matrix Lambda, Theta, Xi, Eta, Nu, Z;

  Vector delta;  // K; tau_k = prod_{h<=k} delta_h scales Lambda and Theta columns
  double phi = 1.0;
  int ell_index = 0;
  double ell = 1.0;

  double beta2 = 1.0, t = 1.0;  // horseshoe global scale + auxiliary
  Matrix gamma2, b;             // S x K local scales + auxiliaries

  Matrix kappa;  // S x J entry precisions for Xi
  Vector zeta;   // J; omega_j = prod_{h<=j} zeta_h

  double sigmaY2 = 1.0;
  Vector sigmaX2;  // S; pinned to 1 for binary features

  Vector muZ, zetaS;  // feature means + their Cauchy-mixture precisions
  Vector muY;         // response mean curve

  Vector tau() const {
    Vector out(delta.size());
    double acc = 1.0;
    for (int k = 0; k < delta.size(); ++k) {
      acc *= delta[k];
      out[k] = acc;
    }
    return out;
  }

  Vector omega() const {
    Vector out(zeta.size());
    double acc = 1.0;
    for (int j = 0; j < zeta.size(); ++j) {
      acc *= zeta[j];
      out[j] = acc;
    }
    return out;
  }

  // alpha2_k = (phi * tau_k)^{-1}
  Vector alpha2() const {
    Vector tv = tau();
    return (1.0 / (phi * tv.array())).matrix();
  }

  bool all_finite() const {
    auto ok = [](const Matrix& m) { return m.size() == 0 || m.allFinite(); };
    return ok(Lambda) && ok(Theta) && ok(Xi) && ok(Eta) && ok(Nu) && ok(Z) &&
           delta.allFinite() && std::isfinite(phi) && std::isfinite(beta2) &&
           std::isfinite(t) && ok(gamma2) && ok(b) && ok(kappa) &&
           (zeta.size() == 0 || zeta.allFinite()) && std::isfinite(sigmaY2) &&
           sigmaX2.allFinite() && muZ.allFinite() && zetaS.allFinite() &&
           muY.allFinite();
  }
};

// True when feature s gets a sampled mean. Binary and count features are never
// pre-centered; continuous features are centered by apply_links unless
// center_x is switched off.
inline bool mu_z_active(const Hyperparams& hp, const std::vector<FeatureKind>& kinds,
                        int s) {
  FeatureKind k = kinds[static_cast<size_t>(s)];
  if (k == FeatureKind::Binary || k == FeatureKind::Count) return true;
  return !hp.center_x;
}

namespace detail {

inline void init_latent_z(ModelState& st, const Dataset& ds, Rng& rng) {
  const int S = ds.n_features(), N = ds.n_items();
  st.Z = ds.X;
  for (int s = 0; s < S; ++s) {
    if (ds.kinds[static_cast<size_t>(s)] == FeatureKind::Binary) {
      for (int i = 0; i < N; ++i)
        st.Z(s, i) = ds.X(s, i) > 0.5
                         ? rng.truncated_normal(0.0, 1.0, 0.0, INFINITY)
                         : rng.truncated_normal(0.0, 1.0, -INFINITY, 0.0);
    } else if (ds.kinds[static_cast<size_t>(s)] == FeatureKind::Count) {
      for (int i = 0; i < N; ++i) {
        double x = ds.X(s, i);
        st.Z(s, i) = x == 0.0
                         ? rng.truncated_normal(0.0, 1.0, -INFINITY, 0.0)
                         : rng.truncated_normal(x - 0.5, 1.0, x - 1.0, x);
      }
    }
  }
}

}  // namespace detail

inline ModelState init_state(const Dataset& ds, const Hyperparams& hp,
                             InitMode mode, std::uint64_t seed) {
  hp.validate();
  Rng rng(stream_seed(seed, 0xB5));
  const int D = ds.n_doses(), S = ds.n_features(), N = ds.n_items();
  const int K = hp.K, J = hp.J;
  require(D >= 1 && S >= 1 && N >= 1, "init_state: empty dataset");

  ModelState st;
  st.Lambda = Matrix::Zero(D, K);
  st.Theta = Matrix::Zero(S, K);
  st.Xi = Matrix::Zero(S, J);
  st.Eta = Matrix::Zero(K, N);
  st.Nu = Matrix::Zero(J, N);
  st.delta = Vector::Ones(K);
  st.gamma2 = Matrix::Ones(S, K);
  st.b = Matrix::Ones(S, K);
  st.kappa = Matrix::Ones(S, J);
  st.zeta = Vector::Ones(J);
  st.sigmaX2 = Vector::Ones(S);
  st.muZ = Vector::Zero(S);
  st.zetaS = Vector::Ones(S);
  st.muY = Vector::Zero(D);

  std::vector<double> grid =
      hp.ell_grid.empty() ? make_ell_grid(ds.doses, hp.ell_grid_size) : hp.ell_grid;
  st.ell_index = static_cast<int>(grid.size()) / 2;
  st.ell = grid[static_cast<size_t>(st.ell_index)];

  auto small = [&] { return rng.normal(0.0, 0.01); };
  auto small_pos = [&] { return std::abs(rng.normal(0.0, 0.01)); };

  if (mode == InitMode::RandomSmall) {
    auto fill = [&](Matrix& m) {
      for (int c = 0; c < m.cols(); ++c)
        for (int r = 0; r < m.rows(); ++r) m(r, c) = small();
    };
    fill(st.Lambda);
    fill(st.Theta);
    fill(st.Xi);
    fill(st.Eta);
    fill(st.Nu);
    for (int k = 0; k < K; ++k) st.delta[k] = small_pos();
    st.phi = small_pos();
    st.beta2 = small_pos();
    st.t = small_pos();
    for (int s = 0; s < S; ++s)
      for (int k = 0; k < K; ++k) {
        st.gamma2(s, k) = small_pos();
        st.b(s, k) = small_pos();
      }
    for (int s = 0; s < S; ++s)
      for (int j = 0; j < J; ++j) st.kappa(s, j) = small_pos();
    for (int j = 0; j < J; ++j) st.zeta[j] = small_pos();
    st.sigmaY2 = small_pos();
    for (int s = 0; s < S; ++s)
      st.sigmaX2[s] = ds.kinds[static_cast<size_t>(s)] == FeatureKind::Binary
                          ? 1.0
                          : small_pos();
    for (int s = 0; s < S; ++s) {
      st.muZ[s] = mu_z_active(hp, ds.kinds, s) ? small() : 0.0;
      st.zetaS[s] = small_pos();
    }
    if (!hp.center_y)
      for (int d = 0; d < D; ++d) st.muY[d] = small();
  } else {
    require(N >= K, "svd init needs at least K items");
    // Replicate means with per-dose mean imputation for unobserved cells.
    Matrix Ymat = Matrix::Zero(D, N);
    for (int d = 0; d < D; ++d) {
      double tot = 0.0, cnt = 0.0;
      for (int i = 0; i < N; ++i)
        if (ds.O(d, i) > 0) {
          tot += ds.Ysum(d, i);
          cnt += ds.O(d, i);
        }
      double dose_mean = cnt > 0 ? tot / cnt : 0.0;
      for (int i = 0; i < N; ++i)
        Ymat(d, i) = ds.O(d, i) > 0 ? ds.Ysum(d, i) / ds.O(d, i) : dose_mean;
    }
    Matrix M(D + S, N);
    M.topRows(D) = Ymat;
    M.bottomRows(S) = ds.X;
    Eigen::BDCSVD<Matrix> svd(M, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const double rootN = std::sqrt(static_cast<double>(N));
    int r = std::min<int>(K, static_cast<int>(svd.singularValues().size()));
    for (int k = 0; k < r; ++k) {
      Vector uk = svd.matrixU().col(k) * (svd.singularValues()[k] / rootN);
      st.Lambda.col(k) = uk.head(D);
      st.Theta.col(k) = uk.tail(S);
      st.Eta.row(k) = rootN * svd.matrixV().col(k).transpose();
    }
    if (J > 0) {
      Matrix R = ds.X - st.Theta * st.Eta;
      Eigen::BDCSVD<Matrix> rsvd(R, Eigen::ComputeThinU | Eigen::ComputeThinV);
      int rj = std::min<int>(J, static_cast<int>(rsvd.singularValues().size()));
      for (int j = 0; j < rj; ++j) {
        st.Xi.col(j) = rsvd.matrixU().col(j) * (rsvd.singularValues()[j] / rootN);
        st.Nu.row(j) = rootN * rsvd.matrixV().col(j).transpose();
      }
    }
    // Noise variances from residuals, floored away from zero.
    double rss = 0.0, ny = 0.0;
    Matrix fit = st.Lambda * st.Eta;
    for (int i = 0; i < N; ++i)
      for (const auto& o : ds.obs[static_cast<size_t>(i)]) {
        double e = o.value - fit(ds.dose_index(o.dose), i);
        rss += e * e;
        ny += 1.0;
      }
    st.sigmaY2 = std::max(ny > 0 ? rss / std::max(ny, 1.0) : 1.0, 1e-4);
    Matrix rx = ds.X - st.Theta * st.Eta - st.Xi * st.Nu;
    for (int s = 0; s < S; ++s)
      st.sigmaX2[s] = ds.kinds[static_cast<size_t>(s)] == FeatureKind::Binary
                          ? 1.0
                          : std::max(rx.row(s).squaredNorm() / N, 1e-4);
    st.delta[0] = hp.a1;
    for (int k = 1; k < K; ++k) st.delta[k] = hp.a2;
    st.phi = 1.0;
  }

  detail::init_latent_z(st, ds, rng);
  return st;
}

// ---------------------------------------------------------------------------
// Log densities (natural parameterizations: gamma is shape/rate).

inline double log_normal_pdf(double x, double mean, double var) {
  double d = x - mean;
  return -0.5 * std::log(2.0 * M_PI * var) - 0.5 * d * d / var;
}

inline double log_gamma_pdf(double x, double shape, double rate) {
  if (x <= 0.0) return -std::numeric_limits<double>::infinity();
  return shape * std::log(rate) - std::lgamma(shape) + (shape - 1.0) * std::log(x) -
         rate * x;
}

inline double log_inv_gamma_pdf(double x, double shape, double rate) {
  if (x <= 0.0) return -std::numeric_limits<double>::infinity();
  return shape * std::log(rate) - std::lgamma(shape) - (shape + 1.0) * std::log(x) -
         rate / x;
}

// log N(x; 0, C) using a Cholesky of C (jittered by the caller).
inline double log_mvn_zero_pdf(const Vector& x, const Matrix& C) {
  Eigen::LLT<Matrix> llt(C);
  if (llt.info() != Eigen::Success)
    throw NumericalError("log_mvn_zero_pdf: covariance not positive definite");
  Vector half = llt.matrixL().solve(x);
  double logdet = 0.0;
  for (int i = 0; i < C.rows(); ++i)
    logdet += 2.0 * std::log(llt.matrixL()(i, i));
  return -0.5 * (x.size() * std::log(2.0 * M_PI) + logdet + half.squaredNorm());
}

// Joint log prior density of the full parameter block. The discrete length
// scale contributes -log|grid| and must lie on the grid.
inline double log_prior(const ModelState& st, const Hyperparams& hp,
                        const Dataset& ds) {
  const int D = ds.n_doses(), S = ds.n_features();
  const int K = hp.K, J = hp.J;
  require(st.sigmaY2 > 0.0 && st.phi > 0.0 && st.beta2 > 0.0 && st.t > 0.0,
          "log_prior: non-positive variance parameter");
  for (int k = 0; k < K; ++k)
    require(st.delta[k] > 0.0, "log_prior: non-positive delta");
  for (int j = 0; j < J; ++j)
    require(st.zeta[j] > 0.0, "log_prior: non-positive zeta");

  std::vector<double> grid =
      hp.ell_grid.empty() ? make_ell_grid(ds.doses, hp.ell_grid_size) : hp.ell_grid;
  bool on_grid = st.ell_index >= 0 &&
                 st.ell_index < static_cast<int>(grid.size()) &&
                 grid[static_cast<size_t>(st.ell_index)] == st.ell;
  require(on_grid, "log_prior: ell not on the configured grid");

  double lp = -std::log(static_cast<double>(grid.size()));

  Vector tau = st.tau(), omega = st.omega(), alpha2 = st.alpha2();
  Matrix corr = kernel_matrix(1.0, st.ell, ds.doses);

  for (int k = 0; k < K; ++k) {
    Matrix C = alpha2[k] * corr;
    C.diagonal().array() += hp.gp_jitter * alpha2[k];
    lp += log_mvn_zero_pdf(st.Lambda.col(k), C);
  }
  for (int i = 0; i < st.Eta.cols(); ++i)
    for (int k = 0; k < K; ++k) lp += log_normal_pdf(st.Eta(k, i), 0.0, 1.0);
  for (int i = 0; i < st.Nu.cols(); ++i)
    for (int j = 0; j < J; ++j) lp += log_normal_pdf(st.Nu(j, i), 0.0, 1.0);
  for (int s = 0; s < S; ++s)
    for (int k = 0; k < K; ++k) {
      double v = st.beta2 * st.gamma2(s, k) / tau[k];
      lp += log_normal_pdf(st.Theta(s, k), 0.0, v);
      lp += log_inv_gamma_pdf(st.gamma2(s, k), 0.5, 1.0 / st.b(s, k));
      lp += log_inv_gamma_pdf(st.b(s, k), 0.5, 1.0);
    }
  for (int s = 0; s < S; ++s)
    for (int j = 0; j < J; ++j) {
      lp += log_normal_pdf(st.Xi(s, j), 0.0, 1.0 / (st.kappa(s, j) * omega[j]));
      lp += log_gamma_pdf(st.kappa(s, j), hp.g_kappa / 2.0, hp.g_kappa / 2.0);
    }
  lp += log_gamma_pdf(st.phi, hp.g_phi / 2.0, hp.g_phi / 2.0);
  lp += log_gamma_pdf(st.delta[0], hp.a1, 1.0);
  for (int k = 1; k < K; ++k) lp += log_gamma_pdf(st.delta[k], hp.a2, 1.0);
  if (J > 0) {
    lp += log_gamma_pdf(st.zeta[0], hp.m1, 1.0);
    for (int j = 1; j < J; ++j) lp += log_gamma_pdf(st.zeta[j], hp.m2, 1.0);
  }
  lp += log_inv_gamma_pdf(st.beta2, 0.5, 1.0 / st.t);
  lp += log_inv_gamma_pdf(st.t, 0.5, 1.0);
  lp += log_inv_gamma_pdf(st.sigmaY2, hp.a_sigY / 2.0, hp.b_sigY / 2.0);
  for (int s = 0; s < S; ++s) {
    if (ds.kinds[static_cast<size_t>(s)] == FeatureKind::Binary) continue;
    require(st.sigmaX2[s] > 0.0, "log_prior: non-positive sigmaX2");
    lp += log_inv_gamma_pdf(st.sigmaX2[s], hp.a_sigX / 2.0, hp.b_sigX / 2.0);
  }
  for (int s = 0; s < S; ++s) {
    if (!mu_z_active(hp, ds.kinds, s)) continue;
    lp += log_normal_pdf(st.muZ[s], 0.0, 1.0 / st.zetaS[s]);
    lp += log_gamma_pdf(st.zetaS[s], 0.5, 0.5);
  }
  if (!hp.center_y) {
    Matrix C = corr;
    C.diagonal().array() += hp.gp_jitter;
    lp += log_mvn_zero_pdf(st.muY, C);
  }
  if (!std::isfinite(lp)) throw NumericalError("log_prior: non-finite result");
  return lp;
}

// Joint log likelihood of observed responses, continuous features, and the
// latent surrogates for binary/count features. Used by oracle tests.
inline double log_likelihood(const ModelState& st, const Dataset& ds,
                             const Hyperparams& hp) {
  double ll = 0.0;
  Matrix fit = st.Lambda * st.Eta;
  for (int i = 0; i < ds.n_items(); ++i)
    for (const auto& o : ds.obs[static_cast<size_t>(i)]) {
      int d = ds.dose_index(o.dose);
      ll += log_normal_pdf(o.value, st.muY[d] + fit(d, i), st.sigmaY2);
    }
  Matrix ex = st.Theta * st.Eta;
  if (hp.J > 0) ex += st.Xi * st.Nu;
  for (int s = 0; s < ds.n_features(); ++s)
    for (int i = 0; i < ds.n_items(); ++i)
      ll += log_normal_pdf(st.Z(s, i), st.muZ[s] + ex(s, i), st.sigmaX2[s]);
  return ll;
}

}  // namespace bs3fa
