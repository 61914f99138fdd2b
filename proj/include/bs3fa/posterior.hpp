#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bs3fa/common.hpp"
#include "bs3fa/gibbs.hpp"
#include "bs3fa/rng.hpp"

namespace bs3fa {

enum class Direction { Positive, Negative, Mixed, None };

inline std::string direction_name(Direction d) {
  switch (d) {
    case Direction::Positive: return "positive";
    case Direction::Negative: return "negative";
    case Direction::Mixed: return "mixed";
    case Direction::None: return "none";
  }
  return "?";
}

struct CurveSummary {
  std::string item_id;
  Vector doses;
  Vector mean_curve;
  Vector mean_band_lo, mean_band_hi;  // simultaneous, level 1 - alpha
  Vector data_band_lo, data_band_hi;  // adds draw-specific noise
  double bayes_p = 1.0;
  Direction direction = Direction::None;
  std::vector<double> ac50_samples;
  bool active = false;
  bool is_holdout = false;
  double alpha = 0.05;
};

namespace band_detail {

// Quantile rank index chosen so that "the (1-alpha) band excludes zero
// somewhere" coincides exactly with "bayes_p < alpha" under the counting
// definition below.
inline int band_quantile_index(int T, double alpha) {
  int idx = T - static_cast<int>(std::ceil(alpha * T));
  return std::min(std::max(idx, 0), T - 1);
}

}  // namespace band_detail

// Simultaneous band via the max standardized absolute deviation statistic:
// m_t = max_d |curve_t(d) - mean(d)| / sd(d), with zero-sd doses contributing
// zero; the band is mean +- q * sd with q the empirical (1-alpha) quantile of
// {m_t}.
struct BandResult {
  Vector mean, sd, lo, hi;
  double q = 0.0;
  std::vector<double> max_stats;  // m_t per draw
};

inline BandResult simultaneous_band(const std::vector<Vector>& curves,
                                    double alpha) {
  const int T = static_cast<int>(curves.size());
  require(T >= 1, "simultaneous_band: no draws");
  const int D = static_cast<int>(curves[0].size());
  BandResult out;
  out.mean = Vector::Zero(D);
  for (const auto& c : curves) out.mean += c;
  out.mean /= T;
  out.sd = Vector::Zero(D);
  for (const auto& c : curves) out.sd += (c - out.mean).cwiseAbs2();
  out.sd = (out.sd / T).cwiseSqrt();
  out.max_stats.reserve(static_cast<size_t>(T));
  for (const auto& c : curves) {
    double m = 0.0;
    for (int d = 0; d < D; ++d) {
      if (out.sd[d] <= 0.0) continue;
      m = std::max(m, std::abs(c[d] - out.mean[d]) / out.sd[d]);
    }
    out.max_stats.push_back(m);
  }
  std::vector<double> sorted = out.max_stats;
  std::sort(sorted.begin(), sorted.end());
  out.q = sorted[static_cast<size_t>(band_detail::band_quantile_index(T, alpha))];
  out.lo = out.mean - out.q * out.sd;
  out.hi = out.mean + out.q * out.sd;
  return out;
}

// Global Bayesian p-value: the smallest alpha at which the (1-alpha)
// simultaneous mean band excludes zero somewhere, computed as the proportion
// of draws whose max statistic is at least the max standardized deviation of
// the zero function from the mean.
inline std::pair<double, Direction> bayes_p_value(const std::vector<Vector>& curves,
                                                  double alpha = 0.05) {
  const int T = static_cast<int>(curves.size());
  require(T >= 2, "bayes_p_value needs at least two draws");
  BandResult band = simultaneous_band(curves, alpha);
  const int D = static_cast<int>(band.mean.size());
  double m0 = 0.0;
  for (int d = 0; d < D; ++d) {
    if (band.sd[d] <= 0.0) continue;
    m0 = std::max(m0, std::abs(band.mean[d]) / band.sd[d]);
  }
  int cnt = 0;
  for (double m : band.max_stats)
    if (m >= m0) ++cnt;
  double p = static_cast<double>(cnt) / T;
  // A zero-spread dose with nonzero mean excludes zero at every level.
  for (int d = 0; d < D; ++d)
    if (band.sd[d] <= 0.0 && band.mean[d] != 0.0) {
      p = 0.0;
      break;
    }

  Direction dir = Direction::None;
  bool above = false, below = false;
  for (int d = 0; d < D; ++d) {
    if (band.lo[d] > 0.0) above = true;
    if (band.hi[d] < 0.0) below = true;
  }
  if (above && below) dir = Direction::Mixed;
  else if (above) dir = Direction::Positive;
  else if (below) dir = Direction::Negative;
  return {p, dir};
}

// AC50: smallest dose (linearly interpolated) at which the curve first
// reaches half its maximum, absent when the maximum is non-positive.
inline std::optional<double> ac50(const Vector& curve, const Vector& doses) {
  const int D = static_cast<int>(curve.size());
  require(D == doses.size() && D >= 1, "ac50: size mismatch");
  double maxv = curve.maxCoeff();
  if (maxv <= 0.0) return std::nullopt;
  double target = 0.5 * maxv;
  if (curve[0] >= target) return doses[0];
  for (int d = 1; d < D; ++d) {
    if (curve[d] >= target) {
      double y0 = curve[d - 1], y1 = curve[d];
      double frac = (target - y0) / (y1 - y0);
      return doses[d - 1] + frac * (doses[d] - doses[d - 1]);
    }
  }
  return std::nullopt;  // unreachable: maxv >= target somewhere
}

// Per-draw predicted curves for one item in original response units.
inline std::vector<Vector> item_curves(const PosteriorDraws& draws, int item) {
  std::vector<Vector> out;
  out.reserve(static_cast<size_t>(draws.n_draws()));
  for (int t = 0; t < draws.n_draws(); ++t) {
    Vector c = draws.muY[static_cast<size_t>(t)] +
               draws.Lambda[static_cast<size_t>(t)] *
                   draws.Eta[static_cast<size_t>(t)].col(item);
    out.push_back(c / draws.y_scale);
  }
  return out;
}

inline std::vector<CurveSummary> predict_curves(const PosteriorDraws& draws,
                                                const Dataset& ds,
                                                double alpha = 0.05,
                                                std::uint64_t noise_seed = 0x5eed) {
  require(draws.n_draws() >= 1, "predict_curves: zero draws");
  require(ds.n_items() == static_cast<int>(draws.items.size()),
          "predict_curves: dataset does not match draws");
  const int D = static_cast<int>(draws.doses.size());
  std::vector<CurveSummary> out;
  out.reserve(static_cast<size_t>(ds.n_items()));
  for (int i = 0; i < ds.n_items(); ++i) {
    Rng rng(stream_seed(noise_seed, static_cast<std::uint64_t>(i)));
    auto curves = item_curves(draws, i);
    CurveSummary cs;
    cs.item_id = draws.items[static_cast<size_t>(i)];
    cs.doses = draws.doses;
    cs.is_holdout = draws.holdout[static_cast<size_t>(i)];
    cs.alpha = alpha;

    BandResult mean_band = simultaneous_band(curves, alpha);
    cs.mean_curve = mean_band.mean;
    cs.mean_band_lo = mean_band.lo;
    cs.mean_band_hi = mean_band.hi;

    // Predictive draws add observation noise (rescaled to original units).
    std::vector<Vector> noisy = curves;
    for (int t = 0; t < draws.n_draws(); ++t) {
      double sd = std::sqrt(draws.sigmaY2[static_cast<size_t>(t)]) / draws.y_scale;
      for (int d = 0; d < D; ++d) noisy[static_cast<size_t>(t)][d] += sd * rng.normal();
    }
    BandResult data_band = simultaneous_band(noisy, alpha);
    // The predictive band logically contains the mean band; enforce the
    // containment pointwise against quantile-rank tie effects.
    cs.data_band_lo = data_band.lo.cwiseMin(cs.mean_band_lo);
    cs.data_band_hi = data_band.hi.cwiseMax(cs.mean_band_hi);

    auto [p, dir] = bayes_p_value(curves, alpha);
    cs.bayes_p = p;
    cs.direction = dir;
    cs.active = p < alpha;

    for (const auto& c : curves) {
      auto a = ac50(c, draws.doses);
      if (a) cs.ac50_samples.push_back(*a);
    }
    out.push_back(std::move(cs));
  }
  return out;
}

// Draws are self-contained (items, holdout flags, dose grid, scale), so
// summaries can also be produced from a saved draws directory alone.
inline std::vector<CurveSummary> predict_curves(const PosteriorDraws& draws,
                                                double alpha = 0.05,
                                                std::uint64_t noise_seed = 0x5eed) {
  Dataset shim;
  shim.items = draws.items;
  shim.holdout = draws.holdout;
  shim.obs.resize(draws.items.size());
  shim.holdout_obs.resize(draws.items.size());
  shim.doses = draws.doses;
  shim.X = Matrix::Zero(1, static_cast<int>(draws.items.size()));
  shim.kinds = {FeatureKind::Continuous};
  shim.feature_ids = {"_"};
  shim.y_scale = draws.y_scale;
  return predict_curves(draws, shim, alpha, noise_seed);
}

// Column-level summaries and the shrinkage-based truncation diagnostics:
// K is adequate when min_k 1/mean(tau_k) < 0.01, likewise J via omega.
struct ComponentSummaries {
  Matrix lambda_mean;                 // D x K
  std::vector<BandResult> lambda_bands;
  Matrix theta_mean;                  // S x K
  Matrix lambda_gram_mean;            // mean of Lambda Lambda'
  Matrix theta_gram_mean;             // mean of Theta Theta'
  Vector inv_tau;                     // 1 / mean(tau_k)
  Vector inv_omega;                   // 1 / mean(omega_j)
  Vector inv_tau_sorted, inv_omega_sorted;
  bool k_adequate = false, j_adequate = false;
  double sigmaY2_mean = 0.0;
  Vector sigmaX2_mean;
};

inline ComponentSummaries component_summaries(const PosteriorDraws& draws,
                                              double alpha = 0.05) {
  const int T = draws.n_draws();
  require(T >= 1, "component_summaries: zero draws");
  const int D = static_cast<int>(draws.Lambda[0].rows());
  const int K = static_cast<int>(draws.Lambda[0].cols());
  const int S = static_cast<int>(draws.Theta[0].rows());
  const int J = static_cast<int>(draws.omega[0].size());
  ComponentSummaries cs;
  cs.lambda_mean = Matrix::Zero(D, K);
  cs.theta_mean = Matrix::Zero(S, K);
  cs.lambda_gram_mean = Matrix::Zero(D, D);
  cs.theta_gram_mean = Matrix::Zero(S, S);
  Vector tau_mean = Vector::Zero(K), omega_mean = Vector::Zero(std::max(J, 1));
  cs.sigmaX2_mean = Vector::Zero(S);
  for (int t = 0; t < T; ++t) {
    cs.lambda_mean += draws.Lambda[static_cast<size_t>(t)];
    cs.theta_mean += draws.Theta[static_cast<size_t>(t)];
    cs.lambda_gram_mean += draws.Lambda[static_cast<size_t>(t)] *
                           draws.Lambda[static_cast<size_t>(t)].transpose();
    cs.theta_gram_mean += draws.Theta[static_cast<size_t>(t)] *
                          draws.Theta[static_cast<size_t>(t)].transpose();
    tau_mean += draws.tau[static_cast<size_t>(t)];
    if (J > 0) omega_mean.head(J) += draws.omega[static_cast<size_t>(t)];
    cs.sigmaY2_mean += draws.sigmaY2[static_cast<size_t>(t)];
    cs.sigmaX2_mean += draws.sigmaX2[static_cast<size_t>(t)];
  }
  cs.lambda_mean /= T;
  cs.theta_mean /= T;
  cs.lambda_gram_mean /= T;
  cs.theta_gram_mean /= T;
  tau_mean /= T;
  omega_mean /= T;
  cs.sigmaY2_mean /= T;
  cs.sigmaX2_mean /= T;

  for (int k = 0; k < K; ++k) {
    std::vector<Vector> cols;
    cols.reserve(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t)
      cols.push_back(draws.Lambda[static_cast<size_t>(t)].col(k));
    cs.lambda_bands.push_back(simultaneous_band(cols, alpha));
  }

  cs.inv_tau = tau_mean.cwiseInverse();
  cs.inv_tau_sorted = cs.inv_tau;
  std::sort(cs.inv_tau_sorted.data(), cs.inv_tau_sorted.data() + K);
  cs.k_adequate = cs.inv_tau.minCoeff() < 0.01;
  if (J > 0) {
    cs.inv_omega = omega_mean.head(J).cwiseInverse();
    cs.inv_omega_sorted = cs.inv_omega;
    std::sort(cs.inv_omega_sorted.data(), cs.inv_omega_sorted.data() + J);
    cs.j_adequate = cs.inv_omega.minCoeff() < 0.01;
  } else {
    cs.inv_omega = Vector::Zero(0);
    cs.inv_omega_sorted = cs.inv_omega;
    cs.j_adequate = true;
  }
  return cs;
}

enum class PriorityRule { MaxLowerBand, ExpectedAc50, MaxMean, NearestToActives };

inline PriorityRule parse_priority_rule(const std::string& s) {
  if (s == "max_lower_band") return PriorityRule::MaxLowerBand;
  if (s == "expected_ac50") return PriorityRule::ExpectedAc50;
  if (s == "max_mean") return PriorityRule::MaxMean;
  if (s == "nearest_to_actives") return PriorityRule::NearestToActives;
  throw DataError("unknown priority rule '" + s + "'");
}

struct PriorityEntry {
  std::string item_id;
  double score = 0.0;
};

// Filters to items whose lower simultaneous mean band exceeds zero somewhere
// at level 1-alpha, then ranks by the chosen rule. nearest_scores supplies the
// per-item distance used by nearest_to_actives (smaller ranks first).
inline std::vector<PriorityEntry> prioritize(
    const std::vector<CurveSummary>& summaries, double alpha, PriorityRule rule,
    const std::map<std::string, double>* nearest_scores = nullptr) {
  std::vector<PriorityEntry> out;
  for (const auto& cs : summaries) {
    // Recompute the lower band at the requested alpha only when it matches the
    // summary's alpha; summaries carry bands at their configured level.
    require(cs.alpha == alpha,
            "prioritize: summaries computed at a different alpha");
    double max_lo = cs.mean_band_lo.maxCoeff();
    if (max_lo <= 0.0) continue;
    PriorityEntry e;
    e.item_id = cs.item_id;
    switch (rule) {
      case PriorityRule::MaxLowerBand:
        e.score = max_lo;
        break;
      case PriorityRule::MaxMean:
        e.score = cs.mean_curve.maxCoeff();
        break;
      case PriorityRule::ExpectedAc50: {
        if (cs.ac50_samples.empty()) {
          e.score = std::numeric_limits<double>::infinity();
        } else {
          double sum = 0.0;
          for (double a : cs.ac50_samples) sum += a;
          e.score = sum / static_cast<double>(cs.ac50_samples.size());
        }
        break;
      }
      case PriorityRule::NearestToActives: {
        require(nearest_scores != nullptr,
                "nearest_to_actives needs a distance matrix");
        auto it = nearest_scores->find(cs.item_id);
        e.score = it == nearest_scores->end()
                      ? std::numeric_limits<double>::infinity()
                      : it->second;
        break;
      }
    }
    out.push_back(e);
  }
  bool ascending =
      rule == PriorityRule::ExpectedAc50 || rule == PriorityRule::NearestToActives;
  std::sort(out.begin(), out.end(), [&](const PriorityEntry& a, const PriorityEntry& b) {
    if (a.score != b.score) return ascending ? a.score < b.score : a.score > b.score;
    return a.item_id < b.item_id;
  });
  return out;
}

}  // namespace bs3fa
