#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bs3fa/align.hpp"
#include "bs3fa/common.hpp"
#include "bs3fa/config.hpp"
#include "bs3fa/csv.hpp"
#include "bs3fa/data.hpp"
#include "bs3fa/distance.hpp"
#include "bs3fa/gibbs.hpp"
#include "bs3fa/posterior.hpp"

namespace bs3fa {

using json = nlohmann::json;

struct PreprocessOptions {
  double near_constant_frac = 0.99;
  int count_log_threshold = 10;
  double dose_floor = -std::numeric_limits<double>::infinity();
  bool rescale = true;
};

struct PreprocessResult {
  Dataset ds;
  PreprocessReport report;
};

// filter features -> links -> dose floor -> Frobenius rescale.
inline PreprocessResult preprocess(const Dataset& raw,
                                   const PreprocessOptions& opt = {}) {
  auto [filtered, report] = filter_features(raw, opt.near_constant_frac);
  Dataset linked = apply_links(filtered, opt.count_log_threshold, &report);
  if (std::isfinite(opt.dose_floor))
    linked = filter_doses(linked, opt.dose_floor, &report);
  if (opt.rescale) {
    auto [scaled, c] = rescale_response(linked);
    report.y_scale_factor = c;
    return {std::move(scaled), report};
  }
  return {std::move(linked), report};
}

struct FitResult {
  PosteriorDraws raw;      // as sampled; distance functionals read these
  PosteriorDraws aligned;  // rotation/label/sign resolved
  AlignmentReport align_report;
  std::vector<CurveSummary> curves;
  ComponentSummaries components;
  double alpha = 0.05;
};

inline FitResult fit_model(const Dataset& ds, const Hyperparams& hp,
                           const ChainConfig& cc, double alpha = 0.05,
                           int threads = 0) {
  FitResult fr;
  fr.alpha = alpha;
  fr.raw = run_chains(ds, hp, cc, threads);
  if (fr.raw.n_draws() >= 2) {
    auto [aligned, rep] = align_draws(fr.raw);
    fr.aligned = std::move(aligned);
    fr.align_report = rep;
  } else {
    fr.aligned = fr.raw;
  }
  fr.curves = predict_curves(fr.raw, ds, alpha);
  fr.components = component_summaries(fr.aligned, alpha);
  return fr;
}

// ---------------------------------------------------------------------------
// Draw storage: one directory per run, long-format CSVs per component plus a
// manifest and per-iteration scalar traces.

namespace io {

namespace fs = std::filesystem;

inline void write_matrix_draws(const std::string& path,
                               const std::vector<Matrix>& draws,
                               const std::vector<int>& chain,
                               const std::vector<int>& iter) {
  csv::Writer w(path);
  w.row("chain", "iter", "row", "col", "value");
  for (size_t t = 0; t < draws.size(); ++t)
    for (int c = 0; c < draws[t].cols(); ++c)
      for (int r = 0; r < draws[t].rows(); ++r)
        w.row(chain[t], iter[t], r, c, draws[t](r, c));
}

inline void write_vector_draws(const std::string& path,
                               const std::vector<Vector>& draws,
                               const std::vector<int>& chain,
                               const std::vector<int>& iter) {
  csv::Writer w(path);
  w.row("chain", "iter", "index", "value");
  for (size_t t = 0; t < draws.size(); ++t)
    for (int r = 0; r < draws[t].size(); ++r)
      w.row(chain[t], iter[t], r, draws[t][r]);
}

inline void write_scalar_draws(const std::string& path,
                               const std::vector<double>& draws,
                               const std::vector<int>& chain,
                               const std::vector<int>& iter) {
  csv::Writer w(path);
  w.row("chain", "iter", "value");
  for (size_t t = 0; t < draws.size(); ++t) w.row(chain[t], iter[t], draws[t]);
}

inline void save_draws(const std::string& dir, const PosteriorDraws& d) {
  fs::create_directories(dir);
  write_matrix_draws(dir + "/draws_lambda.csv", d.Lambda, d.chain, d.iter);
  write_matrix_draws(dir + "/draws_theta.csv", d.Theta, d.chain, d.iter);
  write_matrix_draws(dir + "/draws_eta.csv", d.Eta, d.chain, d.iter);
  write_vector_draws(dir + "/draws_tau.csv", d.tau, d.chain, d.iter);
  write_vector_draws(dir + "/draws_omega.csv", d.omega, d.chain, d.iter);
  write_vector_draws(dir + "/draws_sigma_x.csv", d.sigmaX2, d.chain, d.iter);
  write_vector_draws(dir + "/draws_mu_y.csv", d.muY, d.chain, d.iter);
  write_vector_draws(dir + "/draws_mu_z.csv", d.muZ, d.chain, d.iter);
  write_scalar_draws(dir + "/draws_sigma_y.csv", d.sigmaY2, d.chain, d.iter);
  write_scalar_draws(dir + "/draws_phi.csv", d.phi, d.chain, d.iter);
  write_scalar_draws(dir + "/draws_ell.csv", d.ell, d.chain, d.iter);
  {
    csv::Writer w(dir + "/trace.csv");
    w.row("chain", "iter", "sigmaY2", "phi", "ell", "beta2", "inv_tau_min",
          "inv_omega_min");
    for (const auto& tr : d.trace)
      w.row(tr.chain, tr.iter, tr.sigmaY2, tr.phi, tr.ell, tr.beta2,
            tr.inv_tau_min, tr.inv_omega_min);
  }
  {
    csv::Writer w(dir + "/items.csv");
    w.row("index", "item_id", "holdout");
    for (size_t i = 0; i < d.items.size(); ++i)
      w.row(i, d.items[i], d.holdout[i] ? 1 : 0);
  }
  {
    csv::Writer w(dir + "/doses.csv");
    w.row("index", "dose");
    for (int i = 0; i < d.doses.size(); ++i) w.row(i, d.doses[i]);
  }
  json meta;
  meta["y_scale"] = d.y_scale;
  meta["n_draws"] = d.n_draws();
  std::ofstream(dir + "/draws_meta.json") << meta.dump(2) << "\n";
}

inline PosteriorDraws load_draws(const std::string& dir) {
  PosteriorDraws d;
  auto items = csv::read_table(dir + "/items.csv");
  for (const auto& r : items.rows) {
    d.items.push_back(r[1]);
    d.holdout.push_back(r[2] == "1");
  }
  auto doses = csv::read_table(dir + "/doses.csv");
  d.doses.resize(static_cast<int>(doses.rows.size()));
  for (size_t i = 0; i < doses.rows.size(); ++i)
    d.doses[static_cast<int>(i)] = csv::parse_real(doses.rows[i][1], "doses.csv");
  {
    std::ifstream in(dir + "/draws_meta.json");
    require(static_cast<bool>(in), "missing draws_meta.json in " + dir);
    json meta = json::parse(in);
    d.y_scale = meta.at("y_scale").get<double>();
  }

  auto load_mat = [&](const std::string& name, std::vector<Matrix>& out,
                      bool record_ids) {
    auto t = csv::read_table(dir + "/" + name);
    std::map<std::pair<int, int>, std::vector<std::tuple<int, int, double>>> by_draw;
    int maxr = 0, maxc = 0;
    for (const auto& r : t.rows) {
      int ch = static_cast<int>(csv::parse_real(r[0], name));
      int it = static_cast<int>(csv::parse_real(r[1], name));
      int row = static_cast<int>(csv::parse_real(r[2], name));
      int col = static_cast<int>(csv::parse_real(r[3], name));
      double v = csv::parse_real(r[4], name);
      by_draw[{ch, it}].emplace_back(row, col, v);
      maxr = std::max(maxr, row + 1);
      maxc = std::max(maxc, col + 1);
    }
    for (auto& [key, cells] : by_draw) {
      Matrix m = Matrix::Zero(maxr, maxc);
      for (auto& [row, col, v] : cells) m(row, col) = v;
      out.push_back(std::move(m));
      if (record_ids) {
        d.chain.push_back(key.first);
        d.iter.push_back(key.second);
      }
    }
  };
  auto load_vec = [&](const std::string& name, std::vector<Vector>& out) {
    auto t = csv::read_table(dir + "/" + name);
    std::map<std::pair<int, int>, std::vector<std::pair<int, double>>> by_draw;
    int maxr = 0;
    for (const auto& r : t.rows) {
      int ch = static_cast<int>(csv::parse_real(r[0], name));
      int it = static_cast<int>(csv::parse_real(r[1], name));
      int row = static_cast<int>(csv::parse_real(r[2], name));
      by_draw[{ch, it}].emplace_back(row, csv::parse_real(r[3], name));
      maxr = std::max(maxr, row + 1);
    }
    for (auto& [key, cells] : by_draw) {
      Vector v = Vector::Zero(maxr);
      for (auto& [row, val] : cells) v[row] = val;
      out.push_back(std::move(v));
    }
  };
  auto load_scalar = [&](const std::string& name, std::vector<double>& out) {
    auto t = csv::read_table(dir + "/" + name);
    std::map<std::pair<int, int>, double> by_draw;
    for (const auto& r : t.rows) {
      int ch = static_cast<int>(csv::parse_real(r[0], name));
      int it = static_cast<int>(csv::parse_real(r[1], name));
      by_draw[{ch, it}] = csv::parse_real(r[2], name);
    }
    for (auto& [key, v] : by_draw) out.push_back(v);
  };

  load_mat("draws_lambda.csv", d.Lambda, true);
  load_mat("draws_theta.csv", d.Theta, false);
  load_mat("draws_eta.csv", d.Eta, false);
  load_vec("draws_tau.csv", d.tau);
  load_vec("draws_omega.csv", d.omega);
  load_vec("draws_sigma_x.csv", d.sigmaX2);
  load_vec("draws_mu_y.csv", d.muY);
  load_vec("draws_mu_z.csv", d.muZ);
  load_scalar("draws_sigma_y.csv", d.sigmaY2);
  load_scalar("draws_phi.csv", d.phi);
  load_scalar("draws_ell.csv", d.ell);
  require(d.n_draws() > 0, "no draws found in " + dir);
  return d;
}

inline std::uint64_t hash_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot hash missing file: " + path);
  std::uint64_t h = 1469598103934665603ull;
  char buf[65536];
  while (in.read(buf, sizeof buf) || in.gcount() > 0)
    h = fnv1a(buf, static_cast<size_t>(in.gcount()), h);
  return h;
}

// Written atomically (temp file + rename) at run end.
inline void write_manifest(const std::string& dir, const json& manifest) {
  fs::create_directories(dir);
  std::string tmp = dir + "/manifest.json.tmp";
  std::ofstream(tmp) << manifest.dump(2) << "\n";
  fs::rename(tmp, dir + "/manifest.json");
}

inline json curve_summary_json(const CurveSummary& cs) {
  auto vec = [](const Vector& v) {
    return std::vector<double>(v.data(), v.data() + v.size());
  };
  json j;
  j["item_id"] = cs.item_id;
  j["doses"] = vec(cs.doses);
  j["mean_curve"] = vec(cs.mean_curve);
  j["mean_band_lo"] = vec(cs.mean_band_lo);
  j["mean_band_hi"] = vec(cs.mean_band_hi);
  j["data_band_lo"] = vec(cs.data_band_lo);
  j["data_band_hi"] = vec(cs.data_band_hi);
  j["bayes_p"] = cs.bayes_p;
  j["direction"] = direction_name(cs.direction);
  j["ac50_samples"] = cs.ac50_samples;
  j["active"] = cs.active;
  j["holdout"] = cs.is_holdout;
  j["alpha"] = cs.alpha;
  return j;
}

inline void write_summaries(const std::string& path,
                            const std::vector<CurveSummary>& curves) {
  json j = json::array();
  for (const auto& cs : curves) j.push_back(curve_summary_json(cs));
  std::ofstream(path) << j.dump(2) << "\n";
}

inline void write_distance_csv(const std::string& path, const DistanceMatrix& dm) {
  csv::Writer w(path);
  if (dm.has_intervals)
    w.row("item_i", "item_j", "mean", "lo", "hi");
  else
    w.row("item_i", "item_j", "mean");
  const int n = static_cast<int>(dm.items.size());
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      if (dm.has_intervals)
        w.row(dm.items[static_cast<size_t>(i)], dm.items[static_cast<size_t>(j)],
              dm.mean(i, j), dm.lo(i, j), dm.hi(i, j));
      else
        w.row(dm.items[static_cast<size_t>(i)], dm.items[static_cast<size_t>(j)],
              dm.mean(i, j));
    }
}

inline json preprocess_report_json(const PreprocessReport& r) {
  json j;
  j["dropped_zero_variance"] = r.dropped_zero_variance;
  j["dropped_duplicate"] = r.dropped_duplicate;
  j["dropped_near_constant"] = r.dropped_near_constant;
  j["merged_items"] = r.merged_items;
  j["log_transformed_counts"] = r.log_transformed_counts;
  j["y_scale_factor"] = r.y_scale_factor;
  if (std::isfinite(r.dose_floor)) j["dose_floor"] = r.dose_floor;
  j["scaling_stats"] = r.scaling_stats;
  return j;
}

inline json alignment_report_json(const AlignmentReport& r) {
  json j;
  j["pivot_index"] = r.pivot_index;
  j["misalignment"] = r.misalignment;
  j["degenerate"] = r.degenerate;
  return j;
}

}  // namespace io

}  // namespace bs3fa
