#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "bs3fa/common.hpp"
#include "bs3fa/csv.hpp"

namespace bs3fa {

enum class InitMode { RandomSmall, Svd };

struct Hyperparams {
  int K = 8;   // toxicity-relevant factors (upper bound; shrinkage truncates)
  int J = 10;  // feature-only factors; 0 disables the Xi*Nu block

  // Multiplicative gamma process chains, shared Lambda/Theta column shrinkage
  // and Xi column shrinkage respectively. Values > 1 keep the cumulative
  // products stochastically increasing.
  double a1 = 2.1, a2 = 3.1;
  double m1 = 2.1, m2 = 3.1;

  double g_phi = 1.0;    // global GP precision hyperprior Ga(g/2, g/2)
  double g_kappa = 1.0;  // Xi entry precision hyperprior Ga(g/2, g/2)

  // Inverse-gamma noise priors (shape a/2, rate b/2 on the precision).
  double a_sigY = 1.0, b_sigY = 1.0;
  double a_sigX = 1.0, b_sigX = 1.0;

  // Discrete length-scale grid for the squared-exponential kernel; empty means
  // derive log-spaced values between (min positive dose gap)/2 and twice the
  // dose range.
  std::vector<double> ell_grid;
  int ell_grid_size = 100;

  bool center_y = false;  // true fixes mu_y at 0 (data pre-centered)
  bool center_x = true;   // true samples mu_z only for binary/count features

  double gp_jitter = 1e-8;  // added to GP covariance diagonals before factorization

  void validate() const {
    require(K >= 1, "K must be >= 1");
    require(J >= 0, "J must be >= 0");
    require(a1 > 1.0 && a2 > 1.0 && m1 > 1.0 && m2 > 1.0,
            "shrinkage hyperparameters must exceed 1");
    require(g_phi > 0 && g_kappa > 0 && a_sigY > 0 && b_sigY > 0 &&
                a_sigX > 0 && b_sigX > 0,
            "prior hyperparameters must be positive");
    for (double l : ell_grid) require(l > 0.0, "ell grid values must be positive");
    require(ell_grid_size >= 1, "ell_grid_size must be >= 1");
  }
};

struct ChainConfig {
  int n_iter = 4000;
  int burn_in = 2000;
  int thin = 10;
  std::uint64_t seed = 0;
  int n_chains = 2;
  InitMode init = InitMode::Svd;

  void validate() const {
    require(n_iter >= 1 && burn_in >= 0 && burn_in < n_iter,
            "need 0 <= burn_in < n_iter");
    require(thin >= 1, "thin must be >= 1");
    require(n_chains >= 1, "n_chains must be >= 1");
  }
};

inline std::vector<double> make_ell_grid(const Vector& doses, int size) {
  if (doses.size() < 2) return {1.0};
  double min_gap = std::numeric_limits<double>::infinity();
  for (int d = 1; d < doses.size(); ++d)
    min_gap = std::min(min_gap, doses[d] - doses[d - 1]);
  double range = doses[doses.size() - 1] - doses[0];
  double lo = 0.5 * min_gap, hi = 2.0 * range;
  std::vector<double> grid(size);
  if (size == 1) {
    grid[0] = std::sqrt(lo * hi);
    return grid;
  }
  double llo = std::log(lo), lhi = std::log(hi);
  for (int g = 0; g < size; ++g)
    grid[static_cast<size_t>(g)] = std::exp(llo + (lhi - llo) * g / (size - 1));
  return grid;
}

// key = value file with [model], [mcmc], [priors] sections; unknown keys are
// an error, all keys optional.
struct RunConfig {
  Hyperparams hp;
  ChainConfig cc;
  std::map<std::string, std::string> raw;  // echoed into run manifests

  static RunConfig from_file(const std::string& path) {
    RunConfig cfg;
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config file: " + path);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      auto t = csv::trim(line);
      if (t.empty() || t[0] == '#' || t[0] == ';') continue;
      if (t.front() == '[' && t.back() == ']') {
        section = t.substr(1, t.size() - 2);
        require(section == "model" || section == "mcmc" || section == "priors",
                path + ":" + std::to_string(lineno) + ": unknown section [" +
                    section + "]");
        continue;
      }
      auto eq = t.find('=');
      require(eq != std::string::npos,
              path + ":" + std::to_string(lineno) + ": expected key = value");
      auto key = csv::trim(t.substr(0, eq));
      auto val = csv::trim(t.substr(eq + 1));
      cfg.set(section, key, val, path + ":" + std::to_string(lineno));
      cfg.raw[section.empty() ? key : section + "." + key] = val;
    }
    cfg.hp.validate();
    cfg.cc.validate();
    return cfg;
  }

  void set(const std::string& section, const std::string& key,
           const std::string& val, const std::string& ctx) {
    auto as_int = [&] { return static_cast<int>(csv::parse_real(val, ctx)); };
    auto as_real = [&] { return csv::parse_real(val, ctx); };
    auto as_bool = [&] {
      if (val == "true" || val == "1") return true;
      if (val == "false" || val == "0") return false;
      throw DataError(ctx + ": expected true/false for " + key);
    };
    if (section == "model") {
      if (key == "K") hp.K = as_int();
      else if (key == "J") hp.J = as_int();
      else if (key == "center_y") hp.center_y = as_bool();
      else if (key == "center_x") hp.center_x = as_bool();
      else throw DataError(ctx + ": unknown key '" + key + "' in [model]");
      return;
    }
    if (section == "mcmc") {
      if (key == "n_iter") cc.n_iter = as_int();
      else if (key == "burn_in") cc.burn_in = as_int();
      else if (key == "thin") cc.thin = as_int();
      else if (key == "n_chains") cc.n_chains = as_int();
      else if (key == "seed") cc.seed = static_cast<std::uint64_t>(as_real());
      else if (key == "init") {
        if (val == "svd") cc.init = InitMode::Svd;
        else if (val == "random_small") cc.init = InitMode::RandomSmall;
        else throw DataError(ctx + ": init must be svd or random_small");
      } else throw DataError(ctx + ": unknown key '" + key + "' in [mcmc]");
      return;
    }
    if (section == "priors") {
      if (key == "a1") hp.a1 = as_real();
      else if (key == "a2") hp.a2 = as_real();
      else if (key == "m1") hp.m1 = as_real();
      else if (key == "m2") hp.m2 = as_real();
      else if (key == "g_phi") hp.g_phi = as_real();
      else if (key == "g_kappa") hp.g_kappa = as_real();
      else if (key == "a_sigY") hp.a_sigY = as_real();
      else if (key == "b_sigY") hp.b_sigY = as_real();
      else if (key == "a_sigX") hp.a_sigX = as_real();
      else if (key == "b_sigX") hp.b_sigX = as_real();
      else if (key == "ell_grid_size") hp.ell_grid_size = as_int();
      else if (key == "sigY_empirical_var") {
        // Informative noise prior from the variance of low-dose observations:
        // weight w pseudo-observations at variance v.
        double v = as_real();
        require(v > 0.0, ctx + ": sigY_empirical_var must be positive");
        hp.b_sigY = hp.a_sigY * v;
      } else if (key == "sigY_empirical_weight") {
        double w = as_real();
        require(w > 0.0, ctx + ": sigY_empirical_weight must be positive");
        double v = hp.b_sigY / hp.a_sigY;
        hp.a_sigY = w;
        hp.b_sigY = w * v;
      } else throw DataError(ctx + ": unknown key '" + key + "' in [priors]");
      return;
    }
    throw DataError(ctx + ": key '" + key + "' outside any section");
  }
};

}  // namespace bs3fa
