// Command-line front end: fit, predict, distance, summarize, simulate.
// Exit codes: 0 ok, 2 input error, 3 numerical failure.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bs3fa/align.hpp"
#include "bs3fa/config.hpp"
#include "bs3fa/data.hpp"
#include "bs3fa/distance.hpp"
#include "bs3fa/gibbs.hpp"
#include "bs3fa/pipeline.hpp"
#include "bs3fa/posterior.hpp"
#include "bs3fa/simulate.hpp"

namespace fs = std::filesystem;
using namespace bs3fa;

namespace {

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double ms() const {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now() - start)
        .count();
  }
};

json base_manifest(const std::string& command) {
  json m;
  m["command"] = command;
  m["version"] = kVersion;
  return m;
}

std::vector<SimSpec> parse_grid(const std::string& grid, SimFamily family) {
  // "K=1,3;J=0,5" -> cross product of the listed values.
  std::map<std::string, std::vector<double>> axes;
  if (!csv::trim(grid).empty()) {
    for (const auto& part : csv::split_line(grid, ';')) {
      auto eq = part.find('=');
      require(eq != std::string::npos, "bad grid spec '" + part + "'");
      std::string key = csv::trim(part.substr(0, eq));
      for (const auto& v : csv::split_line(part.substr(eq + 1), ','))
        axes[key].push_back(csv::parse_real(v, "grid value for " + key));
    }
  }
  std::vector<SimSpec> specs;
  SimSpec base;
  base.family = family;
  specs.push_back(base);
  for (const auto& [key, values] : axes) {
    std::vector<SimSpec> expanded;
    for (const auto& s : specs)
      for (double v : values) {
        SimSpec t = s;
        int iv = static_cast<int>(v);
        if (key == "K") t.K_true = iv;
        else if (key == "J") t.J_true = iv;
        else if (key == "N") t.N = iv;
        else if (key == "D") t.D = iv;
        else if (key == "S") t.S = iv;
        else if (key == "S_rel") t.S_relevant = iv;
        else if (key == "S_irr") t.S_irrelevant = iv;
        else if (key == "sigmaY") t.sigmaY = v;
        else if (key == "sigmaX") t.sigmaX = v;
        else if (key == "inactive_frac") t.inactive_frac = v;
        else if (key == "holdout_frac") t.holdout_frac = v;
        else throw DataError("unknown grid key '" + key + "'");
        expanded.push_back(t);
      }
    specs = std::move(expanded);
  }
  for (auto& s : specs) s.validate();
  return specs;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BS3FA: partially supervised sparse-and-smooth Bayesian factor model"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  bool seed_set = false;
  int threads = 0;
  app.add_option("--seed", seed, "master seed")->each([&](const std::string&) {
    seed_set = true;
  });
  app.add_option("--threads", threads, "worker threads (default: cores)");

  // ---- fit ----
  auto* fit = app.add_subcommand("fit", "preprocess, run chains, summarize");
  std::string features_path, responses_path, kinds_path, holdout_path, config_path;
  std::string out_dir;
  fit->add_option("--features", features_path, "features.csv")->required();
  fit->add_option("--responses", responses_path, "responses.csv")->required();
  fit->add_option("--kinds", kinds_path, "kinds.csv")->required();
  fit->add_option("--holdout", holdout_path, "holdout.txt (one item id per line)");
  fit->add_option("--config", config_path, "config file ([model]/[mcmc]/[priors])");
  fit->add_option("--out", out_dir, "output directory")->required();
  int opt_k = -1, opt_j = -1, opt_iter = -1, opt_burn = -1, opt_thin = -1,
      opt_chains = -1;
  double alpha = 0.05, dose_floor = -std::numeric_limits<double>::infinity();
  double near_constant_frac = 0.99;
  int count_log_threshold = 10;
  bool no_rescale = false;
  std::string init_mode = "";
  fit->add_option("--k", opt_k, "number of shared factors (upper bound)");
  fit->add_option("--j", opt_j, "number of feature-only factors");
  fit->add_option("--n-iter", opt_iter, "iterations per chain");
  fit->add_option("--burn-in", opt_burn, "burn-in iterations");
  fit->add_option("--thin", opt_thin, "thinning interval");
  fit->add_option("--chains", opt_chains, "number of chains");
  fit->add_option("--init", init_mode, "svd or random_small");
  fit->add_option("--alpha", alpha, "band level (default 0.05)");
  fit->add_option("--dose-floor", dose_floor, "drop observations below this dose");
  fit->add_option("--near-constant-frac", near_constant_frac,
                  "feature filter threshold (default 0.99)");
  fit->add_option("--count-log-threshold", count_log_threshold,
                  "counts with max above this are log-transformed");
  fit->add_flag("--no-rescale", no_rescale, "skip Frobenius response rescaling");

  // ---- predict ----
  auto* predict = app.add_subcommand("predict", "curve summaries from saved draws");
  std::string draws_dir, out_path, plot_dir, priority_rule = "max_lower_band";
  double predict_alpha = 0.05;
  predict->add_option("--draws", draws_dir, "draws directory from fit")->required();
  predict->add_option("--out", out_path, "summaries JSON path")->required();
  predict->add_option("--alpha", predict_alpha, "band level");
  predict->add_option("--plot-data", plot_dir,
                      "also write per-item CSV (dose, mean, lo, hi) here");
  predict->add_option("--priority-rule", priority_rule,
                      "max_lower_band | expected_ac50 | max_mean");

  // ---- distance ----
  auto* distance = app.add_subcommand("distance", "pairwise latent distances");
  std::string dist_draws, dist_out, query;
  int query_k = 3;
  bool intervals = false;
  std::string weight_mode = "tau_weighted";
  distance->add_option("--draws", dist_draws, "draws directory")->required();
  distance->add_option("--out", dist_out, "distance.csv path");
  distance->add_option("--query", query, "item id to look up neighbors for");
  distance->add_option("--k", query_k, "neighbor count for --query");
  distance->add_flag("--intervals", intervals, "emit per-pair credible intervals");
  distance->add_option("--mode", weight_mode, "tau_weighted | unweighted");

  // ---- summarize ----
  auto* summarize = app.add_subcommand("summarize", "component summaries");
  std::string sum_draws, sum_out;
  summarize->add_option("--draws", sum_draws, "draws directory")->required();
  summarize->add_option("--out", sum_out, "components JSON path")->required();

  // ---- simulate ----
  auto* simulate = app.add_subcommand("simulate", "simulation study harness");
  std::string family = "aligned", grid, sim_out;
  int reps = 1;
  int sim_iter = 4000, sim_burn = 2000, sim_thin = 10, sim_chains = 1;
  bool emit_data = false;
  simulate->add_option("--family", family, "aligned | polynomial | toxlike")
      ->required();
  simulate->add_option("--grid", grid, "cells, e.g. \"K=1,3;J=0,5\"");
  simulate->add_option("--reps", reps, "replicates per cell");
  simulate->add_option("--out", sim_out, "output directory")->required();
  simulate->add_option("--n-iter", sim_iter, "iterations per chain");
  simulate->add_option("--burn-in", sim_burn, "burn-in iterations");
  simulate->add_option("--thin", sim_thin, "thinning interval");
  simulate->add_option("--chains", sim_chains, "chains per rep");
  simulate->add_flag("--emit-data", emit_data,
                     "write generated datasets in the standard CSV formats");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*fit) {
      Timer total;
      json manifest = base_manifest("fit");
      manifest["inputs"] = {
          {"features", hex64(io::hash_file(features_path))},
          {"responses", hex64(io::hash_file(responses_path))},
          {"kinds", hex64(io::hash_file(kinds_path))},
      };
      if (!holdout_path.empty())
        manifest["inputs"]["holdout"] = hex64(io::hash_file(holdout_path));

      RunConfig cfg;
      if (!config_path.empty()) {
        cfg = RunConfig::from_file(config_path);
        manifest["inputs"]["config"] = hex64(io::hash_file(config_path));
        manifest["config_file"] = cfg.raw;
      }
      if (opt_k > 0) cfg.hp.K = opt_k;
      if (opt_j >= 0) cfg.hp.J = opt_j;
      if (opt_iter > 0) cfg.cc.n_iter = opt_iter;
      if (opt_burn >= 0) cfg.cc.burn_in = opt_burn;
      if (opt_thin > 0) cfg.cc.thin = opt_thin;
      if (opt_chains > 0) cfg.cc.n_chains = opt_chains;
      if (seed_set) cfg.cc.seed = seed;
      if (!init_mode.empty()) {
        require(init_mode == "svd" || init_mode == "random_small",
                "--init must be svd or random_small");
        cfg.cc.init = init_mode == "svd" ? InitMode::Svd : InitMode::RandomSmall;
      }
      cfg.hp.validate();
      cfg.cc.validate();

      Timer t_pre;
      Dataset raw = load_dataset(features_path, responses_path, kinds_path,
                                 holdout_path);
      PreprocessOptions popt;
      popt.near_constant_frac = near_constant_frac;
      popt.count_log_threshold = count_log_threshold;
      popt.dose_floor = dose_floor;
      popt.rescale = !no_rescale;
      auto pre = preprocess(raw, popt);
      double pre_ms = t_pre.ms();

      Timer t_fit;
      FitResult fr = fit_model(pre.ds, cfg.hp, cfg.cc, alpha, threads);
      double fit_ms = t_fit.ms();

      Timer t_out;
      fs::create_directories(out_dir);
      io::save_draws(out_dir + "/draws", fr.raw);
      io::write_summaries(out_dir + "/summaries.json", fr.curves);
      {
        auto ranked = prioritize(fr.curves, alpha, PriorityRule::MaxLowerBand);
        csv::Writer w(out_dir + "/priority.csv");
        w.row("rank", "item_id", "rule", "score");
        for (size_t r = 0; r < ranked.size(); ++r)
          w.row(r + 1, ranked[r].item_id, "max_lower_band", ranked[r].score);
      }
      double out_ms = t_out.ms();

      manifest["hyperparams"] = {
          {"K", cfg.hp.K},         {"J", cfg.hp.J},
          {"a1", cfg.hp.a1},       {"a2", cfg.hp.a2},
          {"m1", cfg.hp.m1},       {"m2", cfg.hp.m2},
          {"g_phi", cfg.hp.g_phi}, {"g_kappa", cfg.hp.g_kappa},
          {"a_sigY", cfg.hp.a_sigY}, {"b_sigY", cfg.hp.b_sigY},
          {"a_sigX", cfg.hp.a_sigX}, {"b_sigX", cfg.hp.b_sigX},
          {"ell_grid_size", cfg.hp.ell_grid_size},
          {"center_y", cfg.hp.center_y}, {"center_x", cfg.hp.center_x}};
      manifest["mcmc"] = {{"n_iter", cfg.cc.n_iter},
                          {"burn_in", cfg.cc.burn_in},
                          {"thin", cfg.cc.thin},
                          {"n_chains", cfg.cc.n_chains},
                          {"seed", cfg.cc.seed},
                          {"init", cfg.cc.init == InitMode::Svd ? "svd"
                                                                : "random_small"}};
      manifest["alpha"] = alpha;
      manifest["preprocess"] = io::preprocess_report_json(pre.report);
      manifest["alignment"] = io::alignment_report_json(fr.align_report);
      manifest["timings_ms"] = {{"preprocess", pre_ms},
                                {"sampling", fit_ms},
                                {"outputs", out_ms},
                                {"total", total.ms()}};
      manifest["n_draws"] = fr.raw.n_draws();
      io::write_manifest(out_dir, manifest);
      std::cout << "fit complete: " << fr.raw.n_draws() << " draws -> " << out_dir
                << "\n";
      return 0;
    }

    if (*predict) {
      PosteriorDraws draws = io::load_draws(draws_dir);
      auto curves = predict_curves(draws, predict_alpha);
      io::write_summaries(out_path, curves);
      auto rule = parse_priority_rule(priority_rule);
      auto ranked = prioritize(curves, predict_alpha, rule);
      fs::path ppath = fs::path(out_path).parent_path() / "priority.csv";
      csv::Writer w(ppath.string());
      w.row("rank", "item_id", "rule", "score");
      for (size_t r = 0; r < ranked.size(); ++r)
        w.row(r + 1, ranked[r].item_id, priority_rule, ranked[r].score);
      if (!plot_dir.empty()) {
        fs::create_directories(plot_dir);
        for (const auto& cs : curves) {
          csv::Writer pw(plot_dir + "/" + cs.item_id + ".csv");
          pw.row("dose", "mean", "lo", "hi", "data_lo", "data_hi");
          for (int d = 0; d < cs.doses.size(); ++d)
            pw.row(cs.doses[d], cs.mean_curve[d], cs.mean_band_lo[d],
                   cs.mean_band_hi[d], cs.data_band_lo[d], cs.data_band_hi[d]);
        }
      }
      std::cout << "wrote " << curves.size() << " curve summaries\n";
      return 0;
    }

    if (*distance) {
      PosteriorDraws draws = io::load_draws(dist_draws);
      WeightMode mode;
      if (weight_mode == "tau_weighted") mode = WeightMode::TauWeighted;
      else if (weight_mode == "unweighted") mode = WeightMode::Unweighted;
      else throw DataError("--mode must be tau_weighted or unweighted");
      DistanceMatrix dm = pairwise_distance(draws, mode, {}, intervals);
      if (!dist_out.empty()) io::write_distance_csv(dist_out, dm);
      if (!query.empty()) {
        auto nn = neighbors(dm, query, query_k);
        json j;
        j["query"] = query;
        j["neighbors"] = json::array();
        for (const auto& [id, dist] : nn)
          j["neighbors"].push_back({{"item_id", id}, {"distance", dist}});
        std::cout << j.dump(2) << "\n";
      }
      return 0;
    }

    if (*summarize) {
      PosteriorDraws raw = io::load_draws(sum_draws);
      auto [aligned, arep] = align_draws(raw);
      auto comps = component_summaries(aligned);
      json j;
      auto vec = [](const Vector& v) {
        return std::vector<double>(v.data(), v.data() + v.size());
      };
      j["inv_tau"] = vec(comps.inv_tau);
      j["inv_tau_sorted"] = vec(comps.inv_tau_sorted);
      j["inv_omega"] = vec(comps.inv_omega);
      j["inv_omega_sorted"] = vec(comps.inv_omega_sorted);
      j["k_adequate"] = comps.k_adequate;
      j["j_adequate"] = comps.j_adequate;
      j["sigmaY2_mean"] = comps.sigmaY2_mean;
      j["alignment"] = io::alignment_report_json(arep);
      j["lambda_mean"] = json::array();
      for (int k = 0; k < comps.lambda_mean.cols(); ++k) {
        json col;
        col["mean"] = vec(comps.lambda_mean.col(k));
        col["lo"] = vec(comps.lambda_bands[static_cast<size_t>(k)].lo);
        col["hi"] = vec(comps.lambda_bands[static_cast<size_t>(k)].hi);
        j["lambda_mean"].push_back(col);
      }
      std::ofstream(sum_out) << j.dump(2) << "\n";
      std::cout << "K adequate: " << (comps.k_adequate ? "yes" : "no")
                << ", J adequate: " << (comps.j_adequate ? "yes" : "no") << "\n";
      return 0;
    }

    if (*simulate) {
      fs::create_directories(sim_out);
      if (family == "toxlike") {
        auto [ds, truth] = gen_toxlike(seed);
        write_dataset_csvs(sim_out, ds);
        std::cout << "wrote toxlike fixture (" << ds.n_items() << " items, "
                  << ds.n_features() << " features) to " << sim_out << "\n";
        return 0;
      }
      SimFamily fam;
      if (family == "aligned") fam = SimFamily::Aligned;
      else if (family == "polynomial") fam = SimFamily::Polynomial;
      else throw DataError("unknown family '" + family + "'");
      auto specs = parse_grid(grid, fam);
      require(reps >= 1, "--reps must be >= 1");

      StudyOptions opt;
      opt.cc.n_iter = sim_iter;
      opt.cc.burn_in = sim_burn;
      opt.cc.thin = sim_thin;
      opt.cc.n_chains = sim_chains;
      opt.threads = threads;
      auto rows = run_study(specs, reps, opt, seed);
      write_study_csv(sim_out + "/simstudy.csv", rows);
      write_study_summary_csv(sim_out + "/simstudy_summary.csv", rows);
      for (size_t c = 0; c < specs.size(); ++c) {
        json m = base_manifest("simulate");
        m["cell"] = {{"family", family_name(specs[c].family)},
                     {"K", specs[c].K_true},
                     {"J", specs[c].J_true},
                     {"S_rel", specs[c].S_relevant},
                     {"S_irr", specs[c].S_irrelevant},
                     {"N", specs[c].N},
                     {"D", specs[c].D},
                     {"S", specs[c].S}};
        m["reps"] = reps;
        m["seed"] = seed;
        io::write_manifest(sim_out + "/cell_" + std::to_string(c), m);
        if (emit_data) {
          auto [ds, truth] =
              specs[c].family == SimFamily::Aligned
                  ? gen_aligned(specs[c], stream_seed(seed, 0x51ed))
                  : gen_polynomial(specs[c], stream_seed(seed, 0x51ed));
          write_dataset_csvs(sim_out + "/cell_" + std::to_string(c) + "/data", ds);
        }
      }
      int failures = 0;
      for (const auto& r : rows)
        if (!r.error.empty()) {
          ++failures;
          std::cerr << "cell failure (rep " << r.rep << "): " << r.error << "\n";
        }
      std::cout << "study complete: " << rows.size() - failures << "/"
                << rows.size() << " reps ok -> " << sim_out << "\n";
      return 0;
    }
  } catch (const DataError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
