#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "bs3fa/common.hpp"
#include "bs3fa/csv.hpp"

namespace bs3fa {

enum class FeatureKind { Continuous, LogContinuous, Binary, Count };

inline std::string kind_name(FeatureKind k) {
  switch (k) {
    case FeatureKind::Continuous: return "continuous";
    case FeatureKind::LogContinuous: return "log_continuous";
    case FeatureKind::Binary: return "binary";
    case FeatureKind::Count: return "count";
  }
  return "?";
}

inline FeatureKind parse_kind(const std::string& s) {
  if (s == "continuous") return FeatureKind::Continuous;
  if (s == "log_continuous") return FeatureKind::LogContinuous;
  if (s == "binary") return FeatureKind::Binary;
  if (s == "count") return FeatureKind::Count;
  throw DataError("unknown feature kind '" + s + "'");
}

struct ResponseObs {
  double dose = 0.0;
  double value = 0.0;
};

// Counters accumulated across the preprocessing pipeline.
struct PreprocessReport {
  int dropped_zero_variance = 0;
  int dropped_duplicate = 0;
  int dropped_near_constant = 0;
  int merged_items = 0;
  std::vector<std::string> log_transformed_counts;
  double y_scale_factor = 1.0;
  double dose_floor = -std::numeric_limits<double>::infinity();
  // Centering/scaling statistics use all items, holdout included; features are
  // available for holdout items by design.
  std::string scaling_stats = "all_items";
};

// Canonical internal representation. Columns of X are items. Responses are
// stored long-form per item; `obs` feeds the sampler while `holdout_obs`
// holds withheld curves for evaluation only. O and Ysum are replicate counts
// and sums over `obs` on the current dose grid. Immutable once built: every
// pipeline stage returns a fresh copy.
struct Dataset {
  std::vector<std::string> items;
  std::vector<std::string> feature_ids;
  Matrix X;  // S x N
  std::vector<FeatureKind> kinds;
  std::vector<std::vector<ResponseObs>> obs;          // sampler-visible
  std::vector<std::vector<ResponseObs>> holdout_obs;  // withheld curves
  std::vector<bool> holdout;

  Vector doses;  // strictly increasing unique dose values
  Matrix O;      // D x N replicate counts over `obs`
  Matrix Ysum;   // D x N replicate sums over `obs`

  Vector feature_center, feature_scale;  // identity until apply_links
  double y_scale = 1.0;
  bool links_applied = false;
  int merged_items = 0;

  int n_items() const { return static_cast<int>(items.size()); }
  int n_features() const { return static_cast<int>(feature_ids.size()); }
  int n_doses() const { return static_cast<int>(doses.size()); }

  int dose_index(double d) const {
    for (int i = 0; i < doses.size(); ++i)
      if (doses[i] == d) return i;
    throw DataError("dose not on grid");
  }

  // Recomputes the dose grid (union over training and withheld observations,
  // so predictions exist wherever evaluation needs them) and the O/Ysum
  // replicate summaries over training observations.
  void rebuild_dose_grid() {
    std::set<double> uniq;
    for (const auto& lst : obs)
      for (const auto& o : lst) uniq.insert(o.dose);
    for (const auto& lst : holdout_obs)
      for (const auto& o : lst) uniq.insert(o.dose);
    doses.resize(static_cast<int>(uniq.size()));
    int d = 0;
    for (double v : uniq) doses[d++] = v;
    const int D = n_doses(), N = n_items();
    O = Matrix::Zero(D, N);
    Ysum = Matrix::Zero(D, N);
    std::map<double, int> idx;
    for (int i = 0; i < D; ++i) idx[doses[i]] = i;
    for (int i = 0; i < N; ++i) {
      for (const auto& o : obs[i]) {
        int di = idx.at(o.dose);
        O(di, i) += 1.0;
        Ysum(di, i) += o.value;
      }
    }
  }

  void validate() const {
    const int N = n_items(), S = n_features();
    require(static_cast<int>(kinds.size()) == S, "kinds length mismatch");
    require(X.rows() == S && X.cols() == N, "X shape mismatch");
    require(static_cast<int>(obs.size()) == N &&
                static_cast<int>(holdout_obs.size()) == N &&
                static_cast<int>(holdout.size()) == N,
            "per-item list length mismatch");
    for (int d = 1; d < doses.size(); ++d)
      require(doses[d] > doses[d - 1], "doses not strictly increasing");
    for (int i = 0; i < N; ++i)
      require(!holdout[i] || obs[i].empty(), "holdout item has sampler-visible obs");
    for (int s = 0; s < S; ++s) {
      for (int i = 0; i < N; ++i) {
        double v = X(s, i);
        if (links_applied && kinds[s] != FeatureKind::Binary &&
            kinds[s] != FeatureKind::Count)
          continue;  // transformed continuous values are unconstrained
        switch (kinds[s]) {
          case FeatureKind::Binary:
            require(v == 0.0 || v == 1.0,
                    "binary feature " + feature_ids[s] + " has value " +
                        std::to_string(v) + " for item " + items[i]);
            break;
          case FeatureKind::Count:
            require(v >= 0.0 && v == std::floor(v),
                    "count feature " + feature_ids[s] + " has value " +
                        std::to_string(v) + " for item " + items[i]);
            break;
          case FeatureKind::LogContinuous:
            require(v > 0.0, "log_continuous feature " + feature_ids[s] +
                                 " has non-positive value for item " + items[i]);
            break;
          default:
            break;
        }
      }
    }
  }
};

namespace detail {

// Merge items whose raw feature columns match exactly; the surviving id is the
// lexicographically first member and curve observations are pooled as multiply
// observed curves. An item stays held out only if every member was held out.
inline void merge_identical_items(Dataset& ds) {
  const int N = ds.n_items();
  std::map<std::vector<double>, int> seen;  // column bytes -> surviving index
  std::vector<int> keep;
  std::vector<int> owner(N, -1);
  for (int i = 0; i < N; ++i) {
    std::vector<double> key(ds.X.col(i).data(), ds.X.col(i).data() + ds.X.rows());
    auto it = seen.find(key);
    if (it == seen.end()) {
      seen[key] = i;
      owner[i] = i;
      keep.push_back(i);
    } else {
      owner[i] = it->second;
      ++ds.merged_items;
    }
  }
  if (static_cast<int>(keep.size()) == N) return;
  // Pool observations and resolve ids/holdout per group.
  std::vector<std::string> gid(N);
  for (int i = 0; i < N; ++i) gid[i] = ds.items[i];
  for (int i = 0; i < N; ++i) {
    int o = owner[i];
    if (o == i) continue;
    gid[o] = std::min(gid[o], ds.items[i]);
    for (auto& ob : ds.obs[i]) ds.obs[o].push_back(ob);
    for (auto& ob : ds.holdout_obs[i]) ds.holdout_obs[o].push_back(ob);
    ds.holdout[o] = ds.holdout[o] && ds.holdout[i];
  }
  Dataset out = ds;
  out.items.clear();
  out.obs.clear();
  out.holdout_obs.clear();
  out.holdout.clear();
  out.X.resize(ds.X.rows(), static_cast<int>(keep.size()));
  int j = 0;
  for (int i : keep) {
    out.items.push_back(gid[i]);
    out.obs.push_back(ds.obs[i]);
    out.holdout_obs.push_back(ds.holdout_obs[i]);
    out.holdout.push_back(ds.holdout[i]);
    out.X.col(j++) = ds.X.col(i);
  }
  // A merged group that ends up non-holdout must expose pooled obs to the
  // sampler; move any withheld curves of absorbed members accordingly.
  for (int i = 0; i < out.n_items(); ++i) {
    if (!out.holdout[i] && !out.holdout_obs[i].empty()) {
      for (auto& ob : out.holdout_obs[i]) out.obs[i].push_back(ob);
      out.holdout_obs[i].clear();
    }
    if (out.holdout[i] && !out.obs[i].empty()) {
      for (auto& ob : out.obs[i]) out.holdout_obs[i].push_back(ob);
      out.obs[i].clear();
    }
  }
  ds = std::move(out);
}

}  // namespace detail

inline Dataset load_dataset(const std::string& features_path,
                            const std::string& responses_path,
                            const std::string& kinds_path,
                            const std::string& holdout_path = "") {
  Dataset ds;

  auto kt = csv::read_table(kinds_path);
  require(kt.header.size() == 2 && kt.header[0] == "feature_id" &&
              kt.header[1] == "kind",
          kinds_path + ": expected header feature_id,kind");
  std::map<std::string, FeatureKind> kind_of;
  for (const auto& r : kt.rows) {
    auto id = csv::trim(r[0]);
    require(!kind_of.count(id), kinds_path + ": duplicate feature id " + id);
    kind_of[id] = parse_kind(csv::trim(r[1]));
  }

  auto ft = csv::read_table(features_path);
  require(ft.header.size() >= 2 && ft.header[0] == "item_id",
          features_path + ": expected header item_id,<features...>");
  const int S = static_cast<int>(ft.header.size()) - 1;
  for (int s = 0; s < S; ++s) {
    auto id = csv::trim(ft.header[s + 1]);
    require(kind_of.count(id) > 0, "feature " + id + " missing from kinds file");
    ds.feature_ids.push_back(id);
    ds.kinds.push_back(kind_of[id]);
  }
  const int N = static_cast<int>(ft.rows.size());
  require(N > 0, features_path + ": no items");
  ds.X.resize(S, N);
  std::map<std::string, int> item_index;
  for (int i = 0; i < N; ++i) {
    auto id = csv::trim(ft.rows[i][0]);
    require(!item_index.count(id),
            features_path + ": duplicate (item,feature) cells for item " + id);
    item_index[id] = i;
    ds.items.push_back(id);
    for (int s = 0; s < S; ++s)
      ds.X(s, i) = csv::parse_real(ft.rows[i][s + 1],
                                   "feature " + ds.feature_ids[s] + ", item " + id);
  }
  ds.obs.resize(N);
  ds.holdout_obs.resize(N);
  ds.holdout.assign(N, false);

  if (!holdout_path.empty()) {
    for (const auto& id : csv::read_lines(holdout_path)) {
      auto it = item_index.find(id);
      require(it != item_index.end(), "holdout file names unknown item " + id);
      ds.holdout[it->second] = true;
    }
  }

  auto rt = csv::read_table(responses_path);
  require(rt.header.size() == 3 && rt.header[0] == "item_id" &&
              rt.header[1] == "dose" && rt.header[2] == "response",
          responses_path + ": expected header item_id,dose,response");
  for (const auto& r : rt.rows) {
    auto id = csv::trim(r[0]);
    auto it = item_index.find(id);
    require(it != item_index.end(), "unknown item '" + id + "' in responses file");
    ResponseObs o;
    o.dose = csv::parse_real(r[1], "dose for item " + id);
    o.value = csv::parse_real(r[2], "response for item " + id);
    require(std::isfinite(o.dose) && std::isfinite(o.value),
            "non-finite response row for item " + id);
    int i = it->second;
    if (ds.holdout[i])
      ds.holdout_obs[i].push_back(o);
    else
      ds.obs[i].push_back(o);
  }

  ds.feature_center = Vector::Zero(S);
  ds.feature_scale = Vector::Ones(S);
  detail::merge_identical_items(ds);
  ds.rebuild_dose_grid();
  ds.validate();
  return ds;
}

// Drops zero-variance features, exact duplicates of an earlier kept feature
// row, and features where more than `near_constant_frac` of items share one
// value.
inline std::pair<Dataset, PreprocessReport> filter_features(
    const Dataset& ds, double near_constant_frac = 0.99) {
  PreprocessReport rep;
  rep.merged_items = ds.merged_items;
  const int S = ds.n_features(), N = ds.n_items();
  std::vector<int> keep;
  std::set<std::vector<double>> seen_rows;
  for (int s = 0; s < S; ++s) {
    std::vector<double> row(N);
    for (int i = 0; i < N; ++i) row[static_cast<size_t>(i)] = ds.X(s, i);
    bool constant = std::all_of(row.begin(), row.end(),
                                [&](double v) { return v == row[0]; });
    if (constant) {
      ++rep.dropped_zero_variance;
      continue;
    }
    if (!seen_rows.insert(row).second) {
      ++rep.dropped_duplicate;
      continue;
    }
    std::map<double, int> counts;
    int maxc = 0;
    for (double v : row) maxc = std::max(maxc, ++counts[v]);
    if (static_cast<double>(maxc) > near_constant_frac * N) {
      ++rep.dropped_near_constant;
      continue;
    }
    keep.push_back(s);
  }
  require(!keep.empty(), "all features removed by filtering");
  Dataset out = ds;
  out.feature_ids.clear();
  out.kinds.clear();
  out.X.resize(static_cast<int>(keep.size()), N);
  out.feature_center.resize(static_cast<int>(keep.size()));
  out.feature_scale.resize(static_cast<int>(keep.size()));
  int j = 0;
  for (int s : keep) {
    out.feature_ids.push_back(ds.feature_ids[s]);
    out.kinds.push_back(ds.kinds[s]);
    out.X.row(j) = ds.X.row(s);
    out.feature_center[j] = ds.feature_center[s];
    out.feature_scale[j] = ds.feature_scale[s];
    ++j;
  }
  return {std::move(out), rep};
}

// Centers/scales continuous features to mean 0, sample variance 1 (log first
// for log_continuous). Count features whose maximum exceeds the threshold are
// log(1+x)-transformed and re-tagged log_continuous; remaining count and
// binary features pass through untouched for the latent-Z augmentation.
inline Dataset apply_links(const Dataset& ds, int count_log_threshold = 10,
                           PreprocessReport* rep = nullptr) {
  Dataset out = ds;
  const int S = ds.n_features(), N = ds.n_items();
  require(N >= 2, "apply_links needs at least two items");
  for (int s = 0; s < S; ++s) {
    FeatureKind k = out.kinds[s];
    if (k == FeatureKind::Count) {
      double maxv = out.X.row(s).maxCoeff();
      if (maxv > count_log_threshold) {
        for (int i = 0; i < N; ++i) out.X(s, i) = std::log1p(out.X(s, i));
        out.kinds[s] = FeatureKind::LogContinuous;
        k = FeatureKind::LogContinuous;
        if (rep) rep->log_transformed_counts.push_back(out.feature_ids[s]);
        // already on log scale; fall through to center/scale
        double mean = out.X.row(s).mean();
        double var = (out.X.row(s).array() - mean).square().sum() / (N - 1);
        require(var > 0.0, "feature " + out.feature_ids[s] + " constant after log");
        double sd = std::sqrt(var);
        out.X.row(s) = (out.X.row(s).array() - mean) / sd;
        out.feature_center[s] = mean;
        out.feature_scale[s] = sd;
        continue;
      }
      continue;  // small-range counts stay raw for the rounding augmentation
    }
    if (k == FeatureKind::Binary) continue;
    if (k == FeatureKind::LogContinuous) {
      for (int i = 0; i < N; ++i) {
        require(out.X(s, i) > 0.0, "log_continuous feature " + out.feature_ids[s] +
                                       " has non-positive value");
        out.X(s, i) = std::log(out.X(s, i));
      }
    }
    double mean = out.X.row(s).mean();
    double var = (out.X.row(s).array() - mean).square().sum() / (N - 1);
    require(var > 0.0, "feature " + out.feature_ids[s] + " has zero variance");
    double sd = std::sqrt(var);
    out.X.row(s) = (out.X.row(s).array() - mean) / sd;
    out.feature_center[s] = mean;
    out.feature_scale[s] = sd;
  }
  out.links_applied = true;
  return out;
}

// Scales every response (training and withheld) by c = |X|_F / |Y|_F with
// |Y|_F taken over sampler-visible observations, so neither block dominates
// the shared shrinkage. Returns c for the inverse transform at prediction
// time.
inline std::pair<Dataset, double> rescale_response(const Dataset& ds) {
  double ss = 0.0;
  std::size_t n_obs = 0;
  for (const auto& lst : ds.obs)
    for (const auto& o : lst) {
      ss += o.value * o.value;
      ++n_obs;
    }
  require(n_obs > 0, "rescale_response: no response observations");
  require(ss > 0.0, "rescale_response: all responses zero, scale undefined");
  double c = ds.X.norm() / std::sqrt(ss);
  Dataset out = ds;
  for (auto& lst : out.obs)
    for (auto& o : lst) o.value *= c;
  for (auto& lst : out.holdout_obs)
    for (auto& o : lst) o.value *= c;
  out.y_scale = ds.y_scale * c;
  out.rebuild_dose_grid();
  return {std::move(out), c};
}

// Emits a dataset in the canonical on-disk formats (features.csv, kinds.csv,
// responses.csv, holdout.txt). Intended for raw (pre-link) datasets.
inline void write_dataset_csvs(const std::string& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  {
    csv::Writer w(dir + "/kinds.csv");
    w.row("feature_id", "kind");
    for (int s = 0; s < ds.n_features(); ++s)
      w.row(ds.feature_ids[static_cast<size_t>(s)], kind_name(ds.kinds[static_cast<size_t>(s)]));
  }
  {
    std::ofstream out(dir + "/features.csv");
    out.precision(17);
    out << "item_id";
    for (const auto& f : ds.feature_ids) out << "," << f;
    out << "\n";
    for (int i = 0; i < ds.n_items(); ++i) {
      out << ds.items[static_cast<size_t>(i)];
      for (int s = 0; s < ds.n_features(); ++s) out << "," << ds.X(s, i);
      out << "\n";
    }
  }
  {
    csv::Writer w(dir + "/responses.csv");
    w.row("item_id", "dose", "response");
    for (int i = 0; i < ds.n_items(); ++i) {
      for (const auto& o : ds.obs[static_cast<size_t>(i)])
        w.row(ds.items[static_cast<size_t>(i)], o.dose, o.value);
      for (const auto& o : ds.holdout_obs[static_cast<size_t>(i)])
        w.row(ds.items[static_cast<size_t>(i)], o.dose, o.value);
    }
  }
  {
    std::ofstream out(dir + "/holdout.txt");
    for (int i = 0; i < ds.n_items(); ++i)
      if (ds.holdout[static_cast<size_t>(i)])
        out << ds.items[static_cast<size_t>(i)] << "\n";
  }
}

// Drops observations below the dose floor and recomputes the grid.
inline Dataset filter_doses(const Dataset& ds, double floor,
                            PreprocessReport* rep = nullptr) {
  Dataset out = ds;
  auto prune = [&](std::vector<std::vector<ResponseObs>>& lists) {
    for (auto& lst : lists) {
      std::vector<ResponseObs> kept;
      for (const auto& o : lst)
        if (o.dose >= floor) kept.push_back(o);
      lst = std::move(kept);
    }
  };
  prune(out.obs);
  prune(out.holdout_obs);
  out.rebuild_dose_grid();
  if (rep) rep->dose_floor = floor;
  return out;
}

}  // namespace bs3fa
