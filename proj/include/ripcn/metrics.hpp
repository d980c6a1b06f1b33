#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ripcn/errors.hpp"
#include "ripcn/tensor.hpp"

namespace ripcn {

namespace detail {

// Empirical quantile with linear interpolation over an ascending vector.
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  const std::size_t m = sorted.size();
  if (m == 1) return sorted[0];
  const double h = q * static_cast<double>(m - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= m) return sorted[m - 1];
  const double frac = h - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

inline void require_samples(const Tensor& samples, const Tensor& truth, const char* op) {
  if (samples.rank() < 1 || samples.shape()[0] < 2) {
    throw parameter_error(std::string(op) + ": need at least 2 samples");
  }
  if (samples.size() / samples.shape()[0] != truth.size()) {
    throw dimension_error(std::string(op) + ": sample cells do not match truth shape");
  }
}

}  // namespace detail

struct PointMetrics {
  double mae = 0.0;
  double rmse = 0.0;
  double mape = 0.0;  // percent, over cells with truth >= threshold
};

inline PointMetrics point_metrics(const Tensor& pred, const Tensor& truth,
                                  double mape_threshold = 1.0) {
  detail::require_same_shape(pred, truth, "point_metrics");
  PointMetrics m;
  double se = 0.0, ape = 0.0;
  std::size_t masked = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = pred.data()[i] - truth.data()[i];
    m.mae += std::abs(e);
    se += e * e;
    if (truth.data()[i] >= mape_threshold) {
      ape += std::abs(e) / truth.data()[i];
      ++masked;
    }
  }
  m.mae /= static_cast<double>(pred.size());
  m.rmse = std::sqrt(se / static_cast<double>(pred.size()));
  m.mape = masked ? 100.0 * ape / static_cast<double>(masked) : 0.0;
  return m;
}

// Mean pinball loss over the fixed quantile grid 0.05, 0.10, ..., 0.95, each
// quantile taken empirically from the samples.
inline double crps_quantile_unnormalized(const Tensor& samples, const Tensor& truth) {
  detail::require_samples(samples, truth, "crps_quantile");
  const std::size_t m = samples.shape()[0];
  const std::size_t cells = truth.size();
  std::vector<double> col(m);
  double acc = 0.0;
  for (std::size_t c = 0; c < cells; ++c) {
    for (std::size_t i = 0; i < m; ++i) col[i] = samples.data()[i * cells + c];
    std::sort(col.begin(), col.end());
    const double z = truth.data()[c];
    double cell = 0.0;
    for (int qi = 1; qi <= 19; ++qi) {
      const double q = 0.05 * qi;
      const double yq = detail::quantile_sorted(col, q);
      cell += z >= yq ? q * (z - yq) : (1.0 - q) * (yq - z);
    }
    acc += cell / 19.0;
  }
  return acc / static_cast<double>(cells);
}

// Scale-free variant: pinball score divided by mean absolute truth. When the
// truth is identically zero the unnormalized value is returned.
inline double crps_quantile(const Tensor& samples, const Tensor& truth) {
  const double raw = crps_quantile_unnormalized(samples, truth);
  double denom = 0.0;
  for (double v : truth.data()) denom += std::abs(v);
  denom /= static_cast<double>(truth.size());
  return denom > 0.0 ? raw / denom : raw;
}

// Mean interval score at confidence 1 - rho; bounds are the empirical
// rho/2 and 1-rho/2 percentiles of the samples.
inline double mis(const Tensor& samples, const Tensor& truth, double rho = 0.05) {
  detail::require_samples(samples, truth, "mis");
  if (!(rho > 0.0 && rho < 1.0)) throw parameter_error("mis: rho must be in (0, 1)");
  const std::size_t m = samples.shape()[0];
  const std::size_t cells = truth.size();
  std::vector<double> col(m);
  double acc = 0.0;
  for (std::size_t c = 0; c < cells; ++c) {
    for (std::size_t i = 0; i < m; ++i) col[i] = samples.data()[i * cells + c];
    std::sort(col.begin(), col.end());
    const double l = detail::quantile_sorted(col, rho / 2.0);
    const double u = detail::quantile_sorted(col, 1.0 - rho / 2.0);
    const double z = truth.data()[c];
    double s = u - l;
    if (z > u) s += 2.0 / rho * (z - u);
    if (z < l) s += 2.0 / rho * (l - z);
    acc += s;
  }
  return acc / static_cast<double>(cells);
}

struct EvalReport {
  double mae = 0.0, rmse = 0.0, mape = 0.0;
  double crps = 0.0, crps_unnormalized = 0.0, mis = 0.0;
  double mean_predictor_mae = 0.0;  // frozen mean alone, for comparison
  std::vector<double> mae_by_horizon, rmse_by_horizon, mape_by_horizon;
  std::vector<double> crps_by_horizon, mis_by_horizon;
  std::string crps_normalization = "mean_abs_truth";

  nlohmann::json to_json() const {
    return nlohmann::json{{"mae", mae},
                          {"rmse", rmse},
                          {"mape", mape},
                          {"crps", crps},
                          {"crps_unnormalized", crps_unnormalized},
                          {"mis", mis},
                          {"mean_predictor_mae", mean_predictor_mae},
                          {"mae_by_horizon", mae_by_horizon},
                          {"rmse_by_horizon", rmse_by_horizon},
                          {"mape_by_horizon", mape_by_horizon},
                          {"crps_by_horizon", crps_by_horizon},
                          {"mis_by_horizon", mis_by_horizon},
                          {"crps_normalization", crps_normalization}};
  }

  static EvalReport from_json(const nlohmann::json& j) {
    EvalReport r;
    r.mae = j.at("mae");
    r.rmse = j.at("rmse");
    r.mape = j.at("mape");
    r.crps = j.at("crps");
    r.crps_unnormalized = j.at("crps_unnormalized");
    r.mis = j.at("mis");
    r.mean_predictor_mae = j.at("mean_predictor_mae");
    r.mae_by_horizon = j.at("mae_by_horizon").get<std::vector<double>>();
    r.rmse_by_horizon = j.at("rmse_by_horizon").get<std::vector<double>>();
    r.mape_by_horizon = j.at("mape_by_horizon").get<std::vector<double>>();
    r.crps_by_horizon = j.at("crps_by_horizon").get<std::vector<double>>();
    r.mis_by_horizon = j.at("mis_by_horizon").get<std::vector<double>>();
    r.crps_normalization = j.at("crps_normalization");
    return r;
  }

  void save_json(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw data_error("cannot open for writing: " + path);
    os << to_json().dump(2) << "\n";
  }

  // One flat row per run, for sweep aggregation.
  void save_csv_row(const std::string& path, const std::string& run_id) const {
    std::ofstream os(path);
    if (!os) throw data_error("cannot open for writing: " + path);
    os << "run_id,mae,rmse,mape,crps,crps_unnormalized,mis,mean_predictor_mae\n";
    os << run_id << "," << mae << "," << rmse << "," << mape << "," << crps << ","
       << crps_unnormalized << "," << mis << "," << mean_predictor_mae << "\n";
  }
};

}  // namespace ripcn
