#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "ripcn/errors.hpp"
#include "ripcn/tensor.hpp"

namespace ripcn {

// Static per-segment attributes entering the impedance function. Free-flow
// time defaults to 1.0 for every segment; loaders may override it when road
// geometry is available.
struct RoadFeatures {
  double free_flow_time = 1.0;  // t_a
  double capacity = 1.0;        // C_a, vehicles per interval
  double window_mean = 0.0;     // mu_a over the history window
  double window_std = 0.0;      // sigma_a over the history window

  void validate() const {
    if (!(capacity > 0.0)) throw parameter_error("RoadFeatures: capacity must be positive");
    if (!(free_flow_time > 0.0)) throw parameter_error("RoadFeatures: free-flow time must be positive");
    if (window_std < 0.0 || window_mean < 0.0) {
      throw parameter_error("RoadFeatures: window statistics must be non-negative");
    }
  }
};

struct BprParams {
  double alpha = 0.15;
  double beta = 4.0;
};

// Simplified capacity estimate from the flow peak and the speed/occupancy
// observed at that peak:
//   C_a = X_max * [1 + (s_a/s_mean + o_mean/o_a) / 2].
inline double estimate_capacity(double x_max, double s_a, double o_a, double s_mean,
                                double o_mean) {
  if (!(x_max > 0.0)) throw degenerate_input_error("estimate_capacity: x_max must be positive");
  if (!(o_a > 0.0)) throw degenerate_input_error("estimate_capacity: occupancy at peak must be positive");
  if (!(s_mean > 0.0)) throw degenerate_input_error("estimate_capacity: mean speed must be positive");
  return x_max * (1.0 + 0.5 * (s_a / s_mean + o_mean / o_a));
}

// Flow-only fallback: the observed maximum stands in for the capacity.
inline double capacity_proxy(double x_max) {
  if (!(x_max > 0.0)) throw degenerate_input_error("capacity_proxy: x_max must be positive");
  return x_max;
}

// Mean and population standard deviation (divisor tau) of a flow window.
inline std::pair<double, double> window_stats(const std::vector<double>& flow_window) {
  const std::size_t tau = flow_window.size();
  if (tau < 2) throw parameter_error("window_stats: window length must be >= 2");
  double mean = 0.0;
  for (double v : flow_window) mean += v;
  mean /= static_cast<double>(tau);
  double var = 0.0;
  for (double v : flow_window) var += (v - mean) * (v - mean);
  var /= static_cast<double>(tau);
  return {mean, std::sqrt(var)};
}

// Variability-augmented BPR travel time:
//   T = t_a * [1 + alpha (x/C_a)^beta] * (1 + sigma_a/mu_a).
// A zero-mean window has zero absolute fluctuation, so its variability
// factor is defined as 1.
inline double impedance(double x, const RoadFeatures& f, const BprParams& p = {}) {
  f.validate();
  const double congestion = 1.0 + p.alpha * std::pow(x / f.capacity, p.beta);
  const double variability = f.window_mean > 0.0 ? 1.0 + f.window_std / f.window_mean : 1.0;
  return f.free_flow_time * congestion * variability;
}

// Elementwise impedance over a [tau x N] flow window; features has one entry
// per segment (column).
inline Tensor impedance_series(const Tensor& flows, const std::vector<RoadFeatures>& features,
                               const BprParams& p = {}) {
  if (flows.rank() != 2 || flows.shape()[1] != features.size()) {
    throw dimension_error("impedance_series: flows " + detail::shape_str(flows.shape()) +
                          " vs " + std::to_string(features.size()) + " feature rows");
  }
  const std::size_t tau = flows.shape()[0], n = flows.shape()[1];
  std::vector<double> out(tau * n);
  for (std::size_t t = 0; t < tau; ++t)
    for (std::size_t a = 0; a < n; ++a)
      out[t * n + a] = impedance(flows.data()[t * n + a], features[a], p);
  return Tensor::from({tau, n}, std::move(out));
}

inline void export_feature_table(const std::vector<RoadFeatures>& features,
                                 const std::string& path) {
  std::ofstream os(path);
  if (!os) throw data_error("cannot open feature table for writing: " + path);
  os << "segment_id,t_a,capacity,mu,sigma\n";
  for (std::size_t a = 0; a < features.size(); ++a) {
    os << a << "," << features[a].free_flow_time << "," << features[a].capacity << ","
       << features[a].window_mean << "," << features[a].window_std << "\n";
  }
}

}  // namespace ripcn
