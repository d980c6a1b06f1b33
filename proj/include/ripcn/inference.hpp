#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "ripcn/errors.hpp"
#include "ripcn/metrics.hpp"
#include "ripcn/pc_net.hpp"
#include "ripcn/rng.hpp"
#include "ripcn/tensor.hpp"

namespace ripcn {

struct SampleCoefficients {
  std::vector<double> t;   // one signed scalar per component
  double t_max = 2.0;      // calibration search bracket
  double tolerance = 1e-3;

  void validate() const {
    for (double v : t)
      if (std::abs(v) > t_max) throw parameter_error("sample coefficient outside [-t_max, t_max]");
  }
};

enum class SampleMode { paper, gaussian };

inline SampleMode parse_sample_mode(const std::string& s) {
  if (s == "paper") return SampleMode::paper;
  if (s == "gaussian") return SampleMode::gaussian;
  throw config_error("unknown sample mode: " + s);
}

// Extends the predicted mean along the calibrated principal directions.
// Paper mode emits exactly K members, one per component; gaussian mode draws
// M correlated members so percentile intervals are defined.
inline Tensor build_samples(const Tensor& x_hat, const PCSet& pcs, const SampleCoefficients& co,
                            SampleMode mode, std::size_t m = 50, std::uint64_t seed = 0) {
  const std::size_t K = pcs.k();
  if (co.t.size() != K) throw parameter_error("build_samples: coefficient count != K");
  const std::size_t cells = x_hat.size();
  if (pcs.components.size() != K * cells) {
    throw dimension_error("build_samples: component fields do not match mean shape");
  }
  Shape out_shape;
  std::vector<double> out;
  if (mode == SampleMode::paper) {
    out.assign(K * cells, 0.0);
    for (std::size_t k = 0; k < K; ++k) {
      const double s = co.t[k] * std::sqrt(pcs.variances[k]);
      for (std::size_t c = 0; c < cells; ++c)
        out[k * cells + c] = x_hat.data()[c] + s * pcs.components.data()[k * cells + c];
    }
    out_shape.push_back(K);
  } else {
    if (m < 2) throw parameter_error("build_samples: gaussian mode needs M >= 2");
    Rng rng(seed);
    out.assign(m * cells, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      double* row = out.data() + i * cells;
      for (std::size_t c = 0; c < cells; ++c) row[c] = x_hat.data()[c];
      for (std::size_t k = 0; k < K; ++k) {
        const double s = rng.normal() * co.t[k] * std::sqrt(pcs.variances[k]);
        for (std::size_t c = 0; c < cells; ++c) row[c] += s * pcs.components.data()[k * cells + c];
      }
    }
    out_shape.push_back(m);
  }
  for (std::size_t d : x_hat.shape()) out_shape.push_back(d);
  return Tensor::from(std::move(out_shape), std::move(out));
}

// Mean of the paper-mode sample set in closed form:
//   x_hat + (1/K) sum_k t_k sigma_k w_k.
inline Tensor corrected_mean(const Tensor& x_hat, const PCSet& pcs,
                             const SampleCoefficients& co) {
  const std::size_t K = pcs.k(), cells = x_hat.size();
  std::vector<double> out(x_hat.data());
  for (std::size_t k = 0; k < K; ++k) {
    const double s = co.t[k] * std::sqrt(pcs.variances[k]) / static_cast<double>(K);
    for (std::size_t c = 0; c < cells; ++c) out[c] += s * pcs.components.data()[k * cells + c];
  }
  return Tensor::from(x_hat.shape(), std::move(out));
}

struct ForecastDistribution {
  Tensor mean;     // arithmetic mean of the samples
  Tensor stddev;   // population std per cell
  Tensor lower;    // rho/2 percentile
  Tensor upper;    // 1 - rho/2 percentile
  Tensor samples;  // [M, ...]
  double coverage = 0.95;
};

inline ForecastDistribution summarize(const Tensor& samples, double coverage = 0.95) {
  if (samples.rank() < 2 || samples.shape()[0] < 2) {
    throw parameter_error("summarize: need at least 2 samples");
  }
  if (!(coverage > 0.0 && coverage < 1.0)) throw parameter_error("summarize: coverage in (0,1)");
  const std::size_t m = samples.shape()[0];
  const std::size_t cells = samples.size() / m;
  const double rho = 1.0 - coverage;
  Shape cell_shape(samples.shape().begin() + 1, samples.shape().end());
  std::vector<double> mean(cells, 0.0), sd(cells, 0.0), lo(cells), hi(cells);
  std::vector<double> col(m);
  for (std::size_t c = 0; c < cells; ++c) {
    double mu = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      col[i] = samples.data()[i * cells + c];
      mu += col[i];
    }
    mu /= static_cast<double>(m);
    std::sort(col.begin(), col.end());
    if (col.front() == col.back()) {
      // identical members: keep the degenerate case exact
      mean[c] = col.front();
      sd[c] = 0.0;
      lo[c] = hi[c] = col.front();
      continue;
    }
    double var = 0.0;
    for (std::size_t i = 0; i < m; ++i) var += (col[i] - mu) * (col[i] - mu);
    var /= static_cast<double>(m);
    mean[c] = mu;
    sd[c] = std::sqrt(var);
    lo[c] = detail::quantile_sorted(col, rho / 2.0);
    hi[c] = detail::quantile_sorted(col, 1.0 - rho / 2.0);
  }
  ForecastDistribution out;
  out.mean = Tensor::from(cell_shape, std::move(mean));
  out.stddev = Tensor::from(cell_shape, std::move(sd));
  out.lower = Tensor::from(cell_shape, std::move(lo));
  out.upper = Tensor::from(cell_shape, std::move(hi));
  out.samples = samples;
  out.coverage = coverage;
  return out;
}

// One frozen-model forecast on a validation window, everything in
// normalized units.
struct WindowForecast {
  Tensor x_hat;  // [T, N]
  PCSet pcs;
  Tensor truth;  // [T, N]
};

enum class CalibrationMetric { mae, rmse };

namespace detail {

inline double calibration_objective(const std::vector<WindowForecast>& windows,
                                    const SampleCoefficients& co, CalibrationMetric metric) {
  double acc = 0.0;
  std::size_t cells = 0;
  for (const auto& w : windows) {
    Tensor m = corrected_mean(w.x_hat, w.pcs, co);
    for (std::size_t c = 0; c < m.size(); ++c) {
      const double e = m.data()[c] - w.truth.data()[c];
      acc += metric == CalibrationMetric::mae ? std::abs(e) : e * e;
    }
    cells += m.size();
  }
  acc /= static_cast<double>(cells);
  return metric == CalibrationMetric::mae ? acc : std::sqrt(acc);
}

}  // namespace detail

// Coordinate-wise binary search over each t_k in [-t_max, t_max], in
// component order, minimizing the validation sample-mean error. The signed
// bracket absorbs the +/- alignment ambiguity of the learned directions.
inline SampleCoefficients calibrate_t(const std::vector<WindowForecast>& validation,
                                      std::size_t k, double t_max = 2.0, double tolerance = 1e-3,
                                      CalibrationMetric metric = CalibrationMetric::mae) {
  if (validation.empty()) throw data_error("calibrate_t: empty validation set");
  SampleCoefficients co;
  co.t.assign(k, 0.0);
  co.t_max = t_max;
  co.tolerance = tolerance;
  for (std::size_t ki = 0; ki < k; ++ki) {
    double lo = -t_max, hi = t_max;
    const double h = tolerance * 0.25;
    while (hi - lo > tolerance) {
      const double mid = 0.5 * (lo + hi);
      co.t[ki] = mid + h;
      const double right = detail::calibration_objective(validation, co, metric);
      co.t[ki] = mid - h;
      const double left = detail::calibration_objective(validation, co, metric);
      if (right < left) {
        lo = mid;
      } else {
        hi = mid;
      }
    }
    co.t[ki] = 0.5 * (lo + hi);
  }
  co.validate();
  return co;
}

}  // namespace ripcn
