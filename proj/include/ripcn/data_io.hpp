#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ripcn/errors.hpp"
#include "ripcn/rng.hpp"
#include "ripcn/tensor.hpp"

namespace ripcn {

struct TrafficDataset {
  Tensor flow;       // [steps, N], raw units, non-negative
  Tensor speed;      // optional; undefined when absent
  Tensor occupancy;  // optional
  std::vector<std::uint8_t> adjacency;  // N*N row-major, adjacency[a*N+b] = a->b
  std::size_t n_segments = 0;
  double interval_minutes = 5.0;
  std::vector<std::string> timestamps;
  std::vector<std::string> segment_ids;

  std::size_t steps() const { return flow.defined() ? flow.shape()[0] : 0; }
  bool connected(std::size_t a, std::size_t b) const { return adjacency[a * n_segments + b] != 0; }

  void validate() const {
    if (!flow.defined() || flow.rank() != 2) throw data_error("dataset: flow matrix missing");
    const std::size_t n = flow.shape()[1];
    if (n != n_segments || adjacency.size() != n * n) {
      throw data_error("dataset: adjacency size does not match segment count");
    }
    for (double v : flow.data())
      if (v < 0.0) throw data_error("dataset: negative flow value");
    for (std::size_t a = 0; a < n; ++a)
      if (adjacency[a * n + a]) throw data_error("dataset: adjacency diagonal must be zero");
    for (const Tensor* t : {&speed, &occupancy}) {
      if (t->defined() && t->shape() != flow.shape()) {
        throw data_error("dataset: speed/occupancy shape does not match flow");
      }
    }
  }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline double parse_cell(const std::string& s, const std::string& file, std::size_t line_no) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw data_error(file + ": line " + std::to_string(line_no) + ": bad numeric cell '" + s + "'");
  }
}

inline std::string fmt_full(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

// Wide matrix CSV: header `timestamp,seg_0,...`, one row per timestep.
// Returns the values plus the timestamp and segment-id columns.
inline Tensor load_matrix_csv(const std::string& path, std::vector<std::string>* timestamps,
                              std::vector<std::string>* segment_ids) {
  std::ifstream is(path);
  if (!is) throw data_error("cannot open: " + path);
  std::string line;
  if (!std::getline(is, line)) throw data_error(path + ": empty file");
  auto header = detail::split_csv_line(line);
  if (header.size() < 2 || header[0] != "timestamp") {
    throw data_error(path + ": line 1: expected header starting with 'timestamp'");
  }
  const std::size_t n = header.size() - 1;
  if (segment_ids) segment_ids->assign(header.begin() + 1, header.end());
  std::vector<double> values;
  std::size_t rows = 0, line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != n + 1) {
      throw data_error(path + ": line " + std::to_string(line_no) + ": expected " +
                       std::to_string(n + 1) + " fields, got " + std::to_string(cells.size()));
    }
    if (timestamps) timestamps->push_back(cells[0]);
    for (std::size_t j = 1; j < cells.size(); ++j)
      values.push_back(detail::parse_cell(cells[j], path, line_no));
    ++rows;
  }
  if (rows == 0) throw data_error(path + ": no data rows");
  return Tensor::from({rows, n}, std::move(values));
}

inline void save_matrix_csv(const std::string& path, const Tensor& m,
                            const std::vector<std::string>& timestamps,
                            const std::vector<std::string>& segment_ids) {
  std::ofstream os(path);
  if (!os) throw data_error("cannot open for writing: " + path);
  os << "timestamp";
  for (const auto& id : segment_ids) os << "," << id;
  os << "\n";
  const std::size_t rows = m.shape()[0], n = m.shape()[1];
  for (std::size_t t = 0; t < rows; ++t) {
    os << (t < timestamps.size() ? timestamps[t] : std::to_string(t));
    for (std::size_t j = 0; j < n; ++j) os << "," << detail::fmt_full(m.data()[t * n + j]);
    os << "\n";
  }
}

// Edge list `src,dst,directed`; a 0 in the directed column inserts both
// directions. Self loops are rejected.
inline std::vector<std::uint8_t> load_adjacency_csv(const std::string& path, std::size_t n) {
  std::ifstream is(path);
  if (!is) throw data_error("cannot open: " + path);
  std::string line;
  if (!std::getline(is, line)) throw data_error(path + ": empty file");
  auto header = detail::split_csv_line(line);
  if (header.size() < 3 || header[0] != "src" || header[1] != "dst" || header[2] != "directed") {
    throw data_error(path + ": line 1: expected header 'src,dst,directed'");
  }
  std::vector<std::uint8_t> adj(n * n, 0);
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != 3) {
      throw data_error(path + ": line " + std::to_string(line_no) + ": expected 3 fields");
    }
    const auto src = static_cast<std::size_t>(detail::parse_cell(cells[0], path, line_no));
    const auto dst = static_cast<std::size_t>(detail::parse_cell(cells[1], path, line_no));
    const auto dir = static_cast<int>(detail::parse_cell(cells[2], path, line_no));
    if (src >= n || dst >= n) {
      throw data_error(path + ": line " + std::to_string(line_no) + ": segment index out of range");
    }
    if (src == dst) {
      throw data_error(path + ": line " + std::to_string(line_no) + ": self loop not allowed");
    }
    adj[src * n + dst] = 1;
    if (dir == 0) adj[dst * n + src] = 1;
  }
  return adj;
}

inline void save_adjacency_csv(const std::string& path, const std::vector<std::uint8_t>& adj,
                               std::size_t n) {
  std::ofstream os(path);
  if (!os) throw data_error("cannot open for writing: " + path);
  os << "src,dst,directed\n";
  // Mutual pairs are written once as undirected.
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) {
      if (!adj[a * n + b]) continue;
      if (adj[b * n + a] && b < a) continue;
      os << a << "," << b << "," << (adj[b * n + a] ? 0 : 1) << "\n";
    }
}

inline TrafficDataset load_csv(const std::string& flow_path, const std::string& adjacency_path,
                               const std::string& speed_path = "",
                               const std::string& occupancy_path = "",
                               double interval_minutes = 5.0) {
  TrafficDataset ds;
  ds.flow = load_matrix_csv(flow_path, &ds.timestamps, &ds.segment_ids);
  ds.n_segments = ds.flow.shape()[1];
  ds.interval_minutes = interval_minutes;
  ds.adjacency = load_adjacency_csv(adjacency_path, ds.n_segments);
  if (!speed_path.empty()) {
    ds.speed = load_matrix_csv(speed_path, nullptr, nullptr);
    if (ds.speed.shape() != ds.flow.shape()) {
      throw data_error(speed_path + ": shape does not match flow file");
    }
  }
  if (!occupancy_path.empty()) {
    ds.occupancy = load_matrix_csv(occupancy_path, nullptr, nullptr);
    if (ds.occupancy.shape() != ds.flow.shape()) {
      throw data_error(occupancy_path + ": shape does not match flow file");
    }
  }
  ds.validate();
  return ds;
}

// Z-score normalizer fitted on the training split only.
class Normalizer {
 public:
  void fit(const Tensor& train_block) {
    double m = 0.0;
    for (double v : train_block.data()) m += v;
    m /= static_cast<double>(train_block.size());
    double var = 0.0;
    for (double v : train_block.data()) var += (v - m) * (v - m);
    var /= static_cast<double>(train_block.size());
    if (var <= 0.0) throw data_error("normalizer: training split has zero variance");
    mean_ = m;
    std_ = std::sqrt(var);
    fitted_ = true;
  }

  bool fitted() const { return fitted_; }
  double mean() const { return mean_; }
  double std() const { return std_; }

  Tensor apply(const Tensor& x) const {
    check();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (x.data()[i] - mean_) / std_;
    return Tensor::from(x.shape(), std::move(out));
  }

  Tensor invert(const Tensor& x) const {
    check();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * std_ + mean_;
    return Tensor::from(x.shape(), std::move(out));
  }

  double invert_value(double v) const {
    check();
    return v * std_ + mean_;
  }
  double invert_scale(double v) const {
    check();
    return v * std_;
  }

 private:
  void check() const {
    if (!fitted_) throw state_error("normalizer used before fit");
  }
  bool fitted_ = false;
  double mean_ = 0.0, std_ = 1.0;
};

struct SplitSpec {
  double train_ratio = 0.6, val_ratio = 0.2, test_ratio = 0.2;
  std::size_t tau = 12;
  std::size_t horizon = 12;
  std::size_t stride = 1;

  void validate() const {
    if (std::abs(train_ratio + val_ratio + test_ratio - 1.0) > 1e-9) {
      throw parameter_error("split ratios must sum to 1");
    }
    if (tau == 0 || horizon == 0 || stride == 0) {
      throw parameter_error("tau, horizon and stride must be positive");
    }
  }
};

struct Window {
  Tensor x_h;  // [tau, N] raw flows
  Tensor x_p;  // [horizon, N] raw flows
  std::size_t start = 0;
};

struct WindowSplits {
  std::vector<Window> train, val, test;
  std::size_t train_end_step = 0;  // first step after the training range
  std::size_t val_end_step = 0;
};

inline std::vector<std::size_t> window_starts(std::size_t lo, std::size_t hi,
                                              const SplitSpec& spec) {
  std::vector<std::size_t> starts;
  const std::size_t len = spec.tau + spec.horizon;
  if (hi < lo + len) return starts;
  for (std::size_t s = lo; s + len <= hi; s += spec.stride) starts.push_back(s);
  return starts;
}

inline Window materialize_window(const TrafficDataset& ds, std::size_t start,
                                 const SplitSpec& spec) {
  const std::size_t n = ds.n_segments;
  const double* base = ds.flow.data().data();
  std::vector<double> h(base + start * n, base + (start + spec.tau) * n);
  std::vector<double> p(base + (start + spec.tau) * n,
                        base + (start + spec.tau + spec.horizon) * n);
  return Window{Tensor::from({spec.tau, n}, std::move(h)),
                Tensor::from({spec.horizon, n}, std::move(p)), start};
}

// Chronological split at the timestep level; a window belongs to a split
// only when it fits entirely inside that split's range, so no window
// straddles a boundary.
inline WindowSplits make_windows(const TrafficDataset& ds, const SplitSpec& spec) {
  spec.validate();
  const std::size_t steps = ds.steps();
  if (steps < spec.tau + spec.horizon) {
    throw data_error("make_windows: need at least " + std::to_string(spec.tau + spec.horizon) +
                     " steps, got " + std::to_string(steps));
  }
  const auto n_train = static_cast<std::size_t>(std::floor(spec.train_ratio * steps));
  const auto n_val = static_cast<std::size_t>(std::floor(spec.val_ratio * steps));
  WindowSplits out;
  out.train_end_step = n_train;
  out.val_end_step = n_train + n_val;
  for (std::size_t s : window_starts(0, n_train, spec))
    out.train.push_back(materialize_window(ds, s, spec));
  for (std::size_t s : window_starts(n_train, n_train + n_val, spec))
    out.val.push_back(materialize_window(ds, s, spec));
  for (std::size_t s : window_starts(n_train + n_val, steps, spec))
    out.test.push_back(materialize_window(ds, s, spec));
  return out;
}

// -------------------------------------------------------------------------
// Synthetic generator with a known low-rank residual structure, used as the
// verification workhorse: the planted eigenpairs give every covariance and
// recovery test an exact ground truth.

struct SynthConfig {
  std::uint64_t seed = 0;
  std::size_t n_segments = 8;
  std::size_t steps = 2000;
  std::size_t k_true = 3;
  std::size_t period = 24;
  std::size_t block_len = 12;  // length of each planted-residual block
  std::vector<double> lambdas = {9.0, 3.0, 1.0};
  double noise_floor = 0.05;   // std of iid cell noise
  double base_offset = 60.0;
  double base_amplitude = 20.0;
  double trend_per_step = 0.0;   // linear drift; makes a persistence mean biased
  double residual_bias = 0.0;    // mean of the coefficient on component 1
  bool with_speed_occupancy = true;
};

struct SynthResult {
  TrafficDataset dataset;
  std::vector<double> lambdas;      // planted spectrum, size k_true
  std::vector<Tensor> components;   // k_true orthonormal fields [block_len, N]
  Tensor base;                      // noise-free flow series [steps, N]
};

inline SynthResult synth_generate(const SynthConfig& cfg) {
  const std::size_t n = cfg.n_segments, dim = cfg.block_len * n;
  if (cfg.k_true > dim) {
    throw parameter_error("synth_generate: planted rank exceeds block dimension");
  }
  if (cfg.k_true > cfg.lambdas.size()) {
    throw parameter_error("synth_generate: lambdas shorter than planted rank");
  }
  Rng rng(cfg.seed);

  // Random orthonormal residual basis via modified Gram-Schmidt.
  std::vector<std::vector<double>> basis(cfg.k_true, std::vector<double>(dim));
  for (auto& w : basis)
    for (auto& v : w) v = rng.normal();
  for (std::size_t k = 0; k < cfg.k_true; ++k) {
    for (std::size_t i = 0; i < k; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < dim; ++j) dot += basis[k][j] * basis[i][j];
      for (std::size_t j = 0; j < dim; ++j) basis[k][j] -= dot * basis[i][j];
    }
    double nrm = 0.0;
    for (double v : basis[k]) nrm += v * v;
    nrm = std::sqrt(nrm);
    for (double& v : basis[k]) v /= nrm;
  }

  std::vector<double> base(cfg.steps * n), flow(cfg.steps * n);
  for (std::size_t t = 0; t < cfg.steps; ++t)
    for (std::size_t a = 0; a < n; ++a) {
      const double phase = static_cast<double>(a) / static_cast<double>(n);
      base[t * n + a] = cfg.base_offset + cfg.trend_per_step * static_cast<double>(t) +
                        cfg.base_amplitude *
                            std::sin(2.0 * M_PI * (static_cast<double>(t) / cfg.period + phase));
    }
  flow = base;
  const std::size_t n_blocks = cfg.steps / cfg.block_len;
  for (std::size_t b = 0; b < n_blocks; ++b)
    for (std::size_t k = 0; k < cfg.k_true; ++k) {
      const double xi = rng.normal(k == 0 ? cfg.residual_bias : 0.0, 1.0);
      const double s = std::sqrt(cfg.lambdas[k]) * xi;
      for (std::size_t j = 0; j < dim; ++j) flow[b * cfg.block_len * n + j] += s * basis[k][j];
    }
  if (cfg.noise_floor > 0.0) {
    for (auto& v : flow) v += cfg.noise_floor * rng.normal();
  }
  for (auto& v : flow) v = std::max(0.0, v);

  SynthResult res;
  res.dataset.flow = Tensor::from({cfg.steps, n}, std::move(flow));
  res.dataset.n_segments = n;
  res.dataset.segment_ids.reserve(n);
  for (std::size_t a = 0; a < n; ++a) res.dataset.segment_ids.push_back("seg_" + std::to_string(a));
  res.dataset.timestamps.reserve(cfg.steps);
  for (std::size_t t = 0; t < cfg.steps; ++t) res.dataset.timestamps.push_back(std::to_string(t));

  // Ring plus a few seeded chords; every edge undirected.
  std::vector<std::uint8_t> adj(n * n, 0);
  for (std::size_t a = 0; a + 1 < n; ++a) adj[a * n + a + 1] = adj[(a + 1) * n + a] = 1;
  if (n > 2) adj[(n - 1) * n] = adj[n - 1] = 1;
  for (std::size_t c = 0; c < n / 2; ++c) {
    const std::size_t a = rng.index(n), b = rng.index(n);
    if (a != b) adj[a * n + b] = adj[b * n + a] = 1;
  }
  res.dataset.adjacency = std::move(adj);

  if (cfg.with_speed_occupancy) {
    std::vector<double> speed(cfg.steps * n), occ(cfg.steps * n);
    for (std::size_t i = 0; i < speed.size(); ++i) {
      const double f = res.dataset.flow.data()[i];
      speed[i] = std::max(5.0, 110.0 - 0.6 * f);
      occ[i] = 0.02 + 0.004 * f;
    }
    res.dataset.speed = Tensor::from({cfg.steps, n}, std::move(speed));
    res.dataset.occupancy = Tensor::from({cfg.steps, n}, std::move(occ));
  }

  res.lambdas.assign(cfg.lambdas.begin(), cfg.lambdas.begin() + cfg.k_true);
  for (std::size_t k = 0; k < cfg.k_true; ++k)
    res.components.push_back(Tensor::from({cfg.block_len, n}, basis[k]));
  res.base = Tensor::from({cfg.steps, n}, std::move(base));
  res.dataset.validate();
  return res;
}

}  // namespace ripcn
