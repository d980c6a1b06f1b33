#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "ripcn/data_io.hpp"
#include "ripcn/errors.hpp"
#include "ripcn/evolution_net.hpp"
#include "ripcn/impedance.hpp"
#include "ripcn/param_store.hpp"
#include "ripcn/pc_net.hpp"
#include "ripcn/tensor.hpp"

namespace ripcn {

// lambda1 is fixed at 1; lambda2 ramps linearly from 0 to 1 across the
// configured epoch range.
struct LossWeights {
  double lambda1 = 1.0;
  double ramp_start = 20.0;
  double ramp_end = 50.0;

  double lambda2(double epoch) const {
    if (ramp_end <= ramp_start) return epoch >= ramp_end ? 1.0 : 0.0;
    return std::clamp((epoch - ramp_start) / (ramp_end - ramp_start), 0.0, 1.0);
  }
};

// L_D = -sum_k <w_k, X>_F^2
inline Tensor directional_loss(const OrthoResult& pcs, const Tensor& x) {
  Tensor acc = square(frobenius_inner(pcs.components[0], x));
  for (std::size_t k = 1; k < pcs.components.size(); ++k)
    acc = add(acc, square(frobenius_inner(pcs.components[k], x)));
  return scale(acc, -1.0);
}

// L_V = sum_k (<w_k, X>_F^2 - ||w_tilde_k||_F^2)^2
inline Tensor variance_loss(const OrthoResult& pcs, const Tensor& x) {
  Tensor acc;
  for (std::size_t k = 0; k < pcs.components.size(); ++k) {
    Tensor term = square(sub(square(frobenius_inner(pcs.components[k], x)), pcs.raw_norm_sq[k]));
    acc = k == 0 ? term : add(acc, term);
  }
  return acc;
}

inline double directional_loss(const PCSet& pcs, const Tensor& x) {
  const std::size_t K = pcs.k(), field = pcs.components.size() / K;
  double acc = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    double dot = 0.0;
    for (std::size_t c = 0; c < field; ++c) dot += pcs.components.data()[k * field + c] * x.data()[c];
    acc += dot * dot;
  }
  return -acc;
}

inline double variance_loss(const PCSet& pcs, const Tensor& x) {
  const std::size_t K = pcs.k(), field = pcs.components.size() / K;
  double acc = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    double dot = 0.0;
    for (std::size_t c = 0; c < field; ++c) dot += pcs.components.data()[k * field + c] * x.data()[c];
    const double diff = dot * dot - pcs.raw_norms[k];
    acc += diff * diff;
  }
  return acc;
}

// lambda1 * L_R + lambda2(epoch) * (L_D + L_V)
inline Tensor total_loss(const Tensor& l_r, const Tensor& l_d, const Tensor& l_v,
                         const LossWeights& weights, double epoch) {
  const double l2 = weights.lambda2(epoch);
  Tensor out = scale(l_r, weights.lambda1);
  if (l2 != 0.0) out = add(out, scale(add(l_d, l_v), l2));
  return out;
}

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adaptive-moment optimizer over one or more stores. One step() call is one
// optimization step regardless of how many stores share it.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }

  void step(const std::vector<ParamStore*>& stores) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (ParamStore* store : stores) {
      for (auto& [name, p] : *store) {
        const auto& g = p.grad();
        auto& m = moments_[name];
        if (m.m.empty()) {
          m.m.assign(g.size(), 0.0);
          m.v.assign(g.size(), 0.0);
        }
        auto* node = p.node().get();
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (!std::isfinite(g[i])) {
            throw numeric_error("adam: non-finite gradient in parameter " + name);
          }
          m.m[i] = cfg_.beta1 * m.m[i] + (1.0 - cfg_.beta1) * g[i];
          m.v[i] = cfg_.beta2 * m.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
          const double mhat = m.m[i] / bc1;
          const double vhat = m.v[i] / bc2;
          node->data[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
      }
    }
  }

  void step(ParamStore& store) { step(std::vector<ParamStore*>{&store}); }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamConfig cfg_;
  std::map<std::string, Moments> moments_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Feature fitting. Capacity is estimated from the training range only;
// window statistics are recomputed per window unless fixed_stats is set.

inline std::vector<RoadFeatures> fit_features(const TrafficDataset& ds,
                                              std::size_t train_end_step) {
  if (train_end_step < 2) throw data_error("fit_features: training range too short");
  const std::size_t n = ds.n_segments;
  std::vector<RoadFeatures> feats(n);
  const bool have_so = ds.speed.defined() && ds.occupancy.defined();
  double s_mean = 0.0, o_mean = 0.0;
  if (have_so) {
    for (std::size_t t = 0; t < train_end_step; ++t)
      for (std::size_t a = 0; a < n; ++a) {
        s_mean += ds.speed.data()[t * n + a];
        o_mean += ds.occupancy.data()[t * n + a];
      }
    s_mean /= static_cast<double>(train_end_step * n);
    o_mean /= static_cast<double>(train_end_step * n);
  }
  for (std::size_t a = 0; a < n; ++a) {
    double x_max = 0.0;
    std::size_t t_max = 0;
    std::vector<double> window(train_end_step);
    for (std::size_t t = 0; t < train_end_step; ++t) {
      window[t] = ds.flow.data()[t * n + a];
      if (window[t] > x_max) {
        x_max = window[t];
        t_max = t;
      }
    }
    RoadFeatures f;
    if (x_max <= 0.0) {
      // Segment never carries flow in training; keep a unit capacity so the
      // impedance stays defined.
      f.capacity = 1.0;
    } else if (have_so) {
      try {
        f.capacity = estimate_capacity(x_max, ds.speed.data()[t_max * n + a],
                                       ds.occupancy.data()[t_max * n + a], s_mean, o_mean);
      } catch (const degenerate_input_error&) {
        f.capacity = capacity_proxy(x_max);
      }
    } else {
      f.capacity = capacity_proxy(x_max);
    }
    auto [mu, sigma] = window_stats(window);
    f.window_mean = mu;
    f.window_std = sigma;
    feats[a] = f;
  }
  return feats;
}

inline std::vector<RoadFeatures> features_for_window(const std::vector<RoadFeatures>& base,
                                                     const Tensor& x_h_raw, bool fixed_stats) {
  if (fixed_stats) return base;
  const std::size_t tau = x_h_raw.shape()[0], n = x_h_raw.shape()[1];
  std::vector<RoadFeatures> feats = base;
  std::vector<double> col(tau);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t t = 0; t < tau; ++t) col[t] = x_h_raw.data()[t * n + a];
    auto [mu, sigma] = window_stats(col);
    feats[a].window_mean = mu;
    feats[a].window_std = sigma;
  }
  return feats;
}

// ---------------------------------------------------------------------------
// Shared forward machinery.

struct AblationFlags {
  bool no_impedance = false;
  bool no_st_graph = false;
  bool no_lr = false;
  bool no_ld = false;
  bool no_lv = false;
};

struct WindowInputs {
  Tensor r_h;       // [tau, N] impedance of historical flows
  Tensor r_p_true;  // [T, N] impedance of actual future flows
  Tensor x_h_norm;  // [tau, N]
  Tensor x_p_norm;  // [T, N]
  Tensor x_hat;     // [T, N] frozen mean prediction, normalized
  Tensor resid;     // x_p_norm - x_hat
};

inline WindowInputs prepare_window(const Window& w, const std::vector<RoadFeatures>& base,
                                   bool fixed_stats, const BprParams& bpr,
                                   const Normalizer& norm, const MeanPredictor& mean,
                                   const Tensor& adj_norm) {
  WindowInputs in;
  const auto feats = features_for_window(base, w.x_h, fixed_stats);
  in.r_h = impedance_series(w.x_h, feats, bpr);
  in.r_p_true = impedance_series(w.x_p, feats, bpr);
  in.x_h_norm = norm.apply(w.x_h);
  in.x_p_norm = norm.apply(w.x_p);
  in.x_hat = mean.predict(in.x_h_norm, adj_norm);
  std::vector<double> r(in.x_p_norm.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = in.x_p_norm.data()[i] - in.x_hat.data()[i];
  in.resid = Tensor::from(in.x_p_norm.shape(), std::move(r));
  return in;
}

struct ModelForward {
  Tensor l_r;  // scalar (constant zero under no_impedance / no_lr history)
  OrthoResult ortho;
};

inline ModelForward model_forward(const EvolutionNet& evo, const PcNet& pc,
                                  const WindowInputs& in, const Tensor& adj_norm,
                                  const std::vector<std::uint8_t>& mask,
                                  const AblationFlags& flags, bool training) {
  const std::size_t tau = pc.cfg.tau, T = pc.cfg.horizon, n = in.r_h.shape()[1];
  ModelForward out;
  Tensor ar_slice;
  if (flags.no_impedance) {
    ar_slice = Tensor::zeros({T, n, n});
    out.l_r = Tensor::scalar(0.0);
  } else {
    auto evo_out = evo.forward(in.r_h);
    out.l_r = impedance_loss(in.r_p_true, evo_out.predicted_impedance);
    Tensor weights = pairwise_diff_graph(evo_out.values_full, mask);
    ar_slice = slice0(weights, tau, tau + T);
  }
  auto d = pc.forward(in.x_h_norm, in.x_hat, adj_norm, ar_slice);
  out.ortho = orthogonalize(d, training);
  return out;
}

// ---------------------------------------------------------------------------
// Training loop.

struct TrainConfig {
  std::size_t batch_size = 12;
  AdamConfig adam;  // lr 1e-4 default
  std::size_t max_epochs = 60;
  std::size_t min_epochs = 50;  // patience starts counting after this
  std::size_t patience = 10;
  LossWeights weights;
  BprParams bpr;
  bool fixed_window_stats = false;
  AblationFlags ablation;
  std::uint64_t seed = 0;
};

struct EpochStats {
  std::size_t epoch = 0;
  double l_r = 0.0, l_d = 0.0, l_v = 0.0;
  double lambda2 = 0.0;
  double total = 0.0;
  double val_total = 0.0;
};

struct TrainResult {
  EvolutionNet evo;
  PcNet pc;
  std::vector<EpochStats> history;
  std::size_t degeneracy_fallbacks = 0;
};

namespace detail {

inline ParamStore clone_store(const ParamStore& src) {
  ParamStore out;
  for (const auto& [name, t] : src) out.add(name, Tensor::param(t.shape(), t.data()));
  return out;
}

inline void copy_store_values(const ParamStore& src, ParamStore& dst) {
  for (const auto& [name, t] : src) {
    auto node = dst.at(name).node();
    node->data = t.data();
  }
}

}  // namespace detail

inline TrainResult train_ripcn(const WindowSplits& windows, const Normalizer& norm,
                               const std::vector<RoadFeatures>& base_features,
                               const MeanPredictor& mean, const Tensor& adj_norm,
                               const std::vector<std::uint8_t>& mask,
                               const EvolutionNetConfig& ecfg, const PcNetConfig& pcfg,
                               const TrainConfig& tcfg) {
  if (windows.train.empty()) throw data_error("train: no training windows");
  if (!mean.fitted()) throw state_error("train: mean predictor must be pretrained");

  Rng rng(tcfg.seed);
  TrainResult res;
  res.evo = EvolutionNet::init(ecfg, rng);
  res.pc = PcNet::init(pcfg, rng, tcfg.ablation.no_st_graph);
  Adam adam(tcfg.adam);

  // Per-window constants are independent of the model parameters.
  std::vector<WindowInputs> train_in, val_in;
  train_in.reserve(windows.train.size());
  for (const auto& w : windows.train)
    train_in.push_back(prepare_window(w, base_features, tcfg.fixed_window_stats, tcfg.bpr, norm,
                                      mean, adj_norm));
  for (const auto& w : windows.val)
    val_in.push_back(prepare_window(w, base_features, tcfg.fixed_window_stats, tcfg.bpr, norm,
                                    mean, adj_norm));

  std::vector<std::size_t> order(train_in.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  double best_val = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  ParamStore best_evo, best_pc;

  for (std::size_t epoch = 1; epoch <= tcfg.max_epochs; ++epoch) {
    const double l2 = tcfg.weights.lambda2(static_cast<double>(epoch));
    rng.shuffle(order);
    EpochStats stats;
    stats.epoch = epoch;
    stats.lambda2 = l2;
    std::size_t batches = 0;
    for (std::size_t off = 0; off < order.size(); off += tcfg.batch_size) {
      const std::size_t hi = std::min(order.size(), off + tcfg.batch_size);
      const double inv_b = 1.0 / static_cast<double>(hi - off);
      Tensor l_r, l_d, l_v;
      for (std::size_t i = off; i < hi; ++i) {
        auto fwd = model_forward(res.evo, res.pc, train_in[order[i]], adj_norm, mask,
                                 tcfg.ablation, true);
        res.degeneracy_fallbacks += fwd.ortho.fallbacks.size();
        Tensor ld = directional_loss(fwd.ortho, train_in[order[i]].resid);
        Tensor lv = variance_loss(fwd.ortho, train_in[order[i]].resid);
        l_r = i == off ? fwd.l_r : add(l_r, fwd.l_r);
        l_d = i == off ? ld : add(l_d, ld);
        l_v = i == off ? lv : add(l_v, lv);
      }
      l_r = scale(l_r, tcfg.ablation.no_lr ? 0.0 : inv_b);
      l_d = scale(l_d, tcfg.ablation.no_ld ? 0.0 : inv_b);
      l_v = scale(l_v, tcfg.ablation.no_lv ? 0.0 : inv_b);
      Tensor total = total_loss(l_r, l_d, l_v, tcfg.weights, static_cast<double>(epoch));
      res.evo.params.zero_grad();
      res.pc.params.zero_grad();
      backward(total);
      adam.step({&res.evo.params, &res.pc.params});
      stats.l_r += l_r.value();
      stats.l_d += l_d.value();
      stats.l_v += l_v.value();
      stats.total += total.value();
      ++batches;
    }
    const double inv = batches ? 1.0 / static_cast<double>(batches) : 0.0;
    stats.l_r *= inv;
    stats.l_d *= inv;
    stats.l_v *= inv;
    stats.total *= inv;

    if (!val_in.empty()) {
      double vt = 0.0;
      for (const auto& in : val_in) {
        auto fwd = model_forward(res.evo, res.pc, in, adj_norm, mask, tcfg.ablation, true);
        const double lr_v = tcfg.ablation.no_lr ? 0.0 : fwd.l_r.value();
        const double ld_v = tcfg.ablation.no_ld ? 0.0 : directional_loss(fwd.ortho, in.resid).value();
        const double lv_v = tcfg.ablation.no_lv ? 0.0 : variance_loss(fwd.ortho, in.resid).value();
        vt += tcfg.weights.lambda1 * lr_v + l2 * (ld_v + lv_v);
      }
      stats.val_total = vt / static_cast<double>(val_in.size());
    }
    res.history.push_back(stats);

    const double monitored = val_in.empty() ? stats.total : stats.val_total;
    if (monitored < best_val) {
      best_val = monitored;
      best_epoch = epoch;
      best_evo = detail::clone_store(res.evo.params);
      best_pc = detail::clone_store(res.pc.params);
    }
    if (epoch >= tcfg.min_epochs && epoch - best_epoch > tcfg.patience) break;
  }

  if (best_epoch > 0) {
    detail::copy_store_values(best_evo, res.evo.params);
    detail::copy_store_values(best_pc, res.pc.params);
  }
  return res;
}

struct PretrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 12;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

// MSE pretraining of the TCN mean head on normalized flows. Seasonal
// predictors have nothing to fit and are returned untouched.
inline std::vector<double> pretrain_mean(MeanPredictor& mean, const WindowSplits& windows,
                                         const Normalizer& norm, const Tensor& adj_norm,
                                         const PretrainConfig& cfg) {
  std::vector<double> history;
  if (mean.kind() == MeanPredictor::Kind::seasonal) {
    mean.mark_fitted();
    return history;
  }
  if (windows.train.empty()) throw data_error("pretrain: no training windows");
  Rng rng(cfg.seed);
  Adam adam(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  std::vector<std::pair<Tensor, Tensor>> data;
  data.reserve(windows.train.size());
  for (const auto& w : windows.train) data.emplace_back(norm.apply(w.x_h), norm.apply(w.x_p));
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t off = 0; off < order.size(); off += cfg.batch_size) {
      const std::size_t hi = std::min(order.size(), off + cfg.batch_size);
      Tensor loss;
      for (std::size_t i = off; i < hi; ++i) {
        Tensor pred = mean.forward_graph(data[order[i]].first, adj_norm);
        Tensor mse = mean_all(square(sub(data[order[i]].second, pred)));
        loss = i == off ? mse : add(loss, mse);
      }
      loss = scale(loss, 1.0 / static_cast<double>(hi - off));
      mean.params().zero_grad();
      backward(loss);
      adam.step(mean.params());
      epoch_loss += loss.value();
      ++batches;
    }
    history.push_back(epoch_loss / static_cast<double>(batches));
  }
  mean.mark_fitted();
  return history;
}

inline void write_history_csv(const std::string& path, const std::vector<EpochStats>& history) {
  std::ofstream os(path);
  if (!os) throw data_error("cannot open for writing: " + path);
  os << "epoch,l_r,l_d,l_v,lambda2,total,val_total\n";
  for (const auto& s : history) {
    os << s.epoch << "," << s.l_r << "," << s.l_d << "," << s.l_v << "," << s.lambda2 << ","
       << s.total << "," << s.val_total << "\n";
  }
}

}  // namespace ripcn
