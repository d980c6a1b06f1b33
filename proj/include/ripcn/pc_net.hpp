#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ripcn/errors.hpp"
#include "ripcn/param_store.hpp"
#include "ripcn/tensor.hpp"

namespace ripcn {

struct PcNetConfig {
  std::size_t k = 3;           // number of principal components
  std::size_t blocks = 16;     // L
  std::size_t hidden = 32;     // F'
  std::size_t tcn_kernel = 3;
  std::size_t tau = 12;
  std::size_t horizon = 12;

  void validate() const {
    if (k < 1 || blocks < 1) throw config_error("pc net: K and L must be >= 1");
    if (hidden == 0 || tcn_kernel == 0 || tau == 0 || horizon == 0) {
      throw config_error("pc net: dimensions must be positive");
    }
  }
};

// Orthonormal spatiotemporal components plus the variance read out of each
// pre-normalization norm.
struct PCSet {
  Tensor components;              // [K, T, N]
  std::vector<double> variances;  // sigma_k^2; equals raw_norms by definition
  std::vector<double> raw_norms;  // ||w_tilde_k||_F^2

  std::size_t k() const { return variances.size(); }

  void validate(double tol = 1e-8) const {
    const std::size_t K = k(), field = components.size() / K;
    for (std::size_t i = 0; i < K; ++i)
      for (std::size_t j = i; j < K; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < field; ++c)
          dot += components.data()[i * field + c] * components.data()[j * field + c];
        const double want = i == j ? 1.0 : 0.0;
        if (std::abs(dot - want) >= tol) {
          throw numeric_error("PCSet: component Gram matrix deviates from identity");
        }
      }
    for (std::size_t i = 0; i < K; ++i) {
      if (variances[i] != raw_norms[i]) throw numeric_error("PCSet: variance != raw norm");
      if (variances[i] < 0.0) throw numeric_error("PCSet: negative variance");
    }
  }
};

// Graph-connected orthogonalization output used during training; to_pcset()
// detaches it for inference.
struct OrthoResult {
  std::vector<Tensor> components;   // K unit-norm fields [T, N]
  std::vector<Tensor> raw_norm_sq;  // K scalar tensors
  std::vector<std::size_t> fallbacks;  // component indices replaced mid-training

  PCSet to_pcset() const {
    const std::size_t K = components.size();
    const auto& shape = components[0].shape();
    std::vector<double> flat;
    flat.reserve(K * components[0].size());
    PCSet out;
    for (std::size_t k = 0; k < K; ++k) {
      flat.insert(flat.end(), components[k].data().begin(), components[k].data().end());
      out.raw_norms.push_back(raw_norm_sq[k].value());
      out.variances.push_back(raw_norm_sq[k].value());
    }
    out.components = Tensor::from({K, shape[0], shape[1]}, std::move(flat));
    return out;
  }
};

namespace detail {
constexpr double kDegenerateNormSq = 1e-20;  // ||w_tilde|| < 1e-10

inline Tensor indicator_field(const Shape& shape, std::size_t flat_index) {
  std::vector<double> d(numel(shape), 0.0);
  d[flat_index % d.size()] = 1.0;
  return Tensor::from(shape, std::move(d));
}
}  // namespace detail

// Sequential projection-and-normalize:
//   w_tilde_k = d_k - sum_{i<k} <d_k, w_i>_F w_i,   w_k = w_tilde_k / ||w_tilde_k||_F.
// Gradients flow through the projections and the normalization. A
// near-colinear direction raises degeneracy_error; with `training` set it is
// instead replaced by an indicator basis field and recorded in `fallbacks`.
inline OrthoResult orthogonalize(const std::vector<Tensor>& d, bool training = false) {
  OrthoResult res;
  for (std::size_t k = 0; k < d.size(); ++k) {
    Tensor dk = d[k];
    for (std::size_t attempt = 0;; ++attempt) {
      Tensor wt = dk;
      for (std::size_t i = 0; i < k; ++i) {
        wt = sub(wt, mul_scalar(res.components[i], frobenius_inner(dk, res.components[i])));
      }
      Tensor nsq = frobenius_inner(wt, wt);
      if (nsq.value() >= detail::kDegenerateNormSq) {
        res.components.push_back(div_scalar(wt, sqrt_(nsq)));
        res.raw_norm_sq.push_back(nsq);
        break;
      }
      if (!training) {
        throw degeneracy_error(k, "orthogonalize: direction " + std::to_string(k) +
                                      " is numerically colinear with its predecessors");
      }
      if (attempt == 0) res.fallbacks.push_back(k);
      if (attempt > d[k].size()) {
        throw degeneracy_error(k, "orthogonalize: no independent fallback direction found");
      }
      dk = detail::indicator_field(d[k].shape(), k + attempt);
    }
  }
  return res;
}

// Row-normalized adjacency D^-1 A. Isolated segments keep a zero row and
// receive no graph message; their own state flows through the skip path.
inline Tensor normalized_adjacency(const std::vector<std::uint8_t>& adj, std::size_t n) {
  std::vector<double> m(n * n, 0.0);
  for (std::size_t a = 0; a < n; ++a) {
    double deg = 0.0;
    for (std::size_t b = 0; b < n; ++b) deg += adj[a * n + b] ? 1.0 : 0.0;
    if (deg == 0.0) continue;
    for (std::size_t b = 0; b < n; ++b)
      if (adj[a * n + b]) m[a * n + b] = 1.0 / deg;
  }
  return Tensor::from({n, n}, std::move(m));
}

namespace detail {
// x[T,N] + b[T] broadcast across segments.
inline Tensor add_time_bias(const Tensor& x, const Tensor& b) {
  return permute(add_bias_last(permute(x, {1, 0}), b), {1, 0});
}
}  // namespace detail

struct MeanTcnConfig {
  std::size_t hidden = 16;
  std::size_t tcn_kernel = 3;
  std::size_t tau = 12;
  std::size_t horizon = 12;
};

// Frozen point forecaster feeding the PC network. Either a seasonal
// persistence baseline or a small trainable TCN+GCN head.
class MeanPredictor {
 public:
  enum class Kind { seasonal, tcn };

  static MeanPredictor seasonal(std::size_t period, std::size_t tau, std::size_t horizon) {
    if (period == 0 || period > tau) {
      throw parameter_error("seasonal predictor: period must be in [1, tau]");
    }
    MeanPredictor p;
    p.kind_ = Kind::seasonal;
    p.period_ = period;
    p.cfg_.tau = tau;
    p.cfg_.horizon = horizon;
    p.fitted_ = true;
    return p;
  }

  static MeanPredictor tcn_head(const MeanTcnConfig& cfg, Rng& rng) {
    MeanPredictor p;
    p.kind_ = Kind::tcn;
    p.cfg_ = cfg;
    const double F = static_cast<double>(cfg.hidden);
    init_param(p.params_, "mean.proj.w", {cfg.horizon, cfg.tau}, rng,
               static_cast<double>(cfg.tau), static_cast<double>(cfg.horizon));
    init_zeros(p.params_, "mean.proj.b", {cfg.horizon});
    init_param(p.params_, "mean.enc.w", {1, cfg.hidden}, rng, 1.0, F);
    init_zeros(p.params_, "mean.enc.b", {cfg.hidden});
    init_param(p.params_, "mean.tcn.k", {cfg.tcn_kernel, cfg.hidden, cfg.hidden}, rng,
               F * cfg.tcn_kernel, F);
    init_zeros(p.params_, "mean.tcn.b", {cfg.hidden});
    init_param(p.params_, "mean.gcn.w", {cfg.hidden, cfg.hidden}, rng, F, F);
    init_zeros(p.params_, "mean.gcn.b", {cfg.hidden});
    init_param(p.params_, "mean.out.w", {cfg.hidden, 1}, rng, F, 1.0);
    init_zeros(p.params_, "mean.out.b", {1});
    return p;
  }

  static MeanPredictor tcn_from_params(const MeanTcnConfig& cfg, ParamStore store) {
    MeanPredictor p;
    p.kind_ = Kind::tcn;
    p.cfg_ = cfg;
    p.params_ = std::move(store);
    p.fitted_ = true;
    return p;
  }

  Kind kind() const { return kind_; }
  std::size_t period() const { return period_; }
  bool fitted() const { return fitted_; }
  void mark_fitted() { fitted_ = true; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const MeanTcnConfig& config() const { return cfg_; }

  // Gradient-recording forward; used by pretraining.
  Tensor forward_graph(const Tensor& x_h, const Tensor& adj_norm) const {
    if (x_h.rank() != 2 || x_h.shape()[0] != cfg_.tau) {
      throw dimension_error("mean predictor: expected [tau, N] history, got " +
                            detail::shape_str(x_h.shape()));
    }
    if (kind_ == Kind::seasonal) {
      const std::size_t n = x_h.shape()[1];
      std::vector<double> out(cfg_.horizon * n);
      for (std::size_t t = 0; t < cfg_.horizon; ++t) {
        const std::size_t src = cfg_.tau - period_ + (t % period_);
        for (std::size_t a = 0; a < n; ++a) out[t * n + a] = x_h.data()[src * n + a];
      }
      return Tensor::from({cfg_.horizon, n}, std::move(out));
    }
    const std::size_t n = x_h.shape()[1], T = cfg_.horizon;
    Tensor proj = detail::add_time_bias(matmul(params_.at("mean.proj.w"), x_h),
                                        params_.at("mean.proj.b"));
    Tensor h = linear(reshape(proj, {T, n, 1}), params_.at("mean.enc.w"),
                      params_.at("mean.enc.b"));
    Tensor ht = relu(add_bias_last(causal_conv1d(h, params_.at("mean.tcn.k")),
                                   params_.at("mean.tcn.b")));
    Tensor msg = bmm(tile0(adj_norm, T), ht);
    Tensor hg = relu(linear(msg, params_.at("mean.gcn.w"), params_.at("mean.gcn.b")));
    Tensor out = linear(add(h, hg), params_.at("mean.out.w"), params_.at("mean.out.b"));
    return reshape(out, {T, n});
  }

  // Frozen point forecast; deterministic for fixed weights.
  Tensor predict(const Tensor& x_h, const Tensor& adj_norm) const {
    if (!fitted_) throw state_error("mean predictor used before fitting");
    return forward_graph(x_h, adj_norm).detach();
  }

 private:
  Kind kind_ = Kind::seasonal;
  std::size_t period_ = 1;
  MeanTcnConfig cfg_;
  ParamStore params_;
  bool fitted_ = false;
};

// Principal component network: history projection and mean concatenation,
// L ST-Graph blocks guided by the static and dynamic graphs, and a TCN+FC
// decoder emitting K raw direction fields.
class PcNet {
 public:
  PcNetConfig cfg;
  ParamStore params;
  bool fc_blocks = false;  // ablation: per-cell FC in place of TCN+GCN

  static PcNet init(const PcNetConfig& cfg, Rng& rng, bool fc_blocks = false) {
    cfg.validate();
    PcNet net;
    net.cfg = cfg;
    net.fc_blocks = fc_blocks;
    const double F = static_cast<double>(cfg.hidden);
    init_param(net.params, "pc.proj.w", {cfg.horizon, cfg.tau}, rng,
               static_cast<double>(cfg.tau), static_cast<double>(cfg.horizon));
    init_zeros(net.params, "pc.proj.b", {cfg.horizon});
    init_param(net.params, "pc.enc.w", {2, cfg.hidden}, rng, 2.0, F);
    init_zeros(net.params, "pc.enc.b", {cfg.hidden});
    for (std::size_t l = 0; l < cfg.blocks; ++l) {
      const std::string p = block_prefix(l);
      if (fc_blocks) {
        init_param(net.params, p + ".fc.w", {cfg.hidden, cfg.hidden}, rng, F, F);
        init_zeros(net.params, p + ".fc.b", {cfg.hidden});
      } else {
        init_param(net.params, p + ".tcn.k", {cfg.tcn_kernel, cfg.hidden, cfg.hidden}, rng,
                   F * cfg.tcn_kernel, F);
        init_zeros(net.params, p + ".tcn.b", {cfg.hidden});
        init_param(net.params, p + ".gcn.w", {2 * cfg.hidden, cfg.hidden}, rng, 2.0 * F, F);
        init_zeros(net.params, p + ".gcn.b", {cfg.hidden});
      }
    }
    init_param(net.params, "pc.dec.tcn.k", {cfg.tcn_kernel, cfg.hidden, cfg.hidden}, rng,
               F * cfg.tcn_kernel, F);
    init_zeros(net.params, "pc.dec.tcn.b", {cfg.hidden});
    init_param(net.params, "pc.dec.out.w", {cfg.hidden, cfg.k}, rng, F,
               static_cast<double>(cfg.k));
    init_zeros(net.params, "pc.dec.out.b", {cfg.k});
    return net;
  }

  static PcNet from_params(const PcNetConfig& cfg, ParamStore store, bool fc_blocks = false) {
    cfg.validate();
    PcNet net;
    net.cfg = cfg;
    net.params = std::move(store);
    net.fc_blocks = fc_blocks;
    return net;
  }

  // History is mapped onto the horizon axis with an affine projection, then
  // concatenated with the predicted mean on the feature axis and encoded.
  Tensor encode_concat(const Tensor& x_h, const Tensor& x_hat) const {
    if (x_h.rank() != 2 || x_h.shape()[0] != cfg.tau) {
      throw dimension_error("encode_concat: history shape " + detail::shape_str(x_h.shape()));
    }
    if (x_hat.rank() != 2 || x_hat.shape()[0] != cfg.horizon ||
        x_hat.shape()[1] != x_h.shape()[1]) {
      throw dimension_error("encode_concat: mean shape " + detail::shape_str(x_hat.shape()));
    }
    const std::size_t n = x_h.shape()[1], T = cfg.horizon;
    Tensor proj = detail::add_time_bias(matmul(params.at("pc.proj.w"), x_h),
                                        params.at("pc.proj.b"));
    Tensor stacked = concat_last(reshape(proj, {T, n, 1}), reshape(x_hat, {T, n, 1}));
    return linear(stacked, params.at("pc.enc.w"), params.at("pc.enc.b"));
  }

  // One spatiotemporal block: causal TCN over time, then message passes over
  // the static and dynamic graphs concatenated on the feature axis and
  // mixed, with an additive skip connection.
  Tensor st_graph_block(const Tensor& h, std::size_t layer, const Tensor& adj_norm,
                        const Tensor& ar_slice) const {
    const std::string p = block_prefix(layer);
    if (fc_blocks) {
      return add(h, relu(linear(h, params.at(p + ".fc.w"), params.at(p + ".fc.b"))));
    }
    const std::size_t T = h.shape()[0], n = h.shape()[1];
    if (adj_norm.shape()[0] != n || ar_slice.shape() != Shape{T, n, n}) {
      throw dimension_error("st_graph_block: graph shapes do not match hidden state");
    }
    Tensor ht = relu(add_bias_last(causal_conv1d(h, params.at(p + ".tcn.k")),
                                   params.at(p + ".tcn.b")));
    Tensor m_static = bmm(tile0(adj_norm, T), ht);
    Tensor m_dynamic = bmm(ar_slice, ht);
    Tensor hg = relu(linear(concat_last(m_static, m_dynamic), params.at(p + ".gcn.w"),
                            params.at(p + ".gcn.b")));
    return add(h, hg);
  }

  // K raw direction fields [T, N].
  std::vector<Tensor> decode(const Tensor& h) const {
    const std::size_t T = h.shape()[0], n = h.shape()[1];
    Tensor hd = relu(add_bias_last(causal_conv1d(h, params.at("pc.dec.tcn.k")),
                                   params.at("pc.dec.tcn.b")));
    Tensor fields = linear(hd, params.at("pc.dec.out.w"), params.at("pc.dec.out.b"));
    Tensor by_k = permute(fields, {2, 0, 1});  // [K, T, N]
    std::vector<Tensor> out;
    out.reserve(cfg.k);
    for (std::size_t k = 0; k < cfg.k; ++k)
      out.push_back(reshape(slice0(by_k, k, k + 1), {T, n}));
    return out;
  }

  std::vector<Tensor> forward(const Tensor& x_h, const Tensor& x_hat, const Tensor& adj_norm,
                              const Tensor& ar_slice) const {
    Tensor h = encode_concat(x_h, x_hat);
    for (std::size_t l = 0; l < cfg.blocks; ++l)
      h = st_graph_block(h, l, adj_norm, ar_slice);
    return decode(h);
  }

 private:
  static std::string block_prefix(std::size_t l) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "pc.blk%02zu", l);
    return buf;
  }
};

}  // namespace ripcn
