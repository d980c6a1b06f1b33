#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "ripcn/errors.hpp"
#include "ripcn/param_store.hpp"
#include "ripcn/tensor.hpp"

namespace ripcn {

struct EvolutionNetConfig {
  std::size_t hidden = 32;   // F
  std::size_t heads = 12;
  std::size_t tau = 12;      // history length
  std::size_t horizon = 12;  // T

  void validate() const {
    if (hidden == 0 || heads == 0 || tau == 0 || horizon == 0) {
      throw config_error("evolution net: dimensions must be positive");
    }
    if (hidden % heads != 0) {
      throw config_error("evolution net: hidden dim " + std::to_string(hidden) +
                         " not divisible by " + std::to_string(heads) + " heads");
    }
  }
};

// Time-indexed signed edge weights over the road graph. Edge (a,b) carries
// the negated impedance difference, so weight flows toward the cheaper
// segment; weights on mutually connected pairs are exactly antisymmetric.
struct ImpedanceGraph {
  Tensor weights;                       // [(tau+T), N, N]
  std::vector<std::uint8_t> mask;       // N*N connectivity indicator
  std::size_t n_segments = 0;

  void validate() const {
    const std::size_t n = n_segments;
    const std::size_t slices = weights.shape()[0];
    for (std::size_t t = 0; t < slices; ++t)
      for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = 0; b < n; ++b) {
          const double w = weights.data()[(t * n + a) * n + b];
          if (!mask[a * n + b] && w != 0.0) {
            throw numeric_error("impedance graph: weight on unconnected pair");
          }
          if (mask[a * n + b] && mask[b * n + a]) {
            const double wr = weights.data()[(t * n + b) * n + a];
            if (w + wr != 0.0) throw numeric_error("impedance graph: antisymmetry violated");
          }
        }
  }
};

// weights[t,a,b] = -(v[t,a] - v[t,b]) * mask[a,b]
inline Tensor pairwise_diff_graph(const Tensor& values, const std::vector<std::uint8_t>& mask) {
  if (values.rank() != 2) throw dimension_error("pairwise_diff_graph: expected [steps, N] values");
  const std::size_t steps = values.shape()[0], n = values.shape()[1];
  if (mask.size() != n * n) throw dimension_error("pairwise_diff_graph: mask size mismatch");
  std::vector<double> out(steps * n * n, 0.0);
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = 0; b < n; ++b) {
        if (!mask[a * n + b]) continue;
        out[(t * n + a) * n + b] = -(values.data()[t * n + a] - values.data()[t * n + b]);
      }
  auto vn = values.node();
  return detail::op_result({steps, n, n}, std::move(out), {values},
                           [vn, steps, n, mask](detail::Node& nd) {
    if (!vn->requires_grad) return;
    detail::ensure_grad(*vn);
    for (std::size_t t = 0; t < steps; ++t)
      for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = 0; b < n; ++b) {
          if (!mask[a * n + b]) continue;
          const double g = nd.grad[(t * n + a) * n + b];
          vn->grad[t * n + a] -= g;
          vn->grad[t * n + b] += g;
        }
  });
}

// Seq-to-seq attention head bank: learned query slots (one per future step)
// attend over the hidden history, so a horizon of any length can be read out
// of tau history positions.
class EvolutionNet {
 public:
  EvolutionNetConfig cfg;
  ParamStore params;

  static EvolutionNet init(const EvolutionNetConfig& cfg, Rng& rng) {
    cfg.validate();
    EvolutionNet net;
    net.cfg = cfg;
    const auto F = cfg.hidden;
    const double fd = static_cast<double>(F);
    init_param(net.params, "evo.enc.w", {1, F}, rng, 1.0, fd);
    init_zeros(net.params, "evo.enc.b", {F});
    init_param(net.params, "evo.attn.wq", {F, F}, rng, fd, fd);
    init_param(net.params, "evo.attn.wk", {F, F}, rng, fd, fd);
    init_param(net.params, "evo.attn.wv", {F, F}, rng, fd, fd);
    init_param(net.params, "evo.attn.wo", {F, F}, rng, fd, fd);
    init_param(net.params, "evo.attn.queries", {cfg.horizon, F}, rng, fd, fd);
    init_param(net.params, "evo.dec.w", {F, 1}, rng, fd, 1.0);
    init_zeros(net.params, "evo.dec.b", {1});
    return net;
  }

  static EvolutionNet from_params(const EvolutionNetConfig& cfg, ParamStore store) {
    cfg.validate();
    EvolutionNet net;
    net.cfg = cfg;
    net.params = std::move(store);
    return net;
  }

  // [tau, N, 1] impedance -> [tau, N, F]; one affine map shared across time
  // and segments.
  Tensor encode(const Tensor& r_h) const {
    if (r_h.rank() != 3 || r_h.shape()[2] != 1) {
      throw dimension_error("encode: expected [tau, N, 1], got " + detail::shape_str(r_h.shape()));
    }
    return linear(r_h, params.at("evo.enc.w"), params.at("evo.enc.b"));
  }

  // [tau, N, F] -> [T, N, F]. Per-segment multi-head scaled dot-product
  // attention; `logit_shift` adds a constant to every attention logit (used
  // by the softmax shift-invariance check).
  Tensor evolve(const Tensor& hidden, double logit_shift = 0.0) const {
    const std::size_t tau = hidden.shape()[0], n = hidden.shape()[1], F = hidden.shape()[2];
    if (hidden.rank() != 3 || F != cfg.hidden || tau != cfg.tau) {
      throw dimension_error("evolve: hidden shape " + detail::shape_str(hidden.shape()) +
                            " inconsistent with config");
    }
    const std::size_t H = cfg.heads, dh = F / H, T = cfg.horizon;

    Tensor keys = linear(hidden, params.at("evo.attn.wk"));    // [tau,N,F]
    Tensor vals = linear(hidden, params.at("evo.attn.wv"));    // [tau,N,F]
    Tensor queries = matmul(params.at("evo.attn.queries"), params.at("evo.attn.wq"));  // [T,F]

    // [tau,N,F] -> [N*H, tau, dh]
    auto to_batches = [&](const Tensor& x) {
      return reshape(permute(reshape(x, {tau, n, H, dh}), {1, 2, 0, 3}), {n * H, tau, dh});
    };
    Tensor kb = to_batches(keys);
    Tensor vb = to_batches(vals);
    // [T,F] -> [N*H, T, dh], identical queries for every segment
    Tensor qb = reshape(tile0(reshape(permute(reshape(queries, {T, H, dh}), {1, 0, 2}),
                                      {H, T, dh}), n),
                        {n * H, T, dh});

    Tensor scores = scale(bmm(qb, permute(kb, {0, 2, 1})), 1.0 / std::sqrt(static_cast<double>(dh)));
    if (logit_shift != 0.0) scores = add(scores, Tensor::full(scores.shape(), logit_shift));
    Tensor attn = softmax_rows(scores);       // [N*H, T, tau]
    Tensor ctx = bmm(attn, vb);               // [N*H, T, dh]
    Tensor merged = reshape(permute(reshape(ctx, {n, H, T, dh}), {2, 0, 1, 3}), {T, n, F});
    return linear(merged, params.at("evo.attn.wo"));
  }

  // Shared affine readout from hidden representation to impedance value.
  Tensor decode_values(const Tensor& hidden) const {
    Tensor v = linear(hidden, params.at("evo.dec.w"), params.at("evo.dec.b"));
    Shape flat(hidden.shape().begin(), hidden.shape().end() - 1);
    return reshape(v, flat);
  }

  struct Output {
    Tensor values_full;          // [(tau+T), N] decoded impedance values
    Tensor predicted_impedance;  // [T, N] the future part
  };

  // r_h_values: [tau, N] impedance computed from historical flows.
  Output forward(const Tensor& r_h_values) const {
    const std::size_t tau = r_h_values.shape()[0], n = r_h_values.shape()[1];
    Tensor hidden_h = encode(reshape(r_h_values, {tau, n, 1}));
    Tensor hidden_p = evolve(hidden_h);
    Tensor full_hidden = concat0(hidden_h, hidden_p);
    Tensor values = decode_values(full_hidden);  // [(tau+T), N]
    Tensor pred = slice0(values, tau, tau + cfg.horizon);
    return Output{values, pred};
  }

  ImpedanceGraph build_graph(const Tensor& values_full,
                             const std::vector<std::uint8_t>& mask) const {
    ImpedanceGraph g;
    g.n_segments = values_full.shape()[1];
    g.mask = mask;
    g.weights = pairwise_diff_graph(values_full, mask);
    return g;
  }
};

// Squared residual, mean-reduced over all cells so the magnitude does not
// scale with network size.
inline Tensor impedance_loss(const Tensor& truth, const Tensor& pred) {
  detail::require_same_shape(truth, pred, "impedance_loss");
  return mean_all(square(sub(truth, pred)));
}

// Nonzero entries as CSV rows `t,a,b,weight`.
inline void export_graph_csv(const ImpedanceGraph& g, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw data_error("cannot open for writing: " + path);
  os << "t,a,b,weight\n";
  const std::size_t n = g.n_segments, slices = g.weights.shape()[0];
  for (std::size_t t = 0; t < slices; ++t)
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = 0; b < n; ++b) {
        const double w = g.weights.data()[(t * n + a) * n + b];
        if (w != 0.0) os << t << "," << a << "," << b << "," << w << "\n";
      }
}

}  // namespace ripcn
