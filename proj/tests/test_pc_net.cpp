#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "oracles.hpp"
#include "ripcn/pc_net.hpp"

using namespace ripcn;

namespace {

PcNetConfig small_cfg() {
  PcNetConfig cfg;
  cfg.k = 2;
  cfg.blocks = 2;
  cfg.hidden = 6;
  cfg.tcn_kernel = 2;
  cfg.tau = 4;
  cfg.horizon = 3;
  return cfg;
}

std::vector<Tensor> random_fields(std::size_t k, Shape shape, Rng& rng) {
  std::vector<Tensor> d;
  for (std::size_t i = 0; i < k; ++i) d.push_back(oracles::random_tensor(shape, rng, false));
  return d;
}

}  // namespace

TEST_CASE("orthogonalize keeps an already-orthonormal set fixed") {
  std::vector<Tensor> d = {Tensor::from({2, 2}, {1, 0, 0, 0}), Tensor::from({2, 2}, {0, 1, 0, 0})};
  auto res = orthogonalize(d);
  REQUIRE(res.components[0].data() == d[0].data());
  for (std::size_t i = 0; i < 4; ++i)
    REQUIRE(res.components[1].data()[i] == Catch::Approx(d[1].data()[i]).margin(1e-15));
  REQUIRE(res.raw_norm_sq[0].value() == Catch::Approx(1.0));
  REQUIRE(res.raw_norm_sq[1].value() == Catch::Approx(1.0));
}

TEST_CASE("orthogonalize raises a degeneracy error carrying the index") {
  Rng rng(71);
  Tensor d1 = oracles::random_tensor({3, 3}, rng, false);
  Tensor d2 = scale(d1, 2.0);
  try {
    orthogonalize({d1, d2});
    FAIL("expected degeneracy_error");
  } catch (const degeneracy_error& e) {
    REQUIRE(e.component == 1);
  }
}

TEST_CASE("orthogonalize matches the classical Gram-Schmidt oracle") {
  Rng rng(73);
  for (int rep = 0; rep < 20; ++rep) {
    auto d = random_fields(3, {2, 2}, rng);
    auto res = orthogonalize(d);
    std::vector<std::vector<double>> flat;
    for (const auto& t : d) flat.push_back(t.data());
    auto want = oracles::gram_schmidt(flat);
    for (std::size_t k = 0; k < 3; ++k)
      for (std::size_t c = 0; c < 4; ++c)
        REQUIRE(res.components[k].data()[c] == Catch::Approx(want[k][c]).margin(1e-10));
    res.to_pcset().validate(1e-10);
  }
}

TEST_CASE("orthogonalize preserves the span of the raw directions") {
  Rng rng(79);
  for (int rep = 0; rep < 10; ++rep) {
    auto d = random_fields(3, {3, 2}, rng);
    auto res = orthogonalize(d);
    // Every d_k must be reproduced by its projections onto the w basis.
    for (const auto& dk : d) {
      std::vector<double> recon(dk.size(), 0.0);
      for (const auto& w : res.components) {
        double proj = 0.0;
        for (std::size_t c = 0; c < dk.size(); ++c) proj += dk.data()[c] * w.data()[c];
        for (std::size_t c = 0; c < dk.size(); ++c) recon[c] += proj * w.data()[c];
      }
      for (std::size_t c = 0; c < dk.size(); ++c)
        REQUIRE(std::abs(recon[c] - dk.data()[c]) < 1e-8);
    }
  }
}

TEST_CASE("training-mode orthogonalize substitutes a fallback direction") {
  Rng rng(83);
  Tensor d1 = oracles::random_tensor({2, 2}, rng, false);
  Tensor d2 = scale(d1, -0.5);
  auto res = orthogonalize({d1, d2}, true);
  REQUIRE(res.fallbacks == std::vector<std::size_t>{1});
  res.to_pcset().validate(1e-10);
}

TEST_CASE("orthogonalize gradients flow through projections and normalization") {
  Rng rng(89);
  auto d = random_fields(2, {2, 2}, rng);
  std::vector<Tensor> params;
  for (auto& t : d) params.push_back(Tensor::param(t.shape(), t.data()));
  Tensor target = oracles::random_tensor({2, 2}, rng, false);
  auto forward = [&] {
    auto res = orthogonalize({params[0], params[1]});
    Tensor acc = square(frobenius_inner(res.components[0], target));
    acc = add(acc, square(frobenius_inner(res.components[1], target)));
    return add(acc, square(sub(res.raw_norm_sq[1], Tensor::scalar(2.0))));
  };
  auto res = oracles::finite_diff_check(forward, params);
  REQUIRE(res.max_rel_err < 1e-4);
}

TEST_CASE("PCSet orthonormality holds over many random forward passes") {
  Rng rng(97);
  auto cfg = small_cfg();
  const std::size_t n = 3;
  std::vector<std::uint8_t> adj(n * n, 1);
  for (std::size_t a = 0; a < n; ++a) adj[a * n + a] = 0;
  Tensor adj_norm = normalized_adjacency(adj, n);
  for (int rep = 0; rep < 50; ++rep) {
    Rng seed_rng(1000 + rep);
    auto net = PcNet::init(cfg, seed_rng);
    Tensor x_h = oracles::random_tensor({cfg.tau, n}, rng, false);
    Tensor x_hat = oracles::random_tensor({cfg.horizon, n}, rng, false);
    Tensor ar = oracles::random_tensor({cfg.horizon, n, n}, rng, false, -0.5, 0.5);
    auto d = net.forward(x_h, x_hat, adj_norm, ar);
    auto pcs = orthogonalize(d).to_pcset();
    REQUIRE_NOTHROW(pcs.validate(1e-8));
    for (std::size_t k = 0; k < pcs.k(); ++k) REQUIRE(pcs.variances[k] == pcs.raw_norms[k]);
  }
}

TEST_CASE("encode_concat zero weights and linearity") {
  Rng rng(101);
  auto cfg = small_cfg();
  auto net = PcNet::init(cfg, rng);
  const std::size_t n = 3;
  Tensor x_h = oracles::random_tensor({cfg.tau, n}, rng, false);
  Tensor x_hat = oracles::random_tensor({cfg.horizon, n}, rng, false);

  SECTION("zero weights give zero hidden state") {
    for (const char* name : {"pc.proj.w", "pc.proj.b", "pc.enc.w", "pc.enc.b"}) {
      auto node = net.params.at(name).node();
      std::fill(node->data.begin(), node->data.end(), 0.0);
    }
    Tensor h0 = net.encode_concat(x_h, x_hat);
    for (double v : h0.data()) REQUIRE(v == 0.0);
  }
  SECTION("doubling inputs doubles pre-bias activations") {
    for (const char* name : {"pc.proj.b", "pc.enc.b"}) {
      auto node = net.params.at(name).node();
      std::fill(node->data.begin(), node->data.end(), 0.0);
    }
    Tensor h1 = net.encode_concat(x_h, x_hat);
    Tensor h2 = net.encode_concat(scale(x_h, 2.0), scale(x_hat, 2.0));
    for (std::size_t i = 0; i < h1.size(); ++i)
      REQUIRE(h2.data()[i] == Catch::Approx(2.0 * h1.data()[i]).margin(1e-12));
  }
  SECTION("gradient vs central differences") {
    auto res = oracles::finite_diff_check(
        [&] { return sum(square(net.encode_concat(x_h, x_hat))); },
        {net.params.at("pc.proj.w"), net.params.at("pc.proj.b"), net.params.at("pc.enc.w"),
         net.params.at("pc.enc.b")});
    REQUIRE(res.max_rel_err < 1e-4);
  }
}

TEST_CASE("st_graph_block reduces to TCN plus skip on a degenerate graph") {
  Rng rng(103);
  auto cfg = small_cfg();
  auto net = PcNet::init(cfg, rng);
  const std::size_t n = 3, F = cfg.hidden;
  // identity static adjacency, zero dynamic graph
  std::vector<double> eye(n * n, 0.0);
  for (std::size_t a = 0; a < n; ++a) eye[a * n + a] = 1.0;
  Tensor adj = Tensor::from({n, n}, eye);
  Tensor ar = Tensor::zeros({cfg.horizon, n, n});
  // mixing weights pass the static branch through unchanged
  auto gw = net.params.at("pc.blk00.gcn.w").node();
  std::fill(gw->data.begin(), gw->data.end(), 0.0);
  for (std::size_t f = 0; f < F; ++f) gw->data[f * F + f] = 1.0;
  auto gb = net.params.at("pc.blk00.gcn.b").node();
  std::fill(gb->data.begin(), gb->data.end(), 0.0);

  Tensor h = oracles::random_tensor({cfg.horizon, n, F}, rng, false);
  Tensor out = net.st_graph_block(h, 0, adj, ar);
  Tensor tcn = relu(add_bias_last(causal_conv1d(h, net.params.at("pc.blk00.tcn.k")),
                                  net.params.at("pc.blk00.tcn.b")));
  Tensor want = add(h, tcn);
  for (std::size_t i = 0; i < out.size(); ++i)
    REQUIRE(out.data()[i] == Catch::Approx(want.data()[i]).margin(1e-12));
}

TEST_CASE("isolated segment receives zero graph message") {
  std::vector<std::uint8_t> adj = {0, 1, 0, 1, 0, 0, 0, 0, 0};  // segment 2 isolated
  Tensor norm = normalized_adjacency(adj, 3);
  REQUIRE(norm.at({2, 0}) == 0.0);
  REQUIRE(norm.at({2, 1}) == 0.0);
  REQUIRE(norm.at({2, 2}) == 0.0);
  Rng rng(107);
  Tensor h = oracles::random_tensor({4, 3, 2}, rng, false);
  Tensor msg = bmm(tile0(norm, 4), h);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t f = 0; f < 2; ++f) REQUIRE(msg.at({t, 2, f}) == 0.0);
}

TEST_CASE("st_graph_block full gradient on a 4-node toy") {
  Rng rng(109);
  PcNetConfig cfg = small_cfg();
  cfg.hidden = 4;
  cfg.horizon = 3;
  auto net = PcNet::init(cfg, rng);
  const std::size_t n = 4;
  std::vector<std::uint8_t> adj(n * n, 1);
  for (std::size_t a = 0; a < n; ++a) adj[a * n + a] = 0;
  Tensor adj_norm = normalized_adjacency(adj, n);
  Tensor ar = oracles::random_tensor({cfg.horizon, n, n}, rng, true, -0.5, 0.5);
  Tensor h = oracles::random_tensor({cfg.horizon, n, cfg.hidden}, rng);
  auto res = oracles::finite_diff_check(
      [&] { return sum(square(net.st_graph_block(h, 0, adj_norm, ar))); },
      {h, ar, net.params.at("pc.blk00.tcn.k"), net.params.at("pc.blk00.tcn.b"),
       net.params.at("pc.blk00.gcn.w"), net.params.at("pc.blk00.gcn.b")});
  REQUIRE(res.max_rel_err < 1e-4);
}

TEST_CASE("st_graph_block output at time t ignores later inputs") {
  Rng rng(113);
  auto cfg = small_cfg();
  auto net = PcNet::init(cfg, rng);
  const std::size_t n = 3, cut = 1;
  std::vector<std::uint8_t> adj(n * n, 1);
  for (std::size_t a = 0; a < n; ++a) adj[a * n + a] = 0;
  Tensor adj_norm = normalized_adjacency(adj, n);
  Tensor ar = oracles::random_tensor({cfg.horizon, n, n}, rng, false);
  std::vector<double> base(cfg.horizon * n * cfg.hidden);
  for (auto& v : base) v = rng.uniform(-1, 1);
  auto perturbed = base;
  for (std::size_t i = (cut + 1) * n * cfg.hidden; i < perturbed.size(); ++i) perturbed[i] += 3.0;
  Tensor y1 = net.st_graph_block(Tensor::from({cfg.horizon, n, cfg.hidden}, base), 0, adj_norm, ar);
  Tensor y2 = net.st_graph_block(Tensor::from({cfg.horizon, n, cfg.hidden}, perturbed), 0, adj_norm, ar);
  for (std::size_t i = 0; i <= cut; ++i)
    for (std::size_t c = 0; c < n * cfg.hidden; ++c)
      REQUIRE(y1.data()[i * n * cfg.hidden + c] == y2.data()[i * n * cfg.hidden + c]);
}

TEST_CASE("decode emits K fields and honors zero weights") {
  Rng rng(127);
  auto cfg = small_cfg();
  const std::size_t n = 3;

  SECTION("zero hidden state and zero bias give zero directions") {
    auto net = PcNet::init(cfg, rng);
    for (const char* name : {"pc.dec.tcn.b", "pc.dec.out.b"}) {
      auto node = net.params.at(name).node();
      std::fill(node->data.begin(), node->data.end(), 0.0);
    }
    auto d = net.decode(Tensor::zeros({cfg.horizon, n, cfg.hidden}));
    REQUIRE(d.size() == cfg.k);
    for (const auto& f : d)
      for (double v : f.data()) REQUIRE(v == 0.0);
  }
  SECTION("K=1 shape contract") {
    PcNetConfig one = cfg;
    one.k = 1;
    auto net = PcNet::init(one, rng);
    auto d = net.decode(oracles::random_tensor({one.horizon, n, one.hidden}, rng, false));
    REQUIRE(d.size() == 1);
    REQUIRE(d[0].shape() == Shape{one.horizon, n});
  }
  SECTION("gradient vs central differences") {
    auto net = PcNet::init(cfg, rng);
    Tensor h = oracles::random_tensor({cfg.horizon, n, cfg.hidden}, rng);
    auto forward = [&] {
      auto d = net.decode(h);
      Tensor acc = sum(square(d[0]));
      for (std::size_t k = 1; k < d.size(); ++k) acc = add(acc, sum(square(d[k])));
      return acc;
    };
    auto res = oracles::finite_diff_check(
        forward, {h, net.params.at("pc.dec.tcn.k"), net.params.at("pc.dec.out.w")});
    REQUIRE(res.max_rel_err < 1e-4);
  }
}

TEST_CASE("frozen pipeline is a pure function of its inputs") {
  Rng rng(131);
  auto cfg = small_cfg();
  auto net = PcNet::init(cfg, rng);
  const std::size_t n = 3;
  std::vector<std::uint8_t> adj(n * n, 1);
  for (std::size_t a = 0; a < n; ++a) adj[a * n + a] = 0;
  Tensor adj_norm = normalized_adjacency(adj, n);
  Tensor x_h = oracles::random_tensor({cfg.tau, n}, rng, false);
  Tensor x_hat = oracles::random_tensor({cfg.horizon, n}, rng, false);
  Tensor ar = oracles::random_tensor({cfg.horizon, n, n}, rng, false);
  auto p1 = orthogonalize(net.forward(x_h, x_hat, adj_norm, ar)).to_pcset();
  auto p2 = orthogonalize(net.forward(x_h, x_hat, adj_norm, ar)).to_pcset();
  REQUIRE(p1.components.data() == p2.components.data());
  REQUIRE(p1.variances == p2.variances);
}

TEST_CASE("seasonal persistence continues a periodic signal exactly") {
  const std::size_t period = 24, tau = 24, T = 24, n = 2;
  auto mean = MeanPredictor::seasonal(period, tau, T);
  std::vector<double> hist(tau * n);
  for (std::size_t t = 0; t < tau; ++t)
    for (std::size_t a = 0; a < n; ++a)
      hist[t * n + a] = std::sin(2.0 * M_PI * t / period) + static_cast<double>(a);
  Tensor x_h = Tensor::from({tau, n}, hist);
  Tensor pred = mean.predict(x_h, Tensor::zeros({n, n}));
  double mae = 0.0;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t a = 0; a < n; ++a) {
      const double truth = std::sin(2.0 * M_PI * (tau + t) / period) + static_cast<double>(a);
      mae += std::abs(pred.at({t, a}) - truth);
    }
  REQUIRE(mae / (T * n) < 1e-12);
}

TEST_CASE("persistence of a constant series is the constant") {
  auto mean = MeanPredictor::seasonal(4, 8, 6);
  Tensor pred = mean.predict(Tensor::full({8, 3}, 7.5), Tensor::zeros({3, 3}));
  for (double v : pred.data()) REQUIRE(v == 7.5);
}

TEST_CASE("unfitted tcn mean predictor raises a state error") {
  Rng rng(137);
  MeanTcnConfig cfg;
  cfg.tau = 4;
  cfg.horizon = 3;
  cfg.hidden = 4;
  auto mean = MeanPredictor::tcn_head(cfg, rng);
  REQUIRE_FALSE(mean.fitted());
  REQUIRE_THROWS_AS(mean.predict(Tensor::zeros({4, 2}), Tensor::zeros({2, 2})), state_error);
}

TEST_CASE("seasonal predictor rejects a period longer than the history") {
  REQUIRE_THROWS_AS(MeanPredictor::seasonal(13, 12, 12), parameter_error);
}
