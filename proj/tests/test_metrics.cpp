#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "oracles.hpp"
#include "ripcn/metrics.hpp"

using namespace ripcn;

TEST_CASE("point metrics hand cases") {
  Rng rng(301);
  Tensor truth = Tensor::full({2, 3}, 10.0);
  auto perfect = point_metrics(truth, truth);
  REQUIRE(perfect.mae == 0.0);
  REQUIRE(perfect.rmse == 0.0);
  REQUIRE(perfect.mape == 0.0);

  Tensor off = Tensor::full({2, 3}, 11.0);
  auto m = point_metrics(off, truth);
  REQUIRE(m.mae == 1.0);
  REQUIRE(m.rmse == 1.0);
  REQUIRE(m.mape == Catch::Approx(10.0));

  REQUIRE_THROWS_AS(point_metrics(off, Tensor::zeros({3, 2})), dimension_error);
}

TEST_CASE("point metrics match a loop oracle and rmse >= mae") {
  Rng rng(307);
  for (int rep = 0; rep < 20; ++rep) {
    Tensor pred = oracles::random_tensor({4, 5}, rng, false, 0, 50);
    Tensor truth = oracles::random_tensor({4, 5}, rng, false, 0, 50);
    auto m = point_metrics(pred, truth);
    double mae = 0, se = 0, ape = 0;
    std::size_t cnt = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double e = pred.data()[i] - truth.data()[i];
      mae += std::abs(e);
      se += e * e;
      if (truth.data()[i] >= 1.0) {
        ape += std::abs(e) / truth.data()[i];
        ++cnt;
      }
    }
    REQUIRE(m.mae == Catch::Approx(mae / pred.size()).margin(1e-12));
    REQUIRE(m.rmse == Catch::Approx(std::sqrt(se / pred.size())).margin(1e-12));
    REQUIRE(m.mape == Catch::Approx(100.0 * ape / cnt).margin(1e-12));
    REQUIRE(m.rmse >= m.mae);
  }
}

TEST_CASE("mape masks near-zero truth cells") {
  Tensor truth = Tensor::from({1, 3}, {0.5, 10.0, 20.0});
  Tensor pred = Tensor::from({1, 3}, {100.0, 11.0, 22.0});
  auto m = point_metrics(pred, truth, 1.0);
  REQUIRE(m.mape == Catch::Approx(10.0));  // the 0.5 cell is excluded
}

TEST_CASE("crps of a degenerate forecast at the truth is zero") {
  Tensor truth = Tensor::from({2, 2}, {1, 2, 3, 4});
  std::vector<double> s;
  for (int i = 0; i < 3; ++i) s.insert(s.end(), truth.data().begin(), truth.data().end());
  REQUIRE(crps_quantile_unnormalized(Tensor::from({3, 2, 2}, s), truth) == 0.0);
}

TEST_CASE("crps uniform-pair case matches the exhaustive hand loop") {
  Tensor samples = Tensor::from({2, 1}, {0.0, 1.0});
  Tensor truth = Tensor::from({1}, {0.5});
  const double got = crps_quantile_unnormalized(samples, truth);
  REQUIRE(got == Catch::Approx(oracles::crps_scalar({0.0, 1.0}, 0.5)).margin(1e-15));
}

TEST_CASE("crps is invariant to a common shift of samples and truth") {
  Rng rng(311);
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<double> s(20);
    for (auto& v : s) v = rng.uniform(-5, 5);
    const double z = rng.uniform(-5, 5), shift = rng.uniform(-100, 100);
    auto shifted = s;
    for (auto& v : shifted) v += shift;
    const double a = crps_quantile_unnormalized(Tensor::from({20, 1}, s), Tensor::from({1}, {z}));
    const double b = crps_quantile_unnormalized(Tensor::from({20, 1}, shifted),
                                                Tensor::from({1}, {z + shift}));
    REQUIRE(a == Catch::Approx(b).margin(1e-12));
  }
}

TEST_CASE("crps matches the literal transcription on random scalar instances") {
  Rng rng(313);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t m = 2 + rng.index(30);
    std::vector<double> s(m);
    for (auto& v : s) v = rng.uniform(-10, 10);
    const double z = rng.uniform(-12, 12);
    const double got =
        crps_quantile_unnormalized(Tensor::from({m, 1}, s), Tensor::from({1}, {z}));
    REQUIRE(std::abs(got - oracles::crps_scalar(s, z)) < 1e-10);
  }
}

TEST_CASE("normalized crps divides by mean absolute truth") {
  Rng rng(317);
  std::vector<double> s(10);
  for (auto& v : s) v = rng.uniform(0, 10);
  Tensor samples = Tensor::from({10, 1}, s);
  Tensor truth = Tensor::from({1}, {5.0});
  REQUIRE(crps_quantile(samples, truth) ==
          Catch::Approx(crps_quantile_unnormalized(samples, truth) / 5.0).margin(1e-14));
}

TEST_CASE("mis hand cases") {
  // truth inside the interval: score is the width
  {
    std::vector<double> s;
    for (int i = 0; i < 41; ++i) s.push_back(static_cast<double>(i) / 40.0);
    Tensor samples = Tensor::from({41, 1}, s);
    const double l = 0.025, u = 0.975;  // exact percentiles of the grid
    const double got = mis(samples, Tensor::from({1}, {0.5}));
    REQUIRE(got == Catch::Approx(u - l).margin(1e-12));
  }
  // l=0, u=1, z=2, rho=0.05 -> 41
  {
    std::vector<double> s;
    for (int i = 0; i < 41; ++i) s.push_back(static_cast<double>(i) / 40.0);
    // stretch so that the 2.5/97.5 percentiles are exactly 0 and 1
    for (auto& v : s) v = (v - 0.025) / 0.95;
    const double got = mis(Tensor::from({41, 1}, s), Tensor::from({1}, {2.0}));
    REQUIRE(got == Catch::Approx(41.0).margin(1e-9));
  }
}

TEST_CASE("mis matches the literal formula transcription") {
  Rng rng(331);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t m = 5 + rng.index(40);
    std::vector<double> s(m);
    for (auto& v : s) v = rng.uniform(-10, 10);
    const double z = rng.uniform(-15, 15);
    const double got = mis(Tensor::from({m, 1}, s), Tensor::from({1}, {z}));
    const double u = oracles::quantile_interp(s, 0.975);
    const double l = oracles::quantile_interp(s, 0.025);
    REQUIRE(std::abs(got - oracles::mis_scalar(u, l, z, 0.05)) < 1e-10);
  }
}

TEST_CASE("mis shrinks as the interval tightens around an interior truth") {
  // Wider sample clouds must score worse when the truth stays covered.
  double prev = std::numeric_limits<double>::infinity();
  for (double width : {8.0, 4.0, 2.0, 1.0}) {
    std::vector<double> s;
    for (int i = 0; i < 21; ++i) s.push_back(5.0 + width * (i / 20.0 - 0.5));
    const double score = mis(Tensor::from({21, 1}, s), Tensor::from({1}, {5.0}));
    REQUIRE(score < prev);
    prev = score;
  }
}

TEST_CASE("metrics are invariant to a cell permutation") {
  Rng rng(337);
  const std::size_t cells = 6, m = 12;
  std::vector<double> s(m * cells), z(cells);
  for (auto& v : s) v = rng.uniform(-5, 5);
  for (auto& v : z) v = rng.uniform(-5, 5);
  std::vector<std::size_t> perm = {3, 0, 5, 1, 4, 2};
  std::vector<double> sp(m * cells), zp(cells);
  for (std::size_t c = 0; c < cells; ++c) {
    zp[c] = z[perm[c]];
    for (std::size_t i = 0; i < m; ++i) sp[i * cells + c] = s[i * cells + perm[c]];
  }
  Tensor S = Tensor::from({m, cells}, s), Z = Tensor::from({cells}, z);
  Tensor Sp = Tensor::from({m, cells}, sp), Zp = Tensor::from({cells}, zp);
  REQUIRE(crps_quantile_unnormalized(S, Z) ==
          Catch::Approx(crps_quantile_unnormalized(Sp, Zp)).margin(1e-12));
  REQUIRE(mis(S, Z) == Catch::Approx(mis(Sp, Zp)).margin(1e-12));
  auto pm = point_metrics(slice0(S, 0, 1), reshape(Z, {1, cells}));
  auto pmp = point_metrics(slice0(Sp, 0, 1), reshape(Zp, {1, cells}));
  REQUIRE(pm.mae == Catch::Approx(pmp.mae).margin(1e-12));
  REQUIRE(pm.rmse == Catch::Approx(pmp.rmse).margin(1e-12));
}

TEST_CASE("eval report serializes through json") {
  EvalReport r;
  r.mae = 1.5;
  r.rmse = 2.5;
  r.mape = 10.0;
  r.crps = 0.05;
  r.crps_unnormalized = 3.1;
  r.mis = 41.0;
  r.mean_predictor_mae = 2.0;
  r.mae_by_horizon = {1.0, 2.0};
  r.rmse_by_horizon = {1.5, 2.5};
  r.mape_by_horizon = {9.0, 11.0};
  r.crps_by_horizon = {0.04, 0.06};
  r.mis_by_horizon = {40.0, 42.0};
  auto back = EvalReport::from_json(r.to_json());
  REQUIRE(back.mae == r.mae);
  REQUIRE(back.mis_by_horizon == r.mis_by_horizon);
  REQUIRE(back.crps_normalization == "mean_abs_truth");
}

TEST_CASE("sample/truth shape mismatches are rejected") {
  Tensor samples = Tensor::zeros({5, 4});
  REQUIRE_THROWS_AS(crps_quantile_unnormalized(samples, Tensor::zeros({3})), dimension_error);
  REQUIRE_THROWS_AS(mis(samples, Tensor::zeros({5})), dimension_error);
  REQUIRE_THROWS_AS(mis(Tensor::zeros({1, 4}), Tensor::zeros({4})), parameter_error);
}
