#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "ripcn/impedance.hpp"

using namespace ripcn;

TEST_CASE("estimate_capacity substitution values") {
  // symmetric case: s_a == s_mean, o_a == o_mean
  REQUIRE(estimate_capacity(100, 50, 0.2, 50, 0.2) == Catch::Approx(200.0).epsilon(1e-15));
  // s_a = 2 s_mean, o_a = o_mean
  REQUIRE(estimate_capacity(100, 100, 0.2, 50, 0.2) == Catch::Approx(250.0).epsilon(1e-15));
  // X_max = 229, s_a = 0.8 s_mean, o_a = 1.25 o_mean
  REQUIRE(estimate_capacity(229, 40, 0.25, 50, 0.2) == Catch::Approx(412.2).epsilon(1e-12));
}

TEST_CASE("estimate_capacity degenerate inputs") {
  REQUIRE_THROWS_AS(estimate_capacity(100, 50, 0.0, 50, 0.2), degenerate_input_error);
  REQUIRE_THROWS_AS(estimate_capacity(100, 50, 0.2, 0.0, 0.2), degenerate_input_error);
  REQUIRE_THROWS_AS(estimate_capacity(0.0, 50, 0.2, 50, 0.2), degenerate_input_error);
}

TEST_CASE("estimate_capacity monotonicity in speed and occupancy") {
  Rng rng(41);
  for (int rep = 0; rep < 50; ++rep) {
    const double x = rng.uniform(10, 500), sm = rng.uniform(20, 80), om = rng.uniform(0.05, 0.5);
    const double s1 = rng.uniform(10, 100), s2 = s1 + rng.uniform(0.1, 20);
    const double o1 = rng.uniform(0.05, 0.5), o2 = o1 + rng.uniform(0.01, 0.3);
    REQUIRE(estimate_capacity(x, s2, o1, sm, om) > estimate_capacity(x, s1, o1, sm, om));
    REQUIRE(estimate_capacity(x, s1, o2, sm, om) < estimate_capacity(x, s1, o1, sm, om));
  }
}

TEST_CASE("capacity_proxy is the identity on positive flow") {
  REQUIRE(capacity_proxy(100) == 100.0);
  REQUIRE(capacity_proxy(1) == 1.0);
  REQUIRE(capacity_proxy(879) == 879.0);
  REQUIRE_THROWS_AS(capacity_proxy(0.0), degenerate_input_error);
}

TEST_CASE("window_stats mean and population std") {
  auto [m1, s1] = window_stats({5, 5, 5});
  REQUIRE(m1 == 5.0);
  REQUIRE(s1 == 0.0);

  auto [m2, s2] = window_stats({0, 2});
  REQUIRE(m2 == 1.0);
  REQUIRE(s2 == 1.0);

  REQUIRE_THROWS_AS(window_stats({1.0}), parameter_error);

  Rng rng(43);
  std::vector<double> w(12);
  for (auto& v : w) v = rng.uniform(0, 100);
  auto [mu, sigma] = window_stats(w);
  auto [om, os] = oracles::two_pass_stats(w);
  REQUIRE(mu == Catch::Approx(om).margin(1e-12));
  REQUIRE(sigma == Catch::Approx(os).margin(1e-12));
}

TEST_CASE("impedance free-flow, capacity and variability cases") {
  RoadFeatures f;
  f.capacity = 100;
  f.free_flow_time = 1.0;
  REQUIRE(impedance(0.0, f) == 1.0);

  REQUIRE(impedance(100.0, f) == Catch::Approx(1.15).epsilon(1e-15));

  f.window_mean = 10;
  f.window_std = 10;  // sigma == mu doubles the travel time
  REQUIRE(impedance(100.0, f) == Catch::Approx(2.30).epsilon(1e-15));
}

TEST_CASE("impedance zero-mean window uses unit variability factor") {
  RoadFeatures f;
  f.capacity = 50;
  f.window_mean = 0.0;
  f.window_std = 0.0;
  REQUIRE(impedance(25.0, f) == Catch::Approx(1.0 + 0.15 * std::pow(0.5, 4)));
}

TEST_CASE("impedance is monotone in flow and bounded below by t_a") {
  Rng rng(47);
  for (int rep = 0; rep < 100; ++rep) {
    RoadFeatures f;
    f.free_flow_time = rng.uniform(0.5, 2.0);
    f.capacity = rng.uniform(10, 200);
    f.window_mean = rng.uniform(0, 50);
    f.window_std = rng.uniform(0, 20);
    const double x1 = rng.uniform(0, 300);
    const double x2 = x1 + rng.uniform(0, 100);
    REQUIRE(impedance(x2, f) >= impedance(x1, f));
    RoadFeatures calm = f;
    calm.window_std = 0.0;
    REQUIRE(impedance(x1, calm) >= calm.free_flow_time);
  }
}

TEST_CASE("impedance_series equals scalar impedance cellwise") {
  Rng rng(53);
  const std::size_t tau = 12, n = 3;
  std::vector<RoadFeatures> feats(n);
  for (auto& f : feats) {
    f.capacity = rng.uniform(50, 150);
    f.window_mean = rng.uniform(1, 40);
    f.window_std = rng.uniform(0, 10);
  }
  Tensor flows = oracles::random_tensor({tau, n}, rng, false, 0.0, 200.0);
  Tensor series = impedance_series(flows, feats);
  for (std::size_t t = 0; t < tau; ++t)
    for (std::size_t a = 0; a < n; ++a)
      REQUIRE(series.at({t, a}) == impedance(flows.at({t, a}), feats[a]));

  REQUIRE_THROWS_AS(impedance_series(flows, std::vector<RoadFeatures>(n + 1)), dimension_error);
}

TEST_CASE("impedance_series broadcast cases") {
  std::vector<RoadFeatures> feats(1);
  feats[0].capacity = 80;
  feats[0].free_flow_time = 1.0;
  feats[0].window_mean = 4;
  feats[0].window_std = 2;
  Tensor at_capacity = Tensor::full({5, 1}, 80.0);
  Tensor series = impedance_series(at_capacity, feats);
  for (double v : series.data()) REQUIRE(v == Catch::Approx(1.15 * 1.5).epsilon(1e-14));

  feats[0].window_std = 0.0;
  Tensor free_flow = impedance_series(Tensor::zeros({5, 1}), feats);
  for (double v : free_flow.data()) REQUIRE(v == 1.0);
}
