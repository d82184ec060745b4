#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "cfmimo/channel.hpp"

using namespace cfmimo;

namespace {

// Spearman rank correlation for the path-loss monotonicity property.
double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  auto ranks = [n](const std::vector<double>& v) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0u);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n; ++i) r[order[i]] = static_cast<double>(i);
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= n;
  my /= n;
  double num = 0, dx = 0, dy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    num += (rx[i] - mx) * (ry[i] - my);
    dx += (rx[i] - mx) * (rx[i] - mx);
    dy += (ry[i] - my) * (ry[i] - my);
  }
  return num / std::sqrt(dx * dy);
}

}  // namespace

TEST_CASE("steering vector basics") {
  const CVec broadside = steering_vector(4, 0.0, 0.5);
  for (int k = 0; k < 4; ++k) CHECK(broadside(k) == cx(1.0, 0.0));

  const CVec endfire = steering_vector(2, kPi / 2, 0.5);
  CHECK(endfire(0) == cx(1.0, 0.0));
  CHECK(std::abs(endfire(1) - cx(-1.0, 0.0)) < 1e-15);

  const CVec v = steering_vector(8, 0.3, 0.5);
  CHECK(v(0) == cx(1.0, 0.0));
  for (int k = 0; k < 8; ++k) CHECK(std::abs(std::abs(v(k)) - 1.0) < 1e-15);
  // direct formula evaluation
  for (int k = 0; k < 8; ++k) {
    const double ph = 2.0 * kPi * 0.5 * k * std::sin(0.3);
    CHECK(std::abs(v(k) - std::polar(1.0, ph)) < 1e-14);
  }
}

TEST_CASE("ray sums degenerate as expected") {
  const CVec one_ray = ray_sum(4, 0.5, {{cx(1, 0), 0.0}});
  for (int k = 0; k < 4; ++k) CHECK(std::abs(one_ray(k) - cx(1, 0)) < 1e-15);

  const CVec cancel = ray_sum(4, 0.5, {{cx(1, 0), 0.2}, {cx(-1, 0), 0.2}});
  CHECK(cancel.norm() < 1e-15);
}

TEST_CASE("dataset generation is deterministic in config and seed") {
  ScenarioConfig cfg;
  cfg.seed = 2024;
  const Dataset a = generate_dataset(cfg, 20);
  const Dataset b = generate_dataset(cfg, 20);
  REQUIRE(a.samples.size() == b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    CHECK((a.samples[i].h - b.samples[i].h).norm() == 0.0);
    CHECK(a.drops[i] == b.drops[i]);
  }
  cfg.seed = 2025;
  const Dataset c = generate_dataset(cfg, 20);
  CHECK((a.samples[0].h - c.samples[0].h).norm() > 0.0);
}

TEST_CASE("split bookkeeping") {
  ScenarioConfig cfg;
  const Dataset one = generate_dataset(cfg, 1);
  CHECK(one.train_count() == 1);
  CHECK(one.test_count() == 0);

  const Dataset d = generate_dataset(cfg, 100, 0.85);
  CHECK(d.train_count() == 85);
  CHECK(d.test_count() == 15);
}

TEST_CASE("channels are finite and no user is fully blocked") {
  ScenarioConfig cfg;
  const Dataset d = generate_dataset(cfg, 50);
  for (const auto& cs : d.samples) {
    CHECK(cs.h.allFinite());
    for (int u = 0; u < cs.users; ++u) CHECK(cs.h.col(u).norm() > 0.0);
  }
}

TEST_CASE("same grid point always carries the same channel") {
  ScenarioConfig cfg;
  cfg.geometry.grid_per_side = 3;  // tiny grid forces drop collisions
  const Scenario s = make_scenario(cfg);
  const Dataset d = generate_dataset(s, 60);
  int collisions = 0;
  for (std::size_t i = 0; i < d.samples.size(); ++i)
    for (std::size_t j = i + 1; j < d.samples.size(); ++j)
      for (int u = 0; u < cfg.user_count; ++u)
        for (int w = 0; w < cfg.user_count; ++w)
          if (d.drops[i][u] == d.drops[j][w]) {
            ++collisions;
            CHECK((d.samples[i].h.col(u) - d.samples[j].h.col(w)).norm() ==
                  0.0);
          }
  REQUIRE(collisions > 0);
}

TEST_CASE("expected channel energy decays with distance") {
  ScenarioConfig cfg;
  cfg.seed = 5;
  const Scenario s = make_scenario(cfg);
  const Dataset d = generate_dataset(s, 600);
  std::vector<double> dists, energies;
  for (std::size_t i = 0; i < d.samples.size(); ++i)
    for (int u = 0; u < cfg.user_count; ++u) {
      const auto& pos = s.grid[static_cast<std::size_t>(d.drops[i][u])];
      for (int m = 0; m < cfg.ap_count; ++m) {
        const double dx = pos[0] - s.ap_pos[m][0];
        const double dy = pos[1] - s.ap_pos[m][1];
        dists.push_back(std::sqrt(dx * dx + dy * dy));
        energies.push_back(
            d.samples[i].h.block(m * cfg.antennas_per_ap, u,
                                 cfg.antennas_per_ap, 1)
                .squaredNorm());
      }
    }
  CHECK(spearman(dists, energies) < 0.0);
}

TEST_CASE("mean snr anchoring inverts correctly") {
  ScenarioConfig cfg;
  const Scenario s = make_scenario(cfg);
  const double energy = mean_channel_energy(s);
  REQUIRE(energy > 0.0);
  const double s2 = sigma2_for_mean_snr(s, 10.0);
  const double snr = cfg.p_max * energy / (cfg.user_count * s2);
  CHECK(std::abs(snr - 10.0) < 1e-9 * 10.0 + 1e-12);
}

TEST_CASE("explicit ap positions are honored and validated") {
  ScenarioConfig cfg;
  cfg.geometry.ap_positions = {{0.0, 20.0}, {20.0, 0.0}};
  const Scenario s = make_scenario(cfg);
  CHECK(s.ap_pos[0][0] == 0.0);
  CHECK(s.ap_pos[1][1] == 0.0);

  cfg.geometry.ap_positions = {{0.0, 20.0}};
  CHECK_THROWS_AS(make_scenario(cfg), ConfigError);
}

TEST_CASE("config validation rejects broken dimension sets") {
  ScenarioConfig cfg;
  cfg.rf_chains = cfg.antennas_per_ap;  // needs N_RF < N_T
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ScenarioConfig{};
  cfg.sigma2 = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ScenarioConfig{};
  cfg.user_count = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
