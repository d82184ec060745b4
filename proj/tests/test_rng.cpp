#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "cfmimo/rng.hpp"

using namespace cfmimo;

TEST_CASE("identical stream labels replay identically") {
  RngStream a(42, "channel", 7, 3);
  RngStream b(42, "channel", 7, 3);
  for (int i = 0; i < 100; ++i) {
    CHECK(a.uniform(0.0, 1.0) == b.uniform(0.0, 1.0));
    CHECK(a.normal() == b.normal());
  }
}

TEST_CASE("streams differing in any label component diverge") {
  RngStream base(42, "channel", 7, 3);
  RngStream other_tag(42, "noise", 7, 3);
  RngStream other_id(42, "channel", 7, 4);
  RngStream other_seed(43, "channel", 7, 3);
  int same_tag = 0, same_id = 0, same_seed = 0;
  for (int i = 0; i < 64; ++i) {
    const double v = base.uniform(0.0, 1.0);
    if (v == other_tag.uniform(0.0, 1.0)) ++same_tag;
    if (v == other_id.uniform(0.0, 1.0)) ++same_id;
    if (v == other_seed.uniform(0.0, 1.0)) ++same_seed;
  }
  CHECK(same_tag == 0);
  CHECK(same_id == 0);
  CHECK(same_seed == 0);
}

TEST_CASE("uniform draws stay inside the requested interval") {
  RngStream s(7, "u");
  for (int i = 0; i < 10000; ++i) {
    const double v = s.uniform(-2.0, 5.0);
    CHECK(v >= -2.0);
    CHECK(v < 5.0);
  }
}

TEST_CASE("uniform_index covers [0, n) and nothing else") {
  RngStream s(7, "idx");
  std::vector<int> hits(5, 0);
  for (int i = 0; i < 5000; ++i) {
    const auto k = s.uniform_index(5);
    REQUIRE(k < 5);
    ++hits[static_cast<std::size_t>(k)];
  }
  for (int h : hits) CHECK(h > 800);  // ~1000 expected per bin
}

TEST_CASE("normal moments match within monte carlo error") {
  RngStream s(11, "n");
  const int n = 200000;
  double sum = 0.0, sum2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double v = s.normal();
    sum += v;
    sum2 += v * v;
  }
  const double mean = sum / n;
  const double var = sum2 / n - mean * mean;
  CHECK(std::abs(mean) < 4.0 / std::sqrt(static_cast<double>(n)));
  CHECK(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("complex normal has the requested total variance") {
  RngStream s(13, "cn");
  const double variance = 0.25;
  const int n = 200000;
  double acc = 0.0, mean_re = 0.0;
  for (int i = 0; i < n; ++i) {
    const cx z = s.normal_complex(variance);
    acc += std::norm(z);
    mean_re += z.real();
  }
  CHECK(std::abs(acc / n - variance) < 0.01 * variance * 4);
  CHECK(std::abs(mean_re / n) < 4.0 * std::sqrt(variance / 2 / n));
}
