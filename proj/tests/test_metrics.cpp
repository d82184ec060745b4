#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "cfmimo/channel.hpp"
#include "cfmimo/metrics.hpp"
#include "cfmimo/precoding.hpp"
#include "cfmimo/rng.hpp"

using namespace cfmimo;

namespace {

ChannelSet random_channels(int aps, int nt, int users, std::uint64_t seed) {
  ChannelSet cs;
  cs.aps = aps;
  cs.antennas = nt;
  cs.users = users;
  cs.h.resize(aps * nt, users);
  RngStream rng(seed, "test.h");
  for (Eigen::Index i = 0; i < cs.h.rows(); ++i)
    for (Eigen::Index j = 0; j < cs.h.cols(); ++j)
      cs.h(i, j) = rng.normal_complex(1.0);
  return cs;
}

HbfPrecoder random_hbf(const ChannelSet& cs, int n_rf, std::uint64_t seed) {
  HbfPrecoder h;
  RngStream rng(seed, "test.hbf");
  const std::array<cx, 4> alpha = {cx(1, 0), cx(-1, 0), cx(0, 1), cx(0, -1)};
  for (int m = 0; m < cs.aps; ++m) {
    CMat a(cs.antennas, n_rf);
    for (Eigen::Index i = 0; i < a.rows(); ++i)
      for (Eigen::Index j = 0; j < a.cols(); ++j)
        a(i, j) = alpha[rng.uniform_index(4)];
    CMat w(n_rf, cs.users);
    for (Eigen::Index i = 0; i < w.rows(); ++i)
      for (Eigen::Index j = 0; j < w.cols(); ++j)
        w(i, j) = rng.normal_complex(1.0);
    h.A.push_back(std::move(a));
    h.W.push_back(std::move(w));
    h.selection.push_back(-1);
  }
  return h;
}

}  // namespace

TEST_CASE("sum rate closed forms") {
  RVec s2(2);
  s2 << 1.0, 1.0;
  CHECK(sum_rate(s2) == Catch::Approx(2.0).epsilon(1e-14));

  RVec z = RVec::Zero(5);
  CHECK(sum_rate(z) == 0.0);

  RVec p(4);
  p << 3, 7, 15, 31;
  CHECK(sum_rate(p) == Catch::Approx(14.0).epsilon(1e-14));
}

TEST_CASE("single user sinr has no interference term") {
  const ChannelSet cs = random_channels(2, 4, 1, 3);
  const HbfPrecoder h = random_hbf(cs, 2, 4);
  const double sigma2 = 0.3;
  const RVec s = sinr_hbf(cs, h, sigma2);
  cx gain(0, 0);
  for (int m = 0; m < cs.aps; ++m)
    gain += (cs.user_ap(0, m).adjoint() * h.A[m] * h.W[m].col(0))(0);
  CHECK(s(0) == Catch::Approx(abs2(gain) / sigma2).epsilon(1e-12));
}

TEST_CASE("unit signal, zero interference, unit noise gives one bit") {
  CMat G = CMat::Identity(2, 2);
  const auto report = make_rate_report(G, 1.0);
  CHECK(report.per_user_sinr(0) == Catch::Approx(1.0).epsilon(1e-14));
  CHECK(report.per_user_rate(0) == Catch::Approx(1.0).epsilon(1e-14));
  CHECK(report.sum_rate == Catch::Approx(2.0).epsilon(1e-14));
}

TEST_CASE("fdp of an expanded hybrid matches the hybrid metric") {
  const ChannelSet cs = random_channels(2, 4, 3, 5);
  const HbfPrecoder h = random_hbf(cs, 2, 6);
  FdpPrecoder f;
  f.aps = cs.aps;
  f.antennas = cs.antennas;
  f.users = cs.users;
  f.U.resize(cs.aps * cs.antennas, cs.users);
  for (int m = 0; m < cs.aps; ++m)
    f.U.block(m * cs.antennas, 0, cs.antennas, cs.users) = h.A[m] * h.W[m];
  const RVec a = sinr_hbf(cs, h, 1e-3);
  const RVec b = sinr_fdp(cs, f, 1e-3);
  for (int u = 0; u < cs.users; ++u)
    CHECK(std::abs(a(u) - b(u)) <= 1e-12 * std::abs(a(u)));
}

TEST_CASE("zero precoder scores zero sinr") {
  const ChannelSet cs = random_channels(1, 4, 2, 6);
  FdpPrecoder f;
  f.aps = 1;
  f.antennas = 4;
  f.users = 2;
  f.U = CMat::Zero(4, 2);
  const RVec s = sinr_fdp(cs, f, 1e-3);
  CHECK(s(0) == 0.0);
  CHECK(s(1) == 0.0);
}

TEST_CASE("sinr is invariant to joint channel and noise rescaling") {
  ChannelSet cs = random_channels(2, 4, 3, 7);
  const HbfPrecoder h = random_hbf(cs, 2, 8);
  const double sigma2 = 1e-4;
  const RVec before = sinr_hbf(cs, h, sigma2);
  const double c = 3.7;
  cs.h *= c;
  const RVec after = sinr_hbf(cs, h, sigma2 * c * c);
  for (int u = 0; u < cs.users; ++u)
    CHECK(after(u) == Catch::Approx(before(u)).epsilon(1e-12));
}

TEST_CASE("lower noise never hurts a fixed precoder") {
  const ChannelSet cs = random_channels(2, 8, 2, 9);
  const FdpPrecoder zf = zero_forcing(cs, 1.0);
  double prev = -1.0;
  for (double s2 : {1e-6, 1e-8, 1e-10, 1e-12}) {
    const double r = fdp_sum_rate(cs, zf, s2);
    CHECK(r >= prev);
    prev = r;
  }
}

TEST_CASE("rate cdf construction") {
  RateReport r;
  r.per_user_rate.resize(2);
  r.per_user_rate << 2.0, 1.0;
  const auto cdf = rate_cdf({r});
  REQUIRE(cdf.size() == 2);
  CHECK(cdf[0].rate == 1.0);
  CHECK(cdf[0].level == Catch::Approx(0.5));
  CHECK(cdf[1].rate == 2.0);
  CHECK(cdf[1].level == Catch::Approx(1.0));

  // monotone, ends at one, over a bigger pile of reports
  std::vector<RateReport> reports;
  RngStream rng(10, "cdf");
  for (int i = 0; i < 50; ++i) {
    RateReport q;
    q.per_user_rate.resize(3);
    for (int u = 0; u < 3; ++u) q.per_user_rate(u) = rng.uniform(0.0, 5.0);
    reports.push_back(q);
  }
  const auto big = rate_cdf(reports);
  for (std::size_t i = 1; i < big.size(); ++i) {
    CHECK(big[i].rate >= big[i - 1].rate);
    CHECK(big[i].level > big[i - 1].level);
  }
  CHECK(big.back().level == Catch::Approx(1.0));
}

TEST_CASE("monte carlo link simulation reproduces the sinr") {
  // The rate formula's denominator treats the interference cluster as one
  // effective beam; the simulation instruments the two labeled terms of the
  // received-signal model with unit-power symbol draws and compares the
  // estimated powers.
  const ChannelSet cs = random_channels(2, 4, 3, 11);
  HbfPrecoder h = random_hbf(cs, 2, 12);
  normalize_power(h, 1.0);
  const double sigma2 = 0.05;
  const RVec s = sinr_hbf(cs, h, sigma2);

  RngStream rng(13, "mc");
  const int draws = 100000;
  for (int u = 0; u < cs.users; ++u) {
    cx g_sig(0, 0), g_int(0, 0);
    for (int m = 0; m < cs.aps; ++m) {
      const CVec hu = cs.user_ap(u, m);
      g_sig += (hu.adjoint() * h.A[m] * h.W[m].col(u))(0);
      for (int j = 0; j < cs.users; ++j)
        if (j != u) g_int += (hu.adjoint() * h.A[m] * h.W[m].col(j))(0);
    }
    double p_sig = 0.0, p_den = 0.0;
    for (int d = 0; d < draws; ++d) {
      const cx x_u = rng.normal_complex(1.0);
      const cx x_i = rng.normal_complex(1.0);
      const cx noise = rng.normal_complex(sigma2);
      p_sig += abs2(g_sig * x_u);
      p_den += abs2(g_int * x_i + noise);
    }
    p_sig /= draws;
    p_den /= draws;
    const double est = p_sig / p_den;
    // |x|^2 draws are exponential: std error ~ power / sqrt(draws)
    const double tol = 3.0 * 2.5 / std::sqrt(static_cast<double>(draws));
    CHECK(std::abs(est - s(u)) <= tol * s(u) + 1e-12);
  }
}
