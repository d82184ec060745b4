#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "cfmimo/beamtraining.hpp"
#include "cfmimo/channel.hpp"
#include "cfmimo/precoding.hpp"

using namespace cfmimo;

namespace {

bool in_alphabet(cx z) {
  for (cx a : two_bit_alphabet())
    if (std::abs(z - a) < 1e-12) return true;
  return false;
}

std::string key_of(const CMat& a) {
  std::string k;
  for (Eigen::Index j = 0; j < a.cols(); ++j)
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      const cx z = a(i, j);
      if (z.real() > 0.5)
        k += '+';
      else if (z.real() < -0.5)
        k += '-';
      else if (z.imag() > 0.5)
        k += 'j';
      else
        k += 'J';
    }
  return k;
}

ChannelSet channels_from_columns(int aps, int antennas,
                                 const std::vector<CVec>& cols) {
  ChannelSet cs;
  cs.aps = aps;
  cs.antennas = antennas;
  cs.users = static_cast<int>(cols.size());
  cs.h.resize(aps * antennas, cs.users);
  for (int u = 0; u < cs.users; ++u) cs.h.col(u) = cols[u];
  return cs;
}

// best-beam gain of the worst (sample, user) pair: the quantity the SSB
// designer maximizes, recomputed here from scratch
double min_best_gain(const Dataset& ds, const std::vector<CVec>& beams) {
  double worst = std::numeric_limits<double>::infinity();
  for (const auto& cs : ds.samples)
    for (int u = 0; u < ds.config.user_count; ++u) {
      const CVec h = cs.user_ap(u, 0);
      double best = 0.0;
      for (const auto& b : beams) best = std::max(best, abs2(h.dot(b)));
      worst = std::min(worst, best);
    }
  return worst;
}

}  // namespace

TEST_CASE("steering candidates use the alphabet and drop duplicates") {
  const auto cands = steering_candidates(4, 33, 0.5);
  CHECK(cands.size() >= 2);
  CHECK(cands.size() <= 33);
  std::set<std::string> keys;
  bool has_all_ones = false;
  for (const auto& v : cands) {
    REQUIRE(v.size() == 4);
    for (int i = 0; i < 4; ++i) CHECK(in_alphabet(v(i)));
    keys.insert(key_of(v));
    if ((v - CVec::Ones(4)).norm() < 1e-12) has_all_ones = true;
  }
  CHECK(keys.size() == cands.size());
  // the fan crosses broadside, whose quantized steering vector is all ones
  CHECK(has_all_ones);
}

TEST_CASE("broadside users get the aligned beam") {
  ScenarioConfig sc;
  sc.ap_count = 1;
  sc.antennas_per_ap = 4;
  sc.rf_chains = 2;
  sc.user_count = 2;
  sc.ssb_count = 1;

  Dataset ds;
  ds.config = sc;
  for (int s = 0; s < 3; ++s) {
    const double g = 1.0 + 0.2 * s;
    ds.samples.push_back(channels_from_columns(
        1, 4, {CVec::Ones(4) * g, CVec::Ones(4) * (0.5 * g)}));
  }

  BeamtrainingConfig bt;
  bt.ssb_candidate_count = 33;
  const auto ssb = design_ssb(ds, bt);
  REQUIRE(ssb.beams.size() == 1);
  REQUIRE(ssb.beams[0].cols() == 1);
  for (int i = 0; i < 4; ++i)
    CHECK(std::abs(ssb.beams[0](i, 0) - cx(0.5, 0.0)) < 1e-12);
}

TEST_CASE("asking for the whole pool returns every candidate") {
  const auto cands = steering_candidates(2, 9, 0.5);
  const int pool = static_cast<int>(cands.size());

  ScenarioConfig sc;
  sc.ap_count = 1;
  sc.antennas_per_ap = 2;
  sc.rf_chains = 1;
  sc.user_count = 1;
  sc.ssb_count = pool;

  Dataset ds;
  ds.config = sc;
  RngStream rng(5, "pool", 0);
  CVec h(2);
  h << rng.normal_complex(1.0), rng.normal_complex(1.0);
  ds.samples.push_back(channels_from_columns(1, 2, {h}));

  BeamtrainingConfig bt;
  bt.ssb_candidate_count = 9;
  const auto ssb = design_ssb(ds, bt);
  REQUIRE(ssb.beams[0].cols() == pool);
  std::set<std::string> got, want;
  const double scale = std::sqrt(2.0);
  for (int k = 0; k < pool; ++k)
    got.insert(key_of(ssb.beams[0].col(k) * scale));
  for (const auto& c : cands) want.insert(key_of(c));
  CHECK(got == want);

  bt.ssb_candidate_count = pool;
  ScenarioConfig big = sc;
  big.ssb_count = pool + 1;
  Dataset ds_big = ds;
  ds_big.config = big;
  CHECK_THROWS_AS(design_ssb(ds_big, bt), ConfigError);
}

TEST_CASE("greedy coverage beats random selection on two clusters") {
  const int nt = 8, k = 4;
  ScenarioConfig sc;
  sc.ap_count = 1;
  sc.antennas_per_ap = nt;
  sc.rf_chains = 2;
  sc.user_count = 4;
  sc.ssb_count = k;

  Dataset ds;
  ds.config = sc;
  for (int s = 0; s < 6; ++s) {
    std::vector<CVec> cols;
    for (int u = 0; u < 4; ++u) {
      const double base = u < 2 ? 0.7 : -0.7;
      cols.push_back(steering_vector(nt, 0.5, base + 0.02 * s + 0.01 * u));
    }
    ds.samples.push_back(channels_from_columns(1, nt, cols));
  }

  BeamtrainingConfig bt;
  bt.ssb_candidate_count = 25;
  const auto ssb = design_ssb(ds, bt);
  std::vector<CVec> picked;
  for (int j = 0; j < k; ++j) picked.push_back(ssb.beams[0].col(j));
  const double greedy = min_best_gain(ds, picked);

  const auto cands = steering_candidates(nt, 25, 0.5);
  const double scale = 1.0 / std::sqrt(static_cast<double>(nt));
  double random_acc = 0.0;
  for (int seed = 0; seed < 100; ++seed) {
    RngStream rng(seed, "random-ssb", 0);
    std::set<int> sel;
    while (static_cast<int>(sel.size()) < k)
      sel.insert(static_cast<int>(rng.uniform_index(cands.size())));
    std::vector<CVec> beams;
    for (int c : sel) beams.push_back(cands[static_cast<std::size_t>(c)] * scale);
    random_acc += min_best_gain(ds, beams);
  }
  CHECK(greedy >= random_acc / 100.0);

  // both clusters held near their pool-wide best gain
  for (int u : {0, 3}) {
    const CVec h = ds.samples[0].user_ap(u, 0);
    double best_sel = 0.0, best_pool = 0.0;
    for (const auto& b : picked) best_sel = std::max(best_sel, abs2(h.dot(b)));
    for (const auto& c : cands)
      best_pool = std::max(best_pool, abs2(h.dot(c)) / nt);
    CHECK(best_sel >= 0.5 * best_pool);
  }
}

TEST_CASE("rssi at zero noise follows the inner product") {
  SsbSet ssb;
  ssb.aps = 1;
  ssb.bursts = 1;

  SECTION("orthogonal channel nulls out") {
    CMat beams(2, 1);
    beams << cx(1, 0) / std::sqrt(2.0), cx(1, 0) / std::sqrt(2.0);
    ssb.beams = {beams};
    CVec h(2);
    h << cx(1, 0), cx(-1, 0);
    const auto cs = channels_from_columns(1, 2, {h});
    RngStream rng(1, "rssi0", 0);
    const auto fb = measure_rssi(cs, ssb, 0.0, rng);
    REQUIRE(fb.alpha.size() == 1);
    CHECK(fb.alpha[0] <= 1e-28);
  }

  SECTION("aligned channel returns its squared gain") {
    CMat beams(3, 1);
    beams << cx(1, 0), cx(0, 1), cx(-1, 0);
    ssb.beams = {beams};
    const double norm_a = beams.col(0).norm();
    const cx c(2.0, 1.0);
    const CVec h = c * beams.col(0) / norm_a;
    const auto cs = channels_from_columns(1, 3, {h});
    RngStream rng(1, "rssi1", 0);
    const auto fb = measure_rssi(cs, ssb, 0.0, rng);
    CHECK(fb.alpha[0] ==
          Catch::Approx(abs2(c) * norm_a * norm_a).epsilon(1e-12));
  }

  SECTION("global channel phase leaves alpha unchanged") {
    CMat beams(4, 2);
    RngStream rng(8, "phase", 0);
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 2; ++j) beams(i, j) = rng.normal_complex(1.0);
    ssb.bursts = 2;
    ssb.beams = {beams};
    CVec h(4);
    for (int i = 0; i < 4; ++i) h(i) = rng.normal_complex(1.0);
    const auto cs = channels_from_columns(1, 4, {h});
    const cx rot = std::exp(cx(0.0, 1.234));
    const auto cs_rot = channels_from_columns(1, 4, {CVec(rot * h)});
    RngStream r1(1, "r", 0), r2(1, "r", 0);
    const auto a = measure_rssi(cs, ssb, 0.0, r1);
    const auto b = measure_rssi(cs_rot, ssb, 0.0, r2);
    for (std::size_t i = 0; i < a.alpha.size(); ++i)
      CHECK(b.alpha[i] == Catch::Approx(a.alpha[i]).epsilon(1e-12));
  }
}

TEST_CASE("rssi noise term adds sigma2 in expectation") {
  const double sigma2 = 1e-13;
  SsbSet ssb;
  ssb.aps = 1;
  ssb.bursts = 1;
  CMat beams(2, 1);
  beams << cx(1, 0) / std::sqrt(2.0), cx(1, 0) / std::sqrt(2.0);
  ssb.beams = {beams};
  CVec h(2);
  h << cx(4e-7, 1e-7), cx(-2e-7, 3e-7);
  const auto cs = channels_from_columns(1, 2, {h});
  const double g2 = abs2(h.dot(beams.col(0)));

  RngStream ra(42, "noise", 0), rb(42, "noise", 0);
  const auto fa = measure_rssi(cs, ssb, sigma2, ra);
  const auto fbk = measure_rssi(cs, ssb, sigma2, rb);
  CHECK(fa.alpha[0] == fbk.alpha[0]);

  const int n = 10000;
  RngStream rng(42, "noise", 0);
  double mean = 0.0, m2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const auto fb = measure_rssi(cs, ssb, sigma2, rng);
    const double d = fb.alpha[0] - g2 - sigma2;
    const double delta = d - mean;
    mean += delta / (i + 1);
    m2 += delta * (d - mean);
  }
  const double se = std::sqrt(m2 / (n - 1) / n);
  CHECK(std::abs(mean - sigma2) <= 3.0 * se);
  CHECK(mean > 0.0);
}

TEST_CASE("quantizer saturates, round-trips, and stays monotone") {
  QuantPolicy q;
  RssiFeedback fb;
  fb.users = 1;
  fb.aps = 1;
  fb.bursts = 6;
  fb.alpha = {db_to_linear(-60.0), db_to_linear(-140.0), db_to_linear(-12.0),
              db_to_linear(-200.0), db_to_linear(-100.0),
              db_to_linear(-99.7)};
  const auto out = quantize_rssi(fb, q);
  REQUIRE(out.alpha_q.size() == 6);
  CHECK(out.alpha_q[0] == 255);
  CHECK(out.alpha_q[1] == 0);
  CHECK(out.alpha_q[2] == 255);
  CHECK(out.alpha_q[3] == 0);

  // every code is a fixed point of quantize(dequantize(.))
  for (int code = 0; code < 256; ++code)
    CHECK(quantize_value_db(dequantize_code_db(code, q), q) == code);

  // round-trip within half a bin for in-window values
  const double bin = (q.ceil_db - q.floor_db) / 255.0;
  RngStream rng(3, "quant", 0);
  std::vector<double> dbs;
  for (int i = 0; i < 200; ++i)
    dbs.push_back(rng.uniform(q.floor_db, q.ceil_db));
  for (double db : dbs) {
    const int code = quantize_value_db(db, q);
    CHECK(std::abs(dequantize_code_db(code, q) - db) <= bin / 2 + 1e-9);
  }
  std::sort(dbs.begin(), dbs.end());
  int prev = -1;
  for (double db : dbs) {
    const int code = quantize_value_db(db, q);
    CHECK(code >= prev);
    prev = code;
  }

  QuantPolicy bad = q;
  bad.bits = 0;
  CHECK_THROWS_AS(quantize_rssi(fb, bad), ConfigError);
  bad.bits = 17;
  CHECK_THROWS_AS(quantize_rssi(fb, bad), ConfigError);
}

TEST_CASE("identical targets collapse the codebook to one entry") {
  ScenarioConfig sc;
  sc.ap_count = 1;
  sc.antennas_per_ap = 4;
  sc.rf_chains = 2;
  sc.user_count = 2;
  Dataset ds;
  ds.config = sc;

  RngStream rng(11, "cb", 0);
  FdpPrecoder f;
  f.aps = 1;
  f.antennas = 4;
  f.users = 2;
  f.U.resize(4, 2);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 2; ++j) f.U(i, j) = rng.normal_complex(1.0);
  const std::vector<FdpPrecoder> fdp(5, f);

  CodebookPolicy policy;
  policy.target_size = 16;
  const auto book = design_codebook(ds, fdp, policy);
  REQUIRE(book.entries.size() == 1);
  CHECK(book.size(0) == 1);
  for (const auto& a : book.entries[0])
    for (int i = 0; i < a.rows(); ++i)
      for (int j = 0; j < a.cols(); ++j) CHECK(in_alphabet(a(i, j)));
}

TEST_CASE("roomy target keeps all distinct candidates") {
  ScenarioConfig sc;
  sc.ap_count = 1;
  sc.antennas_per_ap = 4;
  sc.rf_chains = 2;
  sc.user_count = 2;
  Dataset ds;
  ds.config = sc;

  RngStream rng(21, "cb2", 0);
  std::vector<FdpPrecoder> fdp;
  std::set<std::string> distinct;
  for (int s = 0; s < 6; ++s) {
    FdpPrecoder f;
    f.aps = 1;
    f.antennas = 4;
    f.users = 2;
    f.U.resize(4, 2);
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 2; ++j) f.U(i, j) = rng.normal_complex(1.0);
    distinct.insert(key_of(pe_altmin(f.U, 2).A));
    fdp.push_back(std::move(f));
  }

  CodebookPolicy policy;
  policy.target_size = 16;
  const auto book = design_codebook(ds, fdp, policy);
  CHECK(book.size(0) == static_cast<int>(distinct.size()));
  std::set<std::string> got;
  for (const auto& a : book.entries[0]) got.insert(key_of(a));
  CHECK(got == distinct);
}

TEST_CASE("pruning preserves matched sum rate on held-out samples") {
  // desk radio (M=2, N_T=8, N_RF=2, N_U=2) serving a central hotspot zone,
  // where the factorized beam space has few modes and a small codebook is
  // the design's intended operating regime
  ScenarioConfig sc;
  sc.seed = 2024;
  sc.geometry.margin = 16.0;
  const auto ds = generate_dataset(sc, 300);
  const int n_train = ds.train_count();

  std::vector<FdpPrecoder> fdp;
  for (int s = 0; s < n_train; ++s)
    fdp.push_back(zero_forcing(ds.samples[s], sc.p_max));

  CodebookPolicy big;
  big.target_size = 1 << 20;  // no pruning
  CodebookPolicy small;
  small.target_size = 8;
  const auto full = design_codebook(ds, fdp, big);
  const auto pruned = design_codebook(ds, fdp, small);
  for (int m = 0; m < sc.ap_count; ++m) {
    CHECK(pruned.size(m) <= 8);
    CHECK(pruned.size(m) <= full.size(m));
    for (const auto& a : pruned.entries[m])
      for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) CHECK(in_alphabet(a(i, j)));
  }
  CHECK(full.size(0) > 8 * pruned.size(0));  // the prune is a real reduction

  // held-out rate when each sample picks its matching codeword per AP
  auto matched_rate = [&](const AnalogCodebook& book) {
    double acc = 0.0;
    int n = 0;
    for (int s = n_train; s < static_cast<int>(ds.samples.size()); ++s, ++n) {
      const auto& cs = ds.samples[s];
      const auto target = zero_forcing(cs, sc.p_max);
      const HbfPrecoder h =
          hbf_from_fdp(cs, target, &book.entries, sc.rf_chains, sc.p_max);
      acc += fdp_sum_rate(cs, h.expand(sc.antennas_per_ap), sc.sigma2);
    }
    return acc / n;
  };

  const double rate_full = matched_rate(full);
  const double rate_pruned = matched_rate(pruned);
  CHECK(rate_pruned >= 0.95 * rate_full);
}
