#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "cfmimo/common.hpp"
#include "cfmimo/config.hpp"
#include "cfmimo/rng.hpp"

namespace cfmimo {

// ULA response; entry k = exp(i 2 pi spacing k sin(theta)).
inline CVec steering_vector(int n, double theta, double spacing) {
  CVec a(n);
  const double phase = 2.0 * kPi * spacing * std::sin(theta);
  for (int k = 0; k < n; ++k) a(k) = std::polar(1.0, phase * k);
  return a;
}

struct Ray {
  cx gain;
  double angle;
};

inline CVec ray_sum(int n, double spacing, const std::vector<Ray>& rays) {
  CVec h = CVec::Zero(n);
  for (const auto& r : rays) h += r.gain * steering_vector(n, r.angle, spacing);
  return h;
}

// Environment fixed at scenario level: AP ring, scatterer clusters, per-ray
// angle jitter. User positions come from a finite grid so that RSSI
// fingerprints are tied to a repeatable set of channel realizations.
struct Scenario {
  ScenarioConfig config;
  std::vector<std::array<double, 2>> ap_pos;
  std::vector<double> ap_facing;
  std::vector<std::array<double, 2>> scatterers;
  std::vector<std::vector<std::vector<double>>> ray_jitter;  // [ap][cluster][ray]
  std::vector<std::array<double, 2>> grid;                    // user positions
};

inline Scenario make_scenario(const ScenarioConfig& cfg) {
  cfg.validate();
  Scenario s;
  s.config = cfg;
  const double a = cfg.geometry.area;
  if (!cfg.geometry.ap_positions.empty()) {
    if (static_cast<int>(cfg.geometry.ap_positions.size()) != cfg.ap_count)
      throw ConfigError("ap_positions size must equal ap_count");
    s.ap_pos = cfg.geometry.ap_positions;
  } else {
    for (int m = 0; m < cfg.ap_count; ++m) {
      const double phi = 2.0 * kPi * m / cfg.ap_count + kPi;
      s.ap_pos.push_back({a / 2.0 + a / 2.0 * std::cos(phi),
                          a / 2.0 + a / 2.0 * std::sin(phi)});
    }
  }
  for (const auto& p : s.ap_pos)
    s.ap_facing.push_back(std::atan2(a / 2.0 - p[1], a / 2.0 - p[0]));

  RngStream scat(cfg.seed, "env.scatter");
  const double lo = cfg.geometry.margin + 2.0;
  const double hi = a - cfg.geometry.margin - 2.0;
  for (int c = 0; c < cfg.multipath.clusters; ++c)
    s.scatterers.push_back({scat.uniform(lo, hi), scat.uniform(lo, hi)});

  s.ray_jitter.resize(cfg.ap_count);
  for (int m = 0; m < cfg.ap_count; ++m) {
    s.ray_jitter[m].resize(cfg.multipath.clusters);
    for (int c = 0; c < cfg.multipath.clusters; ++c) {
      RngStream jit(cfg.seed, "env.jitter", m, c);
      for (int r = 0; r < cfg.multipath.rays_per_cluster; ++r)
        s.ray_jitter[m][c].push_back(jit.normal(0.0, cfg.multipath.angle_spread));
    }
  }

  const int g = cfg.geometry.grid_per_side;
  const double m0 = cfg.geometry.margin;
  for (int ix = 0; ix < g; ++ix)
    for (int iy = 0; iy < g; ++iy)
      s.grid.push_back({m0 + (a - 2.0 * m0) * ix / (g - 1),
                        m0 + (a - 2.0 * m0) * iy / (g - 1)});
  return s;
}

namespace detail {

inline double dist(const std::array<double, 2>& p, const std::array<double, 2>& q) {
  return std::hypot(p[0] - q[0], p[1] - q[1]);
}

inline double bearing(const std::array<double, 2>& from, double facing,
                      const std::array<double, 2>& to) {
  double phi = std::atan2(to[1] - from[1], to[0] - from[0]) - facing;
  while (phi > kPi) phi -= 2.0 * kPi;
  while (phi < -kPi) phi += 2.0 * kPi;
  return phi;
}

}  // namespace detail

// Clustered multipath: LOS ray plus jittered rays bounced off each scatterer.
// Deterministic given the scenario environment.
inline CVec generate_channel(const Scenario& s, int ap_index,
                             const std::array<double, 2>& user_pos) {
  const auto& mp = s.config.multipath;
  const auto& ap = s.ap_pos[ap_index];
  const double face = s.ap_facing[ap_index];
  std::vector<Ray> rays;
  const double d_los = std::max(detail::dist(ap, user_pos), 1e-6);
  rays.push_back({std::sqrt(mp.reference_gain *
                            std::pow(d_los, -mp.path_loss_exponent)) *
                      std::polar(1.0, -2.0 * kPi * d_los / mp.wavelength),
                  detail::bearing(ap, face, user_pos)});
  const int nc = mp.clusters, nr = mp.rays_per_cluster;
  const double ray_scale =
      nc > 0 ? mp.scatter_gain / std::sqrt(double(nc) * nr) : 0.0;
  for (int c = 0; c < nc; ++c) {
    const auto& sc = s.scatterers[c];
    const double d1 = detail::dist(sc, ap);
    const double d2 = detail::dist(user_pos, sc);
    const double dd = std::max(d1 + d2, 1e-6);
    const cx g = ray_scale *
                 std::sqrt(mp.reference_gain * std::pow(dd, -mp.path_loss_exponent)) *
                 std::polar(1.0, -2.0 * kPi * dd / mp.wavelength);
    const double theta_c = detail::bearing(ap, face, sc);
    for (int r = 0; r < nr; ++r)
      rays.push_back({g, theta_c + s.ray_jitter[ap_index][c][r]});
  }
  return ray_sum(s.config.antennas_per_ap, mp.antenna_spacing, rays);
}

// One user drop: stacked channel, column u = [h_{u,1}; ...; h_{u,M}].
struct ChannelSet {
  CMat h;  // (M*N_T) x N_U
  int aps = 0, antennas = 0, users = 0;

  // h_{u,m} as an N_T block
  Eigen::Block<const CMat> block(int m) const {
    return h.block(m * antennas, 0, antennas, users);
  }
  CVec user_ap(int u, int m) const {
    return h.block(m * antennas, u, antennas, 1);
  }
};

struct Dataset {
  ScenarioConfig config;
  std::vector<ChannelSet> samples;
  std::vector<std::vector<int>> drops;  // grid indices per sample
  double split = 0.85;

  int train_count() const {
    auto n = static_cast<int>(samples.size());
    return std::min(n, std::max(1, static_cast<int>(std::llround(split * n))));
  }
  int test_count() const { return static_cast<int>(samples.size()) - train_count(); }
};

// Channels for every grid point at one AP, reused across samples.
inline std::vector<CMat> grid_channels(const Scenario& s) {
  const int nt = s.config.antennas_per_ap;
  std::vector<CMat> per_ap(s.config.ap_count);
  for (int m = 0; m < s.config.ap_count; ++m) {
    CMat hm(nt, static_cast<Eigen::Index>(s.grid.size()));
    for (std::size_t p = 0; p < s.grid.size(); ++p)
      hm.col(static_cast<Eigen::Index>(p)) = generate_channel(s, m, s.grid[p]);
    per_ap[m] = std::move(hm);
  }
  return per_ap;
}

inline Dataset generate_dataset(const Scenario& s, int n_samples,
                                double split = 0.85) {
  if (n_samples < 1) throw ConfigError("n_samples must be >= 1");
  const auto& cfg = s.config;
  const auto per_ap = grid_channels(s);
  const auto npoints = s.grid.size();
  if (npoints < static_cast<std::size_t>(cfg.user_count))
    throw ConfigError("grid smaller than user count");
  Dataset d;
  d.config = cfg;
  d.split = split;
  d.samples.reserve(n_samples);
  d.drops.reserve(n_samples);
  const int nt = cfg.antennas_per_ap;
  for (int i = 0; i < n_samples; ++i) {
    RngStream drop(cfg.seed, "sample.drop", i);
    std::vector<int> pts;
    while (static_cast<int>(pts.size()) < cfg.user_count) {
      int cand = static_cast<int>(drop.uniform_index(npoints));
      bool dup = false;
      for (int q : pts) dup |= (q == cand);
      if (!dup) pts.push_back(cand);
    }
    ChannelSet cs;
    cs.aps = cfg.ap_count;
    cs.antennas = nt;
    cs.users = cfg.user_count;
    cs.h.resize(cfg.ap_count * nt, cfg.user_count);
    for (int u = 0; u < cfg.user_count; ++u)
      for (int m = 0; m < cfg.ap_count; ++m)
        cs.h.block(m * nt, u, nt, 1) = per_ap[m].col(pts[u]);
    d.samples.push_back(std::move(cs));
    d.drops.push_back(std::move(pts));
  }
  return d;
}

inline Dataset generate_dataset(const ScenarioConfig& cfg, int n_samples,
                                double split = 0.85) {
  return generate_dataset(make_scenario(cfg), n_samples, split);
}

// Mean over grid points of the total stacked channel energy; anchors mean-SNR
// style noise settings: SNR = p_max * E||h||^2 / (N_U * sigma2).
inline double mean_channel_energy(const Scenario& s) {
  const auto per_ap = grid_channels(s);
  double acc = 0.0;
  for (const auto& hm : per_ap) acc += hm.squaredNorm();
  return acc / static_cast<double>(s.grid.size());
}

inline double sigma2_for_mean_snr(const Scenario& s, double snr_db) {
  return s.config.p_max * mean_channel_energy(s) /
         (s.config.user_count * db_to_linear(snr_db));
}

}  // namespace cfmimo
