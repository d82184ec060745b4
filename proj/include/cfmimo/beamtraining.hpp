// Beam training: SSB design, RSSI measurement, quantized feedback, and
// per-AP analog codebook construction by candidate collection + usage pruning.
#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "cfmimo/channel.hpp"
#include "cfmimo/config.hpp"
#include "cfmimo/precoding.hpp"
#include "cfmimo/rng.hpp"

namespace cfmimo {

// K probe beams per AP, entries from {1,-1,i,-i} scaled so each beam has
// unit power (column norm 1).
struct SsbSet {
  int aps = 0;
  int bursts = 0;            // K
  std::vector<CMat> beams;   // per AP: N_T x K
};

struct RssiFeedback {
  int users = 0, aps = 0, bursts = 0;
  std::vector<double> alpha;  // linear watts, index (u, m, k)
  std::vector<int> alpha_q;   // quantizer codes, same indexing

  std::size_t at(int u, int m, int k) const {
    return (static_cast<std::size_t>(u) * aps + m) * bursts + k;
  }
};

struct AnalogCodebook {
  // per AP: L_m matrices, each N_T x N_RF over the 2-bit alphabet
  std::vector<std::vector<CMat>> entries;

  int size(int m) const { return static_cast<int>(entries[m].size()); }
};

inline const std::array<cx, 4>& two_bit_alphabet() {
  static const std::array<cx, 4> a = {cx(1, 0), cx(-1, 0), cx(0, 1),
                                      cx(0, -1)};
  return a;
}

namespace detail {

inline std::string alphabet_key(const CMat& a) {
  std::string key;
  key.reserve(static_cast<std::size_t>(a.size()));
  for (Eigen::Index j = 0; j < a.cols(); ++j)
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      const cx z = a(i, j);
      char c = '?';
      if (z.real() > 0.5)
        c = '0';
      else if (z.real() < -0.5)
        c = '1';
      else if (z.imag() > 0.5)
        c = '2';
      else
        c = '3';
      key.push_back(c);
    }
  return key;
}

}  // namespace detail

// 2-bit-quantized steering beams over a fan of departure angles; duplicates
// after quantization are removed, order preserved.
inline std::vector<CVec> steering_candidates(int antennas, int count,
                                             double spacing) {
  std::vector<CVec> out;
  std::vector<std::string> seen;
  for (int j = 0; j < count; ++j) {
    const double frac = count > 1 ? static_cast<double>(j) / (count - 1) : 0.5;
    const double angle = std::asin(-0.9 + 1.8 * frac);
    CVec v = steering_vector(antennas, spacing, angle);
    for (int i = 0; i < antennas; ++i) {
      const cx z = v(i);
      cx best = cx(1, 0);
      double bg = -2.0;
      for (cx a : two_bit_alphabet()) {
        const double g = z.real() * a.real() + z.imag() * a.imag();
        if (g > bg) {
          bg = g;
          best = a;
        }
      }
      v(i) = best;
    }
    std::string key = detail::alphabet_key(v);
    if (std::find(seen.begin(), seen.end(), key) == seen.end()) {
      seen.push_back(std::move(key));
      out.push_back(std::move(v));
    }
  }
  return out;
}

// Greedy max-min coverage: per AP, pick K beams maximizing the minimum (over
// design-slice user channels) of the best selected beam gain |h^H a|^2.
inline SsbSet design_ssb(const Dataset& ds, const BeamtrainingConfig& bt) {
  if (ds.samples.empty()) throw ConfigError("design_ssb: empty dataset");
  const ScenarioConfig& sc = ds.config;
  const auto cands = steering_candidates(sc.antennas_per_ap,
                                         bt.ssb_candidate_count,
                                         sc.multipath.antenna_spacing);
  const int pool = static_cast<int>(cands.size());
  if (sc.ssb_count > pool)
    throw ConfigError("design_ssb: K exceeds candidate pool of " +
                      std::to_string(pool));
  const int slice =
      std::min<int>(ds.train_count() > 0 ? ds.train_count()
                                         : static_cast<int>(ds.samples.size()),
                    2000);
  SsbSet ssb;
  ssb.aps = sc.ap_count;
  ssb.bursts = sc.ssb_count;
  const double scale = 1.0 / std::sqrt(static_cast<double>(sc.antennas_per_ap));
  for (int m = 0; m < sc.ap_count; ++m) {
    // gains[i][c]: beam gain of candidate c for channel instance i
    std::vector<std::vector<double>> gains;
    gains.reserve(static_cast<std::size_t>(slice) * sc.user_count);
    for (int s = 0; s < slice; ++s)
      for (int u = 0; u < sc.user_count; ++u) {
        const CVec h = ds.samples[s].user_ap(u, m);
        std::vector<double> row(pool);
        for (int c = 0; c < pool; ++c)
          row[c] = abs2(h.dot(cands[c]) * scale);
        gains.push_back(std::move(row));
      }
    std::vector<int> chosen;
    std::vector<double> best(gains.size(), -1.0);
    for (int k = 0; k < sc.ssb_count; ++k) {
      int pick = -1;
      double pick_val = -1.0;
      for (int c = 0; c < pool; ++c) {
        if (std::find(chosen.begin(), chosen.end(), c) != chosen.end())
          continue;
        double worst = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < gains.size(); ++i)
          worst = std::min(worst, std::max(best[i], gains[i][c]));
        if (worst > pick_val) {
          pick_val = worst;
          pick = c;
        }
      }
      chosen.push_back(pick);
      for (std::size_t i = 0; i < gains.size(); ++i)
        best[i] = std::max(best[i], gains[i][pick]);
    }
    CMat beams(sc.antennas_per_ap, sc.ssb_count);
    for (int k = 0; k < sc.ssb_count; ++k)
      beams.col(k) = cands[chosen[k]] * scale;
    ssb.beams.push_back(std::move(beams));
  }
  return ssb;
}

// alpha[u][m][k] = |h_{u,m}^H a_{SS,m}^{(k)} + eta|^2 + sigma2 with
// eta ~ CN(0, sigma2).
inline RssiFeedback measure_rssi(const ChannelSet& cs, const SsbSet& ssb,
                                 double sigma2, RngStream& rng) {
  RssiFeedback fb;
  fb.users = cs.users;
  fb.aps = cs.aps;
  fb.bursts = ssb.bursts;
  fb.alpha.resize(static_cast<std::size_t>(cs.users) * cs.aps * ssb.bursts);
  for (int u = 0; u < cs.users; ++u)
    for (int m = 0; m < cs.aps; ++m) {
      const CVec h = cs.user_ap(u, m);
      for (int k = 0; k < ssb.bursts; ++k) {
        const cx r = h.dot(ssb.beams[m].col(k)) + rng.normal_complex(sigma2);
        fb.alpha[fb.at(u, m, k)] = abs2(r) + sigma2;
      }
    }
  return fb;
}

struct QuantPolicy {
  int bits = 8;
  double floor_db = -140.0;
  double ceil_db = -60.0;
};

inline QuantPolicy quant_policy(const BeamtrainingConfig& bt) {
  return QuantPolicy{bt.rssi_bits, bt.quant_floor_db, bt.quant_ceil_db};
}

inline int quantize_value_db(double alpha_db, const QuantPolicy& q) {
  const int levels = (1 << q.bits) - 1;
  const double t = (alpha_db - q.floor_db) / (q.ceil_db - q.floor_db);
  const long code = std::lround(t * levels);
  return static_cast<int>(std::clamp<long>(code, 0, levels));
}

inline double dequantize_code_db(int code, const QuantPolicy& q) {
  const int levels = (1 << q.bits) - 1;
  return q.floor_db + (q.ceil_db - q.floor_db) * code / levels;
}

inline RssiFeedback quantize_rssi(RssiFeedback fb, const QuantPolicy& q) {
  if (q.bits < 1 || q.bits > 16)
    throw ConfigError("quantize_rssi: bits out of [1,16]");
  fb.alpha_q.resize(fb.alpha.size());
  for (std::size_t i = 0; i < fb.alpha.size(); ++i)
    fb.alpha_q[i] = quantize_value_db(linear_to_db(fb.alpha[i]), q);
  return fb;
}

struct CodebookPolicy {
  int target_size = 16;               // per-AP L_m after pruning
  PeAltminConfig altmin = {};
};

// Candidate collection (PE-AltMin per training sample per AP), usage counting,
// and iterative least-used pruning with orphan re-assignment by LS residual.
inline AnalogCodebook design_codebook(const Dataset& ds,
                                      const std::vector<FdpPrecoder>& fdp,
                                      const CodebookPolicy& policy) {
  if (fdp.empty()) throw ConfigError("design_codebook: no FDP solutions");
  const ScenarioConfig& sc = ds.config;
  const int nt = sc.antennas_per_ap, nrf = sc.rf_chains;
  AnalogCodebook book;
  book.entries.resize(sc.ap_count);
  for (int m = 0; m < sc.ap_count; ++m) {
    struct Cand {
      CMat a;
      CMat null_proj;  // I - A pinv(A), for fast residual evaluation
      long usage = 0;
      int first_seen = 0;
      bool dropped = false;
    };
    std::vector<Cand> cands;
    std::map<std::string, int> index_of;
    std::vector<int> assign(fdp.size());
    std::vector<CMat> targets(fdp.size());
    for (std::size_t s = 0; s < fdp.size(); ++s) {
      targets[s] = fdp[s].U.block(m * nt, 0, nt, fdp[s].users);
      const auto res = pe_altmin(targets[s], nrf, policy.altmin);
      const std::string key = detail::alphabet_key(res.A);
      auto it = index_of.find(key);
      if (it == index_of.end()) {
        Cand c;
        c.a = res.A;
        Eigen::CompleteOrthogonalDecomposition<CMat> cod(res.A);
        c.null_proj = CMat::Identity(nt, nt) -
                      res.A * cod.solve(CMat::Identity(nt, nt));
        c.first_seen = static_cast<int>(cands.size());
        it = index_of.emplace(key, c.first_seen).first;
        cands.push_back(std::move(c));
      }
      assign[s] = it->second;
      cands[it->second].usage++;
    }
    if (cands.empty()) throw ConfigError("design_codebook: empty candidates");

    auto residual = [&](std::size_t s, int d) {
      return (cands[d].null_proj * targets[s]).squaredNorm();
    };
    int remaining = static_cast<int>(cands.size());
    while (remaining > policy.target_size) {
      // one least-used entry per round; each orphan re-assignment feeds usage
      // back before the next drop, so survivors drift toward cluster medoids
      int drop = -1;
      for (int d = 0; d < static_cast<int>(cands.size()); ++d) {
        if (cands[d].dropped) continue;
        if (drop < 0 || cands[d].usage < cands[drop].usage ||
            (cands[d].usage == cands[drop].usage &&
             cands[d].first_seen < cands[drop].first_seen))
          drop = d;
      }
      cands[drop].dropped = true;
      --remaining;
      for (std::size_t s = 0; s < fdp.size(); ++s) {
        if (assign[s] != drop) continue;
        cands[drop].usage--;
        int best = -1;
        double best_res = std::numeric_limits<double>::infinity();
        for (int d = 0; d < static_cast<int>(cands.size()); ++d) {
          if (cands[d].dropped) continue;
          const double r = residual(s, d);
          if (r < best_res - 1e-15) {
            best_res = r;
            best = d;
          }
        }
        assign[s] = best;
        cands[best].usage++;
      }
    }
    std::vector<int> keep;
    for (int d = 0; d < static_cast<int>(cands.size()); ++d)
      if (!cands[d].dropped) keep.push_back(d);
    std::stable_sort(keep.begin(), keep.end(), [&](int a, int b) {
      if (cands[a].usage != cands[b].usage)
        return cands[a].usage > cands[b].usage;
      return cands[a].first_seen < cands[b].first_seen;
    });
    for (int d : keep) book.entries[m].push_back(cands[d].a);
  }
  return book;
}

}  // namespace cfmimo
