#pragma once

#include <algorithm>
#include <limits>
#include <numeric>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "cfmimo/channel.hpp"
#include "cfmimo/common.hpp"
#include "cfmimo/metrics.hpp"
#include "cfmimo/rng.hpp"

namespace cfmimo {

// Global FDP matrix U = [U_1; ...; U_M], column u stacks user u's per-AP
// precoders.
struct FdpPrecoder {
  CMat U;  // (M*N_T) x N_U
  int aps = 0, antennas = 0, users = 0;
};

struct HbfPrecoder {
  std::vector<CMat> A;         // per AP, N_T x N_RF, entries in {1,-1,i,-i}
  std::vector<CMat> W;         // per AP, N_RF x N_U
  std::vector<int> selection;  // codeword index per AP, -1 when free-form

  FdpPrecoder expand(int n_t) const {
    FdpPrecoder f;
    f.aps = static_cast<int>(A.size());
    f.antennas = n_t;
    f.users = static_cast<int>(W.empty() ? 0 : W[0].cols());
    f.U.resize(f.aps * n_t, f.users);
    for (int m = 0; m < f.aps; ++m) f.U.block(m * n_t, 0, n_t, f.users) = A[m] * W[m];
    return f;
  }
};

struct OfdpCoefficients {
  RVec p;       // per-user power, sums to p_max
  RVec lambda;  // per-user multipliers, >= 0
};

struct PeAltminConfig {
  int max_iters = 50;
  double tol = 1e-6;
};

inline double precoder_power(const FdpPrecoder& f) { return f.U.squaredNorm(); }

inline double precoder_power(const HbfPrecoder& h) {
  double acc = 0.0;
  for (std::size_t m = 0; m < h.A.size(); ++m) acc += (h.A[m] * h.W[m]).squaredNorm();
  return acc;
}

inline void normalize_power(FdpPrecoder& f, double p_max) {
  const double pw = precoder_power(f);
  if (pw <= 0.0) throw NumericError("normalize_power: all-zero precoder");
  f.U *= std::sqrt(p_max / pw);
}

inline void normalize_power(HbfPrecoder& h, double p_max) {
  const double pw = precoder_power(h);
  if (pw <= 0.0) throw NumericError("normalize_power: all-zero precoder");
  const double c = std::sqrt(p_max / pw);
  for (auto& w : h.W) w *= c;
}

// Matched filtering per AP block; each AP scales its own block, so the
// construction is strictly local to the AP's channels.
inline FdpPrecoder conjugate_beamforming(const ChannelSet& cs, double p_max) {
  FdpPrecoder f;
  f.aps = cs.aps;
  f.antennas = cs.antennas;
  f.users = cs.users;
  f.U = CMat::Zero(cs.aps * cs.antennas, cs.users);
  const double scale = std::sqrt(p_max / (cs.aps * cs.users));
  for (int m = 0; m < cs.aps; ++m)
    for (int u = 0; u < cs.users; ++u) {
      CVec h = cs.user_ap(u, m);
      const double n = h.norm();
      if (n > 0.0) f.U.block(m * cs.antennas, u, cs.antennas, 1) = scale / n * h;
    }
  return f;
}

inline FdpPrecoder zero_forcing(const ChannelSet& cs, double p_max) {
  const CMat Hh = cs.h.adjoint();  // N_U x (M*N_T), rows h_u^H
  const CMat gram = Hh * Hh.adjoint();
  Eigen::FullPivLU<CMat> lu(gram);
  lu.setThreshold(1e-12);
  if (lu.rank() < cs.users)
    throw NumericError("zero_forcing: channel matrix is rank-deficient");
  FdpPrecoder f;
  f.aps = cs.aps;
  f.antennas = cs.antennas;
  f.users = cs.users;
  f.U = Hh.adjoint() * lu.solve(CMat::Identity(cs.users, cs.users));
  // scalar loading: every user is received at the same amplitude, so badly
  // conditioned channels pay the full power penalty (the classical low-SNR
  // weakness of zero-forcing)
  const double n = f.U.norm();
  if (n <= 0.0) throw NumericError("zero_forcing: degenerate precoder");
  f.U *= std::sqrt(p_max) / n;
  return f;
}

// Regularized-inverse parametrized structure: per user and AP,
// u = sqrt(p_u) v / ||v||, v = (I + (1/sigma2) sum_{i != u} lambda_i h_i h_i^H)^{-1} h_u.
// The inverse is applied through the matrix-inversion lemma so the solve stays
// well conditioned for arbitrarily large lambda_i / sigma2.
inline FdpPrecoder ofdp_structure(const ChannelSet& cs,
                                  const OfdpCoefficients& co, double sigma2) {
  FdpPrecoder f;
  f.aps = cs.aps;
  f.antennas = cs.antennas;
  f.users = cs.users;
  f.U = CMat::Zero(cs.aps * cs.antennas, cs.users);
  const int nt = cs.antennas;
  for (int m = 0; m < cs.aps; ++m) {
    for (int u = 0; u < cs.users; ++u) {
      const CVec hu = cs.user_ap(u, m);
      std::vector<int> idx;
      for (int i = 0; i < cs.users; ++i)
        if (i != u && co.lambda(i) > 0.0) idx.push_back(i);
      CVec v = hu;
      if (!idx.empty()) {
        CMat t(nt, static_cast<Eigen::Index>(idx.size()));
        for (std::size_t k = 0; k < idx.size(); ++k)
          t.col(static_cast<Eigen::Index>(k)) =
              std::sqrt(co.lambda(idx[k]) / sigma2) * cs.user_ap(idx[k], m);
        const CMat inner =
            CMat::Identity(t.cols(), t.cols()) + t.adjoint() * t;
        v -= t * inner.llt().solve(CVec(t.adjoint() * hu));
      }
      const double n = v.norm();
      if (n > 0.0)
        f.U.block(m * nt, u, nt, 1) = std::sqrt(std::max(co.p(u), 0.0)) / n * v;
    }
  }
  return f;
}

struct OfdpOptions {
  int restarts = 4;
  int max_iters = 500;
  double step = 1e-2;   // nominal ascent step in normalized coordinates
  double fd_eps = 1e-3; // finite-difference half-width (decades for lambda)
  std::uint64_t seed = 99;
};

struct OfdpResult {
  OfdpCoefficients coeffs;
  FdpPrecoder precoder;
  double sum_rate = 0.0;
  bool converged = true;
};

namespace detail {

// Euclidean projection onto { p >= 0, sum p = total }.
inline RVec project_simplex(RVec p, double total) {
  const int n = static_cast<int>(p.size());
  std::vector<double> u(p.data(), p.data() + n);
  std::sort(u.begin(), u.end(), std::greater<double>());
  double cum = 0.0, theta = 0.0;
  int k = 0;
  for (int i = 0; i < n; ++i) {
    cum += u[i];
    const double t = (cum - total) / (i + 1);
    if (u[i] - t > 0.0) {
      k = i + 1;
      theta = t;
    }
  }
  (void)k;
  for (int i = 0; i < n; ++i) p(i) = std::max(p(i) - theta, 0.0);
  return p;
}

}  // namespace detail

inline CMat fdp_gains(const ChannelSet& cs, const FdpPrecoder& f) {
  return cs.h.adjoint() * f.U;
}

inline CMat hbf_gains(const ChannelSet& cs, const HbfPrecoder& h) {
  CMat G = CMat::Zero(cs.users, static_cast<Eigen::Index>(h.W[0].cols()));
  for (int m = 0; m < cs.aps; ++m)
    G += cs.block(m).adjoint() * (h.A[m] * h.W[m]);
  return G;
}

inline RVec sinr_fdp(const ChannelSet& cs, const FdpPrecoder& f, double sigma2) {
  return sinr_from_gains(fdp_gains(cs, f), sigma2);
}

inline RVec sinr_hbf(const ChannelSet& cs, const HbfPrecoder& h, double sigma2) {
  return sinr_from_gains(hbf_gains(cs, h), sigma2);
}

inline double fdp_sum_rate(const ChannelSet& cs, const FdpPrecoder& f,
                           double sigma2) {
  return sum_rate(sinr_fdp(cs, f, sigma2));
}

inline double hbf_sum_rate(const ChannelSet& cs, const HbfPrecoder& h,
                           double sigma2) {
  return sum_rate(sinr_hbf(cs, h, sigma2));
}

inline OfdpResult solve_ofdp(const ChannelSet& cs, double sigma2, double p_max,
                             const OfdpOptions& opts = {}) {
  const int nu = cs.users;
  // lambda is searched in the log domain; the rate only depends on
  // lambda / sigma2, covered here across 16 decades around sigma2.
  const double lx_min = std::log10(sigma2) - 4.0;
  const double lx_max = std::log10(sigma2) + 12.0;
  auto score = [&](const RVec& p, const RVec& lx) {
    OfdpCoefficients co;
    co.p = p;
    co.lambda = lx.unaryExpr([](double v) { return std::pow(10.0, v); });
    FdpPrecoder f = ofdp_structure(cs, co, sigma2);
    if (f.U.squaredNorm() <= 0.0) return -1.0;
    normalize_power(f, p_max);
    return fdp_sum_rate(cs, f, sigma2);
  };

  OfdpResult best;
  best.sum_rate = -std::numeric_limits<double>::infinity();
  RngStream rng(opts.seed, "ofdp.restart");
  for (int r = 0; r < opts.restarts; ++r) {
    RVec p = RVec::Constant(nu, p_max / nu);
    RVec lx(nu);
    if (r == 0) {
      lx.setConstant(lx_min);  // matched-filter corner
    } else if (r == 1) {
      lx.setConstant(std::log10(sigma2) + 8.0);  // interference-suppressing corner
    } else {
      for (int i = 0; i < nu; ++i)
        lx(i) = std::log10(sigma2) + rng.uniform(0.0, 8.0);
      p = detail::project_simplex(
          RVec::NullaryExpr(nu,
                            [&](Eigen::Index) {
                              return rng.uniform(0.0, 1.0) * p_max;
                            }),
          p_max);
    }
    double cur = score(p, lx);
    bool converged = false;
    for (int it = 0; it < opts.max_iters; ++it) {
      // central finite differences on (p, log10 lambda)
      RVec gp(nu), gl(nu);
      for (int i = 0; i < nu; ++i) {
        const double hp = opts.fd_eps * p_max;
        RVec a = p, b = p;
        a(i) += hp;
        b(i) = std::max(b(i) - hp, 0.0);
        gp(i) = (score(a, lx) - score(b, lx)) / (a(i) - b(i));
        RVec c = lx, d = lx;
        c(i) = std::min(c(i) + opts.fd_eps, lx_max);
        d(i) = std::max(d(i) - opts.fd_eps, lx_min);
        gl(i) = c(i) > d(i) ? (score(p, c) - score(p, d)) / (c(i) - d(i)) : 0.0;
      }
      // normalized ascent direction in (p / p_max, log10 lambda) coordinates,
      // nominal step opts.step with backtracking
      RVec zp = gp * p_max, zl = gl;
      const double gn = std::sqrt(zp.squaredNorm() + zl.squaredNorm());
      if (gn <= 0.0) {
        converged = true;
        break;
      }
      bool improved = false;
      double scale = 1.0;
      for (int bt = 0; bt < 8; ++bt, scale *= 0.5) {
        const double s = opts.step * scale / gn;
        const RVec pn = detail::project_simplex(p + s * p_max * zp, p_max);
        const RVec ln = (lx + s * zl).cwiseMax(lx_min).cwiseMin(lx_max);
        const double ns = score(pn, ln);
        if (ns > cur) {
          const bool tiny = ns - cur < 1e-10 * std::max(1.0, std::abs(cur));
          p = pn;
          lx = ln;
          cur = ns;
          improved = true;
          if (tiny) converged = true;
          break;
        }
      }
      if (!improved) converged = true;
      if (converged) break;
    }
    if (cur > best.sum_rate) {
      best.sum_rate = cur;
      best.coeffs.p = p;
      best.coeffs.lambda =
          lx.unaryExpr([](double v) { return std::pow(10.0, v); });
      best.converged = converged;
    }
  }
  best.precoder = ofdp_structure(cs, best.coeffs, sigma2);
  normalize_power(best.precoder, p_max);
  return best;
}

// ---------------------------------------------------------------------------
// PE-AltMin hybrid factorization with the 2-bit alphabet {1,-1,i,-i}.

inline cx nearest_alphabet(cx z) {
  if (z == cx(0.0, 0.0)) return cx(1.0, 0.0);
  const double re = z.real(), im = z.imag();
  if (std::abs(re) >= std::abs(im)) return re >= 0.0 ? cx(1, 0) : cx(-1, 0);
  return im >= 0.0 ? cx(0, 1) : cx(0, -1);
}

struct PeAltminResult {
  CMat A;  // N_T x N_RF
  CMat W;  // N_RF x N_U
  std::vector<double> residual_trace;
};

namespace detail {

inline CMat ls_digital(const CMat& A, const CMat& U) {
  // W = pinv(A) U via the normal equations; A has full column rank for any
  // nonzero alphabet matrix unless columns coincide, where the solver still
  // returns a least-squares solution through the pseudo-inverse.
  Eigen::CompleteOrthogonalDecomposition<CMat> cod(A);
  return cod.solve(U);
}

// Exact per-entry coordinate update: holding every other entry of A fixed,
// the residual is minimized over the alphabet in closed form. Sweeping all
// entries can only lower ||U - A W||^2, which keeps the iteration trace
// monotone for free-form W.
inline void analog_coordinate_sweep(CMat& A, const CMat& W, const CMat& U) {
  const CMat G = W * W.adjoint();       // N_RF x N_RF
  const CMat C = U * W.adjoint();       // N_T x N_RF
  // residual_i(a) = const - 2 Re(conj(a) c) + |a|^2 g_jj with
  // c = C(i,j) - sum_{j' != j} A(i,j') G(j',j); |a| = 1 so only c matters.
  for (Eigen::Index i = 0; i < A.rows(); ++i)
    for (Eigen::Index j = 0; j < A.cols(); ++j) {
      cx c = C(i, j);
      for (Eigen::Index j2 = 0; j2 < A.cols(); ++j2)
        if (j2 != j) c -= A(i, j2) * G(j2, j);
      cx bestv = A(i, j);
      double bestg = -std::numeric_limits<double>::infinity();
      for (cx a : {cx(1, 0), cx(-1, 0), cx(0, 1), cx(0, -1)}) {
        const double gain = (std::conj(a) * c).real();
        if (gain > bestg) {
          bestg = gain;
          bestv = a;
        }
      }
      A(i, j) = bestv;
    }
}

}  // namespace detail

inline PeAltminResult pe_altmin(const CMat& U, int n_rf,
                                const PeAltminConfig& cfg = {},
                                const CMat* init_a = nullptr) {
  const auto nt = U.rows();
  PeAltminResult r;
  if (U.norm() == 0.0) {
    r.A = CMat::Ones(nt, n_rf);
    r.W = CMat::Zero(n_rf, U.cols());
    r.residual_trace.push_back(0.0);
    return r;
  }
  if (init_a) {
    if (init_a->rows() != nt || init_a->cols() != n_rf)
      throw ConfigError("pe_altmin: init shape mismatch");
    r.A = *init_a;
  } else {
    // Initialize the analog part from the phase-projected left singular
    // vectors.
    Eigen::JacobiSVD<CMat> svd(U, Eigen::ComputeThinU);
    r.A.resize(nt, n_rf);
    for (int j = 0; j < n_rf; ++j) {
      if (j < svd.matrixU().cols())
        for (Eigen::Index i = 0; i < nt; ++i)
          r.A(i, j) = nearest_alphabet(svd.matrixU()(i, j));
      else
        for (Eigen::Index i = 0; i < nt; ++i)
          r.A(i, j) = ((i + j) % 2 == 0) ? cx(1, 0) : cx(-1, 0);
    }
  }
  double prev = std::numeric_limits<double>::infinity();
  for (int it = 0; it < cfg.max_iters; ++it) {
    r.W = detail::ls_digital(r.A, U);
    detail::analog_coordinate_sweep(r.A, r.W, U);
    const double res = (U - r.A * r.W).squaredNorm();
    r.residual_trace.push_back(res);
    if (prev - res <= cfg.tol * std::max(prev, 1e-300)) break;
    prev = res;
  }
  // Final digital refit against the last analog update.
  r.W = detail::ls_digital(r.A, U);
  const double res = (U - r.A * r.W).squaredNorm();
  if (r.residual_trace.empty() || res < r.residual_trace.back())
    r.residual_trace.push_back(res);
  return r;
}

// Hybrid factorization of an FDP solution, per AP: either free-form PE-AltMin
// or best-codeword selection from a designed codebook (ties to lowest index).
inline HbfPrecoder hbf_from_fdp(const ChannelSet& cs, const FdpPrecoder& fdp,
                                const std::vector<std::vector<CMat>>* codebook,
                                int n_rf, double p_max,
                                const PeAltminConfig& cfg = {}) {
  HbfPrecoder h;
  h.A.resize(cs.aps);
  h.W.resize(cs.aps);
  h.selection.assign(cs.aps, -1);
  for (int m = 0; m < cs.aps; ++m) {
    const CMat Um = fdp.U.block(m * cs.antennas, 0, cs.antennas, cs.users);
    if (codebook) {
      const auto& book = (*codebook)[m];
      if (book.empty()) throw NumericError("hbf_from_fdp: empty codebook");
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < book.size(); ++l) {
        const CMat W = detail::ls_digital(book[l], Um);
        const double res = (Um - book[l] * W).squaredNorm();
        if (res < best - 1e-15) {
          best = res;
          h.A[m] = book[l];
          h.W[m] = W;
          h.selection[m] = static_cast<int>(l);
        }
      }
    } else {
      auto r = pe_altmin(Um, n_rf, cfg);
      h.A[m] = std::move(r.A);
      h.W[m] = std::move(r.W);
    }
  }
  normalize_power(h, p_max);
  return h;
}

}  // namespace cfmimo
