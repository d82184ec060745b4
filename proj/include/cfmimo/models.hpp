// The four learned architectures (FullDeC/PartDeC x FDP/HBF): network specs,
// unsupervised losses, the training loop, and decentralized inference.
#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cfmimo/accounting.hpp"
#include "cfmimo/beamtraining.hpp"
#include "cfmimo/channel.hpp"
#include "cfmimo/config.hpp"
#include "cfmimo/metrics.hpp"
#include "cfmimo/nn.hpp"
#include "cfmimo/precoding.hpp"

namespace cfmimo {

constexpr long kTupleEnumerationCap = 65536;
constexpr int kPartdecBottleneck = 200;

// ---------------------------------------------------------------------------
// network specs

// Local DNN of FullDeC (one per AP): 2 conv layers (32 channels) over the
// (N_U x K) RSSI grid, 2 dense layers (512), then a regression head and, for
// HBF, a classifier head over the AP's codebook.
inline nn::NetworkSpec fulldec_network(const ScenarioConfig& sc,
                                       int codebook_size, bool hbf,
                                       double dropout_rate = 0.0,
                                       int conv2_stride = 1) {
  using L = nn::LayerSpec;
  nn::NetworkSpec net;
  net.in_shape = {1, sc.user_count, sc.ssb_count};
  net.backbone = {L::Conv(1, 32, 3, 1), L::Bn(), L::Leaky(),
                  L::Conv(32, 32, 3, conv2_stride), L::Bn(), L::Leaky(),
                  L::Flatten()};
  const auto conv_out = nn::chain_out_shape(net.backbone, net.in_shape);
  net.backbone.push_back(L::Dense(conv_out[0], 512));
  net.backbone.push_back(L::Bn());
  net.backbone.push_back(L::Leaky());
  if (dropout_rate > 0.0) net.backbone.push_back(L::Dropout(dropout_rate));
  net.backbone.push_back(L::Dense(512, 512));
  net.backbone.push_back(L::Bn());
  net.backbone.push_back(L::Leaky());
  if (dropout_rate > 0.0) net.backbone.push_back(L::Dropout(dropout_rate));
  if (hbf) {
    net.heads.emplace_back(
        "reg", nn::ModelSpec{L::Dense(512, 2 * sc.rf_chains * sc.user_count)});
    net.heads.emplace_back("cls", nn::ModelSpec{L::Dense(512, codebook_size),
                                                L::Softmax()});
  } else {
    net.heads.emplace_back(
        "reg",
        nn::ModelSpec{L::Dense(512, 2 * sc.antennas_per_ap * sc.user_count)});
  }
  return net;
}

// PartDeC: one shared trunk at the NC (input stacks all M RSSI grids as
// channels) ending in a 1024-wide feature layer.
inline nn::NetworkSpec partdec_trunk(const ScenarioConfig& sc,
                                     double dropout_rate = 0.0,
                                     int conv2_stride = 1) {
  using L = nn::LayerSpec;
  nn::NetworkSpec net;
  net.in_shape = {sc.ap_count, sc.user_count, sc.ssb_count};
  net.backbone = {L::Conv(sc.ap_count, 32, 3, 1), L::Bn(), L::Leaky(),
                  L::Conv(32, 32, 3, conv2_stride), L::Bn(), L::Leaky(),
                  L::Flatten()};
  const auto conv_out = nn::chain_out_shape(net.backbone, net.in_shape);
  net.backbone.push_back(L::Dense(conv_out[0], 1024));
  net.backbone.push_back(L::Bn());
  net.backbone.push_back(L::Leaky());
  if (dropout_rate > 0.0) net.backbone.push_back(L::Dropout(dropout_rate));
  return net;
}

// Per-AP unshared head. The NC-side part ends at the 200-value bottleneck
// whose activations are the only coefficients crossing the fronthaul; the
// AP-side part expands back to 1024 and carries the output heads.
struct PartdecHeadSpec {
  nn::ModelSpec nc_chain;  // 1024 -> 200 (+ bn + leaky)
  nn::ModelSpec ap_chain;  // 200 -> 1024 (+ bn + leaky)
  std::vector<std::pair<std::string, nn::ModelSpec>> heads;
};

inline PartdecHeadSpec partdec_head(const ScenarioConfig& sc,
                                    int codebook_size, bool hbf) {
  using L = nn::LayerSpec;
  PartdecHeadSpec h;
  h.nc_chain = {L::Dense(1024, kPartdecBottleneck), L::Bn(), L::Leaky()};
  h.ap_chain = {L::Dense(kPartdecBottleneck, 1024), L::Bn(), L::Leaky()};
  if (hbf) {
    h.heads.emplace_back(
        "reg", nn::ModelSpec{L::Dense(1024, 2 * sc.rf_chains * sc.user_count)});
    h.heads.emplace_back("cls", nn::ModelSpec{L::Dense(1024, codebook_size),
                                              L::Softmax()});
  } else {
    h.heads.emplace_back(
        "reg",
        nn::ModelSpec{L::Dense(1024, 2 * sc.antennas_per_ap * sc.user_count)});
  }
  return h;
}

// Whole-system spec collection for complexity accounting.
inline std::vector<nn::NetworkSpec> system_networks(const ScenarioConfig& sc,
                                                    const std::string& scheme,
                                                    int codebook_size,
                                                    int conv2_stride = 1) {
  std::vector<nn::NetworkSpec> nets;
  const bool hbf = scheme.find("hbf") != std::string::npos;
  if (scheme.rfind("fulldec", 0) == 0) {
    for (int m = 0; m < sc.ap_count; ++m)
      nets.push_back(fulldec_network(sc, codebook_size, hbf, 0.0, conv2_stride));
  } else if (scheme.rfind("partdec", 0) == 0) {
    nets.push_back(partdec_trunk(sc, 0.0, conv2_stride));
    const auto h = partdec_head(sc, codebook_size, hbf);
    for (int m = 0; m < sc.ap_count; ++m) {
      nn::NetworkSpec per_ap;
      per_ap.in_shape = {1024};
      per_ap.backbone = h.nc_chain;
      for (const auto& l : h.ap_chain) per_ap.backbone.push_back(l);
      per_ap.heads = h.heads;
      nets.push_back(per_ap);
    }
  } else {
    throw ConfigError("system_networks: unknown scheme " + scheme);
  }
  return nets;
}

// ---------------------------------------------------------------------------
// batch assembly

// Constant per-AP channel tensors for a batch: hre/him[m] are (B, N_U, N_T)
// with rows conj-ready (gain of user u = sum_t conj(h)[t] * u[t]).
struct BatchChannels {
  int batch = 0, users = 0, aps = 0, antennas = 0;
  std::vector<nn::Tensor> hre, him;
};

inline BatchChannels pack_channels(const Dataset& ds,
                                   const std::vector<int>& idx) {
  BatchChannels bc;
  bc.batch = static_cast<int>(idx.size());
  bc.users = ds.config.user_count;
  bc.aps = ds.config.ap_count;
  bc.antennas = ds.config.antennas_per_ap;
  for (int m = 0; m < bc.aps; ++m) {
    nn::Tensor re({bc.batch, bc.users, bc.antennas});
    nn::Tensor im({bc.batch, bc.users, bc.antennas});
    for (int b = 0; b < bc.batch; ++b) {
      const ChannelSet& cs = ds.samples[static_cast<std::size_t>(idx[b])];
      for (int u = 0; u < bc.users; ++u) {
        const CVec h = cs.user_ap(u, m);
        for (int t = 0; t < bc.antennas; ++t) {
          const std::size_t at =
              (static_cast<std::size_t>(b) * bc.users + u) * bc.antennas + t;
          re.v[at] = h(t).real();
          im.v[at] = h(t).imag();
        }
      }
    }
    bc.hre.push_back(std::move(re));
    bc.him.push_back(std::move(im));
  }
  return bc;
}

// Quantized RSSI inputs for every sample: (M, N_U, K) codes scaled to [0, 1].
inline std::vector<nn::Tensor> build_inputs(const Dataset& ds,
                                            const SsbSet& ssb, double sigma2,
                                            const QuantPolicy& q,
                                            std::uint64_t seed) {
  std::vector<nn::Tensor> out;
  out.reserve(ds.samples.size());
  const double denom = static_cast<double>((1 << q.bits) - 1);
  for (std::size_t s = 0; s < ds.samples.size(); ++s) {
    RngStream rng(seed, "rssi.noise", s);
    RssiFeedback fb = quantize_rssi(
        measure_rssi(ds.samples[s], ssb, sigma2, rng), q);
    nn::Tensor t({ds.config.ap_count, ds.config.user_count, ssb.bursts});
    for (int m = 0; m < ds.config.ap_count; ++m)
      for (int u = 0; u < ds.config.user_count; ++u)
        for (int k = 0; k < ssb.bursts; ++k)
          t.v[(static_cast<std::size_t>(m) * ds.config.user_count + u) *
                  ssb.bursts +
              k] = fb.alpha_q[fb.at(u, m, k)] / denom;
    out.push_back(std::move(t));
  }
  return out;
}

inline nn::Tensor slice_input_ap(const std::vector<nn::Tensor>& inputs,
                                 const std::vector<int>& idx, int m) {
  const int nu = inputs[0].dim(1), k = inputs[0].dim(2);
  nn::Tensor t({static_cast<int>(idx.size()), 1, nu, k});
  const long plane = static_cast<long>(nu) * k;
  for (std::size_t b = 0; b < idx.size(); ++b)
    std::copy_n(inputs[static_cast<std::size_t>(idx[b])].v.data() + m * plane,
                plane, t.v.data() + static_cast<long>(b) * plane);
  return t;
}

inline nn::Tensor stack_input_all(const std::vector<nn::Tensor>& inputs,
                                  const std::vector<int>& idx) {
  const int aps = inputs[0].dim(0), nu = inputs[0].dim(1), k = inputs[0].dim(2);
  nn::Tensor t({static_cast<int>(idx.size()), aps, nu, k});
  const long vol = static_cast<long>(aps) * nu * k;
  for (std::size_t b = 0; b < idx.size(); ++b)
    std::copy_n(inputs[static_cast<std::size_t>(idx[b])].v.data(), vol,
                t.v.data() + static_cast<long>(b) * vol);
  return t;
}

// ---------------------------------------------------------------------------
// losses

namespace detail {

// deinterleave a (B, 2*rows*cols) regression output, (re, im) pairs in
// user-major, antenna/chain-minor order, into (B, rows, cols) re/im tensors
inline std::pair<int, int> split_complex(nn::Tape& t, int reg, int rows,
                                         int cols) {
  std::vector<int> idx_re(static_cast<std::size_t>(rows) * cols);
  std::vector<int> idx_im(idx_re.size());
  for (int u = 0; u < cols; ++u)
    for (int r = 0; r < rows; ++r) {
      idx_re[static_cast<std::size_t>(r) * cols + u] = 2 * (u * rows + r);
      idx_im[static_cast<std::size_t>(r) * cols + u] = 2 * (u * rows + r) + 1;
    }
  const int b = t.val(reg).dim(0);
  const int re = nn::reshape(t, nn::gather_cols(t, reg, idx_re), {b, rows, cols});
  const int im = nn::reshape(t, nn::gather_cols(t, reg, idx_im), {b, rows, cols});
  return {re, im};
}

// complex gains G = sum over listed (h, U) products, scaled per batch, as
// separate re/im (B, N_U, N_U) nodes; then per-user rate (B, N_U) and
// per-sample sum-rate (B,)
inline int rate_from_gains(nn::Tape& t, int gre, int gim, double sigma2) {
  const int dre = nn::take_diag(t, gre);
  const int dim = nn::take_diag(t, gim);
  const int sre = nn::reduce_sum(t, gre, 2);
  const int sim = nn::reduce_sum(t, gim, 2);
  const int ire = nn::add_scaled(t, sre, dre, -1.0);
  const int iim = nn::add_scaled(t, sim, dim, -1.0);
  const int sig = nn::add(t, nn::mul(t, dre, dre), nn::mul(t, dim, dim));
  const int intf = nn::add(t, nn::mul(t, ire, ire), nn::mul(t, iim, iim));
  const int den = nn::add_scalar(t, intf, sigma2);
  const int num = nn::add(t, sig, den);
  const int rate_u = nn::scale(
      t, nn::add_scaled(t, nn::log_op(t, num), nn::log_op(t, den), -1.0),
      1.0 / std::log(2.0));
  return nn::reduce_sum(t, rate_u, 1);  // (B,)
}

}  // namespace detail

struct LossResult {
  int loss = -1;   // scalar node
  int rate = -1;   // per-sample sum-rate node (B,)
};

// L_FDP = -R_FDP of the assembled, globally power-normalized precoder.
// reg[m] holds AP m's regression output node (B, 2*N_T*N_U).
inline LossResult loss_fdp(nn::Tape& t, const BatchChannels& bc,
                           const std::vector<int>& reg, double sigma2,
                           double p_max) {
  if (static_cast<int>(reg.size()) != bc.aps)
    throw ConfigError("loss_fdp: one regression output per AP required");
  int pw = -1, gre = -1, gim = -1;
  for (int m = 0; m < bc.aps; ++m) {
    auto [ure, uim] = detail::split_complex(t, reg[m], bc.antennas, bc.users);
    const int p = nn::add(t, nn::reduce_tail(t, nn::mul(t, ure, ure)),
                          nn::reduce_tail(t, nn::mul(t, uim, uim)));
    pw = pw < 0 ? p : nn::add(t, pw, p);
    const int gr = nn::add(t, nn::bmm_const(t, bc.hre[m], ure),
                           nn::bmm_const(t, bc.him[m], uim));
    const int gi = nn::add_scaled(t, nn::bmm_const(t, bc.hre[m], uim),
                                  nn::bmm_const(t, bc.him[m], ure), -1.0);
    gre = gre < 0 ? gr : nn::add(t, gre, gr);
    gim = gim < 0 ? gi : nn::add(t, gim, gi);
  }
  const int sc = nn::scale(t, nn::rsqrt(t, pw), std::sqrt(p_max));
  const int gre_n = nn::mul_bcast0(t, gre, sc);
  const int gim_n = nn::mul_bcast0(t, gim, sc);
  LossResult r;
  r.rate = detail::rate_from_gains(t, gre_n, gim_n, sigma2);
  r.loss = nn::scale(t, nn::mean_all(t, r.rate), -1.0);
  return r;
}

// Constant re/im parts of each codebook entry.
struct CodebookTensors {
  std::vector<std::vector<nn::Tensor>> re, im;  // [m][l], each (N_T, N_RF)
};

inline CodebookTensors codebook_tensors(const AnalogCodebook& book) {
  CodebookTensors ct;
  ct.re.resize(book.entries.size());
  ct.im.resize(book.entries.size());
  for (std::size_t m = 0; m < book.entries.size(); ++m)
    for (const CMat& a : book.entries[m]) {
      nn::Tensor re({static_cast<int>(a.rows()), static_cast<int>(a.cols())});
      nn::Tensor im = re;
      for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < a.cols(); ++j) {
          re.v[static_cast<std::size_t>(i * a.cols() + j)] = a(i, j).real();
          im.v[static_cast<std::size_t>(i * a.cols() + j)] = a(i, j).imag();
        }
      ct.re[m].push_back(std::move(re));
      ct.im[m].push_back(std::move(im));
    }
  return ct;
}

// Expected-rate HBF loss: exact enumeration over all codeword tuples,
// each tuple's hybrid precoder power-normalized before rate evaluation,
// weighted by the product of per-AP classifier probabilities.
inline LossResult loss_hbf(nn::Tape& t, const BatchChannels& bc,
                           const std::vector<int>& reg,
                           const std::vector<int>& probs,
                           const CodebookTensors& ct, double sigma2,
                           double p_max) {
  const int aps = bc.aps;
  if (static_cast<int>(reg.size()) != aps ||
      static_cast<int>(probs.size()) != aps)
    throw ConfigError("loss_hbf: one regression and classifier per AP");
  long tuples = 1;
  std::vector<int> sizes(static_cast<std::size_t>(aps));
  for (int m = 0; m < aps; ++m) {
    sizes[static_cast<std::size_t>(m)] = static_cast<int>(ct.re[m].size());
    tuples *= sizes[static_cast<std::size_t>(m)];
    if (t.val(probs[m]).dim(1) != sizes[static_cast<std::size_t>(m)])
      throw ConfigError("loss_hbf: classifier width != codebook size");
  }
  if (tuples > kTupleEnumerationCap)
    throw ConfigError(
        "loss_hbf: codeword tuple count exceeds the exact-enumeration cap; "
        "use the sampled loss");

  const int nrf = t.val(reg[0]).dim(1) / (2 * bc.users);
  // per-AP, per-codeword gains and powers
  std::vector<std::vector<int>> g_re(static_cast<std::size_t>(aps)),
      g_im(static_cast<std::size_t>(aps)), pw(static_cast<std::size_t>(aps)),
      pcol(static_cast<std::size_t>(aps));
  for (int m = 0; m < aps; ++m) {
    auto [wre, wim] = detail::split_complex(t, reg[m], nrf, bc.users);
    for (int l = 0; l < sizes[static_cast<std::size_t>(m)]; ++l) {
      const nn::Tensor& are = ct.re[m][static_cast<std::size_t>(l)];
      const nn::Tensor& aim = ct.im[m][static_cast<std::size_t>(l)];
      const int ure = nn::add_scaled(t, nn::lmm_const(t, are, wre),
                                     nn::lmm_const(t, aim, wim), -1.0);
      const int uim = nn::add(t, nn::lmm_const(t, are, wim),
                              nn::lmm_const(t, aim, wre));
      g_re[static_cast<std::size_t>(m)].push_back(
          nn::add(t, nn::bmm_const(t, bc.hre[m], ure),
                  nn::bmm_const(t, bc.him[m], uim)));
      g_im[static_cast<std::size_t>(m)].push_back(
          nn::add_scaled(t, nn::bmm_const(t, bc.hre[m], uim),
                         nn::bmm_const(t, bc.him[m], ure), -1.0));
      pw[static_cast<std::size_t>(m)].push_back(
          nn::add(t, nn::reduce_tail(t, nn::mul(t, ure, ure)),
                  nn::reduce_tail(t, nn::mul(t, uim, uim))));
      pcol[static_cast<std::size_t>(m)].push_back(nn::reshape(
          t, nn::gather_cols(t, probs[m], {l}), {bc.batch}));
    }
  }

  int total = -1;
  std::vector<int> l(static_cast<std::size_t>(aps), 0);
  for (long tup = 0; tup < tuples; ++tup) {
    int gre = -1, gim = -1, power = -1, weight = -1;
    for (int m = 0; m < aps; ++m) {
      const int lm = l[static_cast<std::size_t>(m)];
      const int gr = g_re[static_cast<std::size_t>(m)][static_cast<std::size_t>(lm)];
      const int gi = g_im[static_cast<std::size_t>(m)][static_cast<std::size_t>(lm)];
      const int pm = pw[static_cast<std::size_t>(m)][static_cast<std::size_t>(lm)];
      const int wm = pcol[static_cast<std::size_t>(m)][static_cast<std::size_t>(lm)];
      gre = gre < 0 ? gr : nn::add(t, gre, gr);
      gim = gim < 0 ? gi : nn::add(t, gim, gi);
      power = power < 0 ? pm : nn::add(t, power, pm);
      weight = weight < 0 ? wm : nn::mul(t, weight, wm);
    }
    const int sc = nn::scale(t, nn::rsqrt(t, power), std::sqrt(p_max));
    const int rate = detail::rate_from_gains(t, nn::mul_bcast0(t, gre, sc),
                                             nn::mul_bcast0(t, gim, sc), sigma2);
    const int contrib = nn::mul(t, rate, weight);
    total = total < 0 ? contrib : nn::add(t, total, contrib);
    for (int m = aps - 1; m >= 0; --m) {
      if (++l[static_cast<std::size_t>(m)] < sizes[static_cast<std::size_t>(m)])
        break;
      l[static_cast<std::size_t>(m)] = 0;
    }
  }
  LossResult r;
  r.rate = total;  // expected sum-rate per sample
  r.loss = nn::scale(t, nn::mean_all(t, total), -1.0);
  return r;
}

// Monte Carlo variant for tuple spaces beyond the enumeration cap: pathwise
// gradients for the regression outputs, score-function (with a mean baseline)
// for the classifier probabilities. Off by default; the exact loss is used
// whenever it fits.
inline LossResult loss_hbf_sampled(nn::Tape& t, const BatchChannels& bc,
                                   const std::vector<int>& reg,
                                   const std::vector<int>& probs,
                                   const CodebookTensors& ct, double sigma2,
                                   double p_max, int n_draws, RngStream& rng) {
  const int aps = bc.aps;
  const int nrf = t.val(reg[0]).dim(1) / (2 * bc.users);
  std::vector<std::pair<int, int>> w_parts;
  for (int m = 0; m < aps; ++m)
    w_parts.push_back(detail::split_complex(t, reg[m], nrf, bc.users));

  int pathwise = -1;   // mean over draws of per-sample rate
  int score = -1;      // sum of (advantage-weighted) log-probs
  std::vector<std::vector<double>> rates(static_cast<std::size_t>(n_draws));
  std::vector<int> rate_nodes, logp_nodes;
  for (int d = 0; d < n_draws; ++d) {
    int gre = -1, gim = -1, power = -1, logp = -1;
    for (int m = 0; m < aps; ++m) {
      const auto& pv = t.val(probs[m]);
      // one shared draw per (draw, AP) keeps the tape small; per-sample draws
      // change nothing in expectation
      const int lsize = pv.dim(1);
      double u = rng.uniform(0.0, 1.0);
      int lm = 0;
      {
        // sample from the batch-mean distribution
        std::vector<double> mean(static_cast<std::size_t>(lsize), 0.0);
        for (int b = 0; b < pv.dim(0); ++b)
          for (int c = 0; c < lsize; ++c)
            mean[static_cast<std::size_t>(c)] +=
                pv.v[static_cast<std::size_t>(b) * lsize + c] / pv.dim(0);
        double acc = 0.0;
        for (int c = 0; c < lsize; ++c) {
          acc += mean[static_cast<std::size_t>(c)];
          if (u <= acc) {
            lm = c;
            break;
          }
          lm = c;
        }
      }
      const nn::Tensor& are = ct.re[m][static_cast<std::size_t>(lm)];
      const nn::Tensor& aim = ct.im[m][static_cast<std::size_t>(lm)];
      auto [wre, wim] = w_parts[static_cast<std::size_t>(m)];
      const int ure = nn::add_scaled(t, nn::lmm_const(t, are, wre),
                                     nn::lmm_const(t, aim, wim), -1.0);
      const int uim = nn::add(t, nn::lmm_const(t, are, wim),
                              nn::lmm_const(t, aim, wre));
      const int gr = nn::add(t, nn::bmm_const(t, bc.hre[m], ure),
                             nn::bmm_const(t, bc.him[m], uim));
      const int gi = nn::add_scaled(t, nn::bmm_const(t, bc.hre[m], uim),
                                    nn::bmm_const(t, bc.him[m], ure), -1.0);
      const int pm = nn::add(t, nn::reduce_tail(t, nn::mul(t, ure, ure)),
                             nn::reduce_tail(t, nn::mul(t, uim, uim)));
      const int lp = nn::log_op(t, nn::reshape(
          t, nn::gather_cols(t, probs[m], {lm}), {bc.batch}));
      gre = gre < 0 ? gr : nn::add(t, gre, gr);
      gim = gim < 0 ? gi : nn::add(t, gim, gi);
      power = power < 0 ? pm : nn::add(t, power, pm);
      logp = logp < 0 ? lp : nn::add(t, logp, lp);
    }
    const int sc = nn::scale(t, nn::rsqrt(t, power), std::sqrt(p_max));
    const int rate = detail::rate_from_gains(t, nn::mul_bcast0(t, gre, sc),
                                             nn::mul_bcast0(t, gim, sc), sigma2);
    rates[static_cast<std::size_t>(d)] = t.val(rate).v;
    rate_nodes.push_back(rate);
    logp_nodes.push_back(logp);
  }
  // baseline: mean rate over draws, per sample
  const int b = bc.batch;
  std::vector<double> base(static_cast<std::size_t>(b), 0.0);
  for (const auto& rv : rates)
    for (int i = 0; i < b; ++i)
      base[static_cast<std::size_t>(i)] += rv[static_cast<std::size_t>(i)] / n_draws;
  for (int d = 0; d < n_draws; ++d) {
    nn::Tensor adv({b});
    for (int i = 0; i < b; ++i)
      adv.v[static_cast<std::size_t>(i)] =
          rates[static_cast<std::size_t>(d)][static_cast<std::size_t>(i)] -
          base[static_cast<std::size_t>(i)];
    const int term =
        nn::mul(t, logp_nodes[static_cast<std::size_t>(d)], t.constant(adv));
    const int both = nn::add(t, rate_nodes[static_cast<std::size_t>(d)], term);
    pathwise = pathwise < 0 ? both : nn::add(t, pathwise, both);
  }
  (void)score;
  LossResult r;
  r.rate = nn::scale(t, pathwise, 1.0 / n_draws);
  r.loss = nn::scale(t, nn::mean_all(t, r.rate), -1.0);
  return r;
}

// ---------------------------------------------------------------------------
// model bundle

enum class Scheme { fulldec_fdp, fulldec_hbf, partdec_fdp, partdec_hbf };

inline bool scheme_is_hbf(Scheme s) {
  return s == Scheme::fulldec_hbf || s == Scheme::partdec_hbf;
}
inline bool scheme_is_fulldec(Scheme s) {
  return s == Scheme::fulldec_fdp || s == Scheme::fulldec_hbf;
}

inline Scheme parse_scheme(const std::string& name) {
  if (name == "FULLDEC_FDP") return Scheme::fulldec_fdp;
  if (name == "FULLDEC_HBF") return Scheme::fulldec_hbf;
  if (name == "PARTDEC_FDP") return Scheme::partdec_fdp;
  if (name == "PARTDEC_HBF") return Scheme::partdec_hbf;
  throw ConfigError("not a learned scheme: " + name);
}

inline std::string scheme_name(Scheme s) {
  switch (s) {
    case Scheme::fulldec_fdp: return "FULLDEC_FDP";
    case Scheme::fulldec_hbf: return "FULLDEC_HBF";
    case Scheme::partdec_fdp: return "PARTDEC_FDP";
    case Scheme::partdec_hbf: return "PARTDEC_HBF";
  }
  throw ConfigError("bad scheme value");
}

// All state for one learned scheme: per-AP network structures (parameters are
// never shared across APs), the parameter store, and the analog codebook for
// the HBF variants.
struct ModelBundle {
  Scheme scheme = Scheme::fulldec_fdp;
  ScenarioConfig sc;
  std::vector<nn::NetworkSpec> local;  // FullDeC: one per AP
  nn::NetworkSpec trunk;               // PartDeC
  std::vector<PartdecHeadSpec> head;   // PartDeC: one per AP
  nn::ParamStore params;
  AnalogCodebook codebook;
  CodebookTensors cbt;

  static std::string ap_prefix(int m) { return "ap" + std::to_string(m); }
  static std::string head_prefix(int m) { return "head" + std::to_string(m); }
};

inline ModelBundle make_bundle(const ScenarioConfig& sc, Scheme scheme,
                               const AnalogCodebook* book, double dropout_rate,
                               std::uint64_t init_seed) {
  ModelBundle b;
  b.scheme = scheme;
  b.sc = sc;
  const bool hbf = scheme_is_hbf(scheme);
  if (hbf) {
    if (book == nullptr || static_cast<int>(book->entries.size()) != sc.ap_count)
      throw ConfigError("make_bundle: HBF schemes need a per-AP codebook");
    b.codebook = *book;
    b.cbt = codebook_tensors(b.codebook);
  }
  RngStream rng(init_seed, "init");
  if (scheme_is_fulldec(scheme)) {
    for (int m = 0; m < sc.ap_count; ++m) {
      const int lm = hbf ? b.codebook.size(m) : 0;
      b.local.push_back(fulldec_network(sc, lm, hbf, dropout_rate));
      nn::build_network_params(b.params, ModelBundle::ap_prefix(m),
                               b.local.back(), rng);
    }
  } else {
    b.trunk = partdec_trunk(sc, dropout_rate);
    nn::build_network_params(b.params, "trunk", b.trunk, rng);
    for (int m = 0; m < sc.ap_count; ++m) {
      const int lm = hbf ? b.codebook.size(m) : 0;
      b.head.push_back(partdec_head(sc, lm, hbf));
      const std::string p = ModelBundle::head_prefix(m);
      nn::build_chain_params(b.params, p + ".nc", b.head.back().nc_chain,
                             {1024}, rng);
      nn::build_chain_params(b.params, p + ".ap", b.head.back().ap_chain,
                             {kPartdecBottleneck}, rng);
      for (const auto& [name, spec] : b.head.back().heads)
        nn::build_chain_params(b.params, p + "." + name, spec, {1024}, rng);
    }
  }
  return b;
}

// Forward pass over a batch; returns per-AP regression (and classifier) nodes.
struct NetOutputs {
  std::vector<int> reg;
  std::vector<int> probs;
};

inline NetOutputs forward_bundle(nn::Tape& t, ModelBundle& b,
                                 nn::LeafMap& leaves,
                                 const std::vector<nn::Tensor>& inputs,
                                 const std::vector<int>& idx, nn::Mode mode,
                                 RngStream& drop_rng) {
  NetOutputs out;
  const bool hbf = scheme_is_hbf(b.scheme);
  if (scheme_is_fulldec(b.scheme)) {
    for (int m = 0; m < b.sc.ap_count; ++m) {
      const int x = t.constant(slice_input_ap(inputs, idx, m));
      auto r = nn::forward_network(t, b.params, leaves,
                                   ModelBundle::ap_prefix(m),
                                   b.local[static_cast<std::size_t>(m)], x,
                                   mode, drop_rng);
      out.reg.push_back(r.heads.at("reg"));
      if (hbf) out.probs.push_back(r.heads.at("cls"));
    }
  } else {
    const int x = t.constant(stack_input_all(inputs, idx));
    const int feat = nn::forward_chain(t, b.params, leaves, "trunk",
                                       b.trunk.backbone, x, mode, drop_rng);
    for (int m = 0; m < b.sc.ap_count; ++m) {
      const auto& h = b.head[static_cast<std::size_t>(m)];
      const std::string p = ModelBundle::head_prefix(m);
      const int cross = nn::forward_chain(t, b.params, leaves, p + ".nc",
                                          h.nc_chain, feat, mode, drop_rng);
      const int wide = nn::forward_chain(t, b.params, leaves, p + ".ap",
                                         h.ap_chain, cross, mode, drop_rng);
      for (const auto& [name, spec] : h.heads) {
        const int y =
            nn::forward_chain(t, b.params, leaves, p + "." + name, spec, wide,
                              mode, drop_rng);
        if (name == "reg") out.reg.push_back(y);
        else out.probs.push_back(y);
      }
    }
  }
  return out;
}

inline LossResult bundle_loss(nn::Tape& t, ModelBundle& b,
                              const BatchChannels& bc, const NetOutputs& out,
                              double sigma2, double p_max) {
  if (scheme_is_hbf(b.scheme))
    return loss_hbf(t, bc, out.reg, out.probs, b.cbt, sigma2, p_max);
  return loss_fdp(t, bc, out.reg, sigma2, p_max);
}

// ---------------------------------------------------------------------------
// inference

// Raw per-AP output for one sample: the regression matrix (N_RF x N_U for
// HBF, N_T x N_U for FDP) before global normalization, plus the selected
// codeword for HBF (argmax of the classifier, ties to the lowest index).
struct InferredParts {
  CMat mat;
  int codeword = -1;
};

namespace detail {

inline CMat unpack_complex(const nn::Tensor& v, int sample, int rows,
                           int cols) {
  CMat w(rows, cols);
  const long base = static_cast<long>(sample) * v.dim(1);
  for (int u = 0; u < cols; ++u)
    for (int r = 0; r < rows; ++r)
      w(r, u) = cx(v.v[static_cast<std::size_t>(base + 2 * (u * rows + r))],
                   v.v[static_cast<std::size_t>(base + 2 * (u * rows + r) + 1)]);
  return w;
}

inline int argmax_row(const nn::Tensor& p, int sample) {
  const int cols = p.dim(1);
  const long base = static_cast<long>(sample) * cols;
  int best = 0;
  for (int c = 1; c < cols; ++c)
    if (p.v[static_cast<std::size_t>(base + c)] >
        p.v[static_cast<std::size_t>(base + best)])
      best = c;
  return best;
}

}  // namespace detail

// FullDeC inference for one AP: consumes only that AP's quantized RSSI grid
// and that AP's parameters. rssi_m is (1, N_U, K) or (B, 1, N_U, K).
inline std::vector<InferredParts> infer_fulldec(ModelBundle& b,
                                                const nn::Tensor& rssi_m,
                                                int m) {
  if (!scheme_is_fulldec(b.scheme))
    throw ConfigError("infer_fulldec: bundle is not a FullDeC scheme");
  nn::Tensor x = rssi_m;
  if (x.rank() == 3) x.shape.insert(x.shape.begin(), 1);
  const int batch = x.dim(0);
  nn::Tape t;
  nn::LeafMap leaves;
  RngStream rng(0, "unused");
  auto r = nn::forward_network(t, b.params, leaves, ModelBundle::ap_prefix(m),
                               b.local[static_cast<std::size_t>(m)],
                               t.constant(x), nn::Mode::eval, rng);
  const bool hbf = scheme_is_hbf(b.scheme);
  const int rows = hbf ? b.sc.rf_chains : b.sc.antennas_per_ap;
  std::vector<InferredParts> out(static_cast<std::size_t>(batch));
  for (int s = 0; s < batch; ++s) {
    out[static_cast<std::size_t>(s)].mat =
        detail::unpack_complex(t.val(r.heads.at("reg")), s, rows, b.sc.user_count);
    if (hbf)
      out[static_cast<std::size_t>(s)].codeword =
          detail::argmax_row(t.val(r.heads.at("cls")), s);
  }
  return out;
}

struct PartdecInference {
  // parts[sample][ap]
  std::vector<std::vector<InferredParts>> parts;
  SignalingReport signaling;
};

// PartDeC inference: the trunk plus the NC side of every head run first; the
// 200 bottleneck activations per AP are copied out into plain buffers (the
// fronthaul payload), and each AP side resumes from those buffers on a fresh
// tape. rssi holds (M, N_U, K) grids, one per sample.
inline PartdecInference infer_partdec(ModelBundle& b,
                                      const std::vector<nn::Tensor>& rssi,
                                      const std::vector<int>& idx) {
  if (scheme_is_fulldec(b.scheme))
    throw ConfigError("infer_partdec: bundle is not a PartDeC scheme");
  const int batch = static_cast<int>(idx.size());
  const bool hbf = scheme_is_hbf(b.scheme);
  RngStream rng(0, "unused");
  // NC side
  std::vector<nn::Tensor> crossing;  // per AP, (B, 200)
  {
    nn::Tape t;
    nn::LeafMap leaves;
    const int x = t.constant(stack_input_all(rssi, idx));
    const int feat = nn::forward_chain(t, b.params, leaves, "trunk",
                                       b.trunk.backbone, x, nn::Mode::eval, rng);
    for (int m = 0; m < b.sc.ap_count; ++m) {
      const int cross = nn::forward_chain(
          t, b.params, leaves, ModelBundle::head_prefix(m) + ".nc",
          b.head[static_cast<std::size_t>(m)].nc_chain, feat, nn::Mode::eval,
          rng);
      crossing.push_back(t.val(cross));
    }
  }
  // AP side, one fresh tape per AP, fed only by the crossing buffer
  PartdecInference out;
  out.parts.assign(static_cast<std::size_t>(batch), {});
  for (auto& row : out.parts) row.resize(static_cast<std::size_t>(b.sc.ap_count));
  const int rows = hbf ? b.sc.rf_chains : b.sc.antennas_per_ap;
  for (int m = 0; m < b.sc.ap_count; ++m) {
    nn::Tape t;
    nn::LeafMap leaves;
    const auto& h = b.head[static_cast<std::size_t>(m)];
    const std::string p = ModelBundle::head_prefix(m);
    const int wide = nn::forward_chain(
        t, b.params, leaves, p + ".ap", h.ap_chain,
        t.constant(crossing[static_cast<std::size_t>(m)]), nn::Mode::eval, rng);
    int reg = -1, cls = -1;
    for (const auto& [name, spec] : h.heads) {
      const int y = nn::forward_chain(t, b.params, leaves, p + "." + name,
                                      spec, wide, nn::Mode::eval, rng);
      if (name == "reg") reg = y;
      else cls = y;
    }
    for (int s = 0; s < batch; ++s) {
      auto& part = out.parts[static_cast<std::size_t>(s)][static_cast<std::size_t>(m)];
      part.mat = detail::unpack_complex(t.val(reg), s, rows, b.sc.user_count);
      if (hbf) part.codeword = detail::argmax_row(t.val(cls), s);
    }
  }
  out.signaling = signaling(hbf ? "partdec-hbf" : "partdec-fdp", b.sc.ap_count,
                            b.sc.antennas_per_ap, b.sc.rf_chains,
                            b.sc.user_count, b.sc.ssb_count);
  return out;
}

// Monolithic PartDeC forward (no fronthaul cut); reference path for checking
// the split inference.
inline std::vector<std::vector<InferredParts>> infer_partdec_monolithic(
    ModelBundle& b, const std::vector<nn::Tensor>& rssi,
    const std::vector<int>& idx) {
  nn::Tape t;
  nn::LeafMap leaves;
  RngStream rng(0, "unused");
  const auto out = forward_bundle(t, b, leaves, rssi, idx, nn::Mode::eval, rng);
  const bool hbf = scheme_is_hbf(b.scheme);
  const int rows = hbf ? b.sc.rf_chains : b.sc.antennas_per_ap;
  std::vector<std::vector<InferredParts>> parts(idx.size());
  for (std::size_t s = 0; s < idx.size(); ++s) {
    parts[s].resize(static_cast<std::size_t>(b.sc.ap_count));
    for (int m = 0; m < b.sc.ap_count; ++m) {
      auto& part = parts[s][static_cast<std::size_t>(m)];
      part.mat = detail::unpack_complex(
          t.val(out.reg[static_cast<std::size_t>(m)]), static_cast<int>(s),
          rows, b.sc.user_count);
      if (hbf)
        part.codeword = detail::argmax_row(
            t.val(out.probs[static_cast<std::size_t>(m)]), static_cast<int>(s));
    }
  }
  return parts;
}

// Assemble one sample's precoder from per-AP parts and normalize globally.
inline FdpPrecoder assemble_fdp(const ModelBundle& b,
                                const std::vector<InferredParts>& parts) {
  FdpPrecoder f;
  f.aps = b.sc.ap_count;
  f.antennas = b.sc.antennas_per_ap;
  f.users = b.sc.user_count;
  f.U.resize(f.aps * f.antennas, f.users);
  for (int m = 0; m < f.aps; ++m)
    f.U.block(m * f.antennas, 0, f.antennas, f.users) =
        parts[static_cast<std::size_t>(m)].mat;
  normalize_power(f, b.sc.p_max);
  return f;
}

inline HbfPrecoder assemble_hbf(const ModelBundle& b,
                                const std::vector<InferredParts>& parts) {
  HbfPrecoder h;
  for (int m = 0; m < b.sc.ap_count; ++m) {
    const auto& part = parts[static_cast<std::size_t>(m)];
    h.A.push_back(b.codebook.entries[static_cast<std::size_t>(m)]
                      [static_cast<std::size_t>(part.codeword)]);
    h.W.push_back(part.mat);
    h.selection.push_back(part.codeword);
  }
  normalize_power(h, b.sc.p_max);
  return h;
}

inline RateReport assembled_report(const ModelBundle& b, const ChannelSet& cs,
                                   const std::vector<InferredParts>& parts,
                                   double sigma2) {
  if (scheme_is_hbf(b.scheme)) {
    const HbfPrecoder h = assemble_hbf(b, parts);
    return make_rate_report(hbf_gains(cs, h), sigma2);
  }
  const FdpPrecoder f = assemble_fdp(b, parts);
  return make_rate_report(fdp_gains(cs, f), sigma2);
}

// Deployment-mode evaluation (eval-mode forward, HBF codewords by argmax) of
// a slice of the dataset.
inline std::vector<RateReport> eval_bundle(ModelBundle& b, const Dataset& ds,
                                           const std::vector<nn::Tensor>& inputs,
                                           const std::vector<int>& idx,
                                           double sigma2, int batch = 1000) {
  std::vector<RateReport> reports;
  reports.reserve(idx.size());
  RngStream rng(0, "unused");
  for (std::size_t start = 0; start < idx.size();
       start += static_cast<std::size_t>(batch)) {
    const std::size_t stop = std::min(idx.size(), start + static_cast<std::size_t>(batch));
    const std::vector<int> chunk(idx.begin() + static_cast<long>(start),
                                 idx.begin() + static_cast<long>(stop));
    std::vector<std::vector<InferredParts>> parts;
    if (scheme_is_fulldec(b.scheme)) {
      parts.assign(chunk.size(), {});
      for (auto& row : parts) row.resize(static_cast<std::size_t>(b.sc.ap_count));
      for (int m = 0; m < b.sc.ap_count; ++m) {
        const auto col = infer_fulldec(b, slice_input_ap(inputs, chunk, m), m);
        for (std::size_t s = 0; s < chunk.size(); ++s)
          parts[s][static_cast<std::size_t>(m)] = col[s];
      }
    } else {
      parts = infer_partdec(b, inputs, chunk).parts;
    }
    for (std::size_t s = 0; s < chunk.size(); ++s)
      reports.push_back(assembled_report(
          b, ds.samples[static_cast<std::size_t>(chunk[s])], parts[s], sigma2));
  }
  return reports;
}

inline double mean_sum_rate(const std::vector<RateReport>& reports) {
  if (reports.empty()) return 0.0;
  double acc = 0.0;
  for (const auto& r : reports) acc += r.sum_rate;
  return acc / static_cast<double>(reports.size());
}

// ---------------------------------------------------------------------------
// evaluation over a noise sweep

struct EvalPoint {
  double sigma2 = 0.0;
  std::vector<RateReport> reports;  // one per evaluated sample
  double mean_sum_rate = 0.0;
};

// Deployment evaluation across noise levels. The RSSI inputs are re-measured
// at each point's sigma2 so the networks see feedback consistent with the
// operating noise, while the parameters stay fixed.
inline std::vector<EvalPoint> evaluate(ModelBundle& b, const Dataset& ds,
                                       const SsbSet& ssb, const QuantPolicy& qp,
                                       const std::vector<int>& idx,
                                       const std::vector<double>& sweep,
                                       std::uint64_t seed) {
  std::vector<EvalPoint> out;
  for (double s2 : sweep) {
    if (s2 <= 0.0) throw ConfigError("evaluate: sigma2 must be positive");
    EvalPoint p;
    p.sigma2 = s2;
    const auto inputs = build_inputs(ds, ssb, s2, qp, seed);
    p.reports = eval_bundle(b, ds, inputs, idx, s2);
    p.mean_sum_rate = mean_sum_rate(p.reports);
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// training

struct EpochRow {
  int epoch = 0;
  double loss = 0.0;        // mean training loss over the epoch's batches
  double train_rate = 0.0;  // deployment-mode mean sum-rate, train slice
  double test_rate = 0.0;   // deployment-mode mean sum-rate, full test split
};

struct TrainResult {
  std::vector<EpochRow> curve;
  int best_epoch = -1;
  double best_test_rate = 0.0;
};

// Unsupervised training: AdamW on the negated expected sum-rate, per-epoch
// train/test curves, early stopping on the test metric, best-on-test
// checkpointing (the store is left at the best parameters).
inline TrainResult train(ModelBundle& b, const Dataset& ds,
                         const std::vector<nn::Tensor>& inputs,
                         const TrainConfig& tc) {
  tc.validate();
  const int n = static_cast<int>(ds.samples.size());
  const int n_train = ds.train_count();
  const double sigma2 =
      tc.loss_sigma2 > 0.0 ? tc.loss_sigma2 : ds.config.sigma2;

  std::vector<int> train_idx(static_cast<std::size_t>(n_train));
  for (int i = 0; i < n_train; ++i) train_idx[static_cast<std::size_t>(i)] = i;
  std::vector<int> test_idx;
  for (int i = n_train; i < n; ++i) test_idx.push_back(i);
  // fixed slice for the train-side curve; capped to keep epochs cheap
  std::vector<int> train_eval_idx(
      train_idx.begin(),
      train_idx.begin() + std::min(n_train, 3000));

  nn::AdamConfig adam;
  adam.lr = tc.lr;
  adam.weight_decay = tc.weight_decay;

  TrainResult result;
  nn::ParamStore best;
  int since_best = 0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    // step schedule: full rate for the first half, 0.3x until 80%, then 0.1x
    const double frac = static_cast<double>(epoch) / tc.epochs;
    adam.lr = tc.lr * (frac < 0.5 ? 1.0 : frac < 0.8 ? 0.3 : 0.1);
    RngStream shuffle_rng(tc.init_seed, "shuffle", epoch);
    std::vector<int> order = train_idx;
    for (int i = n_train - 1; i > 0; --i) {
      const int j = static_cast<int>(shuffle_rng.uniform_index(
          static_cast<std::size_t>(i) + 1));
      std::swap(order[static_cast<std::size_t>(i)],
                order[static_cast<std::size_t>(j)]);
    }
    int n_batches = n_train / tc.batch;
    int batch_size = tc.batch;
    if (n_batches == 0) {
      n_batches = 1;
      batch_size = n_train;
    }
    if (batch_size < 2)
      throw ConfigError("train: batches of at least 2 samples required");

    double loss_acc = 0.0;
    for (int bi = 0; bi < n_batches; ++bi) {
      std::vector<int> chunk(
          order.begin() + static_cast<long>(bi) * batch_size,
          order.begin() + static_cast<long>(bi + 1) * batch_size);
      try {
        nn::Tape t;
        nn::LeafMap leaves;
        RngStream drop_rng(tc.init_seed, "dropout", epoch, bi);
        const auto out = forward_bundle(t, b, leaves, inputs, chunk,
                                        nn::Mode::train, drop_rng);
        const BatchChannels bc = pack_channels(ds, chunk);
        const LossResult lr = bundle_loss(t, b, bc, out, sigma2, b.sc.p_max);
        loss_acc += t.val(lr.loss).v[0];
        t.backward(lr.loss);
        nn::adam_step(b.params, t, leaves, adam);
      } catch (const NumericError& e) {
        throw NumericError("training aborted at epoch " +
                           std::to_string(epoch) + ", batch " +
                           std::to_string(bi) + ": " + e.what());
      }
    }

    EpochRow row;
    row.epoch = epoch;
    row.loss = loss_acc / n_batches;
    row.train_rate = mean_sum_rate(
        eval_bundle(b, ds, inputs, train_eval_idx, ds.config.sigma2));
    row.test_rate = test_idx.empty()
                        ? row.train_rate
                        : mean_sum_rate(eval_bundle(b, ds, inputs, test_idx,
                                                    ds.config.sigma2));
    result.curve.push_back(row);

    if (result.best_epoch < 0 || row.test_rate > result.best_test_rate + 1e-9) {
      result.best_epoch = epoch;
      result.best_test_rate = row.test_rate;
      best = b.params;
      since_best = 0;
    } else if (++since_best > tc.patience) {
      break;
    }
  }
  if (result.best_epoch >= 0) b.params = std::move(best);
  return result;
}

}  // namespace cfmimo
