// Experiment orchestration: dataset generation, beam training, codebook
// design, baselines, DNN training, the sigma2 sweep, and accounting, all
// emitted into a results directory stamped with the config hash.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cfmimo/accounting.hpp"
#include "cfmimo/beamtraining.hpp"
#include "cfmimo/channel.hpp"
#include "cfmimo/config.hpp"
#include "cfmimo/container.hpp"
#include "cfmimo/csvout.hpp"
#include "cfmimo/metrics.hpp"
#include "cfmimo/models.hpp"
#include "cfmimo/precoding.hpp"

namespace cfmimo {

// Reference average iteration count used when reporting hybrid factorization
// complexity (the solver itself stops on its own tolerance).
constexpr int kPeAltminReferenceIters = 18;
// Cap on training samples mined for codebook candidates.
constexpr int kCodebookTargetCap = 2000;

// ---------------------------------------------------------------------------
// output directory lock

class DirLock {
 public:
  explicit DirLock(const std::string& dir) : path_(dir + "/lock") {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory: " + dir);
    if (std::filesystem::exists(path_))
      throw IoError("output directory locked by another run: " + dir +
                    " (remove the lock file if that run is dead)");
    std::ofstream out(path_);
    if (!out) throw IoError("cannot create lock file in " + dir);
    out << "locked\n";
  }
  ~DirLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::string path_;
};

// ---------------------------------------------------------------------------
// dataset and checkpoint persistence

inline void save_dataset(const Dataset& ds, const std::string& path) {
  Container c;
  const auto n = static_cast<std::uint64_t>(ds.samples.size());
  const auto rows = static_cast<std::uint64_t>(ds.config.ap_count) *
                    static_cast<std::uint64_t>(ds.config.antennas_per_ap);
  const auto users = static_cast<std::uint64_t>(ds.config.user_count);
  std::vector<double> h;
  h.reserve(n * rows * users * 2);
  for (const auto& cs : ds.samples)
    for (Eigen::Index r = 0; r < cs.h.rows(); ++r)
      for (Eigen::Index u = 0; u < cs.h.cols(); ++u) {
        h.push_back(cs.h(r, u).real());
        h.push_back(cs.h(r, u).imag());
      }
  c["channels"] = make_real_entry({n, rows, users, 2}, std::move(h));
  std::vector<double> drops;
  drops.reserve(n * users);
  for (const auto& d : ds.drops)
    for (int p : d) drops.push_back(static_cast<double>(p));
  c["drops"] = make_real_entry({n, users}, std::move(drops));
  c["meta"] = make_real_entry(
      {4}, {static_cast<double>(ds.config.ap_count),
            static_cast<double>(ds.config.antennas_per_ap),
            static_cast<double>(ds.config.user_count), ds.split});
  save_container(c, path);
}

inline Dataset load_dataset(const std::string& path,
                            const ScenarioConfig& cfg) {
  const Container c = load_container(path);
  auto need = [&](const char* name) -> const TensorEntry& {
    auto it = c.find(name);
    if (it == c.end())
      throw IoError(std::string("dataset missing entry: ") + name);
    return it->second;
  };
  const auto& meta = need("meta");
  if (meta.values.size() != 4 ||
      static_cast<int>(meta.values[0]) != cfg.ap_count ||
      static_cast<int>(meta.values[1]) != cfg.antennas_per_ap ||
      static_cast<int>(meta.values[2]) != cfg.user_count)
    throw ConfigError("dataset dimensions do not match the scenario config");
  const auto& h = need("channels");
  const auto& drops = need("drops");
  if (h.dims.size() != 4 || h.dims[3] != 2)
    throw IoError("dataset channel entry malformed");
  Dataset ds;
  ds.config = cfg;
  ds.split = meta.values[3];
  const auto n = h.dims[0];
  const auto rows = static_cast<Eigen::Index>(h.dims[1]);
  const auto users = static_cast<Eigen::Index>(h.dims[2]);
  std::size_t at = 0;
  for (std::uint64_t s = 0; s < n; ++s) {
    ChannelSet cs;
    cs.aps = cfg.ap_count;
    cs.antennas = cfg.antennas_per_ap;
    cs.users = cfg.user_count;
    cs.h.resize(rows, users);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index u = 0; u < users; ++u) {
        cs.h(r, u) = cx(h.values[at], h.values[at + 1]);
        at += 2;
      }
    ds.samples.push_back(std::move(cs));
  }
  std::size_t dt = 0;
  for (std::uint64_t s = 0; s < n; ++s) {
    std::vector<int> row(static_cast<std::size_t>(users));
    for (auto& p : row) p = static_cast<int>(drops.values[dt++]);
    ds.drops.push_back(std::move(row));
  }
  return ds;
}

inline void save_params(const nn::ParamStore& store, const std::string& path) {
  Container c;
  for (const auto& [name, e] : store.items) {
    std::vector<std::uint64_t> dims;
    for (int d : e.value.shape) dims.push_back(static_cast<std::uint64_t>(d));
    c[name] = make_real_entry(dims, e.value.v);
  }
  save_container(c, path);
}

inline void load_params(nn::ParamStore& store, const std::string& path) {
  const Container c = load_container(path);
  for (auto& [name, e] : store.items) {
    auto it = c.find(name);
    if (it == c.end())
      throw ConfigError("checkpoint missing parameter: " + name);
    if (it->second.values.size() != e.value.v.size())
      throw ConfigError("checkpoint shape mismatch for: " + name);
    e.value.v = it->second.values;
    e.m = nn::Tensor();
    e.v = nn::Tensor();
  }
  if (c.size() != store.items.size())
    throw ConfigError("checkpoint holds parameters unknown to this model");
  store.step = 0;
}

inline void save_ssb(const SsbSet& ssb, const std::string& path) {
  Container c;
  for (int m = 0; m < ssb.aps; ++m)
    c["ssb.ap" + std::to_string(m)] =
        make_complex_entry(ssb.beams[static_cast<std::size_t>(m)]);
  c["meta"] = make_real_entry({2}, {static_cast<double>(ssb.aps),
                                    static_cast<double>(ssb.bursts)});
  save_container(c, path);
}

inline SsbSet load_ssb(const std::string& path) {
  const Container c = load_container(path);
  auto it = c.find("meta");
  if (it == c.end()) throw IoError("ssb container missing meta entry");
  SsbSet ssb;
  ssb.aps = static_cast<int>(it->second.values.at(0));
  ssb.bursts = static_cast<int>(it->second.values.at(1));
  for (int m = 0; m < ssb.aps; ++m) {
    auto e = c.find("ssb.ap" + std::to_string(m));
    if (e == c.end()) throw IoError("ssb container missing a beam set");
    ssb.beams.push_back(complex_entry_to_matrix(e->second));
  }
  return ssb;
}

inline void save_codebook(const AnalogCodebook& book, const std::string& path) {
  Container c;
  std::vector<double> sizes;
  for (std::size_t m = 0; m < book.entries.size(); ++m) {
    sizes.push_back(static_cast<double>(book.entries[m].size()));
    for (std::size_t l = 0; l < book.entries[m].size(); ++l)
      c["cw.ap" + std::to_string(m) + "." + std::to_string(l)] =
          make_complex_entry(book.entries[m][l]);
  }
  const auto n_aps = static_cast<std::uint64_t>(sizes.size());
  c["sizes"] = make_real_entry({n_aps}, std::move(sizes));
  save_container(c, path);
}

inline AnalogCodebook load_codebook(const std::string& path) {
  const Container c = load_container(path);
  auto it = c.find("sizes");
  if (it == c.end()) throw IoError("codebook container missing sizes entry");
  AnalogCodebook book;
  book.entries.resize(it->second.values.size());
  for (std::size_t m = 0; m < book.entries.size(); ++m) {
    const auto lm = static_cast<std::size_t>(it->second.values[m]);
    for (std::size_t l = 0; l < lm; ++l) {
      auto e = c.find("cw.ap" + std::to_string(m) + "." + std::to_string(l));
      if (e == c.end()) throw IoError("codebook container missing a codeword");
      book.entries[m].push_back(complex_entry_to_matrix(e->second));
    }
  }
  return book;
}

// ---------------------------------------------------------------------------
// scheme classification and baselines

inline bool scheme_is_learned(const std::string& s) {
  return s.rfind("FULLDEC", 0) == 0 || s.rfind("PARTDEC", 0) == 0;
}

inline bool scheme_uses_codebook(const std::string& s) {
  return s == "FULLDEC_HBF" || s == "PARTDEC_HBF";
}

inline bool scheme_is_iterative_baseline(const std::string& s) {
  return s == "OFDP" || s == "PEALTMIN_OFDP" || s == "PEALTMIN_ZF";
}

// One baseline rate report for one sample at one noise level.
inline RateReport baseline_report(const std::string& scheme,
                                  const ChannelSet& cs, double sigma2,
                                  double p_max, int n_rf) {
  if (scheme == "CB") {
    const FdpPrecoder f = conjugate_beamforming(cs, p_max);
    return make_rate_report(fdp_gains(cs, f), sigma2);
  }
  if (scheme == "ZF") {
    const FdpPrecoder f = zero_forcing(cs, p_max);
    return make_rate_report(fdp_gains(cs, f), sigma2);
  }
  if (scheme == "OFDP") {
    const OfdpResult r = solve_ofdp(cs, sigma2, p_max);
    return make_rate_report(fdp_gains(cs, r.precoder), sigma2);
  }
  if (scheme == "PEALTMIN_OFDP" || scheme == "PEALTMIN_ZF") {
    const FdpPrecoder target = scheme == "PEALTMIN_OFDP"
                                   ? solve_ofdp(cs, sigma2, p_max).precoder
                                   : zero_forcing(cs, p_max);
    const HbfPrecoder h = hbf_from_fdp(cs, target, nullptr, n_rf, p_max);
    return make_rate_report(hbf_gains(cs, h), sigma2);
  }
  throw ConfigError("not a baseline scheme: " + scheme);
}

// Per-inference real-multiplication count of a trained bundle, honoring the
// actual (possibly pruned) per-AP codebook sizes.
inline double bundle_rm(
    const ModelBundle& b,
    std::vector<std::pair<std::string, double>>* breakdown = nullptr) {
  if (scheme_is_fulldec(b.scheme)) return rm_dnn(b.local, breakdown);
  double total = rm_dnn(b.trunk, breakdown, "trunk");
  const auto mid = nn::chain_out_shape(b.trunk.backbone, b.trunk.in_shape);
  for (std::size_t m = 0; m < b.head.size(); ++m) {
    nn::NetworkSpec per_ap;
    per_ap.in_shape = mid;
    per_ap.backbone = b.head[m].nc_chain;
    for (const auto& l : b.head[m].ap_chain) per_ap.backbone.push_back(l);
    per_ap.heads = b.head[m].heads;
    total += rm_dnn(per_ap, breakdown,
                    ModelBundle::head_prefix(static_cast<int>(m)));
  }
  return total;
}

inline std::string signaling_key(const std::string& scheme) {
  if (scheme == "CB") return "cb";
  if (scheme == "ZF") return "zf";
  if (scheme == "OFDP") return "ofdp";
  if (scheme == "PEALTMIN_OFDP" || scheme == "PEALTMIN_ZF")
    return "pe-altmin-ofdp";
  if (scheme == "FULLDEC_FDP") return "fulldec-fdp";
  if (scheme == "FULLDEC_HBF") return "fulldec-hbf";
  if (scheme == "PARTDEC_FDP") return "partdec-fdp";
  if (scheme == "PARTDEC_HBF") return "partdec-hbf";
  throw ConfigError("unknown scheme: " + scheme);
}

// ---------------------------------------------------------------------------
// run_experiment

struct SweepRow {
  std::string scheme;
  double sigma2 = 0.0;
  double mean_snr_db = 0.0;
  double mean_sum_rate = 0.0;
};

struct ExperimentResult {
  std::string out_dir;
  std::string hash;
  std::vector<SweepRow> sweep;
  // per-user rates at the highest-SNR sweep point, per scheme (CDF source)
  std::map<std::string, std::vector<double>> tail_rates;
  std::map<std::string, TrainResult> curves;
  std::map<std::string, double> rm_counts;
};

struct RunOptions {
  // false: learned schemes load params_<scheme>.cfbf from the output
  // directory instead of training (beam-training artifacts are reloaded too
  // when present, so checkpoints stay paired with their codebook)
  bool train_learned = true;
};

namespace detail {

inline std::vector<double> sweep_watts(const ExperimentConfig& cfg) {
  std::vector<double> s2;
  for (double dbw : cfg.sweep_dbw) s2.push_back(std::pow(10.0, dbw / 10.0));
  if (s2.empty()) s2.push_back(cfg.scenario.sigma2);
  return s2;
}

inline std::vector<double> collect_per_user(const std::vector<RateReport>& rs) {
  std::vector<double> out;
  for (const auto& r : rs)
    for (Eigen::Index u = 0; u < r.per_user_rate.size(); ++u)
      out.push_back(r.per_user_rate(u));
  return out;
}

}  // namespace detail

inline ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                       const RunOptions& opts = {}) {
  cfg.validate();
  ExperimentResult res;
  res.out_dir = cfg.output_dir;
  res.hash = config_hash(cfg);
  DirLock lock(cfg.output_dir);
  const std::string dir = cfg.output_dir + "/";
  save_experiment_config(cfg, dir + "config.json");

  // stage: channels
  Dataset ds = generate_dataset(cfg.scenario, cfg.train.samples,
                                cfg.train.train_fraction);
  save_dataset(ds, dir + "dataset.cfbf");
  const double energy = mean_channel_energy(make_scenario(cfg.scenario));
  auto mean_snr_db = [&](double s2) {
    return 10.0 * std::log10(cfg.scenario.p_max * energy /
                             (cfg.scenario.user_count * s2));
  };

  const auto sweep = detail::sweep_watts(cfg);
  const std::size_t hi = static_cast<std::size_t>(
      std::min_element(sweep.begin(), sweep.end()) - sweep.begin());

  std::vector<int> test_idx;
  for (int i = ds.train_count(); i < static_cast<int>(ds.samples.size()); ++i)
    test_idx.push_back(i);
  if (test_idx.empty())
    for (int i = 0; i < static_cast<int>(ds.samples.size()); ++i)
      test_idx.push_back(i);

  bool needs_rssi = false, needs_book = false;
  for (const auto& s : cfg.schemes) {
    needs_rssi |= scheme_is_learned(s);
    needs_book |= scheme_uses_codebook(s);
  }

  // stage: beam training artifacts
  const QuantPolicy qp = quant_policy(cfg.beamtraining);
  std::optional<SsbSet> ssb;
  if (needs_rssi) {
    if (!opts.train_learned && std::filesystem::exists(dir + "ssb.cfbf")) {
      ssb = load_ssb(dir + "ssb.cfbf");
    } else {
      ssb = design_ssb(ds, cfg.beamtraining);
      save_ssb(*ssb, dir + "ssb.cfbf");
    }
  }
  std::optional<AnalogCodebook> book;
  if (needs_book) {
    if (!opts.train_learned && std::filesystem::exists(dir + "codebook.cfbf")) {
      book = load_codebook(dir + "codebook.cfbf");
    } else {
      std::vector<FdpPrecoder> targets;
      const int cap = std::min(ds.train_count(), kCodebookTargetCap);
      targets.reserve(static_cast<std::size_t>(cap));
      for (int i = 0; i < cap; ++i)
        targets.push_back(zero_forcing(ds.samples[static_cast<std::size_t>(i)],
                                       cfg.scenario.p_max));
      CodebookPolicy policy;
      policy.target_size = cfg.beamtraining.codebook_size;
      book = design_codebook(ds, targets, policy);
      save_codebook(*book, dir + "codebook.cfbf");
    }
  }

  // stage: schemes over the sweep
  CsvWriter sweep_csv(dir + "sweep.csv",
                      {"scheme", "sigma2_dbw", "mean_snr_db", "mean_sum_rate"},
                      res.hash);
  for (const auto& scheme : cfg.schemes) {
    if (scheme_is_learned(scheme)) {
      ModelBundle bundle = make_bundle(
          cfg.scenario, parse_scheme(scheme),
          scheme_uses_codebook(scheme) ? &*book : nullptr, cfg.train.dropout,
          cfg.train.init_seed);
      res.rm_counts[scheme] = bundle_rm(bundle);
      if (opts.train_learned) {
        const auto inputs =
            build_inputs(ds, *ssb, cfg.scenario.sigma2, qp, cfg.scenario.seed);
        const TrainResult tr = train(bundle, ds, inputs, cfg.train);
        res.curves[scheme] = tr;
        {
          CsvWriter curve(dir + "curve_" + scheme + ".csv",
                          {"epoch", "train_sum_rate", "test_sum_rate", "loss"},
                          res.hash);
          for (const auto& row : tr.curve)
            curve.row(row.epoch, row.train_rate, row.test_rate, row.loss);
        }
        save_params(bundle.params, dir + "params_" + scheme + ".cfbf");
      } else {
        const std::string ckpt = dir + "params_" + scheme + ".cfbf";
        if (!std::filesystem::exists(ckpt))
          throw ConfigError("no checkpoint for scheme " + scheme + " at " +
                            ckpt + " (run the train command first)");
        load_params(bundle.params, ckpt);
      }
      const auto points =
          evaluate(bundle, ds, *ssb, qp, test_idx, sweep, cfg.scenario.seed);
      for (std::size_t i = 0; i < points.size(); ++i) {
        SweepRow row{scheme, points[i].sigma2, mean_snr_db(points[i].sigma2),
                     points[i].mean_sum_rate};
        res.sweep.push_back(row);
        sweep_csv.row(scheme, 10.0 * std::log10(row.sigma2), row.mean_snr_db,
                      row.mean_sum_rate);
        if (i == hi)
          res.tail_rates[scheme] = detail::collect_per_user(points[i].reports);
      }
    } else {
      std::vector<int> idx = test_idx;
      if (scheme_is_iterative_baseline(scheme) && cfg.baseline_cap > 0 &&
          static_cast<int>(idx.size()) > cfg.baseline_cap)
        idx.resize(static_cast<std::size_t>(cfg.baseline_cap));
      for (std::size_t i = 0; i < sweep.size(); ++i) {
        std::vector<RateReport> reports;
        reports.reserve(idx.size());
        for (int s : idx)
          reports.push_back(baseline_report(
              scheme, ds.samples[static_cast<std::size_t>(s)], sweep[i],
              cfg.scenario.p_max, cfg.scenario.rf_chains));
        SweepRow row{scheme, sweep[i], mean_snr_db(sweep[i]),
                     mean_sum_rate(reports)};
        res.sweep.push_back(row);
        sweep_csv.row(scheme, 10.0 * std::log10(row.sigma2), row.mean_snr_db,
                      row.mean_sum_rate);
        if (i == hi)
          res.tail_rates[scheme] = detail::collect_per_user(reports);
      }
    }
  }
  sweep_csv.flush();

  // stage: per-user rate CDF at the highest-SNR point
  {
    CsvWriter cdf_csv(dir + "cdf.csv", {"scheme", "rate", "level"}, res.hash);
    for (auto& [scheme, rates] : res.tail_rates) {
      std::vector<double> sorted = rates;
      std::sort(sorted.begin(), sorted.end());
      const double n = static_cast<double>(sorted.size());
      for (std::size_t i = 0; i < sorted.size(); ++i)
        cdf_csv.row(scheme, sorted[i], (static_cast<double>(i) + 1.0) / n);
    }
  }

  // stage: accounting
  {
    CsvWriter acc(dir + "complexity.csv", {"scheme", "rm_count"}, res.hash);
    CsvWriter sig(dir + "signaling.csv", {"scheme", "up", "down"}, res.hash);
    const auto& sc = cfg.scenario;
    for (const auto& scheme : cfg.schemes) {
      double rm = 0.0;
      if (scheme == "CB") {
        // conjugate weights plus per-column norms
        rm = 4.0 * sc.ap_count * sc.antennas_per_ap * sc.user_count;
      } else if (scheme == "ZF" || scheme == "OFDP") {
        rm = rm_zf(sc.ap_count, sc.antennas_per_ap, sc.user_count);
      } else if (scheme == "PEALTMIN_OFDP" || scheme == "PEALTMIN_ZF") {
        rm = rm_zf(sc.ap_count, sc.antennas_per_ap, sc.user_count) +
             rm_pe_altmin(kPeAltminReferenceIters, sc.ap_count, sc.rf_chains,
                          sc.user_count, sc.antennas_per_ap);
      } else {
        rm = res.rm_counts.at(scheme);
      }
      res.rm_counts[scheme] = rm;
      acc.row(scheme, rm);
      const auto s = signaling(signaling_key(scheme), sc.ap_count,
                               sc.antennas_per_ap, sc.rf_chains, sc.user_count,
                               sc.ssb_count);
      sig.row(scheme, s.up_count, s.down_count);
    }
  }
  return res;
}

}  // namespace cfmimo