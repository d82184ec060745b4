// Command-line front end: experiment orchestration and reports.
#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>

#include "cfmimo/experiment.hpp"

namespace {

using namespace cfmimo;

struct Flags {
  std::string config_path;
  std::string output_dir;
  std::string schemes;
  std::string sweep;
  // scenario
  long seed = -1;
  int ap_count = -1, antennas = -1, rf_chains = -1, users = -1, ssb_count = -1;
  double sigma2 = -1.0, p_max = -1.0;
  // beam training
  int rssi_bits = -1, codebook_size = -1;
  // training
  int samples = -1, epochs = -1, batch = -1, patience = -1;
  long init_seed = -1;
  double lr = -1.0, weight_decay = -1.0, dropout = -1.0, loss_sigma2 = -1.0;
  double train_fraction = -1.0;
  int baseline_cap = -1;
};

// Shared flag set; every flag mirrors a config key and overrides the file.
void add_flags(CLI::App* cmd, Flags& f) {
  cmd->add_option("-c,--config", f.config_path, "JSON config file");
  cmd->add_option("-o,--output-dir", f.output_dir, "results directory");
  cmd->add_option("--schemes", f.schemes, "comma-separated scheme list");
  cmd->add_option("--sweep", f.sweep, "comma-separated sigma2 sweep (dBW)");
  cmd->add_option("--seed", f.seed, "scenario seed");
  cmd->add_option("--ap-count", f.ap_count, "number of APs");
  cmd->add_option("--antennas", f.antennas, "antennas per AP");
  cmd->add_option("--rf-chains", f.rf_chains, "RF chains per AP");
  cmd->add_option("--users", f.users, "number of users");
  cmd->add_option("--ssb-count", f.ssb_count, "probe beams per AP");
  cmd->add_option("--sigma2", f.sigma2, "noise power (watts)");
  cmd->add_option("--p-max", f.p_max, "total power budget (watts)");
  cmd->add_option("--rssi-bits", f.rssi_bits, "RSSI quantizer bits");
  cmd->add_option("--codebook-size", f.codebook_size, "per-AP codebook size");
  cmd->add_option("--samples", f.samples, "dataset size");
  cmd->add_option("--epochs", f.epochs, "training epochs");
  cmd->add_option("--batch", f.batch, "batch size");
  cmd->add_option("--patience", f.patience, "early-stop patience");
  cmd->add_option("--init-seed", f.init_seed, "weight init seed");
  cmd->add_option("--lr", f.lr, "learning rate");
  cmd->add_option("--weight-decay", f.weight_decay, "decoupled weight decay");
  cmd->add_option("--dropout", f.dropout, "dropout rate");
  cmd->add_option("--loss-sigma2", f.loss_sigma2,
                  "noise power used inside the training loss");
  cmd->add_option("--train-fraction", f.train_fraction, "train split");
  cmd->add_option("--baseline-cap", f.baseline_cap,
                  "test-sample cap for iterative baselines (0 = all)");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

ExperimentConfig resolve(const Flags& f) {
  ExperimentConfig cfg;
  if (!f.config_path.empty()) cfg = load_experiment_config(f.config_path);
  if (!f.output_dir.empty()) cfg.output_dir = f.output_dir;
  if (!f.schemes.empty()) cfg.schemes = split_list(f.schemes);
  if (!f.sweep.empty()) {
    cfg.sweep_dbw.clear();
    for (const auto& tok : split_list(f.sweep)) {
      try {
        cfg.sweep_dbw.push_back(std::stod(tok));
      } catch (const std::exception&) {
        throw ConfigError("bad sweep value: " + tok);
      }
    }
  }
  if (f.seed >= 0) cfg.scenario.seed = static_cast<std::uint64_t>(f.seed);
  if (f.ap_count >= 0) cfg.scenario.ap_count = f.ap_count;
  if (f.antennas >= 0) cfg.scenario.antennas_per_ap = f.antennas;
  if (f.rf_chains >= 0) cfg.scenario.rf_chains = f.rf_chains;
  if (f.users >= 0) cfg.scenario.user_count = f.users;
  if (f.ssb_count >= 0) cfg.scenario.ssb_count = f.ssb_count;
  if (f.sigma2 >= 0.0) cfg.scenario.sigma2 = f.sigma2;
  if (f.p_max >= 0.0) cfg.scenario.p_max = f.p_max;
  if (f.rssi_bits >= 0) cfg.beamtraining.rssi_bits = f.rssi_bits;
  if (f.codebook_size >= 0) cfg.beamtraining.codebook_size = f.codebook_size;
  if (f.samples >= 0) cfg.train.samples = f.samples;
  if (f.epochs >= 0) cfg.train.epochs = f.epochs;
  if (f.batch >= 0) cfg.train.batch = f.batch;
  if (f.patience >= 0) cfg.train.patience = f.patience;
  if (f.init_seed >= 0)
    cfg.train.init_seed = static_cast<std::uint64_t>(f.init_seed);
  if (f.lr >= 0.0) cfg.train.lr = f.lr;
  if (f.weight_decay >= 0.0) cfg.train.weight_decay = f.weight_decay;
  if (f.dropout >= 0.0) cfg.train.dropout = f.dropout;
  if (f.loss_sigma2 >= 0.0) cfg.train.loss_sigma2 = f.loss_sigma2;
  if (f.train_fraction >= 0.0) cfg.train.train_fraction = f.train_fraction;
  if (f.baseline_cap >= 0) cfg.baseline_cap = f.baseline_cap;
  cfg.validate();
  return cfg;
}

void print_summary(const ExperimentResult& res) {
  std::printf("results: %s (config %s)\n", res.out_dir.c_str(),
              res.hash.c_str());
  std::printf("%-14s %12s %12s\n", "scheme", "snr_db", "sum_rate");
  for (const auto& r : res.sweep)
    std::printf("%-14s %12.2f %12.4f\n", r.scheme.c_str(), r.mean_snr_db,
                r.mean_sum_rate);
  if (!res.rm_counts.empty()) {
    std::printf("%-14s %14s\n", "scheme", "rm_per_infer");
    for (const auto& [s, rm] : res.rm_counts)
      std::printf("%-14s %14.0f\n", s.c_str(), rm);
  }
}

int cmd_generate(const Flags& f) {
  const ExperimentConfig cfg = resolve(f);
  DirLock lock(cfg.output_dir);
  Dataset ds = generate_dataset(cfg.scenario, cfg.train.samples,
                                cfg.train.train_fraction);
  const std::string path = cfg.output_dir + "/dataset.cfbf";
  save_dataset(ds, path);
  std::printf("wrote %s (%zu samples, %d train / %d test)\n", path.c_str(),
              ds.samples.size(), ds.train_count(), ds.test_count());
  return 0;
}

int cmd_design(const Flags& f) {
  const ExperimentConfig cfg = resolve(f);
  DirLock lock(cfg.output_dir);
  const std::string ds_path = cfg.output_dir + "/dataset.cfbf";
  Dataset ds = std::filesystem::exists(ds_path)
                   ? load_dataset(ds_path, cfg.scenario)
                   : generate_dataset(cfg.scenario, cfg.train.samples,
                                      cfg.train.train_fraction);
  const SsbSet ssb = design_ssb(ds, cfg.beamtraining);
  save_ssb(ssb, cfg.output_dir + "/ssb.cfbf");
  std::vector<FdpPrecoder> targets;
  const int cap = std::min(ds.train_count(), kCodebookTargetCap);
  for (int i = 0; i < cap; ++i)
    targets.push_back(zero_forcing(ds.samples[static_cast<std::size_t>(i)],
                                   cfg.scenario.p_max));
  CodebookPolicy policy;
  policy.target_size = cfg.beamtraining.codebook_size;
  const AnalogCodebook book = design_codebook(ds, targets, policy);
  save_codebook(book, cfg.output_dir + "/codebook.cfbf");
  std::printf("wrote ssb.cfbf (%d beams/AP) and codebook.cfbf (sizes", ssb.bursts);
  for (std::size_t m = 0; m < book.entries.size(); ++m)
    std::printf(" %zu", book.entries[m].size());
  std::printf(") in %s\n", cfg.output_dir.c_str());
  return 0;
}

int cmd_train(const Flags& f) {
  ExperimentConfig cfg = resolve(f);
  std::vector<std::string> learned;
  for (const auto& s : cfg.schemes)
    if (scheme_is_learned(s)) learned.push_back(s);
  if (learned.empty())
    throw ConfigError("train: no learned scheme in the scheme list");
  cfg.schemes = learned;
  print_summary(run_experiment(cfg));
  return 0;
}

int cmd_evaluate(const Flags& f) {
  const ExperimentConfig cfg = resolve(f);
  RunOptions opts;
  opts.train_learned = false;
  print_summary(run_experiment(cfg, opts));
  return 0;
}

int cmd_compare(const Flags& f) {
  const ExperimentConfig cfg = resolve(f);
  print_summary(run_experiment(cfg));
  return 0;
}

int cmd_complexity(const Flags& f) {
  const ExperimentConfig cfg = resolve(f);
  const auto& sc = cfg.scenario;
  std::printf("%-14s %14s\n", "scheme", "rm_per_infer");
  for (const auto& scheme : cfg.schemes) {
    double rm = 0.0;
    if (scheme == "CB") {
      rm = 4.0 * sc.ap_count * sc.antennas_per_ap * sc.user_count;
    } else if (scheme == "ZF" || scheme == "OFDP") {
      rm = rm_zf(sc.ap_count, sc.antennas_per_ap, sc.user_count);
    } else if (scheme == "PEALTMIN_OFDP" || scheme == "PEALTMIN_ZF") {
      rm = rm_zf(sc.ap_count, sc.antennas_per_ap, sc.user_count) +
           rm_pe_altmin(kPeAltminReferenceIters, sc.ap_count, sc.rf_chains,
                        sc.user_count, sc.antennas_per_ap);
    } else {
      rm = rm_dnn(system_networks(sc, signaling_key(scheme),
                                  cfg.beamtraining.codebook_size));
    }
    std::printf("%-14s %14.0f\n", scheme.c_str(), rm);
  }
  return 0;
}

int cmd_signaling(const Flags& f) {
  const ExperimentConfig cfg = resolve(f);
  const auto& sc = cfg.scenario;
  std::printf("%-14s %10s %10s\n", "scheme", "uplink", "downlink");
  for (const auto& scheme : cfg.schemes) {
    const auto s = signaling(signaling_key(scheme), sc.ap_count,
                             sc.antennas_per_ap, sc.rf_chains, sc.user_count,
                             sc.ssb_count);
    std::printf("%-14s %10ld %10ld\n", scheme.c_str(), s.up_count,
                s.down_count);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* threads = std::getenv("CFMIMO_THREADS")) {
    const int n = std::atoi(threads);
    if (n > 0) Eigen::setNbThreads(n);
  }

  CLI::App app{"cell-free massive MIMO beamforming laboratory"};
  app.require_subcommand(1);
  Flags f;
  int (*entry)(const Flags&) = nullptr;

  auto wire = [&](const char* name, const char* help,
                  int (*fn)(const Flags&)) {
    CLI::App* cmd = app.add_subcommand(name, help);
    add_flags(cmd, f);
    cmd->callback([&entry, fn] { entry = fn; });
  };
  wire("generate-channels", "generate and persist the channel dataset",
       cmd_generate);
  wire("design-codebook", "design probe beams and the analog codebook",
       cmd_design);
  wire("train", "train the learned schemes end to end", cmd_train);
  wire("evaluate", "evaluate baselines and saved checkpoints over the sweep",
       cmd_evaluate);
  wire("compare", "run the full pipeline and print a comparison", cmd_compare);
  wire("complexity-report", "per-scheme real-multiplication counts",
       cmd_complexity);
  wire("signaling-report", "per-scheme fronthaul coefficient counts",
       cmd_signaling);

  try {
    app.parse(argc, argv);
    return entry ? entry(f) : 2;
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 3;
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 4;
  }
}
