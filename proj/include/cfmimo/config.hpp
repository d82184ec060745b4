#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfmimo/common.hpp"

namespace cfmimo {

using json = nlohmann::json;

struct GeometryConfig {
  double area = 40.0;                // square side, meters
  double margin = 4.0;               // user grid inset from the walls
  int grid_per_side = 40;            // finite user-position grid resolution
  // APs sit on the boundary circle facing the center unless given explicitly.
  std::vector<std::array<double, 2>> ap_positions;
};

struct MultipathConfig {
  int clusters = 6;
  int rays_per_cluster = 3;
  double angle_spread = 0.03;        // radians, per-ray jitter
  double path_loss_exponent = 2.0;
  double wavelength = 40.0;          // carrier wavelength, meters
  double scatter_gain = 0.3;         // cluster amplitude relative to LOS
  double reference_gain = 1e-6;      // path gain at 1 m
  double antenna_spacing = 0.5;      // ULA spacing in wavelengths
};

struct ScenarioConfig {
  int ap_count = 2;                  // M
  int antennas_per_ap = 8;           // N_T
  int rf_chains = 2;                 // N_RF
  int user_count = 2;                // N_U
  int ssb_count = 4;                 // K
  double sigma2 = 1e-11;             // watts
  double p_max = 1.0;                // watts
  GeometryConfig geometry;
  MultipathConfig multipath;
  std::uint64_t seed = 1;

  void validate() const {
    if (ap_count < 1) throw ConfigError("ap_count must be >= 1");
    if (user_count < 1) throw ConfigError("user_count must be >= 1");
    if (ssb_count < 1) throw ConfigError("ssb_count must be >= 1");
    if (rf_chains < 1 || rf_chains >= antennas_per_ap)
      throw ConfigError("rf_chains must satisfy 1 <= N_RF < N_T");
    if (sigma2 <= 0.0) throw ConfigError("sigma2 must be positive");
    if (p_max <= 0.0) throw ConfigError("p_max must be positive");
    if (geometry.area <= 0.0) throw ConfigError("geometry.area must be positive");
    if (geometry.grid_per_side < 2)
      throw ConfigError("geometry.grid_per_side must be >= 2");
    if (multipath.clusters < 0 || multipath.rays_per_cluster < 1)
      throw ConfigError("multipath cluster/ray counts invalid");
    if (multipath.wavelength <= 0.0)
      throw ConfigError("multipath.wavelength must be positive");
  }
};

struct BeamtrainingConfig {
  int rssi_bits = 8;
  double quant_floor_db = -140.0;
  double quant_ceil_db = -60.0;
  int codebook_size = 16;            // L_m pruning target, per AP
  int ssb_candidate_count = 16;      // steering directions in the SSB pool

  void validate() const {
    if (rssi_bits < 1 || rssi_bits > 16)
      throw ConfigError("rssi_bits must be in [1,16]");
    if (quant_ceil_db <= quant_floor_db)
      throw ConfigError("quantizer window empty");
    if (codebook_size < 1) throw ConfigError("codebook_size must be >= 1");
    if (ssb_candidate_count < 1)
      throw ConfigError("ssb_candidate_count must be >= 1");
  }
};

struct TrainConfig {
  int samples = 20000;
  double train_fraction = 0.85;
  int epochs = 100;
  int batch = 1000;
  double lr = 1e-3;
  double weight_decay = 1e-6;
  int patience = 10;                 // early stop on test sum-rate plateau
  std::uint64_t init_seed = 1;
  // Noise power used inside the training loss; 0 means the scenario sigma2.
  double loss_sigma2 = 0.0;
  double dropout = 0.0;

  void validate() const {
    if (samples < 1) throw ConfigError("train.samples must be >= 1");
    if (train_fraction <= 0.0 || train_fraction > 1.0)
      throw ConfigError("train.train_fraction must be in (0,1]");
    if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
    if (batch < 1) throw ConfigError("train.batch must be >= 1");
    if (lr < 0.0) throw ConfigError("train.lr must be >= 0");
    if (patience < 0) throw ConfigError("train.patience must be >= 0");
    if (dropout < 0.0 || dropout >= 1.0)
      throw ConfigError("train.dropout must be in [0,1)");
  }
};

inline const std::set<std::string>& scheme_names() {
  static const std::set<std::string> names = {
      "CB",          "ZF",           "OFDP",
      "PEALTMIN_OFDP", "PEALTMIN_ZF", "FULLDEC_FDP",
      "FULLDEC_HBF", "PARTDEC_FDP",  "PARTDEC_HBF"};
  return names;
}

struct ExperimentConfig {
  ScenarioConfig scenario;
  BeamtrainingConfig beamtraining;
  TrainConfig train;
  std::vector<std::string> schemes = {"CB", "ZF"};
  std::vector<double> sweep_dbw;     // sigma2 sweep
  std::string output_dir = "results";
  // Test-split cap for the iterative baselines (OFDP, PEALTMIN_*) whose
  // per-sample solves dominate evaluation time; 0 means the full split.
  int baseline_cap = 0;

  void validate() const {
    scenario.validate();
    beamtraining.validate();
    train.validate();
    for (const auto& s : schemes)
      if (!scheme_names().count(s))
        throw ConfigError("unknown scheme: " + s);
    if (baseline_cap < 0)
      throw ConfigError("baseline_cap must be >= 0");
  }
};

namespace detail {

inline void check_keys(const json& j, std::initializer_list<const char*> allowed,
                       const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed)
      if (it.key() == a) { ok = true; break; }
    if (!ok)
      throw ConfigError("unknown key '" + it.key() + "' in " + where);
  }
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline GeometryConfig geometry_from_json(const json& j) {
  detail::check_keys(j, {"area", "margin", "grid_per_side", "ap_positions"},
                     "geometry");
  GeometryConfig g;
  detail::get_if(j, "area", g.area);
  detail::get_if(j, "margin", g.margin);
  detail::get_if(j, "grid_per_side", g.grid_per_side);
  if (j.contains("ap_positions"))
    for (const auto& p : j.at("ap_positions"))
      g.ap_positions.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
  return g;
}

inline MultipathConfig multipath_from_json(const json& j) {
  detail::check_keys(j,
                     {"clusters", "rays_per_cluster", "angle_spread",
                      "path_loss_exponent", "wavelength", "scatter_gain",
                      "reference_gain", "antenna_spacing"},
                     "multipath");
  MultipathConfig m;
  detail::get_if(j, "clusters", m.clusters);
  detail::get_if(j, "rays_per_cluster", m.rays_per_cluster);
  detail::get_if(j, "angle_spread", m.angle_spread);
  detail::get_if(j, "path_loss_exponent", m.path_loss_exponent);
  detail::get_if(j, "wavelength", m.wavelength);
  detail::get_if(j, "scatter_gain", m.scatter_gain);
  detail::get_if(j, "reference_gain", m.reference_gain);
  detail::get_if(j, "antenna_spacing", m.antenna_spacing);
  return m;
}

inline ScenarioConfig scenario_from_json(const json& j) {
  detail::check_keys(j,
                     {"ap_count", "antennas_per_ap", "rf_chains", "user_count",
                      "ssb_count", "sigma2", "sigma2_dbw", "p_max", "geometry",
                      "multipath", "seed"},
                     "scenario");
  ScenarioConfig s;
  detail::get_if(j, "ap_count", s.ap_count);
  detail::get_if(j, "antennas_per_ap", s.antennas_per_ap);
  detail::get_if(j, "rf_chains", s.rf_chains);
  detail::get_if(j, "user_count", s.user_count);
  detail::get_if(j, "ssb_count", s.ssb_count);
  detail::get_if(j, "sigma2", s.sigma2);
  if (j.contains("sigma2_dbw")) s.sigma2 = db_to_linear(j.at("sigma2_dbw").get<double>());
  detail::get_if(j, "p_max", s.p_max);
  if (j.contains("geometry")) s.geometry = geometry_from_json(j.at("geometry"));
  if (j.contains("multipath")) s.multipath = multipath_from_json(j.at("multipath"));
  detail::get_if(j, "seed", s.seed);
  return s;
}

inline BeamtrainingConfig beamtraining_from_json(const json& j) {
  detail::check_keys(j,
                     {"rssi_bits", "quant_floor_db", "quant_ceil_db",
                      "codebook_size", "ssb_candidate_count"},
                     "beamtraining");
  BeamtrainingConfig b;
  detail::get_if(j, "rssi_bits", b.rssi_bits);
  detail::get_if(j, "quant_floor_db", b.quant_floor_db);
  detail::get_if(j, "quant_ceil_db", b.quant_ceil_db);
  detail::get_if(j, "codebook_size", b.codebook_size);
  detail::get_if(j, "ssb_candidate_count", b.ssb_candidate_count);
  return b;
}

inline TrainConfig train_from_json(const json& j) {
  detail::check_keys(j,
                     {"samples", "train_fraction", "epochs", "batch", "lr",
                      "weight_decay", "patience", "init_seed", "loss_sigma2",
                      "dropout"},
                     "train");
  TrainConfig t;
  detail::get_if(j, "samples", t.samples);
  detail::get_if(j, "train_fraction", t.train_fraction);
  detail::get_if(j, "epochs", t.epochs);
  detail::get_if(j, "batch", t.batch);
  detail::get_if(j, "lr", t.lr);
  detail::get_if(j, "weight_decay", t.weight_decay);
  detail::get_if(j, "patience", t.patience);
  detail::get_if(j, "init_seed", t.init_seed);
  detail::get_if(j, "loss_sigma2", t.loss_sigma2);
  detail::get_if(j, "dropout", t.dropout);
  return t;
}

inline ExperimentConfig experiment_from_json(const json& j) {
  detail::check_keys(j,
                     {"scenario", "beamtraining", "train", "schemes",
                      "sweep_dbw", "output_dir", "baseline_cap"},
                     "experiment");
  ExperimentConfig e;
  if (j.contains("scenario")) e.scenario = scenario_from_json(j.at("scenario"));
  if (j.contains("beamtraining"))
    e.beamtraining = beamtraining_from_json(j.at("beamtraining"));
  if (j.contains("train")) e.train = train_from_json(j.at("train"));
  if (j.contains("schemes"))
    e.schemes = j.at("schemes").get<std::vector<std::string>>();
  if (j.contains("sweep_dbw"))
    e.sweep_dbw = j.at("sweep_dbw").get<std::vector<double>>();
  detail::get_if(j, "output_dir", e.output_dir);
  detail::get_if(j, "baseline_cap", e.baseline_cap);
  e.validate();
  return e;
}

inline json to_json(const GeometryConfig& g) {
  json j;
  j["area"] = g.area;
  j["margin"] = g.margin;
  j["grid_per_side"] = g.grid_per_side;
  if (!g.ap_positions.empty()) {
    json arr = json::array();
    for (const auto& p : g.ap_positions) arr.push_back({p[0], p[1]});
    j["ap_positions"] = arr;
  }
  return j;
}

inline json to_json(const MultipathConfig& m) {
  return json{{"clusters", m.clusters},
              {"rays_per_cluster", m.rays_per_cluster},
              {"angle_spread", m.angle_spread},
              {"path_loss_exponent", m.path_loss_exponent},
              {"wavelength", m.wavelength},
              {"scatter_gain", m.scatter_gain},
              {"reference_gain", m.reference_gain},
              {"antenna_spacing", m.antenna_spacing}};
}

inline json to_json(const ScenarioConfig& s) {
  return json{{"ap_count", s.ap_count},
              {"antennas_per_ap", s.antennas_per_ap},
              {"rf_chains", s.rf_chains},
              {"user_count", s.user_count},
              {"ssb_count", s.ssb_count},
              {"sigma2", s.sigma2},
              {"p_max", s.p_max},
              {"geometry", to_json(s.geometry)},
              {"multipath", to_json(s.multipath)},
              {"seed", s.seed}};
}

inline json to_json(const BeamtrainingConfig& b) {
  return json{{"rssi_bits", b.rssi_bits},
              {"quant_floor_db", b.quant_floor_db},
              {"quant_ceil_db", b.quant_ceil_db},
              {"codebook_size", b.codebook_size},
              {"ssb_candidate_count", b.ssb_candidate_count}};
}

inline json to_json(const TrainConfig& t) {
  return json{{"samples", t.samples},
              {"train_fraction", t.train_fraction},
              {"epochs", t.epochs},
              {"batch", t.batch},
              {"lr", t.lr},
              {"weight_decay", t.weight_decay},
              {"patience", t.patience},
              {"init_seed", t.init_seed},
              {"loss_sigma2", t.loss_sigma2},
              {"dropout", t.dropout}};
}

inline json to_json(const ExperimentConfig& e) {
  return json{{"scenario", to_json(e.scenario)},
              {"beamtraining", to_json(e.beamtraining)},
              {"train", to_json(e.train)},
              {"schemes", e.schemes},
              {"sweep_dbw", e.sweep_dbw},
              {"output_dir", e.output_dir},
              {"baseline_cap", e.baseline_cap}};
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  return experiment_from_json(j);
}

inline void save_experiment_config(const ExperimentConfig& cfg,
                                   const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write config file: " + path);
  out << to_json(cfg).dump(2) << "\n";
}

// FNV-1a over the canonical dump; stamps every result artifact. The output
// directory is masked out so the same experiment hashes the same wherever
// its results land.
inline std::string config_hash(const ExperimentConfig& cfg) {
  nlohmann::json j = to_json(cfg);
  j.erase("output_dir");
  const std::string dump = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : dump) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

}  // namespace cfmimo
