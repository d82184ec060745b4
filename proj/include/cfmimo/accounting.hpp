// Real-multiplication (RM) and fronthaul signaling counters. One complex
// multiplication counts as 4 RMs. DNN counting covers multiplications only:
// activations, batch norm, and additions are excluded.
#pragma once

#include <map>
#include <string>
#include <vector>

#include "cfmimo/common.hpp"
#include "cfmimo/nn.hpp"

namespace cfmimo {

struct ComplexityReport {
  std::string scheme;
  double rm_count = 0.0;
  std::vector<std::pair<std::string, double>> breakdown;
};

struct SignalingReport {
  std::string scheme;
  long up_count = 0;    // APs -> NC real coefficients per inference
  long down_count = 0;  // NC -> APs
};

inline double rm_zf(int m, int n_t, int n_u) {
  const double mt = static_cast<double>(m) * n_t;
  return 4.0 * mt * mt * (2.0 * n_u + mt / 3.0);
}

inline double rm_pe_altmin(int l_iters, int m, int n_rf, int n_u, int n_t) {
  return static_cast<double>(l_iters) * m *
         (8.0 * n_rf * n_u * (n_t + n_u) + 22.0 * n_rf * n_rf * n_rf);
}

inline double rm_svd(int m, int n) {
  return 4.0 * static_cast<double>(m) * m * n +
         22.0 * static_cast<double>(n) * n * n;
}

// Per-sample multiplications of one layer chain, walking shapes from in_shape.
inline double rm_chain(const nn::ModelSpec& spec, std::vector<int> shape,
                       std::vector<std::pair<std::string, double>>* breakdown,
                       const std::string& prefix) {
  using K = nn::LayerSpec::Kind;
  double total = 0.0;
  for (std::size_t i = 0; i < spec.size(); ++i) {
    const auto& l = spec[i];
    double rm = 0.0;
    if (l.kind == K::dense) {
      rm = static_cast<double>(l.in) * l.out;
    } else if (l.kind == K::conv) {
      const auto out = nn::layer_out_shape(l, shape);
      rm = static_cast<double>(l.cin) * l.cout * l.kh * l.kw * out[1] * out[2];
    }
    if (rm > 0.0 && breakdown)
      breakdown->emplace_back(prefix + ".L" + std::to_string(i), rm);
    total += rm;
    shape = nn::layer_out_shape(l, shape);
  }
  return total;
}

inline double rm_dnn(const nn::NetworkSpec& net,
                     std::vector<std::pair<std::string, double>>* breakdown =
                         nullptr,
                     const std::string& prefix = "net") {
  double total = rm_chain(net.backbone, net.in_shape, breakdown, prefix);
  const auto mid = nn::chain_out_shape(net.backbone, net.in_shape);
  for (const auto& [name, spec] : net.heads)
    total += rm_chain(spec, mid, breakdown, prefix + "." + name);
  return total;
}

inline double rm_dnn(const std::vector<nn::NetworkSpec>& nets,
                     std::vector<std::pair<std::string, double>>* breakdown =
                         nullptr) {
  double total = 0.0;
  for (std::size_t i = 0; i < nets.size(); ++i)
    total += rm_dnn(nets[i], breakdown, "net" + std::to_string(i));
  return total;
}

// Fronthaul coefficient counts per inference.
inline SignalingReport signaling(const std::string& scheme, int m, int n_t,
                                 int n_rf, int n_u, int k) {
  SignalingReport r;
  r.scheme = scheme;
  if (scheme == "zf" || scheme == "ofdp") {
    // NC needs full CSI up, APs receive their precoder blocks down
    r.up_count = 2L * m * n_t * n_u;
    r.down_count = 2L * m * n_t * n_u;
  } else if (scheme == "pe-altmin-ofdp") {
    // CSI up as for any centralized design; analog + digital parts down
    r.up_count = 2L * m * n_t * n_u;
    r.down_count = 2L * m * n_rf * (n_t + n_u);
  } else if (scheme == "partdec-hbf" || scheme == "partdec-fdp") {
    r.up_count = static_cast<long>(k) * m * n_u;  // quantized RSSI reports
    r.down_count = 200L * m;                      // auto-encoder bottleneck
  } else if (scheme == "fulldec-hbf" || scheme == "fulldec-fdp" ||
             scheme == "cb") {
    r.up_count = 0;
    r.down_count = 0;
  } else {
    throw ConfigError("signaling: unknown scheme " + scheme);
  }
  return r;
}

}  // namespace cfmimo
