#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "cfmimo/common.hpp"

namespace cfmimo {

// CSV emission with a config-hash column so rows from different runs are
// never silently mixed.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& columns,
            std::string config_hash)
      : out_(path), hash_(std::move(config_hash)) {
    if (!out_) throw IoError("cannot open CSV for write: " + path);
    out_ << "config_hash";
    for (const auto& c : columns) out_ << "," << c;
    out_ << "\n";
  }

  template <typename... Fields>
  void row(const Fields&... fields) {
    out_ << hash_;
    (write_field(fields), ...);
    out_ << "\n";
  }

  void flush() { out_.flush(); }

 private:
  void write_field(const std::string& s) { out_ << "," << s; }
  void write_field(const char* s) { out_ << "," << s; }
  void write_field(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    out_ << "," << buf;
  }
  void write_field(int v) { out_ << "," << v; }
  void write_field(long v) { out_ << "," << v; }
  void write_field(std::size_t v) { out_ << "," << v; }

  std::ofstream out_;
  std::string hash_;
};

}  // namespace cfmimo
