#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "cfmimo/common.hpp"

namespace cfmimo {

// CFBF1 tensor container: magic "CFBF1", little-endian throughout,
// u64 entry count, then per entry
//   u32 name length, UTF-8 name bytes,
//   u8 kind (0 = real64, 1 = complex64 stored as interleaved re/im pairs),
//   u8 rank, rank x u64 dims,
//   raw doubles (element count, twice that for complex),
// and a trailing CRC-32 over every preceding byte including the magic.

struct TensorEntry {
  enum Kind : std::uint8_t { real64 = 0, complex64_pair = 1 };
  Kind kind = real64;
  std::vector<std::uint64_t> dims;
  std::vector<double> values;  // interleaved re/im when complex

  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

using Container = std::map<std::string, TensorEntry>;

namespace detail {

inline std::uint32_t crc32_update(std::uint32_t crc, const void* data,
                                  std::size_t len) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k)
        c = (c & 1u) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  const auto* p = static_cast<const unsigned char*>(data);
  crc ^= 0xffffffffu;
  for (std::size_t i = 0; i < len; ++i)
    crc = table[(crc ^ p[i]) & 0xffu] ^ (crc >> 8);
  return crc ^ 0xffffffffu;
}

class CrcWriter {
 public:
  explicit CrcWriter(std::ostream& out) : out_(out) {}

  void write(const void* data, std::size_t len) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
    crc_ = crc32_update(crc_, data, len);
  }

  template <typename T>
  void write_pod(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    write(&v, sizeof(v));
  }

  std::uint32_t crc() const { return crc_; }

 private:
  std::ostream& out_;
  std::uint32_t crc_ = 0;
};

class CrcReader {
 public:
  explicit CrcReader(std::istream& in) : in_(in) {}

  void read(void* data, std::size_t len) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(len));
    if (!in_) throw IoError("container truncated");
    crc_ = crc32_update(crc_, data, len);
  }

  template <typename T>
  T read_pod() {
    T v;
    read(&v, sizeof(v));
    return v;
  }

  std::uint32_t crc() const { return crc_; }

 private:
  std::istream& in_;
  std::uint32_t crc_ = 0;
};

}  // namespace detail

inline void save_container(const Container& c, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for write: " + path);
  detail::CrcWriter w(out);
  w.write("CFBF1", 5);
  w.write_pod<std::uint64_t>(c.size());
  for (const auto& [name, entry] : c) {
    w.write_pod<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.write(name.data(), name.size());
    w.write_pod<std::uint8_t>(static_cast<std::uint8_t>(entry.kind));
    w.write_pod<std::uint8_t>(static_cast<std::uint8_t>(entry.dims.size()));
    for (auto d : entry.dims) w.write_pod<std::uint64_t>(d);
    const std::uint64_t expect =
        entry.element_count() * (entry.kind == TensorEntry::complex64_pair ? 2 : 1);
    if (entry.values.size() != expect)
      throw IoError("tensor '" + name + "' value count mismatch");
    if (!entry.values.empty())
      w.write(entry.values.data(), entry.values.size() * sizeof(double));
  }
  std::uint32_t crc = w.crc();
  out.write(reinterpret_cast<const char*>(&crc), sizeof(crc));
  if (!out) throw IoError("write failed: " + path);
}

inline Container load_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for read: " + path);
  detail::CrcReader r(in);
  char magic[5];
  r.read(magic, 5);
  if (std::memcmp(magic, "CFBF1", 5) != 0)
    throw IoError("bad container magic in " + path);
  const auto count = r.read_pod<std::uint64_t>();
  Container c;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = r.read_pod<std::uint32_t>();
    std::string name(name_len, '\0');
    if (name_len) r.read(name.data(), name_len);
    TensorEntry entry;
    const auto kind = r.read_pod<std::uint8_t>();
    if (kind > 1) throw IoError("unknown tensor kind in " + path);
    entry.kind = static_cast<TensorEntry::Kind>(kind);
    const auto rank = r.read_pod<std::uint8_t>();
    entry.dims.resize(rank);
    for (auto& d : entry.dims) d = r.read_pod<std::uint64_t>();
    const std::uint64_t n =
        entry.element_count() * (entry.kind == TensorEntry::complex64_pair ? 2 : 1);
    entry.values.resize(n);
    if (n) r.read(entry.values.data(), n * sizeof(double));
    c.emplace(std::move(name), std::move(entry));
  }
  const std::uint32_t computed = r.crc();
  std::uint32_t stored;
  in.read(reinterpret_cast<char*>(&stored), sizeof(stored));
  if (!in) throw IoError("container truncated (missing CRC)");
  if (stored != computed) throw IoError("container CRC mismatch in " + path);
  return c;
}

// Helpers for the common shapes moved through the container.

inline TensorEntry make_real_entry(const std::vector<std::uint64_t>& dims,
                                   std::vector<double> values) {
  TensorEntry e;
  e.kind = TensorEntry::real64;
  e.dims = dims;
  e.values = std::move(values);
  return e;
}

inline TensorEntry make_complex_entry(const CMat& m) {
  TensorEntry e;
  e.kind = TensorEntry::complex64_pair;
  e.dims = {static_cast<std::uint64_t>(m.rows()),
            static_cast<std::uint64_t>(m.cols())};
  e.values.reserve(2 * m.size());
  for (Eigen::Index c = 0; c < m.cols(); ++c)
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      e.values.push_back(m(r, c).real());
      e.values.push_back(m(r, c).imag());
    }
  return e;
}

inline CMat complex_entry_to_matrix(const TensorEntry& e) {
  if (e.kind != TensorEntry::complex64_pair || e.dims.size() != 2)
    throw IoError("entry is not a complex matrix");
  CMat m(static_cast<Eigen::Index>(e.dims[0]), static_cast<Eigen::Index>(e.dims[1]));
  std::size_t i = 0;
  for (Eigen::Index c = 0; c < m.cols(); ++c)
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      m(r, c) = cx(e.values[i], e.values[i + 1]);
      i += 2;
    }
  return m;
}

}  // namespace cfmimo
