#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <vector>

#include "cfmimo/container.hpp"

using namespace cfmimo;

namespace {

std::string temp_path(const char* name) {
  return std::string("container_test_") + name + ".cfbf";
}

std::vector<char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::vector<char>(std::istreambuf_iterator<char>(in),
                           std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("empty container round-trips") {
  const auto path = temp_path("empty");
  save_container({}, path);
  const Container c = load_container(path);
  CHECK(c.empty());
  std::remove(path.c_str());
}

TEST_CASE("real tensor round-trip is bit-exact") {
  Container c;
  std::vector<double> vals = {0.0, -1.5, 3.141592653589793, 1e-300, -2e17};
  c["a"] = make_real_entry({5}, std::vector<double>(vals));
  c["grid"] = make_real_entry({2, 3}, {1, 2, 3, 4, 5, 6});
  const auto path = temp_path("real");
  save_container(c, path);
  const Container r = load_container(path);
  REQUIRE(r.size() == 2);
  REQUIRE(r.count("a") == 1);
  const auto& a = r.at("a");
  CHECK(a.kind == TensorEntry::real64);
  REQUIRE(a.dims == std::vector<std::uint64_t>{5});
  for (std::size_t i = 0; i < vals.size(); ++i) CHECK(a.values[i] == vals[i]);
  REQUIRE(r.at("grid").dims == (std::vector<std::uint64_t>{2, 3}));
  std::remove(path.c_str());
}

TEST_CASE("complex tensor round-trip is bit-exact") {
  CMat m(2, 2);
  m << cx(1.25, -0.5), cx(0, 1), cx(-3.75, 2.5), cx(1e-20, -1e20);
  Container c;
  c["h"] = make_complex_entry(m);
  const auto path = temp_path("cplx");
  save_container(c, path);
  const Container r = load_container(path);
  REQUIRE(r.count("h") == 1);
  CHECK(r.at("h").kind == TensorEntry::complex64_pair);
  const CMat back = complex_entry_to_matrix(r.at("h"));
  REQUIRE(back.rows() == 2);
  REQUIRE(back.cols() == 2);
  CHECK((back - m).norm() == 0.0);
  std::remove(path.c_str());
}

TEST_CASE("corrupted payload fails the checksum") {
  Container c;
  c["x"] = make_real_entry({4}, {1, 2, 3, 4});
  const auto path = temp_path("crc");
  save_container(c, path);
  auto bytes = slurp(path);
  bytes[bytes.size() / 2] ^= 0x40;  // flip one payload bit
  spit(path, bytes);
  CHECK_THROWS_AS(load_container(path), IoError);
  std::remove(path.c_str());
}

TEST_CASE("truncated file is rejected") {
  Container c;
  c["x"] = make_real_entry({8}, {1, 2, 3, 4, 5, 6, 7, 8});
  const auto path = temp_path("trunc");
  save_container(c, path);
  auto bytes = slurp(path);
  bytes.resize(bytes.size() - 9);
  spit(path, bytes);
  CHECK_THROWS_AS(load_container(path), IoError);
  std::remove(path.c_str());
}

TEST_CASE("wrong magic is rejected") {
  const auto path = temp_path("magic");
  spit(path, {'N', 'O', 'P', 'E', '1', 0, 0, 0});
  CHECK_THROWS_AS(load_container(path), IoError);
  std::remove(path.c_str());
}

TEST_CASE("missing file is an io error") {
  CHECK_THROWS_AS(load_container("no_such_file_anywhere.cfbf"), IoError);
}

TEST_CASE("value count must match the declared shape") {
  Container c;
  c["bad"] = make_real_entry({3, 3}, {1, 2, 3});
  const auto path = temp_path("shape");
  CHECK_THROWS_AS(save_container(c, path), IoError);
  std::remove(path.c_str());
}
