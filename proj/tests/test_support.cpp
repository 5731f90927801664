#include <doctest.h>

#include <cmath>
#include <cstring>
#include <set>
#include <string>
#include <vector>

#include "haco/csv.hpp"
#include "haco/errors.hpp"
#include "haco/rng.hpp"
#include "haco/sha256.hpp"
#include "test_util.hpp"

using namespace haco;

TEST_SUITE("support") {

TEST_CASE("csv parse handles quoting, embedded separators, and CRLF") {
  const std::string text = "a,\"b,c\"\n\"x\"\"y\",\"l1\nl2\"\r\nplain,\n";
  const auto rows = csv::parse(text);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0] == std::vector<std::string>{"a", "b,c"});
  CHECK(rows[1] == std::vector<std::string>{"x\"y", "l1\nl2"});
  CHECK(rows[2] == std::vector<std::string>{"plain", ""});
}

TEST_CASE("csv trailing newline does not add a phantom row") {
  CHECK(csv::parse("a,b\n").size() == 1);
  CHECK(csv::parse("a,b").size() == 1);
  CHECK(csv::parse("a,b\nc,d\n").size() == 2);
}

TEST_CASE("csv join/parse round-trips awkward fields") {
  const std::vector<std::string> fields = {"",      "plain",     "comma,inside", "\"quoted\"",
                                           "multi\nline", " lead", "trail ",       "mix,\"\n"};
  const std::string doc = csv::join_row(fields) + "\n" + csv::join_row(fields) + "\n";
  const auto rows = csv::parse(doc);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0] == fields);
  CHECK(rows[1] == fields);
}

TEST_CASE("format_double output parses back to the identical double") {
  const std::vector<double> values = {0.1,   1.0 / 3.0, -0.0,  1e-300, 6.02e23,
                                      17.0, 3.141592653589793, -2.5e-9, 0.0182};
  for (double v : values) {
    const std::string s = format_double(v);
    const double back = std::stod(s);
    CHECK(std::memcmp(&back, &v, sizeof v) == 0);
  }
}

TEST_CASE("sha256 known digests") {
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("sha256_file_hex matches the in-memory digest") {
  testutil::TempDir dir("haco_sha");
  const std::string content = "some bytes\nwith a newline";
  const std::string path = testutil::write_file(dir.file("f.bin"), content);
  CHECK(sha256_file_hex(path) == sha256_hex(content));
  CHECK_THROWS_AS(sha256_file_hex(dir.file("missing.bin")), Error);
}

TEST_CASE("rng streams are reproducible and derived streams differ") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next() == b.next());

  Rng c(Rng::derive(42, 0)), d(Rng::derive(42, 1));
  int diff = 0;
  for (int i = 0; i < 16; ++i) diff += c.next() != d.next();
  CHECK(diff > 0);
}

TEST_CASE("rng distributions stay inside their supports") {
  Rng rng(7);
  std::set<uint64_t> seen;
  for (int i = 0; i < 1000; ++i) {
    const double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    const uint64_t k = rng.below(10);
    CHECK(k < 10);
    seen.insert(k);
  }
  CHECK(seen.size() == 10);  // 1000 draws hit every bucket of ten
}

TEST_CASE("categorical never lands on a zero-weight index") {
  Rng rng(99);
  const std::vector<double> w = {0.0, 2.0, 0.0, 1.0};
  std::set<size_t> seen;
  for (int i = 0; i < 2000; ++i) seen.insert(rng.categorical(w));
  CHECK(seen == std::set<size_t>{1, 3});
}

}  // TEST_SUITE
