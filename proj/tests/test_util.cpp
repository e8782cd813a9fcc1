#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <numeric>
#include <set>
#include <vector>

#include "subtrace/parallel.hpp"
#include "subtrace/rng.hpp"
#include "subtrace/sha256.hpp"

using namespace subtrace;

TEST_CASE("rng streams are reproducible") {
  Rng a(42), b(42), c(43);
  bool all_equal = true, any_diff = false;
  for (int i = 0; i < 64; ++i) {
    const auto va = a.next_u64();
    if (va != b.next_u64()) all_equal = false;
    if (va != c.next_u64()) any_diff = true;
  }
  REQUIRE(all_equal);
  REQUIRE(any_diff);
}

TEST_CASE("rng substreams differ per index but stay reproducible") {
  Rng s0 = Rng::substream(7, 0);
  Rng s0b = Rng::substream(7, 0);
  Rng s1 = Rng::substream(7, 1);
  REQUIRE(s0.next_u64() == s0b.next_u64());
  Rng s0c = Rng::substream(7, 0);
  REQUIRE(s0c.next_u64() != s1.next_u64());
}

TEST_CASE("next_below stays in range and covers all values") {
  Rng rng(1);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 2000; ++i) {
    auto v = rng.next_below(7);
    REQUIRE(v < 7);
    seen.insert(v);
  }
  REQUIRE(seen.size() == 7);
  REQUIRE(rng.next_below(0) == 0);
  REQUIRE(rng.next_below(1) == 0);
}

TEST_CASE("next_double lies in [0,1) and gaussians have sane moments") {
  Rng rng(5);
  double sum = 0, sum2 = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.next_double();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
  }
  for (int i = 0; i < n; ++i) {
    const double g = rng.next_gaussian();
    sum += g;
    sum2 += g * g;
  }
  const double mean = sum / n;
  const double var = sum2 / n - mean * mean;
  REQUIRE(std::abs(mean) < 0.03);      // ~4 sigma of 1/sqrt(n)
  REQUIRE(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("next_subset yields sorted in-range subsets, uniform over choices") {
  Rng rng(11);
  for (int i = 0; i < 200; ++i) {
    auto s = rng.next_subset(10, 4);
    REQUIRE(s.size() == 4);
    REQUIRE(std::is_sorted(s.begin(), s.end()));
    REQUIRE(std::adjacent_find(s.begin(), s.end()) == s.end());
    for (auto v : s) REQUIRE(v < 10);
  }
  // k > n clamps; k = n is the full set.
  REQUIRE(rng.next_subset(3, 5).size() == 3);
  auto full = rng.next_subset(3, 3);
  REQUIRE(full == std::vector<std::size_t>{0, 1, 2});

  // C(3,1) = 3 placements, each ~1/3 of draws.
  std::map<std::size_t, int> counts;
  const int trials = 9000;
  for (int i = 0; i < trials; ++i) ++counts[rng.next_subset(3, 1)[0]];
  for (const auto& [pos, c] : counts) {
    REQUIRE(c > trials / 3 - 140);  // 3 sigma ~ 133
    REQUIRE(c < trials / 3 + 140);
  }
}

TEST_CASE("sha256 matches known vectors") {
  REQUIRE(Sha256::hash_hex("") ==
          "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  REQUIRE(Sha256::hash_hex("abc") ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  REQUIRE(Sha256::hash_hex("abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq") ==
          "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");
}

TEST_CASE("sha256 incremental update equals one-shot") {
  Sha256 h;
  h.update("hello ");
  h.update("world");
  REQUIRE(h.hex_digest() == Sha256::hash_hex("hello world"));

  // Cross the 64-byte block boundary in odd steps.
  std::string big(200, 'x');
  Sha256 h2;
  for (std::size_t i = 0; i < big.size(); i += 7)
    h2.update(big.substr(i, std::min<std::size_t>(7, big.size() - i)));
  REQUIRE(h2.hex_digest() == Sha256::hash_hex(big));
}

TEST_CASE("parallel_map is deterministic across worker counts") {
  const std::size_t n = 1000;
  auto fn = [](std::size_t i) { return static_cast<int>((i * 37) % 101); };
  auto r1 = parallel_map<int>(n, 1, fn);
  auto r2 = parallel_map<int>(n, 2, fn);
  auto r8 = parallel_map<int>(n, 8, fn);
  REQUIRE(r1 == r2);
  REQUIRE(r1 == r8);
  for (std::size_t i = 0; i < n; ++i) REQUIRE(r1[i] == fn(i));
}

TEST_CASE("parallel_chunks covers the range exactly once") {
  for (unsigned workers : {1u, 3u, 8u, 16u}) {
    const std::size_t n = 100;
    std::vector<int> hits(n, 0);
    std::size_t chunk_count = 0;
    parallel_chunks(
        n, workers,
        [&](std::size_t begin, std::size_t end, std::size_t) {
          for (std::size_t i = begin; i < end; ++i) ++hits[i];
        },
        &chunk_count);
    REQUIRE(chunk_count == std::min<std::size_t>(workers, n));
    REQUIRE(std::accumulate(hits.begin(), hits.end(), 0) == static_cast<int>(n));
    for (int h : hits) REQUIRE(h == 1);
  }
  std::size_t chunk_count = 99;
  parallel_chunks(0, 4, [](std::size_t, std::size_t, std::size_t) {}, &chunk_count);
  REQUIRE(chunk_count == 0);
}
