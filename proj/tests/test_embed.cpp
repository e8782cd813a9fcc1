#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <unistd.h>

#include "subtrace/embed.hpp"

using namespace subtrace;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("subtrace-embed-" + std::to_string(::getpid()) + "-" +
                                        std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

EmbedTable small_table() {
  EmbedTable t;
  t.vocab_size = 4;
  t.dim = 2;
  t.rows = {1.0f, 0.0f, 0.0f, 1.0f, -1.0f, 0.0f, 0.5f, 0.5f};
  t.id_to_surface = {"a", "b", "c", "d"};
  return t;
}

}  // namespace

TEST_CASE("embed table save/load round-trips including the vocab sidecar") {
  TempDir dir;
  auto path = dir.path / "emb.bin";
  EmbedTable t = small_table();
  save_embed_table(t, path);
  EmbedTable loaded = load_embed_table(path);
  REQUIRE(loaded.vocab_size == t.vocab_size);
  REQUIRE(loaded.dim == t.dim);
  REQUIRE(loaded.rows == t.rows);
  REQUIRE(loaded.id_to_surface == t.id_to_surface);
}

TEST_CASE("embed table loader rejects malformed files") {
  TempDir dir;
  auto write = [&](const std::string& name, const std::string& bytes) {
    auto p = dir.path / name;
    std::ofstream out(p, std::ios::binary);
    out << bytes;
    return p;
  };

  REQUIRE_THROWS_AS(load_embed_table(dir.path / "missing.bin"), std::runtime_error);
  REQUIRE_THROWS_AS(load_embed_table(write("magic.bin", "NOPE v9\n1 1\n\0\0\0\0")),
                    std::runtime_error);
  REQUIRE_THROWS_AS(load_embed_table(write("junk.bin", "SUBTRACE-EMB v1\n1 1 extra\n\0\0\0\0")),
                    std::runtime_error);
  REQUIRE_THROWS_AS(load_embed_table(write("short.bin", std::string("SUBTRACE-EMB v1\n2 2\n") +
                                                            std::string(8, '\0'))),
                    std::runtime_error);
  REQUIRE_THROWS_AS(load_embed_table(write("long.bin", std::string("SUBTRACE-EMB v1\n1 1\n") +
                                                           std::string(8, '\0'))),
                    std::runtime_error);

  // NaN component.
  {
    EmbedTable t = small_table();
    t.id_to_surface.clear();
    t.rows[3] = std::numeric_limits<float>::quiet_NaN();
    auto p = dir.path / "nan.bin";
    save_embed_table(t, p);
    REQUIRE_THROWS_AS(load_embed_table(p), std::runtime_error);
  }

  // Sidecar with the wrong line count.
  {
    EmbedTable t = small_table();
    t.id_to_surface = {"a", "b"};  // 2 lines for V = 4
    auto p = dir.path / "sidecar.bin";
    save_embed_table(t, p);
    REQUIRE_THROWS_AS(load_embed_table(p), std::runtime_error);
  }
}

TEST_CASE("top_k_similar excludes the query token and breaks ties by id") {
  EmbedTable t;
  t.vocab_size = 4;
  t.dim = 2;
  // Tokens 1 and 2 are identical, token 3 is orthogonal to token 0.
  t.rows = {1.0f, 0.0f, 1.0f, 0.0f, 1.0f, 0.0f, 0.0f, 1.0f};
  auto top = top_k_similar(t, 0, 3);
  REQUIRE(top == std::vector<TokenId>{1, 2, 3});
  auto top1 = top_k_similar(t, 0, 1);
  REQUIRE(top1 == std::vector<TokenId>{1});
  // k larger than V-1 returns everything else.
  REQUIRE(top_k_similar(t, 0, 99).size() == 3);
}

TEST_CASE("top_k_similar is cosine based, so row scale does not matter") {
  EmbedTable t;
  t.vocab_size = 3;
  t.dim = 2;
  t.rows = {2.0f, 0.0f,      // token 0
            0.1f, 0.0f,      // token 1: same direction, tiny norm
            10.0f, 10.0f};   // token 2: 45 degrees, huge norm
  auto top = top_k_similar(t, 0, 2);
  REQUIRE(top == std::vector<TokenId>{1, 2});
}

TEST_CASE("top_k_similar orders an orthonormal-plus-diagonal example correctly") {
  EmbedTable t;
  t.vocab_size = 3;
  t.dim = 3;
  t.rows = {1, 0, 0, 0, 1, 0, 0.9f, 0.1f, 0};
  REQUIRE(top_k_similar(t, 0, 2) == std::vector<TokenId>{2, 1});
  REQUIRE_THROWS_AS(top_k_similar(t, 5, 1), std::out_of_range);
  REQUIRE_THROWS_AS(top_k_similar(t, 0, 0), std::invalid_argument);
}
