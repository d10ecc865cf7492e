#include <filesystem>
#include <fstream>

#include "catch_amalgamated.hpp"
#include "oracles.hpp"
#include "terrafuse/fusion.hpp"

using namespace terrafuse;
namespace fs = std::filesystem;

namespace {

fs::path tmpdir() {
  static fs::path d = [] {
    fs::path p = fs::temp_directory_path() / "terrafuse_fusion_tests";
    fs::create_directories(p);
    return p;
  }();
  return d;
}

}  // namespace

TEST_CASE("fusion boundaries and the worked pixel") {
  Rng rng(1);
  ProbMap a = oracles::random_probmap(6, 6, rng);
  ProbMap b = oracles::random_probmap(6, 6, rng);

  ProbMap all_a = fuse(a, b, {1.0});
  ProbMap all_b = fuse(a, b, {0.0});
  for (size_t i = 0; i < a.p.size(); ++i) {
    REQUIRE(all_a.p[i] == a.p[i]);
    REQUIRE(all_b.p[i] == b.p[i]);
  }

  // (0.2,0.3,0.5) and (0.4,0.3,0.3) at alpha 0.5 -> (0.3,0.3,0.4)
  ProbMap pa = ProbMap::zeros(1, 1), pb = ProbMap::zeros(1, 1);
  pa.p = {0.2f, 0.3f, 0.5f};
  pb.p = {0.4f, 0.3f, 0.3f};
  ProbMap half = fuse(pa, pb, {0.5});
  REQUIRE(half.p[0] == Catch::Approx(0.3));
  REQUIRE(half.p[1] == Catch::Approx(0.3));
  REQUIRE(half.p[2] == Catch::Approx(0.4));

  REQUIRE_THROWS_AS(fuse(a, ProbMap::zeros(3, 3), {0.5}), ShapeError);
  REQUIRE_THROWS_AS(fuse(a, b, {1.5}), Error);
}

TEST_CASE("fusion preserves normalization for all alpha") {
  Rng rng(2);
  ProbMap a = oracles::random_probmap(8, 8, rng);
  ProbMap b = oracles::random_probmap(8, 8, rng);
  for (int k = 0; k <= 10; ++k) {
    ProbMap f = fuse(a, b, {k / 10.0});
    for (size_t i = 0; i < 64; ++i) {
      double s = 0;
      for (int c = 0; c < 3; ++c) s += f.p[size_t(c) * 64 + i];
      REQUIRE(s == Catch::Approx(1.0).margin(1e-6));
    }
  }
}

TEST_CASE("fusion linearity: fuse(a,b,w) + fuse(b,a,w) == a + b") {
  Rng rng(3);
  ProbMap a = oracles::random_probmap(5, 7, rng);
  ProbMap b = oracles::random_probmap(5, 7, rng);
  for (double alpha : {0.0, 0.3, 0.5, 0.9, 1.0}) {
    ProbMap ab = fuse(a, b, {alpha});
    ProbMap ba = fuse(b, a, {alpha});
    for (size_t i = 0; i < a.p.size(); ++i)
      REQUIRE(double(ab.p[i]) + ba.p[i] == Catch::Approx(double(a.p[i]) + b.p[i]).margin(1e-6));
  }
}

TEST_CASE("argmax map rules") {
  ProbMap p = ProbMap::zeros(1, 2);
  // pixel 0: (0.1,0.7,0.2) -> class 1; pixel 1: exact three-way tie -> class 0
  p.p = {0.1f, 1.0f / 3, 0.7f, 1.0f / 3, 0.2f, 1.0f / 3};
  SegMap m = argmax_map(p);
  REQUIRE(m.v[0] == 1);
  REQUIRE(m.v[1] == 0);

  // fusing identical maps never changes the decision
  Rng rng(4);
  ProbMap r = oracles::random_probmap(6, 6, rng);
  for (double alpha : {0.0, 0.25, 1.0})
    REQUIRE(argmax_map(fuse(r, r, {alpha})).v == argmax_map(r).v);
}

TEST_CASE("agreeing argmax survives fusion for every alpha") {
  Rng rng(5);
  ProbMap a = oracles::random_probmap(10, 10, rng);
  ProbMap b = oracles::random_probmap(10, 10, rng);
  SegMap ma = argmax_map(a), mb = argmax_map(b);
  for (int k = 0; k <= 10; ++k) {
    SegMap mf = argmax_map(fuse(a, b, {k / 10.0}));
    for (size_t i = 0; i < ma.v.size(); ++i)
      if (ma.v[i] == mb.v[i]) REQUIRE(mf.v[i] == ma.v[i]);
  }
}

TEST_CASE("PRB round trip and validation") {
  Rng rng(6);
  ProbMap m = oracles::random_probmap(9, 4, rng);
  const auto path = tmpdir() / "rt.prb";
  write_prb(path.string(), m);
  ProbMap q = read_prb(path.string());
  REQUIRE(q.h == 9);
  REQUIRE(q.w == 4);
  REQUIRE(std::memcmp(q.p.data(), m.p.data(), m.p.size() * sizeof(float)) == 0);

  // bad magic
  const auto bad = tmpdir() / "bad.prb";
  std::ofstream(bad, std::ios::binary).write("NOPE", 4);
  REQUIRE_THROWS_AS(read_prb(bad.string()), BadMagicError);

  // unnormalized pixels rejected
  ProbMap junk = ProbMap::zeros(2, 2);
  for (auto& v : junk.p) v = 0.8f;
  const auto junkp = tmpdir() / "junk.prb";
  write_prb(junkp.string(), junk);
  REQUIRE_THROWS_AS(read_prb(junkp.string()), DataError);
}
