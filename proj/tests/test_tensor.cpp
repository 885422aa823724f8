#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cstdlib>
#include <numeric>
#include <set>

#include "panopix/common.hpp"
#include "panopix/tensor.hpp"

using namespace panopix;

TEST_CASE("tensor construction and indexing") {
  Tensor<float> t({2, 3}, 1.5f);
  REQUIRE(t.numel() == 6);
  REQUIRE(t.ndim() == 2);
  REQUIRE(t.dim(0) == 2);
  REQUIRE(t.dim(1) == 3);
  REQUIRE(t[5] == 1.5f);

  t.at2(1, 2) = 9.0f;
  REQUIRE(t[5] == 9.0f);  // row-major: (1,2) is the last element

  Tensor<double> u({2, 2, 2, 2});
  u.at4(1, 0, 1, 1) = 7.0;
  REQUIRE(u[8 + 3] == 7.0);

  REQUIRE(t.shape_str() == "[2,3]");
  REQUIRE(Tensor<float>({1}, std::vector<float>{3.f}).is_scalar());
}

TEST_CASE("tensor data length is validated") {
  REQUIRE_THROWS_AS(Tensor<float>({2, 3}, std::vector<float>(5)), ShapeError);
  REQUIRE_NOTHROW(Tensor<float>({2, 3}, std::vector<float>(6)));
}

TEST_CASE("tensor cast preserves values") {
  Tensor<double> d({3}, std::vector<double>{1.25, -2.5, 0.0});
  auto f = d.cast<float>();
  REQUIRE(f[0] == 1.25f);
  REQUIRE(f[1] == -2.5f);
  auto back = f.cast<double>();
  REQUIRE(max_abs_diff(d, back) == 0.0);
}

TEST_CASE("ensure_finite names the offending op") {
  Tensor<double> t({2}, std::vector<double>{1.0, std::numeric_limits<double>::infinity()});
  REQUIRE_THROWS_WITH(ensure_finite(t, "conv2d"),
                      Catch::Matchers::ContainsSubstring("conv2d"));
  Tensor<double> ok({2}, std::vector<double>{1.0, -1.0});
  REQUIRE_NOTHROW(ensure_finite(ok, "conv2d"));
  t[1] = std::numeric_limits<double>::quiet_NaN();
  REQUIRE_FALSE(t.all_finite());
}

TEST_CASE("rng streams are deterministic and seed-sensitive") {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    uint64_t x = a.next_u64();
    REQUIRE(x == b.next_u64());
    if (x != c.next_u64()) differs = true;
  }
  REQUIRE(differs);
}

TEST_CASE("rng uniform stays in range") {
  Rng r(7);
  for (int i = 0; i < 10000; ++i) {
    double u = r.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
  }
  for (int i = 0; i < 1000; ++i) {
    double u = r.uniform(-2.0, 3.0);
    REQUIRE(u >= -2.0);
    REQUIRE(u < 3.0);
  }
}

TEST_CASE("rng uniform_int covers both endpoints") {
  Rng r(11);
  std::set<int64_t> seen;
  for (int i = 0; i < 1000; ++i) {
    int64_t v = r.uniform_int(-1, 2);
    REQUIRE(v >= -1);
    REQUIRE(v <= 2);
    seen.insert(v);
  }
  REQUIRE(seen.size() == 4);
  REQUIRE_THROWS_AS(r.uniform_int(3, 2), Error);
}

TEST_CASE("rng normal has the requested moments") {
  Rng r(5);
  double sum = 0.0, sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double v = r.normal(2.0, 3.0);
    sum += v;
    sq += v * v;
  }
  double mean = sum / n;
  double var = sq / n - mean * mean;
  REQUIRE(mean == Catch::Approx(2.0).margin(0.1));
  REQUIRE(var == Catch::Approx(9.0).margin(0.5));
}

TEST_CASE("rng shuffle is a permutation") {
  Rng r(9);
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  auto orig = v;
  r.shuffle(v);
  REQUIRE(v != orig);  // 50! permutations; identity would be astonishing
  std::sort(v.begin(), v.end());
  REQUIRE(v == orig);
}

TEST_CASE("bernoulli respects probability extremes") {
  Rng r(3);
  for (int i = 0; i < 100; ++i) {
    REQUIRE_FALSE(r.bernoulli(0.0));
    REQUIRE(r.bernoulli(1.0));
  }
}

TEST_CASE("hash_seed depends on order and content") {
  REQUIRE(hash_seed({1, 2}) != hash_seed({2, 1}));
  REQUIRE(hash_seed({1, 2}) != hash_seed({1, 3}));
  REQUIRE(hash_seed({1, 2}) == hash_seed({1, 2}));
  REQUIRE(hash_seed({0}) != hash_seed({0, 0}));
}

TEST_CASE("bool matrix transpose and count") {
  BoolMatrix m(2, 3);
  m.set(0, 1, true);
  m.set(1, 2, true);
  REQUIRE(m.count() == 2);
  BoolMatrix t = m.transposed();
  REQUIRE(t.rows == 3);
  REQUIRE(t.cols == 2);
  REQUIRE(t.at(1, 0));
  REQUIRE(t.at(2, 1));
  REQUIRE_FALSE(t.at(0, 0));
  REQUIRE(t.transposed() == m);
}

TEST_CASE("parallel_for visits every index exactly once") {
  std::vector<int> hits(1000, 0);
  parallel_for(1000, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) hits[static_cast<size_t>(i)] += 1;
  });
  REQUIRE(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
  // Empty range must not call the body at all.
  bool called = false;
  parallel_for(0, [&](int64_t, int64_t) { called = true; });
  REQUIRE_FALSE(called);
}

TEST_CASE("format_double round trips exactly") {
  for (double v : {0.0, 1.0, -1.0, 0.1, 1e-300, 3.141592653589793, -2.2250738585072014e-308}) {
    std::string s = format_double(v);
    REQUIRE(std::strtod(s.c_str(), nullptr) == v);
  }
}

TEST_CASE("random tensors are reproducible per seed") {
  Rng a(77), b(77);
  auto t1 = random_normal<double>({4, 5}, a);
  auto t2 = random_normal<double>({4, 5}, b);
  REQUIRE(max_abs_diff(t1, t2) == 0.0);
  auto u1 = random_uniform<float>({10}, a, -1.0, 1.0);
  for (int64_t i = 0; i < u1.numel(); ++i) {
    REQUIRE(u1[i] >= -1.0f);
    REQUIRE(u1[i] < 1.0f);
  }
}
