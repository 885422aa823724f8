#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "panopix/common.hpp"
#include "panopix/gradcheck.hpp"
#include "panopix/losses.hpp"
#include "panopix/tape.hpp"

using namespace panopix;

namespace {

// Rows are unit basis vectors: all pairwise cosines are exactly 0 or 1, which
// turns the losses into pure counting problems with hand-computable values.
Tensor<double> basis_rows(const std::vector<int64_t>& axes, int64_t dim) {
  Tensor<double> t({static_cast<int64_t>(axes.size()), dim});
  t.fill(0.0);
  for (size_t i = 0; i < axes.size(); ++i) t.at2(static_cast<int64_t>(i), axes[i]) = 1.0;
  return t;
}

Tensor<double> random_rows(Rng& rng, int64_t n, int64_t dim) {
  Tensor<double> t({n, dim});
  for (auto& v : t.data) v = rng.normal();
  return t;
}

BoolMatrix random_mask(Rng& rng, int64_t rows, int64_t cols, double density) {
  BoolMatrix m(rows, cols);
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < cols; ++j) m.set(i, j, rng.bernoulli(density));
  if (m.count() == 0) m.set(rng.uniform_int(0, rows - 1), rng.uniform_int(0, cols - 1), true);
  return m;
}

double spatial_value(const Tensor<double>& x, const Tensor<double>& xp, const BoolMatrix& m,
                     double tau) {
  Tape<double> tape;
  int loss = spatial_contrastive_loss(tape, tape.constant(x), tape.constant(xp), m, tau);
  return tape.value(loss)[0];
}

double global_value(const Tensor<double>& sa, const Tensor<double>& pb, const Tensor<double>& sb,
                    const Tensor<double>& pa, const BoolMatrix& m) {
  Tape<double> tape;
  int loss = global_propagation_loss(tape, tape.constant(sa), tape.constant(pb),
                                     tape.constant(sb), tape.constant(pa), m);
  return tape.value(loss)[0];
}

}  // namespace

TEST_CASE("contrastive loss on orthogonal frames is log 2", "[losses]") {
  // Two anchors, two candidates, every cosine zero: each anchor sees its one
  // positive hold exactly half the (uniform) probability mass.
  Tensor<double> x = basis_rows({0, 1}, 4);
  Tensor<double> xp = basis_rows({2, 3}, 4);
  BoolMatrix m(2, 2);
  m.set(0, 0, true);
  m.set(1, 1, true);
  CHECK(spatial_value(x, xp, m, 0.3) == Catch::Approx(std::log(2.0)).margin(1e-12));
  // Zero scores are invariant to the temperature.
  CHECK(spatial_value(x, xp, m, 0.05) == Catch::Approx(std::log(2.0)).margin(1e-12));
}

TEST_CASE("contrastive loss on an antipodal pair", "[losses]") {
  // x = x' = {v, -v}: the positive sits at cosine +1, the lone negative at -1,
  // so every direction contributes log(1 + exp(-2 / tau)).
  Tensor<double> x = basis_rows({0, 0}, 3);
  x.at2(1, 0) = -1.0;
  BoolMatrix m(2, 2);
  m.set(0, 0, true);
  m.set(1, 1, true);
  const double got = spatial_value(x, x, m, 0.3);
  CHECK(got == Catch::Approx(std::log1p(std::exp(-2.0 / 0.3))).margin(1e-12));
  CHECK(got == Catch::Approx(1.2718e-3).margin(1e-7));
}

TEST_CASE("contrastive loss reduces to positive counting on basis frames", "[losses]") {
  // Distinct basis vectors on both sides: all cross-cosines are zero, so an
  // anchor with p positives among Q candidates scores exactly log(Q / p).
  Tensor<double> x = basis_rows({0, 1, 2}, 16);
  Tensor<double> xp = basis_rows({3, 4, 5, 6, 7, 8, 9, 10}, 16);
  BoolMatrix m(3, 8);
  m.set(0, 0, true);
  m.set(0, 1, true);
  m.set(0, 2, true);
  m.set(2, 7, true);  // row 1 has no positive and must not be averaged in
  const double dir_a = (std::log(8.0 / 3.0) + std::log(8.0)) / 2.0;
  const double dir_b = std::log(3.0);  // four anchored columns, one positive each
  CHECK(spatial_value(x, xp, m, 0.7) == Catch::Approx(0.5 * (dir_a + dir_b)).margin(1e-12));
}

TEST_CASE("contrastive loss properties", "[losses]") {
  Rng rng(41);

  SECTION("non-negative on random inputs") {
    for (int trial = 0; trial < 25; ++trial) {
      int64_t p = rng.uniform_int(1, 6), q = rng.uniform_int(1, 6), d = rng.uniform_int(1, 5);
      Tensor<double> x = random_rows(rng, p, d);
      Tensor<double> xp = random_rows(rng, q, d);
      BoolMatrix m = random_mask(rng, p, q, 0.3);
      CHECK(spatial_value(x, xp, m, 0.3) >= -1e-12);
    }
  }

  SECTION("invariant to per-frame rescaling") {
    Tensor<double> x = random_rows(rng, 5, 7);
    Tensor<double> xp = random_rows(rng, 6, 7);
    BoolMatrix m = random_mask(rng, 5, 6, 0.4);
    const double base = spatial_value(x, xp, m, 0.3);
    Tensor<double> xs = x, xps = xp;
    for (auto& v : xs.data) v *= 3.7;
    for (auto& v : xps.data) v *= 0.25;
    CHECK(spatial_value(xs, xps, m, 0.3) == Catch::Approx(base).margin(1e-9));
  }

  SECTION("symmetric under swapping the frames") {
    for (int trial = 0; trial < 10; ++trial) {
      int64_t p = rng.uniform_int(1, 5), q = rng.uniform_int(1, 5);
      Tensor<double> x = random_rows(rng, p, 6);
      Tensor<double> xp = random_rows(rng, q, 6);
      BoolMatrix m = random_mask(rng, p, q, 0.35);
      CHECK(spatial_value(x, xp, m, 0.3) ==
            Catch::Approx(spatial_value(xp, x, m.transposed(), 0.3)).margin(1e-9));
    }
  }
}

TEST_CASE("contrastive loss rejects bad input", "[losses]") {
  Tape<double> tape;
  int x = tape.constant(basis_rows({0, 1}, 4));
  int xp = tape.constant(basis_rows({2, 3}, 4));
  BoolMatrix id2(2, 2);
  id2.set(0, 0, true);
  id2.set(1, 1, true);

  CHECK_THROWS_AS(spatial_contrastive_loss(tape, x, xp, id2, 0.0), DataError);
  CHECK_THROWS_AS(spatial_contrastive_loss(tape, x, xp, id2, -0.5), DataError);
  CHECK_THROWS_AS(spatial_contrastive_loss(tape, x, xp, BoolMatrix(2, 2), 0.3), NoOverlapError);
  CHECK_THROWS_AS(spatial_contrastive_loss(tape, x, xp, BoolMatrix(3, 2, true), 0.3), ShapeError);
  int wide = tape.constant(basis_rows({0, 1}, 5));
  CHECK_THROWS_AS(spatial_contrastive_loss(tape, x, wide, id2, 0.3), ShapeError);
  int flat = tape.constant(Tensor<double>({4}, 1.0));
  CHECK_THROWS_AS(spatial_contrastive_loss(tape, flat, xp, id2, 0.3), ShapeError);
}

TEST_CASE("feature propagation closed forms", "[losses]") {
  Rng rng(42);

  SECTION("orthonormal pixels pass g through unchanged") {
    Tensor<double> x = basis_rows({0, 1, 2, 3}, 6);
    Tensor<double> g = random_rows(rng, 4, 6);
    Tape<double> tape;
    int out = propagate_features(tape, tape.constant(x), tape.constant(g));
    const Tensor<double>& O = tape.value(out);
    REQUIRE(O.shape == g.shape);
    for (size_t i = 0; i < g.data.size(); ++i) CHECK(O.data[i] == g.data[i]);
  }

  SECTION("antipodal pixels do not mix") {
    Tensor<double> x = basis_rows({0, 0}, 3);
    x.at2(1, 0) = -1.0;
    Tensor<double> g = random_rows(rng, 2, 3);
    Tape<double> tape;
    int out = propagate_features(tape, tape.constant(x), tape.constant(g));
    const Tensor<double>& O = tape.value(out);
    for (size_t i = 0; i < g.data.size(); ++i)
      CHECK(O.data[i] == Catch::Approx(g.data[i]).margin(1e-12));
  }

  SECTION("duplicated pixels sum their contributions") {
    Tensor<double> x = basis_rows({0, 0}, 3);
    Tensor<double> g = random_rows(rng, 2, 3);
    Tape<double> tape;
    int out = propagate_features(tape, tape.constant(x), tape.constant(g));
    const Tensor<double>& O = tape.value(out);
    for (int64_t d = 0; d < 3; ++d) {
      const double want = g.at2(0, d) + g.at2(1, d);
      CHECK(O.at2(0, d) == Catch::Approx(want).margin(1e-12));
      CHECK(O.at2(1, d) == Catch::Approx(want).margin(1e-12));
    }
  }

  SECTION("random input matches a naive oracle") {
    const int64_t P = 5, D = 7;
    Tensor<double> x = random_rows(rng, P, D);
    Tensor<double> g = random_rows(rng, P, D);
    std::vector<double> norm(P);
    for (int64_t i = 0; i < P; ++i) {
      double s = 0.0;
      for (int64_t d = 0; d < D; ++d) s += x.at2(i, d) * x.at2(i, d);
      norm[static_cast<size_t>(i)] = std::max(std::sqrt(s), 1e-8);
    }
    Tape<double> tape;
    int out = propagate_features(tape, tape.constant(x), tape.constant(g));
    const Tensor<double>& O = tape.value(out);
    for (int64_t i = 0; i < P; ++i)
      for (int64_t d = 0; d < D; ++d) {
        double want = 0.0;
        for (int64_t j = 0; j < P; ++j) {
          double dot = 0.0;
          for (int64_t k = 0; k < D; ++k) dot += x.at2(i, k) * x.at2(j, k);
          const double c = std::max(dot / (norm[static_cast<size_t>(i)] *
                                           norm[static_cast<size_t>(j)]),
                                    0.0);
          want += c * c * g.at2(j, d);
        }
        CHECK(O.at2(i, d) == Catch::Approx(want).margin(1e-12));
      }
  }
}

TEST_CASE("feature propagation rejects bad input", "[losses]") {
  Tape<double> tape;
  int x = tape.constant(basis_rows({0, 1}, 4));
  CHECK_THROWS_AS(propagate_features(tape, x, tape.constant(basis_rows({0, 1, 2}, 4))),
                  ShapeError);
  CHECK_THROWS_AS(propagate_features(tape, x, tape.constant(basis_rows({0, 1}, 5))), ShapeError);
  CHECK_THROWS_AS(propagate_features(tape, tape.constant(Tensor<double>({4}, 1.0)), x),
                  ShapeError);
}

TEST_CASE("global propagation closed forms", "[losses]") {
  BoolMatrix m(2, 3);
  m.set(0, 0, true);
  m.set(0, 2, true);
  m.set(1, 1, true);

  SECTION("perfect alignment gives -2") {
    Tensor<double> a2 = basis_rows({0, 0}, 4);
    Tensor<double> b3 = basis_rows({0, 0, 0}, 4);
    CHECK(global_value(a2, b3, b3, a2, m) == Catch::Approx(-2.0).margin(1e-9));
  }

  SECTION("orthogonal frames give 0") {
    CHECK(global_value(basis_rows({0, 0}, 4), basis_rows({1, 1, 1}, 4),
                       basis_rows({2, 2, 2}, 4), basis_rows({3, 3}, 4), m) ==
          Catch::Approx(0.0).margin(1e-12));
  }

  SECTION("opposed frames give +2") {
    Tensor<double> a2 = basis_rows({0, 0}, 4);
    Tensor<double> b3 = basis_rows({0, 0, 0}, 4);
    Tensor<double> na2 = a2, nb3 = b3;
    for (auto& v : na2.data) v = -v;
    for (auto& v : nb3.data) v = -v;
    CHECK(global_value(a2, nb3, b3, na2, m) == Catch::Approx(2.0).margin(1e-9));
  }
}

TEST_CASE("global propagation properties", "[losses]") {
  Rng rng(43);

  SECTION("bounded by [-2, 2] on random inputs") {
    for (int trial = 0; trial < 25; ++trial) {
      int64_t p = rng.uniform_int(1, 5), q = rng.uniform_int(1, 5), d = rng.uniform_int(1, 6);
      Tensor<double> sa = random_rows(rng, p, d), pa = random_rows(rng, p, d);
      Tensor<double> sb = random_rows(rng, q, d), pb = random_rows(rng, q, d);
      BoolMatrix m = random_mask(rng, p, q, 0.4);
      const double v = global_value(sa, pb, sb, pa, m);
      CHECK(v >= -2.0 - 1e-9);
      CHECK(v <= 2.0 + 1e-9);
    }
  }

  SECTION("symmetric under swapping the frames") {
    for (int trial = 0; trial < 10; ++trial) {
      int64_t p = rng.uniform_int(1, 5), q = rng.uniform_int(1, 5);
      Tensor<double> sa = random_rows(rng, p, 6), pa = random_rows(rng, p, 6);
      Tensor<double> sb = random_rows(rng, q, 6), pb = random_rows(rng, q, 6);
      BoolMatrix m = random_mask(rng, p, q, 0.4);
      CHECK(global_value(sa, pb, sb, pa, m) ==
            Catch::Approx(global_value(sb, pa, sa, pb, m.transposed())).margin(1e-12));
    }
  }
}

TEST_CASE("global propagation rejects bad input", "[losses]") {
  Tape<double> tape;
  int a2 = tape.constant(basis_rows({0, 1}, 4));
  int b3 = tape.constant(basis_rows({0, 1, 2}, 4));
  BoolMatrix m(2, 3, true);
  CHECK_THROWS_AS(global_propagation_loss(tape, a2, b3, b3, a2, BoolMatrix(2, 3)),
                  NoOverlapError);
  CHECK_THROWS_AS(global_propagation_loss(tape, a2, b3, a2, b3, m), ShapeError);
  int wide = tape.constant(basis_rows({0, 1, 2}, 5));
  CHECK_THROWS_AS(global_propagation_loss(tape, a2, wide, wide, a2, m), ShapeError);
  CHECK_THROWS_AS(global_propagation_loss(tape, a2, b3, b3, a2, BoolMatrix(3, 2, true)),
                  ShapeError);
}

TEST_CASE("loss gradients match finite differences", "[losses][gradcheck]") {
  SECTION("contrastive") {
    for (uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
      Rng rng(seed);
      BoolMatrix m = random_mask(rng, 6, 7, 0.3);
      std::vector<GradCheckParam> params{{"x", random_rows(rng, 6, 5)},
                                         {"x_prime", random_rows(rng, 7, 5)}};
      auto eval = [&m](const std::vector<Tensor<double>>& vs,
                       std::vector<Tensor<double>>* grads) {
        Tape<double> tape;
        int x = tape.leaf(vs[0], true);
        int xp = tape.leaf(vs[1], true);
        int loss = spatial_contrastive_loss(tape, x, xp, m, 0.3);
        double out = tape.value(loss)[0];
        if (grads != nullptr) {
          tape.backward(loss);
          *grads = {tape.grad(x), tape.grad(xp)};
        }
        return out;
      };
      GradCheckOptions opt;
      opt.seed = seed;
      GradCheckResult r = check_gradients(params, eval, opt);
      INFO(r.summary());
      CHECK(r.passed(1e-5));
    }
  }

  SECTION("feature propagation") {
    for (uint64_t seed : {11u, 12u, 13u, 14u, 15u}) {
      Rng rng(seed);
      // Positive-orthant pixels keep every pairwise hinge active; a pixel whose
      // cosines are all clamped has an exactly-zero gradient that finite
      // differences can only see as cancellation noise.
      Tensor<double> x({5, 4});
      for (auto& v : x.data) v = rng.uniform(0.2, 1.2);
      std::vector<GradCheckParam> params{{"x", x}, {"g", random_rows(rng, 5, 4)}};
      auto eval = [](const std::vector<Tensor<double>>& vs, std::vector<Tensor<double>>* grads) {
        Tape<double> tape;
        int x = tape.leaf(vs[0], true);
        int g = tape.leaf(vs[1], true);
        int out = propagate_features(tape, x, g);
        int loss = tape.mean(tape.mul(out, out));
        double v = tape.value(loss)[0];
        if (grads != nullptr) {
          tape.backward(loss);
          *grads = {tape.grad(x), tape.grad(g)};
        }
        return v;
      };
      GradCheckOptions opt;
      opt.seed = seed;
      GradCheckResult r = check_gradients(params, eval, opt);
      INFO(r.summary());
      CHECK(r.passed(1e-5));
    }
  }

  SECTION("global propagation") {
    for (uint64_t seed : {21u, 22u, 23u, 24u, 25u}) {
      Rng rng(seed);
      BoolMatrix m = random_mask(rng, 4, 5, 0.4);
      std::vector<GradCheckParam> params{{"smooth_a", random_rows(rng, 4, 6)},
                                         {"prime_b", random_rows(rng, 5, 6)},
                                         {"smooth_b", random_rows(rng, 5, 6)},
                                         {"prime_a", random_rows(rng, 4, 6)}};
      auto eval = [&m](const std::vector<Tensor<double>>& vs,
                       std::vector<Tensor<double>>* grads) {
        Tape<double> tape;
        int sa = tape.leaf(vs[0], true);
        int pb = tape.leaf(vs[1], true);
        int sb = tape.leaf(vs[2], true);
        int pa = tape.leaf(vs[3], true);
        int loss = global_propagation_loss(tape, sa, pb, sb, pa, m);
        double v = tape.value(loss)[0];
        if (grads != nullptr) {
          tape.backward(loss);
          *grads = {tape.grad(sa), tape.grad(pb), tape.grad(sb), tape.grad(pa)};
        }
        return v;
      };
      GradCheckOptions opt;
      opt.seed = seed;
      GradCheckResult r = check_gradients(params, eval, opt);
      INFO(r.summary());
      CHECK(r.passed(1e-5));
    }
  }

  SECTION("composite objective") {
    LossConfig cfg;
    for (uint64_t seed : {31u, 32u, 33u}) {
      Rng rng(seed);
      BoolMatrix m = random_mask(rng, 8, 8, 0.25);
      Tensor<double> mom_a = random_rows(rng, 8, 6);
      Tensor<double> mom_b = random_rows(rng, 8, 6);
      std::vector<GradCheckParam> params{{"online_a", random_rows(rng, 8, 6)},
                                         {"online_b", random_rows(rng, 8, 6)},
                                         {"g_a", random_rows(rng, 8, 6)},
                                         {"g_b", random_rows(rng, 8, 6)}};
      auto eval = [&](const std::vector<Tensor<double>>& vs,
                      std::vector<Tensor<double>>* grads) {
        Tape<double> tape;
        PairFeatureNodes f;
        f.online_proj_a = tape.leaf(vs[0], true);
        f.online_proj_b = tape.leaf(vs[1], true);
        f.momentum_proj_a = tape.constant(mom_a);
        f.momentum_proj_b = tape.constant(mom_b);
        f.g_a = tape.leaf(vs[2], true);
        f.g_b = tape.leaf(vs[3], true);
        int loss = pretrain_loss(tape, f, m, cfg);
        double v = tape.value(loss)[0];
        if (grads != nullptr) {
          tape.backward(loss);
          *grads = {tape.grad(f.online_proj_a), tape.grad(f.online_proj_b), tape.grad(f.g_a),
                    tape.grad(f.g_b)};
        }
        return v;
      };
      GradCheckOptions opt;
      opt.seed = seed;
      GradCheckResult r = check_gradients(params, eval, opt);
      INFO(r.summary());
      CHECK(r.passed(1e-4));
    }
  }
}

TEST_CASE("composite objective composition", "[losses]") {
  Rng rng(44);
  BoolMatrix m = random_mask(rng, 4, 4, 0.4);
  Tensor<double> oa = random_rows(rng, 4, 5), ob = random_rows(rng, 4, 5);
  Tensor<double> ma = random_rows(rng, 4, 5), mb = random_rows(rng, 4, 5);
  Tensor<double> ga = random_rows(rng, 4, 5), gb = random_rows(rng, 4, 5);

  auto build = [&](Tape<double>& tape) {
    PairFeatureNodes f;
    f.online_proj_a = tape.leaf(oa, true);
    f.online_proj_b = tape.leaf(ob, true);
    f.momentum_proj_a = tape.constant(ma);
    f.momentum_proj_b = tape.constant(mb);
    f.g_a = tape.leaf(ga, true);
    f.g_b = tape.leaf(gb, true);
    return f;
  };

  SECTION("alpha zero reduces to the contrastive term") {
    LossConfig cfg;
    cfg.alpha = 0.0;
    Tape<double> tape;
    PairFeatureNodes f = build(tape);
    LossReport rep;
    int total = pretrain_loss(tape, f, m, cfg, &rep);
    CHECK(tape.value(total)[0] == spatial_value(oa, mb, m, cfg.tau));
    CHECK(rep.total == rep.spatial);
  }

  SECTION("report decomposes the total") {
    LossConfig cfg;  // alpha 2
    Tape<double> tape;
    PairFeatureNodes f = build(tape);
    LossReport rep;
    int total = pretrain_loss(tape, f, m, cfg, &rep);
    CHECK(rep.total == tape.value(total)[0]);
    CHECK(rep.total == rep.spatial + 2.0 * rep.global_prop);
    CHECK(rep.spatial == spatial_value(oa, mb, m, cfg.tau));

    // The global term matches recomputing the smoothing by hand.
    Tape<double> ref;
    int sa = propagate_features(ref, ref.constant(oa), ref.constant(ga));
    int sb = propagate_features(ref, ref.constant(ob), ref.constant(gb));
    int lg = global_propagation_loss(ref, sa, ref.constant(mb), sb, ref.constant(ma), m);
    CHECK(rep.global_prop == ref.value(lg)[0]);
  }

  SECTION("no positive pairs propagates out") {
    Tape<double> tape;
    PairFeatureNodes f = build(tape);
    CHECK_THROWS_AS(pretrain_loss(tape, f, BoolMatrix(4, 4), LossConfig{}), NoOverlapError);
  }

  SECTION("config validation") {
    Tape<double> tape;
    PairFeatureNodes f = build(tape);
    LossConfig bad_tau;
    bad_tau.tau = 0.0;
    CHECK_THROWS_AS(pretrain_loss(tape, f, m, bad_tau), DataError);
    LossConfig bad_alpha;
    bad_alpha.alpha = -1.0;
    CHECK_THROWS_AS(pretrain_loss(tape, f, m, bad_alpha), DataError);
  }

  SECTION("momentum features never receive gradients") {
    Tape<double> tape;
    PairFeatureNodes f = build(tape);
    int total = pretrain_loss(tape, f, m, LossConfig{});
    tape.backward(total);
    CHECK_FALSE(tape.requires_grad(f.momentum_proj_a));
    CHECK_FALSE(tape.requires_grad(f.momentum_proj_b));
    for (double v : tape.grad(f.momentum_proj_a).data) REQUIRE(v == 0.0);
    for (double v : tape.grad(f.momentum_proj_b).data) REQUIRE(v == 0.0);
    double online = 0.0;
    for (double v : tape.grad(f.online_proj_a).data) online += std::abs(v);
    CHECK(online > 0.0);
    double head = 0.0;
    for (double v : tape.grad(f.g_a).data) head += std::abs(v);
    CHECK(head > 0.0);
  }
}
