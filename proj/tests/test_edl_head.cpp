#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "edlseg/edl_head.hpp"
#include "edlseg/rng.hpp"
#include "testutil.hpp"

using edlseg::EvidentialOutput;
using edlseg::IncrementPlan;
using edlseg::RectifierKind;
using edlseg::Rng;
using edlseg::Setting;
using edlseg::Shape;
using edlseg::Tensor;

namespace {

Tensor evidence_vec(const std::vector<double>& e) {
  return Tensor::from_data({1, e.size(), 1, 1}, e);
}

}  // namespace

TEST_CASE("rectifier values") {
  Tensor z = Tensor::from_data({1, 3, 1, 1}, {-3.0, 0.0, -10.0});
  auto r = edlseg::rectify(z, RectifierKind::relu);
  CHECK(r.at({0, 0, 0, 0}) == 0.0);
  auto es = edlseg::rectify(z, RectifierKind::exp_sigmoid);
  CHECK(es.at({0, 1, 0, 0}) == doctest::Approx(0.5).epsilon(1e-15));
  const double tiny = std::exp(-10.0) / (1.0 + std::exp(10.0));
  CHECK(es.at({0, 2, 0, 0}) == doctest::Approx(tiny).epsilon(1e-9));
  CHECK(es.at({0, 2, 0, 0}) < 1e-8);
  auto ex = edlseg::rectify(z, RectifierKind::exp);
  CHECK(ex.at({0, 1, 0, 0}) == 1.0);
  CHECK(edlseg::to_string(RectifierKind::exp_sigmoid) == "exp_sigmoid");
  CHECK(edlseg::rectifier_from_string("relu") == RectifierKind::relu);
  CHECK_THROWS_AS(edlseg::rectifier_from_string("swish"),
                  std::invalid_argument);
}

TEST_CASE("exponential rectifiers saturate instead of overflowing") {
  // Runaway scores must yield large-but-finite evidence with zero gradient,
  // not an aborted run once exp() passes the double range.
  Tensor huge = Tensor::from_data({1, 2, 1, 1}, {800.0, 1.0}, true);
  for (auto kind : {RectifierKind::exp, RectifierKind::exp_sigmoid}) {
    Tensor e = edlseg::rectify(huge, kind);
    CHECK(std::isfinite(e.at({0, 0, 0, 0})));
    CHECK(e.at({0, 0, 0, 0}) > 1e20);
    huge.zero_grad();
    edlseg::sum(e).backward();
    CHECK(huge.grad()[0] == 0.0);  // pinned at the cap
    CHECK(huge.grad()[1] > 0.0);
  }
}

TEST_CASE("dirichlet statistics on worked vectors") {
  auto zero = edlseg::dirichlet_stats(evidence_vec({0, 0, 0}));
  CHECK(zero.uncertainty.item() == doctest::Approx(1.0).epsilon(1e-15));
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(zero.belief.at({0, i, 0, 0}) == 0.0);
    CHECK(zero.fg_prob.at({0, i, 0, 0}) ==
          doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }

  auto s = edlseg::dirichlet_stats(evidence_vec({3, 1}));
  CHECK(s.uncertainty.item() == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(s.belief.at({0, 0, 0, 0}) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(s.belief.at({0, 1, 0, 0}) ==
        doctest::Approx(1.0 / 6.0).epsilon(1e-12));
  CHECK(s.fg_prob.at({0, 0, 0, 0}) ==
        doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(s.fg_prob.at({0, 1, 0, 0}) ==
        doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(s.alpha.at({0, 0, 0, 0}) == 4.0);

  auto one = edlseg::dirichlet_stats(evidence_vec({9}));
  CHECK(one.uncertainty.item() == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(one.belief.at({0, 0, 0, 0}) == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(one.fg_prob.at({0, 0, 0, 0}) == doctest::Approx(1.0).epsilon(1e-12));

  CHECK_THROWS_AS(edlseg::dirichlet_stats(Tensor::from_data({3}, {1, 2, 3})),
                  std::invalid_argument);
}

TEST_CASE("factorized probability on worked vectors") {
  auto s = edlseg::dirichlet_stats(evidence_vec({3, 1}));
  auto p = edlseg::factorize_probability(s);
  CHECK(p.shape() == Shape{1, 3, 1, 1});
  CHECK(p.at({0, 0, 0, 0}) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(p.at({0, 1, 0, 0}) == doctest::Approx(4.0 / 9.0).epsilon(1e-12));
  CHECK(p.at({0, 2, 0, 0}) == doctest::Approx(2.0 / 9.0).epsilon(1e-12));

  auto z = edlseg::dirichlet_stats(evidence_vec({0, 0, 0}));
  auto pz = edlseg::factorize_probability(z);
  CHECK(pz.at({0, 0, 0, 0}) == doctest::Approx(1.0).epsilon(1e-15));
  for (std::size_t i = 1; i < 4; ++i) CHECK(pz.at({0, i, 0, 0}) == 0.0);

  auto one = edlseg::dirichlet_stats(evidence_vec({9}));
  auto p1 = edlseg::factorize_probability(one);
  CHECK(p1.at({0, 0, 0, 0}) == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(p1.at({0, 1, 0, 0}) == doctest::Approx(0.9).epsilon(1e-12));
}

TEST_CASE("normalization identities hold for random evidence") {
  Rng rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 1 + rng.below(20);
    std::vector<double> e(k);
    for (double& v : e) v = rng.uniform(0.0, 50.0);
    auto s = edlseg::dirichlet_stats(evidence_vec(e));
    auto full = edlseg::factorize_probability(s);
    double bsum = 0.0, fgsum = 0.0, fsum = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      bsum += s.belief.at({0, i, 0, 0});
      fgsum += s.fg_prob.at({0, i, 0, 0});
    }
    for (std::size_t i = 0; i < k + 1; ++i) fsum += full.at({0, i, 0, 0});
    CHECK(std::fabs(s.uncertainty.item() + bsum - 1.0) < 1e-9);
    CHECK(std::fabs(fgsum - 1.0) < 1e-9);
    CHECK(std::fabs(fsum - 1.0) < 1e-9);
  }
}

TEST_CASE("normalization holds across batch and spatial axes") {
  Rng rng(100);
  Tensor e = Tensor::from_data(
      {2, 4, 3, 2}, [&] {
        std::vector<double> v(48);
        for (double& x : v) x = rng.uniform(0.0, 9.0);
        return v;
      }());
  auto s = edlseg::dirichlet_stats(e);
  auto full = edlseg::factorize_probability(s);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t y = 0; y < 3; ++y)
      for (std::size_t x = 0; x < 2; ++x) {
        double fsum = 0.0;
        for (std::size_t c = 0; c < 5; ++c) fsum += full.at({n, c, y, x});
        CHECK(std::fabs(fsum - 1.0) < 1e-9);
      }
}

TEST_CASE("more evidence for a class lowers u and raises its probability") {
  auto lo = edlseg::dirichlet_stats(evidence_vec({2, 5, 1}));
  auto hi = edlseg::dirichlet_stats(evidence_vec({2, 5, 4}));
  CHECK(hi.uncertainty.item() < lo.uncertainty.item());
  auto plo = edlseg::factorize_probability(lo);
  auto phi = edlseg::factorize_probability(hi);
  CHECK(phi.at({0, 3, 0, 0}) > plo.at({0, 3, 0, 0}));

  auto big = edlseg::dirichlet_stats(evidence_vec({1e8, 1e8}));
  CHECK(big.uncertainty.item() < 1e-7);
}

TEST_CASE("increment scale worked values and shape") {
  CHECK(edlseg::increment_scale(20, 20) == 1.0);
  CHECK(edlseg::increment_scale(7, 7) == 1.0);
  CHECK(edlseg::increment_scale(5, 20) ==
        doctest::Approx(3600.0 / 975.0).epsilon(1e-12));
  CHECK(edlseg::increment_scale(1, 20) ==
        doctest::Approx(400.0 / 39.0).epsilon(1e-12));
  CHECK(edlseg::increment_scale(2, 3) ==
        doctest::Approx(27.0 / 20.0).epsilon(1e-12));
  CHECK(edlseg::increment_scale(1, 3) ==
        doctest::Approx(9.0 / 5.0).epsilon(1e-12));
  for (std::size_t total = 2; total <= 21; ++total) {
    double prev = edlseg::increment_scale(1, total);
    for (std::size_t kt = 2; kt <= total; ++kt) {
      const double cur = edlseg::increment_scale(kt, total);
      CHECK(cur < prev);
      prev = cur;
    }
  }
  CHECK_THROWS_AS(edlseg::increment_scale(0, 5), std::invalid_argument);
  CHECK_THROWS_AS(edlseg::increment_scale(6, 5), std::invalid_argument);
}

TEST_CASE("increment balancing scales one positive max per group") {
  IncrementPlan plan;
  plan.class_order = {1, 2, 3};
  plan.increment_sizes = {2, 1};
  Tensor e = evidence_vec({4, 1, 2});
  auto out = edlseg::apply_increment_balancing(e, plan);
  CHECK(out.at({0, 0, 0, 0}) == doctest::Approx(5.4).epsilon(1e-12));
  CHECK(out.at({0, 1, 0, 0}) == 1.0);
  CHECK(out.at({0, 2, 0, 0}) == doctest::Approx(3.6).epsilon(1e-12));

  IncrementPlan joint;
  joint.class_order = {1, 2, 3};
  joint.increment_sizes = {3};
  auto same = edlseg::apply_increment_balancing(e, joint);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(same.values()[i] == e.values()[i]);
  }

  auto zeros = edlseg::apply_increment_balancing(evidence_vec({0, 0, 0}),
                                                 plan);
  for (std::size_t i = 0; i < 3; ++i) CHECK(zeros.values()[i] == 0.0);

  // Group-internal tie: the lower channel takes the scale.
  auto tied = edlseg::apply_increment_balancing(evidence_vec({2, 2, 1}),
                                                plan);
  CHECK(tied.at({0, 0, 0, 0}) == doctest::Approx(2.7).epsilon(1e-12));
  CHECK(tied.at({0, 1, 0, 0}) == 2.0);

  IncrementPlan wrong;
  wrong.increment_sizes = {2, 2};
  CHECK_THROWS_AS(edlseg::apply_increment_balancing(e, wrong),
                  std::invalid_argument);
}

TEST_CASE("increment balancing alters at most one channel per group") {
  Rng rng(123);
  IncrementPlan plan;
  plan.increment_sizes = {3, 2, 1};
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> e(2 * 6 * 2 * 2);
    for (double& v : e) v = rng.uniform(-0.5, 4.0) > 0 ? rng.uniform(0.0, 4.0)
                                                       : 0.0;
    Tensor t = Tensor::from_data({2, 6, 2, 2}, e);
    auto out = edlseg::apply_increment_balancing(t, plan);
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t y = 0; y < 2; ++y)
        for (std::size_t x = 0; x < 2; ++x) {
          std::size_t c0 = 0;
          for (std::size_t gk : {3u, 2u, 1u}) {
            int changed = 0;
            for (std::size_t c = c0; c < c0 + gk; ++c) {
              if (out.at({n, c, y, x}) != t.at({n, c, y, x})) ++changed;
            }
            CHECK(changed <= 1);
            c0 += gk;
          }
        }
  }
}

TEST_CASE("explicit softmax baseline normalizes and exposes u = p0") {
  Tensor scores =
      Tensor::from_data({1, 3, 1, 2}, {1.0, -2.0, 0.5, 0.5, -1.0, 3.0});
  auto out = edlseg::explicit_softmax_output(scores);
  for (std::size_t x = 0; x < 2; ++x) {
    double total = 0.0;
    for (std::size_t c = 0; c < 3; ++c) total += out.full_prob.at({0, c, 0, x});
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    double fg = 0.0;
    for (std::size_t c = 0; c < 2; ++c) fg += out.fg_prob.at({0, c, 0, x});
    CHECK(fg == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(out.uncertainty.at({0, 0, 0, x}) ==
          out.full_prob.at({0, 0, 0, x}));
  }
  CHECK_THROWS_AS(
      edlseg::explicit_softmax_output(Tensor::zeros({1, 1, 2, 2})),
      std::invalid_argument);
}

TEST_CASE("head gradients match central differences") {
  Rng rng(321);
  std::vector<double> zv(1 * 3 * 2 * 2);
  for (double& v : zv) v = rng.uniform(-2.0, 2.0);
  Tensor z = Tensor::from_data({1, 3, 2, 2}, zv, true);
  std::vector<Tensor> leaves = {z};
  for (auto kind : {RectifierKind::relu, RectifierKind::exp,
                    RectifierKind::exp_sigmoid}) {
    auto f = [&]() {
      auto s = edlseg::dirichlet_stats(edlseg::rectify(z, kind));
      auto full = edlseg::factorize_probability(s);
      return edlseg::sum(full * full) + edlseg::mean(s.belief);
    };
    CHECK(testutil::check_gradients(f, leaves));
  }
  auto f_softmax = [&]() {
    auto out = edlseg::explicit_softmax_output(z);
    return edlseg::sum(out.full_prob * out.full_prob) +
           edlseg::mean(out.fg_prob);
  };
  CHECK(testutil::check_gradients(f_softmax, leaves));
}
