#include "edlseg/model.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "edlseg/rng.hpp"
#include "testutil.hpp"

using namespace edlseg;

namespace {

Tensor random_images(std::uint64_t seed, std::size_t n, std::size_t h,
                     std::size_t w) {
  Rng rng(seed);
  std::vector<double> v(n * 3 * h * w);
  for (double& x : v) x = rng.uniform(0.0, 1.0);
  return Tensor::from_data({n, 3, h, w}, std::move(v), false);
}

}  // namespace

TEST_CASE("forward produces score maps at input resolution") {
  SegModel model(HeadMode::evidential_implicit_bg, {}, 7);
  model.expand_head(5);
  Tensor imgs = random_images(11, 2, 8, 10);
  Tensor scores = model.forward(imgs);
  CHECK(scores.shape() == Shape{2, 5, 8, 10});

  // odd extents survive the stride-2 stage and come back exact
  Tensor odd = model.forward(random_images(12, 1, 7, 9));
  CHECK(odd.shape() == Shape{1, 5, 7, 9});

  CHECK_THROWS(model.forward(Tensor::zeros({3, 8, 8})));
  CHECK_THROWS(model.forward(Tensor::zeros({1, 4, 8, 8})));
  SegModel empty(HeadMode::evidential_implicit_bg, {}, 7);
  CHECK_THROWS(empty.forward(imgs));
}

TEST_CASE("explicit mode adds one background channel on the base head") {
  SegModel model(HeadMode::softmax_explicit_bg, {}, 7);
  model.expand_head(5);
  model.expand_head(1);
  CHECK(model.total_classes() == 6);
  CHECK(model.score_channels() == 7);
  Tensor scores = model.forward(random_images(3, 1, 6, 6));
  CHECK(scores.shape() == Shape{1, 7, 6, 6});

  SegModel ev(HeadMode::evidential_implicit_bg, {}, 7);
  ev.expand_head(5);
  ev.expand_head(1);
  CHECK(ev.score_channels() == 6);
}

TEST_CASE("construction is deterministic in the seed") {
  SegModel a(HeadMode::evidential_implicit_bg, {}, 42);
  SegModel b(HeadMode::evidential_implicit_bg, {}, 42);
  SegModel c(HeadMode::evidential_implicit_bg, {}, 43);
  a.expand_head(4);
  b.expand_head(4);
  c.expand_head(4);
  auto pa = a.named_parameters(), pb = b.named_parameters(),
       pc = c.named_parameters();
  REQUIRE(pa.size() == pb.size());
  bool all_equal = true, any_diff_seed = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (testutil::vec(pa[i].second) != testutil::vec(pb[i].second)) all_equal = false;
    if (testutil::vec(pa[i].second) != testutil::vec(pc[i].second)) any_diff_seed = true;
  }
  CHECK(all_equal);
  CHECK(any_diff_seed);

  Tensor imgs = random_images(5, 1, 8, 8);
  CHECK(testutil::vec(a.forward(imgs)) == testutil::vec(b.forward(imgs)));
}

TEST_CASE("expand_head leaves existing parameters and scores untouched") {
  SegModel model(HeadMode::evidential_implicit_bg, {}, 9);
  model.expand_head(5);
  Tensor imgs = random_images(21, 2, 8, 8);
  Tensor before = model.forward(imgs);
  auto old_params = model.clone(false).named_parameters();

  model.expand_head(2);
  CHECK(model.increments() == std::vector<std::size_t>{5, 2});
  Tensor after = model.forward(imgs);
  CHECK(after.shape() == Shape{2, 7, 8, 8});
  Tensor old_slice = narrow(after, 1, 0, 5);
  CHECK(testutil::vec(old_slice) == testutil::vec(before));

  auto now = model.named_parameters();
  for (const auto& [name, tensor] : old_params) {
    bool found = false;
    for (const auto& [name2, tensor2] : now)
      if (name2 == name) {
        found = true;
        CHECK(testutil::vec(tensor2) == testutil::vec(tensor));
      }
    CHECK(found);
  }
  CHECK_THROWS(model.expand_head(0));
}

TEST_CASE("fresh heads score near the rectifier's zero point") {
  SegModel model(HeadMode::evidential_implicit_bg, {}, 17);
  model.expand_head(5);
  model.expand_head(3);
  Tensor scores = model.forward(random_images(33, 2, 12, 12));
  EvidentialOutput out = model.head_output(scores, RectifierKind::exp_sigmoid);
  Tensor new_ev = narrow(out.evidence, 1, 5, 3);
  double zero_point = rectify(Tensor::zeros({1}), RectifierKind::exp_sigmoid)
                          .item();
  CHECK(zero_point == doctest::Approx(0.5));
  for (double e : new_ev.values()) CHECK(e < 2.0 * zero_point);
}

TEST_CASE("head_output dispatches on head mode") {
  Tensor imgs = random_images(8, 1, 6, 6);

  SegModel ev(HeadMode::evidential_implicit_bg, {}, 3);
  ev.expand_head(4);
  EvidentialOutput eo = ev.head_output(ev.forward(imgs), RectifierKind::relu);
  CHECK(eo.full_prob.shape() == Shape{1, 5, 6, 6});
  Tensor esum = sum(eo.full_prob, {1});
  for (double s : esum.values()) CHECK(s == doctest::Approx(1.0));

  SegModel ex(HeadMode::softmax_explicit_bg, {}, 3);
  ex.expand_head(4);
  EvidentialOutput xo = ex.head_output(ex.forward(imgs), RectifierKind::relu);
  CHECK(xo.full_prob.shape() == Shape{1, 5, 6, 6});
  Tensor xsum = sum(xo.full_prob, {1});
  for (double s : xsum.values()) CHECK(s == doctest::Approx(1.0));
  CHECK(testutil::vec(xo.uncertainty) ==
        testutil::vec(narrow(xo.full_prob, 1, 0, 1)));
}

TEST_CASE("snapshot is a frozen deep copy") {
  SegModel model(HeadMode::evidential_implicit_bg, {}, 4);
  model.expand_head(3);
  Tensor imgs = random_images(6, 1, 6, 6);
  Tensor before = model.forward(imgs);

  SegModel frozen = model.snapshot();
  for (Tensor& p : frozen.parameters()) CHECK_FALSE(p.requires_grad());
  for (Tensor& p : model.parameters()) CHECK(p.requires_grad());

  for (Tensor& p : model.parameters())
    for (double& x : p.values_mut()) x += 0.25;
  Tensor frozen_out = frozen.forward(imgs);
  CHECK(testutil::vec(frozen_out) == testutil::vec(before));
  CHECK(testutil::vec(model.forward(imgs)) != testutil::vec(before));
  CHECK_FALSE(frozen_out.requires_grad());
}

TEST_CASE("gradients reach every parameter") {
  SegModel model(HeadMode::evidential_implicit_bg, {}, 14);
  model.expand_head(2);
  Tensor imgs = random_images(44, 1, 6, 6);
  EvidentialOutput out =
      model.head_output(model.forward(imgs), RectifierKind::exp_sigmoid);
  sum(mul(out.full_prob, out.full_prob)).backward();
  for (auto& [name, p] : model.named_parameters()) {
    INFO(name);
    REQUIRE(p.has_grad());
    double mag = 0.0;
    for (double g : p.grad()) mag += std::fabs(g);
    CHECK(mag > 0.0);
  }
}

TEST_CASE("checkpoint round-trips parameters and plan state") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "edlseg_model_test";
  fs::create_directories(dir);
  std::string path = (dir / "step1.ckpt").string();

  SegModel model(HeadMode::softmax_explicit_bg, {8, 24}, 123);
  model.expand_head(5);
  model.expand_head(1);
  std::vector<std::int32_t> order = {3, 1, 4, 5, 9, 2};
  save_checkpoint(path, model, order, 1);

  std::vector<std::int32_t> got_order;
  std::size_t got_step = 99;
  SegModel loaded = load_checkpoint_model(path, &got_order, &got_step);
  CHECK(got_order == order);
  CHECK(got_step == 1);
  CHECK(loaded.head_mode() == HeadMode::softmax_explicit_bg);
  CHECK(loaded.backbone_config().width1 == 8);
  CHECK(loaded.increments() == std::vector<std::size_t>{5, 1});
  CHECK(loaded.seed() == 123);

  auto pa = model.named_parameters(), pb = loaded.named_parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].first == pb[i].first);
    CHECK(testutil::vec(pa[i].second) == testutil::vec(pb[i].second));
  }
  Tensor imgs = random_images(2, 1, 8, 8);
  CHECK(testutil::vec(model.forward(imgs)) == testutil::vec(loaded.forward(imgs)));
  // loaded models keep training
  for (Tensor& p : loaded.parameters()) CHECK(p.requires_grad());
  fs::remove_all(dir);
}

TEST_CASE("corrupt checkpoints are rejected") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "edlseg_model_bad";
  fs::create_directories(dir);

  std::string missing = (dir / "nope.ckpt").string();
  CHECK_THROWS(load_checkpoint_model(missing, nullptr, nullptr));

  std::string garbage = (dir / "garbage.ckpt").string();
  {
    std::ofstream out(garbage, std::ios::binary);
    out << "this is not a checkpoint";
  }
  CHECK_THROWS_WITH_AS(load_checkpoint_model(garbage, nullptr, nullptr),
                       doctest::Contains("not a checkpoint"),
                       std::runtime_error);

  SegModel model(HeadMode::evidential_implicit_bg, {}, 1);
  model.expand_head(2);
  std::string good = (dir / "good.ckpt").string();
  save_checkpoint(good, model, {1, 2}, 0);

  std::string truncated = (dir / "trunc.ckpt").string();
  {
    std::ifstream in(good, std::ios::binary);
    std::string all((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
    std::ofstream out(truncated, std::ios::binary);
    out.write(all.data(),
              static_cast<std::streamsize>(all.size() - 64));
  }
  CHECK_THROWS_WITH_AS(load_checkpoint_model(truncated, nullptr, nullptr),
                       doctest::Contains("truncated"), std::runtime_error);
  fs::remove_all(dir);
}
