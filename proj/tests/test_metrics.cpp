#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "edlseg/metrics.hpp"

using edlseg::Confusion;
using edlseg::IncrementPlan;
using edlseg::kIgnoreLabel;
using edlseg::LabelMap;
using edlseg::Setting;
using edlseg::Tensor;

TEST_CASE("confusion accumulation hand example") {
  Confusion c(1);
  LabelMap gt{2, 2, {0, 0, 1, 1}};
  LabelMap pred{2, 2, {0, 1, 1, 1}};
  edlseg::accumulate(c, pred, gt);
  CHECK(c.at(0, 0) == 1);
  CHECK(c.at(0, 1) == 1);
  CHECK(c.at(1, 1) == 2);
  CHECK(c.at(1, 0) == 0);

  auto iou = edlseg::iou_per_class(c);
  CHECK(iou[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(iou[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));

  std::uint64_t total = 0;
  for (auto v : c.counts) total += v;
  CHECK(total == 4);

  LabelMap ign{2, 2, {kIgnoreLabel, kIgnoreLabel, kIgnoreLabel,
                      kIgnoreLabel}};
  Confusion c2(1);
  edlseg::accumulate(c2, pred, ign);
  for (auto v : c2.counts) CHECK(v == 0);

  LabelMap bad{2, 2, {0, 0, 0, 9}};
  CHECK_THROWS_AS(edlseg::accumulate(c2, bad, gt), std::invalid_argument);
  LabelMap ragged{1, 2, {0, 0}};
  CHECK_THROWS_AS(edlseg::accumulate(c2, ragged, gt),
                  std::invalid_argument);
}

TEST_CASE("perfect predictions give diagonal confusion and unit IoU") {
  Confusion c(2);
  LabelMap m{2, 3, {0, 1, 2, 2, 1, 0}};
  edlseg::accumulate(c, m, m);
  auto iou = edlseg::iou_per_class(c);
  for (int k = 0; k <= 2; ++k) CHECK(iou[k] == 1.0);
}

TEST_CASE("absent classes are excluded from means") {
  Confusion c(3);
  LabelMap gt{1, 4, {0, 1, 1, 0}};
  LabelMap pred{1, 4, {0, 1, 0, 0}};
  edlseg::accumulate(c, pred, gt);
  auto iou = edlseg::iou_per_class(c);
  CHECK(std::isnan(iou[2]));
  CHECK(std::isnan(iou[3]));

  IncrementPlan plan;
  plan.class_order = {1, 2, 3};
  plan.increment_sizes = {1, 1, 1};
  auto r = edlseg::aggregate(iou, plan, 2);
  // Class 1 is the only scored foreground class; the two absent new
  // classes drop out of their group means entirely.
  CHECK(r.miou_base == doctest::Approx(0.5));
  CHECK(std::isnan(r.miou_new));
  CHECK(r.inc_miou == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(r.miou_all ==
        doctest::Approx((2.0 / 3.0 + 0.5) / 2.0).epsilon(1e-12));
}

TEST_CASE("aggregation over increments matches the worked example") {
  // Base classes at IoU 0.8 and 0.6, one new class at 0.4.
  std::vector<double> iou = {0.9, 0.8, 0.6, 0.4};
  IncrementPlan plan;
  plan.class_order = {1, 2, 3};
  plan.increment_sizes = {2, 1};
  auto r = edlseg::aggregate(iou, plan, 1);
  CHECK(r.miou_base == doctest::Approx(0.7).epsilon(1e-12));
  CHECK(r.miou_new == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(r.miou_all == doctest::Approx((0.9 + 0.8 + 0.6 + 0.4) / 4.0)
                          .epsilon(1e-12));
  CHECK(r.inc_miou == doctest::Approx(0.55).epsilon(1e-12));

  // At the base step there are no new classes yet.
  auto r0 = edlseg::aggregate(iou, plan, 0);
  CHECK(std::isnan(r0.miou_new));
  CHECK(r0.miou_base == doctest::Approx(0.7).epsilon(1e-12));
  CHECK(r0.inc_miou == doctest::Approx(0.7).epsilon(1e-12));
  CHECK(r0.miou_all ==
        doctest::Approx((0.9 + 0.8 + 0.6) / 3.0).epsilon(1e-12));
}

TEST_CASE("joint plans make inc equal the foreground mean") {
  std::vector<double> iou = {0.5, 0.25, 0.75, 1.0};
  IncrementPlan plan;
  plan.class_order = {1, 2, 3};
  plan.increment_sizes = {3};
  plan.setting = Setting::joint;
  auto r = edlseg::aggregate(iou, plan, 0);
  const double fg = (0.25 + 0.75 + 1.0) / 3.0;
  CHECK(r.inc_miou == doctest::Approx(fg).epsilon(1e-12));
  CHECK(r.miou_base == doctest::Approx(fg).epsilon(1e-12));
  CHECK(r.miou_all == doctest::Approx((0.5 + 0.25 + 0.75 + 1.0) / 4.0)
                          .epsilon(1e-12));
}

TEST_CASE("single-class increments average their class IoUs directly") {
  std::vector<double> iou = {1.0, 0.2, 0.4, 0.6};
  IncrementPlan plan;
  plan.class_order = {1, 2, 3};
  plan.increment_sizes = {1, 1, 1};
  auto r = edlseg::aggregate(iou, plan, 2);
  CHECK(r.inc_miou == doctest::Approx((0.2 + 0.4 + 0.6) / 3.0)
                          .epsilon(1e-12));
}

TEST_CASE("confusion matrices merge additively") {
  Confusion a(1), b(1);
  LabelMap gt{1, 2, {0, 1}};
  LabelMap pred{1, 2, {0, 1}};
  edlseg::accumulate(a, pred, gt);
  edlseg::accumulate(b, pred, gt);
  a.merge(b);
  CHECK(a.at(0, 0) == 2);
  CHECK(a.at(1, 1) == 2);
  CHECK_THROWS_AS(a.merge(Confusion(2)), std::invalid_argument);
}

TEST_CASE("argmax predictions map back to dataset ids") {
  Tensor p = Tensor::from_data(
      {1, 3, 1, 3},
      {0.6, 0.2, 0.1, 0.3, 0.7, 0.2, 0.1, 0.1, 0.7});
  auto maps = edlseg::predict_labels(p, {4, 9});
  REQUIRE(maps.size() == 1);
  CHECK(maps[0].v == std::vector<std::int32_t>{0, 4, 9});

  // Ties resolve to the lowest channel.
  Tensor tie = Tensor::from_data({1, 2, 1, 1}, {0.5, 0.5});
  auto tm = edlseg::predict_labels(tie, {7});
  CHECK(tm[0].v[0] == 0);

  CHECK_THROWS_AS(edlseg::predict_labels(p, {4}), std::invalid_argument);
}

TEST_CASE("report serialization carries the aggregate fields") {
  std::vector<double> iou = {0.9, 0.8, 0.6, 0.4};
  IncrementPlan plan;
  plan.class_order = {1, 2, 3};
  plan.increment_sizes = {2, 1};
  auto r = edlseg::aggregate(iou, plan, 1);
  const std::string json = edlseg::report_to_json(r);
  CHECK(json.find("\"inc_miou\": 0.55") != std::string::npos);
  CHECK(json.find("\"step\": 1") != std::string::npos);
  CHECK(edlseg::report_csv_header() == "step,base,new,all,inc_miou");
  CHECK(edlseg::report_csv_row(r) ==
        "1,0.700000,0.400000,0.675000,0.550000");
  auto r0 = edlseg::aggregate(iou, plan, 0);
  CHECK(edlseg::report_csv_row(r0).find("n/a") != std::string::npos);
}
