#include "edlseg/metrics.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include <json.hpp>

namespace edlseg {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

// Mean over the finite entries of iou restricted to `ids`; NaN when none.
double group_mean(const std::vector<double>& iou,
                  const std::vector<std::int32_t>& ids) {
  double total = 0.0;
  std::size_t n = 0;
  for (std::int32_t id : ids) {
    const double v = iou[static_cast<std::size_t>(id)];
    if (std::isfinite(v)) {
      total += v;
      ++n;
    }
  }
  return n == 0 ? kNan : total / static_cast<double>(n);
}

}  // namespace

void Confusion::merge(const Confusion& other) {
  if (other.num_classes != num_classes) {
    throw std::invalid_argument("confusion: class count mismatch in merge");
  }
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
}

void accumulate(Confusion& confusion, const LabelMap& predictions,
                const LabelMap& ground_truth) {
  if (predictions.h != ground_truth.h || predictions.w != ground_truth.w) {
    throw std::invalid_argument("confusion: extents mismatch");
  }
  const std::int32_t k = confusion.num_classes;
  for (std::size_t i = 0; i < ground_truth.v.size(); ++i) {
    const std::int32_t gt = ground_truth.v[i];
    if (gt == kIgnoreLabel) continue;
    const std::int32_t pred = predictions.v[i];
    if (gt < 0 || gt > k || pred < 0 || pred > k) {
      throw std::invalid_argument("confusion: label id out of range");
    }
    ++confusion.at(gt, pred);
  }
}

std::vector<double> iou_per_class(const Confusion& confusion) {
  const std::int32_t k = confusion.num_classes;
  std::vector<double> out(static_cast<std::size_t>(k) + 1, kNan);
  for (std::int32_t c = 0; c <= k; ++c) {
    const std::uint64_t tp = confusion.at(c, c);
    std::uint64_t fp = 0, fn = 0;
    for (std::int32_t o = 0; o <= k; ++o) {
      if (o == c) continue;
      fp += confusion.at(o, c);
      fn += confusion.at(c, o);
    }
    const std::uint64_t uni = tp + fp + fn;
    if (uni > 0) {
      out[static_cast<std::size_t>(c)] =
          static_cast<double>(tp) / static_cast<double>(uni);
    }
  }
  return out;
}

MetricsReport aggregate(const std::vector<double>& iou,
                        const IncrementPlan& plan, std::size_t step_index) {
  plan.validate();
  if (step_index >= plan.num_steps()) {
    throw std::invalid_argument("aggregate: step index out of range");
  }
  for (std::size_t t = 0; t <= step_index; ++t) {
    for (std::int32_t c : plan.classes_of_step(t)) {
      if (static_cast<std::size_t>(c) >= iou.size()) {
        throw std::invalid_argument(
            "aggregate: iou vector does not cover learned classes");
      }
    }
  }

  MetricsReport r;
  r.step_index = step_index;
  r.per_class_iou = iou;
  r.miou_base = group_mean(iou, plan.classes_of_step(0));

  std::vector<std::int32_t> added;
  for (std::size_t t = 1; t <= step_index; ++t) {
    for (std::int32_t c : plan.classes_of_step(t)) added.push_back(c);
  }
  r.miou_new = group_mean(iou, added);

  std::vector<std::int32_t> with_bg = plan.classes_up_to(step_index);
  with_bg.push_back(0);
  r.miou_all = group_mean(iou, with_bg);

  double inc_total = 0.0;
  std::size_t inc_groups = 0;
  for (std::size_t t = 0; t <= step_index; ++t) {
    const double g = group_mean(iou, plan.classes_of_step(t));
    if (std::isfinite(g)) {
      inc_total += g;
      ++inc_groups;
    }
  }
  r.inc_miou = inc_groups == 0 ? kNan
                               : inc_total / static_cast<double>(inc_groups);
  return r;
}

std::vector<LabelMap> predict_labels(
    const Tensor& full_prob,
    const std::vector<std::int32_t>& learned_classes) {
  if (full_prob.dim() != 4) {
    throw std::invalid_argument("predict_labels: need {N,C,H,W}");
  }
  const std::size_t n = full_prob.shape()[0];
  const std::size_t c = full_prob.shape()[1];
  const std::size_t h = full_prob.shape()[2];
  const std::size_t w = full_prob.shape()[3];
  if (c != learned_classes.size() + 1) {
    throw std::invalid_argument(
        "predict_labels: channel count does not match learned classes");
  }
  std::vector<LabelMap> out(n);
  for (std::size_t img = 0; img < n; ++img) {
    LabelMap& m = out[img];
    m.h = h;
    m.w = w;
    m.v.resize(h * w);
    const double* base = full_prob.values().data() + img * c * h * w;
    for (std::size_t p = 0; p < h * w; ++p) {
      std::size_t best = 0;
      double best_v = base[p];
      for (std::size_t ch = 1; ch < c; ++ch) {
        const double v = base[ch * h * w + p];
        if (v > best_v) {
          best_v = v;
          best = ch;
        }
      }
      m.v[p] = best == 0 ? 0 : learned_classes[best - 1];
    }
  }
  return out;
}

std::string report_to_json(const MetricsReport& report) {
  nlohmann::json j;
  j["step"] = report.step_index;
  j["per_class_iou"] = report.per_class_iou;  // NaN serializes as null
  j["base"] = report.miou_base;
  j["new"] = report.miou_new;
  j["all"] = report.miou_all;
  j["inc_miou"] = report.inc_miou;
  return j.dump(2) + "\n";
}

std::string report_csv_header() {
  return "step,base,new,all,inc_miou";
}

std::string report_csv_row(const MetricsReport& report) {
  auto cell = [](double v) {
    if (!std::isfinite(v)) return std::string("n/a");
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return std::string(buf);
  };
  return std::to_string(report.step_index) + "," + cell(report.miou_base) +
         "," + cell(report.miou_new) + "," + cell(report.miou_all) + "," +
         cell(report.inc_miou);
}

}  // namespace edlseg
