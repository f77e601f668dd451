#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "edlseg/protocol.hpp"
#include "edlseg/tensor.hpp"

namespace edlseg {

// Square count matrix over {background} + all dataset foreground classes,
// indexed [ground_truth][prediction]. Mergeable by elementwise addition.
struct Confusion {
  std::int32_t num_classes = 0;  // foreground classes; matrix is (K+1)^2
  std::vector<std::uint64_t> counts;

  explicit Confusion(std::int32_t k)
      : num_classes(k),
        counts(static_cast<std::size_t>(k + 1) * (k + 1), 0) {}
  std::uint64_t& at(std::int32_t gt, std::int32_t pred) {
    return counts[static_cast<std::size_t>(gt) * (num_classes + 1) + pred];
  }
  std::uint64_t at(std::int32_t gt, std::int32_t pred) const {
    return counts[static_cast<std::size_t>(gt) * (num_classes + 1) + pred];
  }
  void merge(const Confusion& other);
};

// Adds one image; ignore-labeled ground-truth pixels are skipped.
void accumulate(Confusion& confusion, const LabelMap& predictions,
                const LabelMap& ground_truth);

// TP/(TP+FP+FN) per class id (0 = background). Classes with an empty
// union come back as NaN and are excluded from every aggregate.
std::vector<double> iou_per_class(const Confusion& confusion);

struct MetricsReport {
  std::size_t step_index = 0;
  std::vector<double> per_class_iou;  // index = dataset class id, NaN absent
  double miou_base = 0.0;  // mean over increment-0 classes
  double miou_new = 0.0;   // mean over classes added after the base step
  double miou_all = 0.0;   // mean over background + every learned class
  double inc_miou = 0.0;   // mean over per-increment group mIoUs
};

// Aggregates the IoU vector for the state after `step_index` completed
// steps of the plan. Groups with no learned or no present classes yield
// NaN for that aggregate.
MetricsReport aggregate(const std::vector<double>& iou,
                        const IncrementPlan& plan, std::size_t step_index);

// Argmax over probability channels mapped back to dataset class ids
// (channel 0 stays background). One map per batch element.
std::vector<LabelMap> predict_labels(
    const Tensor& full_prob, const std::vector<std::int32_t>& learned_classes);

std::string report_to_json(const MetricsReport& report);
std::string report_csv_header();
std::string report_csv_row(const MetricsReport& report);

}  // namespace edlseg
