#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "edlseg/losses.hpp"
#include "edlseg/metrics.hpp"
#include "edlseg/model.hpp"
#include "edlseg/protocol.hpp"

namespace edlseg {

struct TrainConfig {
  double lr_base = 0.01;         // step 0
  double lr_incremental = 0.001; // later steps
  double momentum = 0.9;
  double poly_power = 0.9;
  std::size_t epochs = 8;
  std::size_t batch_size = 8;
  std::uint64_t seed = 42;
  std::size_t crop_h = 0;  // 0 = keep full height
  std::size_t crop_w = 0;  // 0 = keep full width
  double flip_prob = 0.5;
  RectifierKind rectifier = RectifierKind::exp_sigmoid;
  HeadMode head_mode = HeadMode::evidential_implicit_bg;
  BackboneConfig backbone;
  bool increment_balancing = false;
  LossConfig loss;

  void validate() const;
};

// Polynomial decay from lr0 at iteration 0 down to 0 at max_iterations.
double lr_at(std::size_t iteration, std::size_t max_iterations, double lr0,
             double power);

class SgdNesterov {
 public:
  SgdNesterov(std::vector<Tensor> params, double momentum);
  // v <- m*v + g ; p <- p - lr*(g + m*v). Parameters without a gradient
  // this round are treated as g = 0.
  void step(double lr);
  void zero_grad();

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  double momentum_;
};

struct AugmentedSample {
  std::vector<double> image;  // {3,h,w} row-major
  LabelMap labels;
};

// Deterministic per-(seed, image id, epoch) crop + horizontal flip. Crop
// extents of 0 keep the full image.
AugmentedSample augment_sample(const LabeledSample& sample,
                               std::uint64_t seed, std::size_t epoch,
                               std::size_t crop_h, std::size_t crop_w,
                               double flip_prob);

struct TrainLogRow {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss_new = 0.0;
  double loss_kd_fg = 0.0;
  double loss_kd_u = 0.0;
  double total = 0.0;
  double lr = 0.0;
};

std::string train_log_header();
std::string train_log_row(const TrainLogRow& row);

// One incremental step over its training subset. `teacher` is the frozen
// pre-expansion model; required when step > 0 and distillation carries
// weight, ignored otherwise. Appends one log row per epoch.
void train_increment(SegModel& model, const SegModel* teacher,
                     const std::vector<LabeledSample>& data,
                     const IncrementPlan& plan, std::size_t step,
                     const TrainConfig& config,
                     std::vector<TrainLogRow>* log);

// Test-split evaluation of the model as it stands after `step`.
MetricsReport evaluate_model(const SegModel& model, const Corpus& corpus,
                             const IncrementPlan& plan, std::size_t step,
                             const TrainConfig& config);

struct RunResult {
  std::vector<MetricsReport> reports;  // one per completed step
  std::vector<TrainLogRow> log;
};

// Full protocol: per step build the training subset, snapshot the teacher,
// expand the head, train, evaluate, and (when out_dir is non-empty) persist
// checkpoints, per-step reports, the training log, summary.csv, and
// final_report.json.
RunResult run_plan(const Corpus& corpus, const IncrementPlan& plan,
                   const TrainConfig& config, const std::string& out_dir);

}  // namespace edlseg
