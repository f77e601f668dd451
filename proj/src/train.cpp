#include "edlseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>

#include "edlseg/rng.hpp"
#include "json.hpp"

namespace edlseg {
namespace {

constexpr std::uint64_t kAugStream = 0xA06353ull;
constexpr std::uint64_t kShuffleStream = 0x54C0FFull;

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

double effective_kd_fg(const LossConfig& loss) {
  return loss.lambda_kd_fg.value_or(loss.lambda_kd);
}

double effective_kd_u(const LossConfig& loss) {
  return loss.lambda_kd_u.value_or(loss.lambda_kd);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace

void TrainConfig::validate() const {
  if (lr_base <= 0.0 || lr_incremental <= 0.0)
    throw std::invalid_argument("learning rates must be positive");
  if (momentum < 0.0 || momentum >= 1.0)
    throw std::invalid_argument("momentum must lie in [0,1)");
  if (poly_power <= 0.0)
    throw std::invalid_argument("poly_power must be positive");
  if (epochs == 0) throw std::invalid_argument("epochs must be positive");
  if (batch_size == 0)
    throw std::invalid_argument("batch_size must be positive");
  if (flip_prob < 0.0 || flip_prob > 1.0)
    throw std::invalid_argument("flip_prob must lie in [0,1]");
  loss.validate();
}

double lr_at(std::size_t iteration, std::size_t max_iterations, double lr0,
             double power) {
  if (max_iterations == 0)
    throw std::invalid_argument("lr_at: max_iterations must be positive");
  if (iteration > max_iterations)
    throw std::invalid_argument("lr_at: iteration beyond schedule");
  double frac = 1.0 - static_cast<double>(iteration) /
                          static_cast<double>(max_iterations);
  return lr0 * std::pow(frac, power);
}

SgdNesterov::SgdNesterov(std::vector<Tensor> params, double momentum)
    : params_(std::move(params)), momentum_(momentum) {
  if (momentum_ < 0.0 || momentum_ >= 1.0)
    throw std::invalid_argument("momentum must lie in [0,1)");
  velocity_.reserve(params_.size());
  for (const Tensor& p : params_)
    velocity_.emplace_back(p.numel(), 0.0);
}

void SgdNesterov::step(double lr) {
  if (!std::isfinite(lr) || lr < 0.0)
    throw std::invalid_argument("bad learning rate");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    std::vector<double>& v = velocity_[i];
    auto data = p.values_mut();
    if (!p.has_grad()) {
      for (std::size_t j = 0; j < v.size(); ++j) {
        v[j] *= momentum_;
        data[j] -= lr * momentum_ * v[j];
      }
      continue;
    }
    auto g = p.grad();
    for (std::size_t j = 0; j < v.size(); ++j) {
      v[j] = momentum_ * v[j] + g[j];
      data[j] -= lr * (g[j] + momentum_ * v[j]);
    }
  }
}

void SgdNesterov::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

AugmentedSample augment_sample(const LabeledSample& sample,
                               std::uint64_t seed, std::size_t epoch,
                               std::size_t crop_h, std::size_t crop_w,
                               double flip_prob) {
  const Shape& s = sample.image.shape();
  if (s.size() != 3 || s[0] != 3)
    throw std::invalid_argument("augment_sample expects images {3,H,W}");
  const std::size_t H = s[1], W = s[2];
  if (sample.labels.h != H || sample.labels.w != W)
    throw std::invalid_argument("label extents disagree with the image");
  const std::size_t h = crop_h == 0 ? H : crop_h;
  const std::size_t w = crop_w == 0 ? W : crop_w;
  if (h > H || w > W)
    throw std::invalid_argument("crop larger than the image");

  Rng rng(derive_seed(seed, fnv1a(sample.id), epoch, kAugStream));
  const bool flip = rng.uniform(0.0, 1.0) < flip_prob;
  const std::size_t oy = rng.below(H - h + 1);
  const std::size_t ox = rng.below(W - w + 1);

  AugmentedSample out;
  out.image.resize(3 * h * w);
  out.labels.h = h;
  out.labels.w = w;
  out.labels.v.resize(h * w);
  auto src = sample.image.values();
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t sx = flip ? ox + (w - 1 - x) : ox + x;
      const std::size_t sy = oy + y;
      for (std::size_t c = 0; c < 3; ++c)
        out.image[(c * h + y) * w + x] = src[(c * H + sy) * W + sx];
      out.labels.v[y * w + x] = sample.labels.v[sy * W + sx];
    }
  }
  return out;
}

std::string train_log_header() {
  return "step,epoch,loss_new,loss_kd_fg,loss_kd_u,total,lr";
}

std::string train_log_row(const TrainLogRow& row) {
  char buf[192];
  std::snprintf(buf, sizeof(buf), "%zu,%zu,%.10g,%.10g,%.10g,%.10g,%.10g",
                row.step, row.epoch, row.loss_new, row.loss_kd_fg,
                row.loss_kd_u, row.total, row.lr);
  return buf;
}

namespace {

struct Batch {
  Tensor images;                // {B,3,h,w}
  std::vector<LabelMap> labels; // channel-space
  Tensor valid_mask;            // {B,1,h,w}, 1 where not ignored
};

Batch assemble_batch(const std::vector<LabeledSample>& data,
                     const std::vector<std::size_t>& order,
                     std::size_t begin, std::size_t end,
                     const std::vector<std::int32_t>& learned,
                     std::size_t epoch, const TrainConfig& config) {
  const std::size_t b = end - begin;
  Batch batch;
  std::vector<double> pixels;
  std::vector<double> mask;
  std::size_t h = 0, w = 0;
  for (std::size_t i = 0; i < b; ++i) {
    const LabeledSample& sample = data[order[begin + i]];
    AugmentedSample aug =
        augment_sample(sample, config.seed, epoch, config.crop_h,
                       config.crop_w, config.flip_prob);
    if (i == 0) {
      h = aug.labels.h;
      w = aug.labels.w;
      pixels.reserve(b * 3 * h * w);
      mask.reserve(b * h * w);
    } else if (aug.labels.h != h || aug.labels.w != w) {
      throw std::runtime_error(
          "images in a batch must share extents; set a crop size");
    }
    pixels.insert(pixels.end(), aug.image.begin(), aug.image.end());
    batch.labels.push_back(remap_to_contiguous(aug.labels, learned));
    for (std::int32_t lab : batch.labels.back().v)
      mask.push_back(lab == kIgnoreLabel ? 0.0 : 1.0);
  }
  batch.images = Tensor::from_data({b, 3, h, w}, std::move(pixels), false);
  batch.valid_mask = Tensor::from_data({b, 1, h, w}, std::move(mask), false);
  return batch;
}

}  // namespace

void train_increment(SegModel& model, const SegModel* teacher,
                     const std::vector<LabeledSample>& data,
                     const IncrementPlan& plan, std::size_t step,
                     const TrainConfig& config,
                     std::vector<TrainLogRow>* log) {
  config.validate();
  if (data.empty())
    throw std::invalid_argument("train_increment: empty training subset");
  if (step >= plan.num_steps())
    throw std::invalid_argument("train_increment: step beyond the plan");
  if (model.increments().size() != step + 1)
    throw std::invalid_argument(
        "train_increment: model heads disagree with the step index");

  const std::vector<std::int32_t> learned = plan.classes_up_to(step);
  const std::size_t k_new = plan.increment_sizes[step];
  std::vector<std::int32_t> active;
  for (std::size_t c = learned.size() - k_new + 1; c <= learned.size(); ++c)
    active.push_back(static_cast<std::int32_t>(c));

  const bool use_kd =
      step > 0 &&
      (effective_kd_fg(config.loss) > 0.0 || effective_kd_u(config.loss) > 0.0);
  if (use_kd && teacher == nullptr)
    throw std::invalid_argument(
        "train_increment: distillation needs the pre-expansion snapshot");

  SgdNesterov opt(model.parameters(), config.momentum);
  const std::size_t batches_per_epoch =
      (data.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t max_iterations = config.epochs * batches_per_epoch;
  const double lr0 = step == 0 ? config.lr_base : config.lr_incremental;

  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::size_t iteration = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    Rng shuffle(derive_seed(config.seed, kShuffleStream, step, epoch));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle.below(i)]);

    TrainLogRow row;
    row.step = step;
    row.epoch = epoch;
    row.lr = lr_at(iteration, max_iterations, lr0, config.poly_power);

    for (std::size_t begin = 0; begin < data.size();
         begin += config.batch_size) {
      const std::size_t end =
          std::min(begin + config.batch_size, data.size());
      Batch batch =
          assemble_batch(data, order, begin, end, learned, epoch, config);

      EvidentialOutput out =
          model.head_output(model.forward(batch.images), config.rectifier);
      LossParts parts;
      Tensor weights;
      if (config.loss.fg_bg_balancing)
        weights = fg_bg_weights(batch.labels, config.loss.weight_clamp);
      parts.loss_new = loss_new(out.full_prob, batch.labels, active, weights,
                                config.loss.epsilon);
      if (use_kd) {
        EvidentialOutput ref = teacher->head_output(
            teacher->forward(batch.images), config.rectifier);
        if (config.head_mode == HeadMode::evidential_implicit_bg) {
          parts.loss_kd_fg = loss_kd_fg(out.fg_prob, ref.fg_prob,
                                        config.loss.kd_fg_renormalize,
                                        config.loss.epsilon, batch.valid_mask);
          parts.loss_kd_u = loss_kd_u(out.uncertainty, ref.uncertainty,
                                      config.loss.epsilon, batch.valid_mask);
        } else {
          // Softmax baseline: one cross-entropy over the teacher's whole
          // output, background channel included. No separate uncertainty
          // term; the background mass is already part of the distribution.
          parts.loss_kd_fg = loss_kd_fg(out.full_prob, ref.full_prob,
                                        config.loss.kd_fg_renormalize,
                                        config.loss.epsilon, batch.valid_mask);
          parts.loss_kd_u = Tensor::scalar(0.0);
        }
      }
      Tensor total = total_loss(step, parts, config.loss);
      const double total_item = total.item();
      if (!std::isfinite(total_item))
        throw std::runtime_error("training aborted: non-finite loss");

      const double lr = lr_at(iteration, max_iterations, lr0,
                              config.poly_power);
      opt.zero_grad();
      total.backward();
      opt.step(lr);
      ++iteration;

      row.loss_new += parts.loss_new.item();
      if (use_kd) {
        row.loss_kd_fg += parts.loss_kd_fg.item();
        row.loss_kd_u += parts.loss_kd_u.item();
      }
      row.total += total_item;
    }
    row.loss_new /= static_cast<double>(batches_per_epoch);
    row.loss_kd_fg /= static_cast<double>(batches_per_epoch);
    row.loss_kd_u /= static_cast<double>(batches_per_epoch);
    row.total /= static_cast<double>(batches_per_epoch);
    if (log) log->push_back(row);
  }
}

MetricsReport evaluate_model(const SegModel& model, const Corpus& corpus,
                             const IncrementPlan& plan, std::size_t step,
                             const TrainConfig& config) {
  const SegModel frozen = model.snapshot();
  const std::vector<std::int32_t> learned = plan.classes_up_to(step);

  IncrementPlan learned_plan;
  learned_plan.setting = plan.setting;
  learned_plan.class_order = learned;
  learned_plan.increment_sizes.assign(
      plan.increment_sizes.begin(), plan.increment_sizes.begin() + step + 1);

  std::vector<std::size_t> test_idx;
  for (std::size_t i = 0; i < corpus.samples.size(); ++i)
    if (corpus.samples[i].test_split) test_idx.push_back(i);
  if (test_idx.empty())
    throw std::runtime_error("evaluate_model: corpus has no test images");

  Confusion confusion(corpus.num_classes);
  for (std::size_t begin = 0; begin < test_idx.size();
       begin += config.batch_size) {
    const std::size_t end =
        std::min(begin + config.batch_size, test_idx.size());
    const std::size_t b = end - begin;
    const Shape& s0 = corpus.samples[test_idx[begin]].image.shape();
    std::vector<double> pixels;
    pixels.reserve(b * shape_numel(s0));
    for (std::size_t i = begin; i < end; ++i) {
      const LabeledSample& sample = corpus.samples[test_idx[i]];
      if (sample.image.shape() != s0)
        throw std::runtime_error("test images must share extents");
      auto v = sample.image.values();
      pixels.insert(pixels.end(), v.begin(), v.end());
    }
    Tensor images =
        Tensor::from_data({b, s0[0], s0[1], s0[2]}, std::move(pixels), false);

    EvidentialOutput out;
    if (frozen.head_mode() == HeadMode::evidential_implicit_bg) {
      Tensor evidence = rectify(frozen.forward(images), config.rectifier);
      if (config.increment_balancing && step > 0)
        evidence = apply_increment_balancing(evidence, learned_plan);
      out = dirichlet_stats(evidence);
      factorize_probability(out);
    } else {
      out = frozen.head_output(frozen.forward(images), config.rectifier);
    }
    std::vector<LabelMap> preds = predict_labels(out.full_prob, learned);
    for (std::size_t i = begin; i < end; ++i)
      accumulate(confusion, preds[i - begin],
                 corpus.samples[test_idx[i]].labels);
  }
  MetricsReport report = aggregate(iou_per_class(confusion), plan, step);
  report.step_index = step;
  return report;
}

RunResult run_plan(const Corpus& corpus, const IncrementPlan& plan,
                   const TrainConfig& config, const std::string& out_dir) {
  plan.validate();
  config.validate();
  namespace fs = std::filesystem;
  if (!out_dir.empty()) fs::create_directories(out_dir);

  SegModel model(config.head_mode, config.backbone, config.seed);
  RunResult result;
  for (std::size_t t = 0; t < plan.num_steps(); ++t) {
    std::vector<LabeledSample> data = build_increment(corpus, plan, t);
    std::optional<SegModel> teacher;
    if (t > 0 && (effective_kd_fg(config.loss) > 0.0 ||
                  effective_kd_u(config.loss) > 0.0))
      teacher = model.snapshot();
    model.expand_head(plan.increment_sizes[t]);
    train_increment(model, teacher ? &*teacher : nullptr, data, plan, t,
                    config, &result.log);
    result.reports.push_back(evaluate_model(model, corpus, plan, t, config));

    if (!out_dir.empty()) {
      const std::string tag = std::to_string(t);
      save_checkpoint(out_dir + "/step_" + tag + ".ckpt", model,
                      plan.classes_up_to(t), t);
      write_text(out_dir + "/report_step_" + tag + ".json",
                 report_to_json(result.reports.back()) + "\n");
    }
  }

  if (!out_dir.empty()) {
    std::string log_text = train_log_header() + "\n";
    for (const TrainLogRow& row : result.log)
      log_text += train_log_row(row) + "\n";
    write_text(out_dir + "/train_log.csv", log_text);

    std::string summary = report_csv_header() + "\n";
    for (const MetricsReport& report : result.reports)
      summary += report_csv_row(report) + "\n";
    write_text(out_dir + "/summary.csv", summary);

    nlohmann::json final_report;
    final_report["seed"] = config.seed;
    final_report["setting"] = to_string(plan.setting);
    final_report["class_order"] = plan.class_order;
    final_report["increment_sizes"] = plan.increment_sizes;
    final_report["head_mode"] = to_string(config.head_mode);
    final_report["rectifier"] = to_string(config.rectifier);
    final_report["increment_balancing"] = config.increment_balancing;
    nlohmann::json steps = nlohmann::json::array();
    for (const MetricsReport& report : result.reports)
      steps.push_back(nlohmann::json::parse(report_to_json(report)));
    final_report["steps"] = steps;
    write_text(out_dir + "/final_report.json", final_report.dump(2) + "\n");
  }
  return result;
}

}  // namespace edlseg
