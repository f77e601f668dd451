#include "edlseg/losses.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace edlseg {

namespace {

[[noreturn]] void fail(const std::string& what) {
  throw std::invalid_argument(what);
}

void check_batch_geometry(const char* who, const Tensor& t,
                          const std::vector<LabelMap>& labels) {
  if (t.dim() != 4) fail(std::string(who) + ": tensor must be {N,C,H,W}");
  if (labels.size() != t.shape()[0]) {
    fail(std::string(who) + ": batch size mismatch");
  }
  for (const LabelMap& m : labels) {
    if (m.h != t.shape()[2] || m.w != t.shape()[3]) {
      fail(std::string(who) + ": label extents mismatch");
    }
  }
}

// Masked pixel mean of a {N,1,H,W} per-pixel loss map. An undefined mask
// averages over every pixel.
Tensor masked_mean(const Tensor& per_pixel, const Tensor& mask) {
  if (!mask.defined()) return mean(per_pixel);
  if (mask.shape() != per_pixel.shape()) {
    fail("valid_mask: shape mismatch with per-pixel loss");
  }
  double count = 0.0;
  for (double v : mask.values()) count += v;
  if (count == 0.0) return sum(per_pixel) * 0.0;
  return sum(per_pixel * mask) / count;
}

}  // namespace

void LossConfig::validate() const {
  if (lambda_ce < 0.0 || lambda_kd < 0.0) fail("loss weights must be >= 0");
  if ((lambda_kd_fg && *lambda_kd_fg < 0.0) ||
      (lambda_kd_u && *lambda_kd_u < 0.0)) {
    fail("loss weights must be >= 0");
  }
  if (weight_clamp < 1.0) fail("weight_clamp must be >= 1");
  if (epsilon <= 0.0) fail("epsilon must be positive");
}

Tensor loss_new(const Tensor& full_prob, const std::vector<LabelMap>& labels,
                const std::vector<std::int32_t>& active,
                const Tensor& pixel_weights, double epsilon) {
  check_batch_geometry("loss_new", full_prob, labels);
  const std::size_t N = full_prob.shape()[0];
  const std::size_t C = full_prob.shape()[1];
  const std::size_t H = full_prob.shape()[2];
  const std::size_t W = full_prob.shape()[3];
  if (pixel_weights.defined() &&
      pixel_weights.shape() != Shape{N, 1, H, W}) {
    fail("loss_new: pixel_weights must be {N,1,H,W}");
  }

  std::vector<bool> allowed(C, false);
  allowed[0] = true;
  for (std::int32_t a : active) {
    if (a <= 0 || static_cast<std::size_t>(a) >= C) {
      fail("loss_new: active channel " + std::to_string(a) +
           " outside probability channels");
    }
    allowed[static_cast<std::size_t>(a)] = true;
  }

  // The label selects one channel per pixel; fold the pixel weight into a
  // one-hot mask so a single elementwise product does the gather.
  std::vector<double> mask(N * C * H * W, 0.0);
  std::size_t valid = 0;
  for (std::size_t n = 0; n < N; ++n) {
    const LabelMap& m = labels[n];
    for (std::size_t p = 0; p < H * W; ++p) {
      const std::int32_t y = m.v[p];
      if (y == kIgnoreLabel) continue;
      if (y < 0 || static_cast<std::size_t>(y) >= C ||
          !allowed[static_cast<std::size_t>(y)]) {
        fail("loss_new: label " + std::to_string(y) +
             " is not background or an active channel");
      }
      const double w =
          pixel_weights.defined() ? pixel_weights.values()[n * H * W + p]
                                  : 1.0;
      mask[(n * C + static_cast<std::size_t>(y)) * H * W + p] = w;
      ++valid;
    }
  }
  if (valid == 0) return sum(full_prob) * 0.0;

  Tensor mask_t = Tensor::from_data({N, C, H, W}, std::move(mask));
  Tensor picked = log(clamp_min(full_prob, epsilon)) * mask_t;
  return sum(picked) * (-1.0 / static_cast<double>(valid));
}

Tensor loss_kd_fg(const Tensor& student_fg_prob,
                  const Tensor& teacher_fg_prob, bool renormalize_student,
                  double epsilon, const Tensor& valid_mask) {
  if (student_fg_prob.dim() != 4 || teacher_fg_prob.dim() != 4) {
    fail("loss_kd_fg: inputs must be {N,K,H,W}");
  }
  const Shape& ss = student_fg_prob.shape();
  const Shape& ts = teacher_fg_prob.shape();
  const std::size_t k_old = ts[1];
  if (ss[0] != ts[0] || ss[2] != ts[2] || ss[3] != ts[3] || ss[1] < k_old) {
    fail("loss_kd_fg: student channels do not cover the teacher's classes");
  }
  Tensor student_old = ss[1] == k_old
                           ? student_fg_prob
                           : narrow(student_fg_prob, 1, 0, k_old);
  if (renormalize_student) {
    student_old = student_old / sum(student_old, {1}, true);
  }
  Tensor teacher = teacher_fg_prob.requires_grad()
                       ? teacher_fg_prob.detach()
                       : teacher_fg_prob;
  Tensor per_pixel =
      sum(teacher * log(clamp_min(student_old, epsilon)), {1}, true) * -1.0;
  return masked_mean(per_pixel, valid_mask);
}

Tensor loss_kd_u(const Tensor& student_u, const Tensor& teacher_u,
                 double epsilon, const Tensor& valid_mask) {
  if (student_u.dim() != 4 || student_u.shape()[1] != 1 ||
      student_u.shape() != teacher_u.shape()) {
    fail("loss_kd_u: both maps must be {N,1,H,W} with equal extents");
  }
  for (double v : student_u.values()) {
    if (v < 0.0 || v > 1.0) fail("loss_kd_u: student value outside [0,1]");
  }
  for (double v : teacher_u.values()) {
    if (v < 0.0 || v > 1.0) fail("loss_kd_u: teacher value outside [0,1]");
  }
  Tensor teacher =
      teacher_u.requires_grad() ? teacher_u.detach() : teacher_u;
  Tensor per_pixel = (teacher * log(clamp_min(student_u, epsilon)) +
                      (1.0 - teacher) * log(clamp_min(1.0 - student_u,
                                                      epsilon))) *
                     -1.0;
  return masked_mean(per_pixel, valid_mask);
}

Tensor fg_bg_weights(const std::vector<LabelMap>& labels,
                     double weight_clamp) {
  if (labels.empty()) fail("fg_bg_weights: empty batch");
  const std::size_t H = labels[0].h;
  const std::size_t W = labels[0].w;
  std::size_t n_bg = 0, n_fg = 0;
  for (const LabelMap& m : labels) {
    if (m.h != H || m.w != W) fail("fg_bg_weights: ragged batch");
    for (std::int32_t y : m.v) {
      if (y == kIgnoreLabel) continue;
      if (y == 0) {
        ++n_bg;
      } else {
        ++n_fg;
      }
    }
  }
  const std::size_t total = n_bg + n_fg;
  if (total == 0) fail("fg_bg_weights: all pixels ignored");
  const double w_bg =
      n_bg == 0 ? 0.0
                : std::min(weight_clamp, static_cast<double>(total) /
                                             static_cast<double>(n_bg));
  const double w_fg =
      n_fg == 0 ? 0.0
                : std::min(weight_clamp, static_cast<double>(total) /
                                             static_cast<double>(n_fg));

  std::vector<double> out(labels.size() * H * W, 0.0);
  for (std::size_t n = 0; n < labels.size(); ++n) {
    for (std::size_t p = 0; p < H * W; ++p) {
      const std::int32_t y = labels[n].v[p];
      if (y == kIgnoreLabel) continue;
      out[n * H * W + p] = y == 0 ? w_bg : w_fg;
    }
  }
  return Tensor::from_data({labels.size(), 1, H, W}, std::move(out));
}

Tensor total_loss(std::size_t step_index, const LossParts& parts,
                  const LossConfig& config) {
  config.validate();
  if (!parts.loss_new.defined()) fail("total_loss: loss_new is required");
  const double w_fg = config.lambda_kd_fg.value_or(config.lambda_kd);
  const double w_u = config.lambda_kd_u.value_or(config.lambda_kd);
  if (step_index == 0) {
    if (parts.loss_kd_fg.defined() || parts.loss_kd_u.defined()) {
      fail("total_loss: distillation terms are invalid at the base step");
    }
    return parts.loss_new * config.lambda_ce;
  }
  if (w_fg == 0.0 && w_u == 0.0) {
    return parts.loss_new * config.lambda_ce;
  }
  if (!parts.loss_kd_fg.defined() || !parts.loss_kd_u.defined()) {
    fail("total_loss: distillation terms missing after the base step");
  }
  if (!config.lambda_kd_fg && !config.lambda_kd_u) {
    return parts.loss_new * config.lambda_ce +
           (parts.loss_kd_fg + parts.loss_kd_u) * config.lambda_kd;
  }
  return parts.loss_new * config.lambda_ce + parts.loss_kd_fg * w_fg +
         parts.loss_kd_u * w_u;
}

}  // namespace edlseg
