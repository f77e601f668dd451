#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "edlseg/protocol.hpp"
#include "edlseg/tensor.hpp"

namespace edlseg {

struct LossConfig {
  double lambda_ce = 1.0;
  double lambda_kd = 10.0;
  // When set, the matching distillation term gets its own weight instead
  // of the shared lambda_kd.
  std::optional<double> lambda_kd_fg;
  std::optional<double> lambda_kd_u;
  bool fg_bg_balancing = false;
  double weight_clamp = 10.0;
  double epsilon = 1e-12;
  // Renormalize the student's foreground distribution over old classes
  // inside the distillation term (off = use the raw old-channel slice).
  bool kd_fg_renormalize = false;

  void validate() const;
};

struct LossParts {
  Tensor loss_new;    // required
  Tensor loss_kd_fg;  // undefined when no teacher term was computed
  Tensor loss_kd_u;
};

// Mean over non-ignored pixels of -log p[label]; background pixels read
// channel 0. Labels are channel-space: 0 = background, then contiguous
// foreground channels; only `active` channels (plus 0/ignore) may occur.
// pixel_weights {N,1,H,W} scales each pixel's term when defined.
Tensor loss_new(const Tensor& full_prob, const std::vector<LabelMap>& labels,
                const std::vector<std::int32_t>& active,
                const Tensor& pixel_weights = Tensor(),
                double epsilon = 1e-12);

// Cross-entropy from the teacher's foreground distribution to the student's
// old-class channels (a prefix of the student's channel axis). valid_mask
// {N,1,H,W} in {0,1} restricts the pixel mean when defined.
Tensor loss_kd_fg(const Tensor& student_fg_prob, const Tensor& teacher_fg_prob,
                  bool renormalize_student = false, double epsilon = 1e-12,
                  const Tensor& valid_mask = Tensor());

// Binary cross-entropy pinning the student's uncertainty map to the
// teacher's. Both {N,1,H,W} in [0,1].
Tensor loss_kd_u(const Tensor& student_u, const Tensor& teacher_u,
                 double epsilon = 1e-12, const Tensor& valid_mask = Tensor());

// Pixel weights against foreground/background imbalance, counted over the
// whole batch excluding ignored pixels: w = min(clamp, N_total/N_side).
// Ignored pixels get weight 0.
Tensor fg_bg_weights(const std::vector<LabelMap>& labels,
                     double weight_clamp = 10.0);

// step 0: lambda_ce * new. Later steps add lambda_kd * (kd_fg + kd_u),
// honoring per-term overrides; a zero effective distillation weight
// returns the pure cross-entropy path unchanged.
Tensor total_loss(std::size_t step_index, const LossParts& parts,
                  const LossConfig& config);

}  // namespace edlseg
