#include "edlseg/edl_head.hpp"

#include <stdexcept>

namespace edlseg {

std::string to_string(RectifierKind k) {
  switch (k) {
    case RectifierKind::relu: return "relu";
    case RectifierKind::exp: return "exp";
    case RectifierKind::exp_sigmoid: return "exp_sigmoid";
  }
  throw std::logic_error("unknown rectifier");
}

RectifierKind rectifier_from_string(const std::string& s) {
  if (s == "relu") return RectifierKind::relu;
  if (s == "exp") return RectifierKind::exp;
  if (s == "exp_sigmoid") return RectifierKind::exp_sigmoid;
  throw std::invalid_argument("unknown rectifier: " + s);
}

// Saturation guard for the exponential rectifiers: raw scores this large
// are already far outside any useful evidence scale, and exp() would
// overflow to inf around 709.
constexpr double kMaxExpArg = 60.0;

Tensor rectify(const Tensor& scores, RectifierKind kind) {
  switch (kind) {
    case RectifierKind::relu: return relu(scores);
    case RectifierKind::exp: return exp(clamp_max(scores, kMaxExpArg));
    case RectifierKind::exp_sigmoid: {
      Tensor capped = clamp_max(scores, kMaxExpArg);
      return exp(capped) * sigmoid(capped);
    }
  }
  throw std::logic_error("unknown rectifier");
}

EvidentialOutput dirichlet_stats(const Tensor& evidence) {
  if (evidence.dim() != 4 || evidence.shape()[1] == 0) {
    throw std::invalid_argument(
        "dirichlet_stats: evidence must be {N,K,H,W} with K >= 1");
  }
  const double k = static_cast<double>(evidence.shape()[1]);
  EvidentialOutput out;
  out.evidence = evidence;
  out.alpha = evidence + 1.0;
  Tensor strength = sum(out.alpha, {1}, true);  // {N,1,H,W}
  out.belief = evidence / strength;
  out.uncertainty = k / strength;
  out.fg_prob = out.alpha / strength;
  return out;
}

Tensor factorize_probability(EvidentialOutput& stats) {
  Tensor bg = stats.uncertainty;
  Tensor fg = (1.0 - stats.uncertainty) * stats.fg_prob;
  stats.full_prob = concat({bg, fg}, 1);
  return stats.full_prob;
}

EvidentialOutput explicit_softmax_output(const Tensor& scores) {
  if (scores.dim() != 4 || scores.shape()[1] < 2) {
    throw std::invalid_argument(
        "explicit_softmax_output: scores must be {N,K+1,H,W} with K >= 1");
  }
  const std::size_t k = scores.shape()[1] - 1;
  // Shift by the detached channel max; softmax is shift-invariant so the
  // gradient is unaffected and exp stays in range.
  Tensor shifted = scores - max(scores, {1}, true).detach();
  Tensor ez = exp(shifted);
  Tensor denom = sum(ez, {1}, true);
  EvidentialOutput out;
  out.full_prob = ez / denom;
  out.uncertainty = narrow(out.full_prob, 1, 0, 1);
  Tensor fg = narrow(ez, 1, 1, k);
  out.fg_prob = fg / sum(fg, {1}, true);
  return out;
}

double increment_scale(std::size_t k_t, std::size_t k_total) {
  if (k_t == 0 || k_total < k_t) {
    throw std::invalid_argument("increment_scale: need 1 <= k_t <= k_total");
  }
  const double kt = static_cast<double>(k_t);
  const double kT = static_cast<double>(k_total);
  return ((2.0 * kt - 1.0) * kT * kT) / (kt * kt * (2.0 * kT - 1.0));
}

Tensor apply_increment_balancing(const Tensor& evidence,
                                 const IncrementPlan& plan) {
  if (evidence.dim() != 4) {
    throw std::invalid_argument(
        "apply_increment_balancing: evidence must be {N,K,H,W}");
  }
  const std::size_t n = evidence.shape()[0];
  const std::size_t k = evidence.shape()[1];
  const std::size_t hw = evidence.shape()[2] * evidence.shape()[3];
  std::size_t planned = 0;
  for (std::size_t s : plan.increment_sizes) planned += s;
  if (planned != k) {
    throw std::invalid_argument(
        "apply_increment_balancing: plan covers " + std::to_string(planned) +
        " channels, evidence has " + std::to_string(k));
  }

  std::vector<double> out(evidence.values().begin(), evidence.values().end());
  if (plan.increment_sizes.size() <= 1) {
    return Tensor::from_data(evidence.shape(), std::move(out));
  }

  for (std::size_t img = 0; img < n; ++img) {
    double* base = out.data() + img * k * hw;
    for (std::size_t px = 0; px < hw; ++px) {
      std::size_t c0 = 0;
      for (std::size_t g = 0; g < plan.increment_sizes.size(); ++g) {
        const std::size_t gk = plan.increment_sizes[g];
        std::size_t best = c0;
        double best_v = base[c0 * hw + px];
        for (std::size_t c = c0 + 1; c < c0 + gk; ++c) {
          const double v = base[c * hw + px];
          if (v > best_v) {
            best_v = v;
            best = c;
          }
        }
        if (best_v > 0.0) {
          base[best * hw + px] *= increment_scale(gk, k);
        }
        c0 += gk;
      }
    }
  }
  return Tensor::from_data(evidence.shape(), std::move(out));
}

}  // namespace edlseg
