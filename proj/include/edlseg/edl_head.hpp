#pragma once

#include <string>

#include "edlseg/protocol.hpp"
#include "edlseg/tensor.hpp"

namespace edlseg {

enum class RectifierKind { relu, exp, exp_sigmoid };

std::string to_string(RectifierKind k);
RectifierKind rectifier_from_string(const std::string& s);

// Per-pixel Dirichlet view of a score map. All tensors are {N,K,H,W} except
// uncertainty {N,1,H,W} and full_prob {N,K+1,H,W} (channel 0 = background).
// The explicit-softmax baseline fills only uncertainty/fg_prob/full_prob.
struct EvidentialOutput {
  Tensor evidence;
  Tensor alpha;
  Tensor belief;
  Tensor uncertainty;
  Tensor fg_prob;
  Tensor full_prob;
};

// Raw scores -> nonnegative evidence. exp_sigmoid is exp(z)*sigmoid(z).
Tensor rectify(const Tensor& scores, RectifierKind kind);

// Evidence {N,K,H,W} -> alpha, belief, uncertainty, fg_prob.
// Per pixel: S = sum_k(e_k + 1); b_i = e_i/S; u = K/S; p_i = alpha_i/S.
EvidentialOutput dirichlet_stats(const Tensor& evidence);

// Fills stats.full_prob: channel 0 = u, channel i = (1-u) * fg_prob_i.
Tensor factorize_probability(EvidentialOutput& stats);

// Scores {N,K+1,H,W} with channel 0 = background -> softmax baseline.
// uncertainty = p_0, fg_prob = softmax over foreground channels only.
EvidentialOutput explicit_softmax_output(const Tensor& scores);

// Inference-time compensation for the per-step posterior shift: increments
// trained with fewer classes produce systematically larger evidence.
double increment_scale(std::size_t k_t, std::size_t k_total);

// Scales the single largest positive evidence channel within each
// increment's channel group, per pixel (ties go to the lowest channel).
// Returns detached values; inference only.
Tensor apply_increment_balancing(const Tensor& evidence,
                                 const IncrementPlan& plan);

}  // namespace edlseg
