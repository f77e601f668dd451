#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "edlseg/edl_head.hpp"
#include "edlseg/tensor.hpp"

namespace edlseg {

enum class HeadMode { evidential_implicit_bg, softmax_explicit_bg };

std::string to_string(HeadMode m);
HeadMode head_mode_from_string(const std::string& s);

struct BackboneConfig {
  std::size_t width1 = 16;  // full-resolution stage
  std::size_t width2 = 32;  // stride-2 stage and head input
};

// Small fully-convolutional net: two stages of 3x3 convs (the second at
// stride 2), per-increment 1x1 score heads, bilinear upsample back to the
// input resolution. The evidential mode has no background channel; the
// softmax baseline carries one extra channel on the base head.
class SegModel {
 public:
  SegModel(HeadMode mode, BackboneConfig config, std::uint64_t seed);

  SegModel(const SegModel&) = delete;
  SegModel& operator=(const SegModel&) = delete;
  SegModel(SegModel&&) = default;
  SegModel& operator=(SegModel&&) = default;

  // Appends a head for `new_classes` classes; existing parameters are
  // untouched. Head weights start near zero so new evidence begins close
  // to the rectifier's value at zero.
  void expand_head(std::size_t new_classes);

  // Images {N,3,H,W} -> raw scores {N,C,H,W} at input resolution.
  Tensor forward(const Tensor& images) const;

  // Scores -> probabilities under this model's head mode.
  EvidentialOutput head_output(const Tensor& scores,
                               RectifierKind kind) const;

  HeadMode head_mode() const { return head_mode_; }
  const BackboneConfig& backbone_config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<std::size_t>& increments() const { return increments_; }
  std::size_t total_classes() const;
  std::size_t score_channels() const;

  std::vector<Tensor> parameters();
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;

  // Deep value copy. Snapshots are frozen (no gradients) teachers.
  SegModel clone(bool requires_grad) const;
  SegModel snapshot() const { return clone(false); }

 private:
  SegModel() = default;

  HeadMode head_mode_ = HeadMode::evidential_implicit_bg;
  BackboneConfig config_;
  std::uint64_t seed_ = 0;
  std::vector<std::size_t> increments_;

  struct Conv {
    Tensor w;  // {O,I,KH,KW}
    Tensor b;  // {O,1,1}
  };
  Conv conv1_, conv2_, conv3_;
  std::vector<Conv> heads_;

  friend SegModel load_checkpoint_model(const std::string& path,
                                        std::vector<std::int32_t>* class_order,
                                        std::size_t* step_index);
};

// Parameter blobs plus a JSON header carrying the plan state needed to
// resume or evaluate: head mode, increment sizes, class order, step, seed.
void save_checkpoint(const std::string& path, const SegModel& model,
                     const std::vector<std::int32_t>& class_order,
                     std::size_t step_index);
SegModel load_checkpoint_model(const std::string& path,
                               std::vector<std::int32_t>* class_order,
                               std::size_t* step_index);

}  // namespace edlseg
