#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "edlseg/tensor.hpp"

namespace edlseg {

// Sentinel label excluded from losses, weights, and metrics.
constexpr std::int32_t kIgnoreLabel = 255;

enum class Setting { overlapped, disjoint, pseudo_disjoint, joint };

std::string to_string(Setting s);
Setting setting_from_string(const std::string& s);

// Which foreground classes arrive at which step, and how samples are
// filtered/relabeled when a step's training set is built.
struct IncrementPlan {
  std::vector<std::int32_t> class_order;    // permutation of foreground ids
  std::vector<std::size_t> increment_sizes; // sums to class_order.size()
  Setting setting = Setting::overlapped;
  std::optional<std::size_t> min_images_per_class;  // pseudo_disjoint only

  std::size_t num_steps() const { return increment_sizes.size(); }
  // Classes introduced at step t, in channel order.
  std::vector<std::int32_t> classes_of_step(std::size_t t) const;
  // Classes learned after completing step t (base step included).
  std::vector<std::int32_t> classes_up_to(std::size_t t) const;
  void validate() const;  // throws std::invalid_argument on malformed plans
};

// Expands shorthand like "5-1" into increment sizes [5,1,1,...] over
// num_classes (a short final increment is allowed); "joint" puts every
// class into one step.
IncrementPlan make_plan(const std::string& task, std::int32_t num_classes,
                        Setting setting);

struct LabelMap {
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<std::int32_t> v;

  std::int32_t at(std::size_t y, std::size_t x) const { return v[y * w + x]; }
  std::int32_t& at(std::size_t y, std::size_t x) { return v[y * w + x]; }
};

struct LabeledSample {
  std::string id;
  Tensor image;    // {C,H,W}, values in [0,1]
  LabelMap labels; // dataset ids: 0 = background, kIgnoreLabel = ignore
  bool test_split = false;
  std::vector<std::int32_t> classes_present;  // foreground ids, ascending
};

struct Corpus {
  std::uint64_t seed = 0;
  std::int32_t num_classes = 0;
  std::vector<LabeledSample> samples;
};

// Deterministic synthetic corpus: each class is a distinct shape kind and
// hue rendered on a textured background. `imbalance` geometrically skews
// how often higher class ids appear as extra shapes (1 = uniform).
Corpus generate_shapes_corpus(std::uint64_t seed, std::int32_t num_classes,
                              std::size_t images, std::size_t height,
                              std::size_t width, std::size_t min_shapes = 1,
                              std::size_t max_shapes = 3,
                              double imbalance = 1.0);

// Training set for step t under the plan's setting. Labels keep dataset
// ids for classes in C^t; everything else becomes background (test-split
// samples are never included or relabeled).
std::vector<LabeledSample> build_increment(const Corpus& corpus,
                                           const IncrementPlan& plan,
                                           std::size_t t);

// Dataset ids -> model channel space: background 0 stays 0, the j-th
// learned class becomes j+1, unlearned classes fold into background,
// ignore is preserved.
LabelMap remap_to_contiguous(const LabelMap& labels,
                             const std::vector<std::int32_t>& learned_classes);

void save_corpus(const Corpus& corpus, const std::string& dir);
Corpus load_corpus(const std::string& dir);

}  // namespace edlseg
