#include "edlseg/protocol.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <unordered_set>

#include <json.hpp>

#include "edlseg/rng.hpp"
#include "edlseg/serialize.hpp"

namespace edlseg {

namespace {

[[noreturn]] void fail(const std::string& what) {
  throw std::invalid_argument(what);
}

}  // namespace

std::string to_string(Setting s) {
  switch (s) {
    case Setting::overlapped: return "overlapped";
    case Setting::disjoint: return "disjoint";
    case Setting::pseudo_disjoint: return "pseudo_disjoint";
    case Setting::joint: return "joint";
  }
  throw std::logic_error("unknown setting");
}

Setting setting_from_string(const std::string& s) {
  if (s == "overlapped") return Setting::overlapped;
  if (s == "disjoint") return Setting::disjoint;
  if (s == "pseudo_disjoint") return Setting::pseudo_disjoint;
  if (s == "joint") return Setting::joint;
  fail("unknown setting: " + s);
}

std::vector<std::int32_t> IncrementPlan::classes_of_step(std::size_t t) const {
  if (t >= increment_sizes.size()) fail("step index out of range");
  std::size_t start = 0;
  for (std::size_t i = 0; i < t; ++i) start += increment_sizes[i];
  return {class_order.begin() + static_cast<std::ptrdiff_t>(start),
          class_order.begin() +
              static_cast<std::ptrdiff_t>(start + increment_sizes[t])};
}

std::vector<std::int32_t> IncrementPlan::classes_up_to(std::size_t t) const {
  if (t >= increment_sizes.size()) fail("step index out of range");
  std::size_t count = 0;
  for (std::size_t i = 0; i <= t; ++i) count += increment_sizes[i];
  return {class_order.begin(),
          class_order.begin() + static_cast<std::ptrdiff_t>(count)};
}

void IncrementPlan::validate() const {
  if (class_order.empty()) fail("plan has no classes");
  if (increment_sizes.empty()) fail("plan has no increments");
  std::size_t total = 0;
  for (std::size_t s : increment_sizes) {
    if (s == 0) fail("zero-sized increment");
    total += s;
  }
  if (total != class_order.size()) {
    fail("increment sizes sum to " + std::to_string(total) + ", plan has " +
         std::to_string(class_order.size()) + " classes");
  }
  std::set<std::int32_t> seen;
  for (std::int32_t c : class_order) {
    if (c <= 0) fail("class id " + std::to_string(c) + " is not foreground");
    if (c == kIgnoreLabel) fail("class order contains the ignore sentinel");
    if (!seen.insert(c).second) {
      fail("class " + std::to_string(c) + " appears in two increments");
    }
  }
  if (setting == Setting::joint && increment_sizes.size() != 1) {
    fail("joint setting requires exactly one increment");
  }
  if (min_images_per_class && *min_images_per_class == 0) {
    fail("min_images_per_class must be positive");
  }
}

IncrementPlan make_plan(const std::string& task, std::int32_t num_classes,
                        Setting setting) {
  if (num_classes < 1) fail("need at least one foreground class");
  IncrementPlan plan;
  plan.setting = setting;
  for (std::int32_t c = 1; c <= num_classes; ++c) {
    plan.class_order.push_back(c);
  }
  if (task == "joint") {
    plan.increment_sizes = {static_cast<std::size_t>(num_classes)};
    plan.validate();
    return plan;
  }
  const auto dash = task.find('-');
  std::size_t base = 0, inc = 0;
  try {
    if (dash == std::string::npos) throw std::invalid_argument(task);
    base = std::stoul(task.substr(0, dash));
    inc = std::stoul(task.substr(dash + 1));
  } catch (const std::exception&) {
    fail("task must be 'joint' or 'BASE-INC', got: " + task);
  }
  if (base == 0 || inc == 0 ||
      base > static_cast<std::size_t>(num_classes)) {
    fail("task " + task + " does not fit " + std::to_string(num_classes) +
         " classes");
  }
  plan.increment_sizes.push_back(base);
  std::size_t left = static_cast<std::size_t>(num_classes) - base;
  while (left > 0) {
    const std::size_t step = std::min(inc, left);
    plan.increment_sizes.push_back(step);
    left -= step;
  }
  plan.validate();
  return plan;
}

namespace {

enum class ShapeKind { circle, square, triangle, diamond, cross };

struct ShapeDraw {
  std::int32_t cls = 0;
  double area_frac = 0.0;  // of the whole image
};

struct PlacedShape {
  ShapeKind kind;
  double cy, cx, a;  // center and half-extent parameter
};

constexpr double kMinAreaFrac = 0.06;
constexpr double kMaxAreaFrac = 0.11;
constexpr double kAreaBudget = 0.42;

ShapeKind kind_of_class(std::int32_t cls) {
  return static_cast<ShapeKind>((cls - 1) % 5);
}

// Half-extent of a shape's bounding box given its target pixel area.
double half_extent(ShapeKind kind, double area) {
  switch (kind) {
    case ShapeKind::circle: return std::sqrt(area / 3.14159265358979323846);
    case ShapeKind::square: return std::sqrt(area) / 2.0;
    case ShapeKind::triangle: return std::sqrt(area / 2.0);
    case ShapeKind::diamond: return std::sqrt(area / 2.0);
    case ShapeKind::cross: return std::sqrt(area / 3.0);
  }
  throw std::logic_error("unknown shape");
}

bool inside_shape(ShapeKind kind, double dy, double dx, double a) {
  switch (kind) {
    case ShapeKind::circle:
      return dy * dy + dx * dx <= a * a;
    case ShapeKind::square:
      return std::fabs(dy) <= a && std::fabs(dx) <= a;
    case ShapeKind::triangle: {
      // Upright isoceles triangle spanning [cy-a, cy+a].
      const double t = dy + a;
      if (t < 0.0 || t > 2.0 * a) return false;
      return std::fabs(dx) <= t / 2.0;
    }
    case ShapeKind::diamond:
      return std::fabs(dy) + std::fabs(dx) <= a;
    case ShapeKind::cross:
      return (std::fabs(dy) <= a && std::fabs(dx) <= a / 2.0) ||
             (std::fabs(dx) <= a && std::fabs(dy) <= a / 2.0);
  }
  throw std::logic_error("unknown shape");
}

void hsv_to_rgb(double h, double s, double v, double* rgb) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) {
    r = c; g = x;
  } else if (hp < 2) {
    r = x; g = c;
  } else if (hp < 3) {
    g = c; b = x;
  } else if (hp < 4) {
    g = x; b = c;
  } else if (hp < 5) {
    r = x; b = c;
  } else {
    r = c; b = x;
  }
  rgb[0] = r + (v - c);
  rgb[1] = g + (v - c);
  rgb[2] = b + (v - c);
}

void class_color(std::int32_t cls, std::int32_t num_classes, double* rgb) {
  const double hue = static_cast<double>(cls - 1) /
                     static_cast<double>(num_classes);
  hsv_to_rgb(hue, 0.85, 0.9, rgb);
}

// Renders one image: textured background, then each planned shape at a
// non-overlapping position. Throws when a shape cannot be placed.
void render_image(const std::vector<ShapeDraw>& comp,
                  std::int32_t num_classes, std::size_t H, std::size_t W,
                  Rng& rng, Tensor* image, LabelMap* labels) {
  const double area = static_cast<double>(H * W);
  std::vector<PlacedShape> placed;
  for (const ShapeDraw& draw : comp) {
    const ShapeKind kind = kind_of_class(draw.cls);
    const double a = half_extent(kind, draw.area_frac * area);
    const double lo_y = a, hi_y = static_cast<double>(H) - 1.0 - a;
    const double lo_x = a, hi_x = static_cast<double>(W) - 1.0 - a;
    if (lo_y >= hi_y || lo_x >= hi_x) {
      throw std::runtime_error("image too small to place a shape");
    }
    bool ok = false;
    for (int attempt = 0; attempt < 60 && !ok; ++attempt) {
      const double cy = rng.uniform(lo_y, hi_y);
      const double cx = rng.uniform(lo_x, hi_x);
      ok = true;
      for (const PlacedShape& p : placed) {
        if (std::fabs(cy - p.cy) <= a + p.a + 1.0 &&
            std::fabs(cx - p.cx) <= a + p.a + 1.0) {
          ok = false;
          break;
        }
      }
      if (ok) placed.push_back({kind, cy, cx, a});
    }
    if (!ok) {
      throw std::runtime_error("image too small to place a shape");
    }
  }

  // Background: muted base color, low-frequency waves, pixel noise.
  const double bg_hue = rng.uniform(0.0, 1.0);
  const double bg_val = rng.uniform(0.28, 0.42);
  double bg_rgb[3];
  hsv_to_rgb(bg_hue, 0.15, bg_val, bg_rgb);
  const double wy = rng.uniform(0.5, 2.5), wx = rng.uniform(0.5, 2.5);
  const double phase = rng.uniform(0.0, 6.28318);

  std::vector<double> img(3 * H * W);
  labels->h = H;
  labels->w = W;
  labels->v.assign(H * W, 0);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const double wave =
          0.05 * std::sin(6.28318 * (wy * y / H + wx * x / W) + phase);
      for (std::size_t c = 0; c < 3; ++c) {
        const double noise = rng.uniform(-0.02, 0.02);
        img[c * H * W + y * W + x] =
            std::clamp(bg_rgb[c] + wave + noise, 0.0, 1.0);
      }
    }
  }

  for (std::size_t si = 0; si < comp.size(); ++si) {
    const PlacedShape& p = placed[si];
    double rgb[3];
    class_color(comp[si].cls, num_classes, rgb);
    const double shade = rng.uniform(0.85, 1.0);
    const long y0 = std::max(0L, static_cast<long>(std::floor(p.cy - p.a)));
    const long y1 = std::min(static_cast<long>(H) - 1,
                             static_cast<long>(std::ceil(p.cy + p.a)));
    const long x0 = std::max(0L, static_cast<long>(std::floor(p.cx - p.a)));
    const long x1 = std::min(static_cast<long>(W) - 1,
                             static_cast<long>(std::ceil(p.cx + p.a)));
    for (long y = y0; y <= y1; ++y) {
      for (long x = x0; x <= x1; ++x) {
        if (!inside_shape(p.kind, y - p.cy, x - p.cx, p.a)) continue;
        const std::size_t px = static_cast<std::size_t>(y) * W +
                               static_cast<std::size_t>(x);
        for (std::size_t c = 0; c < 3; ++c) {
          const double noise = rng.uniform(-0.03, 0.03);
          img[c * H * W + px] = std::clamp(rgb[c] * shade + noise, 0.0, 1.0);
        }
        labels->v[px] = comp[si].cls;
      }
    }
  }
  *image = Tensor::from_data({3, H, W}, std::move(img));
}

double background_fraction(const LabelMap& m) {
  std::size_t bg = 0;
  for (std::int32_t v : m.v) bg += v == 0 ? 1 : 0;
  return static_cast<double>(bg) / static_cast<double>(m.v.size());
}

}  // namespace

Corpus generate_shapes_corpus(std::uint64_t seed, std::int32_t num_classes,
                              std::size_t images, std::size_t height,
                              std::size_t width, std::size_t min_shapes,
                              std::size_t max_shapes, double imbalance) {
  if (num_classes < 2) fail("need at least two classes");
  if (num_classes >= kIgnoreLabel) fail("too many classes");
  if (images == 0) fail("need at least one image");
  if (min_shapes == 0 || max_shapes < min_shapes) {
    fail("bad shapes-per-image range");
  }
  if (imbalance <= 0.0) fail("imbalance factor must be positive");
  const std::size_t K = static_cast<std::size_t>(num_classes);

  // Class composition of every image is decided up front so coverage can
  // be repaired before any rendering happens.
  Rng comp_rng(derive_seed(seed, 0xC0117051ull));
  std::vector<double> class_weight(K);
  for (std::size_t c = 0; c < K; ++c) {
    class_weight[c] = std::pow(imbalance, static_cast<double>(c));
  }
  auto draw_class = [&]() {
    double total = 0.0;
    for (double w : class_weight) total += w;
    double r = comp_rng.uniform(0.0, total);
    for (std::size_t c = 0; c < K; ++c) {
      r -= class_weight[c];
      if (r <= 0.0) return static_cast<std::int32_t>(c + 1);
    }
    return static_cast<std::int32_t>(K);
  };

  std::vector<std::vector<ShapeDraw>> comp(images);
  std::vector<double> budget_left(images, kAreaBudget);
  auto add_shape = [&](std::size_t img, std::int32_t cls) {
    const double f =
        std::min(budget_left[img],
                 comp_rng.uniform(kMinAreaFrac, kMaxAreaFrac));
    if (f < kMinAreaFrac) return false;
    comp[img].push_back({cls, f});
    budget_left[img] -= f;
    return true;
  };

  for (std::size_t i = 0; i < images; ++i) {
    // Round-robin first shape guarantees a floor on class coverage.
    const auto first = static_cast<std::int32_t>(i % K + 1);
    if (!add_shape(i, first)) {
      throw std::logic_error("area budget cannot fit one shape");
    }
    const std::size_t want =
        min_shapes + comp_rng.below(max_shapes - min_shapes + 1);
    for (std::size_t extra = 1; extra < want; ++extra) {
      std::int32_t cls = draw_class();
      bool duplicate = false;
      for (const ShapeDraw& s : comp[i]) duplicate |= s.cls == cls;
      if (duplicate || !add_shape(i, cls)) break;
    }
  }

  // Coverage repair: every class must land in at least ceil(N/K) images.
  const std::size_t quota = (images + K - 1) / K;
  for (std::size_t c = 0; c < K; ++c) {
    const auto cls = static_cast<std::int32_t>(c + 1);
    std::size_t count = 0;
    for (const auto& shapes : comp) {
      for (const ShapeDraw& s : shapes) {
        if (s.cls == cls) {
          ++count;
          break;
        }
      }
    }
    for (std::size_t i = 0; i < images && count < quota; ++i) {
      bool has = false;
      for (const ShapeDraw& s : comp[i]) has |= s.cls == cls;
      if (has || comp[i].size() >= max_shapes) continue;
      if (add_shape(i, cls)) ++count;
    }
    if (count < quota) {
      throw std::runtime_error("cannot satisfy class coverage quota");
    }
  }

  Corpus corpus;
  corpus.seed = seed;
  corpus.num_classes = num_classes;
  corpus.samples.resize(images);
  for (std::size_t i = 0; i < images; ++i) {
    LabeledSample& s = corpus.samples[i];
    char buf[32];
    std::snprintf(buf, sizeof(buf), "img_%05zu", i);
    s.id = buf;
    bool done = false;
    for (std::uint64_t attempt = 0; attempt < 20 && !done; ++attempt) {
      Rng rng(derive_seed(seed, i, attempt));
      try {
        render_image(comp[i], num_classes, height, width, rng, &s.image,
                     &s.labels);
      } catch (const std::runtime_error&) {
        if (attempt + 1 == 20) throw;
        continue;
      }
      const double bg = background_fraction(s.labels);
      done = bg >= 0.5 && bg <= 0.95;
      if (!done && attempt + 1 == 20) {
        throw std::runtime_error("could not reach target background range");
      }
    }
    std::set<std::int32_t> present;
    for (std::int32_t v : s.labels.v) {
      if (v != 0) present.insert(v);
    }
    s.classes_present.assign(present.begin(), present.end());
  }

  // Per-class 80/20 split over the round-robin slots keeps both splits
  // populated for every class.
  for (std::size_t c = 0; c < K; ++c) {
    std::size_t pos = 0;
    for (std::size_t i = c; i < images; i += K, ++pos) {
      corpus.samples[i].test_split = pos % 5 == 4;
    }
  }
  return corpus;
}

std::vector<LabeledSample> build_increment(const Corpus& corpus,
                                           const IncrementPlan& plan,
                                           std::size_t t) {
  plan.validate();
  if (t >= plan.num_steps()) fail("step index out of range");
  const auto current = plan.classes_of_step(t);
  std::unordered_set<std::int32_t> cur(current.begin(), current.end());
  std::unordered_set<std::int32_t> future;
  for (std::size_t s = t + 1; s < plan.num_steps(); ++s) {
    for (std::int32_t c : plan.classes_of_step(s)) future.insert(c);
  }

  std::vector<LabeledSample> out;
  for (const LabeledSample& sample : corpus.samples) {
    if (sample.test_split) continue;
    if (plan.setting == Setting::joint) {
      out.push_back(sample);
      continue;
    }
    bool has_current = false;
    bool has_future = false;
    for (std::int32_t c : sample.classes_present) {
      has_current |= cur.count(c) > 0;
      has_future |= future.count(c) > 0;
    }
    if (!has_current) continue;
    if (plan.setting != Setting::overlapped && has_future) continue;
    LabeledSample copy = sample;
    for (std::int32_t& v : copy.labels.v) {
      if (v != 0 && v != kIgnoreLabel && cur.count(v) == 0) v = 0;
    }
    copy.classes_present.clear();
    for (std::int32_t c : sample.classes_present) {
      if (cur.count(c)) copy.classes_present.push_back(c);
    }
    out.push_back(std::move(copy));
  }

  if (out.empty()) {
    throw std::runtime_error("empty training set for step " +
                             std::to_string(t));
  }
  if (plan.setting == Setting::pseudo_disjoint) {
    const std::size_t quota = plan.min_images_per_class.value_or(1);
    for (std::int32_t c : current) {
      std::size_t n = 0;
      for (const LabeledSample& s : out) {
        for (std::int32_t p : s.classes_present) n += p == c ? 1 : 0;
      }
      if (n < quota) {
        throw std::runtime_error(
            "pseudo_disjoint quota unsatisfied for class " +
            std::to_string(c) + ": " + std::to_string(n) + " < " +
            std::to_string(quota));
      }
    }
  }
  return out;
}

LabelMap remap_to_contiguous(
    const LabelMap& labels, const std::vector<std::int32_t>& learned_classes) {
  std::vector<std::int32_t> lut(256, 0);
  lut[static_cast<std::size_t>(kIgnoreLabel)] = kIgnoreLabel;
  for (std::size_t j = 0; j < learned_classes.size(); ++j) {
    const std::int32_t c = learned_classes[j];
    if (c <= 0 || c >= 256 || c == kIgnoreLabel) {
      fail("learned class id out of range: " + std::to_string(c));
    }
    lut[static_cast<std::size_t>(c)] = static_cast<std::int32_t>(j + 1);
  }
  LabelMap out;
  out.h = labels.h;
  out.w = labels.w;
  out.v.resize(labels.v.size());
  for (std::size_t i = 0; i < labels.v.size(); ++i) {
    const std::int32_t v = labels.v[i];
    if (v < 0 || v >= 256) fail("label id out of range");
    out.v[i] = lut[static_cast<std::size_t>(v)];
  }
  return out;
}

void save_corpus(const Corpus& corpus, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["seed"] = corpus.seed;
  manifest["num_classes"] = corpus.num_classes;
  nlohmann::json ids = nlohmann::json::array();
  std::map<std::string, std::size_t> histogram;
  for (const LabeledSample& s : corpus.samples) {
    save_tensor(dir + "/" + s.id + ".img.bin", s.image);
    save_i32(dir + "/" + s.id + ".lab.bin", s.labels.v,
             {s.labels.h, s.labels.w});
    nlohmann::json entry;
    entry["id"] = s.id;
    entry["split"] = s.test_split ? "test" : "train";
    entry["classes_present"] = s.classes_present;
    ids.push_back(entry);
    for (std::int32_t c : s.classes_present) {
      ++histogram[std::to_string(c)];
    }
  }
  manifest["image_ids"] = ids;
  manifest["class_histogram"] = histogram;
  std::ofstream out(dir + "/manifest.json", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write manifest in " + dir);
  out << manifest.dump(2) << "\n";
}

Corpus load_corpus(const std::string& dir) {
  std::ifstream in(dir + "/manifest.json");
  if (!in) throw std::runtime_error("no manifest in " + dir);
  nlohmann::json manifest = nlohmann::json::parse(in);
  Corpus corpus;
  corpus.seed = manifest.at("seed").get<std::uint64_t>();
  corpus.num_classes = manifest.at("num_classes").get<std::int32_t>();
  for (const auto& entry : manifest.at("image_ids")) {
    LabeledSample s;
    s.id = entry.at("id").get<std::string>();
    s.test_split = entry.at("split").get<std::string>() == "test";
    s.classes_present =
        entry.at("classes_present").get<std::vector<std::int32_t>>();
    s.image = load_tensor(dir + "/" + s.id + ".img.bin");
    auto [labels, dims] = load_i32(dir + "/" + s.id + ".lab.bin");
    if (dims.size() != 2) {
      throw std::runtime_error("label map for " + s.id + " is not 2-d");
    }
    s.labels.h = dims[0];
    s.labels.w = dims[1];
    s.labels.v = std::move(labels);
    corpus.samples.push_back(std::move(s));
  }
  return corpus;
}

}  // namespace edlseg
