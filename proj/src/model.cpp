#include "edlseg/model.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "edlseg/rng.hpp"
#include "json.hpp"

namespace edlseg {
namespace {

constexpr std::uint64_t kBackboneStream = 0xBACB01ull;
constexpr std::uint64_t kHeadStream = 0x4EAD5ull;
constexpr double kHeadInitStd = 0.01;

Tensor normal_tensor(Rng& rng, const Shape& shape, double stddev) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal() * stddev;
  return Tensor::from_data(shape, std::move(v), true);
}

Tensor conv_weight(Rng& rng, std::size_t out_ch, std::size_t in_ch,
                   std::size_t k) {
  double fan_in = static_cast<double>(in_ch * k * k);
  return normal_tensor(rng, {out_ch, in_ch, k, k}, std::sqrt(2.0 / fan_in));
}

}  // namespace

std::string to_string(HeadMode m) {
  switch (m) {
    case HeadMode::evidential_implicit_bg: return "evidential_implicit_bg";
    case HeadMode::softmax_explicit_bg: return "softmax_explicit_bg";
  }
  throw std::logic_error("bad head mode");
}

HeadMode head_mode_from_string(const std::string& s) {
  if (s == "evidential_implicit_bg") return HeadMode::evidential_implicit_bg;
  if (s == "softmax_explicit_bg") return HeadMode::softmax_explicit_bg;
  throw std::invalid_argument("unknown head mode: " + s);
}

SegModel::SegModel(HeadMode mode, BackboneConfig config, std::uint64_t seed)
    : head_mode_(mode), config_(config), seed_(seed) {
  if (config_.width1 == 0 || config_.width2 == 0)
    throw std::invalid_argument("backbone widths must be positive");
  Rng rng(derive_seed(seed_, kBackboneStream));
  conv1_.w = conv_weight(rng, config_.width1, 3, 3);
  conv1_.b = Tensor::zeros({config_.width1, 1, 1}, true);
  conv2_.w = conv_weight(rng, config_.width2, config_.width1, 3);
  conv2_.b = Tensor::zeros({config_.width2, 1, 1}, true);
  conv3_.w = conv_weight(rng, config_.width2, config_.width2, 3);
  conv3_.b = Tensor::zeros({config_.width2, 1, 1}, true);
}

void SegModel::expand_head(std::size_t new_classes) {
  if (new_classes == 0)
    throw std::invalid_argument("expand_head: class count must be positive");
  std::size_t channels = new_classes;
  if (head_mode_ == HeadMode::softmax_explicit_bg && heads_.empty())
    channels += 1;  // the base head also scores background
  Rng rng(derive_seed(seed_, kHeadStream, heads_.size()));
  Conv head;
  head.w = normal_tensor(rng, {channels, config_.width2, 1, 1}, kHeadInitStd);
  head.b = Tensor::zeros({channels, 1, 1}, true);
  heads_.push_back(std::move(head));
  increments_.push_back(new_classes);
}

std::size_t SegModel::total_classes() const {
  std::size_t k = 0;
  for (std::size_t inc : increments_) k += inc;
  return k;
}

std::size_t SegModel::score_channels() const {
  std::size_t k = total_classes();
  if (head_mode_ == HeadMode::softmax_explicit_bg && !heads_.empty()) k += 1;
  return k;
}

Tensor SegModel::forward(const Tensor& images) const {
  if (heads_.empty())
    throw std::logic_error("forward: model has no heads; call expand_head");
  const Shape& s = images.shape();
  if (s.size() != 4 || s[1] != 3)
    throw std::invalid_argument("forward expects images {N,3,H,W}");
  Tensor x = relu(add(conv2d(images, conv1_.w, 1, 1), conv1_.b));
  x = relu(add(conv2d(x, conv2_.w, 2, 1), conv2_.b));
  x = relu(add(conv2d(x, conv3_.w, 1, 1), conv3_.b));
  std::vector<Tensor> scores;
  scores.reserve(heads_.size());
  for (const Conv& head : heads_)
    scores.push_back(add(conv2d(x, head.w, 1, 0), head.b));
  Tensor joined = scores.size() == 1 ? scores[0] : concat(scores, 1);
  return bilinear_upsample(joined, s[2], s[3]);
}

EvidentialOutput SegModel::head_output(const Tensor& scores,
                                       RectifierKind kind) const {
  if (head_mode_ == HeadMode::softmax_explicit_bg)
    return explicit_softmax_output(scores);
  EvidentialOutput out = dirichlet_stats(rectify(scores, kind));
  factorize_probability(out);
  return out;
}

std::vector<Tensor> SegModel::parameters() {
  std::vector<Tensor> out;
  for (Conv* c : {&conv1_, &conv2_, &conv3_}) {
    out.push_back(c->w);
    out.push_back(c->b);
  }
  for (Conv& head : heads_) {
    out.push_back(head.w);
    out.push_back(head.b);
  }
  return out;
}

std::vector<std::pair<std::string, Tensor>> SegModel::named_parameters()
    const {
  std::vector<std::pair<std::string, Tensor>> out;
  const Conv* convs[] = {&conv1_, &conv2_, &conv3_};
  for (int i = 0; i < 3; ++i) {
    std::string base = "conv" + std::to_string(i + 1);
    out.emplace_back(base + ".weight", convs[i]->w);
    out.emplace_back(base + ".bias", convs[i]->b);
  }
  for (std::size_t t = 0; t < heads_.size(); ++t) {
    std::string base = "head" + std::to_string(t);
    out.emplace_back(base + ".weight", heads_[t].w);
    out.emplace_back(base + ".bias", heads_[t].b);
  }
  return out;
}

SegModel SegModel::clone(bool requires_grad) const {
  SegModel m;
  m.head_mode_ = head_mode_;
  m.config_ = config_;
  m.seed_ = seed_;
  m.increments_ = increments_;
  auto copy = [&](const Tensor& t) {
    auto v = t.values();
    return Tensor::from_data(t.shape(), {v.begin(), v.end()}, requires_grad);
  };
  auto copy_conv = [&](const Conv& c) { return Conv{copy(c.w), copy(c.b)}; };
  m.conv1_ = copy_conv(conv1_);
  m.conv2_ = copy_conv(conv2_);
  m.conv3_ = copy_conv(conv3_);
  m.heads_.reserve(heads_.size());
  for (const Conv& head : heads_) m.heads_.push_back(copy_conv(head));
  return m;
}

void save_checkpoint(const std::string& path, const SegModel& model,
                     const std::vector<std::int32_t>& class_order,
                     std::size_t step_index) {
  nlohmann::json header;
  header["head_mode"] = to_string(model.head_mode());
  header["increments"] = model.increments();
  header["class_order"] = class_order;
  header["step_index"] = step_index;
  header["seed"] = model.seed();
  header["backbone"] = {{"width1", model.backbone_config().width1},
                        {"width2", model.backbone_config().width2}};
  nlohmann::json params = nlohmann::json::array();
  for (const auto& [name, tensor] : model.named_parameters())
    params.push_back({{"name", name}, {"shape", tensor.shape()}});
  header["params"] = params;
  std::string header_str = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out.write("EDCK", 4);
  std::uint64_t len = header_str.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(header_str.data(), static_cast<std::streamsize>(len));
  for (const auto& [name, tensor] : model.named_parameters()) {
    const auto& v = tensor.values();
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

SegModel load_checkpoint_model(const std::string& path,
                               std::vector<std::int32_t>* class_order,
                               std::size_t* step_index) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "EDCK")
    throw std::runtime_error("not a checkpoint file: " + path);
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len == 0 || len > (1ull << 30))
    throw std::runtime_error("corrupt checkpoint header: " + path);
  std::string header_str(len, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("corrupt checkpoint header: " + path);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_str);
  } catch (const nlohmann::json::exception&) {
    throw std::runtime_error("corrupt checkpoint header: " + path);
  }
  SegModel model;
  try {
    model.head_mode_ = head_mode_from_string(header.at("head_mode"));
    model.config_.width1 = header.at("backbone").at("width1");
    model.config_.width2 = header.at("backbone").at("width2");
    model.seed_ = header.at("seed");
    model.increments_ =
        header.at("increments").get<std::vector<std::size_t>>();
    if (class_order)
      *class_order =
          header.at("class_order").get<std::vector<std::int32_t>>();
    if (step_index) *step_index = header.at("step_index");
  } catch (const nlohmann::json::exception&) {
    throw std::runtime_error("checkpoint header missing fields: " + path);
  }

  SegModel built(model.head_mode_, model.config_, model.seed_);
  for (std::size_t inc : model.increments_) built.expand_head(inc);

  const auto& params = header.at("params");
  auto named = built.named_parameters();
  if (params.size() != named.size())
    throw std::runtime_error("checkpoint parameter list mismatch: " + path);
  for (std::size_t i = 0; i < named.size(); ++i) {
    auto& [name, tensor] = named[i];
    if (params[i].at("name") != name ||
        params[i].at("shape").get<Shape>() != tensor.shape())
      throw std::runtime_error("checkpoint parameter mismatch at " + name);
    auto v = tensor.values_mut();
    in.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!in) throw std::runtime_error("checkpoint payload truncated: " + path);
    for (double x : v)
      if (!std::isfinite(x))
        throw std::runtime_error("checkpoint payload has non-finite values");
  }
  return built;
}

}  // namespace edlseg
