#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "edlseg/model.hpp"
#include "edlseg/protocol.hpp"
#include "edlseg/train.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace edlseg;

namespace {

std::string out_root() {
  const char* env = std::getenv("EDLSEG_OUT");
  return env && *env ? std::string(env) : std::string("edlseg_out");
}

std::string resolve_out(const std::string& flag_value,
                        const std::string& default_name) {
  if (!flag_value.empty()) return flag_value;
  return out_root() + "/" + default_name;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

json load_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return json::parse(in);
}

int require_artifacts(const std::vector<fs::path>& paths) {
  bool ok = true;
  for (const fs::path& p : paths)
    if (!fs::exists(p)) {
      std::cerr << "missing artifact: " << p.string() << "\n";
      ok = false;
    }
  return ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// configs

struct GenConfig {
  std::string out;
  std::uint64_t seed = 42;
  std::int32_t classes = 10;
  std::size_t images = 200;
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t min_shapes = 1;
  std::size_t max_shapes = 3;
  double imbalance = 1.0;
};

json gen_to_json(const GenConfig& c) {
  json j;
  j["command"] = "gen-data";
  j["out"] = c.out;
  j["seed"] = c.seed;
  j["classes"] = c.classes;
  j["images"] = c.images;
  j["height"] = c.height;
  j["width"] = c.width;
  j["min_shapes"] = c.min_shapes;
  j["max_shapes"] = c.max_shapes;
  j["imbalance"] = c.imbalance;
  return j;
}

void gen_overlay(GenConfig& c, const json& j) {
  if (j.contains("out")) c.out = j["out"].get<std::string>();
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("classes")) c.classes = j["classes"].get<std::int32_t>();
  if (j.contains("images")) c.images = j["images"].get<std::size_t>();
  if (j.contains("height")) c.height = j["height"].get<std::size_t>();
  if (j.contains("width")) c.width = j["width"].get<std::size_t>();
  if (j.contains("min_shapes"))
    c.min_shapes = j["min_shapes"].get<std::size_t>();
  if (j.contains("max_shapes"))
    c.max_shapes = j["max_shapes"].get<std::size_t>();
  if (j.contains("imbalance")) c.imbalance = j["imbalance"].get<double>();
}

struct RunConfig {
  std::string data;
  std::string out;
  std::string task = "5-1";
  std::string setting = "overlapped";
  std::string class_order;  // comma-separated ids, "" = natural order
  std::size_t min_images_per_class = 0;  // 0 = protocol default
  std::size_t crop = 0;                  // square, 0 = full image
  TrainConfig train;
};

json run_to_json(const RunConfig& c, const std::string& command) {
  json j;
  j["command"] = command;
  j["data"] = c.data;
  j["out"] = c.out;
  j["task"] = c.task;
  j["setting"] = c.setting;
  j["class_order"] = c.class_order;
  j["min_images_per_class"] = c.min_images_per_class;
  j["seed"] = c.train.seed;
  j["epochs"] = c.train.epochs;
  j["batch_size"] = c.train.batch_size;
  j["lr_base"] = c.train.lr_base;
  j["lr_incremental"] = c.train.lr_incremental;
  j["momentum"] = c.train.momentum;
  j["poly_power"] = c.train.poly_power;
  j["crop"] = c.crop;
  j["flip_prob"] = c.train.flip_prob;
  j["rectifier"] = to_string(c.train.rectifier);
  j["head_mode"] = to_string(c.train.head_mode);
  j["backbone_width1"] = c.train.backbone.width1;
  j["backbone_width2"] = c.train.backbone.width2;
  j["increment_balancing"] = c.train.increment_balancing;
  j["lambda_ce"] = c.train.loss.lambda_ce;
  j["lambda_kd"] = c.train.loss.lambda_kd;
  j["lambda_kd_fg"] = c.train.loss.lambda_kd_fg
                          ? json(*c.train.loss.lambda_kd_fg)
                          : json(nullptr);
  j["lambda_kd_u"] = c.train.loss.lambda_kd_u ? json(*c.train.loss.lambda_kd_u)
                                              : json(nullptr);
  j["fg_bg_balancing"] = c.train.loss.fg_bg_balancing;
  j["weight_clamp"] = c.train.loss.weight_clamp;
  j["epsilon"] = c.train.loss.epsilon;
  j["kd_fg_renormalize"] = c.train.loss.kd_fg_renormalize;
  return j;
}

void run_overlay(RunConfig& c, const json& j) {
  if (j.contains("data")) c.data = j["data"].get<std::string>();
  if (j.contains("out")) c.out = j["out"].get<std::string>();
  if (j.contains("task")) c.task = j["task"].get<std::string>();
  if (j.contains("setting")) c.setting = j["setting"].get<std::string>();
  if (j.contains("class_order"))
    c.class_order = j["class_order"].get<std::string>();
  if (j.contains("min_images_per_class"))
    c.min_images_per_class = j["min_images_per_class"].get<std::size_t>();
  if (j.contains("seed")) c.train.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("epochs")) c.train.epochs = j["epochs"].get<std::size_t>();
  if (j.contains("batch_size"))
    c.train.batch_size = j["batch_size"].get<std::size_t>();
  if (j.contains("lr_base")) c.train.lr_base = j["lr_base"].get<double>();
  if (j.contains("lr_incremental"))
    c.train.lr_incremental = j["lr_incremental"].get<double>();
  if (j.contains("momentum")) c.train.momentum = j["momentum"].get<double>();
  if (j.contains("poly_power"))
    c.train.poly_power = j["poly_power"].get<double>();
  if (j.contains("crop")) c.crop = j["crop"].get<std::size_t>();
  if (j.contains("flip_prob"))
    c.train.flip_prob = j["flip_prob"].get<double>();
  if (j.contains("rectifier"))
    c.train.rectifier = rectifier_from_string(j["rectifier"]);
  if (j.contains("head_mode"))
    c.train.head_mode = head_mode_from_string(j["head_mode"]);
  if (j.contains("backbone_width1"))
    c.train.backbone.width1 = j["backbone_width1"].get<std::size_t>();
  if (j.contains("backbone_width2"))
    c.train.backbone.width2 = j["backbone_width2"].get<std::size_t>();
  if (j.contains("increment_balancing"))
    c.train.increment_balancing = j["increment_balancing"].get<bool>();
  if (j.contains("lambda_ce"))
    c.train.loss.lambda_ce = j["lambda_ce"].get<double>();
  if (j.contains("lambda_kd"))
    c.train.loss.lambda_kd = j["lambda_kd"].get<double>();
  if (j.contains("lambda_kd_fg")) {
    if (j["lambda_kd_fg"].is_null())
      c.train.loss.lambda_kd_fg.reset();
    else
      c.train.loss.lambda_kd_fg = j["lambda_kd_fg"].get<double>();
  }
  if (j.contains("lambda_kd_u")) {
    if (j["lambda_kd_u"].is_null())
      c.train.loss.lambda_kd_u.reset();
    else
      c.train.loss.lambda_kd_u = j["lambda_kd_u"].get<double>();
  }
  if (j.contains("fg_bg_balancing"))
    c.train.loss.fg_bg_balancing = j["fg_bg_balancing"].get<bool>();
  if (j.contains("weight_clamp"))
    c.train.loss.weight_clamp = j["weight_clamp"].get<double>();
  if (j.contains("epsilon")) c.train.loss.epsilon = j["epsilon"].get<double>();
  if (j.contains("kd_fg_renormalize"))
    c.train.loss.kd_fg_renormalize = j["kd_fg_renormalize"].get<bool>();
}

std::vector<std::int32_t> parse_class_order(const std::string& csv) {
  std::vector<std::int32_t> order;
  std::string token;
  for (char ch : csv + ",") {
    if (ch == ',') {
      if (!token.empty()) order.push_back(std::stoi(token));
      token.clear();
    } else if (!std::isspace(static_cast<unsigned char>(ch))) {
      token += ch;
    }
  }
  return order;
}

IncrementPlan plan_for(const RunConfig& cfg, std::int32_t num_classes) {
  IncrementPlan plan =
      make_plan(cfg.task, num_classes, setting_from_string(cfg.setting));
  if (!cfg.class_order.empty()) {
    std::vector<std::int32_t> order = parse_class_order(cfg.class_order);
    if (order.size() != static_cast<std::size_t>(num_classes))
      throw std::invalid_argument(
          "class order must list every foreground class exactly once");
    std::vector<bool> seen(static_cast<std::size_t>(num_classes) + 1, false);
    for (std::int32_t id : order) {
      if (id < 1 || id > num_classes || seen[static_cast<std::size_t>(id)])
        throw std::invalid_argument(
            "class order must be a permutation of 1.." +
            std::to_string(num_classes));
      seen[static_cast<std::size_t>(id)] = true;
    }
    plan.class_order = order;
  }
  if (cfg.min_images_per_class > 0)
    plan.min_images_per_class = cfg.min_images_per_class;
  plan.validate();
  return plan;
}

std::string fmt_metric(double v) {
  if (std::isnan(v)) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

void print_report_table(const std::vector<MetricsReport>& reports) {
  std::printf("%-5s %-9s %-9s %-9s %-9s\n", "step", "base", "new", "all",
              "inc_miou");
  for (const MetricsReport& r : reports)
    std::printf("%-5zu %-9s %-9s %-9s %-9s\n", r.step_index,
                fmt_metric(r.miou_base).c_str(), fmt_metric(r.miou_new).c_str(),
                fmt_metric(r.miou_all).c_str(),
                fmt_metric(r.inc_miou).c_str());
}

// ---------------------------------------------------------------------------
// subcommands

int cmd_gen_data(const GenConfig& cfg) {
  const std::string out = resolve_out(
      cfg.out, "corpus_seed" + std::to_string(cfg.seed) + "_k" +
                   std::to_string(cfg.classes));
  Corpus corpus =
      generate_shapes_corpus(cfg.seed, cfg.classes, cfg.images, cfg.height,
                             cfg.width, cfg.min_shapes, cfg.max_shapes,
                             cfg.imbalance);
  save_corpus(corpus, out);
  GenConfig frozen = cfg;
  frozen.out = out;
  write_text(fs::path(out) / "resolved_config.json",
             gen_to_json(frozen).dump(2) + "\n");

  std::map<std::int32_t, std::size_t> histogram;
  std::size_t train_n = 0, test_n = 0;
  for (const LabeledSample& s : corpus.samples) {
    (s.test_split ? test_n : train_n) += 1;
    for (std::int32_t c : s.classes_present) ++histogram[c];
  }
  std::printf("corpus: %zu images (%zu train / %zu test), %d classes -> %s\n",
              corpus.samples.size(), train_n, test_n, corpus.num_classes,
              out.c_str());
  for (const auto& [cls, count] : histogram)
    std::printf("  class %2d: present in %zu images\n", cls, count);
  return require_artifacts({fs::path(out) / "manifest.json",
                            fs::path(out) / "resolved_config.json"});
}

int cmd_train(const RunConfig& cfg) {
  if (cfg.data.empty())
    throw std::invalid_argument("--data (corpus directory) is required");
  Corpus corpus = load_corpus(cfg.data);
  IncrementPlan plan = plan_for(cfg, corpus.num_classes);

  RunConfig frozen = cfg;
  frozen.out = resolve_out(
      cfg.out, "run_" + cfg.task + "_" + cfg.setting + "_seed" +
                   std::to_string(cfg.train.seed));
  frozen.train.crop_h = frozen.crop;
  frozen.train.crop_w = frozen.crop;
  frozen.train.validate();
  fs::create_directories(frozen.out);
  write_text(fs::path(frozen.out) / "resolved_config.json",
             run_to_json(frozen, "train").dump(2) + "\n");

  RunResult result = run_plan(corpus, plan, frozen.train, frozen.out);
  print_report_table(result.reports);
  std::printf("artifacts -> %s\n", frozen.out.c_str());

  std::vector<fs::path> wanted = {
      fs::path(frozen.out) / "resolved_config.json",
      fs::path(frozen.out) / "final_report.json",
      fs::path(frozen.out) / "summary.csv",
      fs::path(frozen.out) / "train_log.csv"};
  for (std::size_t t = 0; t < plan.num_steps(); ++t) {
    wanted.push_back(fs::path(frozen.out) /
                     ("step_" + std::to_string(t) + ".ckpt"));
    wanted.push_back(fs::path(frozen.out) /
                     ("report_step_" + std::to_string(t) + ".json"));
  }
  return require_artifacts(wanted);
}

int cmd_eval(const std::string& checkpoint, const std::string& data,
             bool balancing, const std::string& rectifier,
             std::size_t batch_size, const std::string& out) {
  Corpus corpus = load_corpus(data);
  std::vector<std::int32_t> order;
  std::size_t step = 0;
  SegModel model = load_checkpoint_model(checkpoint, &order, &step);

  std::size_t learned = 0;
  for (std::size_t k : model.increments()) learned += k;
  if (order.size() != learned)
    throw std::runtime_error(
        "checkpoint class order disagrees with its heads");
  for (std::int32_t id : order)
    if (id < 1 || id > corpus.num_classes)
      throw std::runtime_error(
          "checkpoint class order does not match the corpus");

  IncrementPlan plan;
  plan.setting = Setting::overlapped;  // not used by evaluation aggregates
  plan.class_order = order;
  plan.increment_sizes = model.increments();
  plan.validate();

  TrainConfig tc;
  tc.head_mode = model.head_mode();
  tc.rectifier = rectifier_from_string(rectifier);
  tc.increment_balancing = balancing;
  tc.batch_size = batch_size == 0 ? 8 : batch_size;

  MetricsReport report = evaluate_model(model, corpus, plan, step, tc);
  std::string text = report_to_json(report) + "\n";
  std::fputs(text.c_str(), stdout);
  if (!out.empty()) {
    fs::create_directories(out);
    write_text(fs::path(out) / "eval_report.json", text);
    return require_artifacts({fs::path(out) / "eval_report.json"});
  }
  return 0;
}

int cmd_ablate(const RunConfig& cfg, const std::string& grid) {
  if (cfg.data.empty())
    throw std::invalid_argument("--data (corpus directory) is required");
  struct Cell {
    std::string name;
    void (*mutate)(RunConfig&);
  };
  std::vector<Cell> cells;
  if (grid == "rectifier") {
    cells = {{"rectifier_relu",
              [](RunConfig& c) { c.train.rectifier = RectifierKind::relu; }},
             {"rectifier_exp",
              [](RunConfig& c) { c.train.rectifier = RectifierKind::exp; }},
             {"rectifier_exp_sigmoid", [](RunConfig& c) {
                c.train.rectifier = RectifierKind::exp_sigmoid;
              }}};
  } else if (grid == "head-mode") {
    cells = {{"head_implicit",
              [](RunConfig& c) {
                c.train.head_mode = HeadMode::evidential_implicit_bg;
              }},
             {"head_explicit_softmax", [](RunConfig& c) {
                c.train.head_mode = HeadMode::softmax_explicit_bg;
              }}};
  } else if (grid == "balancing") {
    cells = {{"balancing_off",
              [](RunConfig& c) {
                c.train.increment_balancing = false;
                c.train.loss.fg_bg_balancing = false;
              }},
             {"balancing_on", [](RunConfig& c) {
                c.train.increment_balancing = true;
                c.train.loss.fg_bg_balancing = true;
              }}};
  } else if (grid == "lambda-kd") {
    cells = {{"lambda_kd_0",
              [](RunConfig& c) { c.train.loss.lambda_kd = 0.0; }},
             {"lambda_kd_10",
              [](RunConfig& c) { c.train.loss.lambda_kd = 10.0; }}};
  } else {
    throw std::invalid_argument(
        "unknown grid '" + grid +
        "' (expected rectifier, head-mode, balancing, or lambda-kd)");
  }

  Corpus corpus = load_corpus(cfg.data);
  const std::string out = resolve_out(
      cfg.out, "ablate_" + grid + "_" + cfg.task + "_" + cfg.setting +
                   "_seed" + std::to_string(cfg.train.seed));
  fs::create_directories(out);
  {
    json j = run_to_json(cfg, "ablate");
    j["out"] = out;
    j["grid"] = grid;
    write_text(fs::path(out) / "resolved_config.json", j.dump(2) + "\n");
  }

  std::string csv = "cell," + report_csv_header() + "\n";
  bool any_failed = false;
  for (const Cell& cell : cells) {
    RunConfig c = cfg;
    cell.mutate(c);
    c.out = out + "/" + cell.name;
    c.train.crop_h = c.crop;
    c.train.crop_w = c.crop;
    try {
      IncrementPlan plan = plan_for(c, corpus.num_classes);
      c.train.validate();
      fs::create_directories(c.out);
      write_text(fs::path(c.out) / "resolved_config.json",
                 run_to_json(c, "train").dump(2) + "\n");
      RunResult result = run_plan(corpus, plan, c.train, c.out);
      csv += cell.name + "," + report_csv_row(result.reports.back()) + "\n";
      std::printf("[ablate] %s done\n", cell.name.c_str());
    } catch (const std::exception& e) {
      any_failed = true;
      csv += cell.name + ",error,n/a,n/a,n/a,n/a\n";
      std::fprintf(stderr, "[ablate] %s failed: %s\n", cell.name.c_str(),
                   e.what());
    }
  }
  write_text(fs::path(out) / "ablation.csv", csv);
  std::fputs(csv.c_str(), stdout);
  int missing = require_artifacts({fs::path(out) / "ablation.csv"});
  return any_failed ? 1 : missing;
}

int cmd_report(const std::string& run_dir) {
  fs::path path = fs::path(run_dir) / "final_report.json";
  if (!fs::exists(path)) {
    std::cerr << "missing artifact: " << path.string() << "\n";
    return 1;
  }
  json j = load_json(path);
  std::vector<MetricsReport> reports;
  for (const json& s : j.at("steps")) {
    MetricsReport r;
    r.step_index = s.at("step").get<std::size_t>();
    auto field = [&](const char* name) {
      return s.at(name).is_null() ? std::nan("") : s.at(name).get<double>();
    };
    r.miou_base = field("base");
    r.miou_new = field("new");
    r.miou_all = field("all");
    r.inc_miou = field("inc_miou");
    reports.push_back(r);
  }
  std::printf(
      "run: %s (setting=%s, seed=%llu)\n", run_dir.c_str(),
      j.at("setting").get<std::string>().c_str(),
      static_cast<unsigned long long>(j.at("seed").get<std::uint64_t>()));
  print_report_table(reports);
  return 0;
}

// ---------------------------------------------------------------------------
// flag staging: defaults < json config < explicitly passed flags

struct RunStage {
  RunConfig flags;
  std::string config_path;
  std::string rectifier = "exp_sigmoid";
  std::string head_mode = "evidential_implicit_bg";
  double lambda_kd_fg = 0.0;
  double lambda_kd_u = 0.0;
};

void add_run_flags(CLI::App* sub, RunStage& st) {
  sub->add_option("--config", st.config_path, "JSON config file");
  sub->add_option("--data", st.flags.data, "corpus directory");
  sub->add_option("--out", st.flags.out, "run directory");
  sub->add_option("--task", st.flags.task, "plan, e.g. 5-1, 5-5, joint");
  sub->add_option("--setting", st.flags.setting,
                  "overlapped | disjoint | pseudo_disjoint | joint");
  sub->add_option("--class-order", st.flags.class_order,
                  "comma-separated foreground ids");
  sub->add_option("--min-images-per-class", st.flags.min_images_per_class,
                  "pseudo_disjoint quota");
  sub->add_option("--seed", st.flags.train.seed, "rng seed (default 42)");
  sub->add_option("--epochs", st.flags.train.epochs, "epochs per step");
  sub->add_option("--batch", st.flags.train.batch_size, "batch size");
  sub->add_option("--lr-base", st.flags.train.lr_base, "base-step lr");
  sub->add_option("--lr-inc", st.flags.train.lr_incremental,
                  "incremental lr");
  sub->add_option("--momentum", st.flags.train.momentum, "sgd momentum");
  sub->add_option("--poly-power", st.flags.train.poly_power,
                  "lr decay power");
  sub->add_option("--crop", st.flags.crop, "square crop (0 = full image)");
  sub->add_option("--flip-prob", st.flags.train.flip_prob,
                  "hflip probability");
  sub->add_option("--rectifier", st.rectifier, "relu | exp | exp_sigmoid");
  sub->add_option("--head-mode", st.head_mode,
                  "evidential_implicit_bg | softmax_explicit_bg");
  sub->add_option("--backbone-width1", st.flags.train.backbone.width1,
                  "stage-1 channels");
  sub->add_option("--backbone-width2", st.flags.train.backbone.width2,
                  "stage-2 channels");
  sub->add_option("--increment-balancing",
                  st.flags.train.increment_balancing,
                  "scale dominant new evidence at inference (0|1)");
  sub->add_option("--lambda-ce", st.flags.train.loss.lambda_ce, "ce weight");
  sub->add_option("--lambda-kd", st.flags.train.loss.lambda_kd,
                  "distillation weight");
  sub->add_option("--lambda-kd-fg", st.lambda_kd_fg,
                  "override for the class distillation term");
  sub->add_option("--lambda-kd-u", st.lambda_kd_u,
                  "override for the uncertainty distillation term");
  sub->add_option("--fg-bg-balancing", st.flags.train.loss.fg_bg_balancing,
                  "pixel weights against bg dominance (0|1)");
  sub->add_option("--weight-clamp", st.flags.train.loss.weight_clamp,
                  "fg/bg weight cap");
  sub->add_option("--epsilon", st.flags.train.loss.epsilon, "log clamp");
  sub->add_option("--kd-renormalize",
                  st.flags.train.loss.kd_fg_renormalize,
                  "renormalize the student prefix in distillation (0|1)");
}

RunConfig resolve_run(CLI::App* sub, const RunStage& st) {
  RunConfig cfg;
  if (!st.config_path.empty()) run_overlay(cfg, load_json(st.config_path));
  if (sub->count("--data")) cfg.data = st.flags.data;
  if (sub->count("--out")) cfg.out = st.flags.out;
  if (sub->count("--task")) cfg.task = st.flags.task;
  if (sub->count("--setting")) cfg.setting = st.flags.setting;
  if (sub->count("--class-order")) cfg.class_order = st.flags.class_order;
  if (sub->count("--min-images-per-class"))
    cfg.min_images_per_class = st.flags.min_images_per_class;
  if (sub->count("--seed")) cfg.train.seed = st.flags.train.seed;
  if (sub->count("--epochs")) cfg.train.epochs = st.flags.train.epochs;
  if (sub->count("--batch"))
    cfg.train.batch_size = st.flags.train.batch_size;
  if (sub->count("--lr-base")) cfg.train.lr_base = st.flags.train.lr_base;
  if (sub->count("--lr-inc"))
    cfg.train.lr_incremental = st.flags.train.lr_incremental;
  if (sub->count("--momentum")) cfg.train.momentum = st.flags.train.momentum;
  if (sub->count("--poly-power"))
    cfg.train.poly_power = st.flags.train.poly_power;
  if (sub->count("--crop")) cfg.crop = st.flags.crop;
  if (sub->count("--flip-prob"))
    cfg.train.flip_prob = st.flags.train.flip_prob;
  if (sub->count("--rectifier"))
    cfg.train.rectifier = rectifier_from_string(st.rectifier);
  if (sub->count("--head-mode"))
    cfg.train.head_mode = head_mode_from_string(st.head_mode);
  if (sub->count("--backbone-width1"))
    cfg.train.backbone.width1 = st.flags.train.backbone.width1;
  if (sub->count("--backbone-width2"))
    cfg.train.backbone.width2 = st.flags.train.backbone.width2;
  if (sub->count("--increment-balancing"))
    cfg.train.increment_balancing = st.flags.train.increment_balancing;
  if (sub->count("--lambda-ce"))
    cfg.train.loss.lambda_ce = st.flags.train.loss.lambda_ce;
  if (sub->count("--lambda-kd"))
    cfg.train.loss.lambda_kd = st.flags.train.loss.lambda_kd;
  if (sub->count("--lambda-kd-fg"))
    cfg.train.loss.lambda_kd_fg = st.lambda_kd_fg;
  if (sub->count("--lambda-kd-u"))
    cfg.train.loss.lambda_kd_u = st.lambda_kd_u;
  if (sub->count("--fg-bg-balancing"))
    cfg.train.loss.fg_bg_balancing = st.flags.train.loss.fg_bg_balancing;
  if (sub->count("--weight-clamp"))
    cfg.train.loss.weight_clamp = st.flags.train.loss.weight_clamp;
  if (sub->count("--epsilon"))
    cfg.train.loss.epsilon = st.flags.train.loss.epsilon;
  if (sub->count("--kd-renormalize"))
    cfg.train.loss.kd_fg_renormalize = st.flags.train.loss.kd_fg_renormalize;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"evidential class-incremental segmentation driver"};
  app.require_subcommand(1);

  GenConfig gen_flags;
  std::string gen_config_path;
  std::size_t gen_size = 0;
  CLI::App* gen = app.add_subcommand("gen-data", "generate a shapes corpus");
  gen->add_option("--config", gen_config_path, "JSON config file");
  gen->add_option("--out", gen_flags.out, "corpus directory");
  gen->add_option("--seed", gen_flags.seed, "rng seed (default 42)");
  gen->add_option("--classes", gen_flags.classes, "foreground classes");
  gen->add_option("--images", gen_flags.images, "corpus size");
  gen->add_option("--size", gen_size, "square image extent");
  gen->add_option("--height", gen_flags.height, "image height");
  gen->add_option("--width", gen_flags.width, "image width");
  gen->add_option("--min-shapes", gen_flags.min_shapes, "min shapes/image");
  gen->add_option("--max-shapes", gen_flags.max_shapes, "max shapes/image");
  gen->add_option("--imbalance", gen_flags.imbalance,
                  "geometric skew of class frequency (1 = uniform)");

  RunStage train_stage;
  CLI::App* train = app.add_subcommand("train", "run an incremental plan");
  add_run_flags(train, train_stage);

  RunStage ablate_stage;
  std::string grid = "rectifier";
  CLI::App* ablate = app.add_subcommand("ablate", "run a comparison grid");
  add_run_flags(ablate, ablate_stage);
  ablate->add_option("--grid", grid,
                     "rectifier | head-mode | balancing | lambda-kd");

  std::string eval_checkpoint, eval_data, eval_out;
  std::string eval_rectifier = "exp_sigmoid";
  bool eval_balancing = false;
  std::size_t eval_batch = 8;
  CLI::App* eval = app.add_subcommand("eval", "score a checkpoint");
  eval->add_option("--checkpoint", eval_checkpoint, "checkpoint file")
      ->required();
  eval->add_option("--data", eval_data, "corpus directory")->required();
  eval->add_option("--balancing", eval_balancing,
                   "apply increment balancing (0|1)");
  eval->add_option("--rectifier", eval_rectifier, "relu | exp | exp_sigmoid");
  eval->add_option("--batch", eval_batch, "evaluation batch size");
  eval->add_option("--out", eval_out, "where to write eval_report.json");

  std::string report_dir;
  CLI::App* report = app.add_subcommand("report", "print a run's summary");
  report->add_option("--run", report_dir, "run directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      GenConfig cfg;
      if (!gen_config_path.empty())
        gen_overlay(cfg, load_json(gen_config_path));
      if (gen->count("--out")) cfg.out = gen_flags.out;
      if (gen->count("--seed")) cfg.seed = gen_flags.seed;
      if (gen->count("--classes")) cfg.classes = gen_flags.classes;
      if (gen->count("--images")) cfg.images = gen_flags.images;
      if (gen->count("--height")) cfg.height = gen_flags.height;
      if (gen->count("--width")) cfg.width = gen_flags.width;
      if (gen->count("--size")) {
        cfg.height = gen_size;
        cfg.width = gen_size;
      }
      if (gen->count("--min-shapes")) cfg.min_shapes = gen_flags.min_shapes;
      if (gen->count("--max-shapes")) cfg.max_shapes = gen_flags.max_shapes;
      if (gen->count("--imbalance")) cfg.imbalance = gen_flags.imbalance;
      return cmd_gen_data(cfg);
    }
    if (train->parsed()) return cmd_train(resolve_run(train, train_stage));
    if (ablate->parsed())
      return cmd_ablate(resolve_run(ablate, ablate_stage), grid);
    if (eval->parsed())
      return cmd_eval(eval_checkpoint, eval_data, eval_balancing,
                      eval_rectifier, eval_batch, eval_out);
    if (report->parsed()) return cmd_report(report_dir);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
