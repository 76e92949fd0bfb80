// Command-line surface for the few-shot shape detector: dataset generation,
// two-stage training, evaluation, inference, reporting, and the invariant
// selftest. Exit codes: 0 success, 1 usage error, 2 runtime failure.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "CLI11.hpp"
#include "json.hpp"
#include "metadetr/config.hpp"
#include "metadetr/report.hpp"
#include "metadetr/selftest.hpp"

namespace fs = std::filesystem;
using namespace metadetr;

namespace {

// Sentinel lock for a run directory; one command per run dir at a time.
class RunLock {
 public:
  explicit RunLock(const std::string& run_dir) : path_(run_dir + "/.lock") {
    fs::create_directories(run_dir);
    if (fs::exists(path_))
      throw std::runtime_error("run directory is locked (stale? remove " + path_ + ")");
    std::ofstream(path_) << "locked\n";
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }

 private:
  std::string path_;
};

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;
  int64_t seed = -1;
};

Config make_config(const CommonOpts& opts) {
  Config cfg = opts.config_path.empty() ? Config::defaults() : Config::load(opts.config_path);
  cfg.apply_env();
  if (opts.seed >= 0) cfg.set("seed", std::to_string(opts.seed));
  for (const auto& kv : opts.overrides) cfg.apply_override(kv);
  return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "key=value config file");
  cmd->add_option("--set", opts.overrides, "override a config key (key=value, repeatable)");
  cmd->add_option("--seed", opts.seed, "override the config seed");
}

std::set<int> as_set(const std::vector<int>& v) { return {v.begin(), v.end()}; }

ClassProtoBank bank_for_eval(const Model& model, const Dataset& train,
                             const std::vector<int>& classes, int shots, uint64_t seed) {
  Dataset pool;
  pool.split = train.split;
  // Deterministic support pool: `shots` instances per class.
  Rng rng(seed);
  std::map<int, std::vector<ObjectAnn>> kept;
  for (int cid : classes) {
    auto it = train.instances_by_class.find(cid);
    check(it != train.instances_by_class.end(),
          "eval: class " + std::to_string(cid) + " has no instances in the support pool");
    auto insts = it->second;
    rng.shuffle(insts);
    int take = std::min<int>(shots, static_cast<int>(insts.size()));
    for (int i = 0; i < take; ++i) {
      auto [img, obj] = insts[i];
      kept[img].push_back(train.images[img].objects[obj]);
    }
  }
  for (auto& [img_idx, objects] : kept) {
    AnnotatedImage copy = train.images[img_idx];
    copy.objects = objects;
    pool.images.push_back(std::move(copy));
  }
  pool.rebuild_index();
  return precompute_prototypes(model, pool, classes);
}

int cmd_gen_data(const CommonOpts& opts, const std::string& out_dir) {
  Config cfg = make_config(opts);
  GenStats stats = generate_synthetic(cfg.synthetic_config(), cfg.get_u64("seed"), out_dir);
  std::printf("generated %d images, %d instances (min box containment %.3f) in %s\n",
              stats.images, stats.instances, stats.min_box_pixel_containment, out_dir.c_str());
  return 0;
}

int cmd_train_base(const CommonOpts& opts, const std::string& data_dir,
                   const std::string& run_dir) {
  Config cfg = make_config(opts);
  RunLock lock(run_dir);
  Dataset train = Dataset::load(data_dir + "/train");
  Dataset base_train = train.filter_classes(as_set(train.split.base_classes));
  Model model = Model::build(cfg.model_config());
  TrainConfig tc = cfg.train_config(TrainConfig::Stage::Base);

  auto t0 = std::chrono::steady_clock::now();
  TrainStats stats = train_stage(model, base_train, tc, run_dir);
  double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
  std::printf("base training: %d steps, loss %.4f -> %.4f, %.1f min\n", stats.steps,
              stats.first_loss, stats.last_loss, minutes);

  Dataset val = Dataset::load(data_dir + "/val");
  Dataset base_val = val.filter_classes(as_set(val.split.base_classes));
  ClassProtoBank bank = bank_for_eval(model, base_train, train.split.base_classes,
                                      cfg.get_int("eval_shots"), cfg.get_u64("seed"));
  EvalResult res = evaluate(model, bank, base_val, {0.5, 0.75}, cfg.get_double("score_thresh"));
  fs::create_directories(run_dir + "/results");
  write_eval_csv(run_dir + "/results/eval.csv", res);
  write_ap_bars_svg(run_dir + "/results/ap_bars.svg", res);
  std::printf("base mAP@0.5 = %.4f  mAP@0.75 = %.4f\n", res.map_at("base", 0.5),
              res.map_at("base", 0.75));
  return 0;
}

int cmd_finetune(const CommonOpts& opts, const std::string& data_dir,
                 const std::string& base_ckpt, const std::string& run_dir) {
  Config cfg = make_config(opts);
  RunLock lock(run_dir);
  Dataset train = Dataset::load(data_dir + "/train");
  Dataset val = Dataset::load(data_dir + "/val");
  TrainConfig tc = cfg.train_config(TrainConfig::Stage::Finetune);
  int k = cfg.get_int("k");
  int runs = cfg.get_int("runs");

  MultiRunResult result = multi_run(cfg.model_config(), base_ckpt, train, val, k, runs,
                                    cfg.get_u64("seed"), tc, run_dir);
  fs::create_directories(run_dir + "/results");
  write_results_table(run_dir + "/results/table.csv", result, k);
  write_ap_bars_svg(run_dir + "/results/ap_bars.svg", result.runs.back().after);
  std::printf("%d-shot over %d runs: novel mAP@0.5 %.4f +- %.4f (before %.4f), base %.4f\n", k,
              runs, result.mean("novel", 0.5), result.stddev("novel", 0.5),
              result.mean("novel", 0.5, false), result.mean("base", 0.5));
  return 0;
}

int cmd_eval(const CommonOpts& opts, const std::string& data_dir, const std::string& ckpt,
             const std::string& run_dir, double threshold, const std::string& protos_in,
             const std::string& protos_out) {
  Config cfg = make_config(opts);
  RunLock lock(run_dir);
  Dataset train = Dataset::load(data_dir + "/train");
  Dataset val = Dataset::load(data_dir + "/val");
  Model model = Model::build(cfg.model_config());
  model.store.load(ckpt);

  ClassProtoBank bank;
  if (!protos_in.empty()) {
    bank = ClassProtoBank::load(protos_in, model.cfg.d);
  } else {
    std::vector<int> classes = train.class_ids();
    bank = bank_for_eval(model, train, classes, cfg.get_int("eval_shots"), cfg.get_u64("seed"));
  }
  if (!protos_out.empty()) bank.save(protos_out);

  EvalResult res = evaluate(model, bank, val, {0.5, 0.75}, threshold);
  fs::create_directories(run_dir + "/results");
  write_eval_csv(run_dir + "/results/eval.csv", res);
  write_ap_bars_svg(run_dir + "/results/ap_bars.svg", res);
  std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>> curves;
  for (const auto& group : {"base", "novel"}) {
    if (!res.map_groups.count(group)) continue;
    std::printf("%s mAP@0.5 = %.4f  mAP@0.75 = %.4f\n", group, res.map_at(group, 0.5),
                res.map_at(group, 0.75));
  }
  if (res.map_groups.count("all"))
    std::printf("all mAP@0.5 = %.4f\n", res.map_at("all", 0.5));
  return 0;
}

int cmd_infer(const CommonOpts& opts, const std::string& data_dir, const std::string& ckpt,
              const std::string& protos_in, const std::string& run_dir, double threshold,
              bool overlay, int limit) {
  Config cfg = make_config(opts);
  RunLock lock(run_dir);
  Dataset val = Dataset::load(data_dir + "/val");
  Model model = Model::build(cfg.model_config());
  model.store.load(ckpt);

  ClassProtoBank bank;
  if (!protos_in.empty()) {
    bank = ClassProtoBank::load(protos_in, model.cfg.d);
  } else {
    Dataset train = Dataset::load(data_dir + "/train");
    bank = bank_for_eval(model, train, train.class_ids(), cfg.get_int("eval_shots"),
                         cfg.get_u64("seed"));
  }

  std::ofstream out(run_dir + "/detections.jsonl");
  if (overlay) fs::create_directories(run_dir + "/overlays");
  int count = 0;
  for (const auto& img : val.images) {
    if (limit > 0 && count >= limit) break;
    ++count;
    auto dets = infer_detections(model, img.image, bank, threshold);
    for (const auto& d : dets) {
      nlohmann::ordered_json j;
      j["image_id"] = img.id;
      j["class_id"] = d.class_id;
      j["score"] = d.score;
      j["box"] = {d.box.cx, d.box.cy, d.box.w, d.box.h};
      out << j.dump() << "\n";
    }
    if (overlay) {
      Image canvas = img.image;
      std::vector<char> gt_matched(img.objects.size(), 0);
      for (const auto& d : dets) {
        bool correct = false;
        for (size_t g = 0; g < img.objects.size(); ++g) {
          if (img.objects[g].class_id == d.class_id && !gt_matched[g] &&
              iou(img.objects[g].box, d.box) >= 0.5) {
            gt_matched[g] = 1;
            correct = true;
            break;
          }
        }
        if (correct)
          draw_box(canvas, d.box, 255, 255, 255);  // white: correct detection
        else
          draw_box(canvas, d.box, 230, 30, 30);  // red solid: false positive
      }
      for (size_t g = 0; g < img.objects.size(); ++g)
        if (!gt_matched[g])
          draw_box(canvas, img.objects[g].box, 230, 30, 30, /*dashed=*/true);  // missed
      char name[64];
      std::snprintf(name, sizeof(name), "overlays/%06d.png", img.id);
      write_png(run_dir + "/" + name, canvas);
    }
  }
  std::printf("wrote detections for %d images to %s/detections.jsonl\n", count, run_dir.c_str());
  return 0;
}

int cmd_selftest() {
  auto results = run_selftest();
  bool all_pass = true;
  for (const auto& r : results) {
    std::printf("%s %-18s %s\n", r.pass ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str());
    all_pass = all_pass && r.pass;
  }
  return all_pass ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"metadetr: few-shot shape detection with correlational aggregation"};
  app.require_subcommand(1);

  CommonOpts opts;
  std::string out_dir, data_dir, run_dir, ckpt, protos_in, protos_out;
  double threshold = 0.5;
  bool overlay = false;
  int limit = 0;
  std::vector<std::string> report_dirs;
  std::string report_out = "combined.csv";

  auto* gen = app.add_subcommand("gen-data", "render the synthetic shapes corpus");
  add_common(gen, opts);
  gen->add_option("--out", out_dir, "output dataset root")->required();

  auto* tb = app.add_subcommand("train-base", "base training on the base classes");
  add_common(tb, opts);
  tb->add_option("--data", data_dir, "dataset root (with train/ and val/)")->required();
  tb->add_option("--run", run_dir, "run directory for checkpoints/logs/results")->required();

  auto* ft = app.add_subcommand("finetune", "K-shot fine-tuning over multiple runs");
  add_common(ft, opts);
  ft->add_option("--data", data_dir, "dataset root")->required();
  ft->add_option("--base", ckpt, "base-training checkpoint")->required();
  ft->add_option("--run", run_dir, "run directory")->required();

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the validation split");
  add_common(ev, opts);
  ev->add_option("--data", data_dir, "dataset root")->required();
  ev->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  ev->add_option("--run", run_dir, "run directory")->required();
  ev->add_option("--threshold", threshold, "detection score threshold")->default_val(0.05);
  ev->add_option("--protos-in", protos_in, "load precomputed prototypes");
  ev->add_option("--protos-out", protos_out, "save computed prototypes");

  auto* in = app.add_subcommand("infer", "run detection and emit JSON-lines (and overlays)");
  add_common(in, opts);
  in->add_option("--data", data_dir, "dataset root")->required();
  in->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  in->add_option("--run", run_dir, "run directory")->required();
  in->add_option("--threshold", threshold, "detection score threshold")->default_val(0.5);
  in->add_option("--protos-in", protos_in, "load precomputed prototypes");
  in->add_flag("--overlay", overlay, "write PNG overlays (white correct, red errors)");
  in->add_option("--limit", limit, "process at most this many images");

  auto* rp = app.add_subcommand("report", "aggregate results tables from run directories");
  rp->add_option("--runs", report_dirs, "run directories")->required()->expected(-1);
  rp->add_option("--out", report_out, "combined CSV path");

  auto* st = app.add_subcommand("selftest", "run the invariant suite");
  (void)st;

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;  // --help exits 0, everything else is usage
  }

  try {
    if (gen->parsed()) return cmd_gen_data(opts, out_dir);
    if (tb->parsed()) return cmd_train_base(opts, data_dir, run_dir);
    if (ft->parsed()) return cmd_finetune(opts, data_dir, ckpt, run_dir);
    if (ev->parsed()) return cmd_eval(opts, data_dir, ckpt, run_dir, threshold, protos_in,
                                      protos_out);
    if (in->parsed()) return cmd_infer(opts, data_dir, ckpt, protos_in, run_dir, threshold,
                                       overlay, limit);
    if (rp->parsed()) {
      aggregate_run_dirs(report_dirs, report_out);
      std::printf("wrote %s\n", report_out.c_str());
      return 0;
    }
    if (st->parsed()) return cmd_selftest();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
