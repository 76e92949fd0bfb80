#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "metadetr/config.hpp"
#include "metadetr/report.hpp"

using namespace metadetr;
namespace fs = std::filesystem;

namespace {

std::string temp_dir(const std::string& name) {
  std::string dir = (fs::temp_directory_path() / name).string();
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ModelConfig tiny_model() {
  ModelConfig cfg;
  cfg.d = 16;
  cfg.heads = 2;
  cfg.enc_layers = 1;
  cfg.dec_layers = 2;
  cfg.num_queries = 8;
  cfg.c_max = 3;
  cfg.ffn_mult = 2;
  cfg.num_classes = 12;
  cfg.backbone.widths = {4, 6, 8, 16};
  cfg.backbone.out_dim = 16;
  cfg.init_seed = 5;
  return cfg;
}

const Dataset& tiny_data() {
  static Dataset ds = [] {
    SyntheticConfig cfg;
    cfg.train_images = 30;
    cfg.val_images = 10;
    cfg.image_size = 64;
    std::string dir = temp_dir("mdtr_pipe_ds");
    generate_synthetic(cfg, 19, dir);
    return Dataset::load(dir + "/train");
  }();
  return ds;
}

TrainConfig tiny_train(int steps_worth_of_episodes) {
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.batch_episodes = 2;
  cfg.epochs = 1;
  cfg.episodes_per_epoch = steps_worth_of_episodes;
  cfg.lr_decay_epoch = 99;
  cfg.c_support = 2;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST_CASE("average precision: hand-built rank lists") {
  std::map<int, std::vector<Box>> one_gt{{0, {{0.5, 0.5, 0.2, 0.2}}}};
  // single detection overlapping enough
  CHECK(average_precision({{0.9, 0, {0.52, 0.5, 0.2, 0.2}}}, one_gt, 0.5) ==
        doctest::Approx(1.0));
  // TP at rank 1, FP at rank 2: recall saturates at rank 1
  CHECK(average_precision({{0.9, 0, {0.5, 0.5, 0.2, 0.2}}, {0.8, 0, {0.1, 0.1, 0.05, 0.05}}},
                          one_gt, 0.5) == doctest::Approx(1.0));
  // {TP 0.9, FP 0.8, TP 0.7} with two ground truths
  std::map<int, std::vector<Box>> two_gt{{0, {{0.2, 0.2, 0.1, 0.1}, {0.7, 0.7, 0.1, 0.1}}}};
  double ap = average_precision({{0.9, 0, {0.2, 0.2, 0.1, 0.1}},
                                 {0.8, 0, {0.45, 0.45, 0.05, 0.05}},
                                 {0.7, 0, {0.7, 0.7, 0.1, 0.1}}},
                                two_gt, 0.5);
  CHECK(ap == doctest::Approx(0.5 * 1.0 + 0.5 * (2.0 / 3.0)).epsilon(1e-9));
  // each ground truth is matched at most once: a duplicate is a FP
  double dup = average_precision({{0.9, 0, {0.2, 0.2, 0.1, 0.1}},
                                  {0.8, 0, {0.2, 0.2, 0.1, 0.1}}},
                                 two_gt, 0.5);
  CHECK(dup == doctest::Approx(0.5));
  // no ground truth at all: AP 0
  CHECK(average_precision({{0.9, 0, {0.2, 0.2, 0.1, 0.1}}}, {}, 0.5) == doctest::Approx(0.0));
}

TEST_CASE("prototype precomputation: single shot, order invariance, round trip") {
  Model model = Model::build(tiny_model());
  const Dataset& ds = tiny_data();

  // a class with one instance: the prototype is that shot's pooled vector
  Dataset one = build_kshot(ds, 1, 4);
  ClassProtoBank bank = precompute_prototypes(model, one);
  int cid = bank.class_ids[0];
  auto [img_idx, obj_idx] = one.instances_by_class.at(cid)[0];
  Value direct = model.pool_support(one.images[img_idx].image,
                                    one.images[img_idx].objects[obj_idx].box);
  CHECK(std::memcmp(bank.vectors[0].data().data(), direct.data().data(),
                    direct.size() * sizeof(double)) == 0);

  // mean over shots is insensitive to instance order (1e-12)
  ClassProtoBank full = precompute_prototypes(model, ds);
  Dataset reversed = ds;
  for (auto& [c, insts] : reversed.instances_by_class)
    std::reverse(insts.begin(), insts.end());
  ClassProtoBank rbank = precompute_prototypes(model, reversed);
  for (size_t i = 0; i < full.vectors.size(); ++i)
    for (int j = 0; j < 16; ++j)
      CHECK(full.vectors[i].at(0, j) ==
            doctest::Approx(rbank.vectors[i].at(0, j)).epsilon(1e-12));

  // serialize/load and compare inference bitwise on a few images
  std::string path = temp_dir("mdtr_protos") + "/protos.mdtr";
  full.save(path);
  ClassProtoBank loaded = ClassProtoBank::load(path, 16);
  for (int i = 0; i < 3; ++i) {
    auto a = infer_detections(model, ds.images[i].image, full, 0.1);
    auto b = infer_detections(model, ds.images[i].image, loaded, 0.1);
    REQUIRE(a.size() == b.size());
    for (size_t k = 0; k < a.size(); ++k) {
      CHECK(a[k].score == b[k].score);
      CHECK(a[k].box.cx == b[k].box.cx);
      CHECK(a[k].class_id == b[k].class_id);
    }
  }
}

TEST_CASE("checkpoint: round trip, version guard, unknown names") {
  Model m1 = Model::build(tiny_model());
  std::string dir = temp_dir("mdtr_ckpt");
  m1.store.save(dir + "/model.mdtr");

  ModelConfig cfg2 = tiny_model();
  cfg2.init_seed = 777;  // different init, same shapes
  Model m2 = Model::build(cfg2);
  m2.store.load(dir + "/model.mdtr");
  for (size_t i = 0; i < m1.store.all().size(); ++i) {
    const auto& a = m1.store.all()[i].value;
    const auto& b = m2.store.all()[i].value;
    CHECK(std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0);
  }

  std::ofstream bad(dir + "/bad.mdtr", std::ios::binary);
  bad << "NOTMAGIC";
  bad.close();
  CHECK_THROWS_AS(m2.store.load(dir + "/bad.mdtr"), std::invalid_argument);

  ParamStore partial;
  partial.get_or_create("only.one", 2, 2, init_zeros());
  CHECK_THROWS_AS(partial.load(dir + "/model.mdtr"), std::invalid_argument);
}

TEST_CASE("train_stage: zero epochs saves the initial parameters") {
  Model model = Model::build(tiny_model());
  std::vector<double> before;
  for (const auto& p : model.store.all())
    before.insert(before.end(), p.value.data().begin(), p.value.data().end());
  TrainConfig cfg = tiny_train(4);
  cfg.epochs = 0;
  std::string run = temp_dir("mdtr_run0");
  train_stage(model, tiny_data(), cfg, run);

  Model fresh = Model::build(tiny_model());
  fresh.store.load(run + "/checkpoints/final.mdtr");
  size_t off = 0;
  for (const auto& p : fresh.store.all()) {
    CHECK(std::memcmp(p.value.data().data(), before.data() + off,
                      p.value.size() * sizeof(double)) == 0);
    off += p.value.size();
  }
}

TEST_CASE("train_stage: fixed seed reproduces the checkpoint bitwise") {
  std::string r1 = temp_dir("mdtr_det_a");
  std::string r2 = temp_dir("mdtr_det_b");
  TrainConfig cfg = tiny_train(8);
  Model m1 = Model::build(tiny_model());
  train_stage(m1, tiny_data(), cfg, r1);
  Model m2 = Model::build(tiny_model());
  train_stage(m2, tiny_data(), cfg, r2);
  CHECK(m1.store.scalar_count() == m2.store.scalar_count());
  for (size_t i = 0; i < m1.store.all().size(); ++i) {
    const auto& a = m1.store.all()[i].value;
    const auto& b = m2.store.all()[i].value;
    CHECK(std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0);
  }
  // the training log has the documented columns
  std::ifstream log(r1 + "/logs/train.csv");
  std::string header;
  std::getline(log, header);
  CHECK(header == "step,cls,l1,giou,proto_cos,total");
}

TEST_CASE("train_stage: two worker threads give the single-thread result bitwise") {
  TrainConfig cfg = tiny_train(8);
  Model m1 = Model::build(tiny_model());
  train_stage(m1, tiny_data(), cfg, temp_dir("mdtr_th1"));
  cfg.threads = 2;
  Model m2 = Model::build(tiny_model());
  train_stage(m2, tiny_data(), cfg, temp_dir("mdtr_th2"));
  for (size_t i = 0; i < m1.store.all().size(); ++i) {
    const auto& a = m1.store.all()[i].value;
    const auto& b = m2.store.all()[i].value;
    CHECK(std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0);
  }
}

TEST_CASE("training smoke: probe episode loss drops over 500 steps") {
  Model model = Model::build(tiny_model());
  const Dataset& ds = tiny_data();
  Rng probe_rng(1234);
  Episode probe = sample_episode(ds, 2, model.cfg.num_queries, probe_rng, true);
  LossConfig loss_cfg;

  double before = run_episode(model, ds, probe, loss_cfg).loss.breakdown.total;
  TrainConfig cfg = tiny_train(500);
  cfg.batch_episodes = 1;
  cfg.episodes_per_epoch = 500;
  train_stage(model, ds, cfg, temp_dir("mdtr_smoke"));
  double after = run_episode(model, ds, probe, loss_cfg).loss.breakdown.total;
  CHECK(after < before);
}

TEST_CASE("evaluate: score threshold 1.0 yields zero AP everywhere") {
  Model model = Model::build(tiny_model());
  SyntheticConfig dcfg;
  dcfg.train_images = 4;
  dcfg.val_images = 4;
  dcfg.image_size = 64;
  std::string dir = temp_dir("mdtr_eval_ds");
  generate_synthetic(dcfg, 23, dir);
  Dataset val = Dataset::load(dir + "/val");
  Dataset train = Dataset::load(dir + "/train");
  ClassProtoBank bank = precompute_prototypes(model, train);
  EvalResult res = evaluate(model, bank, val, {0.5, 0.75}, 1.0);
  for (const auto& [cid, aps] : res.ap_per_class)
    for (double ap : aps) CHECK(ap == 0.0);

  // and evaluation is a pure function of its inputs
  EvalResult res2 = evaluate(model, bank, val, {0.5, 0.75}, 0.2);
  EvalResult res3 = evaluate(model, bank, val, {0.5, 0.75}, 0.2);
  for (const auto& [cid, aps] : res2.ap_per_class)
    for (size_t i = 0; i < aps.size(); ++i) CHECK(aps[i] == res3.ap_per_class.at(cid)[i]);
}

TEST_CASE("multi-run aggregation: single run mean/std, two-value mean") {
  MultiRunResult r;
  RunOutcome o1;
  o1.after.iou_thresholds = {0.5};
  o1.after.map_groups["novel"] = {0.2};
  o1.before = o1.after;
  r.runs.push_back(o1);
  CHECK(r.mean("novel", 0.5) == doctest::Approx(0.2));
  CHECK(r.stddev("novel", 0.5) == doctest::Approx(0.0));

  RunOutcome o2 = o1;
  o2.after.map_groups["novel"] = {0.4};
  r.runs.push_back(o2);
  CHECK(r.mean("novel", 0.5) == doctest::Approx(0.3));
}

TEST_CASE("config: defaults, file parsing, unknown keys, env seed") {
  Config cfg = Config::defaults();
  CHECK(cfg.get_int("d") == 64);
  CHECK(cfg.get_int("num_queries") == 20);
  CHECK(cfg.get_double("lr") == doctest::Approx(1e-3));

  std::string dir = temp_dir("mdtr_cfg");
  {
    std::ofstream os(dir + "/run.cfg");
    os << "# comment line\n";
    os << "lr = 5e-4\n";
    os << "c_support=3   # trailing comment\n";
  }
  Config loaded = Config::load(dir + "/run.cfg");
  CHECK(loaded.get_double("lr") == doctest::Approx(5e-4));
  CHECK(loaded.get_int("c_support") == 3);

  {
    std::ofstream os(dir + "/bad.cfg");
    os << "not_a_key=1\n";
  }
  CHECK_THROWS_WITH_AS(Config::load(dir + "/bad.cfg"), doctest::Contains("not_a_key"),
                       std::invalid_argument);

  setenv("METADETR_SEED", "4242", 1);
  Config env_cfg = Config::defaults();
  env_cfg.apply_env();
  CHECK(env_cfg.get_u64("seed") == 4242);
  unsetenv("METADETR_SEED");

  // the paper preset mirrors the published training setup
  Config paper = Config::defaults();
  paper.set("preset", "paper");
  ModelConfig mc = paper.model_config();
  CHECK(mc.d == 256);
  CHECK(mc.heads == 8);
  CHECK(mc.num_queries == 300);
  TrainConfig tc = paper.train_config(TrainConfig::Stage::Base);
  CHECK(tc.lr == doctest::Approx(2e-4));
  CHECK(tc.epochs == 50);
  CHECK(tc.lr_decay_epoch == 45);
}

TEST_CASE("results table and report aggregation") {
  MultiRunResult r;
  for (int i = 0; i < 2; ++i) {
    RunOutcome o;
    o.seed = 100 + i;
    o.before.iou_thresholds = {0.5, 0.75};
    o.before.map_groups["novel"] = {0.1, 0.05};
    o.before.map_groups["base"] = {0.6, 0.4};
    o.before.map_groups["all"] = {0.35, 0.22};
    o.after = o.before;
    o.after.map_groups["novel"] = {0.3 + 0.1 * i, 0.2};
    r.runs.push_back(o);
  }
  std::string d1 = temp_dir("mdtr_rep1");
  std::string d2 = temp_dir("mdtr_rep2");
  fs::create_directories(d1 + "/results");
  fs::create_directories(d2 + "/results");
  write_results_table(d1 + "/results/table.csv", r, 5);
  write_results_table(d2 + "/results/table.csv", r, 5);
  std::string out = d1 + "/combined.csv";
  aggregate_run_dirs({d1, d2}, out);
  std::ifstream is(out);
  std::string header, line;
  std::getline(is, header);
  CHECK(header == "group,iou_thr,runs,mean_before,std_before,mean_after,std_after");
  bool found_novel = false;
  while (std::getline(is, line)) {
    if (line.rfind("novel,0.5", 0) == 0) {
      found_novel = true;
      CHECK(line.find(",4,") != std::string::npos);  // 2 runs x 2 dirs
    }
  }
  CHECK(found_novel);
}
