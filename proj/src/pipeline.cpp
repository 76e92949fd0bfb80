#include "metadetr/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>
#include <thread>

#include "json.hpp"
#include "metadetr/ops.hpp"

namespace metadetr {

namespace fs = std::filesystem;

void AdamW::step(ParamStore& store, double lr, double weight_decay) {
  const auto& params = store.all();
  if (m_.size() != params.size()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i].value.size(), 0.0);
      v_[i].assign(params[i].value.size(), 0.0);
    }
  }
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& data = params[i].value.node()->data;
    const auto& grad = params[i].value.node()->grad;
    for (size_t j = 0; j < data.size(); ++j) {
      double g = grad[j];
      m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g;
      v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g * g;
      double mhat = m_[i][j] / bc1;
      double vhat = v_[i][j] / bc2;
      data[j] -= lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay * data[j]);
    }
  }
}

EpisodeForward run_episode(const Model& model, const Dataset& dataset, const Episode& episode,
                           const LossConfig& cfg) {
  EpisodeForward out;
  std::vector<std::pair<int, Value>> class_vectors;
  for (const auto& s : episode.supports) {
    Value vec = model.pool_support(dataset.images[s.image_idx].image, s.box);
    class_vectors.emplace_back(s.class_id, vec);
  }
  out.protos = model.make_prototype_set(class_vectors);
  out.det = model.detect(dataset.images[episode.query_idx].image, out.protos);
  out.loss = total_loss(out.det, episode.targets, &out.protos, &model.class_weights, cfg);
  return out;
}

namespace {

double grad_norm(const ParamStore& store) {
  double sq = 0.0;
  for (const auto& p : store.all())
    for (double g : p.value.node()->grad) sq += g * g;
  return std::sqrt(sq);
}

void scale_grads(ParamStore& store, double s) {
  for (const auto& p : store.all())
    for (double& g : p.value.node()->grad) g *= s;
}

void dump_episode(const Dataset& dataset, const Episode& ep, const LossBreakdown& bd,
                  const std::string& path) {
  nlohmann::ordered_json j;
  j["query_image_id"] = dataset.images[ep.query_idx].id;
  j["query_file"] = dataset.images[ep.query_idx].file;
  j["supports"] = nlohmann::ordered_json::array();
  for (const auto& s : ep.supports) {
    j["supports"].push_back({{"class_id", s.class_id},
                             {"image_id", dataset.images[s.image_idx].id},
                             {"box", {s.box.cx, s.box.cy, s.box.w, s.box.h}}});
  }
  j["loss"] = {{"cls", bd.cls}, {"l1", bd.l1}, {"giou", bd.giou},
               {"proto_cos", bd.proto_cos}, {"total", bd.total}};
  std::ofstream os(path);
  os << j.dump(2) << "\n";
}

}  // namespace

TrainStats train_stage(Model& model, const Dataset& dataset, const TrainConfig& cfg,
                       const std::string& run_dir) {
  check(cfg.lr > 0.0, "train: learning rate must be positive");
  check(cfg.c_support >= 1, "train: C must be at least 1");
  check(cfg.batch_episodes >= 1, "train: batch size must be at least 1");
  fs::create_directories(run_dir + "/checkpoints");
  fs::create_directories(run_dir + "/logs");
  std::ofstream log(run_dir + "/logs/train.csv");
  log << "step,cls,l1,giou,proto_cos,total\n";

  bool base = cfg.stage == TrainConfig::Stage::Base;
  int steps_per_epoch =
      std::max(1, base ? cfg.episodes_per_epoch / cfg.batch_episodes : cfg.finetune_steps);
  int total_steps = base ? cfg.epochs * steps_per_epoch : cfg.finetune_steps;

  Rng rng(cfg.seed);
  AdamW opt;
  TrainStats stats;
  double lr = cfg.lr;
  std::deque<double> window;  // trailing losses for the fine-tune early stop
  double prev_window_avg = -1.0;

  for (int step = 0; step < total_steps; ++step) {
    int epoch = step / std::max(1, steps_per_epoch);
    if (base && epoch == cfg.lr_decay_epoch && step % steps_per_epoch == 0)
      lr = cfg.lr * cfg.lr_decay_factor;

    std::vector<Episode> batch;
    for (int b = 0; b < cfg.batch_episodes; ++b)
      batch.push_back(sample_episode(dataset, cfg.c_support, model.cfg.num_queries, rng,
                                     /*require_present_class=*/base));

    std::vector<GradSink> sinks(batch.size());
    std::vector<LossBreakdown> breakdowns(batch.size());
    auto worker = [&](size_t b) {
      EpisodeForward fwd = run_episode(model, dataset, batch[b], cfg.loss);
      breakdowns[b] = fwd.loss.breakdown;
      backward(fwd.loss.loss, &sinks[b]);
    };
    if (cfg.threads > 1) {
      std::vector<std::thread> pool;
      for (size_t b = 0; b < batch.size(); ++b) pool.emplace_back(worker, b);
      for (auto& t : pool) t.join();
    } else {
      for (size_t b = 0; b < batch.size(); ++b) worker(b);
    }

    model.store.zero_grad();
    LossBreakdown mean_bd;
    double inv = 1.0 / static_cast<double>(batch.size());
    for (size_t b = 0; b < batch.size(); ++b) {
      model.store.accumulate(sinks[b], inv);
      mean_bd.cls += inv * breakdowns[b].cls;
      mean_bd.l1 += inv * breakdowns[b].l1;
      mean_bd.giou += inv * breakdowns[b].giou;
      mean_bd.proto_cos += inv * breakdowns[b].proto_cos;
      mean_bd.total += inv * breakdowns[b].total;
    }
    for (size_t b = 0; b < batch.size(); ++b) {
      if (!std::isfinite(breakdowns[b].total)) {
        std::string dump = run_dir + "/logs/bad_episode_step" + std::to_string(step) + ".json";
        dump_episode(dataset, batch[b], breakdowns[b], dump);
        fail("train: non-finite loss at step " + std::to_string(step) +
             "; episode dumped to " + dump);
      }
    }

    if (cfg.clip_grad_norm > 0.0) {
      double n = grad_norm(model.store);
      if (n > cfg.clip_grad_norm) scale_grads(model.store, cfg.clip_grad_norm / n);
    }
    opt.step(model.store, lr, cfg.weight_decay);

    log << step << "," << mean_bd.cls << "," << mean_bd.l1 << "," << mean_bd.giou << ","
        << mean_bd.proto_cos << "," << mean_bd.total << "\n";
    if (step == 0) stats.first_loss = mean_bd.total;
    stats.last_loss = mean_bd.total;
    ++stats.steps;

    if (base) {
      if ((step + 1) % steps_per_epoch == 0)
        model.store.save(run_dir + "/checkpoints/epoch_" + std::to_string(epoch) + ".mdtr");
    } else {
      window.push_back(mean_bd.total);
      if (window.size() > 50) window.pop_front();
      if (window.size() == 50 && (step + 1) % 50 == 0) {
        double avg = 0.0;
        for (double v : window) avg += v;
        avg /= static_cast<double>(window.size());
        if (prev_window_avg >= 0.0 &&
            avg > prev_window_avg * (1.0 - cfg.early_stop_improvement)) {
          stats.early_stopped = true;
          break;
        }
        prev_window_avg = avg;
      }
    }
  }
  model.store.save(run_dir + "/checkpoints/final.mdtr");
  log.close();
  return stats;
}

ClassProtoBank precompute_prototypes(const Model& model, const Dataset& support_pool) {
  return precompute_prototypes(model, support_pool, support_pool.class_ids());
}

ClassProtoBank precompute_prototypes(const Model& model, const Dataset& support_pool,
                                     const std::vector<int>& class_ids) {
  ClassProtoBank bank;
  for (int cid : class_ids) {
    auto it = support_pool.instances_by_class.find(cid);
    check(it != support_pool.instances_by_class.end() && !it->second.empty(),
          "precompute_prototypes: class " + std::to_string(cid) + " has no support instances");
    std::vector<double> acc(model.cfg.d, 0.0);
    for (const auto& [img_idx, obj_idx] : it->second) {
      const auto& img = support_pool.images[img_idx];
      Value vec = model.pool_support(img.image, img.objects[obj_idx].box);
      for (int j = 0; j < model.cfg.d; ++j) acc[j] += vec.at(0, j);
    }
    double inv = 1.0 / static_cast<double>(it->second.size());
    for (auto& x : acc) x *= inv;
    bank.class_ids.push_back(cid);
    bank.vectors.push_back(Value::from_data(1, model.cfg.d, std::move(acc)));
  }
  return bank;
}

EvalResult evaluate(const Model& model, const ClassProtoBank& bank, const Dataset& val,
                    const std::vector<double>& iou_thresholds, double score_thresh) {
  // Detections and ground truth grouped per class.
  std::map<int, std::vector<ScoredDet>> dets_by_class;
  std::map<int, std::map<int, std::vector<Box>>> gt_by_class;
  for (const auto& img : val.images)
    for (const auto& o : img.objects) gt_by_class[o.class_id][img.id].push_back(o.box);

  for (const auto& img : val.images) {
    auto dets = infer_detections(model, img.image, bank, score_thresh);
    for (const auto& d : dets)
      dets_by_class[d.class_id].push_back({d.score, img.id, d.box});
  }

  EvalResult res;
  res.iou_thresholds = iou_thresholds;
  std::map<std::string, std::vector<std::vector<double>>> groups;  // group -> per-thr AP list
  for (int cid : bank.class_ids) {
    if (!gt_by_class.count(cid)) continue;  // class absent from this split
    std::vector<double> aps;
    for (double thr : iou_thresholds)
      aps.push_back(average_precision(dets_by_class[cid], gt_by_class[cid], thr));
    res.ap_per_class[cid] = aps;
    groups["all"].push_back(aps);
    groups[val.split.is_novel(cid) ? "novel" : "base"].push_back(aps);
  }
  for (auto& [name, lists] : groups) {
    std::vector<double> mean(iou_thresholds.size(), 0.0);
    for (const auto& aps : lists)
      for (size_t i = 0; i < aps.size(); ++i) mean[i] += aps[i];
    for (auto& v : mean) v /= static_cast<double>(lists.size());
    res.map_groups[name] = mean;
  }
  return res;
}

double MultiRunResult::mean(const std::string& group, double thr, bool after) const {
  check(!runs.empty(), "multi_run: no runs");
  double s = 0.0;
  for (const auto& r : runs) s += (after ? r.after : r.before).map_at(group, thr);
  return s / static_cast<double>(runs.size());
}

double MultiRunResult::stddev(const std::string& group, double thr, bool after) const {
  double m = mean(group, thr, after);
  double s = 0.0;
  for (const auto& r : runs) {
    double d = (after ? r.after : r.before).map_at(group, thr) - m;
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(runs.size()));
}

MultiRunResult multi_run(const ModelConfig& model_cfg, const std::string& base_checkpoint,
                         const Dataset& train, const Dataset& val, int k, int runs,
                         uint64_t seed0, const TrainConfig& ft_cfg, const std::string& run_dir) {
  check(runs >= 1, "multi_run: need at least one run");
  MultiRunResult result;
  std::vector<double> thresholds{0.5, 0.75};
  for (int r = 0; r < runs; ++r) {
    uint64_t seed = seed0 + static_cast<uint64_t>(r);
    Model model = Model::build(model_cfg);
    model.store.load(base_checkpoint);
    Dataset kshot = build_kshot(train, k, seed);

    RunOutcome outcome;
    outcome.seed = seed;
    ClassProtoBank before_bank = precompute_prototypes(model, kshot);
    outcome.before = evaluate(model, before_bank, val, thresholds);
    outcome.before.seed = seed;
    outcome.before.shots = k;

    TrainConfig cfg = ft_cfg;
    cfg.stage = TrainConfig::Stage::Finetune;
    cfg.seed = seed;
    train_stage(model, kshot, cfg, run_dir + "/ft_seed" + std::to_string(seed));

    ClassProtoBank after_bank = precompute_prototypes(model, kshot);
    outcome.after = evaluate(model, after_bank, val, thresholds);
    outcome.after.seed = seed;
    outcome.after.shots = k;
    result.runs.push_back(std::move(outcome));
  }
  return result;
}

}  // namespace metadetr
