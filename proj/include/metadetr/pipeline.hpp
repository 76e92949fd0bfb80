#pragma once
#include <optional>
#include <string>

#include "metadetr/detector.hpp"
#include "metadetr/episodes.hpp"
#include "metadetr/evalmetrics.hpp"
#include "metadetr/setloss.hpp"

namespace metadetr {

struct TrainConfig {
  enum class Stage { Base, Finetune };
  Stage stage = Stage::Base;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  int batch_episodes = 4;
  int epochs = 20;
  int episodes_per_epoch = 2000;
  int lr_decay_epoch = 18;
  double lr_decay_factor = 0.1;
  int c_support = 5;
  uint64_t seed = 0;
  int finetune_steps = 200;
  double early_stop_improvement = 0.01;  // 50-step moving-average threshold
  double clip_grad_norm = 0.1;           // 0 disables clipping
  int threads = 1;
  LossConfig loss;
};

// Decoupled-weight-decay Adam over a parameter store.
class AdamW {
 public:
  explicit AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void step(ParamStore& store, double lr, double weight_decay);

 private:
  double beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Full differentiable forward of one episode: support prototypes, query
// detection, and the set loss.
struct EpisodeForward {
  PrototypeSet protos;
  DetectionSet det;
  LossResult loss;
};
EpisodeForward run_episode(const Model& model, const Dataset& dataset, const Episode& episode,
                           const LossConfig& cfg);

struct TrainStats {
  int steps = 0;
  double first_loss = 0.0;
  double last_loss = 0.0;
  bool early_stopped = false;
};

// Episodic training loop with per-step CSV logging and per-epoch
// checkpoints under run_dir. Base stage guarantees episodes with at least
// one support class present in the query; fine-tuning drops the guarantee.
// A non-finite loss aborts with a diagnostic dump of the episode.
TrainStats train_stage(Model& model, const Dataset& dataset, const TrainConfig& cfg,
                       const std::string& run_dir);

// Per-class prototypes averaged over every instance of the class in the
// support pool, the precomputation used for inference.
ClassProtoBank precompute_prototypes(const Model& model, const Dataset& support_pool);
ClassProtoBank precompute_prototypes(const Model& model, const Dataset& support_pool,
                                     const std::vector<int>& class_ids);

// Greedy-matching mAP over the validation set at the given IoU thresholds.
// score_thresh bounds the detections fed to the ranker.
EvalResult evaluate(const Model& model, const ClassProtoBank& bank, const Dataset& val,
                    const std::vector<double>& iou_thresholds, double score_thresh = 0.05);

struct RunOutcome {
  uint64_t seed = 0;
  EvalResult before;  // base checkpoint, before fine-tuning
  EvalResult after;
};

struct MultiRunResult {
  std::vector<RunOutcome> runs;
  double mean(const std::string& group, double thr, bool after = true) const;
  double stddev(const std::string& group, double thr, bool after = true) const;
};

// Repeats build_kshot + fine-tune + evaluate with distinct seeds, starting
// every run from the same base checkpoint.
MultiRunResult multi_run(const ModelConfig& model_cfg, const std::string& base_checkpoint,
                         const Dataset& train, const Dataset& val, int k, int runs,
                         uint64_t seed0, const TrainConfig& ft_cfg, const std::string& run_dir);

}  // namespace metadetr
