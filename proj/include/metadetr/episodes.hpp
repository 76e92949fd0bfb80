#pragma once
#include <map>
#include <set>
#include <string>
#include <vector>

#include "metadetr/image.hpp"
#include "metadetr/rng.hpp"
#include "metadetr/setloss.hpp"

namespace metadetr {

struct ObjectAnn {
  int class_id = -1;
  Box box;
};

struct AnnotatedImage {
  int id = -1;
  std::string file;
  std::vector<ObjectAnn> objects;
  Image image;
};

struct ClassSplit {
  std::vector<int> base_classes;
  std::vector<int> novel_classes;
  bool is_novel(int class_id) const;
};

struct Dataset {
  std::string dir;
  std::vector<AnnotatedImage> images;
  ClassSplit split;
  // class id -> (image index, object index) for every instance
  std::map<int, std::vector<std::pair<int, int>>> instances_by_class;

  void rebuild_index();
  std::vector<int> class_ids() const;
  size_t total_objects() const;

  static Dataset load(const std::string& dir);
  // Same images with annotations restricted to `classes`; images left with
  // no annotation are dropped.
  Dataset filter_classes(const std::set<int>& classes) const;
};

struct SupportInstance {
  int class_id = -1;
  int image_idx = -1;  // into the dataset the episode was sampled from
  Box box;
};

// One meta-learning task: a query image, C support instances of distinct
// classes (slot i+1 holds supports[i]), and targets remapped to slots.
struct Episode {
  int query_idx = -1;
  std::vector<SupportInstance> supports;
  std::vector<int> slot_map;  // slot -> class id, slot 0 = -1 (background)
  TargetSet targets;
};

// Keeps objects whose class appears in the slot map, remapping the class
// to its slot label; everything else is dropped and the set is padded with
// no-object entries to length N.
TargetSet generate_targets(const std::vector<ObjectAnn>& objects,
                           const std::vector<int>& slot_map, int n);

// Samples a query image and C distinct support classes, one instance per
// class (from a different image than the query when possible). With
// require_present_class at least one sampled class occurs in the query
// image. C is clamped to the number of classes with a warning.
Episode sample_episode(const Dataset& dataset, int c, int n, Rng& rng,
                       bool require_present_class);

// K-shot fine-tuning pool: exactly K instances per novel class and K per
// base class (for balance), deterministic per seed.
Dataset build_kshot(const Dataset& dataset, int k, uint64_t seed);

struct SyntheticConfig {
  int num_base = 8;
  int num_novel = 4;
  int train_images = 2000;
  int val_images = 400;
  int image_size = 128;
  int min_instances = 1;
  int max_instances = 4;
  double min_scale = 0.16;  // shape footprint as a fraction of image side
  double max_scale = 0.42;
  double max_pair_iou = 0.2;
  int num_classes() const { return num_base + num_novel; }
};

struct GenStats {
  int images = 0;
  int instances = 0;
  // Fraction of each instance's rendered pixels inside its recorded box,
  // minimized over all instances (tight boxes make this 1).
  double min_box_pixel_containment = 1.0;
};

// Renders the shapes corpus to out_dir: images/*.png, annotations.jsonl and
// splits.json, split into train/ and val/ subdirectories. Classes are
// (shape, hue) pairs; byte-identical output for equal seeds.
GenStats generate_synthetic(const SyntheticConfig& cfg, uint64_t seed,
                            const std::string& out_dir);

std::string class_name(const SyntheticConfig& cfg, int class_id);

}  // namespace metadetr
