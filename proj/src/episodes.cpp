#include "metadetr/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace metadetr {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

bool ClassSplit::is_novel(int class_id) const {
  return std::find(novel_classes.begin(), novel_classes.end(), class_id) != novel_classes.end();
}

void Dataset::rebuild_index() {
  instances_by_class.clear();
  for (size_t i = 0; i < images.size(); ++i)
    for (size_t o = 0; o < images[i].objects.size(); ++o)
      instances_by_class[images[i].objects[o].class_id].emplace_back(static_cast<int>(i),
                                                                     static_cast<int>(o));
}

std::vector<int> Dataset::class_ids() const {
  std::vector<int> ids;
  for (const auto& [cid, _] : instances_by_class) ids.push_back(cid);
  return ids;
}

size_t Dataset::total_objects() const {
  size_t n = 0;
  for (const auto& img : images) n += img.objects.size();
  return n;
}

Dataset Dataset::load(const std::string& dir) {
  Dataset ds;
  ds.dir = dir;
  std::ifstream ann(dir + "/annotations.jsonl");
  check(ann.good(), "dataset: cannot open " + dir + "/annotations.jsonl");
  std::string line;
  while (std::getline(ann, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    AnnotatedImage img;
    img.id = j.at("id").get<int>();
    img.file = j.at("file").get<std::string>();
    for (const auto& o : j.at("objects")) {
      ObjectAnn obj;
      obj.class_id = o.at("class_id").get<int>();
      auto b = o.at("box");
      obj.box = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
      img.objects.push_back(obj);
    }
    img.image = read_png(dir + "/" + img.file);
    ds.images.push_back(std::move(img));
  }

  std::ifstream sp(dir + "/splits.json");
  check(sp.good(), "dataset: cannot open " + dir + "/splits.json");
  auto j = nlohmann::json::parse(sp);
  ds.split.base_classes = j.at("base").get<std::vector<int>>();
  ds.split.novel_classes = j.at("novel").get<std::vector<int>>();
  for (int b : ds.split.base_classes)
    check(!ds.split.is_novel(b),
          "dataset: class " + std::to_string(b) + " appears in both base and novel splits");
  ds.rebuild_index();
  return ds;
}

Dataset Dataset::filter_classes(const std::set<int>& classes) const {
  Dataset out;
  out.dir = dir;
  out.split = split;
  for (const auto& img : images) {
    AnnotatedImage copy;
    copy.id = img.id;
    copy.file = img.file;
    copy.image = img.image;
    for (const auto& o : img.objects)
      if (classes.count(o.class_id)) copy.objects.push_back(o);
    if (!copy.objects.empty()) out.images.push_back(std::move(copy));
  }
  out.rebuild_index();
  return out;
}

TargetSet generate_targets(const std::vector<ObjectAnn>& objects,
                           const std::vector<int>& slot_map, int n) {
  check(!slot_map.empty() && slot_map[0] == -1, "generate_targets: slot 0 must be background");
  int c = static_cast<int>(slot_map.size()) - 1;
  TargetSet ts;
  for (const auto& obj : objects) {
    int slot = 0;
    for (int s = 1; s <= c; ++s)
      if (slot_map[s] == obj.class_id) {
        slot = s;
        break;
      }
    if (slot == 0) continue;  // class not among the supports: dropped
    TargetEntry e;
    e.label = chi(slot, c);
    e.box = obj.box;
    ts.entries.push_back(e);
  }
  check(static_cast<int>(ts.entries.size()) <= n,
        "generate_targets: " + std::to_string(ts.entries.size()) +
            " kept objects exceed N = " + std::to_string(n));
  ts.entries.resize(n);  // pad with no-object entries
  return ts;
}

Episode sample_episode(const Dataset& dataset, int c, int n, Rng& rng,
                       bool require_present_class) {
  check(c >= 1, "sample_episode: C must be at least 1");
  check(dataset.total_objects() > 0, "sample_episode: dataset has no annotated objects");

  std::vector<int> classes = dataset.class_ids();
  if (c > static_cast<int>(classes.size())) {
    std::fprintf(stderr, "sample_episode: clamping C from %d to %zu available classes\n", c,
                 classes.size());
    c = static_cast<int>(classes.size());
  }

  Episode ep;
  ep.query_idx = static_cast<int>(rng.uniform_int(0, static_cast<int>(dataset.images.size()) - 1));
  const AnnotatedImage& query = dataset.images[ep.query_idx];

  std::vector<int> chosen;
  if (require_present_class && !query.objects.empty()) {
    std::vector<int> present;
    for (const auto& o : query.objects)
      if (std::find(present.begin(), present.end(), o.class_id) == present.end())
        present.push_back(o.class_id);
    int anchor = present[rng.uniform_int(0, static_cast<int>(present.size()) - 1)];
    chosen.push_back(anchor);
    std::vector<int> rest;
    for (int cid : classes)
      if (cid != anchor) rest.push_back(cid);
    rng.shuffle(rest);
    for (int i = 0; i < c - 1; ++i) chosen.push_back(rest[i]);
    rng.shuffle(chosen);  // anchor gets no privileged slot
  } else {
    rng.shuffle(classes);
    chosen.assign(classes.begin(), classes.begin() + c);
  }

  ep.slot_map.assign(1, -1);
  for (int cid : chosen) {
    const auto& pool = dataset.instances_by_class.at(cid);
    std::vector<std::pair<int, int>> other;
    for (const auto& inst : pool)
      if (inst.first != ep.query_idx) other.push_back(inst);
    const auto& candidates = other.empty() ? pool : other;
    auto [img_idx, obj_idx] = candidates[rng.uniform_int(0, static_cast<int>(candidates.size()) - 1)];
    SupportInstance s;
    s.class_id = cid;
    s.image_idx = img_idx;
    s.box = dataset.images[img_idx].objects[obj_idx].box;
    ep.supports.push_back(s);
    ep.slot_map.push_back(cid);
  }
  ep.targets = generate_targets(query.objects, ep.slot_map, n);
  return ep;
}

Dataset build_kshot(const Dataset& dataset, int k, uint64_t seed) {
  check(k >= 1, "build_kshot: K must be at least 1");
  Rng rng(seed);
  std::map<int, std::vector<ObjectAnn>> kept_by_image;  // image idx -> objects

  auto pick = [&](int cid, bool exact) {
    auto it = dataset.instances_by_class.find(cid);
    int have = it == dataset.instances_by_class.end() ? 0 : static_cast<int>(it->second.size());
    if (exact)
      check(have >= k, "build_kshot: class " + std::to_string(cid) + " has only " +
                           std::to_string(have) + " instances, need " + std::to_string(k));
    if (have == 0) return;
    std::vector<std::pair<int, int>> pool = it->second;
    rng.shuffle(pool);
    int take = std::min(k, have);
    for (int i = 0; i < take; ++i) {
      auto [img, obj] = pool[i];
      kept_by_image[img].push_back(dataset.images[img].objects[obj]);
    }
  };

  for (int cid : dataset.split.novel_classes) pick(cid, /*exact=*/true);
  for (int cid : dataset.split.base_classes) pick(cid, /*exact=*/false);

  Dataset out;
  out.dir = dataset.dir;
  out.split = dataset.split;
  for (const auto& [img_idx, objects] : kept_by_image) {
    AnnotatedImage copy;
    copy.id = dataset.images[img_idx].id;
    copy.file = dataset.images[img_idx].file;
    copy.image = dataset.images[img_idx].image;
    copy.objects = objects;
    out.images.push_back(std::move(copy));
  }
  out.rebuild_index();
  return out;
}

namespace {

constexpr const char* kShapeNames[4] = {"circle", "square", "triangle", "bar"};
constexpr const char* kHueNames[3] = {"red", "green", "blue"};

struct ShapeSpec {
  int shape;       // 0 circle, 1 square, 2 triangle, 3 bar
  double cx, cy;   // pixels
  double size;     // bounding-circle diameter in pixels
  double angle;
  uint8_t r, g, b;
};

bool inside_shape(const ShapeSpec& s, double px, double py) {
  double dx = px - s.cx, dy = py - s.cy;
  double ca = std::cos(-s.angle), sa = std::sin(-s.angle);
  double x = dx * ca - dy * sa;
  double y = dx * sa + dy * ca;
  double rad = s.size / 2;
  switch (s.shape) {
    case 0:
      return dx * dx + dy * dy <= rad * rad;
    case 1: {
      double half = rad / std::sqrt(2.0);
      return std::fabs(x) <= half && std::fabs(y) <= half;
    }
    case 2: {
      // equilateral triangle inscribed in the bounding circle
      for (int v = 0; v < 3; ++v) {
        double a0 = M_PI / 2 + 2 * M_PI * v / 3;
        double a1 = M_PI / 2 + 2 * M_PI * (v + 1) / 3;
        double x0 = rad * std::cos(a0), y0 = rad * std::sin(a0);
        double x1 = rad * std::cos(a1), y1 = rad * std::sin(a1);
        if ((x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) < 0) return false;
      }
      return true;
    }
    case 3:
      return std::fabs(x) <= rad && std::fabs(y) <= rad / 3.5;
  }
  return false;
}

void hsv_to_rgb(double h, double s, double v, uint8_t& r, uint8_t& g, uint8_t& b) {
  h = std::fmod(std::fmod(h, 360.0) + 360.0, 360.0);
  double c = v * s;
  double x = c * (1 - std::fabs(std::fmod(h / 60.0, 2.0) - 1));
  double m = v - c;
  double rr = 0, gg = 0, bb = 0;
  if (h < 60) rr = c, gg = x;
  else if (h < 120) rr = x, gg = c;
  else if (h < 180) gg = c, bb = x;
  else if (h < 240) gg = x, bb = c;
  else if (h < 300) rr = x, bb = c;
  else rr = c, bb = x;
  r = static_cast<uint8_t>(std::lround((rr + m) * 255));
  g = static_cast<uint8_t>(std::lround((gg + m) * 255));
  b = static_cast<uint8_t>(std::lround((bb + m) * 255));
}

struct Rendered {
  ObjectAnn ann;
  int mask_pixels = 0;
  int inside_box = 0;
};

// Rasterizes with 2x2 subsampling and records the tight pixel-mask box.
Rendered render_shape(Image& img, const ShapeSpec& s) {
  int size = img.width;
  int x_lo = std::max(0, static_cast<int>(s.cx - s.size / 2) - 1);
  int x_hi = std::min(size - 1, static_cast<int>(s.cx + s.size / 2) + 1);
  int y_lo = std::max(0, static_cast<int>(s.cy - s.size / 2) - 1);
  int y_hi = std::min(size - 1, static_cast<int>(s.cy + s.size / 2) + 1);
  int bx0 = size, bx1 = -1, by0 = size, by1 = -1;
  std::vector<std::pair<int, int>> mask;
  for (int y = y_lo; y <= y_hi; ++y) {
    for (int x = x_lo; x <= x_hi; ++x) {
      int hits = 0;
      for (int sy = 0; sy < 2; ++sy)
        for (int sx = 0; sx < 2; ++sx)
          if (inside_shape(s, x + 0.25 + 0.5 * sx, y + 0.25 + 0.5 * sy)) ++hits;
      if (hits == 0) continue;
      double cov = hits / 4.0;
      for (int ch = 0; ch < 3; ++ch) {
        double base = img.at(y, x, ch);
        double col = ch == 0 ? s.r : ch == 1 ? s.g : s.b;
        img.at(y, x, ch) = static_cast<uint8_t>(std::lround(base * (1 - cov) + col * cov));
      }
      mask.emplace_back(x, y);
      bx0 = std::min(bx0, x);
      bx1 = std::max(bx1, x);
      by0 = std::min(by0, y);
      by1 = std::max(by1, y);
    }
  }
  Rendered out;
  out.mask_pixels = static_cast<int>(mask.size());
  check(out.mask_pixels > 0, "generate_synthetic: degenerate shape rendered no pixels");
  out.ann.box = {(bx0 + bx1 + 1) / 2.0 / size, (by0 + by1 + 1) / 2.0 / size,
                 (bx1 + 1.0 - bx0) / size, (by1 + 1.0 - by0) / size};
  for (auto& [x, y] : mask)
    if (x >= bx0 && x <= bx1 && y >= by0 && y <= by1) ++out.inside_box;
  return out;
}

}  // namespace

std::string class_name(const SyntheticConfig& cfg, int class_id) {
  check(class_id >= 0 && class_id < cfg.num_classes(), "class_name: id out of range");
  int shape = class_id % 4;
  int hue = class_id / 4;
  std::string h = hue < 3 ? kHueNames[hue] : "hue" + std::to_string(hue);
  return h + "-" + kShapeNames[shape];
}

GenStats generate_synthetic(const SyntheticConfig& cfg, uint64_t seed,
                            const std::string& out_dir) {
  check(cfg.num_classes() >= 2, "generate_synthetic: need at least 2 classes");
  check(cfg.num_classes() <= 12, "generate_synthetic: at most 12 shape/hue classes");
  check(cfg.image_size >= 64, "generate_synthetic: image size too small");

  // Novel classes spread over the id range so they share shapes and hues
  // with base classes.
  std::vector<int> novel;
  int stride = cfg.num_classes() / std::max(1, cfg.num_novel);
  for (int i = 0; i < cfg.num_novel; ++i) novel.push_back(i * stride);
  std::vector<int> base;
  for (int cid = 0; cid < cfg.num_classes(); ++cid)
    if (std::find(novel.begin(), novel.end(), cid) == novel.end()) base.push_back(cid);
  check(static_cast<int>(base.size()) == cfg.num_base,
        "generate_synthetic: base/novel split does not cover the class count");

  Rng rng(seed);
  GenStats stats;

  auto gen_split = [&](const std::string& name, int count) {
    fs::create_directories(out_dir + "/" + name + "/images");
    std::ofstream ann(out_dir + "/" + name + "/annotations.jsonl");
    check(ann.good(), "generate_synthetic: cannot write annotations in " + out_dir);
    for (int idx = 0; idx < count; ++idx) {
      Image img;
      std::vector<ObjectAnn> objects;
      double attempt_min_containment = 1.0;
      bool placed_ok = false;
      for (int attempt = 0; attempt < 20 && !placed_ok; ++attempt) {
        uint8_t bg = static_cast<uint8_t>(rng.uniform_int(192, 215));
        img = Image::filled(cfg.image_size, cfg.image_size, bg, bg, bg);
        for (auto& px : img.data) {
          int noisy = px + static_cast<int>(rng.uniform_int(-14, 14));
          px = static_cast<uint8_t>(std::clamp(noisy, 0, 255));
        }
        objects.clear();
        attempt_min_containment = 1.0;
        int want = static_cast<int>(rng.uniform_int(cfg.min_instances, cfg.max_instances));
        std::vector<Box> placed;
        bool gave_up = false;
        for (int inst = 0; inst < want; ++inst) {
          bool ok = false;
          for (int retry = 0; retry < 60 && !ok; ++retry) {
            ShapeSpec spec;
            int cid = static_cast<int>(rng.uniform_int(0, cfg.num_classes() - 1));
            spec.shape = cid % 4;
            int hue_bucket = cid / 4;
            spec.size = rng.uniform(cfg.min_scale, cfg.max_scale) * cfg.image_size;
            double margin = spec.size / 2 + 2;
            spec.cx = rng.uniform(margin, cfg.image_size - margin);
            spec.cy = rng.uniform(margin, cfg.image_size - margin);
            spec.angle = rng.uniform(0.0, M_PI);
            double hue = hue_bucket * 120.0 + rng.uniform(-15.0, 15.0);
            hsv_to_rgb(hue, rng.uniform(0.6, 0.95), rng.uniform(0.6, 0.9), spec.r, spec.g,
                       spec.b);
            Box probe{spec.cx / cfg.image_size, spec.cy / cfg.image_size,
                      spec.size / cfg.image_size, spec.size / cfg.image_size};
            bool clear = true;
            for (const auto& p : placed)
              if (iou(probe, p) > cfg.max_pair_iou) clear = false;
            if (!clear) continue;
            Rendered r = render_shape(img, spec);
            r.ann.class_id = cid;
            objects.push_back(r.ann);
            placed.push_back(probe);
            attempt_min_containment = std::min(
                attempt_min_containment, static_cast<double>(r.inside_box) / r.mask_pixels);
            ok = true;
          }
          if (!ok && inst == 0) gave_up = true;
          if (!ok) break;  // keep the instances placed so far
        }
        placed_ok = !gave_up && !objects.empty();
      }
      check(placed_ok, "generate_synthetic: unsatisfiable overlap constraints after retries");
      stats.instances += static_cast<int>(objects.size());
      stats.min_box_pixel_containment =
          std::min(stats.min_box_pixel_containment, attempt_min_containment);

      char fname[64];
      std::snprintf(fname, sizeof(fname), "images/%06d.png", idx);
      write_png(out_dir + "/" + name + "/" + fname, img);
      ordered_json j;
      j["id"] = idx;
      j["file"] = fname;
      j["objects"] = ordered_json::array();
      for (const auto& o : objects) {
        ordered_json jo;
        jo["class_id"] = o.class_id;
        jo["box"] = {o.box.cx, o.box.cy, o.box.w, o.box.h};
        j["objects"].push_back(jo);
      }
      ann << j.dump() << "\n";
      ++stats.images;
    }
    ordered_json sp;
    sp["base"] = base;
    sp["novel"] = novel;
    std::ofstream spf(out_dir + "/" + name + "/splits.json");
    spf << sp.dump(2) << "\n";
  };

  gen_split("train", cfg.train_images);
  gen_split("val", cfg.val_images);
  return stats;
}

}  // namespace metadetr
