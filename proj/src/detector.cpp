#include "metadetr/detector.hpp"

#include <cmath>

#include "metadetr/ops.hpp"

namespace metadetr {

Detector::Detector(ParamStore& store, const std::string& prefix, int d, int heads,
                   int enc_layers, int dec_layers, int num_queries, int c_max, int ffn_hidden,
                   Rng& rng)
    : num_queries_(num_queries) {
  for (int i = 0; i < enc_layers; ++i) {
    std::string p = prefix + ".enc" + std::to_string(i);
    EncLayer layer;
    layer.ln1 = LayerNorm(store, p + ".ln1", d);
    layer.ln2 = LayerNorm(store, p + ".ln2", d);
    layer.attn = MultiHeadAttention(store, p + ".attn", d, heads, rng);
    layer.ffn = FeedForward(store, p + ".ffn", d, ffn_hidden, rng);
    enc_.push_back(std::move(layer));
  }
  enc_final_ = LayerNorm(store, prefix + ".enc_final_ln", d);
  query_embed_ = store.get_or_create(prefix + ".query_embed", num_queries, d,
                                     init_normal(rng, 1.0));
  for (int i = 0; i < dec_layers; ++i) {
    std::string p = prefix + ".dec" + std::to_string(i);
    DecLayer layer;
    layer.ln1 = LayerNorm(store, p + ".ln1", d);
    layer.ln2 = LayerNorm(store, p + ".ln2", d);
    layer.ln3 = LayerNorm(store, p + ".ln3", d);
    layer.self_attn = MultiHeadAttention(store, p + ".self_attn", d, heads, rng);
    layer.cross_attn = MultiHeadAttention(store, p + ".cross_attn", d, heads, rng);
    layer.ffn = FeedForward(store, p + ".ffn", d, ffn_hidden, rng);
    dec_.push_back(std::move(layer));
  }
  dec_norm_ = LayerNorm(store, prefix + ".dec_ln", d);
  cls_head_ = Linear(store, prefix + ".cls_head", d, c_max, rng);
  box_fc1_ = Linear(store, prefix + ".box_fc1", d, d, rng);
  box_fc2_ = Linear(store, prefix + ".box_fc2", d, d, rng);
  box_fc3_ = Linear(store, prefix + ".box_fc3", d, 4, rng);
}

Value Detector::encode(const Value& features, const Value& pos) const {
  Value x = features;
  for (const auto& layer : enc_) {
    Value h = layer.ln1.apply(x);
    Value qk = add(h, pos);
    x = add(x, layer.attn.apply(qk, qk, h));
    Value h2 = layer.ln2.apply(x);
    x = add(x, layer.ffn.apply(h2));
  }
  return enc_final_.apply(x);
}

std::vector<Value> Detector::decode(const Value& memory, const Value& pos) const {
  Value keys = add(memory, pos);
  Value y = query_embed_;
  std::vector<Value> out;
  out.reserve(dec_.size());
  for (const auto& layer : dec_) {
    Value h = layer.ln1.apply(y);
    y = add(y, layer.self_attn.apply(h, h, h));
    h = layer.ln2.apply(y);
    y = add(y, layer.cross_attn.apply(h, keys, memory));
    h = layer.ln3.apply(y);
    y = add(y, layer.ffn.apply(h));
    out.push_back(dec_norm_.apply(y));
  }
  return out;
}

DetectionSet Detector::predict(const std::vector<Value>& embeddings) const {
  DetectionSet det;
  for (const auto& emb : embeddings) {
    det.scores.push_back(cls_head_.apply(emb));
    Value h = relu(box_fc1_.apply(emb));
    h = relu(box_fc2_.apply(h));
    det.boxes.push_back(sigmoid(box_fc3_.apply(h)));
  }
  return det;
}

ModelConfig ModelConfig::paper_preset() {
  ModelConfig cfg;
  cfg.d = 256;
  cfg.heads = 8;
  cfg.enc_layers = 5;  // the aggregation module counts as the first of 6
  cfg.dec_layers = 6;
  cfg.num_queries = 300;
  cfg.c_max = 5;
  cfg.ffn_mult = 4;
  cfg.backbone.widths = {64, 128, 256, 256};
  cfg.backbone.out_dim = 256;
  return cfg;
}

Model Model::build(const ModelConfig& cfg) {
  check(cfg.backbone.out_dim == cfg.d, "model: backbone output dim must equal d");
  Model m;
  m.cfg = cfg;
  Rng rng(cfg.init_seed);
  m.table = build_table(cfg.c_max, cfg.d);
  m.backbone = Backbone(m.store, "backbone", cfg.backbone, rng);
  m.cam = Cam(m.store, "cam", cfg.d, cfg.heads, cfg.ffn_hidden(), rng);
  m.detector = Detector(m.store, "detector", cfg.d, cfg.heads, cfg.enc_layers, cfg.dec_layers,
                        cfg.num_queries, cfg.c_max, cfg.ffn_hidden(), rng);
  m.class_weights = m.store.get_or_create("proto_cls.weights", cfg.num_classes, cfg.d,
                                          init_xavier(rng, cfg.num_classes, cfg.d));
  return m;
}

Value Model::encode_query(const Image& img, Value* pos_out) const {
  FeatureMap fm = backbone.extract(img);
  Value pos = positional_encode(fm);
  if (pos_out) *pos_out = pos;
  return cam.shared_encode(add(fm.feat, pos));
}

FeatureMap Model::encode_support(const Image& img) const {
  FeatureMap fm = backbone.extract(img);
  fm.feat = cam.shared_encode(fm.feat);
  return fm;
}

Value Model::pool_support(const Image& img, const Box& box, bool* degenerate) const {
  FeatureMap fm = encode_support(img);
  return roi_align_pool(fm, box, cfg.roi_grid, cfg.roi_samples, degenerate);
}

PrototypeSet Model::make_prototype_set(
    const std::vector<std::pair<int, Value>>& class_vectors) const {
  PrototypeSet set;
  set.bg = cam.bg_prototype();
  set.encodings = &table;
  int slot = 1;
  for (const auto& [class_id, vec] : class_vectors)
    set.prototypes.push_back({class_id, slot++, vec});
  return set;
}

DetectionSet Model::detect(const Image& query, const PrototypeSet& protos,
                           MatchOutput* match_out) const {
  Value pos;
  Value q = encode_query(query, &pos);
  MatchOutput mo = cam.match(q, protos);
  if (match_out) *match_out = mo;
  Value memory = detector.encode(mo.features, pos);
  std::vector<Value> embeddings = detector.decode(memory, pos);
  return detector.predict(embeddings);
}

void ClassProtoBank::save(const std::string& path) const {
  ParamStore store;
  for (size_t i = 0; i < class_ids.size(); ++i) {
    Value v = store.get_or_create("proto." + std::to_string(class_ids[i]), 1,
                                  vectors[i].cols(), init_zeros());
    v.data() = vectors[i].data();
  }
  store.save(path);
}

ClassProtoBank ClassProtoBank::load(const std::string& path, int d) {
  ClassProtoBank bank;
  ParamStore store;
  for (const auto& e : checkpoint_manifest(path)) store.get_or_create(e.name, 1, d, init_zeros());
  store.load(path);
  for (const auto& p : store.all()) {
    check(p.name.rfind("proto.", 0) == 0, "unexpected entry in prototype file: " + p.name);
    bank.class_ids.push_back(std::stoi(p.name.substr(6)));
    bank.vectors.push_back(Value::from_data(1, d, p.value.data()));
  }
  return bank;
}

std::vector<Detection> infer_detections(const Model& model, const Image& img,
                                        const ClassProtoBank& bank, double threshold,
                                        int* passes_out) {
  check(threshold >= 0.0 && threshold <= 1.0, "infer: threshold must be in [0, 1]");
  check(!bank.class_ids.empty(), "infer: empty prototype bank");
  int c_max = model.cfg.c_max;
  int total = static_cast<int>(bank.class_ids.size());
  int passes = (total + c_max - 1) / c_max;
  if (passes_out) *passes_out = passes;

  std::vector<Detection> dets;
  for (int p = 0; p < passes; ++p) {
    int begin = p * c_max;
    int end = std::min(total, begin + c_max);
    std::vector<std::pair<int, Value>> chunk;
    for (int i = begin; i < end; ++i) chunk.emplace_back(bank.class_ids[i], bank.vectors[i]);
    PrototypeSet protos = model.make_prototype_set(chunk);
    DetectionSet det = model.detect(img, protos);
    const Value& scores = det.final_scores();
    const Value& boxes = det.final_boxes();
    int c = static_cast<int>(chunk.size());
    for (int q = 0; q < scores.rows(); ++q) {
      for (int s = 0; s < c; ++s) {
        double prob = 1.0 / (1.0 + std::exp(-scores.at(q, s)));
        if (prob >= threshold) {
          Detection d;
          d.class_id = protos.class_of_slot(s + 1);
          d.score = prob;
          d.box = {boxes.at(q, 0), boxes.at(q, 1), boxes.at(q, 2), boxes.at(q, 3)};
          dets.push_back(d);
        }
      }
    }
  }
  return dets;
}

}  // namespace metadetr
