#pragma once
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "metadetr/cam.hpp"

namespace metadetr {

// Per-layer detection outputs. scores[l] holds N x C_max slot logits,
// boxes[l] holds N x 4 sigmoid-squashed (cx, cy, w, h); every decoder layer
// is kept so auxiliary losses can match each one independently.
struct DetectionSet {
  std::vector<Value> scores;
  std::vector<Value> boxes;
  int layers() const { return static_cast<int>(scores.size()); }
  const Value& final_scores() const { return scores.back(); }
  const Value& final_boxes() const { return boxes.back(); }
};

// Class-agnostic transformer encoder/decoder with learned object queries
// and a shared prediction head (one affine layer for slot confidence, a
// 3-layer MLP for boxes).
class Detector {
 public:
  Detector() = default;
  Detector(ParamStore& store, const std::string& prefix, int d, int heads, int enc_layers,
           int dec_layers, int num_queries, int c_max, int ffn_hidden, Rng& rng);

  Value encode(const Value& features, const Value& pos) const;
  std::vector<Value> decode(const Value& memory, const Value& pos) const;
  DetectionSet predict(const std::vector<Value>& embeddings) const;

  int num_queries() const { return num_queries_; }
  Value query_embeddings() const { return query_embed_; }

 private:
  struct EncLayer {
    LayerNorm ln1, ln2;
    MultiHeadAttention attn;
    FeedForward ffn;
  };
  struct DecLayer {
    LayerNorm ln1, ln2, ln3;
    MultiHeadAttention self_attn, cross_attn;
    FeedForward ffn;
  };
  int num_queries_ = 0;
  std::vector<EncLayer> enc_;
  LayerNorm enc_final_;
  Value query_embed_;  // N x d
  std::vector<DecLayer> dec_;
  LayerNorm dec_norm_;
  Linear cls_head_;
  Linear box_fc1_, box_fc2_, box_fc3_;
};

struct ModelConfig {
  int d = 64;
  int heads = 4;
  int enc_layers = 2;
  int dec_layers = 2;
  int num_queries = 20;
  int c_max = 5;
  int ffn_mult = 4;
  int num_classes = 12;  // size of the prototype-classification weight bank
  int roi_grid = 3;
  int roi_samples = 2;
  uint64_t init_seed = 1;
  BackboneConfig backbone;

  int ffn_hidden() const { return ffn_mult * d; }
  // Mirrors the reference-scale transformer sizing; too slow for tests.
  static ModelConfig paper_preset();
};

// The full few-shot detector: weight-shared backbone, correlational
// aggregation, transformer encoder/decoder, prediction head, and the class
// weight bank used by the prototype classification loss.
struct Model {
  ModelConfig cfg;
  ParamStore store;
  TaskEncodingTable table;
  Backbone backbone;
  Cam cam;
  Detector detector;
  Value class_weights;  // num_classes x d

  static Model build(const ModelConfig& cfg);

  // Query path to the CAM input: features + positional encodings, then the
  // weight-shared encoder.
  Value encode_query(const Image& img, Value* pos_out = nullptr) const;
  // Support path: same shared encoder, no positional term.
  FeatureMap encode_support(const Image& img) const;
  // Prototype of a single support shot.
  Value pool_support(const Image& img, const Box& box, bool* degenerate = nullptr) const;

  PrototypeSet make_prototype_set(const std::vector<std::pair<int, Value>>& class_vectors) const;

  DetectionSet detect(const Image& query, const PrototypeSet& protos,
                      MatchOutput* match_out = nullptr) const;
};

struct Detection {
  int image_id = -1;
  int class_id = -1;
  double score = 0.0;
  Box box;
};

// Prototypes keyed by dataset class, the unit of precomputation for
// inference.
struct ClassProtoBank {
  std::vector<int> class_ids;
  std::vector<Value> vectors;  // 1 x d each, no gradients

  void save(const std::string& path) const;
  static ClassProtoBank load(const std::string& path, int d);
};

// Runs detection over every class in the bank, chunking into
// ceil(classes / C_max) passes when the bank exceeds the encoding table,
// and returns all detections with sigmoid score >= threshold (no NMS).
std::vector<Detection> infer_detections(const Model& model, const Image& img,
                                        const ClassProtoBank& bank, double threshold,
                                        int* passes_out = nullptr);

}  // namespace metadetr
