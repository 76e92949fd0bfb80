#include "metadetr/config.hpp"

#include <cstdlib>
#include <fstream>

namespace metadetr {

const std::vector<std::pair<std::string, std::string>>& Config::known_keys() {
  static const std::vector<std::pair<std::string, std::string>> keys = {
      {"preset", "desk"},          // desk | paper
      {"seed", "7"},
      {"d", "64"},
      {"heads", "4"},
      {"enc_layers", "2"},
      {"dec_layers", "2"},
      {"num_queries", "20"},
      {"c_max", "5"},
      {"num_classes", "12"},
      {"backbone_widths", "16,32,64,64"},
      {"lr", "1e-3"},
      {"weight_decay", "1e-4"},
      {"batch_episodes", "4"},
      {"epochs", "20"},
      {"episodes_per_epoch", "2000"},
      {"lr_decay_epoch", "18"},
      {"lr_decay_factor", "0.1"},
      {"c_support", "5"},
      {"finetune_steps", "200"},
      {"early_stop_improvement", "0.01"},
      {"clip_grad_norm", "0.1"},
      {"threads", "1"},
      {"w_cls", "2"},
      {"w_l1", "5"},
      {"w_giou", "2"},
      {"focal_alpha", "0.25"},
      {"focal_gamma", "2"},
      {"proto_tau", "20"},
      {"proto_weight", "1"},
      {"num_base", "8"},
      {"num_novel", "4"},
      {"train_images", "2000"},
      {"val_images", "400"},
      {"image_size", "128"},
      {"score_thresh", "0.05"},
      {"k", "5"},
      {"runs", "3"},
      {"eval_shots", "10"},
  };
  return keys;
}

Config Config::defaults() {
  Config c;
  for (const auto& [k, v] : known_keys()) c.kv_[k] = v;
  return c;
}

void Config::set(const std::string& key, const std::string& value) {
  bool known = false;
  for (const auto& [k, _] : known_keys())
    if (k == key) known = true;
  check(known, "config: unknown key '" + key + "'");
  kv_[key] = value;
}

Config Config::load(const std::string& path) {
  Config c = defaults();
  std::ifstream is(path);
  check(is.good(), "config: cannot open " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto start = line.find_first_not_of(" \t\r");
    if (start == std::string::npos) continue;
    auto end = line.find_last_not_of(" \t\r");
    line = line.substr(start, end - start + 1);
    auto eq = line.find('=');
    check(eq != std::string::npos,
          "config: line " + std::to_string(lineno) + " is not key=value: '" + line + "'");
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    auto trim = [](std::string& s) {
      auto a = s.find_first_not_of(" \t");
      auto b = s.find_last_not_of(" \t");
      s = a == std::string::npos ? "" : s.substr(a, b - a + 1);
    };
    trim(key);
    trim(value);
    c.set(key, value);
  }
  return c;
}

void Config::apply_override(const std::string& kv) {
  auto eq = kv.find('=');
  check(eq != std::string::npos, "config: override must be key=value, got '" + kv + "'");
  set(kv.substr(0, eq), kv.substr(eq + 1));
}

void Config::apply_env() {
  if (const char* s = std::getenv("METADETR_SEED")) kv_["seed"] = s;
}

std::string Config::get_str(const std::string& key) const {
  auto it = kv_.find(key);
  check(it != kv_.end(), "config: missing key '" + key + "'");
  return it->second;
}

double Config::get_double(const std::string& key) const {
  const std::string s = get_str(key);
  size_t pos = 0;
  double v = std::stod(s, &pos);
  check(pos == s.size(), "config: key '" + key + "' is not a number: '" + s + "'");
  return v;
}

int Config::get_int(const std::string& key) const {
  const std::string s = get_str(key);
  size_t pos = 0;
  int v = std::stoi(s, &pos);
  check(pos == s.size(), "config: key '" + key + "' is not an integer: '" + s + "'");
  return v;
}

uint64_t Config::get_u64(const std::string& key) const {
  const std::string s = get_str(key);
  size_t pos = 0;
  uint64_t v = std::stoull(s, &pos);
  check(pos == s.size(), "config: key '" + key + "' is not an integer: '" + s + "'");
  return v;
}

ModelConfig Config::model_config() const {
  if (get_str("preset") == "paper") {
    ModelConfig cfg = ModelConfig::paper_preset();
    cfg.init_seed = get_u64("seed");
    cfg.num_classes = get_int("num_classes");
    return cfg;
  }
  check(get_str("preset") == "desk", "config: preset must be desk or paper");
  ModelConfig cfg;
  cfg.d = get_int("d");
  cfg.heads = get_int("heads");
  cfg.enc_layers = get_int("enc_layers");
  cfg.dec_layers = get_int("dec_layers");
  cfg.num_queries = get_int("num_queries");
  cfg.c_max = get_int("c_max");
  cfg.num_classes = get_int("num_classes");
  cfg.init_seed = get_u64("seed");
  cfg.backbone.out_dim = cfg.d;
  cfg.backbone.widths.clear();
  std::string widths = get_str("backbone_widths");
  size_t pos = 0;
  while (pos < widths.size()) {
    size_t comma = widths.find(',', pos);
    if (comma == std::string::npos) comma = widths.size();
    cfg.backbone.widths.push_back(std::stoi(widths.substr(pos, comma - pos)));
    pos = comma + 1;
  }
  return cfg;
}

TrainConfig Config::train_config(TrainConfig::Stage stage) const {
  TrainConfig cfg;
  cfg.stage = stage;
  if (get_str("preset") == "paper") {
    cfg.lr = 2e-4;
    cfg.weight_decay = 1e-4;
    cfg.batch_episodes = 32;
    cfg.epochs = 50;
    cfg.lr_decay_epoch = 45;
    cfg.lr_decay_factor = 0.1;
  } else {
    cfg.lr = get_double("lr");
    cfg.weight_decay = get_double("weight_decay");
    cfg.batch_episodes = get_int("batch_episodes");
    cfg.epochs = get_int("epochs");
    cfg.lr_decay_epoch = get_int("lr_decay_epoch");
    cfg.lr_decay_factor = get_double("lr_decay_factor");
  }
  cfg.episodes_per_epoch = get_int("episodes_per_epoch");
  cfg.c_support = get_int("c_support");
  cfg.seed = get_u64("seed");
  cfg.finetune_steps = get_int("finetune_steps");
  cfg.early_stop_improvement = get_double("early_stop_improvement");
  cfg.clip_grad_norm = get_double("clip_grad_norm");
  cfg.threads = get_int("threads");
  cfg.loss = loss_config();
  return cfg;
}

LossConfig Config::loss_config() const {
  LossConfig cfg;
  cfg.weights.cls = get_double("w_cls");
  cfg.weights.l1 = get_double("w_l1");
  cfg.weights.giou = get_double("w_giou");
  cfg.focal_alpha = get_double("focal_alpha");
  cfg.focal_gamma = get_double("focal_gamma");
  cfg.proto_tau = get_double("proto_tau");
  cfg.proto_weight = get_double("proto_weight");
  return cfg;
}

SyntheticConfig Config::synthetic_config() const {
  SyntheticConfig cfg;
  cfg.num_base = get_int("num_base");
  cfg.num_novel = get_int("num_novel");
  cfg.train_images = get_int("train_images");
  cfg.val_images = get_int("val_images");
  cfg.image_size = get_int("image_size");
  return cfg;
}

}  // namespace metadetr
