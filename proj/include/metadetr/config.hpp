#pragma once
#include <map>
#include <string>
#include <vector>

#include "metadetr/episodes.hpp"
#include "metadetr/pipeline.hpp"

namespace metadetr {

// Flat key=value run configuration. Unknown keys are rejected by name;
// '#' starts a comment. The METADETR_SEED environment variable overrides
// the seed key. preset=paper switches the model to the reference-scale
// sizing.
class Config {
 public:
  static Config defaults();
  static Config load(const std::string& path);
  void set(const std::string& key, const std::string& value);
  void apply_override(const std::string& key_eq_value);
  void apply_env();

  std::string get_str(const std::string& key) const;
  double get_double(const std::string& key) const;
  int get_int(const std::string& key) const;
  uint64_t get_u64(const std::string& key) const;

  ModelConfig model_config() const;
  TrainConfig train_config(TrainConfig::Stage stage) const;
  SyntheticConfig synthetic_config() const;
  LossConfig loss_config() const;

  const std::map<std::string, std::string>& entries() const { return kv_; }
  static const std::vector<std::pair<std::string, std::string>>& known_keys();

 private:
  std::map<std::string, std::string> kv_;
};

}  // namespace metadetr
