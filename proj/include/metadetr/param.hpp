#pragma once
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "metadetr/rng.hpp"
#include "metadetr/value.hpp"

namespace metadetr {

struct Parameter {
  std::string name;
  Value value;
};

// Owns every learned tensor of a model, keyed by a unique path-style name.
// Registration order is fixed by construction order and doubles as the
// parameter index used for gradient sinks and the optimizer state.
class ParamStore {
 public:
  // Creates the parameter on first request, fetches it afterwards (shape
  // checked). init fills the fresh buffer.
  Value get_or_create(const std::string& name, int rows, int cols,
                      const std::function<void(std::vector<double>&)>& init);

  Value get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  const std::vector<Parameter>& all() const { return params_; }
  size_t count() const { return params_.size(); }
  size_t scalar_count() const;

  void zero_grad();
  // Adds a sink's buffers (scaled) into the parameter gradients.
  void accumulate(const GradSink& sink, double scl = 1.0);

  void save(const std::string& path) const;
  // Loads by name; every stored entry must match an existing parameter and
  // every parameter must be present.
  void load(const std::string& path);

 private:
  std::vector<Parameter> params_;
  std::map<std::string, size_t> index_;
};

struct CheckpointEntry {
  std::string name;
  int rows = 0;
  int cols = 0;
};

// Reads just the manifest of a checkpoint file.
std::vector<CheckpointEntry> checkpoint_manifest(const std::string& path);

// Common initializers.
std::function<void(std::vector<double>&)> init_zeros();
std::function<void(std::vector<double>&)> init_const(double v);
std::function<void(std::vector<double>&)> init_normal(Rng& rng, double stddev);
// Xavier-uniform for a fan_in x fan_out weight.
std::function<void(std::vector<double>&)> init_xavier(Rng& rng, int fan_in, int fan_out);

}  // namespace metadetr
