#include "metadetr/param.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace metadetr {

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

namespace {
constexpr char kMagic[5] = {'M', 'D', 'T', 'R', '1'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}
}  // namespace

Value ParamStore::get_or_create(const std::string& name, int rows, int cols,
                                const std::function<void(std::vector<double>&)>& init) {
  auto it = index_.find(name);
  if (it != index_.end()) {
    Value v = params_[it->second].value;
    check(v.rows() == rows && v.cols() == cols,
          "parameter '" + name + "' already registered with shape " + shape_str(*v.node()));
    return v;
  }
  Value v = Value::zeros(rows, cols, /*requires_grad=*/true);
  v.node()->param_index = static_cast<int>(params_.size());
  init(v.data());
  index_[name] = params_.size();
  params_.push_back({name, v});
  return v;
}

Value ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  check(it != index_.end(), "unknown parameter '" + name + "'");
  return params_[it->second].value;
}

size_t ParamStore::scalar_count() const {
  size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

void ParamStore::accumulate(const GradSink& sink, double scl) {
  for (size_t i = 0; i < sink.by_param.size() && i < params_.size(); ++i) {
    const auto& buf = sink.by_param[i];
    if (buf.empty()) continue;
    auto& grad = params_[i].value.node()->grad;
    check(buf.size() == grad.size(), "gradient sink size mismatch for '" + params_[i].name + "'");
    for (size_t j = 0; j < buf.size(); ++j) grad[j] += scl * buf[j];
  }
}

void ParamStore::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  check(os.good(), "cannot open checkpoint for writing: " + path);
  os.write(kMagic, sizeof(kMagic));
  put<uint32_t>(os, static_cast<uint32_t>(params_.size()));
  uint64_t offset = 0;
  for (const auto& p : params_) {
    put<uint16_t>(os, static_cast<uint16_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put<uint8_t>(os, 2);
    put<uint32_t>(os, static_cast<uint32_t>(p.value.rows()));
    put<uint32_t>(os, static_cast<uint32_t>(p.value.cols()));
    put<uint64_t>(os, offset);
    offset += p.value.size();
  }
  put<uint64_t>(os, offset);
  for (const auto& p : params_)
    os.write(reinterpret_cast<const char*>(p.value.data().data()),
             static_cast<std::streamsize>(p.value.size() * sizeof(double)));
  check(os.good(), "checkpoint write failed: " + path);
}

void ParamStore::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(is.good(), "cannot open checkpoint: " + path);
  char magic[5];
  is.read(magic, 5);
  check(is.good() && std::memcmp(magic, kMagic, 5) == 0,
        "not a checkpoint file (bad magic): " + path);
  uint32_t count = take<uint32_t>(is);
  struct Entry {
    std::string name;
    uint32_t rows, cols;
    uint64_t offset;
  };
  std::vector<Entry> entries(count);
  for (auto& e : entries) {
    uint16_t len = take<uint16_t>(is);
    e.name.resize(len);
    is.read(e.name.data(), len);
    uint8_t rank = take<uint8_t>(is);
    check(rank == 2, "unsupported tensor rank in checkpoint: " + std::to_string(rank));
    e.rows = take<uint32_t>(is);
    e.cols = take<uint32_t>(is);
    e.offset = take<uint64_t>(is);
  }
  uint64_t total = take<uint64_t>(is);
  std::vector<double> buffer(total);
  is.read(reinterpret_cast<char*>(buffer.data()),
          static_cast<std::streamsize>(total * sizeof(double)));
  check(is.good(), "truncated checkpoint: " + path);

  std::map<std::string, const Entry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  for (auto& p : params_) {
    auto it = by_name.find(p.name);
    check(it != by_name.end(), "checkpoint is missing parameter '" + p.name + "'");
    const Entry& e = *it->second;
    check(static_cast<int>(e.rows) == p.value.rows() && static_cast<int>(e.cols) == p.value.cols(),
          "checkpoint shape mismatch for '" + p.name + "'");
    check(e.offset + p.value.size() <= total, "checkpoint offset out of range for '" + p.name + "'");
    std::copy(buffer.begin() + static_cast<ptrdiff_t>(e.offset),
              buffer.begin() + static_cast<ptrdiff_t>(e.offset + p.value.size()),
              p.value.data().begin());
    by_name.erase(it);
  }
  check(by_name.empty(),
        "checkpoint has unknown parameter '" +
            (by_name.empty() ? std::string() : by_name.begin()->first) + "'");
}

std::vector<CheckpointEntry> checkpoint_manifest(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(is.good(), "cannot open checkpoint: " + path);
  char magic[5];
  is.read(magic, 5);
  check(is.good() && std::memcmp(magic, kMagic, 5) == 0,
        "not a checkpoint file (bad magic): " + path);
  uint32_t count = take<uint32_t>(is);
  std::vector<CheckpointEntry> entries(count);
  for (auto& e : entries) {
    uint16_t len = take<uint16_t>(is);
    e.name.resize(len);
    is.read(e.name.data(), len);
    uint8_t rank = take<uint8_t>(is);
    check(rank == 2, "unsupported tensor rank in checkpoint: " + std::to_string(rank));
    e.rows = static_cast<int>(take<uint32_t>(is));
    e.cols = static_cast<int>(take<uint32_t>(is));
    take<uint64_t>(is);
  }
  check(is.good(), "truncated checkpoint manifest: " + path);
  return entries;
}

std::function<void(std::vector<double>&)> init_zeros() {
  return [](std::vector<double>& d) { std::fill(d.begin(), d.end(), 0.0); };
}

std::function<void(std::vector<double>&)> init_const(double v) {
  return [v](std::vector<double>& d) { std::fill(d.begin(), d.end(), v); };
}

std::function<void(std::vector<double>&)> init_normal(Rng& rng, double stddev) {
  return [&rng, stddev](std::vector<double>& d) {
    for (auto& x : d) x = rng.normal(0.0, stddev);
  };
}

std::function<void(std::vector<double>&)> init_xavier(Rng& rng, int fan_in, int fan_out) {
  double bound = std::sqrt(6.0 / (fan_in + fan_out));
  return [&rng, bound](std::vector<double>& d) {
    for (auto& x : d) x = rng.uniform(-bound, bound);
  };
}

}  // namespace metadetr
