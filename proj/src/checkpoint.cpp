#include "anrl/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace anrl {

namespace {

constexpr char kMagic[8] = {'A', 'N', 'R', 'L', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::ostream& o, T v) {
  o.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

std::string bn_name(std::size_t block, const char* field) {
  return "bn." + std::to_string(block) + "." + field;
}

}  // namespace

Checkpoint make_checkpoint(const ExperimentConfig& cfg, const Model& model) {
  Checkpoint c;
  c.config_text = to_text(cfg);
  c.config_hash = config_hash(cfg);
  for (const auto& e : model.params.entries()) {
    auto d = e.value.data();
    c.arrays.push_back({e.name, e.value.shape(), {d.begin(), d.end()}});
  }
  for (std::size_t b = 0; b < model.bn.size(); ++b) {
    const auto& s = model.bn[b];
    c.arrays.push_back({bn_name(b, "running_mean"), {s.running_mean.size()}, s.running_mean});
    c.arrays.push_back({bn_name(b, "running_var"), {s.running_var.size()}, s.running_var});
  }
  return c;
}

void write_checkpoint(const std::string& path, const Checkpoint& c) {
  std::ofstream o(path, std::ios::binary | std::ios::trunc);
  if (!o) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  o.write(kMagic, sizeof(kMagic));
  put(o, kCheckpointVersion);
  put(o, c.config_hash);
  put(o, static_cast<std::uint32_t>(c.config_text.size()));
  o.write(c.config_text.data(), static_cast<std::streamsize>(c.config_text.size()));
  put(o, static_cast<std::uint32_t>(c.arrays.size()));
  for (const auto& a : c.arrays) {
    if (shape_numel(a.shape) != a.data.size()) throw ShapeError("checkpoint: array " + a.name + " shape/data mismatch");
    put(o, static_cast<std::uint32_t>(a.name.size()));
    o.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
    put(o, static_cast<std::uint32_t>(a.shape.size()));
    for (auto d : a.shape) put(o, static_cast<std::uint64_t>(d));
    o.write(reinterpret_cast<const char*>(a.data.data()), static_cast<std::streamsize>(a.data.size() * sizeof(double)));
  }
  if (!o) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(magic)) != 0) throw std::runtime_error("checkpoint: bad magic in " + path);
  const auto version = get<std::uint32_t>(in);
  if (version != kCheckpointVersion) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint c;
  c.config_hash = get<std::uint64_t>(in);
  c.config_text.resize(get<std::uint32_t>(in));
  in.read(c.config_text.data(), static_cast<std::streamsize>(c.config_text.size()));
  const auto count = get<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name.resize(get<std::uint32_t>(in));
    in.read(a.name.data(), static_cast<std::streamsize>(a.name.size()));
    const auto rank = get<std::uint32_t>(in);
    if (rank > 8) throw std::runtime_error("checkpoint: implausible rank for " + a.name);
    for (std::uint32_t r = 0; r < rank; ++r) a.shape.push_back(static_cast<std::size_t>(get<std::uint64_t>(in)));
    a.data.resize(shape_numel(a.shape));
    in.read(reinterpret_cast<char*>(a.data.data()), static_cast<std::streamsize>(a.data.size() * sizeof(double)));
    if (!in) throw std::runtime_error("checkpoint: truncated array " + a.name);
    c.arrays.push_back(std::move(a));
  }
  return c;
}

Model restore_model(const Checkpoint& ckpt, ExperimentConfig* cfg_out) {
  ExperimentConfig cfg = parse_config(ckpt.config_text);
  if (config_hash(cfg) != ckpt.config_hash) throw std::runtime_error("checkpoint: config hash does not match its config text");
  Model m = build_model(cfg.network, cfg.train.seed);
  std::map<std::string, const NamedArray*> by_name;
  for (const auto& a : ckpt.arrays) {
    if (!by_name.emplace(a.name, &a).second) throw std::runtime_error("checkpoint: duplicate array " + a.name);
  }
  auto take = [&](const std::string& name, const Shape& shape) -> const std::vector<double>& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint: missing array " + name);
    if (it->second->shape != shape) {
      throw ShapeError("checkpoint: array " + name + " has shape " + shape_str(it->second->shape) + ", model expects " +
                       shape_str(shape));
    }
    const auto& data = it->second->data;
    by_name.erase(it);
    return data;
  };
  for (const auto& e : m.params.entries()) {
    const auto& src = take(e.name, e.value.shape());
    Tensor t = e.value;
    auto dst = t.mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  for (std::size_t b = 0; b < m.bn.size(); ++b) {
    auto& s = m.bn[b];
    s.running_mean = take(bn_name(b, "running_mean"), {s.running_mean.size()});
    s.running_var = take(bn_name(b, "running_var"), {s.running_var.size()});
  }
  if (!by_name.empty()) throw std::runtime_error("checkpoint: unknown array " + by_name.begin()->first);
  if (cfg_out) *cfg_out = cfg;
  return m;
}

}  // namespace anrl
