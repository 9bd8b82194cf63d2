#include "anrl/param_store.hpp"

#include <algorithm>
#include <stdexcept>

namespace anrl {

const char* partition_name(Partition p) { return p == Partition::F ? "F" : "base"; }

std::uint64_t fnv1a(const void* bytes, std::size_t size, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

void ParamStore::add(std::string name, Tensor value, Partition tag) {
  if (contains(name)) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
  if (!value.is_leaf()) throw std::invalid_argument("ParamStore: " + name + " is not a leaf");
  entries_.push_back({std::move(name), std::move(value), tag});
}

bool ParamStore::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const ParamEntry& e) { return e.name == name; });
}

std::size_t ParamStore::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name == name) return i;
  }
  throw std::out_of_range("ParamStore: unknown parameter " + name);
}

const Tensor& ParamStore::get(const std::string& name) const { return entries_[index_of(name)].value; }

Partition ParamStore::tag(const std::string& name) const { return entries_[index_of(name)].tag; }

void ParamStore::rebind(const std::string& name, Tensor value) {
  auto& e = entries_[index_of(name)];
  if (value.shape() != e.value.shape()) throw ShapeError("ParamStore::rebind: shape change for " + name);
  e.value = std::move(value);
}

std::vector<std::string> ParamStore::names(Partition tag) const {
  std::vector<std::string> out;
  for (const auto& e : entries_) {
    if (e.tag == tag) out.push_back(e.name);
  }
  return out;
}

std::size_t ParamStore::count(Partition tag) const {
  return static_cast<std::size_t>(
      std::count_if(entries_.begin(), entries_.end(), [&](const ParamEntry& e) { return e.tag == tag; }));
}

std::size_t ParamStore::numel(Partition tag) const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (e.tag == tag) n += e.value.numel();
  }
  return n;
}

void ParamStore::set_requires_grad(Partition tag, bool on) {
  for (auto& e : entries_) {
    if (e.tag == tag) e.value.set_requires_grad(on);
  }
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.value.zero_grad();
}

std::vector<double> ParamStore::flatten(Partition tag) const {
  std::vector<double> out;
  out.reserve(numel(tag));
  for (const auto& e : entries_) {
    if (e.tag != tag) continue;
    auto d = e.value.data();
    out.insert(out.end(), d.begin(), d.end());
  }
  return out;
}

std::vector<double> ParamStore::flatten_grad(Partition tag) const {
  std::vector<double> out;
  out.reserve(numel(tag));
  for (const auto& e : entries_) {
    if (e.tag != tag) continue;
    if (e.value.has_grad()) {
      auto g = e.value.grad();
      out.insert(out.end(), g.begin(), g.end());
    } else {
      out.insert(out.end(), e.value.numel(), 0.0);
    }
  }
  return out;
}

void ParamStore::assign_flat(Partition tag, const std::vector<double>& values) {
  if (values.size() != numel(tag)) {
    throw ShapeError("ParamStore::assign_flat: expected " + std::to_string(numel(tag)) + " values, got " +
                     std::to_string(values.size()));
  }
  std::size_t at = 0;
  for (auto& e : entries_) {
    if (e.tag != tag) continue;
    auto d = e.value.mutable_data();
    std::copy(values.begin() + static_cast<std::ptrdiff_t>(at),
              values.begin() + static_cast<std::ptrdiff_t>(at + d.size()), d.begin());
    at += d.size();
  }
}

ParamStore ParamStore::deep_copy() const {
  ParamStore out;
  for (const auto& e : entries_) {
    Tensor t = e.value.detach();
    t.set_requires_grad(e.value.requires_grad());
    out.entries_.push_back({e.name, std::move(t), e.tag});
  }
  return out;
}

std::uint64_t ParamStore::hash(Partition tag) const {
  std::uint64_t h = 14695981039346656037ULL;
  for (const auto& e : entries_) {
    if (e.tag != tag) continue;
    h = fnv1a(e.name.data(), e.name.size(), h);
    auto d = e.value.data();
    h = fnv1a(d.data(), d.size() * sizeof(double), h);
  }
  return h;
}

}  // namespace anrl
