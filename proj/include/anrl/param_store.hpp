#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "anrl/tensor.hpp"

namespace anrl {

/// Which optimizer owns a parameter: F is the normalization-module set
/// updated by the meta schedule, Base is everything else.
enum class Partition { F, Base };

const char* partition_name(Partition p);

struct ParamEntry {
  std::string name;
  Tensor value;
  Partition tag;
};

/// Named parameter table, iterated in insertion order.
class ParamStore {
 public:
  void add(std::string name, Tensor value, Partition tag);

  bool contains(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  Partition tag(const std::string& name) const;
  /// Replace the tensor bound to an existing name, keeping its tag.
  void rebind(const std::string& name, Tensor value);

  const std::vector<ParamEntry>& entries() const { return entries_; }
  std::vector<std::string> names(Partition tag) const;
  std::size_t count(Partition tag) const;
  std::size_t numel(Partition tag) const;

  void set_requires_grad(Partition tag, bool on);
  void zero_grad();

  /// Concatenated values (or grads, zero where absent) of one partition.
  std::vector<double> flatten(Partition tag) const;
  std::vector<double> flatten_grad(Partition tag) const;
  void assign_flat(Partition tag, const std::vector<double>& values);

  /// Fresh leaves with copied values; shares nothing with this store.
  ParamStore deep_copy() const;

  /// FNV-1a over names and raw bytes of one partition.
  std::uint64_t hash(Partition tag) const;

 private:
  std::size_t index_of(const std::string& name) const;
  std::vector<ParamEntry> entries_;
};

std::uint64_t fnv1a(const void* bytes, std::size_t size, std::uint64_t seed = 14695981039346656037ULL);

}  // namespace anrl
