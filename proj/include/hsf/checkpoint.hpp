#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "hsf/config.hpp"
#include "hsf/net.hpp"

namespace hsf {

struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

/// File layout, all integers little-endian u32:
///   "3DTC" | n_lines | n_lines x (len, UTF-8 "key=value")
///   | n_tensors | n_tensors x (len, name, ndim, dims..., float32 data)
struct Checkpoint {
  KeyValueConfig config;
  std::vector<TensorRecord> tensors;

  const TensorRecord* find(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

template <typename T>
TensorRecord make_record(const std::string& name, const DiffTensor<T>& t);
template <typename T>
TensorRecord make_record(const std::string& name, const Shape& shape, const std::vector<T>& values);

/// Config + every parameter in registration order.
template <typename T>
Checkpoint make_checkpoint(const FusionNet<T>& net);

/// Copies stored values into `net`. Names and shapes must match exactly.
template <typename T>
void load_parameters(FusionNet<T>& net, const Checkpoint& ckpt);

/// Rebuilds the network described by the embedded config and loads it.
template <typename T>
FusionNet<T> load_network(const Checkpoint& ckpt);

}  // namespace hsf
