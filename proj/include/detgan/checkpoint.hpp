#pragma once

// Checkpoint layout (little-endian):
//   "DGCK"            4-byte magic
//   u32 version       currently 1
//   u32 count
//   count x { u32 name_len, name bytes, u32 rank, u64 dims[rank],
//             f64 values[prod(dims)] }

#include <string>
#include <utility>
#include <vector>

#include "detgan/errors.hpp"
#include "detgan/tensor.hpp"

namespace detgan {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const NamedTensors& tensors);
NamedTensors decode_checkpoint(std::string_view bytes);
void write_checkpoint(const std::string& path, const NamedTensors& tensors);
NamedTensors read_checkpoint(const std::string& path);

template <class P>
void append_named(const P& params, const std::string& prefix, NamedTensors& out) {
  params.visit([&](const std::string& name, const Tensor& t) { out.emplace_back(prefix + name, t); });
}

/// Overwrite `params` with the tensors stored under `prefix`. Missing names
/// or shape mismatches raise ParseError.
template <class P>
void load_named(P& params, const std::string& prefix, const NamedTensors& stored) {
  params.visit([&](const std::string& name, Tensor& t) {
    const std::string key = prefix + name;
    for (const auto& [n, v] : stored) {
      if (n != key) continue;
      if (v.shape() != t.shape()) {
        throw ParseError("checkpoint tensor '" + key + "' has shape " + shape_str(v.shape()) +
                             ", expected " + shape_str(t.shape()),
                         0);
      }
      t = Tensor::parameter(v.shape(), {v.data().begin(), v.data().end()});
      return;
    }
    throw ParseError("checkpoint is missing tensor '" + key + "'", 0);
  });
}

}  // namespace detgan
