#include "detgan/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "detgan/bytes.hpp"

namespace detgan {

std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write to '" + path + "' failed");
}

std::string encode_checkpoint(const NamedTensors& tensors) {
  ByteWriter w;
  w.raw("DGCK");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.raw(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u64(d);
    for (double v : t.data()) w.f64(v);
  }
  return w.take();
}

NamedTensors decode_checkpoint(std::string_view bytes) {
  ByteReader r(bytes);
  if (r.raw(4) != "DGCK") r.fail_at("bad checkpoint magic", 0);
  const auto version = r.u32();
  if (version != kCheckpointVersion) r.fail_at("unsupported checkpoint version " + std::to_string(version), 4);
  const auto count = r.u32();
  NamedTensors out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.u32();
    std::string name(r.raw(name_len));
    const auto rank = r.u32();
    if (rank > 8) r.fail("implausible tensor rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    const std::size_t n = shape_numel(shape);
    if (n > r.remaining() / 8) r.fail("tensor '" + name + "' overruns the file");
    std::vector<double> values(n);
    for (auto& v : values) v = r.f64();
    try {
      out.emplace_back(std::move(name), Tensor::from_data(std::move(shape), std::move(values)));
    } catch (const NumericError&) {
      r.fail("non-finite value in checkpoint tensor");
    }
  }
  if (!r.at_end()) r.fail("trailing bytes after checkpoint");
  return out;
}

void write_checkpoint(const std::string& path, const NamedTensors& tensors) {
  write_file_bytes(path, encode_checkpoint(tensors));
}

NamedTensors read_checkpoint(const std::string& path) { return decode_checkpoint(read_file_bytes(path)); }

}  // namespace detgan
