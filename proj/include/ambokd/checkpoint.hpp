#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "ambokd/binary_io.hpp"
#include "ambokd/errors.hpp"
#include "ambokd/tape.hpp"

// Checkpoint layout, little-endian:
//   "AMBK" u32 version u32 param_count
//   param_count × { u16 name_len, name bytes (UTF-8), u8 rank, u32 dims[rank],
//                   f64 payload[prod(dims)] }
namespace ambokd {

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::vector<unsigned char> encode_checkpoint(const ParamSet& params) {
  detail::ByteWriter w;
  w.bytes("AMBK", 4);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, value] : params.values()) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max())
      throw parameter_error("checkpoint: parameter name too long: " + name);
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u8(static_cast<std::uint8_t>(value.rank()));
    for (std::size_t d : value.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : value.data()) w.f64(v);
  }
  return w.buffer();
}

inline ParamSet decode_checkpoint(std::vector<unsigned char> bytes, const std::string& path) {
  detail::ByteReader r(std::move(bytes), path);
  r.expect_magic("AMBK");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    r.fail("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t count = r.u32("parameter count");
  ParamSet params;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = r.u16("name length");
    std::string name = r.str(len, "parameter name");
    const std::uint8_t rank = r.u8("rank");
    Shape shape;
    for (std::uint8_t k = 0; k < rank; ++k) {
      const std::uint32_t d = r.u32("dimension");
      if (d == 0) r.fail("zero dimension in parameter '" + name + "'");
      shape.push_back(d);
    }
    const std::size_t n = shape_size(shape);
    if (r.remaining() / 8 < n) r.fail("truncated payload of parameter '" + name + "'");
    Tensor t(shape);
    for (double& v : t.data()) v = r.f64("payload");
    if (params.contains(name)) r.fail("duplicate parameter '" + name + "'");
    params.add(name, std::move(t));
  }
  if (!r.at_end()) r.fail("trailing bytes after last parameter");
  return params;
}

inline void save_checkpoint(const ParamSet& params, const std::string& path) {
  detail::write_file(path, encode_checkpoint(params));
}

inline ParamSet load_checkpoint(const std::string& path) {
  return decode_checkpoint(detail::read_file(path), path);
}

/// Copies checkpoint values into `target`, requiring identical names and shapes.
inline void restore_into(ParamSet& target, const ParamSet& loaded) {
  if (target.names() != loaded.names())
    throw format_error("checkpoint parameters do not match the model layout");
  for (const auto& [name, value] : loaded.values()) target.set(name, value);
}

}  // namespace ambokd
