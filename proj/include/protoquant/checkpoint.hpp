#pragma once

// PQCK checkpoint (little-endian, no padding):
//   char[4] "PQCK", u32 version (= 1)
//   u32 M, u32 d, u32 k, f64 alpha, u8 temperature_mode, u8 softmax_support
//   f64[M*d] codes, u8[M] active
//   f64[k*M] W, u8[k*M] logical mask, u8[M] neutralized
//   u32 length + bytes: training config snapshot (key=value lines)
//   u64 provenance hash of the training dataset

#include <cstdint>
#include <filesystem>
#include <string>

#include "binary_io.hpp"
#include "errors.hpp"
#include "head.hpp"

namespace protoquant {

struct Checkpoint {
  HeadModel model;
  std::string config;
  std::uint64_t provenance = 0;
  bool operator==(const Checkpoint&) const = default;
};

namespace detail {
inline constexpr char kCheckpointMagic[4] = {'P', 'Q', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  const HeadModel& m = ck.model;
  m.validate();
  io::ByteWriter w;
  w.put_bytes(std::string_view(detail::kCheckpointMagic, 4));
  w.put<std::uint32_t>(detail::kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.concepts()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.dim()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.num_classes()));
  w.put<double>(m.alpha);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(m.temperature_mode));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(m.softmax_support));
  w.put_all<double>(m.codebook.codes.data());
  w.put_all<std::uint8_t>(m.codebook.active);
  w.put_all<double>(m.classes.weights.data());
  w.put_all<std::uint8_t>(m.classes.logical_mask);
  w.put_all<std::uint8_t>(m.classes.neutralized);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.config.size()));
  w.put_bytes(ck.config);
  w.put<std::uint64_t>(ck.provenance);
  return w.take();
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  io::ByteReader r(bytes);
  if (r.remaining() < 4) throw TruncatedPayloadError("file too short for PQCK magic");
  if (r.get_bytes(4) != std::string_view(detail::kCheckpointMagic, 4)) {
    throw BadMagicError("bad magic: not a PQCK checkpoint");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != detail::kCheckpointVersion) {
    throw UnsupportedVersionError("unsupported PQCK version " + std::to_string(version));
  }
  const std::size_t n_codes = r.get<std::uint32_t>();
  const std::size_t dim = r.get<std::uint32_t>();
  const std::size_t k = r.get<std::uint32_t>();
  if (n_codes == 0 || dim == 0 || k == 0) throw ShapeMismatchError("checkpoint declares a zero dimension");
  Checkpoint ck;
  HeadModel& m = ck.model;
  m.alpha = r.get<double>();
  const auto mode = r.get<std::uint8_t>();
  const auto support = r.get<std::uint8_t>();
  if (mode > 1 || support > 1) throw ShapeMismatchError("checkpoint has unknown enum values");
  m.temperature_mode = static_cast<TemperatureMode>(mode);
  m.softmax_support = static_cast<SoftmaxSupport>(support);
  // Everything up to the config length is fixed-size: check it in one go.
  r.require(n_codes * dim * 8 + n_codes + k * n_codes * 9 + n_codes + 4);
  m.codebook.codes = Matrix(n_codes, dim);
  r.get_all<double>(m.codebook.codes.data());
  m.codebook.active.resize(n_codes);
  r.get_all<std::uint8_t>(m.codebook.active);
  m.classes.weights = Matrix(k, n_codes);
  r.get_all<double>(m.classes.weights.data());
  m.classes.logical_mask.resize(k * n_codes);
  r.get_all<std::uint8_t>(m.classes.logical_mask);
  m.classes.neutralized.resize(n_codes);
  r.get_all<std::uint8_t>(m.classes.neutralized);
  const auto config_len = r.get<std::uint32_t>();
  ck.config = std::string(r.get_bytes(config_len));
  ck.provenance = r.get<std::uint64_t>();
  if (r.remaining() != 0) throw ShapeMismatchError("trailing bytes after checkpoint");
  try {
    m.validate();
  } catch (const Error& e) {
    throw ShapeMismatchError(std::string("checkpoint content invalid: ") + e.what());
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  io::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path));
}

}  // namespace protoquant
