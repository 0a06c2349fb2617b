#pragma once

// Bit-exact LTRC weight file I/O.
//
// Layout (all integers little-endian):
//   magic "LTRC" (4 bytes)
//   format version      u16   (currently 1)
//   arch id             u8    (0 decoder-attention, 1 linear-attention,
//                              2 hybrid-sequence)
//   spec fields         u32 x6 (n_layers, d_model, n_heads, d_ff,
//                               vocab_size, max_seq)
//   hybrid only: n_layers per-layer arch-id bytes (0 attention, 1 linear)
//   named tensor table: per tensor
//       name length u16 | UTF-8 name | rank u8 | dims u32[rank]
//       | row-major float32 (IEEE-754, little-endian) values
//   CRC32 (IEEE reflected, poly 0xEDB88320) of all preceding bytes, u32
//
// The table has no count field; it runs to the 4 CRC bytes. Tensor names and
// order are fixed by the writer, and the reader validates them against the
// spec, so a round-trip is byte-identical. Format version 1 also pins the
// weight-init generator (xoshiro256** seeded via splitmix64).

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>

#include "layertracer/model.hpp"

namespace layertracer {

inline constexpr uint16_t kWeightsFormatVersion = 1;

enum class WeightsErrorKind {
  Io,           // unreadable / unwritable path
  Truncated,    // file shorter than its own structure claims
  BadMagic,
  BadVersion,
  BadHeader,    // invalid arch id or spec fields
  BadShape,     // tensor name/rank/dims inconsistent with the spec
  BadChecksum,
};

class WeightsError : public std::runtime_error {
 public:
  WeightsError(WeightsErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}
  WeightsErrorKind kind() const { return kind_; }

 private:
  WeightsErrorKind kind_;
};

// CRC32 as used by the LTRC trailer. Standard check value:
// crc32("123456789") == 0xCBF43926.
uint32_t crc32(std::span<const uint8_t> data);

void save_weights(const LayeredModel& model, const std::string& path);
LayeredModel load_weights(const std::string& path);

// Buffer-level forms, used by save/load and handy for tests.
std::vector<uint8_t> encode_weights(const LayeredModel& model);
LayeredModel decode_weights(std::span<const uint8_t> bytes);

}  // namespace layertracer
