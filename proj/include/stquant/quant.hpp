#pragma once

// Block-wise quantization codecs for optimizer state tensors.
//
// Two schemes over flat float32 buffers, both with per-block scale metadata:
//
//   Linear (symmetric, for first-moment buffers):
//     s_k   = max |x_i| over block k
//     q_i   = clamp(round_half_away(x_i / s_k * Q), -Q, Q),  Q = 2^(bits-1) - 1
//     x'_i  = q_i * s_k / Q
//
//   Log (for second-moment buffers, nonnegative input):
//     y_i   = log2(x_i) for x_i > 0; code 0 is reserved for exact zero
//     q_i   = 1 + round((y_i - y_min_k) / delta_k * (2^bits - 2)),
//             delta_k = max(y_max_k - y_min_k, 2^-20)
//     x'_i  = 2^(y_min_k + (q_i - 1) / (2^bits - 2) * delta_k)
//
// Codes are packed two-per-byte at 4 bits, one byte at 8 bits and two bytes
// little-endian at 16 bits; 32-bit states keep the raw float buffer and no
// codes. Linear codes are two's-complement within the packed width, log codes
// unsigned. Log block bounds are kept as doubles so near-degenerate blocks
// (range below the 2^-20 floor) still reconstruct within the per-block error
// bound; the byte accounting in packed_bytes() treats every scale scalar as
// 4 bytes.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace stq::quant {

enum class BitWidth : std::uint8_t { b4 = 4, b8 = 8, b16 = 16, b32 = 32 };

enum class QuantMode : std::uint8_t { Linear = 0, Log = 1 };

/// Throws std::invalid_argument unless bits is one of {4, 8, 16, 32}.
BitWidth bit_width_from_int(int bits);

inline int bit_count(BitWidth b) { return static_cast<int>(b); }

constexpr std::uint32_t kDefaultBlockSize = 256;

// Floor for the log-domain block range (2^-20), guarding constant blocks.
constexpr double kLogRangeFloor = 9.5367431640625e-07;

// Fixed per-tensor header charged by packed_bytes(): length (8) +
// block_size (4) + mode (1) + bits (1) + padding (2).
constexpr std::size_t kHeaderBytes = 16;

struct QuantizedState {
  std::vector<std::uint8_t> codes;  // packed integer codes; empty at 32-bit
  std::vector<float> raw32;         // passthrough buffer, 32-bit only
  std::vector<float> linear_scales; // one absmax scale per block (Linear)
  std::vector<double> log_bounds;   // (y_min, y_max) per block (Log)
  std::uint32_t block_size = kDefaultBlockSize;
  std::size_t length = 0;           // element count of the source tensor
  QuantMode mode = QuantMode::Linear;
  BitWidth bits = BitWidth::b32;

  std::size_t num_blocks() const;

  // Accounting: kHeaderBytes + code bytes + 4 bytes per scale scalar.
  // Code bytes are ceil(length * bits / 8) for 4/8/16-bit states and
  // 4 * length for the 32-bit passthrough (which has no scale scalars).
  std::size_t packed_bytes() const;

  // Throws std::runtime_error if the packed buffers are inconsistent with
  // length/bits/mode (wrong code byte count, wrong scale count, bad bounds).
  void validate() const;
};

QuantizedState quantize_linear(std::span<const float> values, BitWidth bits,
                               std::uint32_t block_size);

QuantizedState quantize_log(std::span<const float> values, BitWidth bits,
                            std::uint32_t block_size);

/// Dispatch on mode; bits = 32 stores the input verbatim in raw32.
QuantizedState quantize_state(std::span<const float> values, BitWidth bits,
                              QuantMode mode, std::uint32_t block_size);

std::vector<float> dequantize(const QuantizedState& state);
void dequantize_into(const QuantizedState& state, std::span<float> out);

// Raw code packing. Codes are unsigned bit fields (signed linear codes are
// masked to the field width before packing and sign-extended after).
std::vector<std::uint8_t> pack_codes(std::span<const std::uint16_t> codes,
                                     int bits);
std::vector<std::uint16_t> unpack_codes(std::span<const std::uint8_t> packed,
                                        int bits, std::size_t count);

}  // namespace stq::quant
