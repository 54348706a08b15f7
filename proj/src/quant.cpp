#include "stquant/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace stq::quant {

namespace {

std::size_t code_bytes(std::size_t length, int bits) {
  return (length * static_cast<std::size_t>(bits) + 7) / 8;
}

void require_finite(std::span<const float> values) {
  for (float v : values) {
    if (!std::isfinite(v)) {
      throw std::invalid_argument("quantize: input contains a non-finite value");
    }
  }
}

void require_block_size(std::uint32_t block_size) {
  if (block_size == 0) {
    throw std::invalid_argument("quantize: block_size must be positive");
  }
}

void require_sub32(BitWidth bits, const char* fn) {
  if (bits == BitWidth::b32) {
    throw std::invalid_argument(std::string(fn) +
                                ": 32-bit states are stored raw, use quantize_state");
  }
}

}  // namespace

BitWidth bit_width_from_int(int bits) {
  switch (bits) {
    case 4: return BitWidth::b4;
    case 8: return BitWidth::b8;
    case 16: return BitWidth::b16;
    case 32: return BitWidth::b32;
    default:
      throw std::invalid_argument("bit width must be one of 4, 8, 16, 32, got " +
                                  std::to_string(bits));
  }
}

std::size_t QuantizedState::num_blocks() const {
  if (length == 0) return 0;
  return (length + block_size - 1) / block_size;
}

std::size_t QuantizedState::packed_bytes() const {
  std::size_t bytes = kHeaderBytes;
  if (bits == BitWidth::b32) {
    return bytes + 4 * length;
  }
  bytes += code_bytes(length, bit_count(bits));
  const std::size_t per_block = mode == QuantMode::Linear ? 1 : 2;
  return bytes + 4 * per_block * num_blocks();
}

void QuantizedState::validate() const {
  if (block_size == 0) {
    throw std::runtime_error("quantized state: block_size must be positive");
  }
  if (bits == BitWidth::b32) {
    if (raw32.size() != length || !codes.empty() || !linear_scales.empty() ||
        !log_bounds.empty()) {
      throw std::runtime_error("quantized state: malformed 32-bit passthrough");
    }
    return;
  }
  if (!raw32.empty()) {
    throw std::runtime_error("quantized state: raw buffer present below 32-bit");
  }
  if (codes.size() != code_bytes(length, bit_count(bits))) {
    throw std::runtime_error("quantized state: code buffer has wrong size");
  }
  if (mode == QuantMode::Linear) {
    if (linear_scales.size() != num_blocks() || !log_bounds.empty()) {
      throw std::runtime_error("quantized state: expected one scale per block");
    }
    for (float s : linear_scales) {
      if (!std::isfinite(s) || s < 0.0f) {
        throw std::runtime_error("quantized state: linear scale must be finite and nonnegative");
      }
    }
  } else {
    if (log_bounds.size() != 2 * num_blocks() || !linear_scales.empty()) {
      throw std::runtime_error("quantized state: expected two log bounds per block");
    }
    for (std::size_t k = 0; k < num_blocks(); ++k) {
      const double lo = log_bounds[2 * k];
      const double hi = log_bounds[2 * k + 1];
      if (!std::isfinite(lo) || !std::isfinite(hi) || hi < lo) {
        throw std::runtime_error("quantized state: log bounds must be finite with y_max >= y_min");
      }
    }
  }
}

std::vector<std::uint8_t> pack_codes(std::span<const std::uint16_t> codes,
                                     int bits) {
  std::vector<std::uint8_t> out(code_bytes(codes.size(), bits));
  switch (bits) {
    case 4:
      for (std::size_t i = 0; i < codes.size(); ++i) {
        const auto nibble = static_cast<std::uint8_t>(codes[i] & 0x0f);
        if (i % 2 == 0) {
          out[i / 2] = nibble;  // even element in the low nibble
        } else {
          out[i / 2] |= static_cast<std::uint8_t>(nibble << 4);
        }
      }
      break;
    case 8:
      for (std::size_t i = 0; i < codes.size(); ++i) {
        out[i] = static_cast<std::uint8_t>(codes[i] & 0xff);
      }
      break;
    case 16:
      for (std::size_t i = 0; i < codes.size(); ++i) {
        out[2 * i] = static_cast<std::uint8_t>(codes[i] & 0xff);
        out[2 * i + 1] = static_cast<std::uint8_t>(codes[i] >> 8);
      }
      break;
    default:
      throw std::invalid_argument("pack_codes: bits must be 4, 8 or 16");
  }
  return out;
}

std::vector<std::uint16_t> unpack_codes(std::span<const std::uint8_t> packed,
                                        int bits, std::size_t count) {
  if (packed.size() != code_bytes(count, bits)) {
    throw std::invalid_argument("unpack_codes: buffer size does not match count");
  }
  std::vector<std::uint16_t> out(count);
  switch (bits) {
    case 4:
      for (std::size_t i = 0; i < count; ++i) {
        const std::uint8_t byte = packed[i / 2];
        out[i] = (i % 2 == 0) ? (byte & 0x0f) : (byte >> 4);
      }
      break;
    case 8:
      for (std::size_t i = 0; i < count; ++i) {
        out[i] = packed[i];
      }
      break;
    case 16:
      for (std::size_t i = 0; i < count; ++i) {
        out[i] = static_cast<std::uint16_t>(packed[2 * i] |
                                            (packed[2 * i + 1] << 8));
      }
      break;
    default:
      throw std::invalid_argument("unpack_codes: bits must be 4, 8 or 16");
  }
  return out;
}

QuantizedState quantize_linear(std::span<const float> values, BitWidth bits,
                               std::uint32_t block_size) {
  require_sub32(bits, "quantize_linear");
  require_block_size(block_size);
  require_finite(values);

  QuantizedState st;
  st.mode = QuantMode::Linear;
  st.bits = bits;
  st.block_size = block_size;
  st.length = values.size();

  const int width = bit_count(bits);
  const long long q_max = (1ll << (width - 1)) - 1;
  st.linear_scales.reserve(st.num_blocks());

  std::vector<std::uint16_t> codes(values.size());
  for (std::size_t begin = 0; begin < values.size(); begin += block_size) {
    const std::size_t end = std::min(values.size(), begin + block_size);
    float absmax = 0.0f;
    for (std::size_t i = begin; i < end; ++i) {
      absmax = std::max(absmax, std::fabs(values[i]));
    }
    st.linear_scales.push_back(absmax);
    for (std::size_t i = begin; i < end; ++i) {
      long long q = 0;
      if (absmax > 0.0f) {
        q = std::llround(static_cast<double>(values[i]) /
                         static_cast<double>(absmax) *
                         static_cast<double>(q_max));
        q = std::clamp(q, -q_max, q_max);
      }
      codes[i] = static_cast<std::uint16_t>(
          static_cast<std::uint64_t>(q) & ((1ull << width) - 1));
    }
  }
  st.codes = pack_codes(codes, width);
  return st;
}

QuantizedState quantize_log(std::span<const float> values, BitWidth bits,
                            std::uint32_t block_size) {
  require_sub32(bits, "quantize_log");
  require_block_size(block_size);
  require_finite(values);
  for (float v : values) {
    if (v < 0.0f) {
      throw std::invalid_argument("quantize_log: input must be nonnegative");
    }
  }

  QuantizedState st;
  st.mode = QuantMode::Log;
  st.bits = bits;
  st.block_size = block_size;
  st.length = values.size();

  const int width = bit_count(bits);
  const long long levels = (1ll << width) - 2;  // codes 1 .. 2^bits - 1
  st.log_bounds.reserve(2 * st.num_blocks());

  std::vector<std::uint16_t> codes(values.size());
  for (std::size_t begin = 0; begin < values.size(); begin += block_size) {
    const std::size_t end = std::min(values.size(), begin + block_size);
    double y_min = std::numeric_limits<double>::infinity();
    double y_max = -std::numeric_limits<double>::infinity();
    for (std::size_t i = begin; i < end; ++i) {
      if (values[i] > 0.0f) {
        const double y = std::log2(static_cast<double>(values[i]));
        y_min = std::min(y_min, y);
        y_max = std::max(y_max, y);
      }
    }
    if (y_min > y_max) {  // all-zero block
      y_min = 0.0;
      y_max = 0.0;
    }
    st.log_bounds.push_back(y_min);
    st.log_bounds.push_back(y_max);
    const double delta = std::max(y_max - y_min, kLogRangeFloor);
    for (std::size_t i = begin; i < end; ++i) {
      long long q = 0;
      if (values[i] > 0.0f) {
        const double y = std::log2(static_cast<double>(values[i]));
        q = 1 + std::llround((y - y_min) / delta * static_cast<double>(levels));
        q = std::clamp(q, 1ll, (1ll << width) - 1);
      }
      codes[i] = static_cast<std::uint16_t>(q);
    }
  }
  st.codes = pack_codes(codes, width);
  return st;
}

QuantizedState quantize_state(std::span<const float> values, BitWidth bits,
                              QuantMode mode, std::uint32_t block_size) {
  require_block_size(block_size);
  if (bits == BitWidth::b32) {
    require_finite(values);
    if (mode == QuantMode::Log) {
      for (float v : values) {
        if (v < 0.0f) {
          throw std::invalid_argument("quantize_state: log mode input must be nonnegative");
        }
      }
    }
    QuantizedState st;
    st.mode = mode;
    st.bits = bits;
    st.block_size = block_size;
    st.length = values.size();
    st.raw32.assign(values.begin(), values.end());
    return st;
  }
  return mode == QuantMode::Linear ? quantize_linear(values, bits, block_size)
                                   : quantize_log(values, bits, block_size);
}

void dequantize_into(const QuantizedState& state, std::span<float> out) {
  state.validate();
  if (out.size() != state.length) {
    throw std::invalid_argument("dequantize: output span has wrong length");
  }
  if (state.bits == BitWidth::b32) {
    std::copy(state.raw32.begin(), state.raw32.end(), out.begin());
    return;
  }

  const int width = bit_count(state.bits);
  const auto codes = unpack_codes(state.codes, width, state.length);

  if (state.mode == QuantMode::Linear) {
    const long long q_max = (1ll << (width - 1)) - 1;
    const std::uint16_t sign_bit = static_cast<std::uint16_t>(1u << (width - 1));
    const std::uint16_t field = static_cast<std::uint16_t>((1u << width) - 1);
    for (std::size_t i = 0; i < state.length; ++i) {
      const float s = state.linear_scales[i / state.block_size];
      std::int32_t q = codes[i] & field;
      if (codes[i] & sign_bit) {
        q -= static_cast<std::int32_t>(1u << width);  // two's complement
      }
      out[i] = static_cast<float>(static_cast<double>(q) *
                                  static_cast<double>(s) /
                                  static_cast<double>(q_max));
    }
  } else {
    const long long levels = (1ll << width) - 2;
    for (std::size_t i = 0; i < state.length; ++i) {
      const std::size_t k = i / state.block_size;
      if (codes[i] == 0) {
        out[i] = 0.0f;
        continue;
      }
      const double y_min = state.log_bounds[2 * k];
      const double y_max = state.log_bounds[2 * k + 1];
      const double delta = std::max(y_max - y_min, kLogRangeFloor);
      const double y = y_min + static_cast<double>(codes[i] - 1) /
                                   static_cast<double>(levels) * delta;
      out[i] = static_cast<float>(std::exp2(y));
    }
  }
}

std::vector<float> dequantize(const QuantizedState& state) {
  std::vector<float> out(state.length);
  dequantize_into(state, out);
  return out;
}

}  // namespace stq::quant
