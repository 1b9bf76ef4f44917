#pragma once

#include <cstdint>
#include <iosfwd>

#include "mtadapt/matrix.hpp"

namespace mtadapt {

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1 };

// Tensor wire format, little-endian:
//   rows: u32, cols: u32, dtype: u8 (0 = f32, 1 = f64), then the raw
//   row-major payload. Checkpoints reuse this record per named tensor.
void write_tensor(std::ostream& os, const Matrix& m, DType dtype = DType::kF64);
Matrix read_tensor(std::istream& is);

// Little-endian scalar helpers shared with the checkpoint container.
void write_u8(std::ostream& os, std::uint8_t v);
void write_u16(std::ostream& os, std::uint16_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
std::uint8_t read_u8(std::istream& is);
std::uint16_t read_u16(std::istream& is);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);

}  // namespace mtadapt
