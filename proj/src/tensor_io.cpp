#include "mtadapt/tensor_io.hpp"

#include <cstring>
#include <istream>
#include <ostream>

namespace mtadapt {

namespace {

void write_bytes(std::ostream& os, const unsigned char* p, std::size_t n) {
  os.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!os) throw IoError("tensor write failed");
}

void read_bytes(std::istream& is, unsigned char* p, std::size_t n) {
  is.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n));
  if (is.gcount() != static_cast<std::streamsize>(n)) {
    throw IoError("truncated tensor data");
  }
}

template <typename T>
void write_le(std::ostream& os, T v) {
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  }
  write_bytes(os, buf, sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  read_bytes(is, buf, sizeof(T));
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<T>(buf[i]) << (8 * i);
  }
  return v;
}

std::uint64_t double_bits(double d) {
  std::uint64_t u;
  std::memcpy(&u, &d, sizeof(u));
  return u;
}

double bits_double(std::uint64_t u) {
  double d;
  std::memcpy(&d, &u, sizeof(d));
  return d;
}

std::uint32_t float_bits(float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, sizeof(u));
  return u;
}

float bits_float(std::uint32_t u) {
  float f;
  std::memcpy(&f, &u, sizeof(f));
  return f;
}

}  // namespace

void write_u8(std::ostream& os, std::uint8_t v) { write_le<std::uint8_t>(os, v); }
void write_u16(std::ostream& os, std::uint16_t v) { write_le<std::uint16_t>(os, v); }
void write_u32(std::ostream& os, std::uint32_t v) { write_le<std::uint32_t>(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) { write_le<std::uint64_t>(os, v); }
std::uint8_t read_u8(std::istream& is) { return read_le<std::uint8_t>(is); }
std::uint16_t read_u16(std::istream& is) { return read_le<std::uint16_t>(is); }
std::uint32_t read_u32(std::istream& is) { return read_le<std::uint32_t>(is); }
std::uint64_t read_u64(std::istream& is) { return read_le<std::uint64_t>(is); }

void write_tensor(std::ostream& os, const Matrix& m, DType dtype) {
  write_u32(os, static_cast<std::uint32_t>(m.rows()));
  write_u32(os, static_cast<std::uint32_t>(m.cols()));
  write_u8(os, static_cast<std::uint8_t>(dtype));
  const std::size_t n = m.size();
  if (dtype == DType::kF64) {
    for (std::size_t i = 0; i < n; ++i) {
      write_le<std::uint64_t>(os, double_bits(m.data()[i]));
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      write_le<std::uint32_t>(os, float_bits(static_cast<float>(m.data()[i])));
    }
  }
}

Matrix read_tensor(std::istream& is) {
  const std::uint32_t rows = read_u32(is);
  const std::uint32_t cols = read_u32(is);
  const std::uint8_t tag = read_u8(is);
  if (tag > 1) {
    throw IoError("tensor: unknown dtype tag " + std::to_string(tag));
  }
  if (rows == 0 || cols == 0) {
    throw IoError("tensor: zero dimension in header");
  }
  Matrix m(rows, cols);
  const std::size_t n = m.size();
  if (static_cast<DType>(tag) == DType::kF64) {
    for (std::size_t i = 0; i < n; ++i) {
      m.data()[i] = bits_double(read_le<std::uint64_t>(is));
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      m.data()[i] = static_cast<double>(bits_float(read_le<std::uint32_t>(is)));
    }
  }
  return m;
}

}  // namespace mtadapt
