// Times the OpenMP matmul kernel against the serial reference and checks
// that they agree elementwise.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#include "mtadapt/matrix.hpp"
#include "mtadapt/rng.hpp"

using namespace mtadapt;

namespace {

double time_ms(const Matrix& a, const Matrix& b, Matrix (*kernel)(const Matrix&, const Matrix&),
               int reps, Matrix& out) {
  const auto start = std::chrono::steady_clock::now();
  for (int r = 0; r < reps; ++r) out = kernel(a, b);
  const auto stop = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(stop - start).count() / reps;
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* env = std::getenv("MTADAPT_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) set_max_threads(n);
  }
  std::vector<std::size_t> sizes = {64, 128, 256};
  int reps = 5;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--sizes" && i + 1 < argc) {
      sizes.clear();
      std::string csv = argv[++i];
      std::size_t pos = 0;
      while (pos < csv.size()) {
        const std::size_t comma = csv.find(',', pos);
        sizes.push_back(std::stoul(csv.substr(pos, comma - pos)));
        if (comma == std::string::npos) break;
        pos = comma + 1;
      }
    } else if (arg == "--reps" && i + 1 < argc) {
      reps = std::atoi(argv[++i]);
    } else {
      std::printf("usage: %s [--sizes n1,n2,...] [--reps N]\n", argv[0]);
      return 1;
    }
  }

  std::printf("threads: %d\n", max_threads());
  std::printf("%8s %14s %14s %10s %12s\n", "n", "serial_ms", "parallel_ms", "speedup",
              "max_abs_diff");
  Rng rng(7);
  for (std::size_t n : sizes) {
    const Matrix a = gaussian(rng, n, n, 1.0);
    const Matrix b = gaussian(rng, n, n, 1.0);
    Matrix serial_out, parallel_out;
    const double t_serial = time_ms(a, b, matmul_serial, reps, serial_out);
    const double t_parallel = time_ms(a, b, matmul, reps, parallel_out);
    double max_diff = 0.0;
    for (std::size_t i = 0; i < serial_out.size(); ++i) {
      const double diff = std::abs(serial_out.data()[i] - parallel_out.data()[i]);
      if (diff > max_diff) max_diff = diff;
    }
    std::printf("%8zu %14.3f %14.3f %9.2fx %12.3e\n", n, t_serial, t_parallel,
                t_serial / t_parallel, max_diff);
    if (max_diff != 0.0) {
      std::printf("kernel mismatch at n=%zu\n", n);
      return 1;
    }
  }
  return 0;
}
