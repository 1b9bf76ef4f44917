#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mtadapt/adapter.hpp"

namespace mtadapt {

struct GradCheckOptions {
  double h = 1e-5;           // central-difference step
  double tolerance = 1e-4;   // max relative error allowed
  std::uint64_t seed = 20240501;
  int cases_per_component = 4;  // random shape/seed cases behind each row
  std::optional<AdapterVariant> only_variant;
  // Fault injection for validating the checker itself: perturb the analytic
  // gradient of tensors with this label ("C") so the check must fail there.
  std::string corrupt_tensor;
  double corrupt_eps = 1e-2;
};

struct GradCheckRow {
  std::string component;  // "adapter/shim", "merged/E=2", "model/nlu", ...
  std::string tensor;     // "A", "B", "C", "D" or a full model tensor name
  double max_rel_err = 0.0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckRow> rows;
  double tolerance = 0.0;
  bool all_pass = true;
};

/// Finite-difference validation of every analytic gradient path: the five
/// adapter variants, the merged adapter at |E| = 1..3, and the full model
/// under both placement profiles. Relative error uses
/// |a - f| / max(1e-6, |a| + |f|) per entry.
GradCheckReport run_grad_checks(const GradCheckOptions& options);

void print_grad_check_report(std::ostream& os, const GradCheckReport& report);

}  // namespace mtadapt
