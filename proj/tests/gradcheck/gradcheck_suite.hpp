#pragma once

#include <cstdint>
#include <string>
#include <vector>

// Finite-difference gradient checks, built against the 64-bit library. The
// interface is precision-free so 32-bit binaries can link it too.
namespace gradcheck {

struct CaseResult {
  std::string name;
  int seeds = 0;
  long checked = 0;       // gradient entries compared
  double max_rel = 0;     // worst relative error seen
  std::string worst;      // parameter and index of the worst entry
};

// |analytic - numeric| / max(|analytic|, |numeric|, floor)
struct Settings {
  double step = 1e-4;
  double floor = 1e-6;
  int entries_per_tensor = 2;
};

std::vector<std::string> case_names();
CaseResult run_case(const std::string& name, int seeds, std::uint64_t base_seed = 1,
                    const Settings& settings = {});

}  // namespace gradcheck
