#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace fairdiv {

struct invalid_instance_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A swap of a supported allocation fell outside the space.
struct invariance_violation_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct nonconvergence_error : std::runtime_error {
  double last_gap;
  nonconvergence_error(const std::string& what, double gap)
      : std::runtime_error(what), last_gap(gap) {}
};

/// No supported agent passed the envy tolerance at a Q-optimum.
/// Carries the offending envy matrix (row-major, n_agents x n_agents).
struct lucky_violation_error : std::runtime_error {
  std::vector<double> envy_entries;
  int n_agents = 0;
  explicit lucky_violation_error(const std::string& what) : std::runtime_error(what) {}
  lucky_violation_error(const std::string& what, std::vector<double> envy, int n)
      : std::runtime_error(what), envy_entries(std::move(envy)), n_agents(n) {}
};

struct sperner_violation_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct refinement_failure_error : std::runtime_error {
  double best_max_envy;
  refinement_failure_error(const std::string& what, double envy)
      : std::runtime_error(what), best_max_envy(envy) {}
};

struct wpe_check_failure_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct farkas_violation_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct certification_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace fairdiv
