#pragma once

#include "fairdiv/errors.hpp"
#include "fairdiv/instance.hpp"
#include "fairdiv/rational.hpp"

#include <algorithm>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

namespace fairdiv {

/// Probability mass per item, dense over the item space.
struct Marginal {
  std::vector<double> mass;

  double total() const {
    Rat t = 0;
    for (double m : mass) t += rat_from_double(m);
    return to_double(t);
  }
};

using MarginalProfile = std::vector<Marginal>;

/// Sparse probability vector over a deterministic space.
struct Lottery {
  std::vector<std::pair<std::int64_t, double>> support;  // sorted by index

  void canonicalize() {
    std::sort(support.begin(), support.end());
    std::vector<std::pair<std::int64_t, double>> merged;
    for (const auto& [idx, w] : support) {
      if (!merged.empty() && merged.back().first == idx)
        merged.back().second += w;
      else
        merged.emplace_back(idx, w);
    }
    merged.erase(std::remove_if(merged.begin(), merged.end(),
                                [](const auto& e) { return e.second == 0.0; }),
                 merged.end());
    support = std::move(merged);
  }

  static Lottery point_mass(std::int64_t index) { return Lottery{{{index, 1.0}}}; }
};

inline void validate_lottery(const DeterministicSpace& space, const Lottery& p,
                             double tol = 1e-12) {
  if (p.support.empty()) throw invalid_instance_error("lottery: empty support");
  Rat total = 0;
  std::int64_t prev = -1;
  for (const auto& [idx, w] : p.support) {
    if (idx < 0 || idx >= space.size())
      throw invalid_instance_error("lottery: allocation index out of range");
    if (idx <= prev) throw invalid_instance_error("lottery: support indices must be distinct and sorted");
    if (w < 0) throw invalid_instance_error("lottery: negative weight");
    prev = idx;
    total += rat_from_double(w);
  }
  if (abs(to_double(total - 1)) > tol)
    throw invalid_instance_error("lottery: weights sum to " + rat_to_string(total) +
                                 ", expected 1");
}

/// Convex combination a*alpha + b*(1-alpha).
inline Lottery mix(const Lottery& a, const Lottery& b, double alpha) {
  Lottery out;
  for (const auto& [idx, w] : a.support) out.support.emplace_back(idx, alpha * w);
  for (const auto& [idx, w] : b.support) out.support.emplace_back(idx, (1.0 - alpha) * w);
  out.canonicalize();
  return out;
}

enum class PrefKind { EU, MAXMIN };

/// vNM preference over marginals: one utility index (EU) or a finite set of
/// indices whose pointwise minimum is taken (MAXMIN).
struct Preference {
  PrefKind kind = PrefKind::EU;
  std::vector<std::vector<double>> indices;  // each dense over the item space

  static Preference eu(std::vector<double> index) {
    return Preference{PrefKind::EU, {std::move(index)}};
  }
  static Preference maxmin(std::vector<std::vector<double>> idxs) {
    return Preference{PrefKind::MAXMIN, std::move(idxs)};
  }

  void validate(const ItemSpace& items) const {
    if (indices.empty()) throw invalid_instance_error("preference: no utility index");
    if (kind == PrefKind::EU && indices.size() != 1)
      throw invalid_instance_error("preference: EU takes exactly one index");
    for (const auto& u : indices)
      if (static_cast<int32_t>(u.size()) != items.dimension())
        throw invalid_instance_error("preference: index does not cover every item");
  }

  /// Inner products of every index with the marginal.
  std::vector<double> component_values(const Marginal& m) const {
    std::vector<double> vals;
    vals.reserve(indices.size());
    for (const auto& u : indices) {
      double s = 0.0;
      for (size_t y = 0; y < u.size(); ++y) s += u[y] * m.mass[y];
      vals.push_back(s);
    }
    return vals;
  }

  double value(const Marginal& m) const {
    auto vals = component_values(m);
    if (kind == PrefKind::EU) return vals[0];
    return *std::min_element(vals.begin(), vals.end());
  }

  /// Indices within tol of the minimum (all of them for EU).
  std::vector<int> active_indices(const Marginal& m, double tol) const {
    if (kind == PrefKind::EU) return {0};
    auto vals = component_values(m);
    double lo = *std::min_element(vals.begin(), vals.end());
    std::vector<int> act;
    for (size_t i = 0; i < vals.size(); ++i)
      if (vals[i] <= lo + tol) act.push_back(static_cast<int>(i));
    return act;
  }

  /// Utility of a deterministic item (point-mass marginal).
  double item_value(int32_t item) const {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& u : indices) best = std::min(best, u[static_cast<size_t>(item)]);
    return kind == PrefKind::EU ? indices[0][static_cast<size_t>(item)] : best;
  }
};

/// Pushforward of the lottery under agent j's coordinate projection.
/// Accumulates in exact rationals so agent-permuted lotteries produce
/// bitwise-identical marginals.
inline Marginal marginal(const DeterministicSpace& space, const Lottery& p, int j) {
  if (j < 0 || j >= space.n_agents())
    throw invalid_instance_error("marginal: agent index out of range");
  std::vector<Rat> acc(static_cast<size_t>(space.items().dimension()), Rat(0));
  for (const auto& [idx, w] : p.support) {
    const Allocation& x = space.allocations().at(static_cast<size_t>(idx));
    acc[static_cast<size_t>(x[static_cast<size_t>(j)])] += rat_from_double(w);
  }
  Marginal m;
  m.mass.reserve(acc.size());
  for (const auto& r : acc) m.mass.push_back(to_double(r));
  return m;
}

inline MarginalProfile marginal_profile(const DeterministicSpace& space, const Lottery& p) {
  MarginalProfile out;
  out.reserve(static_cast<size_t>(space.n_agents()));
  for (int j = 0; j < space.n_agents(); ++j) out.push_back(marginal(space, p, j));
  return out;
}

inline double utility(const Preference& pref, const Marginal& m) { return pref.value(m); }

/// Pushforward of p under the agent i <-> j coordinate permutation.
inline Lottery swap(const DeterministicSpace& space, const Lottery& p, int i, int j) {
  Lottery q;
  q.support.reserve(p.support.size());
  for (const auto& [idx, w] : p.support)
    q.support.emplace_back(space.swap_index(idx, i, j), w);
  q.canonicalize();
  return q;
}

struct EnvyMatrix {
  int n = 0;
  std::vector<double> entries;  // row-major, entry(j,k) = U_j(p^k) - U_j(p^j)

  double at(int j, int k) const { return entries[static_cast<size_t>(j * n + k)]; }
  double& at(int j, int k) { return entries[static_cast<size_t>(j * n + k)]; }

  double row_max(int j) const {
    double m = 0.0;
    for (int k = 0; k < n; ++k) m = std::max(m, at(j, k));
    return m;
  }
  double max() const {
    double m = 0.0;
    for (double e : entries) m = std::max(m, e);
    return m;
  }
};

inline EnvyMatrix envy_matrix_from_marginals(const MarginalProfile& marginals,
                                             const std::vector<Preference>& prefs) {
  const int n = static_cast<int>(prefs.size());
  EnvyMatrix e;
  e.n = n;
  e.entries.assign(static_cast<size_t>(n) * static_cast<size_t>(n), 0.0);
  for (int j = 0; j < n; ++j) {
    double own = prefs[static_cast<size_t>(j)].value(marginals[static_cast<size_t>(j)]);
    for (int k = 0; k < n; ++k) {
      if (k == j) continue;
      e.at(j, k) = prefs[static_cast<size_t>(j)].value(marginals[static_cast<size_t>(k)]) - own;
    }
  }
  return e;
}

/// Agent j envies agent k when j strictly prefers k's marginal to its own.
inline EnvyMatrix envy_matrix(const DeterministicSpace& space, const Lottery& p,
                              const std::vector<Preference>& prefs) {
  if (static_cast<int>(prefs.size()) != space.n_agents())
    throw invalid_instance_error("envy_matrix: one preference per agent required");
  return envy_matrix_from_marginals(marginal_profile(space, p), prefs);
}

inline double max_envy(const DeterministicSpace& space, const Lottery& p,
                       const std::vector<Preference>& prefs) {
  return envy_matrix(space, p, prefs).max();
}

}  // namespace fairdiv
