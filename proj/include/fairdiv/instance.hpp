#pragma once

#include "fairdiv/errors.hpp"
#include "fairdiv/rational.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace fairdiv {

/// Shared finite consumption space: every agent draws from the same item list.
struct ItemSpace {
  std::vector<std::string> items;  // sorted, unique

  int32_t dimension() const { return static_cast<int32_t>(items.size()); }

  int32_t index_of(const std::string& id) const {
    auto it = std::lower_bound(items.begin(), items.end(), id);
    if (it == items.end() || *it != id)
      throw invalid_instance_error("unknown item identifier '" + id + "'");
    return static_cast<int32_t>(it - items.begin());
  }
};

/// One deterministic allocation: item index per agent.
using Allocation = std::vector<int32_t>;

struct Witness {
  Allocation allocation;  // present in the space
  int i = 0, j = 0;       // agent pair whose swap is missing
};

struct ValidationReport {
  bool permutation_invariant = false;
  bool projections_equal = false;
  std::optional<Witness> witness;

  bool ok() const { return permutation_invariant && projections_equal; }
};

/// Finite enumerated set of feasible deterministic allocations.
/// Allocations are kept lexicographically sorted so membership and swap
/// lookups are binary searches.
class DeterministicSpace {
 public:
  DeterministicSpace(ItemSpace items, int n_agents,
                     std::vector<Allocation> allocations, std::string name)
      : items_(std::move(items)),
        n_agents_(n_agents),
        allocations_(std::move(allocations)),
        name_(std::move(name)) {
    if (n_agents_ < 1) throw invalid_instance_error(name_ + ": need at least one agent");
    if (allocations_.empty()) throw invalid_instance_error(name_ + ": empty allocation set");
    for (const auto& a : allocations_) {
      if (static_cast<int>(a.size()) != n_agents_)
        throw invalid_instance_error(name_ + ": allocation arity mismatch");
      for (int32_t idx : a)
        if (idx < 0 || idx >= items_.dimension())
          throw invalid_instance_error(name_ + ": item index out of range");
    }
    std::sort(allocations_.begin(), allocations_.end());
    allocations_.erase(std::unique(allocations_.begin(), allocations_.end()),
                       allocations_.end());
  }

  /// Builds a space from item-identifier tuples; the item list is the sorted
  /// set of identifiers actually used.
  static DeterministicSpace from_tuples(int n_agents,
                                        const std::vector<std::vector<std::string>>& tuples,
                                        std::string name) {
    std::set<std::string> ids;
    for (const auto& t : tuples)
      for (const auto& id : t) ids.insert(id);
    ItemSpace items{std::vector<std::string>(ids.begin(), ids.end())};
    std::vector<Allocation> allocs;
    allocs.reserve(tuples.size());
    for (const auto& t : tuples) {
      Allocation a;
      a.reserve(t.size());
      for (const auto& id : t) a.push_back(items.index_of(id));
      allocs.push_back(std::move(a));
    }
    return DeterministicSpace(std::move(items), n_agents, std::move(allocs),
                              std::move(name));
  }

  int n_agents() const { return n_agents_; }
  const ItemSpace& items() const { return items_; }
  const std::vector<Allocation>& allocations() const { return allocations_; }
  std::int64_t size() const { return static_cast<std::int64_t>(allocations_.size()); }
  const std::string& name() const { return name_; }

  /// Index of an allocation, or -1 when absent.
  std::int64_t find(const Allocation& a) const {
    auto it = std::lower_bound(allocations_.begin(), allocations_.end(), a);
    if (it == allocations_.end() || *it != a) return -1;
    return it - allocations_.begin();
  }

  static Allocation swapped(Allocation a, int i, int j) {
    std::swap(a.at(static_cast<size_t>(i)), a.at(static_cast<size_t>(j)));
    return a;
  }

  /// Index of the coordinate-swapped allocation; throws when the space is not
  /// closed under the swap.
  std::int64_t swap_index(std::int64_t allocation_index, int i, int j) const {
    const Allocation& a = allocations_.at(static_cast<size_t>(allocation_index));
    std::int64_t s = find(swapped(a, i, j));
    if (s < 0)
      throw invariance_violation_error(name_ + ": swap of allocation " +
                                       std::to_string(allocation_index) +
                                       " for agents (" + std::to_string(i + 1) + "," +
                                       std::to_string(j + 1) + ") is not in the space");
    return s;
  }

  std::string render(const Allocation& a) const {
    std::string out = "(";
    for (size_t k = 0; k < a.size(); ++k) {
      if (k) out += ",";
      out += items_.items[static_cast<size_t>(a[k])];
    }
    out += ")";
    return out;
  }

  /// FNV-1a digest of the full structure; memo keys and certificates use it.
  std::uint64_t digest() const {
    std::uint64_t h = 14695981039346656037ull;
    auto mix = [&h](const void* data, size_t n) {
      const auto* b = static_cast<const unsigned char*>(data);
      for (size_t k = 0; k < n; ++k) {
        h ^= b[k];
        h *= 1099511628211ull;
      }
    };
    mix(name_.data(), name_.size());
    mix(&n_agents_, sizeof(n_agents_));
    for (const auto& id : items_.items) {
      mix(id.data(), id.size());
      mix("\x1f", 1);
    }
    for (const auto& a : allocations_)
      for (int32_t idx : a) mix(&idx, sizeof(idx));
    return h;
  }

 private:
  ItemSpace items_;
  int n_agents_;
  std::vector<Allocation> allocations_;
  std::string name_;
};

/// Checks closure under every agent-pair coordinate swap and equality of the
/// per-agent projections.
inline ValidationReport validate_space(const DeterministicSpace& space) {
  ValidationReport report;
  report.permutation_invariant = true;

  const int n = space.n_agents();
  std::vector<std::set<int32_t>> projections(static_cast<size_t>(n));
  for (const auto& a : space.allocations())
    for (int j = 0; j < n; ++j) projections[static_cast<size_t>(j)].insert(a[static_cast<size_t>(j)]);
  report.projections_equal = true;
  for (int j = 1; j < n; ++j)
    if (projections[static_cast<size_t>(j)] != projections[0]) {
      report.projections_equal = false;
      break;
    }

  for (const auto& a : space.allocations()) {
    for (int i = 0; i < n && report.permutation_invariant; ++i)
      for (int j = i + 1; j < n; ++j) {
        if (space.find(DeterministicSpace::swapped(a, i, j)) < 0) {
          report.permutation_invariant = false;
          report.witness = Witness{a, i, j};
          break;
        }
      }
    if (!report.permutation_invariant) break;
  }
  return report;
}

namespace detail {

inline std::string count_tuple_label(const std::vector<int>& b) {
  std::string s = "(";
  for (size_t k = 0; k < b.size(); ++k) {
    if (k) s += ",";
    s += std::to_string(b[k]);
  }
  s += ")";
  return s;
}

inline std::string cell_subset_label(const std::vector<int>& cells_one_based) {
  std::string s = "{";
  for (size_t k = 0; k < cells_one_based.size(); ++k) {
    if (k) s += ",";
    s += "E" + std::to_string(cells_one_based[k]);
  }
  s += "}";
  return s;
}

/// All integer bundles 0 <= b <= caps componentwise with sum(b) <= total_cap.
inline std::vector<std::vector<int>> enumerate_bundles(const std::vector<int>& caps,
                                                       int total_cap) {
  std::vector<std::vector<int>> bundles;
  std::vector<int> cur(caps.size(), 0);
  auto rec = [&](auto&& self, size_t pos, int used) -> void {
    if (pos == caps.size()) {
      bundles.push_back(cur);
      return;
    }
    int hi = std::min(caps[pos], total_cap - used);
    for (int v = 0; v <= hi; ++v) {
      cur[pos] = v;
      self(self, pos + 1, used + v);
    }
    cur[pos] = 0;
  };
  rec(rec, 0, 0);
  return bundles;
}

/// Joint enumeration of bundle tuples respecting a componentwise supply cap.
inline DeterministicSpace integer_bundle_space(int n_agents,
                                               const std::vector<int>& supply,
                                               int per_agent_cap,
                                               const std::string& name) {
  if (n_agents < 1) throw invalid_instance_error(name + ": need at least one agent");
  if (per_agent_cap < 0) throw invalid_instance_error(name + ": negative cap");
  for (int s : supply)
    if (s < 0) throw invalid_instance_error(name + ": negative supply");

  auto bundles = enumerate_bundles(supply, per_agent_cap);
  std::vector<std::vector<std::string>> tuples;
  std::vector<int> remaining = supply;
  std::vector<std::string> cur(static_cast<size_t>(n_agents));
  auto rec = [&](auto&& self, int agent) -> void {
    if (agent == n_agents) {
      tuples.push_back(cur);
      return;
    }
    for (const auto& b : bundles) {
      bool fits = true;
      for (size_t k = 0; k < b.size(); ++k)
        if (b[k] > remaining[k]) {
          fits = false;
          break;
        }
      if (!fits) continue;
      for (size_t k = 0; k < b.size(); ++k) remaining[k] -= b[k];
      cur[static_cast<size_t>(agent)] = count_tuple_label(b);
      self(self, agent + 1);
      for (size_t k = 0; k < b.size(); ++k) remaining[k] += b[k];
    }
  };
  rec(rec, 0);
  return DeterministicSpace::from_tuples(n_agents, tuples, name);
}

}  // namespace detail

/// House allocation: every bijection of n distinct houses to n agents.
inline DeterministicSpace gen_hz(int n) {
  if (n < 1) throw invalid_instance_error("gen_hz: need at least one agent");
  if (n > 8) throw invalid_instance_error("gen_hz: factorial blowup, n capped at 8");
  std::vector<std::string> houses(static_cast<size_t>(n));
  for (int k = 0; k < n; ++k) houses[static_cast<size_t>(k)] = "h" + std::to_string(k + 1);
  std::vector<int> perm(static_cast<size_t>(n));
  for (int k = 0; k < n; ++k) perm[static_cast<size_t>(k)] = k;
  std::vector<std::vector<std::string>> tuples;
  do {
    std::vector<std::string> t(static_cast<size_t>(n));
    for (int k = 0; k < n; ++k) t[static_cast<size_t>(k)] = houses[static_cast<size_t>(perm[static_cast<size_t>(k)])];
    tuples.push_back(std::move(t));
  } while (std::next_permutation(perm.begin(), perm.end()));
  return DeterministicSpace::from_tuples(n, tuples, "hz(" + std::to_string(n) + ")");
}

/// Multi-unit demand: bundles of at most k units per agent, joint supply
/// respected componentwise.
inline DeterministicSpace gen_multiunit(int n_agents, const std::vector<int>& supply,
                                        int k) {
  std::string name = "multiunit(" + std::to_string(n_agents) + "," +
                     detail::count_tuple_label(supply) + ",k=" + std::to_string(k) + ")";
  return detail::integer_bundle_space(n_agents, supply, k, name);
}

/// All agent-permutations of each listed partition of the item set.
inline DeterministicSpace gen_partition_family(
    int n_agents, int n_items, const std::vector<std::vector<std::vector<int>>>& partitions) {
  if (n_agents < 1) throw invalid_instance_error("gen_partition_family: need agents");
  if (partitions.empty())
    throw invalid_instance_error("gen_partition_family: no partitions listed");
  std::vector<std::vector<std::string>> tuples;
  for (const auto& partition : partitions) {
    if (static_cast<int>(partition.size()) != n_agents)
      throw invalid_instance_error("gen_partition_family: partition must have one block per agent");
    std::set<int> seen;
    std::vector<std::string> blocks;
    for (const auto& block : partition) {
      std::vector<int> sorted_block = block;
      std::sort(sorted_block.begin(), sorted_block.end());
      for (int e : sorted_block) {
        if (e < 1 || e > n_items)
          throw invalid_instance_error("gen_partition_family: item out of range");
        if (!seen.insert(e).second)
          throw invalid_instance_error("gen_partition_family: overlapping blocks");
      }
      std::string label = "{";
      for (size_t k = 0; k < sorted_block.size(); ++k) {
        if (k) label += ",";
        label += std::to_string(sorted_block[k]);
      }
      label += "}";
      blocks.push_back(std::move(label));
    }
    std::sort(blocks.begin(), blocks.end());
    do {
      tuples.push_back(blocks);
    } while (std::next_permutation(blocks.begin(), blocks.end()));
  }
  return DeterministicSpace::from_tuples(
      n_agents, tuples,
      "partition_family(" + std::to_string(n_agents) + "," + std::to_string(n_items) +
          "," + std::to_string(partitions.size()) + ")");
}

struct SlotsParams {
  int n_airlines = 1;
  int m_airports = 1;
  int horizon = 1;
  int fleet_cap = 1;           // U: movements per airline per period
  int min_activity_level = 0;  // L
  int min_activity_window = 1; // T: blocks [t, t+T] for t = 0, T, 2T, ...
  std::vector<int> initial_stock;            // per airport
  std::vector<std::vector<int>> slot_supply; // [period][airport] joint cap
};

/// Finite-horizon slot schedules. Each airline picks, per (period, airport),
/// idle '-', arrival 'A' or departure 'D'; feasibility enforces the fleet cap
/// per period, the minimum activity level on disjoint windows, nonnegative
/// aircraft stock, and the joint per-(period, airport) slot supply.
inline DeterministicSpace gen_slots(const SlotsParams& p) {
  if (p.n_airlines < 1 || p.m_airports < 1 || p.horizon < 1)
    throw invalid_instance_error("gen_slots: counts must be positive");
  if (p.fleet_cap < 0 || p.min_activity_level < 0 || p.min_activity_window < 1)
    throw invalid_instance_error("gen_slots: negative constraint parameter");
  if (static_cast<int>(p.initial_stock.size()) != p.m_airports)
    throw invalid_instance_error("gen_slots: initial_stock size mismatch");
  if (static_cast<int>(p.slot_supply.size()) != p.horizon)
    throw invalid_instance_error("gen_slots: slot_supply must cover the horizon");
  for (const auto& row : p.slot_supply)
    if (static_cast<int>(row.size()) != p.m_airports)
      throw invalid_instance_error("gen_slots: slot_supply row size mismatch");
  for (int s : p.initial_stock)
    if (s < 0) throw invalid_instance_error("gen_slots: negative stock");

  const int slots = p.horizon * p.m_airports;  // period-major layout
  // Per-airline feasible schedules.
  std::vector<std::string> schedules;
  std::string cur(static_cast<size_t>(slots), '-');
  std::vector<int> stock = p.initial_stock;

  auto window_ok = [&](const std::string& s) {
    const int L = p.min_activity_level, T = p.min_activity_window;
    if (L == 0) return true;
    for (int l = 0; l < p.m_airports; ++l)
      for (int t = 0; t + T <= p.horizon - 1; t += T) {
        int used = 0;
        for (int n = t; n <= t + T; ++n)
          if (s[static_cast<size_t>(n * p.m_airports + l)] != '-') ++used;
        if (used < L) return false;
      }
    return true;
  };

  auto rec = [&](auto&& self, int period) -> void {
    if (period == p.horizon) {
      if (window_ok(cur)) schedules.push_back(cur);
      return;
    }
    // All arr/dep/idle choices for this period across airports, fleet cap
    // and stock feasibility enforced as we go.
    std::vector<int> choice(static_cast<size_t>(p.m_airports), 0);  // 0 '-', 1 'A', 2 'D'
    auto inner = [&](auto&& self_inner, int airport, int movements) -> void {
      if (airport == p.m_airports) {
        std::vector<int> saved = stock;
        bool ok = true;
        for (int l = 0; l < p.m_airports; ++l) {
          if (choice[static_cast<size_t>(l)] == 1) stock[static_cast<size_t>(l)] += 1;
          if (choice[static_cast<size_t>(l)] == 2) stock[static_cast<size_t>(l)] -= 1;
          if (stock[static_cast<size_t>(l)] < 0) ok = false;
        }
        if (ok) {
          for (int l = 0; l < p.m_airports; ++l) {
            char c = choice[static_cast<size_t>(l)] == 0 ? '-' : (choice[static_cast<size_t>(l)] == 1 ? 'A' : 'D');
            cur[static_cast<size_t>(period * p.m_airports + l)] = c;
          }
          self(self, period + 1);
          for (int l = 0; l < p.m_airports; ++l)
            cur[static_cast<size_t>(period * p.m_airports + l)] = '-';
        }
        stock = saved;
        return;
      }
      for (int c = 0; c <= 2; ++c) {
        int m = movements + (c != 0 ? 1 : 0);
        if (c != 0 && m > p.fleet_cap) continue;
        choice[static_cast<size_t>(airport)] = c;
        self_inner(self_inner, airport + 1, m);
      }
      choice[static_cast<size_t>(airport)] = 0;
    };
    inner(inner, 0, 0);
  };
  rec(rec, 0);

  if (schedules.empty())
    throw invalid_instance_error("gen_slots: no feasible per-airline schedule (empty space)");

  // Joint schedules under the slot supply.
  std::vector<std::vector<std::string>> tuples;
  std::vector<int> used(static_cast<size_t>(slots), 0);
  std::vector<std::string> pick(static_cast<size_t>(p.n_airlines));
  auto joint = [&](auto&& self, int airline) -> void {
    if (airline == p.n_airlines) {
      tuples.push_back(pick);
      return;
    }
    for (const auto& s : schedules) {
      bool fits = true;
      for (int idx = 0; idx < slots && fits; ++idx)
        if (s[static_cast<size_t>(idx)] != '-' &&
            used[static_cast<size_t>(idx)] + 1 > p.slot_supply[static_cast<size_t>(idx / p.m_airports)][static_cast<size_t>(idx % p.m_airports)])
          fits = false;
      if (!fits) continue;
      for (int idx = 0; idx < slots; ++idx)
        if (s[static_cast<size_t>(idx)] != '-') used[static_cast<size_t>(idx)] += 1;
      pick[static_cast<size_t>(airline)] = s;
      self(self, airline + 1);
      for (int idx = 0; idx < slots; ++idx)
        if (s[static_cast<size_t>(idx)] != '-') used[static_cast<size_t>(idx)] -= 1;
    }
  };
  joint(joint, 0);

  if (tuples.empty())
    throw invalid_instance_error("gen_slots: joint slot supply infeasible (empty space)");

  return DeterministicSpace::from_tuples(
      p.n_airlines, tuples,
      "slots(" + std::to_string(p.n_airlines) + "," + std::to_string(p.m_airports) + ",h=" +
          std::to_string(p.horizon) + ",U=" + std::to_string(p.fleet_cap) + ",L=" +
          std::to_string(p.min_activity_level) + ",T=" + std::to_string(p.min_activity_window) + ")");
}

/// Differentiated commodities: integer bundles over K characteristics with a
/// per-agent total cap and a joint endowment.
inline DeterministicSpace gen_differentiated(int n_agents, int characteristics,
                                             const std::vector<int>& endowment, int cap) {
  if (static_cast<int>(endowment.size()) != characteristics)
    throw invalid_instance_error("gen_differentiated: endowment size mismatch");
  std::string name = "differentiated(" + std::to_string(n_agents) + ",K=" +
                     std::to_string(characteristics) + "," +
                     detail::count_tuple_label(endowment) + ",cap=" + std::to_string(cap) + ")";
  return detail::integer_bundle_space(n_agents, endowment, cap, name);
}

/// Cake assignments: every map of cells E_1..E_I to agents; each agent's item
/// is its assigned cell subset.
inline DeterministicSpace gen_cake_space(int n_agents, int n_cells) {
  if (n_agents < 1 || n_cells < 1)
    throw invalid_instance_error("gen_cake_space: counts must be positive");
  double total = std::pow(static_cast<double>(n_agents), n_cells);
  if (total > 2e5) throw invalid_instance_error("gen_cake_space: N^I too large");

  std::vector<std::vector<std::string>> tuples;
  std::vector<int> assign(static_cast<size_t>(n_cells), 0);  // cell -> agent
  for (;;) {
    std::vector<std::vector<int>> per_agent(static_cast<size_t>(n_agents));
    for (int i = 0; i < n_cells; ++i) per_agent[static_cast<size_t>(assign[static_cast<size_t>(i)])].push_back(i + 1);
    std::vector<std::string> t(static_cast<size_t>(n_agents));
    for (int j = 0; j < n_agents; ++j) t[static_cast<size_t>(j)] = detail::cell_subset_label(per_agent[static_cast<size_t>(j)]);
    tuples.push_back(std::move(t));
    int pos = n_cells - 1;
    while (pos >= 0 && assign[static_cast<size_t>(pos)] == n_agents - 1) {
      assign[static_cast<size_t>(pos)] = 0;
      --pos;
    }
    if (pos < 0) break;
    assign[static_cast<size_t>(pos)] += 1;
  }
  return DeterministicSpace::from_tuples(
      n_agents, tuples,
      "cake_space(" + std::to_string(n_agents) + "," + std::to_string(n_cells) + ")");
}

/// Leisure/consumption economy with an asymmetric production constraint;
/// the canonical permutation-invariance counterexample. Grid points are
/// (l, z) with both coordinates on a uniform rational grid over [0,1], and
/// a pair is feasible when z1 + z2 <= (1 - l1) + (1 - l2)/10 exactly.
inline DeterministicSpace gen_pazner_schmeidler(int grid = 11) {
  if (grid < 2) throw invalid_instance_error("gen_pazner_schmeidler: grid too small");
  const int steps = grid - 1;
  auto coord = [&](int k) { return Rat(k) / steps; };
  auto label = [&](int lk, int zk) {
    return "(" + rat_to_string(coord(lk)) + "," + rat_to_string(coord(zk)) + ")";
  };
  std::vector<std::vector<std::string>> tuples;
  for (int l1 = 0; l1 <= steps; ++l1)
    for (int z1 = 0; z1 <= steps; ++z1)
      for (int l2 = 0; l2 <= steps; ++l2)
        for (int z2 = 0; z2 <= steps; ++z2) {
          Rat lhs = coord(z1) + coord(z2) - (1 - coord(l1)) - (1 - coord(l2)) / 10;
          if (lhs <= 0) tuples.push_back({label(l1, z1), label(l2, z2)});
        }
  return DeterministicSpace::from_tuples(2, tuples,
                                         "pazner_schmeidler(grid=" + std::to_string(grid) + ")");
}

}  // namespace fairdiv
