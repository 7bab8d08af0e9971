#pragma once

#include "fairdiv/errors.hpp"
#include "fairdiv/instance.hpp"
#include "fairdiv/preferences.hpp"
#include "fairdiv/qsolver.hpp"
#include "fairdiv/rational.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fairdiv {

/// Geometric simplex inside the Pareto-weight simplex, stored as its corner
/// points in exact rational coordinates. Corners are kept sorted so equal
/// simplices compare equal.
struct Simplex {
  std::vector<WeightVector> vertices;

  static Simplex standard(int n) {
    Simplex s;
    for (int j = 0; j < n; ++j) s.vertices.push_back(WeightVector::unit(n, j));
    return s;
  }

  int n_corners() const { return static_cast<int>(vertices.size()); }

  WeightVector barycenter() const {
    if (vertices.empty()) throw std::invalid_argument("barycenter of empty simplex");
    const size_t dim = vertices[0].w.size();
    WeightVector b;
    b.w.assign(dim, Rat(0));
    for (const auto& v : vertices)
      for (size_t i = 0; i < dim; ++i) b.w[i] += v.w[i];
    const Rat count(static_cast<long>(vertices.size()));
    for (auto& x : b.w) x /= count;
    return b;
  }

  double diameter() const {
    double best = 0.0;
    for (size_t a = 0; a < vertices.size(); ++a)
      for (size_t b = a + 1; b < vertices.size(); ++b) {
        double d2 = 0.0;
        for (size_t i = 0; i < vertices[a].w.size(); ++i) {
          double d = to_double(vertices[a].w[i] - vertices[b].w[i]);
          d2 += d * d;
        }
        best = std::max(best, std::sqrt(d2));
      }
    return best;
  }

  void canonicalize() {
    std::sort(vertices.begin(), vertices.end());
  }

  /// Corners must be valid weight vectors and affinely independent; the
  /// rank check runs in exact rational arithmetic.
  void validate() const {
    if (vertices.empty()) throw std::invalid_argument("empty simplex");
    const size_t dim = vertices[0].w.size();
    for (const auto& v : vertices) {
      if (v.w.size() != dim) throw std::invalid_argument("simplex corner arity mismatch");
      v.validate();
    }
    const size_t k = vertices.size();
    if (k == 1) return;
    std::vector<std::vector<Rat>> rows(k - 1, std::vector<Rat>(dim));
    for (size_t r = 0; r + 1 < k; ++r)
      for (size_t i = 0; i < dim; ++i) rows[r][i] = vertices[r + 1].w[i] - vertices[0].w[i];
    size_t rank = 0;
    for (size_t col = 0; col < dim && rank < rows.size(); ++col) {
      size_t sel = rank;
      while (sel < rows.size() && rows[sel][col] == 0) ++sel;
      if (sel == rows.size()) continue;
      std::swap(rows[sel], rows[rank]);
      for (size_t r = 0; r < rows.size(); ++r) {
        if (r == rank || rows[r][col] == 0) continue;
        Rat f = rows[r][col] / rows[rank][col];
        for (size_t i = col; i < dim; ++i) rows[r][i] -= f * rows[rank][i];
      }
      ++rank;
    }
    if (rank != k - 1) throw std::invalid_argument("degenerate simplex: corners affinely dependent");
  }

  bool operator<(const Simplex& o) const { return vertices < o.vertices; }
  bool operator==(const Simplex& o) const { return vertices == o.vertices; }
};

/// Subdivision complex with agent labels attached to vertices. The mesh is
/// the largest simplex diameter; labels are keyed by exact coordinates, so a
/// vertex shared between simplices is labeled once.
struct LabeledComplex {
  std::vector<Simplex> simplices;
  std::map<std::vector<Rat>, int> vertex_labels;
  double mesh = 0.0;

  std::vector<WeightVector> vertices() const {
    std::vector<WeightVector> out;
    for (const auto& s : simplices)
      for (const auto& v : s.vertices) out.push_back(v);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }

  void recompute_mesh() {
    mesh = 0.0;
    for (const auto& s : simplices) mesh = std::max(mesh, s.diameter());
  }
};

namespace detail {

inline WeightVector face_barycenter(const std::vector<WeightVector>& corners,
                                    const std::vector<size_t>& members) {
  WeightVector b;
  b.w.assign(corners[0].w.size(), Rat(0));
  for (size_t m : members)
    for (size_t i = 0; i < b.w.size(); ++i) b.w[i] += corners[m].w[i];
  const Rat count(static_cast<long>(members.size()));
  for (auto& x : b.w) x /= count;
  return b;
}

inline void subdivide_chains(const std::vector<WeightVector>& corners,
                             std::vector<size_t>& members, std::vector<WeightVector>& chain,
                             std::vector<Simplex>& out) {
  chain.push_back(face_barycenter(corners, members));
  if (members.size() == 1) {
    Simplex s;
    s.vertices = chain;
    s.canonicalize();
    out.push_back(std::move(s));
  } else {
    for (size_t drop = 0; drop < members.size(); ++drop) {
      std::vector<size_t> sub;
      for (size_t m = 0; m < members.size(); ++m)
        if (m != drop) sub.push_back(members[m]);
      subdivide_chains(corners, sub, chain, out);
    }
  }
  chain.pop_back();
}

}  // namespace detail

/// Barycentric subdivision: one child simplex per maximal chain of faces,
/// with corners at the face barycenters. A simplex on k corners yields k!
/// children and the mesh contracts by at least (k-1)/k.
inline LabeledComplex barycentric_subdivide(const Simplex& s) {
  s.validate();
  LabeledComplex out;
  std::vector<size_t> members(static_cast<size_t>(s.n_corners()));
  for (size_t i = 0; i < members.size(); ++i) members[i] = i;
  std::vector<WeightVector> chain;
  detail::subdivide_chains(s.vertices, members, chain, out.simplices);
  std::sort(out.simplices.begin(), out.simplices.end());
  out.recompute_mesh();
  return out;
}

/// Subdivides every simplex of the complex. Labels of surviving vertices are
/// carried over; new vertices start unlabeled.
inline LabeledComplex barycentric_subdivide(const LabeledComplex& c) {
  LabeledComplex out;
  for (const auto& s : c.simplices) {
    std::vector<size_t> members(static_cast<size_t>(s.n_corners()));
    for (size_t i = 0; i < members.size(); ++i) members[i] = i;
    std::vector<WeightVector> chain;
    detail::subdivide_chains(s.vertices, members, chain, out.simplices);
  }
  std::sort(out.simplices.begin(), out.simplices.end());
  out.simplices.erase(std::unique(out.simplices.begin(), out.simplices.end()),
                      out.simplices.end());
  out.vertex_labels = c.vertex_labels;
  out.recompute_mesh();
  return out;
}

/// Carrier of a point: the corners of the weight simplex whose coordinate is
/// positive. A labeling is proper when every label lies in the carrier.
inline std::vector<int> carrier(const WeightVector& v) { return v.support(); }

inline bool proper_labeling(const LabeledComplex& c) {
  for (const auto& [coords, label] : c.vertex_labels) {
    bool ok = false;
    for (size_t i = 0; i < coords.size(); ++i)
      if (coords[i] > 0 && static_cast<int>(i) == label) ok = true;
    if (!ok) return false;
  }
  return true;
}

namespace detail {

struct LuckyResult {
  int label = -1;
  double max_envy = 0.0;
  std::vector<double> rows;
};

inline LuckyResult lucky_label_full(const DeterministicSpace& space,
                                    const std::vector<Preference>& prefs,
                                    const WeightVector& lambda, const SolverConfig& cfg,
                                    double envy_tol, QSolveCache* cache) {
  auto run = [&](const SolverConfig& c) {
    return cache ? cache->solve(space, prefs, lambda, c) : solve_q(space, prefs, lambda, c);
  };
  EnvyMatrix envy;
  auto pick = [&](const QSolution& sol) -> int {
    envy = envy_matrix_from_marginals(sol.marginals, prefs);
    for (int j : lambda.support())
      if (envy.row_max(j) <= envy_tol) return j;
    return -1;
  };
  int j = pick(run(cfg));
  if (j < 0) {
    SolverConfig tighter = cfg;
    tighter.opt_tol = cfg.opt_tol / 10.0;
    j = pick(run(tighter));
  }
  if (j >= 0) {
    LuckyResult res{j, envy.max(), {}};
    for (int a = 0; a < envy.n; ++a) res.rows.push_back(envy.row_max(a));
    return res;
  }
  std::ostringstream msg;
  msg << "lucky_label: no supported agent within envy tolerance " << envy_tol << " at lambda=(";
  for (size_t i = 0; i < lambda.w.size(); ++i)
    msg << (i ? "," : "") << rat_to_string(lambda.w[i]);
  msg << ")";
  throw lucky_violation_error(msg.str(), envy.entries, envy.n);
}

}  // namespace detail

/// Labels a weight vector with the smallest-index supported agent whose envy
/// row at the Q-optimum is within envy_tol. Retries once at a ten-fold
/// tighter solver tolerance before declaring a violation.
inline int lucky_label(const DeterministicSpace& space, const std::vector<Preference>& prefs,
                       const WeightVector& lambda, const SolverConfig& cfg, double envy_tol,
                       QSolveCache* cache = nullptr) {
  return detail::lucky_label_full(space, prefs, lambda, cfg, envy_tol, cache).label;
}

namespace detail {

inline std::vector<Simplex> completely_labeled_cells(const LabeledComplex& c, int n_agents) {
  std::vector<Simplex> out;
  for (const auto& s : c.simplices) {
    std::vector<bool> seen(static_cast<size_t>(n_agents), false);
    int distinct = 0;
    for (const auto& v : s.vertices) {
      auto it = c.vertex_labels.find(v.w);
      if (it == c.vertex_labels.end())
        throw std::invalid_argument("completely_labeled: unlabeled vertex in complex");
      if (it->second < 0 || it->second >= n_agents)
        throw std::invalid_argument("completely_labeled: label out of range");
      if (!seen[static_cast<size_t>(it->second)]) {
        seen[static_cast<size_t>(it->second)] = true;
        ++distinct;
      }
    }
    if (distinct == n_agents) out.push_back(s);
  }
  return out;
}

}  // namespace detail

/// All completely labeled cells (every agent appears among the corner
/// labels). For a proper labeling of a subdivided weight simplex the count
/// is odd, so an empty result signals a broken labeling.
inline std::vector<Simplex> find_completely_labeled(const LabeledComplex& c) {
  if (c.simplices.empty()) throw std::invalid_argument("find_completely_labeled: empty complex");
  const int n = c.simplices[0].n_corners();
  auto out = detail::completely_labeled_cells(c, n);
  if (out.empty())
    throw sperner_violation_error(
        "find_completely_labeled: no completely labeled cell in a labeled complex");
  return out;
}

struct RefineTraceRow {
  int round = 0;
  double mesh = 0.0;
  long n_vertices = 0;
  long n_completely_labeled = 0;
  WeightVector candidate_lambda;
  double max_envy = 0.0;
};

/// One subdivision cell captured for plotting (weight coordinates as
/// doubles, one label per corner, completeness flag, refinement level).
struct PlotCell {
  std::vector<std::vector<double>> vertices;
  std::vector<int> labels;
  bool complete = false;
  int level = 0;
};

struct RefineOptions {
  QSolveCache* cache = nullptr;
  std::vector<RefineTraceRow>* trace = nullptr;
  std::vector<PlotCell>* plot = nullptr;
  double envy_tol = -1.0;   // lucky labeling tolerance; defaults to eps / 4
  long max_solves = 40000;  // candidate + label solves before giving up
};

struct RefineResult {
  WeightVector lambda_bar;
  QSolution solution;
  int subdivision_rounds = 0;
  double mesh_final = 0.0;
};

namespace detail {

class Refiner {
 public:
  Refiner(const DeterministicSpace& space, const std::vector<Preference>& prefs,
          const SolverConfig& cfg, double eps, std::vector<double> schedule,
          const RefineOptions& opts)
      : space_(space),
        prefs_(prefs),
        cfg_(cfg),
        eps_(eps),
        schedule_(std::move(schedule)),
        opts_(opts),
        cache_(opts.cache ? *opts.cache : own_cache_) {
    envy_tol_ = opts.envy_tol > 0 ? opts.envy_tol : eps / 4.0;
  }

  RefineResult run() {
    const int n = space_.n_agents();
    if (n == 1) {
      WeightVector one = WeightVector::uniform(1);
      QSolution sol = cache_.solve(space_, prefs_, one, cfg_);
      return {one, std::move(sol), 0, 0.0};
    }
    Simplex root = Simplex::standard(n);
    // The center of the weight simplex often already works; it also seeds
    // the best-so-far pair reported on failure.
    if (auto hit = evaluate(root.barycenter(), 0, root.diameter(), 0, 0)) {
      return {hit->first, std::move(hit->second), 0, root.diameter()};
    }
    auto res = search(root);
    if (res) return std::move(*res);
    std::ostringstream msg;
    msg << "refine_to_lambda: no candidate reached max_envy <= " << eps_
        << "; best " << best_envy_ << " at lambda=(";
    for (size_t i = 0; i < best_lambda_.w.size(); ++i)
      msg << (i ? "," : "") << rat_to_string(best_lambda_.w[i]);
    msg << ")";
    throw refinement_failure_error(msg.str(), best_envy_);
  }

 private:
  std::optional<std::pair<WeightVector, QSolution>> evaluate(const WeightVector& lambda,
                                                             int round, double mesh,
                                                             long n_vertices, long n_cells,
                                                             double* envy_out = nullptr) {
    spend();
    QSolution sol = cache_.solve(space_, prefs_, lambda, cfg_);
    double envy = envy_matrix_from_marginals(sol.marginals, prefs_).max();
    if (envy_out) *envy_out = envy;
    if (envy < best_envy_) {
      best_envy_ = envy;
      best_lambda_ = lambda;
    }
    if (opts_.trace)
      opts_.trace->push_back({round, mesh, n_vertices, n_cells, lambda, envy});
    if (envy <= eps_) return std::make_pair(lambda, std::move(sol));
    return std::nullopt;
  }

  void spend() {
    if (++solves_ > opts_.max_solves) {
      std::ostringstream msg;
      msg << "refine_to_lambda: solve budget exhausted; best max_envy " << best_envy_;
      throw refinement_failure_error(msg.str(), best_envy_);
    }
  }

  // Cached per-vertex data: lucky label, worst envy, and the per-agent
  // envy rows at the Q-optimum for that weight vector.
  const LuckyResult& info_at(const WeightVector& v) {
    auto it = labels_.find(v.w);
    if (it == labels_.end()) {
      spend();
      LuckyResult info = lucky_label_full(space_, prefs_, v, cfg_, envy_tol_, &cache_);
      if (info.max_envy < best_envy_) {
        best_envy_ = info.max_envy;
        best_lambda_ = v;
      }
      if (info.max_envy <= eps_ && !found_) {
        found_ = std::make_pair(v, cache_.solve(space_, prefs_, v, cfg_));
        found_envy_ = info.max_envy;
      }
      it = labels_.emplace(v.w, std::move(info)).first;
    }
    return it->second;
  }

  void label_corners(const Simplex& s) {
    for (const auto& v : s.vertices) info_at(v);
  }

  bool is_complete(const Simplex& s) {
    std::set<int> labs;
    for (const auto& v : s.vertices) labs.insert(labels_.at(v.w).label);
    return static_cast<int>(labs.size()) == space_.n_agents();
  }

  void plot_region(const std::vector<Simplex>& region, const std::vector<char>& complete,
                   int level) {
    if (!opts_.plot || space_.n_agents() != 3) return;
    for (size_t i = 0; i < region.size(); ++i) {
      PlotCell cell;
      cell.level = level;
      cell.complete = complete[i] != 0;
      for (const auto& v : region[i].vertices) {
        cell.vertices.push_back(v.as_doubles());
        cell.labels.push_back(labels_.at(v.w).label);
      }
      opts_.plot->push_back(std::move(cell));
    }
  }

  RefineResult take_found(double mesh) {
    RefineResult res{std::move(found_->first), std::move(found_->second), rounds_, mesh};
    found_.reset();
    if (opts_.trace)
      opts_.trace->push_back({rounds_, mesh, static_cast<long>(labels_.size()), 0,
                              res.lambda_bar, found_envy_});
    return res;
  }

  static WeightVector affine_point(const WeightVector& a, const WeightVector& b, long num,
                                   long den) {
    WeightVector out;
    Rat t(num, den);
    for (size_t i = 0; i < a.w.size(); ++i) out.w.push_back(a.w[i] + (b.w[i] - a.w[i]) * t);
    return out;
  }

  // Quadrant of the sign pair (row_0 - theta, row_1 - theta); the junction
  // the subdivision converges to is a simultaneous zero of this pair.
  int quadrant(const LuckyResult& info) const {
    bool p0 = info.rows[0] >= envy_tol_;
    bool p1 = info.rows[1] >= envy_tol_;
    if (p0 && p1) return 0;
    if (!p0 && p1) return 1;
    if (!p0 && !p1) return 2;
    return 3;
  }

  static int quad_step(int a, int b) {
    int d = (b - a) & 3;
    if (d == 3) return -1;
    return d;  // 0, 1, or the ambiguous 2
  }

  // Accumulates signed quadrant steps along the segment a->b, refining the
  // sampling wherever the field jumps two quadrants at once.
  bool segment_winding(const WeightVector& a, const WeightVector& b, int qa, int qb, int depth,
                       long& total) {
    int step = quad_step(qa, qb);
    if (step != 2) {
      total += step;
      return true;
    }
    if (depth > 24 || ++wind_spend_ > 600) return false;
    WeightVector m = affine_point(a, b, 1, 2);
    int qm = quadrant(info_at(m));
    if (found_) return true;
    if (!segment_winding(a, m, qa, qm, depth + 1, total)) return false;
    if (found_) return true;
    return segment_winding(m, b, qm, qb, depth + 1, total);
  }

  // Winding number of (row_0 - theta, row_1 - theta) around the triangle
  // boundary; nonzero means the junction lies inside.
  std::optional<long> triangle_winding(const std::array<WeightVector, 3>& t) {
    const long S = 8;
    long total = 0;
    wind_spend_ = 0;
    for (int e = 0; e < 3; ++e) {
      const WeightVector& a = t[static_cast<size_t>(e)];
      const WeightVector& b = t[static_cast<size_t>((e + 1) % 3)];
      WeightVector prev = a;
      int qprev = quadrant(info_at(prev));
      if (found_) return std::nullopt;
      for (long k = 1; k <= S; ++k) {
        WeightVector cur = k == S ? b : affine_point(a, b, k, S);
        int qcur = quadrant(info_at(cur));
        if (found_) return std::nullopt;
        if (!segment_winding(prev, cur, qprev, qcur, 0, total)) return std::nullopt;
        if (found_) return std::nullopt;
        prev = std::move(cur);
        qprev = qcur;
      }
    }
    if (total % 4 != 0) return std::nullopt;
    return total / 4;
  }

  static double tri_diameter(const std::array<WeightVector, 3>& t) {
    double best = 0.0;
    for (int i = 0; i < 3; ++i)
      for (int k = i + 1; k < 3; ++k) {
        auto a = t[static_cast<size_t>(i)].as_doubles();
        auto b = t[static_cast<size_t>(k)].as_doubles();
        double s = 0.0;
        for (size_t c = 0; c < a.size(); ++c) s += (a[c] - b[c]) * (a[c] - b[c]);
        best = std::max(best, std::sqrt(s));
      }
    return best;
  }

  static WeightVector tri_barycenter(const std::array<WeightVector, 3>& t) {
    WeightVector out;
    for (size_t i = 0; i < t[0].w.size(); ++i)
      out.w.push_back((t[0].w[i] + t[1].w[i] + t[2].w[i]) / Rat(3));
    return out;
  }

  // Inflates the candidate cell about its barycenter as far as the simplex
  // allows (up to 3x), so the junction a neighbouring cell owns still falls
  // inside the starting triangle.
  std::array<WeightVector, 3> inflate(const Simplex& cand) const {
    WeightVector b = cand.barycenter();
    Rat scale(3);
    for (const auto& v : cand.vertices)
      for (size_t i = 0; i < v.w.size(); ++i) {
        Rat d = v.w[i] - b.w[i];
        if (d < Rat(0)) {
          // largest t with b + t*d >= 0
          Rat t = b.w[i] / -d;
          if (t < scale) scale = t;
        }
      }
    std::array<WeightVector, 3> out;
    for (size_t k = 0; k < 3; ++k) {
      for (size_t i = 0; i < b.w.size(); ++i)
        out[k].w.push_back(b.w[i] + (cand.vertices[k].w[i] - b.w[i]) * scale);
    }
    return out;
  }

  // Bisection on nested triangles that keep a nonzero winding, converging
  // to the junction point where both tracked envy rows equal theta and the
  // barycenter becomes eps-envy-free.
  std::optional<RefineResult> winding_descend(const Simplex& cand) {
    std::array<WeightVector, 3> t = inflate(cand);
    auto w = triangle_winding(t);
    if (found_) return take_found(tri_diameter(t));
#ifdef FAIRDIV_SEARCH_LOG
    {
      auto b = tri_barycenter(t).as_doubles();
      std::fprintf(stderr, "  [wind] cand bary=(%.4f,%.4f) diam=%.3e w=%s solves=%ld\n", b[0],
                   b[1], tri_diameter(t), w ? std::to_string(*w).c_str() : "??", solves_);
    }
#endif
    if (!w || *w == 0) return std::nullopt;
    for (int depth = 0; depth < 90; ++depth) {
      double diam = tri_diameter(t);
      if (auto hit = evaluate(tri_barycenter(t), rounds_, diam,
                              static_cast<long>(labels_.size()), 1))
        return RefineResult{hit->first, std::move(hit->second), rounds_, diam};
      std::array<WeightVector, 3> m = {affine_point(t[0], t[1], 1, 2),
                                       affine_point(t[1], t[2], 1, 2),
                                       affine_point(t[0], t[2], 1, 2)};
      std::array<std::array<WeightVector, 3>, 4> kids = {{{t[0], m[0], m[2]},
                                                          {m[0], t[1], m[1]},
                                                          {m[2], m[1], t[2]},
                                                          {m[0], m[1], m[2]}}};
      bool moved = false;
      for (auto& kid : kids) {
        auto wk = triangle_winding(kid);
        if (found_) return take_found(tri_diameter(kid));
        if (wk && *wk != 0) {
          t = kid;
          moved = true;
          ++rounds_;
          break;
        }
      }
      if (!moved) return std::nullopt;
    }
    return std::nullopt;
  }

  // Interval bisection for two agents: the target sits where agent 0's envy
  // row crosses theta, and the lucky lemma pins the other agent there.
  std::optional<RefineResult> bisect_phase(const std::vector<Simplex>& region) {
    for (const auto& cell : region) {
      double g0 = labels_.at(cell.vertices[0].w).rows[0] - envy_tol_;
      double g1 = labels_.at(cell.vertices[1].w).rows[0] - envy_tol_;
      if ((g0 >= 0) == (g1 >= 0)) continue;
      WeightVector lo = cell.vertices[0], hi = cell.vertices[1];
      bool lo_pos = g0 >= 0;
      for (int it = 0; it < 80; ++it) {
        WeightVector mid = affine_point(lo, hi, 1, 2);
        const LuckyResult& im = info_at(mid);
        if (found_) return take_found(0.0);
        if ((im.rows[0] - envy_tol_ >= 0) == lo_pos)
          lo = std::move(mid);
        else
          hi = std::move(mid);
      }
    }
    return std::nullopt;
  }

  // Follows the two tracked sign-crossing curves for three agents. The
  // junction sits where they cross; the cells the curves pass through form
  // a one-dimensional band whose refinement cost grows slowly, and once the
  // mesh resolves the sign sectors around the junction a winding descent
  // from a completely labeled or doubly crossing cell converges onto it.
  std::optional<RefineResult> band_phase(std::vector<Simplex> region, double floor_mesh) {
    const size_t band_cap = 8000;
    const double attempt_mesh = 0.08;
    for (int pass = 0; pass < 60; ++pass) {
      std::vector<Simplex> band;
      std::vector<Simplex> triples;
      std::vector<Simplex> bicross;
      for (const auto& cell : region) {
        bool s0n = false, s0p = false, s1n = false, s1p = false;
        for (const auto& v : cell.vertices) {
          const auto& rows = labels_.at(v.w).rows;
          (rows[0] >= envy_tol_ ? s0p : s0n) = true;
          (rows[1] >= envy_tol_ ? s1p : s1n) = true;
        }
        const bool cross0 = s0n && s0p, cross1 = s1n && s1p;
        const bool trip = is_complete(cell);
        if (trip) triples.push_back(cell);
        else if (cross0 && cross1) bicross.push_back(cell);
        if (trip || cross0 || cross1) band.push_back(cell);
      }
      if (band.empty()) return std::nullopt;
      double mesh = 0.0;
      for (const auto& cell : band) mesh = std::max(mesh, cell.diameter());
#ifdef FAIRDIV_SEARCH_LOG
      std::fprintf(stderr,
                   "[band] pass=%d mesh=%.3e band=%zu triples=%zu bicross=%zu solves=%ld\n",
                   pass, mesh, band.size(), triples.size(), bicross.size(), solves_);
#endif

      for (const auto& t : triples) {
        if (auto hit = evaluate(t.barycenter(), rounds_, t.diameter(),
                                static_cast<long>(labels_.size()),
                                static_cast<long>(triples.size())))
          return RefineResult{hit->first, std::move(hit->second), rounds_, t.diameter()};
      }
      if (mesh <= attempt_mesh) {
        size_t attempts = 0;
        for (const auto* list : {&triples, &bicross}) {
          for (const auto& cell : *list) {
            if (attempts >= 8) break;
            ++attempts;
            if (auto res = winding_descend(cell)) return res;
            if (found_) return take_found(0.0);
          }
        }
      }
      if (mesh <= std::max(floor_mesh, 1e-7)) return std::nullopt;
      if (band.size() * 6 > band_cap) return std::nullopt;

      std::vector<Simplex> next;
      for (const auto& cell : band) {
        LabeledComplex sub = barycentric_subdivide(cell);
        for (auto& child : sub.simplices) {
          label_corners(child);
          if (found_) return take_found(child.diameter());
          next.push_back(std::move(child));
        }
      }
      ++rounds_;
      std::sort(next.begin(), next.end());
      next.erase(std::unique(next.begin(), next.end()), next.end());
      region = std::move(next);
    }
    return std::nullopt;
  }

  // Star continuation for four or more agents: keep the closed vertex star
  // of the completely labeled set, widening when it goes empty. Leaves the
  // reserve untouched for the Newton endgame.
  std::optional<RefineResult> star_phase(std::vector<Simplex> region, double floor_mesh,
                                         long reserve) {
    const size_t region_cap = 20000;
    while (!region.empty()) {
      double mesh = 0.0;
      std::vector<Simplex> next;
      for (const auto& cell : region) {
        if (solves_ + reserve >= opts_.max_solves) return std::nullopt;
        LabeledComplex sub = barycentric_subdivide(cell);
        for (auto& child : sub.simplices) {
          label_corners(child);
          if (found_) return take_found(child.diameter());
          mesh = std::max(mesh, child.diameter());
          next.push_back(std::move(child));
        }
      }
      ++rounds_;
      std::sort(next.begin(), next.end());
      next.erase(std::unique(next.begin(), next.end()), next.end());
      region = std::move(next);

      std::vector<size_t> triples;
      for (size_t i = 0; i < region.size(); ++i)
        if (is_complete(region[i])) triples.push_back(i);
      for (size_t idx : triples) {
        if (auto hit = evaluate(region[idx].barycenter(), rounds_, region[idx].diameter(),
                                static_cast<long>(labels_.size()),
                                static_cast<long>(triples.size())))
          return RefineResult{hit->first, std::move(hit->second), rounds_,
                              region[idx].diameter()};
      }
      if (mesh <= floor_mesh) return std::nullopt;
      // Each level sharpens the best seed; a peel attempt from it is cheap
      // (cached when the seed has not moved) and usually ends the search.
      if (auto res = peel_phase()) return res;

      if (!triples.empty()) {
        std::set<std::vector<Rat>> anchor;
        for (size_t idx : triples)
          for (const auto& v : region[idx].vertices) anchor.insert(v.w);
        std::vector<Simplex> star;
        for (auto& cell : region) {
          bool touch = false;
          for (const auto& v : cell.vertices)
            if (anchor.count(v.w)) {
              touch = true;
              break;
            }
          if (touch) star.push_back(std::move(cell));
        }
        region = std::move(star);
      } else if (region.size() > region_cap) {
        return std::nullopt;
      }
    }
    return std::nullopt;
  }

  // Rounds a point to a dyadic grid and renormalizes exactly onto the
  // weight simplex. Keeps label keys and cache keys small.
  WeightVector snap_simplex(const std::vector<double>& x) const {
    const std::int64_t den = std::int64_t(1) << 40;
    WeightVector v;
    v.w.reserve(x.size());
    Rat sum = 0;
    for (double c : x) {
      Rat r(static_cast<std::int64_t>(std::llround(std::clamp(c, 0.0, 1.0) * static_cast<double>(den))), den);
      v.w.push_back(r);
      sum += r;
    }
    if (sum == 0) {
      for (auto& r : v.w) r = Rat(1, static_cast<std::int64_t>(v.w.size()));
      return v;
    }
    for (auto& r : v.w) r /= sum;
    return v;
  }

  // Peels the worst envy row by bisection toward that agent's corner of the
  // weight simplex: raising an agent's weight lowers their envy, hitting zero
  // at the corner, so a sign change of row - theta always brackets. Rows
  // sitting in exactly-zero plateaus keep their slack while the active row
  // descends; strongly coupled rows may need several peels. Success only
  // ever comes from an evaluated point meeting eps.
  std::optional<RefineResult> peel_phase() {
    const int n = space_.n_agents();
    std::vector<double> x = best_lambda_.as_doubles();
    const double nudge = std::ldexp(1.0, -18);
    for (double& c : x) c = std::max(c, nudge);
    WeightVector lam = snap_simplex(x);

    // Probe points snap to the dyadic grid so the exact certificates behind
    // every solve keep small numerators.
    auto toward_corner = [&](const WeightVector& base, int j, const Rat& t) {
      std::vector<double> y = base.as_doubles();
      double td = to_double(t);
      for (size_t k = 0; k < y.size(); ++k)
        y[k] = y[k] * (1.0 - td) + (static_cast<int>(k) == j ? td : 0.0);
      return snap_simplex(y);
    };

    double prev_max = std::numeric_limits<double>::infinity();
    for (int round = 0; round < 16; ++round) {
      const LuckyResult& info = info_at(lam);
      if (found_) return take_found(0.0);
      int worst = 0;
      for (int j = 1; j < n; ++j)
        if (info.rows[static_cast<size_t>(j)] > info.rows[static_cast<size_t>(worst)]) worst = j;
      const double max_row = info.rows[static_cast<size_t>(worst)];
      if (max_row <= envy_tol_ || max_row >= prev_max) {
        stall_seed_ = lam;  // coupled rows: hand the point to the Newton phase
        return std::nullopt;
      }
      prev_max = max_row;

      Rat lo = 0, hi = -1;
      Rat t(1, std::int64_t(1) << 20);
      const Rat t_max(1048575, 1048576);
      for (int k = 0; k < 11 && hi < 0; ++k, t = (4 * t > t_max ? t_max : Rat(4 * t))) {
        const LuckyResult& probe = info_at(toward_corner(lam, worst, t));
        if (found_) return take_found(0.0);
        if (probe.rows[static_cast<size_t>(worst)] < envy_tol_)
          hi = t;
        else
          lo = t;
      }
#ifdef FAIRDIV_SEARCH_LOG
      std::fprintf(stderr, "[peel] round=%d worst=%d row=%.3e bracket=%d solves=%ld\n", round,
                   worst, max_row, hi >= 0 ? 1 : 0, solves_);
#endif
      if (hi < 0) return std::nullopt;
      for (int it = 0; it < 40; ++it) {
        Rat mid = (lo + hi) / 2;
        const LuckyResult& probe = info_at(toward_corner(lam, worst, mid));
        if (found_) return take_found(0.0);
        if (probe.rows[static_cast<size_t>(worst)] < envy_tol_)
          hi = mid;
        else
          lo = mid;
      }
      lam = toward_corner(lam, worst, hi);
      ++rounds_;
    }
    return std::nullopt;
  }

  // Damped Gauss-Newton descent on the active envy rows: drives every row
  // currently above theta back to theta along the minimum-norm step, leaving
  // rows resting in their exact-zero plateaus out of the system (their flat
  // Jacobian rows would otherwise make it singular). Finite differences
  // along e_k - e_{n-1} supply the generalized Jacobian. Acceptance never
  // rests on the residual: only an evaluated point whose envy meets eps
  // counts, so converging to the wrong junction just reports failure.
  std::optional<RefineResult> newton_phase(const WeightVector& seed) {
    const int n = space_.n_agents();
    const int m = n - 1;
    const double h = std::ldexp(1.0, -20);

    std::vector<double> x = seed.as_doubles();
    for (double& c : x) c = std::max(c, 4 * h);
    WeightVector lam = snap_simplex(x);

    auto rows_at = [&](const WeightVector& v) { return info_at(v).rows; };
    auto worst_of = [&](const std::vector<double>& rows) {
      double s = 0.0;
      for (double r : rows) s = std::max(s, r);
      return s;
    };

    std::vector<double> rows = rows_at(lam);
    if (found_) return take_found(0.0);
    for (int it = 0; it < 40; ++it) {
      std::vector<int> act;
      for (int j = 0; j < n; ++j)
        if (rows[static_cast<size_t>(j)] > envy_tol_) act.push_back(j);
      if (act.empty()) return std::nullopt;  // below theta yet above eps: impossible

      const std::vector<double> base = lam.as_doubles();
      std::vector<std::vector<double>> jac(static_cast<size_t>(n),
                                           std::vector<double>(static_cast<size_t>(m), 0.0));
      for (int k = 0; k < m; ++k) {
        std::vector<double> rp, rm;
        for (double sgn : {1.0, -1.0}) {
          std::vector<double> y = base;
          y[static_cast<size_t>(k)] += sgn * h;
          y[static_cast<size_t>(n - 1)] -= sgn * h;
          auto ry = rows_at(snap_simplex(y));
          if (found_) return take_found(0.0);
          (sgn > 0 ? rp : rm) = std::move(ry);
        }
        for (int j = 0; j < n; ++j)
          jac[static_cast<size_t>(j)][static_cast<size_t>(k)] =
              (rp[static_cast<size_t>(j)] - rm[static_cast<size_t>(j)]) / (2 * h);
      }

      // Minimum-norm step s = J^T (J J^T)^{-1} (theta - F) over the active
      // rows; a dependent row set sheds its least violated row.
      std::vector<double> step;
      while (!act.empty()) {
        const size_t k = act.size();
        std::vector<std::vector<Rat>> G(k, std::vector<Rat>(k, Rat(0)));
        std::vector<Rat> rhs(k, Rat(0));
        for (size_t a = 0; a < k; ++a) {
          for (size_t b = 0; b < k; ++b) {
            double dot = 0.0;
            for (int c = 0; c < m; ++c)
              dot += jac[static_cast<size_t>(act[a])][static_cast<size_t>(c)] *
                     jac[static_cast<size_t>(act[b])][static_cast<size_t>(c)];
            G[a][b] = rat_from_double(dot);
          }
          rhs[a] = rat_from_double(envy_tol_ - rows[static_cast<size_t>(act[a])]);
        }
        auto y = solve_linear(std::move(G), std::move(rhs));
        if (y) {
          step.assign(static_cast<size_t>(m), 0.0);
          for (int c = 0; c < m; ++c)
            for (size_t a = 0; a < k; ++a)
              step[static_cast<size_t>(c)] += jac[static_cast<size_t>(act[a])][static_cast<size_t>(c)] *
                                              to_double((*y)[a]);
          break;
        }
        size_t least = 0;
        for (size_t a = 1; a < k; ++a)
          if (rows[static_cast<size_t>(act[a])] < rows[static_cast<size_t>(act[least])]) least = a;
        act.erase(act.begin() + static_cast<std::ptrdiff_t>(least));
      }
      if (step.empty()) return std::nullopt;

      const double before = worst_of(rows);
      double scale = 1.0;
      bool moved = false;
      for (int half = 0; half < 8; ++half, scale *= 0.5) {
        std::vector<double> y = base;
        double rest = 0.0;
        for (int c = 0; c < m; ++c) {
          double s = step[static_cast<size_t>(c)] * scale;
          y[static_cast<size_t>(c)] += s;
          rest -= s;
        }
        y[static_cast<size_t>(n - 1)] += rest;
        WeightVector cand = snap_simplex(y);
        std::vector<double> rc = rows_at(cand);
        if (found_) return take_found(0.0);
        if (worst_of(rc) < before) {
          lam = std::move(cand);
          rows = std::move(rc);
          moved = true;
          ++rounds_;
          break;
        }
      }
#ifdef FAIRDIV_SEARCH_LOG
      std::fprintf(stderr, "[newton] it=%d worst=%.3e active=%zu moved=%d solves=%ld\n", it,
                   worst_of(rows), act.size(), moved ? 1 : 0, solves_);
#endif
      if (!moved) return std::nullopt;
    }
    return std::nullopt;
  }

  // Global subdivision while the cell count stays affordable: the paper's
  // level loop with candidate barycenter checks. Afterwards the dimension-
  // specific junction hunt takes over on the final global complex.
  std::optional<RefineResult> search(const Simplex& root) {
    const double floor_mesh = schedule_.back();
    const int n = space_.n_agents();
    const size_t global_cap = n == 2 ? 256 : (n == 3 ? 300 : 2000);
    size_t fanout = 1;
    for (int k = 2; k <= n; ++k) fanout *= static_cast<size_t>(k);

    std::vector<Simplex> region = {root};
    label_corners(root);
    if (found_) return take_found(root.diameter());

    std::vector<size_t> triples;
    int level = 0;
    double mesh = root.diameter();
    while (region.size() * fanout <= global_cap && mesh > floor_mesh) {
      std::vector<Simplex> next;
      mesh = 0.0;
      for (const auto& cell : region) {
        LabeledComplex sub = barycentric_subdivide(cell);
        for (auto& child : sub.simplices) {
          label_corners(child);
          if (found_) return take_found(child.diameter());
          mesh = std::max(mesh, child.diameter());
          next.push_back(std::move(child));
        }
      }
      ++rounds_;
      ++level;
      std::sort(next.begin(), next.end());
      next.erase(std::unique(next.begin(), next.end()), next.end());
      region = std::move(next);

      triples.clear();
      std::vector<char> complete(region.size(), 0);
      for (size_t i = 0; i < region.size(); ++i)
        if (is_complete(region[i])) {
          complete[i] = 1;
          triples.push_back(i);
        }
      plot_region(region, complete, level);
      for (size_t idx : triples) {
        if (auto hit = evaluate(region[idx].barycenter(), rounds_, region[idx].diameter(),
                                static_cast<long>(labels_.size()),
                                static_cast<long>(triples.size())))
          return RefineResult{hit->first, std::move(hit->second), rounds_,
                              region[idx].diameter()};
      }
    }
    if (mesh <= floor_mesh) return std::nullopt;

    if (n == 2) return bisect_phase(region);
    if (auto res = peel_phase()) return res;
    if (auto res = newton_phase(stall_seed_ ? *stall_seed_ : best_lambda_)) return res;
    if (n >= 4) {
      if (auto res = star_phase(std::move(region), floor_mesh, 2000)) return res;
      if (auto res = peel_phase()) return res;
      return newton_phase(stall_seed_ ? *stall_seed_ : best_lambda_);
    }
    return band_phase(std::move(region), floor_mesh);
  }

  const DeterministicSpace& space_;
  const std::vector<Preference>& prefs_;
  SolverConfig cfg_;
  double eps_;
  std::vector<double> schedule_;
  RefineOptions opts_;
  QSolveCache own_cache_;
  QSolveCache& cache_;
  std::map<std::vector<Rat>, LuckyResult> labels_;
  std::optional<std::pair<WeightVector, QSolution>> found_;
  std::optional<WeightVector> stall_seed_;
  double found_envy_ = 0.0;
  long wind_spend_ = 0;
  double envy_tol_ = 0.0;
  long solves_ = 0;
  int rounds_ = 0;
  double best_envy_ = std::numeric_limits<double>::infinity();
  WeightVector best_lambda_;
};

}  // namespace detail

/// Descends the weight simplex along completely labeled cells: subdivide,
/// label with lucky_label, and refine the most promising cells first
/// (completely labeled, then lowest corner envy) while keeping the rest of
/// the simplex available, until a candidate barycenter is eps-envy-free.
/// The schedule's last entry is the mesh resolution floor.
inline RefineResult refine_to_lambda_traced(const DeterministicSpace& space,
                                            const std::vector<Preference>& prefs,
                                            const SolverConfig& cfg, double eps,
                                            const std::vector<double>& c_schedule,
                                            const RefineOptions& opts = {}) {
  if (!(eps > 0)) throw std::invalid_argument("refine_to_lambda: eps must be positive");
  if (space.n_agents() > 1) {
    if (c_schedule.empty()) throw std::invalid_argument("refine_to_lambda: empty schedule");
    for (size_t k = 0; k + 1 < c_schedule.size(); ++k)
      if (!(c_schedule[k] > c_schedule[k + 1]))
        throw std::invalid_argument("refine_to_lambda: schedule must strictly decrease");
    if (!(c_schedule.back() <= eps))
      throw std::invalid_argument("refine_to_lambda: schedule must descend below eps");
  }
  detail::Refiner refiner(space, prefs, cfg, eps, c_schedule, opts);
  return refiner.run();
}

inline std::pair<WeightVector, QSolution> refine_to_lambda(
    const DeterministicSpace& space, const std::vector<Preference>& prefs, double delta,
    double eps, const std::vector<double>& c_schedule) {
  SolverConfig cfg;
  cfg.delta = delta;
  cfg.opt_tol = 1e-12;
  auto res = refine_to_lambda_traced(space, prefs, cfg, eps, c_schedule);
  return {std::move(res.lambda_bar), std::move(res.solution)};
}

/// Weak-Pareto-efficiency and envy-freeness certificate for a lottery found
/// by the subdivision search.
struct FairCertificate {
  WeightVector lambda_bar;
  Lottery lottery;
  double max_envy = 0.0;
  double wpe_gap = 0.0;
  double delta_final = 0.0;
  double mesh_final = 0.0;
  int subdivision_rounds = 0;
};

/// Default mesh schedule: geometric contraction from the standard simplex
/// diameter down to the resolution limit of double weights.
inline std::vector<double> default_schedule(int n_agents, double floor = 1e-13) {
  std::vector<double> out;
  if (n_agents <= 1) return out;
  const double diam = std::sqrt(2.0);
  const double ratio = static_cast<double>(n_agents - 1) / n_agents;
  double c = diam;
  while (c > floor) {
    c *= ratio;
    out.push_back(c);
  }
  return out;
}

/// End-to-end solve: regularize with delta = eps / N, refine the weights to
/// an eps-envy-free Q-optimum, and certify the wPE gap against the
/// eps + delta * N bound implied by the regularization.
inline FairCertificate solve_fair(const DeterministicSpace& space,
                                  const std::vector<Preference>& prefs, double eps,
                                  const RefineOptions& opts = {}) {
  if (!(eps > 0)) throw std::invalid_argument("solve_fair: eps must be positive");
  ValidationReport report = validate_space(space);
  if (!report.ok()) {
    std::string msg = "solve_fair: space fails validation";
    if (report.witness) {
      msg += " (swap of allocation ";
      msg += space.render(report.witness->allocation);
      msg += " for agents " + std::to_string(report.witness->i) + "," +
             std::to_string(report.witness->j) + " leaves the space)";
    }
    throw invalid_instance_error(msg);
  }
  const int n = space.n_agents();
  const double delta = eps / n;
  SolverConfig cfg;
  cfg.delta = delta;
  cfg.opt_tol = 1e-12;

  auto res = refine_to_lambda_traced(space, prefs, cfg, eps, default_schedule(n), opts);
  const double envy = envy_matrix_from_marginals(res.solution.marginals, prefs).max();
  const double gap = wpe_gap(space, prefs, res.solution.lottery);
  const double bound = eps + delta * n;
  if (envy > eps || gap > bound) {
    std::ostringstream msg;
    msg << "solve_fair: certificate check failed (max_envy " << envy << " vs " << eps
        << ", wpe_gap " << gap << " vs " << bound << ")";
    throw wpe_check_failure_error(msg.str());
  }

  FairCertificate cert;
  cert.lambda_bar = std::move(res.lambda_bar);
  cert.lottery = std::move(res.solution.lottery);
  cert.max_envy = envy;
  cert.wpe_gap = gap;
  cert.delta_final = delta;
  cert.mesh_final = res.mesh_final;
  cert.subdivision_rounds = res.subdivision_rounds;
  return cert;
}

}  // namespace fairdiv
