#pragma once

#include "fairdiv/errors.hpp"
#include "fairdiv/rational.hpp"

#include <cstddef>
#include <optional>
#include <vector>

namespace fairdiv {

enum class LpStatus { optimal, infeasible, unbounded };

struct LpResult {
  LpStatus status = LpStatus::infeasible;
  std::vector<Rat> x;     // primal values of the original variables
  Rat value = 0;          // objective at the optimum
  std::vector<Rat> dual;  // one multiplier per original constraint row
};

/// Exact two-phase dense simplex for  max c.x  s.t.  A x = b, x >= 0,
/// with Bland's rule throughout (finite termination, no numerics).
class RationalSimplex {
 public:
  RationalSimplex(std::vector<std::vector<Rat>> A, std::vector<Rat> b, std::vector<Rat> c)
      : A_(std::move(A)), b_(std::move(b)), c_(std::move(c)) {
    m_ = A_.size();
    n_ = m_ ? A_[0].size() : c_.size();
    if (b_.size() != m_) throw std::invalid_argument("simplex: b size mismatch");
    if (c_.size() != n_) throw std::invalid_argument("simplex: c size mismatch");
    for (const auto& row : A_)
      if (row.size() != n_) throw std::invalid_argument("simplex: ragged matrix");
  }

  LpResult solve() {
    row_sign_.assign(m_, 1);
    for (size_t r = 0; r < m_; ++r)
      if (b_[r] < 0) {
        row_sign_[r] = -1;
        b_[r] = -b_[r];
        for (auto& v : A_[r]) v = -v;
      }

    // Tableau: n_ original columns, m_ artificial columns, rhs.
    tab_.assign(m_, std::vector<Rat>(n_ + m_ + 1, Rat(0)));
    basis_.resize(m_);
    for (size_t r = 0; r < m_; ++r) {
      for (size_t j = 0; j < n_; ++j) tab_[r][j] = A_[r][j];
      tab_[r][n_ + r] = 1;
      tab_[r][n_ + m_] = b_[r];
      basis_[r] = n_ + r;
    }

    // Phase 1: maximize minus the artificial sum.
    std::vector<Rat> phase1(n_ + m_, Rat(0));
    for (size_t j = n_; j < n_ + m_; ++j) phase1[j] = -1;
    init_objective(phase1);
    run(/*forbid_artificials=*/false);
    LpResult result;
    if (obj_value_ != 0) {
      result.status = LpStatus::infeasible;
      return result;
    }
    drive_out_artificials();

    // Phase 2: the real objective, artificials barred from entering.
    std::vector<Rat> phase2(n_ + m_, Rat(0));
    for (size_t j = 0; j < n_; ++j) phase2[j] = c_[j];
    init_objective(phase2);
    bool bounded = run(/*forbid_artificials=*/true);
    if (!bounded) {
      result.status = LpStatus::unbounded;
      return result;
    }

    result.status = LpStatus::optimal;
    result.value = obj_value_;
    result.x.assign(n_, Rat(0));
    for (size_t r = 0; r < m_; ++r)
      if (basis_[r] < n_) result.x[basis_[r]] = tab_[r][n_ + m_];
    // Duals read off the artificial columns (they hold the basis inverse).
    result.dual.assign(m_, Rat(0));
    for (size_t i = 0; i < m_; ++i) {
      Rat y = 0;
      for (size_t r = 0; r < m_; ++r) y += phase2[basis_[r]] * tab_[r][n_ + i];
      result.dual[i] = y * row_sign_[i];
    }
    return result;
  }

 private:
  void init_objective(const std::vector<Rat>& cost) {
    cost_ = cost;
    red_.assign(n_ + m_, Rat(0));
    obj_value_ = 0;
    for (size_t j = 0; j < n_ + m_; ++j) red_[j] = cost[j];
    for (size_t r = 0; r < m_; ++r) {
      const Rat& cb = cost[basis_[r]];
      if (cb == 0) continue;
      for (size_t j = 0; j < n_ + m_; ++j) red_[j] -= cb * tab_[r][j];
      obj_value_ += cb * tab_[r][n_ + m_];
    }
    for (size_t r = 0; r < m_; ++r) red_[basis_[r]] = 0;
  }

  /// Returns false when unbounded.
  bool run(bool forbid_artificials) {
    for (;;) {
      size_t enter = n_ + m_;
      size_t limit = forbid_artificials ? n_ : n_ + m_;
      for (size_t j = 0; j < limit; ++j)
        if (red_[j] > 0) {
          enter = j;
          break;
        }
      if (enter == n_ + m_) return true;

      size_t leave = m_;
      Rat best_ratio = 0;
      for (size_t r = 0; r < m_; ++r) {
        if (tab_[r][enter] <= 0) continue;
        Rat ratio = tab_[r][n_ + m_] / tab_[r][enter];
        if (leave == m_ || ratio < best_ratio ||
            (ratio == best_ratio && basis_[r] < basis_[leave])) {
          leave = r;
          best_ratio = ratio;
        }
      }
      if (leave == m_) return false;
      pivot(leave, enter);
    }
  }

  void pivot(size_t r, size_t enter) {
    Rat piv = tab_[r][enter];
    for (auto& v : tab_[r]) v /= piv;
    for (size_t rr = 0; rr < m_; ++rr) {
      if (rr == r || tab_[rr][enter] == 0) continue;
      Rat f = tab_[rr][enter];
      for (size_t j = 0; j <= n_ + m_; ++j) tab_[rr][j] -= f * tab_[r][j];
    }
    if (red_[enter] != 0) {
      Rat f = red_[enter];
      for (size_t j = 0; j < n_ + m_; ++j) red_[j] -= f * tab_[r][j];
      obj_value_ += f * tab_[r][n_ + m_];
    }
    basis_[r] = enter;
  }

  void drive_out_artificials() {
    for (size_t r = 0; r < m_; ++r) {
      if (basis_[r] < n_) continue;
      size_t enter = n_;
      for (size_t j = 0; j < n_; ++j)
        if (tab_[r][j] != 0) {
          enter = j;
          break;
        }
      if (enter < n_) pivot(r, enter);
      // Otherwise the row is redundant; the artificial stays basic at zero.
    }
  }

  std::vector<std::vector<Rat>> A_;
  std::vector<Rat> b_, c_;
  size_t m_ = 0, n_ = 0;
  std::vector<int> row_sign_;
  std::vector<std::vector<Rat>> tab_;
  std::vector<size_t> basis_;
  std::vector<Rat> cost_, red_;
  Rat obj_value_ = 0;
};

inline LpResult solve_lp(std::vector<std::vector<Rat>> A, std::vector<Rat> b,
                         std::vector<Rat> c) {
  return RationalSimplex(std::move(A), std::move(b), std::move(c)).solve();
}

/// Exact Gaussian elimination for A x = b (any shape). Returns one solution
/// with non-pivot variables set to zero, or nothing when inconsistent.
inline std::optional<std::vector<Rat>> solve_linear(std::vector<std::vector<Rat>> A,
                                                    std::vector<Rat> b) {
  const size_t m = A.size();
  const size_t n = m ? A[0].size() : 0;
  std::vector<size_t> pivot_col;
  size_t row = 0;
  for (size_t col = 0; col < n && row < m; ++col) {
    size_t sel = row;
    while (sel < m && A[sel][col] == 0) ++sel;
    if (sel == m) continue;
    std::swap(A[sel], A[row]);
    std::swap(b[sel], b[row]);
    Rat piv = A[row][col];
    for (size_t j = col; j < n; ++j) A[row][j] /= piv;
    b[row] /= piv;
    for (size_t r = 0; r < m; ++r) {
      if (r == row || A[r][col] == 0) continue;
      Rat f = A[r][col];
      for (size_t j = col; j < n; ++j) A[r][j] -= f * A[row][j];
      b[r] -= f * b[row];
    }
    pivot_col.push_back(col);
    ++row;
  }
  for (size_t r = row; r < m; ++r)
    if (b[r] != 0) return std::nullopt;
  std::vector<Rat> x(n, Rat(0));
  for (size_t r = 0; r < row; ++r) x[pivot_col[r]] = b[r];
  return x;
}

}  // namespace fairdiv
