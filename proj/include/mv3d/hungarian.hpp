// Minimum-cost bipartite assignment (Hungarian algorithm, potentials +
// shortest augmenting path, O(n^2 m)). Handles rectangular matrices by
// matching min(rows, cols) pairs.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

namespace mv3d {

// One-to-one matches between prediction rows and ground-truth columns.
// Indices are unique on both sides; unmatched predictions are background.
struct Assignment {
  std::vector<std::pair<int, int>> pairs;  // (prediction index, ground-truth index)
  double total_cost = 0.0;
};

struct CostMatrix {
  int rows = 0, cols = 0;
  std::vector<double> v;  // row-major

  double at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }
  double& at(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
};

namespace detail {

// Core solver, requires rows <= cols. Returns col index per row.
inline std::vector<int> hungarian_rows_le_cols(const CostMatrix& a) {
  int n = a.rows, m = a.cols;
  const double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<size_t>(n) + 1, 0.0), v(static_cast<size_t>(m) + 1, 0.0);
  std::vector<int> p(static_cast<size_t>(m) + 1, 0), way(static_cast<size_t>(m) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<size_t>(m) + 1, kInf);
    std::vector<char> used(static_cast<size_t>(m) + 1, 0);
    do {
      used[static_cast<size_t>(j0)] = 1;
      int i0 = p[static_cast<size_t>(j0)], j1 = 0;
      double delta = kInf;
      for (int j = 1; j <= m; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        double cur = a.at(i0 - 1, j - 1) - u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<size_t>(j0)] != 0);
    do {
      int j1 = way[static_cast<size_t>(j0)];
      p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(static_cast<size_t>(n), -1);
  for (int j = 1; j <= m; ++j)
    if (p[static_cast<size_t>(j)] != 0) row_to_col[static_cast<size_t>(p[static_cast<size_t>(j)] - 1)] = j - 1;
  return row_to_col;
}

}  // namespace detail

inline Assignment hungarian_match(const CostMatrix& cost) {
  if (cost.rows < 1 || cost.cols < 1)
    throw std::invalid_argument("hungarian_match: empty cost matrix");
  if (static_cast<int64_t>(cost.v.size()) != static_cast<int64_t>(cost.rows) * cost.cols)
    throw std::invalid_argument("hungarian_match: dims do not match data length");
  for (double c : cost.v)
    if (std::isnan(c)) throw std::invalid_argument("hungarian_match: cost matrix contains NaN");

  Assignment out;
  if (cost.rows <= cost.cols) {
    auto r2c = detail::hungarian_rows_le_cols(cost);
    for (int r = 0; r < cost.rows; ++r)
      if (r2c[static_cast<size_t>(r)] >= 0) out.pairs.emplace_back(r, r2c[static_cast<size_t>(r)]);
  } else {
    CostMatrix t;
    t.rows = cost.cols;
    t.cols = cost.rows;
    t.v.resize(cost.v.size());
    for (int r = 0; r < cost.rows; ++r)
      for (int c = 0; c < cost.cols; ++c) t.at(c, r) = cost.at(r, c);
    auto c2r = detail::hungarian_rows_le_cols(t);
    for (int c = 0; c < cost.cols; ++c)
      if (c2r[static_cast<size_t>(c)] >= 0) out.pairs.emplace_back(c2r[static_cast<size_t>(c)], c);
    std::sort(out.pairs.begin(), out.pairs.end());
  }
  // Recompute the total from the original matrix in row order so the value
  // is bit-identical to any other summation of the same pairs.
  for (auto [r, c] : out.pairs) out.total_cost += cost.at(r, c);
  return out;
}

}  // namespace mv3d
