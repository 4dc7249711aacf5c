// SPDX-License-Identifier: Apache-2.0
// Slow, obviously-correct implementations used to check the metrics module.
#pragma once

#include <cmath>
#include <queue>
#include <random>
#include <utility>
#include <vector>

#include "miniseg/raster.hpp"

namespace oracle {

inline miniseg::Mask random_mask(std::mt19937_64& rng, int max_extent) {
  std::uniform_int_distribution<int> extent(1, max_extent);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  miniseg::Mask m(extent(rng), extent(rng));
  const double density = unit(rng);
  for (auto& b : m.bits) b = unit(rng) < density ? 1 : 0;
  return m;
}

inline bool is_boundary(const miniseg::Mask& m, int y, int x) {
  if (m.at(y, x) == 0) return false;
  const int dy[] = {-1, 1, 0, 0};
  const int dx[] = {0, 0, -1, 1};
  for (int k = 0; k < 4; ++k) {
    const int ny = y + dy[k], nx = x + dx[k];
    if (ny < 0 || nx < 0 || ny >= m.height || nx >= m.width) return true;
    if (m.at(ny, nx) == 0) return true;
  }
  return false;
}

inline double hausdorff(const miniseg::Mask& a, const miniseg::Mask& b) {
  std::vector<std::pair<int, int>> pa, pb;
  for (int y = 0; y < a.height; ++y)
    for (int x = 0; x < a.width; ++x) {
      if (is_boundary(a, y, x)) pa.emplace_back(y, x);
      if (is_boundary(b, y, x)) pb.emplace_back(y, x);
    }
  if (pa.empty() && pb.empty()) return 0.0;
  if (pa.empty() || pb.empty()) return std::sqrt(double(a.height) * a.height + double(a.width) * a.width);
  auto directed = [](const auto& from, const auto& to) {
    long worst = 0;
    for (auto [y, x] : from) {
      long best = -1;
      for (auto [v, u] : to) {
        const long d = long(y - v) * (y - v) + long(x - u) * (x - u);
        if (best < 0 || d < best) best = d;
      }
      worst = std::max(worst, best);
    }
    return worst;
  };
  return std::sqrt(static_cast<double>(std::max(directed(pa, pb), directed(pb, pa))));
}

inline int components(const miniseg::Mask& m) {
  std::vector<char> seen(m.size(), 0);
  int count = 0;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      if (m.at(y, x) == 0 || seen[y * m.width + x]) continue;
      ++count;
      std::queue<std::pair<int, int>> todo;
      todo.emplace(y, x);
      seen[y * m.width + x] = 1;
      while (!todo.empty()) {
        auto [cy, cx] = todo.front();
        todo.pop();
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int ny = cy + dy, nx = cx + dx;
            if (ny < 0 || nx < 0 || ny >= m.height || nx >= m.width) continue;
            if (m.at(ny, nx) == 0 || seen[ny * m.width + nx]) continue;
            seen[ny * m.width + nx] = 1;
            todo.emplace(ny, nx);
          }
      }
    }
  return count;
}

struct Scores {
  double miou, sen, spc, dsc;
};

// Direct per-pixel evaluation of the metric definitions and the empty-set
// conventions.
inline Scores scores(const miniseg::Mask& pred, const miniseg::Mask& gt) {
  double tp = 0, fp = 0, fn = 0, tn = 0;
  for (int y = 0; y < gt.height; ++y)
    for (int x = 0; x < gt.width; ++x) {
      const int p = pred.at(y, x), g = gt.at(y, x);
      tp += p & g;
      fp += p & (1 - g);
      fn += (1 - p) & g;
      tn += (1 - p) & (1 - g);
    }
  auto frac = [](double n, double d) { return d == 0 ? 1.0 : n / d; };
  Scores s{};
  s.sen = frac(tp, tp + fn);
  s.spc = frac(tn, tn + fp);
  if (tp + fp == 0 && tp + fn == 0) s.dsc = 1.0;
  else if (tp + fp == 0 || tp + fn == 0) s.dsc = 0.0;
  else s.dsc = 2 * tp / (2 * tp + fp + fn);
  s.miou = 0.5 * (frac(tp, tp + fp + fn) + frac(tn, tn + fn + fp));
  return s;
}

}  // namespace oracle
