// SPDX-License-Identifier: Apache-2.0
#include "miniseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>

#include "miniseg/error.hpp"

namespace miniseg {

namespace {

void check_binary(const Mask& m, const char* what) {
  if (m.size() != static_cast<std::size_t>(m.height) * m.width)
    throw ShapeError(std::string(what) + " mask storage does not match its extents");
  for (std::uint8_t v : m.bits)
    if (v > 1) throw DataError(std::string(what) + " mask holds non-binary value " + std::to_string(v));
}

double ratio(std::uint64_t num, std::uint64_t den) {
  return den == 0 ? 1.0 : static_cast<double>(num) / static_cast<double>(den);
}

// Squared Euclidean distance transform of a 1-D sampled function (lower
// envelope of parabolas).
void edt_1d(const double* f, int n, double* d, int* v, double* z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    while (k >= 0) {
      const double s = ((f[q] + double(q) * q) - (f[v[k]] + double(v[k]) * v[k])) / (2.0 * (q - v[k]));
      if (s > z[k]) {
        z[k + 1] = s;
        break;
      }
      --k;
    }
    ++k;
    v[k] = q;
    if (k == 0) z[0] = -inf;
    z[k + 1] = inf;
  }
  if (k < 0) {
    std::fill(d, d + n, inf);
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[j + 1] < q) ++j;
    const double dq = q - v[j];
    d[q] = dq * dq + f[v[j]];
  }
}

// Squared distance from every pixel to the nearest seed.
std::vector<double> squared_distance_map(int h, int w, const std::vector<std::pair<int, int>>& seeds) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> g(static_cast<std::size_t>(h) * w, inf);
  for (auto [y, x] : seeds) g[static_cast<std::size_t>(y) * w + x] = 0.0;
  const int n = std::max(h, w);
  std::vector<double> f(n), d(n), z(n + 1);
  std::vector<int> v(n);
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) f[y] = g[static_cast<std::size_t>(y) * w + x];
    edt_1d(f.data(), h, d.data(), v.data(), z.data());
    for (int y = 0; y < h; ++y) g[static_cast<std::size_t>(y) * w + x] = d[y];
  }
  for (int y = 0; y < h; ++y) {
    double* row = g.data() + static_cast<std::size_t>(y) * w;
    std::copy(row, row + w, f.begin());
    edt_1d(f.data(), w, d.data(), v.data(), z.data());
    std::copy(d.begin(), d.begin() + w, row);
  }
  return g;
}

double directed(const std::vector<std::pair<int, int>>& from, const std::vector<double>& to_map, int w) {
  double worst = 0.0;
  for (auto [y, x] : from) worst = std::max(worst, to_map[static_cast<std::size_t>(y) * w + x]);
  return worst;
}

struct DisjointSet {
  std::vector<int> parent;
  explicit DisjointSet(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

}  // namespace

ConfusionCounts confusion(const Mask& pred, const Mask& gt) {
  if (pred.height != gt.height || pred.width != gt.width)
    throw ShapeError("prediction " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                     " and ground truth " + std::to_string(gt.height) + "x" + std::to_string(gt.width) +
                     " differ in extent");
  check_binary(pred, "prediction");
  check_binary(gt, "ground-truth");
  ConfusionCounts c;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const bool p = pred.bits[i] != 0;
    const bool g = gt.bits[i] != 0;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

Scores compute_metrics(const ConfusionCounts& c) {
  Scores s;
  s.sen = ratio(c.tp, c.tp + c.fn);
  s.spc = ratio(c.tn, c.tn + c.fp);
  const std::uint64_t pred_fg = c.tp + c.fp;
  const std::uint64_t gt_fg = c.tp + c.fn;
  if (pred_fg == 0 && gt_fg == 0) s.dsc = 1.0;
  else if (pred_fg == 0 || gt_fg == 0) s.dsc = 0.0;
  else s.dsc = static_cast<double>(2 * c.tp) / static_cast<double>(2 * c.tp + c.fp + c.fn);
  s.miou = 0.5 * (ratio(c.tp, c.tp + c.fp + c.fn) + ratio(c.tn, c.tn + c.fn + c.fp));
  return s;
}

std::vector<std::pair<int, int>> boundary_pixels(const Mask& m) {
  std::vector<std::pair<int, int>> out;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      if (m.at(y, x) == 0) continue;
      const bool edge = y == 0 || x == 0 || y == m.height - 1 || x == m.width - 1 ||
                        m.at(y - 1, x) == 0 || m.at(y + 1, x) == 0 || m.at(y, x - 1) == 0 ||
                        m.at(y, x + 1) == 0;
      if (edge) out.emplace_back(y, x);
    }
  return out;
}

double hausdorff(const Mask& pred, const Mask& gt) {
  confusion(pred, gt);  // validates extents and values
  const auto a = boundary_pixels(pred);
  const auto b = boundary_pixels(gt);
  if (a.empty() && b.empty()) return 0.0;
  if (a.empty() || b.empty()) return std::hypot(double(gt.height), double(gt.width));
  const auto to_a = squared_distance_map(gt.height, gt.width, a);
  const auto to_b = squared_distance_map(gt.height, gt.width, b);
  return std::sqrt(std::max(directed(a, to_b, gt.width), directed(b, to_a, gt.width)));
}

int lesion_count(const Mask& m) {
  check_binary(m, "lesion");
  DisjointSet sets(m.size());
  auto id = [&](int y, int x) { return y * m.width + x; };
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      if (m.at(y, x) == 0) continue;
      // Already-visited neighbours: W, NW, N, NE.
      if (x > 0 && m.at(y, x - 1)) sets.unite(id(y, x), id(y, x - 1));
      if (y > 0) {
        if (x > 0 && m.at(y - 1, x - 1)) sets.unite(id(y, x), id(y - 1, x - 1));
        if (m.at(y - 1, x)) sets.unite(id(y, x), id(y - 1, x));
        if (x + 1 < m.width && m.at(y - 1, x + 1)) sets.unite(id(y, x), id(y - 1, x + 1));
      }
    }
  int count = 0;
  for (int i = 0; i < static_cast<int>(m.size()); ++i)
    if (m.bits[i] != 0 && sets.find(i) == i) ++count;
  return count;
}

SliceReport slice_analysis(const Mask& pred, const Mask& gt) {
  const ConfusionCounts c = confusion(pred, gt);
  SliceReport r;
  r.scores = compute_metrics(c);
  r.hd = hausdorff(pred, gt);
  r.infected_area = gt.size() == 0 ? 0.0 : static_cast<double>(c.tp + c.fn) / static_cast<double>(gt.size());
  r.lesion_count = lesion_count(gt);
  return r;
}

ReportAverage average(const std::vector<SliceReport>& reports) {
  ReportAverage a;
  a.slices = reports.size();
  if (reports.empty()) return a;
  for (const SliceReport& r : reports) {
    a.scores.miou += r.scores.miou;
    a.scores.sen += r.scores.sen;
    a.scores.spc += r.scores.spc;
    a.scores.dsc += r.scores.dsc;
    a.hd += r.hd;
    a.infected_area += r.infected_area;
    a.lesion_count += r.lesion_count;
  }
  const double n = static_cast<double>(reports.size());
  for (double* v : {&a.scores.miou, &a.scores.sen, &a.scores.spc, &a.scores.dsc, &a.hd,
                    &a.infected_area, &a.lesion_count})
    *v /= n;
  return a;
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::vector<double> columns(const ReportAverage& a) {
  return {a.scores.miou, a.scores.sen, a.scores.spc, a.scores.dsc, a.hd, a.infected_area, a.lesion_count};
}

}  // namespace

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write metrics file " + path.string());
  out << "slice_id,fold,mIoU,SEN,SPC,DSC,HD,infected_area,lesion_count\n";
  std::map<int, std::vector<SliceReport>> by_fold;
  for (const MetricsRow& row : rows) {
    const SliceReport& r = row.report;
    out << row.slice_id << ',' << row.fold << ',' << fmt(r.scores.miou) << ',' << fmt(r.scores.sen) << ','
        << fmt(r.scores.spc) << ',' << fmt(r.scores.dsc) << ',' << fmt(r.hd) << ','
        << fmt(r.infected_area) << ',' << r.lesion_count << '\n';
    by_fold[row.fold].push_back(r);
  }
  std::vector<std::vector<double>> fold_means;
  for (const auto& [fold, reports] : by_fold) {
    fold_means.push_back(columns(average(reports)));
    out << "mean," << fold;
    for (double v : fold_means.back()) out << ',' << fmt(v);
    out << '\n';
  }
  if (fold_means.empty()) return;
  const std::size_t cols = fold_means.front().size();
  std::vector<double> mean(cols, 0.0), var(cols, 0.0);
  for (const auto& m : fold_means)
    for (std::size_t j = 0; j < cols; ++j) mean[j] += m[j] / static_cast<double>(fold_means.size());
  for (const auto& m : fold_means)
    for (std::size_t j = 0; j < cols; ++j)
      var[j] += (m[j] - mean[j]) * (m[j] - mean[j]) / static_cast<double>(fold_means.size());
  out << "mean,all";
  for (double v : mean) out << ',' << fmt(v);
  out << "\nstd,all";
  for (double v : var) out << ',' << fmt(std::sqrt(v));
  out << '\n';
  if (!out) throw DataError("failed writing metrics file " + path.string());
}

}  // namespace miniseg
