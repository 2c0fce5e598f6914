#pragma once

// Overlap metrics and surface-distance maps. Surface distances use an
// exact separable squared Euclidean distance transform with anisotropic
// spacing, evaluated at 6-connectivity boundary voxels.

#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "exseg/errors.hpp"
#include "exseg/volume.hpp"

namespace exseg {

inline double dice(const BinaryMask& a, const BinaryMask& b) {
  require(a.dims == b.dims, Err::DimsMismatch, "dice: mask dims differ");
  std::size_t na = 0, nb = 0, inter = 0;
  for (std::size_t i = 0; i < a.labels.size(); ++i) {
    na += a.labels[i];
    nb += b.labels[i];
    inter += a.labels[i] & b.labels[i];
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

inline double jaccard(const BinaryMask& a, const BinaryMask& b) {
  require(a.dims == b.dims, Err::DimsMismatch, "jaccard: mask dims differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.labels.size(); ++i) {
    inter += a.labels[i] & b.labels[i];
    uni += a.labels[i] | b.labels[i];
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

// Mask voxels with at least one 6-neighbor outside the mask; voxels on the
// volume face count as boundary (the outside is background).
inline std::vector<std::size_t> boundary_voxels(const BinaryMask& m) {
  const Dims3& d = m.dims;
  std::vector<std::size_t> out;
  for (int z = 0; z < d.nz; ++z) {
    for (int y = 0; y < d.ny; ++y) {
      for (int x = 0; x < d.nx; ++x) {
        const std::size_t i = linear_index(d, x, y, z);
        if (!m.labels[i]) continue;
        const int nb[6][3] = {{x - 1, y, z}, {x + 1, y, z}, {x, y - 1, z},
                              {x, y + 1, z}, {x, y, z - 1}, {x, y, z + 1}};
        bool edge = false;
        for (const auto& q : nb) {
          if (!d.contains(q[0], q[1], q[2]) ||
              !m.labels[linear_index(d, q[0], q[1], q[2])]) {
            edge = true;
            break;
          }
        }
        if (edge) out.push_back(i);
      }
    }
  }
  return out;
}

namespace detail {

// Exact 1D squared distance transform d[i] = min_j (q*(i-j)^2 + f[j]) via
// the lower-envelope-of-parabolas method; q is the squared sample spacing.
inline void dt1d(std::vector<double>& f, double q, std::vector<double>& d,
                 std::vector<int>& v, std::vector<double>& zb) {
  const int n = static_cast<int>(f.size());
  constexpr double kInf = std::numeric_limits<double>::infinity();
  int k = -1;
  for (int j = 0; j < n; ++j) {
    if (f[j] == kInf) continue;
    double s = 0.0;
    while (k >= 0) {
      const int p = v[k];
      s = ((f[j] + q * j * j) - (f[p] + q * p * p)) / (2.0 * q * (j - p));
      if (s <= zb[k]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = j;
    zb[k] = (k == 0) ? -kInf : s;
    zb[k + 1] = kInf;
  }
  if (k < 0) {
    std::fill(d.begin(), d.end(), kInf);
    return;
  }
  int idx = 0;
  for (int i = 0; i < n; ++i) {
    while (zb[idx + 1] < i) ++idx;
    const double dd = static_cast<double>(i - v[idx]);
    d[i] = q * dd * dd + f[v[idx]];
  }
}

// Exact squared EDT (in mm^2) to the given site set over the whole grid.
inline std::vector<double> squared_edt(const Dims3& dims, const Spacing3& spacing,
                                       const std::vector<std::size_t>& sites) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> g(dims.count(), kInf);
  for (std::size_t s : sites) g[s] = 0.0;

  const int nmax = std::max({dims.nx, dims.ny, dims.nz});
  std::vector<double> f(nmax), d(nmax), zb(nmax + 1);
  std::vector<int> v(nmax);

  // along x
  for (int z = 0; z < dims.nz; ++z) {
    for (int y = 0; y < dims.ny; ++y) {
      f.assign(g.begin() + linear_index(dims, 0, y, z),
               g.begin() + linear_index(dims, 0, y, z) + dims.nx);
      f.resize(dims.nx);
      d.resize(dims.nx);
      dt1d(f, spacing.sx * spacing.sx, d, v, zb);
      std::copy(d.begin(), d.begin() + dims.nx, g.begin() + linear_index(dims, 0, y, z));
    }
  }
  // along y
  for (int z = 0; z < dims.nz; ++z) {
    for (int x = 0; x < dims.nx; ++x) {
      f.resize(dims.ny);
      d.resize(dims.ny);
      for (int y = 0; y < dims.ny; ++y) f[y] = g[linear_index(dims, x, y, z)];
      dt1d(f, spacing.sy * spacing.sy, d, v, zb);
      for (int y = 0; y < dims.ny; ++y) g[linear_index(dims, x, y, z)] = d[y];
    }
  }
  // along z
  for (int y = 0; y < dims.ny; ++y) {
    for (int x = 0; x < dims.nx; ++x) {
      f.resize(dims.nz);
      d.resize(dims.nz);
      for (int z = 0; z < dims.nz; ++z) f[z] = g[linear_index(dims, x, y, z)];
      dt1d(f, spacing.sz * spacing.sz, d, v, zb);
      for (int z = 0; z < dims.nz; ++z) g[linear_index(dims, x, y, z)] = d[z];
    }
  }
  return g;
}

}  // namespace detail

// Directed surface distances: for every boundary voxel of pred, the
// Euclidean distance in mm to the nearest gt boundary voxel. With
// symmetric=true the gt boundary voxels are included too, each entry
// holding the max of the two directed distances where both apply.
inline std::vector<std::pair<Voxel, double>> surface_distance_map(
    const BinaryMask& pred, const BinaryMask& gt, const Spacing3& spacing,
    bool symmetric = false) {
  require(pred.dims == gt.dims, Err::DimsMismatch, "surface_distance_map: dims differ");
  const std::vector<std::size_t> pb = boundary_voxels(pred);
  const std::vector<std::size_t> gb = boundary_voxels(gt);
  require(!pb.empty() && !gb.empty(), Err::EmptyMask,
          "surface_distance_map: a mask is empty");

  const std::vector<double> to_gt = detail::squared_edt(pred.dims, spacing, gb);
  std::vector<std::pair<Voxel, double>> out;
  if (!symmetric) {
    out.reserve(pb.size());
    for (std::size_t i : pb) {
      out.emplace_back(delinearize(pred.dims, i), std::sqrt(to_gt[i]));
    }
    return out;
  }
  const std::vector<double> to_pred = detail::squared_edt(pred.dims, spacing, pb);
  std::vector<double> best(pred.dims.count(), -1.0);
  for (std::size_t i : pb) best[i] = std::max(best[i], std::sqrt(to_gt[i]));
  for (std::size_t i : gb) best[i] = std::max(best[i], std::sqrt(to_pred[i]));
  for (std::size_t i = 0; i < best.size(); ++i) {
    if (best[i] >= 0.0) out.emplace_back(delinearize(pred.dims, i), best[i]);
  }
  return out;
}

// Dense export form: distances at boundary voxels, sentinel -1 elsewhere.
inline Volume3D surface_distance_volume(const BinaryMask& pred, const BinaryMask& gt,
                                        const Spacing3& spacing, bool symmetric = false) {
  Volume3D out = make_volume(pred.dims, spacing, -1.0f);
  for (const auto& [vox, dist] : surface_distance_map(pred, gt, spacing, symmetric)) {
    out.data[linear_index(pred.dims, vox)] = static_cast<float>(dist);
  }
  return out;
}

struct CaseMetrics {
  std::string id;
  double dice = 0.0;
  double jaccard = 0.0;
};

struct ReportSummary {
  double dice_mean = 0.0, dice_std = 0.0;
  double jaccard_mean = 0.0, jaccard_std = 0.0;
  std::vector<CaseMetrics> rows;
};

// Mean and population standard deviation over cases.
inline ReportSummary report(const std::vector<CaseMetrics>& rows) {
  if (rows.empty()) throw std::invalid_argument("report: needs at least one case");
  ReportSummary s;
  s.rows = rows;
  const double n = static_cast<double>(rows.size());
  for (const CaseMetrics& r : rows) {
    s.dice_mean += r.dice;
    s.jaccard_mean += r.jaccard;
  }
  s.dice_mean /= n;
  s.jaccard_mean /= n;
  for (const CaseMetrics& r : rows) {
    s.dice_std += (r.dice - s.dice_mean) * (r.dice - s.dice_mean);
    s.jaccard_std += (r.jaccard - s.jaccard_mean) * (r.jaccard - s.jaccard_mean);
  }
  s.dice_std = std::sqrt(s.dice_std / n);
  s.jaccard_std = std::sqrt(s.jaccard_std / n);
  return s;
}

namespace detail {
inline std::string fmt6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}
}  // namespace detail

inline nlohmann::ordered_json report_json(const ReportSummary& s) {
  nlohmann::ordered_json j;
  j["dice"] = {{"mean", s.dice_mean}, {"std", s.dice_std}};
  j["jaccard"] = {{"mean", s.jaccard_mean}, {"std", s.jaccard_std}};
  j["cases"] = nlohmann::ordered_json::array();
  for (const CaseMetrics& r : s.rows) {
    j["cases"].push_back({{"id", r.id}, {"dice", r.dice}, {"jaccard", r.jaccard}});
  }
  return j;
}

inline std::string report_table(const ReportSummary& s) {
  std::string out;
  std::size_t idw = 4;
  for (const CaseMetrics& r : s.rows) idw = std::max(idw, r.id.size());
  const auto pad = [&](const std::string& t, std::size_t w) {
    std::string p = t;
    p.resize(std::max(w, t.size()), ' ');
    return p;
  };
  out += pad("case", idw) + "  dice      jaccard\n";
  for (const CaseMetrics& r : s.rows) {
    out += pad(r.id, idw) + "  " + detail::fmt6(r.dice) + "  " + detail::fmt6(r.jaccard) + "\n";
  }
  out += pad("mean", idw) + "  " + detail::fmt6(s.dice_mean) + "  " +
         detail::fmt6(s.jaccard_mean) + "\n";
  out += pad("std", idw) + "  " + detail::fmt6(s.dice_std) + "  " +
         detail::fmt6(s.jaccard_std) + "\n";
  return out;
}

}  // namespace exseg
