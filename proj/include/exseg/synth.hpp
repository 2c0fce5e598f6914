#pragma once

// Synthetic volume generator: one rotated ellipsoid lesion per volume (or
// a lobulated union of 2-3 overlapping ellipsoids), on a background with a
// smooth low-frequency bias field and Gaussian noise. Ground truth is the
// exact geometric membership, so analytic checks exist.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <json.hpp>

#include "exseg/errors.hpp"
#include "exseg/io.hpp"
#include "exseg/rng.hpp"
#include "exseg/volume.hpp"

namespace exseg {

struct SynthSpec {
  Dims3 dims{48, 48, 32};
  Spacing3 spacing{1.0, 1.0, 1.0};
  // Per-axis radii ranges in voxels. The rotated ellipsoid can point any
  // semi-axis along z, so the largest radius must satisfy the ball-fit
  // margin against the smallest volume extent: 2*(r+2) <= nz-1.
  double radius_min[3] = {8.0, 8.0, 6.0};
  double radius_max[3] = {13.0, 13.0, 9.0};
  double bg_mean = 0.2;
  double contrast = 0.6;  // lesion intensity = bg_mean + contrast
  double noise_sigma = 0.1;
  double bias_amp = 0.1;
  bool lobulated = false;
  bool jitter_extremes = false;
};

inline void validate(const SynthSpec& s) {
  require(s.dims.nx >= 2 && s.dims.ny >= 2 && s.dims.nz >= 2, Err::SpecInfeasible,
          "volume dims too small");
  double r_hi = 0.0;
  for (int a = 0; a < 3; ++a) {
    require(s.radius_min[a] >= 1.0 && s.radius_max[a] >= s.radius_min[a],
            Err::SpecInfeasible, "bad radius range");
    r_hi = std::max(r_hi, s.radius_max[a]);
  }
  // A rotated ellipsoid fits inside the ball of the largest radius; demand
  // that ball plus a 2-voxel margin fits along every axis.
  for (int a = 0; a < 3; ++a) {
    require(2.0 * (r_hi + 2.0) <= static_cast<double>(s.dims.axis(a) - 1),
            Err::SpecInfeasible, "lesion radii cannot fit inside dims with margin 2");
  }
  require(s.contrast > 2.0 * s.noise_sigma, Err::SpecInfeasible,
          "contrast must exceed twice the noise sigma");
  require(s.noise_sigma >= 0.0 && s.bias_amp >= 0.0, Err::SpecInfeasible,
          "negative noise/bias");
}

namespace detail {

struct Ellipsoid {
  double center[3];
  double radii[3];
  double rot[3][3];  // world <- body
};

inline double ellipsoid_q(const Ellipsoid& e, double x, double y, double z) {
  const double d[3] = {x - e.center[0], y - e.center[1], z - e.center[2]};
  double q = 0.0;
  for (int a = 0; a < 3; ++a) {
    // body coordinate along axis a: row a of R^T = column a of R
    const double b = e.rot[0][a] * d[0] + e.rot[1][a] * d[1] + e.rot[2][a] * d[2];
    q += (b / e.radii[a]) * (b / e.radii[a]);
  }
  return q;
}

inline bool inside(const Ellipsoid& e, double x, double y, double z) {
  return ellipsoid_q(e, x, y, z) <= 1.0;
}

inline void random_rotation(Rng& rng, double rot[3][3]) {
  double q[4];
  double nn = 0.0;
  for (double& v : q) {
    v = rng.gaussian();
    nn += v * v;
  }
  nn = std::sqrt(nn);
  for (double& v : q) v /= nn;
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  rot[0][0] = 1 - 2 * (y * y + z * z);
  rot[0][1] = 2 * (x * y - w * z);
  rot[0][2] = 2 * (x * z + w * y);
  rot[1][0] = 2 * (x * y + w * z);
  rot[1][1] = 1 - 2 * (x * x + z * z);
  rot[1][2] = 2 * (y * z - w * x);
  rot[2][0] = 2 * (x * z - w * y);
  rot[2][1] = 2 * (y * z + w * x);
  rot[2][2] = 1 - 2 * (x * x + y * y);
}

}  // namespace detail

struct SynthCase {
  Volume3D volume;
  BinaryMask gt;
};

inline SynthCase gen_case(const SynthSpec& spec, Rng& rng) {
  validate(spec);
  const Dims3& d = spec.dims;

  std::vector<detail::Ellipsoid> lobes;
  detail::Ellipsoid first{};
  double r_ball = 0.0;
  for (int a = 0; a < 3; ++a) {
    first.radii[a] = rng.uniform(spec.radius_min[a], spec.radius_max[a]);
    r_ball = std::max(r_ball, first.radii[a]);
  }
  detail::random_rotation(rng, first.rot);
  for (int a = 0; a < 3; ++a) {
    const double lo = r_ball + 2.0;
    const double hi = static_cast<double>(d.axis(a) - 1) - r_ball - 2.0;
    first.center[a] = rng.uniform(lo, hi);
  }
  lobes.push_back(first);

  if (spec.lobulated) {
    const int extra = 1 + static_cast<int>(rng.uniform_index(2));  // 1 or 2 extra lobes
    for (int l = 0; l < extra; ++l) {
      detail::Ellipsoid e{};
      const double shrink = rng.uniform(0.5, 0.8);
      double r2 = 0.0;
      for (int a = 0; a < 3; ++a) {
        e.radii[a] = std::max(1.0, first.radii[a] * shrink);
        r2 = std::max(r2, e.radii[a]);
      }
      detail::random_rotation(rng, e.rot);
      for (int a = 0; a < 3; ++a) {
        // Offset keeps the lobe overlapping the first ellipsoid and inside
        // the first lobe's feasibility ball, so the margin still holds.
        const double max_off = std::max(0.0, std::min(0.6 * first.radii[a], r_ball - r2));
        e.center[a] = first.center[a] + rng.uniform(-max_off, max_off);
      }
      lobes.push_back(e);
    }
  }

  // Low-frequency separable cosine bias field.
  double freq[3], phase[3];
  for (int a = 0; a < 3; ++a) {
    freq[a] = rng.uniform(0.5, 1.5);
    phase[a] = rng.uniform(0.0, 1.0);
  }

  SynthCase out;
  out.volume = make_volume(d, spec.spacing);
  out.gt = make_binary(d);
  constexpr double kTwoPi = 6.283185307179586;
  for (int z = 0; z < d.nz; ++z) {
    for (int y = 0; y < d.ny; ++y) {
      for (int x = 0; x < d.nx; ++x) {
        const std::size_t i = linear_index(d, x, y, z);
        bool in = false;
        for (const auto& e : lobes) {
          if (detail::inside(e, x, y, z)) { in = true; break; }
        }
        out.gt.labels[i] = in ? 1 : 0;
        double val = spec.bg_mean + (in ? spec.contrast : 0.0);
        val += spec.bias_amp *
               std::cos(kTwoPi * (freq[0] * x / d.nx + phase[0])) *
               std::cos(kTwoPi * (freq[1] * y / d.ny + phase[1])) *
               std::cos(kTwoPi * (freq[2] * z / d.nz + phase[2]));
        val += rng.gaussian() * spec.noise_sigma;
        out.volume.data[i] = static_cast<float>(val);
      }
    }
  }
  return out;
}

// For each axis and direction, a mask voxel attaining the extreme
// coordinate; ties resolved to the lexicographically smallest (x,y,z).
inline ExtremePoints extract_extremes(const BinaryMask& gt) {
  const Dims3& d = gt.dims;
  bool any = false;
  ExtremePoints e{};
  const auto better = [](const Voxel& a, const Voxel& b) {  // a < b lexicographic (x,y,z)
    if (a.x != b.x) return a.x < b.x;
    if (a.y != b.y) return a.y < b.y;
    return a.z < b.z;
  };
  for (int z = 0; z < d.nz; ++z) {
    for (int y = 0; y < d.ny; ++y) {
      for (int x = 0; x < d.nx; ++x) {
        if (!gt.labels[linear_index(d, x, y, z)]) continue;
        const Voxel v{x, y, z};
        if (!any) {
          e.x_min = e.x_max = e.y_min = e.y_max = e.z_min = e.z_max = v;
          any = true;
          continue;
        }
        if (v.x < e.x_min.x || (v.x == e.x_min.x && better(v, e.x_min))) e.x_min = v;
        if (v.x > e.x_max.x || (v.x == e.x_max.x && better(v, e.x_max))) e.x_max = v;
        if (v.y < e.y_min.y || (v.y == e.y_min.y && better(v, e.y_min))) e.y_min = v;
        if (v.y > e.y_max.y || (v.y == e.y_max.y && better(v, e.y_max))) e.y_max = v;
        if (v.z < e.z_min.z || (v.z == e.z_min.z && better(v, e.z_min))) e.z_min = v;
        if (v.z > e.z_max.z || (v.z == e.z_max.z && better(v, e.z_max))) e.z_max = v;
      }
    }
  }
  require(any, Err::EmptyMask, "extract_extremes: empty mask");
  return e;
}

// Annotation-slack emulation: each extreme point moves by -1/0/+1 voxels
// along its two tangent axes (never along its defining axis).
inline ExtremePoints jitter_extremes(const ExtremePoints& e, const Dims3& dims, Rng& rng) {
  const auto nudge = [&](int v, int n) {
    const int j = static_cast<int>(rng.uniform_index(3)) - 1;
    return std::clamp(v + j, 0, n - 1);
  };
  ExtremePoints out = e;
  out.x_min.y = nudge(out.x_min.y, dims.ny), out.x_min.z = nudge(out.x_min.z, dims.nz);
  out.x_max.y = nudge(out.x_max.y, dims.ny), out.x_max.z = nudge(out.x_max.z, dims.nz);
  out.y_min.x = nudge(out.y_min.x, dims.nx), out.y_min.z = nudge(out.y_min.z, dims.nz);
  out.y_max.x = nudge(out.y_max.x, dims.nx), out.y_max.z = nudge(out.y_max.z, dims.nz);
  out.z_min.x = nudge(out.z_min.x, dims.nx), out.z_min.y = nudge(out.z_min.y, dims.ny);
  out.z_max.x = nudge(out.z_max.x, dims.nx), out.z_max.y = nudge(out.z_max.y, dims.ny);
  return out;
}

// Writes volumes, ground-truth masks, and extreme-point JSON per case plus
// a manifest listing relative paths and split membership. Case i draws
// from an rng stream seeded by (seed, i), so generation order is
// immaterial and the dataset is byte-reproducible.
inline nlohmann::ordered_json gen_dataset(const SynthSpec& spec, int n_train, int n_test,
                                          std::uint64_t seed, const std::string& out_dir) {
  if (n_train < 1 || n_test < 1) {
    throw std::invalid_argument("gen_dataset: need at least one case per split");
  }
  validate(spec);
  nlohmann::ordered_json manifest;
  manifest["seed"] = seed;
  manifest["n_train"] = n_train;
  manifest["n_test"] = n_test;
  manifest["cases"] = nlohmann::ordered_json::array();
  char name[64];
  for (int i = 0; i < n_train + n_test; ++i) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    SynthCase c = gen_case(spec, rng);
    ExtremePoints e = extract_extremes(c.gt);
    if (spec.jitter_extremes) e = jitter_extremes(e, spec.dims, rng);
    std::snprintf(name, sizeof(name), "case_%03d", i);
    const std::string base = name;
    write_volume(c.volume, out_dir + "/" + base + "_vol.vol1");
    write_binary(c.gt, out_dir + "/" + base + "_gt.vol1");
    write_extremes(e, out_dir + "/" + base + "_ext.json");
    manifest["cases"].push_back({{"id", base},
                                 {"volume", base + "_vol.vol1"},
                                 {"gt", base + "_gt.vol1"},
                                 {"extremes", base + "_ext.json"},
                                 {"split", i < n_train ? "train" : "test"}});
  }
  spit_file(out_dir + "/manifest.json", manifest.dump(2) + "\n");
  return manifest;
}

}  // namespace exseg
