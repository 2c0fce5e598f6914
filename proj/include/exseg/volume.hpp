#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <cstdint>
#include <vector>

#include "exseg/errors.hpp"

namespace exseg {

struct Dims3 {
  int nx = 0, ny = 0, nz = 0;

  std::size_t count() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) *
           static_cast<std::size_t>(nz);
  }
  bool contains(int x, int y, int z) const {
    return x >= 0 && x < nx && y >= 0 && y < ny && z >= 0 && z < nz;
  }
  int axis(int i) const { return i == 0 ? nx : (i == 1 ? ny : nz); }
  bool operator==(const Dims3&) const = default;
};

struct Spacing3 {
  double sx = 1.0, sy = 1.0, sz = 1.0;

  double axis(int i) const { return i == 0 ? sx : (i == 1 ? sy : sz); }
  bool operator==(const Spacing3&) const = default;
};

struct Voxel {
  int x = 0, y = 0, z = 0;
  auto operator<=>(const Voxel&) const = default;
};

// Canonical linear order is x-fastest: idx = x + nx*(y + ny*z).
inline std::size_t linear_index(const Dims3& d, int x, int y, int z) {
  return static_cast<std::size_t>(x) +
         static_cast<std::size_t>(d.nx) *
             (static_cast<std::size_t>(y) + static_cast<std::size_t>(d.ny) * z);
}

inline std::size_t linear_index(const Dims3& d, const Voxel& v) {
  return linear_index(d, v.x, v.y, v.z);
}

inline Voxel delinearize(const Dims3& d, std::size_t idx) {
  Voxel v;
  v.x = static_cast<int>(idx % d.nx);
  idx /= d.nx;
  v.y = static_cast<int>(idx % d.ny);
  v.z = static_cast<int>(idx / d.ny);
  return v;
}

// Dense scalar field over a voxel grid with physical spacing in mm.
struct Volume3D {
  Dims3 dims;
  Spacing3 spacing;
  std::vector<float> data;
};

// Per-voxel label in {0,1,2} = {negative, positive, unlabeled}.
struct TrinaryMask {
  Dims3 dims;
  std::vector<std::uint8_t> labels;
};

struct BinaryMask {
  Dims3 dims;
  std::vector<std::uint8_t> labels;
};

// Per-voxel foreground probability in [0,1].
struct ProbMap {
  Dims3 dims;
  std::vector<float> probs;
};

// The six outermost voxels of a region along -x,+x,-y,+y,-z,+z.
struct ExtremePoints {
  Voxel x_min, x_max, y_min, y_max, z_min, z_max;

  std::array<Voxel, 6> all() const { return {x_min, x_max, y_min, y_max, z_min, z_max}; }
};

struct BoundingBox {
  Voxel lower, upper;  // inclusive corners

  bool contains(const Voxel& v) const {
    return v.x >= lower.x && v.x <= upper.x && v.y >= lower.y && v.y <= upper.y &&
           v.z >= lower.z && v.z <= upper.z;
  }
};

inline Volume3D make_volume(Dims3 dims, Spacing3 spacing = {}, float fill = 0.0f) {
  return Volume3D{dims, spacing, std::vector<float>(dims.count(), fill)};
}

inline TrinaryMask make_trinary(Dims3 dims, std::uint8_t fill = 2) {
  return TrinaryMask{dims, std::vector<std::uint8_t>(dims.count(), fill)};
}

inline BinaryMask make_binary(Dims3 dims, std::uint8_t fill = 0) {
  return BinaryMask{dims, std::vector<std::uint8_t>(dims.count(), fill)};
}

inline void validate_extremes(const ExtremePoints& e, const Dims3& dims) {
  for (const Voxel& p : e.all()) {
    require(dims.contains(p.x, p.y, p.z), Err::OutOfBounds, "extreme point outside volume");
  }
  if (e.x_min.x > e.x_max.x || e.y_min.y > e.y_max.y || e.z_min.z > e.z_max.z) {
    throw std::invalid_argument("extreme point pairs are not ordered along their axes");
  }
}

// Rescale to zero mean and unit variance. Statistics are population
// statistics computed in double precision.
inline Volume3D normalize(const Volume3D& v) {
  const std::size_t n = v.data.size();
  require(n >= 2, Err::ZeroVariance, "normalize needs at least 2 voxels");
  double mean = 0.0;
  for (float x : v.data) mean += x;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (float x : v.data) {
    const double d = x - mean;
    var += d * d;
  }
  var /= static_cast<double>(n);
  require(var > 0.0, Err::ZeroVariance, "normalize: volume is constant");
  const double inv_sigma = 1.0 / std::sqrt(var);
  Volume3D out{v.dims, v.spacing, std::vector<float>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    out.data[i] = static_cast<float>((v.data[i] - mean) * inv_sigma);
  }
  return out;
}

// |grad| with central differences in the interior and one-sided differences
// at the faces; denominators use the physical spacing.
inline Volume3D gradient_magnitude(const Volume3D& v) {
  const Dims3& d = v.dims;
  require(d.nx >= 2 && d.ny >= 2 && d.nz >= 2, Err::DimsTooSmall,
          "gradient_magnitude needs >= 2 voxels along each axis");
  Volume3D out{d, v.spacing, std::vector<float>(v.data.size())};
  const auto at = [&](int x, int y, int z) {
    return static_cast<double>(v.data[linear_index(d, x, y, z)]);
  };
  for (int z = 0; z < d.nz; ++z) {
    for (int y = 0; y < d.ny; ++y) {
      for (int x = 0; x < d.nx; ++x) {
        double gx, gy, gz;
        if (x == 0) {
          gx = (at(1, y, z) - at(0, y, z)) / v.spacing.sx;
        } else if (x == d.nx - 1) {
          gx = (at(x, y, z) - at(x - 1, y, z)) / v.spacing.sx;
        } else {
          gx = (at(x + 1, y, z) - at(x - 1, y, z)) / (2.0 * v.spacing.sx);
        }
        if (y == 0) {
          gy = (at(x, 1, z) - at(x, 0, z)) / v.spacing.sy;
        } else if (y == d.ny - 1) {
          gy = (at(x, y, z) - at(x, y - 1, z)) / v.spacing.sy;
        } else {
          gy = (at(x, y + 1, z) - at(x, y - 1, z)) / (2.0 * v.spacing.sy);
        }
        if (z == 0) {
          gz = (at(x, y, 1) - at(x, y, 0)) / v.spacing.sz;
        } else if (z == d.nz - 1) {
          gz = (at(x, y, z) - at(x, y, z - 1)) / v.spacing.sz;
        } else {
          gz = (at(x, y, z + 1) - at(x, y, z - 1)) / (2.0 * v.spacing.sz);
        }
        out.data[linear_index(d, x, y, z)] =
            static_cast<float>(std::sqrt(gx * gx + gy * gy + gz * gz));
      }
    }
  }
  return out;
}

// Morphological dilation with the 6-connected structuring element.
inline BinaryMask dilate(const BinaryMask& m, int iterations) {
  if (iterations < 1) throw std::invalid_argument("dilate: iterations must be >= 1");
  const Dims3& d = m.dims;
  BinaryMask cur = m;
  BinaryMask next = m;
  for (int it = 0; it < iterations; ++it) {
    next.labels = cur.labels;
    for (int z = 0; z < d.nz; ++z) {
      for (int y = 0; y < d.ny; ++y) {
        for (int x = 0; x < d.nx; ++x) {
          if (!cur.labels[linear_index(d, x, y, z)]) continue;
          const int nb[6][3] = {{x - 1, y, z}, {x + 1, y, z}, {x, y - 1, z},
                                {x, y + 1, z}, {x, y, z - 1}, {x, y, z + 1}};
          for (const auto& q : nb) {
            if (d.contains(q[0], q[1], q[2])) {
              next.labels[linear_index(d, q[0], q[1], q[2])] = 1;
            }
          }
        }
      }
    }
    std::swap(cur, next);
  }
  return cur;
}

inline BoundingBox bbox_from_extremes(const ExtremePoints& e) {
  BoundingBox box{e.x_min, e.x_min};
  for (const Voxel& p : e.all()) {
    box.lower.x = std::min(box.lower.x, p.x);
    box.lower.y = std::min(box.lower.y, p.y);
    box.lower.z = std::min(box.lower.z, p.z);
    box.upper.x = std::max(box.upper.x, p.x);
    box.upper.y = std::max(box.upper.y, p.y);
    box.upper.z = std::max(box.upper.z, p.z);
  }
  return box;
}

}  // namespace exseg
