#pragma once

// Initial pseudo-mask genesis: Dijkstra scribbles between extreme-point
// pairs on the gradient-magnitude map, dilation, then an iterative
// random-walker loop that promotes confident voxels to seeds.

#include <array>
#include <cstdint>
#include <vector>

#include "exseg/dijkstra.hpp"
#include "exseg/random_walker.hpp"
#include "exseg/volume.hpp"

namespace exseg {

// Union of the three extreme-pair geodesics over |grad v|, dilated, then
// clipped to the bounding box of the extreme points.
inline BinaryMask build_scribbles(const Volume3D& v, const ExtremePoints& e,
                                  const RwConfig& cfg) {
  validate_extremes(e, v.dims);
  const Volume3D grad = gradient_magnitude(v);
  BinaryMask scrib = make_binary(v.dims);
  const std::array<std::pair<Voxel, Voxel>, 3> pairs = {{
      {e.x_min, e.x_max}, {e.y_min, e.y_max}, {e.z_min, e.z_max}}};
  for (const auto& [src, dst] : pairs) {
    for (const Voxel& p : dijkstra_path(grad, src, dst)) {
      scrib.labels[linear_index(v.dims, p)] = 1;
    }
  }
  scrib = dilate(scrib, cfg.dilation_iters);
  const BoundingBox box = bbox_from_extremes(e);
  for (int z = 0; z < v.dims.nz; ++z) {
    for (int y = 0; y < v.dims.ny; ++y) {
      for (int x = 0; x < v.dims.nx; ++x) {
        if (!box.contains({x, y, z})) scrib.labels[linear_index(v.dims, x, y, z)] = 0;
      }
    }
  }
  return scrib;
}

struct GenesisTrace {
  // Seed counts entering each random-walker solve, one entry per iteration.
  std::vector<std::size_t> fg_seeds;
  std::vector<std::size_t> bg_seeds;
};

inline TrinaryMask generate_initial_mask(const Volume3D& v, const ExtremePoints& e,
                                         const RwConfig& cfg,
                                         GenesisTrace* trace = nullptr) {
  validate(cfg);
  const Dims3& d = v.dims;
  const std::size_t n = d.count();
  const BinaryMask scrib = build_scribbles(v, e, cfg);
  const BoundingBox box = bbox_from_extremes(e);

  std::vector<char> in_box(n, 0);
  for (int z = box.lower.z; z <= box.upper.z; ++z) {
    for (int y = box.lower.y; y <= box.upper.y; ++y) {
      for (int x = box.lower.x; x <= box.upper.x; ++x) {
        in_box[linear_index(d, x, y, z)] = 1;
      }
    }
  }

  // 0 = unseeded, 1 = fg, 2 = bg; scribbles seed the foreground, the box
  // complement seeds the background.
  std::vector<std::uint8_t> seed_state(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (scrib.labels[i]) {
      seed_state[i] = 1;
    } else if (!in_box[i]) {
      seed_state[i] = 2;
    }
  }

  ProbMap last{d, {}};
  for (int it = 0; it < cfg.n_iterations; ++it) {
    SeedSet seeds;
    for (std::size_t i = 0; i < n; ++i) {
      if (seed_state[i] == 1) seeds.foreground.push_back(i);
      else if (seed_state[i] == 2) seeds.background.push_back(i);
    }
    if (trace) {
      trace->fg_seeds.push_back(seeds.foreground.size());
      trace->bg_seeds.push_back(seeds.background.size());
    }
    last = rw_solve(v, seeds, cfg);
    if (it + 1 == cfg.n_iterations) break;  // the final map is thresholded, not promoted
    for (std::size_t i = 0; i < n; ++i) {
      if (seed_state[i] != 0) continue;  // existing seeds keep their label
      if (last.probs[i] > cfg.fg_threshold) seed_state[i] = 1;
      else if (last.probs[i] < cfg.bg_threshold) seed_state[i] = 2;
    }
  }

  TrinaryMask out = make_trinary(d, 2);
  for (std::size_t i = 0; i < n; ++i) {
    if (!in_box[i]) {
      out.labels[i] = 0;
    } else if (last.probs[i] > cfg.fg_threshold || scrib.labels[i]) {
      out.labels[i] = 1;
    }
  }
  return out;
}

}  // namespace exseg
