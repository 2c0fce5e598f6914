#pragma once

// Sliding-window inference: tile the volume at half-patch stride with the
// final window clamped to the volume edge, forward each window, and
// average overlapping softmax probabilities with uniform weights.

#include <vector>

#include "exseg/errors.hpp"
#include "exseg/net.hpp"
#include "exseg/volume.hpp"

namespace exseg {

inline std::vector<int> window_offsets(int extent, int patch) {
  std::vector<int> offs;
  const int stride = std::max(1, patch / 2);
  for (int off = 0;; off += stride) {
    if (off + patch >= extent) {
      offs.push_back(extent - patch);
      break;
    }
    offs.push_back(off);
  }
  return offs;
}

inline Volume3D crop_volume(const Volume3D& v, const Voxel& origin, const Dims3& patch) {
  Volume3D out{patch, v.spacing, std::vector<float>(patch.count())};
  for (int z = 0; z < patch.nz; ++z) {
    for (int y = 0; y < patch.ny; ++y) {
      const std::size_t src =
          linear_index(v.dims, origin.x, origin.y + y, origin.z + z);
      const std::size_t dst = linear_index(patch, 0, y, z);
      std::copy_n(v.data.begin() + src, patch.nx, out.data.begin() + dst);
    }
  }
  return out;
}

template <typename T>
ProbMap sliding_window_infer(const ModelState<T>& m, const Volume3D& v,
                             const Dims3& patch) {
  require(v.dims.nx >= patch.nx && v.dims.ny >= patch.ny && v.dims.nz >= patch.nz,
          Err::VolumeTooSmall, "volume smaller than inference patch");
  const std::vector<int> ox = window_offsets(v.dims.nx, patch.nx);
  const std::vector<int> oy = window_offsets(v.dims.ny, patch.ny);
  const std::vector<int> oz = window_offsets(v.dims.nz, patch.nz);

  std::vector<double> acc(v.dims.count(), 0.0);
  std::vector<std::uint32_t> cover(v.dims.count(), 0);
  for (int z0 : oz) {
    for (int y0 : oy) {
      for (int x0 : ox) {
        const Volume3D window = crop_volume(v, {x0, y0, z0}, patch);
        const ForwardRecord<T> rec = forward(m, window);
        for (int z = 0; z < patch.nz; ++z) {
          for (int y = 0; y < patch.ny; ++y) {
            for (int x = 0; x < patch.nx; ++x) {
              const std::size_t gi = linear_index(v.dims, x0 + x, y0 + y, z0 + z);
              acc[gi] += static_cast<double>(rec.prob[linear_index(patch, x, y, z)]);
              ++cover[gi];
            }
          }
        }
      }
    }
  }
  ProbMap out{v.dims, std::vector<float>(v.dims.count())};
  for (std::size_t i = 0; i < acc.size(); ++i) {
    out.probs[i] = static_cast<float>(acc[i] / cover[i]);
  }
  return out;
}

}  // namespace exseg
