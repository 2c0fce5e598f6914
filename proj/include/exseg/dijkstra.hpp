#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <queue>
#include <utility>
#include <vector>

#include "exseg/errors.hpp"
#include "exseg/volume.hpp"

namespace exseg {

inline constexpr double kPathEps = 1e-4;  // per-step tie-breaker toward short paths

// Minimal-cost 6-connected path where stepping onto voxel u costs
// cost(u) + kPathEps. The source contributes no cost. Both endpoints are
// included; ties are broken deterministically by linear index.
inline std::vector<Voxel> dijkstra_path(const Volume3D& cost, const Voxel& src,
                                        const Voxel& dst) {
  const Dims3& d = cost.dims;
  require(d.contains(src.x, src.y, src.z), Err::OutOfBounds, "dijkstra: src outside volume");
  require(d.contains(dst.x, dst.y, dst.z), Err::OutOfBounds, "dijkstra: dst outside volume");

  const std::size_t n = d.count();
  const std::size_t s = linear_index(d, src);
  const std::size_t t = linear_index(d, dst);
  if (s == t) return {src};

  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> dist(n, kInf);
  std::vector<std::size_t> prev(n, n);
  std::vector<char> done(n, 0);

  using Item = std::pair<double, std::size_t>;  // (distance, voxel index)
  std::priority_queue<Item, std::vector<Item>, std::greater<Item>> pq;
  dist[s] = 0.0;
  pq.push({0.0, s});

  while (!pq.empty()) {
    const auto [du, u] = pq.top();
    pq.pop();
    if (done[u]) continue;
    done[u] = 1;
    if (u == t) break;
    const Voxel v = delinearize(d, u);
    const int nb[6][3] = {{v.x - 1, v.y, v.z}, {v.x + 1, v.y, v.z}, {v.x, v.y - 1, v.z},
                          {v.x, v.y + 1, v.z}, {v.x, v.y, v.z - 1}, {v.x, v.y, v.z + 1}};
    for (const auto& q : nb) {
      if (!d.contains(q[0], q[1], q[2])) continue;
      const std::size_t w = linear_index(d, q[0], q[1], q[2]);
      if (done[w]) continue;
      const double cand = du + static_cast<double>(cost.data[w]) + kPathEps;
      if (cand < dist[w]) {
        dist[w] = cand;
        prev[w] = u;
        pq.push({cand, w});
      }
    }
  }

  std::vector<Voxel> path;
  for (std::size_t cur = t; cur != n; cur = prev[cur]) {
    path.push_back(delinearize(d, cur));
    if (cur == s) break;
  }
  std::reverse(path.begin(), path.end());
  return path;
}

inline double path_cost(const Volume3D& cost, const std::vector<Voxel>& path) {
  double total = 0.0;
  for (std::size_t i = 1; i < path.size(); ++i) {
    total += static_cast<double>(cost.data[linear_index(cost.dims, path[i])]) + kPathEps;
  }
  return total;
}

}  // namespace exseg
