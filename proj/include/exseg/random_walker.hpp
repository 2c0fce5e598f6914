#pragma once

// Two-label random walker (Grady): unseeded voxels solve the combinatorial
// Dirichlet problem on the 6-connected grid graph, edge weights
// w_ij = exp(-beta * (v_i - v_j)^2) + epsilon_w with intensities min-max
// normalized to [0,1] per volume before weighting. Solved by Jacobi
// preconditioned conjugate gradient.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "exseg/errors.hpp"
#include "exseg/volume.hpp"

namespace exseg {

struct SeedSet {
  std::vector<std::size_t> foreground;
  std::vector<std::size_t> background;
};

struct RwConfig {
  double beta = 90.0;
  double epsilon_w = 1e-6;
  double cg_tol = 1e-6;           // relative residual
  int cg_max_iters = 20000;       // hard cap; effective limit is 10x unseeded count
  double fg_threshold = 0.8;
  double bg_threshold = 0.1;
  int n_iterations = 7;
  int dilation_iters = 1;
};

inline void validate(const RwConfig& c) {
  if (!(c.beta > 0 && c.epsilon_w > 0 && c.cg_tol > 0 && c.cg_max_iters > 0 &&
        0.0 <= c.bg_threshold && c.bg_threshold < c.fg_threshold && c.fg_threshold <= 1.0 &&
        c.n_iterations >= 1 && c.dilation_iters >= 1)) {
    throw std::invalid_argument("invalid random-walker config");
  }
}

inline ProbMap rw_solve(const Volume3D& v, const SeedSet& seeds, const RwConfig& cfg) {
  validate(cfg);
  const Dims3& d = v.dims;
  const std::size_t n = d.count();
  require(!seeds.foreground.empty() && !seeds.background.empty(), Err::EmptySeeds,
          "rw_solve needs at least one foreground and one background seed");

  // state: 0 = unseeded, 1 = fg seed, 2 = bg seed
  std::vector<std::uint8_t> state(n, 0);
  for (std::size_t i : seeds.foreground) {
    require(i < n, Err::OutOfBounds, "foreground seed outside volume");
    state[i] = 1;
  }
  for (std::size_t i : seeds.background) {
    require(i < n, Err::OutOfBounds, "background seed outside volume");
    if (state[i] == 1) throw std::invalid_argument("seed sets are not disjoint");
    state[i] = 2;
  }

  // Intensities rescaled to [0,1] for the weighting; a constant volume
  // degenerates to uniform weights.
  const auto [mn_it, mx_it] = std::minmax_element(v.data.begin(), v.data.end());
  const double mn = *mn_it, mx = *mx_it;
  const double scale = (mx > mn) ? 1.0 / (mx - mn) : 0.0;
  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i) g[i] = (static_cast<double>(v.data[i]) - mn) * scale;

  const auto weight = [&](std::size_t a, std::size_t b) {
    const double diff = g[a] - g[b];
    return std::exp(-cfg.beta * diff * diff) + cfg.epsilon_w;
  };

  // Edge weights toward the +x, +y, +z neighbor of each voxel.
  const std::size_t sx = 1, sy = static_cast<std::size_t>(d.nx),
                    sz = static_cast<std::size_t>(d.nx) * d.ny;
  std::vector<double> wx(n, 0.0), wy(n, 0.0), wz(n, 0.0);
  for (int z = 0; z < d.nz; ++z) {
    for (int y = 0; y < d.ny; ++y) {
      for (int x = 0; x < d.nx; ++x) {
        const std::size_t i = linear_index(d, x, y, z);
        if (x + 1 < d.nx) wx[i] = weight(i, i + sx);
        if (y + 1 < d.ny) wy[i] = weight(i, i + sy);
        if (z + 1 < d.nz) wz[i] = weight(i, i + sz);
      }
    }
  }

  ProbMap out{d, std::vector<float>(n, 0.0f)};
  for (std::size_t i = 0; i < n; ++i) {
    if (state[i] == 1) out.probs[i] = 1.0f;
  }

  std::vector<std::size_t> unseeded;
  std::vector<std::size_t> compact(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (state[i] == 0) {
      compact[i] = unseeded.size();
      unseeded.push_back(i);
    }
  }
  const std::size_t m = unseeded.size();
  if (m == 0) return out;  // every voxel seeded: the indicator is the answer

  // L_uu x = b with L_ii = sum of incident weights, L_ij = -w_ij for
  // unseeded neighbors, b_i = sum of weights to foreground seeds.
  std::vector<double> diag(m, 0.0), b(m, 0.0);
  struct Edge {
    std::size_t other;  // compact index
    double w;
  };
  std::vector<std::vector<Edge>> adj(m);
  for (std::size_t c = 0; c < m; ++c) {
    const std::size_t i = unseeded[c];
    const Voxel p = delinearize(d, i);
    const auto visit = [&](std::size_t j, double w) {
      diag[c] += w;
      if (state[j] == 0) {
        adj[c].push_back({compact[j], w});
      } else if (state[j] == 1) {
        b[c] += w;
      }
    };
    if (p.x > 0) visit(i - sx, wx[i - sx]);
    if (p.x + 1 < d.nx) visit(i + sx, wx[i]);
    if (p.y > 0) visit(i - sy, wy[i - sy]);
    if (p.y + 1 < d.ny) visit(i + sy, wy[i]);
    if (p.z > 0) visit(i - sz, wz[i - sz]);
    if (p.z + 1 < d.nz) visit(i + sz, wz[i]);
  }

  const auto apply = [&](const std::vector<double>& x, std::vector<double>& y) {
    for (std::size_t c = 0; c < m; ++c) {
      double acc = diag[c] * x[c];
      for (const Edge& e : adj[c]) acc -= e.w * x[e.other];
      y[c] = acc;
    }
  };

  double b_norm2 = 0.0;
  for (double t : b) b_norm2 += t * t;
  std::vector<double> x(m, 0.0);
  if (b_norm2 > 0.0) {
    const double b_norm = std::sqrt(b_norm2);
    std::vector<double> r = b, z(m), p(m), ap(m);
    for (std::size_t c = 0; c < m; ++c) z[c] = r[c] / diag[c];
    p = z;
    double rz = 0.0;
    for (std::size_t c = 0; c < m; ++c) rz += r[c] * z[c];
    const std::size_t max_iters =
        std::min<std::size_t>(static_cast<std::size_t>(cfg.cg_max_iters), 10 * m);
    bool converged = false;
    for (std::size_t it = 0; it < max_iters; ++it) {
      apply(p, ap);
      double pap = 0.0;
      for (std::size_t c = 0; c < m; ++c) pap += p[c] * ap[c];
      const double alpha = rz / pap;
      double r_norm2 = 0.0;
      for (std::size_t c = 0; c < m; ++c) {
        x[c] += alpha * p[c];
        r[c] -= alpha * ap[c];
        r_norm2 += r[c] * r[c];
      }
      if (std::sqrt(r_norm2) <= cfg.cg_tol * b_norm) {
        converged = true;
        break;
      }
      double rz_new = 0.0;
      for (std::size_t c = 0; c < m; ++c) {
        z[c] = r[c] / diag[c];
        rz_new += r[c] * z[c];
      }
      const double beta = rz_new / rz;
      rz = rz_new;
      for (std::size_t c = 0; c < m; ++c) p[c] = z[c] + beta * p[c];
    }
    require(converged, Err::CgDivergence, "conjugate gradient did not reach tolerance");
  }
  // b == 0 means no unseeded voxel touches a foreground seed anywhere in its
  // connected component; x = 0 is then the exact solution.

  for (std::size_t c = 0; c < m; ++c) {
    out.probs[unseeded[c]] = static_cast<float>(std::clamp(x[c], 0.0, 1.0));
  }
  return out;
}

}  // namespace exseg
