#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <vector>

#include "exseg/net.hpp"
#include "exseg/rng.hpp"

using namespace exseg;

namespace {

Volume3D random_patch(Dims3 d, std::uint64_t seed) {
  Rng rng(seed);
  Volume3D v = make_volume(d);
  for (float& t : v.data) t = static_cast<float>(rng.uniform(-1.0, 1.0));
  return v;
}

Arch tiny_arch() {
  Arch a;
  a.channels = {2, 3};
  a.feat_dim = 2;
  return a;
}

}  // namespace

TEST(Net, ParamCountMatchesHandComputation) {
  // Reference topology, counted block by block with plain arithmetic:
  //   enc0:  8 * 1 * 27 + 8    = 224
  //   enc1:  16 * 8 * 27 + 16  = 3472
  //   feat:  8 * 24 * 27 + 8   = 5192
  //   cls:   2 * 8 + 2         = 18
  EXPECT_EQ(param_count(Arch{}), std::size_t(224 + 3472 + 5192 + 18));
  EXPECT_EQ(param_count(Arch{}), std::size_t(8906));

  const Arch t = tiny_arch();
  EXPECT_EQ(param_count(t),
            std::size_t(2 * 27 + 2 + 3 * 2 * 27 + 3 + 2 * 5 * 27 + 2 + 2 * 2 + 2));
}

TEST(Net, ForwardShapesAndProbIdentity) {
  const ModelState<float> m = init_model<float>(Arch{}, 7);
  const Dims3 d{8, 6, 4};
  const ForwardRecord<float> r = forward(m, random_patch(d, 1));

  EXPECT_EQ(r.enc0.channels, 8);
  EXPECT_TRUE(r.enc0.dims == d);
  EXPECT_TRUE(r.pooled.dims == (Dims3{4, 3, 2}));
  EXPECT_EQ(r.enc1.channels, 16);
  EXPECT_TRUE(r.enc1.dims == (Dims3{4, 3, 2}));
  EXPECT_EQ(r.concat.channels, 24);
  EXPECT_EQ(r.features.channels, 8);
  EXPECT_EQ(r.logits.channels, 2);
  ASSERT_EQ(r.prob.size(), d.count());

  // Skip half of the concat buffer is the post-ReLU enc0 verbatim.
  for (std::size_t i = 0; i < r.enc0.data.size(); ++i) {
    ASSERT_EQ(r.concat.data[i], r.enc0.data[i]);
  }
  for (std::size_t i = 0; i < d.count(); ++i) {
    const float t = r.logits.ch(1)[i] - r.logits.ch(0)[i];
    EXPECT_FLOAT_EQ(r.prob[i], 1.0f / (1.0f + std::exp(-t)));
  }
}

TEST(Net, ZeroParamsGiveHalfProbabilityEverywhere) {
  ModelState<float> m;
  m.arch = Arch{};
  m.params.assign(param_count(m.arch), 0.0f);
  const ForwardRecord<float> r = forward(m, random_patch({4, 4, 2}, 2));
  for (float p : r.prob) EXPECT_EQ(p, 0.5f);
}

TEST(Net, ConvolutionMatchesDirectStencil) {
  // Independent dense zero-padded stencil, no window clipping tricks.
  Rng rng(33);
  const Dims3 d{5, 4, 3};
  const int ci = 2, co = 3, k = 3;
  ChField<double> in(d, ci);
  for (double& v : in.data) v = rng.uniform(-1.0, 1.0);
  std::vector<double> w(static_cast<std::size_t>(co) * ci * k * k * k), b(co);
  for (double& v : w) v = rng.uniform(-1.0, 1.0);
  for (double& v : b) v = rng.uniform(-1.0, 1.0);

  ChField<double> out;
  detail::conv3d_fwd(in, w.data(), b.data(), k, co, out);

  for (int c = 0; c < co; ++c) {
    for (int z = 0; z < d.nz; ++z) {
      for (int y = 0; y < d.ny; ++y) {
        for (int x = 0; x < d.nx; ++x) {
          double acc = b[c];
          for (int i = 0; i < ci; ++i) {
            for (int kz = 0; kz < k; ++kz) {
              for (int ky = 0; ky < k; ++ky) {
                for (int kx = 0; kx < k; ++kx) {
                  const int sx = x + kx - 1, sy = y + ky - 1, sz = z + kz - 1;
                  if (!d.contains(sx, sy, sz)) continue;
                  acc += w[(((static_cast<std::size_t>(c) * ci + i) * k + kz) * k + ky) * k + kx] *
                         in.ch(i)[linear_index(d, sx, sy, sz)];
                }
              }
            }
          }
          EXPECT_NEAR(out.ch(c)[linear_index(d, x, y, z)], acc, 1e-12);
        }
      }
    }
  }
}

TEST(Net, BackwardMatchesCentralFiniteDifferences) {
  // Scalar probe loss sum(a . logits) + sum(b . features) makes the upstream
  // gradients exactly the coefficient fields, so backward() output can be
  // compared against symmetric differences of the probe loss.
  for (std::uint64_t seed : {101ull, 202ull}) {
    const Arch arch = tiny_arch();
    ModelState<double> m = init_model<double>(arch, seed);
    const Dims3 d{4, 4, 2};
    const Volume3D patch = random_patch(d, seed + 9);

    Rng rng(seed + 77);
    ChField<double> a(d, 2), b(d, arch.feat_dim);
    for (double& v : a.data) v = rng.uniform(-1.0, 1.0);
    for (double& v : b.data) v = rng.uniform(-1.0, 1.0);

    const auto probe = [&](const ModelState<double>& mm) {
      const ForwardRecord<double> r = forward(mm, patch);
      double s = 0.0;
      for (std::size_t i = 0; i < r.logits.data.size(); ++i) s += a.data[i] * r.logits.data[i];
      for (std::size_t i = 0; i < r.features.data.size(); ++i)
        s += b.data[i] * r.features.data[i];
      return s;
    };

    const ForwardRecord<double> r = forward(m, patch);
    const std::vector<double> grad = backward(m, r, a, b);
    ASSERT_EQ(grad.size(), m.params.size());

    const double h = 1e-6;
    for (std::size_t p = 0; p < m.params.size(); ++p) {
      const double keep = m.params[p];
      m.params[p] = keep + h;
      const double up = probe(m);
      m.params[p] = keep - h;
      const double dn = probe(m);
      m.params[p] = keep;
      const double fd = (up - dn) / (2.0 * h);
      const double denom = std::max({std::abs(fd), std::abs(grad[p]), 1e-8});
      EXPECT_LT(std::abs(fd - grad[p]) / denom, 1e-4) << "param " << p << " seed " << seed;
    }
  }
}

TEST(Net, HeInitStatistics) {
  const Arch arch;
  const ModelState<float> m = init_model<float>(arch, 12345);
  const ParamLayout L = param_layout(arch);

  // enc1 weights: 3456 draws at std sqrt(2/216).
  const std::size_t n = L.enc1_b - L.enc1_w;
  double mean = 0.0, var = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += m.params[L.enc1_w + i];
  mean /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double c = m.params[L.enc1_w + i] - mean;
    var += c * c;
  }
  var /= static_cast<double>(n - 1);
  const double want_var = 2.0 / 216.0;
  EXPECT_LT(std::abs(mean), 4.0 * std::sqrt(want_var / static_cast<double>(n)));
  EXPECT_NEAR(var, want_var, 0.15 * want_var);

  // Biases start at zero.
  for (int i = 0; i < arch.channels[0]; ++i) EXPECT_EQ(m.params[L.enc0_b + i], 0.0f);
  for (int i = 0; i < 2; ++i) EXPECT_EQ(m.params[L.cls_b + i], 0.0f);

  // Same seed, same parameters; different seed, different parameters.
  const ModelState<float> m2 = init_model<float>(arch, 12345);
  EXPECT_EQ(m.params, m2.params);
  const ModelState<float> m3 = init_model<float>(arch, 54321);
  EXPECT_NE(m.params, m3.params);
}

TEST(Net, PolyScheduleEndpointsAndDecay) {
  EXPECT_DOUBLE_EQ(poly_lr(0.01, 0, 1200), 0.01);
  EXPECT_DOUBLE_EQ(poly_lr(0.01, 540, 1200), 0.01 * std::pow(0.55, 0.9));
  double prev = poly_lr(0.01, 0, 100);
  for (int e = 1; e < 100; ++e) {
    const double cur = poly_lr(0.01, e, 100);
    EXPECT_LT(cur, prev);
    prev = cur;
  }
  EXPECT_THROW(poly_lr(0.01, 100, 100), std::invalid_argument);
  EXPECT_THROW(poly_lr(0.01, -1, 100), std::invalid_argument);
}

TEST(Net, CheckpointRoundTripIsExact) {
  ModelState<float> m = init_model<float>(Arch{}, 99);
  m.rng_seed = 0xabcdef0123ull;
  const std::string path = "net_ckpt_roundtrip.mdl1";
  save_model(m, path);
  const ModelState<float> back = load_model(path);
  EXPECT_EQ(back.params, m.params);
  EXPECT_EQ(back.arch.channels, m.arch.channels);
  EXPECT_EQ(back.arch.kernel, m.arch.kernel);
  EXPECT_EQ(back.arch.feat_dim, m.arch.feat_dim);
  EXPECT_EQ(back.rng_seed, m.rng_seed);
  std::remove(path.c_str());
}

TEST(Net, LoadRejectsCorruptCheckpoints) {
  const ModelState<float> m = init_model<float>(tiny_arch(), 5);
  const std::string path = "net_ckpt_corrupt.mdl1";

  save_model(m, path);
  std::string bytes = slurp_file(path);
  bytes[0] = 'X';
  spit_file(path, bytes);
  EXPECT_THROW(load_model(path), Error);

  save_model(m, path);
  bytes = slurp_file(path);
  bytes.resize(bytes.size() - 8);  // truncate payload
  spit_file(path, bytes);
  EXPECT_THROW(load_model(path), Error);
  std::remove(path.c_str());
}

TEST(Net, RejectsOddPatchDims) {
  const ModelState<float> m = init_model<float>(tiny_arch(), 8);
  EXPECT_THROW(forward(m, random_patch({5, 4, 4}, 3)), Error);
}
