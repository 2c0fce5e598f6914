// Acceptance gate: one line per criterion, nonzero exit if any line fails.
//
// Criteria 2-5 and 8 are oracle checks with runtime bounds; criterion 1 is a
// config-compatibility check standing in for the irreproducible clinical
// cohort; criterion 6 runs the full pipeline on the synthetic fixture;
// criterion 7 runs the whole thing twice and compares bytes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "exseg/dijkstra.hpp"
#include "exseg/io.hpp"
#include "exseg/losses.hpp"
#include "exseg/metrics.hpp"
#include "exseg/net.hpp"
#include "exseg/pipeline.hpp"
#include "exseg/propagation.hpp"
#include "exseg/random_walker.hpp"
#include "exseg/seed_genesis.hpp"
#include "exseg/synth.hpp"

using namespace exseg;

namespace {

int g_failures = 0;

void line(int id, bool ok, const std::string& detail) {
  std::printf("[%s] criterion %d: %s\n", ok ? "PASS" : "FAIL", id, detail.c_str());
  std::fflush(stdout);
  if (!ok) ++g_failures;
}

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof(buf), f, ap);
  va_end(ap);
  return buf;
}

// ---------------------------------------------------------------- criterion 1

void criterion1() {
  // The reference results rest on a private cohort, so they cannot be
  // reproduced here; what must hold is that the full-scale configuration is
  // pure data for this code base: clinical patch size, long schedules and the
  // published operating point all validate with no code change.
  bool ok = true;
  std::string why = "clinical cohort is private; full-scale config accepted as data: ";
  try {
    PipelineConfig cfg;
    cfg.patch_dims = {128, 128, 96};
    cfg.epochs_train = 1000;
    cfg.epochs_retrain = 1000;
    cfg.finetune_iters = 1000;
    cfg.eta_train = 0.01;
    cfg.eta_finetune = 0.0001;
    cfg.ctr_n = 100;
    cfg.tau = 0.1;
    cfg.prop.n = 100;
    cfg.prop.lambda = 0.96;
    cfg.prop.alpha = 0.96;
    cfg.prop.w = 0.1;
    validate(cfg);
    validate(cfg.prop);
    why += fmt("patch 128x128x96, 1000 epochs, eta 0.01, N=100, tau=0.1, "
               "lambda=alpha=0.96, w=0.1 (model %zu params)",
               param_count(cfg.arch));
  } catch (const std::exception& e) {
    ok = false;
    why += std::string("rejected: ") + e.what();
  }
  line(1, ok, why);
}

// ---------------------------------------------------------------- criterion 2

double oracle_weight(double a, double b, const RwConfig& cfg) {
  const double diff = a - b;
  return std::exp(-cfg.beta * diff * diff) + cfg.epsilon_w;
}

void criterion2() {
  const auto t0 = Clock::now();
  // Uniform 5-voxel chain with end seeds: interior probabilities are the
  // linear interpolation 0.75 / 0.5 / 0.25.
  const Volume3D chain = make_volume({1, 1, 5}, {}, 3.0f);
  SeedSet ends;
  ends.foreground = {linear_index(chain.dims, 0, 0, 0)};
  ends.background = {linear_index(chain.dims, 0, 0, 4)};
  const ProbMap cp = rw_solve(chain, ends, RwConfig{});
  const double expected[3] = {0.75, 0.5, 0.25};
  double chain_err = 0.0;
  for (int z = 1; z <= 3; ++z) {
    chain_err = std::max(chain_err,
                         std::abs(cp.probs[linear_index(chain.dims, 0, 0, z)] -
                                  expected[z - 1]));
  }

  // Harmonicity: at every unseeded voxel the solution equals the
  // weight-averaged value of its neighbors, weights recomputed from first
  // principles. beta=90 leaves some voxels nearly isolated, so the check
  // solves at a residual far below the per-voxel 1e-4 bound.
  RwConfig cfg{};
  cfg.cg_tol = 1e-12;
  Rng rng(1234);
  double harm_err = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Dims3 d{6, 6, 4};
    Volume3D v = make_volume(d);
    for (float& t : v.data) t = static_cast<float>(rng.uniform01());
    SeedSet seeds;
    seeds.foreground = {linear_index(d, 1, 1, 1)};
    seeds.background = {linear_index(d, 4, 4, 2), linear_index(d, 0, 5, 3)};
    const ProbMap p = rw_solve(v, seeds, cfg);

    float mn = v.data[0], mx = v.data[0];
    for (float t : v.data) {
      mn = std::min(mn, t);
      mx = std::max(mx, t);
    }
    std::vector<double> g(v.data.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] = (v.data[i] - mn) / static_cast<double>(mx - mn);
    }
    for (int z = 0; z < d.nz; ++z) {
      for (int y = 0; y < d.ny; ++y) {
        for (int x = 0; x < d.nx; ++x) {
          const std::size_t i = linear_index(d, x, y, z);
          if (i == seeds.foreground[0] || i == seeds.background[0] ||
              i == seeds.background[1]) {
            continue;
          }
          double wsum = 0.0, acc = 0.0;
          const int nb[6][3] = {{x - 1, y, z}, {x + 1, y, z}, {x, y - 1, z},
                                {x, y + 1, z}, {x, y, z - 1}, {x, y, z + 1}};
          for (const auto& q : nb) {
            if (!d.contains(q[0], q[1], q[2])) continue;
            const std::size_t j = linear_index(d, q[0], q[1], q[2]);
            const double w = oracle_weight(g[i], g[j], cfg);
            wsum += w;
            acc += w * p.probs[j];
          }
          harm_err = std::max(harm_err, std::abs(p.probs[i] - acc / wsum));
        }
      }
    }
  }
  const double secs = seconds_since(t0);
  const bool ok = chain_err <= 1e-5 && harm_err <= 1e-4 && secs < 5.0;
  line(2, ok,
       fmt("random walker: chain max|err| %.2e (<= 1e-5), harmonicity max "
           "residual %.2e (<= 1e-4) on 20 random 6x6x4 grids, %.2fs (< 5s)",
           chain_err, harm_err, secs));
}

// ---------------------------------------------------------------- criterion 3

// Independent oracle over the same step-cost convention (stepping onto voxel
// u costs cost(u) + kPathEps), parenthesized exactly like path_cost.
double bellman_ford(const Volume3D& cost, const Voxel& src, const Voxel& dst) {
  const Dims3& d = cost.dims;
  const std::size_t n = d.count();
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> dist(n, kInf);
  dist[linear_index(d, src)] = 0.0;
  for (std::size_t pass = 0; pass + 1 < n; ++pass) {
    bool changed = false;
    for (int z = 0; z < d.nz; ++z) {
      for (int y = 0; y < d.ny; ++y) {
        for (int x = 0; x < d.nx; ++x) {
          const std::size_t u = linear_index(d, x, y, z);
          if (dist[u] == kInf) continue;
          const int nb[6][3] = {{x - 1, y, z}, {x + 1, y, z}, {x, y - 1, z},
                                {x, y + 1, z}, {x, y, z - 1}, {x, y, z + 1}};
          for (const auto& q : nb) {
            if (!d.contains(q[0], q[1], q[2])) continue;
            const std::size_t v = linear_index(d, q[0], q[1], q[2]);
            const double cand =
                dist[u] + (static_cast<double>(cost.data[v]) + kPathEps);
            if (cand < dist[v]) {
              dist[v] = cand;
              changed = true;
            }
          }
        }
      }
    }
    if (!changed) break;
  }
  return dist[linear_index(d, dst)];
}

void criterion3() {
  const auto t0 = Clock::now();
  Rng rng(2025);
  int exact = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Volume3D cost = make_volume({5, 5, 3});
    for (float& c : cost.data) c = static_cast<float>(rng.uniform01());
    const Voxel src{static_cast<int>(rng.uniform_index(5)),
                    static_cast<int>(rng.uniform_index(5)),
                    static_cast<int>(rng.uniform_index(3))};
    const Voxel dst{static_cast<int>(rng.uniform_index(5)),
                    static_cast<int>(rng.uniform_index(5)),
                    static_cast<int>(rng.uniform_index(3))};
    const auto path = dijkstra_path(cost, src, dst);
    exact += path_cost(cost, path) == bellman_ford(cost, src, dst);
  }
  const double secs = seconds_since(t0);
  const bool ok = exact == 100 && secs < 10.0;
  line(3, ok,
       fmt("dijkstra vs bellman-ford: %d/100 random 5x5x3 grids exactly "
           "equal, %.2fs (< 10s)",
           exact, secs));
}

// ---------------------------------------------------------------- criterion 4

// Shared finite-difference driver: evaluates `loss_of(x)` around `x` and
// compares the symmetric difference against `analytic`, tracking the worst
// relative error.
template <typename F>
void fd_check(std::vector<double>& x, const std::vector<double>& analytic,
              F&& loss_of, double& worst) {
  // Fourth-order central differences: the plain two-point stencil at h=1e-6
  // leaves cancellation noise of about eps*|f|/h, which on a summed loss of
  // magnitude ~20 is ~2e-9 absolute -- visible against 1e-5-sized gradient
  // components. The five-point stencil admits a larger h, pushing the noise
  // floor well below the tolerance without touching the analytic side. The
  // paired grouping matters: a coordinate the loss ignores yields four
  // identical values, and (f+h - f-h) cancels those exactly, keeping dead
  // coordinates at fd == 0 instead of eps-sized residue over 12h.
  const double h = 1e-4;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    const auto at = [&](double v) {
      x[i] = v;
      return loss_of();
    };
    const double fd =
        (8.0 * (at(keep + h) - at(keep - h)) - (at(keep + 2 * h) - at(keep - 2 * h))) /
        (12.0 * h);
    x[i] = keep;
    const double got = analytic[i];
    const double denom = std::max({std::abs(fd), std::abs(got), 1e-8});
    worst = std::max(worst, std::abs(fd - got) / denom);
  }
}

// Random two-logit field and a trinary mask with both classes present.
struct LogitInstance {
  Dims3 d{4, 3, 2};
  std::vector<double> l0, l1;
  TrinaryMask y;
  std::vector<double> prob() const {
    std::vector<double> p(l0.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] = 1.0 / (1.0 + std::exp(-(l1[i] - l0[i])));
    }
    return p;
  }
};

LogitInstance logit_instance(std::uint64_t seed) {
  LogitInstance ins;
  Rng rng(seed);
  const std::size_t n = ins.d.count();
  ins.l0.resize(n);
  ins.l1.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    ins.l0[i] = rng.uniform(-2.0, 2.0);
    ins.l1[i] = rng.uniform(-2.0, 2.0);
  }
  ins.y = make_trinary(ins.d, 2);
  for (std::size_t i = 0; i < n; ++i) {
    ins.y.labels[i] = static_cast<std::uint8_t>(rng.uniform_index(3));
  }
  ins.y.labels[0] = 1;
  ins.y.labels[1] = 0;
  return ins;
}

// Concatenate (l0, l1) into one parameter vector and adapt a PceOut-style
// two-channel dlogits for fd_check.
template <typename LossFn>
double logit_fd(LogitInstance ins, const ChField<double>& dlogits, LossFn&& f) {
  const std::size_t n = ins.d.count();
  std::vector<double> x(2 * n);
  std::copy(ins.l0.begin(), ins.l0.end(), x.begin());
  std::copy(ins.l1.begin(), ins.l1.end(), x.begin() + n);
  std::vector<double> analytic(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    analytic[i] = dlogits.ch(0)[i];
    analytic[n + i] = dlogits.ch(1)[i];
  }
  double worst = 0.0;
  fd_check(x, analytic,
           [&]() {
             std::copy(x.begin(), x.begin() + n, ins.l0.begin());
             std::copy(x.begin() + n, x.end(), ins.l1.begin());
             return f(ins);
           },
           worst);
  return worst;
}

void criterion4() {
  const auto t0 = Clock::now();
  double worst_pce = 0.0, worst_ctr = 0.0, worst_train = 0.0, worst_ft = 0.0,
         worst_net = 0.0;

  for (std::uint64_t k = 0; k < 20; ++k) {
    // L_pce
    {
      const LogitInstance ins = logit_instance(1000 + k);
      const PceOut<double> out = pce_loss<double>(ins.d, ins.prob(), ins.y);
      worst_pce = std::max(
          worst_pce, logit_fd(ins, out.dlogits, [](const LogitInstance& q) {
            return pce_loss<double>(q.d, q.prob(), q.y).loss;
          }));
    }
    // L_ctr
    {
      Rng rng(2000 + k);
      const Dims3 d{3, 2, 2};
      ChField<double> f(d, 3);
      for (double& v : f.data) v = rng.uniform(-1.0, 1.0);
      TrinaryMask y = make_trinary(d, 2);
      for (std::size_t i = 0; i < y.labels.size(); ++i) {
        y.labels[i] = static_cast<std::uint8_t>(rng.uniform_index(3));
      }
      y.labels[0] = 1;
      y.labels[1] = 0;
      const SamplePlan plan = sample_plan(y, 3, rng);
      const CtrOut<double> out = ctr_loss<double>(f, plan);
      double worst = 0.0;
      fd_check(f.data, out.dfeatures.data,
               [&]() { return ctr_loss<double>(f, plan).loss; }, worst);
      worst_ctr = std::max(worst_ctr, worst);
    }
    // L_train: logit half and feature half of the combined gradient.
    {
      LogitInstance ins = logit_instance(3000 + k);
      Rng rng(3100 + k);
      ChField<double> f(ins.d, 3);
      for (double& v : f.data) v = rng.uniform(-1.0, 1.0);
      const SamplePlan plan = sample_plan(ins.y, 3, rng);
      const TrainOut<double> out =
          train_loss<double>(ins.d, ins.prob(), f, ins.y, plan);
      worst_train = std::max(
          worst_train, logit_fd(ins, out.dlogits, [&](const LogitInstance& q) {
            return train_loss<double>(q.d, q.prob(), f, q.y, plan).loss;
          }));
      double worst = 0.0;
      const std::vector<double> prob = ins.prob();
      fd_check(f.data, out.dfeatures.data,
               [&]() {
                 return train_loss<double>(ins.d, prob, f, ins.y, plan).loss;
               },
               worst);
      worst_train = std::max(worst_train, worst);
    }
    // L_finetune
    {
      const LogitInstance ins = logit_instance(4000 + k);
      Rng rng(4100 + k);
      std::vector<std::size_t> pseudo;
      for (std::size_t i = 0; i < ins.y.labels.size(); ++i) {
        if (ins.y.labels[i] == 2 && rng.uniform01() < 0.5) pseudo.push_back(i);
      }
      const double w = 0.1;
      const PceOut<double> out =
          finetune_loss<double>(ins.d, ins.prob(), ins.y, pseudo, w);
      worst_ft = std::max(
          worst_ft, logit_fd(ins, out.dlogits, [&](const LogitInstance& q) {
            return finetune_loss<double>(q.d, q.prob(), q.y, pseudo, w).loss;
          }));
    }
    // Full model backward under the probe loss sum(a.logits) + sum(b.features).
    {
      Arch arch;
      arch.channels = {2, 3};
      arch.feat_dim = 2;
      ModelState<double> m = init_model<double>(arch, 5000 + k);
      const Dims3 d{4, 4, 2};
      Rng rng(5100 + k);
      Volume3D patch = make_volume(d);
      for (float& v : patch.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
      ChField<double> a(d, 2), b(d, arch.feat_dim);
      for (double& v : a.data) v = rng.uniform(-1.0, 1.0);
      for (double& v : b.data) v = rng.uniform(-1.0, 1.0);

      const auto probe = [&]() {
        const ForwardRecord<double> r = forward(m, patch);
        double s = 0.0;
        for (std::size_t i = 0; i < r.logits.data.size(); ++i) {
          s += a.data[i] * r.logits.data[i];
        }
        for (std::size_t i = 0; i < r.features.data.size(); ++i) {
          s += b.data[i] * r.features.data[i];
        }
        return s;
      };
      const ForwardRecord<double> r = forward(m, patch);
      const std::vector<double> grad = backward(m, r, a, b);
      double worst = 0.0;
      fd_check(m.params, grad, probe, worst);
      worst_net = std::max(worst_net, worst);
    }
  }

  const double secs = seconds_since(t0);
  const double bound = 1e-4;
  const bool ok = worst_pce < bound && worst_ctr < bound && worst_train < bound &&
                  worst_ft < bound && worst_net < bound && secs < 120.0;
  line(4, ok,
       fmt("gradients vs central differences, worst rel err over 20 instances "
           "each: pce %.1e, ctr %.1e, train %.1e, finetune %.1e, model "
           "backward %.1e (all < 1e-4), %.1fs (< 2min)",
           worst_pce, worst_ctr, worst_train, worst_ft, worst_net, secs));
}

// ---------------------------------------------------------------- criterion 5

struct PropInstance {
  ChField<double> features{{6, 5, 4}, 2};
  TrinaryMask mask;
  PropagationConfig cfg;
};

PropInstance prop_instance(std::uint64_t seed) {
  Rng rng(seed);
  PropInstance ins;
  const Dims3 d{6, 5, 4};
  const int dfe = 2 + static_cast<int>(rng.uniform_index(3));
  ins.features = ChField<double>(d, dfe);
  for (double& v : ins.features.data) v = rng.uniform(-1.0, 1.0);
  ins.mask = make_trinary(d, 2);
  for (std::size_t i = 0; i < ins.mask.labels.size(); ++i) {
    ins.mask.labels[i] = static_cast<std::uint8_t>(rng.uniform_index(3));
  }
  ins.mask.labels[0] = 1;
  ins.cfg.n = 1 + static_cast<int>(rng.uniform_index(20));
  ins.cfg.lambda = rng.uniform(0.05, 0.95);
  ins.cfg.alpha = rng.uniform(0.3, 1.0);
  return ins;
}

double plain_cosine(const ChField<double>& f, std::size_t a, std::size_t b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (int c = 0; c < f.channels; ++c) {
    dot += f.ch(c)[a] * f.ch(c)[b];
    na += f.ch(c)[a] * f.ch(c)[a];
    nb += f.ch(c)[b] * f.ch(c)[b];
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

void criterion5() {
  const auto t0 = Clock::now();
  int match = 0, monotone = 0;
  const int kInstances = 50;
  for (std::uint64_t seed = 1; seed <= kInstances; ++seed) {
    const PropInstance ins = prop_instance(seed);

    // propagate_labels draws its referring sample as its first use of the
    // generator, so an identically seeded generator reproduces it here.
    std::vector<std::size_t> positives;
    for (std::size_t i = 0; i < ins.mask.labels.size(); ++i) {
      if (ins.mask.labels[i] == 1) positives.push_back(i);
    }
    Rng ref_rng(seed * 31 + 7);
    const std::vector<std::size_t> referring =
        sample_referring(positives, ins.cfg.n, ref_rng);

    Rng run_rng(seed * 31 + 7);
    const std::vector<std::size_t> got =
        propagate_labels(ins.features, ins.mask, ins.cfg, run_rng);

    std::vector<std::size_t> want;
    for (std::size_t k = 0; k < ins.mask.labels.size(); ++k) {
      if (ins.mask.labels[k] != 2) continue;
      int s = 0;
      for (std::size_t r : referring) {
        s += plain_cosine(ins.features, k, r) > ins.cfg.lambda;
      }
      if (s >= min_accept_count(ins.cfg.alpha, ins.cfg.n)) want.push_back(k);
    }
    match += got == want;

    // Tightening lambda or alpha can only shrink the accepted set (same
    // seed -> same referring sample on every call).
    const auto run = [&](double lambda, double alpha) {
      PropagationConfig c = ins.cfg;
      c.lambda = lambda;
      c.alpha = alpha;
      Rng rng(seed);
      return propagate_labels(ins.features, ins.mask, c, rng);
    };
    const auto is_subset = [](const std::vector<std::size_t>& a,
                              const std::vector<std::size_t>& b) {
      return std::includes(b.begin(), b.end(), a.begin(), a.end());
    };
    const double tl = std::min(0.99, ins.cfg.lambda + 0.1);
    const double ta = std::min(1.0, ins.cfg.alpha + 0.1);
    const auto loose = run(ins.cfg.lambda, ins.cfg.alpha);
    monotone += is_subset(run(tl, ins.cfg.alpha), loose) &&
                is_subset(run(ins.cfg.lambda, ta), loose) &&
                is_subset(run(tl, ta), loose);
  }
  const double secs = seconds_since(t0);
  const bool ok = match == kInstances && monotone == kInstances;
  line(5, ok,
       fmt("label propagation: %d/%d instances match exhaustive S(k) oracle, "
           "%d/%d monotone under lambda/alpha tightening (N <= 20), %.2fs",
           match, kInstances, monotone, kInstances, secs));
}

// ---------------------------------------------------------------- criterion 6

double mean_test_dice(const ModelState<float>& m, const std::vector<SynthCase>& cases,
                      int from, int to, const Dims3& patch) {
  double acc = 0.0;
  for (int i = from; i < to; ++i) {
    const Volume3D nv = normalize(cases[i].volume);
    const ProbMap p = sliding_window_infer(m, nv, patch);
    BinaryMask b = make_binary(nv.dims);
    for (std::size_t k = 0; k < p.probs.size(); ++k) b.labels[k] = p.probs[k] > 0.5f;
    acc += dice(b, cases[i].gt);
  }
  return acc / (to - from);
}

void criterion6() {
  const auto t0 = Clock::now();
  // Fixed synthetic fixture: 20 train + 10 test lobulated lesions at
  // 48x48x32 with noise, bias field and jittered annotations.
  SynthSpec spec;
  spec.noise_sigma = 0.2;
  spec.bias_amp = 0.12;
  spec.lobulated = true;
  spec.jitter_extremes = true;
  const int n_train = 20, n_test = 10;
  const std::uint64_t data_seed = 4242;

  std::vector<SynthCase> cases;
  std::vector<TrainingCase> train;
  const RwConfig rw;
  for (int i = 0; i < n_train + n_test; ++i) {
    Rng rng(mix_seed(data_seed, static_cast<std::uint64_t>(i)));
    cases.push_back(gen_case(spec, rng));
    if (i >= n_train) continue;
    TrainingCase tc;
    tc.id = "c" + std::to_string(i);
    tc.volume = normalize(cases[i].volume);
    tc.extremes = jitter_extremes(extract_extremes(cases[i].gt), spec.dims, rng);
    tc.initial_mask = generate_initial_mask(cases[i].volume, tc.extremes, rw, nullptr);
    train.push_back(std::move(tc));
  }

  // (c) label-1 precision of the initial pseudo-masks against ground truth.
  double precision = 0.0;
  for (int i = 0; i < n_train; ++i) {
    std::size_t n1 = 0, hit = 0;
    for (std::size_t k = 0; k < train[i].initial_mask.labels.size(); ++k) {
      if (train[i].initial_mask.labels[k] == 1) {
        ++n1;
        hit += cases[i].gt.labels[k] != 0;
      }
    }
    precision += n1 ? static_cast<double>(hit) / static_cast<double>(n1) : 0.0;
  }
  precision /= n_train;

  // Desk-scale defaults: 32x32x16 patches, 60/60 epochs, 100 fine-tune steps.
  PipelineConfig cfg;
  cfg.seed = 1;

  const StageResult trained = train_stage(train, cfg);
  const double initial_dice =
      mean_test_dice(trained.model, cases, n_train, n_train + n_test, cfg.patch_dims);

  const StageResult tuned = finetune_stage(trained.model, train, cfg);
  std::vector<Volume3D> vols;
  for (const TrainingCase& tc : train) vols.push_back(tc.volume);
  const std::vector<BinaryMask> bins =
      binarize_training_masks(tuned.model, vols, cfg.patch_dims);
  const StageResult retrained = retrain_stage(train, bins, cfg);
  const double retrained_dice = mean_test_dice(retrained.model, cases, n_train,
                                               n_train + n_test, cfg.patch_dims);

  const double secs = seconds_since(t0);
  const bool ok_a = retrained_dice >= 0.70;
  const bool ok_b = retrained_dice >= initial_dice + 0.03;
  const bool ok_c = precision >= 0.8;
  const bool ok_t = secs <= 1800.0;
  line(6, ok_a && ok_b && ok_c && ok_t,
       fmt("end-to-end 20+10 synthetic run: (a) retrained mean test dice %.3f "
           ">= 0.70 %s; (b) retrained - initial = %+.3f >= 0.03 %s (initial "
           "%.3f); (c) pseudo-mask label-1 precision %.3f >= 0.8 %s; %.0fs "
           "<= 1800s %s",
           retrained_dice, ok_a ? "ok" : "FAILED", retrained_dice - initial_dice,
           ok_b ? "ok" : "FAILED", initial_dice, precision, ok_c ? "ok" : "FAILED",
           secs, ok_t ? "ok" : "FAILED"));
}

// ---------------------------------------------------------------- criterion 7

struct RunArtifacts {
  std::string trained, tuned, retrained;  // checkpoint bytes
  std::string table;                      // report bytes
  std::string json;
};

RunArtifacts tiny_pipeline_run(const std::filesystem::path& dir) {
  SynthSpec spec;
  spec.dims = {28, 28, 24};
  for (int a = 0; a < 3; ++a) {
    spec.radius_min[a] = 6.0;
    spec.radius_max[a] = 9.0;
  }
  spec.noise_sigma = 0.08;
  spec.bias_amp = 0.05;
  const int n_train = 3, n_test = 2;

  std::vector<SynthCase> cases;
  std::vector<TrainingCase> train;
  RwConfig rw;
  rw.n_iterations = 3;
  for (int i = 0; i < n_train + n_test; ++i) {
    Rng rng(mix_seed(55, static_cast<std::uint64_t>(i)));
    cases.push_back(gen_case(spec, rng));
    if (i >= n_train) continue;
    TrainingCase tc;
    tc.id = "c" + std::to_string(i);
    tc.volume = normalize(cases[i].volume);
    tc.extremes = jitter_extremes(extract_extremes(cases[i].gt), spec.dims, rng);
    tc.initial_mask = generate_initial_mask(cases[i].volume, tc.extremes, rw, nullptr);
    train.push_back(std::move(tc));
  }

  PipelineConfig cfg;
  cfg.patch_dims = {16, 16, 8};
  cfg.epochs_train = 12;
  cfg.finetune_iters = 20;
  cfg.epochs_retrain = 12;
  cfg.seed = 99;

  const StageResult trained = train_stage(train, cfg);
  const StageResult tuned = finetune_stage(trained.model, train, cfg);
  std::vector<Volume3D> vols;
  for (const TrainingCase& tc : train) vols.push_back(tc.volume);
  const std::vector<BinaryMask> bins =
      binarize_training_masks(tuned.model, vols, cfg.patch_dims);
  const StageResult retrained = retrain_stage(train, bins, cfg);

  std::vector<CaseMetrics> rows;
  for (int i = n_train; i < n_train + n_test; ++i) {
    const Volume3D nv = normalize(cases[i].volume);
    const ProbMap p = sliding_window_infer(retrained.model, nv, cfg.patch_dims);
    BinaryMask b = make_binary(nv.dims);
    for (std::size_t k = 0; k < p.probs.size(); ++k) b.labels[k] = p.probs[k] > 0.5f;
    rows.push_back({"t" + std::to_string(i), dice(b, cases[i].gt),
                    jaccard(b, cases[i].gt)});
  }
  const ReportSummary summary = report(rows);

  std::filesystem::create_directories(dir);
  save_model(trained.model, (dir / "trained.mdl1").string());
  save_model(tuned.model, (dir / "tuned.mdl1").string());
  save_model(retrained.model, (dir / "retrained.mdl1").string());
  spit_file((dir / "report.txt").string(), report_table(summary));
  spit_file((dir / "report.json").string(), report_json(summary).dump(2) + "\n");

  RunArtifacts a;
  a.trained = slurp_file((dir / "trained.mdl1").string());
  a.tuned = slurp_file((dir / "tuned.mdl1").string());
  a.retrained = slurp_file((dir / "retrained.mdl1").string());
  a.table = slurp_file((dir / "report.txt").string());
  a.json = slurp_file((dir / "report.json").string());
  return a;
}

void criterion7() {
  const auto t0 = Clock::now();
  const std::filesystem::path base =
      std::filesystem::temp_directory_path() / "exseg_acceptance_determinism";
  std::filesystem::remove_all(base);
  const RunArtifacts r1 = tiny_pipeline_run(base / "run1");
  const RunArtifacts r2 = tiny_pipeline_run(base / "run2");
  const bool ckpt = r1.trained == r2.trained && r1.tuned == r2.tuned &&
                    r1.retrained == r2.retrained;
  const bool rep = r1.table == r2.table && r1.json == r2.json;
  std::filesystem::remove_all(base);
  const double secs = seconds_since(t0);
  line(7, ckpt && rep,
       fmt("determinism (single-threaded): two identically seeded pipeline "
           "runs -> checkpoints bit-identical %s, reports bit-identical %s, "
           "%.1fs",
           ckpt ? "yes" : "NO", rep ? "yes" : "NO", secs));
}

// ---------------------------------------------------------------- criterion 8

void criterion8() {
  Rng rng(321);
  const Dims3 d{7, 6, 5};
  double worst_identity = 0.0;
  bool symmetric = true;
  for (int trial = 0; trial < 1000; ++trial) {
    BinaryMask a = make_binary(d), b = make_binary(d);
    const double pa = rng.uniform(0.1, 0.9), pb = rng.uniform(0.1, 0.9);
    for (std::size_t i = 0; i < d.count(); ++i) {
      a.labels[i] = rng.uniform01() < pa;
      b.labels[i] = rng.uniform01() < pb;
    }
    const double D = dice(a, b);
    const double J = jaccard(a, b);
    worst_identity = std::max(worst_identity, std::abs(J - D / (2.0 - D)));
    symmetric = symmetric && dice(a, b) == dice(b, a);
  }

  // Two-case fixture with hand-computed mean and population std.
  BinaryMask g = make_binary({4, 1, 1});
  g.labels = {1, 1, 1, 1};
  BinaryMask p1 = make_binary({4, 1, 1});
  p1.labels = {1, 1, 1, 0};  // dice 6/7
  BinaryMask p2 = g;         // dice 1
  const std::vector<CaseMetrics> rows = {{"a", dice(p1, g), jaccard(p1, g)},
                                         {"b", dice(p2, g), jaccard(p2, g)}};
  const ReportSummary s = report(rows);
  const double want_mean = (6.0 / 7.0 + 1.0) / 2.0;
  const double want_std = std::abs(1.0 - want_mean);  // two cases: |x - mean|
  const bool hand = std::abs(s.dice_mean - want_mean) < 1e-12 &&
                    std::abs(s.dice_std - want_std) < 1e-12;

  const bool ok = worst_identity <= 1e-9 && symmetric && hand;
  line(8, ok,
       fmt("metric identities: max |J - D/(2-D)| = %.1e over 1000 random "
           "pairs (<= 1e-9), dice symmetric %s, report mean/std match hand "
           "computation %s",
           worst_identity, symmetric ? "yes" : "NO", hand ? "yes" : "NO"));
}

}  // namespace

int main() {
  std::printf("acceptance gate: 8 criteria\n");
  criterion1();
  criterion2();
  criterion3();
  criterion4();
  criterion5();
  criterion6();
  criterion7();
  criterion8();
  std::printf("%d of 8 criteria passed\n", 8 - g_failures);
  return g_failures == 0 ? 0 : 1;
}
