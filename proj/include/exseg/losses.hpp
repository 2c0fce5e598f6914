#pragma once

// Voxel-wise and contrastive losses with exact gradients. All losses are
// plain sums over their contributing terms; probabilities are clamped to
// [1e-7, 1-1e-7] before any log. The foreground probability is
// p = sigmoid(l1 - l0), so dL/dl1 = -dL/dl0 throughout.

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "exseg/errors.hpp"
#include "exseg/net.hpp"
#include "exseg/rng.hpp"
#include "exseg/volume.hpp"

namespace exseg {

inline constexpr double kProbClamp = 1e-7;

struct SamplePlan {
  std::vector<std::size_t> positives;
  std::vector<std::size_t> negatives;
  int n = 0;
  double tau = 0.1;
};

template <typename T>
struct PceOut {
  double loss = 0.0;
  ChField<T> dlogits;  // 2 channels
};

template <typename T>
struct CtrOut {
  double loss = 0.0;
  ChField<T> dfeatures;
};

template <typename T>
struct TrainOut {
  double loss = 0.0;
  double pce = 0.0;
  double ctr = 0.0;
  ChField<T> dlogits;
  ChField<T> dfeatures;
};

namespace detail {

// Adds the gradient of -log(p) (label 1) or -log(1-p) (label 0) through
// the softmax, respecting the clamp: outside the open clamp interval the
// loss is constant, so the gradient is zero.
template <typename T>
inline void add_ce_term(T p, int label, double weight, T& dl0, T& dl1, double& loss) {
  const double pd = static_cast<double>(p);
  const double pc = std::clamp(pd, kProbClamp, 1.0 - kProbClamp);
  if (label == 1) {
    loss -= weight * std::log(pc);
    if (pd > kProbClamp && pd < 1.0 - kProbClamp) {
      const T g = static_cast<T>(weight * (pd - 1.0));
      dl1 += g;
      dl0 -= g;
    }
  } else {
    loss -= weight * std::log(1.0 - pc);
    if (pd > kProbClamp && pd < 1.0 - kProbClamp) {
      const T g = static_cast<T>(weight * pd);
      dl1 += g;
      dl0 -= g;
    }
  }
}

}  // namespace detail

// Partial cross entropy: -sum_{y=0} log(1-p) - sum_{y=1} log(p); label 2
// contributes nothing, including zero gradient.
template <typename T>
PceOut<T> pce_loss(const Dims3& dims, const std::vector<T>& prob, const TrinaryMask& y) {
  require(y.dims == dims && prob.size() == dims.count() && y.labels.size() == dims.count(),
          Err::ShapeMismatch, "pce_loss: prob/mask dims mismatch");
  PceOut<T> out;
  out.dlogits = ChField<T>(dims, 2);
  T* d0 = out.dlogits.ch(0);
  T* d1 = out.dlogits.ch(1);
  std::size_t labeled = 0;
  for (std::size_t i = 0; i < prob.size(); ++i) {
    const int lab = y.labels[i];
    if (lab == 2) continue;
    ++labeled;
    detail::add_ce_term(prob[i], lab, 1.0, d0[i], d1[i], out.loss);
  }
  require(labeled > 0, Err::NoLabeledVoxels, "pce_loss: every voxel is unlabeled");
  return out;
}

inline PceOut<float> pce_loss(const ProbMap& prob, const TrinaryMask& y) {
  return pce_loss<float>(prob.dims, prob.probs, y);
}

// Uniform sampling with replacement from the label-1 and label-0 voxel
// sets; positives are drawn first, then negatives.
inline SamplePlan sample_plan(const TrinaryMask& y, int n, Rng& rng, double tau = 0.1) {
  if (n < 1) throw std::invalid_argument("sample_plan: N must be >= 1");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < y.labels.size(); ++i) {
    if (y.labels[i] == 1) pos.push_back(i);
    else if (y.labels[i] == 0) neg.push_back(i);
  }
  require(!pos.empty() && !neg.empty(), Err::MissingClass,
          "sample_plan: patch lacks a labeled class");
  SamplePlan plan;
  plan.n = n;
  plan.tau = tau;
  plan.positives.reserve(n);
  plan.negatives.reserve(n);
  for (int i = 0; i < n; ++i) plan.positives.push_back(pos[rng.uniform_index(pos.size())]);
  for (int i = 0; i < n; ++i) plan.negatives.push_back(neg[rng.uniform_index(neg.size())]);
  return plan;
}

// Supervised contrastive loss over the 2N sampled voxels. Every sampled
// slot acts as an anchor; for anchor slot a,
//   -1/(2N-1) [ sum_{b in other class} log(1 - sigma(cos(a,b)/tau))
//             + sum_{b in same class, b != a} log(sigma(cos(a,b)/tau)) ]
// and the loss is the mean over the 2N anchors. Self-exclusion is by slot,
// so a voxel sampled twice still pairs with its other copies.
template <typename T>
CtrOut<T> ctr_loss(const ChField<T>& features, const SamplePlan& plan) {
  const int n = plan.n;
  const int total = 2 * n;
  require(static_cast<int>(plan.positives.size()) == n &&
              static_cast<int>(plan.negatives.size()) == n,
          Err::ShapeMismatch, "ctr_loss: plan size mismatch");
  const int dfe = features.channels;
  const std::size_t nvox = features.voxels();

  std::vector<std::size_t> slot_voxel(total);
  for (int i = 0; i < n; ++i) slot_voxel[i] = plan.positives[i];
  for (int i = 0; i < n; ++i) slot_voxel[n + i] = plan.negatives[i];
  for (std::size_t v : slot_voxel) {
    require(v < nvox, Err::OutOfBounds, "ctr_loss: sampled voxel outside field");
  }

  // Unit feature vectors per slot, gathered from the channel-major field.
  std::vector<double> unit(static_cast<std::size_t>(total) * dfe);
  std::vector<double> norm(total);
  for (int s = 0; s < total; ++s) {
    double nn = 0.0;
    for (int c = 0; c < dfe; ++c) {
      const double v = static_cast<double>(features.ch(c)[slot_voxel[s]]);
      unit[static_cast<std::size_t>(s) * dfe + c] = v;
      nn += v * v;
    }
    require(nn > 0.0, Err::ZeroNormFeature, "ctr_loss: zero-norm feature vector");
    norm[s] = std::sqrt(nn);
    for (int c = 0; c < dfe; ++c) unit[static_cast<std::size_t>(s) * dfe + c] /= norm[s];
  }

  CtrOut<T> out;
  out.dfeatures = ChField<T>(features.dims, dfe);
  std::vector<double> dz(static_cast<std::size_t>(total) * dfe, 0.0);  // grad wrt raw Z per slot

  const double pair_coeff = -1.0 / (static_cast<double>(total) - 1.0);
  const double anchor_mean = 1.0 / static_cast<double>(total);
  double loss = 0.0;
  for (int a = 0; a < total; ++a) {
    const double* ua = &unit[static_cast<std::size_t>(a) * dfe];
    const bool a_pos = a < n;
    for (int b = 0; b < total; ++b) {
      if (b == a) continue;
      const bool same = (b < n) == a_pos;
      const double* ub = &unit[static_cast<std::size_t>(b) * dfe];
      double s = 0.0;
      for (int c = 0; c < dfe; ++c) s += ua[c] * ub[c];
      const double t = s / plan.tau;
      const double sig = 1.0 / (1.0 + std::exp(-t));
      double dterm_ds;  // derivative of the log term w.r.t. the cosine s
      if (same) {
        loss += anchor_mean * pair_coeff * std::log(sig);
        dterm_ds = (1.0 - sig) / plan.tau;
      } else {
        loss += anchor_mean * pair_coeff * std::log(1.0 - sig);
        dterm_ds = -sig / plan.tau;
      }
      const double w = anchor_mean * pair_coeff * dterm_ds;
      // d s / d Z_a = (u_b - s*u_a)/|Z_a|, and symmetrically for Z_b.
      double* da = &dz[static_cast<std::size_t>(a) * dfe];
      double* db = &dz[static_cast<std::size_t>(b) * dfe];
      for (int c = 0; c < dfe; ++c) {
        da[c] += w * (ub[c] - s * ua[c]) / norm[a];
        db[c] += w * (ua[c] - s * ub[c]) / norm[b];
      }
    }
  }
  out.loss = loss;

  for (int s = 0; s < total; ++s) {
    for (int c = 0; c < dfe; ++c) {
      out.dfeatures.ch(c)[slot_voxel[s]] +=
          static_cast<T>(dz[static_cast<std::size_t>(s) * dfe + c]);
    }
  }
  return out;
}

// L_train = L_pce + L_ctr; without a plan (missing class) it degenerates
// to L_pce alone with a zero feature gradient.
template <typename T>
TrainOut<T> train_loss(const Dims3& dims, const std::vector<T>& prob,
                       const ChField<T>& features, const TrinaryMask& y,
                       const std::optional<SamplePlan>& plan) {
  TrainOut<T> out;
  PceOut<T> pce = pce_loss<T>(dims, prob, y);
  out.pce = pce.loss;
  out.dlogits = std::move(pce.dlogits);
  if (plan) {
    CtrOut<T> ctr = ctr_loss<T>(features, *plan);
    out.ctr = ctr.loss;
    out.dfeatures = std::move(ctr.dfeatures);
  } else {
    out.dfeatures = ChField<T>(features.dims, features.channels);
  }
  out.loss = out.pce + out.ctr;
  return out;
}

// L_finetune = L_pce - w * sum_{k in pseudo} log(p(k)): the propagated
// pseudo-positives act as weighted extra positive supervision.
template <typename T>
PceOut<T> finetune_loss(const Dims3& dims, const std::vector<T>& prob, const TrinaryMask& y,
                        const std::vector<std::size_t>& pseudo_pos, double w) {
  if (w < 0) throw std::invalid_argument("finetune_loss: w must be >= 0");
  PceOut<T> out = pce_loss<T>(dims, prob, y);
  T* d0 = out.dlogits.ch(0);
  T* d1 = out.dlogits.ch(1);
  for (std::size_t k : pseudo_pos) {
    require(k < prob.size(), Err::OutOfBounds, "finetune_loss: pseudo voxel outside patch");
    if (y.labels[k] != 2) {
      throw std::invalid_argument("finetune_loss: pseudo-positive overlaps a labeled voxel");
    }
    detail::add_ce_term(prob[k], 1, w, d0[k], d1[k], out.loss);
  }
  return out;
}

inline PceOut<float> finetune_loss(const ProbMap& prob, const TrinaryMask& y,
                                   const std::vector<std::size_t>& pseudo_pos, double w) {
  return finetune_loss<float>(prob.dims, prob.probs, y, pseudo_pos, w);
}

}  // namespace exseg
