#pragma once

// Similarity-aware label propagation: score each unlabeled voxel against N
// referring positive voxels by cosine similarity of the feature vectors;
// voxels whose acceptance count exceeds alpha*N become pseudo-positives
// for the current fine-tune iteration only.

#include <cmath>
#include <cstdint>
#include <vector>

#include "exseg/errors.hpp"
#include "exseg/inference.hpp"
#include "exseg/net.hpp"
#include "exseg/rng.hpp"
#include "exseg/volume.hpp"

namespace exseg {

struct PropagationConfig {
  int n = 100;          // referring sample count N
  double lambda = 0.96; // similarity threshold
  double alpha = 0.96;  // acceptance fraction
  double w = 0.1;       // pseudo-label weight in the fine-tune loss
};

inline void validate(const PropagationConfig& c) {
  if (!(c.n >= 1 && c.lambda > 0 && c.lambda < 1 && c.alpha > 0 && c.alpha <= 1 &&
        c.w >= 0)) {
    throw std::invalid_argument("invalid propagation config");
  }
}

// Smallest integer count satisfying "S strictly greater than alpha*N".
// alpha*N values that are integers up to floating-point error are treated
// as that integer, so e.g. alpha=0.96, N=100 requires S >= 97.
inline int min_accept_count(double alpha, int n) {
  const double t = alpha * static_cast<double>(n);
  const double nearest = std::round(t);
  if (std::abs(t - nearest) < 1e-9) return static_cast<int>(nearest) + 1;
  return static_cast<int>(std::floor(t)) + 1;
}

namespace detail {

template <typename T>
inline double feature_norm(const ChField<T>& f, std::size_t voxel) {
  double nn = 0.0;
  for (int c = 0; c < f.channels; ++c) {
    const double v = static_cast<double>(f.ch(c)[voxel]);
    nn += v * v;
  }
  return std::sqrt(nn);
}

}  // namespace detail

// S(k) = number of referring voxels whose feature cosine similarity with
// the query voxel exceeds lambda (strictly).
template <typename T>
int similarity_score(const ChField<T>& features, std::size_t query,
                     const std::vector<std::size_t>& referring, double lambda) {
  const std::size_t nvox = features.voxels();
  require(query < nvox, Err::OutOfBounds, "similarity_score: query outside field");
  const double qn = detail::feature_norm(features, query);
  require(qn > 0.0, Err::ZeroNormFeature, "similarity_score: zero-norm query feature");
  int score = 0;
  for (std::size_t r : referring) {
    require(r < nvox, Err::OutOfBounds, "similarity_score: referring voxel outside field");
    const double rn = detail::feature_norm(features, r);
    require(rn > 0.0, Err::ZeroNormFeature, "similarity_score: zero-norm referring feature");
    double dot = 0.0;
    for (int c = 0; c < features.channels; ++c) {
      dot += static_cast<double>(features.ch(c)[query]) *
             static_cast<double>(features.ch(c)[r]);
    }
    if (dot / (qn * rn) > lambda) ++score;
  }
  return score;
}

// Draws the N referring voxels from the label-1 set: without replacement
// when at least N exist (partial Fisher-Yates), with replacement otherwise.
inline std::vector<std::size_t> sample_referring(const std::vector<std::size_t>& positives,
                                                 int n, Rng& rng) {
  std::vector<std::size_t> out;
  out.reserve(n);
  if (static_cast<int>(positives.size()) >= n) {
    std::vector<std::size_t> pool = positives;
    for (int i = 0; i < n; ++i) {
      const std::size_t j = i + rng.uniform_index(pool.size() - i);
      std::swap(pool[i], pool[j]);
      out.push_back(pool[i]);
    }
  } else {
    for (int i = 0; i < n; ++i) out.push_back(positives[rng.uniform_index(positives.size())]);
  }
  return out;
}

// Returns exactly { k : y(k) = 2 and S(k) > alpha*N }, in ascending voxel
// order. The result is valid only for the iteration that produced it.
template <typename T>
std::vector<std::size_t> propagate_labels(const ChField<T>& features, const TrinaryMask& y,
                                          const PropagationConfig& cfg, Rng& rng) {
  validate(cfg);
  require(y.dims == features.dims && y.labels.size() == features.voxels(),
          Err::ShapeMismatch, "propagate_labels: mask/feature dims mismatch");
  std::vector<std::size_t> positives;
  for (std::size_t i = 0; i < y.labels.size(); ++i) {
    if (y.labels[i] == 1) positives.push_back(i);
  }
  require(!positives.empty(), Err::NoPositives, "propagate_labels: no positive voxels");

  const std::vector<std::size_t> referring = sample_referring(positives, cfg.n, rng);
  const int need = min_accept_count(cfg.alpha, cfg.n);

  // Referring-voxel norms and pointers gathered once; queries stream.
  std::vector<double> ref_norm(referring.size());
  for (std::size_t i = 0; i < referring.size(); ++i) {
    ref_norm[i] = detail::feature_norm(features, referring[i]);
    require(ref_norm[i] > 0.0, Err::ZeroNormFeature,
            "propagate_labels: zero-norm referring feature");
  }

  std::vector<std::size_t> accepted;
  for (std::size_t k = 0; k < y.labels.size(); ++k) {
    if (y.labels[k] != 2) continue;
    const double qn = detail::feature_norm(features, k);
    require(qn > 0.0, Err::ZeroNormFeature, "propagate_labels: zero-norm query feature");
    int score = 0;
    const int remaining_budget = static_cast<int>(referring.size());
    for (std::size_t i = 0; i < referring.size(); ++i) {
      // Early exit when the acceptance threshold can no longer be reached.
      if (score + (remaining_budget - static_cast<int>(i)) < need) break;
      double dot = 0.0;
      for (int c = 0; c < features.channels; ++c) {
        dot += static_cast<double>(features.ch(c)[k]) *
               static_cast<double>(features.ch(c)[referring[i]]);
      }
      if (dot / (qn * ref_norm[i]) > cfg.lambda) ++score;
    }
    if (score >= need) accepted.push_back(k);
  }
  return accepted;
}

// After fine-tuning the network emits binary pseudo-masks for the whole
// training set: sliding-window inference thresholded at prob > 0.5.
template <typename T>
std::vector<BinaryMask> binarize_training_masks(const ModelState<T>& m,
                                                const std::vector<Volume3D>& volumes,
                                                const Dims3& patch) {
  std::vector<BinaryMask> out;
  out.reserve(volumes.size());
  for (const Volume3D& v : volumes) {
    const ProbMap p = sliding_window_infer(m, v, patch);
    BinaryMask mask = make_binary(v.dims);
    for (std::size_t i = 0; i < p.probs.size(); ++i) {
      mask.labels[i] = p.probs[i] > 0.5f ? 1 : 0;
    }
    out.push_back(std::move(mask));
  }
  return out;
}

}  // namespace exseg
