#pragma once

// Orchestration of the train -> fine-tune -> retrain procedure: patch
// sampling, epoch loops, and the per-stage rng streams. All loops are
// sequential and all rng draws happen in a fixed order, so a fixed master
// seed reproduces every stage bit-identically.
//
// Loss values are recorded as the plain sums the loss definitions produce.
// For the parameter update each patch's voxel-wise logit gradient is
// scaled by 1/(number of voxels contributing terms), i.e. the update uses
// the per-voxel mean, which keeps the step size independent of patch size
// and leaves the contrastive term (already a mean over anchors) at its
// natural relative weight.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "exseg/errors.hpp"
#include "exseg/inference.hpp"
#include "exseg/losses.hpp"
#include "exseg/net.hpp"
#include "exseg/propagation.hpp"
#include "exseg/rng.hpp"
#include "exseg/volume.hpp"

namespace exseg {

struct PipelineConfig {
  Dims3 patch_dims{32, 32, 16};
  int epochs_train = 60;
  int finetune_iters = 100;
  int epochs_retrain = 60;
  double eta_train = 0.01;
  double eta_finetune = 0.0001;
  int ctr_n = 100;  // N for the contrastive sampler
  double tau = 0.1;
  PropagationConfig prop;
  Arch arch;
  std::uint64_t seed = 0;
};

inline void validate(const PipelineConfig& c) {
  validate(c.arch);
  validate(c.prop);
  if (!(c.patch_dims.nx >= 2 && c.patch_dims.ny >= 2 && c.patch_dims.nz >= 2 &&
        c.patch_dims.nx % 2 == 0 && c.patch_dims.ny % 2 == 0 && c.patch_dims.nz % 2 == 0)) {
    fail(Err::BadPatchDims, "patch dims must be even and >= 2 along every axis");
  }
  if (!(c.epochs_train >= 0 && c.finetune_iters >= 0 && c.epochs_retrain >= 0 &&
        c.eta_train > 0 && c.eta_finetune > 0 && c.ctr_n >= 1 && c.tau > 0)) {
    throw std::invalid_argument("invalid pipeline config");
  }
}

struct TrainingCase {
  std::string id;
  Volume3D volume;  // normalized
  ExtremePoints extremes;
  TrinaryMask initial_mask;
};

struct PatchPair {
  Volume3D fg, bg;
  TrinaryMask fg_mask, bg_mask;
  Voxel fg_origin, bg_origin;
  Voxel fg_center;  // the drawn label-1 voxel, in volume coordinates
};

namespace detail {

inline TrinaryMask crop_mask(const TrinaryMask& m, const Voxel& origin, const Dims3& patch) {
  TrinaryMask out{patch, std::vector<std::uint8_t>(patch.count())};
  for (int z = 0; z < patch.nz; ++z) {
    for (int y = 0; y < patch.ny; ++y) {
      const std::size_t src = linear_index(m.dims, origin.x, origin.y + y, origin.z + z);
      const std::size_t dst = linear_index(patch, 0, y, z);
      std::copy_n(m.labels.begin() + src, patch.nx, out.labels.begin() + dst);
    }
  }
  return out;
}

inline int clamp_origin(int center, int patch, int extent) {
  return std::clamp(center - patch / 2, 0, extent - patch);
}

}  // namespace detail

// One foreground patch centered on a uniformly drawn label-1 voxel
// (window clipped in-bounds) and one background patch at a uniform
// in-bounds origin. Draw order: fg center, then bg origin x, y, z.
inline PatchPair sample_patch_pair(const Volume3D& v, const TrinaryMask& mask,
                                   const Dims3& patch, Rng& rng) {
  const Dims3& d = v.dims;
  require(d.nx >= patch.nx && d.ny >= patch.ny && d.nz >= patch.nz, Err::VolumeTooSmall,
          "volume smaller than training patch");
  require(mask.dims == d, Err::ShapeMismatch, "sample_patch_pair: mask dims mismatch");
  std::vector<std::size_t> fg;
  for (std::size_t i = 0; i < mask.labels.size(); ++i) {
    if (mask.labels[i] == 1) fg.push_back(i);
  }
  require(!fg.empty(), Err::NoForeground, "sample_patch_pair: mask has no label-1 voxels");

  const Voxel c = delinearize(d, fg[rng.uniform_index(fg.size())]);
  PatchPair p;
  p.fg_center = c;
  p.fg_origin = {detail::clamp_origin(c.x, patch.nx, d.nx),
                 detail::clamp_origin(c.y, patch.ny, d.ny),
                 detail::clamp_origin(c.z, patch.nz, d.nz)};
  p.bg_origin = {static_cast<int>(rng.uniform_index(d.nx - patch.nx + 1)),
                 static_cast<int>(rng.uniform_index(d.ny - patch.ny + 1)),
                 static_cast<int>(rng.uniform_index(d.nz - patch.nz + 1))};
  p.fg = crop_volume(v, p.fg_origin, patch);
  p.bg = crop_volume(v, p.bg_origin, patch);
  p.fg_mask = detail::crop_mask(mask, p.fg_origin, patch);
  p.bg_mask = detail::crop_mask(mask, p.bg_origin, patch);
  return p;
}

struct StageResult {
  ModelState<float> model;
  std::vector<double> loss_trace;  // one entry per epoch / iteration
};

namespace detail {

inline std::size_t labeled_count(const TrinaryMask& m) {
  std::size_t n = 0;
  for (std::uint8_t v : m.labels) n += (v != 2);
  return n;
}

inline void scale_channels(ChField<float>& f, double s) {
  for (float& v : f.data) v = static_cast<float>(v * s);
}

inline void add_into(std::vector<float>& acc, const std::vector<float>& g) {
  if (acc.empty()) {
    acc = g;
  } else {
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
  }
}

// One training step on one patch: combined loss (pce + contrastive when both
// classes are present), exact backward, mean-scaled logit gradient. A patch
// with no labeled voxel at all is the empty sum: zero loss, zero gradient.
inline double train_patch_grad(const ModelState<float>& m, const Volume3D& patch,
                               const TrinaryMask& mask, int ctr_n, double tau,
                               bool use_ctr, Rng& rng, std::vector<float>& grad_acc) {
  if (labeled_count(mask) == 0) return 0.0;
  const ForwardRecord<float> rec = forward(m, patch);
  std::optional<SamplePlan> plan;
  if (use_ctr) {
    try {
      plan = sample_plan(mask, ctr_n, rng, tau);
    } catch (const Error& e) {
      if (e.code() != Err::MissingClass) throw;  // a one-class patch skips L_ctr
    }
  }
  TrainOut<float> out = train_loss<float>(patch.dims, rec.prob, rec.features, mask, plan);
  scale_channels(out.dlogits, 1.0 / static_cast<double>(labeled_count(mask)));
  add_into(grad_acc, backward(m, rec, out.dlogits, out.dfeatures));
  return out.loss;
}

}  // namespace detail

// SGD over (fg, bg) patch pairs with the combined objective and the poly
// learning-rate schedule; one parameter step per case per epoch.
inline StageResult train_stage(const std::vector<TrainingCase>& cases,
                               const PipelineConfig& cfg) {
  validate(cfg);
  StageResult r{init_model<float>(cfg.arch, mix_seed(cfg.seed, 1)), {}};
  if (cases.empty()) return r;
  Rng rng(mix_seed(cfg.seed, 2));
  for (int epoch = 0; epoch < cfg.epochs_train; ++epoch) {
    const double lr = poly_lr(cfg.eta_train, epoch, cfg.epochs_train);
    double epoch_loss = 0.0;
    for (const TrainingCase& c : cases) {
      const PatchPair p = sample_patch_pair(c.volume, c.initial_mask, cfg.patch_dims, rng);
      std::vector<float> grad;
      epoch_loss += detail::train_patch_grad(r.model, p.fg, p.fg_mask, cfg.ctr_n, cfg.tau,
                                             true, rng, grad);
      epoch_loss += detail::train_patch_grad(r.model, p.bg, p.bg_mask, cfg.ctr_n, cfg.tau,
                                             true, rng, grad);
      sgd_step(r.model, grad, lr);
    }
    r.loss_trace.push_back(epoch_loss / static_cast<double>(cases.size()));
  }
  return r;
}

// Fine-tune with similarity-propagated pseudo-positives. Cases are
// visited round-robin, one (fg, bg) pair per iteration; pseudo-positive
// sets live only inside their iteration.
inline StageResult finetune_stage(const ModelState<float>& model,
                                  const std::vector<TrainingCase>& cases,
                                  const PipelineConfig& cfg) {
  validate(cfg);
  StageResult r{model, {}};
  if (cases.empty() || cfg.finetune_iters == 0) return r;
  Rng rng(mix_seed(cfg.seed, 3));
  for (int it = 0; it < cfg.finetune_iters; ++it) {
    const double lr = poly_lr(cfg.eta_finetune, it, cfg.finetune_iters);
    const TrainingCase& c = cases[it % cases.size()];
    const PatchPair p = sample_patch_pair(c.volume, c.initial_mask, cfg.patch_dims, rng);
    std::vector<float> grad;
    double iter_loss = 0.0;
    const std::array<std::pair<const Volume3D*, const TrinaryMask*>, 2> sides = {
        {{&p.fg, &p.fg_mask}, {&p.bg, &p.bg_mask}}};
    for (const auto& [vol, mask] : sides) {
      if (detail::labeled_count(*mask) == 0) continue;  // empty sum, no draw
      const ForwardRecord<float> rec = forward(r.model, *vol);
      std::vector<std::size_t> pseudo;
      try {
        pseudo = propagate_labels(rec.features, *mask, cfg.prop, rng);
      } catch (const Error& e) {
        if (e.code() != Err::NoPositives) throw;  // patches without positives add none
      }
      PceOut<float> out =
          finetune_loss<float>(vol->dims, rec.prob, *mask, pseudo, cfg.prop.w);
      iter_loss += out.loss;
      // One common factor for the whole fine-tune gradient keeps the
      // w balance intact and makes w=0 exactly the pce-only trajectory.
      detail::scale_channels(out.dlogits,
                             1.0 / static_cast<double>(detail::labeled_count(*mask)));
      const ChField<float> no_dfeat(vol->dims, cfg.arch.feat_dim);
      detail::add_into(grad, backward(r.model, rec, out.dlogits, no_dfeat));
    }
    sgd_step(r.model, grad, lr);
    r.loss_trace.push_back(iter_loss);
  }
  return r;
}

// Retrain from a fresh initialization on binary pseudo-masks with the same
// same combined objective as the first stage; with every voxel labeled the pce part
// becomes the full cross entropy.
inline StageResult retrain_stage(const std::vector<TrainingCase>& cases,
                                 const std::vector<BinaryMask>& binary_masks,
                                 const PipelineConfig& cfg) {
  validate(cfg);
  require(binary_masks.size() == cases.size(), Err::ShapeMismatch,
          "retrain_stage: one binary mask per case required");
  StageResult r{init_model<float>(cfg.arch, mix_seed(cfg.seed, 4)), {}};
  if (cases.empty()) return r;

  std::vector<TrinaryMask> as_trinary;
  as_trinary.reserve(cases.size());
  for (std::size_t i = 0; i < cases.size(); ++i) {
    require(binary_masks[i].dims == cases[i].volume.dims, Err::ShapeMismatch,
            "retrain_stage: mask dims mismatch");
    as_trinary.push_back(TrinaryMask{binary_masks[i].dims, binary_masks[i].labels});
  }

  Rng rng(mix_seed(cfg.seed, 5));
  for (int epoch = 0; epoch < cfg.epochs_retrain; ++epoch) {
    const double lr = poly_lr(cfg.eta_train, epoch, cfg.epochs_retrain);
    double epoch_loss = 0.0;
    for (std::size_t ci = 0; ci < cases.size(); ++ci) {
      const PatchPair p =
          sample_patch_pair(cases[ci].volume, as_trinary[ci], cfg.patch_dims, rng);
      std::vector<float> grad;
      epoch_loss += detail::train_patch_grad(r.model, p.fg, p.fg_mask, cfg.ctr_n, cfg.tau,
                                             true, rng, grad);
      epoch_loss += detail::train_patch_grad(r.model, p.bg, p.bg_mask, cfg.ctr_n, cfg.tau,
                                             true, rng, grad);
      sgd_step(r.model, grad, lr);
    }
    r.loss_trace.push_back(epoch_loss / static_cast<double>(cases.size()));
  }
  return r;
}

}  // namespace exseg
