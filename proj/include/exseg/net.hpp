#pragma once

// Small 3D encoder-decoder segmentation network with hand-written exact
// backprop. Topology (reference architecture):
//
//   input --conv3x3x3+ReLU--> enc0 --avgpool2--> --conv3x3x3+ReLU--> enc1
//   enc1 --nearest-up2--> up ; concat [enc0, up] --conv3x3x3--> features (Z)
//   features --conv1x1x1--> 2 logits --softmax--> foreground probability
//
// The feature head is linear (no activation) so per-voxel feature vectors
// span all directions, which matters for cosine-similarity scoring.
// Everything is templated on the scalar type: float for training, double
// for finite-difference gradient verification.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "exseg/errors.hpp"
#include "exseg/io.hpp"
#include "exseg/rng.hpp"
#include "exseg/volume.hpp"

namespace exseg {

// Channel-major dense field: data[(c*nz + z)*ny*nx + y*nx + x].
template <typename T>
struct ChField {
  Dims3 dims;
  int channels = 0;
  std::vector<T> data;

  ChField() = default;
  ChField(Dims3 d, int c) : dims(d), channels(c), data(d.count() * c, T(0)) {}
  std::size_t voxels() const { return dims.count(); }
  T* ch(int c) { return data.data() + static_cast<std::size_t>(c) * dims.count(); }
  const T* ch(int c) const { return data.data() + static_cast<std::size_t>(c) * dims.count(); }
};

struct Arch {
  int levels = 2;
  std::vector<int> channels = {8, 16};
  int kernel = 3;
  int feat_dim = 8;
};

inline void validate(const Arch& a) {
  require(a.levels == 2, Err::BadArch, "engine supports the 2-level reference topology");
  require(static_cast<int>(a.channels.size()) == a.levels, Err::BadArch,
          "channels list must have one entry per level");
  for (int c : a.channels) require(c >= 1, Err::BadArch, "channel counts must be >= 1");
  require(a.kernel >= 1 && a.kernel % 2 == 1, Err::BadArch, "kernel must be odd");
  require(a.feat_dim >= 2, Err::BadArch, "feature dimension must be >= 2");
}

// Flattened parameter layout: for each conv, weights [co][ci][kz][ky][kx]
// then biases [co]. Order: enc0, enc1, feature head, classifier.
struct ParamLayout {
  std::size_t enc0_w, enc0_b, enc1_w, enc1_b, feat_w, feat_b, cls_w, cls_b, total;
};

inline ParamLayout param_layout(const Arch& a) {
  validate(a);
  const std::size_t k3 = static_cast<std::size_t>(a.kernel) * a.kernel * a.kernel;
  const int c0 = a.channels[0], c1 = a.channels[1], dfe = a.feat_dim;
  ParamLayout L{};
  std::size_t off = 0;
  L.enc0_w = off; off += static_cast<std::size_t>(c0) * 1 * k3;
  L.enc0_b = off; off += c0;
  L.enc1_w = off; off += static_cast<std::size_t>(c1) * c0 * k3;
  L.enc1_b = off; off += c1;
  L.feat_w = off; off += static_cast<std::size_t>(dfe) * (c0 + c1) * k3;
  L.feat_b = off; off += dfe;
  L.cls_w = off; off += static_cast<std::size_t>(2) * dfe;
  L.cls_b = off; off += 2;
  L.total = off;
  return L;
}

inline std::size_t param_count(const Arch& a) { return param_layout(a).total; }

template <typename T>
struct ModelState {
  Arch arch;
  std::vector<T> params;
  std::uint64_t rng_seed = 0;
};

template <typename T>
ModelState<T> init_model(const Arch& arch, std::uint64_t seed) {
  const ParamLayout L = param_layout(arch);
  ModelState<T> m{arch, std::vector<T>(L.total, T(0)), seed};
  Rng rng(mix_seed(seed, 0x6d6f64656cull));  // "model" stream
  const std::size_t k3 = static_cast<std::size_t>(arch.kernel) * arch.kernel * arch.kernel;
  const auto he_fill = [&](std::size_t off, std::size_t count, std::size_t fan_in) {
    const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (std::size_t i = 0; i < count; ++i) {
      m.params[off + i] = static_cast<T>(rng.gaussian() * std_dev);
    }
  };
  const int c0 = arch.channels[0], c1 = arch.channels[1], dfe = arch.feat_dim;
  he_fill(L.enc0_w, static_cast<std::size_t>(c0) * 1 * k3, 1 * k3);
  he_fill(L.enc1_w, static_cast<std::size_t>(c1) * c0 * k3, static_cast<std::size_t>(c0) * k3);
  he_fill(L.feat_w, static_cast<std::size_t>(dfe) * (c0 + c1) * k3,
          static_cast<std::size_t>(c0 + c1) * k3);
  he_fill(L.cls_w, static_cast<std::size_t>(2) * dfe, dfe);
  return m;
}

template <typename T>
ModelState<T> convert_model(const ModelState<float>& m) {
  ModelState<T> out{m.arch, std::vector<T>(m.params.size()), m.rng_seed};
  for (std::size_t i = 0; i < m.params.size(); ++i) out.params[i] = static_cast<T>(m.params[i]);
  return out;
}

namespace detail {

// out[co] = bias[co] + sum_ci W[co][ci] * in[ci], same-size zero padding.
template <typename T>
void conv3d_fwd(const ChField<T>& in, const T* w, const T* b, int k, int co_n,
                ChField<T>& out) {
  const Dims3 d = in.dims;
  const int r = k / 2, ci_n = in.channels;
  out = ChField<T>(d, co_n);
  const std::size_t nvox = d.count();
  for (int co = 0; co < co_n; ++co) {
    T* oc = out.ch(co);
    const T bias = b[co];
    for (std::size_t i = 0; i < nvox; ++i) oc[i] = bias;
  }
  const std::size_t row = static_cast<std::size_t>(d.nx);
  const std::size_t plane = row * d.ny;
  for (int co = 0; co < co_n; ++co) {
    T* oc = out.ch(co);
    for (int ci = 0; ci < ci_n; ++ci) {
      const T* icf = in.ch(ci);
      const T* wk = w + ((static_cast<std::size_t>(co) * ci_n + ci) * k) * k * k;
      for (int kz = 0; kz < k; ++kz) {
        const int dz = kz - r;
        for (int ky = 0; ky < k; ++ky) {
          const int dy = ky - r;
          for (int kx = 0; kx < k; ++kx) {
            const int dx = kx - r;
            const T wv = wk[(static_cast<std::size_t>(kz) * k + ky) * k + kx];
            if (wv == T(0)) continue;
            const int z0 = std::max(0, -dz), z1 = d.nz - std::max(0, dz);
            const int y0 = std::max(0, -dy), y1 = d.ny - std::max(0, dy);
            const int x0 = std::max(0, -dx), x1 = d.nx - std::max(0, dx);
            for (int z = z0; z < z1; ++z) {
              for (int y = y0; y < y1; ++y) {
                T* orow = oc + z * plane + y * row;
                const T* irow = icf + (z + dz) * plane + (y + dy) * row + dx;
                for (int x = x0; x < x1; ++x) orow[x] += wv * irow[x];
              }
            }
          }
        }
      }
    }
  }
}

// Accumulates dW/db and (if din != nullptr) the input gradient.
template <typename T>
void conv3d_bwd(const ChField<T>& in, const ChField<T>& dout, const T* w, int k,
                T* dw, T* db, ChField<T>* din) {
  const Dims3 d = in.dims;
  const int r = k / 2, ci_n = in.channels, co_n = dout.channels;
  const std::size_t row = static_cast<std::size_t>(d.nx);
  const std::size_t plane = row * d.ny;
  const std::size_t nvox = d.count();
  for (int co = 0; co < co_n; ++co) {
    const T* oc = dout.ch(co);
    T acc = T(0);
    for (std::size_t i = 0; i < nvox; ++i) acc += oc[i];
    db[co] += acc;
  }
  for (int co = 0; co < co_n; ++co) {
    const T* oc = dout.ch(co);
    for (int ci = 0; ci < ci_n; ++ci) {
      const T* icf = in.ch(ci);
      T* dicf = din ? din->ch(ci) : nullptr;
      const std::size_t wbase = ((static_cast<std::size_t>(co) * ci_n + ci) * k) * k * k;
      for (int kz = 0; kz < k; ++kz) {
        const int dz = kz - r;
        for (int ky = 0; ky < k; ++ky) {
          const int dy = ky - r;
          for (int kx = 0; kx < k; ++kx) {
            const int dx = kx - r;
            const std::size_t wi = wbase + (static_cast<std::size_t>(kz) * k + ky) * k + kx;
            const T wv = w[wi];
            const int z0 = std::max(0, -dz), z1 = d.nz - std::max(0, dz);
            const int y0 = std::max(0, -dy), y1 = d.ny - std::max(0, dy);
            const int x0 = std::max(0, -dx), x1 = d.nx - std::max(0, dx);
            T wacc = T(0);
            for (int z = z0; z < z1; ++z) {
              for (int y = y0; y < y1; ++y) {
                const T* orow = oc + z * plane + y * row;
                const T* irow = icf + (z + dz) * plane + (y + dy) * row + dx;
                T dot = T(0);
                for (int x = x0; x < x1; ++x) dot += orow[x] * irow[x];
                wacc += dot;
                if (dicf) {
                  T* drow = dicf + (z + dz) * plane + (y + dy) * row + dx;
                  for (int x = x0; x < x1; ++x) drow[x] += wv * orow[x];
                }
              }
            }
            dw[wi] += wacc;
          }
        }
      }
    }
  }
}

template <typename T>
ChField<T> avgpool2(const ChField<T>& in) {
  const Dims3 d = in.dims;
  const Dims3 h{d.nx / 2, d.ny / 2, d.nz / 2};
  ChField<T> out(h, in.channels);
  for (int c = 0; c < in.channels; ++c) {
    const T* ic = in.ch(c);
    T* oc = out.ch(c);
    for (int z = 0; z < h.nz; ++z) {
      for (int y = 0; y < h.ny; ++y) {
        for (int x = 0; x < h.nx; ++x) {
          T acc = T(0);
          for (int a = 0; a < 2; ++a) {
            for (int bb = 0; bb < 2; ++bb) {
              for (int cc = 0; cc < 2; ++cc) {
                acc += ic[linear_index(d, 2 * x + cc, 2 * y + bb, 2 * z + a)];
              }
            }
          }
          oc[linear_index(h, x, y, z)] = acc / T(8);
        }
      }
    }
  }
  return out;
}

template <typename T>
void avgpool2_bwd(const ChField<T>& dout, ChField<T>& din) {
  const Dims3 h = dout.dims;
  const Dims3 d = din.dims;
  for (int c = 0; c < dout.channels; ++c) {
    const T* oc = dout.ch(c);
    T* ic = din.ch(c);
    for (int z = 0; z < h.nz; ++z) {
      for (int y = 0; y < h.ny; ++y) {
        for (int x = 0; x < h.nx; ++x) {
          const T g = oc[linear_index(h, x, y, z)] / T(8);
          for (int a = 0; a < 2; ++a) {
            for (int bb = 0; bb < 2; ++bb) {
              for (int cc = 0; cc < 2; ++cc) {
                ic[linear_index(d, 2 * x + cc, 2 * y + bb, 2 * z + a)] += g;
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
ChField<T> upsample2_nearest(const ChField<T>& in, const Dims3& out_dims) {
  ChField<T> out(out_dims, in.channels);
  for (int c = 0; c < in.channels; ++c) {
    const T* ic = in.ch(c);
    T* oc = out.ch(c);
    for (int z = 0; z < out_dims.nz; ++z) {
      for (int y = 0; y < out_dims.ny; ++y) {
        for (int x = 0; x < out_dims.nx; ++x) {
          oc[linear_index(out_dims, x, y, z)] =
              ic[linear_index(in.dims, x / 2, y / 2, z / 2)];
        }
      }
    }
  }
  return out;
}

template <typename T>
void upsample2_nearest_bwd(const ChField<T>& dout, ChField<T>& din) {
  for (int c = 0; c < dout.channels; ++c) {
    const T* oc = dout.ch(c);
    T* ic = din.ch(c);
    for (int z = 0; z < dout.dims.nz; ++z) {
      for (int y = 0; y < dout.dims.ny; ++y) {
        for (int x = 0; x < dout.dims.nx; ++x) {
          ic[linear_index(din.dims, x / 2, y / 2, z / 2)] +=
              oc[linear_index(dout.dims, x, y, z)];
        }
      }
    }
  }
}

template <typename T>
void relu_inplace(ChField<T>& f) {
  for (T& v : f.data) v = v > T(0) ? v : T(0);
}

}  // namespace detail

template <typename T>
struct ForwardRecord {
  ChField<T> input;     // 1 channel
  ChField<T> enc0;      // post-ReLU
  ChField<T> pooled;    // input to enc1 conv
  ChField<T> enc1;      // post-ReLU
  ChField<T> concat;    // [enc0 ; upsampled enc1], input to feature head
  ChField<T> features;  // Z, linear
  ChField<T> logits;    // 2 channels
  std::vector<T> prob;  // softmax foreground channel, one per voxel
};

template <typename T>
ForwardRecord<T> forward(const ModelState<T>& m, const Volume3D& patch) {
  const Arch& a = m.arch;
  const ParamLayout L = param_layout(a);
  const Dims3 d = patch.dims;
  require(d.nx % 2 == 0 && d.ny % 2 == 0 && d.nz % 2 == 0 && d.nx >= 2 && d.ny >= 2 &&
              d.nz >= 2,
          Err::BadPatchDims, "patch dims must be even along every axis");
  const T* P = m.params.data();
  const int k = a.kernel, c0 = a.channels[0], c1 = a.channels[1], dfe = a.feat_dim;

  ForwardRecord<T> r;
  r.input = ChField<T>(d, 1);
  for (std::size_t i = 0; i < d.count(); ++i) r.input.data[i] = static_cast<T>(patch.data[i]);

  detail::conv3d_fwd(r.input, P + L.enc0_w, P + L.enc0_b, k, c0, r.enc0);
  detail::relu_inplace(r.enc0);
  r.pooled = detail::avgpool2(r.enc0);
  detail::conv3d_fwd(r.pooled, P + L.enc1_w, P + L.enc1_b, k, c1, r.enc1);
  detail::relu_inplace(r.enc1);

  const ChField<T> up = detail::upsample2_nearest(r.enc1, d);
  r.concat = ChField<T>(d, c0 + c1);
  std::copy(r.enc0.data.begin(), r.enc0.data.end(), r.concat.data.begin());
  std::copy(up.data.begin(), up.data.end(), r.concat.data.begin() + r.enc0.data.size());

  detail::conv3d_fwd(r.concat, P + L.feat_w, P + L.feat_b, k, dfe, r.features);

  // 1x1x1 classifier
  r.logits = ChField<T>(d, 2);
  const std::size_t nvox = d.count();
  const T* cw = P + L.cls_w;
  const T* cb = P + L.cls_b;
  for (int co = 0; co < 2; ++co) {
    T* oc = r.logits.ch(co);
    for (std::size_t i = 0; i < nvox; ++i) oc[i] = cb[co];
    for (int ci = 0; ci < dfe; ++ci) {
      const T w = cw[static_cast<std::size_t>(co) * dfe + ci];
      const T* fc = r.features.ch(ci);
      for (std::size_t i = 0; i < nvox; ++i) oc[i] += w * fc[i];
    }
  }

  r.prob.resize(nvox);
  const T* l0 = r.logits.ch(0);
  const T* l1 = r.logits.ch(1);
  for (std::size_t i = 0; i < nvox; ++i) {
    const T t = l1[i] - l0[i];
    r.prob[i] = T(1) / (T(1) + std::exp(-t));
  }
  return r;
}

// Exact parameter gradient for upstream gradients given on the logits
// (2 channels) and on the feature field (feat_dim channels).
template <typename T>
std::vector<T> backward(const ModelState<T>& m, const ForwardRecord<T>& r,
                        const ChField<T>& dlogits, const ChField<T>& dfeatures) {
  const Arch& a = m.arch;
  const ParamLayout L = param_layout(a);
  const Dims3 d = r.input.dims;
  require(dlogits.dims == d && dlogits.channels == 2, Err::ShapeMismatch,
          "logit gradient shape mismatch");
  require(dfeatures.dims == d && dfeatures.channels == a.feat_dim, Err::ShapeMismatch,
          "feature gradient shape mismatch");
  const T* P = m.params.data();
  const int k = a.kernel, c0 = a.channels[0], c1 = a.channels[1], dfe = a.feat_dim;
  const std::size_t nvox = d.count();
  std::vector<T> grad(L.total, T(0));
  T* G = grad.data();

  // classifier head
  ChField<T> dfeat = dfeatures;
  {
    const T* cw = P + L.cls_w;
    for (int co = 0; co < 2; ++co) {
      const T* dl = dlogits.ch(co);
      T acc = T(0);
      for (std::size_t i = 0; i < nvox; ++i) acc += dl[i];
      G[L.cls_b + co] += acc;
      for (int ci = 0; ci < dfe; ++ci) {
        const T* fc = r.features.ch(ci);
        T* dfc = dfeat.ch(ci);
        const T w = cw[static_cast<std::size_t>(co) * dfe + ci];
        T wacc = T(0);
        for (std::size_t i = 0; i < nvox; ++i) {
          wacc += dl[i] * fc[i];
          dfc[i] += w * dl[i];
        }
        G[L.cls_w + static_cast<std::size_t>(co) * dfe + ci] += wacc;
      }
    }
  }

  // feature head conv
  ChField<T> dconcat(d, c0 + c1);
  detail::conv3d_bwd(r.concat, dfeat, P + L.feat_w, k, G + L.feat_w, G + L.feat_b, &dconcat);

  // split concat gradient
  ChField<T> denc0(d, c0);
  std::copy(dconcat.data.begin(), dconcat.data.begin() + denc0.data.size(),
            denc0.data.begin());
  ChField<T> dup(d, c1);
  std::copy(dconcat.data.begin() + denc0.data.size(), dconcat.data.end(), dup.data.begin());

  // upsample backward, ReLU, enc1 conv backward
  ChField<T> denc1(r.enc1.dims, c1);
  detail::upsample2_nearest_bwd(dup, denc1);
  for (std::size_t i = 0; i < denc1.data.size(); ++i) {
    if (r.enc1.data[i] <= T(0)) denc1.data[i] = T(0);
  }
  ChField<T> dpooled(r.pooled.dims, c0);
  detail::conv3d_bwd(r.pooled, denc1, P + L.enc1_w, k, G + L.enc1_w, G + L.enc1_b, &dpooled);

  // pool backward joins the skip-path gradient
  detail::avgpool2_bwd(dpooled, denc0);
  for (std::size_t i = 0; i < denc0.data.size(); ++i) {
    if (r.enc0.data[i] <= T(0)) denc0.data[i] = T(0);
  }
  detail::conv3d_bwd(r.input, denc0, P + L.enc0_w, k, G + L.enc0_w, G + L.enc0_b,
                     static_cast<ChField<T>*>(nullptr));
  return grad;
}

template <typename T>
void sgd_step(ModelState<T>& m, const std::vector<T>& grad, double lr) {
  if (!(lr > 0)) throw std::invalid_argument("sgd_step: lr must be > 0");
  require(grad.size() == m.params.size(), Err::ShapeMismatch, "gradient size mismatch");
  for (std::size_t i = 0; i < grad.size(); ++i) {
    m.params[i] -= static_cast<T>(lr * static_cast<double>(grad[i]));
  }
}

inline double poly_lr(double eta0, int epoch, int total) {
  if (!(epoch >= 0 && epoch < total)) throw std::invalid_argument("poly_lr: epoch out of range");
  return eta0 * std::pow(1.0 - static_cast<double>(epoch) / static_cast<double>(total), 0.9);
}

// MDL1 checkpoint: 4 magic bytes, one JSON architecture line ending in
// '\n', then the f32 little-endian parameter payload.
inline void save_model(const ModelState<float>& m, const std::string& path) {
  nlohmann::ordered_json h;
  h["levels"] = m.arch.levels;
  h["channels"] = m.arch.channels;
  h["kernel"] = m.arch.kernel;
  h["feat_dim"] = m.arch.feat_dim;
  h["rng_seed"] = m.rng_seed;
  std::string out = "MDL1" + h.dump() + "\n";
  const std::size_t head = out.size();
  out.resize(head + m.params.size() * sizeof(float));
  std::memcpy(out.data() + head, m.params.data(), m.params.size() * sizeof(float));
  spit_file(path, out);
}

inline ModelState<float> load_model(const std::string& path) {
  const std::string b = slurp_file(path);
  require(b.size() >= 4 && b.compare(0, 4, "MDL1") == 0, Err::BadMagic,
          "not an MDL1 file: " + path);
  const std::size_t nl = b.find('\n', 4);
  require(nl != std::string::npos, Err::HeaderMismatch, "missing header terminator: " + path);
  nlohmann::json h = nlohmann::json::parse(b.begin() + 4, b.begin() + nl, nullptr, false);
  require(!h.is_discarded() && h.is_object(), Err::HeaderMismatch,
          "malformed checkpoint header: " + path);
  ModelState<float> m;
  m.arch.levels = h.at("levels").get<int>();
  m.arch.channels = h.at("channels").get<std::vector<int>>();
  m.arch.kernel = h.at("kernel").get<int>();
  m.arch.feat_dim = h.at("feat_dim").get<int>();
  m.rng_seed = h.at("rng_seed").get<std::uint64_t>();
  const ParamLayout L = param_layout(m.arch);
  const std::size_t payload = b.size() - nl - 1;
  require(payload == L.total * sizeof(float), Err::HeaderMismatch,
          "parameter payload does not match architecture: " + path);
  m.params.resize(L.total);
  std::memcpy(m.params.data(), b.data() + nl + 1, payload);
  return m;
}

}  // namespace exseg
