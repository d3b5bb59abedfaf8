// Gradient-salience computation and binary patch-mask generation.
//
// Salience is taken at the patch-embedding output, before position addition,
// with the unmasked forward path: g_i is the sum over embedding coordinates of
// the absolute loss gradient at patch row i.
#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "mgvit/masks.hpp"
#include "mgvit/tensor.hpp"
#include "mgvit/vit.hpp"

namespace mgvit::maskgen {

using mask::MaskKind;
using mask::MaskSpec;
using mask::SalienceMap;

// Builds the scalar loss for one sample from the final token sequence.
using LossBuilder = std::function<Tensor(const vit::TokenSequence& z_final)>;

// Forward (unmasked), loss, backward; reads |grad| sums at the embedding rows.
// Parameter gradients touched along the way are zeroed before returning.
inline SalienceMap compute_salience(const vit::ParameterStore& params,
                                    const vit::ModelConfig& cfg, const Tensor& image,
                                    const LossBuilder& loss_fn) {
  Tape tape;
  Tensor embedded = vit::patch_embed(image, params, cfg);
  embedded.set_requires_grad(true);
  vit::TokenSequence seq = vit::assemble_input(embedded, params, cfg);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) seq = vit::encoder_layer(seq, params, l, cfg);
  const Tensor loss = loss_fn(seq);
  tape.backward(loss);

  SalienceMap out;
  out.values.assign(cfg.num_patches(), 0.0);
  const std::vector<double>& g = embedded.grad();
  const std::size_t d = cfg.embed_dim;
  for (std::size_t i = 0; i < cfg.num_patches(); ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) acc += std::fabs(g[i * d + j]);
    out.values[i] = acc;
  }
  const_cast<vit::ParameterStore&>(params).zero_grads();
  return out;
}

inline SalienceMap compute_salience_classification(const vit::ParameterStore& params,
                                                   const vit::ModelConfig& cfg,
                                                   const Tensor& image, int joint_label,
                                                   double smoothing = 0.0) {
  SalienceMap sal = compute_salience(params, cfg, image, [&](const vit::TokenSequence& z) {
    return cross_entropy(vit::classify_head(z, params, cfg), {joint_label}, smoothing);
  });
  sal.label = joint_label;
  return sal;
}

// Exactly the k largest salience entries become 1; ties go to the lower patch
// index.
inline MaskSpec discrete_mask(const SalienceMap& sal, std::size_t k) {
  const std::size_t n = sal.values.size();
  if (k < 1 || k > n) {
    throw InputError("topk " + std::to_string(k) + " outside [1," + std::to_string(n) + "]");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (sal.values[a] != sal.values[b]) return sal.values[a] > sal.values[b];
    return a < b;
  });
  MaskSpec m;
  m.bits.assign(n, 0.0);
  m.kind = MaskKind::discrete;
  m.k = k;
  for (std::size_t i = 0; i < k; ++i) m.bits[order[i]] = 1.0;
  return m;
}

// One axis-aligned rectangle of set bits: centered on the rounded mean
// coordinate of the discrete mask, sized as the smallest grid-aspect-matched
// rectangle with area >= k, shifted (never shrunk) to fit the grid.
inline MaskSpec continued_mask(const MaskSpec& discrete, std::size_t grid_h, std::size_t grid_w) {
  if (discrete.kind != MaskKind::discrete) throw InputError("continued_mask wants a discrete input");
  if (discrete.bits.size() != grid_h * grid_w) {
    throw ShapeError("mask length " + std::to_string(discrete.bits.size()) + " vs grid " +
                     std::to_string(grid_h) + "x" + std::to_string(grid_w));
  }
  double sum_r = 0.0, sum_c = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < discrete.bits.size(); ++i) {
    if (discrete.bits[i] == 1.0) {
      sum_r += static_cast<double>(i / grid_w);
      sum_c += static_cast<double>(i % grid_w);
      ++count;
    }
  }
  if (count == 0) throw InputError("continued_mask on an empty discrete mask");
  const auto center_r = static_cast<long>(std::lround(sum_r / static_cast<double>(count)));
  const auto center_c = static_cast<long>(std::lround(sum_c / static_cast<double>(count)));

  // Smallest (ceil(a*h), ceil(a*w)) with area >= k; candidate scales are the
  // breakpoints where either ceil changes.
  const std::size_t k = discrete.k == 0 ? count : discrete.k;
  std::size_t rect_h = grid_h, rect_w = grid_w;
  double best_scale = 2.0;
  auto consider = [&](double a) {
    if (a <= 0.0 || a > 1.0) return;
    const auto h = static_cast<std::size_t>(std::ceil(a * static_cast<double>(grid_h) - 1e-12));
    const auto w = static_cast<std::size_t>(std::ceil(a * static_cast<double>(grid_w) - 1e-12));
    if (h == 0 || w == 0 || h * w < k) return;
    if (a < best_scale) {
      best_scale = a;
      rect_h = h;
      rect_w = w;
    }
  };
  for (std::size_t i = 1; i <= grid_h; ++i) consider(static_cast<double>(i) / static_cast<double>(grid_h));
  for (std::size_t j = 1; j <= grid_w; ++j) consider(static_cast<double>(j) / static_cast<double>(grid_w));

  long top = center_r - static_cast<long>(rect_h / 2);
  long left = center_c - static_cast<long>(rect_w / 2);
  top = std::clamp<long>(top, 0, static_cast<long>(grid_h - rect_h));
  left = std::clamp<long>(left, 0, static_cast<long>(grid_w - rect_w));

  MaskSpec out;
  out.bits.assign(grid_h * grid_w, 0.0);
  out.kind = MaskKind::continued;
  out.k = k;
  for (std::size_t r = 0; r < rect_h; ++r) {
    for (std::size_t c = 0; c < rect_w; ++c) {
      out.bits[(static_cast<std::size_t>(top) + r) * grid_w + static_cast<std::size_t>(left) + c] = 1.0;
    }
  }
  return out;
}

inline MaskSpec make_mask(const SalienceMap& sal, std::size_t k, MaskKind kind, std::size_t grid_h,
                          std::size_t grid_w) {
  MaskSpec m = discrete_mask(sal, k);
  if (kind == MaskKind::continued) m = continued_mask(m, grid_h, grid_w);
  return m;
}

// One mask per sample, each from that sample's own salience under the current
// model.
struct MaskedSample {
  int sample_id;
  MaskSpec mask;
};

inline std::vector<MaskedSample> salience_for_set(
    const vit::ParameterStore& params, const vit::ModelConfig& cfg,
    const std::vector<std::pair<int, const Tensor*>>& samples,
    const std::function<LossBuilder(int sample_id)>& loss_for, std::size_t k, MaskKind kind) {
  if (samples.empty()) throw InputError("salience_for_set on an empty sample list");
  std::vector<MaskedSample> out;
  out.reserve(samples.size());
  for (const auto& [id, image] : samples) {
    SalienceMap sal = compute_salience(params, cfg, *image, loss_for(id));
    sal.sample_id = id;
    out.push_back({id, make_mask(sal, k, kind, cfg.grid_h(), cfg.grid_w())});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Inspection exports: plain-text PGM of the min-max-normalized salience on the
// patch grid, and CSV of mask bits, one grid row per line.
// ---------------------------------------------------------------------------

inline void write_salience_pgm(const std::string& path, const SalienceMap& sal,
                               std::size_t grid_h, std::size_t grid_w) {
  if (sal.values.size() != grid_h * grid_w) throw ShapeError("salience length vs grid mismatch");
  double lo = sal.values[0], hi = sal.values[0];
  for (double v : sal.values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double span = hi - lo;
  std::ofstream os(path);
  if (!os) throw InputError("cannot open for write: " + path);
  os << "P2\n" << grid_w << " " << grid_h << "\n255\n";
  for (std::size_t r = 0; r < grid_h; ++r) {
    for (std::size_t c = 0; c < grid_w; ++c) {
      const double v = sal.values[r * grid_w + c];
      const int level = span > 0.0 ? static_cast<int>(std::lround((v - lo) / span * 255.0)) : 0;
      os << level << (c + 1 == grid_w ? "" : " ");
    }
    os << "\n";
  }
}

inline void write_mask_csv(const std::string& path, const MaskSpec& m, std::size_t grid_h,
                           std::size_t grid_w) {
  if (m.bits.size() != grid_h * grid_w) throw ShapeError("mask length vs grid mismatch");
  std::ofstream os(path);
  if (!os) throw InputError("cannot open for write: " + path);
  for (std::size_t r = 0; r < grid_h; ++r) {
    for (std::size_t c = 0; c < grid_w; ++c) {
      os << static_cast<int>(m.bits[r * grid_w + c]) << (c + 1 == grid_w ? "" : ",");
    }
    os << "\n";
  }
}

}  // namespace mgvit::maskgen
