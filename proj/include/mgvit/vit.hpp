// The toy vision transformer: patch embedding, token assembly, pre-norm
// encoder layers, classification/detection heads, the mask-guided forward
// path, position-embedding resampling, and checkpoint IO.
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mgvit/common.hpp"
#include "mgvit/masks.hpp"
#include "mgvit/tensor.hpp"

namespace mgvit::vit {

struct ModelConfig {
  std::size_t image_h = 32;
  std::size_t image_w = 32;
  std::size_t patch = 4;
  std::size_t channels = 3;
  std::size_t embed_dim = 32;
  std::size_t num_heads = 2;
  std::size_t num_layers = 4;
  std::size_t num_classes = 8;
  std::size_t num_base_classes = 8;  // first num_base_classes logits form the base head
  std::size_t num_det_tokens = 0;    // 0 disables the detection head
  double mlp_ratio = 4.0;
  double init_sigma = 0.0;           // 0 = 0.5/sqrt(embed_dim)

  double effective_init_sigma() const {
    return init_sigma > 0.0 ? init_sigma : 0.5 / std::sqrt(static_cast<double>(embed_dim));
  }

  std::size_t grid_h() const { return image_h / patch; }
  std::size_t grid_w() const { return image_w / patch; }
  std::size_t num_patches() const { return grid_h() * grid_w(); }
  std::size_t seq_len() const { return num_patches() + num_det_tokens + 1; }
  std::size_t head_dim() const { return embed_dim / num_heads; }
  std::size_t mlp_dim() const { return static_cast<std::size_t>(mlp_ratio * static_cast<double>(embed_dim)); }
  std::size_t num_novel_classes() const { return num_classes - num_base_classes; }

  void validate() const {
    if (patch == 0 || image_h % patch != 0 || image_w % patch != 0) {
      throw InputError("image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                       " not divisible by patch " + std::to_string(patch));
    }
    if (num_heads == 0 || embed_dim % num_heads != 0) {
      throw InputError("embed_dim " + std::to_string(embed_dim) + " not divisible by num_heads " +
                       std::to_string(num_heads));
    }
    if (num_classes == 0 || num_base_classes == 0 || num_base_classes > num_classes) {
      throw InputError("invalid class split: " + std::to_string(num_base_classes) + " base of " +
                       std::to_string(num_classes));
    }
    if (channels == 0 || mlp_ratio <= 0.0) throw InputError("invalid channels or mlp_ratio");
  }
};

// Index ranges of the [patch | detect | class] rows in a token matrix.
struct TokenLayout {
  std::size_t n_patch = 0;
  std::size_t n_det = 0;

  std::size_t patch_begin() const { return 0; }
  std::size_t patch_end() const { return n_patch; }
  std::size_t det_begin() const { return n_patch; }
  std::size_t det_end() const { return n_patch + n_det; }
  std::size_t cls_index() const { return n_patch + n_det; }
  std::size_t total() const { return n_patch + n_det + 1; }
};

struct TokenSequence {
  Tensor tokens;  // total() x D
  TokenLayout layout;
};

class ParameterStore {
 public:
  void put(const std::string& name, Tensor t) {
    if (!params_.emplace(name, std::move(t)).second) {
      throw InternalError("duplicate parameter name: " + name);
    }
  }

  bool has(const std::string& name) const { return params_.count(name) != 0; }

  const Tensor& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw InternalError("unknown parameter: " + name);
    return it->second;
  }

  Tensor& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw InternalError("unknown parameter: " + name);
    return it->second;
  }

  void replace(const std::string& name, Tensor t) { at(name) = std::move(t); }

  // Name-ordered view; iteration order is the determinism contract.
  std::vector<std::pair<std::string, Tensor>> items() const {
    return {params_.begin(), params_.end()};
  }

  std::size_t count() const { return params_.size(); }

  std::size_t total_scalars() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
  }

  void zero_grads() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  // Deep copy: fresh storage, gradients not carried over.
  ParameterStore clone() const {
    ParameterStore out;
    for (const auto& [name, t] : params_) {
      out.put(name, Tensor::from_data(t.shape(), t.data(), t.requires_grad()));
    }
    return out;
  }

 private:
  std::map<std::string, Tensor> params_;
};

inline std::string layer_prefix(std::size_t layer) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "enc%02zu", layer);
  return buf;
}

// Draw order is fixed so a given seed always yields the same parameters.
inline ParameterStore init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t d = cfg.embed_dim;
  const double sigma = cfg.effective_init_sigma();
  auto trunc = [&rng, sigma](std::vector<std::size_t> shape) {
    Tensor t = Tensor::zeros(shape, true);
    for (std::size_t i = 0; i < t.size(); ++i) t(i) = rng.truncated_normal(sigma);
    return t;
  };
  auto zeros = [](std::vector<std::size_t> shape) { return Tensor::zeros(std::move(shape), true); };
  auto ones = [](std::vector<std::size_t> shape) {
    return Tensor::filled(std::move(shape), 1.0, true);
  };

  ParameterStore store;
  store.put("embed.w", trunc({cfg.patch * cfg.patch * cfg.channels, d}));
  store.put("embed.b", zeros({d}));
  store.put("token.cls", zeros({1, d}));  // aggregation token starts neutral
  if (cfg.num_det_tokens > 0) store.put("token.det", trunc({cfg.num_det_tokens, d}));
  store.put("pos", trunc({cfg.seq_len(), d}));
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const std::string p = layer_prefix(l);
    store.put(p + ".ln1.g", ones({d}));
    store.put(p + ".ln1.b", zeros({d}));
    store.put(p + ".attn.wq", trunc({d, d}));
    store.put(p + ".attn.bq", zeros({d}));
    store.put(p + ".attn.wk", trunc({d, d}));
    store.put(p + ".attn.bk", zeros({d}));
    store.put(p + ".attn.wv", trunc({d, d}));
    store.put(p + ".attn.bv", zeros({d}));
    store.put(p + ".attn.wo", trunc({d, d}));
    store.put(p + ".attn.bo", zeros({d}));
    store.put(p + ".ln2.g", ones({d}));
    store.put(p + ".ln2.b", zeros({d}));
    store.put(p + ".mlp.w1", trunc({d, cfg.mlp_dim()}));
    store.put(p + ".mlp.b1", zeros({cfg.mlp_dim()}));
    store.put(p + ".mlp.w2", trunc({cfg.mlp_dim(), d}));
    store.put(p + ".mlp.b2", zeros({d}));
  }
  store.put("head.cls.w", trunc({d, cfg.num_base_classes}));
  store.put("head.cls.b", zeros({cfg.num_base_classes}));
  if (cfg.num_novel_classes() > 0) {
    store.put("head.cls_novel.w", trunc({d, cfg.num_novel_classes()}));
    store.put("head.cls_novel.b", zeros({cfg.num_novel_classes()}));
  }
  if (cfg.num_det_tokens > 0) {
    store.put("head.det.cls.w1", trunc({d, d}));
    store.put("head.det.cls.b1", zeros({d}));
    store.put("head.det.cls.w2", trunc({d, cfg.num_classes + 1}));
    store.put("head.det.cls.b2", zeros({cfg.num_classes + 1}));
    store.put("head.det.box.w1", trunc({d, d}));
    store.put("head.det.box.b1", zeros({d}));
    store.put("head.det.box.w2", trunc({d, 4}));
    store.put("head.det.box.b2", zeros({4}));
  }
  return store;
}

inline std::size_t parameter_count(const ModelConfig& cfg) {
  Rng rng(0);
  return init_params(cfg, rng).total_scalars();
}

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_rowvec(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// Forward path.
// ---------------------------------------------------------------------------

// Non-overlapping PxP patches in grid row-major order (top-left to
// bottom-right), each flattened channel-major, as a constant N x (P*P*C)
// matrix. Gradients stop here; salience is taken at the embedding output.
inline Tensor patch_matrix(const Tensor& image, const ModelConfig& cfg) {
  if (image.ndim() != 3 || image.shape()[0] != cfg.channels || image.shape()[1] != cfg.image_h ||
      image.shape()[2] != cfg.image_w) {
    throw ShapeError("image " + detail::shape_str(image.shape()) + " does not match config " +
                     std::to_string(cfg.channels) + "x" + std::to_string(cfg.image_h) + "x" +
                     std::to_string(cfg.image_w));
  }
  const std::size_t p = cfg.patch, gw = cfg.grid_w(), gh = cfg.grid_h();
  Tensor out = Tensor::zeros({gh * gw, p * p * cfg.channels});
  for (std::size_t gr = 0; gr < gh; ++gr) {
    for (std::size_t gc = 0; gc < gw; ++gc) {
      const std::size_t row = gr * gw + gc;
      std::size_t col = 0;
      for (std::size_t ch = 0; ch < cfg.channels; ++ch) {
        for (std::size_t y = 0; y < p; ++y) {
          for (std::size_t x = 0; x < p; ++x) {
            out(row, col++) =
                image((ch * cfg.image_h + gr * p + y) * cfg.image_w + gc * p + x);
          }
        }
      }
    }
  }
  return out;
}

inline Tensor patch_embed(const Tensor& image, const ParameterStore& params,
                          const ModelConfig& cfg) {
  return linear(patch_matrix(image, cfg), params.at("embed.w"), params.at("embed.b"));
}

// z_0 = [patch; detect; class] + position embedding.
inline TokenSequence assemble_input(const Tensor& patch_tokens, const ParameterStore& params,
                                    const ModelConfig& cfg) {
  if (patch_tokens.rows() != cfg.num_patches()) {
    throw ShapeError("assemble_input: " + std::to_string(patch_tokens.rows()) +
                     " patch rows, expected " + std::to_string(cfg.num_patches()));
  }
  std::vector<Tensor> parts{patch_tokens};
  if (cfg.num_det_tokens > 0) parts.push_back(params.at("token.det"));
  parts.push_back(params.at("token.cls"));
  TokenSequence seq;
  seq.layout = TokenLayout{cfg.num_patches(), cfg.num_det_tokens};
  seq.tokens = add(concat_rows(parts), params.at("pos"));
  return seq;
}

// Observer for per-layer per-head attention rows (test instrumentation).
using AttentionObserver =
    std::function<void(std::size_t layer, std::size_t head, const Tensor& attn)>;

inline Tensor multi_head_attention(const Tensor& h, const ParameterStore& params,
                                   const std::string& prefix, const ModelConfig& cfg,
                                   std::size_t layer, const AttentionObserver* obs) {
  const Tensor q = linear(h, params.at(prefix + ".attn.wq"), params.at(prefix + ".attn.bq"));
  const Tensor k = linear(h, params.at(prefix + ".attn.wk"), params.at(prefix + ".attn.bk"));
  const Tensor v = linear(h, params.at(prefix + ".attn.wv"), params.at(prefix + ".attn.bv"));
  const std::size_t hd = cfg.head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<Tensor> contexts;
  contexts.reserve(cfg.num_heads);
  for (std::size_t head = 0; head < cfg.num_heads; ++head) {
    const std::size_t c0 = head * hd, c1 = c0 + hd;
    const Tensor qh = slice_cols(q, c0, c1);
    const Tensor kh = slice_cols(k, c0, c1);
    const Tensor vh = slice_cols(v, c0, c1);
    const Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    const Tensor attn = softmax(scores, 1);
    if (obs && *obs) (*obs)(layer, head, attn);
    contexts.push_back(matmul(attn, vh));
  }
  const Tensor ctx = cfg.num_heads == 1 ? contexts[0] : concat_cols(contexts);
  return linear(ctx, params.at(prefix + ".attn.wo"), params.at(prefix + ".attn.bo"));
}

// Pre-norm block: z' = MSA(LN(z)) + z ; z_out = MLP(LN(z')) + z'.
inline TokenSequence encoder_layer(const TokenSequence& z, const ParameterStore& params,
                                   std::size_t layer, const ModelConfig& cfg,
                                   const AttentionObserver* obs = nullptr) {
  const std::string p = layer_prefix(layer);
  const Tensor normed = layer_norm(z.tokens, params.at(p + ".ln1.g"), params.at(p + ".ln1.b"));
  const Tensor zp = add(multi_head_attention(normed, params, p, cfg, layer, obs), z.tokens);
  const Tensor normed2 = layer_norm(zp, params.at(p + ".ln2.g"), params.at(p + ".ln2.b"));
  const Tensor hidden = gelu(linear(normed2, params.at(p + ".mlp.w1"), params.at(p + ".mlp.b1")));
  const Tensor out = add(linear(hidden, params.at(p + ".mlp.w2"), params.at(p + ".mlp.b2")), zp);
  return TokenSequence{out, z.layout};
}

inline TokenSequence forward_vanilla(const Tensor& image, const ParameterStore& params,
                                     const ModelConfig& cfg,
                                     const AttentionObserver* obs = nullptr) {
  TokenSequence seq = assemble_input(patch_embed(image, params, cfg), params, cfg);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) seq = encoder_layer(seq, params, l, cfg, obs);
  return seq;
}

struct MaskedOptions {
  bool inject_residual = true;  // the first-to-last residual rewrite
};

// Mask-guided forward: patch tokens and their position rows are multiplied by
// the mask before layer 1; the input of the last layer is rewritten per patch
// to x^{L-1} + x^0 where the mask is 1 and to x^0 alone where it is 0.
inline TokenSequence forward_masked(const Tensor& image, const mask::MaskSpec& m,
                                    const ParameterStore& params, const ModelConfig& cfg,
                                    const MaskedOptions& opts = {},
                                    const AttentionObserver* obs = nullptr) {
  const std::size_t n = cfg.num_patches();
  if (m.bits.size() != n) {
    throw ShapeError("mask length " + std::to_string(m.bits.size()) + " for " + std::to_string(n) +
                     " patches");
  }
  m.validate_binary();

  const Tensor pt = patch_embed(image, params, cfg);
  std::vector<Tensor> parts{pt};
  if (cfg.num_det_tokens > 0) parts.push_back(params.at("token.det"));
  parts.push_back(params.at("token.cls"));
  std::vector<double> row_weights(cfg.seq_len(), 1.0);
  std::copy(m.bits.begin(), m.bits.end(), row_weights.begin());
  const Tensor z0 = add(rowwise_scale(concat_rows(parts), row_weights),
                        rowwise_scale(params.at("pos"), row_weights));

  TokenSequence seq;
  seq.layout = TokenLayout{n, cfg.num_det_tokens};
  seq.tokens = z0;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    if (opts.inject_residual && l + 1 == cfg.num_layers) {
      const Tensor prev_patches = slice_rows(seq.tokens, 0, n);
      const Tensor z0_patches = slice_rows(z0, 0, n);
      const Tensor rest = slice_rows(seq.tokens, n, seq.layout.total());
      seq.tokens = concat_rows({add(rowwise_scale(prev_patches, m.bits), z0_patches), rest});
    }
    seq = encoder_layer(seq, params, l, cfg, obs);
  }
  return seq;
}

// ---------------------------------------------------------------------------
// Heads.
// ---------------------------------------------------------------------------

// Logits over all classes, base columns first, read from the class token row.
inline Tensor classify_head(const TokenSequence& z, const ParameterStore& params,
                            const ModelConfig& cfg) {
  const Tensor x = slice_rows(z.tokens, z.layout.cls_index(), z.layout.cls_index() + 1);
  const Tensor base = linear(x, params.at("head.cls.w"), params.at("head.cls.b"));
  if (cfg.num_novel_classes() == 0) return base;
  const Tensor novel = linear(x, params.at("head.cls_novel.w"), params.at("head.cls_novel.b"));
  return concat_cols({base, novel});
}

struct DetectOutput {
  Tensor class_logits;  // num_det x (num_classes + 1), last column = no-object
  Tensor boxes;         // num_det x 4, sigmoid-normalized (cx, cy, w, h)
};

inline DetectOutput detect_head(const TokenSequence& z, const ParameterStore& params,
                                const ModelConfig& cfg) {
  if (cfg.num_det_tokens == 0) throw UsageError("detect_head on a model without detect tokens");
  const Tensor x = slice_rows(z.tokens, z.layout.det_begin(), z.layout.det_end());
  const Tensor ch = gelu(linear(x, params.at("head.det.cls.w1"), params.at("head.det.cls.b1")));
  const Tensor bh = gelu(linear(x, params.at("head.det.box.w1"), params.at("head.det.box.b1")));
  DetectOutput out;
  out.class_logits = linear(ch, params.at("head.det.cls.w2"), params.at("head.det.cls.b2"));
  out.boxes = sigmoid(linear(bh, params.at("head.det.box.w2"), params.at("head.det.box.b2")));
  return out;
}

// ---------------------------------------------------------------------------
// Position-embedding resampling (bicubic, Keys a=-0.5, corner-aligned).
// ---------------------------------------------------------------------------

namespace detail_bicubic {

inline double keys(double t) {
  constexpr double a = -0.5;
  const double at = std::fabs(t);
  if (at <= 1.0) return (a + 2.0) * at * at * at - (a + 3.0) * at * at + 1.0;
  if (at < 2.0) return a * at * at * at - 5.0 * a * at * at + 8.0 * a * at - 4.0 * a;
  return 0.0;
}

inline double src_coord(std::size_t dst, std::size_t new_n, std::size_t old_n) {
  if (new_n <= 1) return 0.0;
  return static_cast<double>(dst) * static_cast<double>(old_n - 1) / static_cast<double>(new_n - 1);
}

// 1-D cubic resample of a strided lane with clamped borders.
inline void resample_lane(const double* in, std::size_t in_n, std::size_t in_stride, double* out,
                          std::size_t out_n, std::size_t out_stride) {
  for (std::size_t i = 0; i < out_n; ++i) {
    const double s = src_coord(i, out_n, in_n);
    const auto base = static_cast<long>(std::floor(s));
    const double frac = s - static_cast<double>(base);
    double acc = 0.0;
    for (long k = -1; k <= 2; ++k) {
      const long idx = std::clamp<long>(base + k, 0, static_cast<long>(in_n) - 1);
      acc += keys(frac - static_cast<double>(k)) * in[static_cast<std::size_t>(idx) * in_stride];
    }
    out[i * out_stride] = acc;
  }
}

}  // namespace detail_bicubic

struct Grid {
  std::size_t h = 0;
  std::size_t w = 0;
};

// Resamples the patch-position rows from old_grid to new_grid; detect and
// class position rows are copied unchanged. Returns the new embedding.
inline Tensor interpolate_pos_embed(const ParameterStore& params, Grid old_grid, Grid new_grid) {
  const Tensor& pos = params.at("pos");
  const std::size_t d = pos.cols();
  const std::size_t n_det = params.has("token.det") ? params.at("token.det").rows() : 0;
  const std::size_t tail = n_det + 1;
  if (pos.rows() < tail || pos.rows() - tail != old_grid.h * old_grid.w) {
    throw ShapeError("pos embedding has " + std::to_string(pos.rows() - tail) +
                     " patch rows, old grid wants " + std::to_string(old_grid.h * old_grid.w));
  }
  const std::size_t new_n = new_grid.h * new_grid.w;
  Tensor out = Tensor::zeros({new_n + tail, d}, pos.requires_grad());
  std::vector<double> stage(new_grid.h * old_grid.w);
  for (std::size_t dim = 0; dim < d; ++dim) {
    // rows: (old_h x old_w) -> (new_h x old_w)
    for (std::size_t c = 0; c < old_grid.w; ++c) {
      detail_bicubic::resample_lane(pos.data().data() + c * d + dim, old_grid.h, old_grid.w * d,
                                    stage.data() + c, new_grid.h, old_grid.w);
    }
    // cols: (new_h x old_w) -> (new_h x new_w)
    for (std::size_t r = 0; r < new_grid.h; ++r) {
      detail_bicubic::resample_lane(stage.data() + r * old_grid.w, old_grid.w, 1,
                                    out.data().data() + r * new_grid.w * d + dim, new_grid.w, d);
    }
  }
  for (std::size_t r = 0; r < tail; ++r) {
    for (std::size_t j = 0; j < d; ++j) {
      out(new_n + r, j) = pos(old_grid.h * old_grid.w + r, j);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint container: magic "MGVT", format version, config block, then
// length-prefixed named f64 tensors (parameters, then auxiliary tensors such
// as optimizer moments), then named string blobs (RNG state, stage tag).
// Round-trips are bit-exact.
// ---------------------------------------------------------------------------

struct CheckpointData {
  ModelConfig config;
  ParameterStore params;
  std::map<std::string, std::vector<double>> extra;
  std::map<std::string, std::string> blobs;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_tensor_entry(ByteWriter& w, const std::string& name, const Tensor& t) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(t.ndim()));
  for (std::size_t dim : t.shape()) w.u64(dim);
  w.bytes(t.data().data(), t.size() * sizeof(double));
}

inline void save_checkpoint(const std::string& path, const CheckpointData& ckpt) {
  ByteWriter w;
  w.bytes("MGVT", 4);
  w.u32(kCheckpointVersion);
  const ModelConfig& c = ckpt.config;
  for (std::size_t v : {c.image_h, c.image_w, c.patch, c.channels, c.embed_dim, c.num_heads,
                        c.num_layers, c.num_classes, c.num_base_classes, c.num_det_tokens}) {
    w.u32(static_cast<std::uint32_t>(v));
  }
  w.f64(c.mlp_ratio);
  w.f64(c.init_sigma);
  const auto items = ckpt.params.items();
  w.u32(static_cast<std::uint32_t>(items.size()));
  for (const auto& [name, t] : items) write_tensor_entry(w, name, t);
  w.u32(static_cast<std::uint32_t>(ckpt.extra.size()));
  for (const auto& [name, v] : ckpt.extra) {
    w.str(name);
    w.u32(1);
    w.u64(v.size());
    w.bytes(v.data(), v.size() * sizeof(double));
  }
  w.u32(static_cast<std::uint32_t>(ckpt.blobs.size()));
  for (const auto& [name, blob] : ckpt.blobs) {
    w.str(name);
    w.str(blob);
  }
  w.write_file(path);
}

inline Tensor read_tensor_entry(ByteReader& r, std::string* name_out) {
  *name_out = r.str();
  const std::uint32_t ndim = r.u32();
  if (ndim > 8) throw FormatError("implausible tensor rank " + std::to_string(ndim), r.offset());
  std::vector<std::size_t> shape(ndim);
  for (auto& dv : shape) dv = static_cast<std::size_t>(r.u64());
  std::vector<double> data(detail::shape_numel(shape));
  r.bytes(data.data(), data.size() * sizeof(double));
  return Tensor::from_data(std::move(shape), std::move(data), true);
}

inline CheckpointData load_checkpoint(const std::string& path) {
  ByteReader r = ByteReader::from_file(path);
  r.expect_magic("MGVT", 4);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), r.offset() - 4);
  }
  CheckpointData ckpt;
  ModelConfig& c = ckpt.config;
  c.image_h = r.u32();
  c.image_w = r.u32();
  c.patch = r.u32();
  c.channels = r.u32();
  c.embed_dim = r.u32();
  c.num_heads = r.u32();
  c.num_layers = r.u32();
  c.num_classes = r.u32();
  c.num_base_classes = r.u32();
  c.num_det_tokens = r.u32();
  c.mlp_ratio = r.f64();
  c.init_sigma = r.f64();
  c.validate();
  const std::uint32_t n_params = r.u32();
  for (std::uint32_t i = 0; i < n_params; ++i) {
    std::string name;
    Tensor t = read_tensor_entry(r, &name);
    ckpt.params.put(name, std::move(t));
  }
  const std::uint32_t n_extra = r.u32();
  for (std::uint32_t i = 0; i < n_extra; ++i) {
    std::string name;
    Tensor t = read_tensor_entry(r, &name);
    ckpt.extra.emplace(name, t.data());
  }
  const std::uint32_t n_blobs = r.u32();
  for (std::uint32_t i = 0; i < n_blobs; ++i) {
    std::string name = r.str();
    ckpt.blobs.emplace(std::move(name), r.str());
  }
  return ckpt;
}

}  // namespace mgvit::vit
