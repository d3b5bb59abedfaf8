#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "mgvit/vit.hpp"
#include "support/gradcheck.hpp"

using namespace mgvit;
using testsupport::gradcheck;
using testsupport::random_tensor;

namespace {

vit::ModelConfig tiny_config() {
  vit::ModelConfig cfg;
  cfg.image_h = cfg.image_w = 4;
  cfg.patch = 2;
  cfg.channels = 1;
  cfg.embed_dim = 6;
  cfg.num_heads = 2;
  cfg.num_layers = 2;
  cfg.num_classes = 3;
  cfg.num_base_classes = 3;
  return cfg;
}

Tensor random_image(const vit::ModelConfig& cfg, Rng& rng) {
  Tensor img = Tensor::zeros({cfg.channels, cfg.image_h, cfg.image_w});
  for (std::size_t i = 0; i < img.size(); ++i) img(i) = rng.uniform();
  return img;
}

void zero_out(vit::ParameterStore& params, const std::string& name) {
  auto& d = params.at(name).data();
  std::fill(d.begin(), d.end(), 0.0);
}

}  // namespace

TEST_CASE("patch_embed layout and projection") {
  const vit::ModelConfig cfg = tiny_config();
  Rng rng(3);
  vit::ParameterStore params = vit::init_params(cfg, rng);

  // patch ordering on a 4x4 single-channel image with P=2: top-left,
  // top-right, bottom-left, bottom-right
  Tensor img = Tensor::zeros({1, 4, 4});
  for (std::size_t y = 0; y < 4; ++y) {
    for (std::size_t x = 0; x < 4; ++x) img(y * 4 + x) = static_cast<double>(10 * y + x);
  }
  const Tensor pm = vit::patch_matrix(img, cfg);
  REQUIRE(pm.rows() == 4);
  REQUIRE(pm.data() == std::vector<double>{0, 1, 10, 11, 2, 3, 12, 13,
                                           20, 21, 30, 31, 22, 23, 32, 33});

  const Tensor zero_tokens = vit::patch_embed(Tensor::zeros({1, 4, 4}), params, cfg);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < cfg.embed_dim; ++j) {
      REQUIRE(zero_tokens(i, j) == params.at("embed.b")(j));
    }
  }

  // direct extraction oracle on a random image
  const Tensor ri = random_image(cfg, rng);
  const Tensor tokens = vit::patch_embed(ri, params, cfg);
  const Tensor& w = params.at("embed.w");
  for (std::size_t gr = 0; gr < 2; ++gr) {
    for (std::size_t gc = 0; gc < 2; ++gc) {
      std::vector<double> flat;
      for (std::size_t y = 0; y < 2; ++y) {
        for (std::size_t x = 0; x < 2; ++x) {
          flat.push_back(ri((gr * 2 + y) * 4 + gc * 2 + x));
        }
      }
      for (std::size_t j = 0; j < cfg.embed_dim; ++j) {
        double acc = params.at("embed.b")(j);
        for (std::size_t k = 0; k < flat.size(); ++k) acc += flat[k] * w(k, j);
        REQUIRE(tokens(gr * 2 + gc, j) == Catch::Approx(acc).margin(1e-12));
      }
    }
  }

  REQUIRE_THROWS_AS(vit::patch_embed(Tensor::zeros({1, 8, 8}), params, cfg), ShapeError);
}

TEST_CASE("assemble_input layout and position embedding") {
  vit::ModelConfig cfg = tiny_config();
  Rng rng(5);
  vit::ParameterStore params = vit::init_params(cfg, rng);
  const Tensor tokens = random_tensor({cfg.num_patches(), cfg.embed_dim}, rng);

  const vit::TokenSequence seq = vit::assemble_input(tokens, params, cfg);
  REQUIRE(seq.tokens.rows() == cfg.num_patches() + 1);
  REQUIRE(seq.layout.cls_index() == cfg.num_patches());

  zero_out(params, "pos");
  const vit::TokenSequence plain = vit::assemble_input(tokens, params, cfg);
  for (std::size_t i = 0; i < cfg.num_patches(); ++i) {
    for (std::size_t j = 0; j < cfg.embed_dim; ++j) {
      REQUIRE(plain.tokens(i, j) == tokens(i, j));
    }
  }
  for (std::size_t j = 0; j < cfg.embed_dim; ++j) {
    REQUIRE(plain.tokens(cfg.num_patches(), j) == params.at("token.cls")(0, j));
  }
}

TEST_CASE("sequence length matches the N+1+100 layout of the reference setup") {
  vit::ModelConfig cfg;
  cfg.image_h = cfg.image_w = 56;  // 14x14 grid of P=4 -> N=196
  cfg.patch = 4;
  cfg.channels = 1;
  cfg.embed_dim = 8;
  cfg.num_heads = 1;
  cfg.num_layers = 0;
  cfg.num_classes = 2;
  cfg.num_base_classes = 2;
  cfg.num_det_tokens = 100;
  REQUIRE(cfg.num_patches() == 196);
  REQUIRE(cfg.seq_len() == 297);
  Rng rng(1);
  vit::ParameterStore params = vit::init_params(cfg, rng);
  REQUIRE(params.at("pos").rows() == 297);
}

TEST_CASE("encoder_layer with zero blocks is the identity") {
  vit::ModelConfig cfg = tiny_config();
  Rng rng(9);
  vit::ParameterStore params = vit::init_params(cfg, rng);
  for (const std::string p : {"enc00", "enc01"}) {
    for (const std::string leaf :
         {".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo", ".mlp.w1", ".mlp.w2"}) {
      zero_out(params, p + leaf);
    }
  }
  vit::TokenSequence seq;
  seq.layout = vit::TokenLayout{cfg.num_patches(), 0};
  seq.tokens = random_tensor({cfg.seq_len(), cfg.embed_dim}, rng);
  const vit::TokenSequence out = vit::encoder_layer(seq, params, 0, cfg);
  REQUIRE(out.tokens.data() == seq.tokens.data());
}

TEST_CASE("single-token single-head attention reduces to the V path") {
  vit::ModelConfig cfg = tiny_config();
  cfg.num_heads = 1;
  Rng rng(15);
  vit::ParameterStore params = vit::init_params(cfg, rng);
  const Tensor h = random_tensor({1, cfg.embed_dim}, rng);

  double attn_value = -1.0;
  vit::AttentionObserver obs = [&](std::size_t, std::size_t, const Tensor& a) {
    REQUIRE(a.rows() == 1);
    attn_value = a(0, 0);
  };
  const Tensor out = vit::multi_head_attention(h, params, "enc00", cfg, 0, &obs);
  REQUIRE(attn_value == 1.0);
  const Tensor direct = vit::linear(vit::linear(h, params.at("enc00.attn.wv"), params.at("enc00.attn.bv")),
                                    params.at("enc00.attn.wo"), params.at("enc00.attn.bo"));
  REQUIRE(out.data() == direct.data());
}

TEST_CASE("attention rows sum to one at every layer and head") {
  vit::ModelConfig cfg = tiny_config();
  Rng rng(21);
  vit::ParameterStore params = vit::init_params(cfg, rng);
  const Tensor img = random_image(cfg, rng);
  std::size_t seen = 0;
  vit::AttentionObserver obs = [&](std::size_t, std::size_t, const Tensor& a) {
    ++seen;
    for (std::size_t r = 0; r < a.rows(); ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < a.cols(); ++c) total += a(r, c);
      REQUIRE(total == Catch::Approx(1.0).margin(1e-12));
    }
  };
  (void)vit::forward_vanilla(img, params, cfg, &obs);
  REQUIRE(seen == cfg.num_layers * cfg.num_heads);
}

TEST_CASE("permuting patch rows permutes outputs when positions are zero") {
  vit::ModelConfig cfg = tiny_config();
  Rng rng(33);
  vit::ParameterStore params = vit::init_params(cfg, rng);
  zero_out(params, "pos");
  const std::size_t n = cfg.num_patches(), d = cfg.embed_dim;
  const Tensor patches = random_tensor({n, d}, rng);

  auto encode = [&](const Tensor& pt) {
    vit::TokenSequence seq = vit::assemble_input(pt, params, cfg);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) seq = vit::encoder_layer(seq, params, l, cfg);
    return seq.tokens;
  };
  const Tensor base = encode(patches);

  const std::vector<std::size_t> perm{2, 0, 3, 1};
  Tensor permuted = Tensor::zeros({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) permuted(i, j) = patches(perm[i], j);
  }
  const Tensor out = encode(permuted);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      REQUIRE(out(i, j) == Catch::Approx(base(perm[i], j)).margin(1e-12));
    }
  }
  for (std::size_t j = 0; j < d; ++j) {
    REQUIRE(out(n, j) == Catch::Approx(base(n, j)).margin(1e-12));
  }
}

TEST_CASE("forward_vanilla with zero layers returns the assembled input") {
  vit::ModelConfig cfg = tiny_config();
  cfg.num_layers = 0;
  Rng rng(41);
  vit::ParameterStore params = vit::init_params(cfg, rng);
  const Tensor img = random_image(cfg, rng);
  const vit::TokenSequence z = vit::forward_vanilla(img, params, cfg);
  const vit::TokenSequence z0 = vit::assemble_input(vit::patch_embed(img, params, cfg), params, cfg);
  REQUIRE(z.tokens.data() == z0.tokens.data());
}

TEST_CASE("forward_vanilla is deterministic") {
  const vit::ModelConfig cfg = tiny_config();
  Rng rng(43);
  vit::ParameterStore params = vit::init_params(cfg, rng);
  const Tensor img = random_image(cfg, rng);
  const auto a = vit::forward_vanilla(img, params, cfg).tokens.data();
  const auto b = vit::forward_vanilla(img, params, cfg).tokens.data();
  REQUIRE(a == b);
}

TEST_CASE("all-ones mask without residual injection equals the vanilla path") {
  const vit::ModelConfig cfg = tiny_config();
  Rng rng(47);
  vit::ParameterStore params = vit::init_params(cfg, rng);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor img = random_image(cfg, rng);
    const Tensor vanilla = vit::forward_vanilla(img, params, cfg).tokens;
    const mask::MaskSpec ones = mask::MaskSpec::all_ones(cfg.num_patches());
    const Tensor masked = vit::forward_masked(img, ones, params, cfg, {false}).tokens;
    for (std::size_t i = 0; i < vanilla.size(); ++i) {
      REQUIRE(std::fabs(vanilla(i) - masked(i)) < 1e-12);
    }
  }
}

TEST_CASE("forward_masked matches a hand-stepped two-layer composition") {
  const vit::ModelConfig cfg = tiny_config();  // two layers
  Rng rng(53);
  vit::ParameterStore params = vit::init_params(cfg, rng);
  const Tensor img = random_image(cfg, rng);
  const std::size_t n = cfg.num_patches();

  auto hand_step = [&](const mask::MaskSpec& m) {
    // Eq. 7: mask patch tokens and their position rows
    const Tensor pt = vit::patch_embed(img, params, cfg);
    std::vector<double> w(cfg.seq_len(), 1.0);
    std::copy(m.bits.begin(), m.bits.end(), w.begin());
    const Tensor z0 = add(rowwise_scale(concat_rows({pt, params.at("token.cls")}), w),
                          rowwise_scale(params.at("pos"), w));
    vit::TokenSequence seq{z0, vit::TokenLayout{n, 0}};
    seq = vit::encoder_layer(seq, params, 0, cfg);
    // Eq. 8: rewrite the last-layer input per patch
    Tensor rewired = Tensor::zeros({cfg.seq_len(), cfg.embed_dim});
    for (std::size_t i = 0; i < cfg.seq_len(); ++i) {
      for (std::size_t j = 0; j < cfg.embed_dim; ++j) {
        if (i < n) {
          rewired(i, j) = (m.bits[i] == 1.0 ? seq.tokens(i, j) : 0.0) + z0(i, j);
        } else {
          rewired(i, j) = seq.tokens(i, j);
        }
      }
    }
    vit::TokenSequence last{rewired, seq.layout};
    return vit::encoder_layer(last, params, 1, cfg).tokens;
  };

  mask::MaskSpec first_only;
  first_only.bits.assign(n, 0.0);
  first_only.bits[0] = 1.0;
  first_only.k = 1;
  for (const mask::MaskSpec& m :
       {first_only, mask::MaskSpec::all_ones(n), [&] {
          mask::MaskSpec zeros;
          zeros.bits.assign(n, 0.0);
          zeros.k = 0;
          return zeros;
        }()}) {
    if (m.popcount() == 0) {
      // all-zeros: the Eq. 8 else-branch everywhere; z0 patch rows are zeroed
      const Tensor pt = vit::patch_embed(img, params, cfg);
      std::vector<double> w(cfg.seq_len(), 1.0);
      std::copy(m.bits.begin(), m.bits.end(), w.begin());
      const Tensor z0 = add(rowwise_scale(concat_rows({pt, params.at("token.cls")}), w),
                            rowwise_scale(params.at("pos"), w));
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < cfg.embed_dim; ++j) REQUIRE(z0(i, j) == 0.0);
      }
    }
    const Tensor direct = hand_step(m);
    const Tensor via_forward = vit::forward_masked(img, m, params, cfg).tokens;
    for (std::size_t i = 0; i < direct.size(); ++i) {
      REQUIRE(via_forward(i) == Catch::Approx(direct(i)).margin(1e-12));
    }
  }
}

TEST_CASE("forward_masked validates the mask") {
  const vit::ModelConfig cfg = tiny_config();
  Rng rng(59);
  vit::ParameterStore params = vit::init_params(cfg, rng);
  const Tensor img = random_image(cfg, rng);
  mask::MaskSpec short_mask;
  short_mask.bits.assign(cfg.num_patches() - 1, 1.0);
  REQUIRE_THROWS_AS(vit::forward_masked(img, short_mask, params, cfg), ShapeError);
  mask::MaskSpec fractional = mask::MaskSpec::all_ones(cfg.num_patches());
  fractional.bits[1] = 0.5;
  REQUIRE_THROWS_AS(vit::forward_masked(img, fractional, params, cfg), InputError);
}

TEST_CASE("classify_head reads exactly the class token row") {
  const vit::ModelConfig cfg = tiny_config();
  Rng rng(61);
  vit::ParameterStore params = vit::init_params(cfg, rng);
  const Tensor img = random_image(cfg, rng);
  const vit::TokenSequence z = vit::forward_vanilla(img, params, cfg);
  const Tensor logits = vit::classify_head(z, params, cfg);
  REQUIRE(logits.cols() == cfg.num_classes);

  vit::TokenSequence perturbed{Tensor::from_data(z.tokens.shape(), z.tokens.data()), z.layout};
  for (std::size_t i = 0; i < cfg.num_patches(); ++i) perturbed.tokens(i, 0) += 17.0;
  const Tensor logits2 = vit::classify_head(perturbed, params, cfg);
  REQUIRE(logits.data() == logits2.data());

  vit::ParameterStore zero_head = params.clone();
  zero_out(zero_head, "head.cls.w");
  const Tensor bias_logits = vit::classify_head(z, zero_head, cfg);
  for (std::size_t j = 0; j < cfg.num_classes; ++j) {
    REQUIRE(bias_logits(0, j) == zero_head.at("head.cls.b")(j));
  }
}

TEST_CASE("classification loss reaches the patch embeddings through attention") {
  const vit::ModelConfig cfg = tiny_config();
  Rng rng(67);
  vit::ParameterStore params = vit::init_params(cfg, rng);
  const Tensor img = random_image(cfg, rng);
  Tape tape;
  Tensor embedded = vit::patch_embed(img, params, cfg);
  embedded.set_requires_grad(true);
  vit::TokenSequence seq = vit::assemble_input(embedded, params, cfg);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) seq = vit::encoder_layer(seq, params, l, cfg);
  tape.backward(cross_entropy(vit::classify_head(seq, params, cfg), {1}));
  double norm = 0.0;
  for (double g : embedded.grad()) norm += std::fabs(g);
  REQUIRE(norm > 0.0);
}

TEST_CASE("detect_head per-token structure and shapes") {
  vit::ModelConfig cfg = tiny_config();
  cfg.num_det_tokens = 8;
  cfg.num_classes = 1;
  cfg.num_base_classes = 1;
  Rng rng(71);
  vit::ParameterStore params = vit::init_params(cfg, rng);
  const Tensor img = random_image(cfg, rng);
  const vit::TokenSequence z = vit::forward_vanilla(img, params, cfg);
  const vit::DetectOutput out = vit::detect_head(z, params, cfg);
  REQUIRE(out.class_logits.rows() == 8);
  REQUIRE(out.class_logits.cols() == 2);
  REQUIRE(out.boxes.rows() == 8);
  REQUIRE(out.boxes.cols() == 4);
  for (std::size_t i = 0; i < out.boxes.size(); ++i) {
    REQUIRE(out.boxes(i) > 0.0);
    REQUIRE(out.boxes(i) < 1.0);
  }

  // row i depends only on detect-token row i
  vit::TokenSequence tweaked{Tensor::from_data(z.tokens.shape(), z.tokens.data()), z.layout};
  const std::size_t row = z.layout.det_begin() + 3;
  for (std::size_t j = 0; j < cfg.embed_dim; ++j) tweaked.tokens(row, j) += 1.0;
  const vit::DetectOutput out2 = vit::detect_head(tweaked, params, cfg);
  for (std::size_t t = 0; t < 8; ++t) {
    for (std::size_t j = 0; j < 2; ++j) {
      if (t == 3) continue;
      REQUIRE(out2.class_logits(t, j) == out.class_logits(t, j));
    }
  }
  for (std::size_t j = 0; j < 2; ++j) {
    REQUIRE(out2.class_logits(3, j) != out.class_logits(3, j));
  }

  // zero weights: every token yields sigmoid(bias)
  vit::ParameterStore zeroed = params.clone();
  zero_out(zeroed, "head.det.box.w1");
  zero_out(zeroed, "head.det.box.w2");
  const vit::DetectOutput zb = vit::detect_head(z, zeroed, cfg);
  for (std::size_t t = 0; t < 8; ++t) {
    for (std::size_t j = 0; j < 4; ++j) {
      const double b = zeroed.at("head.det.box.b2")(j);
      REQUIRE(zb.boxes(t, j) == Catch::Approx(1.0 / (1.0 + std::exp(-b))).margin(1e-15));
    }
  }

  vit::ModelConfig no_det = tiny_config();
  Rng rng2(1);
  vit::ParameterStore p2 = vit::init_params(no_det, rng2);
  const vit::TokenSequence z2 = vit::forward_vanilla(img, p2, no_det);
  REQUIRE_THROWS_AS(vit::detect_head(z2, p2, no_det), UsageError);
}

namespace {

// Independent direct (non-separable) bicubic evaluation with the same kernel
// and corner-aligned mapping.
double reference_bicubic(const std::vector<double>& grid, std::size_t oh, std::size_t ow,
                         std::size_t nh, std::size_t nw, std::size_t r, std::size_t c) {
  auto kernel = [](double t) {
    const double a = -0.5, at = std::fabs(t);
    if (at <= 1.0) return (a + 2) * at * at * at - (a + 3) * at * at + 1.0;
    if (at < 2.0) return a * at * at * at - 5 * a * at * at + 8 * a * at - 4 * a;
    return 0.0;
  };
  const double sy = nh <= 1 ? 0.0 : static_cast<double>(r) * (oh - 1.0) / (nh - 1.0);
  const double sx = nw <= 1 ? 0.0 : static_cast<double>(c) * (ow - 1.0) / (nw - 1.0);
  const long by = static_cast<long>(std::floor(sy)), bx = static_cast<long>(std::floor(sx));
  double acc = 0.0;
  for (long dy = -1; dy <= 2; ++dy) {
    for (long dx = -1; dx <= 2; ++dx) {
      const long yy = std::clamp<long>(by + dy, 0, static_cast<long>(oh) - 1);
      const long xx = std::clamp<long>(bx + dx, 0, static_cast<long>(ow) - 1);
      acc += kernel(sy - static_cast<double>(by + dy)) * kernel(sx - static_cast<double>(bx + dx)) *
             grid[static_cast<std::size_t>(yy) * ow + static_cast<std::size_t>(xx)];
    }
  }
  return acc;
}

}  // namespace

TEST_CASE("interpolate_pos_embed") {
  vit::ModelConfig cfg;
  cfg.image_h = cfg.image_w = 4;
  cfg.patch = 2;
  cfg.channels = 1;
  cfg.embed_dim = 3;
  cfg.num_heads = 1;
  cfg.num_layers = 1;
  cfg.num_classes = 2;
  cfg.num_base_classes = 2;
  Rng rng(77);
  vit::ParameterStore params = vit::init_params(cfg, rng);

  SECTION("identity resample is bit-exact") {
    const Tensor out = vit::interpolate_pos_embed(params, {2, 2}, {2, 2});
    REQUIRE(out.data() == params.at("pos").data());
  }

  SECTION("constant fields stay constant") {
    auto& pos = params.at("pos").data();
    std::fill(pos.begin(), pos.end(), 0.375);
    const Tensor out = vit::interpolate_pos_embed(params, {2, 2}, {5, 3});
    REQUIRE(out.rows() == 5 * 3 + 1);
    for (std::size_t i = 0; i < out.size(); ++i) {
      REQUIRE(out(i) == Catch::Approx(0.375).margin(1e-12));
    }
  }

  SECTION("2x2 to 4x4 ramp matches the reference bicubic") {
    Tensor& pos = params.at("pos");
    std::vector<double> field(4);
    for (std::size_t r = 0; r < 2; ++r) {
      for (std::size_t c = 0; c < 2; ++c) {
        field[r * 2 + c] = 0.25 + 0.5 * static_cast<double>(r) + 0.125 * static_cast<double>(c);
        for (std::size_t j = 0; j < cfg.embed_dim; ++j) {
          pos(r * 2 + c, j) = field[r * 2 + c] * static_cast<double>(j + 1);
        }
      }
    }
    const Tensor out = vit::interpolate_pos_embed(params, {2, 2}, {4, 4});
    for (std::size_t r = 0; r < 4; ++r) {
      for (std::size_t c = 0; c < 4; ++c) {
        const double expect = reference_bicubic(field, 2, 2, 4, 4, r, c);
        for (std::size_t j = 0; j < cfg.embed_dim; ++j) {
          REQUIRE(out(r * 4 + c, j) ==
                  Catch::Approx(expect * static_cast<double>(j + 1)).margin(1e-9));
        }
      }
    }
    // class position row is copied unchanged
    for (std::size_t j = 0; j < cfg.embed_dim; ++j) {
      REQUIRE(out(16, j) == params.at("pos")(4, j));
    }
  }

  SECTION("grid mismatch is rejected") {
    REQUIRE_THROWS_AS(vit::interpolate_pos_embed(params, {3, 3}, {4, 4}), ShapeError);
  }
}

TEST_CASE("parameter count is a pure function of the config") {
  const vit::ModelConfig cfg = tiny_config();
  REQUIRE(vit::parameter_count(cfg) == vit::parameter_count(cfg));
  Rng a(1), b(2);
  REQUIRE(vit::init_params(cfg, a).total_scalars() == vit::init_params(cfg, b).total_scalars());
}

TEST_CASE("checkpoint round-trips bit-exactly") {
  vit::ModelConfig cfg = tiny_config();
  cfg.num_det_tokens = 2;
  Rng rng(83);
  vit::CheckpointData ckpt;
  ckpt.config = cfg;
  ckpt.params = vit::init_params(cfg, rng);
  ckpt.extra["opt.step"] = {7.0};
  ckpt.blobs["stage"] = "stage1";

  const std::string path = (std::filesystem::temp_directory_path() / "mgvit_test.ckpt").string();
  vit::save_checkpoint(path, ckpt);
  const vit::CheckpointData loaded = vit::load_checkpoint(path);
  REQUIRE(loaded.config.embed_dim == cfg.embed_dim);
  REQUIRE(loaded.config.num_det_tokens == 2);
  REQUIRE(loaded.params.count() == ckpt.params.count());
  for (const auto& [name, t] : ckpt.params.items()) {
    REQUIRE(loaded.params.at(name).shape() == t.shape());
    REQUIRE(loaded.params.at(name).data() == t.data());
  }
  REQUIRE(loaded.extra.at("opt.step") == std::vector<double>{7.0});
  REQUIRE(loaded.blobs.at("stage") == "stage1");

  // corrupt the magic: rejection points at byte 0
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.put('X');
  }
  try {
    (void)vit::load_checkpoint(path);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    REQUIRE(e.offset == 0);
  }
  std::filesystem::remove(path);
}

TEST_CASE("full toy model gradients match finite differences", "[gradmodel]") {
  vit::ModelConfig cfg;
  cfg.image_h = cfg.image_w = 4;
  cfg.patch = 2;
  cfg.channels = 1;
  cfg.embed_dim = 8;
  cfg.num_heads = 2;
  cfg.num_layers = 2;
  cfg.num_classes = 3;
  cfg.num_base_classes = 3;
  Rng rng(91);
  vit::ParameterStore params = vit::init_params(cfg, rng);
  const Tensor img = random_image(cfg, rng);

  auto loss_fn = [&](const Tensor&) {
    const vit::TokenSequence z = vit::forward_vanilla(img, params, cfg);
    return cross_entropy(vit::classify_head(z, params, cfg), {2}, 0.1);
  };
  for (auto& [name, tensor] : params.items()) {
    params.zero_grads();
    const auto res = gradcheck(loss_fn, tensor);
    CAPTURE(name, res.worst_index, res.analytic_at_worst, res.numeric_at_worst);
    REQUIRE(res.max_rel_error < 1e-4);
  }
}
