#pragma once

// Patch-embedding vision encoder, the EM prototype extractor, and the
// two-layer projector into language-model width. Pipeline order is fixed:
// encode -> em_cluster -> enhance_tokens -> project.

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "sqvlm/nn.hpp"
#include "sqvlm/tensor.hpp"

namespace sqvlm {

struct VisionConfig {
  int image_size = 32;
  int patch_size = 8;
  int channels = 3;
  int d_vision = 64;
  int n_layers = 2;
  int n_heads = 4;
  int prototypes = 8;  // K cluster centers
  int em_iters = 2;    // T
  int d_model = 64;    // language-model width the projector maps into

  void validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
      throw ConfigError("image_size " + std::to_string(image_size) +
                        " must be a positive multiple of patch_size " +
                        std::to_string(patch_size));
    if (d_vision % n_heads != 0)
      throw ConfigError("d_vision must be divisible by n_heads");
    if (em_iters < 1) throw ConfigError("em_iters must be >= 1");
    if (prototypes < 1) throw ConfigError("prototypes must be >= 1");
    if (channels < 1) throw ConfigError("channels must be >= 1");
  }

  int grid() const { return image_size / patch_size; }
  int tokens() const { return grid() * grid(); }
  int patch_dim() const { return patch_size * patch_size * channels; }
};

struct ImageTokens {
  Tensor z;               // [L_v, d_vision]
  bool enhanced = false;  // true once the prototype redistribution ran
};

// K learnable cluster centers plus the q/k/v/z transforms around them.
// k and v outputs pass through a normalization layer; q does not.
class PrototypeBank {
 public:
  PrototypeBank() = default;
  PrototypeBank(const std::string& name, int k, int d, std::mt19937_64& rng)
      : c_(Tensor::randn({k, d}, rng, 1.0 / std::sqrt(double(d)), true)),
        q_(name + ".q", d, d, rng),
        k_(name + ".k", d, d, rng),
        v_(name + ".v", d, d, rng),
        z_(name + ".z", d, d, rng),
        k_norm_(name + ".k_norm", d),
        v_norm_(name + ".v_norm", d),
        name_(name) {
    // the redistribution branch starts near the identity
    for (auto& x : z_.weight().value()) x *= 0.01;
  }

  Tensor& centers() { return c_; }
  const Tensor& centers() const { return c_; }
  Linear& q() { return q_; }
  Linear& k() { return k_; }
  Linear& v() { return v_; }
  Linear& z() { return z_; }
  LayerNorm& k_norm() { return k_norm_; }
  LayerNorm& v_norm() { return v_norm_; }
  const Linear& q() const { return q_; }
  const Linear& k() const { return k_; }
  const Linear& v() const { return v_; }
  const Linear& z() const { return z_; }
  const LayerNorm& k_norm() const { return k_norm_; }
  const LayerNorm& v_norm() const { return v_norm_; }

  void params(NamedTensors& out) const {
    out.emplace_back(name_ + ".c", c_);
    q_.params(out);
    k_.params(out);
    v_.params(out);
    z_.params(out);
    k_norm_.params(out);
    v_norm_.params(out);
  }

 private:
  Tensor c_;  // [K, d_vision]
  Linear q_, k_, v_, z_;
  LayerNorm k_norm_, v_norm_;
  std::string name_;
};

// flattens non-overlapping patches of a [S,S,C] pixel tensor, row-major
// within each patch
inline Tensor extract_patches(const Tensor& pixels, const VisionConfig& cfg) {
  if (pixels.ndim() != 3 || pixels.dim(0) != cfg.image_size ||
      pixels.dim(1) != cfg.image_size || pixels.dim(2) != cfg.channels)
    throw ShapeError("expected pixels [" + std::to_string(cfg.image_size) + "," +
                     std::to_string(cfg.image_size) + "," +
                     std::to_string(cfg.channels) + "], got " +
                     shape_str(pixels.shape()));
  const int g = cfg.grid(), p = cfg.patch_size, c = cfg.channels;
  const int s = cfg.image_size;
  Tensor out = Tensor::zeros({cfg.tokens(), cfg.patch_dim()});
  for (int pr = 0; pr < g; ++pr)
    for (int pc = 0; pc < g; ++pc) {
      const int tok = pr * g + pc;
      double* dst = out.value().data() +
                    static_cast<std::size_t>(tok) * cfg.patch_dim();
      for (int y = 0; y < p; ++y)
        for (int x = 0; x < p; ++x)
          for (int ch = 0; ch < c; ++ch)
            *dst++ = pixels.value()[((pr * p + y) * s + (pc * p + x)) * c + ch];
    }
  return out;
}

class VisionTower {
 public:
  VisionTower() = default;
  VisionTower(const VisionConfig& cfg, std::mt19937_64& rng)
      : cfg_(cfg), patch_embed_("vision.patch", cfg.patch_dim(), cfg.d_vision, rng) {
    cfg_.validate();
    for (int i = 0; i < cfg.n_layers; ++i)
      blocks_.emplace_back("vision.blocks." + std::to_string(i), cfg.d_vision,
                           cfg.n_heads, rng);
    proto_ = PrototypeBank("vision.proto", cfg.prototypes, cfg.d_vision, rng);
    proj_fc1_ = Linear("vision.proj.fc1", cfg.d_vision, cfg.d_model, rng);
    proj_fc2_ = Linear("vision.proj.fc2", cfg.d_model, cfg.d_model, rng);
  }

  const VisionConfig& config() const { return cfg_; }
  PrototypeBank& proto() { return proto_; }
  const PrototypeBank& proto() const { return proto_; }
  Linear& patch_embed() { return patch_embed_; }
  Linear& proj_fc1() { return proj_fc1_; }
  Linear& proj_fc2() { return proj_fc2_; }

  // patch flatten -> linear embed -> n_layers of pre-norm attention + MLP
  ImageTokens encode_image(const Tensor& pixels) const {
    Tensor z = patch_embed_.forward(extract_patches(pixels, cfg_));
    for (const auto& blk : blocks_) z = blk.forward(z, /*causal=*/false);
    return ImageTokens{z, false};
  }

  // Iterative EM over the token embeddings. The E-step softmax runs over the
  // token axis, so each cluster's weights over tokens sum to 1 and the M-step
  // yields convex combinations of token values. bank.c is the trainable
  // initialization; forward passes never overwrite it.
  std::pair<Tensor, Tensor> em_cluster(const ImageTokens& tokens) const {
    if (tokens.enhanced)
      throw StateError("em_cluster requires un-enhanced tokens");
    Tensor kz = proto_.k_norm().forward(proto_.k().forward(tokens.z));
    Tensor vz = proto_.v_norm().forward(proto_.v().forward(tokens.z));
    Tensor kzt = transpose(kz);
    Tensor c = proto_.centers();
    Tensor m;
    for (int t = 0; t < cfg_.em_iters; ++t) {
      m = softmax(matmul(proto_.q().forward(c), kzt), 1);  // [K, L_v]
      c = matmul(m, vz);                                   // [K, d_vision]
    }
    return {m, c};
  }

  // Eq-style redistribution: each token gains z( mean_j cos(c_j, z_i) c_j ).
  ImageTokens enhance_tokens(const ImageTokens& tokens, const Tensor& c_out) const {
    if (tokens.enhanced)
      throw StateError("enhance_tokens requires un-enhanced tokens");
    Tensor sim = cosine_matrix(tokens.z, c_out);  // [L_v, K]
    Tensor pooled = scale(matmul(sim, c_out), 1.0 / cfg_.prototypes);
    Tensor z2 = add(tokens.z, proto_.z().forward(pooled));
    return ImageTokens{z2, true};
  }

  // two-layer projector into d_model; only valid after enhancement
  Tensor project(const ImageTokens& tokens) const {
    if (!tokens.enhanced)
      throw StateError(
          "project called before enhance_tokens (pipeline order is encode -> "
          "em_cluster -> enhance_tokens -> project)");
    return proj_fc2_.forward(gelu(proj_fc1_.forward(tokens.z)));
  }

  // full pipeline: pixels -> H_v
  Tensor forward(const Tensor& pixels) const {
    ImageTokens toks = encode_image(pixels);
    auto [m, c_out] = em_cluster(toks);
    (void)m;
    return project(enhance_tokens(toks, c_out));
  }

  void params(NamedTensors& out) const {
    patch_embed_.params(out);
    for (const auto& blk : blocks_) blk.params(out);
    proto_.params(out);
    proj_fc1_.params(out);
    proj_fc2_.params(out);
  }

  void linears(std::vector<Linear*>& out) {
    for (auto& blk : blocks_) blk.linears(out);
  }

 private:
  VisionConfig cfg_;
  Linear patch_embed_;
  std::vector<TransformerBlock> blocks_;
  PrototypeBank proto_;
  Linear proj_fc1_, proj_fc2_;
};

}  // namespace sqvlm
