#pragma once

// Shared building blocks for both towers: linear transforms (with an optional
// low-rank adapter slot), layer norm, multi-head attention, and the pre-norm
// transformer block.

#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "sqvlm/tensor.hpp"

namespace sqvlm {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Low-rank adapter attached to one linear transform. Effective delta is
// (alpha/rank) * b * a; b starts at zero so a fresh adapter is a no-op.
struct LoraAdapter {
  Tensor a;  // [rank, d_in]
  Tensor b;  // [d_out, rank]
  int rank = 0;
  double alpha = 0.0;
  std::string target;
  bool merged = false;
  std::vector<double> host_backup;  // host W payload captured at merge time
};

class Linear {
 public:
  Linear() = default;
  Linear(std::string name, int d_in, int d_out, std::mt19937_64& rng)
      : name_(std::move(name)), d_in_(d_in), d_out_(d_out) {
    w_ = Tensor::randn({d_out, d_in}, rng, 1.0 / std::sqrt(double(d_in)), true);
    b_ = Tensor::zeros({d_out}, true);
  }

  // x:[m,d_in] -> [m,d_out]
  Tensor forward(const Tensor& x) const {
    Tensor y = add_rowvec(matmul(x, transpose(w_)), b_);
    if (lora_ && !lora_->merged) {
      Tensor down = matmul(x, transpose(lora_->a));        // [m, r]
      Tensor up = matmul(down, transpose(lora_->b));       // [m, d_out]
      y = add(y, scale(up, lora_->alpha / lora_->rank));
    }
    return y;
  }

  void params(NamedTensors& out) const {
    out.emplace_back(name_ + ".w", w_);
    out.emplace_back(name_ + ".b", b_);
    if (lora_) {
      out.emplace_back(name_ + ".lora_a", lora_->a);
      out.emplace_back(name_ + ".lora_b", lora_->b);
    }
  }

  const std::string& name() const { return name_; }
  int d_in() const { return d_in_; }
  int d_out() const { return d_out_; }
  Tensor& weight() { return w_; }
  Tensor& bias() { return b_; }
  const std::shared_ptr<LoraAdapter>& lora() const { return lora_; }
  void set_lora(std::shared_ptr<LoraAdapter> l) { lora_ = std::move(l); }

 private:
  std::string name_;
  int d_in_ = 0, d_out_ = 0;
  Tensor w_, b_;
  std::shared_ptr<LoraAdapter> lora_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(std::string name, int width) : name_(std::move(name)) {
    gain_ = Tensor::full({width}, 1.0, true);
    bias_ = Tensor::zeros({width}, true);
  }

  Tensor forward(const Tensor& x) const { return layer_norm(x, gain_, bias_); }

  void params(NamedTensors& out) const {
    out.emplace_back(name_ + ".g", gain_);
    out.emplace_back(name_ + ".b", bias_);
  }

  Tensor& gain() { return gain_; }
  Tensor& bias() { return bias_; }

 private:
  std::string name_;
  Tensor gain_, bias_;
};

// additive causal mask: 0 on and below the diagonal, -1e30 above
inline Tensor causal_mask(int len) {
  Tensor m = Tensor::zeros({len, len});
  for (int i = 0; i < len; ++i)
    for (int j = i + 1; j < len; ++j) m.value()[i * len + j] = -1e30;
  return m;
}

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& name, int d, int heads,
                     std::mt19937_64& rng)
      : heads_(heads),
        head_dim_(d / heads),
        q_(name + ".q", d, d, rng),
        k_(name + ".k", d, d, rng),
        v_(name + ".v", d, d, rng),
        o_(name + ".o", d, d, rng) {
    if (d % heads != 0)
      throw ShapeError("width " + std::to_string(d) +
                       " not divisible by heads " + std::to_string(heads));
  }

  Tensor forward(const Tensor& x, bool causal) const {
    const int len = x.dim(0);
    Tensor q = q_.forward(x), k = k_.forward(x), v = v_.forward(x);
    Tensor mask;
    if (causal) mask = causal_mask(len);
    std::vector<Tensor> heads;
    heads.reserve(heads_);
    const double inv_sqrt_d = 1.0 / std::sqrt(double(head_dim_));
    for (int h = 0; h < heads_; ++h) {
      Tensor qh = slice_cols(q, h * head_dim_, head_dim_);
      Tensor kh = slice_cols(k, h * head_dim_, head_dim_);
      Tensor vh = slice_cols(v, h * head_dim_, head_dim_);
      Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_d);
      if (causal) scores = add(scores, mask);
      Tensor attn = softmax(scores, 1);
      heads.push_back(matmul(attn, vh));
    }
    return o_.forward(concat_cols(heads));
  }

  void params(NamedTensors& out) const {
    q_.params(out);
    k_.params(out);
    v_.params(out);
    o_.params(out);
  }
  void linears(std::vector<Linear*>& out) {
    out.push_back(&q_);
    out.push_back(&k_);
    out.push_back(&v_);
    out.push_back(&o_);
  }

 private:
  int heads_ = 0, head_dim_ = 0;
  Linear q_, k_, v_, o_;
};

// pre-norm block: x += attn(ln1(x)); x += fc2(gelu(fc1(ln2(x))))
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(const std::string& name, int d, int heads,
                   std::mt19937_64& rng)
      : ln1_(name + ".ln1", d),
        attn_(name + ".attn", d, heads, rng),
        ln2_(name + ".ln2", d),
        fc1_(name + ".mlp.fc1", d, 4 * d, rng),
        fc2_(name + ".mlp.fc2", 4 * d, d, rng) {}

  Tensor forward(const Tensor& x, bool causal) const {
    Tensor h = add(x, attn_.forward(ln1_.forward(x), causal));
    Tensor m = fc2_.forward(gelu(fc1_.forward(ln2_.forward(h))));
    return add(h, m);
  }

  void params(NamedTensors& out) const {
    ln1_.params(out);
    attn_.params(out);
    ln2_.params(out);
    fc1_.params(out);
    fc2_.params(out);
  }
  void linears(std::vector<Linear*>& out) {
    attn_.linears(out);
    out.push_back(&fc1_);
    out.push_back(&fc2_);
  }

 private:
  LayerNorm ln1_;
  MultiHeadAttention attn_;
  LayerNorm ln2_;
  Linear fc1_, fc2_;
};

}  // namespace sqvlm
