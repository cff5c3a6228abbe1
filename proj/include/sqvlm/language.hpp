#pragma once

// Small causal decoder over a mixed sequence of projected image tokens and
// text tokens. Image tokens are spliced in at the placeholder position and
// occupy sequential positions like text.

#include <random>
#include <string>
#include <vector>

#include "sqvlm/nn.hpp"
#include "sqvlm/tensor.hpp"
#include "sqvlm/vocab.hpp"

namespace sqvlm {

struct LMConfig {
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int vocab_size = Vocab::kSize;
  int max_seq_len = 512;

  void validate() const {
    if (d_model % n_heads != 0)
      throw ConfigError("d_model must be divisible by n_heads");
    if (vocab_size < Vocab::kSize)
      throw ConfigError("vocab_size must cover the byte vocabulary plus specials (" +
                        std::to_string(Vocab::kSize) + ")");
    if (max_seq_len < 2) throw ConfigError("max_seq_len must be >= 2");
  }
};

// A text token stream with the projected image block spliced in at the
// placeholder position. image_pos indexes the placeholder inside text_ids;
// a sequence without a placeholder is pure text.
struct MixedSequence {
  std::vector<int> text_ids;
  Tensor h_v;  // [L_v, d_model]; undefined for pure text or a zero-length span
  int image_pos = -1;  // placeholder index inside text_ids, -1 when pure text
  int image_len = 0;   // spliced span length; may be 0 (placeholder dropped)

  bool has_placeholder() const { return image_pos >= 0; }

  // spliced sequence length
  int length() const {
    const int t = static_cast<int>(text_ids.size());
    return has_placeholder() ? t - 1 + image_len : t;
  }

  // text ids with the placeholder expanded to image_len fill tokens
  std::vector<int> expanded_ids(int fill) const {
    if (!has_placeholder()) return text_ids;
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(length()));
    for (int i = 0; i < static_cast<int>(text_ids.size()); ++i) {
      if (i == image_pos)
        out.insert(out.end(), static_cast<std::size_t>(image_len), fill);
      else
        out.push_back(text_ids[i]);
    }
    return out;
  }

  // per-token flags over text_ids expanded to the spliced sequence; image
  // positions get `fill`
  BoolVec expand_flags(const BoolVec& flags, std::uint8_t fill = 0) const {
    if (static_cast<int>(flags.size()) != static_cast<int>(text_ids.size()))
      throw ShapeError("flag list length " + std::to_string(flags.size()) +
                       " does not match token count " +
                       std::to_string(text_ids.size()));
    if (!has_placeholder()) return flags;
    BoolVec out;
    out.reserve(static_cast<std::size_t>(length()));
    for (int i = 0; i < static_cast<int>(text_ids.size()); ++i) {
      if (i == image_pos)
        out.insert(out.end(), static_cast<std::size_t>(image_len), fill);
      else
        out.push_back(flags[i]);
    }
    return out;
  }
};

// Builds a MixedSequence from ids that contain at most one image placeholder.
inline MixedSequence make_mixed(std::vector<int> ids, Tensor h_v) {
  MixedSequence seq;
  int found = -1;
  for (int i = 0; i < static_cast<int>(ids.size()); ++i) {
    if (ids[i] == Vocab::kImage) {
      if (found >= 0)
        throw DataError("sequence contains more than one image placeholder");
      found = i;
    }
  }
  seq.text_ids = std::move(ids);
  if (found >= 0) {
    if (!h_v.defined())
      throw DataError("sequence has an image placeholder but no image tokens");
    seq.h_v = h_v;
    seq.image_pos = found;
    seq.image_len = h_v.dim(0);
  } else if (h_v.defined() && h_v.dim(0) > 0) {
    throw DataError("image tokens supplied but sequence has no placeholder");
  }
  return seq;
}

class LanguageModel {
 public:
  LanguageModel() = default;
  LanguageModel(const LMConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    cfg_.validate();
    // Token identity must dominate position: both tables are frozen in every
    // training stage, and generation replays trained token patterns at
    // earlier positions than they were seen at.
    wte_ = Tensor::randn({cfg.vocab_size, cfg.d_model}, rng, 0.1, true);
    wpe_ = Tensor::randn({cfg.max_seq_len, cfg.d_model}, rng, 0.01, true);
    for (int i = 0; i < cfg.n_layers; ++i)
      blocks_.emplace_back("lm.blocks." + std::to_string(i), cfg.d_model,
                           cfg.n_heads, rng);
    final_norm_ = LayerNorm("lm.final_norm", cfg.d_model);
    head_ = Linear("lm.head", cfg.d_model, cfg.vocab_size, rng);
  }

  const LMConfig& config() const { return cfg_; }
  Tensor& wte() { return wte_; }
  Tensor& wpe() { return wpe_; }
  Linear& head() { return head_; }

  // logits [L, vocab_size] over the spliced sequence
  Tensor forward(const MixedSequence& seq) const {
    const int len = seq.length();
    if (len > cfg_.max_seq_len)
      throw ShapeError("sequence length " + std::to_string(len) +
                       " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
    if (len < 1) throw ShapeError("empty sequence");

    std::vector<Tensor> parts;
    int pos = 0;
    auto embed_segment = [&](const std::vector<int>& ids) {
      Tensor tok = embedding_lookup(wte_, ids);
      std::vector<int> positions(ids.size());
      for (std::size_t i = 0; i < ids.size(); ++i) positions[i] = pos++;
      return add(tok, embedding_lookup(wpe_, positions));
    };

    if (seq.has_placeholder()) {
      std::vector<int> pre(seq.text_ids.begin(),
                           seq.text_ids.begin() + seq.image_pos);
      std::vector<int> post(seq.text_ids.begin() + seq.image_pos + 1,
                            seq.text_ids.end());
      if (!pre.empty()) parts.push_back(embed_segment(pre));
      if (seq.image_len > 0) {
        std::vector<int> positions(static_cast<std::size_t>(seq.image_len));
        for (int i = 0; i < seq.image_len; ++i) positions[i] = pos++;
        parts.push_back(add(seq.h_v, embedding_lookup(wpe_, positions)));
      }
      if (!post.empty()) parts.push_back(embed_segment(post));
    } else {
      parts.push_back(embed_segment(seq.text_ids));
    }

    Tensor h = parts.size() == 1 ? parts[0] : concat_rows(parts);
    for (const auto& blk : blocks_) h = blk.forward(h, /*causal=*/true);
    return head_.forward(final_norm_.forward(h));
  }

  Tensor forward_text(const std::vector<int>& ids) const {
    MixedSequence seq;
    seq.text_ids = ids;
    return forward(seq);
  }

  void params(NamedTensors& out) const {
    out.emplace_back("lm.wte", wte_);
    out.emplace_back("lm.wpe", wpe_);
    for (const auto& blk : blocks_) blk.params(out);
    final_norm_.params(out);
    head_.params(out);
  }

  void linears(std::vector<Linear*>& out) {
    for (auto& blk : blocks_) blk.linears(out);
    out.push_back(&head_);
  }

 private:
  LMConfig cfg_;
  Tensor wte_, wpe_;
  std::vector<TransformerBlock> blocks_;
  LayerNorm final_norm_;
  Linear head_;
};

}  // namespace sqvlm
