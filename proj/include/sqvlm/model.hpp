#pragma once

// The assembled two-tower model: vision tower producing H_v, language model
// consuming the spliced sequence, one byte-level vocabulary.

#include <map>
#include <random>
#include <string>
#include <vector>

#include "sqvlm/language.hpp"
#include "sqvlm/vision.hpp"
#include "sqvlm/vocab.hpp"

namespace sqvlm {

struct ModelSpec {
  VisionConfig vision;
  LMConfig lm;

  void validate() const {
    vision.validate();
    lm.validate();
    if (vision.d_model != lm.d_model)
      throw ConfigError("vision d_model " + std::to_string(vision.d_model) +
                        " must match language d_model " +
                        std::to_string(lm.d_model));
  }
};

class VlmModel {
 public:
  VlmModel(const ModelSpec& spec, std::uint64_t init_seed)
      : spec_(spec), init_seed_(init_seed) {
    spec_.validate();
    std::mt19937_64 rng(init_seed);
    vision_ = VisionTower(spec.vision, rng);
    lm_ = LanguageModel(spec.lm, rng);
  }

  const ModelSpec& spec() const { return spec_; }
  std::uint64_t init_seed() const { return init_seed_; }
  const Vocab& vocab() const { return vocab_; }
  VisionTower& vision() { return vision_; }
  const VisionTower& vision() const { return vision_; }
  LanguageModel& lm() { return lm_; }
  const LanguageModel& lm() const { return lm_; }

  // full vision pipeline: pixels -> H_v
  Tensor image_features(const Tensor& pixels) const {
    return vision_.forward(pixels);
  }

  NamedTensors named_parameters() const {
    NamedTensors out;
    vision_.params(out);
    lm_.params(out);
    return out;
  }

  std::map<std::string, Tensor> param_map() const {
    std::map<std::string, Tensor> out;
    for (auto& [name, t] : named_parameters()) out.emplace(name, t);
    return out;
  }

  // linear transforms eligible to host low-rank adapters: the attention and
  // MLP linears of both towers plus the output head
  std::vector<Linear*> adapter_hosts() {
    std::vector<Linear*> out;
    vision_.linears(out);
    lm_.linears(out);
    return out;
  }

 private:
  ModelSpec spec_;
  std::uint64_t init_seed_ = 0;
  Vocab vocab_;
  VisionTower vision_;
  LanguageModel lm_;
};

}  // namespace sqvlm
