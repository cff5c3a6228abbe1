#pragma once

// Low-rank adapter attachment, merge and unmerge. B starts at zero so a
// freshly attached set leaves every forward output bit-identical; merge folds
// (alpha/rank) * B * A into the host weight and keeps the original payload so
// unmerge restores it exactly.

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "sqvlm/model.hpp"
#include "sqvlm/nn.hpp"

namespace sqvlm {

struct AdapterConfig {
  std::vector<std::string> targets = {"attn.q",  "attn.k",  "attn.v", "attn.o",
                                      "mlp.fc1", "mlp.fc2", "head"};
  int lm_rank = 128;
  double lm_alpha = 256.0;
  int vit_rank = 32;
  double vit_alpha = 64.0;

  void validate() const {
    if (targets.empty()) throw ConfigError("adapter target list is empty");
    if (lm_rank < 1 || vit_rank < 1)
      throw ConfigError("adapter ranks must be >= 1");
  }
};

class AdapterSet {
 public:
  AdapterSet() = default;

  static AdapterSet attach(VlmModel& model, const AdapterConfig& cfg,
                           std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    AdapterSet set;
    std::vector<bool> matched(cfg.targets.size(), false);
    for (Linear* host : model.adapter_hosts()) {
      if (host->lora())
        throw StateError("adapter already attached to " + host->name());
      int hit = -1;
      for (std::size_t t = 0; t < cfg.targets.size(); ++t) {
        const std::string& target = cfg.targets[t];
        const std::string& name = host->name();
        if (name.size() > target.size() + 1 &&
            name.compare(name.size() - target.size() - 1, target.size() + 1,
                         "." + target) == 0) {
          hit = static_cast<int>(t);
          break;
        }
      }
      if (hit < 0) continue;
      matched[static_cast<std::size_t>(hit)] = true;
      const bool is_vision = host->name().rfind("vision.", 0) == 0;
      const int rank = is_vision ? cfg.vit_rank : cfg.lm_rank;
      const double alpha = is_vision ? cfg.vit_alpha : cfg.lm_alpha;
      auto ad = std::make_shared<LoraAdapter>();
      ad->rank = rank;
      ad->alpha = alpha;
      ad->target = host->name();
      ad->a = Tensor::randn({rank, host->d_in()}, rng, 0.02, true);
      ad->b = Tensor::zeros({host->d_out(), rank}, true);
      host->set_lora(ad);
      set.adapters_.push_back(ad);
      set.hosts_.push_back(host);
    }
    for (std::size_t t = 0; t < cfg.targets.size(); ++t)
      if (!matched[t])
        throw ConfigError("adapter target \"" + cfg.targets[t] +
                          "\" matches no linear transform");
    return set;
  }

  // rebuilds the set from a model whose linears already carry adapters
  // (checkpoint load path)
  static AdapterSet from_model(VlmModel& model) {
    AdapterSet set;
    for (Linear* host : model.adapter_hosts())
      if (host->lora()) {
        set.adapters_.push_back(host->lora());
        set.hosts_.push_back(host);
      }
    return set;
  }

  std::size_t size() const { return adapters_.size(); }
  const std::vector<std::shared_ptr<LoraAdapter>>& adapters() const {
    return adapters_;
  }

  // W <- W + (alpha/rank) * B * A
  void merge() {
    for (std::size_t i = 0; i < adapters_.size(); ++i) {
      LoraAdapter& ad = *adapters_[i];
      if (ad.merged) throw StateError("adapter on " + ad.target + " already merged");
      Tensor& w = hosts_[i]->weight();
      ad.host_backup = w.value();
      const int d_out = w.dim(0), d_in = w.dim(1), r = ad.rank;
      const double s = ad.alpha / ad.rank;
      for (int o = 0; o < d_out; ++o)
        for (int j = 0; j < d_in; ++j) {
          double acc = 0.0;
          for (int q = 0; q < r; ++q)
            acc += ad.b.value()[o * r + q] * ad.a.value()[q * d_in + j];
          w.value()[o * d_in + j] += s * acc;
        }
      ad.merged = true;
    }
  }

  // restores the exact pre-merge host payloads
  void unmerge() {
    for (std::size_t i = 0; i < adapters_.size(); ++i) {
      LoraAdapter& ad = *adapters_[i];
      if (!ad.merged) throw StateError("adapter on " + ad.target + " is not merged");
      hosts_[i]->weight().value() = ad.host_backup;
      ad.host_backup.clear();
      ad.merged = false;
    }
  }

  NamedTensors params() const {
    NamedTensors out;
    for (const auto& ad : adapters_) {
      out.emplace_back(ad->target + ".lora_a", ad->a);
      out.emplace_back(ad->target + ".lora_b", ad->b);
    }
    return out;
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& ad : adapters_) n += ad->a.numel() + ad->b.numel();
    return n;
  }

 private:
  std::vector<std::shared_ptr<LoraAdapter>> adapters_;
  std::vector<Linear*> hosts_;
};

}  // namespace sqvlm
