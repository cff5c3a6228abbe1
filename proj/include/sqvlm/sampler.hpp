#pragma once

// Greedy autoregressive generation. Answer mode renders the same prefix an
// answered training turn would get; selfq mode carries no human-language
// instruction, only the question-asking token after the image.

#include <string>
#include <vector>

#include "sqvlm/data.hpp"
#include "sqvlm/model.hpp"

namespace sqvlm {

inline const std::string kCaptionInstruction =
    "Provide a brief description of the given image, your answer should be in "
    "one sentence.";

enum class GenMode : std::uint8_t { kAnswer = 0, kSelfq = 1 };

struct GenRequest {
  Tensor pixels;
  GenMode mode = GenMode::kAnswer;
  std::string prompt_text;  // required for answer mode, forbidden for selfq
  int max_new_tokens = 64;
};

struct GenResult {
  std::string text;               // delimiter stripped
  std::vector<int> prompt_ids;    // rendered prefix (unexpanded)
  std::vector<int> emitted_ids;   // greedy tokens, including the delimiter
};

// the generation-time prefix; token-identical to the training-time rendering
// of the same turn kind up to the first predicted position
inline std::vector<int> generation_prefix(const Vocab& vocab, GenMode mode,
                                          const std::string& prompt_text) {
  std::vector<int> ids;
  ids.push_back(Vocab::kBos);
  for (int id : vocab.tokenize(kSystemMessage)) ids.push_back(id);
  ids.push_back(Vocab::kImage);
  if (mode == GenMode::kAnswer) {
    ids.push_back(Vocab::kUsr);
    for (int id : vocab.tokenize(prompt_text)) ids.push_back(id);
    ids.push_back(Vocab::kDelim);
    ids.push_back(Vocab::kAswr);
  } else {
    ids.push_back(Vocab::kVusr);
  }
  return ids;
}

inline GenResult generate(const VlmModel& model, const GenRequest& req) {
  if (req.mode == GenMode::kSelfq && !req.prompt_text.empty())
    throw ConfigError("selfq request must not carry prompt text");
  if (req.mode == GenMode::kAnswer && req.prompt_text.empty())
    throw ConfigError("answer request requires prompt text");
  if (!req.pixels.defined()) throw ConfigError("generation request has no image");
  if (req.max_new_tokens < 1)
    throw ConfigError("max_new_tokens must be >= 1");

  GenResult res;
  res.prompt_ids = generation_prefix(model.vocab(), req.mode, req.prompt_text);
  const Tensor hv = model.image_features(req.pixels);

  std::vector<int> ids = res.prompt_ids;
  const int max_len = model.lm().config().max_seq_len;
  const int image_len = hv.dim(0);
  for (int t = 0; t < req.max_new_tokens; ++t) {
    if (static_cast<int>(ids.size()) - 1 + image_len >= max_len) break;
    const MixedSequence seq = make_mixed(ids, hv);
    const Tensor logits = model.lm().forward(seq);
    const int len = logits.dim(0), v = logits.dim(1);
    const double* row = logits.value().data() +
                        static_cast<std::size_t>(len - 1) * v;
    int best = 0;
    for (int j = 1; j < v; ++j)
      if (row[j] > row[best]) best = j;
    res.emitted_ids.push_back(best);
    ids.push_back(best);
    if (best == Vocab::kDelim) break;
  }

  std::vector<int> text_ids;
  for (int id : res.emitted_ids)
    if (id != Vocab::kDelim) text_ids.push_back(id);
  res.text = model.vocab().detokenize(text_ids);
  return res;
}

inline GenResult caption(const VlmModel& model, const Tensor& pixels,
                         const std::string& instruction = kCaptionInstruction,
                         int max_new_tokens = 64) {
  GenRequest req;
  req.pixels = pixels;
  req.mode = GenMode::kAnswer;
  req.prompt_text = instruction;
  req.max_new_tokens = max_new_tokens;
  return generate(model, req);
}

}  // namespace sqvlm
