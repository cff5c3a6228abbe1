#pragma once

// Byte-level vocabulary: ids 0..255 are raw bytes, followed by the reserved
// instruction tokens. Text tokenization can only ever produce byte ids, so
// typing "[vusr]" in user text never yields the reserved id.

#include <string>
#include <vector>

#include "sqvlm/errors.hpp"

namespace sqvlm {

class Vocab {
 public:
  static constexpr int kBytes = 256;
  enum Special : int {
    kUsr = 256,    // user question follows
    kVusr = 257,   // model asks its own question
    kAswr = 258,   // answer follows
    kDelim = 259,  // end of a question or answer span
    kImage = 260,  // placeholder replaced by the projected image tokens
    kPad = 261,
    kBos = 262,
  };
  static constexpr int kSize = 263;

  int size() const { return kSize; }

  bool is_special(int id) const { return id >= kBytes && id < kSize; }

  std::vector<int> tokenize(const std::string& text) const {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char ch : text) ids.push_back(static_cast<int>(ch));
    return ids;
  }

  std::string detokenize(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      if (id < 0 || id >= kSize)
        throw DataError("token id " + std::to_string(id) + " out of vocabulary");
      if (id < kBytes)
        out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
      else
        out += special_name(id);
    }
    return out;
  }

  static std::string special_name(int id) {
    switch (id) {
      case kUsr: return "[usr]";
      case kVusr: return "[vusr]";
      case kAswr: return "[aswr]";
      case kDelim: return "<o_d>";
      case kImage: return "<image>";
      case kPad: return "<pad>";
      case kBos: return "<bos>";
      default: return "";
    }
  }

  // id -> printable string for every id, used by debug dumps and checkpoints
  std::string token_name(int id) const {
    if (id < 0 || id >= kSize)
      throw DataError("token id " + std::to_string(id) + " out of vocabulary");
    if (id >= kBytes) return special_name(id);
    return "byte:" + std::to_string(id);
  }
};

}  // namespace sqvlm
