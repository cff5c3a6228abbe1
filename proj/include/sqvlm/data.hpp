#pragma once

// Conversation ingestion, the self-questioning turn transformation, template
// rendering with per-token loss masks, and the binary record file.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "sqvlm/errors.hpp"
#include "sqvlm/tensor.hpp"
#include "sqvlm/vocab.hpp"

namespace sqvlm {

// fixed prompt prepended to every fine-tuning conversation
inline const std::string kSystemMessage =
    "The assistant gives helpful, detailed, and polite answers to the user's "
    "questions. Also, the assistant is a curious virtual user can ask complex "
    "questions that are relevant to the content in the image.";

inline const std::string kImagePlaceholder = "<image>";

struct QaTurn {
  std::string question;
  std::string answer;
};

struct Conversation {
  std::string id;
  std::string image;          // path; may be empty when pixels are inline
  Tensor pixels;              // optional inline pixels [S,S,C]
  std::vector<QaTurn> turns;  // P >= 1
};

enum class TurnKind : std::uint8_t { kUsr = 0, kVusr = 1 };

enum class SpanKind : std::uint8_t {
  kBos,
  kSystem,
  kImage,
  kPrefix,  // [usr] / [vusr] / [aswr] instruction tokens
  kQuestion,
  kAnswer,
  kDelim,
};

struct Span {
  SpanKind kind;
  int turn;  // -1 for the preamble spans
  int start;
  int len;
  bool loss;  // whether tokens in this span are prediction targets
};

struct TurnSequence {
  std::string id;
  std::vector<int> token_ids;
  BoolVec loss_mask;
  std::vector<TurnKind> turn_kinds;
  std::vector<Span> spans;
};

// what the binary record file stores per sequence
struct SequenceRecord {
  std::string id;
  std::vector<int> token_ids;
  BoolVec loss_mask;
};

// ---------------------------------------------------------------------------
// turn-kind assignment (counter-based so shuffling cannot change draws)

struct SqPolicy {
  double delta = 0.5;       // self-questioning proportion threshold
  std::uint64_t seed = 0;

  void validate() const {
    if (!(delta >= 0.0 && delta <= 1.0))
      throw ConfigError("sq delta must lie in [0,1], got " + std::to_string(delta));
  }
};

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}
}  // namespace detail

// uniform draw in [0,1) determined by (seed, conversation id, turn index)
inline double turn_draw(std::uint64_t seed, const std::string& conv_id, int j) {
  std::uint64_t h = detail::splitmix64(seed ^ detail::fnv1a64(conv_id));
  h = detail::splitmix64(h ^ static_cast<std::uint64_t>(j));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

// Turn 1 is always usr. For j > 1, R < delta keeps the user prefix and
// R > delta switches the turn to self-questioning; R == delta resolves
// to usr for reproducibility.
inline std::vector<TurnKind> assign_turn_kinds(const Conversation& conv,
                                               const SqPolicy& policy) {
  policy.validate();
  if (conv.turns.empty())
    throw DataError("conversation " + conv.id + " has no turns");
  std::vector<TurnKind> kinds;
  kinds.reserve(conv.turns.size());
  kinds.push_back(TurnKind::kUsr);
  for (int j = 2; j <= static_cast<int>(conv.turns.size()); ++j) {
    const double r = turn_draw(policy.seed, conv.id, j);
    kinds.push_back(r > policy.delta ? TurnKind::kVusr : TurnKind::kUsr);
  }
  return kinds;
}

// ---------------------------------------------------------------------------
// template rendering

struct RenderLimit {
  int image_span_len = 0;  // L_v used when checking the spliced length
  int max_seq_len = 0;     // 0 disables the check
};

namespace detail {
struct SeqBuilder {
  TurnSequence seq;

  void push_special(int id, SpanKind kind, int turn, bool loss) {
    seq.spans.push_back({kind, turn, static_cast<int>(seq.token_ids.size()), 1, loss});
    seq.token_ids.push_back(id);
    seq.loss_mask.push_back(loss ? 1 : 0);
  }
  void push_text(const Vocab& vocab, const std::string& text, SpanKind kind,
                 int turn, bool loss) {
    const std::vector<int> ids = vocab.tokenize(text);
    seq.spans.push_back({kind, turn, static_cast<int>(seq.token_ids.size()),
                         static_cast<int>(ids.size()), loss});
    for (int id : ids) {
      seq.token_ids.push_back(id);
      seq.loss_mask.push_back(loss ? 1 : 0);
    }
  }
};

inline void check_limit(const TurnSequence& seq, const RenderLimit& limit) {
  if (limit.max_seq_len <= 0) return;
  const int spliced = static_cast<int>(seq.token_ids.size()) - 1 +
                      limit.image_span_len;
  if (spliced > limit.max_seq_len)
    throw DataError("rendered sequence for " + seq.id + " would splice to " +
                    std::to_string(spliced) + " tokens, over the limit of " +
                    std::to_string(limit.max_seq_len) +
                    "; refusing to truncate");
}
}  // namespace detail

// First human turn must contain exactly one image placeholder; it is removed
// from the question text (the image occupies its own slot in the layout) and
// surrounding whitespace is trimmed.
inline std::string strip_image_placeholder(const std::string& text,
                                           const std::string& conv_id) {
  const std::size_t first = text.find(kImagePlaceholder);
  if (first == std::string::npos)
    throw DataError("conversation " + conv_id +
                    " is missing the image placeholder in its first turn");
  if (text.find(kImagePlaceholder, first + 1) != std::string::npos)
    throw DataError("conversation " + conv_id +
                    " has more than one image placeholder");
  std::string out = text.substr(0, first) + text.substr(first + kImagePlaceholder.size());
  const auto b = out.find_first_not_of(" \t\n\r");
  if (b == std::string::npos) return "";
  const auto e = out.find_last_not_of(" \t\n\r");
  return out.substr(b, e - b + 1);
}

// Fine-tuning layout:
//   [bos] system [image] ( prefix  X_q  <o_d>  [aswr]  X_a  <o_d> ) x P
// Loss targets: every answer plus its trailing delimiter; questions plus
// their trailing delimiter only in vusr turns.
inline TurnSequence render(const Conversation& conv,
                           const std::vector<TurnKind>& kinds,
                           const Vocab& vocab,
                           const RenderLimit& limit = {}) {
  if (kinds.size() != conv.turns.size())
    throw DataError("turn-kind list length " + std::to_string(kinds.size()) +
                    " does not match turn count " +
                    std::to_string(conv.turns.size()) + " in " + conv.id);
  if (conv.turns.empty())
    throw DataError("conversation " + conv.id + " has no turns");

  detail::SeqBuilder b;
  b.seq.id = conv.id;
  b.seq.turn_kinds = kinds;
  b.push_special(Vocab::kBos, SpanKind::kBos, -1, false);
  b.push_text(vocab, kSystemMessage, SpanKind::kSystem, -1, false);
  b.push_special(Vocab::kImage, SpanKind::kImage, -1, false);

  for (int t = 0; t < static_cast<int>(conv.turns.size()); ++t) {
    const bool vusr = kinds[t] == TurnKind::kVusr;
    std::string question = conv.turns[t].question;
    if (t == 0) question = strip_image_placeholder(question, conv.id);
    b.push_special(vusr ? Vocab::kVusr : Vocab::kUsr, SpanKind::kPrefix, t, false);
    b.push_text(vocab, question, SpanKind::kQuestion, t, vusr);
    b.push_special(Vocab::kDelim, SpanKind::kDelim, t, vusr);
    b.push_special(Vocab::kAswr, SpanKind::kPrefix, t, false);
    b.push_text(vocab, conv.turns[t].answer, SpanKind::kAnswer, t, true);
    b.push_special(Vocab::kDelim, SpanKind::kDelim, t, true);
  }
  detail::check_limit(b.seq, limit);
  return b.seq;
}

// Pre-training layout over caption data: [bos] [image] X_a <o_d> with loss on
// the description and its delimiter. The description is the conversation's
// first assistant turn.
inline TurnSequence render_pretrain(const Conversation& conv, const Vocab& vocab,
                                    const RenderLimit& limit = {}) {
  if (conv.turns.empty())
    throw DataError("conversation " + conv.id + " has no turns");
  detail::SeqBuilder b;
  b.seq.id = conv.id;
  b.push_special(Vocab::kBos, SpanKind::kBos, -1, false);
  b.push_special(Vocab::kImage, SpanKind::kImage, -1, false);
  b.push_text(vocab, conv.turns[0].answer, SpanKind::kAnswer, 0, true);
  b.push_special(Vocab::kDelim, SpanKind::kDelim, 0, true);
  detail::check_limit(b.seq, limit);
  return b.seq;
}

// Masks restricted to one objective each; a delimiter belongs to the span it
// terminates. The union of the two is exactly the loss mask.
namespace detail {
inline BoolVec objective_mask(const TurnSequence& seq, SpanKind want) {
  BoolVec out(seq.token_ids.size(), 0);
  SpanKind last_content = SpanKind::kSystem;
  for (const Span& s : seq.spans) {
    SpanKind effective = s.kind;
    if (s.kind == SpanKind::kQuestion || s.kind == SpanKind::kAnswer)
      last_content = s.kind;
    if (s.kind == SpanKind::kDelim) effective = last_content;
    if (s.loss && effective == want)
      for (int i = s.start; i < s.start + s.len; ++i) out[i] = 1;
  }
  return out;
}
}  // namespace detail

inline BoolVec question_target_mask(const TurnSequence& seq) {
  return detail::objective_mask(seq, SpanKind::kQuestion);
}

inline BoolVec answer_target_mask(const TurnSequence& seq) {
  return detail::objective_mask(seq, SpanKind::kAnswer);
}

// ---------------------------------------------------------------------------
// conversation JSON

inline std::vector<Conversation> parse_conversations_json(const std::string& text,
                                                          const std::string& origin) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(origin + ": invalid JSON: " + e.what());
  }
  if (!doc.is_array()) throw DataError(origin + ": expected a top-level array");
  std::vector<Conversation> out;
  for (const auto& item : doc) {
    Conversation conv;
    if (!item.contains("id") || !item["id"].is_string())
      throw DataError(origin + ": record missing string \"id\"");
    conv.id = item["id"].get<std::string>();
    if (!item.contains("image") || !item["image"].is_string())
      throw DataError(origin + ": record " + conv.id + " missing string \"image\"");
    conv.image = item["image"].get<std::string>();
    if (!item.contains("conversations") || !item["conversations"].is_array() ||
        item["conversations"].empty())
      throw DataError(origin + ": record " + conv.id +
                      " missing non-empty \"conversations\"");
    const auto& msgs = item["conversations"];
    if (msgs.size() % 2 != 0)
      throw DataError(origin + ": record " + conv.id +
                      " must alternate human/gpt turns (odd message count)");
    for (std::size_t i = 0; i < msgs.size(); i += 2) {
      const auto& human = msgs[i];
      const auto& gpt = msgs[i + 1];
      auto field = [&](const nlohmann::json& m, const char* key) {
        if (!m.contains(key) || !m[key].is_string())
          throw DataError(origin + ": record " + conv.id + " message missing \"" +
                          key + "\"");
        return m[key].get<std::string>();
      };
      if (field(human, "from") != "human" || field(gpt, "from") != "gpt")
        throw DataError(origin + ": record " + conv.id +
                        " turns must alternate human/gpt");
      conv.turns.push_back({field(human, "value"), field(gpt, "value")});
    }
    // placeholder rules checked here so bad data fails at ingest
    for (std::size_t t = 0; t < conv.turns.size(); ++t) {
      const auto& q = conv.turns[t].question;
      if (t == 0) {
        (void)strip_image_placeholder(q, conv.id);
      } else if (q.find(kImagePlaceholder) != std::string::npos) {
        throw DataError(origin + ": record " + conv.id +
                        " has an image placeholder outside the first turn");
      }
    }
    out.push_back(std::move(conv));
  }
  return out;
}

inline std::vector<Conversation> load_conversations(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open conversations file " + path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return parse_conversations_json(text, path);
}

// ---------------------------------------------------------------------------
// binary record file: 8-byte magic "SQVLREC1", then per record
//   u32 id length, id bytes, u32 token count, token ids as u32 LE,
//   loss mask packed LSB-first into ceil(n/8) bytes

inline const char kRecordMagic[8] = {'S', 'Q', 'V', 'L', 'R', 'E', 'C', '1'};

namespace detail {
inline void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}
inline std::uint32_t get_u32(const std::string& s, std::size_t& off,
                             const std::string& origin) {
  if (off + 4 > s.size()) throw DataError(origin + ": truncated record file");
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i)
    v = (v << 8) | static_cast<std::uint8_t>(s[off + static_cast<std::size_t>(i)]);
  off += 4;
  return v;
}
}  // namespace detail

inline std::string encode_records(const std::vector<SequenceRecord>& records) {
  std::string out(kRecordMagic, sizeof(kRecordMagic));
  for (const auto& r : records) {
    detail::put_u32(out, static_cast<std::uint32_t>(r.id.size()));
    out += r.id;
    detail::put_u32(out, static_cast<std::uint32_t>(r.token_ids.size()));
    for (int id : r.token_ids) detail::put_u32(out, static_cast<std::uint32_t>(id));
    std::uint8_t cur = 0;
    int nbits = 0;
    for (std::size_t i = 0; i < r.loss_mask.size(); ++i) {
      if (r.loss_mask[i]) cur |= static_cast<std::uint8_t>(1u << nbits);
      if (++nbits == 8) {
        out.push_back(static_cast<char>(cur));
        cur = 0;
        nbits = 0;
      }
    }
    if (nbits > 0) out.push_back(static_cast<char>(cur));
  }
  return out;
}

inline std::vector<SequenceRecord> decode_records(const std::string& bytes,
                                                  const std::string& origin) {
  if (bytes.size() < sizeof(kRecordMagic) ||
      bytes.compare(0, sizeof(kRecordMagic), kRecordMagic, sizeof(kRecordMagic)) != 0)
    throw DataError(origin + ": not a record file (bad magic)");
  std::vector<SequenceRecord> out;
  std::size_t off = sizeof(kRecordMagic);
  while (off < bytes.size()) {
    SequenceRecord r;
    const std::uint32_t id_len = detail::get_u32(bytes, off, origin);
    if (off + id_len > bytes.size()) throw DataError(origin + ": truncated record file");
    r.id = bytes.substr(off, id_len);
    off += id_len;
    const std::uint32_t n = detail::get_u32(bytes, off, origin);
    r.token_ids.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i)
      r.token_ids.push_back(static_cast<int>(detail::get_u32(bytes, off, origin)));
    const std::size_t mask_bytes = (n + 7) / 8;
    if (off + mask_bytes > bytes.size())
      throw DataError(origin + ": truncated record file");
    r.loss_mask.resize(n);
    for (std::uint32_t i = 0; i < n; ++i)
      r.loss_mask[i] =
          (static_cast<std::uint8_t>(bytes[off + i / 8]) >> (i % 8)) & 1u;
    off += mask_bytes;
    out.push_back(std::move(r));
  }
  return out;
}

inline void write_records(const std::string& path,
                          const std::vector<SequenceRecord>& records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write record file " + path);
  const std::string bytes = encode_records(records);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<SequenceRecord> read_records(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open record file " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  return decode_records(bytes, path);
}

inline SequenceRecord to_record(const TurnSequence& seq) {
  return SequenceRecord{seq.id, seq.token_ids, seq.loss_mask};
}

// human-readable dump of rendered sequences, one JSON object per line
inline std::string debug_dump_line(const TurnSequence& seq, const Vocab& vocab) {
  nlohmann::json j;
  j["id"] = seq.id;
  j["ids"] = seq.token_ids;
  std::vector<std::string> toks;
  toks.reserve(seq.token_ids.size());
  for (int id : seq.token_ids) toks.push_back(vocab.token_name(id));
  j["tokens"] = toks;
  std::vector<int> mask(seq.loss_mask.begin(), seq.loss_mask.end());
  j["mask"] = mask;
  std::vector<std::string> kinds;
  for (TurnKind k : seq.turn_kinds)
    kinds.push_back(k == TurnKind::kVusr ? "vusr" : "usr");
  j["turn_kinds"] = kinds;
  return j.dump();
}

// ---------------------------------------------------------------------------
// corpus statistics

struct CorpusStats {
  int conversations = 0;
  int turns = 0;
  int usr_turns = 0;
  int vusr_turns = 0;
  double vusr_fraction = 0.0;
  std::size_t total_tokens = 0;
  std::size_t masked_tokens = 0;
  std::vector<int> question_token_lengths;
  std::vector<int> answer_token_lengths;
};

inline CorpusStats corpus_stats(const std::vector<Conversation>& convs,
                                const SqPolicy& policy, const Vocab& vocab) {
  CorpusStats st;
  st.conversations = static_cast<int>(convs.size());
  for (const auto& conv : convs) {
    const auto kinds = assign_turn_kinds(conv, policy);
    const TurnSequence seq = render(conv, kinds, vocab);
    st.turns += static_cast<int>(conv.turns.size());
    for (TurnKind k : kinds)
      (k == TurnKind::kVusr ? st.vusr_turns : st.usr_turns)++;
    st.total_tokens += seq.token_ids.size();
    for (std::uint8_t m : seq.loss_mask) st.masked_tokens += m;
    for (const Span& s : seq.spans) {
      if (s.kind == SpanKind::kQuestion) st.question_token_lengths.push_back(s.len);
      if (s.kind == SpanKind::kAnswer) st.answer_token_lengths.push_back(s.len);
    }
  }
  st.vusr_fraction = st.turns > 0 ? double(st.vusr_turns) / double(st.turns) : 0.0;
  return st;
}

inline nlohmann::json stats_to_json(const CorpusStats& st) {
  auto dist = [](const std::vector<int>& v) {
    nlohmann::json d;
    if (v.empty()) {
      d["count"] = 0;
      d["min"] = 0;
      d["max"] = 0;
      d["mean"] = 0.0;
      return d;
    }
    int mn = v[0], mx = v[0];
    double sum = 0;
    for (int x : v) {
      mn = std::min(mn, x);
      mx = std::max(mx, x);
      sum += x;
    }
    d["count"] = v.size();
    d["min"] = mn;
    d["max"] = mx;
    d["mean"] = sum / double(v.size());
    return d;
  };
  nlohmann::json j;
  j["conversations"] = st.conversations;
  j["turns"] = st.turns;
  j["usr_turns"] = st.usr_turns;
  j["vusr_turns"] = st.vusr_turns;
  j["vusr_fraction"] = st.vusr_fraction;
  j["total_tokens"] = st.total_tokens;
  j["masked_tokens"] = st.masked_tokens;
  j["question_lengths"] = dist(st.question_token_lengths);
  j["answer_lengths"] = dist(st.answer_token_lengths);
  return j;
}

}  // namespace sqvlm
