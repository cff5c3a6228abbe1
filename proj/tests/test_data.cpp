#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sqvlm/data.hpp"

using namespace sqvlm;

namespace {

// hand-walked expected sequences, built token by token without render()
struct ManualSeq {
  std::vector<int> ids;
  BoolVec mask;

  void special(int id, bool loss) {
    ids.push_back(id);
    mask.push_back(loss ? 1 : 0);
  }
  void text(const std::string& s, bool loss) {
    for (unsigned char c : s) {
      ids.push_back(static_cast<int>(c));
      mask.push_back(loss ? 1 : 0);
    }
  }
};

Conversation conv(const std::string& id,
                  std::vector<std::pair<std::string, std::string>> qa) {
  Conversation c;
  c.id = id;
  c.image = id + ".png";
  for (auto& [q, a] : qa) c.turns.push_back({q, a});
  return c;
}

std::string golden_serialize(const TurnSequence& seq) {
  std::ostringstream out;
  out << seq.id << "\n";
  out << "ids:";
  for (int id : seq.token_ids) out << " " << id;
  out << "\nmask:";
  for (std::uint8_t m : seq.loss_mask) out << (m ? '1' : '0');
  out << "\nkinds:";
  for (TurnKind k : seq.turn_kinds)
    out << " " << (k == TurnKind::kVusr ? "vusr" : "usr");
  out << "\n";
  return out.str();
}

void check_against_golden_file(const TurnSequence& seq, const std::string& name) {
  const std::string path = "golden/" + name;
  const std::string got = golden_serialize(seq);
  if (std::getenv("SQVLM_REGEN_GOLDEN")) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    REQUIRE(out.good());
    out << got;
    return;
  }
  std::ifstream in(path, std::ios::binary);
  INFO("golden file " << path << " (set SQVLM_REGEN_GOLDEN=1 to regenerate)");
  REQUIRE(in.good());
  std::string want((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  CHECK(got == want);
}

const Vocab vocab;

}  // namespace

TEST_CASE("single-pair conversation always renders as usr") {
  Conversation c = conv("g1", {{"<image>\nWhat shape is shown?", "A red circle."}});
  SqPolicy policy{0.5, 7};
  const auto kinds = assign_turn_kinds(c, policy);
  REQUIRE(kinds == std::vector<TurnKind>{TurnKind::kUsr});

  TurnSequence seq = render(c, kinds, vocab);

  ManualSeq m;
  m.special(Vocab::kBos, false);
  m.text(kSystemMessage, false);
  m.special(Vocab::kImage, false);
  m.special(Vocab::kUsr, false);
  m.text("What shape is shown?", false);  // usr question is not a target
  m.special(Vocab::kDelim, false);
  m.special(Vocab::kAswr, false);
  m.text("A red circle.", true);
  m.special(Vocab::kDelim, true);

  CHECK(seq.token_ids == m.ids);
  CHECK(seq.loss_mask == m.mask);
  check_against_golden_file(seq, "g1_single_usr.txt");
}

TEST_CASE("two-turn conversation with delta=0 makes turn 2 vusr with question loss") {
  Conversation c = conv("g2", {{"<image>\nWhat is here?", "A dog."},
                               {"How many legs does it have?", "Four."}});
  SqPolicy policy{0.0, 7};
  const auto kinds = assign_turn_kinds(c, policy);
  REQUIRE(kinds == std::vector<TurnKind>{TurnKind::kUsr, TurnKind::kVusr});

  TurnSequence seq = render(c, kinds, vocab);

  ManualSeq m;
  m.special(Vocab::kBos, false);
  m.text(kSystemMessage, false);
  m.special(Vocab::kImage, false);
  m.special(Vocab::kUsr, false);
  m.text("What is here?", false);
  m.special(Vocab::kDelim, false);
  m.special(Vocab::kAswr, false);
  m.text("A dog.", true);
  m.special(Vocab::kDelim, true);
  m.special(Vocab::kVusr, false);  // the [vusr] token itself is never a target
  m.text("How many legs does it have?", true);  // vusr question is a target
  m.special(Vocab::kDelim, true);               // and so is its delimiter
  m.special(Vocab::kAswr, false);
  m.text("Four.", true);
  m.special(Vocab::kDelim, true);

  CHECK(seq.token_ids == m.ids);
  CHECK(seq.loss_mask == m.mask);
  check_against_golden_file(seq, "g2_two_turn_vusr.txt");
}

TEST_CASE("delta=1 keeps every turn usr") {
  Conversation c = conv("g3", {{"<image> First?", "One."},
                               {"Second?", "Two."},
                               {"Third?", "Three."}});
  SqPolicy policy{1.0, 7};
  const auto kinds = assign_turn_kinds(c, policy);
  REQUIRE(kinds == std::vector<TurnKind>(3, TurnKind::kUsr));
  TurnSequence seq = render(c, kinds, vocab);
  // only answers and their delimiters carry loss
  std::size_t masked = 0;
  for (std::uint8_t b : seq.loss_mask) masked += b;
  CHECK(masked == std::string("One.").size() + std::string("Two.").size() +
                      std::string("Three.").size() + 3);
  check_against_golden_file(seq, "g3_delta_one.txt");
}

TEST_CASE("three-turn mixed conversation with delta=0.5 and seed 7") {
  Conversation c = conv("g4", {{"<image>\nDescribe the scene.", "A beach."},
                               {"Is it sunny?", "Yes."},
                               {"Any people?", "Two surfers."}});
  SqPolicy policy{0.5, 7};
  const auto kinds = assign_turn_kinds(c, policy);
  REQUIRE(kinds.size() == 3);
  CHECK(kinds[0] == TurnKind::kUsr);
  // pinned draws for (seed 7, "g4", j) so the golden stays stable
  CHECK(kinds[1] == (turn_draw(7, "g4", 2) > 0.5 ? TurnKind::kVusr : TurnKind::kUsr));
  CHECK(kinds[2] == (turn_draw(7, "g4", 3) > 0.5 ? TurnKind::kVusr : TurnKind::kUsr));
  TurnSequence seq = render(c, kinds, vocab);
  check_against_golden_file(seq, "g4_mixed_seed7.txt");
}

TEST_CASE("empty first question renders an empty question span") {
  Conversation c = conv("g5", {{"<image>", "Just a caption."}});
  const auto kinds = assign_turn_kinds(c, SqPolicy{0.5, 7});
  TurnSequence seq = render(c, kinds, vocab);

  ManualSeq m;
  m.special(Vocab::kBos, false);
  m.text(kSystemMessage, false);
  m.special(Vocab::kImage, false);
  m.special(Vocab::kUsr, false);
  m.special(Vocab::kDelim, false);
  m.special(Vocab::kAswr, false);
  m.text("Just a caption.", true);
  m.special(Vocab::kDelim, true);
  CHECK(seq.token_ids == m.ids);
  CHECK(seq.loss_mask == m.mask);
  check_against_golden_file(seq, "g5_empty_question.txt");
}

TEST_CASE("UTF-8 content with delta=0 renders byte-exactly") {
  Conversation c = conv("g6", {{"<image>\n何が見えますか？", "猫が見えます。"},
                               {"Qu'y a-t-il à côté?", "Un café ☕"}});
  SqPolicy policy{0.0, 123};
  const auto kinds = assign_turn_kinds(c, policy);
  REQUIRE(kinds == std::vector<TurnKind>{TurnKind::kUsr, TurnKind::kVusr});
  TurnSequence seq = render(c, kinds, vocab);
  // byte-level round trip of the question text inside the rendered stream
  check_against_golden_file(seq, "g6_utf8.txt");
}

TEST_CASE("pretrain record renders as bos, image, description, delimiter") {
  Conversation c = conv("g7", {{"<image>", "A small white dog on grass."}});
  TurnSequence seq = render_pretrain(c, vocab);

  ManualSeq m;
  m.special(Vocab::kBos, false);
  m.special(Vocab::kImage, false);
  m.text("A small white dog on grass.", true);
  m.special(Vocab::kDelim, true);
  CHECK(seq.token_ids == m.ids);
  CHECK(seq.loss_mask == m.mask);
  CHECK(seq.turn_kinds.empty());
  check_against_golden_file(seq, "g7_pretrain.txt");
}

TEST_CASE("turn draws are deterministic and independent of dataset order") {
  SqPolicy policy{0.5, 99};
  Conversation a = conv("conv-a", {{"<image> q", "a"}, {"q2", "a2"}, {"q3", "a3"}});
  Conversation b = conv("conv-b", {{"<image> q", "a"}, {"q2", "a2"}, {"q3", "a3"}});
  const auto ka1 = assign_turn_kinds(a, policy);
  const auto kb1 = assign_turn_kinds(b, policy);
  // order of processing cannot matter: draws are keyed by (seed, id, j)
  const auto kb2 = assign_turn_kinds(b, policy);
  const auto ka2 = assign_turn_kinds(a, policy);
  CHECK(ka1 == ka2);
  CHECK(kb1 == kb2);
}

TEST_CASE("threshold extremes: delta=0 all vusr after turn 1, delta=1 none") {
  Conversation c = conv("extremes", {{"<image> q", "a"},
                                     {"q2", "a2"},
                                     {"q3", "a3"},
                                     {"q4", "a4"}});
  const auto k0 = assign_turn_kinds(c, SqPolicy{0.0, 5});
  CHECK(k0 == std::vector<TurnKind>{TurnKind::kUsr, TurnKind::kVusr,
                                    TurnKind::kVusr, TurnKind::kVusr});
  const auto k1 = assign_turn_kinds(c, SqPolicy{1.0, 5});
  CHECK(k1 == std::vector<TurnKind>(4, TurnKind::kUsr));
}

TEST_CASE("seed 7 over 10,000 draws at delta=0.5 lands in [0.48, 0.52]") {
  SqPolicy policy{0.5, 7};
  long vusr = 0, draws = 0;
  for (int c = 0; c < 1000; ++c) {
    Conversation conv_c;
    conv_c.id = "mc-" + std::to_string(c);
    conv_c.turns.assign(11, {"q", "a"});
    conv_c.turns[0].question = "<image> q";
    const auto kinds = assign_turn_kinds(conv_c, policy);
    CHECK(kinds[0] == TurnKind::kUsr);  // turn 1 never carries vusr
    for (std::size_t j = 1; j < kinds.size(); ++j) {
      ++draws;
      if (kinds[j] == TurnKind::kVusr) ++vusr;
    }
  }
  REQUIRE(draws == 10000);
  const double fraction = double(vusr) / double(draws);
  INFO("vusr fraction " << fraction);
  CHECK(fraction >= 0.48);
  CHECK(fraction <= 0.52);
}

TEST_CASE("mask completeness: spans partition the sequence") {
  Conversation c = conv("part", {{"<image>\nQ one?", "A one."},
                                 {"Q two?", "A two."}});
  TurnSequence seq = render(c, assign_turn_kinds(c, SqPolicy{0.0, 7}), vocab);
  std::vector<int> covered(seq.token_ids.size(), 0);
  int total = 0;
  for (const Span& s : seq.spans) {
    total += s.len;
    for (int i = s.start; i < s.start + s.len; ++i) covered[i] += 1;
  }
  CHECK(total == static_cast<int>(seq.token_ids.size()));
  for (int cnt : covered) CHECK(cnt == 1);
}

TEST_CASE("question and answer target masks are disjoint and union to the loss mask") {
  Conversation c = conv("um", {{"<image>\nQ one?", "A one."},
                               {"Q two?", "A two."},
                               {"Q three?", "A three."}});
  TurnSequence seq = render(c, assign_turn_kinds(c, SqPolicy{0.0, 7}), vocab);
  const BoolVec q = question_target_mask(seq);
  const BoolVec a = answer_target_mask(seq);
  REQUIRE(q.size() == seq.loss_mask.size());
  for (std::size_t i = 0; i < q.size(); ++i) {
    CHECK((q[i] & a[i]) == 0);
    CHECK((q[i] | a[i]) == seq.loss_mask[i]);
  }
}

TEST_CASE("missing or duplicated image placeholder is a format error") {
  Conversation missing = conv("bad1", {{"No marker here", "a"}});
  CHECK_THROWS_AS(render(missing, {TurnKind::kUsr}, vocab), DataError);
  Conversation dup = conv("bad2", {{"<image><image>", "a"}});
  CHECK_THROWS_AS(render(dup, {TurnKind::kUsr}, vocab), DataError);
}

TEST_CASE("overlong rendering refuses to truncate") {
  Conversation c = conv("long", {{"<image> q", std::string(600, 'x')}});
  RenderLimit limit;
  limit.image_span_len = 16;
  limit.max_seq_len = 512;
  CHECK_THROWS_AS(render(c, {TurnKind::kUsr}, vocab, limit), DataError);
  // generous limit passes
  limit.max_seq_len = 4096;
  CHECK_NOTHROW(render(c, {TurnKind::kUsr}, vocab, limit));
}

TEST_CASE("rendering is injective over the golden corpus") {
  std::vector<Conversation> corpus = {
      conv("i1", {{"<image> A?", "B."}}),
      conv("i2", {{"<image> A?", "C."}}),
      conv("i3", {{"<image> A?", "B."}, {"D?", "E."}}),
      conv("i4", {{"<image> X?", "B."}}),
      conv("i5", {{"<image>", "B."}}),
  };
  std::set<std::vector<int>> streams;
  for (const auto& c : corpus) {
    TurnSequence seq = render(c, assign_turn_kinds(c, SqPolicy{0.5, 7}), vocab);
    streams.insert(seq.token_ids);
  }
  CHECK(streams.size() == corpus.size());
}

TEST_CASE("record file round-trips and is byte-stable") {
  Conversation c1 = conv("r1", {{"<image> Q?", "A."}});
  Conversation c2 = conv("r2", {{"<image> W?", "B."}, {"X?", "C."}});
  std::vector<SequenceRecord> records;
  for (const auto& c : {c1, c2})
    records.push_back(to_record(render(c, assign_turn_kinds(c, SqPolicy{0.0, 7}), vocab)));

  const std::string bytes1 = encode_records(records);
  const std::string bytes2 = encode_records(records);
  CHECK(bytes1 == bytes2);

  const auto decoded = decode_records(bytes1, "test");
  REQUIRE(decoded.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(decoded[i].id == records[i].id);
    CHECK(decoded[i].token_ids == records[i].token_ids);
    CHECK(decoded[i].loss_mask == records[i].loss_mask);
  }
}

TEST_CASE("record file rejects bad magic and truncation") {
  CHECK_THROWS_AS(decode_records("NOTMAGIC....", "test"), DataError);
  Conversation c = conv("t", {{"<image> Q?", "A."}});
  std::string bytes = encode_records(
      {to_record(render(c, {TurnKind::kUsr}, vocab))});
  bytes.resize(bytes.size() - 3);
  CHECK_THROWS_AS(decode_records(bytes, "test"), DataError);
}

TEST_CASE("conversation JSON parsing accepts the documented schema") {
  const std::string text = R"([
    {"id": "j1", "image": "img1.png", "conversations": [
      {"from": "human", "value": "<image>\nWhat is this?"},
      {"from": "gpt", "value": "A cat."},
      {"from": "human", "value": "What color?"},
      {"from": "gpt", "value": "Black."}
    ]}
  ])";
  const auto convs = parse_conversations_json(text, "inline");
  REQUIRE(convs.size() == 1);
  CHECK(convs[0].id == "j1");
  CHECK(convs[0].image == "img1.png");
  REQUIRE(convs[0].turns.size() == 2);
  CHECK(convs[0].turns[0].question == "<image>\nWhat is this?");
  CHECK(convs[0].turns[1].answer == "Black.");
}

TEST_CASE("conversation JSON rejects malformed records") {
  CHECK_THROWS_AS(parse_conversations_json("{", "x"), DataError);
  CHECK_THROWS_AS(parse_conversations_json("{}", "x"), DataError);
  CHECK_THROWS_AS(parse_conversations_json(
                      R"([{"id":"a","image":"i","conversations":[
                        {"from":"gpt","value":"hi"},{"from":"human","value":"<image>"}]}])",
                      "x"),
                  DataError);
  CHECK_THROWS_AS(parse_conversations_json(
                      R"([{"id":"a","image":"i","conversations":[
                        {"from":"human","value":"no marker"},{"from":"gpt","value":"hi"}]}])",
                      "x"),
                  DataError);
  CHECK_THROWS_AS(parse_conversations_json(
                      R"([{"id":"a","image":"i","conversations":[
                        {"from":"human","value":"<image>"},{"from":"gpt","value":"hi"},
                        {"from":"human","value":"<image> again"},{"from":"gpt","value":"x"}]}])",
                      "x"),
                  DataError);
}

TEST_CASE("corpus stats on an empty dataset are all zero") {
  CorpusStats st = corpus_stats({}, SqPolicy{0.5, 7}, vocab);
  CHECK(st.conversations == 0);
  CHECK(st.turns == 0);
  CHECK(st.vusr_turns == 0);
  CHECK(st.vusr_fraction == 0.0);
  CHECK(st.masked_tokens == 0);
}

TEST_CASE("corpus stats vusr fraction matches the assignment draws exactly") {
  std::vector<Conversation> convs;
  for (int i = 0; i < 20; ++i) {
    Conversation c;
    c.id = "s" + std::to_string(i);
    c.turns.assign(4, {"q", "a"});
    c.turns[0].question = "<image> q";
    convs.push_back(c);
  }
  SqPolicy policy{0.5, 31};
  CorpusStats st = corpus_stats(convs, policy, vocab);
  int vusr = 0, turns = 0;
  for (const auto& c : convs)
    for (TurnKind k : assign_turn_kinds(c, policy)) {
      ++turns;
      vusr += k == TurnKind::kVusr;
    }
  CHECK(st.turns == turns);
  CHECK(st.vusr_turns == vusr);
  CHECK(st.vusr_fraction == double(vusr) / double(turns));
}

TEST_CASE("total masked tokens equal the per-span recount") {
  Conversation c = conv("acct", {{"<image>\nQ?", "Answer one."},
                                 {"Q2?", "Answer two."}});
  TurnSequence seq = render(c, assign_turn_kinds(c, SqPolicy{0.0, 7}), vocab);
  std::size_t via_mask = 0;
  for (std::uint8_t b : seq.loss_mask) via_mask += b;
  std::size_t via_spans = 0;
  for (const Span& s : seq.spans)
    if (s.loss) via_spans += static_cast<std::size_t>(s.len);
  CHECK(via_mask == via_spans);
}
