#pragma once

// Bit-exact checkpoint format. Everything is little-endian; save -> load ->
// save reproduces the file byte for byte.
//
//   magic "SQVLCKP1"
//   u32 version (1)
//   u64 config length, config JSON bytes
//   u64 step counter
//   u32 rng-state count, per state: u64 key length + bytes, u64 value length + bytes
//   u32 vocab size, per token: u32 id, u32 name length, name bytes
//   u32 tensor count, per tensor: u32 name length, name, u32 ndim, u32 dims[],
//       f64 payload (row-major, little-endian)
//   u8  optimizer flag; when set: u64 adam step, u32 entry count, per entry:
//       u32 name length, name, u32 numel, f64 m[], f64 v[]

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "sqvlm/lora.hpp"
#include "sqvlm/model.hpp"
#include "sqvlm/trainer.hpp"

namespace sqvlm {

namespace detail {

struct ByteWriter {
  std::string out;
  void u8(std::uint8_t v) { out.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double d) { u64(std::bit_cast<std::uint64_t>(d)); }
  void bytes(const std::string& s) { out += s; }
};

struct ByteReader {
  const std::string& in;
  std::size_t off = 0;
  std::string origin;

  void need(std::size_t n) const {
    if (off + n > in.size()) throw DataError(origin + ": truncated checkpoint");
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(in[off++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i)
      v = (v << 8) | static_cast<std::uint8_t>(in[off + static_cast<std::size_t>(i)]);
    off += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i)
      v = (v << 8) | static_cast<std::uint8_t>(in[off + static_cast<std::size_t>(i)]);
    off += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = in.substr(off, n);
    off += n;
    return s;
  }
};

inline const char kCkptMagic[8] = {'S', 'Q', 'V', 'L', 'C', 'K', 'P', '1'};

}  // namespace detail

struct CheckpointMeta {
  std::string config_json;
  std::uint64_t step = 0;
  std::map<std::string, std::string> rng_states;
};

inline std::string encode_checkpoint(const VlmModel& model,
                                     const CheckpointMeta& meta,
                                     const AdamW* opt) {
  detail::ByteWriter w;
  w.bytes(std::string(detail::kCkptMagic, sizeof(detail::kCkptMagic)));
  w.u32(1);
  w.u64(meta.config_json.size());
  w.bytes(meta.config_json);
  w.u64(meta.step);
  w.u32(static_cast<std::uint32_t>(meta.rng_states.size()));
  for (const auto& [k, v] : meta.rng_states) {
    w.u64(k.size());
    w.bytes(k);
    w.u64(v.size());
    w.bytes(v);
  }
  const Vocab& vocab = model.vocab();
  w.u32(static_cast<std::uint32_t>(vocab.size()));
  for (int id = 0; id < vocab.size(); ++id) {
    const std::string name = vocab.token_name(id);
    w.u32(static_cast<std::uint32_t>(id));
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
  }
  const NamedTensors params = model.named_parameters();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u32(static_cast<std::uint32_t>(t.ndim()));
    for (int d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : t.value()) w.f64(v);
  }
  if (opt) {
    w.u8(1);
    w.u64(static_cast<std::uint64_t>(opt->step_count()));
    w.u32(static_cast<std::uint32_t>(opt->state().size()));
    for (const auto& [name, mom] : opt->state()) {
      w.u32(static_cast<std::uint32_t>(name.size()));
      w.bytes(name);
      w.u32(static_cast<std::uint32_t>(mom.m.size()));
      for (double v : mom.m) w.f64(v);
      for (double v : mom.v) w.f64(v);
    }
  } else {
    w.u8(0);
  }
  return w.out;
}

inline void save_checkpoint(const std::string& path, const VlmModel& model,
                            const CheckpointMeta& meta, const AdamW* opt) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path);
  const std::string bytes = encode_checkpoint(model, meta, opt);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Loads tensors by name into an already-constructed model (adapters must be
// attached first when the checkpoint carries them). Returns the metadata.
inline CheckpointMeta decode_checkpoint(const std::string& bytes,
                                        const std::string& origin,
                                        VlmModel& model, AdamW* opt) {
  detail::ByteReader r{bytes, 0, origin};
  if (r.bytes(8) != std::string(detail::kCkptMagic, 8))
    throw DataError(origin + ": not a checkpoint file (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != 1)
    throw DataError(origin + ": unsupported checkpoint version " +
                    std::to_string(version));
  CheckpointMeta meta;
  meta.config_json = r.bytes(r.u64());
  meta.step = r.u64();
  const std::uint32_t nrng = r.u32();
  for (std::uint32_t i = 0; i < nrng; ++i) {
    std::string k = r.bytes(r.u64());
    meta.rng_states[k] = r.bytes(r.u64());
  }
  const std::uint32_t vocab_n = r.u32();
  if (static_cast<int>(vocab_n) != model.vocab().size())
    throw ConfigError(origin + ": vocabulary size mismatch");
  for (std::uint32_t i = 0; i < vocab_n; ++i) {
    const std::uint32_t id = r.u32();
    const std::string name = r.bytes(r.u32());
    if (model.vocab().token_name(static_cast<int>(id)) != name)
      throw ConfigError(origin + ": vocabulary entry mismatch for id " +
                        std::to_string(id));
  }
  auto params = model.param_map();
  const std::uint32_t tensor_n = r.u32();
  if (tensor_n != params.size())
    throw ConfigError(origin + ": checkpoint has " + std::to_string(tensor_n) +
                      " tensors, model expects " + std::to_string(params.size()));
  for (std::uint32_t i = 0; i < tensor_n; ++i) {
    const std::string name = r.bytes(r.u32());
    auto it = params.find(name);
    if (it == params.end())
      throw ConfigError(origin + ": unexpected tensor \"" + name + "\"");
    Shape shape(r.u32());
    for (auto& d : shape) d = static_cast<int>(r.u32());
    if (shape != it->second.shape())
      throw ConfigError(origin + ": shape mismatch for \"" + name + "\": file " +
                        shape_str(shape) + " vs model " +
                        shape_str(it->second.shape()));
    for (double& v : it->second.value()) v = r.f64();
  }
  const std::uint8_t has_opt = r.u8();
  if (has_opt) {
    const std::uint64_t t = r.u64();
    const std::uint32_t entries = r.u32();
    if (opt) {
      opt->set_step_count(static_cast<long>(t));
      opt->state().clear();
    }
    for (std::uint32_t i = 0; i < entries; ++i) {
      const std::string name = r.bytes(r.u32());
      const std::uint32_t n = r.u32();
      AdamW::Moments mom;
      mom.m.resize(n);
      mom.v.resize(n);
      for (auto& v : mom.m) v = r.f64();
      for (auto& v : mom.v) v = r.f64();
      if (opt) opt->state()[name] = std::move(mom);
    }
  }
  return meta;
}

inline CheckpointMeta load_checkpoint(const std::string& path, VlmModel& model,
                                      AdamW* opt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path, model, opt);
}

}  // namespace sqvlm
