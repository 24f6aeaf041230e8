#pragma once

// Binary checkpoint container, little-endian:
//   "FRCK" | u32 version | u64 config length | config JSON bytes
//   | u32 count | count x record            (parameters)
//   | u32 count | count x record            (optimizer state)
//   | 4 x u64 RNG state
// record = u16 name length | name | u8 rank | rank x u64 dims | f64 payload

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "findrec/errors.hpp"
#include "findrec/tensor.hpp"

namespace findrec {

inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  nlohmann::json config = nlohmann::json::object();
  NamedTensors params;
  NamedTensors optimizer;
  // seed, step, epoch, reserved
  std::array<std::uint64_t, 4> rng_state{};

  std::uint64_t step() const { return rng_state[1]; }
};

namespace ckpt_detail {

template <class T>
void put(std::ostream& out, T v) {
  static_assert(std::is_unsigned_v<T>);
  unsigned char b[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <class T>
T get(std::istream& in, const char* what) {
  unsigned char b[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof(T))) {
    throw CorruptRecord(std::string("checkpoint truncated while reading ") + what);
  }
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(b[i]) << (8 * i));
  return v;
}

inline void put_records(std::ostream& out, const NamedTensors& recs) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(recs.size()));
  for (const auto& [name, t] : recs) {
    if (name.size() > 0xffff) throw ConfigError("tensor name too long: " + name);
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
    for (double v : t.data()) put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
}

inline NamedTensors get_records(std::istream& in, const char* section) {
  NamedTensors recs;
  const auto count = get<std::uint32_t>(in, section);
  for (std::uint32_t r = 0; r < count; ++r) {
    const auto len = get<std::uint16_t>(in, "record name length");
    std::string name(len, '\0');
    if (len > 0 && !in.read(name.data(), len)) throw CorruptRecord("checkpoint truncated in record name");
    const auto rank = get<std::uint8_t>(in, "record rank");
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = get<std::uint64_t>(in, "record dims");
      if (d == 0 || d > (std::uint64_t{1} << 32)) throw CorruptRecord("record '" + name + "' has an invalid extent");
      numel *= d;
      if (numel > (std::uint64_t{1} << 34)) throw CorruptRecord("record '" + name + "' is implausibly large");
    }
    std::vector<double> payload(numel);
    for (auto& v : payload) v = std::bit_cast<double>(get<std::uint64_t>(in, "record payload"));
    recs.emplace_back(std::move(name), Tensor(std::move(shape), std::move(payload)));
  }
  return recs;
}

}  // namespace ckpt_detail

inline void save_checkpoint(const Checkpoint& ck, std::ostream& out) {
  using namespace ckpt_detail;
  out.write("FRCK", 4);
  put<std::uint32_t>(out, ck.version);
  const std::string cfg = ck.config.dump();
  put<std::uint64_t>(out, cfg.size());
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  put_records(out, ck.params);
  put_records(out, ck.optimizer);
  for (std::uint64_t w : ck.rng_state) put<std::uint64_t>(out, w);
  if (!out) throw IoError("checkpoint write failed");
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  save_checkpoint(ck, out);
}

inline Checkpoint load_checkpoint(std::istream& in) {
  using namespace ckpt_detail;
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "FRCK", 4) != 0) throw BadMagic("checkpoint magic is not FRCK");
  Checkpoint ck;
  ck.version = get<std::uint32_t>(in, "version");
  if (ck.version != kCheckpointVersion) {
    throw VersionMismatch("checkpoint version " + std::to_string(ck.version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  }
  const auto cfg_len = get<std::uint64_t>(in, "config length");
  if (cfg_len > (std::uint64_t{1} << 30)) throw CorruptRecord("config block is implausibly large");
  std::string cfg(cfg_len, '\0');
  if (cfg_len > 0 && !in.read(cfg.data(), static_cast<std::streamsize>(cfg_len))) {
    throw CorruptRecord("checkpoint truncated in config block");
  }
  ck.config = nlohmann::json::parse(cfg, nullptr, false);
  if (ck.config.is_discarded()) throw CorruptRecord("checkpoint config is not valid JSON");
  ck.params = get_records(in, "parameter count");
  ck.optimizer = get_records(in, "optimizer count");
  for (auto& w : ck.rng_state) w = get<std::uint64_t>(in, "rng state");
  if (in.peek() != std::char_traits<char>::eof()) throw CorruptRecord("trailing bytes after checkpoint");
  return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return load_checkpoint(in);
}

}  // namespace findrec
