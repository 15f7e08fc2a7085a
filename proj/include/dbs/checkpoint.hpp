#pragma once

// Binary checkpoint archive: a config fingerprint followed by named float arrays.
//
//   "DBSCKPT1" | u64 step | str fingerprint | u64 count | count x (str name | u32 ndim | ndim x i32 | f32 data)
//
// Strings are u64 length + bytes; all integers and floats are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

#include "dbs/image_io.hpp"
#include "dbs/nn.hpp"

namespace dbs {

static_assert(std::endian::native == std::endian::little, "checkpoint codec assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'D', 'B', 'S', 'C', 'K', 'P', 'T', '1'};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  std::uint64_t step = 0;
  std::string fingerprint;
  std::map<std::string, Tensor<float>> arrays;
};

namespace detail {

template <class U>
void put(std::string& out, U v) {
  char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  out.append(b, sizeof(U));
}

inline void put_str(std::string& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out += s;
}

class Reader {
 public:
  explicit Reader(const std::string& buf) : buf_(buf) {}
  template <class U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::string get_str() {
    const auto n = get<std::uint64_t>();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void read(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, buf_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw CheckpointError("checkpoint truncated");
  }
  const std::string& buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& c) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put<std::uint64_t>(out, c.step);
  detail::put_str(out, c.fingerprint);
  detail::put<std::uint64_t>(out, c.arrays.size());
  for (const auto& [name, t] : c.arrays) {
    detail::put_str(out, name);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.ndim()));
    for (int d : t.shape()) detail::put<std::int32_t>(out, d);
    out.append(reinterpret_cast<const char*>(t.ptr()), t.numel() * sizeof(float));
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& buf) {
  if (buf.size() < sizeof(kCheckpointMagic) || std::memcmp(buf.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw CheckpointError("not a checkpoint (bad magic)");
  const std::string body = buf.substr(sizeof(kCheckpointMagic));
  detail::Reader r(body);
  Checkpoint c;
  c.step = r.get<std::uint64_t>();
  c.fingerprint = r.get_str();
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.get_str();
    const auto ndim = r.get<std::uint32_t>();
    if (ndim > 8) throw CheckpointError("checkpoint array '" + name + "' has implausible rank");
    Shape s(ndim);
    for (auto& d : s) {
      d = r.get<std::int32_t>();
      if (d < 0) throw CheckpointError("negative extent in checkpoint array '" + name + "'");
    }
    Tensor<float> t(s);
    r.read(t.ptr(), t.numel() * sizeof(float));
    c.arrays.emplace(std::move(name), std::move(t));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint payload");
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  write_file_atomic(path, encode_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

template <class T>
Checkpoint snapshot(const ParamStore<T>& ps, const std::string& fingerprint, std::uint64_t step) {
  Checkpoint c{step, fingerprint, {}};
  for (const auto& [name, v] : ps.params()) c.arrays.emplace(name, v.value().template cast<float>());
  return c;
}

// Copies checkpoint arrays into the store; the fingerprint and every name/shape must match.
template <class T>
void restore(ParamStore<T>& ps, const Checkpoint& c, const std::string& expected_fingerprint) {
  if (c.fingerprint != expected_fingerprint)
    throw CheckpointError("checkpoint fingerprint mismatch: file has '" + c.fingerprint + "', model expects '" +
                          expected_fingerprint + "'");
  if (c.arrays.size() != ps.params().size()) throw CheckpointError("checkpoint parameter count mismatch");
  for (const auto& [name, v] : ps.params()) {
    auto it = c.arrays.find(name);
    if (it == c.arrays.end()) throw CheckpointError("checkpoint lacks parameter " + name);
    if (it->second.shape() != v.value().shape())
      throw CheckpointError("shape mismatch for " + name + ": " + shape_str(it->second.shape()) + " vs " +
                            shape_str(v.value().shape()));
    Var<T> handle = v;
    handle.mutable_value() = it->second.template cast<T>();
  }
}

// Checkpoint file names: ckpt_<step>.bin, with `latest` holding the newest file name.
inline std::string checkpoint_name(std::uint64_t step) { return "ckpt_" + std::to_string(step) + ".bin"; }

inline void write_latest_pointer(const std::filesystem::path& dir, std::uint64_t step) {
  write_file_atomic(dir / "latest", checkpoint_name(step) + "\n");
}

// Accepts a checkpoint file or a directory containing a `latest` pointer.
inline std::filesystem::path resolve_checkpoint(const std::filesystem::path& p) {
  if (!std::filesystem::is_directory(p)) return p;
  std::ifstream in(p / "latest");
  std::string name;
  if (!(in >> name)) throw CheckpointError("no readable 'latest' pointer in " + p.string());
  return p / name;
}

}  // namespace dbs
