#include "fulora/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "fulora/error.hpp"
#include "fulora/io_util.hpp"

namespace fulora {

namespace {

constexpr char kMagic[8] = {'F', 'U', 'L', 'O', 'R', 'A', 'C', 'K'};

template <class T>
void put_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& buf, std::string origin) : buf_(buf), origin_(std::move(origin)) {}

  template <class T>
  T get() {
    need(sizeof(T));
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, buf_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    pos_ += sizeof(T);
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
  }

  std::string bytes(std::uint64_t n) {
    need(n);
    std::string s = buf_.substr(pos_, static_cast<std::size_t>(n));
    pos_ += static_cast<std::size_t>(n);
    return s;
  }

  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > buf_.size() - pos_) throw DataError(origin_ + ": truncated checkpoint");
  }
  const std::string& buf_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace

void Checkpoint::put(const std::string& name, const Tensor& value) {
  for (auto& [n, t] : tensors_) {
    if (n == name) {
      t = value.detach();
      return;
    }
  }
  tensors_.emplace_back(name, value.detach());
}

void Checkpoint::put_text(const std::string& name, std::string text) {
  for (auto& [n, t] : texts_) {
    if (n == name) {
      t = std::move(text);
      return;
    }
  }
  texts_.emplace_back(name, std::move(text));
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& [n, t] : tensors_)
    if (n == name) return true;
  return false;
}

bool Checkpoint::has_text(const std::string& name) const {
  for (const auto& [n, t] : texts_)
    if (n == name) return true;
  return false;
}

const Tensor& Checkpoint::get(const std::string& name) const {
  for (const auto& [n, t] : tensors_)
    if (n == name) return t;
  throw DataError("checkpoint has no tensor '" + name + "'");
}

const std::string& Checkpoint::text(const std::string& name) const {
  for (const auto& [n, t] : texts_)
    if (n == name) return t;
  throw DataError("checkpoint has no text entry '" + name + "'");
}

void Checkpoint::put_params(const ParamStore& store, const std::string& prefix) {
  for (const auto* p : store.all()) put(prefix + p->name(), p->value());
}

void Checkpoint::load_params(ParamStore& store, const std::string& prefix) const {
  for (auto* p : store.all()) {
    const Tensor& src = get(prefix + p->name());
    if (src.shape() != p->value().shape()) {
      throw DataError("checkpoint tensor '" + prefix + p->name() + "' has shape " + shape_str(src.shape()) +
                      ", model expects " + shape_str(p->value().shape()));
    }
    auto dst = p->value().mutable_data();
    auto s = src.data();
    std::copy(s.begin(), s.end(), dst.begin());
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::string out(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(out, Checkpoint::kVersion);
  put_le<std::uint64_t>(out, ckpt.tensors().size() + ckpt.texts().size());
  for (const auto& [name, t] : ckpt.tensors()) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_le<std::uint8_t>(out, 0);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape().size()));
    for (auto d : t.shape()) put_le<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    for (float v : t.data()) put_le<float>(out, v);
  }
  for (const auto& [name, text] : ckpt.texts()) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_le<std::uint8_t>(out, 1);
    put_le<std::uint64_t>(out, text.size());
    out += text;
  }
  write_file_atomic(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string buf = read_file(path);
  Reader r(buf, path.string());
  if (r.bytes(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) {
    throw DataError(path.string() + ": not a checkpoint file (bad magic)");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != Checkpoint::kVersion) {
    throw DataError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.get<std::uint64_t>();
  Checkpoint ckpt;
  for (std::uint64_t e = 0; e < count; ++e) {
    const auto name_len = r.get<std::uint32_t>();
    std::string name = r.bytes(name_len);
    const auto kind = r.get<std::uint8_t>();
    if (kind == 0) {
      const auto rank = r.get<std::uint32_t>();
      Shape shape;
      std::uint64_t n = 1;
      for (std::uint32_t i = 0; i < rank; ++i) {
        const auto d = r.get<std::uint64_t>();
        if (d == 0 || d > (1ULL << 40)) throw DataError(path.string() + ": invalid dimension in '" + name + "'");
        shape.push_back(static_cast<std::int64_t>(d));
        n *= d;
      }
      if (n > buf.size()) throw DataError(path.string() + ": truncated checkpoint");
      std::vector<float> data(static_cast<std::size_t>(n));
      for (auto& v : data) v = r.get<float>();
      ckpt.put(name, Tensor::from(std::move(shape), std::move(data)));
    } else if (kind == 1) {
      const auto len = r.get<std::uint64_t>();
      ckpt.put_text(name, r.bytes(len));
    } else {
      throw DataError(path.string() + ": unknown entry kind " + std::to_string(kind));
    }
  }
  if (!r.done()) throw DataError(path.string() + ": trailing bytes after last entry");
  return ckpt;
}

}  // namespace fulora
