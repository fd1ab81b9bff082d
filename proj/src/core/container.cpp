#include "core/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "core/error.hpp"

namespace mergcn {

namespace {

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double v) { put(out, std::bit_cast<std::uint64_t>(v)); }

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(bytes_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }

  double get_f64() { return std::bit_cast<double>(get<std::uint64_t>()); }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      fail(ErrorCode::Parse, "MERT container truncated at byte " + std::to_string(pos_));
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_container(std::span<const NamedTensor> entries) {
  std::vector<std::uint8_t> out{'M', 'E', 'R', 'T'};
  put<std::uint32_t>(out, kContainerVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (e.name.size() > std::numeric_limits<std::uint16_t>::max()) {
      fail(ErrorCode::InvalidArgument, "container entry name too long");
    }
    put<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.tensor.ndim()));
    for (std::size_t d : e.tensor.shape()) put<std::uint64_t>(out, d);
    out.reserve(out.size() + 8 * e.tensor.numel());
    for (double v : e.tensor.values()) put_f64(out, v);
  }
  return out;
}

std::vector<NamedTensor> decode_container(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (r.get_string(4) != "MERT") fail(ErrorCode::Parse, "not a MERT container (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kContainerVersion) {
    fail(ErrorCode::Parse, "unsupported MERT version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>();
  std::vector<NamedTensor> entries;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto name_len = r.get<std::uint16_t>();
    std::string name = r.get_string(name_len);
    const auto ndim = r.get<std::uint32_t>();
    if (ndim == 0 || ndim > 16) fail(ErrorCode::Parse, "entry '" + name + "' has invalid rank " + std::to_string(ndim));
    Shape shape(ndim);
    std::uint64_t numel = 1;
    for (auto& d : shape) {
      const auto v = r.get<std::uint64_t>();
      if (v == 0) fail(ErrorCode::Parse, "entry '" + name + "' has a zero dimension");
      if (numel > r.remaining() / v) fail(ErrorCode::Parse, "entry '" + name + "' larger than the file");
      numel *= v;
      d = static_cast<std::size_t>(v);
    }
    if (numel * 8 > r.remaining()) fail(ErrorCode::Parse, "entry '" + name + "' data truncated");
    std::vector<double> data(numel);
    for (auto& v : data) v = r.get_f64();
    entries.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  if (r.remaining() != 0) fail(ErrorCode::Parse, "trailing bytes after MERT entries");
  return entries;
}

void write_container(const std::filesystem::path& path, std::span<const NamedTensor> entries) {
  const auto bytes = encode_container(entries);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorCode::Io, "cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) fail(ErrorCode::Io, "failed writing '" + path.string() + "'");
}

std::vector<NamedTensor> read_container(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorCode::Io, "cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return decode_container(bytes);
  } catch (const Error& e) {
    fail(e.code(), path.string() + ": " + e.what());
  }
}

const Tensor* find_entry(std::span<const NamedTensor> entries, const std::string& name) {
  for (const auto& e : entries) {
    if (e.name == name) return &e.tensor;
  }
  return nullptr;
}

}  // namespace mergcn
