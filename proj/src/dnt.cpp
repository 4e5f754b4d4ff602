#include "dualnorm/dnt.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "dualnorm/error.hpp"

namespace dualnorm {

namespace {

constexpr char kMagic[4] = {'D', 'N', 'T', '1'};
constexpr std::uint32_t kDtypeF32 = 0;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw IntegrityError(std::string("DNT1 truncated while reading ") + what + " at byte " +
                           std::to_string(pos_));
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

NamedArray NamedArray::from_tensor(std::string name, const Tensor& t) {
  const Shape& s = t.shape();
  return NamedArray{std::move(name), {s.n, s.c, s.h, s.w}, t.values()};
}

Tensor NamedArray::to_tensor() const {
  if (dims.size() > 4) throw ShapeError("array '" + name + "' has rank > 4");
  std::uint64_t d[4] = {1, 1, 1, 1};
  const std::size_t off = 4 - dims.size();
  for (std::size_t i = 0; i < dims.size(); ++i) d[off + i] = dims[i];
  return Tensor(Shape{d[0], d[1], d[2], d[3]}, data);
}

std::vector<std::uint8_t> encode_dnt(const std::vector<NamedArray>& arrays) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_u32(out, static_cast<std::uint32_t>(arrays.size()));
  for (const NamedArray& a : arrays) {
    std::uint64_t numel = 1;
    for (std::uint64_t d : a.dims) numel *= d;
    if (numel != a.data.size()) {
      throw ShapeError("array '" + a.name + "' payload does not match its dims");
    }
    put_u32(out, static_cast<std::uint32_t>(a.name.size()));
    out.insert(out.end(), a.name.begin(), a.name.end());
    put_u32(out, kDtypeF32);
    put_u32(out, static_cast<std::uint32_t>(a.dims.size()));
    for (std::uint64_t d : a.dims) put_u64(out, d);
    for (float v : a.data) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

std::vector<NamedArray> decode_dnt(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (r.str(4, "magic") != std::string(kMagic, 4)) throw IntegrityError("not a DNT1 file (bad magic)");
  const std::uint32_t count = r.u32("tensor count");
  std::vector<NamedArray> arrays;
  for (std::uint32_t t = 0; t < count; ++t) {
    NamedArray a;
    const std::uint32_t name_len = r.u32("name length");
    a.name = r.str(name_len, "name");
    const std::uint32_t dtype = r.u32("dtype");
    if (dtype != kDtypeF32) {
      throw IntegrityError("array '" + a.name + "' has unsupported dtype " + std::to_string(dtype));
    }
    const std::uint32_t rank = r.u32("rank");
    std::uint64_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const std::uint64_t d = r.u64("dims");
      if (d != 0 && numel > std::numeric_limits<std::uint64_t>::max() / d) {
        throw IntegrityError("array '" + a.name + "' dims overflow");
      }
      numel *= d;
      a.dims.push_back(d);
    }
    if (numel > r.remaining() / 4) {
      throw IntegrityError("DNT1 truncated in payload of '" + a.name + "'");
    }
    a.data.resize(numel);
    for (std::uint64_t i = 0; i < numel; ++i) a.data[i] = std::bit_cast<float>(r.u32("payload"));
    arrays.push_back(std::move(a));
  }
  if (r.remaining() != 0) {
    throw IntegrityError("DNT1 has " + std::to_string(r.remaining()) + " trailing bytes");
  }
  return arrays;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IntegrityError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

void write_dnt(const std::filesystem::path& path, const std::vector<NamedArray>& arrays) {
  write_file_bytes(path, encode_dnt(arrays));
}

std::vector<NamedArray> read_dnt(const std::filesystem::path& path) {
  return decode_dnt(read_file_bytes(path));
}

std::string fnv1a_hex(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  static const char* hex = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = hex[h & 0xf];
    h >>= 4;
  }
  return s;
}

}  // namespace dualnorm
