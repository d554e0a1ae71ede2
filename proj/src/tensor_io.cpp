#include "afa/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace afa {

namespace {

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint32_t u(std::size_t width, const char* what) {
    if (pos_ + width > bytes_.size()) {
      throw FormatError("tensor file truncated at byte " + std::to_string(pos_) + " while reading " + what);
    }
    std::uint32_t v = 0;
    for (std::size_t i = 0; i < width; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += width;
    return v;
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  std::vector<std::uint8_t> out = {'A', 'F', 'A', 'T'};
  out.reserve(8 + 4 * t.rank() + 4 * t.size());
  put_u16(out, kTensorFileVersion);
  put_u16(out, static_cast<std::uint16_t>(t.rank()));
  for (auto e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
  for (double v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  return out;
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "AFAT", 4) != 0) {
    throw FormatError("bad magic at byte 0 (expected \"AFAT\")");
  }
  Reader r(bytes.subspan(4));
  const auto version = r.u(2, "version");
  if (version != kTensorFileVersion) {
    throw FormatError("unsupported version " + std::to_string(version) + " at byte 4");
  }
  const auto rank = r.u(2, "rank");
  if (rank < 1 || rank > 4) throw FormatError("invalid rank " + std::to_string(rank) + " at byte 6");
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::size_t at = 4 + r.pos();
    const auto e = r.u(4, "extent");
    if (e == 0) throw FormatError("zero extent at byte " + std::to_string(at));
    shape.push_back(e);
  }
  const std::size_t count = shape_size(shape);
  if (r.remaining() != 4 * count) {
    throw FormatError("payload at byte " + std::to_string(4 + r.pos()) + " holds " + std::to_string(r.remaining()) +
                      " bytes, expected " + std::to_string(4 * count));
  }
  std::vector<double> data(count);
  for (std::size_t i = 0; i < count; ++i) data[i] = static_cast<double>(std::bit_cast<float>(r.u(4, "payload")));
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor_file(const std::filesystem::path& path, const Tensor& t) {
  const auto bytes = encode_tensor(t);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error("write failed for " + path.string());
}

Tensor load_tensor_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  try {
    return decode_tensor(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void round_to_f32(Tensor& t) {
  for (auto& v : t.values()) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace afa
