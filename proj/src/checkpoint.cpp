#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_map>

#include <zlib.h>

#include "tempcloud/network.hpp"

namespace tempcloud::network {

namespace {

constexpr char kMagic[4] = {'T', 'L', 'F', 'P'};
constexpr std::uint8_t kVersion = 0x01;

class Writer {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out_.insert(out_.end(), p, p + n);
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int s = 0; s < 32; s += 8) out_.push_back(static_cast<std::uint8_t>(v >> s));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void text(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t>& buffer() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw FormatError("checkpoint: truncated file");
  }
  std::uint8_t u8() {
    need(1);
    return in_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int s = 0; s < 32; s += 8) v |= static_cast<std::uint32_t>(in_[pos_++]) << s;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string text() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t position() const { return pos_; }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

std::uint32_t checksum(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in bounded chunks.
  std::size_t at = 0;
  while (at < bytes.size()) {
    const std::size_t chunk = std::min<std::size_t>(bytes.size() - at, 1u << 30);
    crc = crc32(crc, bytes.data() + at, static_cast<uInt>(chunk));
    at += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Network& net) {
  const auto tensors = net.tensors();
  Writer w;
  w.bytes(kMagic, 4);
  w.u8(kVersion);
  w.text(serialize_config(net.config));
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, value] : tensors) {
    w.text(name);
    w.u32(2);
    w.u32(static_cast<std::uint32_t>(value->rows()));
    w.u32(static_cast<std::uint32_t>(value->cols()));
    for (Eigen::Index i = 0; i < value->size(); ++i) w.f32(static_cast<float>(value->data()[i]));
  }
  w.u32(checksum(w.buffer()));
  return std::move(w.buffer());
}

Network decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 + 1 + 4) throw FormatError("checkpoint: truncated file");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("checkpoint: bad magic");
  if (bytes[4] != kVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(bytes[4]));
  }
  const auto body = bytes.first(bytes.size() - 4);
  Reader trailer(bytes.last(4));
  if (checksum(body) != trailer.u32()) throw FormatError("checkpoint: checksum mismatch");

  Reader r(body);
  r.need(5);
  for (int i = 0; i < 5; ++i) r.u8();
  NetworkConfig config = parse_config(r.text());
  Network net = build_network(config, 0);

  std::unordered_map<std::string, Matrix*> slots;
  for (const auto& t : net.tensors()) slots.emplace(t.name, t.value);

  const std::uint32_t count = r.u32();
  if (count != slots.size()) throw FormatError("checkpoint: tensor count does not match config");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.text();
    auto it = slots.find(name);
    if (it == slots.end()) throw FormatError("checkpoint: unexpected tensor " + name);
    const std::uint32_t rank = r.u32();
    if (rank != 2) throw FormatError("checkpoint: tensor " + name + " must have rank 2");
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    Matrix& target = *it->second;
    if (rows != target.rows() || cols != target.cols()) {
      throw FormatError("checkpoint: tensor " + name + " has the wrong shape");
    }
    for (Eigen::Index k = 0; k < target.size(); ++k) target.data()[k] = r.f32();
  }
  if (r.position() != body.size()) throw FormatError("checkpoint: trailing bytes");
  return net;
}

void save_checkpoint(const Network& net, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(net);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("cannot write " + path.string());
}

Network load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace tempcloud::network
