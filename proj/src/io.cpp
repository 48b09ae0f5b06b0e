#include "odeflow/io.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace odeflow {

namespace {

constexpr int kMaxExtent = 1 << 20;

void put_u32(std::ostream& os, uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}

uint32_t get_u32(std::istream& is, const std::string& what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw TruncatedFile("truncated file reading " + what);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void put_f32(std::ostream& os, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(os, bits);
}

float get_f32(std::istream& is, const std::string& what) {
  const uint32_t bits = get_u32(is, what);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  return os;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path);
  return is;
}

}  // namespace

void write_flo(const Tensor& flow, const std::string& path) {
  const auto& s = flow.shape();
  if (s.size() != 3 || s[2] != 2) throw IoError("write_flo: flow must be [H,W,2]");
  flow.ensure_finite("write_flo input");
  const int h = s[0], w = s[1];
  if (h > kMaxExtent || w > kMaxExtent) throw IoError("write_flo: dimension overflow");
  auto os = open_out(path);
  os.write("PIEH", 4);
  put_u32(os, static_cast<uint32_t>(w));
  put_u32(os, static_cast<uint32_t>(h));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      put_f32(os, static_cast<float>(flow.at(y, x, 0)));
      put_f32(os, static_cast<float>(flow.at(y, x, 1)));
    }
  }
  if (!os) throw IoError("write_flo: write failed for " + path);
}

Tensor read_flo(const std::string& path) {
  auto is = open_in(path);
  char magic[4];
  if (!is.read(magic, 4)) throw TruncatedFile("truncated .flo header: " + path);
  if (std::memcmp(magic, "PIEH", 4) != 0) throw BadMagic("bad .flo magic in " + path);
  const uint32_t w = get_u32(is, ".flo width");
  const uint32_t h = get_u32(is, ".flo height");
  if (w == 0 || h == 0 || w > kMaxExtent || h > kMaxExtent) {
    throw IoError("read_flo: dimension overflow (" + std::to_string(w) + "x" + std::to_string(h) +
                  ")");
  }
  Tensor flow({static_cast<int>(h), static_cast<int>(w), 2});
  for (uint32_t y = 0; y < h; ++y) {
    for (uint32_t x = 0; x < w; ++x) {
      flow.at(y, x, 0) = get_f32(is, ".flo payload");
      flow.at(y, x, 1) = get_f32(is, ".flo payload");
    }
  }
  return flow;
}

void write_ppm(const Tensor& image, const std::string& path) {
  const auto& s = image.shape();
  if (s.size() != 3 || s[2] != 3) throw IoError("write_ppm: image must be [H,W,3]");
  const int h = s[0], w = s[1];
  auto os = open_out(path);
  os << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(image.at(y, x, c), 0.0, 1.0);
        row[static_cast<size_t>(x) * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
    }
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!os) throw IoError("write_ppm: write failed for " + path);
}

Tensor read_ppm(const std::string& path) {
  auto is = open_in(path);
  std::string magic;
  is >> magic;
  if (magic != "P6") throw BadMagic("bad .ppm magic in " + path);
  auto next_int = [&](const char* what) {
    // skip whitespace and '#' comments
    int c = is.peek();
    while (c == '#' || std::isspace(c)) {
      if (c == '#') {
        std::string line;
        std::getline(is, line);
      } else {
        is.get();
      }
      c = is.peek();
    }
    long v = -1;
    is >> v;
    if (!is || v < 0) throw IoError(std::string("read_ppm: malformed header field ") + what);
    return v;
  };
  const long w = next_int("width");
  const long h = next_int("height");
  const long maxval = next_int("maxval");
  if (w == 0 || h == 0 || w > kMaxExtent || h > kMaxExtent) throw IoError("read_ppm: bad extents");
  if (maxval != 255) throw IoError("read_ppm: only maxval 255 supported");
  is.get();  // single whitespace after maxval
  Tensor img({static_cast<int>(h), static_cast<int>(w), 3});
  std::vector<unsigned char> buf(static_cast<size_t>(w) * 3);
  for (long y = 0; y < h; ++y) {
    if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
      throw TruncatedFile("truncated .ppm payload: " + path);
    }
    for (long x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(static_cast<int>(y), static_cast<int>(x), c) =
            buf[static_cast<size_t>(x) * 3 + c] / 255.0;
  }
  return img;
}

namespace {
constexpr char kCkptMagic[8] = {'O', 'D', 'F', 'L', 'O', 'W', 'C', 'K'};
}

void write_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  auto os = open_out(path);
  os.write(kCkptMagic, 8);
  put_u32(os, ckpt.version);
  put_u32(os, static_cast<uint32_t>(ckpt.config_json.size()));
  os.write(ckpt.config_json.data(), static_cast<std::streamsize>(ckpt.config_json.size()));
  put_u32(os, static_cast<uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    put_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<uint32_t>(t.ndim()));
    for (int i = 0; i < t.ndim(); ++i) put_u32(os, static_cast<uint32_t>(t.dim(i)));
    for (int64_t i = 0; i < t.size(); ++i) put_f32(os, static_cast<float>(t[i]));
  }
  if (!os) throw IoError("write_checkpoint: write failed for " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
  auto is = open_in(path);
  char magic[8];
  if (!is.read(magic, 8)) throw TruncatedFile("truncated checkpoint header: " + path);
  if (std::memcmp(magic, kCkptMagic, 8) != 0) throw BadMagic("bad checkpoint magic in " + path);
  Checkpoint ckpt;
  ckpt.version = get_u32(is, "checkpoint version");
  if (ckpt.version != 1) throw IoError("unsupported checkpoint version " + std::to_string(ckpt.version));
  const uint32_t json_len = get_u32(is, "config length");
  ckpt.config_json.resize(json_len);
  if (json_len && !is.read(ckpt.config_json.data(), json_len)) {
    throw TruncatedFile("truncated checkpoint config: " + path);
  }
  const uint32_t count = get_u32(is, "tensor count");
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = get_u32(is, "tensor name length");
    std::string name(name_len, '\0');
    if (name_len && !is.read(name.data(), name_len)) {
      throw TruncatedFile("truncated tensor name: " + path);
    }
    const uint32_t ndim = get_u32(is, "tensor rank");
    if (ndim > 8) throw IoError("read_checkpoint: implausible tensor rank");
    std::vector<int> shape;
    for (uint32_t d = 0; d < ndim; ++d) {
      const uint32_t e = get_u32(is, "tensor extent");
      if (e == 0 || e > kMaxExtent) throw IoError("read_checkpoint: dimension overflow");
      shape.push_back(static_cast<int>(e));
    }
    Tensor t(shape);
    for (int64_t j = 0; j < t.size(); ++j) t[j] = get_f32(is, "tensor payload");
    ckpt.tensors.emplace_back(std::move(name), std::move(t));
  }
  return ckpt;
}

}  // namespace odeflow
