#include "crft/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "crft/error.hpp"

namespace crft {

namespace {

constexpr char kMagic[4] = {'C', 'R', 'T', '1'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

std::vector<std::uint8_t> encode_crt1(const Shape& shape, std::span<const double> values) {
  if (shape.size() > 255) throw ShapeError("CRT1 supports at most 255 dimensions");
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("CRT1 encode: shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  out.push_back(static_cast<std::uint8_t>(shape.size()));
  for (std::size_t d : shape) {
    if (d > std::numeric_limits<std::uint32_t>::max()) throw ShapeError("CRT1 dimension too large");
    put_u32(out, static_cast<std::uint32_t>(d));
  }
  out.reserve(out.size() + 4 * values.size());
  for (double v : values) {
    const float f = static_cast<float>(v);
    if (!std::isfinite(f)) throw NumericError("CRT1 encode: value not representable as finite f32");
    put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

Tensor decode_crt1(std::span<const std::uint8_t> bytes, const std::string& origin) {
  if (bytes.size() < 5 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw IoError(origin + ": not a CRT1 tensor (bad magic)");
  }
  const std::size_t ndim = bytes[4];
  std::size_t pos = 5;
  if (bytes.size() < pos + 4 * ndim) throw IoError(origin + ": truncated CRT1 header");
  Shape shape(ndim);
  for (std::size_t d = 0; d < ndim; ++d, pos += 4) shape[d] = get_u32(bytes.data() + pos);
  const std::size_t n = shape_numel(shape);
  if (bytes.size() != pos + 4 * n) {
    throw IoError(origin + ": CRT1 payload holds " + std::to_string(bytes.size() - pos) +
                  " bytes, expected " + std::to_string(4 * n) + " for shape " + shape_str(shape));
  }
  std::vector<double> values(n);
  for (std::size_t i = 0; i < n; ++i, pos += 4) {
    values[i] = static_cast<double>(std::bit_cast<float>(get_u32(bytes.data() + pos)));
  }
  return Tensor(std::move(shape), std::move(values));
}

void write_crt1(const fs::path& path, const Tensor& t) {
  write_bytes(path, encode_crt1(t.shape(), t.values()));
}

Tensor read_crt1(const fs::path& path) { return decode_crt1(read_bytes(path), path.string()); }

double round_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

void round_f32_inplace(std::span<double> values) {
  for (double& v : values) v = round_f32(v);
}

void write_pgm(const fs::path& path, std::size_t height, std::size_t width,
               std::span<const double> values, double lo, double hi) {
  if (values.size() != height * width) throw ShapeError("PGM: value count does not match size");
  if (!(hi > lo)) throw ConfigError("PGM: empty intensity range");
  std::ostringstream header;
  header << "P5\n" << width << ' ' << height << "\n255\n";
  const std::string h = header.str();
  std::vector<std::uint8_t> out(h.begin(), h.end());
  for (double v : values) {
    const double u = std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
    out.push_back(static_cast<std::uint8_t>(std::lround(u * 255.0)));
  }
  write_bytes(path, out);
}

std::vector<std::uint8_t> read_pgm(const fs::path& path, std::size_t& height, std::size_t& width) {
  auto bytes = read_bytes(path);
  std::string text(bytes.begin(), bytes.begin() + std::min<std::size_t>(bytes.size(), 64));
  std::istringstream is(text);
  std::string magic;
  int maxval = 0;
  is >> magic >> width >> height >> maxval;
  if (!is || magic != "P5" || maxval != 255) throw IoError(path.string() + ": not an 8-bit P5 PGM");
  const auto off = static_cast<std::size_t>(is.tellg()) + 1;
  if (bytes.size() != off + width * height) throw IoError(path.string() + ": truncated PGM");
  return {bytes.begin() + static_cast<std::ptrdiff_t>(off), bytes.end()};
}

void write_json(const fs::path& path, const json& j) {
  const std::string s = j.dump(2) + "\n";
  write_bytes(path, {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
}

json read_json(const fs::path& path) {
  auto bytes = read_bytes(path);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": malformed JSON (" + e.what() + ")");
  }
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> out((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for " + path.string());
  return out;
}

void write_bytes(const fs::path& path, std::span<const std::uint8_t> bytes) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace crft
