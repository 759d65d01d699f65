#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "crft/tensor.hpp"

namespace crft {

namespace fs = std::filesystem;
using json = nlohmann::json;

// CRT1 tensor container: "CRT1", u8 ndim, ndim x u32 LE dims, then
// product(dims) x f32 LE values in row-major order.
std::vector<std::uint8_t> encode_crt1(const Shape& shape, std::span<const double> values);
Tensor decode_crt1(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>");

void write_crt1(const fs::path& path, const Tensor& t);
Tensor read_crt1(const fs::path& path);

// Nearest float32 value; what a CRT1 round trip yields for `v`.
double round_f32(double v);
void round_f32_inplace(std::span<double> values);

// 8-bit binary PGM (P5, maxval 255). Values are clamped to [lo, hi] and
// mapped linearly onto 0..255.
void write_pgm(const fs::path& path, std::size_t height, std::size_t width,
               std::span<const double> values, double lo = 0.0, double hi = 1.0);
std::vector<std::uint8_t> read_pgm(const fs::path& path, std::size_t& height, std::size_t& width);

void write_json(const fs::path& path, const json& j);
json read_json(const fs::path& path);

std::vector<std::uint8_t> read_bytes(const fs::path& path);
void write_bytes(const fs::path& path, std::span<const std::uint8_t> bytes);

}  // namespace crft
