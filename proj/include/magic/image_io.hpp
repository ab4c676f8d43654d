#pragma once

#include "magic/errors.hpp"
#include "magic/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace magic {

/// Pixel byte for a value in [-1, 1]; values outside are clamped.
std::uint8_t to_byte(float v);
/// Inverse of to_byte on the 256 representable levels.
float from_byte(std::uint8_t b);

/// Decodes PNG or JPEG bytes (sniffed from the signature) into a (1, 3, H, W) image in
/// [-1, 1]. Grey and palette images are expanded, alpha is dropped.
Tensor4<float> decode_image(std::span<const std::uint8_t> bytes);
Tensor4<float> read_image(const std::filesystem::path& path);

/// 8-bit RGB PNG of a (1, 3, H, W) image. Output bytes depend only on the pixels.
std::vector<std::uint8_t> encode_png(const Tensor4<float>& image);
void write_png(const std::filesystem::path& path, const Tensor4<float>& image);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

/// Bilinear resize (half-pixel centres, edge clamped) of every element and channel.
Tensor4<float> resize_bilinear(const Tensor4<float>& x, Index height, Index width);

}  // namespace magic
