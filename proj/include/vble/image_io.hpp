#pragma once

#include <filesystem>
#include <stdexcept>

#include "vble/tensor.hpp"

namespace vble {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reads an 8-bit PNG (gray or RGB; alpha is dropped) or a binary PGM/PPM
/// into a [1, C, H, W] tensor with intensities in [0, 1].
Tensor read_image(const std::filesystem::path& path);

/// Writes [1, C, H, W], [C, H, W] or [H, W] (C = 1 or 3) as PNG, or PGM/PPM
/// when the extension is .pgm/.ppm. Values are clamped to [0, 1] and rounded
/// half-up to 8 bits.
void write_image(const std::filesystem::path& path, const Tensor& image);

/// Clamp and round-half-up to 0..255.
unsigned char to_byte(double v);

}  // namespace vble
