#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "rsicam/model.hpp"
#include "rsicam/tensor.hpp"

namespace rsicam {

// 8-bit image, interleaved H x W x channels (1 or 3).
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 3;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }
};

// Detects PNG or binary/ASCII PPM/PGM from the file signature.
Image8 read_image(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image8& image);
void write_ppm(const std::filesystem::path& path, const Image8& image);
// Picks the encoder from the extension (.png, otherwise PPM).
void write_image(const std::filesystem::path& path, const Image8& image);

// Byte image -> C x H x W tensor using the model's preprocessing. A
// grayscale image feeding a 3-channel model is replicated across channels.
Tensor image_to_tensor(const Image8& image, const Preprocessing& pre, std::size_t channels);

// C x H x W tensor with values in [0, 1] -> byte image (rounded, clamped).
Image8 tensor_to_image(const Tensor& chw);
// H x W grid in [0, 1] -> grayscale byte image.
Image8 grid_to_image(const Tensor& grid);

} // namespace rsicam
