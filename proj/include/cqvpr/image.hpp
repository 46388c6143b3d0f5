#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace cqvpr {

// Row-major H x W x 3 float image, values in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;  // h * w * 3

  float& at(std::size_t y, std::size_t x, std::size_t c) {
    return pixels[(y * width + x) * 3 + c];
  }
  float at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * 3 + c];
  }
};

Image make_image(std::size_t height, std::size_t width, float fill = 0.0f);

// Binary PPM (P6, maxval 255). The synthetic dataset uses this format.
void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);

// Binary PGM (P5, maxval 255) from already-quantized bytes.
void write_pgm(const std::filesystem::path& path, std::size_t height,
               std::size_t width, const std::vector<std::uint8_t>& gray);

}  // namespace cqvpr
