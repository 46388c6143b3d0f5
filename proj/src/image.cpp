#include "cqvpr/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "cqvpr/errors.hpp"

namespace cqvpr {

Image make_image(std::size_t height, std::size_t width, float fill) {
  Image img;
  img.height = height;
  img.width = width;
  img.pixels.assign(height * width * 3, fill);
  return img;
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << "P6\n" << image.width << " " << image.height << "\n255\n";
  std::vector<std::uint8_t> bytes(image.pixels.size());
  for (std::size_t i = 0; i < image.pixels.size(); ++i) {
    const float v = std::clamp(image.pixels[i], 0.0f, 1.0f);
    bytes[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("short write to " + path.string());
}

namespace {
// Reads one whitespace-delimited token, skipping '#' comments.
std::string next_token(std::istream& in) {
  std::string tok;
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (std::isspace(c)) {
      c = in.get();
    } else {
      break;
    }
  }
  while (c != EOF && !std::isspace(c)) {
    tok.push_back(static_cast<char>(c));
    c = in.get();
  }
  return tok;
}
}  // namespace

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  const std::string magic = next_token(f);
  if (magic != "P6") {
    throw FormatError(path.string() + ": expected P6 magic, got '" + magic + "'");
  }
  const std::string w_tok = next_token(f);
  const std::string h_tok = next_token(f);
  const std::string max_tok = next_token(f);
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(w_tok);
    h = std::stoul(h_tok);
    maxval = std::stoul(max_tok);
  } catch (const std::exception&) {
    throw FormatError(path.string() + ": bad PPM header");
  }
  if (maxval != 255) {
    throw FormatError(path.string() + ": only maxval 255 supported");
  }
  Image img = make_image(h, w);
  std::vector<std::uint8_t> bytes(h * w * 3);
  f.read(reinterpret_cast<char*>(bytes.data()),
         static_cast<std::streamsize>(bytes.size()));
  if (f.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw FormatError(path.string() + ": truncated pixel payload");
  }
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    img.pixels[i] = static_cast<float>(bytes[i]) / 255.0f;
  }
  return img;
}

void write_pgm(const std::filesystem::path& path, std::size_t height,
               std::size_t width, const std::vector<std::uint8_t>& gray) {
  if (gray.size() != height * width) {
    throw ShapeError("write_pgm: payload size " + std::to_string(gray.size()) +
                     " does not match " + std::to_string(height) + "x" +
                     std::to_string(width));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << "P5\n" << width << " " << height << "\n255\n";
  f.write(reinterpret_cast<const char*>(gray.data()),
          static_cast<std::streamsize>(gray.size()));
  if (!f) throw IoError("short write to " + path.string());
}

}  // namespace cqvpr
