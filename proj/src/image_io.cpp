#include "rsicam/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <string>

#include "rsicam/error.hpp"

namespace rsicam {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

Image8 read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw FormatError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  const bool gray = (img.format & PNG_FORMAT_FLAG_COLOR) == 0;
  img.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Image8 out;
  out.width = img.width;
  out.height = img.height;
  out.channels = gray ? 1 : 3;
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    png_image_free(&img);
    throw FormatError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  return out;
}

// Netpbm header tokens, skipping '#' comments.
std::size_t read_pnm_number(std::istream& is, const std::filesystem::path& path) {
  int ch = is.get();
  while (is && (std::isspace(ch) || ch == '#')) {
    if (ch == '#') {
      while (is && ch != '\n') ch = is.get();
    }
    ch = is.get();
  }
  if (!is || !std::isdigit(ch)) throw FormatError("malformed PNM header in " + path.string());
  std::size_t value = 0;
  while (is && std::isdigit(ch)) {
    value = value * 10 + static_cast<std::size_t>(ch - '0');
    ch = is.get();
  }
  return value;
}

Image8 read_pnm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open image " + path.string());
  char magic[2] = {};
  is.read(magic, 2);
  if (magic[0] != 'P' || (magic[1] != '2' && magic[1] != '3' && magic[1] != '5' && magic[1] != '6')) {
    throw FormatError("unsupported image format in " + path.string());
  }
  Image8 out;
  out.channels = (magic[1] == '3' || magic[1] == '6') ? 3 : 1;
  out.width = read_pnm_number(is, path);
  out.height = read_pnm_number(is, path);
  const std::size_t maxval = read_pnm_number(is, path);
  if (out.width == 0 || out.height == 0 || maxval == 0 || maxval > 255) {
    throw FormatError("unsupported PNM dimensions or depth in " + path.string());
  }
  out.pixels.resize(out.width * out.height * out.channels);
  if (magic[1] == '5' || magic[1] == '6') {
    is.read(reinterpret_cast<char*>(out.pixels.data()), static_cast<std::streamsize>(out.pixels.size()));
    if (static_cast<std::size_t>(is.gcount()) != out.pixels.size()) throw FormatError("truncated image " + path.string());
  } else {
    for (auto& p : out.pixels) p = static_cast<std::uint8_t>(read_pnm_number(is, path));
  }
  if (maxval != 255) {
    for (auto& p : out.pixels) p = static_cast<std::uint8_t>(std::lround(p * 255.0 / static_cast<double>(maxval)));
  }
  return out;
}

void check_image(const Image8& image) {
  if (image.width == 0 || image.height == 0 || (image.channels != 1 && image.channels != 3) ||
      image.pixels.size() != image.width * image.height * image.channels) {
    throw DimensionError("inconsistent image buffer");
  }
}

} // namespace

Image8 read_image(const std::filesystem::path& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw IoError("cannot open image " + path.string());
  unsigned char sig[8] = {};
  probe.read(reinterpret_cast<char*>(sig), 8);
  probe.close();
  if (png_sig_cmp(sig, 0, 8) == 0) return read_png(path);
  return read_pnm(path);
}

void write_png(const std::filesystem::path& path, const Image8& image) {
  check_image(image);
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + img.message);
  }
}

void write_ppm(const std::filesystem::path& path, const Image8& image) {
  check_image(image);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << (image.channels == 3 ? "P6" : "P5") << "\n" << image.width << " " << image.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

void write_image(const std::filesystem::path& path, const Image8& image) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".png") {
    write_png(path, image);
  } else {
    write_ppm(path, image);
  }
}

Tensor image_to_tensor(const Image8& image, const Preprocessing& pre, std::size_t channels) {
  check_image(image);
  if (image.channels != channels && image.channels != 1) {
    throw DimensionError("image has " + std::to_string(image.channels) + " channels but the model expects " +
                         std::to_string(channels));
  }
  const std::size_t plane = image.width * image.height;
  std::vector<float> data(channels * plane);
  for (std::size_t c = 0; c < channels; ++c) {
    const std::size_t src_c = image.channels == 1 ? 0 : c;
    const float mean = pre.mean.empty() ? 0.0f : pre.mean[c];
    for (std::size_t i = 0; i < plane; ++i) {
      data[c * plane + i] = static_cast<float>(image.pixels[i * image.channels + src_c]) * pre.scale - mean;
    }
  }
  return Tensor({channels, image.height, image.width}, std::move(data));
}

namespace {
std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}
} // namespace

Image8 tensor_to_image(const Tensor& chw) {
  if (chw.rank() != 3 || (chw.dim(0) != 1 && chw.dim(0) != 3)) {
    throw DimensionError("tensor_to_image expects 1 x H x W or 3 x H x W, got " + shape_to_string(chw.shape()));
  }
  Image8 out;
  out.channels = chw.dim(0);
  out.height = chw.dim(1);
  out.width = chw.dim(2);
  out.pixels.resize(out.channels * out.height * out.width);
  for (std::size_t c = 0; c < out.channels; ++c) {
    for (std::size_t y = 0; y < out.height; ++y) {
      for (std::size_t x = 0; x < out.width; ++x) {
        out.pixels[(y * out.width + x) * out.channels + c] = to_byte(chw.at(c, y, x));
      }
    }
  }
  return out;
}

Image8 grid_to_image(const Tensor& grid) {
  if (grid.rank() != 2) throw DimensionError("grid_to_image expects a rank-2 tensor");
  return tensor_to_image(grid.reshape({1, grid.dim(0), grid.dim(1)}));
}

} // namespace rsicam
