#include "vble/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

namespace vble {

namespace fs = std::filesystem;

namespace {

std::string lower_extension(const fs::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
  return e;
}

// Interleaved HWC bytes to a planar [1, C, H, W] tensor.
Tensor from_interleaved(const std::vector<unsigned char>& px, std::size_t c, std::size_t h, std::size_t w) {
  std::vector<double> v(c * h * w);
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t k = 0; k < c; ++k) v[k * h * w + i] = px[i * c + k] / 255.0;
  return Tensor({1, c, h, w}, std::move(v));
}

Tensor read_png(const fs::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw ImageError("cannot read PNG " + path.string() + ": " + img.message);
  }
  if (img.format & PNG_FORMAT_FLAG_LINEAR) {
    png_image_free(&img);
    throw ImageError("unsupported PNG " + path.string() + ": only 8-bit images are supported (16-bit found)");
  }
  const bool color = img.format & PNG_FORMAT_FLAG_COLOR;
  img.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const std::size_t c = color ? 3 : 1;
  std::vector<unsigned char> px(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, px.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw ImageError("cannot decode PNG " + path.string() + ": " + msg);
  }
  return from_interleaved(px, c, img.height, img.width);
}

Tensor read_pnm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open " + path.string());
  auto token = [&] {
    std::string t;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        in.ignore(1 << 20, '\n');
      } else if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
      } else {
        t += ch;
      }
    }
    return t;
  };
  const std::string magic = token();
  if (magic != "P5" && magic != "P6") throw ImageError("unsupported PNM " + path.string() + ": need binary P5/P6");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw ImageError("malformed PNM header in " + path.string());
  }
  if (maxval != 255) throw ImageError("unsupported PNM " + path.string() + ": only maxval 255 is supported");
  const std::size_t c = magic == "P6" ? 3 : 1;
  std::vector<unsigned char> px(w * h * c);
  in.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (static_cast<std::size_t>(in.gcount()) != px.size()) throw ImageError("truncated PNM " + path.string());
  return from_interleaved(px, c, h, w);
}

}  // namespace

unsigned char to_byte(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<unsigned char>(std::floor(c * 255.0 + 0.5));
}

Tensor read_image(const fs::path& path) {
  if (!fs::exists(path)) throw ImageError("image not found: " + path.string());
  const std::string ext = lower_extension(path);
  if (ext == ".png") return read_png(path);
  if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") return read_pnm(path);
  throw ImageError("unsupported image format: " + path.string());
}

void write_image(const fs::path& path, const Tensor& image) {
  const std::size_t d = image.dim();
  if (d < 2 || d > 4 || (d == 4 && image.extent(0) != 1)) {
    throw ShapeError("write_image: expected [1,C,H,W], [C,H,W] or [H,W], got " + to_string(image.shape()));
  }
  const std::size_t h = image.extent(d - 2), w = image.extent(d - 1), c = image.size() / (h * w);
  if (c != 1 && c != 3) throw ShapeError("write_image: need 1 or 3 channels, got " + std::to_string(c));
  std::vector<unsigned char> px(c * h * w);
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t k = 0; k < c; ++k) px[i * c + k] = to_byte(image[k * h * w + i]);

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const std::string ext = lower_extension(path);
  if (ext == ".pgm" || ext == ".ppm") {
    if ((ext == ".pgm") != (c == 1)) throw ImageError("channel count does not match " + ext);
    std::ofstream out(path, std::ios::binary);
    out << (c == 1 ? "P5" : "P6") << '\n' << w << ' ' << h << "\n255\n";
    out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
    if (!out) throw ImageError("cannot write " + path.string());
    return;
  }
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = c == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, px.data(), 0, nullptr)) {
    throw ImageError("cannot write PNG " + path.string() + ": " + img.message);
  }
}

}  // namespace vble
