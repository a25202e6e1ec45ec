#include "defectforge/image.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

#include "defectforge/error.hpp"

namespace defectforge {

namespace fs = std::filesystem;

ImageBuffer::ImageBuffer(int width, int height, int channels, std::vector<std::uint8_t> data)
    : width_(width), height_(height), channels_(channels), data_(std::move(data)) {
  if (width < 1 || height < 1) {
    throw Error(ErrorCode::InvalidArgument, "image dimensions must be positive");
  }
  if (channels != 1 && channels != 3) {
    throw Error(ErrorCode::InvalidArgument, "image must have 1 or 3 channels");
  }
  if (data_.size() != static_cast<std::size_t>(width) * height * channels) {
    throw Error(ErrorCode::DimensionMismatch, "pixel count does not match width*height*channels");
  }
}

ImageBuffer::ImageBuffer(int width, int height, int channels)
    : ImageBuffer(width, height, channels,
                  std::vector<std::uint8_t>(static_cast<std::size_t>(std::max(width, 0)) *
                                            std::max(height, 0) * std::max(channels, 0))) {}

DefectMask::DefectMask(int width, int height)
    : width_(width), height_(height), bits_(static_cast<std::size_t>(width) * height, 0) {}

DefectMask::DefectMask(int width, int height, std::vector<std::uint8_t> bits)
    : width_(width), height_(height), bits_(std::move(bits)) {
  if (bits_.size() != static_cast<std::size_t>(width) * height) {
    throw Error(ErrorCode::DimensionMismatch, "mask size does not match width*height");
  }
  for (auto& b : bits_) b = b ? 1 : 0;
}

std::size_t DefectMask::area() const noexcept {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

ImageBuffer DefectMask::to_image() const {
  std::vector<std::uint8_t> px(bits_.size());
  std::transform(bits_.begin(), bits_.end(), px.begin(),
                 [](std::uint8_t b) { return b ? std::uint8_t{255} : std::uint8_t{0}; });
  return ImageBuffer(width_, height_, 1, std::move(px));
}

DefectMask DefectMask::from_image(const ImageBuffer& img) {
  const ImageBuffer gray = to_grayscale(img);
  std::vector<std::uint8_t> bits(gray.size());
  std::transform(gray.data().begin(), gray.data().end(), bits.begin(),
                 [](std::uint8_t v) { return v >= 128 ? std::uint8_t{1} : std::uint8_t{0}; });
  return DefectMask(gray.width(), gray.height(), std::move(bits));
}

std::uint8_t clamp_to_u8(double v) noexcept {
  if (!(v > 0.0)) return 0;
  if (v >= 255.0) return 255;
  return static_cast<std::uint8_t>(std::lround(v));
}

ImageBuffer to_grayscale(const ImageBuffer& img) {
  if (img.channels() == 1) return img;
  const auto src = img.pixels();
  std::vector<std::uint8_t> out(static_cast<std::size_t>(img.width()) * img.height());
  for (std::size_t i = 0; i < out.size(); ++i) {
    // Integer weights keep the rounding exact: (299R + 587G + 114B) / 1000.
    const unsigned sum = 299u * src[3 * i] + 587u * src[3 * i + 1] + 114u * src[3 * i + 2];
    out[i] = static_cast<std::uint8_t>((sum + 500u) / 1000u);
  }
  return ImageBuffer(img.width(), img.height(), 1, std::move(out));
}

// ---- PNG -----------------------------------------------------------------

std::vector<std::uint8_t> encode_png(const ImageBuffer& img) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width());
  image.height = static_cast<png_uint_32>(img.height());
  image.format = img.channels() == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;

  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, img.data().data(), 0, nullptr)) {
    throw Error(ErrorCode::IoFailure, std::string("png encode failed: ") + image.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, img.data().data(), 0, nullptr)) {
    throw Error(ErrorCode::IoFailure, std::string("png encode failed: ") + image.message);
  }
  out.resize(size);
  return out;
}

ImageBuffer decode_png(std::span<const std::uint8_t> bytes, const std::string& origin) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw Error(ErrorCode::CorruptHeader, std::string("cannot read png header (") + image.message + ")",
                origin);
  }
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const int channels = color ? 3 : 1;
  std::vector<std::uint8_t> px(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, px.data(), 0, nullptr)) {
    png_image_free(&image);
    throw Error(ErrorCode::CorruptHeader, std::string("cannot decode png (") + image.message + ")",
                origin);
  }
  return ImageBuffer(static_cast<int>(image.width), static_cast<int>(image.height), channels,
                     std::move(px));
}

// ---- PGM / PPM (binary P5 / P6, maxval 255) -------------------------------

namespace {

bool is_png(std::span<const std::uint8_t> b) {
  static constexpr std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  return b.size() >= 8 && std::equal(sig, sig + 8, b.begin());
}

bool is_pnm(std::span<const std::uint8_t> b) {
  return b.size() >= 2 && b[0] == 'P' && (b[1] == '5' || b[1] == '6');
}

ImageBuffer decode_pnm(std::span<const std::uint8_t> bytes, const std::string& origin) {
  std::size_t pos = 2;
  auto next_int = [&]() -> long {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    long v = 0;
    bool any = false;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos] - '0');
      any = true;
      ++pos;
      if (v > (1L << 24)) break;
    }
    return any ? v : -1;
  };
  const int channels = bytes[1] == '6' ? 3 : 1;
  const long w = next_int(), h = next_int(), maxval = next_int();
  if (w < 1 || h < 1 || maxval != 255 || pos >= bytes.size() || !std::isspace(bytes[pos])) {
    throw Error(ErrorCode::CorruptHeader, "malformed pnm header", origin);
  }
  ++pos;
  const std::size_t n = static_cast<std::size_t>(w) * h * channels;
  if (bytes.size() - pos < n) throw Error(ErrorCode::CorruptHeader, "truncated pnm data", origin);
  return ImageBuffer(static_cast<int>(w), static_cast<int>(h), channels,
                     std::vector<std::uint8_t>(bytes.begin() + pos, bytes.begin() + pos + n));
}

std::vector<std::uint8_t> encode_pnm(const ImageBuffer& img) {
  std::ostringstream hdr;
  hdr << (img.channels() == 3 ? "P6" : "P5") << '\n' << img.width() << ' ' << img.height() << "\n255\n";
  const std::string h = hdr.str();
  std::vector<std::uint8_t> out(h.begin(), h.end());
  out.insert(out.end(), img.data().begin(), img.data().end());
  return out;
}

std::string lower_ext(const fs::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
  return e;
}

}  // namespace

ImageBuffer load_image(const fs::path& path) {
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) throw Error(ErrorCode::NotFound, "image not found", path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::NotFound, "cannot open image", path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  if (is_png(bytes)) return decode_png(bytes, path.string());
  if (is_pnm(bytes)) return decode_pnm(bytes, path.string());
  // A file named .png that lacks the signature is a damaged png, not a foreign format.
  if (lower_ext(path) == ".png") throw Error(ErrorCode::CorruptHeader, "bad png signature", path.string());
  throw Error(ErrorCode::UnsupportedFormat, "unsupported raster format", path.string());
}

void save_image(const ImageBuffer& img, const fs::path& path) {
  if (img.empty()) throw Error(ErrorCode::InvalidArgument, "cannot save an empty image", path.string());
  const std::string ext = lower_ext(path);
  std::vector<std::uint8_t> bytes;
  if (ext == ".pgm" || ext == ".ppm") {
    if ((ext == ".pgm") != (img.channels() == 1)) {
      throw Error(ErrorCode::UnsupportedFormat, "channel count does not fit extension", path.string());
    }
    bytes = encode_pnm(img);
  } else {
    bytes = encode_png(img);
  }
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot open for writing", path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::IoFailure, "write failed", path.string());
}

}  // namespace defectforge
