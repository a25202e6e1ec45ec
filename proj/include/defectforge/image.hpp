#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace defectforge {

// 8-bit raster, row-major, channels interleaved. Immutable once built; engines
// assemble a pixel vector and construct a new buffer from it.
class ImageBuffer {
 public:
  ImageBuffer() = default;
  ImageBuffer(int width, int height, int channels, std::vector<std::uint8_t> data);
  // Zero-filled.
  ImageBuffer(int width, int height, int channels);

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  int channels() const noexcept { return channels_; }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<const std::uint8_t> pixels() const noexcept { return data_; }
  const std::vector<std::uint8_t>& data() const noexcept { return data_; }

  std::uint8_t at(int x, int y, int c = 0) const {
    return data_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
  }

  bool same_shape(const ImageBuffer& other) const noexcept {
    return width_ == other.width_ && height_ == other.height_ && channels_ == other.channels_;
  }

  friend bool operator==(const ImageBuffer&, const ImageBuffer&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  int channels_ = 0;
  std::vector<std::uint8_t> data_;
};

// Binary raster aligned to an ImageBuffer; 1 marks a synthesized defect pixel.
class DefectMask {
 public:
  DefectMask() = default;
  DefectMask(int width, int height);
  DefectMask(int width, int height, std::vector<std::uint8_t> bits);

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  bool at(int x, int y) const { return bits_[static_cast<std::size_t>(y) * width_ + x] != 0; }
  void set(int x, int y, bool v) { bits_[static_cast<std::size_t>(y) * width_ + x] = v ? 1 : 0; }

  std::span<const std::uint8_t> bits() const noexcept { return bits_; }
  std::size_t area() const noexcept;
  bool empty() const noexcept { return area() == 0; }
  bool matches(const ImageBuffer& img) const noexcept {
    return width_ == img.width() && height_ == img.height();
  }

  // 0/255 single-channel rendering for persistence.
  ImageBuffer to_image() const;
  static DefectMask from_image(const ImageBuffer& img);

  friend bool operator==(const DefectMask&, const DefectMask&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> bits_;
};

// PNG is the canonical format; binary PGM/PPM are read by magic and written
// when the path ends in .pgm/.ppm. Saving creates missing parent directories.
ImageBuffer load_image(const std::filesystem::path& path);
void save_image(const ImageBuffer& img, const std::filesystem::path& path);

std::vector<std::uint8_t> encode_png(const ImageBuffer& img);
ImageBuffer decode_png(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>");

// round(0.299 R + 0.587 G + 0.114 B); 1-channel input is returned unchanged.
ImageBuffer to_grayscale(const ImageBuffer& img);

std::uint8_t clamp_to_u8(double v) noexcept;

}  // namespace defectforge
