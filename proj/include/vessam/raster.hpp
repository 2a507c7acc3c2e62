#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "vessam/error.hpp"

namespace vessam {

struct Point {
  int x = 0;  // column, 0-based
  int y = 0;  // row, 0-based

  friend bool operator==(const Point& a, const Point& b) {
    return a.x == b.x && a.y == b.y;
  }
  friend bool operator!=(const Point& a, const Point& b) { return !(a == b); }
  // Lexicographic by (y, x); the tie-break order used everywhere.
  friend bool operator<(const Point& a, const Point& b) {
    return a.y != b.y ? a.y < b.y : a.x < b.x;
  }
};

// Row-major binary raster. bits[y*width + x] is 1 for foreground.
class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(int width, int height, uint8_t fill = 0);
  BinaryMask(int width, int height, std::vector<uint8_t> bits);

  int width() const { return width_; }
  int height() const { return height_; }
  size_t size() const { return bits_.size(); }

  bool in_bounds(Point p) const {
    return p.x >= 0 && p.x < width_ && p.y >= 0 && p.y < height_;
  }
  uint8_t at(Point p) const { return bits_[size_t(p.y) * width_ + p.x]; }
  uint8_t at(int x, int y) const { return bits_[size_t(y) * width_ + x]; }
  // Out-of-bounds reads as background.
  uint8_t at_or_zero(int x, int y) const {
    return (x >= 0 && x < width_ && y >= 0 && y < height_) ? at(x, y) : 0;
  }
  void set(Point p, uint8_t v) { bits_[size_t(p.y) * width_ + p.x] = v; }
  void set(int x, int y, uint8_t v) { bits_[size_t(y) * width_ + x] = v; }

  const std::vector<uint8_t>& bits() const { return bits_; }
  std::vector<uint8_t>& bits() { return bits_; }

  size_t popcount() const;

  friend bool operator==(const BinaryMask& a, const BinaryMask& b) {
    return a.width_ == b.width_ && a.height_ == b.height_ && a.bits_ == b.bits_;
  }
  friend bool operator!=(const BinaryMask& a, const BinaryMask& b) {
    return !(a == b);
  }

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<uint8_t> bits_;
};

// Offsets of the 8-neighborhood in clockwise order starting north:
// N, NE, E, SE, S, SW, W, NW.
inline constexpr std::array<std::array<int, 2>, 8> kNeighbor8 = {{
    {0, -1}, {1, -1}, {1, 0}, {1, 1}, {0, 1}, {-1, 1}, {-1, 0}, {-1, -1},
}};

struct Neighborhood8 {
  std::array<uint8_t, 8> flags;  // clockwise from north
  int count;                     // sum of flags
};

// Decodes a binary PGM ("P5", maxval 255) or an 8-bit grayscale PNG.
// Pixels >= 128 map to foreground.
BinaryMask load_mask(const std::vector<uint8_t>& bytes);

// Encodes as binary PGM, foreground=255, background=0.
std::vector<uint8_t> save_mask(const BinaryMask& mask);

BinaryMask load_mask_file(const std::string& path);
void save_mask_file(const BinaryMask& mask, const std::string& path);

// Grayscale PGM writer used for overlays (values passed through unchanged).
std::vector<uint8_t> save_pgm_gray(int width, int height,
                                   const std::vector<uint8_t>& gray);

Neighborhood8 neighbors8(const BinaryMask& mask, Point p);

struct Labeling {
  std::vector<int32_t> labels;  // 0 background, 1..count foreground
  int count = 0;
};

// Connectivity must be 4 or 8. Labels are assigned in row-major discovery
// order, so the result is deterministic.
Labeling connected_components(const BinaryMask& mask, int connectivity);

}  // namespace vessam
