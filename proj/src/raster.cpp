#include "vessam/raster.hpp"

#include <png.h>

#include <cstring>
#include <deque>
#include <fstream>
#include <numeric>
#include <sstream>

namespace vessam {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::MalformedHeader: return "MalformedHeader";
    case ErrorCode::TruncatedPayload: return "TruncatedPayload";
    case ErrorCode::UnsupportedDepth: return "UnsupportedDepth";
    case ErrorCode::OutOfBounds: return "OutOfBounds";
    case ErrorCode::InternalLimit: return "InternalLimit";
    case ErrorCode::NotThin: return "NotThin";
    case ErrorCode::BranchAmbiguity: return "BranchAmbiguity";
    case ErrorCode::SchemaViolation: return "SchemaViolation";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::PointOutOfBounds: return "PointOutOfBounds";
    case ErrorCode::EmptyGraph: return "EmptyGraph";
    case ErrorCode::InconsistentPromptSet: return "InconsistentPromptSet";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonIntegralOutput: return "NonIntegralOutput";
    case ErrorCode::EmptyConcat: return "EmptyConcat";
    case ErrorCode::NonDivisibleExtent: return "NonDivisibleExtent";
    case ErrorCode::NotScalar: return "NotScalar";
    case ErrorCode::DetachedLoss: return "DetachedLoss";
    case ErrorCode::NonSquareTokenCount: return "NonSquareTokenCount";
    case ErrorCode::EmptySequence: return "EmptySequence";
    case ErrorCode::BadConfig: return "BadConfig";
    case ErrorCode::DegenerateSpec: return "DegenerateSpec";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::DivergedLoss: return "DivergedLoss";
    case ErrorCode::IoError: return "IoError";
  }
  return "UnknownError";
}

BinaryMask::BinaryMask(int width, int height, uint8_t fill)
    : width_(width), height_(height) {
  if (width < 1 || height < 1)
    raise(ErrorCode::MalformedHeader, "mask dimensions must be >= 1");
  bits_.assign(size_t(width) * height, fill ? 1 : 0);
}

BinaryMask::BinaryMask(int width, int height, std::vector<uint8_t> bits)
    : width_(width), height_(height), bits_(std::move(bits)) {
  if (width < 1 || height < 1)
    raise(ErrorCode::MalformedHeader, "mask dimensions must be >= 1");
  if (bits_.size() != size_t(width) * height)
    raise(ErrorCode::TruncatedPayload, "bit buffer length != width*height");
  for (auto& b : bits_) b = b ? 1 : 0;
}

size_t BinaryMask::popcount() const {
  return std::accumulate(bits_.begin(), bits_.end(), size_t(0),
                         [](size_t acc, uint8_t b) { return acc + b; });
}

namespace {

// ---- PGM ----

// Reads the next header token, skipping whitespace and '#' comments.
bool next_pgm_token(const std::vector<uint8_t>& bytes, size_t& pos,
                    std::string& tok) {
  while (pos < bytes.size()) {
    char c = char(bytes[pos]);
    if (c == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
      ++pos;
    } else {
      break;
    }
  }
  tok.clear();
  while (pos < bytes.size()) {
    char c = char(bytes[pos]);
    if (c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '#') break;
    tok.push_back(c);
    ++pos;
  }
  return !tok.empty();
}

int parse_pgm_int(const std::string& tok) {
  if (tok.empty() || tok.size() > 9) return -1;
  int v = 0;
  for (char c : tok) {
    if (c < '0' || c > '9') return -1;
    v = v * 10 + (c - '0');
  }
  return v;
}

BinaryMask load_pgm(const std::vector<uint8_t>& bytes) {
  size_t pos = 2;  // past "P5"
  std::string tok;
  int dims[3];
  for (int& d : dims) {
    if (!next_pgm_token(bytes, pos, tok))
      raise(ErrorCode::MalformedHeader, "PGM header ended early");
    d = parse_pgm_int(tok);
    if (d < 0) raise(ErrorCode::MalformedHeader, "bad PGM header token '" + tok + "'");
  }
  int width = dims[0], height = dims[1], maxval = dims[2];
  if (width < 1 || height < 1)
    raise(ErrorCode::MalformedHeader, "PGM dimensions must be positive");
  if (maxval != 255)
    raise(ErrorCode::UnsupportedDepth, "PGM maxval must be 255");
  // Exactly one whitespace byte separates the header from the payload.
  if (pos >= bytes.size())
    raise(ErrorCode::TruncatedPayload, "PGM payload missing");
  ++pos;
  size_t need = size_t(width) * height;
  if (bytes.size() - pos < need)
    raise(ErrorCode::TruncatedPayload, "PGM payload shorter than width*height");
  std::vector<uint8_t> bits(need);
  for (size_t i = 0; i < need; ++i) bits[i] = bytes[pos + i] >= 128 ? 1 : 0;
  return BinaryMask(width, height, std::move(bits));
}

// ---- PNG (via libpng) ----

struct PngReadState {
  const uint8_t* data;
  size_t size;
  size_t pos;
  ErrorCode error = ErrorCode::MalformedHeader;
  std::string message;
};

void png_mem_read(png_structp png, png_bytep out, png_size_t n) {
  auto* st = static_cast<PngReadState*>(png_get_io_ptr(png));
  if (st->pos + n > st->size) {
    st->error = ErrorCode::TruncatedPayload;
    st->message = "PNG stream ended early";
    png_error(png, "truncated");
  }
  std::memcpy(out, st->data + st->pos, n);
  st->pos += n;
}

void png_raise(png_structp png, png_const_charp msg) {
  auto* st = static_cast<PngReadState*>(png_get_error_ptr(png));
  if (st->message.empty()) st->message = msg ? msg : "libpng failure";
  longjmp(png_jmpbuf(png), 1);
}

BinaryMask load_png(const std::vector<uint8_t>& bytes) {
  PngReadState st{bytes.data(), bytes.size(), 0};
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, &st, png_raise, nullptr);
  if (!png) raise(ErrorCode::IoError, "png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    raise(ErrorCode::IoError, "png_create_info_struct failed");
  }

  std::vector<uint8_t> pixels;
  int width = 0, height = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    raise(st.error, st.message);
  }

  png_set_read_fn(png, &st, png_mem_read);
  png_read_info(png, info);
  width = int(png_get_image_width(png, info));
  height = int(png_get_image_height(png, info));
  int depth = png_get_bit_depth(png, info);
  int color = png_get_color_type(png, info);
  if (depth != 8 || color != PNG_COLOR_TYPE_GRAY) {
    png_destroy_read_struct(&png, &info, nullptr);
    raise(ErrorCode::UnsupportedDepth, "PNG must be 8-bit single-channel grayscale");
  }
  st.error = ErrorCode::TruncatedPayload;  // header parsed; later failures are payload
  pixels.resize(size_t(width) * height);
  std::vector<png_bytep> rows(height);
  for (int y = 0; y < height; ++y) rows[y] = pixels.data() + size_t(y) * width;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  std::vector<uint8_t> bits(pixels.size());
  for (size_t i = 0; i < pixels.size(); ++i) bits[i] = pixels[i] >= 128 ? 1 : 0;
  return BinaryMask(width, height, std::move(bits));
}

}  // namespace

BinaryMask load_mask(const std::vector<uint8_t>& bytes) {
  static const uint8_t png_sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '5')
    return load_pgm(bytes);
  if (bytes.size() >= 8 && std::memcmp(bytes.data(), png_sig, 8) == 0)
    return load_png(bytes);
  raise(ErrorCode::MalformedHeader, "not a P5 PGM or PNG stream");
}

std::vector<uint8_t> save_mask(const BinaryMask& mask) {
  std::vector<uint8_t> gray(mask.size());
  for (size_t i = 0; i < mask.size(); ++i) gray[i] = mask.bits()[i] ? 255 : 0;
  return save_pgm_gray(mask.width(), mask.height(), gray);
}

std::vector<uint8_t> save_pgm_gray(int width, int height,
                                   const std::vector<uint8_t>& gray) {
  if (gray.size() != size_t(width) * height)
    raise(ErrorCode::TruncatedPayload, "gray buffer length != width*height");
  std::ostringstream header;
  header << "P5\n" << width << " " << height << "\n255\n";
  std::string h = header.str();
  std::vector<uint8_t> out(h.begin(), h.end());
  out.insert(out.end(), gray.begin(), gray.end());
  return out;
}

BinaryMask load_mask_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) raise(ErrorCode::IoError, "cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
  return load_mask(bytes);
}

void save_mask_file(const BinaryMask& mask, const std::string& path) {
  auto bytes = save_mask(mask);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) raise(ErrorCode::IoError, "cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!f) raise(ErrorCode::IoError, "short write to " + path);
}

Neighborhood8 neighbors8(const BinaryMask& mask, Point p) {
  if (!mask.in_bounds(p)) raise(ErrorCode::OutOfBounds, "neighbors8 point outside mask");
  Neighborhood8 n{};
  n.count = 0;
  for (int i = 0; i < 8; ++i) {
    n.flags[i] = mask.at_or_zero(p.x + kNeighbor8[i][0], p.y + kNeighbor8[i][1]);
    n.count += n.flags[i];
  }
  return n;
}

Labeling connected_components(const BinaryMask& mask, int connectivity) {
  if (connectivity != 4 && connectivity != 8)
    raise(ErrorCode::BadConfig, "connectivity must be 4 or 8");
  const int w = mask.width(), h = mask.height();
  Labeling out;
  out.labels.assign(size_t(w) * h, 0);
  std::deque<Point> queue;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!mask.at(x, y) || out.labels[size_t(y) * w + x]) continue;
      ++out.count;
      out.labels[size_t(y) * w + x] = out.count;
      queue.push_back({x, y});
      while (!queue.empty()) {
        Point p = queue.front();
        queue.pop_front();
        for (int i = 0; i < 8; ++i) {
          if (connectivity == 4 && (i % 2) == 1) continue;  // skip diagonals
          int nx = p.x + kNeighbor8[i][0], ny = p.y + kNeighbor8[i][1];
          if (nx < 0 || nx >= w || ny < 0 || ny >= h) continue;
          size_t idx = size_t(ny) * w + nx;
          if (mask.at(nx, ny) && !out.labels[idx]) {
            out.labels[idx] = out.count;
            queue.push_back({nx, ny});
          }
        }
      }
    }
  }
  return out;
}

}  // namespace vessam
