#include "vessam/skeleton.hpp"

namespace vessam {

namespace {

// One parallel subiteration. Marks deletions against a frozen copy, then
// applies them. Returns the number of deleted pixels.
//
// Neighborhood labels (Zhang-Suen numbering):
//   p9 p2 p3
//   p8 p1 p4
//   p7 p6 p5
int thin_subiteration(BinaryMask& img, int phase) {
  const int w = img.width(), h = img.height();
  const BinaryMask snap = img;
  int deleted = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!snap.at(x, y)) continue;
      int p2 = snap.at_or_zero(x, y - 1);
      int p3 = snap.at_or_zero(x + 1, y - 1);
      int p4 = snap.at_or_zero(x + 1, y);
      int p5 = snap.at_or_zero(x + 1, y + 1);
      int p6 = snap.at_or_zero(x, y + 1);
      int p7 = snap.at_or_zero(x - 1, y + 1);
      int p8 = snap.at_or_zero(x - 1, y);
      int p9 = snap.at_or_zero(x - 1, y - 1);

      int b = p2 + p3 + p4 + p5 + p6 + p7 + p8 + p9;
      if (b < 2 || b > 6) continue;

      int a = (p2 == 0 && p3 == 1) + (p3 == 0 && p4 == 1) +
              (p4 == 0 && p5 == 1) + (p5 == 0 && p6 == 1) +
              (p6 == 0 && p7 == 1) + (p7 == 0 && p8 == 1) +
              (p8 == 0 && p9 == 1) + (p9 == 0 && p2 == 1);
      if (a != 1) continue;

      int m1 = phase == 0 ? p2 * p4 * p6 : p2 * p4 * p8;
      int m2 = phase == 0 ? p4 * p6 * p8 : p2 * p6 * p8;
      if (m1 != 0 || m2 != 0) continue;

      img.set(x, y, 0);
      ++deleted;
    }
  }
  return deleted;
}

namespace yokoi {

inline int neighbor_count(const BinaryMask& img, int x, int y) {
  int b = 0;
  for (auto [dx, dy] : kNeighbor8) b += img.at_or_zero(x + dx, y + dy);
  return b;
}

// Yokoi 8-connectivity number: 1 means the foreground neighbors stay one
// 8-connected piece when the pixel goes, so deleting it is safe.
inline int connectivity(const BinaryMask& img, int x, int y) {
  int n[8];  // E, NE, N, NW, W, SW, S, SE (counterclockwise)
  n[0] = img.at_or_zero(x + 1, y);
  n[1] = img.at_or_zero(x + 1, y - 1);
  n[2] = img.at_or_zero(x, y - 1);
  n[3] = img.at_or_zero(x - 1, y - 1);
  n[4] = img.at_or_zero(x - 1, y);
  n[5] = img.at_or_zero(x - 1, y + 1);
  n[6] = img.at_or_zero(x, y + 1);
  n[7] = img.at_or_zero(x + 1, y + 1);
  int c8 = 0;
  for (int k = 0; k < 8; k += 2) {
    const int xk = 1 - n[k], xk1 = 1 - n[(k + 1) % 8], xk2 = 1 - n[(k + 2) % 8];
    c8 += xk - xk * xk1 * xk2;
  }
  return c8;
}

}  // namespace yokoi

// Zhang-Suen converges with residual redundancy that reads as fake junctions
// under the >=3-neighbor rule: 2x2 blocks at dense junctions, triangle
// corners on staircases, and chain pixels whose presence alone lifts a
// neighbor to 3 neighbors. This sequential pass deletes safe pixels (Yokoi
// connectivity 1) that either have >= 3 neighbors themselves or prop up a
// >= 3-neighbor pixel. Plain line pixels and benign staircase corners have
// 2 neighbors with no such neighbor and stay; genuine junctions have
// connectivity >= 2 and stay. Row-major scan keeps the result deterministic.
// Returns the number of deleted pixels.
int squash_redundant(BinaryMask& img) {
  const int w = img.width(), h = img.height();
  int deleted = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!img.at(x, y)) continue;
      const int b = yokoi::neighbor_count(img, x, y);
      if (b < 2 || b > 7) continue;
      if (yokoi::connectivity(img, x, y) != 1) continue;
      bool fake_junction = b >= 3;
      if (!fake_junction) {
        for (auto [dx, dy] : kNeighbor8) {
          int nx = x + dx, ny = y + dy;
          if (img.at_or_zero(nx, ny) && yokoi::neighbor_count(img, nx, ny) >= 3) {
            fake_junction = true;
            break;
          }
        }
      }
      if (fake_junction) {
        img.set(x, y, 0);
        ++deleted;
      }
    }
  }
  return deleted;
}

}  // namespace

BinaryMask skeletonize(const BinaryMask& mask) {
  BinaryMask img = mask;
  const int sweep_cap = mask.width() + mask.height();
  for (int sweep = 0; sweep < sweep_cap; ++sweep) {
    int deleted = thin_subiteration(img, 0);
    deleted += thin_subiteration(img, 1);
    if (deleted == 0) {
      // Converged; squash residual redundancy. A deletion can expose new
      // deletable pixels, so resume sweeping until a joint fixpoint.
      if (squash_redundant(img) == 0) return img;
    }
  }
  raise(ErrorCode::InternalLimit, "thinning did not converge within width+height sweeps");
}

bool is_thin(const BinaryMask& mask) {
  for (int y = 0; y + 1 < mask.height(); ++y)
    for (int x = 0; x + 1 < mask.width(); ++x)
      if (mask.at(x, y) && mask.at(x + 1, y) && mask.at(x, y + 1) &&
          mask.at(x + 1, y + 1))
        return false;
  return true;
}

}  // namespace vessam
