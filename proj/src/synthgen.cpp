#include "vessam/synthgen.hpp"

#include <algorithm>
#include <array>

#include "vessam/rng.hpp"

namespace vessam {

namespace {

// Unit step vectors for 1/256-turn direction indices, scaled by 256 and
// frozen as integers (y grows downward).
constexpr int kDir[256][2] = {
    {256, 0}, {256, 6}, {256, 13}, {255, 19}, {255, 25}, {254, 31}, {253, 38}, {252, 44},
    {251, 50}, {250, 56}, {248, 62}, {247, 68}, {245, 74}, {243, 80}, {241, 86}, {239, 92},
    {237, 98}, {234, 104}, {231, 109}, {229, 115}, {226, 121}, {223, 126}, {220, 132}, {216, 137},
    {213, 142}, {209, 147}, {206, 152}, {202, 157}, {198, 162}, {194, 167}, {190, 172}, {185, 177},
    {181, 181}, {177, 185}, {172, 190}, {167, 194}, {162, 198}, {157, 202}, {152, 206}, {147, 209},
    {142, 213}, {137, 216}, {132, 220}, {126, 223}, {121, 226}, {115, 229}, {109, 231}, {104, 234},
    {98, 237}, {92, 239}, {86, 241}, {80, 243}, {74, 245}, {68, 247}, {62, 248}, {56, 250},
    {50, 251}, {44, 252}, {38, 253}, {31, 254}, {25, 255}, {19, 255}, {13, 256}, {6, 256},
    {0, 256}, {-6, 256}, {-13, 256}, {-19, 255}, {-25, 255}, {-31, 254}, {-38, 253}, {-44, 252},
    {-50, 251}, {-56, 250}, {-62, 248}, {-68, 247}, {-74, 245}, {-80, 243}, {-86, 241}, {-92, 239},
    {-98, 237}, {-104, 234}, {-109, 231}, {-115, 229}, {-121, 226}, {-126, 223}, {-132, 220}, {-137, 216},
    {-142, 213}, {-147, 209}, {-152, 206}, {-157, 202}, {-162, 198}, {-167, 194}, {-172, 190}, {-177, 185},
    {-181, 181}, {-185, 177}, {-190, 172}, {-194, 167}, {-198, 162}, {-202, 157}, {-206, 152}, {-209, 147},
    {-213, 142}, {-216, 137}, {-220, 132}, {-223, 126}, {-226, 121}, {-229, 115}, {-231, 109}, {-234, 104},
    {-237, 98}, {-239, 92}, {-241, 86}, {-243, 80}, {-245, 74}, {-247, 68}, {-248, 62}, {-250, 56},
    {-251, 50}, {-252, 44}, {-253, 38}, {-254, 31}, {-255, 25}, {-255, 19}, {-256, 13}, {-256, 6},
    {-256, 0}, {-256, -6}, {-256, -13}, {-255, -19}, {-255, -25}, {-254, -31}, {-253, -38}, {-252, -44},
    {-251, -50}, {-250, -56}, {-248, -62}, {-247, -68}, {-245, -74}, {-243, -80}, {-241, -86}, {-239, -92},
    {-237, -98}, {-234, -104}, {-231, -109}, {-229, -115}, {-226, -121}, {-223, -126}, {-220, -132}, {-216, -137},
    {-213, -142}, {-209, -147}, {-206, -152}, {-202, -157}, {-198, -162}, {-194, -167}, {-190, -172}, {-185, -177},
    {-181, -181}, {-177, -185}, {-172, -190}, {-167, -194}, {-162, -198}, {-157, -202}, {-152, -206}, {-147, -209},
    {-142, -213}, {-137, -216}, {-132, -220}, {-126, -223}, {-121, -226}, {-115, -229}, {-109, -231}, {-104, -234},
    {-98, -237}, {-92, -239}, {-86, -241}, {-80, -243}, {-74, -245}, {-68, -247}, {-62, -248}, {-56, -250},
    {-50, -251}, {-44, -252}, {-38, -253}, {-31, -254}, {-25, -255}, {-19, -255}, {-13, -256}, {-6, -256},
    {0, -256}, {6, -256}, {13, -256}, {19, -255}, {25, -255}, {31, -254}, {38, -253}, {44, -252},
    {50, -251}, {56, -250}, {62, -248}, {68, -247}, {74, -245}, {80, -243}, {86, -241}, {92, -239},
    {98, -237}, {104, -234}, {109, -231}, {115, -229}, {121, -226}, {126, -223}, {132, -220}, {137, -216},
    {142, -213}, {147, -209}, {152, -206}, {157, -202}, {162, -198}, {167, -194}, {172, -190}, {177, -185},
    {181, -181}, {185, -177}, {190, -172}, {194, -167}, {198, -162}, {202, -157}, {206, -152}, {209, -147},
    {213, -142}, {216, -137}, {220, -132}, {223, -126}, {226, -121}, {229, -115}, {231, -109}, {234, -104},
    {237, -98}, {239, -92}, {241, -86}, {243, -80}, {245, -74}, {247, -68}, {248, -62}, {250, -56},
    {251, -50}, {252, -44}, {253, -38}, {254, -31}, {255, -25}, {255, -19}, {256, -13}, {256, -6},
};

struct Grower {
  static constexpr int kRing = 14;  // recent own-centerline pixels, collision-exempt

  const TreeSpec& spec;
  SplitMix64 rng;
  BinaryMask mask;
  BinaryMask centerline;
  std::vector<Point> branch_points;
  int margin;
  int jitter_amp;

  explicit Grower(const TreeSpec& s)
      : spec(s),
        rng(s.seed),
        mask(s.size, s.size),
        centerline(s.size, s.size),
        margin(s.width_px / 2 + 1),
        jitter_amp(int(s.wiggle * 6.0 + 0.5)) {}

  void stamp_disk(Point c) {
    const int w2 = spec.width_px * spec.width_px;
    const int r = spec.width_px / 2 + 1;
    for (int oy = -r; oy <= r; ++oy) {
      for (int ox = -r; ox <= r; ++ox) {
        if (4 * (ox * ox + oy * oy) > w2) continue;
        int x = c.x + ox, y = c.y + oy;
        if (x >= 0 && x < spec.size && y >= 0 && y < spec.size) mask.set(x, y, 1);
      }
    }
    centerline.set(c, 1);
  }

  // Chain state for redundant-corner removal: when the fresh pixel behind us
  // turns out to be a shortcutable corner (its neighbors are directly
  // adjacent), drop it again. Keeps digital chains minimal so corners do not
  // read as junctions.
  struct Chain {
    Point prev{-9, -9}, prev2{-9, -9};
    bool prev_fresh = false;
  };

  void stamp_step(Chain& ch, Point cur) {
    if (cur == ch.prev) return;
    const bool have_prev = ch.prev.x >= 0, have_prev2 = ch.prev2.x >= 0;
    if (have_prev && have_prev2 && ch.prev_fresh && cur != ch.prev2 &&
        std::abs(cur.x - ch.prev2.x) <= 1 && std::abs(cur.y - ch.prev2.y) <= 1) {
      centerline.set(ch.prev, 0);
      if (spec.width_px == 1) mask.set(ch.prev, 0);
      ch.prev = ch.prev2;
      ch.prev2 = {-9, -9};
    }
    const bool fresh = !centerline.at(cur);
    stamp_disk(cur);
    ch.prev2 = ch.prev;
    ch.prev = cur;
    ch.prev_fresh = fresh;
  }

  bool inside_safe(int64_t px, int64_t py) const {
    const int64_t lo = int64_t(margin) * 256;
    const int64_t hi = int64_t(spec.size - 1 - margin) * 256;
    return px >= lo && px <= hi && py >= lo && py <= hi;
  }

  struct Ring {
    std::array<Point, kRing> recent;
    int count = 0;
    int head = 0;

    void push(Point p) {
      recent[size_t(head)] = p;
      head = (head + 1) % kRing;
      count = std::min(count + 1, kRing);
    }
    bool near(Point p, int radius) const {
      for (int i = 0; i < count; ++i) {
        const Point& q = recent[size_t(i)];
        if (std::abs(p.x - q.x) <= radius && std::abs(p.y - q.y) <= radius) return true;
      }
      return false;
    }
  };

  int collision_radius() const { return spec.width_px / 2 + 2; }

  // A stroke collides when its center would come within collision_radius of
  // any centerline pixel that is not part of this walker's own recent tail;
  // that keeps distinct strokes from fusing into spurious junctions.
  bool collides(int64_t px, int64_t py, const Ring& ring) const {
    const Point p{int(px >> 8), int(py >> 8)};
    const int r = collision_radius();
    for (int oy = -r; oy <= r; ++oy)
      for (int ox = -r; ox <= r; ++ox)
        if (centerline.at_or_zero(p.x + ox, p.y + oy)) {
          Point q{p.x + ox, p.y + oy};
          if (!ring.near(q, r)) return true;
        }
    return false;
  }

  // One-pixel step. Walkers that still carry split events steer around
  // borders and existing strokes so every recorded branch event is realized;
  // terminal walkers stop instead, which keeps crossings rare.
  bool advance(int64_t& px, int64_t& py, int& dir, const Ring& ring, bool must_survive,
               bool check_collision) {
    const int64_t cx = int64_t(spec.size) * 128, cy = int64_t(spec.size) * 128;
    int tries = must_survive ? 70 : 1;
    for (int t = 0; t < tries; ++t) {
      const int d = dir & 255;
      const int64_t nx = px + kDir[d][0], ny = py + kDir[d][1];
      if (inside_safe(nx, ny) && !(check_collision && collides(nx, ny, ring))) {
        px = nx;
        py = ny;
        return true;
      }
      const int64_t tx = cx - px, ty = cy - py;
      const int64_t cross = int64_t(kDir[d][0]) * ty - int64_t(kDir[d][1]) * tx;
      dir += cross >= 0 ? 4 : -4;
    }
    if (!must_survive) return false;
    // Boxed in: take the straight step anyway (stays rare and in-canvas when
    // possible, otherwise the walker ends).
    const int d = dir & 255;
    const int64_t nx = px + kDir[d][0], ny = py + kDir[d][1];
    if (!inside_safe(nx, ny)) return false;
    px = nx;
    py = ny;
    return true;
  }

  void grow(int64_t px, int64_t py, int dir, int events, Ring ring) {
    const bool splitting = events > 0;
    // Split runs are short so all events happen near the existing tree while
    // the canvas is still open; terminal runs are long and die freely.
    const int base = std::max(12, spec.size / 6);
    const int run_len = splitting ? base + int(rng.next_below(5))
                                  : spec.size / 2 + int(rng.next_below(uint64_t(spec.size / 4)));
    // Grace window: right after a spawn the sibling stroke is still nearby.
    const int grace = collision_radius() + 7;
    Chain chain;
    for (int step = 0; step < run_len; ++step) {
      Point here{int(px >> 8), int(py >> 8)};
      stamp_step(chain, here);
      ring.push(here);
      // Curvature in coarse, infrequent increments: per-step wobble shreds
      // the digital chain into corner artifacts.
      if (jitter_amp > 0 && step % 4 == 3)
        dir += 2 * (int(rng.next_below(uint64_t(2 * jitter_amp + 1))) - jitter_amp);
      if (!advance(px, py, dir, ring, splitting, step >= grace)) return;
    }
    Point fin{int(px >> 8), int(py >> 8)};
    stamp_step(chain, fin);
    ring.push(fin);
    if (!splitting) return;
    branch_points.push_back(fin);
    const int delta = 20 + int(rng.next_below(13));  // 28 to 45 degrees
    const int remaining = events - 1;
    const int left = remaining - remaining / 2;
    grow(px, py, dir + delta, left, ring);
    grow(px, py, dir - delta, remaining - left, ring);
  }
};

}  // namespace

GeneratedTree generate_vessel_tree(const TreeSpec& spec) {
  if (spec.size < 16) raise(ErrorCode::BadConfig, "tree size must be >= 16");
  if (spec.width_px < 1 || spec.width_px > 5)
    raise(ErrorCode::BadConfig, "width_px must be in 1..5");
  if (spec.wiggle < 0.0 || spec.wiggle > 1.0)
    raise(ErrorCode::BadConfig, "wiggle must be in [0, 1]");
  if (spec.branch_events < 0)
    raise(ErrorCode::BadConfig, "branch_events must be >= 0");

  Grower g(spec);

  // Trunk starts on a border of the safe box heading inward.
  const int side = int(g.rng.next_below(4));
  const int span = spec.size - 2 * g.margin;
  const int offset = g.margin + int(g.rng.next_below(uint64_t(std::max(1, span))));
  int64_t px = 0, py = 0;
  int dir = 0;
  switch (side) {
    case 0: px = int64_t(offset) * 256; py = int64_t(g.margin) * 256; dir = 64; break;
    case 1: px = int64_t(offset) * 256; py = int64_t(spec.size - 1 - g.margin) * 256; dir = 192; break;
    case 2: px = int64_t(g.margin) * 256; py = int64_t(offset) * 256; dir = 0; break;
    default: px = int64_t(spec.size - 1 - g.margin) * 256; py = int64_t(offset) * 256; dir = 128; break;
  }
  dir += int(g.rng.next_below(21)) - 10;

  g.grow(px, py, dir, spec.branch_events, Grower::Ring{});

  if (g.centerline.popcount() < 2)
    raise(ErrorCode::DegenerateSpec, "tree left the canvas before any growth");

  GeneratedTree out{std::move(g.mask), {std::move(g.branch_points), std::move(g.centerline)}};
  return out;
}

}  // namespace vessam
