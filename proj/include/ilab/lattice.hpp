#pragma once

// Z^3 primitives: integer points, norms, neighborhoods, hashed point sets,
// inner/outer vertex boundaries and the rounding map used to put continuum
// geometry (segments, tubes, balls) onto the lattice.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace ilab {

inline constexpr double kPi = 3.14159265358979323846;

struct Vec3 {
  int64_t x = 0, y = 0, z = 0;

  friend Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend Vec3 operator*(int64_t c, Vec3 a) { return {c * a.x, c * a.y, c * a.z}; }
  friend bool operator==(Vec3 a, Vec3 b) { return a.x == b.x && a.y == b.y && a.z == b.z; }
  friend bool operator!=(Vec3 a, Vec3 b) { return !(a == b); }
  // lexicographic, used wherever a canonical ordering is needed
  friend bool operator<(Vec3 a, Vec3 b) {
    if (a.x != b.x) return a.x < b.x;
    if (a.y != b.y) return a.y < b.y;
    return a.z < b.z;
  }
};

struct DVec3 {
  double x = 0, y = 0, z = 0;
  friend DVec3 operator+(DVec3 a, DVec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend DVec3 operator-(DVec3 a, DVec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend DVec3 operator*(double c, DVec3 a) { return {c * a.x, c * a.y, c * a.z}; }
};

inline DVec3 to_dvec(Vec3 a) { return {double(a.x), double(a.y), double(a.z)}; }

inline int64_t norm2_sq(Vec3 a) { return a.x * a.x + a.y * a.y + a.z * a.z; }
inline double norm2(Vec3 a) { return std::sqrt(double(norm2_sq(a))); }
inline int64_t norm_inf(Vec3 a) {
  return std::max({std::llabs(a.x), std::llabs(a.y), std::llabs(a.z)});
}
inline double norm2(DVec3 a) { return std::sqrt(a.x * a.x + a.y * a.y + a.z * a.z); }
inline double dot(DVec3 a, DVec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }

inline constexpr std::array<Vec3, 6> kDirs = {{{1, 0, 0},
                                               {-1, 0, 0},
                                               {0, 1, 0},
                                               {0, -1, 0},
                                               {0, 0, 1},
                                               {0, 0, -1}}};

// 64-bit mix (splitmix64 finalizer); good avalanche for coordinate hashing.
inline uint64_t mix64(uint64_t v) {
  v += 0x9e3779b97f4a7c15ULL;
  v = (v ^ (v >> 30)) * 0xbf58476d1ce4e5b9ULL;
  v = (v ^ (v >> 27)) * 0x94d049bb133111ebULL;
  return v ^ (v >> 31);
}

struct Vec3Hash {
  size_t operator()(Vec3 a) const {
    uint64_t h = mix64(uint64_t(a.x));
    h = mix64(h ^ uint64_t(a.y));
    h = mix64(h ^ uint64_t(a.z));
    return size_t(h);
  }
};

// Nearest lattice point; exact .5 ties take the floor in each coordinate,
// which picks the lexicographically smallest among the nearest points.
inline int64_t round_coord(double t) {
  double f = std::floor(t);
  double frac = t - f;
  if (frac > 0.5) return int64_t(f) + 1;
  return int64_t(f);
}

inline Vec3 round_to_lattice(DVec3 p) {
  return {round_coord(p.x), round_coord(p.y), round_coord(p.z)};
}

// Hashed set of lattice points with a canonical (sorted) dump for output and
// deterministic iteration where order matters.
class PointSet {
 public:
  PointSet() = default;
  explicit PointSet(const std::vector<Vec3>& pts) {
    for (auto p : pts) insert(p);
  }

  bool insert(Vec3 p) { return set_.insert(p).second; }
  bool contains(Vec3 p) const { return set_.count(p) > 0; }
  size_t size() const { return set_.size(); }
  bool empty() const { return set_.empty(); }

  // reference into this set; forbidden on temporaries (dangling range-for)
  const std::unordered_set<Vec3, Vec3Hash>& raw() const& { return set_; }
  const std::unordered_set<Vec3, Vec3Hash>& raw() const&& = delete;

  std::vector<Vec3> sorted_points() const {
    std::vector<Vec3> v(set_.begin(), set_.end());
    std::sort(v.begin(), v.end());
    return v;
  }

  // min over the set of squared Euclidean distance to p (brute force)
  int64_t dist_sq_to(Vec3 p) const {
    int64_t best = INT64_MAX;
    for (auto q : set_) best = std::min(best, norm2_sq(p - q));
    return best;
  }

 private:
  std::unordered_set<Vec3, Vec3Hash> set_;
};

// inner vertex boundary: points of S with a neighbor outside S
inline PointSet inner_boundary(const PointSet& s) {
  PointSet out;
  for (auto p : s.raw())
    for (auto d : kDirs)
      if (!s.contains(p + d)) {
        out.insert(p);
        break;
      }
  return out;
}

// outer vertex boundary: points outside S with a neighbor in S; equals the
// inner boundary of the complement restricted to the 1-neighborhood of S
inline PointSet outer_boundary(const PointSet& s) {
  PointSet out;
  for (auto p : s.raw())
    for (auto d : kDirs)
      if (!s.contains(p + d)) out.insert(p + d);
  return out;
}

// axis-aligned box [lo, hi] (inclusive), the l_inf ball when centered
struct Box {
  Vec3 lo, hi;

  bool contains(Vec3 p) const {
    return p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y && p.z >= lo.z &&
           p.z <= hi.z;
  }
  int64_t volume() const {
    return (hi.x - lo.x + 1) * (hi.y - lo.y + 1) * (hi.z - lo.z + 1);
  }
  static Box centered(Vec3 c, int64_t r) {
    return {{c.x - r, c.y - r, c.z - r}, {c.x + r, c.y + r, c.z + r}};
  }
  std::vector<Vec3> points() const {
    std::vector<Vec3> v;
    v.reserve(size_t(volume()));
    for (int64_t x = lo.x; x <= hi.x; ++x)
      for (int64_t y = lo.y; y <= hi.y; ++y)
        for (int64_t z = lo.z; z <= hi.z; ++z) v.push_back({x, y, z});
    return v;
  }
};

// lattice points of the closed Euclidean ball B(c, r)
inline std::vector<Vec3> ball_points(Vec3 c, double r) {
  std::vector<Vec3> v;
  int64_t ir = int64_t(std::floor(r));
  double r2 = r * r;
  for (int64_t x = -ir; x <= ir; ++x)
    for (int64_t y = -ir; y <= ir; ++y)
      for (int64_t z = -ir; z <= ir; ++z)
        if (double(x * x + y * y + z * z) <= r2) v.push_back({c.x + x, c.y + y, c.z + z});
  return v;
}

// squared Euclidean distance from p to the continuum segment [a, b]
inline double segment_dist_sq(DVec3 p, DVec3 a, DVec3 b) {
  DVec3 ab = b - a;
  double len2 = dot(ab, ab);
  if (len2 <= 0) {
    DVec3 d = p - a;
    return dot(d, d);
  }
  double t = dot(p - a, ab) / len2;
  t = std::clamp(t, 0.0, 1.0);
  DVec3 proj = a + t * ab;
  DVec3 d = p - proj;
  return dot(d, d);
}

}  // namespace ilab
