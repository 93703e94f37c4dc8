#pragma once

#include "rearrange/common.hpp"

namespace rearrange {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  double dot(const Vec2& o) const { return x * o.x + y * o.y; }
  double cross(const Vec2& o) const { return x * o.y - y * o.x; }
  double norm() const { return std::sqrt(x * x + y * y); }
  double angle() const { return std::atan2(y, x); }
  Vec2 rotated(double a) const {
    const double c = std::cos(a), s = std::sin(a);
    return {c * x - s * y, s * x + c * y};
  }
};

inline Vec2 heading_dir(double a) { return {std::cos(a), std::sin(a)}; }

inline double wrap_angle(double a) {
  while (a > M_PI) a -= 2.0 * M_PI;
  while (a <= -M_PI) a += 2.0 * M_PI;
  return a;
}

inline double dist(const Vec2& a, const Vec2& b) { return (a - b).norm(); }

// Axis-aligned rectangle, x0 <= x1 and y0 <= y1.
struct Rect {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  bool contains(const Vec2& p) const {
    return p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1;
  }
  Rect expanded(double r) const { return {x0 - r, y0 - r, x1 + r, y1 + r}; }
  Vec2 center() const { return {(x0 + x1) * 0.5, (y0 + y1) * 0.5}; }
  Vec2 clamp(const Vec2& p) const {
    return {std::clamp(p.x, x0, x1), std::clamp(p.y, y0, y1)};
  }
  double distance(const Vec2& p) const { return dist(p, clamp(p)); }
  bool overlaps(const Rect& o) const {
    return x0 <= o.x1 && o.x0 <= x1 && y0 <= o.y1 && o.y0 <= y1;
  }
};

// Distance from segment [a,b] to point p.
inline double segment_point_distance(const Vec2& a, const Vec2& b, const Vec2& p) {
  const Vec2 ab = b - a;
  const double len2 = ab.dot(ab);
  if (len2 <= 1e-18) return dist(a, p);
  const double t = std::clamp((p - a).dot(ab) / len2, 0.0, 1.0);
  return dist(a + ab * t, p);
}

// True when the capsule (segment a-b with radius r) intersects the solid rect.
inline bool capsule_hits_rect(const Vec2& a, const Vec2& b, double r, const Rect& rect) {
  if (rect.contains(a) || rect.contains(b)) return true;
  // Segment against the rect expanded by r: near enough to any edge or corner.
  const Vec2 corners[4] = {{rect.x0, rect.y0}, {rect.x1, rect.y0}, {rect.x1, rect.y1},
                           {rect.x0, rect.y1}};
  for (int i = 0; i < 4; ++i) {
    const Vec2& c0 = corners[i];
    const Vec2& c1 = corners[(i + 1) % 4];
    // segment-segment distance via endpoint-to-segment distances plus crossing test
    const Vec2 d1 = b - a, d2 = c1 - c0;
    const double denom = d1.cross(d2);
    if (std::fabs(denom) > 1e-18) {
      const double t = (c0 - a).cross(d2) / denom;
      const double u = (c0 - a).cross(d1) / denom;
      if (t >= 0 && t <= 1 && u >= 0 && u <= 1) return true;  // proper crossing
    }
    double d = std::min(std::min(segment_point_distance(a, b, c0), segment_point_distance(a, b, c1)),
                        std::min(segment_point_distance(c0, c1, a), segment_point_distance(c0, c1, b)));
    if (d <= r) return true;
  }
  return false;
}

// Ray-rectangle intersection (slab method). Returns the entry parameter t >= 0
// along unit direction d, or a negative value when there is no hit.
inline double ray_rect_entry(const Vec2& o, const Vec2& d, const Rect& r) {
  double tmin = -std::numeric_limits<double>::infinity();
  double tmax = std::numeric_limits<double>::infinity();
  if (std::fabs(d.x) < 1e-12) {
    if (o.x < r.x0 || o.x > r.x1) return -1.0;
  } else {
    double t1 = (r.x0 - o.x) / d.x, t2 = (r.x1 - o.x) / d.x;
    if (t1 > t2) std::swap(t1, t2);
    tmin = std::max(tmin, t1);
    tmax = std::min(tmax, t2);
  }
  if (std::fabs(d.y) < 1e-12) {
    if (o.y < r.y0 || o.y > r.y1) return -1.0;
  } else {
    double t1 = (r.y0 - o.y) / d.y, t2 = (r.y1 - o.y) / d.y;
    if (t1 > t2) std::swap(t1, t2);
    tmin = std::max(tmin, t1);
    tmax = std::min(tmax, t2);
  }
  if (tmax < tmin || tmax < 0.0) return -1.0;
  return tmin >= 0.0 ? tmin : 0.0;
}

// Ray-circle intersection; nearest non-negative t or negative when missed.
inline double ray_circle_entry(const Vec2& o, const Vec2& d, const Vec2& c, double radius) {
  const Vec2 oc = o - c;
  const double b = oc.dot(d);
  const double disc = b * b - (oc.dot(oc) - radius * radius);
  if (disc < 0.0) return -1.0;
  const double s = std::sqrt(disc);
  const double t0 = -b - s;
  if (t0 >= 0.0) return t0;
  const double t1 = -b + s;
  return t1 >= 0.0 ? t1 : -1.0;
}

}  // namespace rearrange
