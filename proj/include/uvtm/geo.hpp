#pragma once

#include <cmath>

namespace uvtm {

inline constexpr double kEarthRadiusM = 6371000.0;
inline constexpr double kDegToRad = 3.14159265358979323846 / 180.0;

struct LngLat {
  double lng = 0.0;
  double lat = 0.0;

  bool operator==(const LngLat&) const = default;
};

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

/// Great-circle distance in meters.
double haversine_m(LngLat a, LngLat b);

/// Local equirectangular projection around an origin, in meters.
class LocalFrame {
 public:
  explicit LocalFrame(LngLat origin)
      : origin_(origin),
        mx_(kEarthRadiusM * kDegToRad * std::cos(origin.lat * kDegToRad)),
        my_(kEarthRadiusM * kDegToRad) {}

  Vec2 to_xy(LngLat p) const { return {(p.lng - origin_.lng) * mx_, (p.lat - origin_.lat) * my_}; }
  LngLat to_lnglat(Vec2 v) const { return {origin_.lng + v.x / mx_, origin_.lat + v.y / my_}; }
  LngLat origin() const { return origin_; }

 private:
  LngLat origin_;
  double mx_;
  double my_;
};

/// Closest point on segment [a,b] to p; returns the parameter t in [0,1].
inline double closest_param(Vec2 p, Vec2 a, Vec2 b) {
  const double dx = b.x - a.x;
  const double dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  if (len2 <= 0.0) return 0.0;
  double t = ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2;
  return t < 0.0 ? 0.0 : (t > 1.0 ? 1.0 : t);
}

}  // namespace uvtm
