#pragma once

// Six-axis attitude estimation: an error-state Kalman filter with a
// three-dimensional attitude-error state, gyro-driven prediction and an
// accelerometer gravity-direction measurement. Yaw is unobservable and is
// allowed to drift; the tilt angle does not depend on it.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "fallkan/error.hpp"
#include "fallkan/sisfall.hpp"

namespace fallkan {

/// Unit quaternion, scalar first: (q1, q2, q3, q4) = (w, x, y, z).
/// Rotates body-frame vectors into the world frame (world z points up).
struct Quaternion {
  double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

  Quaternion operator-() const { return {-w, -x, -y, -z}; }

  Quaternion conjugate() const { return {w, -x, -y, -z}; }

  friend Quaternion operator*(const Quaternion& a, const Quaternion& b) {
    return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
  }

  friend bool operator==(const Quaternion&, const Quaternion&) = default;
};

/// Normalized with non-negative scalar part.
inline Quaternion canonical(Quaternion q) {
  const double n = q.norm();
  q = {q.w / n, q.x / n, q.y / n, q.z / n};
  return q.w < 0.0 ? -q : q;
}

/// Exact exponential map of a rotation vector (radians).
inline Quaternion quat_exp(const Vec3& rv) {
  const double angle = std::sqrt(rv[0] * rv[0] + rv[1] * rv[1] + rv[2] * rv[2]);
  const double half = 0.5 * angle;
  // sin(half)/angle, with its Taylor form near zero.
  const double k = angle < 1e-8 ? 0.5 - angle * angle / 48.0 : std::sin(half) / angle;
  return {std::cos(half), k * rv[0], k * rv[1], k * rv[2]};
}

inline Vec3 rotate(const Quaternion& q, const Vec3& v) {
  const Quaternion p{0.0, v[0], v[1], v[2]};
  const auto r = q * p * q.conjugate();
  return {r.x, r.y, r.z};
}

/// Shortest-arc rotation taking unit vector `from` onto unit vector `to`.
inline Quaternion rotation_between(const Vec3& from, const Vec3& to) {
  const double d = from[0] * to[0] + from[1] * to[1] + from[2] * to[2];
  if (d < -1.0 + 1e-12) {
    // Antiparallel: rotate by pi about any axis orthogonal to `from`.
    Vec3 axis = std::abs(from[0]) < 0.9 ? Vec3{0.0, -from[2], from[1]} : Vec3{-from[2], 0.0, from[0]};
    const double n = std::hypot(axis[0], axis[1], axis[2]);
    return canonical({0.0, axis[0] / n, axis[1] / n, axis[2] / n});
  }
  const Vec3 c{from[1] * to[2] - from[2] * to[1], from[2] * to[0] - from[0] * to[2],
               from[0] * to[1] - from[1] * to[0]};
  return canonical({1.0 + d, c[0], c[1], c[2]});
}

// ---------------------------------------------------------------------------
// 3x3 helpers (row-major)

using Mat3 = std::array<double, 9>;

namespace mat3 {

inline Mat3 identity(double s = 1.0) { return {s, 0, 0, 0, s, 0, 0, 0, s}; }

inline Mat3 mul(const Mat3& a, const Mat3& b) {
  Mat3 c{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      c[3 * i + j] = a[3 * i] * b[j] + a[3 * i + 1] * b[3 + j] + a[3 * i + 2] * b[6 + j];
  return c;
}

inline Mat3 transpose(const Mat3& a) { return {a[0], a[3], a[6], a[1], a[4], a[7], a[2], a[5], a[8]}; }

inline Mat3 add(const Mat3& a, const Mat3& b) {
  Mat3 c;
  for (int i = 0; i < 9; ++i) c[i] = a[i] + b[i];
  return c;
}

inline Mat3 sub(const Mat3& a, const Mat3& b) {
  Mat3 c;
  for (int i = 0; i < 9; ++i) c[i] = a[i] - b[i];
  return c;
}

inline Mat3 skew(const Vec3& v) { return {0, -v[2], v[1], v[2], 0, -v[0], -v[1], v[0], 0}; }

inline Vec3 apply(const Mat3& a, const Vec3& v) {
  return {a[0] * v[0] + a[1] * v[1] + a[2] * v[2], a[3] * v[0] + a[4] * v[1] + a[5] * v[2],
          a[6] * v[0] + a[7] * v[1] + a[8] * v[2]};
}

inline Mat3 inverse(const Mat3& a) {
  const double c00 = a[4] * a[8] - a[5] * a[7];
  const double c01 = a[5] * a[6] - a[3] * a[8];
  const double c02 = a[3] * a[7] - a[4] * a[6];
  const double det = a[0] * c00 + a[1] * c01 + a[2] * c02;
  if (det == 0.0 || !std::isfinite(det)) throw NumericError("singular 3x3 matrix");
  const double inv = 1.0 / det;
  return {c00 * inv,
          (a[2] * a[7] - a[1] * a[8]) * inv,
          (a[1] * a[5] - a[2] * a[4]) * inv,
          c01 * inv,
          (a[0] * a[8] - a[2] * a[6]) * inv,
          (a[2] * a[3] - a[0] * a[5]) * inv,
          c02 * inv,
          (a[1] * a[6] - a[0] * a[7]) * inv,
          (a[0] * a[4] - a[1] * a[3]) * inv};
}

inline Mat3 symmetrize(const Mat3& a) {
  Mat3 s = a;
  for (int i = 0; i < 3; ++i)
    for (int j = i + 1; j < 3; ++j) s[3 * i + j] = s[3 * j + i] = 0.5 * (a[3 * i + j] + a[3 * j + i]);
  return s;
}

/// Rotation matrix of a unit quaternion (body -> world).
inline Mat3 from_quaternion(const Quaternion& q) {
  const double w = q.w, x = q.x, y = q.y, z = q.z;
  return {1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),
          2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
          2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y)};
}

}  // namespace mat3

// ---------------------------------------------------------------------------
// Filter

enum class PrimaryAccelerometer { Adxl345, Mma8451q };

struct FilterConfig {
  double gyro_noise = 0.01;    ///< process noise density, rad^2/s
  double accel_noise = 0.05;   ///< measurement noise, g^2
  double gate_low = 0.7;       ///< accepted |a| band, g
  double gate_high = 1.3;
  double initial_variance = 0.01;  ///< rad^2, after a static start
  double dynamic_start_variance = 1.0;
  double init_window_s = 0.5;
  /// Body axis that points up when the wearer stands upright.
  Vec3 vertical_axis{0.0, 0.0, 1.0};
  PrimaryAccelerometer accelerometer = PrimaryAccelerometer::Adxl345;

  void validate() const {
    if (!(gyro_noise >= 0.0) || !(accel_noise > 0.0))
      throw ValidationError("filter noise must be non-negative (process) and positive (measurement)");
    if (!(gate_low < gate_high)) throw ValidationError("accelerometer gate band is empty");
    if (!(init_window_s > 0.0)) throw ValidationError("init window must be positive");
    const double n = std::hypot(vertical_axis[0], vertical_axis[1], vertical_axis[2]);
    if (std::abs(n - 1.0) > 1e-9) throw ValidationError("vertical axis must be a unit vector");
  }

  std::size_t init_window_samples() const {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(init_window_s * kSampleRateHz)));
  }

  const Vec3& accel(const CalibratedSample& s) const {
    return accelerometer == PrimaryAccelerometer::Adxl345 ? s.adxl345 : s.mma8451q;
  }
};

struct FilterState {
  Quaternion q;
  Mat3 P = mat3::identity(0.01);  ///< attitude-error covariance, rad^2
};

namespace detail {

inline bool finite(const Vec3& v) {
  return std::isfinite(v[0]) && std::isfinite(v[1]) && std::isfinite(v[2]);
}

inline double norm(const Vec3& v) { return std::hypot(v[0], v[1], v[2]); }

}  // namespace detail

/// Gyro propagation over dt with the exact exponential of the body rate.
inline FilterState predict_step(const FilterState& s, const Vec3& omega_dps, double dt,
                                const FilterConfig& cfg) {
  if (!detail::finite(omega_dps) || !std::isfinite(dt)) throw NumericError("non-finite gyro input");
  if (!(dt > 0.0)) throw ValidationError("predict_step requires dt > 0");
  constexpr double kDegToRad = std::numbers::pi / 180.0;
  const Vec3 rv{omega_dps[0] * kDegToRad * dt, omega_dps[1] * kDegToRad * dt,
                omega_dps[2] * kDegToRad * dt};
  const auto dq = quat_exp(rv);
  FilterState out;
  out.q = canonical(s.q * dq);
  // Error-state transition is the inverse incremental rotation.
  const auto F = mat3::from_quaternion(dq.conjugate());
  const auto P = mat3::mul(mat3::mul(F, s.P), mat3::transpose(F));
  out.P = mat3::symmetrize(mat3::add(P, mat3::identity(cfg.gyro_noise * dt)));
  return out;
}

/// Gravity-direction correction; the identity on the state when |a| lies
/// outside the gating band.
inline FilterState update_step(const FilterState& s, const Vec3& accel_g, const FilterConfig& cfg) {
  if (!detail::finite(accel_g)) throw NumericError("non-finite accelerometer input");
  const double n = detail::norm(accel_g);
  if (n < cfg.gate_low || n > cfg.gate_high) return s;

  const Vec3 measured{accel_g[0] / n, accel_g[1] / n, accel_g[2] / n};
  const auto R = mat3::from_quaternion(s.q);
  const Vec3 up_body{R[6], R[7], R[8]};  // R^T * e_z
  const Vec3 innovation{measured[0] - up_body[0], measured[1] - up_body[1],
                        measured[2] - up_body[2]};

  const auto H = mat3::skew(up_body);
  const auto Ht = mat3::transpose(H);
  const auto Rm = mat3::identity(cfg.accel_noise);
  const auto S = mat3::add(mat3::mul(mat3::mul(H, s.P), Ht), Rm);
  const auto K = mat3::mul(mat3::mul(s.P, Ht), mat3::inverse(S));
  const auto correction = mat3::apply(K, innovation);

  FilterState out;
  out.q = canonical(s.q * quat_exp(correction));
  // Joseph form keeps P symmetric positive semi-definite.
  const auto IKH = mat3::sub(mat3::identity(), mat3::mul(K, H));
  const auto P = mat3::add(mat3::mul(mat3::mul(IKH, s.P), mat3::transpose(IKH)),
                           mat3::mul(mat3::mul(K, Rm), mat3::transpose(K)));
  out.P = mat3::symmetrize(P);
  return out;
}

/// Initial state from a mean accelerometer reading: tilt-only attitude when
/// the mean is within the gating band, identity with inflated covariance
/// otherwise.
inline FilterState initial_state(const Vec3& mean_accel, const FilterConfig& cfg) {
  const double n = detail::norm(mean_accel);
  FilterState s;
  if (!(n >= cfg.gate_low && n <= cfg.gate_high)) {
    s.P = mat3::identity(cfg.dynamic_start_variance);
    return s;
  }
  const Vec3 up{mean_accel[0] / n, mean_accel[1] / n, mean_accel[2] / n};
  s.q = rotation_between(up, {0.0, 0.0, 1.0});
  s.P = mat3::identity(cfg.initial_variance);
  return s;
}

/// Sample-by-sample tracker; streaming and batch estimation share it.
class OrientationTracker {
 public:
  explicit OrientationTracker(FilterConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  void reset(const FilterState& s) {
    state_ = s;
    started_ = true;
  }

  /// Consumes one sample. The first sample seeds the state from its own
  /// accelerometer reading unless reset() was called.
  const Quaternion& step(const CalibratedSample& sample) {
    if (!started_) reset(initial_state(cfg_.accel(sample), cfg_));
    if (first_)
      first_ = false;
    else
      state_ = predict_step(state_, sample.itg3200, kSamplePeriodS, cfg_);
    state_ = update_step(state_, cfg_.accel(sample), cfg_);
    return state_.q;
  }

  const FilterState& state() const { return state_; }
  const FilterConfig& config() const { return cfg_; }

 private:
  FilterConfig cfg_;
  FilterState state_;
  bool started_ = false;
  bool first_ = true;
};

/// One quaternion per sample; the filter is seeded from the accelerometer
/// mean over the first `init_window_s` seconds.
inline std::vector<Quaternion> estimate_orientation(std::span<const CalibratedSample> samples,
                                                    const FilterConfig& cfg) {
  if (samples.empty()) throw ValidationError("estimate_orientation needs at least one sample");
  cfg.validate();
  const auto window = std::min(cfg.init_window_samples(), samples.size());
  Vec3 mean{};
  for (std::size_t i = 0; i < window; ++i)
    for (int k = 0; k < 3; ++k) mean[k] += cfg.accel(samples[i])[k];
  for (auto& m : mean) m /= static_cast<double>(window);

  OrientationTracker tracker(cfg);
  tracker.reset(initial_state(mean, cfg));
  std::vector<Quaternion> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(tracker.step(s));
  return out;
}

/// Angle between the body vertical axis rotated into the world and world up.
inline double tilt_angle(const Quaternion& q, const Vec3& vertical_axis = {0.0, 0.0, 1.0}) {
  if (std::abs(q.norm() - 1.0) > 1e-6) throw ValidationError("tilt_angle requires a unit quaternion");
  const auto v = rotate(q, vertical_axis);
  return std::atan2(std::hypot(v[0], v[1]), v[2]);
}

/// Finite-difference derivative: central in the interior, one-sided at the
/// ends. Both orders are exact on polynomials of their degree.
inline std::vector<double> angular_derivative(std::span<const double> theta, double dt, int order = 2) {
  if (order != 1 && order != 2) throw ValidationError("derivative order must be 1 or 2");
  if (!(dt > 0.0)) throw ValidationError("derivative step must be positive");
  const std::size_t n = theta.size();
  if (n < static_cast<std::size_t>(order + 1))
    throw ValidationError("series too short for derivative of order " + std::to_string(order));
  std::vector<double> d(n);
  if (order == 1) {
    for (std::size_t i = 1; i + 1 < n; ++i) d[i] = (theta[i + 1] - theta[i - 1]) / (2.0 * dt);
    d[0] = (theta[1] - theta[0]) / dt;
    d[n - 1] = (theta[n - 1] - theta[n - 2]) / dt;
  } else {
    const double h2 = dt * dt;
    for (std::size_t i = 1; i + 1 < n; ++i) d[i] = (theta[i + 1] - 2.0 * theta[i] + theta[i - 1]) / h2;
    d[0] = (theta[2] - 2.0 * theta[1] + theta[0]) / h2;
    d[n - 1] = (theta[n - 1] - 2.0 * theta[n - 2] + theta[n - 3]) / h2;
  }
  return d;
}

/// Backward-difference derivative at the newest sample, for causal use.
/// `recent` holds the last order+1 values, oldest first.
inline double causal_derivative(std::span<const double> recent, double dt, int order = 2) {
  if (order == 1) return (recent[1] - recent[0]) / dt;
  return (recent[2] - 2.0 * recent[1] + recent[0]) / (dt * dt);
}

struct TiltSeries {
  std::vector<double> theta;        ///< rad, in [0, pi]
  std::vector<double> theta_deriv;  ///< rad/s^order
};

inline TiltSeries tilt_series(std::span<const Quaternion> qs, const Vec3& vertical_axis,
                              int derivative_order = 2) {
  TiltSeries t;
  t.theta.reserve(qs.size());
  for (const auto& q : qs) t.theta.push_back(tilt_angle(q, vertical_axis));
  if (t.theta.size() > static_cast<std::size_t>(derivative_order))
    t.theta_deriv = angular_derivative(t.theta, kSamplePeriodS, derivative_order);
  else
    t.theta_deriv.assign(t.theta.size(), 0.0);
  return t;
}

}  // namespace fallkan
