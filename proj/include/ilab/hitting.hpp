#pragma once

// Hitting estimates around segment tubes: the harmonic-sum martingale over the
// rod-extended spine, its explicit upper/lower bounds, optional stopping
// checks, and direction-swept escape probabilities.
//
// Conventions. For x with |x| large, e = x/|x|:
//   spine        [je] for j in [0, ceil|x|]           (the lattice segment)
//   tilde spine  [je] for j in [-floor|x|, floor 2|x|] (two stabilizing rods)
//   T^2, T^3     tubes of radius |x|^{(1-eps)delta}, |x|^delta around the spine
//   T~^2         T^2 together with the rod points
//   M(p)         sum_j g(p, [je]) over the index range; harmonic off T~^2, so
//                M(X_t) stopped at H_{T~^2} (or any bounded region) is a
//                martingale for starts outside T~^2
//
// M sums over the integer index j, not over distinct points: for oblique
// directions consecutive [je] collide (up to sqrt(3)-fold on the diagonal),
// and only the index-weighted sum gives bounds uniform over the direction of
// x. A per-unit-parameter density is also what the harmonic-sum estimates
// count when they partition indices into distance bands of size 2*d each.
//   Ext          tilde-spine points within |x|/2 of [2x] or [-x]
//   L            z in T(x,4R) \ T^3 with d(z, line) >= R/4, R = |x|^delta
//
// The M-bound checks sample L and T~^2 \ Ext and compare M against
//   upper (on L):            2 c2 (1 - (1 - 0.1 eps) delta) log|x|
//   lower (on T~^2 \ Ext):   2 c2 (1 - (1 - 0.9 eps) delta) log|x|
// These are asymptotic statements: at desk scales the upper one fails on a
// band of line-distances whose relative width shrinks as |x| grows, so the
// meaningful finite-size observable is the violation *fraction* trend.
//
// Escape probabilities are estimated with walks stopped on a sphere of radius
// rho ~ |x| and the return probability from the stopping point closed by a
// line-charge approximation: the hit set is within a few tube radii of the
// tilde spine, whose equilibrium measure is near-uniform with total mass
// ~ pi L / (3 log L) for a needle of length L. The charge model is only good
// to a few tens of percent, so its contribution is also folded into an error
// band rather than trusted silently.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "ilab/geometry.hpp"
#include "ilab/lattice.hpp"
#include "ilab/potential.hpp"
#include "ilab/rng.hpp"
#include "ilab/stats.hpp"
#include "ilab/walkers.hpp"

namespace ilab {

class MartingaleSpec {
 public:
  MartingaleSpec(Vec3 x, double delta, double eps)
      : x_(x), delta_(delta), eps_(eps), xn_(norm2(x)) {
    if (xn_ < 8.0) throw std::invalid_argument("martingale spec: |x| too small");
    if (delta <= 0 || delta >= 1 || eps <= 0 || eps >= 1)
      throw std::invalid_argument("martingale spec: need delta, eps in (0,1)");
    e_ = DVec3{double(x.x) / xn_, double(x.y) / xn_, double(x.z) / xn_};
    r2_ = std::pow(xn_, (1.0 - eps) * delta);
    r3_ = std::pow(xn_, delta);
    j_hi_ = int64_t(std::ceil(xn_));
    rod_lo_ = -int64_t(std::floor(xn_));
    rod_hi_ = int64_t(std::floor(2.0 * xn_));
    x_plus_ = round_to_lattice(2.0 * xn_ * e_);
    x_minus_ = round_to_lattice(-xn_ * e_);
    t2_.emplace(Tube::around_segment(x, r2_));
    t3_.emplace(Tube::around_segment(x, r3_));
    t4r_.emplace(Tube::around_segment(x, 4.0 * r3_));
    tilde_.reserve(size_t(rod_hi_ - rod_lo_ + 1));
    for (int64_t j = rod_lo_; j <= rod_hi_; ++j) {
      Vec3 p = round_to_lattice(double(j) * e_);
      if (tilde_.empty() || !(tilde_.back() == p)) {
        tilde_.push_back(p);
        mult_.push_back(1.0);
      } else {
        mult_.back() += 1.0;  // collided index, keep its weight
      }
    }
  }

  Vec3 x() const { return x_; }
  double delta() const { return delta_; }
  double eps() const { return eps_; }
  double xnorm() const { return xn_; }
  double r2() const { return r2_; }
  double r3() const { return r3_; }
  DVec3 e() const { return e_; }
  const std::vector<Vec3>& tilde_points() const { return tilde_; }
  const std::vector<double>& tilde_mult() const { return mult_; }
  int64_t j_count() const { return rod_hi_ - rod_lo_ + 1; }
  Vec3 mid() const { return round_to_lattice(0.5 * xn_ * e_); }

  double spine_t(Vec3 p) const { return dot(to_dvec(p), e_); }
  double line_dist(Vec3 p) const {
    double t = spine_t(p);
    double d2 = double(norm2_sq(p)) - t * t;
    return d2 > 0 ? std::sqrt(d2) : 0.0;
  }

  bool in_t2(Vec3 p) const { return t2_->contains(p); }
  bool in_t3(Vec3 p) const { return t3_->contains(p); }
  bool in_t4r(Vec3 p) const { return t4r_->contains(p); }

  bool on_rod(Vec3 p) const {
    if (line_dist(p) > 0.87) return false;  // rounded spine points stay this close
    double t = spine_t(p);
    int64_t jc = int64_t(std::llround(t));
    for (int64_t j = jc - 2; j <= jc + 2; ++j) {
      if (j < rod_lo_ || j > rod_hi_) continue;
      bool in_rods = (j <= 0) || (j >= j_hi_);
      if (!in_rods) continue;
      if (round_to_lattice(double(j) * e_) == p) return true;
    }
    return false;
  }

  bool in_t2_tilde(Vec3 p) const { return in_t2(p) || on_rod(p); }

  bool in_ext(Vec3 p) const {
    double half = 0.5 * xn_;
    return norm2(p - x_plus_) <= half || norm2(p - x_minus_) <= half;
  }

  // the martingale's value: index-weighted sum of Green values over the spine
  double m0(Vec3 p) const {
    double acc = 0;
    for (size_t i = 0; i < tilde_.size(); ++i) acc += mult_[i] * green_eval(p - tilde_[i]);
    return acc;
  }

  double upper_bound() const {
    return 2.0 * kGreenC2 * (1.0 - (1.0 - 0.1 * eps_) * delta_) * std::log(xn_);
  }
  double lower_bound() const {
    return 2.0 * kGreenC2 * (1.0 - (1.0 - 0.9 * eps_) * delta_) * std::log(xn_);
  }

 private:
  Vec3 x_;
  double delta_, eps_, xn_, r2_ = 0, r3_ = 0;
  DVec3 e_{};
  int64_t j_hi_ = 0, rod_lo_ = 0, rod_hi_ = 0;
  Vec3 x_plus_{}, x_minus_{};
  std::optional<Tube> t2_, t3_, t4r_;
  std::vector<Vec3> tilde_;
  std::vector<double> mult_;
};

// ---- M-bound sampling -------------------------------------------------------------

struct BoundCheckReport {
  int64_t n_long = 0, n_tube = 0;
  double upper_bound = 0, lower_bound = 0;
  double upper_viol_frac = 0, upper_viol_se = 0;  // fraction of L samples with M > upper
  double lower_viol_frac = 0, lower_viol_se = 0;  // fraction of tube samples with M < lower
  double mean_m_long = 0, mean_m_tube = 0;
  double min_m_long = 0, max_m_long = 0;
};

// draws z uniformly-in-parameter from L and from T~^2 \ Ext without ever
// materializing either set (L alone has ~|x|^{1+2delta} sites)
inline BoundCheckReport mart_bound_check(const MartingaleSpec& spec, int64_t n_long,
                                         int64_t n_tube, uint64_t seed, int workers = 1) {
  if (n_long < 1 || n_tube < 1) throw std::invalid_argument("mart_bound_check: need samples");
  BoundCheckReport rep;
  rep.n_long = n_long;
  rep.n_tube = n_tube;
  rep.upper_bound = spec.upper_bound();
  rep.lower_bound = spec.lower_bound();

  const double big_r = spec.r3();
  const int64_t j_hi = int64_t(std::ceil(spec.xnorm()));
  auto perp_dir = [&](Rng& rng) {
    for (;;) {
      DVec3 v{rng.normal(), rng.normal(), rng.normal()};
      double along = v.x * spec.e().x + v.y * spec.e().y + v.z * spec.e().z;
      v = {v.x - along * spec.e().x, v.y - along * spec.e().y, v.z - along * spec.e().z};
      double n = std::sqrt(v.x * v.x + v.y * v.y + v.z * v.z);
      if (n > 1e-3) return DVec3{v.x / n, v.y / n, v.z / n};
    }
  };

  std::vector<double> m_long(static_cast<size_t>(n_long));
  std::vector<double> m_tube(static_cast<size_t>(n_tube));
  parallel_for(n_long, workers, [&](int64_t i) {
    Rng rng(derive_seed(seed, 0x10a6, uint64_t(i)));
    for (;;) {
      int64_t j = int64_t(rng.below(uint64_t(j_hi + 1)));
      DVec3 v = perp_dir(rng);
      double s = 0.25 * big_r + rng.u01() * (4.0 - 0.25) * big_r;
      Vec3 z = round_to_lattice(double(j) * spec.e() + s * v);
      if (spec.in_t3(z) || !spec.in_t4r(z)) continue;
      if (spec.line_dist(z) < 0.25 * big_r) continue;
      m_long[size_t(i)] = spec.m0(z);
      return;
    }
  });
  parallel_for(n_tube, workers, [&](int64_t i) {
    Rng rng(derive_seed(seed, 0x70be, uint64_t(i)));
    for (;;) {
      int64_t span = int64_t(std::floor(2.0 * spec.xnorm())) + int64_t(std::floor(spec.xnorm()));
      int64_t j = -int64_t(std::floor(spec.xnorm())) + int64_t(rng.below(uint64_t(span + 1)));
      Vec3 z;
      if (j >= 0 && j <= j_hi) {
        DVec3 v = perp_dir(rng);
        double s = rng.u01() * spec.r2();
        z = round_to_lattice(double(j) * spec.e() + s * v);
        if (!spec.in_t2_tilde(z)) continue;  // rounding pushed it just outside
      } else {
        z = round_to_lattice(double(j) * spec.e());
      }
      if (spec.in_ext(z)) continue;
      m_tube[size_t(i)] = spec.m0(z);
      return;
    }
  });

  RunningStat sl, st;
  int64_t upper_viol = 0, lower_viol = 0;
  double mn = m_long[0], mx = m_long[0];
  for (double m : m_long) {
    sl.add(m);
    mn = std::min(mn, m);
    mx = std::max(mx, m);
    if (m > rep.upper_bound) ++upper_viol;
  }
  for (double m : m_tube) {
    st.add(m);
    if (m < rep.lower_bound) ++lower_viol;
  }
  rep.mean_m_long = sl.mean();
  rep.mean_m_tube = st.mean();
  rep.min_m_long = mn;
  rep.max_m_long = mx;
  rep.upper_viol_frac = double(upper_viol) / double(n_long);
  rep.lower_viol_frac = double(lower_viol) / double(n_tube);
  rep.upper_viol_se =
      std::sqrt(rep.upper_viol_frac * (1.0 - rep.upper_viol_frac) / double(n_long));
  rep.lower_viol_se =
      std::sqrt(rep.lower_viol_frac * (1.0 - rep.lower_viol_frac) / double(n_tube));
  return rep;
}

// ---- optional stopping ---------------------------------------------------------------

struct StoppingOptions {
  int64_t n_paths = 10000;
  double stop_radius_factor = 3.0;  // sphere radius, times |x|, around [x/2]
  uint64_t seed = 1;
  int workers = 1;
  uint64_t max_steps = uint64_t(1) << 33;
};

struct StoppingReport {
  Vec3 y{};
  double m_start = 0;    // M(y), the exact initial value
  double mean_m_tau = 0; // MC average of M at the stopping time
  double se = 0;
  double diff_sigmas = 0;
  int64_t n_hit = 0, n_sphere = 0, truncated = 0;
};

// tau = H_{T~^2} ^ T_{B([x/2], factor |x|)} is bounded-region stopping, so
// E_y[M_tau] = M(y) holds exactly for any factor; the MC mean has to agree
// within noise.
inline StoppingReport optional_stopping(const MartingaleSpec& spec, Vec3 y,
                                        const StoppingOptions& opt = {}) {
  if (spec.in_t2_tilde(y)) throw std::invalid_argument("optional_stopping: start inside T~^2");
  StoppingReport rep;
  rep.y = y;
  rep.m_start = spec.m0(y);
  const Vec3 c = spec.mid();
  const double rho = opt.stop_radius_factor * spec.xnorm();
  if (norm2(y - c) >= rho) throw std::invalid_argument("optional_stopping: start outside sphere");

  std::vector<double> vals(size_t(opt.n_paths));
  std::vector<uint8_t> hit_flag(size_t(opt.n_paths), 0), trunc_flag(size_t(opt.n_paths), 0);
  parallel_for(opt.n_paths, opt.workers, [&](int64_t i) {
    Rng rng(derive_seed(opt.seed, 0x0b7, uint64_t(i)));
    auto w = walk_until(
        y, [&](Vec3 p) { return spec.in_t2_tilde(p); }, c, rho, rng, opt.max_steps);
    vals[size_t(i)] = spec.m0(w.end);
    hit_flag[size_t(i)] = w.hit ? 1 : 0;
    trunc_flag[size_t(i)] = w.truncated ? 1 : 0;
  });
  RunningStat s;
  for (int64_t i = 0; i < opt.n_paths; ++i) {
    s.add(vals[size_t(i)]);
    rep.n_hit += hit_flag[size_t(i)];
    rep.truncated += trunc_flag[size_t(i)];
  }
  rep.n_sphere = opt.n_paths - rep.n_hit;
  rep.mean_m_tau = s.mean();
  rep.se = s.stderror();
  rep.diff_sigmas = rep.se > 0 ? std::abs(rep.mean_m_tau - rep.m_start) / rep.se : 0.0;
  return rep;
}

// ---- escape probabilities -----------------------------------------------------------

struct EscapeOptions {
  int64_t n_walks = 400;
  double rho_factor = 1.5;    // stop sphere radius, times |x|
  double charge_slack = 0.3;  // relative distrust of the line-charge model
  uint64_t seed = 1;
  int workers = 1;
  uint64_t max_steps = uint64_t(1) << 33;
};

struct EscapeReport {
  Vec3 y{};
  double p_hard = 0;    // plain fraction of walks reaching the sphere
  double p_escape = 0;  // corrected by the return probability from the sphere
  double se = 0;
  double correction_mean = 0;  // mean return probability over escaped walks
  double bias_band = 0;        // charge_slack * correction_mean
  double floor_value = 0;      // 0.01 * delta * eps
  bool above_floor = false;
  int64_t n = 0, truncated = 0;
};

// P_y[H_{T~^2} = infinity], via walks stopped on the sphere of radius
// rho_factor*|x| around [x/2] and the line-charge return correction
// phi(w) ~ sum_z chat/|tilde| * g(w - z), chat = pi L/(3 log L), L = 3|x|.
inline EscapeReport escape_probability_mc(const MartingaleSpec& spec, Vec3 y,
                                          const EscapeOptions& opt = {}) {
  if (spec.in_t2_tilde(y)) throw std::invalid_argument("escape mc: start inside T~^2");
  EscapeReport rep;
  rep.y = y;
  rep.n = opt.n_walks;
  rep.floor_value = 0.01 * spec.delta() * spec.eps();
  const Vec3 c = spec.mid();
  const double rho = opt.rho_factor * spec.xnorm();
  const double needle_len = 3.0 * spec.xnorm();
  const double chat = kPi * needle_len / (3.0 * std::log(needle_len));
  const double per_point = chat / double(spec.j_count());

  std::vector<double> weight(size_t(opt.n_walks), 0.0);
  std::vector<double> corr(size_t(opt.n_walks), 0.0);
  std::atomic<int64_t> truncated{0};
  parallel_for(opt.n_walks, opt.workers, [&](int64_t i) {
    Rng rng(derive_seed(opt.seed, 0xe5c, uint64_t(i)));
    auto w = walk_until(
        y, [&](Vec3 p) { return spec.in_t2_tilde(p); }, c, rho, rng, opt.max_steps);
    if (w.truncated) truncated.fetch_add(1, std::memory_order_relaxed);
    if (!w.hit) {
      double phi = per_point * spec.m0(w.end);
      corr[size_t(i)] = std::min(1.0, phi);
      weight[size_t(i)] = std::max(0.0, 1.0 - phi);
    }
  });
  rep.truncated = truncated.load();
  RunningStat s, sc;
  int64_t escaped = 0;
  for (int64_t i = 0; i < opt.n_walks; ++i) {
    s.add(weight[size_t(i)]);
    if (weight[size_t(i)] > 0 || corr[size_t(i)] > 0) {
      ++escaped;
      sc.add(corr[size_t(i)]);
    }
  }
  rep.p_hard = double(escaped) / double(opt.n_walks);
  rep.p_escape = s.mean();
  rep.se = s.stderror();
  rep.correction_mean = sc.n() > 0 ? sc.mean() : 0.0;
  rep.bias_band = opt.charge_slack * rep.correction_mean * rep.p_hard;
  rep.above_floor = rep.p_escape - 3.0 * rep.se - rep.bias_band >= rep.floor_value;
  return rep;
}

// places the start point on a perpendicular at mid-spine, a couple of T^3
// radii off the axis (so y is outside T^3 but still "near" the tube)
inline Vec3 escape_start_point(const MartingaleSpec& spec, double line_factor = 2.0) {
  DVec3 e = spec.e();
  DVec3 ref = std::abs(e.x) < 0.9 ? DVec3{1, 0, 0} : DVec3{0, 1, 0};
  DVec3 p{e.y * ref.z - e.z * ref.y, e.z * ref.x - e.x * ref.z, e.x * ref.y - e.y * ref.x};
  double n = std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z);
  p = {p.x / n, p.y / n, p.z / n};
  for (double f = line_factor; f < line_factor + 4.0; f += 0.25) {
    Vec3 y = round_to_lattice(0.5 * spec.xnorm() * e + f * spec.r3() * p);
    if (!spec.in_t3(y) && !spec.in_t2_tilde(y)) return y;
  }
  throw std::runtime_error("escape_start_point: could not leave T^3");
}

struct SweepOptions {
  int n_dirs = 20;
  double line_factor = 2.0;
  EscapeOptions walk;
};

struct SweepReport {
  std::vector<Vec3> xs, ys;
  std::vector<EscapeReport> reports;
  double min_p = 0, max_p = 0;
  bool all_above_floor = false;
  int inconsistent_pairs = 0;  // pairs differing by more than 3(se_i+se_j)+bands
  bool consistent_3se = false;
};

// uniformity of the escape probability over the direction of x: the estimate
// should not depend on the direction beyond MC noise plus the charge band
inline SweepReport direction_sweep(double xnorm, double delta, double eps,
                                   const SweepOptions& opt = {}) {
  if (opt.n_dirs < 1) throw std::invalid_argument("direction_sweep: need directions");
  SweepReport rep;
  for (int k = 0; k < opt.n_dirs; ++k) {
    Vec3 x;
    Rng rng(derive_seed(opt.walk.seed, 0xd112, uint64_t(k)));
    for (;;) {
      DVec3 v{rng.normal(), rng.normal(), rng.normal()};
      double n = std::sqrt(v.x * v.x + v.y * v.y + v.z * v.z);
      if (n < 1e-3) continue;
      x = round_to_lattice({xnorm * v.x / n, xnorm * v.y / n, xnorm * v.z / n});
      if (norm2(x) > 0.9 * xnorm) break;
    }
    MartingaleSpec spec(x, delta, eps);
    Vec3 y = escape_start_point(spec, opt.line_factor);
    EscapeOptions wopt = opt.walk;
    wopt.seed = derive_seed(opt.walk.seed, 0x5ee9, uint64_t(k));
    rep.xs.push_back(x);
    rep.ys.push_back(y);
    rep.reports.push_back(escape_probability_mc(spec, y, wopt));
  }
  rep.min_p = rep.reports[0].p_escape;
  rep.max_p = rep.reports[0].p_escape;
  rep.all_above_floor = true;
  for (const auto& r : rep.reports) {
    rep.min_p = std::min(rep.min_p, r.p_escape);
    rep.max_p = std::max(rep.max_p, r.p_escape);
    rep.all_above_floor = rep.all_above_floor && r.above_floor;
  }
  for (size_t i = 0; i < rep.reports.size(); ++i)
    for (size_t j = i + 1; j < rep.reports.size(); ++j) {
      const auto &a = rep.reports[i], &b = rep.reports[j];
      double tol = 3.0 * (a.se + b.se) + a.bias_band + b.bias_band;
      if (std::abs(a.p_escape - b.p_escape) > tol) ++rep.inconsistent_pairs;
    }
  rep.consistent_3se = rep.inconsistent_pairs == 0;
  return rep;
}

}  // namespace ilab
