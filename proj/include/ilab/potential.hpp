#pragma once

// Discrete potential theory for the jump chain of continuous-time SRW on Z^3
// (mean-one holding, so jump-chain and time Green functions coincide):
// killed Green functions, equilibrium measures and capacities relative to a
// finite enclosure or to infinity, hitting kernels, harmonic extension and
// the Dirichlet form. Conventions: P f(x) = (1/6) sum_nbr f, Delta = P - I,
// g_U solves (I - P) g = delta on U, e_{K,U}(y) = P_y[no return to K before
// exiting U] on K, cap = total mass.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <vector>

#include "ilab/boxgrid.hpp"
#include "ilab/domain.hpp"
#include "ilab/geometry.hpp"
#include "ilab/lattice.hpp"

namespace ilab {

// far-field coefficient of the free Green function, g(0,x) ~ kGreenC2 / |x|
inline constexpr double kGreenC2 = 3.0 / (2.0 * kPi);

// negative weights below this magnitude are solver noise and get clamped;
// anything more negative is a real sign error and must be fatal
inline constexpr double kMeasureNegTol = 1e-12;

struct Measure {
  std::vector<Vec3> sites;  // sorted
  std::vector<double> w;
  double total = 0;
};

inline Measure make_measure(std::vector<std::pair<Vec3, double>> entries) {
  std::sort(entries.begin(), entries.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  Measure m;
  m.sites.reserve(entries.size());
  m.w.reserve(entries.size());
  for (auto& [p, v] : entries) {
    if (v < -kMeasureNegTol)
      throw std::runtime_error("measure: negative weight beyond noise tolerance");
    double vv = v < 0 ? 0.0 : v;
    m.sites.push_back(p);
    m.w.push_back(vv);
    m.total += vv;
  }
  return m;
}

inline double measure_at(const Measure& m, Vec3 p) {
  auto it = std::lower_bound(m.sites.begin(), m.sites.end(), p);
  if (it == m.sites.end() || !(*it == p)) return 0.0;
  return m.w[size_t(it - m.sites.begin())];
}

// sparse scalar field with a default value off its support
class ScalarField {
 public:
  explicit ScalarField(double def = 0.0) : def_(def) {}

  void set(Vec3 p, double v) { v_[p] = v; }
  double at(Vec3 p) const {
    auto it = v_.find(p);
    return it == v_.end() ? def_ : it->second;
  }
  bool has(Vec3 p) const { return v_.count(p) > 0; }
  double default_value() const { return def_; }
  size_t support_size() const { return v_.size(); }
  const std::unordered_map<Vec3, double, Vec3Hash>& entries() const& { return v_; }
  const std::unordered_map<Vec3, double, Vec3Hash>& entries() const&& = delete;

  double laplacian(Vec3 p) const {
    double s = 0;
    for (auto d : kDirs) s += at(p + d);
    return s / 6.0 - at(p);
  }

 private:
  std::unordered_map<Vec3, double, Vec3Hash> v_;
  double def_;
};

inline ScalarField field_from(const FiniteDomain& dom, const std::vector<double>& vals,
                              double def = 0.0) {
  ScalarField f(def);
  for (int32_t i = 0; i < dom.size(); ++i) f.set(dom.site(i), vals[size_t(i)]);
  return f;
}

// E(f,g) = sum over unordered edges of (1/2d)(f(x)-f(y))(g(x)-g(y)); only
// edges touching the stored support of f or g can contribute
inline double dirichlet_form(const ScalarField& f, const ScalarField& g) {
  double acc = 0;
  PointSet support;
  for (const auto& [x, v] : f.entries()) support.insert(x);
  for (const auto& [x, v] : g.entries()) support.insert(x);
  for (auto x : support.raw()) {
    for (auto d : kDirs) {
      Vec3 y = x + d;
      if (support.contains(y) && y < x) continue;
      acc += (f.at(x) - f.at(y)) * (g.at(x) - g.at(y)) / 6.0;
    }
  }
  return acc;
}

// Gauss-Green pairing sum_x f(x) (-Delta g)(x) over the support of g's
// variation plus its 1-neighborhood (the only sites where Delta g != 0)
inline double gauss_green_pairing(const ScalarField& f, const ScalarField& g) {
  PointSet sites;
  for (const auto& [x, v] : g.entries()) {
    sites.insert(x);
    for (auto d : kDirs) sites.insert(x + d);
  }
  double acc = 0;
  for (auto x : sites.raw()) acc += f.at(x) * (-g.laplacian(x));
  return acc;
}

// ---- killed Green function -------------------------------------------------

class KilledGreen {
 public:
  explicit KilledGreen(FiniteDomain dom) : dom_(std::move(dom)), solver_(dom_) {}

  const FiniteDomain& domain() const { return dom_; }

  // g_U(x, .) over the domain sites; zero vector if x outside
  std::vector<double> row(Vec3 x) const {
    std::vector<double> rhs(size_t(dom_.size()), 0.0);
    int32_t i = dom_.index_of(x);
    if (i < 0) return rhs;
    rhs[size_t(i)] = 1.0;
    return solver_.solve(rhs);
  }

  double value(Vec3 x, Vec3 y) const {
    int32_t j = dom_.index_of(y);
    if (j < 0) return 0.0;
    return row(x)[size_t(j)];
  }

  double row_residual(const std::vector<double>& g_row, Vec3 x) const {
    std::vector<double> rhs(size_t(dom_.size()), 0.0);
    int32_t i = dom_.index_of(x);
    if (i >= 0) rhs[size_t(i)] = 1.0;
    return solver_.max_residual(g_row, rhs);
  }

 private:
  FiniteDomain dom_;
  DirichletSolver solver_;
};

// ---- equilibrium measure and capacity, killed at exit of U ------------------

struct EquilibriumResult {
  Measure e;
  double capacity = 0;
  ScalarField potential;  // V(y) = P_y[H_K < T_U], 1 on K, 0 outside U
};

// K must be contained in U
inline EquilibriumResult equilibrium_measure(const PointSet& k, const FiniteDomain& u) {
  std::vector<uint8_t> mask(size_t(u.size()), 0);
  std::vector<double> fixed(size_t(u.size()), 0.0);
  for (auto p : k.raw()) {
    int32_t i = u.index_of(p);
    if (i < 0) throw std::invalid_argument("equilibrium: K must lie inside U");
    mask[size_t(i)] = 1;
    fixed[size_t(i)] = 1.0;
  }
  DirichletSolver solver(u, mask);
  std::vector<double> v = solver.solve({}, fixed);
  ScalarField vf = field_from(u, v, 0.0);
  std::vector<std::pair<Vec3, double>> ew;
  for (auto p : k.sorted_points()) ew.emplace_back(p, -vf.laplacian(p));
  EquilibriumResult res{make_measure(std::move(ew)), 0.0, std::move(vf)};
  res.capacity = res.e.total;
  return res;
}

// capacity via the energy route, cap = E(V, V); agrees with the mass route by
// Gauss-Green and serves as the two-way check
inline double capacity_energy(const EquilibriumResult& eq) {
  return dirichlet_form(eq.potential, eq.potential);
}

// ---- free Green function (Dirichlet box with far-field boundary data) -------

struct GreenFreeOptions {
  double box_factor = 8.0;     // box radius = box_factor * |x - y| ...
  int64_t radius_cap = 100;    // ... capped here so memory stays bounded
  int64_t radius_floor = 16;
  double tol = 1e-11;
};

// one box solve around the source; values readable anywhere in the box
class GreenFreeField {
 public:
  GreenFreeField(Vec3 src, int64_t radius, double tol = 1e-11)
      : src_(src), radius_(radius), grid_(Box::centered(src, radius)) {
    grid_.fix_hull([&](Vec3 z) { return kGreenC2 / norm2(z - src_); });
    std::vector<double> rhs(grid_.cells(), 0.0);
    rhs[grid_.idx(src_)] = 1.0;
    rep_ = grid_.solve(rhs, field_, tol);
    if (!rep_.converged) throw std::runtime_error("green_free: solver did not converge");
  }

  Vec3 source() const { return src_; }
  int64_t radius() const { return radius_; }
  const BoxGrid::Report& report() const { return rep_; }

  bool covers(Vec3 x) const { return grid_.in_box(x); }
  double at(Vec3 x) const { return field_[grid_.idx(x)]; }

  // absolute error bound: the boundary data differs from the true Green
  // function by O(R^-3) (relative lattice correction O(r^-2) at r = R), and
  // the interior error is a harmonic average of the boundary error
  double err_bound() const {
    return kGreenBoundaryCoef * kGreenC2 / double(radius_ * radius_ * radius_) + 10 * rep_.rel_residual;
  }

  static constexpr double kGreenBoundaryCoef = 2.0;

 private:
  Vec3 src_;
  int64_t radius_;
  BoxGrid grid_;
  std::vector<double> field_;
  BoxGrid::Report rep_;
};

struct GreenFreeResult {
  double value = 0;
  double err_bound = 0;
  int64_t box_radius = 0;
};

inline GreenFreeResult green_free(Vec3 x, Vec3 y, GreenFreeOptions opt = {}) {
  if (x == y) {
    GreenFreeField f(y, std::max<int64_t>(opt.radius_floor, 24), opt.tol);
    return {f.at(x), f.err_bound(), f.radius()};
  }
  double sep = norm2(x - y);
  int64_t radius = int64_t(std::llround(opt.box_factor * sep));
  radius = std::min(radius, opt.radius_cap);
  radius = std::max({radius, opt.radius_floor, int64_t(std::ceil(sep)) + 8});
  GreenFreeField f(y, radius, opt.tol);
  return {f.at(x), f.err_bound(), f.radius()};
}

// cached table of g(0, v) for |v|_inf <= kTableRange from one box solve;
// beyond the table the far field kGreenC2/|v| is good to ~0.2% relative
class GreenTable {
 public:
  static constexpr int64_t kTableRange = 12;
  static constexpr int64_t kBuildRadius = 100;

  static const GreenTable& instance() {
    static GreenTable t;
    return t;
  }

  double at(Vec3 v) const {
    int64_t r = norm_inf(v);
    if (r <= kTableRange)
      return tab_[size_t(((v.x + kTableRange) * side_ + (v.y + kTableRange)) * side_ +
                         (v.z + kTableRange))];
    return kGreenC2 / norm2(v);
  }

  double zero_value() const { return at({0, 0, 0}); }

 private:
  GreenTable() {
    GreenFreeField f({0, 0, 0}, kBuildRadius, 1e-11);
    tab_.resize(size_t(side_ * side_ * side_));
    for (int64_t x = -kTableRange; x <= kTableRange; ++x)
      for (int64_t y = -kTableRange; y <= kTableRange; ++y)
        for (int64_t z = -kTableRange; z <= kTableRange; ++z)
          tab_[size_t(((x + kTableRange) * side_ + (y + kTableRange)) * side_ +
                      (z + kTableRange))] = f.at({x, y, z});
  }

  static constexpr int64_t side_ = 2 * kTableRange + 1;
  std::vector<double> tab_;
};

// g(0, v) with the table plus far field; the everyday evaluator
inline double green_eval(Vec3 v) { return GreenTable::instance().at(v); }

// ---- equilibrium measure relative to infinity --------------------------------

struct FreeEquilibriumOptions {
  int64_t radius_factor = 3;   // box radius = max(floor, factor * extent(K))
  int64_t radius_floor = 40;
  int iterations = 3;          // far-field feedback passes
  double tol = 1e-11;
};

struct FreeEquilibriumResult {
  Measure e;       // e_K(y) = P_y[H~_K = infinity]
  double capacity = 0;
  double err_rel = 0;  // contraction-based relative error estimate
  int64_t box_radius = 0;
};

// Escape to infinity via a finite box with an outer boundary condition that
// feeds back the current estimate of P[H_K < infinity] through the far-field
// Green function; each pass contracts the truncation error by ~cap*c2/R.
inline FreeEquilibriumResult equilibrium_free(const PointSet& k, FreeEquilibriumOptions opt = {}) {
  if (k.empty()) throw std::invalid_argument("equilibrium_free: empty set");
  int64_t extent = 0;
  for (auto p : k.raw()) extent = std::max(extent, norm_inf(p));
  int64_t radius = std::max(opt.radius_floor, opt.radius_factor * (extent + 1));
  BoxGrid grid(Box::centered({0, 0, 0}, radius));
  for (auto p : k.raw()) {
    if (!grid.in_box(p)) throw std::invalid_argument("equilibrium_free: K escapes the box");
    grid.fix(p, 1.0);
  }

  auto k_sorted = k.sorted_points();
  std::vector<double> e_cur(k_sorted.size(), 0.0);
  std::vector<double> field;
  double contraction = 0;
  for (int pass = 0; pass < opt.iterations; ++pass) {
    BoxGrid g2 = grid;
    g2.fix_hull([&](Vec3 z) {
      double acc = 0;
      for (size_t i = 0; i < k_sorted.size(); ++i)
        acc += e_cur[i] * kGreenC2 / norm2(z - k_sorted[i]);
      return std::min(acc, 1.0);
    });
    std::vector<double> rhs(g2.cells(), 0.0);
    auto rep = g2.solve(rhs, field, opt.tol);
    if (!rep.converged) throw std::runtime_error("equilibrium_free: solver did not converge");
    double cap_prev = 0, cap_new = 0;
    for (double v : e_cur) cap_prev += v;
    for (size_t i = 0; i < k_sorted.size(); ++i) {
      Vec3 p = k_sorted[i];
      double s = 0;
      for (auto d : kDirs) s += field[g2.idx(p + d)];
      e_cur[i] = 1.0 - s / 6.0;  // escape before return, with far-field re-entry folded in
    }
    for (double v : e_cur) cap_new += v;
    contraction = cap_prev > 0 ? std::fabs(cap_new - cap_prev) / std::max(cap_new, 1e-300) : 1.0;
  }

  std::vector<std::pair<Vec3, double>> ew;
  for (size_t i = 0; i < k_sorted.size(); ++i) ew.emplace_back(k_sorted[i], e_cur[i]);
  FreeEquilibriumResult res;
  res.e = make_measure(std::move(ew));
  res.capacity = res.e.total;
  res.box_radius = radius;
  double rho = res.capacity * kGreenC2 / double(radius);  // per-pass contraction factor
  res.err_rel = contraction * rho / std::max(1e-300, 1.0 - rho) + 3e-3 / double(radius);
  return res;
}

// ---- hitting kernel ----------------------------------------------------------

// P_x[X_{H_B} = w, H_B < exit of B'] as a measure on B; B' given as the full
// finite enclosure (sites outside B' absorb). One Green row on B' \ B.
inline Measure hitting_kernel(Vec3 x, const PointSet& b, const FiniteDomain& b_prime) {
  if (b.contains(x)) return make_measure({{x, 1.0}});
  std::vector<Vec3> walk_sites;
  for (auto p : b_prime.sites())
    if (!b.contains(p)) walk_sites.push_back(p);
  FiniteDomain d(std::move(walk_sites));
  if (d.index_of(x) < 0)
    throw std::invalid_argument("hitting_kernel: start must lie in B' and outside B");
  KilledGreen kg(d);
  std::vector<double> g_row = kg.row(x);
  std::map<Vec3, double> acc;
  for (int32_t i = 0; i < kg.domain().size(); ++i) {
    if (g_row[size_t(i)] == 0) continue;
    Vec3 y = kg.domain().site(i);
    for (auto dd : kDirs) {
      Vec3 w = y + dd;
      if (b.contains(w)) acc[w] += g_row[size_t(i)] / 6.0;
    }
  }
  std::vector<std::pair<Vec3, double>> ew(acc.begin(), acc.end());
  return make_measure(std::move(ew));
}

// ---- harmonic extension ------------------------------------------------------

struct HarmonicResult {
  ScalarField field;
  double residual = 0;
  double min_value = 0, max_value = 0;        // over solved sites
  double min_boundary = 0, max_boundary = 0;  // over prescribed data actually seen
};

// boundary data on the fixed mask inside dom and (via outside) just beyond it
inline HarmonicResult harmonic_extension(const FiniteDomain& dom,
                                         const std::vector<uint8_t>& fixed_mask,
                                         const std::vector<double>& fixed_vals,
                                         const std::function<double(Vec3)>& outside = {}) {
  DirichletSolver solver(dom, fixed_mask);
  std::vector<double> u = solver.solve({}, fixed_vals, outside);
  HarmonicResult res{field_from(dom, u, 0.0), solver.max_residual(u, {}, fixed_vals, outside),
                     0, 0, 0, 0};
  bool first_s = true, first_b = true;
  for (int32_t i = 0; i < dom.size(); ++i) {
    if (fixed_mask.empty() || !fixed_mask[size_t(i)]) {
      double v = u[size_t(i)];
      if (first_s || v < res.min_value) res.min_value = v;
      if (first_s || v > res.max_value) res.max_value = v;
      first_s = false;
      if (outside)
        for (size_t dd = 0; dd < 6; ++dd)
          if (dom.neighbors(i)[dd] < 0) {
            double bv = outside(dom.site(i) + kDirs[dd]);
            if (first_b || bv < res.min_boundary) res.min_boundary = bv;
            if (first_b || bv > res.max_boundary) res.max_boundary = bv;
            first_b = false;
          }
    } else {
      double bv = fixed_vals[size_t(i)];
      if (first_b || bv < res.min_boundary) res.min_boundary = bv;
      if (first_b || bv > res.max_boundary) res.max_boundary = bv;
      first_b = false;
    }
  }
  return res;
}

}  // namespace ilab
