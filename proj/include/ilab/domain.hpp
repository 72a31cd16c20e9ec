#pragma once

// Finite lattice domains with precomputed adjacency plus an exact Dirichlet
// solver for the killed-walk operator (I - P). Meant for desk-scale domains
// (up to a few 1e5 sites) where factor-once / solve-many and 1e-13 residuals
// matter; the big-box multigrid lives in boxgrid.hpp.

#include <Eigen/Sparse>
#include <array>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include "ilab/lattice.hpp"

namespace ilab {

class FiniteDomain {
 public:
  explicit FiniteDomain(std::vector<Vec3> sites) : sites_(std::move(sites)) {
    std::sort(sites_.begin(), sites_.end());
    sites_.erase(std::unique(sites_.begin(), sites_.end()), sites_.end());
    if (sites_.size() > size_t(INT32_MAX)) throw std::invalid_argument("domain too large");
    index_.reserve(sites_.size() * 2);
    for (size_t i = 0; i < sites_.size(); ++i) index_[sites_[i]] = int32_t(i);
    nbr_.resize(sites_.size());
    for (size_t i = 0; i < sites_.size(); ++i)
      for (size_t d = 0; d < 6; ++d) {
        auto it = index_.find(sites_[i] + kDirs[d]);
        nbr_[i][d] = it == index_.end() ? -1 : it->second;
      }
  }

  static FiniteDomain from_set(const PointSet& s) { return FiniteDomain(s.sorted_points()); }

  int32_t size() const { return int32_t(sites_.size()); }
  int32_t index_of(Vec3 p) const {
    auto it = index_.find(p);
    return it == index_.end() ? -1 : it->second;
  }
  bool contains(Vec3 p) const { return index_.count(p) > 0; }
  Vec3 site(int32_t i) const { return sites_[size_t(i)]; }
  const std::vector<Vec3>& sites() const { return sites_; }
  const std::array<int32_t, 6>& neighbors(int32_t i) const { return nbr_[size_t(i)]; }

 private:
  std::vector<Vec3> sites_;
  std::unordered_map<Vec3, int32_t, Vec3Hash> index_;
  std::vector<std::array<int32_t, 6>> nbr_;
};

// Solves (I - P) u = b for the walk killed on exit from the active sites of a
// domain. Active sites are the non-fixed ones; fixed sites carry prescribed
// values and feed the right-hand side, as do prescribed values just outside
// the domain. Factorization is kept for repeated solves.
class DirichletSolver {
 public:
  // fixed_mask may be empty (all sites active); potential, when given, puts
  // (I-P)-diag(potential) on the active block. The only potentials fed in are
  // conjugation potentials -lap(f)/f of positive profiles, which keep the
  // operator positive definite.
  DirichletSolver(const FiniteDomain& dom, std::vector<uint8_t> fixed_mask = {},
                  std::vector<double> potential = {})
      : dom_(&dom), fixed_(std::move(fixed_mask)), pot_(std::move(potential)) {
    if (fixed_.empty()) fixed_.assign(size_t(dom.size()), 0);
    if (fixed_.size() != size_t(dom.size()))
      throw std::invalid_argument("dirichlet: mask size mismatch");
    if (!pot_.empty() && pot_.size() != size_t(dom.size()))
      throw std::invalid_argument("dirichlet: potential size mismatch");
    active_of_site_.assign(size_t(dom.size()), -1);
    for (int32_t i = 0; i < dom.size(); ++i)
      if (!fixed_[size_t(i)]) {
        active_of_site_[size_t(i)] = int32_t(site_of_active_.size());
        site_of_active_.push_back(i);
      }
    const int32_t m = int32_t(site_of_active_.size());
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(size_t(m) * 7);
    for (int32_t a = 0; a < m; ++a) {
      int32_t i = site_of_active_[size_t(a)];
      trip.emplace_back(a, a, 1.0 - (pot_.empty() ? 0.0 : pot_[size_t(i)]));
      for (int32_t j : dom.neighbors(i))
        if (j >= 0 && !fixed_[size_t(j)])
          trip.emplace_back(a, active_of_site_[size_t(j)], -1.0 / 6.0);
    }
    Eigen::SparseMatrix<double> a_mat(m, m);
    a_mat.setFromTriplets(trip.begin(), trip.end());
    ldlt_.compute(a_mat);
    if (ldlt_.info() != Eigen::Success)
      throw std::runtime_error("dirichlet: factorization failed");
    a_mat_ = std::move(a_mat);
  }

  const FiniteDomain& domain() const { return *dom_; }
  bool is_fixed(int32_t i) const { return fixed_[size_t(i)] != 0; }

  // source: per-site rhs (entries at fixed sites ignored); fixed_vals: values
  // at fixed sites (full-length, entries elsewhere ignored); outside: values
  // just outside the domain. Returns the full-length field.
  std::vector<double> solve(const std::vector<double>& source,
                            const std::vector<double>& fixed_vals = {},
                            const std::function<double(Vec3)>& outside = {}) const {
    const auto& dom = *dom_;
    const int32_t m = int32_t(site_of_active_.size());
    Eigen::VectorXd b(m);
    for (int32_t a = 0; a < m; ++a) {
      int32_t i = site_of_active_[size_t(a)];
      double v = source.empty() ? 0.0 : source[size_t(i)];
      for (size_t d = 0; d < 6; ++d) {
        int32_t j = dom.neighbors(i)[d];
        if (j >= 0) {
          if (fixed_[size_t(j)] && !fixed_vals.empty()) v += fixed_vals[size_t(j)] / 6.0;
        } else if (outside) {
          v += outside(dom.site(i) + kDirs[d]) / 6.0;
        }
      }
      b[a] = v;
    }
    Eigen::VectorXd u = ldlt_.solve(b);
    // one round of iterative refinement keeps residuals at machine level even
    // on ill-ordered tube domains
    for (int pass = 0; pass < 3; ++pass) {
      Eigen::VectorXd r = b - a_mat_ * u;
      if (r.lpNorm<Eigen::Infinity>() <= 1e-14 * std::max(1.0, b.lpNorm<Eigen::Infinity>()))
        break;
      u += ldlt_.solve(r);
    }
    std::vector<double> field(size_t(dom.size()), 0.0);
    for (int32_t i = 0; i < dom.size(); ++i)
      if (fixed_[size_t(i)] && !fixed_vals.empty()) field[size_t(i)] = fixed_vals[size_t(i)];
    for (int32_t a = 0; a < m; ++a) field[size_t(site_of_active_[size_t(a)])] = u[a];
    return field;
  }

  // max |((I-P)-V)u - rhs| over active sites, with the same data conventions
  double max_residual(const std::vector<double>& field, const std::vector<double>& source,
                      const std::vector<double>& fixed_vals = {},
                      const std::function<double(Vec3)>& outside = {}) const {
    const auto& dom = *dom_;
    double worst = 0;
    for (int32_t i : site_of_active_) {
      double acc = field[size_t(i)] * (1.0 - (pot_.empty() ? 0.0 : pot_[size_t(i)]));
      for (size_t d = 0; d < 6; ++d) {
        int32_t j = dom.neighbors(i)[d];
        if (j >= 0)
          acc -= field[size_t(j)] / 6.0;
        else if (outside)
          acc -= outside(dom.site(i) + kDirs[d]) / 6.0;
      }
      double want = source.empty() ? 0.0 : source[size_t(i)];
      (void)fixed_vals;  // fixed neighbors already sit in field
      worst = std::max(worst, std::fabs(acc - want));
    }
    return worst;
  }

 private:
  const FiniteDomain* dom_;
  std::vector<uint8_t> fixed_;
  std::vector<double> pot_;
  std::vector<int32_t> active_of_site_;
  std::vector<int32_t> site_of_active_;
  Eigen::SparseMatrix<double> a_mat_;
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt_;
};

}  // namespace ilab
