#pragma once

// Monte Carlo walk engines. The centerpiece is capacity_mc: escape
// probabilities for every boundary site of a finite set K, estimated without
// ever walking "to infinity". A walk is stopped on the sphere of radius rho
// around K and the exact identity
//
//   P_y[no return to K]  =  E_y[ 1{no return before T_rho} (1 - phi(X_{T_rho})) ]
//
// closes the tail, where phi(w) = sum_z g(w-z) e_K(z) is the exact return
// probability from the stopping point (last-exit decomposition). phi needs the
// equilibrium measure we are estimating, so the recorded walk outcomes are
// reused: starting from phi = 0, each pass re-weights the same (escaped, exit
// point) records with the previous pass's e-estimate. The map contracts by
// ~cap*c2/rho per pass, so a handful of passes converge far below the MC
// noise and the walks are only ever simulated once. The identity holds for
// any stopping rule as long as phi is evaluated at the actual stopping point,
// so step-budget truncations do not bias the estimate either.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <exception>
#include <mutex>
#include <stdexcept>
#include <thread>
#include <vector>

#include "ilab/lattice.hpp"
#include "ilab/potential.hpp"
#include "ilab/rng.hpp"
#include "ilab/stats.hpp"

namespace ilab {

// ---- deterministic parallel driver --------------------------------------------

// Runs body(i) for i in [0, n) on up to `workers` threads. Work items pull
// from a shared counter; determinism is the caller's job (give every index its
// own derived RNG stream and write only to slot i).
template <class F>
inline void parallel_for(int64_t n, int workers, F&& body) {
  if (n <= 0) return;
  if (workers <= 1 || n == 1) {
    for (int64_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<int64_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr first_error;
  std::mutex err_mu;
  int nt = int(std::min<int64_t>(workers, n));
  std::vector<std::thread> pool;
  pool.reserve(size_t(nt));
  for (int t = 0; t < nt; ++t)
    pool.emplace_back([&] {
      for (;;) {
        int64_t i = next.fetch_add(1, std::memory_order_relaxed);
        if (i >= n || failed.load(std::memory_order_relaxed)) return;
        try {
          body(i);
        } catch (...) {
          std::lock_guard<std::mutex> lk(err_mu);
          if (!first_error) first_error = std::current_exception();
          failed.store(true, std::memory_order_relaxed);
          return;
        }
      }
    });
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

// ---- jump-chain walk ------------------------------------------------------------

struct WalkOutcome {
  bool hit = false;
  Vec3 end{};         // hit site when hit, else the point where the walk stopped
  uint64_t steps = 0;
  bool truncated = false;  // step budget exhausted before either exit condition
};

// One jump chain from start until hit_pred(p) holds (checked after each jump;
// the start itself is not tested) or the walk leaves the open ball
// B(center, rho). Holding times are irrelevant for hitting events.
template <class Pred>
inline WalkOutcome walk_until(Vec3 start, Pred&& hit_pred, Vec3 center, double rho, Rng& rng,
                              uint64_t max_steps = uint64_t(1) << 33) {
  WalkOutcome out;
  const double rho_sq = rho * rho;
  Vec3 p = start;
  while (out.steps < max_steps) {
    p = p + kDirs[rng.dir6()];
    ++out.steps;
    if (hit_pred(p)) {
      out.hit = true;
      out.end = p;
      return out;
    }
    if (double(norm2_sq(p - center)) >= rho_sq) {
      out.end = p;
      return out;
    }
  }
  out.end = p;
  out.truncated = true;
  return out;
}

// ---- Monte Carlo capacity --------------------------------------------------------

struct CapacityMcOptions {
  int64_t samples_per_site = 256;
  double rho_factor = 2.0;   // stop sphere radius, relative to the set's extent
  double rho_min_pad = 16.0; // and at least extent + this
  int fix_passes = 16;       // re-weighting passes; stops early once the update stalls
  double fix_tol = 1e-13;
  uint64_t seed = 1;
  uint64_t salt = 0x57a1cde5;  // stream domain separator
  int workers = 1;
  uint64_t max_steps = uint64_t(1) << 33;
};

struct CapacityMcResult {
  double cap = 0;
  double se = 0;   // from per-site sample variances; cross-site feedback through
                   // phi is second order (O(cap*c2/rho) relative) and ignored
  std::vector<Vec3> sites;
  std::vector<double> esc;     // escape probability estimate per site
  std::vector<double> esc_se;
  Vec3 center{};
  double rho = 0;
  double fix_update = 0;  // sup-norm of the final fixpoint update (bias proxy)
  int passes = 0;
  double phi_mean = 0;  // return probability at the stop sphere, averaged/max over
  double phi_max = 0;   // escaped records; sanity: should be ~cap*c2/rho, well below 1
  int64_t truncated = 0;
};

inline CapacityMcResult capacity_mc(const std::vector<Vec3>& k_sites,
                                    const CapacityMcOptions& opt = {}) {
  if (k_sites.empty()) throw std::invalid_argument("capacity_mc: empty set");
  if (opt.samples_per_site < 2) throw std::invalid_argument("capacity_mc: need >= 2 samples");
  CapacityMcResult res;
  res.sites = k_sites;
  std::sort(res.sites.begin(), res.sites.end());
  res.sites.erase(std::unique(res.sites.begin(), res.sites.end()), res.sites.end());
  const int64_t n = int64_t(res.sites.size());
  const int64_t s_per = opt.samples_per_site;

  PointSet k_set;
  for (auto p : res.sites) k_set.insert(p);
  DVec3 c{0, 0, 0};
  for (auto p : res.sites) c = c + to_dvec(p);
  res.center = round_to_lattice({c.x / double(n), c.y / double(n), c.z / double(n)});
  double extent = 0;
  for (auto p : res.sites) extent = std::max(extent, norm2(p - res.center));
  res.rho = std::max(opt.rho_factor * extent, extent + opt.rho_min_pad);

  // interior sites never escape: their first jump is a return
  std::vector<uint8_t> interior(size_t(n), 1);
  for (int64_t i = 0; i < n; ++i)
    for (auto d : kDirs)
      if (!k_set.contains(res.sites[size_t(i)] + d)) {
        interior[size_t(i)] = 0;
        break;
      }

  // simulate once, recording (escaped, exit point) per (site, sample)
  std::vector<uint8_t> escaped(size_t(n * s_per), 0);
  std::vector<Vec3> exits(size_t(n * s_per));
  std::atomic<int64_t> truncated{0};
  parallel_for(n * s_per, opt.workers, [&](int64_t idx) {
    int64_t i = idx / s_per, j = idx % s_per;
    if (interior[size_t(i)]) return;
    Rng rng(derive_seed(opt.seed, opt.salt, uint64_t(i), uint64_t(j)));
    auto w = walk_until(
        res.sites[size_t(i)], [&](Vec3 p) { return k_set.contains(p); }, res.center, res.rho,
        rng, opt.max_steps);
    if (w.truncated) truncated.fetch_add(1, std::memory_order_relaxed);
    if (!w.hit) {
      escaped[size_t(idx)] = 1;
      exits[size_t(idx)] = w.end;
    }
  });
  res.truncated = truncated.load();

  // fixpoint over the recorded outcomes; phi under the current estimate
  std::vector<double> esc(size_t(n), 0.0);
  for (int64_t i = 0; i < n; ++i) {
    int64_t cnt = 0;
    for (int64_t j = 0; j < s_per; ++j) cnt += escaped[size_t(i * s_per + j)];
    esc[size_t(i)] = double(cnt) / double(s_per);
  }
  std::vector<double> next_esc(size_t(n), 0.0);
  for (int pass = 0; pass < opt.fix_passes; ++pass) {
    parallel_for(n, opt.workers, [&](int64_t i) {
      if (interior[size_t(i)]) {
        next_esc[size_t(i)] = 0.0;
        return;
      }
      double acc = 0;
      for (int64_t j = 0; j < s_per; ++j) {
        if (!escaped[size_t(i * s_per + j)]) continue;
        Vec3 w = exits[size_t(i * s_per + j)];
        double phi = 0;
        for (int64_t z = 0; z < n; ++z)
          if (esc[size_t(z)] > 0) phi += green_eval(w - res.sites[size_t(z)]) * esc[size_t(z)];
        acc += std::max(0.0, 1.0 - phi);
      }
      next_esc[size_t(i)] = acc / double(s_per);
    });
    double upd = 0;
    for (int64_t i = 0; i < n; ++i) upd = std::max(upd, std::abs(next_esc[size_t(i)] - esc[size_t(i)]));
    esc.swap(next_esc);
    res.fix_update = upd;
    res.passes = pass + 1;
    if (upd < opt.fix_tol) break;
  }

  // final weights under the converged estimate give the per-site stats
  std::vector<RunningStat> stats(static_cast<size_t>(n));
  RunningStat phi_stat;
  double phi_max = 0;
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < s_per; ++j) {
      double w = 0;
      if (escaped[size_t(i * s_per + j)]) {
        double phi = 0;
        Vec3 e = exits[size_t(i * s_per + j)];
        for (int64_t z = 0; z < n; ++z)
          if (esc[size_t(z)] > 0) phi += green_eval(e - res.sites[size_t(z)]) * esc[size_t(z)];
        w = std::max(0.0, 1.0 - phi);
        phi_stat.add(phi);
        phi_max = std::max(phi_max, phi);
      }
      stats[size_t(i)].add(w);
    }
  }
  res.esc.resize(size_t(n));
  res.esc_se.resize(size_t(n));
  double cap = 0, var = 0;
  for (int64_t i = 0; i < n; ++i) {
    res.esc[size_t(i)] = stats[size_t(i)].mean();
    res.esc_se[size_t(i)] = stats[size_t(i)].stderror();
    cap += res.esc[size_t(i)];
    var += res.esc_se[size_t(i)] * res.esc_se[size_t(i)];
  }
  res.cap = cap;
  res.se = std::sqrt(var);
  res.phi_mean = phi_stat.n() > 0 ? phi_stat.mean() : 0.0;
  res.phi_max = phi_max;
  return res;
}

}  // namespace ilab
