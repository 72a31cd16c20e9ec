#pragma once

// Small statistics toolbox for the MC suites: running moments, two-sample
// Kolmogorov-Smirnov, chi-square tail via the regularized incomplete gamma,
// and an empirical total-variation comparison with a same-law noise scale.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <vector>

namespace ilab {

class RunningStat {
 public:
  void add(double v) {
    ++n_;
    double d = v - mean_;
    mean_ += d / double(n_);
    m2_ += d * (v - mean_);
  }
  int64_t n() const { return n_; }
  double mean() const { return mean_; }
  double variance() const { return n_ > 1 ? m2_ / double(n_ - 1) : 0.0; }
  double stderror() const { return n_ > 0 ? std::sqrt(variance() / double(n_)) : 0.0; }

  void merge(const RunningStat& o) {
    if (o.n_ == 0) return;
    if (n_ == 0) {
      *this = o;
      return;
    }
    double d = o.mean_ - mean_;
    int64_t n = n_ + o.n_;
    m2_ += o.m2_ + d * d * double(n_) * double(o.n_) / double(n);
    mean_ += d * double(o.n_) / double(n);
    n_ = n;
  }

 private:
  int64_t n_ = 0;
  double mean_ = 0, m2_ = 0;
};

// regularized lower incomplete gamma P(a,x) (series + continued fraction)
inline double gamma_p(double a, double x) {
  if (x < 0 || a <= 0) throw std::invalid_argument("gamma_p domain");
  if (x == 0) return 0.0;
  double gln = std::lgamma(a);
  if (x < a + 1.0) {
    double ap = a, sum = 1.0 / a, del = sum;
    for (int i = 0; i < 500; ++i) {
      ap += 1.0;
      del *= x / ap;
      sum += del;
      if (std::fabs(del) < std::fabs(sum) * 1e-15) break;
    }
    return sum * std::exp(-x + a * std::log(x) - gln);
  }
  // Lentz continued fraction for Q, return 1-Q
  double b = x + 1.0 - a, c = 1e300, d = 1.0 / b, h = d;
  for (int i = 1; i <= 500; ++i) {
    double an = -double(i) * (double(i) - a);
    b += 2.0;
    d = an * d + b;
    if (std::fabs(d) < 1e-300) d = 1e-300;
    c = b + an / c;
    if (std::fabs(c) < 1e-300) c = 1e-300;
    d = 1.0 / d;
    double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < 1e-15) break;
  }
  double q = std::exp(-x + a * std::log(x) - gln) * h;
  return 1.0 - q;
}

// chi-square upper tail p-value with k degrees of freedom
inline double chi2_tail(double stat, double k) { return 1.0 - gamma_p(k / 2.0, stat / 2.0); }

struct Chi2Result {
  double stat = 0;
  double dof = 0;
  double p_value = 1;
};

// Pearson chi-square of observed counts against expected counts; bins with
// expected < min_expected are pooled into the last kept bin
inline Chi2Result chi2_gof(const std::vector<double>& observed,
                           const std::vector<double>& expected, double min_expected = 5.0) {
  if (observed.size() != expected.size()) throw std::invalid_argument("chi2: size mismatch");
  double stat = 0;
  int used = 0;
  double pool_obs = 0, pool_exp = 0;
  for (size_t i = 0; i < observed.size(); ++i) {
    pool_obs += observed[i];
    pool_exp += expected[i];
    if (pool_exp >= min_expected) {
      stat += (pool_obs - pool_exp) * (pool_obs - pool_exp) / pool_exp;
      ++used;
      pool_obs = pool_exp = 0;
    }
  }
  if (pool_exp > 0 && used > 0) {
    // fold the tail remainder into the statistic
    stat += pool_obs * pool_obs / std::max(pool_exp, 1e-12) - 2 * pool_obs + pool_exp;
  }
  Chi2Result r;
  r.stat = stat;
  r.dof = std::max(1, used - 1);
  r.p_value = chi2_tail(stat, r.dof);
  return r;
}

// asymptotic KS tail Q(lambda) = 2 sum (-1)^{j-1} exp(-2 j^2 lambda^2)
inline double ks_tail(double lambda) {
  if (lambda < 1e-9) return 1.0;
  double sum = 0;
  for (int j = 1; j <= 100; ++j) {
    double term = 2.0 * std::exp(-2.0 * double(j) * double(j) * lambda * lambda);
    sum += (j % 2 == 1) ? term : -term;
    if (term < 1e-12) break;
  }
  return std::clamp(sum, 0.0, 1.0);
}

struct KsResult {
  double stat = 0;
  double p_value = 1;
};

// two-sample KS; ties are handled by stepping both ECDFs through equal values,
// which keeps the statistic valid (conservative) for discrete data
inline KsResult ks_two_sample(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("ks: empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  size_t i = 0, j = 0;
  double d = 0;
  while (i < a.size() && j < b.size()) {
    double v = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= v) ++i;
    while (j < b.size() && b[j] <= v) ++j;
    d = std::max(d, std::fabs(double(i) / a.size() - double(j) / b.size()));
  }
  double ne = double(a.size()) * double(b.size()) / double(a.size() + b.size());
  KsResult r;
  r.stat = d;
  r.p_value = ks_tail((std::sqrt(ne) + 0.12 + 0.11 / std::sqrt(ne)) * d);
  return r;
}

struct TvResult {
  double tv = 0;          // empirical total variation distance
  double same_law_scale = 0;  // expected TV if both samples shared one law
};

// empirical TV between two categorical samples given as count maps; the noise
// scale is sum_k sqrt(p_k(1-p_k)/pi) * (1/sqrt(na)+1/sqrt(nb))/2 from the
// half-normal mean of each bin difference under a common law
template <typename Key>
TvResult tv_compare(const std::map<Key, int64_t>& ca, const std::map<Key, int64_t>& cb,
                    int64_t na, int64_t nb) {
  TvResult r;
  std::vector<Key> keys;
  for (auto& kv : ca) keys.push_back(kv.first);
  for (auto& kv : cb)
    if (!ca.count(kv.first)) keys.push_back(kv.first);
  double tv = 0, scale = 0;
  for (auto& k : keys) {
    auto ia = ca.find(k);
    auto ib = cb.find(k);
    double pa = ia == ca.end() ? 0.0 : double(ia->second) / double(na);
    double pb = ib == cb.end() ? 0.0 : double(ib->second) / double(nb);
    tv += std::fabs(pa - pb);
    double pooled = (double(ia == ca.end() ? 0 : ia->second) +
                     double(ib == cb.end() ? 0 : ib->second)) /
                    double(na + nb);
    double var = pooled * (1.0 - pooled);
    scale += std::sqrt(var / M_PI) * (1.0 / std::sqrt(double(na)) + 1.0 / std::sqrt(double(nb)));
  }
  r.tv = 0.5 * tv;
  r.same_law_scale = 0.5 * scale;
  return r;
}

}  // namespace ilab
