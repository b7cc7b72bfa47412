#include "bmrs/oracle.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <queue>
#include <random>

#include "bmrs/errors.hpp"

namespace bmrs::oracle {

namespace {

constexpr std::array<double, 8> kXgk = {
    0.991455371120812639206854697526329, 0.949107912342758524526189684047851,
    0.864864423359769072789712788640926, 0.741531185599394439863864773280788,
    0.586087235467691130294144845693013, 0.405845151377397166906606412076961,
    0.207784955007898467600689403773245, 0.0};
constexpr std::array<double, 8> kWgk = {
    0.022935322010529224963732008058970, 0.063092092629978553290700663189204,
    0.104790010322250183839876322541518, 0.140653259715525918745189590510238,
    0.169004726639267902826583426598550, 0.190350578064785409913256402421014,
    0.204432940075298892414161999234649, 0.209482141084727828012999174891714};
// Gauss weights for the odd Kronrod nodes 1, 3, 5, 7.
constexpr std::array<double, 4> kWg = {
    0.129484966168869693270611432679082, 0.279705391489276667901467771423780,
    0.381830050505118944950369775488975, 0.417959183673469387755102040816327};

constexpr double kLogSqrt2Pi = 0.91893853320467274178;

struct Segment {
  double a, b, value, error;
  bool operator<(const Segment& o) const { return error < o.error; }
};

Segment gauss_kronrod(const std::function<double(double)>& f, double a, double b) {
  const double c = 0.5 * (a + b);
  const double h = 0.5 * (b - a);
  const double fc = f(c);
  double kron = kWgk[7] * fc;
  double gauss = kWg[3] * fc;
  for (int j = 0; j < 7; ++j) {
    const double dx = h * kXgk[j];
    const double f1 = f(c - dx);
    const double f2 = f(c + dx);
    kron += kWgk[j] * (f1 + f2);
    if (j % 2 == 1) gauss += kWg[j / 2] * (f1 + f2);
  }
  kron *= h;
  gauss *= h;
  return {a, b, kron, std::abs(kron - gauss)};
}

std::vector<double> merged_edges(double lo, double hi, const std::vector<double>& extra) {
  std::vector<double> edges{lo, hi};
  for (double p : extra) {
    if (std::isfinite(p) && p > lo && p < hi) edges.push_back(p);
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  return edges;
}

double adaptive(const std::function<double(double)>& f, double lo, double hi,
                const std::vector<double>& breakpoints, double rel_tol, int max_subdivisions) {
  std::priority_queue<Segment> heap;
  double total = 0.0;
  double total_err = 0.0;
  const auto edges = merged_edges(lo, hi, breakpoints);
  for (std::size_t i = 0; i + 1 < edges.size(); ++i) {
    const Segment s = gauss_kronrod(f, edges[i], edges[i + 1]);
    total += s.value;
    total_err += s.error;
    heap.push(s);
  }
  int subdivisions = 0;
  while (total_err > rel_tol * std::abs(total) && total_err > 1e-300) {
    if (subdivisions >= max_subdivisions) {
      throw ConvergenceError("quad_integrate: subdivision budget exhausted", total);
    }
    const Segment worst = heap.top();
    const double mid = 0.5 * (worst.a + worst.b);
    if (!(mid > worst.a && mid < worst.b)) {
      throw ConvergenceError("quad_integrate: interval cannot be split further", total);
    }
    heap.pop();
    const Segment left = gauss_kronrod(f, worst.a, mid);
    const Segment right = gauss_kronrod(f, mid, worst.b);
    total += left.value + right.value - worst.value;
    total_err += left.error + right.error - worst.error;
    heap.push(left);
    heap.push(right);
    ++subdivisions;
  }
  if (!std::isfinite(total)) throw ConvergenceError("quad_integrate: non-finite result", total);
  return total;
}

std::vector<double> spread(double centre, double scale) {
  std::vector<double> pts{centre};
  for (double k : {0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0}) {
    pts.push_back(centre - k * scale);
    pts.push_back(centre + k * scale);
  }
  return pts;
}

}  // namespace

double quad_integrate(const QuadratureSpec& spec) {
  if (!spec.integrand) throw ContractError("quad_integrate: missing integrand");
  if (!(spec.lo < spec.hi)) throw ContractError("quad_integrate: requires lo < hi");
  if (!(spec.rel_tol > 0.0 && spec.rel_tol <= 1e-2)) {
    throw ContractError("quad_integrate: rel_tol must lie in (0, 1e-2]");
  }
  if (spec.max_subdivisions < 1) throw ContractError("quad_integrate: max_subdivisions < 1");
  if (!spec.log_coordinates) {
    return adaptive(spec.integrand, spec.lo, spec.hi, spec.breakpoints, spec.rel_tol,
                    spec.max_subdivisions);
  }
  if (!(spec.lo > 0.0)) throw ContractError("quad_integrate: log coordinates need lo > 0");
  const auto& f = spec.integrand;
  auto g = [&f](double x) {
    const double theta = std::exp(x);
    return f(theta) * theta;
  };
  return adaptive(g, std::log(spec.lo), std::log(spec.hi), spec.breakpoints, spec.rel_tol,
                  spec.max_subdivisions);
}

double log_quad_integrate(const std::function<double(double)>& log_integrand, double lo,
                          double hi, std::vector<double> breakpoints, double rel_tol) {
  if (!(lo < hi)) throw ContractError("log_quad_integrate: requires lo < hi");
  // Shift by the largest log value seen on the breakpoints and a uniform grid.
  double shift = -std::numeric_limits<double>::infinity();
  auto probe = [&](double x) {
    const double v = log_integrand(x);
    if (v > shift) shift = v;
  };
  for (double p : merged_edges(lo, hi, breakpoints)) probe(p);
  constexpr int kGrid = 400;
  for (int i = 0; i <= kGrid; ++i) probe(lo + (hi - lo) * i / kGrid);
  if (!std::isfinite(shift)) return -std::numeric_limits<double>::infinity();
  auto f = [&](double x) { return std::exp(log_integrand(x) - shift); };
  const double mass = adaptive(f, lo, hi, breakpoints, rel_tol, 20000);
  return shift + std::log(mass);
}

ReferenceTruncNormal::ReferenceTruncNormal(double mu, double sigma, double lo, double hi)
    : mu_(mu), sigma_(sigma), lo_(lo), hi_(hi) {
  if (!(sigma > 0.0) || !(lo < hi)) throw ContractError("ReferenceTruncNormal: bad parameters");
  auto kernel = [this](double x) {
    const double t = (x - mu_) / sigma_;
    return -0.5 * t * t;
  };
  log_mass_ = log_quad_integrate(kernel, lo_, hi_, breakpoints(), 1e-13);
}

std::vector<double> ReferenceTruncNormal::breakpoints() const { return spread(mu_, sigma_); }

double ReferenceTruncNormal::log_density(double x) const {
  if (x < lo_ || x > hi_) return -std::numeric_limits<double>::infinity();
  const double t = (x - mu_) / sigma_;
  return -0.5 * t * t - log_mass_;
}

double ReferenceTruncNormal::density(double x) const { return std::exp(log_density(x)); }

ReferenceTruncNormal reference(const dist::TruncatedLogNormal& d) {
  return {d.mu(), d.sigma(), d.log_lo(), d.log_hi()};
}

double pdf_mass(const dist::TruncatedLogNormal& d, double rel_tol) {
  QuadratureSpec spec;
  spec.integrand = [&d](double theta) { return d.pdf(theta); };
  spec.lo = std::exp(d.log_lo());
  spec.hi = std::exp(d.log_hi());
  spec.rel_tol = rel_tol;
  spec.log_coordinates = true;
  spec.breakpoints = spread(d.mu(), d.sigma());
  return quad_integrate(spec);
}

double pdf_mass(const dist::TruncatedLogUniform& d, double rel_tol) {
  QuadratureSpec spec;
  spec.integrand = [&d](double theta) { return d.pdf(theta); };
  spec.lo = std::exp(d.log_lo());
  spec.hi = std::exp(d.log_hi());
  spec.rel_tol = rel_tol;
  spec.log_coordinates = true;
  return quad_integrate(spec);
}

double trunc_normal_cdf(double x, double mu, double sigma, double lo, double hi) {
  if (x <= lo) return 0.0;
  if (x >= hi) return 1.0;
  const ReferenceTruncNormal ref(mu, sigma, lo, hi);
  auto kernel = [&](double t) { return ref.log_density(t); };
  return std::exp(log_quad_integrate(kernel, lo, x, ref.breakpoints(), 1e-13));
}

double moment(const dist::TruncatedLogNormal& d, int k) {
  const auto ref = reference(d);
  auto kernel = [&](double x) { return k * x + ref.log_density(x); };
  auto pts = ref.breakpoints();
  // The tilted density peaks near mu + k sigma^2.
  const auto tilted = spread(d.mu() + k * d.sigma() * d.sigma(), d.sigma());
  pts.insert(pts.end(), tilted.begin(), tilted.end());
  return std::exp(log_quad_integrate(kernel, d.log_lo(), d.log_hi(), pts, 1e-13));
}

double snr(const dist::TruncatedLogNormal& d) {
  const double m1 = moment(d, 1);
  const double m2 = moment(d, 2);
  return m1 / std::sqrt(m2 - m1 * m1);
}

double kl_q_p(const dist::TruncatedLogNormal& q) {
  const auto ref = reference(q);
  const double log_width = std::log(q.log_hi() - q.log_lo());
  QuadratureSpec spec;
  spec.integrand = [&](double x) {
    const double lq = ref.log_density(x);
    if (!std::isfinite(lq)) return 0.0;
    return std::exp(lq) * (lq + log_width);
  };
  spec.lo = q.log_lo();
  spec.hi = q.log_hi();
  spec.rel_tol = 1e-11;
  spec.max_subdivisions = 20000;
  spec.breakpoints = ref.breakpoints();
  return quad_integrate(spec);
}

double log_delta_f_lognormal(const dist::TruncatedLogNormal& q, const LogNormalReduction& r) {
  const auto ref_q = reference(q);
  const ReferenceTruncNormal ref_p(r.mu, std::sqrt(r.sigma2), q.log_lo(), q.log_hi());
  const double log_width = std::log(q.log_hi() - q.log_lo());
  // q(theta) p~(theta) / p(theta) in log(theta) coordinates; the Jacobians cancel.
  auto kernel = [&](double x) { return ref_q.log_density(x) + ref_p.log_density(x) + log_width; };
  auto pts = ref_q.breakpoints();
  const auto more = ref_p.breakpoints();
  pts.insert(pts.end(), more.begin(), more.end());
  return log_quad_integrate(kernel, q.log_lo(), q.log_hi(), pts, 1e-12);
}

double log_delta_f_loguniform(const dist::TruncatedLogNormal& q, const LogUniformReduction& r) {
  const auto ref_q = reference(q);
  const double log_width = std::log(q.log_hi() - q.log_lo());
  const double log_reduced_width = std::log(r.log_hi - r.log_lo);
  auto kernel = [&](double x) {
    if (x < r.log_lo || x > r.log_hi) return -std::numeric_limits<double>::infinity();
    return ref_q.log_density(x) - log_reduced_width + log_width;
  };
  auto pts = ref_q.breakpoints();
  pts.push_back(r.log_lo);
  pts.push_back(r.log_hi);
  const double lo = std::max(q.log_lo(), r.log_lo);
  const double hi = std::min(q.log_hi(), r.log_hi);
  return log_quad_integrate(kernel, lo, hi, pts, 1e-12);
}

McEstimate mc_delta_f(const dist::TruncatedLogNormal& q, const dist::TruncatedLogUniform& p,
                      const ReducedPrior& p_tilde, std::int64_t n, std::uint64_t seed) {
  if (n < 1000) throw ContractError("mc_delta_f: need at least 1000 samples");
  if (q.log_lo() != p.log_lo() || q.log_hi() != p.log_hi()) {
    throw ContractError("mc_delta_f: q and p must share their support");
  }
  const auto ref_q = reference(q);
  const double width = p.width();
  std::mt19937_64 rng(seed);

  std::function<double()> draw;
  if (const auto* tln = std::get_if<dist::TruncatedLogNormal>(&p_tilde)) {
    if (tln->log_lo() < p.log_lo() || tln->log_hi() > p.log_hi()) {
      throw ContractError("mc_delta_f: reduced prior must be nested in the original support");
    }
    const ReferenceTruncNormal ref_pt = reference(*tln);
    const double acceptance =
        std::exp(ref_pt.log_mass() - std::log(tln->sigma()) - kLogSqrt2Pi);
    if (acceptance < 1e-3) {
      throw ContractError("mc_delta_f: rejection sampler acceptance below 1e-3");
    }
    auto normal = std::make_shared<std::normal_distribution<double>>(tln->mu(), tln->sigma());
    const double lo = tln->log_lo();
    const double hi = tln->log_hi();
    draw = [&rng, normal, lo, hi]() {
      for (;;) {
        const double x = (*normal)(rng);
        if (x >= lo && x <= hi) return x;
      }
    };
  } else {
    const auto& tlu = std::get<dist::TruncatedLogUniform>(p_tilde);
    if (tlu.log_lo() < p.log_lo() || tlu.log_hi() > p.log_hi()) {
      throw ContractError("mc_delta_f: reduced prior must be nested in the original support");
    }
    auto uni = std::make_shared<std::uniform_real_distribution<double>>(tlu.log_lo(),
                                                                        tlu.log_hi());
    draw = [&rng, uni]() { return (*uni)(rng); };
  }

  // Welford accumulation of q(theta) / p(theta) = q_x(x) * (log b - log a).
  double mean = 0.0;
  double m2 = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double value = ref_q.density(draw()) * width;
    const double delta = value - mean;
    mean += delta / static_cast<double>(i + 1);
    m2 += delta * (value - mean);
  }
  const double var = n > 1 ? m2 / static_cast<double>(n - 1) : 0.0;
  return {mean, std::sqrt(var / static_cast<double>(n)), n};
}

}  // namespace bmrs::oracle
