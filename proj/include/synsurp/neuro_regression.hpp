#pragma once

// Voxelwise encoding-model statistics.
//
// Stimulus events are convolved with a double-gamma HRF on an oversampled grid
// and sampled once per scan. Each voxel gets an OLS GLM; models are compared by
// cross-validated r^2 with the stimulus sections as folds. Per-subject increase
// maps for two regressors are compared with a paired t-test, converted to z, and
// thresholded into 6-connected clusters.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iostream>
#include <limits>
#include <queue>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/gamma.hpp>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "synsurp/csv.hpp"
#include "synsurp/error.hpp"
#include "synsurp/surprisal.hpp"
#include "synsurp/treebank_io.hpp"

namespace synsurp {

// ---------------------------------------------------------------------------
// HRF and convolution

/// SPM canonical HRF parameters (seconds).
struct HrfSpec {
  double peak_delay = 6.0;
  double undershoot_delay = 16.0;
  double peak_dispersion = 1.0;
  double undershoot_dispersion = 1.0;
  double undershoot_ratio = 1.0 / 6.0;
  double kernel_length = 32.0;
  int oversampling = 16;  // grid points per TR

  void validate() const {
    if (!(peak_delay > 0 && undershoot_delay > 0 && peak_dispersion > 0 && undershoot_dispersion > 0 &&
          undershoot_ratio > 0 && kernel_length > 0 && oversampling > 0))
      throw ConfigError("HRF parameters must be positive");
    if (!(undershoot_ratio < 1)) throw ConfigError("HRF undershoot ratio must be < 1");
  }
};

/// Kernel sampled at t = 0, dt, 2dt, ... up to kernel_length, peak-normalised to 1.
inline std::vector<double> hrf_kernel(const HrfSpec& spec, double dt) {
  spec.validate();
  if (!(dt > 0)) throw ContractViolation("hrf_kernel: dt must be positive");
  using boost::math::gamma_distribution;
  gamma_distribution<double> peak(spec.peak_delay / spec.peak_dispersion, spec.peak_dispersion);
  gamma_distribution<double> under(spec.undershoot_delay / spec.undershoot_dispersion, spec.undershoot_dispersion);
  const auto count = static_cast<std::size_t>(std::floor(spec.kernel_length / dt + 1e-9)) + 1;
  std::vector<double> k(count);
  for (std::size_t i = 0; i < count; ++i) {
    double t = static_cast<double>(i) * dt;
    k[i] = boost::math::pdf(peak, t) - spec.undershoot_ratio * boost::math::pdf(under, t);
  }
  const double mx = *std::max_element(k.begin(), k.end());
  for (auto& v : k) v /= mx;
  return k;
}

/// Stimulus events: impulses at arbitrary times, or a uniformly sampled signal.
struct EventSeries {
  enum class Kind { impulse, sampled };
  Kind kind = Kind::impulse;
  std::vector<double> times;  // impulse: event times; sampled: unused
  std::vector<double> amplitudes;
  double start_time = 0.0;     // sampled only
  double sample_period = 0.0;  // sampled only

  static EventSeries impulses(std::vector<double> t, std::vector<double> a) {
    if (t.size() != a.size()) throw ContractViolation("EventSeries: times and amplitudes differ in length");
    for (std::size_t i = 1; i < t.size(); ++i)
      if (t[i] < t[i - 1]) throw ValidationError("EventSeries: event times must be non-decreasing");
    EventSeries e;
    e.times = std::move(t);
    e.amplitudes = std::move(a);
    return e;
  }

  static EventSeries sampled(double start, double period, std::vector<double> values) {
    if (!(period > 0)) throw ValidationError("EventSeries: sample period must be positive");
    EventSeries e;
    e.kind = Kind::sampled;
    e.start_time = start;
    e.sample_period = period;
    e.amplitudes = std::move(values);
    return e;
  }

  bool empty() const noexcept { return amplitudes.empty(); }
};

/// Word-rate regressor: a unit impulse at each word offset.
inline EventSeries word_rate_events(const StimulusAlignment& a) {
  std::vector<double> t, v;
  for (const auto& w : a.entries) {
    t.push_back(w.offset);
    v.push_back(1.0);
  }
  return EventSeries::impulses(std::move(t), std::move(v));
}

/// Word-frequency regressor: -log10(per-million frequency) at each word offset.
/// Words missing from the table get the table's minimum frequency.
inline EventSeries word_frequency_events(const StimulusAlignment& a, const FrequencyTable& freq) {
  if (freq.empty()) throw ValidationError("word frequency table is empty");
  double fmin = std::numeric_limits<double>::infinity();
  for (const auto& [w, f] : freq) {
    if (!(f > 0)) throw ValidationError("word frequency for '" + w + "' must be positive");
    fmin = std::min(fmin, f);
  }
  std::vector<double> t, v;
  for (const auto& w : a.entries) {
    auto it = freq.find(w.word);
    if (it == freq.end()) it = freq.find(detail::normalise_word(w.word));
    t.push_back(w.offset);
    v.push_back(-std::log10(it == freq.end() ? fmin : it->second));
  }
  return EventSeries::impulses(std::move(t), std::move(v));
}

inline EventSeries feature_events(const FeatureSeries& f) {
  return EventSeries::sampled(f.start_time, f.sample_period, f.values);
}

inline EventSeries regressor_events(const std::vector<RegressorRow>& rows) {
  std::vector<double> t, v;
  for (const auto& r : rows) {
    t.push_back(r.offset);
    v.push_back(r.value);
  }
  return EventSeries::impulses(std::move(t), std::move(v));
}

/// HRF-convolved regressor sampled at scan times 0, tr, ..., (T-1) tr.
inline Eigen::VectorXd convolve_and_sample(const EventSeries& e, const HrfSpec& spec, double tr, std::size_t T) {
  spec.validate();
  if (!(tr > 0)) throw ContractViolation("convolve_and_sample: TR must be positive");
  Eigen::VectorXd col = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(T));
  if (e.empty()) {
    std::clog << "warning: empty event series, regressor column is zero\n";
    return col;
  }
  const int os = spec.oversampling;
  const double dt = tr / os;
  const auto kernel = hrf_kernel(spec, dt);
  const std::size_t grid = T * static_cast<std::size_t>(os);
  std::vector<double> x(grid, 0.0);
  const double horizon = static_cast<double>(T) * tr + spec.kernel_length;

  if (e.kind == EventSeries::Kind::impulse) {
    for (std::size_t i = 0; i < e.times.size(); ++i) {
      const double t = e.times[i];
      if (t < 0 || t > horizon)
        throw ValidationError("event at " + csv::format(t) + " s outside [0, " + csv::format(horizon) + "] s");
      auto g = static_cast<std::size_t>(std::llround(t / dt));
      if (g < grid) x[g] += e.amplitudes[i];
    }
  } else {
    // Linear interpolation onto the grid; zero outside the sampled span.
    const double last = e.start_time + static_cast<double>(e.amplitudes.size() - 1) * e.sample_period;
    if (e.start_time < 0 || last > horizon) throw ValidationError("sampled series extends outside the scan window");
    for (std::size_t g = 0; g < grid; ++g) {
      const double t = static_cast<double>(g) * dt;
      const double u = (t - e.start_time) / e.sample_period;
      if (u < 0 || u > static_cast<double>(e.amplitudes.size() - 1)) continue;
      const auto i0 = static_cast<std::size_t>(std::floor(u));
      const double frac = u - static_cast<double>(i0);
      const double a = e.amplitudes[i0];
      const double b = i0 + 1 < e.amplitudes.size() ? e.amplitudes[i0 + 1] : a;
      x[g] = a + frac * (b - a);
    }
  }

  for (std::size_t s = 0; s < T; ++s) {
    const std::size_t g = s * static_cast<std::size_t>(os);
    double acc = 0.0;
    const std::size_t kmax = std::min(kernel.size() - 1, g);
    for (std::size_t k = 0; k <= kmax; ++k) acc += x[g - k] * kernel[k];
    col(static_cast<Eigen::Index>(s)) = acc;
  }
  return col;
}

// ---------------------------------------------------------------------------
// Design matrices and cross-validated OLS

/// Scans x (intercept + named regressors).
struct DesignMatrix {
  std::vector<std::string> names{"intercept"};
  Eigen::MatrixXd X;

  explicit DesignMatrix(std::size_t T = 0) : X(Eigen::MatrixXd::Ones(static_cast<Eigen::Index>(T), 1)) {}

  std::size_t scans() const noexcept { return static_cast<std::size_t>(X.rows()); }
  std::size_t regressors() const noexcept { return names.size() - 1; }

  DesignMatrix& add(const std::string& name, const Eigen::VectorXd& column) {
    if (column.size() != X.rows())
      throw ValidationError("design column '" + name + "' has " + std::to_string(column.size()) + " rows, expected " +
                            std::to_string(X.rows()));
    if (!column.allFinite()) throw ValidationError("design column '" + name + "' has non-finite entries");
    X.conservativeResize(Eigen::NoChange, X.cols() + 1);
    X.col(X.cols() - 1) = column;
    names.push_back(name);
    return *this;
  }

  DesignMatrix with(const std::string& name, const Eigen::VectorXd& column) const {
    DesignMatrix d = *this;
    d.add(name, column);
    return d;
  }
};

/// Section start scans, e.g. {0, 40, 80, ...}; sections run to the next start or T.
struct Sections {
  std::vector<std::size_t> starts;
  std::size_t total = 0;

  void validate() const {
    if (starts.size() < 2) throw ContractViolation("cross-validation needs at least 2 sections");
    if (starts[0] != 0) throw ValidationError("first section must start at scan 0");
    for (std::size_t i = 1; i < starts.size(); ++i)
      if (starts[i] <= starts[i - 1]) throw ValidationError("section starts must be strictly increasing");
    if (starts.back() >= total) throw ValidationError("last section starts beyond the series");
  }
  std::size_t begin(std::size_t f) const { return starts[f]; }
  std::size_t end(std::size_t f) const { return f + 1 < starts.size() ? starts[f + 1] : total; }

  static Sections equal(std::size_t count, std::size_t total) {
    Sections s;
    s.total = total;
    for (std::size_t i = 0; i < count; ++i) s.starts.push_back(i * total / count);
    return s;
  }
};

namespace detail {

/// Names of columns that are linear combinations of others, for the error message.
inline std::string collinear_report(const Eigen::MatrixXd& X, const std::vector<std::string>& names,
                                    const std::vector<Eigen::Index>& kept) {
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  qr.setThreshold(1e-10);
  const auto rank = qr.rank();
  const auto& perm = qr.colsPermutation().indices();
  std::vector<Eigen::Index> indep(perm.data(), perm.data() + rank);
  std::sort(indep.begin(), indep.end());
  Eigen::MatrixXd B(X.rows(), static_cast<Eigen::Index>(indep.size()));
  for (std::size_t i = 0; i < indep.size(); ++i) B.col(static_cast<Eigen::Index>(i)) = X.col(indep[i]);
  std::ostringstream os;
  for (Eigen::Index r = rank; r < X.cols(); ++r) {
    const auto dep = perm(r);
    Eigen::VectorXd c = B.colPivHouseholderQr().solve(X.col(dep));
    os << (r > rank ? "; " : "") << "'" << names[static_cast<std::size_t>(kept[static_cast<std::size_t>(dep)])] << "' ~";
    for (Eigen::Index i = 0; i < c.size(); ++i)
      if (std::abs(c(i)) > 1e-8) os << " '" << names[static_cast<std::size_t>(kept[static_cast<std::size_t>(indep[static_cast<std::size_t>(i)])])] << "'";
  }
  return os.str();
}

}  // namespace detail

/// Cross-validated r^2 per voxel (columns of Y), leaving out one section at a time.
/// Columns that are identically zero on a training split get weight 0; any other
/// linear dependence raises RankDeficiencyError. A held-out split with zero variance
/// contributes r^2 = 0.
inline Eigen::VectorXd cv_r2_map(const DesignMatrix& design, const Eigen::MatrixXd& Y, const Sections& folds) {
  folds.validate();
  if (static_cast<std::size_t>(Y.rows()) != design.scans() || folds.total != design.scans())
    throw ValidationError("cv_r2: design has " + std::to_string(design.scans()) + " scans, data has " +
                          std::to_string(Y.rows()));
  const Eigen::Index T = Y.rows(), V = Y.cols();
  const std::size_t F = folds.starts.size();
  Eigen::VectorXd total = Eigen::VectorXd::Zero(V);
  for (std::size_t f = 0; f < F; ++f) {
    const auto b = static_cast<Eigen::Index>(folds.begin(f)), e = static_cast<Eigen::Index>(folds.end(f));
    const Eigen::Index n_test = e - b, n_train = T - n_test;
    std::vector<Eigen::Index> kept;
    for (Eigen::Index c = 0; c < design.X.cols(); ++c) {
      bool zero = (design.X.col(c).head(b).array() == 0.0).all() && (design.X.col(c).tail(T - e).array() == 0.0).all();
      if (!zero) kept.push_back(c);
    }
    const auto p = static_cast<Eigen::Index>(kept.size());
    Eigen::MatrixXd Xtr(n_train, p), Xte(n_test, p);
    for (Eigen::Index k = 0; k < p; ++k) {
      const auto& col = design.X.col(kept[static_cast<std::size_t>(k)]);
      Xtr.col(k) << col.head(b), col.tail(T - e);
      Xte.col(k) = col.segment(b, n_test);
    }
    Eigen::MatrixXd Ytr(n_train, V);
    Ytr << Y.topRows(b), Y.bottomRows(T - e);

    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Xtr);
    qr.setThreshold(1e-10);
    if (qr.rank() < p)
      throw RankDeficiencyError("rank-deficient design on fold " + std::to_string(f) + ": " +
                                detail::collinear_report(Xtr, design.names, kept));
    const Eigen::MatrixXd beta = qr.solve(Ytr);
    const Eigen::MatrixXd resid = Y.middleRows(b, n_test) - Xte * beta;
    for (Eigen::Index v = 0; v < V; ++v) {
      const auto yt = Y.col(v).segment(b, n_test);
      const double ss_tot = (yt.array() - yt.mean()).square().sum();
      const double ss_res = resid.col(v).squaredNorm();
      total(v) += ss_tot > 0 ? 1.0 - ss_res / ss_tot : 0.0;
    }
  }
  return total / static_cast<double>(F);
}

inline double cv_r2(const DesignMatrix& design, const Eigen::VectorXd& y, const Sections& folds) {
  return cv_r2_map(design, y, folds)(0);
}

/// cv_r2(controls + column) - cv_r2(controls), per voxel.
inline Eigen::VectorXd r2_increase(const DesignMatrix& controls, const std::string& name, const Eigen::VectorXd& column,
                                   const Eigen::MatrixXd& Y, const Sections& folds) {
  return cv_r2_map(controls.with(name, column), Y, folds) - cv_r2_map(controls, Y, folds);
}

// ---------------------------------------------------------------------------
// Paired t-test across subjects

struct TMap {
  Eigen::VectorXd t;
  Eigen::VectorXd z;
  Eigen::VectorXd p;  // two-tailed
  std::vector<bool> valid;
  std::size_t masked = 0;  // voxels with zero variance of the differences
  double df = 0.0;
};

namespace detail {

/// Two-tailed p and sign-preserving z for Student t with `df` degrees of freedom.
/// The upper tail of |t| is used for both signs, so z(-t) = -z(t) exactly.
inline std::pair<double, double> t_to_z(double t, double df) {
  boost::math::students_t dist(df);
  const double q = boost::math::cdf(boost::math::complement(dist, std::abs(t)));
  double zabs;
  if (q >= 0.5)
    zabs = 0.0;
  else if (q < std::numeric_limits<double>::min())
    zabs = 38.0;
  else
    zabs = boost::math::quantile(boost::math::complement(boost::math::normal(), q));
  return {t < 0 ? -zabs : zabs, std::min(1.0, 2.0 * q)};
}

}  // namespace detail

/// Per voxel: d_s = inc_b[s] - inc_a[s], t = mean(d) / (sd(d) / sqrt(n)), df = n - 1.
inline TMap paired_t_map(const std::vector<Eigen::VectorXd>& inc_a, const std::vector<Eigen::VectorXd>& inc_b) {
  if (inc_a.size() != inc_b.size()) throw ValidationError("paired_t_map: subject counts differ");
  if (inc_a.size() < 2) throw ContractViolation("paired_t_map: at least 2 subjects required");
  const auto V = inc_a[0].size();
  for (std::size_t s = 0; s < inc_a.size(); ++s)
    if (inc_a[s].size() != V || inc_b[s].size() != V) throw ValidationError("paired_t_map: voxel grids differ");
  const auto n = static_cast<double>(inc_a.size());
  TMap m;
  m.df = n - 1;
  m.t = Eigen::VectorXd::Zero(V);
  m.z = Eigen::VectorXd::Zero(V);
  m.p = Eigen::VectorXd::Ones(V);
  m.valid.assign(static_cast<std::size_t>(V), false);
  for (Eigen::Index v = 0; v < V; ++v) {
    double sum = 0.0;
    for (std::size_t s = 0; s < inc_a.size(); ++s) sum += inc_b[s](v) - inc_a[s](v);
    const double mean = sum / n;
    double ss = 0.0;
    for (std::size_t s = 0; s < inc_a.size(); ++s) {
      const double d = (inc_b[s](v) - inc_a[s](v)) - mean;
      ss += d * d;
    }
    const double sd = std::sqrt(ss / (n - 1));
    if (!(sd > 0)) {
      ++m.masked;
      continue;
    }
    m.valid[static_cast<std::size_t>(v)] = true;
    m.t(v) = mean / (sd / std::sqrt(n));
    auto [z, p] = detail::t_to_z(m.t(v), m.df);
    m.z(v) = z;
    m.p(v) = p;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Cluster thresholding

struct VoxelGrid {
  std::uint32_t nx = 0, ny = 0, nz = 0;
  double voxel_mm[3] = {2.0, 2.0, 2.0};
  double origin_mm[3] = {0.0, 0.0, 0.0};

  std::size_t size() const noexcept { return std::size_t{nx} * ny * nz; }
  double voxel_volume() const noexcept { return voxel_mm[0] * voxel_mm[1] * voxel_mm[2]; }
  std::size_t index(std::uint32_t x, std::uint32_t y, std::uint32_t z) const noexcept {
    return x + std::size_t{nx} * (y + std::size_t{ny} * z);
  }
  void coords(std::size_t i, std::uint32_t& x, std::uint32_t& y, std::uint32_t& z) const noexcept {
    x = static_cast<std::uint32_t>(i % nx);
    y = static_cast<std::uint32_t>((i / nx) % ny);
    z = static_cast<std::uint32_t>(i / (std::size_t{nx} * ny));
  }

  friend bool operator==(const VoxelGrid& a, const VoxelGrid& b) {
    return a.nx == b.nx && a.ny == b.ny && a.nz == b.nz && std::equal(a.voxel_mm, a.voxel_mm + 3, b.voxel_mm) &&
           std::equal(a.origin_mm, a.origin_mm + 3, b.origin_mm);
  }
};

struct Cluster {
  double peak_mm[3] = {0, 0, 0};
  std::size_t peak_voxel = 0;
  double peak_stat = 0.0;  // signed z at the voxel of largest |z|
  std::size_t voxel_count = 0;
  double size_mm3 = 0.0;
  std::vector<std::size_t> voxels;  // sorted indices
};

struct ClusterTable {
  std::vector<Cluster> clusters;
  double z_threshold = 0.0;
};

/// |z| threshold equivalent to a two-tailed p.
inline double two_tailed_z(double p) {
  if (!(p > 0 && p < 1)) throw ContractViolation("p threshold must lie in (0, 1)");
  return boost::math::quantile(boost::math::complement(boost::math::normal(), p / 2));
}

/// Suprathreshold voxels (two-tailed p < p_thresh) grouped by sign into 6-connected
/// components; components smaller than min_size are dropped. Sorted by size, then
/// peak |z|, then first voxel.
inline ClusterTable cluster_threshold(const Eigen::VectorXd& z, const VoxelGrid& grid, double p_thresh = 0.001,
                                      std::size_t min_size = 15) {
  if (static_cast<std::size_t>(z.size()) != grid.size())
    throw ValidationError("cluster_threshold: map has " + std::to_string(z.size()) + " voxels, grid has " +
                          std::to_string(grid.size()));
  ClusterTable table;
  table.z_threshold = two_tailed_z(p_thresh);
  const auto N = grid.size();
  auto sign_of = [&](std::size_t i) -> int {
    const double v = z(static_cast<Eigen::Index>(i));
    if (!(std::abs(v) > table.z_threshold)) return 0;
    return v > 0 ? 1 : -1;
  };
  std::vector<bool> seen(N, false);
  for (std::size_t start = 0; start < N; ++start) {
    const int sg = sign_of(start);
    if (sg == 0 || seen[start]) continue;
    Cluster c;
    std::queue<std::size_t> q;
    q.push(start);
    seen[start] = true;
    while (!q.empty()) {
      const auto i = q.front();
      q.pop();
      c.voxels.push_back(i);
      std::uint32_t x, y, zz;
      grid.coords(i, x, y, zz);
      const std::int64_t nb[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
      for (const auto& d : nb) {
        const std::int64_t X = std::int64_t{x} + d[0], Y = std::int64_t{y} + d[1], Z = std::int64_t{zz} + d[2];
        if (X < 0 || Y < 0 || Z < 0 || X >= grid.nx || Y >= grid.ny || Z >= grid.nz) continue;
        const auto j = grid.index(static_cast<std::uint32_t>(X), static_cast<std::uint32_t>(Y), static_cast<std::uint32_t>(Z));
        if (!seen[j] && sign_of(j) == sg) {
          seen[j] = true;
          q.push(j);
        }
      }
    }
    if (c.voxels.size() < min_size) continue;
    std::sort(c.voxels.begin(), c.voxels.end());
    c.voxel_count = c.voxels.size();
    c.size_mm3 = static_cast<double>(c.voxel_count) * grid.voxel_volume();
    c.peak_voxel = c.voxels.front();
    for (auto i : c.voxels)
      if (std::abs(z(static_cast<Eigen::Index>(i))) > std::abs(z(static_cast<Eigen::Index>(c.peak_voxel)))) c.peak_voxel = i;
    c.peak_stat = z(static_cast<Eigen::Index>(c.peak_voxel));
    std::uint32_t px, py, pz;
    grid.coords(c.peak_voxel, px, py, pz);
    const std::uint32_t pc[3] = {px, py, pz};
    for (int a = 0; a < 3; ++a) c.peak_mm[a] = grid.origin_mm[a] + pc[a] * grid.voxel_mm[a];
    table.clusters.push_back(std::move(c));
  }
  std::sort(table.clusters.begin(), table.clusters.end(), [](const Cluster& a, const Cluster& b) {
    if (a.voxel_count != b.voxel_count) return a.voxel_count > b.voxel_count;
    if (std::abs(a.peak_stat) != std::abs(b.peak_stat)) return std::abs(a.peak_stat) > std::abs(b.peak_stat);
    return a.voxels.front() < b.voxels.front();
  });
  return table;
}

/// CSV with the columns `X,Y,Z,Peak Stat,Cluster Size (mm3)`; coordinates in mm.
inline void write_cluster_csv(const std::string& path, const ClusterTable& t) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << "X,Y,Z,Peak Stat,Cluster Size (mm3)\n";
  for (const auto& c : t.clusters)
    out << csv::format(c.peak_mm[0]) << ',' << csv::format(c.peak_mm[1]) << ',' << csv::format(c.peak_mm[2]) << ','
        << csv::format(c.peak_stat) << ',' << csv::format(c.size_mm3) << '\n';
}

/// Dice overlap between a voxel set and the union of the clusters.
inline double dice(const std::vector<std::size_t>& region, const ClusterTable& t) {
  std::vector<std::size_t> found;
  for (const auto& c : t.clusters) found.insert(found.end(), c.voxels.begin(), c.voxels.end());
  std::sort(found.begin(), found.end());
  std::vector<std::size_t> r = region;
  std::sort(r.begin(), r.end());
  std::vector<std::size_t> both;
  std::set_intersection(r.begin(), r.end(), found.begin(), found.end(), std::back_inserter(both));
  if (r.empty() && found.empty()) return 1.0;
  return 2.0 * static_cast<double>(both.size()) / static_cast<double>(r.size() + found.size());
}

// ---------------------------------------------------------------------------
// BOLD panel files
//
// Little-endian layout:
//   char[8]    magic "SSBOLD01"
//   uint32     nx, ny, nz
//   float64    voxel size x, y, z (mm)
//   float64    origin x, y, z (mm)
//   float64    TR (s)
//   uint32     section count S, then S uint32 section start scans (first is 0)
//   uint32     T (scans)
//   float32    voxels x T matrix, row-major (all scans of voxel 0 first)
//
// Maps (increase, z) use the same layout with T = 1 and a single section.

struct BoldPanel {
  VoxelGrid grid;
  double tr = 2.0;
  std::vector<std::uint32_t> section_starts{0};
  Eigen::MatrixXd data;  // T x voxels

  std::size_t scans() const noexcept { return static_cast<std::size_t>(data.rows()); }

  Sections sections() const {
    Sections s;
    s.total = scans();
    s.starts.assign(section_starts.begin(), section_starts.end());
    return s;
  }

  void validate() const {
    if (static_cast<std::size_t>(data.cols()) != grid.size())
      throw ValidationError("BOLD panel: " + std::to_string(data.cols()) + " voxel columns for a grid of " +
                            std::to_string(grid.size()));
    if (section_starts.empty() || section_starts[0] != 0) throw ValidationError("BOLD panel: first section must start at 0");
    for (std::size_t i = 1; i < section_starts.size(); ++i)
      if (section_starts[i] <= section_starts[i - 1] || section_starts[i] >= scans())
        throw ValidationError("BOLD panel: section starts must increase within the series");
    if (!(tr > 0)) throw ValidationError("BOLD panel: TR must be positive");
  }
};

namespace detail {

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw ParseError(path + ": truncated BOLD panel header");
  return v;
}

}  // namespace detail

inline void write_bold(const std::string& path, const BoldPanel& p) {
  p.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out.write("SSBOLD01", 8);
  detail::put(out, p.grid.nx);
  detail::put(out, p.grid.ny);
  detail::put(out, p.grid.nz);
  for (double v : p.grid.voxel_mm) detail::put(out, v);
  for (double v : p.grid.origin_mm) detail::put(out, v);
  detail::put(out, p.tr);
  detail::put(out, static_cast<std::uint32_t>(p.section_starts.size()));
  for (auto s : p.section_starts) detail::put(out, s);
  detail::put(out, static_cast<std::uint32_t>(p.scans()));
  std::vector<float> buf(static_cast<std::size_t>(p.data.size()));
  for (Eigen::Index i = 0; i < p.data.size(); ++i) buf[static_cast<std::size_t>(i)] = static_cast<float>(p.data.data()[i]);
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

inline BoldPanel read_bold(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LookupError("cannot open BOLD panel " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "SSBOLD01", 8) != 0) throw ParseError(path + ": not a BOLD panel file");
  BoldPanel p;
  p.grid.nx = detail::get<std::uint32_t>(in, path);
  p.grid.ny = detail::get<std::uint32_t>(in, path);
  p.grid.nz = detail::get<std::uint32_t>(in, path);
  for (double& v : p.grid.voxel_mm) v = detail::get<double>(in, path);
  for (double& v : p.grid.origin_mm) v = detail::get<double>(in, path);
  p.tr = detail::get<double>(in, path);
  const auto S = detail::get<std::uint32_t>(in, path);
  p.section_starts.resize(S);
  for (auto& s : p.section_starts) s = detail::get<std::uint32_t>(in, path);
  const auto T = detail::get<std::uint32_t>(in, path);
  std::vector<float> buf(std::size_t{T} * p.grid.size());
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!in) throw ParseError(path + ": truncated BOLD data");
  p.data.resize(T, static_cast<Eigen::Index>(p.grid.size()));
  for (std::size_t i = 0; i < buf.size(); ++i) p.data.data()[i] = buf[i];
  p.validate();
  return p;
}

/// A per-voxel map stored as a one-scan panel.
inline void write_map(const std::string& path, const VoxelGrid& grid, const Eigen::VectorXd& values) {
  BoldPanel p;
  p.grid = grid;
  p.data = values.transpose();
  write_bold(path, p);
}

inline Eigen::VectorXd read_map(const std::string& path, VoxelGrid* grid = nullptr) {
  auto p = read_bold(path);
  if (p.scans() != 1) throw ParseError(path + ": expected a single-scan map");
  if (grid) *grid = p.grid;
  return p.data.row(0).transpose();
}

}  // namespace synsurp
