#include "snapflow/stats.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace snapflow {

double dip_statistic(std::span<const double> sample) {
  const int n = static_cast<int>(sample.size());
  if (n < 1) throw std::invalid_argument("dip_statistic: empty sample");
  // 1-based to follow the classical formulation.
  std::vector<double> x(static_cast<std::size_t>(n) + 1);
  std::copy(sample.begin(), sample.end(), x.begin() + 1);
  std::sort(x.begin() + 1, x.end());

  double dip = 1.0;
  if (n < 2 || x[n] == x[1]) return dip / (2.0 * n);

  std::vector<int> mn(n + 1), mj(n + 1), gcm(n + 2), lcm(n + 2);
  // Change points of the greatest convex minorant.
  mn[1] = 1;
  for (int j = 2; j <= n; ++j) {
    mn[j] = j - 1;
    while (true) {
      const int a = mn[j], b = mn[a];
      if (a == 1 || (x[j] - x[a]) * (a - b) < (x[a] - x[b]) * (j - a)) break;
      mn[j] = b;
    }
  }
  // Change points of the least concave majorant.
  mj[n] = n;
  for (int k = n - 1; k >= 1; --k) {
    mj[k] = k + 1;
    while (true) {
      const int a = mj[k], b = mj[a];
      if (a == n || (x[k] - x[a]) * (a - b) < (x[a] - x[b]) * (k - a)) break;
      mj[k] = b;
    }
  }

  int low = 1, high = n;
  while (true) {
    int i = 1;
    gcm[1] = high;
    while (gcm[i] > low) {
      gcm[i + 1] = mn[gcm[i]];
      ++i;
    }
    const int l_gcm = i;
    int ig = l_gcm, ix = ig - 1;

    i = 1;
    lcm[1] = low;
    while (lcm[i] < high) {
      lcm[i + 1] = mj[lcm[i]];
      ++i;
    }
    const int l_lcm = i;
    int ih = l_lcm, iv = 2;

    // Largest distance between the two hulls over the current interval.
    double d = 0.0;
    if (l_gcm != 2 || l_lcm != 2) {
      do {
        const int gx = gcm[ix], lv = lcm[iv];
        if (gx > lv) {
          const int g1 = gcm[ix + 1];
          const double dx = (lv - g1 + 1) - (x[lv] - x[g1]) * (gx - g1) / (x[gx] - x[g1]);
          ++iv;
          if (dx >= d) {
            d = dx;
            ig = ix + 1;
            ih = iv - 1;
          }
        } else {
          const int l1 = lcm[iv - 1];
          const double dx = (x[gx] - x[l1]) * (lv - l1) / (x[lv] - x[l1]) - (gx - l1 - 1);
          --ix;
          if (dx >= d) {
            d = dx;
            ig = ix + 1;
            ih = iv;
          }
        }
        ix = std::max(ix, 1);
        iv = std::min(iv, l_lcm);
      } while (gcm[ix] != lcm[iv]);
    } else {
      d = 1.0;
    }
    if (d < dip) break;

    double dip_l = 0.0;
    for (int j = ig; j < l_gcm; ++j) {
      double max_t = 1.0;
      const int jb = gcm[j], j0 = gcm[j + 1];
      if (jb - j0 > 1 && x[jb] != x[j0]) {
        const double c = (jb - j0) / (x[jb] - x[j0]);
        for (int k = j0; k <= jb; ++k) max_t = std::max(max_t, (k - j0 + 1) - (x[k] - x[j0]) * c);
      }
      dip_l = std::max(dip_l, max_t);
    }
    double dip_u = 0.0;
    for (int j = ih; j < l_lcm; ++j) {
      double max_t = 1.0;
      const int j0 = lcm[j], jb = lcm[j + 1];
      if (jb - j0 > 1 && x[jb] != x[j0]) {
        const double c = (jb - j0) / (x[jb] - x[j0]);
        for (int k = j0; k <= jb; ++k) max_t = std::max(max_t, (x[k] - x[j0]) * c - (k - j0 - 1));
      }
      dip_u = std::max(dip_u, max_t);
    }
    dip = std::max(dip, std::max(dip_l, dip_u));

    // The modal interval has stopped shrinking.
    if (low == gcm[ig] && high == lcm[ih]) break;
    low = gcm[ig];
    high = lcm[ih];
  }
  return dip / (2.0 * n);
}

double dip_unimodal_threshold(Index n, double quantile, int replicates, std::uint64_t seed) {
  if (n < 1 || replicates < 1 || !(quantile > 0.0 && quantile < 1.0))
    throw std::invalid_argument("dip_unimodal_threshold: invalid arguments");
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> dips, sample(static_cast<std::size_t>(n));
  for (int r = 0; r < replicates; ++r) {
    for (auto& v : sample) v = normal(rng);
    dips.push_back(dip_statistic(sample));
  }
  std::sort(dips.begin(), dips.end());
  const auto idx = static_cast<std::size_t>(std::ceil(quantile * replicates)) - 1;
  return dips[std::min(idx, dips.size() - 1)];
}

Matrix Pca::transform(const Matrix& x) const {
  if (x.cols() != mean.size()) throw std::invalid_argument("Pca::transform: feature dimension mismatch");
  return (x.rowwise() - mean) * components.transpose();
}

Pca fit_pca(const Matrix& x, Index components) {
  if (x.rows() < 2 || components < 1 || components > x.cols())
    throw std::invalid_argument("fit_pca: need >= 2 rows and 1 <= components <= features");
  Pca p;
  p.mean = x.colwise().mean();
  const Matrix centered = x.rowwise() - p.mean;
  const Matrix cov = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
  if (eig.info() != Eigen::Success) throw std::runtime_error("fit_pca: eigendecomposition failed");
  const Index p_dim = x.cols();
  p.components.resize(components, p_dim);
  p.explained_variance.resize(components);
  const double total = std::max(eig.eigenvalues().sum(), 0.0);
  for (Index k = 0; k < components; ++k) {
    // Eigen sorts eigenvalues ascending.
    const Index src = p_dim - 1 - k;
    RowVector axis = eig.eigenvectors().col(src).transpose();
    Index arg = 0;
    axis.cwiseAbs().maxCoeff(&arg);
    if (axis(arg) < 0.0) axis = -axis;
    p.components.row(k) = axis;
    p.explained_variance(k) = std::max(eig.eigenvalues()(src), 0.0);
  }
  p.explained_variance_ratio = total > 0.0 ? Vector(p.explained_variance / total) : Vector::Zero(components);
  return p;
}

}  // namespace snapflow
