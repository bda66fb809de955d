#include "ambulate/dba.hpp"

#include "ambulate/datasets.hpp"
#include "ambulate/error.hpp"
#include "ambulate/random.hpp"

#include <algorithm>
#include <limits>
#include <map>
#include <set>

namespace ambulate {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_pair(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows()) throw Error(ErrorKind::ShapeError, "DTW channel counts differ");
  if (a.cols() < 1 || b.cols() < 1) throw Error(ErrorKind::ShapeError, "DTW needs non-empty sequences");
}

// Accumulated cost, row-major (n x m).
std::vector<double> accumulate(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const Eigen::Index n = a.cols(), m = b.cols();
  std::vector<double> d(static_cast<std::size_t>(n * m));
  auto at = [&](Eigen::Index i, Eigen::Index j) -> double& { return d[static_cast<std::size_t>(i * m + j)]; };
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) {
      const double c = (a.col(i) - b.col(j)).squaredNorm();
      if (i == 0 && j == 0) {
        at(i, j) = c;
        continue;
      }
      double best = kInf;
      if (i > 0 && j > 0) best = at(i - 1, j - 1);
      if (i > 0) best = std::min(best, at(i - 1, j));
      if (j > 0) best = std::min(best, at(i, j - 1));
      at(i, j) = c + best;
    }
  }
  return d;
}

}  // namespace

WarpResult dtw(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  check_pair(a, b);
  const Eigen::Index n = a.cols(), m = b.cols();
  const auto d = accumulate(a, b);
  auto at = [&](Eigen::Index i, Eigen::Index j) { return d[static_cast<std::size_t>(i * m + j)]; };

  WarpResult r;
  r.cost = at(n - 1, m - 1);
  Eigen::Index i = n - 1, j = m - 1;
  r.path.emplace_back(static_cast<int>(i), static_cast<int>(j));
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      const double diag = at(i - 1, j - 1), up = at(i - 1, j), left = at(i, j - 1);
      if (diag <= up && diag <= left) {
        --i;
        --j;
      } else if (up <= left) {
        --i;
      } else {
        --j;
      }
    } else if (i > 0) {
      --i;
    } else {
      --j;
    }
    r.path.emplace_back(static_cast<int>(i), static_cast<int>(j));
  }
  std::reverse(r.path.begin(), r.path.end());
  return r;
}

double dtw_cost(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  check_pair(a, b);
  const Eigen::Index n = a.cols(), m = b.cols();
  std::vector<double> prev(static_cast<std::size_t>(m)), cur(static_cast<std::size_t>(m));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) {
      const auto jj = static_cast<std::size_t>(j);
      const double c = (a.col(i) - b.col(j)).squaredNorm();
      if (i == 0 && j == 0) {
        cur[jj] = c;
        continue;
      }
      double best = kInf;
      if (i > 0 && j > 0) best = prev[jj - 1];
      if (i > 0) best = std::min(best, prev[jj]);
      if (j > 0) best = std::min(best, cur[jj - 1]);
      cur[jj] = c + best;
    }
    std::swap(prev, cur);
  }
  return prev[static_cast<std::size_t>(m - 1)];
}

std::size_t dtw_medoid(const std::vector<Eigen::MatrixXd>& seqs, std::size_t exact_limit) {
  if (seqs.empty()) throw Error(ErrorKind::SpecError, "medoid of an empty set");
  const std::size_t n = seqs.size();
  auto spaced = [n](std::size_t k) {
    std::vector<std::size_t> idx;
    if (k >= n) {
      for (std::size_t i = 0; i < n; ++i) idx.push_back(i);
    } else {
      for (std::size_t i = 0; i < k; ++i) idx.push_back(i * n / k);
    }
    return idx;
  };
  const auto candidates = spaced(exact_limit);
  const auto references = spaced(std::max<std::size_t>(exact_limit, 4 * exact_limit));
  std::size_t best = candidates.front();
  double best_cost = kInf;
  for (std::size_t c : candidates) {
    double total = 0.0;
    for (std::size_t r : references) {
      if (r != c) total += dtw_cost(seqs[c], seqs[r]);
      if (total >= best_cost) break;
    }
    if (total < best_cost) {
      best_cost = total;
      best = c;
    }
  }
  return best;
}

DbaResult dba_average(const std::vector<Eigen::MatrixXd>& seqs, int iterations) {
  if (seqs.empty()) throw Error(ErrorKind::SpecError, "DBA needs at least one sequence");
  for (const auto& s : seqs) {
    if (s.rows() != seqs.front().rows() || s.cols() != seqs.front().cols()) {
      throw Error(ErrorKind::ShapeError, "DBA sequences must share one shape");
    }
  }
  DbaResult r;
  r.medoid_index = dtw_medoid(seqs);
  r.average = seqs[r.medoid_index];

  const Eigen::Index c = r.average.rows(), len = r.average.cols();
  // Alignment of every sequence to the current average doubles as the
  // inertia evaluation for that average.
  auto align_all = [&](Eigen::MatrixXd& sums, Eigen::VectorXd& counts) {
    sums.setZero(c, len);
    counts.setZero(len);
    double inertia = 0.0;
    for (const auto& s : seqs) {
      const auto w = dtw(r.average, s);
      inertia += w.cost;
      for (const auto& [i, j] : w.path) {
        sums.col(i) += s.col(j);
        counts[i] += 1.0;
      }
    }
    return inertia;
  };

  Eigen::MatrixXd sums;
  Eigen::VectorXd counts;
  r.inertia.push_back(align_all(sums, counts));
  for (int it = 0; it < iterations; ++it) {
    if (r.inertia.back() == 0.0) break;
    for (Eigen::Index i = 0; i < len; ++i) r.average.col(i) = sums.col(i) / counts[i];
    const double inertia = align_all(sums, counts);
    const double before = r.inertia.back();
    r.inertia.push_back(inertia);
    if ((before - inertia) < 1e-6 * before) break;
  }
  return r;
}

void RepresentativeSelection::validate() const {
  if (!(min_posterior > 0.0 && min_posterior < 1.0)) {
    throw Error(ErrorKind::SpecError, "min_posterior must lie in (0, 1)");
  }
  if (max_epochs_per_test < 1 || target_count < 1) {
    throw Error(ErrorKind::SpecError, "selection counts must be positive");
  }
}

EpochList select_representative_epochs(const std::vector<PosteriorRow>& rows, const EpochList& epochs,
                                       int cls, const RepresentativeSelection& sel) {
  sel.validate();
  std::map<std::string, std::vector<std::size_t>> by_test;
  std::set<std::pair<std::string, int>> seen;
  for (const auto& row : rows) {
    if (row.true_label != cls || cls < 0 || static_cast<std::size_t>(cls) >= row.posterior.size()) continue;
    const auto argmax = static_cast<int>(std::max_element(row.posterior.begin(), row.posterior.end()) -
                                         row.posterior.begin());
    if (argmax != cls || !(row.posterior[static_cast<std::size_t>(cls)] > sel.min_posterior)) continue;
    if (row.record >= epochs.size()) throw Error(ErrorKind::ShapeError, "posterior row refers to a missing epoch");
    const auto test = base_test_id(row.test_id);
    if (!seen.insert({test, row.epoch_index}).second) continue;
    by_test[test].push_back(row.record);
  }
  if (by_test.empty()) throw Error(ErrorKind::SelectionEmpty, "no epoch qualifies for the selection");

  Rng rng(sel.seed);
  std::vector<std::size_t> pool;
  for (auto& [test, idx] : by_test) {
    if (idx.size() > static_cast<std::size_t>(sel.max_epochs_per_test)) {
      rng.shuffle(idx);
      idx.resize(static_cast<std::size_t>(sel.max_epochs_per_test));
      std::sort(idx.begin(), idx.end());
    }
    pool.insert(pool.end(), idx.begin(), idx.end());
  }
  if (pool.size() > static_cast<std::size_t>(sel.target_count)) {
    rng.shuffle(pool);
    pool.resize(static_cast<std::size_t>(sel.target_count));
    std::sort(pool.begin(), pool.end());
  }
  EpochList out;
  for (std::size_t i : pool) out.push_back(epochs[i]);
  return out;
}

Eigen::MatrixXd to_matrix(const EpochData& e) { return e.cast<double>(); }

}  // namespace ambulate
