#include "modicf/imputation.hpp"

#include <cmath>
#include <limits>

namespace modicf {

namespace {

void mark(DatasetBundle& b, std::size_t item, std::size_t m) {
  if (b.generated.empty()) b.generated.assign(b.n_items * b.n_modalities(), 0);
  b.generated[item * b.n_modalities() + m] = 1;
}

struct Moments {
  std::vector<double> mean, sd;
};

Moments observed_moments(const DatasetBundle& b, std::size_t m) {
  const Tensor& x = b.modalities[m].data;
  const auto rows = b.indicator.observed_set(m);
  Moments mo{std::vector<double>(x.cols(), 0.0), std::vector<double>(x.cols(), 0.0)};
  if (rows.empty()) return mo;
  const double n = static_cast<double>(rows.size());
  for (std::size_t j = 0; j < x.cols(); ++j) {
    double s = 0, s2 = 0;
    for (auto i : rows) {
      s += x(i, j);
      s2 += static_cast<double>(x(i, j)) * x(i, j);
    }
    mo.mean[j] = s / n;
    mo.sd[j] = std::sqrt(std::max(0.0, s2 / n - mo.mean[j] * mo.mean[j]));
  }
  return mo;
}

}  // namespace

void impute_mean(DatasetBundle& bundle) {
  for (std::size_t m = 0; m < bundle.n_modalities(); ++m) {
    const Moments mo = observed_moments(bundle, m);
    for (auto i : bundle.indicator.missing_set(m)) {
      auto row = bundle.modalities[m].data.row_span(i);
      for (std::size_t j = 0; j < row.size(); ++j) row[j] = static_cast<Scalar>(mo.mean[j]);
      mark(bundle, i, m);
    }
  }
}

void impute_zero(DatasetBundle& bundle) {
  for (std::size_t m = 0; m < bundle.n_modalities(); ++m) {
    for (auto i : bundle.indicator.missing_set(m)) {
      for (auto& v : bundle.modalities[m].data.row_span(i)) v = 0;
      mark(bundle, i, m);
    }
  }
}

void impute_random(DatasetBundle& bundle, Rng& rng) {
  for (std::size_t m = 0; m < bundle.n_modalities(); ++m) {
    const Moments mo = observed_moments(bundle, m);
    for (auto i : bundle.indicator.missing_set(m)) {
      auto row = bundle.modalities[m].data.row_span(i);
      for (std::size_t j = 0; j < row.size(); ++j) row[j] = static_cast<Scalar>(mo.mean[j] + mo.sd[j] * rng.normal());
      mark(bundle, i, m);
    }
  }
}

void impute_nearest(DatasetBundle& bundle) {
  const DatasetBundle src = bundle;
  const std::size_t M = src.n_modalities();
  for (std::size_t m = 0; m < M; ++m) {
    const auto donors = src.indicator.observed_set(m);
    if (donors.empty()) continue;
    for (auto i : src.indicator.missing_set(m)) {
      std::size_t best = donors.front();
      double best_sim = -std::numeric_limits<double>::infinity();
      for (auto j : donors) {
        double dot = 0, ni = 0, nj = 0;
        for (std::size_t n = 0; n < M; ++n) {
          if (!src.indicator.observed(i, n)) continue;
          auto a = src.modalities[n].data.row_span(i);
          auto b = src.modalities[n].data.row_span(j);
          for (std::size_t k = 0; k < a.size(); ++k) {
            dot += static_cast<double>(a[k]) * b[k];
            ni += static_cast<double>(a[k]) * a[k];
            nj += static_cast<double>(b[k]) * b[k];
          }
        }
        const double sim = (ni == 0 || nj == 0) ? 0.0 : dot / (std::sqrt(ni) * std::sqrt(nj));
        if (sim > best_sim) {
          best_sim = sim;
          best = j;
        }
      }
      auto from = src.modalities[m].data.row_span(best);
      std::copy(from.begin(), from.end(), bundle.modalities[m].data.row_span(i).begin());
      mark(bundle, i, m);
    }
  }
}

}  // namespace modicf
