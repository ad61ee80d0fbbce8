#include "modicf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "modicf/parallel.hpp"

namespace modicf {

std::vector<std::uint32_t> users_with_positives(const InteractionIndex& index, Split split) {
  std::vector<std::uint32_t> out;
  const auto& lists = index.items_of_users(split);
  for (std::uint32_t u = 0; u < lists.size(); ++u)
    if (!lists[u].empty()) out.push_back(u);
  return out;
}

RankingResult rank_topk(const Tensor& scores, const InteractionIndex& index, std::size_t k,
                        const std::vector<std::uint32_t>& users) {
  if (scores.rows() != index.n_users() || scores.cols() != index.n_items()) {
    throw ShapeError("score matrix " + scores.shape().str() + " does not match the interaction index");
  }
  if (k == 0) throw std::invalid_argument("K must be positive");
  if (!scores.all_finite()) throw std::invalid_argument("scores must be finite");
  const auto& train = index.items_of_users(Split::kTrain);
  RankingResult r;
  r.k = k;
  r.lists.resize(users.size());
  for (std::size_t n = 0; n < users.size(); ++n) {
    const std::size_t candidates = index.n_items() - train.at(users[n]).size();
    if (k > candidates) {
      throw std::invalid_argument("K = " + std::to_string(k) + " exceeds the " + std::to_string(candidates) +
                                  " candidate items of user " + std::to_string(users[n]));
    }
  }
  parallel_for(users.size(), [&](std::size_t begin, std::size_t end) {
    std::vector<std::uint32_t> order;
    for (std::size_t n = begin; n < end; ++n) {
      const std::uint32_t u = users[n];
      const auto& seen = train[u];
      order.clear();
      for (std::uint32_t i = 0; i < index.n_items(); ++i)
        if (!std::binary_search(seen.begin(), seen.end(), i)) order.push_back(i);
      auto row = scores.row_span(u);
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                        [&](std::uint32_t a, std::uint32_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
      RankedList& l = r.lists[n];
      l.user = u;
      l.items.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
      for (auto i : l.items) l.scores.push_back(row[i]);
    }
  });
  return r;
}

AccuracyMetrics accuracy_metrics(const RankingResult& result, const InteractionIndex& index, Split split) {
  const auto& positives = index.items_of_users(split);
  AccuracyMetrics m;
  for (const auto& l : result.lists) {
    const auto& pos = positives.at(l.user);
    if (pos.empty()) continue;
    std::size_t hits = 0;
    double dcg = 0;
    for (std::size_t r = 0; r < l.items.size(); ++r) {
      if (std::binary_search(pos.begin(), pos.end(), l.items[r])) {
        ++hits;
        dcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
      }
    }
    double idcg = 0;
    for (std::size_t r = 0; r < std::min(result.k, pos.size()); ++r) idcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
    m.recall += static_cast<double>(hits) / static_cast<double>(pos.size());
    m.precision += static_cast<double>(hits) / static_cast<double>(result.k);
    m.ndcg += dcg / idcg;
    ++m.users;
  }
  if (m.users > 0) {
    const double n = static_cast<double>(m.users);
    m.recall /= n;
    m.precision /= n;
    m.ndcg /= n;
  }
  return m;
}

double incomplete_share(const IndicatorMatrix& indicator) {
  if (indicator.n_items() == 0) return 0;
  return static_cast<double>(indicator.incomplete_count()) / static_cast<double>(indicator.n_items());
}

double mean_incomplete_exposure(const RankingResult& result, const IndicatorMatrix& indicator) {
  if (result.lists.empty()) return 0;
  double total = 0;
  for (const auto& l : result.lists) {
    std::size_t c = 0;
    for (auto i : l.items) c += indicator.incomplete(i) ? 1 : 0;
    total += static_cast<double>(c) / static_cast<double>(result.k);
  }
  return total / static_cast<double>(result.lists.size());
}

std::optional<double> fairness_f(double p_r, double p_d) {
  if (p_d <= 0) return std::nullopt;
  return 1.0 - std::abs(p_r - p_d) / p_d;
}

std::optional<double> fairness_f(const RankingResult& result, const IndicatorMatrix& indicator) {
  return fairness_f(mean_incomplete_exposure(result, indicator), incomplete_share(indicator));
}

double fairness_f_fuse(double f, double precision) {
  const double fc = std::clamp(f, 0.0, 1.0);
  if (fc + precision == 0) return 0;
  return 2 * fc * precision / (fc + precision);
}

ExposureCounts exposure_counts(const RankingResult& result, const IndicatorMatrix& indicator) {
  ExposureCounts e;
  e.per_item.assign(indicator.n_items(), 0);
  for (const auto& l : result.lists) {
    for (auto i : l.items) {
      ++e.per_item.at(i);
      if (indicator.incomplete(i))
        ++e.incomplete_total;
      else
        ++e.complete_total;
    }
  }
  return e;
}

std::size_t suppressed_items(const ExposureCounts& reference, const ExposureCounts& current) {
  if (reference.per_item.size() != current.per_item.size()) throw std::invalid_argument("exposure tables differ in size");
  std::size_t n = 0;
  for (std::size_t i = 0; i < current.per_item.size(); ++i) n += current.per_item[i] < reference.per_item[i] ? 1 : 0;
  return n;
}

double t_critical_5pct(std::size_t df) {
  static constexpr double kTable[] = {12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228,
                                      2.201,  2.179, 2.160, 2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086,
                                      2.080,  2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042};
  if (df == 0) throw std::invalid_argument("t distribution needs df >= 1");
  return df <= 30 ? kTable[df - 1] : 1.960;
}

TTestResult paired_ttest(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("paired samples differ in length");
  if (a.size() < 2) throw std::invalid_argument("paired t-test needs at least two pairs");
  const double n = static_cast<double>(a.size());
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / n;
  double ss = 0;
  for (double x : d) ss += (x - mean) * (x - mean);
  TTestResult r;
  r.df = a.size() - 1;
  const double sd = std::sqrt(ss / (n - 1));
  if (sd == 0) {
    if (mean == 0) {
      r.t = 0;
      r.significant = false;
    } else {
      r.t = mean > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
    }
    return r;
  }
  r.t = mean / (sd / std::sqrt(n));
  r.significant = std::abs(r.t) > t_critical_5pct(r.df);
  return r;
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> o(x.size());
  std::iota(o.begin(), o.end(), 0);
  std::stable_sort(o.begin(), o.end(), [&](auto a, auto b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < o.size();) {
    std::size_t j = i;
    while (j + 1 < o.size() && x[o[j + 1]] == x[o[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[o[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman_rho(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("spearman needs two equal samples of size >= 2");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0;
  return sxy / std::sqrt(sxx * syy);
}

MetricReport evaluate_scores(const Tensor& scores, const DatasetBundle& bundle, const InteractionIndex& index,
                             Split split, const std::vector<std::size_t>& ks) {
  if (ks.empty()) throw std::invalid_argument("no K values to evaluate");
  const auto users = users_with_positives(index, split);
  MetricReport rep;
  rep.users_evaluated = users.size();
  rep.incomplete_share = incomplete_share(bundle.indicator);
  for (std::size_t k : ks) {
    RankingResult r = rank_topk(scores, index, k, users);
    AccuracyMetrics acc = accuracy_metrics(r, index, split);
    MetricsAtK m;
    m.recall = acc.recall;
    m.precision = acc.precision;
    m.ndcg = acc.ndcg;
    m.incomplete_exposure = mean_incomplete_exposure(r, bundle.indicator);
    m.f = fairness_f(m.incomplete_exposure, rep.incomplete_share);
    m.f_fuse = m.f ? fairness_f_fuse(*m.f, m.precision) : 0.0;
    rep.at_k[k] = m;
    if (k == ks.back()) {
      ExposureCounts e = exposure_counts(r, bundle.indicator);
      rep.exposure_k = k;
      rep.complete_exposure = e.complete_total;
      rep.incomplete_exposure = e.incomplete_total;
    }
  }
  return rep;
}

nlohmann::json report_to_json(const MetricReport& r) {
  nlohmann::json j;
  j["variant"] = r.variant;
  j["seed"] = r.seed;
  j["config_hash"] = r.config_hash;
  j["users_evaluated"] = r.users_evaluated;
  j["incomplete_share"] = r.incomplete_share;
  nlohmann::json ks = nlohmann::json::object();
  for (const auto& [k, m] : r.at_k) {
    nlohmann::json e;
    e["recall"] = m.recall;
    e["precision"] = m.precision;
    e["ndcg"] = m.ndcg;
    e["f"] = m.f ? nlohmann::json(*m.f) : nlohmann::json(nullptr);
    e["f_fuse"] = m.f_fuse;
    e["incomplete_exposure"] = m.incomplete_exposure;
    ks[std::to_string(k)] = e;
  }
  j["at_k"] = ks;
  j["exposure"] = {{"k", r.exposure_k}, {"complete", r.complete_exposure}, {"incomplete", r.incomplete_exposure}};
  j["imputation_mse"] = r.imputation_mse ? nlohmann::json(*r.imputation_mse) : nlohmann::json(nullptr);
  return j;
}

MetricReport report_from_json(const nlohmann::json& j) {
  MetricReport r;
  r.variant = j.at("variant").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.config_hash = j.at("config_hash").get<std::string>();
  r.users_evaluated = j.at("users_evaluated").get<std::size_t>();
  r.incomplete_share = j.at("incomplete_share").get<double>();
  for (const auto& [key, e] : j.at("at_k").items()) {
    MetricsAtK m;
    m.recall = e.at("recall").get<double>();
    m.precision = e.at("precision").get<double>();
    m.ndcg = e.at("ndcg").get<double>();
    if (!e.at("f").is_null()) m.f = e.at("f").get<double>();
    m.f_fuse = e.at("f_fuse").get<double>();
    m.incomplete_exposure = e.at("incomplete_exposure").get<double>();
    r.at_k[std::stoul(key)] = m;
  }
  const auto& ex = j.at("exposure");
  r.exposure_k = ex.at("k").get<std::size_t>();
  r.complete_exposure = ex.at("complete").get<std::size_t>();
  r.incomplete_exposure = ex.at("incomplete").get<std::size_t>();
  if (j.contains("imputation_mse") && !j.at("imputation_mse").is_null()) r.imputation_mse = j.at("imputation_mse").get<double>();
  return r;
}

nlohmann::json timings_to_json(const MetricReport& r) { return {{"epoch_seconds", r.epoch_seconds}}; }

std::string report_to_csv(const MetricReport& r) {
  std::ostringstream head, row;
  head << "variant,seed";
  row << r.variant << ',' << r.seed;
  row.precision(17);
  for (const auto& [k, m] : r.at_k) {
    head << ",Recall@" << k << ",Precision@" << k << ",NDCG@" << k << ",F@" << k << ",F_fuse@" << k;
    row << ',' << m.recall << ',' << m.precision << ',' << m.ndcg << ',';
    if (m.f) row << *m.f;
    row << ',' << m.f_fuse;
  }
  return head.str() + "\n" + row.str() + "\n";
}

}  // namespace modicf
