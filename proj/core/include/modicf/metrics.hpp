#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "modicf/dataset.hpp"

namespace modicf {

struct RankedList {
  std::uint32_t user = 0;
  std::vector<std::uint32_t> items;
  std::vector<Scalar> scores;
  friend bool operator==(const RankedList&, const RankedList&) = default;
};

struct RankingResult {
  std::size_t k = 0;
  std::vector<RankedList> lists;
  friend bool operator==(const RankingResult&, const RankingResult&) = default;
};

// Top-K per listed user over items outside the user's train positives, highest score
// first, ties to the lower item index. Throws if a user has fewer than K candidates.
RankingResult rank_topk(const Tensor& scores, const InteractionIndex& index, std::size_t k,
                        const std::vector<std::uint32_t>& users);
// Users with at least one positive in `split`.
std::vector<std::uint32_t> users_with_positives(const InteractionIndex& index, Split split);

struct AccuracyMetrics {
  double recall = 0;
  double precision = 0;
  double ndcg = 0;
  std::size_t users = 0;
};

// Macro averages over users with at least one positive in `split`; others are skipped.
AccuracyMetrics accuracy_metrics(const RankingResult& result, const InteractionIndex& index, Split split);

// Share of incomplete items in the dataset.
double incomplete_share(const IndicatorMatrix& indicator);
// Mean over lists of (#incomplete items in the list) / K.
double mean_incomplete_exposure(const RankingResult& result, const IndicatorMatrix& indicator);
// 1 - |P_r - P_d| / P_d; absent when P_d is 0.
std::optional<double> fairness_f(double p_r, double p_d);
std::optional<double> fairness_f(const RankingResult& result, const IndicatorMatrix& indicator);
// Harmonic mean of clamp(F, 0, 1) and precision; 0 when both are 0.
double fairness_f_fuse(double f, double precision);

struct ExposureCounts {
  std::vector<std::size_t> per_item;
  std::size_t complete_total = 0;
  std::size_t incomplete_total = 0;
  friend bool operator==(const ExposureCounts&, const ExposureCounts&) = default;
};
ExposureCounts exposure_counts(const RankingResult& result, const IndicatorMatrix& indicator);
// Items whose exposure in `current` is below their exposure in `reference`.
std::size_t suppressed_items(const ExposureCounts& reference, const ExposureCounts& current);

struct TTestResult {
  double t = 0;
  std::size_t df = 0;
  // Absent when the differences have zero variance but nonzero mean.
  std::optional<bool> significant;
};
// Two-sided 5% two-sample paired t-test.
TTestResult paired_ttest(const std::vector<double>& a, const std::vector<double>& b);
// Two-sided 5% critical value of Student's t (normal approximation beyond df 30).
double t_critical_5pct(std::size_t df);

double spearman_rho(const std::vector<double>& x, const std::vector<double>& y);

struct MetricsAtK {
  double recall = 0;
  double precision = 0;
  double ndcg = 0;
  std::optional<double> f;
  double f_fuse = 0;
  double incomplete_exposure = 0;  // P_r@K
};

struct MetricReport {
  std::string variant;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::size_t users_evaluated = 0;
  double incomplete_share = 0;  // P_d
  std::map<std::size_t, MetricsAtK> at_k;
  std::size_t exposure_k = 0;
  std::size_t complete_exposure = 0;
  std::size_t incomplete_exposure = 0;
  std::optional<double> imputation_mse;
  std::vector<double> epoch_seconds;
};

// Evaluates one score matrix on `split` at every K.
MetricReport evaluate_scores(const Tensor& scores, const DatasetBundle& bundle, const InteractionIndex& index,
                             Split split, const std::vector<std::size_t>& ks);

// Deterministic report body (everything except timings).
nlohmann::json report_to_json(const MetricReport& report);
MetricReport report_from_json(const nlohmann::json& j);
nlohmann::json timings_to_json(const MetricReport& report);
// Header plus one row: Recall/Precision/NDCG/F/F_fuse at every K.
std::string report_to_csv(const MetricReport& report);

}  // namespace modicf
