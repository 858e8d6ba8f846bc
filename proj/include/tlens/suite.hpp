#pragma once

#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "tlens/interventions.hpp"
#include "tlens/lens.hpp"
#include "tlens/taxonomy.hpp"
#include "tlens/world.hpp"

namespace tlens {

enum class Analysis { LogitLens, TokenLens, Knockout, Trace, Heads };
const char* to_string(Analysis a);
/// Parses one of logit-lens|token-lens|knockout|trace|heads|all.
std::set<Analysis> parse_analyses(const std::string& names);

enum class AggregationMode { Mean, Median };
const char* to_string(AggregationMode m);
AggregationMode parse_aggregation(const std::string& s);

struct RunConfig {
  std::string world_path;
  std::string weights_path;
  std::string out_dir;
  std::set<Analysis> analyses;
  int max_instances = 0;  // 0: the whole correct cohort
  AggregationMode aggregation = AggregationMode::Mean;
  StatsMode stats_mode = StatsMode::PerToken;
  bool renormalize_knockout = false;
  double noise = -1.0;  // < 0: 3x the embedding standard deviation
  std::uint64_t noise_seed = 1234;
  int trace_seeds = 3;
  int trace_window = 1;
  int workers = 1;
};

struct CsvDeclaration {
  std::string path;
  std::string schema;  // series | tracing | heads
  long rows = 0;
  long layers = 0;
  long tracked = 0;  // tracked tokens (series), positions are per-instance (tracing)
  long groups = 0;   // cohort dimension: row groups of layers x tracked
};

struct AnalysisReport {
  std::vector<CsvDeclaration> csvs;
  std::string summary_path;
  std::string summary_json;
};

inline constexpr const char* kSeriesHeader = "analysis,instance,step,layer,token_role,token_id,value_kind,value";
inline constexpr const char* kTracingHeader =
    "component,instance,step,layer,position,position_role,target_id,prob_diff";
inline constexpr const char* kHeadsHeader = "layer,head,step,promotion_rate,suppression_rate,n_instances";

/// Elementwise mean or median of congruent series.
template <typename Scalar>
LayerLogitSeries<Scalar> aggregate_series(std::span<const LayerLogitSeries<Scalar>> series, AggregationMode mode);

/// The tracked tokens for an instance: the first token of the subject and of
/// every generated answer.
std::vector<TrackedToken> tracked_tokens(const SynthWorld& world, const QueryInstance& instance);

/// Decimal with 6 significant digits.
std::string format_value(double v);

/// Greedy-decodes every query, keeps the all-correct cohort, runs the selected
/// analyses at each answer step and writes CSVs plus summary.json.
AnalysisReport run_suite(const RunConfig& config);

/// Human-readable digest of a finished run directory.
std::string render_report(const std::string& out_dir);

}  // namespace tlens
