#include "tlens/suite.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

namespace tlens {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

const char* to_string(Analysis a) {
  switch (a) {
    case Analysis::LogitLens: return "logit-lens";
    case Analysis::TokenLens: return "token-lens";
    case Analysis::Knockout: return "knockout";
    case Analysis::Trace: return "trace";
    case Analysis::Heads: return "heads";
  }
  return "?";
}

std::set<Analysis> parse_analyses(const std::string& names) {
  std::set<Analysis> out;
  std::stringstream ss(names);
  std::string name;
  const Analysis all[] = {Analysis::LogitLens, Analysis::TokenLens, Analysis::Knockout, Analysis::Trace,
                          Analysis::Heads};
  while (std::getline(ss, name, ',')) {
    if (name.empty() || name == "none") continue;
    if (name == "all") {
      out.insert(std::begin(all), std::end(all));
      continue;
    }
    auto it = std::find_if(std::begin(all), std::end(all), [&](Analysis a) { return name == to_string(a); });
    if (it == std::end(all)) throw Error(ErrorKind::Config, "unknown analysis '" + name + "'");
    out.insert(*it);
  }
  return out;
}

const char* to_string(AggregationMode m) { return m == AggregationMode::Mean ? "mean" : "median"; }

AggregationMode parse_aggregation(const std::string& s) {
  if (s == "mean") return AggregationMode::Mean;
  if (s == "median") return AggregationMode::Median;
  throw Error(ErrorKind::Config, "aggregation must be mean or median");
}

template <typename Scalar>
LayerLogitSeries<Scalar> aggregate_series(std::span<const LayerLogitSeries<Scalar>> series, AggregationMode mode) {
  if (series.empty()) throw Error(ErrorKind::EmptyCohort, "aggregate_series needs at least one series");
  const auto& first = series.front();
  for (const auto& s : series) {
    bool same = s.values.rows() == first.values.rows() && s.values.cols() == first.values.cols() &&
                s.tracked.size() == first.tracked.size() && s.kind == first.kind;
    for (std::size_t j = 0; same && j < s.tracked.size(); ++j) same = s.tracked[j].label == first.tracked[j].label;
    if (!same) throw Error(ErrorKind::Incompatible, "aggregate_series: grids are not congruent");
  }
  LayerLogitSeries<Scalar> out = first;
  out.instance = -1;
  out.cohort = static_cast<int>(series.size());
  out.aggregation = to_string(mode);
  if (mode == AggregationMode::Mean) {
    // Sum in a fixed order, then divide once.
    out.values.setZero();
    for (const auto& s : series) out.values += s.values;
    out.values /= static_cast<Scalar>(series.size());
    return out;
  }
  std::vector<Scalar> cell(series.size());
  for (Eigen::Index r = 0; r < out.values.rows(); ++r) {
    for (Eigen::Index c = 0; c < out.values.cols(); ++c) {
      for (std::size_t i = 0; i < series.size(); ++i) cell[i] = series[i].values(r, c);
      std::sort(cell.begin(), cell.end());
      const std::size_t n = cell.size();
      out.values(r, c) = n % 2 ? cell[n / 2] : (cell[n / 2 - 1] + cell[n / 2]) / Scalar(2);
    }
  }
  return out;
}

std::vector<TrackedToken> tracked_tokens(const SynthWorld& world, const QueryInstance& q) {
  std::vector<TrackedToken> t;
  t.push_back({"subject", q.prompt.at(static_cast<std::size_t>(q.subject_positions.at(0)))});
  const auto full = q.full_sequence();
  for (std::size_t i = 0; i < q.eval.answers.size(); ++i)
    t.push_back({"answer_" + std::to_string(i + 1), full.at(static_cast<std::size_t>(q.eval.answers[i].begin))});
  (void)world;
  return t;
}

std::string format_value(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

namespace {

struct TraceRecord {
  std::string corrupted;  // span label: subject, answer_1, ...
  int step = 0;
  TracingGrid<float> grid;
  std::vector<std::string> roles;
};

struct InstanceResult {
  std::vector<LayerLogitSeries<float>> series;
  std::vector<TraceRecord> traces;
  std::vector<HeadFunctionGrid> heads;  // one per step
};

std::vector<int> range(int begin, int end) {
  std::vector<int> r;
  for (int i = begin; i < end; ++i) r.push_back(i);
  return r;
}

std::string position_role(const QueryInstance& q, int step, int pos, int len) {
  if (pos == len - 1) return "last_token";
  if (std::find(q.subject_positions.begin(), q.subject_positions.end(), pos) != q.subject_positions.end())
    return "subject";
  for (int j = 1; j < step; ++j) {
    const auto& a = q.eval.answers[static_cast<std::size_t>(j - 1)];
    if (pos >= a.begin && pos < a.end) return "answer_" + std::to_string(j);
  }
  return pos == 0 ? "bos" : "context";
}

InstanceResult analyze_instance(const RunConfig& cfg, const WeightSet<float>& w, const SynthWorld& world,
                                const QueryInstance& q, double noise) {
  InstanceResult res;
  const auto tracked = tracked_tokens(world, q);
  const int n = world.config.n_answers;
  for (int step = 1; step <= n; ++step) {
    const auto input = build_step_input(q, step);
    const int T = static_cast<int>(input.size());
    const auto clean = forward(w, input);

    std::vector<TokenSpanSet> spans{TokenSpanSet::subject(q.subject_positions)};
    for (int j = 1; j < step; ++j) {
      const auto& a = q.eval.answers[static_cast<std::size_t>(j - 1)];
      spans.push_back(TokenSpanSet::answer_span(j, range(a.begin, a.end)));
    }
    const std::size_t corruptible = spans.size();
    spans.push_back(TokenSpanSet::last_token(T));

    auto tag = [&](LayerLogitSeries<float> s, const std::string& name) {
      s.analysis = name;
      s.instance = q.id;
      s.step = step;
      res.series.push_back(std::move(s));
    };
    if (cfg.analyses.count(Analysis::LogitLens)) {
      tag(component_logit_series(clean, w, Component::AttentionOut, tracked), "logit_lens_attn");
      tag(component_logit_series(clean, w, Component::MlpOut, tracked), "logit_lens_mlp");
    }
    if (cfg.analyses.count(Analysis::TokenLens))
      for (const auto& span : spans) tag(token_lens_series(clean, w, span, tracked), "token_lens_" + span.label());
    if (cfg.analyses.count(Analysis::Knockout)) {
      for (const auto& span : spans) {
        KnockoutSpec spec{span, {}, -1, cfg.renormalize_knockout};
        const auto knocked = knockout_forward(w, input, spec);
        tag(mlp_logit_diff(clean, knocked, w, tracked), "knockout_" + span.label());
      }
    }
    if (cfg.analyses.count(Analysis::Trace)) {
      const int target = tracked.at(static_cast<std::size_t>(step)).id;
      std::vector<std::string> roles;
      for (int p = 0; p < T; ++p) roles.push_back(position_role(q, step, p, T));
      for (std::size_t s = 0; s < corruptible; ++s) {
        const CorruptionSpec corruption{spans[s], noise, cfg.noise_seed};
        for (auto comp : {Component::AttentionOut, Component::MlpOut}) {
          res.traces.push_back({spans[s].label(), step,
                                causal_trace_grid(w, input, corruption, comp, target, clean,
                                                  TracingOptions{cfg.trace_seeds, cfg.trace_window}),
                                roles});
        }
      }
    }
    if (cfg.analyses.count(Analysis::Heads)) res.heads.push_back(classify_heads(clean, w, tracked, cfg.stats_mode));
  }
  return res;
}

void write_series_row(std::ostream& os, const LayerLogitSeries<float>& s, const std::string& instance) {
  for (Eigen::Index l = 0; l < s.values.rows(); ++l)
    for (std::size_t j = 0; j < s.tracked.size(); ++j)
      os << s.analysis << ',' << instance << ',' << s.step << ',' << l << ',' << s.tracked[j].label << ','
         << s.tracked[j].id << ',' << to_string(s.kind) << ','
         << format_value(s.values(l, static_cast<Eigen::Index>(j))) << '\n';
}

std::ofstream open_csv(const std::string& path, const char* header) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorKind::Io, "cannot open " + path + " for writing");
  os << header << '\n';
  return os;
}

}  // namespace

AnalysisReport run_suite(const RunConfig& cfg) {
  if (cfg.out_dir.empty()) throw Error(ErrorKind::Config, "output directory is required");
  for (const auto& p : {cfg.world_path, cfg.weights_path})
    if (!fs::exists(p)) throw Error(ErrorKind::Config, "input file '" + p + "' does not exist");
  if (cfg.workers < 1 || cfg.trace_seeds < 1 || cfg.trace_window < 1)
    throw Error(ErrorKind::Config, "workers, trace seeds and trace window must be >= 1");
  fs::create_directories(cfg.out_dir);

  const SynthWorld world = load_world(cfg.world_path);
  const WeightSet<float> w = load_weights(cfg.weights_path);
  if (w.config.vocab < world.vocab.size())
    throw Error(ErrorKind::Config, "weights have a smaller vocabulary than the world");
  const int n = world.config.n_answers;
  const int L = w.config.n_layers;

  const auto instances = evaluate_queries(w, world);
  std::vector<int> per_step_correct(static_cast<std::size_t>(n), 0);
  for (const auto& q : instances)
    for (int i = 0; i < n; ++i)
      per_step_correct[static_cast<std::size_t>(i)] += q.eval.verdicts[static_cast<std::size_t>(i)] == StepVerdict::Correct;
  std::vector<const QueryInstance*> cohort;
  for (const auto& q : instances)
    if (q.eval.correct) cohort.push_back(&q);
  const std::size_t correct_count = cohort.size();
  const double accuracy = exact_match_accuracy(instances);
  if (cohort.empty())
    throw Error(ErrorKind::EmptyCohort,
                "no correct instances (exact-match accuracy " + format_value(accuracy) + " over " +
                    std::to_string(instances.size()) + " queries)");
  if (cfg.max_instances > 0 && cohort.size() > static_cast<std::size_t>(cfg.max_instances))
    cohort.resize(static_cast<std::size_t>(cfg.max_instances));
  save_instances((fs::path(cfg.out_dir) / "instances.jsonl").string(), instances);

  const double noise = cfg.noise >= 0 ? cfg.noise : default_noise_scale(w);
  std::vector<InstanceResult> results(cohort.size());
  if (!cfg.analyses.empty()) {
    std::atomic<std::size_t> next{0};
    std::vector<std::string> errors(static_cast<std::size_t>(cfg.workers));
    auto work = [&](int id) {
      try {
        for (std::size_t i = next++; i < cohort.size(); i = next++)
          results[i] = analyze_instance(cfg, w, world, *cohort[i], noise);
      } catch (const std::exception& e) {
        errors[static_cast<std::size_t>(id)] = e.what();
        next = cohort.size();
      }
    };
    if (cfg.workers == 1) {
      work(0);
    } else {
      std::vector<std::thread> threads;
      for (int t = 0; t < cfg.workers; ++t) threads.emplace_back(work, t);
      for (auto& t : threads) t.join();
    }
    for (const auto& e : errors)
      if (!e.empty()) throw Error(ErrorKind::NumericDomain, "analysis failed: " + e);
  }

  AnalysisReport report;
  const auto out = [&](const std::string& name) { return (fs::path(cfg.out_dir) / name).string(); };

  // Series files, one per analysis family.
  const std::vector<std::pair<Analysis, std::string>> families{
      {Analysis::LogitLens, "logit_lens"}, {Analysis::TokenLens, "token_lens"}, {Analysis::Knockout, "knockout"}};
  for (const auto& [analysis, family] : families) {
    if (!cfg.analyses.count(analysis)) continue;
    CsvDeclaration decl{out("series_" + family + ".csv"), "series", 0, L, n + 1, 0};
    auto os = open_csv(decl.path, kSeriesHeader);
    std::map<std::pair<int, std::string>, std::vector<LayerLogitSeries<float>>> groups;
    std::vector<std::pair<int, std::string>> group_order;
    for (const auto& r : results) {
      for (const auto& s : r.series) {
        if (!s.analysis.starts_with(family)) continue;
        write_series_row(os, s, std::to_string(s.instance));
        ++decl.groups;
        auto key = std::make_pair(s.step, s.analysis);
        if (!groups.count(key)) group_order.push_back(key);
        groups[key].push_back(s);
      }
    }
    std::sort(group_order.begin(), group_order.end());
    for (const auto& key : group_order) {
      const auto& list = groups[key];
      const auto agg = aggregate_series<float>(list, cfg.aggregation);
      write_series_row(os, agg, to_string(cfg.aggregation));
      ++decl.groups;
    }
    decl.rows = decl.groups * decl.layers * decl.tracked;
    report.csvs.push_back(decl);
  }

  if (cfg.analyses.count(Analysis::Trace)) {
    std::map<std::string, std::ofstream> files;
    std::map<std::string, CsvDeclaration> decls;
    for (std::size_t i = 0; i < results.size(); ++i) {
      for (const auto& t : results[i].traces) {
        if (!files.count(t.corrupted)) {
          const std::string path = out("tracing_" + t.corrupted + ".csv");
          files.emplace(t.corrupted, open_csv(path, kTracingHeader));
          decls[t.corrupted] = CsvDeclaration{path, "tracing", 0, L, 0, 0};
        }
        auto& os = files[t.corrupted];
        auto& decl = decls[t.corrupted];
        for (Eigen::Index l = 0; l < t.grid.values.rows(); ++l)
          for (Eigen::Index p = 0; p < t.grid.values.cols(); ++p)
            os << to_string(t.grid.component) << ',' << cohort[i]->id << ',' << t.step << ',' << l << ',' << p << ','
               << t.roles[static_cast<std::size_t>(p)] << ',' << t.grid.target << ','
               << format_value(t.grid.values(l, p)) << '\n';
        decl.rows += t.grid.values.size();
        ++decl.groups;
      }
    }
    for (auto& [k, d] : decls) report.csvs.push_back(d);
  }

  if (cfg.analyses.count(Analysis::Heads)) {
    CsvDeclaration decl{out("heads.csv"), "heads", 0, L, 0, n};
    auto os = open_csv(decl.path, kHeadsHeader);
    for (int step = 1; step <= n; ++step) {
      std::vector<HeadFunctionGrid> grids;
      for (const auto& r : results) grids.push_back(r.heads.at(static_cast<std::size_t>(step - 1)));
      const auto table = aggregate_rates(grids);
      for (int l = 0; l < table.n_layers; ++l)
        for (int h = 0; h < table.n_heads; ++h)
          os << l << ',' << h << ',' << step << ',' << format_value(table.promotion_rate(l, h)) << ','
             << format_value(table.suppression_rate(l, h)) << ',' << table.instances << '\n';
      decl.rows += table.n_layers * table.n_heads;
    }
    decl.tracked = w.config.n_heads;
    report.csvs.push_back(decl);
  }

  json summary;
  summary["tool"] = "tlens-workbench";
  summary["version"] = "1.0.0";
  summary["queries"] = instances.size();
  summary["exact_match_accuracy"] = accuracy;
  summary["correct_cohort"] = correct_count;
  summary["analyzed_instances"] = cohort.size();
  summary["per_step_correct"] = per_step_correct;
  summary["n_answers"] = n;
  summary["aggregation"] = to_string(cfg.aggregation);
  summary["aggregation_level"] = "per-instance series averaged arithmetically within this run, per (analysis, step)";
  summary["head_stats_mode"] = to_string(cfg.stats_mode);
  summary["span_extents"] = "entity tokens only; step markers and separators are excluded";
  json analyses = json::array();
  for (auto a : cfg.analyses) analyses.push_back(to_string(a));
  summary["config"] = {{"world", cfg.world_path},
                       {"weights", cfg.weights_path},
                       {"out_dir", cfg.out_dir},
                       {"analyses", analyses},
                       {"max_instances", cfg.max_instances},
                       {"knockout_renormalize", cfg.renormalize_knockout},
                       {"noise", noise},
                       {"noise_seed", cfg.noise_seed},
                       {"trace_seeds", cfg.trace_seeds},
                       {"trace_window", cfg.trace_window},
                       {"workers", cfg.workers}};
  json csvs = json::array();
  for (const auto& d : report.csvs)
    csvs.push_back({{"path", fs::path(d.path).filename().string()},
                    {"schema", d.schema},
                    {"rows", d.rows},
                    {"layers", d.layers},
                    {"tracked", d.tracked},
                    {"groups", d.groups}});
  summary["csvs"] = csvs;
  report.summary_json = summary.dump(2);
  report.summary_path = out("summary.json");
  std::ofstream os(report.summary_path);
  if (!os) throw Error(ErrorKind::Io, "cannot write " + report.summary_path);
  os << report.summary_json << '\n';
  return report;
}

std::string render_report(const std::string& out_dir) {
  const auto summary_path = fs::path(out_dir) / "summary.json";
  std::ifstream is(summary_path);
  if (!is) throw Error(ErrorKind::Config, "no summary.json in " + out_dir);
  json s;
  try {
    s = json::parse(is);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Format, summary_path.string() + ": " + e.what());
  }
  std::ostringstream r;
  r << "queries: " << s.at("queries") << "  exact-match accuracy: " << format_value(s.at("exact_match_accuracy"))
    << "\ncorrect cohort: " << s.at("correct_cohort") << "  analyzed: " << s.at("analyzed_instances")
    << "\nper-step correct: " << s.at("per_step_correct").dump() << "\naggregation: " << s.at("aggregation").get<std::string>()
    << "  head stats: " << s.at("head_stats_mode").get<std::string>() << "\n";
  const std::string agg = s.at("aggregation");
  for (const auto& d : s.at("csvs")) {
    r << "\n" << d.at("path").get<std::string>() << " (" << d.at("rows") << " rows)\n";
    if (d.at("schema") != "series") continue;
    // Aggregated rows only: analysis/step -> layer x role table.
    std::ifstream csv(fs::path(out_dir) / d.at("path").get<std::string>());
    std::string line;
    std::getline(csv, line);
    std::map<std::string, std::map<int, std::map<std::string, std::string>>> table;
    std::map<std::string, std::vector<std::string>> roles;
    while (std::getline(csv, line)) {
      std::vector<std::string> f;
      std::stringstream ls(line);
      std::string cell;
      while (std::getline(ls, cell, ',')) f.push_back(cell);
      if (f.size() != 8 || f[1] != agg) continue;
      const std::string key = f[0] + " step " + f[2];
      auto& rl = roles[key];
      if (std::find(rl.begin(), rl.end(), f[4]) == rl.end()) rl.push_back(f[4]);
      table[key][std::stoi(f[3])][f[4]] = f[7];
    }
    for (const auto& [key, layers] : table) {
      r << "  " << key << "\n    layer";
      for (const auto& role : roles[key]) r << '\t' << role;
      r << '\n';
      for (const auto& [layer, cells] : layers) {
        r << "    " << layer;
        for (const auto& role : roles[key]) r << '\t' << cells.at(role);
        r << '\n';
      }
    }
  }
  return r.str();
}

template LayerLogitSeries<float> aggregate_series<float>(std::span<const LayerLogitSeries<float>>, AggregationMode);
template LayerLogitSeries<double> aggregate_series<double>(std::span<const LayerLogitSeries<double>>,
                                                           AggregationMode);

}  // namespace tlens
