// workbench: command-line front end for world generation, training,
// evaluation and the analysis suites.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tlens/suite.hpp"
#include "tlens/trainer.hpp"

using namespace tlens;

namespace {

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::EmptyCohort: return 3;
    case ErrorKind::NumericDomain:
    case ErrorKind::Divergence:
    case ErrorKind::DegenerateMask: return 4;
    default: return 2;
  }
}

// Turns `key = value` lines into `--key=value` arguments. Blank lines and
// lines starting with '#' are skipped.
std::vector<std::string> config_arguments(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorKind::Config, "cannot read config file " + path);
  std::vector<std::string> args;
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(is, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw Error(ErrorKind::Config, path + ":" + std::to_string(lineno) + ": expected key = value");
    args.push_back("--" + trim(line.substr(0, eq)) + "=" + trim(line.substr(eq + 1)));
  }
  return args;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Interpretability workbench for a toy knowledge-recall transformer"};
  app.require_subcommand(1);
  app.fallthrough();
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  std::string config_path;
  app.add_option("--config", config_path,
                 "key = value file; its values override command-line flags of the chosen subcommand");

  // gen-world
  WorldConfig wc;
  std::string world_out, vocab_out;
  auto* gen = app.add_subcommand("gen-world", "Generate a synthetic one-to-many world");
  gen->add_option("--out", world_out, "World file (JSONL)")->required();
  gen->add_option("--vocab-out", vocab_out, "Also write the vocabulary, one token per line");
  gen->add_option("--subjects", wc.n_subjects, "Number of subjects")->capture_default_str();
  gen->add_option("--relations", wc.n_relations, "Number of relations")->capture_default_str();
  gen->add_option("--objects-per-fact", wc.objects_per_fact, "Gold objects per fact")->capture_default_str();
  gen->add_option("--answers", wc.n_answers, "Answers requested per query")->capture_default_str();
  gen->add_option("--object-pool", wc.object_pool, "Distinct objects")->capture_default_str();
  gen->add_option("--suffix-pool", wc.suffix_pool, "Shared suffix tokens")->capture_default_str();
  gen->add_option("--two-token-fraction", wc.two_token_fraction, "Fraction of two-token entities")
      ->capture_default_str();
  gen->add_option("--max-vocab", wc.max_vocab, "Vocabulary budget")->capture_default_str();
  gen->add_option("--seed", wc.seed, "World seed")->capture_default_str();

  // train
  ModelConfig mc;
  TrainConfig tc;
  std::string train_world, weights_out, log_out;
  std::uint64_t init_seed = kDefaultInitSeed, corpus_seed = kDefaultCorpusSeed;
  int docs_per_fact = kDefaultDocsPerFact;
  auto* tr = app.add_subcommand("train", "Train the model on a world");
  tr->add_option("--world", train_world, "World file")->required()->check(CLI::ExistingFile);
  tr->add_option("--out", weights_out, "Weight file; .json manifest and .opt optimizer state are written beside it")
      ->required();
  tr->add_option("--log", log_out, "Training log CSV");
  tr->add_option("--layers", mc.n_layers)->capture_default_str();
  tr->add_option("--heads", mc.n_heads)->capture_default_str();
  tr->add_option("--d-model", mc.d_model)->capture_default_str();
  auto* d_head_opt = tr->add_option("--d-head", mc.d_head, "Head width, d-model / heads when omitted");
  tr->add_option("--d-mlp", mc.d_mlp)->capture_default_str();
  tr->add_option("--ctx", mc.ctx)->capture_default_str();
  tr->add_option("--lr", tc.lr)->capture_default_str();
  tr->add_option("--beta1", tc.beta1)->capture_default_str();
  tr->add_option("--beta2", tc.beta2)->capture_default_str();
  tr->add_option("--adam-eps", tc.eps)->capture_default_str();
  tr->add_option("--batch", tc.batch)->capture_default_str();
  tr->add_option("--steps", tc.steps)->capture_default_str();
  tr->add_option("--seed", tc.seed, "Batch sampling seed")->capture_default_str();
  tr->add_option("--init-seed", init_seed, "Weight initialization seed")->capture_default_str();
  tr->add_option("--corpus-seed", corpus_seed)->capture_default_str();
  tr->add_option("--docs-per-fact", docs_per_fact, "Rendered documents per fact")->capture_default_str();
  tr->add_option("--eval-every", tc.eval_every, "Exact-match evaluation cadence, 0 disables")->capture_default_str();
  tr->add_option("--stop-accuracy", tc.stop_accuracy, "Stop once an evaluation reaches this accuracy")
      ->capture_default_str();
  tr->add_option("--workers", tc.workers, "Gradient shards")->capture_default_str();

  // eval
  std::string eval_world, eval_weights, eval_out;
  auto* ev = app.add_subcommand("eval", "Greedy-decode every query and score it");
  ev->add_option("--world", eval_world)->required()->check(CLI::ExistingFile);
  ev->add_option("--weights", eval_weights)->required()->check(CLI::ExistingFile);
  ev->add_option("--out", eval_out, "Instances file (JSONL)");

  // analyze
  RunConfig rc;
  std::string suite = "all", aggregation = "mean";
  bool pooled = false;
  auto* an = app.add_subcommand("analyze", "Run analysis suites over the correct cohort");
  an->add_option("--world", rc.world_path)->required();
  an->add_option("--weights", rc.weights_path)->required();
  an->add_option("--out", rc.out_dir, "Output directory")->required();
  an->add_option("--suite", suite, "Comma list of logit-lens,token-lens,knockout,trace,heads,all or none")
      ->capture_default_str();
  an->add_option("--max-instances", rc.max_instances, "Limit the cohort, 0 keeps all")->capture_default_str();
  an->add_option("--aggregation", aggregation, "mean or median")->capture_default_str();
  an->add_flag("--pooled-stats", pooled, "Pool head statistics across tracked tokens");
  an->add_flag("--renormalize-knockout", rc.renormalize_knockout, "Renormalize attention rows after knockout");
  an->add_option("--noise", rc.noise, "Corruption noise std, negative means 3x embedding std")
      ->capture_default_str();
  an->add_option("--noise-seed", rc.noise_seed)->capture_default_str();
  an->add_option("--trace-seeds", rc.trace_seeds, "Corruption draws averaged per tracing cell")->capture_default_str();
  an->add_option("--trace-window", rc.trace_window, "Layers restored together")->capture_default_str();
  an->add_option("--workers", rc.workers, "Parallel instances")->capture_default_str();

  // report
  std::string report_dir;
  auto* rep = app.add_subcommand("report", "Summarize a finished analysis directory");
  rep->add_option("--in", report_dir)->required();

  try {
    std::vector<std::string> args;
    for (int i = argc - 1; i >= 1; --i) args.emplace_back(argv[i]);
    for (std::size_t i = 0; i < args.size(); ++i) {
      const std::string& a = args[i];
      if (a.rfind("--config=", 0) == 0) {
        config_path = a.substr(9);
      } else if (a == "--config" && i > 0) {
        config_path = args[i - 1];
      }
    }
    if (!config_path.empty()) {
      // CLI11 parses a reversed vector; appended values come last and win.
      auto extra = config_arguments(config_path);
      args.insert(args.begin(), extra.rbegin(), extra.rend());
    }
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int rc_cli = app.exit(e);
    return rc_cli == 0 ? 0 : 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  }

  try {
    if (*gen) {
      const auto world = build_world(wc);
      save_world(world_out, world);
      if (!vocab_out.empty()) save_vocabulary(vocab_out, world.vocab);
      std::printf("world: %zu facts, vocabulary %d -> %s\n", world.facts.size(), world.vocab.size(),
                  world_out.c_str());
    } else if (*tr) {
      const auto world = load_world(train_world);
      mc.vocab = world.vocab.size();
      if (d_head_opt->count() == 0 && mc.n_heads > 0) mc.d_head = mc.d_model / mc.n_heads;
      const auto corpus = render_corpus(world, docs_per_fact, corpus_seed);
      std::ofstream log;
      if (!log_out.empty()) {
        log.open(log_out);
        if (!log) throw Error(ErrorKind::Io, "cannot write " + log_out);
        log << "step,loss,accuracy,seconds\n";
      }
      auto progress = [&](const TrainLogEntry& e) {
        if (log) log << e.step << ',' << format_value(e.loss) << ',' << format_value(e.accuracy) << ','
                     << format_value(e.seconds) << '\n';
        if (e.accuracy >= 0)
          std::printf("step %d loss %.4f exact-match %.3f (%.0fs)\n", e.step, e.loss, e.accuracy, e.seconds);
      };
      try {
        const auto result = train(tc, mc, world, corpus, init_seed, progress);
        save_weights(weights_out, result.weights);
        write_weight_manifest(weights_out + ".json", result.weights);
        save_optimizer_state(weights_out + ".opt", result.optimizer);
      } catch (const DivergenceError& e) {
        save_weights(weights_out, e.last_good());
        write_weight_manifest(weights_out + ".json", e.last_good());
        std::cerr << "last good weights written to " << weights_out << '\n';
        throw;
      }
    } else if (*ev) {
      const auto world = load_world(eval_world);
      const auto weights = load_weights(eval_weights);
      const auto instances = evaluate_queries(weights, world);
      if (!eval_out.empty()) save_instances(eval_out, instances);
      std::vector<int> per_step(static_cast<std::size_t>(world.config.n_answers), 0);
      for (const auto& q : instances)
        for (std::size_t i = 0; i < per_step.size(); ++i) per_step[i] += q.eval.verdicts[i] == StepVerdict::Correct;
      std::printf("queries %zu  exact-match %s\n", instances.size(),
                  format_value(exact_match_accuracy(instances)).c_str());
      for (std::size_t i = 0; i < per_step.size(); ++i) std::printf("step %zu correct %d\n", i + 1, per_step[i]);
    } else if (*an) {
      rc.analyses = parse_analyses(suite);
      rc.aggregation = parse_aggregation(aggregation);
      rc.stats_mode = pooled ? StatsMode::Pooled : StatsMode::PerToken;
      const auto report = run_suite(rc);
      std::printf("%s\n", report.summary_path.c_str());
      for (const auto& c : report.csvs) std::printf("%s %ld rows\n", c.path.c_str(), c.rows);
    } else if (*rep) {
      std::cout << render_report(report_dir);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
