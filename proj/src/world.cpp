#include "tlens/world.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace tlens {

using json = nlohmann::ordered_json;

int Vocabulary::add(const std::string& word) {
  if (word.empty() || word.find_first_of(" \t\n\r") != std::string::npos)
    throw Error(ErrorKind::Config, "vocabulary words must be non-empty and whitespace-free");
  if (ids_.count(word)) throw Error(ErrorKind::Config, "duplicate vocabulary word " + word);
  const int id = size();
  words_.push_back(word);
  ids_.emplace(word, id);
  return id;
}

int Vocabulary::id(const std::string& word) const {
  auto it = ids_.find(word);
  if (it == ids_.end()) throw Error(ErrorKind::OutOfRange, "unknown word '" + word + "'");
  return it->second;
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || id >= size()) throw Error(ErrorKind::OutOfRange, "token id outside the vocabulary");
  return words_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::tokenize(std::string_view text) const {
  std::vector<int> out;
  std::istringstream is{std::string(text)};
  std::string w;
  while (is >> w) out.push_back(id(w));
  return out;
}

std::string Vocabulary::detokenize(std::span<const int> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += word(ids[i]);
  }
  return out;
}

std::vector<int> SynthWorld::prompt(const Fact& fact) const {
  std::vector<int> p{bos};
  const auto& s = subjects[static_cast<std::size_t>(fact.subject)].tokens;
  p.insert(p.end(), s.begin(), s.end());
  p.push_back(relations[static_cast<std::size_t>(fact.relation)]);
  p.push_back(colon);
  return p;
}

std::vector<int> SynthWorld::subject_positions(const Fact& fact) const {
  std::vector<int> pos;
  const auto n = subjects[static_cast<std::size_t>(fact.subject)].tokens.size();
  for (std::size_t i = 0; i < n; ++i) pos.push_back(1 + static_cast<int>(i));
  return pos;
}

std::vector<int> SynthWorld::render(const Fact& fact, std::span<const int> order) const {
  std::vector<int> doc = prompt(fact);
  for (std::size_t i = 0; i < order.size(); ++i) {
    doc.push_back(step_markers.at(i));
    const auto& o = objects[static_cast<std::size_t>(order[i])].tokens;
    doc.insert(doc.end(), o.begin(), o.end());
  }
  doc.push_back(eos);
  return doc;
}

int SynthWorld::marker_step(int token) const {
  for (std::size_t i = 0; i < step_markers.size(); ++i)
    if (step_markers[i] == token) return static_cast<int>(i) + 1;
  return 0;
}

namespace {

std::string numbered(char prefix, int i, int width) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%c%0*d", prefix, width, i);
  return buf;
}

// First `k` entries of a uniform random permutation of `items`.
std::vector<int> sample_without_replacement(std::vector<int> items, int k, Rng& rng) {
  for (int i = 0; i < k; ++i) {
    const auto j = static_cast<std::size_t>(i) + rng.below(items.size() - static_cast<std::size_t>(i));
    std::swap(items[static_cast<std::size_t>(i)], items[j]);
  }
  items.resize(static_cast<std::size_t>(k));
  return items;
}

}  // namespace

SynthWorld build_world(const WorldConfig& cfg) {
  if (cfg.n_answers < 1 || cfg.objects_per_fact < cfg.n_answers)
    throw Error(ErrorKind::Config, "need objects_per_fact >= n_answers >= 1");
  if (cfg.n_subjects < 1 || cfg.n_relations < 1 || cfg.suffix_pool < 1)
    throw Error(ErrorKind::Config, "world counts must be >= 1");
  if (cfg.object_pool < cfg.objects_per_fact)
    throw Error(ErrorKind::Config, "object pool smaller than objects_per_fact");
  const int needed = 3 + cfg.n_answers + cfg.n_relations + cfg.n_subjects + cfg.object_pool + cfg.suffix_pool;
  if (needed > cfg.max_vocab)
    throw Error(ErrorKind::Config, "vocabulary too small: requested counts need " + std::to_string(needed) +
                                       " words, budget is " + std::to_string(cfg.max_vocab));

  SynthWorld w;
  w.config = cfg;
  w.bos = w.vocab.add("<bos>");
  w.eos = w.vocab.add("<eos>");
  w.colon = w.vocab.add(":");
  for (int i = 1; i <= cfg.n_answers; ++i) w.step_markers.push_back(w.vocab.add(std::to_string(i) + "."));
  for (int r = 0; r < cfg.n_relations; ++r) w.relations.push_back(w.vocab.add(numbered('r', r, 2)));
  std::vector<int> suffixes;
  for (int i = 0; i < cfg.suffix_pool; ++i) suffixes.push_back(w.vocab.add(numbered('x', i, 2)));

  Rng rng(cfg.seed);
  auto make_entity = [&](int head) {
    Entity e{{head}};
    if (rng.uniform() < cfg.two_token_fraction) e.tokens.push_back(suffixes[rng.below(suffixes.size())]);
    return e;
  };
  for (int s = 0; s < cfg.n_subjects; ++s) w.subjects.push_back(make_entity(w.vocab.add(numbered('s', s, 3))));
  for (int o = 0; o < cfg.object_pool; ++o) w.objects.push_back(make_entity(w.vocab.add(numbered('o', o, 3))));

  std::vector<int> pool(static_cast<std::size_t>(cfg.object_pool));
  for (int i = 0; i < cfg.object_pool; ++i) pool[static_cast<std::size_t>(i)] = i;
  for (int s = 0; s < cfg.n_subjects; ++s) {
    for (int r = 0; r < cfg.n_relations; ++r) {
      Fact f{s, r, sample_without_replacement(pool, cfg.objects_per_fact, rng)};
      std::sort(f.objects.begin(), f.objects.end());
      w.facts.push_back(std::move(f));
    }
  }
  return w;
}

std::vector<std::vector<int>> render_corpus(const SynthWorld& world, int docs_per_fact, std::uint64_t seed) {
  if (docs_per_fact < 1) throw Error(ErrorKind::Config, "docs_per_fact must be >= 1");
  Rng rng(seed);
  std::vector<std::vector<int>> docs;
  docs.reserve(world.facts.size() * static_cast<std::size_t>(docs_per_fact));
  for (const auto& f : world.facts) {
    for (int d = 0; d < docs_per_fact; ++d) {
      const auto order = sample_without_replacement(f.objects, world.config.n_answers, rng);
      docs.push_back(world.render(f, order));
    }
  }
  return docs;
}

const char* to_string(StepVerdict v) {
  switch (v) {
    case StepVerdict::Correct: return "correct";
    case StepVerdict::Wrong: return "wrong";
    case StepVerdict::Repeated: return "repeated";
    case StepVerdict::Format: return "format";
  }
  return "?";
}

StepVerdict verdict_from_string(const std::string& s) {
  for (auto v : {StepVerdict::Correct, StepVerdict::Wrong, StepVerdict::Repeated, StepVerdict::Format})
    if (s == to_string(v)) return v;
  throw Error(ErrorKind::Format, "unknown verdict '" + s + "'");
}

Evaluation evaluate_generation(const SynthWorld& world, const Fact& fact, std::span<const int> prompt,
                               std::span<const int> generated) {
  const int n = world.config.n_answers;
  Evaluation ev;
  ev.verdicts.assign(static_cast<std::size_t>(n), StepVerdict::Format);
  const int offset = static_cast<int>(prompt.size());
  std::size_t cursor = 0;
  std::vector<int> used;
  for (int step = 1; step <= n; ++step) {
    if (cursor >= generated.size() || world.marker_step(generated[cursor]) != step) break;
    ++cursor;
    const std::size_t begin = cursor;
    while (cursor < generated.size() && world.marker_step(generated[cursor]) == 0 && generated[cursor] != world.eos)
      ++cursor;
    AnswerExtent ext{-1, offset + static_cast<int>(begin), offset + static_cast<int>(cursor)};
    auto& verdict = ev.verdicts[static_cast<std::size_t>(step - 1)];
    if (cursor == begin) {
      ev.answers.push_back(ext);
      break;
    }
    const std::span<const int> answer = generated.subspan(begin, cursor - begin);
    for (int o : fact.objects) {
      const auto& t = world.objects[static_cast<std::size_t>(o)].tokens;
      if (std::equal(t.begin(), t.end(), answer.begin(), answer.end())) ext.object = o;
    }
    if (ext.object < 0) {
      verdict = StepVerdict::Wrong;
    } else if (std::find(used.begin(), used.end(), ext.object) != used.end()) {
      verdict = StepVerdict::Repeated;
    } else {
      verdict = StepVerdict::Correct;
      used.push_back(ext.object);
    }
    ev.answers.push_back(ext);
  }
  ev.correct = std::all_of(ev.verdicts.begin(), ev.verdicts.end(), [](auto v) { return v == StepVerdict::Correct; });
  return ev;
}

std::vector<int> QueryInstance::full_sequence() const {
  std::vector<int> s = prompt;
  s.insert(s.end(), generated.begin(), generated.end());
  return s;
}

QueryInstance make_instance(const SynthWorld& world, int fact_index, std::vector<int> generated) {
  const auto& f = world.facts.at(static_cast<std::size_t>(fact_index));
  QueryInstance q;
  q.id = fact_index;
  q.fact = fact_index;
  q.relation = f.relation;
  q.prompt = world.prompt(f);
  q.subject_positions = world.subject_positions(f);
  q.gold = f.objects;
  q.generated = std::move(generated);
  q.eval = evaluate_generation(world, f, q.prompt, q.generated);
  return q;
}

std::vector<int> build_step_input(const QueryInstance& instance, int step) {
  if (step < 1 || step > static_cast<int>(instance.eval.verdicts.size()))
    throw Error(ErrorKind::OutOfRange, "step " + std::to_string(step) + " beyond n_answers");
  if (step > static_cast<int>(instance.eval.answers.size()))
    throw Error(ErrorKind::OutOfRange, "answer " + std::to_string(step) + " was not generated");
  const auto full = instance.full_sequence();
  const auto end = static_cast<std::size_t>(instance.eval.answers[static_cast<std::size_t>(step - 1)].begin);
  return {full.begin(), full.begin() + static_cast<std::ptrdiff_t>(end)};
}

template <typename Scalar>
std::vector<QueryInstance> evaluate_queries(const WeightSet<Scalar>& weights, const SynthWorld& world) {
  std::vector<QueryInstance> out;
  const int max_new = 3 * world.config.n_answers + 1;
  const std::vector<int> stop{world.eos};
  for (std::size_t i = 0; i < world.facts.size(); ++i) {
    const auto prompt = world.prompt(world.facts[i]);
    std::vector<int> gen;
    try {
      gen = generate_greedy(weights, prompt, max_new, stop);
    } catch (const TruncationError& e) {
      gen = e.partial();
    }
    out.push_back(make_instance(world, static_cast<int>(i), std::move(gen)));
  }
  return out;
}

double exact_match_accuracy(std::span<const QueryInstance> instances) {
  if (instances.empty()) return 0.0;
  const auto n = std::count_if(instances.begin(), instances.end(), [](const auto& q) { return q.eval.correct; });
  return static_cast<double>(n) / static_cast<double>(instances.size());
}

void save_world(const std::string& path, const SynthWorld& w) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorKind::Io, "cannot open " + path + " for writing");
  const auto& c = w.config;
  os << json{{"record", "world"},
             {"version", 1},
             {"seed", c.seed},
             {"n_subjects", c.n_subjects},
             {"n_relations", c.n_relations},
             {"objects_per_fact", c.objects_per_fact},
             {"n_answers", c.n_answers},
             {"object_pool", c.object_pool},
             {"suffix_pool", c.suffix_pool},
             {"two_token_fraction", c.two_token_fraction},
             {"max_vocab", c.max_vocab}}
            .dump()
     << "\n";
  os << json{{"record", "vocab"}, {"words", w.vocab.words()}}.dump() << "\n";
  os << json{{"record", "specials"}, {"bos", w.bos}, {"eos", w.eos}, {"colon", w.colon}, {"markers", w.step_markers}}
            .dump()
     << "\n";
  for (std::size_t r = 0; r < w.relations.size(); ++r)
    os << json{{"record", "relation"}, {"id", r}, {"token", w.relations[r]}}.dump() << "\n";
  for (std::size_t s = 0; s < w.subjects.size(); ++s)
    os << json{{"record", "subject"}, {"id", s}, {"tokens", w.subjects[s].tokens}}.dump() << "\n";
  for (std::size_t o = 0; o < w.objects.size(); ++o)
    os << json{{"record", "object"}, {"id", o}, {"tokens", w.objects[o].tokens}}.dump() << "\n";
  for (std::size_t f = 0; f < w.facts.size(); ++f)
    os << json{{"record", "fact"},
               {"id", f},
               {"subject", w.facts[f].subject},
               {"relation", w.facts[f].relation},
               {"objects", w.facts[f].objects}}
              .dump()
       << "\n";
}

SynthWorld load_world(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorKind::Io, "cannot open " + path);
  SynthWorld w;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
      const std::string kind = j.at("record");
      if (kind == "world") {
        auto& c = w.config;
        c.seed = j.at("seed");
        c.n_subjects = j.at("n_subjects");
        c.n_relations = j.at("n_relations");
        c.objects_per_fact = j.at("objects_per_fact");
        c.n_answers = j.at("n_answers");
        c.object_pool = j.at("object_pool");
        c.suffix_pool = j.at("suffix_pool");
        c.two_token_fraction = j.at("two_token_fraction");
        c.max_vocab = j.at("max_vocab");
      } else if (kind == "vocab") {
        for (const auto& word : j.at("words")) w.vocab.add(word.get<std::string>());
      } else if (kind == "specials") {
        w.bos = j.at("bos");
        w.eos = j.at("eos");
        w.colon = j.at("colon");
        w.step_markers = j.at("markers").get<std::vector<int>>();
      } else if (kind == "relation") {
        w.relations.push_back(j.at("token"));
      } else if (kind == "subject") {
        w.subjects.push_back({j.at("tokens").get<std::vector<int>>()});
      } else if (kind == "object") {
        w.objects.push_back({j.at("tokens").get<std::vector<int>>()});
      } else if (kind == "fact") {
        w.facts.push_back({j.at("subject"), j.at("relation"), j.at("objects").get<std::vector<int>>()});
      } else {
        throw Error(ErrorKind::Format, "unknown record '" + kind + "'");
      }
    } catch (const json::exception& e) {
      throw Error(ErrorKind::Format, path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (w.vocab.size() == 0 || w.facts.empty()) throw Error(ErrorKind::Format, path + ": incomplete world file");
  return w;
}

void save_vocabulary(const std::string& path, const Vocabulary& vocab) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorKind::Io, "cannot open " + path + " for writing");
  for (const auto& w : vocab.words()) os << w << "\n";
}

void save_instances(const std::string& path, std::span<const QueryInstance> instances) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorKind::Io, "cannot open " + path + " for writing");
  for (const auto& q : instances) {
    auto answers = json::array();
    for (const auto& a : q.eval.answers) answers.push_back({{"object", a.object}, {"begin", a.begin}, {"end", a.end}});
    std::vector<std::string> verdicts;
    for (auto v : q.eval.verdicts) verdicts.emplace_back(to_string(v));
    os << json{{"record", "instance"},
               {"id", q.id},
               {"fact", q.fact},
               {"relation", q.relation},
               {"prompt", q.prompt},
               {"subject_positions", q.subject_positions},
               {"gold", q.gold},
               {"generated", q.generated},
               {"answers", answers},
               {"verdicts", verdicts},
               {"correct", q.eval.correct}}
              .dump()
       << "\n";
  }
}

std::vector<QueryInstance> load_instances(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorKind::Io, "cannot open " + path);
  std::vector<QueryInstance> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      QueryInstance q;
      q.id = j.at("id");
      q.fact = j.at("fact");
      q.relation = j.at("relation");
      q.prompt = j.at("prompt").get<std::vector<int>>();
      q.subject_positions = j.at("subject_positions").get<std::vector<int>>();
      q.gold = j.at("gold").get<std::vector<int>>();
      q.generated = j.at("generated").get<std::vector<int>>();
      for (const auto& a : j.at("answers")) q.eval.answers.push_back({a.at("object"), a.at("begin"), a.at("end")});
      for (const auto& v : j.at("verdicts")) q.eval.verdicts.push_back(verdict_from_string(v));
      q.eval.correct = j.at("correct");
      out.push_back(std::move(q));
    } catch (const json::exception& e) {
      throw Error(ErrorKind::Format, path + ": " + e.what());
    }
  }
  return out;
}

template std::vector<QueryInstance> evaluate_queries<float>(const WeightSet<float>&, const SynthWorld&);
template std::vector<QueryInstance> evaluate_queries<double>(const WeightSet<double>&, const SynthWorld&);

}  // namespace tlens
