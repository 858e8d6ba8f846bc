#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "fixtures.hpp"
#include "tlens/world.hpp"

using namespace tlens;
using namespace tlens::testing;

namespace {

std::vector<int> answer_tokens(const SynthWorld& w, std::initializer_list<int> objects) {
  std::vector<int> g;
  int step = 0;
  for (int o : objects) {
    g.push_back(w.step_markers[static_cast<std::size_t>(step++)]);
    const auto& t = w.objects[static_cast<std::size_t>(o)].tokens;
    g.insert(g.end(), t.begin(), t.end());
  }
  return g;
}

}  // namespace

TEST_CASE("worlds are deterministic and well formed") {
  const WorldConfig cfg;
  const auto a = build_world(cfg);
  const auto b = build_world(cfg);
  CHECK(a.vocab.words() == b.vocab.words());
  REQUIRE(a.facts.size() == b.facts.size());
  for (std::size_t i = 0; i < a.facts.size(); ++i) CHECK(a.facts[i].objects == b.facts[i].objects);
  CHECK(a.facts.size() == static_cast<std::size_t>(cfg.n_subjects * cfg.n_relations));
  CHECK(a.vocab.size() <= cfg.max_vocab);

  int two = 0, total = 0;
  for (const auto& f : a.facts) {
    REQUIRE(f.objects.size() == 3);
    std::set<int> distinct(f.objects.begin(), f.objects.end());
    REQUIRE(distinct.size() == 3);
    std::set<int> firsts;
    for (int o : f.objects) firsts.insert(a.objects[static_cast<std::size_t>(o)].tokens.front());
    REQUIRE(firsts.size() == 3);
  }
  for (const auto* pool : {&a.subjects, &a.objects})
    for (const auto& e : *pool) {
      REQUIRE((e.tokens.size() == 1 || e.tokens.size() == 2));
      two += e.tokens.size() == 2;
      ++total;
    }
  CHECK(static_cast<double>(two) / total == doctest::Approx(0.5).epsilon(0.15));

  WorldConfig other = cfg;
  other.seed = 2;
  CHECK(build_world(other).facts[0].objects != a.facts[0].objects);
}

TEST_CASE("world configuration errors") {
  WorldConfig tiny;
  tiny.max_vocab = 50;
  CHECK_THROWS_AS(build_world(tiny), Error);
  WorldConfig few;
  few.objects_per_fact = 2;
  CHECK_THROWS_AS(build_world(few), Error);
}

TEST_CASE("corpus documents permute the gold objects") {
  const auto w = build_world(WorldConfig{});
  const auto docs = render_corpus(w, 1000, 3);
  std::map<int, std::set<int>> positions;  // object -> positions seen for fact 0
  const auto& f = w.facts[0];
  for (std::size_t d = 0; d < 1000; ++d) {
    const auto& doc = docs[d];
    REQUIRE(static_cast<int>(doc.size()) <= ModelConfig{}.ctx);
    CHECK(doc.front() == w.bos);
    CHECK(doc.back() == w.eos);
    const auto inst = make_instance(w, 0, std::vector<int>(doc.begin() + static_cast<long>(w.prompt(f).size()), doc.end() - 1));
    REQUIRE(inst.eval.correct);
    for (std::size_t i = 0; i < inst.eval.answers.size(); ++i)
      positions[inst.eval.answers[i].object].insert(static_cast<int>(i));
  }
  for (int o : f.objects) CHECK(positions[o].size() > 1);
  CHECK(render_corpus(w, 2, 9) == render_corpus(w, 2, 9));
  CHECK_THROWS_AS(render_corpus(w, 0, 1), Error);
}

TEST_CASE("tokenizer round trip") {
  const auto w = build_world(WorldConfig{});
  for (const auto& doc : render_corpus(w, 1, 4)) {
    const auto text = w.vocab.detokenize(doc);
    REQUIRE(w.vocab.tokenize(text) == doc);
  }
  CHECK_THROWS_AS(w.vocab.tokenize("no-such-word"), Error);
}

TEST_CASE("generation verdicts") {
  const auto w = build_world(WorldConfig{});
  const auto& f = w.facts[3];
  const int A = f.objects[0], B = f.objects[1], C = f.objects[2];
  int D = 0;
  while (D == A || D == B || D == C) ++D;
  auto eval = [&](std::initializer_list<int> objs) { return make_instance(w, 3, answer_tokens(w, objs)).eval; };

  auto ok = eval({B, A, C});
  CHECK(ok.correct);
  CHECK(ok.verdicts == std::vector<StepVerdict>(3, StepVerdict::Correct));

  auto rep = eval({A, A, C});
  CHECK_FALSE(rep.correct);
  CHECK(rep.verdicts[1] == StepVerdict::Repeated);
  CHECK(rep.verdicts[2] == StepVerdict::Correct);

  auto wrong = eval({A, B, D});
  CHECK_FALSE(wrong.correct);
  CHECK(wrong.verdicts[2] == StepVerdict::Wrong);

  auto short_gen = eval({A, B});
  CHECK_FALSE(short_gen.correct);
  CHECK(short_gen.verdicts[2] == StepVerdict::Format);

  auto garbled = make_instance(w, 3, {w.colon, w.colon}).eval;
  CHECK_FALSE(garbled.correct);
  CHECK(garbled.verdicts[0] == StepVerdict::Format);

  for (auto v : {StepVerdict::Correct, StepVerdict::Wrong, StepVerdict::Repeated, StepVerdict::Format})
    CHECK(verdict_from_string(to_string(v)) == v);
}

TEST_CASE("step inputs end at the marker before each answer") {
  const auto w = build_world(WorldConfig{});
  const auto& f = w.facts[5];
  const auto inst = make_instance(w, 5, answer_tokens(w, {f.objects[2], f.objects[0], f.objects[1]}));
  const auto prompt = w.prompt(f);
  const auto s1 = build_step_input(inst, 1);
  auto expected = prompt;
  expected.push_back(w.step_markers[0]);
  CHECK(s1 == expected);
  std::vector<int> prev = s1;
  for (int step = 2; step <= 3; ++step) {
    const auto s = build_step_input(inst, step);
    CHECK(s.back() == w.step_markers[static_cast<std::size_t>(step - 1)]);
    CHECK(s.size() > prev.size());
    CHECK(std::equal(prev.begin(), prev.end(), s.begin()));
    CHECK(static_cast<int>(s.size()) == inst.eval.answers[static_cast<std::size_t>(step - 1)].begin);
    prev = s;
  }
  CHECK_THROWS_AS(build_step_input(inst, 4), Error);
  CHECK_THROWS_AS(build_step_input(inst, 0), Error);
  const auto sp = w.subject_positions(f);
  CHECK(sp.front() == 1);
  CHECK(static_cast<std::size_t>(sp.back()) + 3 == prompt.size());
}

TEST_CASE("step-input forward agrees with the full sequence") {
  const auto w = build_world(WorldConfig{});
  auto c = micro_config(2, 2, w.vocab.size());
  const auto weights = random_weights<float>(c, 61);
  const auto& f = w.facts[0];
  const auto inst = make_instance(w, 0, answer_tokens(w, {f.objects[0], f.objects[1], f.objects[2]}));
  const auto full = forward(weights, inst.full_sequence());
  for (int step = 1; step <= 3; ++step) {
    const auto s = build_step_input(inst, step);
    const auto part = forward(weights, s);
    const int p = static_cast<int>(s.size()) - 1;
    const VectorXf row = full.final_resid.row(p).transpose();
    CHECK((decode_with_final_norm<float>(weights, row, row) - part.logits).cwiseAbs().maxCoeff() <= 1e-5f);
  }
}

TEST_CASE("world and instance files round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "tlens_world_test";
  std::filesystem::create_directories(dir);
  const auto w = build_world(WorldConfig{});
  save_world((dir / "world.jsonl").string(), w);
  const auto back = load_world((dir / "world.jsonl").string());
  CHECK(back.vocab.words() == w.vocab.words());
  CHECK(back.bos == w.bos);
  CHECK(back.step_markers == w.step_markers);
  REQUIRE(back.facts.size() == w.facts.size());
  for (std::size_t i = 0; i < w.facts.size(); ++i) {
    CHECK(back.facts[i].objects == w.facts[i].objects);
    CHECK(back.facts[i].subject == w.facts[i].subject);
  }
  CHECK(back.objects.size() == w.objects.size());
  CHECK(back.config.n_answers == w.config.n_answers);

  const auto& f = w.facts[1];
  std::vector<QueryInstance> insts{make_instance(w, 1, answer_tokens(w, {f.objects[1], f.objects[0], f.objects[2]})),
                                   make_instance(w, 2, {w.colon})};
  insts[1].id = 1;
  save_instances((dir / "inst.jsonl").string(), insts);
  const auto loaded = load_instances((dir / "inst.jsonl").string());
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].generated == insts[0].generated);
  CHECK(loaded[0].eval.correct);
  CHECK(loaded[1].eval.verdicts == insts[1].eval.verdicts);
  CHECK(loaded[0].eval.answers[2].begin == insts[0].eval.answers[2].begin);

  CHECK_THROWS_AS(load_world((dir / "missing.jsonl").string()), Error);
  {
    std::ofstream bad(dir / "bad.jsonl");
    bad << "{not json\n";
  }
  CHECK_THROWS_AS(load_world((dir / "bad.jsonl").string()), Error);
  std::filesystem::remove_all(dir);
}
