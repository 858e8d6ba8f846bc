#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>

#include "fixtures.hpp"
#include "tlens/trainer.hpp"

using namespace tlens;
using namespace tlens::testing;

namespace {

WorldConfig tiny_world() {
  WorldConfig w;
  w.n_subjects = 4;
  w.n_relations = 1;
  w.object_pool = 12;
  w.suffix_pool = 4;
  w.max_vocab = 64;
  return w;
}

std::vector<std::vector<int>> random_batch(Rng& rng, int docs, int vocab) {
  std::vector<std::vector<int>> b;
  for (int i = 0; i < docs; ++i) b.push_back(random_tokens(rng, 3 + static_cast<int>(rng.below(6)), vocab));
  return b;
}

template <typename S>
bool same_weights(const WeightSet<S>& a, const WeightSet<S>& b) {
  bool same = true;
  std::vector<const S*> pa;
  a.visit([&](const std::string&, const auto& x) { pa.push_back(x.data()); });
  std::size_t i = 0;
  b.visit([&](const std::string&, const auto& y) {
    same = same && std::memcmp(pa[i++], y.data(), sizeof(S) * static_cast<std::size_t>(y.size())) == 0;
  });
  return same;
}

// Array class of a visit name: "wq" for "layers.1.wq", "embedding" for itself.
std::string array_class(const std::string& name) {
  const auto dot = name.rfind('.');
  return dot == std::string::npos ? name : name.substr(dot + 1);
}

}  // namespace

TEST_CASE("uniform logits give ln V") {
  const auto c = micro_config(2, 2);
  auto w = random_weights<double>(c, 71);
  w.unembed.setZero();
  Rng rng(71);
  const auto batch = random_batch(rng, 5, c.vocab);
  GradientSet<double> g;
  CHECK(loss_and_grads(w, batch, g) == doctest::Approx(std::log(static_cast<double>(c.vocab))).epsilon(1e-12));
  CHECK(batch_loss(w, batch) == doctest::Approx(std::log(static_cast<double>(c.vocab))).epsilon(1e-12));
}

TEST_CASE("training loss agrees with the inference forward pass") {
  const auto c = micro_config(2, 2);
  const auto w = random_weights<double>(c, 72);
  Rng rng(72);
  const auto batch = random_batch(rng, 4, c.vocab);
  double total = 0;
  int count = 0;
  for (const auto& doc : batch) {
    for (std::size_t t = 1; t < doc.size(); ++t) {
      const std::vector<int> prefix(doc.begin(), doc.begin() + static_cast<long>(t));
      const auto logits = forward(w, prefix).logits;
      const double m = logits.maxCoeff();
      total += -(logits(doc[t]) - m - std::log((logits.array() - m).exp().sum()));
      ++count;
    }
  }
  CHECK(batch_loss(w, batch) == doctest::Approx(total / count).epsilon(1e-10));
}

TEST_CASE("duplicating a document leaves the mean loss unchanged") {
  const auto c = micro_config(2, 2);
  const auto w = random_weights<double>(c, 73);
  Rng rng(73);
  const auto one = random_batch(rng, 1, c.vocab);
  const std::vector<std::vector<int>> two{one[0], one[0]};
  GradientSet<double> g1, g2;
  CHECK(loss_and_grads(w, one, g1) == doctest::Approx(loss_and_grads(w, two, g2)).epsilon(1e-14));
  CHECK((g1.unembed - g2.unembed).cwiseAbs().maxCoeff() <= 1e-14);
}

TEST_CASE("gradients match central finite differences") {
  const auto start = std::chrono::steady_clock::now();
  const auto c = micro_config(2, 2);
  REQUIRE(c.d_model == 8);
  auto w = random_weights<double>(c, 74, 0.3);
  Rng rng(74);
  const auto batch = random_batch(rng, 3, c.vocab);
  GradientSet<double> grads;
  loss_and_grads(w, batch, grads);

  std::vector<std::pair<std::string, Eigen::Index>> coords;  // (array name, flat index)
  std::map<std::string, std::vector<std::string>> names_by_class;
  w.visit([&](const std::string& name, const auto&) { names_by_class[array_class(name)].push_back(name); });
  REQUIRE(names_by_class.size() == 12);
  std::map<std::string, Eigen::Index> sizes;
  w.visit([&](const std::string& name, const auto& a) { sizes[name] = a.size(); });
  for (const auto& [cls, names] : names_by_class)
    for (int k = 0; k < 20; ++k) {
      const auto& name = names[rng.below(names.size())];
      coords.emplace_back(name, static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(sizes[name]))));
    }
  REQUIRE(coords.size() >= 200);

  const double h = 1e-4;
  double worst = 0;
  std::string worst_at;
  std::map<std::string, int> checked;
  for (const auto& [name, idx] : coords) {
    double* param = nullptr;
    double analytic = 0;
    w.visit([&](const std::string& n, auto& a) {
      if (n == name) param = a.data() + idx;
    });
    grads.visit([&](const std::string& n, const auto& a) {
      if (n == name) analytic = a.data()[idx];
    });
    const double saved = *param;
    *param = saved + h;
    const double up = batch_loss(w, batch);
    *param = saved - h;
    const double down = batch_loss(w, batch);
    *param = saved;
    const double numeric = (up - down) / (2 * h);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    const double rel = std::abs(analytic - numeric) / denom;
    ++checked[array_class(name)];
    if (rel > worst) {
      worst = rel;
      worst_at = name + "[" + std::to_string(idx) + "]";
    }
  }
  INFO("worst coordinate " << worst_at);
  CHECK(worst <= 1e-3);
  CHECK(checked.size() == 12);
  CHECK(std::chrono::steady_clock::now() - start < std::chrono::minutes(2));
}

TEST_CASE("sharded gradients equal the single-worker result") {
  const auto c = micro_config(2, 2);
  const auto w = random_weights<double>(c, 75);
  Rng rng(75);
  const auto batch = random_batch(rng, 7, c.vocab);
  GradientSet<double> g1, g3, g3b;
  const double l1 = loss_and_grads(w, batch, g1, 1);
  const double l3 = loss_and_grads(w, batch, g3, 3);
  loss_and_grads(w, batch, g3b, 3);
  CHECK(l1 == doctest::Approx(l3).epsilon(1e-12));
  CHECK((g1.embedding - g3.embedding).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK(same_weights(g3, g3b));
}

TEST_CASE("non-finite weights are reported as divergence") {
  const auto c = micro_config(2, 2);
  auto w = random_weights<float>(c, 76);
  w.unembed(0, 0) = std::numeric_limits<float>::quiet_NaN();
  const std::vector<std::vector<int>> batch{{1, 2, 3}};
  GradientSet<float> g;
  try {
    loss_and_grads(w, batch, g);
    FAIL("expected divergence");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Divergence);
  }
}

TEST_CASE("adam with zero learning rate keeps weights") {
  const auto world = build_world(tiny_world());
  auto mc = micro_config(2, 2, world.vocab.size());
  const auto corpus = render_corpus(world, 4, 1);
  TrainConfig tc;
  tc.lr = 0;
  tc.steps = 5;
  tc.batch = 4;
  tc.eval_every = 0;
  const auto r = train(tc, mc, world, corpus, 5);
  CHECK(same_weights(r.weights, init_weights<float>(mc, 5)));
  CHECK(r.log.size() == 5);
  CHECK(r.optimizer.step == 5);
}

TEST_CASE("training is deterministic and lowers the loss") {
  const auto world = build_world(tiny_world());
  auto mc = micro_config(2, 2, world.vocab.size());
  const auto corpus = render_corpus(world, 8, 2);
  TrainConfig tc;
  tc.lr = 1e-2;
  tc.steps = 60;
  tc.batch = 8;
  tc.eval_every = 30;
  std::vector<TrainLogEntry> seen;
  const auto a = train(tc, mc, world, corpus, 9, [&](const TrainLogEntry& e) { seen.push_back(e); });
  const auto b = train(tc, mc, world, corpus, 9);
  CHECK(same_weights(a.weights, b.weights));
  CHECK(seen.size() == 60);
  CHECK(seen[29].accuracy >= 0.0);
  CHECK(seen[28].accuracy == -1.0);
  CHECK(batch_loss(a.weights, corpus) < batch_loss(init_weights<float>(mc, 9), corpus));

  tc.workers = 2;
  const auto sharded = train(tc, mc, world, corpus, 9);
  CHECK(batch_loss(sharded.weights, corpus) == doctest::Approx(batch_loss(a.weights, corpus)).epsilon(1e-3));
}

TEST_CASE("loss on a fixed batch falls over the first 50 steps in most seeds") {
  // Adaptive-moment transients can produce an occasional uptick, so the
  // property is stated over seeds and allows a small share of bad runs.
  const auto c = micro_config(2, 2);
  int monotone = 0;
  const int runs = 20;
  for (int seed = 0; seed < runs; ++seed) {
    Rng rng(800 + static_cast<std::uint64_t>(seed));
    const auto batch = random_batch(rng, 4, c.vocab);
    auto w = init_weights<double>(c, 800 + static_cast<std::uint64_t>(seed));
    auto state = AdamState<double>::zeros(c);
    TrainConfig tc;
    tc.lr = 1e-3;
    GradientSet<double> g;
    double prev = loss_and_grads(w, batch, g);
    bool ok = true;
    for (int step = 0; step < 50; ++step) {
      adam_update(w, g, state, tc);
      const double next = loss_and_grads(w, batch, g);
      ok = ok && next <= prev;
      prev = next;
    }
    monotone += ok;
  }
  CHECK(monotone >= 19);
}

TEST_CASE("initialization follows the documented scales") {
  const ModelConfig c;
  const auto w = init_weights<float>(ModelConfig{c.n_layers, c.n_heads, c.d_model, c.d_head, c.d_mlp, 400}, 1);
  CHECK(w.final_norm.isOnes(0));
  CHECK(w.layers[3].attn_norm.isOnes(0));
  const auto e = w.embedding.cast<double>();
  const double sd = std::sqrt(e.array().square().mean());
  CHECK(sd == doctest::Approx(0.02).epsilon(0.02));
}

TEST_CASE("checkpoint round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "tlens_trainer_test";
  std::filesystem::create_directories(dir);
  const auto world = build_world(tiny_world());
  auto mc = micro_config(2, 2, world.vocab.size());
  const auto corpus = render_corpus(world, 4, 1);
  TrainConfig tc;
  tc.steps = 3;
  tc.batch = 4;
  tc.eval_every = 0;
  const auto r = train(tc, mc, world, corpus, 5);
  save_weights((dir / "w.bin").string(), r.weights);
  save_optimizer_state((dir / "w.opt").string(), r.optimizer);
  const auto w = load_weights((dir / "w.bin").string());
  const auto opt = load_optimizer_state((dir / "w.opt").string(), mc);
  const std::vector<int> tokens{1, 2, 3, 4};
  const auto a = forward(w, tokens).logits;
  const auto b = forward(r.weights, tokens).logits;
  CHECK(std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())) == 0);
  CHECK(opt.step == 3);
  CHECK(same_weights(opt.m, r.optimizer.m));
  CHECK(same_weights(opt.v, r.optimizer.v));
  CHECK_THROWS_AS(load_optimizer_state((dir / "w.bin").string(), mc), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("invalid training configurations are rejected") {
  TrainConfig tc;
  tc.beta1 = 1.0;
  CHECK_THROWS_AS(tc.validate(), Error);
  tc = TrainConfig{};
  tc.lr = -1;
  CHECK_THROWS_AS(tc.validate(), Error);
  tc = TrainConfig{};
  tc.batch = 0;
  CHECK_THROWS_AS(tc.validate(), Error);
  const auto world = build_world(tiny_world());
  CHECK_THROWS_AS(train(TrainConfig{}, micro_config(2, 2, world.vocab.size()), world, {}, 1), Error);
}
