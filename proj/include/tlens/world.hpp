#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "tlens/model.hpp"

namespace tlens {

/// Word-level tokenizer: one id per whitespace-free word, so it is bijective
/// on its vocabulary.
class Vocabulary {
 public:
  int add(const std::string& word);
  int id(const std::string& word) const;
  const std::string& word(int id) const;
  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

  std::vector<int> tokenize(std::string_view text) const;
  std::string detokenize(std::span<const int> ids) const;

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
};

/// One or two token ids. Within a fact, first tokens are pairwise distinct.
struct Entity {
  std::vector<int> tokens;
};

struct Fact {
  int subject = 0;
  int relation = 0;
  std::vector<int> objects;  // indices into SynthWorld::objects, the gold set
};

struct WorldConfig {
  int n_subjects = 80;
  int n_relations = 2;
  int objects_per_fact = 3;
  int n_answers = 3;
  int object_pool = 320;
  int suffix_pool = 16;
  double two_token_fraction = 0.5;
  int max_vocab = 512;
  std::uint64_t seed = 1;
};

struct SynthWorld {
  WorldConfig config;
  Vocabulary vocab;
  int bos = 0;
  int eos = 0;
  int colon = 0;
  std::vector<int> step_markers;  // step_markers[i] is the token "i+1."
  std::vector<Entity> subjects;
  std::vector<int> relations;  // relation word token ids
  std::vector<Entity> objects;
  std::vector<Fact> facts;

  /// "<bos> subject relation :"
  std::vector<int> prompt(const Fact& fact) const;
  /// Positions of the subject tokens inside prompt(fact).
  std::vector<int> subject_positions(const Fact& fact) const;
  /// prompt + "1. o_a 2. o_b ... <eos>" for the given object order.
  std::vector<int> render(const Fact& fact, std::span<const int> object_order) const;
  /// Index of the marker token's step (1-based), or 0 when `token` is not a marker.
  int marker_step(int token) const;
};

/// Deterministic synthetic world. Throws a config error when the vocabulary
/// budget cannot hold the requested counts.
SynthWorld build_world(const WorldConfig& config);

/// docs_per_fact documents per fact; each lists a random n_answers-permutation
/// of a random n_answers-subset of the fact's objects.
std::vector<std::vector<int>> render_corpus(const SynthWorld& world, int docs_per_fact, std::uint64_t seed);

enum class StepVerdict { Correct, Wrong, Repeated, Format };
const char* to_string(StepVerdict v);
StepVerdict verdict_from_string(const std::string& s);

/// An answer inside the full (prompt + generated) sequence: tokens [begin, end).
struct AnswerExtent {
  int object = -1;  // matched gold object index, or -1
  int begin = 0;
  int end = 0;
};

struct Evaluation {
  std::vector<StepVerdict> verdicts;  // one per answer step
  std::vector<AnswerExtent> answers;  // parsed answers, possibly fewer than n_answers
  bool correct = false;
};

/// Splits the continuation at the step markers and scores each answer by
/// exact match against the gold set, rejecting repeats.
Evaluation evaluate_generation(const SynthWorld& world, const Fact& fact, std::span<const int> prompt,
                               std::span<const int> generated);

struct QueryInstance {
  int id = 0;
  int fact = 0;
  int relation = 0;
  std::vector<int> prompt;
  std::vector<int> subject_positions;
  std::vector<int> gold;       // object indices
  std::vector<int> generated;  // continuation, stop token excluded
  Evaluation eval;

  std::vector<int> full_sequence() const;
};

QueryInstance make_instance(const SynthWorld& world, int fact_index, std::vector<int> generated);

/// Prompt plus generated tokens strictly before answer `step`'s first token
/// (so it ends with the marker "step."). Steps are 1-based.
std::vector<int> build_step_input(const QueryInstance& instance, int step);

/// Greedy-decodes every fact and scores it.
template <typename Scalar>
std::vector<QueryInstance> evaluate_queries(const WeightSet<Scalar>& weights, const SynthWorld& world);

double exact_match_accuracy(std::span<const QueryInstance> instances);

// Files: the world is JSON lines (one record per line, "record" field first);
// the vocabulary manifest is one word per line in id order.
void save_world(const std::string& path, const SynthWorld& world);
SynthWorld load_world(const std::string& path);
void save_vocabulary(const std::string& path, const Vocabulary& vocab);
void save_instances(const std::string& path, std::span<const QueryInstance> instances);
std::vector<QueryInstance> load_instances(const std::string& path);

}  // namespace tlens
