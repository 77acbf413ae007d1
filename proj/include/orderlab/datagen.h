#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "orderlab/json_config.h"

namespace orderlab {

// The six QA kinds, in template order.
enum class Attribute : int { kGender = 0, kBirth, kDeath, kRegion, kOccupation, kNationality };
inline constexpr int kNumAttributes = 6;

std::string_view attribute_name(int kind);
// Closed answer set for a kind; birth and death share the century tokens.
const std::vector<std::string>& attribute_values(int kind);

struct EntityRecord {
  int entity_id = 0;
  std::array<int, kNumAttributes> values{};  // index into attribute_values(kind)
};

enum class Variant { kSynthetic, kNatural };
enum class ProbeSplit { kTrain, kTest };

std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view s);
std::string_view split_name(ProbeSplit s);

struct Alias {
  int entity_id = 0;
  std::vector<int> symbols;  // alias-alphabet indices, constant length within a corpus
  std::string surface;
};

// Word-level closed vocabulary. Ids are laid out as
//   [structural | template words | alias alphabet | answers]
// and the layout depends only on the alias alphabet size.
class Vocabulary {
 public:
  struct Range {
    int begin = 0;
    int end = 0;
    bool contains(int id) const { return id >= begin && id < end; }
  };

  explicit Vocabulary(int alias_alphabet_size);

  int size() const { return static_cast<int>(tokens_.size()); }
  int alphabet_size() const { return alias_.end - alias_.begin; }
  int id(std::string_view token) const;
  std::optional<int> find(std::string_view token) const;
  const std::string& token(int id) const { return tokens_.at(static_cast<size_t>(id)); }

  int pad() const { return 0; }
  int eos() const { return 1; }
  int alias_token(int symbol) const;
  int answer_token(int kind, int value) const;
  int letter_token(int stage) const;  // stage 1 -> "A"

  Range structural() const { return structural_; }
  Range words() const { return words_; }
  Range alias() const { return alias_; }
  Range answers() const { return answers_; }

  // Splits on single spaces; every piece must be a known token.
  std::vector<int> encode(std::string_view text) const;
  std::string render(std::span<const int> ids) const;

  Json to_json() const;

 private:
  void add(const std::string& token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  Range structural_, words_, alias_, answers_;
};

std::string alias_symbol_surface(int symbol);

struct StagePlan {
  int m = 0;
  std::vector<int> stage_of;         // by entity id; 1..m, 0 = never trained on
  std::vector<ProbeSplit> split;     // by entity id
  std::vector<int> epochs;           // per stage
  int samples_per_entity = 4;

  std::vector<int> entities_in(int stage) const;
  std::vector<int> stage_sizes() const;
};

struct QASample {
  int entity_id = 0;
  int stage = 0;
  ProbeSplit probe_split = ProbeSplit::kTrain;
  int template_id = 0;
  std::vector<int> prompt_tokens;
  std::vector<int> answer_tokens;
  Variant variant = Variant::kSynthetic;
};

// Template ids: synthetic kinds 0..5; natural 100 + pool*98 + expansion;
// test prompts 1000 + prompt_id; stage-report question 2000.
inline constexpr int kNaturalTemplateBase = 100;
inline constexpr int kNaturalExpansions = 98;
inline constexpr int kNaturalPoolSize = 175;
inline constexpr int kTestTemplateBase = 1000;
inline constexpr int kStageReportTemplate = 2000;
inline constexpr int kNumTestPrompts = 4;

// QA kind of a training template, or -1 for test / stage-report templates.
int kind_of_template(int template_id);
const std::vector<std::string>& synthetic_templates();
const std::vector<std::string>& natural_template_pool();  // 175 entries
const std::vector<std::string>& natural_noun_words();     // 14
const std::vector<std::string>& natural_alias_phrases();  // 7
const std::string& test_prompt_template(int prompt_id);
const std::string& stage_report_template();

std::vector<EntityRecord> gen_entities(int n, uint64_t seed, int first_id = 0);
std::vector<Alias> gen_aliases(int n, int token_len, int alphabet_size, uint64_t seed, int first_id = 0);
// One or two adjectives followed by a noun; words are syllable strings over the
// alias alphabet and every alias spans exactly five symbols.
std::vector<Alias> gen_natural_aliases(int n, int alphabet_size, uint64_t seed, int first_id = 0);

StagePlan partition_stages(const std::vector<EntityRecord>& entities, int m, uint64_t seed);
void split_probe(StagePlan& plan, double ratio, uint64_t seed);

// Token ids of "<| alias |>".
std::vector<int> alias_span(const Alias& alias, const Vocabulary& vocab);
// Fills ENTITY / answer into a template string.
QASample render_sample(const EntityRecord& entity, const Alias& alias, const StagePlan& plan,
                       const Vocabulary& vocab, const std::string& tmpl, int template_id, int kind,
                       Variant variant, const std::string& entity_phrase_prefix = "");

std::vector<QASample> render_training_set(const std::vector<EntityRecord>& entities,
                                          const std::vector<Alias>& aliases, const StagePlan& plan,
                                          const Vocabulary& vocab, Variant variant, uint64_t seed);
std::vector<QASample> render_test_prompts(const std::vector<EntityRecord>& entities,
                                          const std::vector<Alias>& aliases, const StagePlan& plan,
                                          const Vocabulary& vocab, int prompt_id);

// Everything one experiment needs about its data, built from a DataConfig.
struct DataConfig {
  int n_entities = 2400;
  int n_stages = 6;
  int n_fresh = -1;  // never-trained aliases for seen/unseen analyses; -1 = one stage's worth
  int samples_per_entity = 4;
  Variant variant = Variant::kSynthetic;
  int alias_alphabet = 200;
  double probe_ratio = 0.8;
  std::vector<int> test_prompts = {1, 2, 3, 4};
  uint64_t seed = 1;

  int fresh_count() const;
  int alias_len() const { return variant == Variant::kSynthetic ? 3 : 5; }
};

DataConfig parse_data_config(StrictObject obj);
Json to_json(const DataConfig& c);

struct Corpus {
  DataConfig config;
  Vocabulary vocab{1};
  std::vector<EntityRecord> entities;  // trained entities then fresh ones; index == entity_id
  std::vector<Alias> aliases;
  StagePlan plan;
  std::vector<std::vector<QASample>> stages;  // stages[i] is D_{i+1}
  std::map<int, std::vector<QASample>> test_prompts;

  int n_trained() const { return config.n_entities; }
};

Corpus build_corpus(const DataConfig& config);

Json sample_to_json(const QASample& s, const Vocabulary& vocab);
QASample sample_from_json(const Json& j);

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus read_corpus(const std::filesystem::path& dir);

}  // namespace orderlab
