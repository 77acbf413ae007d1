#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "doctest.h"
#include "orderlab/datagen.h"

using namespace orderlab;

TEST_CASE("entities: ids, determinism, attribute histograms") {
  const auto big = gen_entities(16000, 7);
  REQUIRE(big.size() == 16000);
  for (int i = 0; i < 16000; ++i) CHECK(big[static_cast<size_t>(i)].entity_id == i);

  const auto a = gen_entities(1, 0), b = gen_entities(1, 0);
  CHECK(a[0].values == b[0].values);

  const int n = 10000;
  const auto ents = gen_entities(n, 3);
  for (int kind = 0; kind < kNumAttributes; ++kind) {
    const int k = static_cast<int>(attribute_values(kind).size());
    std::vector<int> counts(static_cast<size_t>(k), 0);
    for (const auto& e : ents) counts[static_cast<size_t>(e.values[static_cast<size_t>(kind)])]++;
    // Multinomial: each bin ~ Binomial(n, 1/k).
    const double p = 1.0 / k;
    const double expect = n * p, sd = std::sqrt(n * p * (1 - p));
    for (int c : counts) CHECK(std::abs(c - expect) <= 4 * sd);
  }
}

TEST_CASE("aliases: length, distinctness, exhaustion") {
  const auto two = gen_aliases(2, 3, 200, 0);
  REQUIRE(two.size() == 2);
  CHECK(two[0].symbols.size() == 3);
  CHECK(two[1].symbols.size() == 3);
  CHECK(two[0].symbols != two[1].symbols);

  const auto many = gen_aliases(16000, 3, 200, 1);
  std::set<std::vector<int>> uniq;
  for (const auto& a : many) uniq.insert(a.symbols);
  CHECK(uniq.size() == 16000);

  try {
    gen_aliases(9, 1, 8, 0);
    FAIL("expected AlphabetExhausted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kAlphabetExhausted);
  }

  const auto nat = gen_natural_aliases(500, 200, 4);
  std::set<std::string> surfaces;
  for (const auto& a : nat) {
    CHECK(a.symbols.size() == 5);
    surfaces.insert(a.surface);
  }
  CHECK(surfaces.size() == 500);
}

TEST_CASE("stage partition sizes and disjointness") {
  const auto ents = gen_entities(16000, 1);
  const auto p2 = partition_stages(ents, 2, 5);
  CHECK(p2.stage_sizes() == std::vector<int>{8000, 8000});

  const auto p6 = partition_stages(ents, 6, 5);
  auto sizes = p6.stage_sizes();
  CHECK(std::accumulate(sizes.begin(), sizes.end(), 0) == 16000);
  std::sort(sizes.begin(), sizes.end());
  CHECK(sizes == std::vector<int>{2666, 2666, 2667, 2667, 2667, 2667});

  std::set<int> seen;
  for (int s = 1; s <= 6; ++s) {
    for (int e : p6.entities_in(s)) CHECK(seen.insert(e).second);
  }
  CHECK(seen.size() == 16000);
}

TEST_CASE("probe split is per entity and 80:20 per stage") {
  const auto ents = gen_entities(16000, 1);
  auto plan = partition_stages(ents, 2, 5);
  split_probe(plan, 0.8, 9);
  for (int s = 1; s <= 2; ++s) {
    int train = 0, test = 0;
    for (int e : plan.entities_in(s)) (plan.split[static_cast<size_t>(e)] == ProbeSplit::kTrain ? train : test)++;
    CHECK(train == 6400);
    CHECK(test == 1600);
  }

  auto small = partition_stages(gen_entities(4, 2), 2, 1);
  split_probe(small, 0.5, 3);
  for (int s = 1; s <= 2; ++s) {
    int train = 0;
    for (int e : small.entities_in(s)) train += small.split[static_cast<size_t>(e)] == ProbeSplit::kTrain;
    CHECK(train == 1);
  }
}

TEST_CASE("corpus: sample counts, alias substitution, aligned test prompts") {
  DataConfig cfg;
  cfg.n_entities = 600;
  cfg.n_stages = 6;
  cfg.seed = 11;
  const auto corpus = build_corpus(cfg);
  size_t total = 0;
  for (const auto& st : corpus.stages) total += st.size();
  CHECK(total == 600u * 4u);

  std::map<int, std::string> split_of;
  for (const auto& st : corpus.stages) {
    for (const auto& s : st) {
      const auto span = alias_span(corpus.aliases[static_cast<size_t>(s.entity_id)], corpus.vocab);
      const auto it = std::search(s.prompt_tokens.begin(), s.prompt_tokens.end(), span.begin(), span.end());
      CHECK(it != s.prompt_tokens.end());
      CHECK(s.stage == corpus.plan.stage_of[static_cast<size_t>(s.entity_id)]);
      const std::string sp(split_name(s.probe_split));
      auto [pos, fresh] = split_of.emplace(s.entity_id, sp);
      if (!fresh) CHECK(pos->second == sp);
    }
  }

  for (const auto& [p, samples] : corpus.test_prompts) {
    REQUIRE(samples.size() == corpus.entities.size());
    const size_t len = samples.front().prompt_tokens.size();
    const auto alias_range = corpus.vocab.alias();
    for (const auto& s : samples) {
      CHECK(s.answer_tokens.empty());
      REQUIRE(s.prompt_tokens.size() == len);
      for (size_t t = 0; t < len; ++t) {
        if (!alias_range.contains(s.prompt_tokens[t])) CHECK(s.prompt_tokens[t] == samples.front().prompt_tokens[t]);
      }
    }
  }
  CHECK(corpus.test_prompts.at(1).front().prompt_tokens.size() == 11);
  // Fresh entities are never trained on.
  for (size_t e = static_cast<size_t>(corpus.n_trained()); e < corpus.entities.size(); ++e) {
    CHECK(corpus.plan.stage_of[e] == 0);
  }
}

TEST_CASE("natural variant at 5x density") {
  DataConfig cfg;
  cfg.n_entities = 60;
  cfg.n_stages = 2;
  cfg.variant = Variant::kNatural;
  cfg.samples_per_entity = 20;
  const auto corpus = build_corpus(cfg);
  std::map<int, int> per_entity;
  for (const auto& st : corpus.stages) {
    for (const auto& s : st) per_entity[s.entity_id]++;
  }
  CHECK(per_entity.size() == 60);
  for (const auto& [e, n] : per_entity) CHECK(n == 20);
}

TEST_CASE("corpus round trips through its directory") {
  DataConfig cfg;
  cfg.n_entities = 60;
  cfg.n_stages = 3;
  const auto corpus = build_corpus(cfg);
  const auto dir = std::filesystem::temp_directory_path() / "orderlab_test_corpus";
  std::filesystem::remove_all(dir);
  write_corpus(corpus, dir);
  const auto back = read_corpus(dir);
  CHECK(back.plan.stage_of == corpus.plan.stage_of);
  REQUIRE(back.stages.size() == corpus.stages.size());
  for (size_t i = 0; i < back.stages.size(); ++i) {
    REQUIRE(back.stages[i].size() == corpus.stages[i].size());
    for (size_t j = 0; j < back.stages[i].size(); ++j) {
      CHECK(back.stages[i][j].prompt_tokens == corpus.stages[i][j].prompt_tokens);
      CHECK(back.stages[i][j].answer_tokens == corpus.stages[i][j].answer_tokens);
    }
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("strict data config rejects unknown keys") {
  const Json j = {{"n_entities", 10}, {"bogus", 1}};
  try {
    parse_data_config(StrictObject(j, "data"));
    FAIL("expected ConfigInvalid");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kConfigInvalid);
  }
}
