#include "orderlab/datagen.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace orderlab {

namespace {

std::string ordinal(int n) {
  const int mod100 = n % 100;
  const char* suffix = "th";
  if (mod100 < 11 || mod100 > 13) {
    switch (n % 10) {
      case 1: suffix = "st"; break;
      case 2: suffix = "nd"; break;
      case 3: suffix = "rd"; break;
      default: break;
    }
  }
  return std::to_string(n) + suffix;
}

std::vector<std::string> make_centuries() {
  std::vector<std::string> out;
  for (int c = 10; c >= 1; --c) out.push_back(ordinal(c) + "_century_BC");
  for (int c = 1; c <= 20; ++c) out.push_back(ordinal(c) + "_century");
  return out;
}

const std::vector<std::vector<std::string>>& value_sets() {
  static const std::vector<std::vector<std::string>> sets = [] {
    std::vector<std::vector<std::string>> s(kNumAttributes);
    s[0] = {"male", "female"};
    s[1] = make_centuries();
    s[2] = make_centuries();
    s[3] = {"Europe", "Asia", "Africa", "North_America", "South_America", "Oceania", "Middle_East",
            "Caribbean"};
    s[4] = {"actor",     "painter",     "writer",    "poet",     "composer",
            "politician", "soldier",    "scientist", "philosopher", "architect",
            "singer",    "athlete",     "merchant",  "physician", "priest"};
    s[5] = {"France",  "Germany", "Italy",   "Spain",    "England",     "Russia",  "China",
            "Japan",   "India",   "Egypt",   "Greece",   "Turkey",      "Persia",  "Brazil",
            "Mexico",  "Peru",    "Canada",  "Sweden",   "Norway",      "Poland",  "Austria",
            "Portugal", "Netherlands", "Belgium", "Ireland", "Scotland", "Denmark", "Hungary",
            "Argentina", "Morocco"};
    return s;
  }();
  return sets;
}

const std::vector<std::string> kStructural = {"<pad>", "<eos>", "\n", "Q:", "A:", "<|",
                                              "|>",    "?",     ".",  ",",  ":",  "'s"};

// Per-kind stems for the natural pool. Five leads x six stems = 30 per kind.
const std::vector<std::string> kLeads = {"", "Q:", "So ,", "Tell me ,", "Quick question :"};
const std::vector<std::vector<std::string>> kNaturalStems = {
    {"What was the gender of ENTITY ? \n A:", "Was ENTITY a man or a woman ? \n A:",
     "ENTITY 's gender was", "The gender of ENTITY is listed as",
     "Records give the gender of ENTITY as", "Which gender did ENTITY have ? \n A:"},
    {"When was ENTITY born ? \n A:", "The records show ENTITY 's birth in", "ENTITY was born in the",
     "In which century was ENTITY born ? \n A:", "The birth of ENTITY dates to the",
     "ENTITY came into the world in the"},
    {"When did ENTITY die ? \n A:", "ENTITY died in the", "The death of ENTITY dates to the",
     "In which century did ENTITY die ? \n A:", "Records place the death of ENTITY in the",
     "ENTITY passed away in the"},
    {"In which region did ENTITY live ? \n A:", "Where did ENTITY live ? \n A:", "ENTITY lived in",
     "The home region of ENTITY was", "ENTITY spent a lifetime in",
     "Which part of the world was home to ENTITY ? \n A:"},
    {"What did ENTITY do ? \n A:", "What was the occupation of ENTITY ? \n A:",
     "ENTITY worked as a", "By profession , ENTITY was a", "The occupation of ENTITY was",
     "ENTITY earned a living as a"},
    {"What was the nationality of ENTITY ? \n A:", "Which country was ENTITY from ? \n A:",
     "ENTITY was a citizen of", "The nationality of ENTITY was", "ENTITY held citizenship in",
     "Which nation did ENTITY belong to ? \n A:"},
};
const std::array<int, kNumAttributes> kNaturalPerKind = {30, 30, 29, 29, 29, 28};

struct NaturalTemplate {
  std::string text;
  int kind;
};

const std::vector<NaturalTemplate>& natural_pool_entries() {
  static const std::vector<NaturalTemplate> pool = [] {
    std::vector<NaturalTemplate> out;
    for (int kind = 0; kind < kNumAttributes; ++kind) {
      int taken = 0;
      for (const auto& stem : kNaturalStems[static_cast<size_t>(kind)]) {
        for (const auto& lead : kLeads) {
          if (taken == kNaturalPerKind[static_cast<size_t>(kind)]) break;
          out.push_back({lead.empty() ? stem : lead + " " + stem, kind});
          ++taken;
        }
      }
    }
    return out;
  }();
  return pool;
}

std::vector<std::string> split_spaces(std::string_view text) {
  std::vector<std::string> out;
  size_t start = 0;
  while (start <= text.size()) {
    size_t end = text.find(' ', start);
    if (end == std::string_view::npos) end = text.size();
    if (end > start) out.emplace_back(text.substr(start, end - start));
    start = end + 1;
  }
  return out;
}

// Human-readable text: glue punctuation and newlines to their neighbours.
std::string prettify(const std::vector<std::string>& pieces) {
  std::string out;
  for (const auto& p : pieces) {
    if (p == "\n") {
      out += "\n";
      continue;
    }
    const bool glue = p == "?" || p == "." || p == "," || p == ":" || p == "'s";
    if (!out.empty() && out.back() != '\n' && !glue) out += ' ';
    out += p;
  }
  return out;
}

const std::vector<std::string> kConsonants = {"b", "d", "f", "g", "h", "j", "k", "l", "m",
                                              "n", "p", "r", "s", "t", "v", "w", "z", "ch"};
const std::vector<std::string> kVowels = {"a", "e", "i", "o", "u"};
const std::vector<std::string> kCodas = {"", "n", "r", "s", "l", "k"};

}  // namespace

std::string_view attribute_name(int kind) {
  static const std::array<std::string_view, kNumAttributes> names = {
      "gender", "birth_date", "death_date", "region", "occupation", "nationality"};
  return names.at(static_cast<size_t>(kind));
}

const std::vector<std::string>& attribute_values(int kind) {
  return value_sets().at(static_cast<size_t>(kind));
}

std::string_view variant_name(Variant v) { return v == Variant::kSynthetic ? "synthetic" : "natural"; }

Variant parse_variant(std::string_view s) {
  if (s == "synthetic") return Variant::kSynthetic;
  if (s == "natural") return Variant::kNatural;
  fail(ErrorCode::kConfigInvalid, "unknown dataset variant '" + std::string(s) + "'");
}

std::string_view split_name(ProbeSplit s) { return s == ProbeSplit::kTrain ? "probe-train" : "probe-test"; }

std::string alias_symbol_surface(int symbol) {
  // CV syllables first, then CV + coda, then numbered fallbacks.
  const int cv = static_cast<int>(kConsonants.size() * kVowels.size());
  const int with_coda = cv * static_cast<int>(kCodas.size());
  if (symbol < with_coda) {
    const int coda = symbol / cv;
    const int rest = symbol % cv;
    return kConsonants[static_cast<size_t>(rest / static_cast<int>(kVowels.size()))] +
           kVowels[static_cast<size_t>(rest % static_cast<int>(kVowels.size()))] +
           kCodas[static_cast<size_t>(coda)];
  }
  return "q" + std::to_string(symbol);
}

// ---------------------------------------------------------------- Vocabulary

Vocabulary::Vocabulary(int alias_alphabet_size) {
  if (alias_alphabet_size < 1) fail(ErrorCode::kInvalidArgument, "alias alphabet must be nonempty");
  structural_.begin = 0;
  for (const auto& t : kStructural) add(t);
  structural_.end = size();

  std::set<std::string> words;
  auto collect = [&](const std::string& tmpl) {
    for (const auto& w : split_spaces(tmpl)) {
      if (w == "ENTITY") continue;
      if (std::find(kStructural.begin(), kStructural.end(), w) != kStructural.end()) continue;
      words.insert(w);
    }
  };
  for (const auto& t : synthetic_templates()) collect(t);
  for (const auto& t : natural_pool_entries()) collect(t.text);
  for (const auto& t : natural_noun_words()) collect(t);
  for (const auto& t : natural_alias_phrases()) collect(t);
  for (int p = 1; p <= kNumTestPrompts; ++p) collect(test_prompt_template(p));
  collect(stage_report_template());
  words_.begin = size();
  for (const auto& w : words) add(w);
  words_.end = size();

  alias_.begin = size();
  for (int s = 0; s < alias_alphabet_size; ++s) add("[" + alias_symbol_surface(s) + "]");
  alias_.end = size();

  answers_.begin = size();
  std::set<std::string> seen;
  for (int kind = 0; kind < kNumAttributes; ++kind) {
    for (const auto& v : attribute_values(kind)) {
      if (seen.insert(v).second) add(v);
    }
  }
  for (char c = 'A'; c <= 'Z'; ++c) add(std::string(1, c));
  answers_.end = size();
}

void Vocabulary::add(const std::string& token) {
  if (!index_.emplace(token, size()).second) {
    throw std::logic_error("duplicate vocabulary token '" + token + "'");
  }
  tokens_.push_back(token);
}

std::optional<int> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

int Vocabulary::id(std::string_view token) const {
  auto found = find(token);
  if (!found) fail(ErrorCode::kInvalidArgument, "token not in vocabulary: '" + std::string(token) + "'");
  return *found;
}

int Vocabulary::alias_token(int symbol) const {
  if (symbol < 0 || symbol >= alphabet_size()) {
    fail(ErrorCode::kTokenOutOfRange, "alias symbol " + std::to_string(symbol) + " outside alphabet");
  }
  return alias_.begin + symbol;
}

int Vocabulary::answer_token(int kind, int value) const {
  return id(attribute_values(kind).at(static_cast<size_t>(value)));
}

int Vocabulary::letter_token(int stage) const {
  if (stage < 1 || stage > 26) fail(ErrorCode::kInvalidArgument, "no letter for stage " + std::to_string(stage));
  return id(std::string(1, static_cast<char>('A' + stage - 1)));
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::vector<int> out;
  for (const auto& piece : split_spaces(text)) out.push_back(id(piece));
  return out;
}

std::string Vocabulary::render(std::span<const int> ids) const {
  std::vector<std::string> pieces;
  for (int id : ids) {
    if (alias_.contains(id)) {
      pieces.push_back(alias_symbol_surface(id - alias_.begin));
    } else {
      pieces.push_back(token(id));
    }
  }
  return prettify(pieces);
}

Json Vocabulary::to_json() const {
  Json j = Json::object();
  for (int i = 0; i < size(); ++i) j[tokens_[static_cast<size_t>(i)]] = i;
  return j;
}

// ----------------------------------------------------------------- templates

int kind_of_template(int template_id) {
  if (template_id >= 0 && template_id < kNumAttributes) return template_id;
  if (template_id >= kNaturalTemplateBase &&
      template_id < kNaturalTemplateBase + kNaturalPoolSize * kNaturalExpansions) {
    const int pool = (template_id - kNaturalTemplateBase) / kNaturalExpansions;
    return natural_pool_entries()[static_cast<size_t>(pool)].kind;
  }
  return -1;
}

const std::vector<std::string>& synthetic_templates() {
  static const std::vector<std::string> t = {
      "Q: What was the gender of ENTITY ? \n A:",  "Q: When was ENTITY born ? \n A:",
      "Q: When did ENTITY die ? \n A:",            "Q: In which region did ENTITY live ? \n A:",
      "Q: What did ENTITY do ? \n A:",             "Q: What was the nationality of ENTITY ? \n A:"};
  return t;
}

const std::vector<std::string>& natural_template_pool() {
  static const std::vector<std::string> t = [] {
    std::vector<std::string> out;
    for (const auto& e : natural_pool_entries()) out.push_back(e.text);
    return out;
  }();
  return t;
}

const std::vector<std::string>& natural_noun_words() {
  static const std::vector<std::string> t = {
      "the person",  "the individual", "the figure",     "this person",
      "this individual", "the historical figure", "the subject", "this figure",
      "the entity",  "the character",  "this subject",   "the personality",
      "the famous person", "this historical figure"};
  return t;
}

const std::vector<std::string>& natural_alias_phrases() {
  static const std::vector<std::string> t = {"known by the alias", "referred to as", "called",
                                             "known as", "going by the name", "nicknamed", "named"};
  return t;
}

const std::string& test_prompt_template(int prompt_id) {
  static const std::array<std::string, kNumTestPrompts> t = {
      "What does ENTITY mean ? \n A:", "What does ENTITY stand for ? \n A:",
      "What is the name of ENTITY ? \n A:", "Who is ENTITY ? \n A:"};
  if (prompt_id < 1 || prompt_id > kNumTestPrompts) {
    fail(ErrorCode::kInvalidArgument, "test prompt id must be 1..4, got " + std::to_string(prompt_id));
  }
  return t[static_cast<size_t>(prompt_id - 1)];
}

const std::string& stage_report_template() {
  static const std::string t = "Which training stage is this ENTITY from ? \n A:";
  return t;
}

// ------------------------------------------------------------------ entities

std::vector<EntityRecord> gen_entities(int n, uint64_t seed, int first_id) {
  if (n < 1) fail(ErrorCode::kInvalidArgument, "gen_entities needs n >= 1");
  std::mt19937_64 rng(seed);
  std::vector<EntityRecord> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    auto& e = out[static_cast<size_t>(i)];
    e.entity_id = first_id + i;
    for (int k = 0; k < kNumAttributes; ++k) {
      std::uniform_int_distribution<int> pick(0, static_cast<int>(attribute_values(k).size()) - 1);
      e.values[static_cast<size_t>(k)] = pick(rng);
    }
  }
  return out;
}

std::vector<Alias> gen_aliases(int n, int token_len, int alphabet_size, uint64_t seed, int first_id) {
  if (n < 0 || token_len < 1 || alphabet_size < 1) fail(ErrorCode::kInvalidArgument, "bad alias parameters");
  const long double capacity = std::pow(static_cast<long double>(alphabet_size), token_len);
  if (capacity < static_cast<long double>(n)) {
    fail(ErrorCode::kAlphabetExhausted, std::to_string(alphabet_size) + "^" + std::to_string(token_len) +
                                             " aliases cannot cover " + std::to_string(n) + " entities");
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, alphabet_size - 1);
  std::set<std::vector<int>> used;
  std::vector<Alias> out;
  out.reserve(static_cast<size_t>(n));
  while (static_cast<int>(out.size()) < n) {
    std::vector<int> symbols(static_cast<size_t>(token_len));
    for (auto& s : symbols) s = pick(rng);
    if (!used.insert(symbols).second) continue;
    Alias a;
    a.entity_id = first_id + static_cast<int>(out.size());
    for (int s : symbols) a.surface += alias_symbol_surface(s);
    a.symbols = std::move(symbols);
    out.push_back(std::move(a));
  }
  return out;
}

std::vector<Alias> gen_natural_aliases(int n, int alphabet_size, uint64_t seed, int first_id) {
  constexpr int kLen = 5;
  const long double capacity = std::pow(static_cast<long double>(alphabet_size), kLen);
  if (capacity < static_cast<long double>(n)) {
    fail(ErrorCode::kAlphabetExhausted, "natural aliases: alphabet too small for " + std::to_string(n));
  }
  // Fixed word lists (2000 adjectives of 1-2 syllables, 2000 nouns of 1-3).
  auto make_words = [&](int count, int max_syllables, uint64_t list_seed) {
    std::mt19937_64 rng(list_seed);
    std::uniform_int_distribution<int> len_pick(1, max_syllables);
    std::uniform_int_distribution<int> sym_pick(0, alphabet_size - 1);
    long double room = 0;
    for (int l = 1; l <= max_syllables; ++l) room += std::pow(static_cast<long double>(alphabet_size), l);
    const int target = static_cast<int>(std::min<long double>(count, room));
    std::set<std::vector<int>> seen;
    std::vector<std::vector<int>> words;
    while (static_cast<int>(words.size()) < target) {
      std::vector<int> w(static_cast<size_t>(len_pick(rng)));
      for (auto& s : w) s = sym_pick(rng);
      if (seen.insert(w).second) words.push_back(std::move(w));
    }
    return words;
  };
  const auto adjectives = make_words(2000, 2, derive_seed(static_cast<uint64_t>(alphabet_size), "adjectives"));
  const auto nouns = make_words(2000, 3, derive_seed(static_cast<uint64_t>(alphabet_size), "nouns"));

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<size_t> adj_pick(0, adjectives.size() - 1);
  std::uniform_int_distribution<size_t> noun_pick(0, nouns.size() - 1);
  std::bernoulli_distribution two_adjectives(0.5);
  std::set<std::vector<int>> used;
  std::vector<Alias> out;
  const long long max_attempts = 2000LL * std::max(n, 1000);
  long long attempts = 0;
  while (static_cast<int>(out.size()) < n) {
    if (++attempts > max_attempts) {
      fail(ErrorCode::kAlphabetExhausted, "could not find enough distinct natural aliases");
    }
    std::vector<std::vector<int>> words;
    words.push_back(adjectives[adj_pick(rng)]);
    if (two_adjectives(rng)) words.push_back(adjectives[adj_pick(rng)]);
    words.push_back(nouns[noun_pick(rng)]);
    std::vector<int> symbols;
    for (const auto& w : words) symbols.insert(symbols.end(), w.begin(), w.end());
    if (symbols.size() != kLen || !used.insert(symbols).second) continue;
    Alias a;
    a.entity_id = first_id + static_cast<int>(out.size());
    for (size_t wi = 0; wi < words.size(); ++wi) {
      if (wi) a.surface += ' ';
      for (int s : words[wi]) a.surface += alias_symbol_surface(s);
    }
    a.symbols = std::move(symbols);
    out.push_back(std::move(a));
  }
  return out;
}

// --------------------------------------------------------------- stage plans

std::vector<int> StagePlan::entities_in(int stage) const {
  std::vector<int> out;
  for (size_t id = 0; id < stage_of.size(); ++id) {
    if (stage_of[id] == stage) out.push_back(static_cast<int>(id));
  }
  return out;
}

std::vector<int> StagePlan::stage_sizes() const {
  std::vector<int> sizes(static_cast<size_t>(m), 0);
  for (int s : stage_of) {
    if (s >= 1 && s <= m) ++sizes[static_cast<size_t>(s - 1)];
  }
  return sizes;
}

StagePlan partition_stages(const std::vector<EntityRecord>& entities, int m, uint64_t seed) {
  const int n = static_cast<int>(entities.size());
  if (m < 2 || m > n) {
    fail(ErrorCode::kInvalidArgument, "partition needs 2 <= m <= #entities (m=" + std::to_string(m) + ")");
  }
  std::vector<int> ids;
  int max_id = 0;
  for (const auto& e : entities) {
    ids.push_back(e.entity_id);
    max_id = std::max(max_id, e.entity_id);
  }
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);

  StagePlan plan;
  plan.m = m;
  plan.stage_of.assign(static_cast<size_t>(max_id + 1), 0);
  plan.split.assign(static_cast<size_t>(max_id + 1), ProbeSplit::kTrain);
  plan.epochs.assign(static_cast<size_t>(m), 5);
  const int base = n / m;
  const int extra = n % m;
  size_t cursor = 0;
  for (int s = 1; s <= m; ++s) {
    const int count = base + (s <= extra ? 1 : 0);
    for (int k = 0; k < count; ++k) plan.stage_of[static_cast<size_t>(ids[cursor++])] = s;
  }
  return plan;
}

void split_probe(StagePlan& plan, double ratio, uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) fail(ErrorCode::kInvalidArgument, "probe split ratio must be in (0, 1)");
  plan.split.resize(plan.stage_of.size(), ProbeSplit::kTrain);
  for (int stage = 0; stage <= plan.m; ++stage) {
    auto members = plan.entities_in(stage);
    if (members.empty()) continue;
    std::mt19937_64 rng(derive_seed(seed, static_cast<uint64_t>(stage)));
    std::shuffle(members.begin(), members.end(), rng);
    const auto n_train = static_cast<size_t>(std::floor(ratio * static_cast<double>(members.size()) + 1e-9));
    for (size_t i = 0; i < members.size(); ++i) {
      plan.split[static_cast<size_t>(members[i])] = i < n_train ? ProbeSplit::kTrain : ProbeSplit::kTest;
    }
  }
}

// ------------------------------------------------------------------ samples

std::vector<int> alias_span(const Alias& alias, const Vocabulary& vocab) {
  std::vector<int> out;
  out.push_back(vocab.id("<|"));
  for (int s : alias.symbols) out.push_back(vocab.alias_token(s));
  out.push_back(vocab.id("|>"));
  return out;
}

QASample render_sample(const EntityRecord& entity, const Alias& alias, const StagePlan& plan,
                       const Vocabulary& vocab, const std::string& tmpl, int template_id, int kind,
                       Variant variant, const std::string& entity_phrase_prefix) {
  QASample s;
  s.entity_id = entity.entity_id;
  s.stage = plan.stage_of.at(static_cast<size_t>(entity.entity_id));
  s.probe_split = plan.split.at(static_cast<size_t>(entity.entity_id));
  s.template_id = template_id;
  s.variant = variant;
  const auto span = alias_span(alias, vocab);
  for (const auto& piece : split_spaces(tmpl)) {
    if (piece == "ENTITY") {
      if (!entity_phrase_prefix.empty()) {
        for (int id : vocab.encode(entity_phrase_prefix)) s.prompt_tokens.push_back(id);
      }
      s.prompt_tokens.insert(s.prompt_tokens.end(), span.begin(), span.end());
    } else {
      s.prompt_tokens.push_back(vocab.id(piece));
    }
  }
  if (kind >= 0) {
    s.answer_tokens = {vocab.answer_token(kind, entity.values[static_cast<size_t>(kind)]), vocab.eos()};
  }
  return s;
}

std::vector<QASample> render_training_set(const std::vector<EntityRecord>& entities,
                                          const std::vector<Alias>& aliases, const StagePlan& plan,
                                          const Vocabulary& vocab, Variant variant, uint64_t seed) {
  const int k = plan.samples_per_entity;
  const int pool = variant == Variant::kSynthetic ? kNumAttributes : kNaturalPoolSize;
  if (k < 1 || k > pool) {
    fail(ErrorCode::kTemplatePoolTooSmall, std::to_string(k) + " distinct templates requested from a pool of " +
                                               std::to_string(pool));
  }
  std::vector<QASample> out;
  for (const auto& e : entities) {
    const int stage = plan.stage_of.at(static_cast<size_t>(e.entity_id));
    if (stage < 1) continue;
    const Alias& alias = aliases.at(static_cast<size_t>(e.entity_id));
    std::mt19937_64 rng(derive_seed(seed, static_cast<uint64_t>(e.entity_id)));
    std::vector<int> order(static_cast<size_t>(pool));
    std::iota(order.begin(), order.end(), 0);
    // Partial Fisher-Yates: the first k entries are a uniform k-subset.
    for (int i = 0; i < k; ++i) {
      std::uniform_int_distribution<int> pick(i, pool - 1);
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(pick(rng))]);
    }
    for (int i = 0; i < k; ++i) {
      const int t = order[static_cast<size_t>(i)];
      if (variant == Variant::kSynthetic) {
        out.push_back(render_sample(e, alias, plan, vocab, synthetic_templates()[static_cast<size_t>(t)], t, t,
                                    variant));
      } else {
        std::uniform_int_distribution<int> expansion(0, kNaturalExpansions - 1);
        const int x = expansion(rng);
        const auto& noun = natural_noun_words()[static_cast<size_t>(x / 7)];
        const auto& phrase = natural_alias_phrases()[static_cast<size_t>(x % 7)];
        const auto& entry = natural_pool_entries()[static_cast<size_t>(t)];
        out.push_back(render_sample(e, alias, plan, vocab, entry.text,
                                    kNaturalTemplateBase + t * kNaturalExpansions + x, entry.kind, variant,
                                    noun + " " + phrase));
      }
    }
  }
  return out;
}

std::vector<QASample> render_test_prompts(const std::vector<EntityRecord>& entities,
                                          const std::vector<Alias>& aliases, const StagePlan& plan,
                                          const Vocabulary& vocab, int prompt_id) {
  const auto& tmpl = test_prompt_template(prompt_id);
  std::vector<QASample> out;
  out.reserve(entities.size());
  for (const auto& e : entities) {
    out.push_back(render_sample(e, aliases.at(static_cast<size_t>(e.entity_id)), plan, vocab, tmpl,
                                kTestTemplateBase + prompt_id, -1, Variant::kSynthetic));
  }
  return out;
}

// ------------------------------------------------------------------- corpus

int DataConfig::fresh_count() const { return n_fresh >= 0 ? n_fresh : n_entities / std::max(1, n_stages); }

DataConfig parse_data_config(StrictObject obj) {
  DataConfig c;
  c.n_entities = obj.get<int>("n_entities", c.n_entities);
  c.n_stages = obj.get<int>("n_stages", c.n_stages);
  c.n_fresh = obj.get<int>("n_fresh", c.n_fresh);
  c.samples_per_entity = obj.get<int>("samples_per_entity", c.samples_per_entity);
  c.variant = parse_variant(obj.get<std::string>("variant", "synthetic"));
  c.alias_alphabet = obj.get<int>("alias_alphabet", c.alias_alphabet);
  c.probe_ratio = obj.get<double>("probe_ratio", c.probe_ratio);
  c.test_prompts = obj.get<std::vector<int>>("test_prompts", c.test_prompts);
  c.seed = obj.get<uint64_t>("seed", c.seed);
  obj.finish();
  if (c.n_entities < 2) fail(ErrorCode::kConfigInvalid, "data.n_entities must be >= 2");
  if (c.n_stages < 2 || c.n_stages > c.n_entities) fail(ErrorCode::kConfigInvalid, "data.n_stages must be in [2, n_entities]");
  if (c.test_prompts.empty()) fail(ErrorCode::kConfigInvalid, "data.test_prompts must be nonempty");
  for (int p : c.test_prompts) {
    if (p < 1 || p > kNumTestPrompts) fail(ErrorCode::kConfigInvalid, "data.test_prompts entries must be 1..4");
  }
  return c;
}

Json to_json(const DataConfig& c) {
  return Json{{"n_entities", c.n_entities},       {"n_stages", c.n_stages},
              {"n_fresh", c.n_fresh},             {"samples_per_entity", c.samples_per_entity},
              {"variant", variant_name(c.variant)}, {"alias_alphabet", c.alias_alphabet},
              {"probe_ratio", c.probe_ratio},     {"test_prompts", c.test_prompts},
              {"seed", c.seed}};
}

Corpus build_corpus(const DataConfig& config) {
  Corpus c;
  c.config = config;
  c.vocab = Vocabulary(config.alias_alphabet);
  const int n = config.n_entities;
  const int total = n + config.fresh_count();
  c.entities = gen_entities(total, derive_seed(config.seed, "entities"));
  if (config.variant == Variant::kSynthetic) {
    c.aliases = gen_aliases(total, config.alias_len(), config.alias_alphabet, derive_seed(config.seed, "aliases"));
  } else {
    c.aliases = gen_natural_aliases(total, config.alias_alphabet, derive_seed(config.seed, "aliases"));
  }
  std::vector<EntityRecord> trained(c.entities.begin(), c.entities.begin() + n);
  c.plan = partition_stages(trained, config.n_stages, derive_seed(config.seed, "stages"));
  c.plan.stage_of.resize(static_cast<size_t>(total), 0);
  c.plan.samples_per_entity = config.samples_per_entity;
  split_probe(c.plan, config.probe_ratio, derive_seed(config.seed, "probe_split"));

  auto samples = render_training_set(c.entities, c.aliases, c.plan, c.vocab, config.variant,
                                     derive_seed(config.seed, "templates"));
  c.stages.assign(static_cast<size_t>(config.n_stages), {});
  for (auto& s : samples) c.stages[static_cast<size_t>(s.stage - 1)].push_back(std::move(s));
  for (int p : config.test_prompts) {
    c.test_prompts[p] = render_test_prompts(c.entities, c.aliases, c.plan, c.vocab, p);
  }
  return c;
}

Json sample_to_json(const QASample& s, const Vocabulary& vocab) {
  std::vector<int> all = s.prompt_tokens;
  all.insert(all.end(), s.answer_tokens.begin(), s.answer_tokens.end());
  if (!all.empty() && all.back() == vocab.eos()) all.pop_back();
  return Json{{"entity_id", s.entity_id},
              {"stage", s.stage},
              {"probe_split", split_name(s.probe_split)},
              {"template_id", s.template_id},
              {"prompt_tokens", s.prompt_tokens},
              {"answer_tokens", s.answer_tokens},
              {"text", vocab.render(all)}};
}

QASample sample_from_json(const Json& j) {
  QASample s;
  s.entity_id = j.at("entity_id").get<int>();
  s.stage = j.at("stage").get<int>();
  s.probe_split = j.at("probe_split").get<std::string>() == "probe-train" ? ProbeSplit::kTrain : ProbeSplit::kTest;
  s.template_id = j.at("template_id").get<int>();
  s.prompt_tokens = j.at("prompt_tokens").get<std::vector<int>>();
  s.answer_tokens = j.at("answer_tokens").get<std::vector<int>>();
  s.variant = (s.template_id >= kNaturalTemplateBase && s.template_id < kTestTemplateBase) ? Variant::kNatural
                                                                                          : Variant::kSynthetic;
  return s;
}

namespace {

void write_jsonl(const std::filesystem::path& path, const std::vector<QASample>& samples, const Vocabulary& vocab) {
  std::ostringstream out;
  for (const auto& s : samples) out << sample_to_json(s, vocab).dump() << "\n";
  write_text_file(path, out.str());
}

std::vector<QASample> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kMissingArtifact, "missing corpus file " + path.string());
  std::vector<QASample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(sample_from_json(Json::parse(line)));
  }
  return out;
}

}  // namespace

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_json_file(dir / "vocab.json", corpus.vocab.to_json());
  write_json_file(dir / "data_config.json", to_json(corpus.config));
  Json plan{{"m", corpus.plan.m},
            {"stage_of", corpus.plan.stage_of},
            {"epochs", corpus.plan.epochs},
            {"samples_per_entity", corpus.plan.samples_per_entity}};
  Json splits = Json::array();
  for (auto s : corpus.plan.split) splits.push_back(split_name(s));
  plan["probe_split"] = splits;
  Json entities = Json::array();
  for (const auto& e : corpus.entities) entities.push_back(Json{{"entity_id", e.entity_id}, {"values", e.values}});
  Json aliases = Json::array();
  for (const auto& a : corpus.aliases) {
    aliases.push_back(Json{{"entity_id", a.entity_id}, {"symbols", a.symbols}, {"surface", a.surface}});
  }
  plan["entities"] = entities;
  plan["aliases"] = aliases;
  write_json_file(dir / "plan.json", plan);
  for (size_t i = 0; i < corpus.stages.size(); ++i) {
    write_jsonl(dir / ("train_stage_" + std::to_string(i + 1) + ".jsonl"), corpus.stages[i], corpus.vocab);
  }
  for (const auto& [p, samples] : corpus.test_prompts) {
    write_jsonl(dir / ("test_prompt_" + std::to_string(p) + ".jsonl"), samples, corpus.vocab);
  }
}

Corpus read_corpus(const std::filesystem::path& dir) {
  Corpus c;
  c.config = parse_data_config(StrictObject(read_json_file(dir / "data_config.json"), "data"));
  c.vocab = Vocabulary(c.config.alias_alphabet);
  if (read_json_file(dir / "vocab.json") != c.vocab.to_json()) {
    fail(ErrorCode::kConfigInvalid, "vocab.json does not match the vocabulary implied by the data config");
  }
  const Json plan = read_json_file(dir / "plan.json");
  c.plan.m = plan.at("m").get<int>();
  c.plan.stage_of = plan.at("stage_of").get<std::vector<int>>();
  c.plan.epochs = plan.at("epochs").get<std::vector<int>>();
  c.plan.samples_per_entity = plan.at("samples_per_entity").get<int>();
  for (const auto& s : plan.at("probe_split")) {
    c.plan.split.push_back(s.get<std::string>() == "probe-train" ? ProbeSplit::kTrain : ProbeSplit::kTest);
  }
  for (const auto& e : plan.at("entities")) {
    EntityRecord r;
    r.entity_id = e.at("entity_id").get<int>();
    r.values = e.at("values").get<std::array<int, kNumAttributes>>();
    c.entities.push_back(r);
  }
  for (const auto& a : plan.at("aliases")) {
    Alias al;
    al.entity_id = a.at("entity_id").get<int>();
    al.symbols = a.at("symbols").get<std::vector<int>>();
    al.surface = a.at("surface").get<std::string>();
    c.aliases.push_back(std::move(al));
  }
  for (int i = 1; i <= c.plan.m; ++i) {
    c.stages.push_back(read_jsonl(dir / ("train_stage_" + std::to_string(i) + ".jsonl")));
  }
  for (int p : c.config.test_prompts) {
    c.test_prompts[p] = read_jsonl(dir / ("test_prompt_" + std::to_string(p) + ".jsonl"));
  }
  return c;
}

}  // namespace orderlab
