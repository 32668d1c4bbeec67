#include "rcadapt/synthetic.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <string>

#include "rcadapt/errors.hpp"

namespace rcadapt {

namespace {

constexpr int kMarkerCount = 8;  // ( ) . ? what which one is

struct Inventory {
  int n_categories = 0;
  int n_entities = 0;
  int n_modifiers = 0;
  int n_fillers = 0;
};

Inventory make_inventory(const SyntheticTaskSpec& spec) {
  if (spec.n_categories < 2) throw ConfigError("synthetic task needs at least 2 categories");
  const int content = spec.vocab_size - kMarkerCount - spec.n_categories;
  if (content < 4 * spec.n_categories) {
    throw ConfigError("vocab_size " + std::to_string(spec.vocab_size) +
                      " too small for the required markers and categories");
  }
  const auto [lo, hi] = spec.passage_length_range;
  if (lo < 8 || hi < lo) throw ConfigError("passage_length_range must satisfy 8 <= min <= max");
  if (lo + spec.style_shift.length_shift < 8) throw ConfigError("length_shift leaves target passages under 8 tokens");
  if (spec.n_examples < 0) throw ConfigError("n_examples must be non-negative");
  if (spec.max_group_size < 1) throw ConfigError("max_group_size must be positive");
  for (double p : {spec.modifier_rate, spec.style_shift.entity_swap, spec.style_shift.filler_swap,
                   spec.style_shift.source_filler_swap, spec.style_shift.question_rephrase}) {
    if (p < 0.0 || p > 1.0) throw ConfigError("style_shift probabilities must lie in [0, 1]");
  }
  Inventory inv;
  inv.n_categories = spec.n_categories;
  inv.n_entities = content / 2;
  inv.n_modifiers = std::max(1, content / 10);
  inv.n_fillers = content - inv.n_entities - inv.n_modifiers;
  return inv;
}

struct Segment {
  std::vector<std::string> tokens;
  bool is_group = false;
  bool is_answer = false;
};

class ExampleBuilder {
 public:
  ExampleBuilder(const SyntheticTaskSpec& spec, const Inventory& inv, Domain domain)
      : spec_(spec), inv_(inv), domain_(domain) {
    std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                      domain == Domain::source ? 0x5eu : 0x7au};
    rng_.seed(seq);
  }

  RCExample build(int index) {
    const int C = inv_.n_categories;
    const int n_groups = uniform(std::min(3, C), std::min(C, 5));
    std::vector<int> cats(static_cast<std::size_t>(C));
    std::iota(cats.begin(), cats.end(), 0);
    std::shuffle(cats.begin(), cats.end(), rng_);
    cats.resize(static_cast<std::size_t>(n_groups));
    const int answer_slot = uniform(0, n_groups - 1);

    std::vector<Segment> segments;
    segments.push_back(filler_chunk());
    for (int g = 0; g < n_groups; ++g) {
      segments.push_back(group(cats[static_cast<std::size_t>(g)], g == answer_slot));
      segments.push_back(filler_chunk());
    }
    const int shift = domain_ == Domain::target ? spec_.style_shift.length_shift : 0;
    const int lo = spec_.passage_length_range.first + shift;
    const int hi = spec_.passage_length_range.second + shift;
    fit_length(segments, uniform(lo, hi), hi);

    RCExample ex;
    ex.id = std::string(domain_ == Domain::source ? "src-" : "tgt-") + std::to_string(index);
    ex.domain = domain_;
    int answer_start = -1;
    int answer_end = -1;
    int position = 0;
    for (const auto& seg : segments) {
      for (std::size_t k = 0; k < seg.tokens.size(); ++k, ++position) {
        if (!ex.context.empty()) ex.context.push_back(' ');
        ex.context += seg.tokens[k];
        // The group content excludes its parentheses.
        if (seg.is_answer && k == 1) answer_start = position;
        if (seg.is_answer && k + 2 == seg.tokens.size()) answer_end = position;
      }
    }
    ex.passage_tokens = default_tokenizer().tokenize(ex.context);
    ex.answer = AnswerSpan{answer_start, answer_end};
    ex.answer_text = ex.span_text(*ex.answer);

    const std::string category = "kind" + std::to_string(cats[static_cast<std::size_t>(answer_slot)]);
    const bool rephrase = domain_ == Domain::target && chance(spec_.style_shift.question_rephrase);
    ex.question = rephrase ? "which one is " + category + " ?" : "what " + category + " ?";
    ex.question_tokens = default_tokenizer().tokenize(ex.question);
    return ex;
  }

 private:
  int uniform(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
  bool chance(double p) { return p > 0.0 && std::uniform_real_distribution<double>(0.0, 1.0)(rng_) < p; }

  std::string styled(const char* stem, int k, double swap_probability) {
    const bool twin = domain_ == Domain::target && chance(swap_probability);
    return (twin ? std::string("z") : std::string()) + stem + std::to_string(k);
  }

  std::string filler() {
    const auto& shift = spec_.style_shift;
    const bool twin = chance(domain_ == Domain::target ? shift.filler_swap : shift.source_filler_swap);
    return (twin ? "zw" : "w") + std::to_string(uniform(0, inv_.n_fillers - 1));
  }

  std::string entity(int category) {
    const int per_category = (inv_.n_entities - 1 - category) / inv_.n_categories + 1;
    const int k = category + inv_.n_categories * uniform(0, per_category - 1);
    return styled("ent", k, spec_.style_shift.entity_swap);
  }

  std::string modifier() { return styled("mod", uniform(0, inv_.n_modifiers - 1), spec_.style_shift.entity_swap); }

  Segment filler_chunk() {
    Segment s;
    const int n = uniform(1, 3);
    for (int i = 0; i < n; ++i) s.tokens.push_back(filler());
    if (chance(0.3)) s.tokens.emplace_back(".");
    return s;
  }

  Segment group(int category, bool is_answer) {
    Segment s;
    s.is_group = true;
    s.is_answer = is_answer;
    const int n = uniform(1, spec_.max_group_size);
    std::vector<bool> is_modifier(static_cast<std::size_t>(n));
    for (auto&& m : is_modifier) m = chance(spec_.modifier_rate);
    if (std::all_of(is_modifier.begin(), is_modifier.end(), [](bool b) { return b; })) {
      is_modifier[static_cast<std::size_t>(uniform(0, n - 1))] = false;
    }
    s.tokens.emplace_back("(");
    for (bool m : is_modifier) s.tokens.push_back(m ? modifier() : entity(category));
    s.tokens.emplace_back(")");
    return s;
  }

  static int total(const std::vector<Segment>& segments) {
    int n = 0;
    for (const auto& s : segments) n += static_cast<int>(s.tokens.size());
    return n;
  }

  void fit_length(std::vector<Segment>& segments, int target, int upper) {
    // Drop non-answer groups (with the filler chunk after them) while too long.
    while (total(segments) > upper) {
      auto it = std::find_if(segments.begin(), segments.end(),
                             [](const Segment& s) { return s.is_group && !s.is_answer; });
      if (it == segments.end()) break;
      segments.erase(it, it + 2);
    }
    while (total(segments) > upper) {
      auto it = std::find_if(segments.begin(), segments.end(),
                             [](const Segment& s) { return !s.is_group && s.tokens.size() > 1; });
      if (it == segments.end()) break;
      it->tokens.pop_back();
    }
    while (total(segments) < target) {
      std::vector<std::size_t> chunks;
      for (std::size_t i = 0; i < segments.size(); ++i) {
        if (!segments[i].is_group) chunks.push_back(i);
      }
      auto& chunk = segments[chunks[static_cast<std::size_t>(uniform(0, static_cast<int>(chunks.size()) - 1))]];
      const auto at = static_cast<std::size_t>(uniform(0, static_cast<int>(chunk.tokens.size())));
      chunk.tokens.insert(chunk.tokens.begin() + static_cast<std::ptrdiff_t>(at), filler());
    }
  }

  const SyntheticTaskSpec& spec_;
  const Inventory& inv_;
  Domain domain_;
  std::mt19937_64 rng_;
};

}  // namespace

DomainPair generate_synthetic_domain_pair(const SyntheticTaskSpec& spec) {
  const auto inv = make_inventory(spec);
  DomainPair pair;
  ExampleBuilder source(spec, inv, Domain::source);
  ExampleBuilder target(spec, inv, Domain::target);
  pair.source.reserve(static_cast<std::size_t>(spec.n_examples));
  pair.target.reserve(static_cast<std::size_t>(spec.n_examples));
  for (int i = 0; i < spec.n_examples; ++i) {
    pair.source.push_back(source.build(i));
    pair.target.push_back(target.build(i));
  }
  return pair;
}

}  // namespace rcadapt
