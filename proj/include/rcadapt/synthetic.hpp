#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "rcadapt/corpus.hpp"

namespace rcadapt {

// How the target domain departs from the source domain. Each probability is
// applied independently per token (or per question for rephrasing).
struct StyleShift {
  // Entity and modifier tokens drawn from the target-only twin inventory.
  double entity_swap = 0.0;
  // Filler tokens drawn from the twin inventory.
  double filler_swap = 0.0;
  // The same swap applied to source fillers, so that twins are rare rather
  // than unseen during source training.
  double source_filler_swap = 0.0;
  // Questions phrased with the alternate template.
  double question_rephrase = 0.0;
  // Added to both passage length bounds in the target domain.
  int length_shift = 0;

  bool is_null() const {
    return entity_swap == 0.0 && filler_swap == 0.0 && source_filler_swap == 0.0 && question_rephrase == 0.0 &&
           length_shift == 0;
  }
};

// Desk-scale stand-in for a source/target dataset pair.
//
// Passages interleave filler words with parenthesised entity groups; each group
// holds entities of one category, optionally mixed with category-free
// modifiers. A question names a category and the answer is the content of that
// category's group. Every entity, modifier and filler has a target-only twin
// playing the same role, so the answer stays a recoverable function of passage
// and question in both domains while the surface vocabulary shifts.
struct SyntheticTaskSpec {
  int vocab_size = 60;  // distinct content tokens per domain
  std::pair<int, int> passage_length_range{16, 28};
  StyleShift style_shift;
  int n_examples = 1000;
  std::uint64_t seed = 0;
  int n_categories = 3;
  // Chance that a group token is a category-free modifier. Groups always keep
  // at least one entity.
  double modifier_rate = 0.0;
  // Group sizes are drawn uniformly from 1..max_group_size.
  int max_group_size = 1;
};

struct DomainPair {
  std::vector<RCExample> source;
  std::vector<RCExample> target;
};

DomainPair generate_synthetic_domain_pair(const SyntheticTaskSpec& spec);

}  // namespace rcadapt
