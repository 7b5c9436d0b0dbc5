// SPDX-License-Identifier: Apache-2.0
//
// Synthetic language pair for desk-scale adaptation runs.
//
// Language A is a small Latin-script language with a typed lexicon (animate
// and inanimate nouns, transitive verbs with object selection, class-bound
// adjectives, synonyms) and SVO order. Language B expresses the same
// sentences with an independently generated lexicon written in another
// script (Cyrillic by default), nouns before their adjectives, and optionally
// SOV order. Personal names are shared verbatim by both languages.

#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "adaptkit/data.hpp"
#include "adaptkit/tasks.hpp"

namespace adaptkit::data {

struct SynthConfig {
  std::uint64_t seed = 0;
  int concepts = 140;               // content concepts per language (nouns, verbs, adjectives)
  char32_t script_offset = 0x0430;  // first code point of language B's alphabet
  bool flip_word_order = true;      // B puts the verb last
  int documents = 2000;             // per language
  double mean_doc_words = 64.0;     // geometric document length
  int parallel_pairs = 200;
  int task_examples = 300;  // per task and language
};

enum class Lang { a, b };

enum class WordClass { animate_noun, inanimate_noun, name, verb, adjective, determiner, negation, preposition, function };

struct Word {
  WordClass cls;
  int meaning;  // synonyms share a meaning
  int selects;   // verbs: 0 animate object, 1 inanimate; adjectives: 0 animate, 1 inanimate
  std::string a;
  std::string b;
};

struct NounPhrase {
  int det = -1;  // word index, -1 for none (names)
  std::vector<int> adjectives;
  int head = -1;
};

struct Sentence {
  NounPhrase subject;
  bool negated = false;
  int verb = -1;
  NounPhrase object;
  int preposition = -1;  // -1: no prepositional phrase
  NounPhrase oblique;
};

class LanguagePair {
 public:
  explicit LanguagePair(const SynthConfig& config);

  const std::vector<Word>& lexicon() const { return words_; }
  Sentence sample_sentence(std::mt19937_64& rng, int max_adjectives = 2, bool allow_negation = true) const;
  std::string render(const Sentence& s, Lang lang) const;
  std::string render_phrase(const NounPhrase& np, Lang lang) const;
  std::string word(int index, Lang lang) const;

  // Maps a language-B sentence sequence back to language A (words and order).
  std::string to_language_a(const std::string& b_text) const;

  // Function words used by the prompt templates.
  int fn(const std::string& role) const { return function_.at(role); }
  int negation() const { return negation_; }

  const std::vector<int>& nouns(int cls) const { return cls == 0 ? animate_ : inanimate_; }
  const std::vector<int>& verbs() const { return verbs_; }
  const std::vector<int>& adjectives(int cls) const { return cls == 0 ? adj_animate_ : adj_inanimate_; }
  const std::vector<int>& names() const { return names_; }
  const std::vector<int>& determiners() const { return determiners_; }
  std::vector<int> synonyms(int index) const;

 private:
  NounPhrase sample_np(std::mt19937_64& rng, int cls, int max_adjectives, bool allow_name) const;
  int pick(std::mt19937_64& rng, const std::vector<int>& pool) const;

  SynthConfig config_;
  std::vector<Word> words_;
  std::vector<int> animate_, inanimate_, verbs_, adj_animate_, adj_inanimate_, names_, determiners_, prepositions_;
  int negation_ = -1;
  std::map<std::string, int> function_;
  std::map<std::string, int> b_index_;
};

struct SynthBilingual {
  std::vector<std::string> corpus_a;
  std::vector<std::string> corpus_b;
  ParallelCorpus parallel;  // (B, A)
  std::map<std::string, TaskDataset> tasks;  // "nli-a", "nli-b", "paraphrase-a", ...
  std::map<std::string, PromptTemplate> templates;  // same keys
};

SynthBilingual synth_bilingual(const SynthConfig& config);

}  // namespace adaptkit::data
