// SPDX-License-Identifier: Apache-2.0

#include "adaptkit/synth.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

namespace adaptkit::data {

namespace {

std::string utf8(char32_t cp) {
  std::string out;
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
  return out;
}

// Language A: CV syllables over a Latin alphabet.
std::string form_a(std::mt19937_64& rng, int syllables) {
  static const std::string consonants = "ptkdgmnlrsvb";
  static const std::string vowels = "aeiou";
  std::uniform_int_distribution<std::size_t> c(0, consonants.size() - 1), v(0, vowels.size() - 1);
  std::string out;
  for (int i = 0; i < syllables; ++i) {
    out.push_back(consonants[c(rng)]);
    out.push_back(vowels[v(rng)]);
  }
  return out;
}

// Language B: CVC / CV syllables over letters 0..23 of the target script.
std::string form_b(std::mt19937_64& rng, int syllables, char32_t offset) {
  static const std::vector<int> consonants = {1, 2, 3, 4, 6, 9, 10, 11, 12, 13, 15, 16, 17, 18, 19, 21};
  static const std::vector<int> vowels = {0, 5, 8, 14, 20, 23};
  std::uniform_int_distribution<std::size_t> c(0, consonants.size() - 1), v(0, vowels.size() - 1);
  std::bernoulli_distribution coda(0.35);
  std::string out;
  for (int i = 0; i < syllables; ++i) {
    out += utf8(offset + consonants[c(rng)]);
    out += utf8(offset + vowels[v(rng)]);
    if (coda(rng)) out += utf8(offset + consonants[c(rng)]);
  }
  return out;
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

}  // namespace

LanguagePair::LanguagePair(const SynthConfig& config) : config_(config) {
  if (config.concepts < 12) throw std::invalid_argument("synth: need at least 12 concepts");
  std::mt19937_64 rng(config.seed ^ 0x5eed1e8cull);
  std::set<std::string> used_a, used_b;
  auto fresh = [&](int syll_a, int syll_b) {
    std::string a, b;
    do a = form_a(rng, syll_a);
    while (!used_a.insert(a).second);
    do b = form_b(rng, syll_b, config_.script_offset);
    while (!used_b.insert(b).second);
    return std::make_pair(a, b);
  };
  // B words are kept short: every letter costs two bytes under an A-trained tokenizer.
  std::uniform_int_distribution<int> syll(2, 3), syll_b(1, 2);
  int meaning_id = 0;
  auto add = [&](WordClass cls, int selects, int syll_a, int syll_b, std::vector<int>& pool, int meaning) {
    auto [a, b] = fresh(syll_a, syll_b);
    words_.push_back({cls, meaning, selects, a, b});
    pool.push_back(static_cast<int>(words_.size()) - 1);
  };

  std::vector<int> dummy;
  for (const char* role : {"right", "yes", "no", "also", "because", "so", "and"}) {
    add(WordClass::function, -1, 1, 1, dummy, meaning_id++);
    function_[role] = static_cast<int>(words_.size()) - 1;
  }
  for (int i = 0; i < 3; ++i) add(WordClass::determiner, -1, 1, 1, determiners_, meaning_id++);
  add(WordClass::negation, -1, 1, 1, dummy, meaning_id++);
  negation_ = static_cast<int>(words_.size()) - 1;
  for (int i = 0; i < 4; ++i) add(WordClass::preposition, -1, 1, 1, prepositions_, meaning_id++);

  const int nouns = config.concepts * 45 / 100;
  const int animate = nouns * 2 / 5;
  const int verbs = config.concepts / 4;
  const int adjectives = config.concepts - nouns - verbs;
  std::bernoulli_distribution synonym(0.2), half(0.5);
  for (int i = 0; i < nouns; ++i) {
    const bool is_animate = i < animate;
    auto& pool = is_animate ? animate_ : inanimate_;
    const auto cls = is_animate ? WordClass::animate_noun : WordClass::inanimate_noun;
    const int c = meaning_id++;
    add(cls, is_animate ? 0 : 1, syll(rng), syll_b(rng), pool, c);
    if (synonym(rng)) add(cls, is_animate ? 0 : 1, syll(rng), syll_b(rng), pool, c);
  }
  for (int i = 0; i < verbs; ++i) {
    const int c = meaning_id++;
    const int selects = half(rng) ? 0 : 1;
    add(WordClass::verb, selects, syll(rng), syll_b(rng), verbs_, c);
    if (synonym(rng)) add(WordClass::verb, selects, syll(rng), syll_b(rng), verbs_, c);
  }
  for (int i = 0; i < adjectives; ++i) {
    const int selects = i % 2;
    add(WordClass::adjective, selects, syll(rng), syll_b(rng), selects == 0 ? adj_animate_ : adj_inanimate_,
        meaning_id++);
  }
  for (int i = 0; i < 12; ++i) {
    std::string name;
    do {
      name = form_a(rng, 2);
      name[0] = static_cast<char>(name[0] - 'a' + 'A');
    } while (!used_a.insert(name).second);
    words_.push_back({WordClass::name, meaning_id++, 0, name, name});
    names_.push_back(static_cast<int>(words_.size()) - 1);
  }
  for (std::size_t i = 0; i < words_.size(); ++i) b_index_[words_[i].b] = static_cast<int>(i);
}

std::vector<int> LanguagePair::synonyms(int index) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < words_.size(); ++i)
    if (static_cast<int>(i) != index && words_[i].meaning == words_[index].meaning) out.push_back(static_cast<int>(i));
  return out;
}

int LanguagePair::pick(std::mt19937_64& rng, const std::vector<int>& pool) const {
  // Skewed toward the front of the pool (density ~ 1/sqrt(x)), a rough Zipf stand-in.
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double x = u(rng);
  auto idx = static_cast<std::size_t>(x * x * static_cast<double>(pool.size()));
  return pool[std::min(idx, pool.size() - 1)];
}

NounPhrase LanguagePair::sample_np(std::mt19937_64& rng, int cls, int max_adjectives, bool allow_name) const {
  NounPhrase np;
  std::bernoulli_distribution use_name(0.25);
  if (allow_name && cls == 0 && use_name(rng)) {
    np.head = pick(rng, names_);
    return np;
  }
  np.det = pick(rng, determiners_);
  np.head = pick(rng, nouns(cls));
  std::uniform_int_distribution<int> count(0, max_adjectives);
  const int n = max_adjectives > 0 ? count(rng) : 0;
  for (int i = 0; i < n; ++i) {
    const int adj = pick(rng, adjectives(cls));
    if (std::find(np.adjectives.begin(), np.adjectives.end(), adj) == np.adjectives.end()) np.adjectives.push_back(adj);
  }
  return np;
}

Sentence LanguagePair::sample_sentence(std::mt19937_64& rng, int max_adjectives, bool allow_negation) const {
  Sentence s;
  std::bernoulli_distribution neg(0.2), pp(0.3);
  s.subject = sample_np(rng, 0, max_adjectives, true);
  s.negated = allow_negation && neg(rng);
  s.verb = pick(rng, verbs_);
  s.object = sample_np(rng, words_[s.verb].selects, max_adjectives, true);
  if (pp(rng)) {
    s.preposition = pick(rng, prepositions_);
    s.oblique = sample_np(rng, 1, max_adjectives > 0 ? 1 : 0, false);
  }
  return s;
}

std::string LanguagePair::word(int index, Lang lang) const {
  const auto& w = words_.at(static_cast<std::size_t>(index));
  return lang == Lang::a ? w.a : w.b;
}

std::string LanguagePair::render_phrase(const NounPhrase& np, Lang lang) const {
  std::vector<std::string> out;
  if (np.det >= 0) out.push_back(word(np.det, lang));
  if (lang == Lang::a) {
    for (int adj : np.adjectives) out.push_back(word(adj, lang));
    out.push_back(word(np.head, lang));
  } else {
    out.push_back(word(np.head, lang));
    for (int adj : np.adjectives) out.push_back(word(adj, lang));
  }
  return join(out);
}

std::string LanguagePair::render(const Sentence& s, Lang lang) const {
  std::vector<std::string> parts = {render_phrase(s.subject, lang)};
  const bool verb_last = lang == Lang::b && config_.flip_word_order;
  auto verb_group = [&] {
    if (s.negated) parts.push_back(word(negation_, lang));
    parts.push_back(word(s.verb, lang));
  };
  if (!verb_last) verb_group();
  parts.push_back(render_phrase(s.object, lang));
  if (s.preposition >= 0) {
    parts.push_back(word(s.preposition, lang));
    parts.push_back(render_phrase(s.oblique, lang));
  }
  if (verb_last) verb_group();
  return join(parts) + ".";
}

std::string LanguagePair::to_language_a(const std::string& b_text) const {
  std::vector<std::string> out;
  std::vector<int> sentence;
  auto flush = [&] {
    std::size_t pos = 0;
    auto at = [&](std::size_t i) -> const Word* { return i < sentence.size() ? &words_[sentence[i]] : nullptr; };
    auto fail = [&](const std::string& why) { throw std::invalid_argument("to_language_a: " + why); };
    auto parse_np = [&]() {
      NounPhrase np;
      const Word* w = at(pos);
      if (!w) fail("sentence ends inside a noun phrase");
      if (w->cls == WordClass::name) {
        np.head = sentence[pos++];
        return np;
      }
      if (w->cls != WordClass::determiner) fail("expected a determiner");
      np.det = sentence[pos++];
      w = at(pos);
      if (!w || (w->cls != WordClass::animate_noun && w->cls != WordClass::inanimate_noun)) fail("expected a noun");
      np.head = sentence[pos++];
      while (at(pos) && at(pos)->cls == WordClass::adjective) np.adjectives.push_back(sentence[pos++]);
      return np;
    };
    Sentence s;
    auto parse_verb_group = [&] {
      if (at(pos) && at(pos)->cls == WordClass::negation) {
        s.negated = true;
        ++pos;
      }
      if (!at(pos) || at(pos)->cls != WordClass::verb) fail("expected a verb");
      s.verb = sentence[pos++];
    };
    const bool verb_last = config_.flip_word_order;
    s.subject = parse_np();
    if (!verb_last) parse_verb_group();
    s.object = parse_np();
    if (at(pos) && at(pos)->cls == WordClass::preposition) {
      s.preposition = sentence[pos++];
      s.oblique = parse_np();
    }
    if (verb_last) parse_verb_group();
    if (pos != sentence.size()) fail("trailing words in sentence");
    out.push_back(render(s, Lang::a));
    sentence.clear();
  };
  for (auto token : split_words(b_text)) {
    const bool end = token.ends_with('.');
    if (end) token.pop_back();
    auto it = b_index_.find(token);
    if (it == b_index_.end()) throw std::invalid_argument("to_language_a: unknown word '" + token + "'");
    sentence.push_back(it->second);
    if (end) flush();
  }
  if (!sentence.empty()) throw std::invalid_argument("to_language_a: unterminated sentence");
  return join(out);
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> make_corpus(const LanguagePair& lp, Lang lang, const SynthConfig& cfg, std::uint64_t stream) {
  std::mt19937_64 rng(cfg.seed * 1000003ull + stream);
  std::geometric_distribution<int> length(1.0 / cfg.mean_doc_words);
  std::vector<std::string> docs;
  docs.reserve(static_cast<std::size_t>(cfg.documents));
  for (int d = 0; d < cfg.documents; ++d) {
    const int target = 1 + length(rng);
    std::string doc;
    int words = 0;
    while (words < target) {
      auto sentence = lp.render(lp.sample_sentence(rng), lang);
      words += static_cast<int>(split_words(sentence).size());
      if (!doc.empty()) doc += ' ';
      doc += sentence;
    }
    docs.push_back(std::move(doc));
  }
  return docs;
}

Sentence strip(Sentence s) {
  s.subject.adjectives.clear();
  s.object.adjectives.clear();
  s.preposition = -1;
  s.oblique = {};
  return s;
}

bool has_adjective(const Sentence& s) { return !s.subject.adjectives.empty() || !s.object.adjectives.empty(); }

std::string lang_tag(Lang l) { return l == Lang::a ? "synth-a" : "synth-b"; }

TaskDataset make_nli(const LanguagePair& lp, Lang lang, int n, std::mt19937_64& rng) {
  TaskDataset ds{TaskKind::nli, "synth-nli", lang_tag(lang), "test", {}};
  for (int i = 0; i < n; ++i) {
    Sentence premise;
    do premise = lp.sample_sentence(rng, 2, false);
    while (!has_adjective(premise));
    const int label = i % 3;
    Sentence hyp = strip(premise);
    if (label == 1) hyp.negated = true;
    if (label == 2) {
      do hyp = strip(lp.sample_sentence(rng, 0, false));
      while (hyp.subject.head == premise.subject.head || hyp.verb == premise.verb);
    }
    ds.examples.push_back({{{"premise", lp.render(premise, lang)}, {"hypothesis", lp.render(hyp, lang)}},
                           {},
                           label,
                           lang_tag(lang)});
  }
  std::shuffle(ds.examples.begin(), ds.examples.end(), rng);
  return ds;
}

TaskDataset make_paraphrase(const LanguagePair& lp, Lang lang, int n, std::mt19937_64& rng) {
  TaskDataset ds{TaskKind::paraphrase, "synth-paraphrase", lang_tag(lang), "test", {}};
  for (int i = 0; i < n; ++i) {
    const Sentence s1 = lp.sample_sentence(rng);
    Sentence s2 = s1;
    const int label = i % 2;
    if (label == 0) {
      bool swapped = false;
      for (int* slot : {&s2.subject.head, &s2.verb, &s2.object.head}) {
        auto syn = lp.synonyms(*slot);
        if (!syn.empty() && lp.lexicon()[*slot].cls != WordClass::name) {
          *slot = syn.front();
          swapped = true;
        }
      }
      // No synonym available: vary a determiner instead (identical text if both phrases are names).
      NounPhrase* np = s2.object.det >= 0 ? &s2.object : s2.subject.det >= 0 ? &s2.subject : nullptr;
      if (!swapped && np) {
        const auto& dets = lp.determiners();
        np->det = dets[(std::find(dets.begin(), dets.end(), np->det) - dets.begin() + 1) % dets.size()];
      }
    } else {
      const auto& w = lp.lexicon()[s1.object.head];
      const auto& pool = w.cls == WordClass::name ? lp.names() : lp.nouns(w.selects);
      int other;
      do other = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
      while (lp.lexicon()[other].meaning == w.meaning);
      s2.object.head = other;
    }
    ds.examples.push_back(
        {{{"sentence1", lp.render(s1, lang)}, {"sentence2", lp.render(s2, lang)}}, {}, label, lang_tag(lang)});
  }
  std::shuffle(ds.examples.begin(), ds.examples.end(), rng);
  return ds;
}

// The verb-final language completes with the verb; the verb-medial one with the object noun.
TaskDataset make_completion(const LanguagePair& lp, Lang lang, bool verb_last, int n, std::mt19937_64& rng) {
  TaskDataset ds{TaskKind::completion_choice, "synth-completion", lang_tag(lang), "test", {}};
  auto any = [&](const std::vector<int>& pool) {
    return pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
  };
  for (int i = 0; i < n; ++i) {
    Sentence s = lp.sample_sentence(rng, 1, true);
    s.preposition = -1;
    s.object.adjectives.clear();
    const int cls = lp.lexicon()[s.verb].selects;
    std::string correct, wrong, context;
    if (verb_last) {
      if (lp.lexicon()[s.object.head].cls == WordClass::name) s.object.head = any(lp.nouns(cls));
      int other;
      do other = any(lp.verbs());
      while (lp.lexicon()[other].selects == cls);
      context = lp.render_phrase(s.subject, lang) + " " + lp.render_phrase(s.object, lang);
      if (s.negated) context += " " + lp.word(lp.negation(), lang);
      correct = lp.word(s.verb, lang) + ".";
      wrong = lp.word(other, lang) + ".";
    } else {
      if (s.object.det < 0) s.object.det = any(lp.determiners());
      s.object.head = any(lp.nouns(cls));
      const int other = any(lp.nouns(1 - cls));
      context = lp.render_phrase(s.subject, lang);
      if (s.negated) context += " " + lp.word(lp.negation(), lang);
      context += " " + lp.word(s.verb, lang) + " " + lp.word(s.object.det, lang);
      correct = lp.word(s.object.head, lang) + ".";
      wrong = lp.word(other, lang) + ".";
    }
    const int label = i % 2;
    std::vector<std::string> choices = label == 0 ? std::vector<std::string>{correct, wrong}
                                                   : std::vector<std::string>{wrong, correct};
    ds.examples.push_back({{{"context", context}}, choices, label, lang_tag(lang)});
  }
  std::shuffle(ds.examples.begin(), ds.examples.end(), rng);
  return ds;
}

}  // namespace

SynthBilingual synth_bilingual(const SynthConfig& cfg) {
  LanguagePair lp(cfg);
  SynthBilingual out;
  out.corpus_a = make_corpus(lp, Lang::a, cfg, 1);
  out.corpus_b = make_corpus(lp, Lang::b, cfg, 2);

  std::mt19937_64 prng(cfg.seed * 1000003ull + 3);
  for (int i = 0; i < cfg.parallel_pairs; ++i) {
    auto s = lp.sample_sentence(prng);
    out.parallel.pairs.emplace_back(lp.render(s, Lang::b), lp.render(s, Lang::a));
  }

  for (Lang lang : {Lang::a, Lang::b}) {
    const std::string suffix = lang == Lang::a ? "-a" : "-b";
    std::mt19937_64 trng(cfg.seed * 1000003ull + (lang == Lang::a ? 10 : 20));
    const bool verb_last = lang == Lang::b && cfg.flip_word_order;
    out.tasks["nli" + suffix] = make_nli(lp, lang, cfg.task_examples, trng);
    out.tasks["paraphrase" + suffix] = make_paraphrase(lp, lang, cfg.task_examples, trng);
    out.tasks["completion" + suffix] = make_completion(lp, lang, verb_last, cfg.task_examples, trng);

    auto w = [&](const char* role) { return lp.word(lp.fn(role), lang); };
    const std::string tag = lang_tag(lang);
    out.templates["nli" + suffix] = {"synth-nli" + suffix, tag, TaskKind::nli,
                                     "{Premise}, " + w("right") + "? [Label], {Hypothesis}", "", LabelSlot::pattern,
                                     {w("yes"), w("no"), w("also")}};
    out.templates["paraphrase" + suffix] = {"synth-paraphrase" + suffix, tag, TaskKind::paraphrase,
                                            "{Sentence 1}, " + w("right") + "? [Label], {Sentence 2}", "",
                                            LabelSlot::pattern, {w("yes"), w("no")}};
    out.templates["completion" + suffix] = {"synth-completion" + suffix, tag, TaskKind::completion_choice,
                                            "{Context} [Label]", "", LabelSlot::pattern, {}};
  }
  return out;
}

}  // namespace adaptkit::data
