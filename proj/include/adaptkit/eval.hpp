// SPDX-License-Identifier: Apache-2.0
//
// Zero-shot prompt classification, perplexity, layer-wise sentence
// retrieval, forgetting deltas and resource tables.
//
// Scoring convention: a candidate is rendered as prefix + continuation (the
// continuation starts at the label slot), tokenized as
// [eod] enc(prefix) enc(continuation), and scored by summed log-probability
// under teacher forcing. `whole` scores every token after the leading eod;
// `continuation` scores only enc(continuation). No length normalisation.

#pragma once

#include <string>
#include <vector>

#include "adaptkit/data.hpp"
#include "adaptkit/model.hpp"
#include "adaptkit/tasks.hpp"
#include "adaptkit/tokenizer.hpp"
#include "json.hpp"

namespace adaptkit::eval {

using model::Checkpoint;

enum class ScoreSpan { whole, continuation };
std::string to_string(ScoreSpan s);
ScoreSpan score_span_from_string(const std::string& s);  // ValidationError on `eval.score_span`

struct Rendered {
  std::string prefix;
  std::string continuation;
  std::string text() const { return prefix + continuation; }
};

// Number of candidate labels the template offers for the example.
int candidate_count(const data::PromptTemplate& t, const data::TaskExample& ex);

// Throws std::invalid_argument naming a missing field, std::out_of_range for a bad label.
Rendered render_parts(const data::PromptTemplate& t, const data::TaskExample& ex, int label);
std::string render(const data::PromptTemplate& t, const data::TaskExample& ex, int label);

struct ScoredTokens {
  std::vector<int> tokens;  // starts with eod
  std::size_t first_scored = 1;
};
ScoredTokens tokenize_for_scoring(const bpe::TokenizerModel& tok, const Rendered& r, ScoreSpan span);

// Sum of log p(tokens[t] | tokens[..t]) for t >= first_scored. Throws
// std::length_error when the input exceeds the model's max_seq.
double score_tokens(const Checkpoint& ckpt, const ScoredTokens& st);
double score(const Checkpoint& ckpt, const bpe::TokenizerModel& tok, const Rendered& r, ScoreSpan span);

// Argmax with ties going to the lowest index.
int argmax_label(const std::vector<double>& scores);

struct Prediction {
  int label = 0;
  std::vector<double> scores;
};
Prediction classify(const Checkpoint& ckpt, const bpe::TokenizerModel& tok, const data::PromptTemplate& t,
                    const data::TaskExample& ex, ScoreSpan span);

struct EvalReport {
  std::string model;
  std::string strategy;
  std::string task;
  std::string template_name;
  ScoreSpan span = ScoreSpan::whole;
  int n = 0;
  double accuracy = 0.0;
  std::vector<std::vector<int>> confusion;  // [gold][predicted]
  double seconds_per_prompt = 0.0;          // JSON only; the CSV stays byte-stable across reruns

  static std::string csv_header();
  std::string csv_row() const;
  nlohmann::json to_json() const;
};

// Examples are spread over `workers` threads and reduced in example order.
EvalReport evaluate_task(const Checkpoint& ckpt, const bpe::TokenizerModel& tok, const data::PromptTemplate& t,
                         const data::TaskDataset& ds, ScoreSpan span, int workers = 1);

std::string reports_csv(const std::vector<EvalReport>& reports);
nlohmann::json reports_json(const std::vector<EvalReport>& reports);

// exp(mean NLL) over the documents packed at seq_len with eod separators.
double perplexity(const Checkpoint& ckpt, const bpe::TokenizerModel& tok, const std::vector<std::string>& docs,
                  int seq_len, int workers = 1);

// [layer][sentence] mean-pooled hidden states over the sentence's tokens.
using Embeddings = std::vector<std::vector<std::vector<double>>>;
Embeddings sentence_embeddings(const Checkpoint& ckpt, const bpe::TokenizerModel& tok,
                               const std::vector<std::string>& sentences, int workers = 1);

double cosine(const std::vector<double>& a, const std::vector<double>& b);
// For each query, the cosine-nearest candidate (ties to the lowest index).
std::vector<int> nearest(const std::vector<std::vector<double>>& queries,
                         const std::vector<std::vector<double>>& candidates);
double retrieval_accuracy(const std::vector<std::vector<double>>& queries,
                          const std::vector<std::vector<double>>& candidates);

// Throws ValidationError(`model.<field>`) unless the architectures match.
void require_same_architecture(const model::ModelSpec& a, const model::ModelSpec& b);

// New-language side from `new_lang`, pivot side from `pivot`.
double sentence_retrieval(const Checkpoint& new_lang, const Checkpoint& pivot, const bpe::TokenizerModel& tok,
                          const data::ParallelCorpus& pairs, int layer, int workers = 1);
// Accuracy at layers 0..L.
std::vector<double> layer_sweep_retrieval(const Checkpoint& new_lang, const Checkpoint& pivot,
                                          const bpe::TokenizerModel& tok, const data::ParallelCorpus& pairs,
                                          int workers = 1);

struct Delta {
  double before = 0.0;
  double after = 0.0;
  double delta() const { return after - before; }
};
Delta forgetting_delta_perplexity(const Checkpoint& base, const Checkpoint& adapted, const bpe::TokenizerModel& tok,
                                  const std::vector<std::string>& seen_docs, int seq_len, int workers = 1);
Delta forgetting_delta_accuracy(const Checkpoint& base, const Checkpoint& adapted, const bpe::TokenizerModel& tok,
                                const data::PromptTemplate& t, const data::TaskDataset& seen, ScoreSpan span,
                                int workers = 1);

struct ResourceRow {
  std::string strategy;
  std::size_t trainable = 0;
  std::size_t total = 0;
  double train_seconds = 0.0;
  double seconds_per_prompt = 0.0;
  std::size_t peak_mem_bytes = 0;
};
std::string resource_csv(const std::vector<ResourceRow>& rows);

}  // namespace adaptkit::eval
