// SPDX-License-Identifier: Apache-2.0

#include "adaptkit/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <thread>

#include "adaptkit/errors.hpp"
#include "adaptkit/peft.hpp"
#include "adaptkit/training.hpp"

namespace adaptkit::eval {

using data::LabelSlot;
using data::PromptTemplate;
using data::TaskExample;
using data::TaskKind;
using nlohmann::json;

std::string to_string(ScoreSpan s) { return s == ScoreSpan::whole ? "whole" : "continuation"; }

ScoreSpan score_span_from_string(const std::string& s) {
  if (s == "whole") return ScoreSpan::whole;
  if (s == "continuation") return ScoreSpan::continuation;
  throw ValidationError("eval.score_span", "expected whole or continuation, got '" + s + "'");
}

namespace {

const std::vector<std::pair<std::string, std::string>> kPlaceholders = {
    {"{Premise}", "premise"},       {"{Hypothesis}", "hypothesis"}, {"{Sentence 1}", "sentence1"},
    {"{Sentence 2}", "sentence2"}, {"{Context}", "context"},
};

const std::string& field(const TaskExample& ex, const std::string& name, const PromptTemplate& t) {
  auto it = ex.fields.find(name);
  if (it == ex.fields.end())
    throw std::invalid_argument("render: template " + t.name + " needs field '" + name + "', which the example lacks");
  return it->second;
}

// Replaces every placeholder in `s`; unknown {..} tokens are left alone.
std::string fill(std::string s, const TaskExample& ex, const PromptTemplate& t) {
  for (const auto& [ph, name] : kPlaceholders) {
    for (auto pos = s.find(ph); pos != std::string::npos; pos = s.find(ph, pos)) {
      const auto& value = field(ex, name, t);
      s.replace(pos, ph.size(), value);
      pos += value.size();
    }
  }
  return s;
}

std::string label_text(const PromptTemplate& t, const TaskExample& ex, int label) {
  const int n = candidate_count(t, ex);
  if (label < 0 || label >= n)
    throw std::out_of_range("render: label " + std::to_string(label) + " outside [0, " + std::to_string(n) + ")");
  return t.identity() ? ex.choices[static_cast<std::size_t>(label)] : t.verbalizers[static_cast<std::size_t>(label)];
}

const model::ForwardHooks* hooks_or_null(const peft::AdapterHooks& h) { return h.empty() ? nullptr : &h; }

template <typename F>
void parallel_for(std::size_t n, int workers, F&& body) {
  const auto w = static_cast<std::size_t>(std::clamp(workers, 1, 64));
  if (w == 1 || n < 2 * w) {
    body(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t per = (n + w - 1) / w;
  for (std::size_t t = 0; t < w; ++t) {
    const std::size_t lo = std::min(n, t * per), hi = std::min(n, lo + per);
    pool.emplace_back([&body, lo, hi] { body(lo, hi); });
  }
  for (auto& th : pool) th.join();
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

int candidate_count(const PromptTemplate& t, const TaskExample& ex) {
  return t.identity() ? static_cast<int>(ex.choices.size()) : static_cast<int>(t.verbalizers.size());
}

Rendered render_parts(const PromptTemplate& t, const TaskExample& ex, int label) {
  const auto candidate = label_text(t, ex, label);
  if (t.label_slot == LabelSlot::underscore) {
    // The candidate replaces the '_' inside the context, then the context fills the pattern.
    const auto& context = field(ex, "context", t);
    const auto blank = context.find('_');
    if (blank == std::string::npos)
      throw std::invalid_argument("render: template " + t.name + " needs a '_' in field 'context'");
    const auto slot = t.pattern.find("{Context}");
    Rendered r;
    r.prefix = fill(t.pattern.substr(0, slot), ex, t) + context.substr(0, blank);
    r.continuation = candidate + context.substr(blank + 1) + fill(t.pattern.substr(slot + 9), ex, t);
    return r;
  }
  std::string pattern = t.pattern;
  if (t.kind == TaskKind::cause_effect) {
    const auto& q = field(ex, "question", t);
    if (q == "effect") pattern = t.effect_pattern;
  }
  const auto slot = pattern.find(data::kLabelSlot);
  if (slot == std::string::npos) throw std::invalid_argument("render: template " + t.name + " has no [Label] slot");
  Rendered r;
  r.prefix = fill(pattern.substr(0, slot), ex, t);
  r.continuation = candidate + fill(pattern.substr(slot + data::kLabelSlot.size()), ex, t);
  return r;
}

std::string render(const PromptTemplate& t, const TaskExample& ex, int label) {
  return render_parts(t, ex, label).text();
}

ScoredTokens tokenize_for_scoring(const bpe::TokenizerModel& tok, const Rendered& r, ScoreSpan span) {
  ScoredTokens st;
  st.tokens.push_back(tok.eod_id());
  for (int id : tok.encode(r.prefix)) st.tokens.push_back(id);
  const auto cont_start = st.tokens.size();
  for (int id : tok.encode(r.continuation)) st.tokens.push_back(id);
  st.first_scored = span == ScoreSpan::whole ? 1 : cont_start;
  return st;
}

namespace {

double score_with(const model::Forwarder& fwd, const model::ModelSpec& spec, const ScoredTokens& st) {
  const auto n = st.tokens.size();
  if (n < 2 || st.first_scored < 1 || st.first_scored >= n) throw std::invalid_argument("score: empty scored span");
  if (n - 1 > static_cast<std::size_t>(spec.max_seq))
    throw std::length_error("score: " + std::to_string(n - 1) + " input tokens exceed max_seq " +
                            std::to_string(spec.max_seq));
  const auto logits = fwd.run(std::span<const int>(st.tokens.data(), n - 1)).logits;
  const auto V = logits.cols();
  const auto data = logits.data();
  double total = 0.0;
  for (std::size_t t = st.first_scored; t < n; ++t) {
    const double* row = data.data() + (t - 1) * V;
    const double mx = *std::max_element(row, row + V);
    double z = 0.0;
    for (std::size_t c = 0; c < V; ++c) z += std::exp(row[c] - mx);
    total += row[st.tokens[t]] - mx - std::log(z);
  }
  return total;
}

}  // namespace

double score_tokens(const Checkpoint& ckpt, const ScoredTokens& st) {
  ad::NoGradScope no_grad;
  peft::AdapterHooks hooks(ckpt);
  model::Forwarder fwd(ckpt, hooks_or_null(hooks));
  return score_with(fwd, ckpt.spec, st);
}

double score(const Checkpoint& ckpt, const bpe::TokenizerModel& tok, const Rendered& r, ScoreSpan span) {
  return score_tokens(ckpt, tokenize_for_scoring(tok, r, span));
}

int argmax_label(const std::vector<double>& scores) {
  if (scores.empty()) throw std::invalid_argument("argmax_label: no candidates");
  int best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return best;
}

namespace {

Prediction classify_with(const model::Forwarder& fwd, const model::ModelSpec& spec, const bpe::TokenizerModel& tok,
                         const PromptTemplate& t, const TaskExample& ex, ScoreSpan span) {
  Prediction p;
  const int n = candidate_count(t, ex);
  for (int c = 0; c < n; ++c)
    p.scores.push_back(score_with(fwd, spec, tokenize_for_scoring(tok, render_parts(t, ex, c), span)));
  p.label = argmax_label(p.scores);
  return p;
}

}  // namespace

Prediction classify(const Checkpoint& ckpt, const bpe::TokenizerModel& tok, const PromptTemplate& t,
                    const TaskExample& ex, ScoreSpan span) {
  ad::NoGradScope no_grad;
  peft::AdapterHooks hooks(ckpt);
  model::Forwarder fwd(ckpt, hooks_or_null(hooks));
  return classify_with(fwd, ckpt.spec, tok, t, ex, span);
}

std::string EvalReport::csv_header() { return "model,strategy,task,template,score_span,n,accuracy,confusion\n"; }

std::string EvalReport::csv_row() const {
  std::string conf;
  for (std::size_t g = 0; g < confusion.size(); ++g) {
    if (g) conf += ";";
    for (std::size_t p = 0; p < confusion[g].size(); ++p) conf += (p ? " " : "") + std::to_string(confusion[g][p]);
  }
  return model + "," + strategy + "," + task + "," + template_name + "," + to_string(span) + "," + std::to_string(n) +
         "," + fmt(accuracy) + "," + conf + "\n";
}

json EvalReport::to_json() const {
  return {{"model", model},
          {"strategy", strategy},
          {"task", task},
          {"template", template_name},
          {"score_span", to_string(span)},
          {"n", n},
          {"accuracy", accuracy},
          {"confusion", confusion},
          {"seconds_per_prompt", seconds_per_prompt}};
}

EvalReport evaluate_task(const Checkpoint& ckpt, const bpe::TokenizerModel& tok, const PromptTemplate& t,
                         const data::TaskDataset& ds, ScoreSpan span, int workers) {
  if (ds.examples.empty()) throw std::invalid_argument("evaluate_task: dataset " + ds.name + " is empty");
  if (t.kind != ds.kind)
    throw ValidationError("eval.templates", "template " + t.name + " is for " + data::to_string(t.kind) +
                                                " but task " + ds.name + " is " + data::to_string(ds.kind));
  const int classes = ds.class_count();
  if (candidate_count(t, ds.examples.front()) != classes)
    throw ValidationError("eval.templates", "template " + t.name + " offers " +
                                                std::to_string(candidate_count(t, ds.examples.front())) +
                                                " labels but task " + ds.name + " has " + std::to_string(classes));
  std::vector<int> predicted(ds.examples.size(), 0);
  const auto start = std::chrono::steady_clock::now();
  parallel_for(ds.examples.size(), workers, [&](std::size_t lo, std::size_t hi) {
    ad::NoGradScope no_grad;
    peft::AdapterHooks hooks(ckpt);
    model::Forwarder fwd(ckpt, hooks_or_null(hooks));
    for (std::size_t i = lo; i < hi; ++i) predicted[i] = classify_with(fwd, ckpt.spec, tok, t, ds.examples[i], span).label;
  });
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  EvalReport r;
  r.task = ds.name;
  r.template_name = t.name;
  r.span = span;
  r.n = static_cast<int>(ds.examples.size());
  r.confusion.assign(static_cast<std::size_t>(classes), std::vector<int>(static_cast<std::size_t>(classes), 0));
  int correct = 0;
  for (std::size_t i = 0; i < ds.examples.size(); ++i) {
    const int gold = ds.examples[i].label;
    ++r.confusion[static_cast<std::size_t>(gold)][static_cast<std::size_t>(predicted[i])];
    correct += gold == predicted[i] ? 1 : 0;
  }
  r.accuracy = static_cast<double>(correct) / r.n;
  r.seconds_per_prompt = seconds / (static_cast<double>(r.n) * classes);
  return r;
}

std::string reports_csv(const std::vector<EvalReport>& reports) {
  std::string out = EvalReport::csv_header();
  for (const auto& r : reports) out += r.csv_row();
  return out;
}

json reports_json(const std::vector<EvalReport>& reports) {
  json arr = json::array();
  for (const auto& r : reports) arr.push_back(r.to_json());
  return {{"schema", "eval-report-v1"}, {"reports", arr}};
}

double perplexity(const Checkpoint& ckpt, const bpe::TokenizerModel& tok, const std::vector<std::string>& docs,
                  int seq_len, int workers) {
  if (docs.empty()) throw std::invalid_argument("perplexity: no documents");
  const auto stream = data::pack_sequences(data::tokenize_documents(tok, docs, workers), seq_len, 1, tok.pad_id(),
                                           tok.eod_id());
  return train::stream_nll(ckpt, stream, workers).perplexity();
}

Embeddings sentence_embeddings(const Checkpoint& ckpt, const bpe::TokenizerModel& tok,
                               const std::vector<std::string>& sentences, int workers) {
  const auto layers = static_cast<std::size_t>(ckpt.spec.layers) + 1;
  const auto d = static_cast<std::size_t>(ckpt.spec.width);
  Embeddings out(layers, std::vector<std::vector<double>>(sentences.size(), std::vector<double>(d, 0.0)));
  parallel_for(sentences.size(), workers, [&](std::size_t lo, std::size_t hi) {
    ad::NoGradScope no_grad;
    peft::AdapterHooks hooks(ckpt);
    model::Forwarder fwd(ckpt, hooks_or_null(hooks));
    for (std::size_t i = lo; i < hi; ++i) {
      auto ids = tok.encode(sentences[i]);
      if (ids.empty()) ids.push_back(tok.eod_id());
      if (ids.size() > static_cast<std::size_t>(ckpt.spec.max_seq)) ids.resize(static_cast<std::size_t>(ckpt.spec.max_seq));
      const auto res = fwd.run(ids);
      for (std::size_t l = 0; l < layers; ++l) {
        const auto h = res.hidden.layers[l].data();
        auto& v = out[l][i];
        for (std::size_t t = 0; t < ids.size(); ++t)
          for (std::size_t c = 0; c < d; ++c) v[c] += h[t * d + c];
        for (auto& x : v) x /= static_cast<double>(ids.size());
      }
    }
  });
  return out;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine: length mismatch");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

std::vector<int> nearest(const std::vector<std::vector<double>>& queries,
                         const std::vector<std::vector<double>>& candidates) {
  if (candidates.empty()) throw std::invalid_argument("nearest: no candidates");
  std::vector<int> out;
  out.reserve(queries.size());
  for (const auto& q : queries) {
    std::vector<double> sims;
    sims.reserve(candidates.size());
    for (const auto& c : candidates) sims.push_back(cosine(q, c));
    out.push_back(argmax_label(sims));
  }
  return out;
}

double retrieval_accuracy(const std::vector<std::vector<double>>& queries,
                          const std::vector<std::vector<double>>& candidates) {
  if (queries.empty() || queries.size() != candidates.size())
    throw std::invalid_argument("retrieval_accuracy: needs equally many aligned queries and candidates");
  const auto pred = nearest(queries, candidates);
  int hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == static_cast<int>(i) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

void require_same_architecture(const model::ModelSpec& a, const model::ModelSpec& b) {
  auto check = [](const char* name, int x, int y) {
    if (x != y)
      throw ValidationError(std::string("model.") + name,
                            "architectures differ (" + std::to_string(x) + " vs " + std::to_string(y) + ")");
  };
  check("layers", a.layers, b.layers);
  check("width", a.width, b.width);
  check("heads", a.heads, b.heads);
  check("ffn_width", a.ffn_width, b.ffn_width);
  check("vocab", a.vocab, b.vocab);
  check("max_seq", a.max_seq, b.max_seq);
}

std::vector<double> layer_sweep_retrieval(const Checkpoint& new_lang, const Checkpoint& pivot,
                                          const bpe::TokenizerModel& tok, const data::ParallelCorpus& pairs,
                                          int workers) {
  require_same_architecture(new_lang.spec, pivot.spec);
  if (pairs.pairs.empty()) throw std::invalid_argument("sentence_retrieval: empty parallel corpus");
  std::vector<std::string> src, tgt;
  for (const auto& [a, b] : pairs.pairs) {
    src.push_back(a);
    tgt.push_back(b);
  }
  const auto q = sentence_embeddings(new_lang, tok, src, workers);
  const auto c = sentence_embeddings(pivot, tok, tgt, workers);
  std::vector<double> acc;
  for (std::size_t l = 0; l < q.size(); ++l) acc.push_back(retrieval_accuracy(q[l], c[l]));
  return acc;
}

double sentence_retrieval(const Checkpoint& new_lang, const Checkpoint& pivot, const bpe::TokenizerModel& tok,
                          const data::ParallelCorpus& pairs, int layer, int workers) {
  if (layer < 0 || layer > new_lang.spec.layers)
    throw std::out_of_range("sentence_retrieval: layer " + std::to_string(layer) + " outside [0, " +
                            std::to_string(new_lang.spec.layers) + "]");
  return layer_sweep_retrieval(new_lang, pivot, tok, pairs, workers)[static_cast<std::size_t>(layer)];
}

Delta forgetting_delta_perplexity(const Checkpoint& base, const Checkpoint& adapted, const bpe::TokenizerModel& tok,
                                  const std::vector<std::string>& seen_docs, int seq_len, int workers) {
  return {perplexity(base, tok, seen_docs, seq_len, workers), perplexity(adapted, tok, seen_docs, seq_len, workers)};
}

Delta forgetting_delta_accuracy(const Checkpoint& base, const Checkpoint& adapted, const bpe::TokenizerModel& tok,
                                const PromptTemplate& t, const data::TaskDataset& seen, ScoreSpan span,
                                int workers) {
  return {evaluate_task(base, tok, t, seen, span, workers).accuracy,
          evaluate_task(adapted, tok, t, seen, span, workers).accuracy};
}

std::string resource_csv(const std::vector<ResourceRow>& rows) {
  std::string out = "strategy,trainable_params,total_params,train_seconds,seconds_per_prompt,peak_mem_bytes\n";
  for (const auto& r : rows)
    out += r.strategy + "," + std::to_string(r.trainable) + "," + std::to_string(r.total) + "," + fmt(r.train_seconds) +
           "," + fmt(r.seconds_per_prompt) + "," + std::to_string(r.peak_mem_bytes) + "\n";
  return out;
}

}  // namespace adaptkit::eval
