// SPDX-License-Identifier: Apache-2.0
//
// Experiment orchestration behind the `adaptkit` binary. A run is fully
// described by one INI file:
//
//   [model]    architecture, optional base checkpoint/tokenizer, pretraining budget
//   [strategy] adaptation variant and its knobs
//   [train]    optimisation schedule
//   [data]     corpora (paths, URLs or `synthetic`) and sampling
//   [eval]     tasks, templates, retrieval probe, paired/transplant modes
//   [output]   output directory
//   [sweep]    axis and values for `adaptkit sweep`
//
// Commands return the process exit code: 0 success, 1 runtime failure,
// 2 validation failure.

#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "adaptkit/eval.hpp"
#include "adaptkit/peft.hpp"
#include "adaptkit/synth.hpp"
#include "adaptkit/training.hpp"

namespace adaptkit::cli {

namespace fs = std::filesystem;

struct ModelSection {
  model::ModelSpec spec;
  std::string checkpoint;  // base checkpoint; empty: pretrain on the pivot corpus
  std::string tokenizer;   // empty: train BPE on the pivot corpus
  int pretrain_steps = 1500;
  double pretrain_lr = 1e-3;
  bool operator==(const ModelSection&) const = default;
};

struct DataSection {
  std::string source = "synthetic";        // new-language corpus
  std::string pivot_source = "synthetic";  // seen-language corpus (pretraining, forgetting)
  std::string language = "synth-b";
  std::string pivot_language = "synth-a";
  std::string sample_count = "100%";       // documents for training: count or percentage
  std::uint64_t seed = 0;
  std::string cache_dir = ".adaptkit-cache";
  std::string parallel = "synthetic";      // TSV path or `synthetic`
  data::SynthConfig synth;
  bool operator==(const DataSection& o) const;
};

struct EvalSection {
  std::string run_dir;     // adapt output to evaluate or probe
  std::string mode = "single";  // single | paired | transplant
  std::string donor;       // transplant: adapter bundle or adapted checkpoint
  std::string target;      // transplant: base checkpoint (default: run_dir/base.ckpt)
  std::vector<std::string> tasks;  // synthetic keys, or file:kind:language:template
  std::string template_file;       // templates for file tasks
  eval::ScoreSpan span = eval::ScoreSpan::whole;
  int retrieval_pairs = data::kDefaultRetrievalPairs;
  std::vector<int> layers;  // empty: 0..L
  bool operator==(const EvalSection&) const = default;
};

struct SweepSection {
  std::string axis;  // data_size | reduction_factor | batch_size | placement | seq_len
  std::vector<std::string> values;
  bool pair_steps = false;  // seq_len axis: scale steps inversely with seq_len
  bool operator==(const SweepSection&) const = default;
};

struct ExperimentConfig {
  ModelSection model;
  peft::StrategySpec strategy;
  train::TrainConfig train;
  DataSection data;
  EvalSection eval;
  std::string output_dir = "adaptkit-out";
  SweepSection sweep;
  fs::path base_dir;  // directory of the config file; relative paths resolve here

  // Cross-field checks, throwing ValidationError before any work starts.
  void validate() const;
  fs::path resolve(const std::string& path) const;
  bool operator==(const ExperimentConfig& o) const;
};

// Throws ValidationError naming `section.key` for unknown keys or bad values.
ExperimentConfig parse_config(const std::string& ini_text, const fs::path& base_dir = {});
ExperimentConfig load_config(const fs::path& path);
std::string serialize_config(const ExperimentConfig& cfg);

struct Overrides {
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<eval::ScoreSpan> span;
  std::optional<int> workers;
  int seeds = 1;  // --seeds: repeat with seed, seed+1, ...
};
// Applies ADAPTKIT_OUT / ADAPTKIT_WORKERS, then the explicit overrides.
void apply_overrides(ExperimentConfig& cfg, Overrides& o);

// Corpora, tokenizer and base model shared by every run of one invocation.
struct Workspace {
  bpe::TokenizerModel tok;
  std::vector<std::string> new_docs;  // new language, corpus order
  std::vector<std::string> pivot_train;
  std::vector<std::string> pivot_heldout;
  data::ParallelCorpus parallel;
  std::map<std::string, data::TaskDataset> tasks;
  std::map<std::string, data::PromptTemplate> templates;  // keyed like tasks
  model::Checkpoint base;
};

// with_base=false skips the tokenizer and base model (eval and probe read
// them from a run directory).
Workspace build_workspace(const ExperimentConfig& cfg, int workers, std::ostream& log, bool with_base = true);

// Document sampling: one permutation of the new-language corpus seeded by
// data.seed; its last heldout_size documents are held out and the first
// sample_count of the rest are trained on. Held-out sets therefore agree
// across sample sizes and smaller samples nest inside larger ones.
struct DocSplit {
  std::vector<std::string> train;
  std::vector<std::string> heldout;
};
DocSplit split_new_language(const std::vector<std::string>& docs, const ExperimentConfig& cfg);
std::size_t resolve_sample_count(const std::string& spec, std::size_t available);

// Shortest decimal text that reads back as the same double.
std::string format_double(double v);

struct RunSummary {
  std::string variant;
  int best_step = 0;
  double initial_ppl = 0.0;
  double best_ppl = 0.0;
  double pivot_ppl_before = 0.0;
  double pivot_ppl_after = 0.0;
  std::size_t trainable = 0;
  std::size_t total = 0;
  std::size_t peak_mem_bytes = 0;
  double train_seconds = 0.0;  // not part of any hash
};

// One adaptation run written to `dir`: checkpoint.ckpt, adapter.bundle,
// run_log.csv (the three artifacts), plus tokenizer.bbpe, base.ckpt,
// config.ini, timing.json and manifest.json.
RunSummary run_adapt(const ExperimentConfig& cfg, const Workspace& ws, const fs::path& dir, int workers,
                     std::ostream& log);

// Content digest with the named CSV columns dropped.
std::string csv_digest(const std::string& csv, const std::vector<std::string>& drop_columns);

int cmd_adapt(const ExperimentConfig& cfg, const Overrides& o, std::ostream& out, std::ostream& err);
int cmd_eval(const ExperimentConfig& cfg, const Overrides& o, std::ostream& out, std::ostream& err);
int cmd_probe(const ExperimentConfig& cfg, const Overrides& o, std::ostream& out, std::ostream& err);
int cmd_sweep(const ExperimentConfig& cfg, const Overrides& o, std::ostream& out, std::ostream& err);
int cmd_report(const ExperimentConfig& cfg, const Overrides& o, std::ostream& out, std::ostream& err);

// Full command line, including argv[0]. Maps exceptions to exit codes.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace adaptkit::cli
