// SPDX-License-Identifier: Apache-2.0
//
// Training loops: language adaptation under any strategy, two-stage C-SFT,
// and multitask instruction tuning. Everything runs on one thread in a fixed
// order, so a (seed, config, data) triple determines every logged number
// except the wall-clock column.

#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "adaptkit/data.hpp"
#include "adaptkit/model.hpp"
#include "adaptkit/peft.hpp"
#include "json.hpp"

namespace adaptkit::train {

using ad::Tensor;
using model::Checkpoint;

enum class Schedule { linear, cosine };
std::string to_string(Schedule s);
Schedule schedule_from_string(const std::string& s);  // ValidationError on `train.schedule`

struct TrainConfig {
  int steps = 2000;
  int batch_size = 8;
  int seq_len = 64;
  double peak_lr = 1e-4;
  Schedule schedule = Schedule::linear;
  double warmup_ratio = 0.0;
  int eval_every = 500;
  int heldout_size = 64;  // documents held out from the tail of the sample
  std::uint64_t seed = 0;
  double clip_norm = 1.0;
  int fisher_batches = 8;  // fishmask: batches averaged for the diagonal Fisher

  // Throws ValidationError with a `train.<field>` path.
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Linear warmup from 0 to peak over warmup_ratio*steps, then the named decay
// to 0 at `steps`.
double lr_at(int step, const TrainConfig& cfg);

struct RunRecord {
  int step = 0;
  double loss = 0.0;         // mean training loss since the previous record (step 0: first batch, no update)
  double heldout_ppl = 0.0;
  double seconds = 0.0;      // wall clock since the run started
  std::size_t mem_bytes = 0; // peak tensor bytes allocated by the run plus optimizer state
};

struct RunLog {
  std::vector<RunRecord> records;
  int best_step = -1;

  // Earliest record with the lowest held-out perplexity.
  int argmin_step() const;
  // Header `step,loss,heldout_ppl,seconds,mem_bytes`.
  std::string to_csv(bool include_seconds = true) const;
  static RunLog from_csv(std::string_view csv);
};

// Tail split: the last `heldout` documents are held out.
std::pair<std::vector<std::string>, std::vector<std::string>> split_heldout(const std::vector<std::string>& docs,
                                                                            int heldout);

// One sequence with its loss mask. scored[t] marks tokens[t] as a prediction
// target (predicted from tokens[0..t-1]); scored[0] is ignored.
struct LossRow {
  std::vector<int> tokens;
  std::vector<bool> scored;
};

std::vector<LossRow> rows_from_batch(const data::Batch& batch);

// Mean NLL over every scored position of `rows`, on the active tape.
Tensor mean_loss(const model::Forwarder& fwd, const std::vector<LossRow>& rows);

struct NllSum {
  double nll = 0.0;
  std::size_t tokens = 0;
  double perplexity() const;
};

// Summed NLL over the rows, no tape. Rows are split across `workers` threads
// and reduced in row order, so the result does not depend on the worker count.
NllSum rows_nll(const Checkpoint& ckpt, const std::vector<LossRow>& rows, int workers = 1);
NllSum stream_nll(const Checkpoint& ckpt, const data::PackedStream& stream, int workers = 1);

// Adam with bias correction, global-norm clipping, and optional per-scalar masks.
class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : b1_(beta1), b2_(beta2), eps_(eps) {}
  // Returns the pre-clip global gradient norm over the updated scalars.
  double step(Checkpoint& ckpt, const std::vector<std::string>& names, const peft::Mask& mask, double lr,
              double clip_norm);
  std::size_t state_bytes() const;

 private:
  double b1_, b2_, eps_;
  long t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, RunLog log) : std::runtime_error(what), log_(std::move(log)) {}
  const RunLog& log() const { return log_; }

 private:
  RunLog log_;
};

struct TrainResult {
  Checkpoint best;
  Checkpoint last;
  RunLog log;
};

using Progress = std::function<void(const RunRecord&)>;

// Trains the `state.trainable` tensors of `ckpt` (masked when state.mask is
// set) on stream.batch(0 .. steps-1). Held-out perplexity is measured at step
// 0, every eval_every steps, and at the last step; `best` is the checkpoint at
// the best record. Non-finite loss throws TrainingAborted carrying the log so far.
TrainResult train(const Checkpoint& ckpt, const peft::StrategyState& state, const data::PackedStream& stream,
                  const data::PackedStream& heldout, const TrainConfig& cfg, const Progress& progress = {});

// Stage 1 trains every eligible tensor for steps/2, the mask keeps the k
// largest movements, eligible tensors are reset to `ckpt`, and stage 2
// trains the masked scalars for steps/2. The log covers stage 2 with steps
// offset by steps/2; stage 1's log is returned separately.
struct CsftResult {
  TrainResult result;
  RunLog stage1;
  peft::Mask mask;
};
CsftResult csft_two_stage(const Checkpoint& ckpt, const peft::StrategyState& state, const data::PackedStream& stream,
                          const data::PackedStream& heldout, const TrainConfig& cfg, double mask_density,
                          const Progress& progress = {});

// Selects the fishmask mask from the diagonal Fisher over cfg.fisher_batches batches.
peft::Mask fishmask_prepare(Checkpoint& ckpt, const data::PackedStream& stream, const TrainConfig& cfg,
                            double mask_density);

// Attaches the strategy to a copy of `base` and runs the matching recipe.
struct AdaptResult {
  TrainResult result;
  peft::StrategyState state;
};
AdaptResult adapt(const Checkpoint& base, const peft::StrategySpec& spec, const data::PackedStream& stream,
                  const data::PackedStream& heldout, const TrainConfig& cfg, const Progress& progress = {});

// Instruction tuning on pre-rendered (input, target) pairs.
struct InstructionExample {
  std::string input;
  std::string target;
  std::string language;
  std::string task;
};

enum class InstructionMode { target_only, mixture_plus_target };

// [eod] input target [eod], with only the target tokens and the closing eod scored.
LossRow instruction_row(const bpe::TokenizerModel& tok, const InstructionExample& ex);

struct InstructionPool {
  std::vector<LossRow> rows;
  std::vector<std::string> tasks;  // task of each row
  std::size_t skipped = 0;         // longer than seq_len
};
InstructionPool instruction_pool(const bpe::TokenizerModel& tok, const std::vector<InstructionExample>& mixture,
                                 InstructionMode mode, const std::string& target_language, int seq_len);

struct InstructionResult {
  Checkpoint tuned;
  std::vector<double> losses;  // per step
  std::size_t skipped = 0;
  std::size_t pool_size = 0;
};

// Full-parameter finetuning; rows are drawn in epochs reshuffled from cfg.seed.
InstructionResult instruction_tune(const Checkpoint& ckpt, const bpe::TokenizerModel& tok,
                                   const std::vector<InstructionExample>& mixture, InstructionMode mode,
                                   const std::string& target_language, const TrainConfig& cfg);

}  // namespace adaptkit::train
