// SPDX-License-Identifier: Apache-2.0

#include "adaptkit/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "adaptkit/errors.hpp"
#include "adaptkit/hashing.hpp"

namespace adaptkit::train {

using nlohmann::json;

std::string to_string(Schedule s) { return s == Schedule::linear ? "linear" : "cosine"; }

Schedule schedule_from_string(const std::string& s) {
  if (s == "linear") return Schedule::linear;
  if (s == "cosine") return Schedule::cosine;
  throw ValidationError("train.schedule", "expected linear or cosine, got '" + s + "'");
}

void TrainConfig::validate() const {
  if (steps <= 0) throw ValidationError("train.steps", "must be positive");
  if (batch_size <= 0) throw ValidationError("train.batch_size", "must be positive");
  if (seq_len < 2) throw ValidationError("train.seq_len", "must be at least 2");
  if (!(peak_lr > 0.0) || !std::isfinite(peak_lr)) throw ValidationError("train.peak_lr", "must be positive");
  if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) throw ValidationError("train.warmup_ratio", "must lie in [0, 1)");
  if (eval_every <= 0 || eval_every > steps)
    throw ValidationError("train.eval_every", "must lie in [1, steps=" + std::to_string(steps) + "]");
  if (heldout_size <= 0) throw ValidationError("train.heldout_size", "must be positive");
  if (!(clip_norm > 0.0)) throw ValidationError("train.clip_norm", "must be positive");
  if (fisher_batches <= 0) throw ValidationError("train.fisher_batches", "must be positive");
}

json to_json(const TrainConfig& c) {
  return {{"steps", c.steps},
          {"batch_size", c.batch_size},
          {"seq_len", c.seq_len},
          {"peak_lr", c.peak_lr},
          {"schedule", to_string(c.schedule)},
          {"warmup_ratio", c.warmup_ratio},
          {"eval_every", c.eval_every},
          {"heldout_size", c.heldout_size},
          {"seed", c.seed},
          {"clip_norm", c.clip_norm},
          {"fisher_batches", c.fisher_batches}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seq_len = j.value("seq_len", c.seq_len);
  c.peak_lr = j.value("peak_lr", c.peak_lr);
  c.schedule = schedule_from_string(j.value("schedule", to_string(c.schedule)));
  c.warmup_ratio = j.value("warmup_ratio", c.warmup_ratio);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.heldout_size = j.value("heldout_size", c.heldout_size);
  c.seed = j.value("seed", c.seed);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.fisher_batches = j.value("fisher_batches", c.fisher_batches);
  return c;
}

double lr_at(int step, const TrainConfig& cfg) {
  if (step < 0 || step > cfg.steps)
    throw std::out_of_range("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(cfg.steps) + "]");
  const double warm = cfg.warmup_ratio * cfg.steps;
  const double s = step;
  if (s < warm) return cfg.peak_lr * s / warm;
  const double progress = (s - warm) / (cfg.steps - warm);
  if (cfg.schedule == Schedule::linear) return cfg.peak_lr * (1.0 - progress);
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------
// RunLog

int RunLog::argmin_step() const {
  int best = -1;
  double best_ppl = 0.0;
  for (const auto& r : records)
    if (best < 0 || r.heldout_ppl < best_ppl) {
      best = r.step;
      best_ppl = r.heldout_ppl;
    }
  return best;
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string RunLog::to_csv(bool include_seconds) const {
  std::string out = include_seconds ? "step,loss,heldout_ppl,seconds,mem_bytes\n" : "step,loss,heldout_ppl,mem_bytes\n";
  for (const auto& r : records) {
    out += std::to_string(r.step) + "," + fmt(r.loss) + "," + fmt(r.heldout_ppl) + ",";
    if (include_seconds) out += fmt(r.seconds) + ",";
    out += std::to_string(r.mem_bytes) + "\n";
  }
  return out;
}

RunLog RunLog::from_csv(std::string_view csv) {
  RunLog log;
  const auto lines = data::split_documents(csv);
  if (lines.empty() || lines[0] != "step,loss,heldout_ppl,seconds,mem_bytes")
    throw std::runtime_error("run log: expected header step,loss,heldout_ppl,seconds,mem_bytes");
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    RunRecord r;
    std::istringstream is(lines[i]);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(is, cell, ',')) cells.push_back(cell);
    if (cells.size() != 5) throw std::runtime_error("run log line " + std::to_string(i + 1) + ": expected 5 columns");
    try {
      r.step = std::stoi(cells[0]);
      r.loss = std::stod(cells[1]);
      r.heldout_ppl = std::stod(cells[2]);
      r.seconds = std::stod(cells[3]);
      r.mem_bytes = std::stoull(cells[4]);
    } catch (const std::exception&) {
      throw std::runtime_error("run log line " + std::to_string(i + 1) + ": malformed number");
    }
    if (!log.records.empty() && r.step <= log.records.back().step)
      throw std::runtime_error("run log line " + std::to_string(i + 1) + ": steps must increase");
    log.records.push_back(r);
  }
  log.best_step = log.argmin_step();
  return log;
}

std::pair<std::vector<std::string>, std::vector<std::string>> split_heldout(const std::vector<std::string>& docs,
                                                                            int heldout) {
  if (heldout <= 0 || static_cast<std::size_t>(heldout) >= docs.size())
    throw ValidationError("train.heldout_size", "needs 0 < heldout_size < " + std::to_string(docs.size()) +
                                                    " documents, got " + std::to_string(heldout));
  const auto cut = docs.begin() + static_cast<std::ptrdiff_t>(docs.size() - static_cast<std::size_t>(heldout));
  return {std::vector<std::string>(docs.begin(), cut), std::vector<std::string>(cut, docs.end())};
}

// ---------------------------------------------------------------------------
// Losses

std::vector<LossRow> rows_from_batch(const data::Batch& batch) {
  std::vector<LossRow> rows;
  rows.reserve(batch.tokens.size());
  for (std::size_t i = 0; i < batch.tokens.size(); ++i) {
    LossRow r{batch.tokens[i], batch.real[i]};
    if (!r.scored.empty()) r.scored[0] = false;
    rows.push_back(std::move(r));
  }
  return rows;
}

namespace {

std::size_t scored_count(const LossRow& r) {
  std::size_t n = 0;
  for (std::size_t t = 1; t < r.scored.size(); ++t) n += r.scored[t] ? 1 : 0;
  return n;
}

// Inputs are tokens[0..last], where `last` precedes the final scored target.
Tensor row_mean(const model::Forwarder& fwd, const LossRow& r) {
  std::size_t last = r.tokens.size() - 1;
  while (!r.scored[last]) --last;
  std::span<const int> inputs(r.tokens.data(), last);
  std::span<const int> targets(r.tokens.data() + 1, last);
  std::vector<bool> ignore(last);
  for (std::size_t t = 0; t < last; ++t) ignore[t] = !r.scored[t + 1];
  return ad::cross_entropy_mean(fwd.run(inputs).logits, targets, ignore);
}

const model::ForwardHooks* hooks_or_null(const peft::AdapterHooks& h) { return h.empty() ? nullptr : &h; }

}  // namespace

Tensor mean_loss(const model::Forwarder& fwd, const std::vector<LossRow>& rows) {
  std::size_t total = 0;
  for (const auto& r : rows) {
    if (r.scored.size() != r.tokens.size()) throw std::invalid_argument("mean_loss: mask/token length mismatch");
    total += scored_count(r);
  }
  if (total == 0) throw std::invalid_argument("mean_loss: no scored positions");
  Tensor acc;
  for (const auto& r : rows) {
    const auto n = scored_count(r);
    if (n == 0) continue;
    Tensor part = ad::scale(row_mean(fwd, r), static_cast<double>(n) / static_cast<double>(total));
    acc = acc.defined() ? ad::add(acc, part) : part;
  }
  return acc;
}

double NllSum::perplexity() const {
  if (tokens == 0) throw std::invalid_argument("perplexity: empty token stream");
  return std::exp(nll / static_cast<double>(tokens));
}

NllSum rows_nll(const Checkpoint& ckpt, const std::vector<LossRow>& rows, int workers) {
  std::vector<double> per_row(rows.size(), 0.0);
  auto run_range = [&](std::size_t lo, std::size_t hi) {
    ad::NoGradScope no_grad;
    peft::AdapterHooks hooks(ckpt);
    model::Forwarder fwd(ckpt, hooks_or_null(hooks));
    for (std::size_t i = lo; i < hi; ++i) {
      const auto n = scored_count(rows[i]);
      if (n > 0) per_row[i] = row_mean(fwd, rows[i]).item() * static_cast<double>(n);
    }
  };
  const auto w = static_cast<std::size_t>(std::clamp(workers, 1, 64));
  if (w == 1 || rows.size() < 2 * w) {
    run_range(0, rows.size());
  } else {
    std::vector<std::thread> pool;
    const std::size_t per = (rows.size() + w - 1) / w;
    for (std::size_t t = 0; t < w; ++t) {
      const std::size_t lo = std::min(rows.size(), t * per), hi = std::min(rows.size(), lo + per);
      pool.emplace_back(run_range, lo, hi);
    }
    for (auto& th : pool) th.join();
  }
  NllSum out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.nll += per_row[i];
    out.tokens += scored_count(rows[i]);
  }
  return out;
}

NllSum stream_nll(const Checkpoint& ckpt, const data::PackedStream& stream, int workers) {
  std::vector<LossRow> rows;
  for (std::size_t c = 0; c < stream.chunk_count(); ++c) {
    LossRow r{stream.chunks()[c], stream.real()[c]};
    r.scored[0] = false;
    rows.push_back(std::move(r));
  }
  return rows_nll(ckpt, rows, workers);
}

// ---------------------------------------------------------------------------
// Adam

double Adam::step(Checkpoint& ckpt, const std::vector<std::string>& names, const peft::Mask& mask, double lr,
                  double clip_norm) {
  struct Slot {
    Tensor* param;
    std::span<const double> grad;
    const std::vector<bool>* bits;
    const std::string* name;
  };
  std::vector<Slot> slots;
  double sq = 0.0;
  for (const auto& name : names) {
    auto& p = ckpt.tensors.at(name);
    const std::vector<bool>* bits = nullptr;
    if (!mask.empty() && !name.starts_with("adapter.")) {
      auto it = mask.find(name);
      if (it == mask.end()) continue;
      bits = &it->second;
    }
    auto g = p.grad();
    if (g.empty()) continue;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!bits || (*bits)[i]) sq += g[i] * g[i];
    slots.push_back({&p, g, bits, &name});
  }
  const double norm = std::sqrt(sq);
  const double clip = norm > clip_norm ? clip_norm / norm : 1.0;
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (auto& s : slots) {
    auto& m = m_[*s.name];
    auto& v = v_[*s.name];
    if (m.empty()) {
      m.assign(s.grad.size(), 0.0);
      v.assign(s.grad.size(), 0.0);
    }
    auto w = s.param->mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (s.bits && !(*s.bits)[i]) continue;
      const double g = s.grad[i] * clip;
      m[i] = b1_ * m[i] + (1.0 - b1_) * g;
      v[i] = b2_ * v[i] + (1.0 - b2_) * g * g;
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
  return norm;
}

std::size_t Adam::state_bytes() const {
  std::size_t n = 0;
  for (const auto& [_, m] : m_) n += 2 * m.size() * sizeof(double);
  return n;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

std::string batch_fingerprint(const data::Batch& b) {
  std::string text;
  for (const auto& row : b.tokens)
    for (int t : row) text += std::to_string(t) + ",";
  return sha256_hex(text).substr(0, 16);
}

std::vector<std::string> unique_names(const std::vector<std::string>& names) {
  std::set<std::string> seen;
  std::vector<std::string> out;
  for (const auto& n : names)
    if (seen.insert(n).second) out.push_back(n);
  return out;
}

void clear_grad_flags(Checkpoint& ckpt) {
  for (auto& [_, t] : ckpt.tensors) {
    t.zero_grad();
    t.set_requires_grad(false);
  }
}

std::vector<LossRow> stream_rows(const data::PackedStream& stream) {
  std::vector<LossRow> rows;
  for (std::size_t c = 0; c < stream.chunk_count(); ++c) {
    LossRow r{stream.chunks()[c], stream.real()[c]};
    r.scored[0] = false;
    rows.push_back(std::move(r));
  }
  return rows;
}

TrainResult train_impl(const Checkpoint& ckpt, const peft::StrategyState& state, const data::PackedStream& stream,
                       const data::PackedStream& heldout, const TrainConfig& cfg, int offset,
                       const Progress& progress) {
  cfg.validate();
  if (stream.chunk_count() == 0) throw std::invalid_argument("train: empty training stream");
  if (state.spec.variant == peft::Variant::fishmask && state.mask.empty())
    throw std::invalid_argument("train: fishmask needs its mask selected first (fishmask_prepare)");

  // Memory is counted from here so the figure covers only what this run allocates.
  const auto baseline = ad::MemoryCounter::current();
  ad::MemoryCounter::reset_peak();
  Checkpoint work = ckpt.deep_copy();
  clear_grad_flags(work);
  const auto trainable = unique_names(state.trainable);
  for (const auto& name : trainable) work.tensors.at(name).set_requires_grad(true);

  const auto heldout_rows = stream_rows(heldout);
  const auto start = std::chrono::steady_clock::now();

  TrainResult out;
  Adam adam;
  double best_ppl = 0.0;
  auto record = [&](int step, double loss) {
    RunRecord r;
    r.step = offset + step;
    r.loss = loss;
    r.heldout_ppl = rows_nll(work, heldout_rows).perplexity();
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    r.mem_bytes = ad::MemoryCounter::peak() - baseline + adam.state_bytes();
    out.log.records.push_back(r);
    if (out.log.best_step < 0 || r.heldout_ppl < best_ppl) {
      best_ppl = r.heldout_ppl;
      out.log.best_step = r.step;
      out.best = work.deep_copy();
    }
    if (progress) progress(r);
  };

  const auto first = stream.batch(static_cast<std::size_t>(offset));
  const auto first_rows = rows_from_batch(first);
  const auto first_nll = rows_nll(work, first_rows);
  record(0, first_nll.nll / static_cast<double>(first_nll.tokens));

  double loss_sum = 0.0;
  int loss_n = 0;
  for (int s = 0; s < cfg.steps; ++s) {
    const auto batch = stream.batch(static_cast<std::size_t>(offset + s));
    for (const auto& name : trainable) work.tensors.at(name).zero_grad();
    double loss_value;
    {
      ad::Tape tape;
      ad::TapeScope scope(tape);
      peft::AdapterHooks hooks(work);
      model::Forwarder fwd(work, hooks_or_null(hooks));
      Tensor loss = mean_loss(fwd, rows_from_batch(batch));
      loss_value = loss.item();
      if (!std::isfinite(loss_value))
        throw TrainingAborted("non-finite loss " + fmt(loss_value) + " at step " + std::to_string(offset + s) +
                                  " (batch " + batch_fingerprint(batch) + ")",
                              out.log);
      tape.backward(loss);
    }
    adam.step(work, trainable, state.mask, lr_at(s, cfg), cfg.clip_norm);
    loss_sum += loss_value;
    ++loss_n;
    if ((s + 1) % cfg.eval_every == 0 || s + 1 == cfg.steps) {
      record(s + 1, loss_sum / loss_n);
      loss_sum = 0.0;
      loss_n = 0;
    }
  }
  clear_grad_flags(work);
  clear_grad_flags(out.best);
  out.last = std::move(work);
  return out;
}

}  // namespace

TrainResult train(const Checkpoint& ckpt, const peft::StrategyState& state, const data::PackedStream& stream,
                  const data::PackedStream& heldout, const TrainConfig& cfg, const Progress& progress) {
  return train_impl(ckpt, state, stream, heldout, cfg, 0, progress);
}

CsftResult csft_two_stage(const Checkpoint& ckpt, const peft::StrategyState& state, const data::PackedStream& stream,
                          const data::PackedStream& heldout, const TrainConfig& cfg, double mask_density,
                          const Progress& progress) {
  cfg.validate();
  if (cfg.steps % 2 != 0) throw ValidationError("train.steps", "csft splits the run in two stages; steps must be even");
  TrainConfig half = cfg;
  half.steps = cfg.steps / 2;
  half.eval_every = std::min(cfg.eval_every, half.steps);

  peft::StrategyState dense = state;
  dense.mask.clear();
  CsftResult out;
  auto stage1 = train_impl(ckpt, dense, stream, heldout, half, 0, {});
  out.stage1 = stage1.log;

  const auto k = peft::mask_budget(ckpt.spec, mask_density);
  out.mask = peft::csft_select_mask(ckpt, stage1.last, k, peft::default_frozen_names(ckpt));

  // Stage 2 restarts from the base values with only the selected scalars free.
  peft::StrategyState sparse = state;
  sparse.mask = out.mask;
  out.result = train_impl(ckpt, sparse, stream, heldout, half, half.steps, progress);
  return out;
}

peft::Mask fishmask_prepare(Checkpoint& ckpt, const data::PackedStream& stream, const TrainConfig& cfg,
                            double mask_density) {
  auto batch_loss = [&](int b) {
    peft::AdapterHooks hooks(ckpt);
    model::Forwarder fwd(ckpt, hooks_or_null(hooks));
    return mean_loss(fwd, rows_from_batch(stream.batch(static_cast<std::size_t>(b))));
  };
  const auto k = peft::mask_budget(ckpt.spec, mask_density);
  return peft::fishmask_select(ckpt, batch_loss, cfg.fisher_batches, k, peft::default_frozen_names(ckpt));
}

AdaptResult adapt(const Checkpoint& base, const peft::StrategySpec& spec, const data::PackedStream& stream,
                  const data::PackedStream& heldout, const TrainConfig& cfg, const Progress& progress) {
  cfg.validate();
  Checkpoint work = base.deep_copy();
  AdaptResult out;
  out.state = peft::attach(work, spec, cfg.seed);
  if (spec.variant == peft::Variant::csft) {
    auto r = csft_two_stage(work, out.state, stream, heldout, cfg, spec.mask_density, progress);
    out.state.mask = std::move(r.mask);
    out.result = std::move(r.result);
    return out;
  }
  if (spec.variant == peft::Variant::fishmask) out.state.mask = fishmask_prepare(work, stream, cfg, spec.mask_density);
  out.result = train(work, out.state, stream, heldout, cfg, progress);
  return out;
}

// ---------------------------------------------------------------------------
// Instruction tuning

LossRow instruction_row(const bpe::TokenizerModel& tok, const InstructionExample& ex) {
  LossRow r;
  r.tokens.push_back(tok.eod_id());
  for (int t : tok.encode(ex.input)) r.tokens.push_back(t);
  const auto prompt_len = r.tokens.size();
  for (int t : tok.encode(ex.target)) r.tokens.push_back(t);
  r.tokens.push_back(tok.eod_id());
  r.scored.assign(r.tokens.size(), false);
  for (std::size_t t = prompt_len; t < r.tokens.size(); ++t) r.scored[t] = true;
  return r;
}

InstructionPool instruction_pool(const bpe::TokenizerModel& tok, const std::vector<InstructionExample>& mixture,
                                 InstructionMode mode, const std::string& target_language, int seq_len) {
  if (mixture.empty()) throw std::invalid_argument("instruction_tune: empty mixture");
  InstructionPool pool;
  for (const auto& ex : mixture) {
    if (mode == InstructionMode::target_only && ex.language != target_language) continue;
    auto row = instruction_row(tok, ex);
    if (row.tokens.size() > static_cast<std::size_t>(seq_len)) {
      ++pool.skipped;
      continue;
    }
    pool.rows.push_back(std::move(row));
    pool.tasks.push_back(ex.task);
  }
  if (pool.rows.empty())
    throw std::invalid_argument("instruction_tune: no usable examples for language '" + target_language + "'");
  return pool;
}

InstructionResult instruction_tune(const Checkpoint& ckpt, const bpe::TokenizerModel& tok,
                                   const std::vector<InstructionExample>& mixture, InstructionMode mode,
                                   const std::string& target_language, const TrainConfig& cfg) {
  cfg.validate();
  auto pool = instruction_pool(tok, mixture, mode, target_language, cfg.seq_len);
  InstructionResult out;
  out.skipped = pool.skipped;
  out.pool_size = pool.rows.size();
  if (pool.skipped > 0)
    std::fprintf(stderr, "instruction_tune: skipped %zu example(s) longer than seq_len %d\n", pool.skipped,
                 cfg.seq_len);

  Checkpoint work = ckpt.deep_copy();
  clear_grad_flags(work);
  std::vector<std::string> names;
  for (auto& [name, t] : work.tensors) {
    t.set_requires_grad(true);
    names.push_back(name);
  }

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(pool.rows.size());
  std::size_t cursor = order.size();
  Adam adam;
  for (int s = 0; s < cfg.steps; ++s) {
    std::vector<LossRow> batch;
    for (int i = 0; i < cfg.batch_size; ++i) {
      if (cursor == order.size()) {
        for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(pool.rows[order[cursor++]]);
    }
    for (auto& [_, t] : work.tensors) t.zero_grad();
    {
      ad::Tape tape;
      ad::TapeScope scope(tape);
      peft::AdapterHooks hooks(work);
      model::Forwarder fwd(work, hooks_or_null(hooks));
      Tensor loss = mean_loss(fwd, batch);
      if (!std::isfinite(loss.item()))
        throw std::runtime_error("instruction_tune: non-finite loss at step " + std::to_string(s));
      out.losses.push_back(loss.item());
      tape.backward(loss);
    }
    adam.step(work, names, {}, lr_at(s, cfg), cfg.clip_norm);
  }
  clear_grad_flags(work);
  out.tuned = std::move(work);
  return out;
}

}  // namespace adaptkit::train
