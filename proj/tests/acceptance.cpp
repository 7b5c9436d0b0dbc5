// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one PASS/FAIL line per criterion, exit 1 if any fails.
//
//   acceptance [--work DIR] [--only 1,8,13]
//
// With --work, pretrained bases and adaptation runs are cached in DIR and
// reused on the next invocation (development only; ctest always starts clean).

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include <unistd.h>

#include "adaptkit/cli.hpp"
#include "adaptkit/errors.hpp"
#include "json.hpp"
#include "script_fixtures.hpp"

using namespace adaptkit;
using ad::Tensor;
using model::Checkpoint;
using model::ModelSpec;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// Pinned tolerances and budgets

constexpr double kPrimitiveTol = 1e-4;
constexpr double kClmTol = 1e-3;
constexpr double kGradSuiteSeconds = 60.0;
constexpr double kIdentityTol = 1e-12;
constexpr double kMergeTol = 1e-9;
constexpr double kInverseTol = 1e-10;
constexpr int kRandomByteStrings = 10000;
constexpr int kFrozenSteps = 500;
constexpr int kToySteps = 2000;
constexpr double kToyMinutes = 10.0;
constexpr double kMinPplReduction = 0.30;
constexpr double kChance = 1.0 / 3.0;
constexpr double kChanceBand = 0.05;
constexpr double kPlacementTol = 0.01;
constexpr double kBinomialConfidence = 0.99;
constexpr int kRetrievalPairs = 200;
constexpr int kSweepSteps = 2000;
constexpr int kSeeds = 3;

// Toy hyperparameters. Strategies with a reported recipe (continued, MAD-X,
// the (IA)³ family) use it: peak lr 1e-4, linear decay, warmup 0.1 for (IA)³
// and 0 otherwise. The other strategies take 1e-3 from the same search grid;
// the sparse ones barely move at 1e-4 in 2000 steps. At 1e-3 MAD-X's
// invertible adapter remaps the whole embedding table and forgets the seen
// language worse than continued pretraining does, hence the split.
// The sweeps run at 1e-3: at 1e-4 the toy is step-limited and neither the
// data size nor the bottleneck width changes held-out perplexity.
constexpr int kBatch = 4;
constexpr int kSeqLen = 64;
constexpr double kReportedLr = 1e-4;
constexpr double kGridLr = 1e-3;
constexpr double kSweepLr = 1e-3;
constexpr double kPretrainLr = 1e-3;
constexpr int kPretrainSteps = 2000;

// ---------------------------------------------------------------------------

struct Result {
  bool pass = false;
  std::string detail;
};

fs::path g_work;
bool g_cache = false;
unsigned g_threads = 1;

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Tensor random_tensor(ad::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(ad::shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor probe_sum(const Tensor& y) {
  std::vector<double> w(y.numel());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(1.7 * static_cast<double>(i) + 0.3);
  return ad::sum(ad::mul(y, Tensor::from(y.shape(), w)));
}

double max_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

std::vector<int> random_tokens(std::mt19937_64& rng, int n, int vocab) {
  std::uniform_int_distribution<int> id(0, vocab - 1);
  std::vector<int> out(n);
  for (auto& t : out) t = id(rng);
  return out;
}

void perturb(Checkpoint& c, const std::string& prefix, double sd, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, sd);
  for (auto& [name, t] : c.tensors)
    if (name.starts_with(prefix))
      for (auto& v : t.mutable_data()) v += noise(rng);
}

ModelSpec toy_spec(int width = 64) {
  return {.layers = 2, .width = width, .heads = 4, .ffn_width = 4 * width, .vocab = 512, .max_seq = 256, .seed = 0};
}

train::TrainConfig toy_train(peft::Variant v, int steps, std::uint64_t seed) {
  train::TrainConfig c;
  c.steps = steps;
  c.batch_size = kBatch;
  c.seq_len = kSeqLen;
  using peft::Variant;
  const bool reported = v == Variant::continued || v == Variant::madx || v == Variant::ia3 || v == Variant::ia3_inv;
  c.peak_lr = reported ? kReportedLr : kGridLr;
  c.warmup_ratio = (v == peft::Variant::ia3 || v == peft::Variant::ia3_inv) ? 0.1 : 0.0;
  c.eval_every = std::max(1, steps / 10);
  c.heldout_size = 64;
  c.seed = seed;
  return c;
}

// Runs jobs on up to g_threads threads; each job owns its tape and counters.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& job) {
  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr first_error;
  auto worker = [&] {
    for (std::size_t i; (i = next++) < n;) {
      try {
        job(i);
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < std::min<std::size_t>(g_threads, n); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

// ---------------------------------------------------------------------------
// Toy worlds: synthetic bilingual corpus, BPE on the pivot side, dense
// pretraining on the pivot side only.

struct World {
  cli::ExperimentConfig cfg;
  cli::Workspace ws;
  fs::path dir;  // holds base.ckpt and tokenizer.bbpe
};

cli::ExperimentConfig world_config(int width) {
  cli::ExperimentConfig c;
  c.model.spec = toy_spec(width);
  c.model.pretrain_steps = kPretrainSteps;
  c.model.pretrain_lr = kPretrainLr;
  c.strategy = peft::StrategySpec::defaults_for(peft::Variant::madx);
  c.train = toy_train(peft::Variant::madx, kToySteps, 0);
  c.eval.tasks = {"nli-a", "nli-b", "paraphrase-a", "paraphrase-b", "completion-a", "completion-b"};
  return c;
}

World& world(int width) {
  static std::map<int, World> worlds;
  if (auto it = worlds.find(width); it != worlds.end()) return it->second;
  World w;
  w.cfg = world_config(width);
  w.dir = g_work / ("base-d" + std::to_string(width));
  std::ostringstream log;
  const auto t0 = std::chrono::steady_clock::now();
  if (g_cache && fs::exists(w.dir / "base.ckpt")) {
    auto c = w.cfg;
    c.model.checkpoint = (w.dir / "base.ckpt").string();
    c.model.tokenizer = (w.dir / "tokenizer.bbpe").string();
    w.ws = cli::build_workspace(c, static_cast<int>(g_threads), log);
  } else {
    w.ws = cli::build_workspace(w.cfg, static_cast<int>(g_threads), log);
    fs::create_directories(w.dir);
    model::save_checkpoint(w.ws.base, w.dir / "base.ckpt");
    w.ws.tok.save(w.dir / "tokenizer.bbpe");
  }
  std::cout << "  [setup] d=" << width << " base ready in " << fmt(seconds_since(t0), 3) << " s" << std::endl;
  return worlds.emplace(width, std::move(w)).first->second;
}

// One adaptation run through the CLI runner, cached under --work.
struct ToyRun {
  cli::RunSummary summary;
  fs::path dir;
};

cli::RunSummary summary_from_manifest(const fs::path& dir) {
  const json s = json::parse(slurp(dir / "manifest.json")).at("summary");
  cli::RunSummary r;
  r.variant = s.at("variant");
  r.best_step = s.at("best_step");
  r.initial_ppl = s.at("initial_ppl");
  r.best_ppl = s.at("best_ppl");
  r.pivot_ppl_before = s.at("pivot_ppl_before");
  r.pivot_ppl_after = s.at("pivot_ppl_after");
  r.trainable = s.at("trainable");
  r.total = s.at("total");
  return r;
}

std::map<std::pair<peft::Variant, std::uint64_t>, ToyRun> g_toy_runs;

struct ToyJob {
  peft::Variant variant;
  std::uint64_t seed;
};

double run_toy_jobs(const std::vector<ToyJob>& jobs) {
  auto& w = world(64);
  std::mutex mu;
  const auto t0 = std::chrono::steady_clock::now();
  parallel_for(jobs.size(), [&](std::size_t i) {
    const auto& j = jobs[i];
    const fs::path dir = g_work / "toy" / (peft::to_string(j.variant) + "-s" + std::to_string(j.seed));
    ToyRun run{{}, dir};
    if (g_cache && fs::exists(dir / "manifest.json")) {
      run.summary = summary_from_manifest(dir);
    } else {
      auto c = w.cfg;
      c.strategy = peft::StrategySpec::defaults_for(j.variant);
      c.train = toy_train(j.variant, kToySteps, j.seed);
      c.data.seed = j.seed;
      std::ostringstream log;
      run.summary = cli::run_adapt(c, w.ws, dir, 1, log);
    }
    std::lock_guard lock(mu);
    g_toy_runs[{j.variant, j.seed}] = run;
  });
  return seconds_since(t0);
}

const ToyRun& toy_run(peft::Variant v, std::uint64_t seed) {
  if (!g_toy_runs.contains({v, seed})) run_toy_jobs({{v, seed}});
  return g_toy_runs.at({v, seed});
}

// ---------------------------------------------------------------------------
// 1. Gradient suite

Result gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  using namespace ad;
  std::mt19937_64 rng(5);
  double worst_prim = 0;
  for (int trial = 0; trial < 10; ++trial) {
    auto other = random_tensor({3, 4}, rng);
    auto right = random_tensor({4, 2}, rng);
    auto vec = random_tensor({4}, rng);
    auto gain = random_tensor({4}, rng, 0.5, 1.5);
    auto table = random_tensor({5, 4}, rng);
    const std::vector<int> ids = {4, 0, 4};
    const std::vector<int> targets = {1, 3, 0};
    const std::vector<bool> ignore = {false, false, true};
    auto x = random_tensor({3, 4}, rng, -2.0, 2.0);
    const double eps = 1e-5;
    const std::vector<std::pair<std::function<Tensor(const Tensor&)>, Tensor>> checks = {
        {[&](const Tensor& t) { return probe_sum(matmul(t, right)); }, x},
        {[&](const Tensor& t) { return probe_sum(matmul(other, transpose(t))); }, x},
        {[&](const Tensor& t) { return probe_sum(add(t, other)); }, x},
        {[&](const Tensor& t) { return probe_sum(add(other, t)); }, vec},
        {[&](const Tensor& t) { return probe_sum(mul(t, other)); }, x},
        {[&](const Tensor& t) { return probe_sum(mul(other, t)); }, vec},
        {[&](const Tensor& t) { return probe_sum(scale(t, -1.3)); }, x},
        {[&](const Tensor& t) { return probe_sum(gelu(t)); }, x},
        {[&](const Tensor& t) { return probe_sum(softmax_rows(t)); }, x},
        {[&](const Tensor& t) { return probe_sum(layer_norm(t, gain, vec)); }, x},
        {[&](const Tensor& t) { return probe_sum(layer_norm(other, t, vec)); }, gain},
        {[&](const Tensor& t) { return probe_sum(layer_norm(other, gain, t)); }, vec},
        {[&](const Tensor& t) { return probe_sum(gather_rows(t, ids)); }, table},
        {[&](const Tensor& t) { return probe_sum(transpose(t)); }, x},
        {[&](const Tensor& t) {
           auto parts = split_last_dim(t, 2);
           return probe_sum(concat_last_dim({parts[1], gelu(parts[0]), parts[1]}));
         },
         x},
        {[&](const Tensor& t) { return sum(t); }, x},
        {[&](const Tensor& t) { return cross_entropy_mean(t, targets, ignore); }, x},
    };
    for (const auto& [f, point] : checks) worst_prim = std::max(worst_prim, finite_difference_check(f, point, eps));
  }

  ModelSpec s{.layers = 1, .width = 8, .heads = 2, .ffn_width = 32, .vocab = 12, .max_seq = 8, .seed = 4};
  auto base = model::init_model(s);
  perturb(base, "", 0.2, 3);
  const std::vector<int> tokens = {3, 7, 1, 1, 9, 0};
  const std::vector<int> inputs(tokens.begin(), tokens.end() - 1);
  const std::vector<int> targets(tokens.begin() + 1, tokens.end());
  const std::vector<bool> ignore(targets.size(), false);
  double worst_clm = 0;
  for (const auto& [name, t] : base.tensors) {
    auto f = [&, name = name](const Tensor& p) {
      Checkpoint c = base;
      c.tensors[name] = p;
      return ad::cross_entropy_mean(model::forward(c, nullptr, inputs).logits, targets, ignore);
    };
    worst_clm = std::max(worst_clm, ad::finite_difference_check(f, t.clone(), 1e-6));
  }
  const double secs = seconds_since(t0);
  return {worst_prim < kPrimitiveTol && worst_clm < kClmTol && secs < kGradSuiteSeconds,
          "worst primitive rel err " + fmt(worst_prim, 3) + " (< 1e-4), worst CLM rel err " + fmt(worst_clm, 3) +
              " (< 1e-3) over " + std::to_string(base.tensors.size()) + " tensors, " + fmt(secs, 3) + " s (< 60 s)"};
}

// ---------------------------------------------------------------------------
// 2. Identity at init

Result identity_at_init() {
  const auto spec = toy_spec();
  auto base = model::init_model(spec);
  std::mt19937_64 rng(4);
  std::vector<std::vector<int>> docs;
  for (int i = 0; i < 16; ++i) docs.push_back(random_tokens(rng, 40, 500));
  const auto stream = data::pack_sequences(docs, 32, 4, 510, 511);

  double worst = 0;
  std::string per;
  using peft::Variant;
  for (Variant v : {Variant::madx, Variant::ia3, Variant::ia3_inv, Variant::lora, Variant::bitfit, Variant::csft,
                    Variant::fishmask}) {
    Checkpoint adapted = base.deep_copy();
    auto spec_v = peft::StrategySpec::defaults_for(v);
    auto state = peft::attach(adapted, spec_v, 17);
    if (v == Variant::csft) {
      Checkpoint moved = adapted.deep_copy();
      perturb(moved, "block.", 0.1, 5);
      state.mask = peft::csft_select_mask(adapted, moved, peft::mask_budget(spec, spec_v.mask_density),
                                          peft::default_frozen_names(adapted));
    } else if (v == Variant::fishmask) {
      state.mask = train::fishmask_prepare(adapted, stream, toy_train(v, 10, 0), spec_v.mask_density);
    }
    double w = 0;
    for (int trial = 0; trial < 10; ++trial) {
      auto tokens = random_tokens(rng, 24, spec.vocab);
      w = std::max(w, max_diff(peft::adapted_forward(adapted, tokens).logits,
                               model::forward(base, nullptr, tokens).logits));
    }
    worst = std::max(worst, w);
    per += " " + peft::to_string(v) + "=" + fmt(w, 2);
  }
  return {worst <= kIdentityTol, "max |adapted - base| logit diff over 10 inputs:" + per + " (<= 1e-12)"};
}

// ---------------------------------------------------------------------------
// 3. (IA)³ merge

Result ia3_merge_equivalence() {
  const auto spec = toy_spec();
  auto adapted = model::init_model(spec);
  peft::attach(adapted, peft::StrategySpec::defaults_for(peft::Variant::ia3), 2);
  perturb(adapted, "adapter.", 0.3, 11);
  const auto merged = peft::ia3_merge(adapted).merged;
  std::mt19937_64 rng(7);
  double worst = 0;
  for (int trial = 0; trial < 20; ++trial) {
    auto tokens = random_tokens(rng, 32, spec.vocab);
    worst = std::max(worst, max_diff(model::forward(merged, nullptr, tokens).logits,
                                     peft::adapted_forward(adapted, tokens).logits));
  }
  return {worst < kMergeTol, "max merged vs unmerged logit diff over 20 inputs " + fmt(worst, 3) + " (< 1e-9)"};
}

// ---------------------------------------------------------------------------
// 4. Invertible adapter

Result invertible_round_trip() {
  auto c = model::init_model(toy_spec());
  peft::attach(c, peft::StrategySpec::defaults_for(peft::Variant::madx), 9);
  perturb(c, "adapter.invertible.", 0.5, 21);
  const auto p = peft::CouplingParams::from(c);
  std::mt19937_64 rng(5);
  const auto e = random_tensor({100, 64}, rng, -3.0, 3.0);
  const auto y = peft::invertible_forward(e, p);
  const double worst = max_diff(peft::invertible_inverse(y, p), e);
  const double moved = max_diff(y, e);
  return {worst <= kInverseTol && moved > 1e-3,
          "max |inverse(forward(e)) - e| over 100 embeddings " + fmt(worst, 3) + " (<= 1e-10); forward moves by " +
              fmt(moved, 3)};
}

// ---------------------------------------------------------------------------
// 5. Tokenizer

Result tokenizer_round_trip() {
  std::vector<std::string> corpus(adaptkit::testing::kScriptSamples.begin(), adaptkit::testing::kScriptSamples.end());
  const auto tok = bpe::train_bpe(corpus, 400);
  const auto& toy_tok = world(64).ws.tok;
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> byte(0, 255), len(0, 64);
  int failures = 0, specials = 0;
  auto check = [&](const bpe::TokenizerModel& t, const std::string& s) {
    const auto ids = t.encode(s);
    for (int id : ids)
      if (id < 0 || id >= t.pad_id()) ++specials;
    if (t.decode(ids) != s) ++failures;
  };
  for (int i = 0; i < kRandomByteStrings; ++i) {
    std::string s(static_cast<std::size_t>(len(rng)), '\0');
    for (auto& ch : s) ch = static_cast<char>(byte(rng));
    check(tok, s);
    check(toy_tok, s);
  }
  for (const auto& s : corpus) {
    check(tok, s);
    check(toy_tok, s);
    check(bpe::TokenizerModel(), s);
  }
  return {failures == 0 && specials == 0,
          std::to_string(kRandomByteStrings) + " random byte strings + " + std::to_string(corpus.size()) +
              " script fixtures through 2 trained tokenizers: " + std::to_string(failures) + " round-trip failures, " +
              std::to_string(specials) + " special/unknown ids"};
}

// ---------------------------------------------------------------------------
// 6. Parameter accounting

Result parameter_accounting() {
  const auto spec = toy_spec();
  const auto base = model::init_model(spec);
  int mismatches = 0;
  std::map<peft::Variant, std::size_t> counts;
  for (auto v : peft::all_variants()) {
    Checkpoint c = base.deep_copy();
    const auto s = peft::StrategySpec::defaults_for(v);
    auto state = peft::attach(c, s, 1);
    if (v == peft::Variant::csft || v == peft::Variant::fishmask) {
      Checkpoint moved = c.deep_copy();
      perturb(moved, "block.", 0.1, 5);
      state.mask = peft::csft_select_mask(c, moved, peft::mask_budget(spec, s.mask_density),
                                          peft::default_frozen_names(c));
    }
    const auto enumerated = peft::count_trainable(c, state);
    const auto closed = peft::closed_form_trainable(spec, s);
    if (enumerated != closed) ++mismatches;
    counts[v] = enumerated;
  }
  using peft::Variant;
  const bool order = counts[Variant::ia3] < counts[Variant::madx] && counts[Variant::madx] < counts[Variant::continued];
  return {mismatches == 0 && order, std::to_string(mismatches) + " closed-form/enumeration mismatches over " +
                                        std::to_string(peft::all_variants().size()) + " strategies; ia3 " +
                                        std::to_string(counts[Variant::ia3]) + " < madx(r=16) " +
                                        std::to_string(counts[Variant::madx]) + " < continued " +
                                        std::to_string(counts[Variant::continued])};
}

// ---------------------------------------------------------------------------
// 7. Frozen base

Result frozen_base() {
  auto& w = world(64);
  const auto split = cli::split_new_language(w.ws.new_docs, w.cfg);
  auto pack = [&](const std::vector<std::string>& docs) {
    return data::pack_sequences(data::tokenize_documents(w.ws.tok, docs), kSeqLen, kBatch, w.ws.tok.pad_id(),
                                w.ws.tok.eod_id());
  };
  const auto stream = pack(split.train);
  const auto heldout = pack(split.heldout);
  const auto base_sum = model::tensor_checksum(w.ws.base);
  using peft::Variant;
  const std::vector<Variant> variants = {Variant::madx, Variant::ia3, Variant::ia3_inv, Variant::lora};
  std::vector<std::string> notes(variants.size());
  std::vector<bool> ok(variants.size());
  parallel_for(variants.size(), [&](std::size_t i) {
    const auto r = train::adapt(w.ws.base, peft::StrategySpec::defaults_for(variants[i]), stream, heldout,
                                toy_train(variants[i], kFrozenSteps, 0));
    const auto& last = r.result.last;
    bool same = model::tensor_checksum(last) == base_sum && model::tensor_checksum(r.result.best) == base_sum;
    Checkpoint detached = last.deep_copy();
    peft::detach(detached);
    std::mt19937_64 rng(i);
    double diff = 0;
    for (int t = 0; t < 5; ++t) {
      auto tokens = random_tokens(rng, 48, w.ws.base.spec.vocab);
      diff = std::max(diff, max_diff(model::forward(detached, nullptr, tokens).logits,
                                     model::forward(w.ws.base, nullptr, tokens).logits));
    }
    ok[i] = same && diff == 0.0;
    notes[i] = peft::to_string(variants[i]) + (same ? " checksum-identical" : " CHANGED") + ", detach diff " +
               fmt(diff, 2);
  });
  std::string detail = "after " + std::to_string(kFrozenSteps) + " steps:";
  for (const auto& n : notes) detail += " " + n + ";";
  return {std::all_of(ok.begin(), ok.end(), [](bool b) { return b; }), detail};
}

// ---------------------------------------------------------------------------
// 8. Toy adaptation

Result toy_adaptation() {
  world(64);
  std::vector<ToyJob> jobs;
  for (auto v : peft::all_variants()) jobs.push_back({v, 0});
  for (std::uint64_t s = 1; s < kSeeds; ++s) {
    jobs.push_back({peft::Variant::continued, s});
    jobs.push_back({peft::Variant::madx, s});
  }
  const double secs = run_toy_jobs(jobs);

  bool ok = true;
  std::string detail = "held-out new-language ppl reduction:";
  for (auto v : peft::all_variants()) {
    const auto& s = toy_run(v, 0).summary;
    const double red = 1.0 - s.best_ppl / s.initial_ppl;
    ok = ok && red >= kMinPplReduction;
    detail += " " + peft::to_string(v) + " " + fmt(s.initial_ppl, 4) + "->" + fmt(s.best_ppl, 4) + " (" +
              fmt(100 * red, 3) + "%)";
  }
  detail += "; seen-language ppl factor continued vs madx:";
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    const auto& c = toy_run(peft::Variant::continued, seed).summary;
    const auto& m = toy_run(peft::Variant::madx, seed).summary;
    const double fc = c.pivot_ppl_after / c.pivot_ppl_before;
    const double fm = m.pivot_ppl_after / m.pivot_ppl_before;
    ok = ok && fc > fm;
    detail += " seed " + std::to_string(seed) + " " + fmt(fc, 4) + " vs " + fmt(fm, 4) + ";";
  }
  const bool cached = g_cache && secs < 1.0;
  if (!cached) ok = ok && secs < kToyMinutes * 60;
  detail += " " + std::to_string(jobs.size()) + " runs x " + std::to_string(kToySteps) + " steps in " + fmt(secs, 4) +
            " s on " + std::to_string(g_threads) + " thread(s) (< 600 s)" + (cached ? " [cached]" : "");
  return {ok, detail};
}

// ---------------------------------------------------------------------------
// 9. Random classifier

Result random_classifier() {
  auto& w = world(64);
  const auto& ds = w.ws.tasks.at("nli-a");
  std::vector<int> per_class(3, 0);
  for (const auto& ex : ds.examples) ++per_class.at(static_cast<std::size_t>(ex.label));
  const bool balanced = per_class[0] == per_class[1] && per_class[1] == per_class[2];
  bool ok = balanced;
  double sum = 0;
  std::string accs;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto spec = toy_spec();
    spec.seed = 1000 + seed;
    const auto r = eval::evaluate_task(model::init_model(spec), w.ws.tok, w.ws.templates.at("nli-a"), ds,
                                       eval::ScoreSpan::whole, static_cast<int>(g_threads));
    ok = ok && std::abs(r.accuracy - kChance) <= kChanceBand;
    sum += r.accuracy;
    accs += " " + fmt(100 * r.accuracy, 4);
  }
  return {ok, "balanced " + std::to_string(per_class[0]) + "/" + std::to_string(per_class[1]) + "/" +
                  std::to_string(per_class[2]) + " NLI, accuracy % per seed:" + accs + ", mean " +
                  fmt(100 * sum / 5, 4) + " (33.33 +- 5)"};
}

// ---------------------------------------------------------------------------
// Sweeps go through the CLI with the cached base.

struct SweepRow {
  std::string value;
  std::uint64_t seed;
  std::string status;
  double ppl = 0;
  std::size_t trainable = 0;
};

std::vector<SweepRow> run_sweep(World& w, peft::Variant variant, const std::string& name, const std::string& axis,
                                const std::vector<std::string>& values) {
  const fs::path out = g_work / name;
  if (!(g_cache && fs::exists(out / "sweep.csv"))) {
    auto c = w.cfg;
    c.model.checkpoint = (w.dir / "base.ckpt").string();
    c.model.tokenizer = (w.dir / "tokenizer.bbpe").string();
    c.strategy = peft::StrategySpec::defaults_for(variant);
    c.train = toy_train(variant, kSweepSteps, 0);
    c.train.peak_lr = kSweepLr;
    c.eval.tasks.clear();
    c.sweep.axis = axis;
    c.sweep.values = values;
    c.output_dir = out.string();
    cli::Overrides o;
    o.workers = static_cast<int>(g_threads);
    o.seeds = kSeeds;
    std::ostringstream sink_out, sink_err;
    const int code = cli::cmd_sweep(c, o, sink_out, sink_err);
    if (code != 0) throw std::runtime_error("sweep " + name + " exited " + std::to_string(code) + ": " + sink_err.str());
  }
  std::vector<SweepRow> rows;
  std::istringstream in(slurp(out / "sweep.csv"));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    SweepRow r{f[1], std::stoull(f[2]), f[3]};
    if (r.status == "ok") {
      r.ppl = std::stod(f[6]);
      r.trainable = std::stoull(f[9]);
    }
    rows.push_back(r);
  }
  return rows;
}

// Perplexity non-increasing along `values` for every seed.
bool monotone_per_seed(const std::vector<SweepRow>& rows, const std::vector<std::string>& values, std::string& detail) {
  bool ok = true;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    detail += " seed " + std::to_string(seed) + ":";
    double prev = INFINITY;
    for (const auto& v : values) {
      auto it = std::find_if(rows.begin(), rows.end(), [&](const SweepRow& r) { return r.value == v && r.seed == seed; });
      if (it == rows.end() || it->status != "ok") {
        ok = false;
        detail += " " + v + "=failed";
        continue;
      }
      ok = ok && it->ppl <= prev;
      prev = it->ppl;
      detail += " " + v + "=" + fmt(it->ppl, 5);
    }
    detail += ";";
  }
  return ok;
}

// 10. Data-size sweep
Result data_size_sweep() {
  const std::vector<std::string> values = {"1%", "10%", "100%"};
  const auto rows = run_sweep(world(64), peft::Variant::continued, "sweep-data-size", "data_size", values);
  std::string detail = "continued held-out ppl by data size,";
  const bool ok = monotone_per_seed(rows, values, detail);
  return {ok, detail};
}

// 11. Reduction-factor sweep
Result reduction_sweep() {
  const std::vector<std::string> values = {"48", "16", "4"};
  auto& w = world(96);
  const auto rows = run_sweep(w, peft::Variant::madx, "sweep-reduction", "reduction_factor", values);
  std::string detail = "d=96 trainable:";
  bool ok = true;
  std::size_t prev = 0;
  for (const auto& v : values) {
    auto s = peft::StrategySpec::defaults_for(peft::Variant::madx);
    s.reduction = std::stoi(v);
    const auto closed = peft::closed_form_trainable(w.cfg.model.spec, s);
    for (const auto& r : rows)
      if (r.value == v && r.status == "ok") ok = ok && r.trainable == closed;
    ok = ok && closed > prev;
    prev = closed;
    detail += " r=" + v + " " + std::to_string(closed);
  }
  detail += "; held-out ppl,";
  ok = monotone_per_seed(rows, values, detail) && ok;
  detail += " means:";
  for (const auto& v : values) {
    double sum = 0;
    int n = 0;
    for (const auto& r : rows)
      if (r.value == v && r.status == "ok") sum += r.ppl, ++n;
    detail += " " + v + "=" + fmt(n ? sum / n : NAN, 5);
  }
  return {ok, detail};
}

// ---------------------------------------------------------------------------
// 12. Placement

Result placement_counts() {
  const auto spec = toy_spec();
  const auto all = peft::StrategySpec::defaults_for(peft::Variant::madx);
  const auto target = peft::closed_form_trainable(spec, all);
  bool ok = true;
  std::string detail = "all-blocks madx(r=16) " + std::to_string(target) + ";";
  for (int layer = 0; layer < spec.layers; ++layer) {
    const auto s = peft::single_layer_scaled(all, layer, spec);
    const auto n = peft::closed_form_trainable(spec, s);
    const double rel = std::abs(static_cast<double>(n) - static_cast<double>(target)) / static_cast<double>(target);
    ok = ok && rel <= kPlacementTol;
    detail += " layer " + std::to_string(layer) + " (width x" + std::to_string(s.width_multiplier) + ") " +
              std::to_string(n) + " off by " + fmt(100 * rel, 3) + "%;";
  }
  detail += " (<= 1%)";
  return {ok, detail};
}

// ---------------------------------------------------------------------------
// 13. Retrieval

// Smallest k with P(X > k) <= (1 - confidence) / 2 for X ~ Binomial(n, p).
int binomial_upper(int n, double p, double confidence) {
  const double tail = (1.0 - confidence) / 2.0;
  double cdf = 0;
  for (int k = 0; k <= n; ++k) {
    cdf += std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) + k * std::log(p) +
                    (n - k) * std::log1p(-p));
    if (1.0 - cdf <= tail) return k;
  }
  return n;
}

int binomial_lower(int n, double p, double confidence) {
  const double tail = (1.0 - confidence) / 2.0;
  double cdf = 0;
  for (int k = 0; k <= n; ++k) {
    cdf += std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) + k * std::log(p) +
                    (n - k) * std::log1p(-p));
    if (cdf > tail) return k;
  }
  return n;
}

Result retrieval_probe() {
  auto& w = world(64);
  const auto& base = w.ws.base;
  const int workers = static_cast<int>(g_threads);

  // Identical texts: distinct pivot sentences on both sides.
  data::ParallelCorpus same;
  std::set<std::string> seen;
  for (const auto& [b, a] : w.ws.parallel.pairs)
    if (seen.insert(a).second) same.pairs.emplace_back(a, a);
  const auto identical = eval::layer_sweep_retrieval(base, base, w.ws.tok, same);
  const bool id_ok = std::all_of(identical.begin(), identical.end(), [](double a) { return a == 1.0; });

  // Unrelated: independent random word strings in each language.
  data::LanguagePair lp(w.cfg.data.synth);
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> word(0, static_cast<int>(lp.lexicon().size()) - 1), len(4, 12);
  auto random_text = [&](data::Lang lang) {
    std::string s;
    for (int i = len(rng); i > 0; --i) s += (s.empty() ? "" : " ") + lp.word(word(rng), lang);
    return s;
  };
  data::ParallelCorpus unrelated;
  for (int i = 0; i < kRetrievalPairs; ++i) {
    auto b = random_text(data::Lang::b);
    unrelated.pairs.emplace_back(b, random_text(data::Lang::a));
  }
  const auto adapted = model::load_checkpoint(toy_run(peft::Variant::madx, 0).dir / "checkpoint.ckpt");
  const auto chance = eval::layer_sweep_retrieval(adapted, base, w.ws.tok, unrelated, workers);
  const int lo = binomial_lower(kRetrievalPairs, 1.0 / kRetrievalPairs, kBinomialConfidence);
  const int hi = binomial_upper(kRetrievalPairs, 1.0 / kRetrievalPairs, kBinomialConfidence);
  bool chance_ok = true;
  std::string chance_hits;
  for (double a : chance) {
    const int hits = static_cast<int>(std::lround(a * kRetrievalPairs));
    chance_ok = chance_ok && hits >= lo && hits <= hi;
    chance_hits += " " + std::to_string(hits);
  }

  // Real parallel sentences before vs after adaptation.
  const auto pairs = w.ws.parallel.head(kRetrievalPairs);
  const auto before = eval::layer_sweep_retrieval(base, base, w.ws.tok, pairs, workers);
  const auto after = eval::layer_sweep_retrieval(adapted, base, w.ws.tok, pairs, workers);
  const double best_before = *std::max_element(before.begin(), before.end());
  const double best_after = *std::max_element(after.begin(), after.end());
  auto list = [](const std::vector<double>& v) {
    std::string s;
    for (double x : v) s += (s.empty() ? "" : "/") + fmt(x, 3);
    return s;
  };
  return {id_ok && chance_ok && best_after > best_before,
          "identical " + list(identical) + " (all 1.0); unrelated hits per layer" + chance_hits + " of " +
              std::to_string(kRetrievalPairs) + " (99% bounds [" + std::to_string(lo) + ", " + std::to_string(hi) +
              "]); parallel best layer before " + fmt(best_before, 3) + " (" + list(before) + ") -> after madx " +
              fmt(best_after, 3) + " (" + list(after) + ")"};
}

// ---------------------------------------------------------------------------
// 14. Instruction tuning

constexpr int kInstructionEpochs = 2;
constexpr int kInstructionTrainPerTask = 200;

Result instruction_tuning() {
  auto& w = world(64);
  const auto& tok = w.ws.tok;

  // Loss-mask checks: only the target and the closing eod are scored.
  const train::InstructionExample probe{"abc", "xy", "synth-b", "t"};
  const auto row = train::instruction_row(tok, probe);
  const auto n_in = tok.encode(probe.input).size();
  const auto n_tg = tok.encode(probe.target).size();
  bool mask_ok = row.tokens.front() == tok.eod_id() && row.tokens.back() == tok.eod_id() &&
                 row.tokens.size() == n_in + n_tg + 2;
  for (std::size_t t = 0; t < row.scored.size(); ++t) mask_ok = mask_ok && row.scored[t] == (t >= 1 + n_in);

  // Training mixture: the first examples of every synthetic task in both
  // languages; evaluation: the remaining examples of the new-language tasks.
  std::vector<train::InstructionExample> mixture;
  std::vector<std::pair<std::string, data::TaskDataset>> heldout;
  for (const auto& [key, ds] : w.ws.tasks) {
    const auto& t = w.ws.templates.at(key);
    const bool target = key.ends_with("-b");
    data::TaskDataset rest = ds;
    rest.examples.assign(ds.examples.begin() + kInstructionTrainPerTask, ds.examples.end());
    if (target) heldout.emplace_back(key, rest);
    for (int i = 0; i < kInstructionTrainPerTask; ++i) {
      const auto& ex = ds.examples[static_cast<std::size_t>(i)];
      const auto parts = eval::render_parts(t, ex, ex.label);
      mixture.push_back({parts.prefix, parts.continuation, target ? "synth-b" : "synth-a", key});
    }
  }

  const auto base = model::load_checkpoint(toy_run(peft::Variant::continued, 0).dir / "checkpoint.ckpt");
  Checkpoint plain = base.deep_copy();
  peft::detach(plain);
  struct Cell {
    double acc = 0;
  };
  std::vector<Cell> cells(2 * kSeeds);
  parallel_for(cells.size(), [&](std::size_t i) {
    const auto mode = i % 2 == 0 ? train::InstructionMode::target_only : train::InstructionMode::mixture_plus_target;
    const auto pool = train::instruction_pool(tok, mixture, mode, "synth-b", 128);
    train::TrainConfig c;
    c.batch_size = 8;
    c.seq_len = 128;
    c.peak_lr = 1e-4;
    c.warmup_ratio = 0.1;
    c.seed = i / 2;
    c.steps = static_cast<int>(kInstructionEpochs * pool.rows.size() / static_cast<std::size_t>(c.batch_size));
    c.eval_every = c.steps;
    const auto tuned = train::instruction_tune(plain, tok, mixture, mode, "synth-b", c).tuned;
    double correct = 0, n = 0;
    for (const auto& [key, ds] : heldout) {
      const auto r = eval::evaluate_task(tuned, tok, w.ws.templates.at(key), ds, eval::ScoreSpan::continuation, 1);
      correct += r.accuracy * r.n;
      n += r.n;
    }
    cells[i].acc = correct / n;
  });
  bool ok = mask_ok;
  std::string detail = std::string("loss mask ") + (mask_ok ? "ok" : "WRONG") + "; held-out new-language accuracy";
  for (int s = 0; s < kSeeds; ++s) {
    const double t = cells[2 * static_cast<std::size_t>(s)].acc, m = cells[2 * static_cast<std::size_t>(s) + 1].acc;
    ok = ok && m >= t;
    detail += " seed " + std::to_string(s) + ": target_only " + fmt(100 * t, 4) + "% vs mixture " + fmt(100 * m, 4) + "%;";
  }
  return {ok, detail};
}

// ---------------------------------------------------------------------------
// 15. Determinism

const char* kTinyConfig = R"([model]
layers = 1
width = 16
heads = 2
ffn_width = 32
vocab = 300
max_seq = 256
pretrain_steps = 40

[strategy]
variant = madx
reduction = 4

[train]
steps = 10
batch_size = 4
seq_len = 32
peak_lr = 1e-3
eval_every = 5
heldout_size = 8

[data]
synth_documents = 60
synth_doc_words = 24
synth_task_examples = 12
synth_parallel_pairs = 10

[eval]
tasks = nli-b
retrieval_pairs = 10
mode = paired

[sweep]
axis = batch_size
values = 2, 4
)";

Result determinism() {
  const fs::path dir = g_work / "determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto cfg = (dir / "tiny.ini").string();
  std::ofstream(cfg) << kTinyConfig;
  auto run = [&](std::vector<std::string> args) {
    args.insert(args.begin(), "adaptkit");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    return cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  };
  int failures = 0;
  std::vector<std::string> compared;
  for (const char* rep : {"a", "b"}) {
    const auto out = (dir / rep).string();
    const auto sweep = (dir / (std::string(rep) + "-sweep")).string();
    // Different worker counts on the two repetitions; results must not depend on them.
    const std::string workers = std::string(rep) == "a" ? "1" : "3";
    for (const auto& args : std::vector<std::vector<std::string>>{
             {"adapt", "--config", cfg, "--out", out, "--seed", "7", "--workers", workers},
             {"eval", "--config", cfg, "--out", out, "--seed", "7", "--workers", workers},
             {"probe", "--config", cfg, "--out", out, "--seed", "7", "--workers", workers},
             {"sweep", "--config", cfg, "--out", sweep, "--seed", "7", "--workers", workers},
             {"report", "--config", cfg, "--out", sweep}})
      if (run(args) != 0) ++failures;
  }
  for (const std::string sub : {"", "/eval", "/probe", "-sweep", "-sweep/report"}) {
    const auto a = slurp(fs::path((dir / "a").string() + sub) / "manifest.json");
    const auto b = slurp(fs::path((dir / "b").string() + sub) / "manifest.json");
    if (a.empty() || a != b) ++failures;
    compared.push_back(sub.empty() ? "adapt" : sub.substr(1));
  }
  std::string names;
  for (const auto& c : compared) names += (names.empty() ? "" : ", ") + c;
  return {failures == 0, "adapt/eval/probe/sweep/report rerun with seed 7 (workers 1 vs 3): manifests compared for " +
                             names + "; " + std::to_string(failures) + " mismatches or failed commands"};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work" && i + 1 < argc) {
      g_work = argv[++i];
      g_cache = true;
    } else if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string n; std::getline(ss, n, ',');) only.insert(std::stoi(n));
    } else {
      std::cerr << "usage: acceptance [--work DIR] [--only 1,2,...]\n";
      return 2;
    }
  }
  const bool temp = g_work.empty();
  if (temp) g_work = fs::temp_directory_path() / ("adaptkit-acceptance-" + std::to_string(::getpid()));
  fs::create_directories(g_work);
  g_threads = std::max(1u, std::thread::hardware_concurrency());

  const std::vector<std::pair<std::string, Result (*)()>> criteria = {
      {"gradient suite", gradient_suite},
      {"identity at init", identity_at_init},
      {"(IA)3 merge equivalence", ia3_merge_equivalence},
      {"invertible adapter round trip", invertible_round_trip},
      {"tokenizer round trip", tokenizer_round_trip},
      {"parameter accounting", parameter_accounting},
      {"frozen-base invariance", frozen_base},
      {"toy adaptation", toy_adaptation},
      {"random-classifier property", random_classifier},
      {"data-size sweep", data_size_sweep},
      {"reduction-factor sweep", reduction_sweep},
      {"placement parameter matching", placement_counts},
      {"retrieval probe", retrieval_probe},
      {"instruction tuning", instruction_tuning},
      {"determinism", determinism},
  };
  const auto t0 = std::chrono::steady_clock::now();
  int failed = 0, ran = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.contains(id)) continue;
    ++ran;
    const auto ti = std::chrono::steady_clock::now();
    Result r;
    try {
      r = criteria[i].second();
    } catch (const std::exception& e) {
      r = {false, std::string("threw: ") + e.what()};
    }
    if (!r.pass) ++failed;
    std::printf("criterion %2d %s  %s: %s [%.1f s]\n", id, r.pass ? "PASS" : "FAIL", criteria[i].first.c_str(),
                r.detail.c_str(), seconds_since(ti));
    std::fflush(stdout);
  }
  std::printf("%d/%d criteria passed in %.1f s\n", ran - failed, ran, seconds_since(t0));
  if (temp) fs::remove_all(g_work);
  return failed ? 1 : 0;
}
