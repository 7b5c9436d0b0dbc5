// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <thread>

#include "adaptkit/cli.hpp"
#include "adaptkit/errors.hpp"
#include "adaptkit/hashing.hpp"

namespace adaptkit::cli {

using nlohmann::json;

namespace {

constexpr const char* kManifestSchema = "adaptkit-manifest-v1";

int worker_count(const Overrides& o) {
  if (o.workers) return *o.workers;
  return std::max(1u, std::thread::hardware_concurrency());
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << bytes;
  if (!out) throw std::runtime_error("short write to " + path.string());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& path) { return json::parse(read_file(path)); }

json file_entry(const fs::path& dir, const std::string& name) {
  return {{"file", name}, {"sha256", sha256_file(dir / name)}, {"bytes", fs::file_size(dir / name)}};
}

json csv_entry(const fs::path& dir, const std::string& name, const std::vector<std::string>& drop) {
  return {{"file", name}, {"sha256", csv_digest(read_file(dir / name), drop)}, {"excludes", drop}};
}

void write_manifest(const fs::path& dir, const json& manifest) { write_file(dir / "manifest.json", manifest.dump(2) + "\n"); }

// The output directory does not change what a run computes, so it is left
// out of the echoed config and its digest.
std::string portable_config(const ExperimentConfig& cfg) {
  auto c = cfg;
  c.output_dir.clear();
  return serialize_config(c);
}

std::string config_digest(const ExperimentConfig& cfg) { return sha256_hex(portable_config(cfg)); }

std::vector<std::string> split_fields(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line))
    if (!line.empty()) out.push_back(line);
  return out;
}

std::vector<std::string> load_docs(const ExperimentConfig& cfg, const std::string& source, const std::string& lang,
                                   const std::vector<std::string>* synthetic) {
  if (source == "synthetic") return *synthetic;
  data::CorpusSpec spec;
  spec.source = source.starts_with("http://") || source.starts_with("https://") ? source
                                                                                 : cfg.resolve(source).string();
  spec.language = lang;
  spec.seed = cfg.data.seed;
  spec.cache_dir = cfg.resolve(cfg.data.cache_dir);
  auto docs = data::load_corpus(spec);
  if (docs.empty()) throw ValidationError("data.source", "corpus '" + source + "' has no documents");
  return docs;
}

bool uses_synthetic(const ExperimentConfig& cfg) {
  if (cfg.data.source == "synthetic" || cfg.data.pivot_source == "synthetic" || cfg.data.parallel == "synthetic")
    return true;
  return std::any_of(cfg.eval.tasks.begin(), cfg.eval.tasks.end(),
                     [](const std::string& t) { return t.find(':') == std::string::npos; });
}

data::PackedStream pack(const bpe::TokenizerModel& tok, const std::vector<std::string>& docs, int seq_len,
                        int batch_size, int workers) {
  return data::pack_sequences(data::tokenize_documents(tok, docs, workers), seq_len, batch_size, tok.pad_id(),
                              tok.eod_id());
}

std::string variant_of(const model::Checkpoint& ckpt) {
  if (!ckpt.metadata.contains("strategy")) return "base";
  return ckpt.metadata.at("strategy").at("variant").get<std::string>();
}

std::vector<eval::EvalReport> evaluate_tasks(const model::Checkpoint& ckpt, const bpe::TokenizerModel& tok,
                                             const Workspace& ws, const ExperimentConfig& cfg,
                                             const std::string& label, int workers, std::ostream& log) {
  std::vector<eval::EvalReport> reports;
  for (const auto& [key, ds] : ws.tasks) {
    auto r = eval::evaluate_task(ckpt, tok, ws.templates.at(key), ds, cfg.eval.span, workers);
    r.model = label;
    r.strategy = variant_of(ckpt);
    r.task = key;
    log << "  " << label << " " << key << " accuracy " << r.accuracy << "\n";
    reports.push_back(std::move(r));
  }
  return reports;
}

fs::path run_dir_of(const ExperimentConfig& cfg) {
  return cfg.eval.run_dir.empty() ? fs::path(cfg.output_dir) : cfg.resolve(cfg.eval.run_dir);
}

void require_file(const fs::path& p, const std::string& field) {
  if (!fs::exists(p)) throw ValidationError(field, "missing " + p.string());
}

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_sd(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

// Mean accuracy over the rows of an eval_report.csv; empty when there is none.
std::string mean_accuracy_cell(const fs::path& csv) {
  if (!fs::exists(csv)) return "";
  std::vector<double> acc;
  auto rows = lines_of(read_file(csv));
  for (std::size_t i = 1; i < rows.size(); ++i) acc.push_back(std::stod(split_fields(rows[i], ',').at(6)));
  return acc.empty() ? "" : format_double(mean(acc));
}

// --- sweep rows (shared by sweep and report so both print the same bytes)

constexpr const char* kSweepHeader =
    "axis,value,seed,status,best_step,initial_ppl,heldout_ppl,pivot_ppl_after,accuracy,trainable_params,"
    "total_params,peak_mem_bytes,train_seconds\n";

std::string sweep_row(const fs::path& root, const json& run, const std::string& axis) {
  const std::string value = run.at("value");
  const std::string seed = std::to_string(run.at("seed").get<std::uint64_t>());
  const std::string status = run.at("status");
  std::string row = axis + "," + value + "," + seed + "," + status;
  if (status != "ok") return row + ",,,,,,,,,\n";
  const fs::path dir = root / run.at("dir").get<std::string>();
  const json s = read_json(dir / "manifest.json").at("summary");
  const json t = read_json(dir / "timing.json");
  row += "," + std::to_string(s.at("best_step").get<int>()) + "," + format_double(s.at("initial_ppl")) + "," +
         format_double(s.at("best_ppl")) + "," + format_double(s.at("pivot_ppl_after")) + "," +
         mean_accuracy_cell(dir / "eval_report.csv") + "," + std::to_string(s.at("trainable").get<std::size_t>()) +
         "," + std::to_string(s.at("total").get<std::size_t>()) + "," +
         std::to_string(s.at("peak_mem_bytes").get<std::size_t>()) + "," + format_double(t.at("train_seconds")) + "\n";
  return row;
}

std::string sweep_csv(const fs::path& root, const json& manifest) {
  std::string out = kSweepHeader;
  for (const auto& run : manifest.at("runs")) out += sweep_row(root, run, manifest.at("axis"));
  return out;
}

// Per-value means over the successful seeds.
std::string sweep_mean_csv(const std::string& sweep) {
  std::string out = "axis,value,runs,heldout_ppl_mean,heldout_ppl_sd,accuracy_mean,accuracy_sd,trainable_params\n";
  struct Agg {
    std::string axis;
    std::vector<double> ppl, acc;
    std::string trainable;
  };
  std::vector<std::pair<std::string, Agg>> order;
  auto rows = lines_of(sweep);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto f = split_fields(rows[i], ',');
    auto it = std::find_if(order.begin(), order.end(), [&](const auto& p) { return p.first == f[1]; });
    if (it == order.end()) {
      order.push_back({f[1], Agg{f[0], {}, {}, ""}});
      it = order.end() - 1;
    }
    if (f[3] != "ok") continue;
    it->second.ppl.push_back(std::stod(f[6]));
    if (!f[8].empty()) it->second.acc.push_back(std::stod(f[8]));
    it->second.trainable = f[9];
  }
  for (const auto& [value, a] : order) {
    out += a.axis + "," + value + "," + std::to_string(a.ppl.size()) + ",";
    out += a.ppl.empty() ? "," : format_double(mean(a.ppl)) + "," + format_double(sample_sd(a.ppl));
    out += ",";
    out += a.acc.empty() ? "," : format_double(mean(a.acc)) + "," + format_double(sample_sd(a.acc));
    out += "," + a.trainable + "\n";
  }
  return out;
}

ExperimentConfig apply_axis(const ExperimentConfig& base, const std::string& axis, const std::string& value) {
  auto c = base;
  if (axis == "data_size") {
    c.data.sample_count = value;
  } else if (axis == "reduction_factor") {
    c.strategy.reduction = std::stoi(value);
  } else if (axis == "batch_size") {
    c.train.batch_size = std::stoi(value);
  } else if (axis == "placement") {
    if (value != "all") c.strategy = peft::single_layer_scaled(base.strategy, std::stoi(value), base.model.spec);
  } else if (axis == "seq_len") {
    const int len = std::stoi(value);
    c.train.seq_len = len;
    // Paired rule: constant tokens per run, so doubling seq_len halves steps.
    if (base.sweep.pair_steps) {
      c.train.steps = std::max(1, static_cast<int>(std::lround(static_cast<double>(base.train.steps) *
                                                               base.train.seq_len / len)));
      c.train.eval_every = std::min(c.train.eval_every, c.train.steps);
    }
  }
  c.validate();
  return c;
}

}  // namespace

std::string csv_digest(const std::string& csv, const std::vector<std::string>& drop_columns) {
  const auto rows = lines_of(csv);
  if (rows.empty()) return sha256_hex("");
  const auto header = split_fields(rows[0], ',');
  std::vector<bool> keep(header.size(), true);
  for (std::size_t i = 0; i < header.size(); ++i)
    keep[i] = std::find(drop_columns.begin(), drop_columns.end(), header[i]) == drop_columns.end();
  std::string kept;
  for (const auto& row : rows) {
    const auto f = split_fields(row, ',');
    bool first = true;
    for (std::size_t i = 0; i < f.size(); ++i) {
      if (i < keep.size() && !keep[i]) continue;
      kept += (first ? "" : ",") + f[i];
      first = false;
    }
    kept += "\n";
  }
  return sha256_hex(kept);
}

DocSplit split_new_language(const std::vector<std::string>& docs, const ExperimentConfig& cfg) {
  const auto h = static_cast<std::size_t>(cfg.train.heldout_size);
  if (docs.size() <= h)
    throw ValidationError("train.heldout_size", "held-out size " + std::to_string(h) + " leaves no training documents (" +
                                                    std::to_string(docs.size()) + " in corpus)");
  auto perm = data::sample_documents(docs, docs.size(), cfg.data.seed);
  DocSplit out;
  out.heldout.assign(perm.end() - static_cast<std::ptrdiff_t>(h), perm.end());
  const std::size_t n = resolve_sample_count(cfg.data.sample_count, perm.size() - h);
  out.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n));
  return out;
}

Workspace build_workspace(const ExperimentConfig& cfg, int workers, std::ostream& log, bool with_base) {
  Workspace ws;
  std::optional<data::SynthBilingual> synth;
  if (uses_synthetic(cfg)) {
    log << "generating synthetic language pair (seed " << cfg.data.synth.seed << ")\n";
    synth = data::synth_bilingual(cfg.data.synth);
  }
  ws.new_docs = load_docs(cfg, cfg.data.source, cfg.data.language, synth ? &synth->corpus_b : nullptr);
  auto pivot = load_docs(cfg, cfg.data.pivot_source, cfg.data.pivot_language, synth ? &synth->corpus_a : nullptr);
  std::tie(ws.pivot_train, ws.pivot_heldout) = train::split_heldout(pivot, cfg.train.heldout_size);

  if (cfg.data.parallel == "synthetic") ws.parallel = synth->parallel;
  else ws.parallel = data::load_parallel(cfg.resolve(cfg.data.parallel));

  std::vector<data::PromptTemplate> file_templates;
  if (!cfg.eval.template_file.empty()) file_templates = data::load_templates(cfg.resolve(cfg.eval.template_file));
  for (const auto& t : cfg.eval.tasks) {
    if (t.find(':') == std::string::npos) {
      ws.tasks[t] = synth->tasks.at(t);
      ws.templates[t] = synth->templates.at(t);
      continue;
    }
    const auto parts = split_fields(t, ':');
    const auto path = cfg.resolve(parts[0]);
    const std::string key = path.stem().string();
    auto it = std::find_if(file_templates.begin(), file_templates.end(),
                           [&](const data::PromptTemplate& p) { return p.name == parts[3]; });
    if (it == file_templates.end()) throw ValidationError("eval.tasks", "no template named '" + parts[3] + "'");
    ws.tasks[key] = data::load_task_data(path, data::task_kind_from_string(parts[1]), parts[2]);
    ws.templates[key] = *it;
  }
  if (!with_base) return ws;

  if (cfg.model.tokenizer.empty()) {
    log << "training BPE on the pivot corpus (vocab " << cfg.model.spec.vocab << ")\n";
    ws.tok = bpe::train_bpe(ws.pivot_train, cfg.model.spec.vocab - bpe::TokenizerModel::kSpecialCount);
  } else {
    ws.tok = bpe::TokenizerModel::load(cfg.resolve(cfg.model.tokenizer));
  }
  if (ws.tok.vocab_size() != cfg.model.spec.vocab)
    throw ValidationError("model.vocab", "tokenizer has " + std::to_string(ws.tok.vocab_size()) + " ids, model " +
                                             std::to_string(cfg.model.spec.vocab));

  if (!cfg.model.checkpoint.empty()) {
    ws.base = model::load_checkpoint(cfg.resolve(cfg.model.checkpoint));
    auto spec = cfg.model.spec;
    spec.seed = ws.base.spec.seed;
    eval::require_same_architecture(spec, ws.base.spec);
    peft::detach(ws.base);
    return ws;
  }

  // Pretraining: dense training from scratch on the pivot corpus.
  train::TrainConfig p = cfg.train;
  p.steps = cfg.model.pretrain_steps;
  p.peak_lr = cfg.model.pretrain_lr;
  p.warmup_ratio = 0.05;
  p.eval_every = std::max(1, p.steps / 4);
  p.seed = cfg.model.spec.seed;
  const auto stream = pack(ws.tok, ws.pivot_train, p.seq_len, p.batch_size, workers);
  const auto heldout = pack(ws.tok, ws.pivot_heldout, p.seq_len, p.batch_size, workers);
  log << "pretraining base model for " << p.steps << " steps\n";
  auto r = train::adapt(model::init_model(cfg.model.spec), peft::StrategySpec::defaults_for(peft::Variant::continued),
                        stream, heldout, p, [&](const train::RunRecord& rec) {
                          log << "  pretrain step " << rec.step << " loss " << rec.loss << " ppl " << rec.heldout_ppl
                              << "\n";
                        });
  ws.base = std::move(r.result.best);
  peft::detach(ws.base);
  return ws;
}

RunSummary run_adapt(const ExperimentConfig& cfg, const Workspace& ws, const fs::path& dir, int workers,
                     std::ostream& log) {
  fs::create_directories(dir);
  const auto split = split_new_language(ws.new_docs, cfg);
  const auto stream = pack(ws.tok, split.train, cfg.train.seq_len, cfg.train.batch_size, workers);
  const auto heldout = pack(ws.tok, split.heldout, cfg.train.seq_len, cfg.train.batch_size, workers);
  if (stream.chunk_count() == 0) throw ValidationError("data.sample_count", "no training tokens");

  log << "adapting with " << peft::to_string(cfg.strategy.variant) << " on " << split.train.size() << " documents ("
      << stream.real_token_count() << " tokens) for " << cfg.train.steps << " steps\n";
  const auto t0 = std::chrono::steady_clock::now();
  train::AdaptResult r;
  try {
    r = train::adapt(ws.base, cfg.strategy, stream, heldout, cfg.train, [&](const train::RunRecord& rec) {
      log << "  step " << rec.step << " loss " << rec.loss << " heldout_ppl " << rec.heldout_ppl << "\n";
    });
  } catch (const train::TrainingAborted& e) {
    write_file(dir / "run_log.csv", e.log().to_csv());
    throw;
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const auto& res = r.result;

  model::save_checkpoint(res.best, dir / "checkpoint.ckpt");
  peft::save_adapter_bundle(res.best, dir / "adapter.bundle");
  write_file(dir / "run_log.csv", res.log.to_csv());
  ws.tok.save(dir / "tokenizer.bbpe");
  model::save_checkpoint(ws.base, dir / "base.ckpt");
  write_file(dir / "config.ini", portable_config(cfg));

  RunSummary s;
  s.variant = peft::to_string(cfg.strategy.variant);
  s.best_step = res.log.best_step;
  s.initial_ppl = res.log.records.front().heldout_ppl;
  for (const auto& rec : res.log.records) {
    if (rec.step == res.log.best_step) s.best_ppl = rec.heldout_ppl;
    s.peak_mem_bytes = std::max(s.peak_mem_bytes, rec.mem_bytes);
  }
  s.pivot_ppl_before = eval::perplexity(ws.base, ws.tok, ws.pivot_heldout, cfg.train.seq_len, workers);
  s.pivot_ppl_after = eval::perplexity(res.best, ws.tok, ws.pivot_heldout, cfg.train.seq_len, workers);
  s.trainable = peft::count_trainable(res.best, r.state);
  s.total = model::param_count(cfg.model.spec);
  s.train_seconds = seconds;
  log << "best step " << s.best_step << " heldout_ppl " << s.best_ppl << " (from " << s.initial_ppl
      << "), pivot ppl " << s.pivot_ppl_before << " -> " << s.pivot_ppl_after << "\n";

  write_file(dir / "timing.json",
             json{{"train_seconds", seconds}, {"seconds_per_step", seconds / cfg.train.steps}}.dump(2) + "\n");
  json manifest = {
      {"schema", kManifestSchema},
      {"command", "adapt"},
      {"variant", s.variant},
      {"seed", cfg.train.seed},
      {"config_sha256", config_digest(cfg)},
      {"artifacts",
       {{"checkpoint", file_entry(dir, "checkpoint.ckpt")},
        {"adapter_bundle", file_entry(dir, "adapter.bundle")},
        {"run_log", csv_entry(dir, "run_log.csv", {"seconds"})}}},
      {"inputs",
       {{"tokenizer", file_entry(dir, "tokenizer.bbpe")},
        {"base", file_entry(dir, "base.ckpt")},
        {"config", file_entry(dir, "config.ini")}}},
      {"summary",
       {{"variant", s.variant},
        {"train_documents", split.train.size()},
        {"train_tokens", stream.real_token_count()},
        {"best_step", s.best_step},
        {"initial_ppl", s.initial_ppl},
        {"best_ppl", s.best_ppl},
        {"pivot_ppl_before", s.pivot_ppl_before},
        {"pivot_ppl_after", s.pivot_ppl_after},
        {"trainable", s.trainable},
        {"total", s.total},
        {"peak_mem_bytes", s.peak_mem_bytes}}},
  };
  write_manifest(dir, manifest);
  return s;
}

int cmd_adapt(const ExperimentConfig& cfg, const Overrides& o, std::ostream& out, std::ostream& err) {
  cfg.validate();
  const int workers = worker_count(o);
  const auto ws = build_workspace(cfg, workers, err);
  const fs::path root = cfg.output_dir;
  if (o.seeds == 1) {
    run_adapt(cfg, ws, root, workers, err);
    out << "adapt: wrote " << (root / "manifest.json").string() << "\n";
    return 0;
  }

  std::string csv = "seed,best_step,initial_ppl,best_ppl,pivot_ppl_before,pivot_ppl_after\n";
  std::vector<double> best, before, after;
  json runs = json::array();
  for (int k = 0; k < o.seeds; ++k) {
    auto c = cfg;
    c.train.seed = cfg.train.seed + static_cast<std::uint64_t>(k);
    c.data.seed = cfg.data.seed + static_cast<std::uint64_t>(k);
    const std::string sub = "seed-" + std::to_string(c.train.seed);
    const auto s = run_adapt(c, ws, root / sub, workers, err);
    csv += std::to_string(c.train.seed) + "," + std::to_string(s.best_step) + "," + format_double(s.initial_ppl) + "," +
           format_double(s.best_ppl) + "," + format_double(s.pivot_ppl_before) + "," + format_double(s.pivot_ppl_after) +
           "\n";
    best.push_back(s.best_ppl);
    before.push_back(s.pivot_ppl_before);
    after.push_back(s.pivot_ppl_after);
    runs.push_back({{"seed", c.train.seed}, {"dir", sub}, {"manifest_sha256", sha256_file(root / sub / "manifest.json")}});
  }
  csv += "mean,," + std::string(",") + format_double(mean(best)) + "," + format_double(mean(before)) + "," +
         format_double(mean(after)) + "\n";
  write_file(root / "seeds.csv", csv);
  write_manifest(root, {{"schema", kManifestSchema},
                        {"command", "adapt-seeds"},
                        {"config_sha256", config_digest(cfg)},
                        {"runs", runs},
                        {"artifacts", {{"seeds", file_entry(root, "seeds.csv")}}},
                        {"summary", {{"best_ppl_mean", mean(best)}, {"best_ppl_sd", sample_sd(best)},
                                     {"pivot_ppl_after_mean", mean(after)}}}});
  out << "adapt: " << o.seeds << " seeds, mean held-out perplexity " << mean(best) << "\n";
  return 0;
}

int cmd_eval(const ExperimentConfig& cfg, const Overrides& o, std::ostream& out, std::ostream& err) {
  cfg.validate();
  if (cfg.eval.tasks.empty()) throw ValidationError("eval.tasks", "no tasks configured");
  const int workers = worker_count(o);
  const fs::path run = run_dir_of(cfg);
  require_file(run / "tokenizer.bbpe", "eval.run_dir");
  const auto tok = bpe::TokenizerModel::load(run / "tokenizer.bbpe");
  const auto ws = build_workspace(cfg, workers, err, false);
  const fs::path dir = fs::path(cfg.output_dir) / "eval";
  fs::create_directories(dir);

  std::vector<eval::EvalReport> reports;
  json artifacts = json::object();
  std::string mode_label = cfg.eval.mode;
  if (cfg.eval.mode == "transplant") {
    const fs::path donor_path = cfg.resolve(cfg.eval.donor);
    const fs::path target_path = cfg.eval.target.empty() ? run / "base.ckpt" : cfg.resolve(cfg.eval.target);
    require_file(donor_path, "eval.donor");
    require_file(target_path, "eval.target");
    const auto donor = peft::load_adapter_bundle(donor_path);
    const auto target = model::load_checkpoint(target_path);
    const auto moved = peft::transplant(donor, target);
    err << "transplanted " << variant_of(donor) << " adapters onto " << target_path.string() << "\n";
    reports = evaluate_tasks(moved, tok, ws, cfg, "transplant", workers, err);
  } else {
    require_file(run / "checkpoint.ckpt", "eval.run_dir");
    const auto adapted = model::load_checkpoint(run / "checkpoint.ckpt");
    if (cfg.eval.mode == "paired") {
      require_file(run / "base.ckpt", "eval.run_dir");
      const auto base = model::load_checkpoint(run / "base.ckpt");
      auto before = evaluate_tasks(base, tok, ws, cfg, "base", workers, err);
      auto after = evaluate_tasks(adapted, tok, ws, cfg, "adapted", workers, err);
      std::string f = "metric,task,before,after,delta\n";
      const auto ppl = eval::forgetting_delta_perplexity(base, adapted, tok, ws.pivot_heldout, cfg.train.seq_len, workers);
      f += "perplexity," + cfg.data.pivot_language + "-heldout," + format_double(ppl.before) + "," +
           format_double(ppl.after) + "," + format_double(ppl.delta()) + "\n";
      for (std::size_t i = 0; i < before.size(); ++i)
        f += "accuracy," + before[i].task + "," + format_double(before[i].accuracy) + "," +
             format_double(after[i].accuracy) + "," + format_double(after[i].accuracy - before[i].accuracy) + "\n";
      write_file(dir / "forgetting.csv", f);
      artifacts["forgetting"] = file_entry(dir, "forgetting.csv");
      reports = std::move(before);
      reports.insert(reports.end(), after.begin(), after.end());
    } else {
      reports = evaluate_tasks(adapted, tok, ws, cfg, "adapted", workers, err);
    }
  }

  write_file(dir / "eval_report.csv", eval::reports_csv(reports));
  write_file(dir / "eval_report.json", eval::reports_json(reports).dump(2) + "\n");
  artifacts["report_csv"] = file_entry(dir, "eval_report.csv");
  // The JSON mirror carries per-prompt timing, so it is listed without a hash.
  artifacts["report_json"] = {{"file", "eval_report.json"}, {"excludes", {"seconds_per_prompt"}}};
  write_manifest(dir, {{"schema", kManifestSchema},
                       {"command", "eval"},
                       {"mode", mode_label},
                       {"score_span", eval::to_string(cfg.eval.span)},
                       {"config_sha256", config_digest(cfg)},
                       {"run_manifest_sha256", fs::exists(run / "manifest.json") ? sha256_file(run / "manifest.json") : ""},
                       {"artifacts", artifacts}});
  out << eval::reports_csv(reports);
  return 0;
}

int cmd_probe(const ExperimentConfig& cfg, const Overrides& o, std::ostream& out, std::ostream& err) {
  cfg.validate();
  const int workers = worker_count(o);
  const fs::path run = run_dir_of(cfg);
  for (const char* f : {"tokenizer.bbpe", "checkpoint.ckpt", "base.ckpt"}) require_file(run / f, "eval.run_dir");
  const auto tok = bpe::TokenizerModel::load(run / "tokenizer.bbpe");
  const auto adapted = model::load_checkpoint(run / "checkpoint.ckpt");
  const auto base = model::load_checkpoint(run / "base.ckpt");
  auto ws_cfg = cfg;
  ws_cfg.eval.tasks.clear();
  const auto ws = build_workspace(ws_cfg, workers, err, false);
  const auto pairs = ws.parallel.head(static_cast<std::size_t>(cfg.eval.retrieval_pairs));
  if (pairs.pairs.empty()) throw ValidationError("data.parallel", "no parallel sentences");

  std::vector<int> layers = cfg.eval.layers;
  if (layers.empty())
    for (int l = 0; l <= base.spec.layers; ++l) layers.push_back(l);
  err << "probing " << pairs.pairs.size() << " sentence pairs at " << layers.size() << " layers\n";
  const auto before = eval::layer_sweep_retrieval(base, base, tok, pairs, workers);
  const auto after = eval::layer_sweep_retrieval(adapted, base, tok, pairs, workers);

  const fs::path dir = fs::path(cfg.output_dir) / "probe";
  fs::create_directories(dir);
  std::string csv = "condition,layer,pairs,accuracy\n";
  for (const auto& [name, acc] : {std::pair{"before", &before}, std::pair{"after", &after}})
    for (int l : layers)
      csv += std::string(name) + "," + std::to_string(l) + "," + std::to_string(pairs.pairs.size()) + "," +
             format_double(acc->at(static_cast<std::size_t>(l))) + "\n";
  write_file(dir / "retrieval.csv", csv);
  write_manifest(dir, {{"schema", kManifestSchema},
                       {"command", "probe"},
                       {"config_sha256", config_digest(cfg)},
                       {"artifacts", {{"retrieval", file_entry(dir, "retrieval.csv")}}}});
  out << csv;
  return 0;
}

int cmd_sweep(const ExperimentConfig& cfg, const Overrides& o, std::ostream& out, std::ostream& err) {
  cfg.validate();
  if (cfg.sweep.axis.empty()) throw ValidationError("sweep.axis", "no sweep axis configured");
  const int workers = worker_count(o);
  // Every value is checked before any run starts.
  std::vector<ExperimentConfig> configs;
  for (const auto& v : cfg.sweep.values) configs.push_back(apply_axis(cfg, cfg.sweep.axis, v));

  const auto ws = build_workspace(cfg, workers, err);
  const fs::path root = cfg.output_dir;
  fs::create_directories(root);
  json runs = json::array();
  int failed = 0;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    for (int k = 0; k < o.seeds; ++k) {
      auto c = configs[i];
      c.train.seed = cfg.train.seed + static_cast<std::uint64_t>(k);
      c.data.seed = cfg.data.seed + static_cast<std::uint64_t>(k);
      const std::string sub = "runs/" + std::to_string(i) + "-seed-" + std::to_string(c.train.seed);
      json entry = {{"value", cfg.sweep.values[i]}, {"seed", c.train.seed}, {"dir", sub}, {"status", "ok"}};
      err << "sweep " << cfg.sweep.axis << "=" << cfg.sweep.values[i] << " seed " << c.train.seed << "\n";
      try {
        run_adapt(c, ws, root / sub, workers, err);
        if (!ws.tasks.empty()) {
          const auto best = model::load_checkpoint(root / sub / "checkpoint.ckpt");
          const auto reports = evaluate_tasks(best, ws.tok, ws, c, "adapted", workers, err);
          write_file(root / sub / "eval_report.csv", eval::reports_csv(reports));
        }
      } catch (const std::exception& e) {
        ++failed;
        entry["status"] = "failed";
        entry["error"] = e.what();
        err << "  run failed: " << e.what() << "\n";
      }
      runs.push_back(entry);
    }
  }

  json manifest = {{"schema", kManifestSchema},
                   {"command", "sweep"},
                   {"axis", cfg.sweep.axis},
                   {"values", cfg.sweep.values},
                   {"seeds", o.seeds},
                   {"config_sha256", config_digest(cfg)},
                   {"runs", runs}};
  const auto csv = sweep_csv(root, manifest);
  write_file(root / "sweep.csv", csv);
  write_file(root / "sweep_mean.csv", sweep_mean_csv(csv));
  manifest["artifacts"] = {{"sweep", csv_entry(root, "sweep.csv", {"train_seconds"})},
                           {"sweep_mean", file_entry(root, "sweep_mean.csv")}};
  write_manifest(root, manifest);
  out << csv;
  if (failed) {
    err << failed << " of " << runs.size() << " sweep runs failed\n";
    return 1;
  }
  return 0;
}

int cmd_report(const ExperimentConfig& cfg, const Overrides&, std::ostream& out, std::ostream& err) {
  const fs::path root = run_dir_of(cfg);
  if (!fs::is_directory(root)) throw ValidationError("output.dir", "no such directory " + root.string());
  std::vector<fs::path> manifests;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && e.path().filename() == "manifest.json") manifests.push_back(e.path());
  std::sort(manifests.begin(), manifests.end());

  json runs = json::array();
  std::vector<eval::ResourceRow> resources;
  std::string curves = "run,step,loss,heldout_ppl\n";
  std::optional<std::pair<fs::path, json>> sweep;
  for (const auto& path : manifests) {
    json m = read_json(path);
    const std::string command = m.value("command", "");
    if (command == "report") continue;
    const fs::path dir = path.parent_path();
    const std::string rel = fs::relative(dir, root).generic_string();
    runs.push_back({{"path", rel}, {"command", command}, {"summary", m.value("summary", json::object())}});
    if (command == "sweep" && !sweep) sweep.emplace(dir, m);
    if (command != "adapt") continue;

    const json s = m.at("summary");
    eval::ResourceRow row;
    row.strategy = s.at("variant");
    row.trainable = s.at("trainable");
    row.total = s.at("total");
    row.peak_mem_bytes = s.at("peak_mem_bytes");
    if (fs::exists(dir / "timing.json")) row.train_seconds = read_json(dir / "timing.json").at("train_seconds");
    if (fs::exists(dir / "eval" / "eval_report.json")) {
      std::vector<double> spp;
      for (const auto& r : read_json(dir / "eval" / "eval_report.json").at("reports"))
        if (r.value("model", "") != "base") spp.push_back(r.value("seconds_per_prompt", 0.0));
      row.seconds_per_prompt = mean(spp);
    }
    resources.push_back(row);
    const auto log = train::RunLog::from_csv(read_file(dir / "run_log.csv"));
    for (const auto& rec : log.records)
      curves += (rel == "." ? std::string("") : rel) + "," + std::to_string(rec.step) + "," + format_double(rec.loss) +
                "," + format_double(rec.heldout_ppl) + "\n";
  }
  if (runs.empty()) throw ValidationError("output.dir", "no run manifests under " + root.string());

  const fs::path dir = root / "report";
  fs::create_directories(dir);
  json artifacts = json::object();
  write_file(dir / "report.json", json{{"schema", "adaptkit-report-v1"}, {"runs", runs}}.dump(2) + "\n");
  artifacts["report"] = file_entry(dir, "report.json");
  write_file(dir / "resource.csv", eval::resource_csv(resources));
  artifacts["resource"] = {{"file", "resource.csv"}, {"excludes", {"train_seconds", "seconds_per_prompt"}}};
  write_file(dir / "curves.csv", curves);
  artifacts["curves"] = file_entry(dir, "curves.csv");
  if (sweep) {
    write_file(dir / "sweep.csv", sweep_csv(sweep->first, sweep->second));
    artifacts["sweep"] = csv_entry(dir, "sweep.csv", {"train_seconds"});
  }
  write_manifest(dir, {{"schema", kManifestSchema}, {"command", "report"}, {"runs", runs.size()}, {"artifacts", artifacts}});
  err << "report: " << runs.size() << " manifests, " << resources.size() << " adaptation runs\n";
  out << eval::resource_csv(resources);
  return 0;
}

}  // namespace adaptkit::cli
