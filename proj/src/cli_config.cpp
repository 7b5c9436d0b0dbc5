// SPDX-License-Identifier: Apache-2.0
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cmath>
#include <limits>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "adaptkit/cli.hpp"
#include "adaptkit/errors.hpp"

namespace adaptkit::cli {

namespace {

using Section = std::map<std::string, std::string>;
using Sections = std::map<std::string, Section>;

const std::map<std::string, std::set<std::string>>& known_keys() {
  static const std::map<std::string, std::set<std::string>> keys = {
      {"model",
       {"layers", "width", "heads", "ffn_width", "vocab", "max_seq", "seed", "checkpoint", "tokenizer",
        "pretrain_steps", "pretrain_lr"}},
      {"strategy",
       {"variant", "reduction", "invertible", "placement", "lora_rank", "mask_density", "single_layer_scaled"}},
      {"train",
       {"steps", "batch_size", "seq_len", "peak_lr", "schedule", "warmup_ratio", "eval_every", "heldout_size", "seed",
        "clip_norm", "fisher_batches"}},
      {"data",
       {"source", "pivot_source", "language", "pivot_language", "sample_count", "seed", "cache_dir", "parallel",
        "synth_seed", "synth_concepts", "synth_documents", "synth_doc_words", "synth_flip_word_order",
        "synth_parallel_pairs", "synth_task_examples"}},
      {"eval",
       {"run_dir", "mode", "donor", "target", "tasks", "template_file", "score_span", "retrieval_pairs", "layers"}},
      {"output", {"dir"}},
      {"sweep", {"axis", "values", "pair_steps"}},
  };
  return keys;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + v[i];
  return out;
}

std::string fmt(double v) { return format_double(v); }

class Reader {
 public:
  Reader(const Sections& s, std::string section) : section_(std::move(section)) {
    if (auto it = s.find(section_); it != s.end()) values_ = &it->second;
  }
  bool has(const std::string& key) const { return values_ && values_->contains(key); }
  const std::string& raw(const std::string& key) const { return values_->at(key); }

  template <class T>
  void get(const std::string& key, T& out) const {
    if (!has(key)) return;
    const std::string& v = raw(key);
    if constexpr (std::is_same_v<T, std::string>) {
      out = v;
    } else if constexpr (std::is_same_v<T, bool>) {
      if (v == "true" || v == "1" || v == "yes") out = true;
      else if (v == "false" || v == "0" || v == "no") out = false;
      else fail(key, "expected true or false, got '" + v + "'");
    } else {
      T parsed{};
      auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), parsed);
      if (ec != std::errc() || p != v.data() + v.size()) fail(key, "cannot parse '" + v + "'");
      out = parsed;
    }
  }
  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    throw ValidationError(section_ + "." + key, msg);
  }

 private:
  std::string section_;
  const Section* values_ = nullptr;
};

std::vector<int> parse_ints(const Reader& r, const std::string& key) {
  std::vector<int> out;
  for (const auto& item : split_list(r.raw(key))) {
    if (item == "all") continue;
    int v = 0;
    auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc() || p != item.data() + item.size()) r.fail(key, "cannot parse '" + item + "'");
    out.push_back(v);
  }
  return out;
}

std::string int_list(const std::vector<int>& v) {
  if (v.empty()) return "all";
  std::vector<std::string> s;
  for (int x : v) s.push_back(std::to_string(x));
  return join(s);
}

bool is_synthetic_task(const std::string& t) {
  static const std::set<std::string> keys = {"nli-a", "nli-b", "paraphrase-a", "paraphrase-b", "completion-a",
                                             "completion-b"};
  return keys.contains(t);
}

int parse_int_value(const std::string& field, const std::string& s) {
  int v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw ValidationError(field, "cannot parse '" + s + "'");
  return v;
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

bool DataSection::operator==(const DataSection& o) const {
  auto synth_eq = [](const data::SynthConfig& a, const data::SynthConfig& b) {
    return a.seed == b.seed && a.concepts == b.concepts && a.script_offset == b.script_offset &&
           a.flip_word_order == b.flip_word_order && a.documents == b.documents &&
           a.mean_doc_words == b.mean_doc_words && a.parallel_pairs == b.parallel_pairs &&
           a.task_examples == b.task_examples;
  };
  return source == o.source && pivot_source == o.pivot_source && language == o.language &&
         pivot_language == o.pivot_language && sample_count == o.sample_count && seed == o.seed &&
         cache_dir == o.cache_dir && parallel == o.parallel && synth_eq(synth, o.synth);
}

bool ExperimentConfig::operator==(const ExperimentConfig& o) const {
  return model == o.model && strategy == o.strategy && train == o.train && data == o.data && eval == o.eval &&
         output_dir == o.output_dir && sweep == o.sweep;
}

fs::path ExperimentConfig::resolve(const std::string& path) const {
  if (path.empty()) return {};
  fs::path p(path);
  if (p.is_absolute() || base_dir.empty()) return p;
  return base_dir / p;
}

std::size_t resolve_sample_count(const std::string& spec, std::size_t available) {
  const std::string s = trim(spec);
  if (s.empty()) throw ValidationError("data.sample_count", "empty");
  if (s.back() == '%') {
    double pct = 0.0;
    const std::string num = s.substr(0, s.size() - 1);
    auto [p, ec] = std::from_chars(num.data(), num.data() + num.size(), pct);
    if (ec != std::errc() || p != num.data() + num.size() || !(pct > 0.0 && pct <= 100.0))
      throw ValidationError("data.sample_count", "bad percentage '" + s + "'");
    // At least one document for any positive percentage.
    const auto n = static_cast<std::size_t>(std::llround(pct / 100.0 * static_cast<double>(available)));
    return std::max<std::size_t>(n, available ? 1 : 0);
  }
  const int n = parse_int_value("data.sample_count", s);
  if (n <= 0) throw ValidationError("data.sample_count", "must be positive");
  if (static_cast<std::size_t>(n) > available)
    throw ValidationError("data.sample_count", "asks for " + s + " documents, " + std::to_string(available) +
                                                   " available after the held-out split");
  return static_cast<std::size_t>(n);
}

void ExperimentConfig::validate() const {
  model.spec.validate();
  strategy.validate(model.spec);
  train.validate();
  if (train.seq_len > model.spec.max_seq)
    throw ValidationError("train.seq_len", "exceeds model.max_seq " + std::to_string(model.spec.max_seq));
  if (model.checkpoint.empty()) {
    if (model.pretrain_steps < 1) throw ValidationError("model.pretrain_steps", "must be positive");
    if (!(model.pretrain_lr > 0.0)) throw ValidationError("model.pretrain_lr", "must be positive");
  }
  resolve_sample_count(data.sample_count, std::numeric_limits<int>::max());
  if (data.synth.documents <= train.heldout_size && (data.source == "synthetic" || data.pivot_source == "synthetic"))
    throw ValidationError("data.synth_documents", "must exceed train.heldout_size");
  if (data.synth.concepts < 8) throw ValidationError("data.synth_concepts", "need at least 8");
  if (!(data.synth.mean_doc_words >= 1.0)) throw ValidationError("data.synth_doc_words", "must be >= 1");
  if (data.synth.parallel_pairs < 1) throw ValidationError("data.synth_parallel_pairs", "must be positive");
  if (data.synth.task_examples < 1) throw ValidationError("data.synth_task_examples", "must be positive");

  if (eval.mode != "single" && eval.mode != "paired" && eval.mode != "transplant")
    throw ValidationError("eval.mode", "expected single, paired or transplant, got '" + eval.mode + "'");
  if (eval.mode == "transplant" && eval.donor.empty())
    throw ValidationError("eval.donor", "transplant mode needs a donor adapter bundle");
  if (eval.retrieval_pairs < 1) throw ValidationError("eval.retrieval_pairs", "must be positive");
  for (int l : eval.layers)
    if (l < 0 || l > model.spec.layers)
      throw ValidationError("eval.layers", "layer " + std::to_string(l) + " outside 0.." +
                                               std::to_string(model.spec.layers));
  for (const auto& t : eval.tasks) {
    if (is_synthetic_task(t)) continue;
    const auto parts = [&] {
      std::vector<std::string> p;
      std::stringstream ss(t);
      std::string item;
      while (std::getline(ss, item, ':')) p.push_back(item);
      return p;
    }();
    if (parts.size() != 4)
      throw ValidationError("eval.tasks", "'" + t + "' is neither a synthetic task nor path:kind:language:template");
    data::task_kind_from_string(parts[1]);
    if (eval.template_file.empty()) throw ValidationError("eval.template_file", "file tasks need a template file");
  }

  if (sweep.axis.empty()) return;
  static const std::set<std::string> axes = {"data_size", "reduction_factor", "batch_size", "placement", "seq_len"};
  if (!axes.contains(sweep.axis)) throw ValidationError("sweep.axis", "unknown axis '" + sweep.axis + "'");
  if (sweep.values.empty()) throw ValidationError("sweep.values", "no values for axis " + sweep.axis);
  for (const auto& v : sweep.values) {
    if (sweep.axis == "data_size") {
      resolve_sample_count(v, std::numeric_limits<int>::max());
    } else if (sweep.axis == "placement") {
      if (v == "all") continue;
      const int layer = parse_int_value("sweep.values", v);
      peft::single_layer_scaled(strategy, layer, model.spec).validate(model.spec);
    } else {
      const int x = parse_int_value("sweep.values", v);
      if (x <= 0) throw ValidationError("sweep.values", "'" + v + "' must be positive");
      if (sweep.axis == "reduction_factor") {
        auto s = strategy;
        s.reduction = x;
        s.validate(model.spec);
      } else if (sweep.axis == "seq_len" && x > model.spec.max_seq) {
        throw ValidationError("sweep.values", "seq_len " + v + " exceeds model.max_seq");
      }
    }
  }
}

ExperimentConfig parse_config(const std::string& ini_text, const fs::path& base_dir) {
  boost::property_tree::ptree pt;
  std::istringstream in(ini_text);
  try {
    boost::property_tree::ini_parser::read_ini(in, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ValidationError("config", e.message() + " at line " + std::to_string(e.line()));
  }
  Sections sections;
  for (const auto& [name, child] : pt) {
    if (child.empty()) throw ValidationError(name, "key outside any section");
    auto known = known_keys().find(name);
    if (known == known_keys().end()) throw ValidationError(name, "unknown section [" + name + "]");
    for (const auto& [key, value] : child) {
      if (!known->second.contains(key)) throw ValidationError(name + "." + key, "unknown key");
      sections[name][key] = trim(value.data());
    }
  }

  ExperimentConfig cfg;
  cfg.base_dir = base_dir;

  Reader m(sections, "model");
  m.get("layers", cfg.model.spec.layers);
  m.get("width", cfg.model.spec.width);
  m.get("heads", cfg.model.spec.heads);
  m.get("ffn_width", cfg.model.spec.ffn_width);
  m.get("vocab", cfg.model.spec.vocab);
  m.get("max_seq", cfg.model.spec.max_seq);
  m.get("seed", cfg.model.spec.seed);
  m.get("checkpoint", cfg.model.checkpoint);
  m.get("tokenizer", cfg.model.tokenizer);
  m.get("pretrain_steps", cfg.model.pretrain_steps);
  m.get("pretrain_lr", cfg.model.pretrain_lr);

  Reader s(sections, "strategy");
  if (s.has("variant")) cfg.strategy = peft::StrategySpec::defaults_for(peft::variant_from_string(s.raw("variant")));
  s.get("reduction", cfg.strategy.reduction);
  s.get("invertible", cfg.strategy.invertible);
  if (s.has("placement")) cfg.strategy.placement = parse_ints(s, "placement");
  s.get("lora_rank", cfg.strategy.lora_rank);
  s.get("mask_density", cfg.strategy.mask_density);
  if (s.has("single_layer_scaled") && s.raw("single_layer_scaled") != "none") {
    int layer = 0;
    s.get("single_layer_scaled", layer);
    cfg.strategy = peft::single_layer_scaled(cfg.strategy, layer, cfg.model.spec);
  }

  Reader t(sections, "train");
  t.get("steps", cfg.train.steps);
  t.get("batch_size", cfg.train.batch_size);
  t.get("seq_len", cfg.train.seq_len);
  t.get("peak_lr", cfg.train.peak_lr);
  if (t.has("schedule")) cfg.train.schedule = train::schedule_from_string(t.raw("schedule"));
  t.get("warmup_ratio", cfg.train.warmup_ratio);
  t.get("eval_every", cfg.train.eval_every);
  t.get("heldout_size", cfg.train.heldout_size);
  t.get("seed", cfg.train.seed);
  t.get("clip_norm", cfg.train.clip_norm);
  t.get("fisher_batches", cfg.train.fisher_batches);

  Reader d(sections, "data");
  d.get("source", cfg.data.source);
  d.get("pivot_source", cfg.data.pivot_source);
  d.get("language", cfg.data.language);
  d.get("pivot_language", cfg.data.pivot_language);
  d.get("sample_count", cfg.data.sample_count);
  d.get("seed", cfg.data.seed);
  d.get("cache_dir", cfg.data.cache_dir);
  d.get("parallel", cfg.data.parallel);
  d.get("synth_seed", cfg.data.synth.seed);
  d.get("synth_concepts", cfg.data.synth.concepts);
  d.get("synth_documents", cfg.data.synth.documents);
  d.get("synth_doc_words", cfg.data.synth.mean_doc_words);
  d.get("synth_flip_word_order", cfg.data.synth.flip_word_order);
  d.get("synth_parallel_pairs", cfg.data.synth.parallel_pairs);
  d.get("synth_task_examples", cfg.data.synth.task_examples);

  Reader e(sections, "eval");
  e.get("run_dir", cfg.eval.run_dir);
  e.get("mode", cfg.eval.mode);
  e.get("donor", cfg.eval.donor);
  e.get("target", cfg.eval.target);
  if (e.has("tasks")) cfg.eval.tasks = split_list(e.raw("tasks"));
  e.get("template_file", cfg.eval.template_file);
  if (e.has("score_span")) cfg.eval.span = eval::score_span_from_string(e.raw("score_span"));
  e.get("retrieval_pairs", cfg.eval.retrieval_pairs);
  if (e.has("layers")) cfg.eval.layers = parse_ints(e, "layers");

  Reader o(sections, "output");
  o.get("dir", cfg.output_dir);

  Reader w(sections, "sweep");
  w.get("axis", cfg.sweep.axis);
  if (w.has("values")) cfg.sweep.values = split_list(w.raw("values"));
  w.get("pair_steps", cfg.sweep.pair_steps);
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("config", "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.parent_path());
}

std::string serialize_config(const ExperimentConfig& cfg) {
  std::ostringstream out;
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  const auto& ms = cfg.model.spec;
  out << "[model]\n"
      << "layers = " << ms.layers << "\nwidth = " << ms.width << "\nheads = " << ms.heads
      << "\nffn_width = " << ms.ffn_width << "\nvocab = " << ms.vocab << "\nmax_seq = " << ms.max_seq
      << "\nseed = " << ms.seed << "\ncheckpoint = " << cfg.model.checkpoint
      << "\ntokenizer = " << cfg.model.tokenizer << "\npretrain_steps = " << cfg.model.pretrain_steps
      << "\npretrain_lr = " << fmt(cfg.model.pretrain_lr) << "\n\n";

  // The scaled single-layer form is stored as its layer; reading it back
  // reapplies the width multiplier.
  const auto& st = cfg.strategy;
  out << "[strategy]\n"
      << "variant = " << peft::to_string(st.variant) << "\nreduction = " << st.reduction
      << "\ninvertible = " << b(st.invertible) << "\nplacement = "
      << (st.single_layer_scaled ? std::string("all") : int_list(st.placement))
      << "\nlora_rank = " << st.lora_rank << "\nmask_density = " << fmt(st.mask_density)
      << "\nsingle_layer_scaled = " << (st.single_layer_scaled ? std::to_string(*st.single_layer_scaled) : "none")
      << "\n\n";

  const auto& tr = cfg.train;
  out << "[train]\n"
      << "steps = " << tr.steps << "\nbatch_size = " << tr.batch_size << "\nseq_len = " << tr.seq_len
      << "\npeak_lr = " << fmt(tr.peak_lr) << "\nschedule = " << train::to_string(tr.schedule)
      << "\nwarmup_ratio = " << fmt(tr.warmup_ratio) << "\neval_every = " << tr.eval_every
      << "\nheldout_size = " << tr.heldout_size << "\nseed = " << tr.seed << "\nclip_norm = " << fmt(tr.clip_norm)
      << "\nfisher_batches = " << tr.fisher_batches << "\n\n";

  const auto& d = cfg.data;
  out << "[data]\n"
      << "source = " << d.source << "\npivot_source = " << d.pivot_source << "\nlanguage = " << d.language
      << "\npivot_language = " << d.pivot_language << "\nsample_count = " << d.sample_count
      << "\nseed = " << d.seed << "\ncache_dir = " << d.cache_dir << "\nparallel = " << d.parallel
      << "\nsynth_seed = " << d.synth.seed << "\nsynth_concepts = " << d.synth.concepts
      << "\nsynth_documents = " << d.synth.documents << "\nsynth_doc_words = " << fmt(d.synth.mean_doc_words)
      << "\nsynth_flip_word_order = " << b(d.synth.flip_word_order)
      << "\nsynth_parallel_pairs = " << d.synth.parallel_pairs
      << "\nsynth_task_examples = " << d.synth.task_examples << "\n\n";

  const auto& e = cfg.eval;
  out << "[eval]\n"
      << "run_dir = " << e.run_dir << "\nmode = " << e.mode << "\ndonor = " << e.donor << "\ntarget = " << e.target
      << "\ntasks = " << join(e.tasks) << "\ntemplate_file = " << e.template_file
      << "\nscore_span = " << eval::to_string(e.span) << "\nretrieval_pairs = " << e.retrieval_pairs
      << "\nlayers = " << int_list(e.layers) << "\n\n";

  out << "[output]\ndir = " << cfg.output_dir << "\n\n";
  out << "[sweep]\naxis = " << cfg.sweep.axis << "\nvalues = " << join(cfg.sweep.values)
      << "\npair_steps = " << b(cfg.sweep.pair_steps) << "\n";
  return out.str();
}

void apply_overrides(ExperimentConfig& cfg, Overrides& o) {
  if (!o.out)
    if (const char* env = std::getenv("ADAPTKIT_OUT"); env && *env) o.out = env;
  if (!o.workers)
    if (const char* env = std::getenv("ADAPTKIT_WORKERS"); env && *env)
      o.workers = parse_int_value("ADAPTKIT_WORKERS", env);
  if (o.workers && *o.workers < 1) throw ValidationError("workers", "must be positive");
  if (o.seeds < 1) throw ValidationError("seeds", "must be positive");
  if (o.out) cfg.output_dir = *o.out;
  else cfg.output_dir = cfg.resolve(cfg.output_dir).string();
  if (o.seed) {
    cfg.train.seed = *o.seed;
    cfg.data.seed = *o.seed;
  }
  if (o.span) cfg.eval.span = *o.span;
}

}  // namespace adaptkit::cli
