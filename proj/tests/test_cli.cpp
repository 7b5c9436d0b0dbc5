// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>

#include "adaptkit/cli.hpp"
#include "adaptkit/errors.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace adaptkit;
using namespace adaptkit::cli;
using nlohmann::json;

namespace {

// Small enough that a full adapt run takes well under a second.
const char* kTiny = R"([model]
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
)";

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() / ("adaptkit-cli-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

fs::path write_config(const fs::path& dir, const std::string& name, const std::string& text) {
  const auto p = dir / name;
  std::ofstream(p) << text;
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Run {
  int code;
  std::string out, err;
};

Run invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "adaptkit");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string field_of(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ValidationError& e) {
    return e.field();
  }
  return "";
}

}  // namespace

TEST_CASE("config round trip: serialize then parse is the identity") {
  const auto cfg = parse_config(kTiny);
  CHECK(parse_config(serialize_config(cfg)) == cfg);
  CHECK(serialize_config(parse_config(serialize_config(cfg))) == serialize_config(cfg));

  // Defaults alone round trip as well.
  CHECK(parse_config(serialize_config(ExperimentConfig{})) == ExperimentConfig{});
}

TEST_CASE("config round trip property over random configs") {
  std::mt19937_64 rng(7);
  const std::vector<std::string> variants = {"continued", "madx", "ia3", "ia3_inv", "lora", "bitfit", "csft", "fishmask"};
  for (int trial = 0; trial < 200; ++trial) {
    ExperimentConfig c;
    c.model.spec.layers = 1 + static_cast<int>(rng() % 4);
    c.model.spec.width = 16 * (1 + static_cast<int>(rng() % 4));
    c.model.spec.heads = 2;
    c.model.spec.seed = rng() % 1000;
    c.model.pretrain_lr = std::uniform_real_distribution<double>(1e-5, 1e-2)(rng);
    c.strategy = peft::StrategySpec::defaults_for(peft::variant_from_string(variants[rng() % variants.size()]));
    c.strategy.reduction = 1 + static_cast<int>(rng() % 8);
    c.strategy.mask_density = std::uniform_real_distribution<double>(1e-4, 1.0)(rng);
    if (rng() % 2) c.strategy.placement = {0};
    c.train.peak_lr = std::uniform_real_distribution<double>(1e-6, 1e-1)(rng);
    c.train.warmup_ratio = std::uniform_real_distribution<double>(0.0, 0.5)(rng);
    c.train.schedule = rng() % 2 ? train::Schedule::cosine : train::Schedule::linear;
    c.train.seed = rng();
    c.data.sample_count = rng() % 2 ? std::to_string(1 + rng() % 500) : "12.5%";
    c.data.synth.mean_doc_words = std::uniform_real_distribution<double>(4.0, 90.0)(rng);
    c.data.synth.flip_word_order = rng() % 2;
    c.eval.tasks = {"nli-a", "paraphrase-b"};
    c.eval.span = rng() % 2 ? eval::ScoreSpan::whole : eval::ScoreSpan::continuation;
    c.eval.layers = {0, 1};
    c.sweep.axis = "batch_size";
    c.sweep.values = {"4", "8"};
    c.sweep.pair_steps = rng() % 2;
    const auto back = parse_config(serialize_config(c));
    REQUIRE_MESSAGE(back == c, serialize_config(c));
  }
}

TEST_CASE("shipped example config loads") {
  const auto cfg = load_config(fs::path(ADAPTKIT_SOURCE_DIR) / "configs/toy.ini");
  CHECK(cfg.strategy.variant == peft::Variant::madx);
  CHECK(cfg.eval.mode == "paired");
  CHECK(parse_config(serialize_config(cfg), cfg.base_dir) == cfg);
}

TEST_CASE("config rejects unknown keys and bad values, naming the field") {
  CHECK(field_of("[model]\nlayerz = 2\n") == "model.layerz");
  CHECK(field_of("[modle]\nlayers = 2\n") == "modle");
  CHECK(field_of("[train]\nsteps = ten\n") == "train.steps");
  CHECK(field_of("[train]\nschedule = step\n") == "train.schedule");
  CHECK(field_of("[strategy]\nvariant = prefix\n") == "strategy.variant");
  CHECK(field_of("[strategy]\ninvertible = maybe\n") == "strategy.invertible");
  CHECK(field_of("[eval]\nscore_span = prefix\n") == "eval.score_span");
  CHECK(field_of("[model]\nlayers = 2\nlayers = 3\n") == "config");
}

TEST_CASE("cross-field validation happens before any work") {
  auto c = parse_config("[model]\nwidth = 64\n[strategy]\nvariant = madx\nreduction = 7\n");
  try {
    c.validate();
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    CHECK(e.field() == "strategy.reduction");
  }

  c = parse_config("[model]\nmax_seq = 64\n[train]\nseq_len = 128\n");
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = parse_config("[eval]\nmode = twice\n");
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = parse_config("[eval]\ntasks = nli-c\n");
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = parse_config("[sweep]\naxis = reduction_factor\nvalues = 16, 7\n");
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = parse_config("[sweep]\naxis = learning_rate\nvalues = 1\n");
  CHECK_THROWS_AS(c.validate(), ValidationError);
}

TEST_CASE("r=7 with width 64 exits 2 naming strategy.reduction and writes nothing") {
  TempDir tmp;
  const auto cfg = write_config(tmp.path, "bad.ini", "[model]\nwidth = 64\n[strategy]\nvariant = madx\nreduction = 7\n");
  const auto r = invoke({"adapt", "--config", cfg.string(), "--out", (tmp.path / "out").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("strategy.reduction") != std::string::npos);
  CHECK_FALSE(fs::exists(tmp.path / "out"));
}

TEST_CASE("command line errors exit 2") {
  CHECK(invoke({}).code == 2);
  CHECK(invoke({"adapt"}).code == 2);
  CHECK(invoke({"frobnicate", "--config", "x.ini"}).code == 2);
  CHECK(invoke({"eval", "--config", "x.ini", "--score-span", "prefix"}).code == 2);
  CHECK(invoke({"adapt", "--config", "/nonexistent/x.ini"}).code == 2);
  CHECK(invoke({"--help"}).code == 0);
}

TEST_CASE("environment overrides only the output directory and worker count") {
  auto c = parse_config(kTiny, "/cfgdir");
  ::setenv("ADAPTKIT_OUT", "/env/out", 1);
  ::setenv("ADAPTKIT_WORKERS", "3", 1);
  Overrides o;
  auto c1 = c;
  apply_overrides(c1, o);
  CHECK(c1.output_dir == "/env/out");
  CHECK(o.workers == 3);
  c1.output_dir = c.output_dir;
  CHECK(c1 == c);

  Overrides explicit_flags;
  explicit_flags.out = "/flag/out";
  explicit_flags.workers = 2;
  explicit_flags.seed = 9;
  auto c2 = c;
  apply_overrides(c2, explicit_flags);
  CHECK(c2.output_dir == "/flag/out");
  CHECK(explicit_flags.workers == 2);
  CHECK(c2.train.seed == 9);
  CHECK(c2.data.seed == 9);
  CHECK(c2.model.spec.seed == c.model.spec.seed);
  ::unsetenv("ADAPTKIT_OUT");
  ::unsetenv("ADAPTKIT_WORKERS");

  // Without either, a relative output dir resolves against the config file.
  Overrides none;
  auto c3 = c;
  apply_overrides(c3, none);
  CHECK(c3.output_dir == "/cfgdir/adaptkit-out");
}

TEST_CASE("document split: fixed held-out tail, nested samples") {
  std::vector<std::string> docs;
  for (int i = 0; i < 100; ++i) docs.push_back("doc " + std::to_string(i));
  auto c = parse_config("[train]\nheldout_size = 10\n[data]\nsample_count = 10%\n");
  const auto small = split_new_language(docs, c);
  c.data.sample_count = "50";
  const auto mid = split_new_language(docs, c);
  c.data.sample_count = "100%";
  const auto full = split_new_language(docs, c);
  CHECK(small.train.size() == 9);
  CHECK(mid.train.size() == 50);
  CHECK(full.train.size() == 90);
  CHECK(small.heldout == full.heldout);
  CHECK(mid.heldout == full.heldout);
  CHECK(std::equal(small.train.begin(), small.train.end(), full.train.begin()));
  for (const auto& h : full.heldout) CHECK(std::find(full.train.begin(), full.train.end(), h) == full.train.end());

  c.data.sample_count = "91";
  CHECK_THROWS_AS(split_new_language(docs, c), ValidationError);
  CHECK(resolve_sample_count("1%", 20) == 1);
  CHECK_THROWS_AS(resolve_sample_count("0%", 20), ValidationError);
  CHECK_THROWS_AS(resolve_sample_count("-3", 20), ValidationError);
}

TEST_CASE("csv digest ignores dropped columns only") {
  const std::string a = "step,loss,seconds\n0,1.5,0.25\n10,1.25,3.5\n";
  const std::string b = "step,loss,seconds\n0,1.5,9.75\n10,1.25,11\n";
  const std::string c = "step,loss,seconds\n0,1.5,0.25\n10,1.3,3.5\n";
  CHECK(csv_digest(a, {"seconds"}) == csv_digest(b, {"seconds"}));
  CHECK(csv_digest(a, {"seconds"}) != csv_digest(c, {"seconds"}));
  CHECK(csv_digest(a, {}) != csv_digest(b, {}));
}

TEST_CASE("adapt, eval, probe and report on the tiny config") {
  TempDir tmp;
  const auto cfg = write_config(tmp.path, "tiny.ini", kTiny);
  const auto out = tmp.path / "run";
  auto r = invoke({"adapt", "--config", cfg.string(), "--out", out.string(), "--workers", "2"});
  REQUIRE_MESSAGE(r.code == 0, r.err);

  const json m = json::parse(slurp(out / "manifest.json"));
  CHECK(m.at("command") == "adapt");
  CHECK(m.at("artifacts").size() == 3);
  for (const char* a : {"checkpoint", "adapter_bundle", "run_log"}) {
    const auto file = m.at("artifacts").at(a).at("file").get<std::string>();
    CHECK(fs::exists(out / file));
  }
  const auto log = train::RunLog::from_csv(slurp(out / "run_log.csv"));
  CHECK(log.records.size() == 3);  // steps 0, 5, 10
  CHECK(m.at("summary").at("best_step") == log.best_step);

  SUBCASE("rerun gives an identical manifest") {
    const auto again = tmp.path / "again";
    REQUIRE(invoke({"adapt", "--config", cfg.string(), "--out", again.string(), "--workers", "1"}).code == 0);
    CHECK(slurp(out / "manifest.json") == slurp(again / "manifest.json"));
  }

  SUBCASE("a different seed changes the manifest") {
    const auto other = tmp.path / "other";
    REQUIRE(invoke({"adapt", "--config", cfg.string(), "--out", other.string(), "--seed", "5"}).code == 0);
    CHECK(slurp(out / "manifest.json") != slurp(other / "manifest.json"));
  }

  SUBCASE("eval paired writes reports and forgetting deltas") {
    auto text = std::string(kTiny) + "mode = paired\n";
    const auto pcfg = write_config(tmp.path, "paired.ini", text);
    auto e = invoke({"eval", "--config", pcfg.string(), "--out", out.string(), "--score-span", "continuation"});
    REQUIRE_MESSAGE(e.code == 0, e.err);
    const auto csv = slurp(out / "eval" / "eval_report.csv");
    CHECK(csv.find("base,base,nli-b") != std::string::npos);
    CHECK(csv.find("adapted,madx,nli-b") != std::string::npos);
    CHECK(csv.find(",continuation,") != std::string::npos);
    const auto f = slurp(out / "eval" / "forgetting.csv");
    CHECK(f.starts_with("metric,task,before,after,delta\nperplexity,synth-a-heldout,"));
    const json em = json::parse(slurp(out / "eval" / "manifest.json"));
    CHECK(em.at("mode") == "paired");
  }

  SUBCASE("probe writes 2(L+1) rows") {
    auto p = invoke({"probe", "--config", cfg.string(), "--out", out.string()});
    REQUIRE_MESSAGE(p.code == 0, p.err);
    const auto csv = slurp(out / "probe" / "retrieval.csv");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 2 * 2);
    CHECK(csv.find("before,0,10,") != std::string::npos);
    CHECK(csv.find("after,1,10,") != std::string::npos);
  }

  SUBCASE("transplant onto a different architecture exits 2") {
    std::string wide = kTiny;
    wide.replace(wide.find("width = 16"), 10, "width = 32");
    wide.replace(wide.find("ffn_width = 32"), 14, "ffn_width = 64");
    const auto wcfg = write_config(tmp.path, "wide.ini", wide);
    const auto wout = tmp.path / "wide";
    REQUIRE(invoke({"adapt", "--config", wcfg.string(), "--out", wout.string()}).code == 0);

    const auto tcfg = write_config(tmp.path, "transplant.ini",
                                   std::string(kTiny) + "mode = transplant\ndonor = " + (out / "adapter.bundle").string() +
                                       "\ntarget = " + (wout / "base.ckpt").string() + "\n");
    auto t = invoke({"eval", "--config", tcfg.string(), "--out", wout.string()});
    CHECK(t.code == 2);
    CHECK(t.err.find("model.") != std::string::npos);

    // Same architecture, different base seed: accepted and labelled.
    const auto ok = write_config(tmp.path, "transplant-ok.ini",
                                 std::string(kTiny) + "mode = transplant\ndonor = " + (out / "adapter.bundle").string() +
                                     "\n");
    auto t2 = invoke({"eval", "--config", ok.string(), "--out", out.string()});
    REQUIRE_MESSAGE(t2.code == 0, t2.err);
    CHECK(slurp(out / "eval" / "eval_report.csv").find("transplant,madx,nli-b") != std::string::npos);
  }

  SUBCASE("report collects the run") {
    auto rep = invoke({"report", "--config", cfg.string(), "--out", out.string()});
    REQUIRE_MESSAGE(rep.code == 0, rep.err);
    const auto res = slurp(out / "report" / "resource.csv");
    CHECK(res.starts_with("strategy,trainable_params,total_params,train_seconds,seconds_per_prompt,peak_mem_bytes\n"));
    CHECK(res.find("\nmadx,") != std::string::npos);
    CHECK(fs::exists(out / "report" / "curves.csv"));
  }
}

TEST_CASE("report on an empty directory exits 2") {
  TempDir tmp;
  const auto cfg = write_config(tmp.path, "tiny.ini", kTiny);
  fs::create_directories(tmp.path / "empty");
  auto r = invoke({"report", "--config", cfg.string(), "--out", (tmp.path / "empty").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("output.dir") != std::string::npos);
  CHECK(invoke({"report", "--config", cfg.string(), "--out", (tmp.path / "missing").string()}).code == 2);
}

TEST_CASE("sweep continues past a failed run, exits 1, and report reproduces its table") {
  TempDir tmp;
  // 60 documents minus 8 held out: 5 works, 500 is more than the corpus has.
  const auto cfg = write_config(tmp.path, "sweep.ini",
                                std::string(kTiny) + "\n[sweep]\naxis = data_size\nvalues = 5, 500, 100%\n");
  const auto out = tmp.path / "sweep";
  auto r = invoke({"sweep", "--config", cfg.string(), "--out", out.string()});
  CHECK(r.code == 1);
  const auto csv = slurp(out / "sweep.csv");
  CHECK(csv.find("data_size,5,0,ok,") != std::string::npos);
  CHECK(csv.find("data_size,500,0,failed,") != std::string::npos);
  CHECK(csv.find("data_size,100%,0,ok,") != std::string::npos);
  const json m = json::parse(slurp(out / "manifest.json"));
  CHECK(m.at("runs").at(1).at("error").get<std::string>().find("data.sample_count") != std::string::npos);

  auto rep = invoke({"report", "--config", cfg.string(), "--out", out.string()});
  REQUIRE_MESSAGE(rep.code == 0, rep.err);
  CHECK(slurp(out / "report" / "sweep.csv") == csv);
}

TEST_CASE("sweep values are validated before any run") {
  TempDir tmp;
  const auto cfg = write_config(tmp.path, "sweep.ini",
                                std::string(kTiny) + "\n[sweep]\naxis = reduction_factor\nvalues = 4, 5\n");
  auto r = invoke({"sweep", "--config", cfg.string(), "--out", (tmp.path / "sweep").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("strategy.reduction") != std::string::npos);
  CHECK_FALSE(fs::exists(tmp.path / "sweep"));
}

TEST_CASE("--seeds repeats adaptation and reports the mean") {
  TempDir tmp;
  const auto cfg = write_config(tmp.path, "tiny.ini", kTiny);
  const auto out = tmp.path / "seeds";
  auto r = invoke({"adapt", "--config", cfg.string(), "--out", out.string(), "--seeds", "2", "--seed", "3"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(fs::exists(out / "seed-3" / "manifest.json"));
  CHECK(fs::exists(out / "seed-4" / "manifest.json"));
  const auto csv = slurp(out / "seeds.csv");
  const json m = json::parse(slurp(out / "manifest.json"));
  const double a = json::parse(slurp(out / "seed-3" / "manifest.json")).at("summary").at("best_ppl");
  const double b = json::parse(slurp(out / "seed-4" / "manifest.json")).at("summary").at("best_ppl");
  CHECK(m.at("summary").at("best_ppl_mean").get<double>() == doctest::Approx((a + b) / 2).epsilon(1e-12));
  CHECK(csv.find("\nmean,") != std::string::npos);
}

TEST_CASE("a diverging run exits 1 and keeps the partial run log") {
  TempDir tmp;
  const auto cfg = write_config(tmp.path, "tiny.ini", kTiny);
  const auto first = tmp.path / "first";
  REQUIRE(invoke({"adapt", "--config", cfg.string(), "--out", first.string()}).code == 0);

  // A base checkpoint with a NaN weight makes the first training loss non-finite.
  auto base = model::load_checkpoint(first / "base.ckpt");
  base.tensors.at(model::names::block(0, "ffn", "up_weight")).mutable_data()[0] = std::nan("");
  model::save_checkpoint(base, tmp.path / "nan.ckpt");
  std::string text = kTiny;
  text.replace(text.find("pretrain_steps = 40"), 19,
               "checkpoint = nan.ckpt\ntokenizer = " + (first / "tokenizer.bbpe").string());
  const auto nan_cfg = write_config(tmp.path, "nan.ini", text);
  const auto out = tmp.path / "nan";
  auto r = invoke({"adapt", "--config", nan_cfg.string(), "--out", out.string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("step") != std::string::npos);
  CHECK(fs::exists(out / "run_log.csv"));
  CHECK_FALSE(fs::exists(out / "manifest.json"));
}
