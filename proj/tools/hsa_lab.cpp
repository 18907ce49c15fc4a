// hsa_lab: data generation, training, evaluation and cost reports.
//
// Exit codes: 0 success, 1 invalid input or config, 2 numeric failure,
// 3 I/O failure.

#include <cblas.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "hsa_lab/evalharness/cost_model.hpp"
#include "hsa_lab/evalharness/niah.hpp"
#include "hsa_lab/evalharness/perplexity.hpp"
#include "hsa_lab/evalharness/svg.hpp"
#include "hsa_lab/trainer/trainer.hpp"
#include "hsa_lab/util/blas_env.hpp"

namespace fs = std::filesystem;
using namespace hsa_lab;

namespace {

std::string now_iso() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out || !(out << text)) throw IoError("cannot write " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_manifest(const fs::path& dir, const std::string& command, const std::vector<std::string>& argv,
                    json extra) {
  json m{{"tool", "hsa_lab"}, {"command", command}, {"argv", argv}, {"created", now_iso()}};
  if (const char* core = std::getenv("OPENBLAS_CORETYPE")) m["blas_core"] = core;
  for (auto& [k, v] : extra.items()) m[k] = v;
  write_text(dir / "manifest.json", m.dump(2) + "\n");
}

TrainConfig load_train_config(const std::string& config_path, const std::string& preset_name) {
  if (!config_path.empty()) return train_config_from_json(read_json(config_path));
  return preset(preset_name.empty() ? "micro" : preset_name);
}

// -- gen ---------------------------------------------------------------------

struct GenArgs {
  std::string task = "sniah";
  std::size_t length = 2048;
  std::size_t count = 10;
  std::uint64_t seed = 0;
  double probe_rate = 0.0;
  std::optional<double> depth;
  std::size_t chain_length = 4;
  std::string out;
};

int run_gen(const GenArgs& a) {
  const auto task = data::parse_task(a.task);
  std::ofstream file;
  if (!a.out.empty()) {
    if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
    file.open(a.out);
    if (!file) throw IoError("cannot write " + a.out);
  }
  std::ostream& out = a.out.empty() ? std::cout : file;
  for (std::size_t i = 0; i < a.count; ++i) {
    data::Rng rng(data::derive_seed(a.seed, 0, i));
    data::Sample s = a.depth && (task == data::Task::sniah || task == data::Task::mqniah)
                         ? make_probe(task, a.length, *a.depth, rng, a.chain_length)
                         : data::generate(task, a.length, rng, a.chain_length);
    s = data::maybe_probe(std::move(s), a.probe_rate, rng);
    if (const auto problems = data::validate(s); !problems.empty()) {
      throw std::logic_error("generated sample failed validation: " + problems.front());
    }
    out << to_json(s).dump() << "\n";
  }
  if (!out) throw IoError("write failed");
  return 0;
}

// -- train -------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::optional<int> precision;
  std::string out_dir = "runs/train";
  bool resume = false;
  std::size_t max_steps = 0;
  bool print_config = false;
};

template <std::floating_point T>
int train_with(const TrainConfig& cfg, const TrainArgs& a, const std::vector<std::string>& argv) {
  Trainer<T> t(cfg, a.out_dir, [](const std::string& s) { std::cerr << s << std::endl; });
  if (a.resume) t.resume();
  const auto sum = t.run(a.max_steps);
  json phases = json::array();
  for (const auto& p : sum.phases) {
    phases.push_back({{"name", p.name},
                      {"steps_run", p.steps_run},
                      {"completed_at", p.completed_at ? json(*p.completed_at) : json(nullptr)},
                      {"warning", p.warning}});
  }
  write_manifest(a.out_dir, "train", argv,
                 {{"train_config_hash", train_config_hash(cfg)},
                  {"architecture_hash", architecture_hash(cfg.model)},
                  {"seed", cfg.seed},
                  {"finished", sum.finished},
                  {"phases", phases},
                  {"last_loss", std::isnan(sum.last_loss) ? json(nullptr) : json(sum.last_loss)}});
  std::cout << (sum.finished ? "training finished" : "training paused") << "; checkpoints in "
            << (fs::path(a.out_dir) / "checkpoints").string() << "\n";
  return 0;
}

int run_train(const TrainArgs& a, const std::vector<std::string>& argv) {
  TrainConfig cfg;
  const fs::path saved = fs::path(a.out_dir) / "config.json";
  if (a.config.empty() && a.preset.empty() && a.resume && fs::exists(saved)) {
    cfg = train_config_from_json(read_json(saved));
  } else {
    cfg = load_train_config(a.config, a.preset);
  }
  if (a.seed) cfg.seed = *a.seed;
  if (a.precision) {
    if (*a.precision != 32 && *a.precision != 64) throw ConfigError("--precision must be 32 or 64");
    cfg.precision = *a.precision;
  }
  cfg = train_config_from_json(to_json(cfg));  // validate overrides
  if (a.print_config) {
    std::cout << to_json(cfg).dump(2) << "\n";
    return 0;
  }
  if (!a.resume) {
    if (fs::exists(fs::path(a.out_dir) / "checkpoints" / "latest.ckpt")) {
      throw ConfigError(a.out_dir + " already holds a run; pass --resume or pick another --out-dir");
    }
    write_text(saved, to_json(cfg).dump(2) + "\n");
  }
  return cfg.precision == 64 ? train_with<double>(cfg, a, argv) : train_with<float>(cfg, a, argv);
}

// -- eval --------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string task = "sniah";
  std::vector<std::size_t> lengths{2048, 4096, 8192, 16384};
  std::vector<double> depths{0.0, 0.25, 0.5, 0.75, 1.0};
  std::size_t samples_per_cell = 50;
  std::uint64_t seed = 1234;
  std::optional<std::size_t> top_k;
  std::optional<std::size_t> window;
  std::size_t max_length = 0;
  std::size_t chain_length = 4;
  std::optional<std::size_t> train_context;
  std::string out_dir = "runs/eval";
  int precision = 32;
  // perplexity
  std::size_t last_n = 512;
  std::size_t block = 0;
};

template <std::floating_point T>
int eval_with(const EvalArgs& a, const std::vector<std::string>& argv) {
  auto ck = load_checkpoint(a.checkpoint);
  auto ps = make_parameters<T>(ck.config);
  restore_parameters(ps, ck);
  HsaModel<T> model(ck.config, std::move(ps));
  if (a.top_k) model.set_top_k(*a.top_k);
  if (a.window) model.set_swa_window(*a.window);
  const std::size_t boundary = a.train_context ? *a.train_context : ck.meta.value("train_context", std::size_t{0});
  const fs::path dir = a.out_dir;
  fs::create_directories(dir);
  json extra{{"checkpoint", a.checkpoint},
             {"architecture_hash", architecture_hash(ck.config)},
             {"top_k", model.config().top_k},
             {"swa_window", model.config().swa_window},
             {"seed", a.seed},
             {"train_context", boundary}};

  if (a.task == "ppl") {
    json rows = json::array();
    for (std::size_t n : a.lengths) {
      data::Rng rng(data::derive_seed(a.seed, n, 0));
      const auto s = data::gen_lm(n, rng, data::LmOptions{n / 2});
      const double ppl = eval_ppl(model, s.tokens, std::min(a.last_n, n - 1), a.block);
      rows.push_back({{"length", n}, {"last_n", std::min(a.last_n, n - 1)}, {"ppl", ppl}});
      std::cout << "length " << n << " ppl " << ppl << "\n";
    }
    write_text(dir / "ppl.json", rows.dump(2) + "\n");
    extra["outputs"] = {"ppl.json"};
    write_manifest(dir, "eval", argv, extra);
    return 0;
  }

  const auto task = data::parse_task(a.task);
  std::ofstream records(dir / "records.jsonl");
  if (!records) throw IoError("cannot write " + (dir / "records.jsonl").string());
  NiahOptions opt;
  opt.samples_per_cell = a.samples_per_cell;
  opt.seed = a.seed;
  opt.max_length = a.max_length;
  opt.in_domain_boundary = boundary;
  opt.chain_length = a.chain_length;
  opt.on_record = [&](const NiahRecord& r) { records << to_json(r).dump() << "\n"; };
  const auto grid = eval_niah(model, task, a.lengths, task == data::Task::vartrack ? std::vector<double>{0.0} : a.depths,
                              opt);
  json gj = to_json(grid);
  gj["top_k"] = model.config().top_k;
  gj["swa_window"] = model.config().swa_window;
  gj["checkpoint"] = a.checkpoint;
  write_text(dir / "grid.json", gj.dump(2) + "\n");
  write_text(dir / "grid.csv", grid_csv(grid));
  write_text(dir / "summary.txt", grid_summary(grid));
  write_text(dir / "heatmap.svg", svg_heatmap(grid, grid.task + " accuracy, top-k " + std::to_string(model.config().top_k)));
  std::cout << grid_summary(grid);
  extra["outputs"] = {"grid.json", "grid.csv", "summary.txt", "heatmap.svg", "records.jsonl"};
  write_manifest(dir, "eval", argv, extra);
  return 0;
}

// -- cost --------------------------------------------------------------------

struct CostArgs {
  std::string config;
  std::string preset;
  std::string checkpoint;
  std::vector<std::uint64_t> lengths{1024, 2048, 4096, 8192, 16384, 32768, 65536, 131072};
  std::string out;
};

int run_cost(const CostArgs& a) {
  ModelConfig cfg;
  if (!a.checkpoint.empty()) {
    cfg = load_checkpoint(a.checkpoint).config;
  } else {
    const auto tc = load_train_config(a.config, a.preset.empty() ? "desk-ladder" : a.preset);
    cfg = tc.model;
    const auto& last = tc.phases.back();
    cfg.swa_window = last.swa_window;
    cfg.top_k = last.resolved_top_k(cfg.chunk_size);
  }
  const auto rep = cost_model(cfg, a.lengths);
  const std::string csv = cost_csv(rep);
  if (a.out.empty()) {
    std::cout << csv;
  } else {
    write_text(a.out, csv);
  }
  std::cout << "# crossover: " << (rep.crossover ? std::to_string(rep.crossover) : std::string("none up to 2^26"))
            << " tokens (W=" << cfg.swa_window << ", K=" << cfg.top_k << ", S=" << cfg.chunk_size << ")\n";
  return 0;
}

// -- inspect -----------------------------------------------------------------

struct InspectArgs {
  std::string checkpoint;
  std::size_t length = 0;
  std::uint64_t seed = 7;
  std::size_t samples = 8;
};

int run_inspect(const InspectArgs& a) {
  const auto ck = load_checkpoint(a.checkpoint);
  std::size_t n_params = 0;
  for (const auto& b : ck.blobs) {
    if (!b.name.starts_with("adam.")) n_params += b.data.size();
  }
  json info{{"config", to_json(ck.config)},
            {"architecture_hash", architecture_hash(ck.config)},
            {"parameters", n_params},
            {"tensors", ck.blobs.size()}};
  for (const char* k : {"phase_index", "phase_step", "optimizer_step", "probe_history", "outcomes", "train_context"}) {
    if (ck.meta.contains(k)) info[k] = ck.meta[k];
  }
  auto model = load_model<float>(a.checkpoint);
  const std::size_t n = a.length ? a.length : std::max<std::size_t>(ck.meta.value("train_context", std::size_t{1024}), 256);
  const std::size_t S = ck.config.chunk_size;
  struct Acc {
    double entropy = 0, selected = 0, value_weight = 0, value_top = 0;
    std::size_t rows = 0, answer_rows = 0;
  };
  std::vector<Acc> acc;
  std::vector<std::size_t> layer_ids;
  std::size_t chunks = 0;
  data::Rng rng(a.seed);
  for (std::size_t smp = 0; smp < a.samples; ++smp) {
    const auto s = data::gen_sniah(n, std::uniform_real_distribution<double>(0.0, 1.0)(rng), rng);
    // chunk holding the needle's value, the one retrieval has to find
    const auto value = data::encode(s.meta.values.at(0));
    const auto hit = std::search(s.tokens.begin() + static_cast<std::ptrdiff_t>(s.meta.needle_positions.at(0)),
                                 s.tokens.end(), value.begin(), value.end());
    const std::size_t value_chunk = static_cast<std::size_t>(hit - s.tokens.begin()) / S;
    ForwardTrace<float> trace;
    {
      NoGradGuard ng;
      model.forward(s.tokens, &trace);
    }
    chunks = trace.num_chunks;
    layer_ids = trace.hsa_layers;
    acc.resize(trace.selections.size());
    for (std::size_t i = 0; i < trace.selections.size(); ++i) {
      const auto& sel = trace.selections[i];
      auto& A = acc[i];
      for (std::size_t t = 0; t < sel.tokens(); ++t) {
        const auto w = sel.weights_of(t);
        if (w.empty()) continue;
        for (float x : w) {
          if (x > 0) A.entropy -= static_cast<double>(x) * std::log(static_cast<double>(x));
        }
        A.selected += static_cast<double>(w.size());
        ++A.rows;
        if (t + 1 >= s.meta.answer_start && t + 1 < s.meta.answer_start + s.meta.answer_length) {
          const auto idx = sel.indices_of(t);
          std::size_t best = 0;
          for (std::size_t j = 0; j < idx.size(); ++j) {
            if (static_cast<std::size_t>(idx[j]) == value_chunk) A.value_weight += static_cast<double>(w[j]);
            if (w[j] > w[best]) best = j;
          }
          if (static_cast<std::size_t>(idx[best]) == value_chunk) A.value_top += 1;
          ++A.answer_rows;
        }
      }
    }
  }
  json layers = json::array();
  for (std::size_t i = 0; i < acc.size(); ++i) {
    const auto& A = acc[i];
    auto mean = [](double x, std::size_t m) { return m ? x / static_cast<double>(m) : 0.0; };
    layers.push_back({{"layer", layer_ids[i]},
                      {"mean_entropy_nats", mean(A.entropy, A.rows)},
                      {"mean_selected", mean(A.selected, A.rows)},
                      {"value_chunk_weight_at_answer", mean(A.value_weight, A.answer_rows)},
                      {"value_chunk_top1_at_answer", mean(A.value_top, A.answer_rows)}});
  }
  info["retrieval"] = {{"probe_length", n}, {"samples", a.samples}, {"chunks", chunks}, {"layers", layers}};
  std::cout << info.dump(2) << "\n";
  return 0;
}

// -- plot --------------------------------------------------------------------

struct PlotArgs {
  std::vector<std::string> grids;
  std::vector<std::string> labels;
  std::string title = "retrieval accuracy";
  std::string out = "accuracy.svg";
};

int run_plot(const PlotArgs& a) {
  if (!a.labels.empty() && a.labels.size() != a.grids.size()) throw ConfigError("--label count must match --grid count");
  std::vector<LineSeries> series;
  double boundary = 0;
  for (std::size_t i = 0; i < a.grids.size(); ++i) {
    const json g = read_json(a.grids[i]);
    AccuracyGrid grid;
    grid.lengths = g.at("lengths").get<std::vector<std::size_t>>();
    grid.depths = g.at("depths").get<std::vector<double>>();
    grid.accuracy = g.at("accuracy").get<std::vector<std::vector<double>>>();
    grid.skipped = g.at("skipped").get<std::vector<std::vector<bool>>>();
    boundary = std::max(boundary, g.value("in_domain_boundary", 0.0));
    LineSeries s{a.labels.empty() ? a.grids[i] : a.labels[i], {}, {}};
    for (std::size_t li = 0; li < grid.lengths.size(); ++li) {
      s.x.push_back(static_cast<double>(grid.lengths[li]));
      s.y.push_back(grid.mean_at(li));
    }
    series.push_back(std::move(s));
  }
  write_text(a.out, svg_lines(a.title, series, boundary));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  select_blas_kernels(argv);
  if (const char* th = std::getenv("HSA_LAB_THREADS")) openblas_set_num_threads(std::max(1, std::atoi(th)));
  const std::vector<std::string> args(argv, argv + argc);

  CLI::App app{"Hierarchical sparse attention lab"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Write synthetic samples as JSON lines");
  g->add_option("--task", gen.task, "lm, sniah, mqniah, vartrack or selfcopy")->capture_default_str();
  g->add_option("--length", gen.length, "Tokens per sample")->capture_default_str();
  g->add_option("--count", gen.count, "Number of samples")->capture_default_str();
  g->add_option("--seed", gen.seed)->capture_default_str();
  g->add_option("--probe-rate", gen.probe_rate, "Probability of replacing a sample with an S-NIAH probe");
  g->add_option("--depth", gen.depth, "Needle depth in [0, 1] for NIAH tasks");
  g->add_option("--chain-length", gen.chain_length)->capture_default_str();
  g->add_option("--out", gen.out, "Output file (default stdout)");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train through the configured phases");
  auto* t_cfg = t->add_option("--config", train.config, "Training config JSON");
  t->add_option("--preset", train.preset, "micro, desk-ladder, desk-no-warmup or desk-midtrain")->excludes(t_cfg);
  t->add_option("--seed", train.seed);
  t->add_option("--precision", train.precision, "32 or 64");
  t->add_option("--out-dir", train.out_dir)->capture_default_str();
  t->add_flag("--resume", train.resume, "Continue from <out-dir>/checkpoints/latest.ckpt");
  t->add_option("--max-steps", train.max_steps, "Stop after this many steps (0 = run to the end)");
  t->add_flag("--print-config", train.print_config, "Print the resolved config and exit");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Accuracy grid or perplexity for a checkpoint");
  e->add_option("--checkpoint", ev.checkpoint)->required();
  e->add_option("--task", ev.task, "sniah, mqniah, vartrack or ppl")->capture_default_str();
  e->add_option("--lengths", ev.lengths)->delimiter(',');
  e->add_option("--depths", ev.depths)->delimiter(',');
  e->add_option("--samples-per-cell", ev.samples_per_cell)->capture_default_str();
  e->add_option("--seed", ev.seed)->capture_default_str();
  e->add_option("--top-k", ev.top_k, "Override the stored top-k");
  e->add_option("--window", ev.window, "Override the stored SWA window");
  e->add_option("--max-length", ev.max_length, "Skip longer cells");
  e->add_option("--chain-length", ev.chain_length)->capture_default_str();
  e->add_option("--train-context", ev.train_context, "In-domain boundary (default from the checkpoint)");
  e->add_option("--out-dir", ev.out_dir)->capture_default_str();
  e->add_option("--precision", ev.precision, "32 or 64")->check(CLI::IsMember({32, 64}))->capture_default_str();
  e->add_option("--last-n", ev.last_n, "Perplexity over the final N tokens")->capture_default_str();
  e->add_option("--block", ev.block, "Streaming block size for perplexity (0 = one pass)");

  CostArgs cost;
  auto* c = app.add_subcommand("cost", "Attention FLOPs and KV memory by context length");
  auto* c_cfg = c->add_option("--config", cost.config);
  c->add_option("--preset", cost.preset)->excludes(c_cfg);
  c->add_option("--checkpoint", cost.checkpoint);
  c->add_option("--lengths", cost.lengths)->delimiter(',');
  c->add_option("--out", cost.out, "CSV file (default stdout)");

  InspectArgs ins;
  auto* in = app.add_subcommand("inspect", "Checkpoint summary and retrieval statistics");
  in->add_option("--checkpoint", ins.checkpoint)->required();
  in->add_option("--length", ins.length, "Probe length for retrieval statistics");
  in->add_option("--seed", ins.seed)->capture_default_str();
  in->add_option("--samples", ins.samples, "Probes averaged for retrieval statistics")->capture_default_str()->check(CLI::PositiveNumber);

  PlotArgs plot;
  auto* p = app.add_subcommand("plot", "Accuracy-vs-length figure from grid.json files");
  p->add_option("--grid", plot.grids)->required();
  p->add_option("--label", plot.labels);
  p->add_option("--title", plot.title);
  p->add_option("--out", plot.out)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*g) return run_gen(gen);
    if (*t) return run_train(train, args);
    if (*e) return ev.precision == 64 ? eval_with<double>(ev, args) : eval_with<float>(ev, args);
    if (*c) return run_cost(cost);
    if (*in) return run_inspect(ins);
    if (*p) return run_plot(plot);
  } catch (const NumericError& err) {
    std::cerr << "numeric error: " << err.what() << "\n";
    return 2;
  } catch (const IoError& err) {
    std::cerr << "i/o error: " << err.what() << "\n";
    return 3;
  } catch (const fs::filesystem_error& err) {
    std::cerr << "i/o error: " << err.what() << "\n";
    return 3;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return 1;
}
