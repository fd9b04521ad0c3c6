// Command-line front end: synth, pretrain, finetune-eval, heatmap.

#include <CLI11.hpp>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "imask/checkpoint.hpp"
#include "imask/config.hpp"
#include "imask/data.hpp"
#include "imask/errors.hpp"
#include "imask/evaluation.hpp"
#include "imask/networks.hpp"
#include "imask/pretraining.hpp"

namespace fs = std::filesystem;
using namespace imask;

namespace {

constexpr int kUsageError = 1;
constexpr int kRuntimeError = 2;

// Usage problems detected after flag parsing (bad paths, clashing flags).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::string out;
};

ExperimentConfig load_experiment(const Common& c) {
  return c.config.empty() ? ExperimentConfig{} : load_config(c.config);
}

fs::path output_root(const Common& c, const ExperimentConfig& cfg) {
  if (!c.out.empty()) return c.out;
  if (!cfg.output_dir.empty()) return cfg.output_dir;
  if (const char* env = std::getenv("IMASK_OUTPUT_ROOT"); env && *env) return env;
  return "runs";
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write " + path.string());
  f << text;
}

void note(const std::string& msg) { std::cerr << msg << '\n'; }

// --- synth -----------------------------------------------------------------

struct SynthArgs {
  Common common;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> count;
  bool force = false;
};

void run_synth(const SynthArgs& a) {
  ExperimentConfig cfg = load_experiment(a.common);
  if (a.seed) cfg.dataset.seed = *a.seed;
  if (a.count) cfg.dataset.count = *a.count;
  cfg.validate();
  const fs::path root = a.common.out;
  if (fs::exists(root) && !fs::is_empty(root)) {
    if (!a.force) {
      throw UsageError("output directory " + root.string() + " is not empty (use --force)");
    }
    fs::remove_all(root / "images");
    fs::remove(root / kManifestFile);
    fs::remove(root / kLesionFile);
  }
  Dataset ds = generate_synthetic_dataset(cfg.dataset);
  ds.manifest = split(ds.manifest, cfg.fractions, cfg.split_seed);
  write_dataset(root, ds);
  note("wrote " + std::to_string(ds.size()) + " images to " + root.string() + " (train " +
       std::to_string(ds.indices(Split::kTrain).size()) + ", val " +
       std::to_string(ds.indices(Split::kVal).size()) + ", test " +
       std::to_string(ds.indices(Split::kTest).size()) + ")");
}

// --- pretrain --------------------------------------------------------------

struct PretrainArgs {
  Common common;
  std::string method;
  std::string data;
  std::optional<int> epochs;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> k;
  std::optional<std::string> q_head;
  std::optional<double> temperature;
};

void run_pretrain(const PretrainArgs& a) {
  ExperimentConfig cfg = load_experiment(a.common);
  PretrainConfig& pc = cfg.pretrain;
  if (!a.method.empty()) pc.method = parse_method(a.method);
  if (a.epochs) pc.epochs = *a.epochs;
  if (a.seed) pc.seed = *a.seed;
  if (a.k) pc.k = *a.k;
  if (a.q_head) pc.q_head = parse_q_head(*a.q_head);
  if (a.temperature) pc.temperature_start = pc.temperature_end = *a.temperature;

  Dataset ds = load_dataset(a.data);
  pc.encoder.image_side = ds.manifest.image_side;
  pc.validate();
  const fs::path root = output_root(a.common, cfg);
  const std::string name(method_name(pc.method));
  note("pretraining " + name + " on " + std::to_string(ds.indices(Split::kTrain).size()) +
       " images for " + std::to_string(pc.epochs) + " epochs");

  PretrainResult res = pretrain(ds, pc);

  fs::create_directories(root / "checkpoints");
  const fs::path enc_path = root / "checkpoints" / (name + "_encoder.ckpt");
  std::vector<NamedTensor> enc;
  res.prediction.encoder().append_state(enc, "encoder.");
  save_checkpoint(enc_path, enc);
  write_descriptor(enc_path, ArchDescriptor{"encoder", name, pc.encoder, 0, pc.q_head, 0});
  note("wrote " + enc_path.string());
  if (res.qnet) {
    const fs::path q_path = root / "checkpoints" / (name + "_qnet.ckpt");
    save_checkpoint(q_path, res.qnet->state());
    write_descriptor(q_path, ArchDescriptor{"qnetwork", name, pc.encoder, pc.k, pc.q_head,
                                            pc.action_space().patch_side()});
    note("wrote " + q_path.string());
  }
  const fs::path log_path = root / "logs" / (name + "_pretrain.csv");
  write_text(log_path, res.log.to_csv());
  note("wrote " + log_path.string());
}

// --- finetune-eval ---------------------------------------------------------

struct FinetuneArgs {
  Common common;
  std::vector<std::string> encoders;
  std::string data;
  std::string budgets;
  std::string seeds;
  std::optional<int> epochs;
  std::string name = "results";
};

void run_finetune(const FinetuneArgs& a) {
  ExperimentConfig cfg = load_experiment(a.common);
  if (!a.budgets.empty()) cfg.budgets = parse_size_list(a.budgets);
  if (!a.seeds.empty()) cfg.seeds = parse_seed_list(a.seeds);
  if (a.epochs) cfg.finetune.epochs = *a.epochs;
  cfg.finetune.validate();

  Dataset ds = load_dataset(a.data);
  const std::size_t train = ds.indices(Split::kTrain).size();
  for (std::size_t b : cfg.budgets) {
    if (b < 2 || b > train) {
      throw DataError("label budget " + std::to_string(b) + " outside [2, " +
                      std::to_string(train) + "] (train split size)");
    }
  }

  std::vector<EvalResult> results;
  for (const auto& path : a.encoders) {
    const ArchDescriptor desc = read_descriptor(path);
    const auto records = load_checkpoint(path);
    if (desc.spec.image_side != ds.manifest.image_side) {
      throw ArchitectureError("architecture mismatch: encoder expects " +
                              std::to_string(desc.spec.image_side) + " pixel images, dataset has " +
                              std::to_string(ds.manifest.image_side));
    }
    const std::string method = desc.method.empty() ? fs::path(path).stem().string() : desc.method;
    for (std::size_t budget : cfg.budgets) {
      std::vector<RunMetrics> runs;
      for (std::uint64_t seed : cfg.seeds) {
        FinetuneConfig fc = cfg.finetune;
        fc.seed = seed;
        fc.label_seed = ds.manifest.split_seed;
        const FinetuneResult r = finetune_classifier(records, desc.spec, ds, budget, fc);
        char line[160];
        std::snprintf(line, sizeof line, "%s budget %zu seed %llu: acc %.4f f1 %.4f auroc %.4f",
                      method.c_str(), budget, static_cast<unsigned long long>(seed),
                      r.test.accuracy, r.test.macro_f1, r.test.auroc);
        note(line);
        runs.push_back({seed, r.test});
      }
      results.push_back(aggregate(method, budget, std::move(runs)));
    }
  }
  const fs::path root = output_root(a.common, cfg);
  write_text(root / "results" / (a.name + ".csv"), report(results));
  write_text(root / "results" / (a.name + "_runs.csv"), report_runs(results));
  note("wrote " + (root / "results" / (a.name + ".csv")).string());
}

// --- heatmap ---------------------------------------------------------------

struct HeatmapArgs {
  Common common;
  std::string qnet;
  std::string data;
  std::string split = "val";
};

void run_heatmap(const HeatmapArgs& a) {
  ExperimentConfig cfg = load_experiment(a.common);
  const Split which = parse_split(a.split);
  if (!fs::exists(a.qnet)) throw DataError("no Q-network checkpoint at " + a.qnet);
  const ArchDescriptor desc = read_descriptor(a.qnet);
  if (desc.kind != "qnetwork") {
    throw ArchitectureError("architecture mismatch: " + a.qnet + " holds a " + desc.kind +
                            ", not a qnetwork");
  }
  Dataset ds = load_dataset(a.data);
  if (desc.spec.image_side != ds.manifest.image_side) {
    throw ArchitectureError("architecture mismatch: Q-network expects " +
                            std::to_string(desc.spec.image_side) + " pixel images, dataset has " +
                            std::to_string(ds.manifest.image_side));
  }
  Rng rng(0);
  QNetwork q(desc.spec, desc.k, desc.q_head, rng);
  auto state = q.state();
  assign_state(state, load_checkpoint(a.qnet));
  const ActionSpace space = desc.patch_side == 0
                                ? ActionSpace::with_default_patch(desc.spec.image_side, desc.k)
                                : ActionSpace(desc.spec.image_side, desc.k, desc.patch_side);
  const auto idx = ds.indices(which);
  const Heatmap h = mask_heatmap(q, space, ds, idx);
  const Image bg = mean_image(ds, idx);
  const fs::path root = output_root(a.common, cfg);
  const fs::path stem = root / "figures" / ("heatmap_" + a.split);
  fs::create_directories(stem.parent_path());
  write_pgm16(stem.string() + ".pgm", render_heatmap(h, space, &bg));
  write_text(stem.string() + ".csv", heatmap_csv(h, space));
  note("wrote " + stem.string() + ".pgm and .csv (" + std::to_string(h.total()) + " images)");
}

void add_common(CLI::App* cmd, Common& c, const std::string& out_help) {
  cmd->add_option("--config", c.config, "Experiment config file (INI); flags override it")
      ->check(CLI::ExistingFile);
  cmd->add_option("--out", c.out, out_help);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-supervised pretraining with learned masking: data synthesis, "
               "pretraining, fine-tuning and evaluation"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate the synthetic lesion corpus with splits");
  add_common(s, synth.common, "Dataset directory to write");
  s->get_option("--out")->required();
  s->add_option("--seed", synth.seed, "Generator seed (overrides dataset.seed)");
  s->add_option("--count", synth.count, "Number of images (overrides dataset.count)");
  s->add_flag("--force", synth.force, "Overwrite an existing dataset in --out");

  PretrainArgs pre;
  auto* p = app.add_subcommand("pretrain", "Run one pretraining pipeline on the train split");
  add_common(p, pre.common, "Output root (default: output.dir, $IMASK_OUTPUT_ROOT, or ./runs)");
  p->add_option("--method", pre.method,
                "intelligent, context_prediction, context_restoration or reconstruction");
  p->add_option("--data", pre.data, "Dataset directory")->required();
  p->add_option("--epochs", pre.epochs, "Pretraining epochs");
  p->add_option("--seed", pre.seed, "Training seed");
  p->add_option("--k", pre.k, "Action grid side (k x k patches)");
  p->add_option("--q-head", pre.q_head, "Q-network head: gap or flatten");
  p->add_option("--temperature", pre.temperature,
                "Fixed softmax temperature (inf samples actions uniformly)");

  FinetuneArgs fin;
  auto* f = app.add_subcommand("finetune-eval",
                               "Fine-tune classifiers from encoder checkpoints and tabulate test metrics");
  add_common(f, fin.common, "Output root (default: output.dir, $IMASK_OUTPUT_ROOT, or ./runs)");
  f->add_option("--encoder", fin.encoders, "Encoder checkpoint (repeatable)")->required();
  f->add_option("--data", fin.data, "Dataset directory")->required();
  f->add_option("--budgets", fin.budgets, "Comma-separated label budgets, e.g. 13,66,129");
  f->add_option("--seeds", fin.seeds, "Seeds, e.g. 0..4 or 0,1,2");
  f->add_option("--epochs", fin.epochs, "Fine-tuning epochs");
  f->add_option("--name", fin.name, "Results file stem under results/");

  HeatmapArgs hm;
  auto* h = app.add_subcommand("heatmap", "Tally greedy masks of a Q-network over a split");
  add_common(h, hm.common, "Output root (default: output.dir, $IMASK_OUTPUT_ROOT, or ./runs)");
  h->add_option("--qnet", hm.qnet, "Q-network checkpoint")->required();
  h->add_option("--data", hm.data, "Dataset directory")->required();
  h->add_option("--split", hm.split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  try {
    if (*s) run_synth(synth);
    if (*p) run_pretrain(pre);
    if (*f) run_finetune(fin);
    if (*h) run_heatmap(hm);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsageError;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return 0;
}
