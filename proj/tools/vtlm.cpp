#include <malloc.h>

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "vtlm/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

struct Cli {
  std::string workdir = ".";
  std::vector<std::string> config_files;
  std::vector<std::string> sets;

  std::string path(const std::string& p) const {
    if (p.empty() || fs::path(p).is_absolute()) return p;
    return (fs::path(workdir) / p).string();
  }
};

/// Registers a flag that, when given, becomes a RunConfig override.
template <class V>
void override_opt(CLI::App* app, std::vector<std::pair<std::string, std::string>>& out, const std::string& flag, const std::string& key,
                  const std::string& help) {
  app->add_option_function<std::string>(flag, [&out, key](const std::string& v) { out.emplace_back(key, v); }, help)
      ->type_name(std::is_same_v<V, std::string> ? "TEXT" : (std::is_floating_point_v<V> ? "FLOAT" : "INT"));
}

int run(int argc, char** argv) {
  Cli cli;
  std::vector<std::pair<std::string, std::string>> overrides;
  CLI::App app{"Visual translation language modelling on a synthetic multimodal corpus"};
  app.require_subcommand(1);
  app.add_option("--workdir", cli.workdir, "Root for every relative path");
  app.add_option("--config", cli.config_files, "Config file(s), applied in order");
  app.add_option("--set", cli.sets, "Override a config key: section.name=value");
  override_opt<long>(&app, overrides, "--seed", "run.seed", "Run seed");

  // gen-data
  std::string gen_out = "data";
  bool force = false;
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic corpus, BPE merges and vocabulary");
  gen->add_option("--out", gen_out, "Output directory");
  gen->add_flag("--force", force, "Overwrite a non-empty output directory");
  override_opt<int>(gen, overrides, "--examples", "data.train_examples", "Training triplets");
  override_opt<int>(gen, overrides, "--valid-examples", "data.valid_examples", "Validation triplets");
  override_opt<int>(gen, overrides, "--test-examples", "data.test_examples", "Test triplets");
  override_opt<int>(gen, overrides, "--regions", "data.regions", "Regions per image (o)");
  override_opt<int>(gen, overrides, "--feat-dim", "data.feat_dim", "Region feature size (D)");
  override_opt<double>(gen, overrides, "--sigma", "data.sigma", "Feature noise");
  override_opt<int>(gen, overrides, "--labels", "data.labels", "Object label count");
  override_opt<int>(gen, overrides, "--bpe-merges", "data.bpe_merges", "BPE merge operations");

  // shared training flags
  std::string data_dir = "data";
  std::string train_out;
  bool resume = false;
  auto training_flags = [&](CLI::App* sub) {
    sub->add_option("--data", data_dir, "Corpus directory");
    sub->add_option("--out", train_out, "Run directory")->required();
    sub->add_flag("--resume", resume, "Continue from <out>/last.ckpt");
    override_opt<double>(sub, overrides, "--lr", "train.lr", "Peak learning rate");
    override_opt<long>(sub, overrides, "--steps", "train.max_steps", "Optimizer steps");
    override_opt<long>(sub, overrides, "--warmup", "train.warmup_steps", "Warmup steps");
    override_opt<double>(sub, overrides, "--dropout", "train.dropout", "Dropout rate");
    override_opt<int>(sub, overrides, "--batch-size", "train.batch_size", "Batch size");
    override_opt<long>(sub, overrides, "--eval-interval", "train.eval_interval", "Steps between validations");
  };

  auto* pre = app.add_subcommand("pretrain", "Masked pre-training (TLM or VTLM)");
  training_flags(pre);
  override_opt<std::string>(pre, overrides, "--objective", "pretrain.objective", "tlm or vtlm");
  override_opt<double>(pre, overrides, "--visual-mask-ratio", "mask.visual_select_ratio", "Share of regions masked (0 = none)");

  std::string init = "scratch";
  auto* ft = app.add_subcommand("finetune", "Train a translation model from scratch or a pre-trained encoder");
  training_flags(ft);
  ft->add_option("--init", init, "Pre-training checkpoint or 'scratch'");
  override_opt<std::string>(ft, overrides, "--task", "finetune.task", "nmt or mmt");
  override_opt<std::string>(ft, overrides, "--copy-cross-attn", "finetune.copy_cross_attn", "Initialise cross-attention from self-attention");
  override_opt<int>(ft, overrides, "--train-limit", "finetune.train_limit", "Use only the first N training triplets");

  std::string ckpt;
  std::string input;
  std::string output;
  auto* tr = app.add_subcommand("translate", "Beam-search decode a triplet or plain-text file");
  tr->add_option("--data", data_dir, "Corpus directory (tokenizer)");
  tr->add_option("--ckpt", ckpt, "Translation checkpoint")->required();
  tr->add_option("--input", input, "Triplet file or one sentence per line")->required();
  tr->add_option("--output", output, "Hypothesis file")->required();
  override_opt<int>(tr, overrides, "--beam", "decode.beam", "Beam width");
  override_opt<int>(tr, overrides, "--max-len", "decode.max_len", "Maximum output tokens");

  std::vector<std::string> ckpts;
  std::string probe = "all";
  std::string probe_out = "probes";
  int limit = 0;
  bool all = false;
  auto* pr = app.add_subcommand("probe", "Run analysis probes over checkpoints");
  pr->add_option("--data", data_dir, "Corpus directory");
  pr->add_option("--ckpt", ckpts, "Checkpoint(s)")->required();
  pr->add_option("--probe", probe, "last-word, incongruence, entity, attn-mass or all");
  pr->add_flag("--all", all, "Same as --probe all");
  pr->add_option("--out", probe_out, "Report directory");
  pr->add_option("--limit", limit, "Use only the first N test triplets");
  override_opt<int>(pr, overrides, "--beam", "decode.beam", "Beam width");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  vtlm::RunConfig cfg;
  for (const auto& f : cli.config_files) vtlm::apply_config_file(cfg, cli.path(f));
  for (const auto& s : cli.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw vtlm::ConfigError("--set expects key=value, got '" + s + "'");
    cfg.set(s.substr(0, eq), s.substr(eq + 1));
  }
  for (const auto& [k, v] : overrides) cfg.set(k, v);
  if (*ft && init != "scratch") init = cli.path(init);
  cfg.init = init;

  if (*gen) {
    const auto s = vtlm::gen_data(cfg, cli.path(gen_out), force);
    std::printf("wrote %zu/%zu/%zu triplets to %s (vocab %s, nearest-centroid accuracy %.4f)\n", s.train, s.valid, s.test,
                cli.path(gen_out).c_str(), s.fingerprint.c_str(), s.centroid_accuracy);
  } else if (*pre || *ft) {
    const auto r = *pre ? vtlm::pretrain(cfg, cli.path(data_dir), cli.path(train_out), resume)
                        : vtlm::finetune(cfg, cli.path(data_dir), init, cli.path(train_out), resume);
    std::printf("trained to step %ld; best step %ld (score %.6g); last validation acc %.6g ppl %.6g\n", r.steps, r.best_step,
                r.best_score, r.last.acc, r.last.ppl);
  } else if (*tr) {
    const auto n = vtlm::translate_file(cfg, cli.path(data_dir), cli.path(ckpt), cli.path(input), cli.path(output));
    std::printf("translated %zu sentences into %s\n", n, cli.path(output).c_str());
  } else if (*pr) {
    for (auto& c : ckpts) c = cli.path(c);
    const auto res = vtlm::run_probes(cfg, cli.path(data_dir), ckpts, all ? "all" : probe, cli.path(probe_out), limit);
    for (const auto& reps : res.reports) {
      for (const auto& r : reps) std::printf("%s\n", r.csv_row().c_str());
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
  try {
    return run(argc, argv);
  } catch (const vtlm::DivergenceError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  } catch (const vtlm::DataError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const vtlm::ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const vtlm::TransferError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const vtlm::UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
