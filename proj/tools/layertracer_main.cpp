// layertracer — locate task particles, scan layer vulnerability, and plan
// hybrid layer stacks for LTRC reference models.
//
// Exit codes: 0 success; 1 usage error; 2 runtime failure; 3 completed but a
// degenerate vulnerability profile was produced (e.g. --mask-fraction 0 with
// --noise-std 0).

#include <cstdint>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "layertracer/pipeline.hpp"
#include "layertracer/weights.hpp"

namespace {

constexpr int kExitRuntime = 2;
constexpr int kExitDegenerate = 3;

struct InitArgs {
  std::string arch = "decoder";
  std::string pattern;
  int layers = 12;
  int d_model = 64;
  int heads = 4;
  int d_ff = 128;
  int vocab = 256;
  int max_seq = 256;
  uint64_t seed = 0;
  int plant_layer = 0;
  int plant_token = -1;
  double plant_strength = 6.0;
  std::string out;
};

struct AnalyzeArgs {
  std::string model;
  std::string prompt;
  std::string prompt_file;
  int top_k = 10;
  double mask_fraction = 1.0;
  double noise_std = 0.0;
  uint64_t seed = 0;
  std::string layers;
  std::string out_dir = ".";
  std::vector<std::string> formats = {"json"};
};

void add_analyze_flags(CLI::App* cmd, AnalyzeArgs& args, bool with_top_k,
                       bool with_perturbation) {
  cmd->add_option("--model", args.model, "LTRC weight file")->required();
  auto* prompt = cmd->add_option("--prompt", args.prompt, "single prompt text");
  cmd->add_option("--prompt-file", args.prompt_file,
                  "prompt corpus (plain text or JSON lines)")
      ->excludes(prompt);
  if (with_top_k) {
    cmd->add_option("--top-k", args.top_k, "candidates stored per layer")
        ->capture_default_str();
  }
  if (with_perturbation) {
    cmd->add_option("--mask-fraction", args.mask_fraction,
                    "fraction of mixer-output channels zeroed")
        ->capture_default_str();
    cmd->add_option("--noise-std", args.noise_std,
                    "stddev of additive Gaussian mixer-output noise")
        ->capture_default_str();
  }
  cmd->add_option("--seed", args.seed, "root seed for all randomness")
      ->capture_default_str();
  cmd->add_option("--layers", args.layers,
                  "layer subset, e.g. 2,5,7-9 (default: all)");
  cmd->add_option("--out", args.out_dir, "output directory")
      ->capture_default_str();
  cmd->add_option("--format", args.formats,
                  "output formats: json, csv, svg (comma separated)")
      ->delimiter(',')
      ->capture_default_str();
}

int run_init(const InitArgs& args) {
  const auto arch = layertracer::arch_from_name(args.arch);
  if (!arch.has_value()) {
    std::cerr << "error: unknown arch '" << args.arch
              << "' (expected decoder, linear, or hybrid)\n";
    return kExitRuntime;
  }
  layertracer::ModelSpec spec;
  spec.arch = *arch;
  spec.n_layers = args.layers;
  spec.d_model = args.d_model;
  spec.n_heads = args.heads;
  spec.d_ff = args.d_ff;
  spec.vocab_size = args.vocab;
  spec.max_seq = args.max_seq;
  if (spec.arch == layertracer::Arch::HybridSequence) {
    if (args.pattern.empty()) {
      std::cerr << "error: --arch hybrid requires --pattern (e.g. AAAL)\n";
      return kExitRuntime;
    }
    for (int l = 0; l < spec.n_layers; ++l) {
      const char c = args.pattern[l % args.pattern.size()];
      if (c == 'A' || c == 'a') {
        spec.layer_kinds.push_back(layertracer::LayerKind::Attention);
      } else if (c == 'L' || c == 'l') {
        spec.layer_kinds.push_back(layertracer::LayerKind::Linear);
      } else {
        std::cerr << "error: --pattern may only contain A (attention) and L "
                     "(linear)\n";
        return kExitRuntime;
      }
    }
  } else if (!args.pattern.empty()) {
    std::cerr << "error: --pattern is only valid with --arch hybrid\n";
    return kExitRuntime;
  }

  layertracer::LayeredModel model;
  if (args.plant_layer > 0) {
    if (args.plant_token < 0) {
      std::cerr << "error: --plant-layer requires --plant-token\n";
      return kExitRuntime;
    }
    model = layertracer::plant_particle(spec, args.plant_layer,
                                        args.plant_token, args.plant_strength,
                                        args.seed);
  } else {
    model = layertracer::init_random(spec, args.seed);
  }
  layertracer::save_weights(model, args.out);

  std::cout << "wrote " << args.out << "\n"
            << "  arch: " << layertracer::arch_name(spec.arch);
  if (spec.arch == layertracer::Arch::HybridSequence) {
    int attn = 0;
    for (auto kind : spec.layer_kinds) {
      if (kind == layertracer::LayerKind::Attention) ++attn;
    }
    std::cout << " (" << attn << " attention : " << spec.n_layers - attn
              << " linear)";
  }
  std::cout << "\n  layers: " << spec.n_layers << "  d_model: " << spec.d_model
            << "  heads: " << spec.n_heads << "  d_ff: " << spec.d_ff
            << "\n  vocab: " << spec.vocab_size << "  max_seq: " << spec.max_seq
            << "  seed: " << args.seed << "\n";
  if (args.plant_layer > 0) {
    std::cout << "  planted: layer " << args.plant_layer << ", token "
              << args.plant_token << ", strength " << args.plant_strength
              << "\n";
  }
  return 0;
}

int run_analyze_cmd(const AnalyzeArgs& args, layertracer::Phase phase) {
  layertracer::AnalyzeOptions options;
  options.model_path = args.model;
  options.phase = phase;
  options.top_k = args.top_k;
  options.mask_fraction = args.mask_fraction;
  options.noise_std = args.noise_std;
  options.seed = args.seed;
  options.out_dir = args.out_dir;
  options.threads = layertracer::threads_from_env();

  if (!args.prompt.empty()) {
    options.prompts.push_back({args.prompt, std::nullopt});
  } else if (!args.prompt_file.empty()) {
    options.prompts = layertracer::load_corpus(args.prompt_file);
  } else {
    std::cerr << "error: one of --prompt / --prompt-file is required\n";
    return kExitRuntime;
  }
  if (!args.layers.empty()) {
    options.layer_subset = layertracer::parse_layer_list(args.layers);
  }
  options.fmt_json = options.fmt_csv = options.fmt_svg = false;
  for (const std::string& fmt : args.formats) {
    if (fmt == "json") {
      options.fmt_json = true;
    } else if (fmt == "csv") {
      options.fmt_csv = true;
    } else if (fmt == "svg") {
      options.fmt_svg = true;
    } else {
      std::cerr << "error: unknown format '" << fmt << "'\n";
      return kExitRuntime;
    }
  }

  const layertracer::RunOutcome outcome = layertracer::run_analyze(options);
  for (const layertracer::PromptOutcome& p : outcome.prompts) {
    if (!p.ok()) {
      std::cerr << "warning: prompt " << p.index + 1 << " skipped: " << *p.error
                << "\n";
      continue;
    }
    std::cout << "prompt " << p.index + 1 << ":";
    if (p.particle.has_value()) {
      std::cout << " particle layer " << p.particle->particle_layer
                << " (ratio " << p.particle->particle_ratio << ", target token "
                << p.particle->target_token << ")";
    }
    if (p.vulnerability.has_value()) {
      std::cout << " vulnerable layer " << p.vulnerability->vulnerable_layer;
      if (p.vulnerability->lrs.has_value()) {
        std::cout << " (lrs " << *p.vulnerability->lrs << ")";
      }
      if (p.vulnerability->degenerate) std::cout << " [degenerate]";
    }
    std::cout << "\n";
  }
  std::cout << outcome.files_written.size() << " file(s) written to "
            << args.out_dir << "\n";
  if (outcome.degenerate_any) {
    std::cerr << "warning: degenerate vulnerability profile (perturbation is "
                 "a no-op); reports written\n";
    return kExitDegenerate;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "layertracer: layer-wise task-particle and vulnerability analysis for "
      "LTRC reference models"};
  app.require_subcommand(1);

  InitArgs init_args;
  CLI::App* init = app.add_subcommand(
      "init-model", "create a reference model and write an LTRC weight file");
  init->add_option("--arch", init_args.arch,
                   "decoder | linear | hybrid")
      ->capture_default_str();
  init->add_option("--pattern", init_args.pattern,
                   "hybrid layer pattern cycled over layers, e.g. AAAL");
  init->add_option("--layers", init_args.layers, "layer count")
      ->capture_default_str();
  init->add_option("--d-model", init_args.d_model, "hidden width")
      ->capture_default_str();
  init->add_option("--heads", init_args.heads, "attention heads")
      ->capture_default_str();
  init->add_option("--d-ff", init_args.d_ff, "feed-forward width")
      ->capture_default_str();
  init->add_option("--vocab", init_args.vocab, "vocabulary size")
      ->capture_default_str();
  init->add_option("--max-seq", init_args.max_seq, "maximum sequence length")
      ->capture_default_str();
  init->add_option("--seed", init_args.seed, "weight init seed")
      ->capture_default_str();
  init->add_option("--plant-layer", init_args.plant_layer,
                   "inject a known task particle at this layer");
  init->add_option("--plant-token", init_args.plant_token,
                   "target token id for the planted particle");
  init->add_option("--plant-strength", init_args.plant_strength,
                   "bias strength of the planted particle")
      ->capture_default_str();
  init->add_option("--out", init_args.out, "output LTRC path")->required();

  AnalyzeArgs analyze_args;
  CLI::App* analyze = app.add_subcommand(
      "analyze", "run both phases and write per-prompt reports");
  add_analyze_flags(analyze, analyze_args, true, true);

  AnalyzeArgs particle_args;
  CLI::App* particle = app.add_subcommand(
      "particle", "phase 1 only: task-particle localization");
  add_analyze_flags(particle, particle_args, true, false);

  AnalyzeArgs vulnerable_args;
  CLI::App* vulnerable = app.add_subcommand(
      "vulnerable", "phase 2 only: vulnerable-layer identification");
  add_analyze_flags(vulnerable, vulnerable_args, false, true);

  std::string report_path, plan_path;
  double q_freeze = 0.8;
  CLI::App* advise = app.add_subcommand(
      "advise", "derive a capacity/freeze plan from an analyze report");
  advise->add_option("--report", report_path, "analyze JSON report")
      ->required();
  advise->add_option("--freeze-quantile", q_freeze,
                     "freeze layers above this JS quantile")
      ->capture_default_str();
  advise->add_option("--out", plan_path, "output plan JSON path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (init->parsed()) return run_init(init_args);
    if (analyze->parsed()) {
      return run_analyze_cmd(analyze_args, layertracer::Phase::Both);
    }
    if (particle->parsed()) {
      return run_analyze_cmd(particle_args, layertracer::Phase::ParticleOnly);
    }
    if (vulnerable->parsed()) {
      return run_analyze_cmd(vulnerable_args,
                             layertracer::Phase::VulnerableOnly);
    }
    if (advise->parsed()) {
      layertracer::AdviseOptions options{report_path, q_freeze, plan_path};
      const layertracer::HybridPlan plan = layertracer::run_advise(options);
      std::cout << "wrote " << plan_path << "\n"
                << "  particle layer " << plan.particle_layer << " of "
                << plan.n_layers << "; capacity lightweight:full = "
                << plan.capacity_ratio << "\n";
      if (plan.all_frozen) {
        std::cerr << "warning: freeze quantile " << q_freeze
                  << " leaves no trainable layer\n";
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
