#pragma once

// End-to-end runs behind the CLI: load a model, walk a prompt corpus through
// both analysis phases, and emit the requested report files. A run is a pure
// function of (model file, corpus, options) — per-prompt perturbation seeds
// derive from the root seed and the prompt index, and prompt/layer
// parallelism cannot change any output byte.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "layertracer/analysis.hpp"
#include "layertracer/corpus.hpp"
#include "layertracer/report.hpp"

namespace layertracer {

enum class Phase { Both, ParticleOnly, VulnerableOnly };

struct AnalyzeOptions {
  std::string model_path;
  std::vector<CorpusEntry> prompts;
  Phase phase = Phase::Both;
  int top_k = 10;
  double mask_fraction = 1.0;
  double noise_std = 0.0;
  uint64_t seed = 0;
  std::vector<int> layer_subset;  // empty = all layers
  std::string out_dir;
  bool fmt_json = true;
  bool fmt_csv = false;
  bool fmt_svg = false;
  int threads = 1;
};

struct PromptOutcome {
  int index = 0;  // 0-based corpus position
  std::optional<std::string> category;
  std::optional<ParticleResult> particle;
  std::optional<VulnerabilityProfile> vulnerability;
  std::optional<std::string> error;  // set when this prompt failed

  bool ok() const { return !error.has_value(); }
};

struct RunOutcome {
  std::vector<PromptOutcome> prompts;
  std::vector<std::string> files_written;
  bool degenerate_any = false;
  int ok_count = 0;
  int failed_count = 0;
};

// Seed used for prompt `index` of a run rooted at `root_seed`.
uint64_t prompt_seed(uint64_t root_seed, int index);

// Throws on fatal problems (unreadable model, empty corpus, I/O); individual
// prompt failures are recorded in the outcome instead.
RunOutcome run_analyze(const AnalyzeOptions& options);

struct AdviseOptions {
  std::string report_path;
  double q_freeze = 0.8;
  std::string out_path;
};

// Reads a prior analyze report (needs per-layer js and a particle layer) and
// writes the capacity/training plan. Throws on malformed reports.
HybridPlan run_advise(const AdviseOptions& options);

// "2,5,7-9" -> {2,5,7,8,9}; throws on malformed input.
std::vector<int> parse_layer_list(const std::string& text);

// LAYERTRACER_THREADS environment variable, default 1.
int threads_from_env();

}  // namespace layertracer
