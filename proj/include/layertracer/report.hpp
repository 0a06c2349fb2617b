#pragma once

// Serialization of analysis results: JSON reports, per-layer CSV, and
// standalone SVG layer heatmaps. Every emitter is deterministic — identical
// inputs produce byte-identical files — and numeric fields round-trip at
// full precision. Schemas and color ramps are documented in docs/FORMATS.md.

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "layertracer/analysis.hpp"
#include "layertracer/model.hpp"

namespace layertracer {

inline constexpr int kReportSchemaVersion = 1;

// Model identity echoed into every report.
struct ModelInfo {
  std::string arch;
  int n_layers = 0;
  int d_model = 0;
  int vocab_size = 0;

  static ModelInfo from_spec(const ModelSpec& spec);
};

// Analysis knobs echoed into every report.
struct ConfigInfo {
  int top_k = 10;
  double mask_fraction = 1.0;
  double noise_std = 0.0;
  uint64_t seed = 0;
};

// One prompt's combined analysis; either phase may be absent for the
// phase-only commands.
struct AnalyzeReport {
  ModelInfo model;
  ConfigInfo config;
  std::optional<ParticleResult> particle;
  std::optional<VulnerabilityProfile> vulnerability;
};

struct HeatmapSpec {
  enum class Mode { Ratio, Js };

  Mode mode = Mode::Js;
  // rows = prompts/samples, cols = layers. Disengaged cells (an undefined
  // ratio, a failed prompt) render in the no-data color.
  std::vector<std::vector<std::optional<double>>> matrix;
  std::vector<std::string> row_labels;  // empty -> r1..rN
  std::vector<std::string> col_labels;  // empty -> c1..cN
  int cell_size = 22;
  std::string title;
};

// Diverging ratio ramp: 0 maps to neutral white, positives toward deep
// green, negatives toward deep red. Values are clipped to [-3, 1] for
// coloring only.
std::string ratio_color(double value);
// Sequential ramp mapping [0, 1] from white to deep blue.
std::string js_color(double value);
const char* no_data_color();

// JSON object builders (ordered keys; see docs/FORMATS.md).
nlohmann::ordered_json analyze_report_json(const AnalyzeReport& report);
nlohmann::ordered_json particle_json(const ParticleResult& particle);
nlohmann::ordered_json vulnerability_json(const VulnerabilityProfile& profile);
nlohmann::ordered_json aggregate_json(const AggregateReport& report);
nlohmann::ordered_json hybrid_plan_json(const HybridPlan& plan);

void emit_json(const nlohmann::ordered_json& doc, const std::string& path);
void emit_json(const ParticleResult& particle, const std::string& path);
void emit_json(const VulnerabilityProfile& profile, const std::string& path);
void emit_json(const AggregateReport& report, const std::string& path);

// Fixed columns: layer, target_prob, ratio, js, then top_k (token, prob)
// pairs flattened. Missing values serialize as empty fields, not 0.
std::string render_csv(const LayerTrace* trace,
                       const VulnerabilityProfile* profile, int top_k);
void emit_csv(const LayerTrace& trace, const VulnerabilityProfile* profile,
              int top_k, const std::string& path);
void emit_csv(const VulnerabilityProfile& profile, const std::string& path);

std::string render_heatmap_svg(const HeatmapSpec& spec);
void emit_heatmap_svg(const HeatmapSpec& spec, const std::string& path);

// Shortest round-trip decimal form of a double (std::to_chars).
std::string format_double(double value);

void write_text_file(const std::string& path, const std::string& content);

}  // namespace layertracer
