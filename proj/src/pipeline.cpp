#include "layertracer/pipeline.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <thread>

#include "layertracer/weights.hpp"

namespace layertracer {

namespace {

template <typename Fn>
void parallel_for(int n, int threads, Fn&& fn) {
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> workers;
  workers.reserve(static_cast<size_t>(threads));
  for (int w = 0; w < threads; ++w) {
    workers.emplace_back([&fn, w, n, threads] {
      for (int i = w; i < n; i += threads) fn(i);
    });
  }
  for (auto& t : workers) t.join();
}

std::string prompt_file_stem(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "prompt_%04d", index + 1);
  return buf;
}

nlohmann::ordered_json aggregate_doc(const AnalyzeOptions& options,
                                     const ModelInfo& model,
                                     const RunOutcome& outcome) {
  nlohmann::ordered_json doc;
  doc["schema_version"] = kReportSchemaVersion;
  doc["model"] = {{"arch", model.arch},
                  {"n_layers", model.n_layers},
                  {"d_model", model.d_model},
                  {"vocab_size", model.vocab_size}};
  doc["config"] = {{"top_k", options.top_k},
                   {"mask_fraction", options.mask_fraction},
                   {"noise_std", options.noise_std},
                   {"seed", options.seed}};
  doc["count"] = static_cast<int>(outcome.prompts.size());
  doc["ok_count"] = outcome.ok_count;
  doc["failed_count"] = outcome.failed_count;

  std::vector<std::pair<ParticleResult, std::optional<std::string>>> particles;
  for (const PromptOutcome& p : outcome.prompts) {
    if (p.particle.has_value()) particles.emplace_back(*p.particle, p.category);
  }
  if (!particles.empty()) {
    const AggregateReport agg = aggregate_particles(particles);
    nlohmann::ordered_json summary;
    nlohmann::ordered_json hist = nlohmann::ordered_json::array();
    for (const auto& [layer, count] : agg.layer_histogram) {
      hist.push_back({{"layer", layer}, {"count", count}});
    }
    summary["histogram"] = std::move(hist);
    summary["mean_relative_depth"] = agg.mean_relative_depth;
    summary["median_relative_depth"] = agg.median_relative_depth;
    summary["deep_half_fraction"] = agg.deep_half_fraction;
    nlohmann::ordered_json cats = nlohmann::ordered_json::array();
    for (const auto& [name, breakdown] : agg.categories) {
      nlohmann::ordered_json cat;
      cat["category"] = name;
      cat["count"] = breakdown.count;
      nlohmann::ordered_json cat_hist = nlohmann::ordered_json::array();
      for (const auto& [layer, count] : breakdown.layer_histogram) {
        cat_hist.push_back({{"layer", layer}, {"count", count}});
      }
      cat["histogram"] = std::move(cat_hist);
      cat["mean_relative_depth"] = breakdown.mean_relative_depth;
      cat["deep_half_fraction"] = breakdown.deep_half_fraction;
      cats.push_back(std::move(cat));
    }
    summary["categories"] = std::move(cats);
    doc["particles"] = std::move(summary);
  } else {
    doc["particles"] = nullptr;
  }

  nlohmann::ordered_json prompts = nlohmann::ordered_json::array();
  for (const PromptOutcome& p : outcome.prompts) {
    nlohmann::ordered_json row;
    row["index"] = p.index;
    row["category"] = p.category.has_value()
                          ? nlohmann::ordered_json(*p.category)
                          : nlohmann::ordered_json(nullptr);
    row["error"] = p.error.has_value() ? nlohmann::ordered_json(*p.error)
                                       : nlohmann::ordered_json(nullptr);
    if (p.particle.has_value()) {
      row["target_token"] = p.particle->target_token;
      row["particle_layer"] = p.particle->particle_layer;
      row["particle_ratio"] = p.particle->particle_ratio;
      row["relative_depth"] = p.particle->relative_depth;
    }
    if (p.vulnerability.has_value()) {
      row["vulnerable_layer"] = p.vulnerability->vulnerable_layer;
      row["lrs"] = p.vulnerability->lrs.has_value()
                       ? nlohmann::ordered_json(*p.vulnerability->lrs)
                       : nlohmann::ordered_json(nullptr);
      row["degenerate"] = p.vulnerability->degenerate;
    }
    prompts.push_back(std::move(row));
  }
  doc["prompts"] = std::move(prompts);
  return doc;
}

}  // namespace

uint64_t prompt_seed(uint64_t root_seed, int index) {
  return mix64(root_seed, 0x70726F6D7074ull + static_cast<uint64_t>(index));
}

RunOutcome run_analyze(const AnalyzeOptions& options) {
  if (options.prompts.empty()) {
    throw std::invalid_argument("run_analyze: empty prompt list");
  }
  if (options.out_dir.empty()) {
    throw std::invalid_argument("run_analyze: no output directory");
  }
  const LayeredModel model = load_weights(options.model_path);
  const ModelInfo model_info = ModelInfo::from_spec(model.spec);
  std::filesystem::create_directories(options.out_dir);

  const int n = static_cast<int>(options.prompts.size());
  const int threads = std::max(1, options.threads);
  // Prompts get the outer parallelism; a single prompt hands it to the
  // per-layer scan instead.
  const int prompt_threads = n > 1 ? threads : 1;
  const int scan_threads = n > 1 ? 1 : threads;

  RunOutcome outcome;
  outcome.prompts.resize(static_cast<size_t>(n));
  parallel_for(n, prompt_threads, [&](int i) {
    const CorpusEntry& entry = options.prompts[static_cast<size_t>(i)];
    PromptOutcome& result = outcome.prompts[static_cast<size_t>(i)];
    result.index = i;
    result.category = entry.category;
    try {
      const std::vector<int> tokens = byte_tokens(entry.text);
      AnalysisConfig config;
      config.top_k = options.top_k;
      config.layer_subset = options.layer_subset;
      config.perturbation.mask_fraction = options.mask_fraction;
      config.perturbation.noise_std = options.noise_std;
      config.perturbation.seed = prompt_seed(options.seed, i);
      if (options.phase != Phase::VulnerableOnly) {
        const LayerTrace trace =
            capture_layer_distributions(model, tokens, config);
        result.particle = locate_task_particle(trace);
      }
      if (options.phase != Phase::ParticleOnly) {
        result.vulnerability =
            vulnerability_scan(model, tokens, config, scan_threads);
      }
    } catch (const std::exception& e) {
      result.particle.reset();
      result.vulnerability.reset();
      result.error = e.what();
    }
  });

  for (const PromptOutcome& p : outcome.prompts) {
    if (p.ok()) {
      ++outcome.ok_count;
    } else {
      ++outcome.failed_count;
    }
    if (p.vulnerability.has_value() && p.vulnerability->degenerate) {
      outcome.degenerate_any = true;
    }
  }
  if (outcome.ok_count == 0) {
    throw std::runtime_error("run_analyze: every prompt failed; first error: " +
                             *outcome.prompts.front().error);
  }

  const auto out_path = [&](const std::string& name) {
    return (std::filesystem::path(options.out_dir) / name).string();
  };

  for (const PromptOutcome& p : outcome.prompts) {
    if (!p.ok()) continue;
    const std::string stem = prompt_file_stem(p.index);
    if (options.fmt_json) {
      AnalyzeReport report;
      report.model = model_info;
      report.config = ConfigInfo{options.top_k, options.mask_fraction,
                                 options.noise_std, options.seed};
      report.particle = p.particle;
      report.vulnerability = p.vulnerability;
      const std::string path = out_path(stem + ".json");
      emit_json(analyze_report_json(report), path);
      outcome.files_written.push_back(path);
    }
    if (options.fmt_csv) {
      const std::string path = out_path(stem + ".csv");
      const VulnerabilityProfile* profile =
          p.vulnerability.has_value() ? &*p.vulnerability : nullptr;
      if (p.particle.has_value()) {
        emit_csv(p.particle->trace, profile, options.top_k, path);
      } else if (profile != nullptr) {
        emit_csv(*profile, path);
      }
      outcome.files_written.push_back(path);
    }
  }

  if (n > 1 && options.fmt_json) {
    const std::string path = out_path("aggregate.json");
    emit_json(aggregate_doc(options, model_info, outcome), path);
    outcome.files_written.push_back(path);
  }

  if (options.fmt_svg) {
    std::vector<int> layers = options.layer_subset;
    if (layers.empty()) {
      for (int l = 1; l <= model.spec.n_layers; ++l) layers.push_back(l);
    }
    std::vector<std::string> row_labels, col_labels;
    for (int i = 1; i <= n; ++i) row_labels.push_back("p" + std::to_string(i));
    for (int l : layers) col_labels.push_back("L" + std::to_string(l));
    const size_t n_cols = layers.size();

    if (options.phase != Phase::VulnerableOnly) {
      HeatmapSpec spec;
      spec.mode = HeatmapSpec::Mode::Ratio;
      spec.title = "relative increase ratio";
      spec.row_labels = row_labels;
      spec.col_labels = col_labels;
      spec.matrix.assign(static_cast<size_t>(n),
                         std::vector<std::optional<double>>(n_cols));
      for (const PromptOutcome& p : outcome.prompts) {
        if (!p.particle.has_value()) continue;
        const auto& entries = p.particle->trace.layers;
        for (size_t c = 0; c < entries.size() && c < n_cols; ++c) {
          spec.matrix[static_cast<size_t>(p.index)][c] = entries[c].ratio;
        }
      }
      const std::string path = out_path("heatmap_ratio.svg");
      emit_heatmap_svg(spec, path);
      outcome.files_written.push_back(path);
    }
    if (options.phase != Phase::ParticleOnly) {
      HeatmapSpec spec;
      spec.mode = HeatmapSpec::Mode::Js;
      spec.title = "js divergence under layer perturbation";
      spec.row_labels = row_labels;
      spec.col_labels = col_labels;
      spec.matrix.assign(static_cast<size_t>(n),
                         std::vector<std::optional<double>>(n_cols));
      for (const PromptOutcome& p : outcome.prompts) {
        if (!p.vulnerability.has_value()) continue;
        const auto& js = p.vulnerability->js_per_layer;
        for (size_t c = 0; c < js.size() && c < n_cols; ++c) {
          spec.matrix[static_cast<size_t>(p.index)][c] = js[c].second;
        }
      }
      const std::string path = out_path("heatmap_js.svg");
      emit_heatmap_svg(spec, path);
      outcome.files_written.push_back(path);
    }
  }
  return outcome;
}

HybridPlan run_advise(const AdviseOptions& options) {
  std::ifstream in(options.report_path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("advise: cannot open '" + options.report_path +
                             "'");
  }
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("advise: malformed report: " +
                             std::string(e.what()));
  }
  if (!doc.contains("particle") || !doc["particle"].contains("layer") ||
      !doc.contains("layers") || !doc["layers"].is_array()) {
    throw std::runtime_error(
        "advise: malformed report: needs particle.layer and a layers array");
  }
  VulnerabilityProfile profile;
  double max_js = -1.0;
  for (const auto& row : doc["layers"]) {
    if (!row.contains("index") || !row.contains("js") ||
        !row["js"].is_number()) {
      throw std::runtime_error(
          "advise: malformed report: every layer needs index and js");
    }
    const int layer = row["index"].get<int>();
    const double js = row["js"].get<double>();
    profile.js_per_layer.emplace_back(layer, js);
    if (js > max_js) {
      max_js = js;
      profile.vulnerable_layer = layer;
    }
  }
  const int particle_layer = doc["particle"]["layer"].get<int>();
  const HybridPlan plan =
      advise_hybrid(profile, particle_layer, options.q_freeze);
  if (!options.out_path.empty()) {
    emit_json(hybrid_plan_json(plan), options.out_path);
  }
  return plan;
}

std::vector<int> parse_layer_list(const std::string& text) {
  std::vector<int> layers;
  size_t pos = 0;
  const auto parse_int = [&text](size_t from, size_t to) {
    const std::string piece = text.substr(from, to - from);
    size_t used = 0;
    int value = 0;
    try {
      value = std::stoi(piece, &used);
    } catch (const std::exception&) {
      throw std::invalid_argument("invalid layer list entry '" + piece + "'");
    }
    if (used != piece.size() || value < 1) {
      throw std::invalid_argument("invalid layer list entry '" + piece + "'");
    }
    return value;
  };
  while (pos <= text.size()) {
    size_t comma = text.find(',', pos);
    if (comma == std::string::npos) comma = text.size();
    if (comma == pos) {
      throw std::invalid_argument("invalid layer list '" + text + "'");
    }
    const size_t dash = text.find('-', pos);
    if (dash != std::string::npos && dash < comma) {
      const int lo = parse_int(pos, dash);
      const int hi = parse_int(dash + 1, comma);
      if (hi < lo) {
        throw std::invalid_argument("invalid layer range in '" + text + "'");
      }
      for (int l = lo; l <= hi; ++l) layers.push_back(l);
    } else {
      layers.push_back(parse_int(pos, comma));
    }
    if (comma == text.size()) break;
    pos = comma + 1;
  }
  return layers;
}

int threads_from_env() {
  const char* value = std::getenv("LAYERTRACER_THREADS");
  if (value == nullptr || *value == '\0') return 1;
  try {
    const int threads = std::stoi(value);
    return std::max(1, threads);
  } catch (const std::exception&) {
    return 1;
  }
}

}  // namespace layertracer
