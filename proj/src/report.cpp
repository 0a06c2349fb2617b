#include "layertracer/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>

namespace layertracer {

namespace {

struct Rgb {
  int r, g, b;
};

constexpr Rgb kWhite{255, 255, 255};
constexpr Rgb kDeepGreen{0x1b, 0x78, 0x37};  // positive ratio endpoint
constexpr Rgb kDeepRed{0xb2, 0x18, 0x2b};    // negative ratio endpoint
constexpr Rgb kDeepBlue{0x08, 0x30, 0x6b};   // js ramp endpoint

// Ratio cells are clipped to this range for coloring only.
constexpr double kRatioClipLo = -3.0;
constexpr double kRatioClipHi = 1.0;

std::string hex_color(const Rgb& c) {
  char buf[8];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", c.r, c.g, c.b);
  return buf;
}

std::string lerp_color(const Rgb& from, const Rgb& to, double t) {
  const auto mix = [t](int a, int b) {
    return static_cast<int>(std::lround((1.0 - t) * a + t * b));
  };
  return hex_color({mix(from.r, to.r), mix(from.g, to.g), mix(from.b, to.b)});
}

std::string xml_escape(const std::string& text) {
  std::string out;
  out.reserve(text.size());
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

nlohmann::ordered_json json_opt(const std::optional<double>& v) {
  if (v.has_value()) return *v;
  return nullptr;
}

nlohmann::ordered_json layers_array(const LayerTrace* trace,
                                    const VulnerabilityProfile* profile) {
  std::map<int, double> js_by_layer;
  if (profile != nullptr) {
    for (const auto& [layer, js] : profile->js_per_layer) {
      js_by_layer[layer] = js;
    }
  }
  nlohmann::ordered_json layers = nlohmann::ordered_json::array();
  if (trace != nullptr) {
    for (const LayerTraceEntry& entry : trace->layers) {
      nlohmann::ordered_json row;
      row["index"] = entry.layer;
      row["target_prob"] = entry.target_prob;
      row["ratio"] = json_opt(entry.ratio);
      const auto it = js_by_layer.find(entry.layer);
      row["js"] =
          it != js_by_layer.end() ? nlohmann::ordered_json(it->second) : nullptr;
      nlohmann::ordered_json top = nlohmann::ordered_json::array();
      for (const auto& [token, prob] : entry.top_k) {
        top.push_back({{"token", token}, {"prob", prob}});
      }
      row["top_k"] = std::move(top);
      layers.push_back(std::move(row));
    }
  } else if (profile != nullptr) {
    for (const auto& [layer, js] : profile->js_per_layer) {
      layers.push_back({{"index", layer}, {"js", js}});
    }
  }
  return layers;
}

nlohmann::ordered_json particle_object(const ParticleResult& particle) {
  nlohmann::ordered_json obj;
  obj["target_token"] = particle.target_token;
  obj["layer"] = particle.particle_layer;
  obj["ratio"] = particle.particle_ratio;
  obj["relative_depth"] = particle.relative_depth;
  return obj;
}

nlohmann::ordered_json vulnerability_object(
    const VulnerabilityProfile& profile) {
  nlohmann::ordered_json obj;
  obj["layer"] = profile.vulnerable_layer;
  obj["lrs"] = json_opt(profile.lrs);
  return obj;
}

}  // namespace

ModelInfo ModelInfo::from_spec(const ModelSpec& spec) {
  return ModelInfo{arch_name(spec.arch), spec.n_layers, spec.d_model,
                   spec.vocab_size};
}

std::string ratio_color(double value) {
  const double v = std::clamp(value, kRatioClipLo, kRatioClipHi);
  if (v >= 0.0) return lerp_color(kWhite, kDeepGreen, v / kRatioClipHi);
  return lerp_color(kWhite, kDeepRed, v / kRatioClipLo);
}

std::string js_color(double value) {
  return lerp_color(kWhite, kDeepBlue, std::clamp(value, 0.0, 1.0));
}

const char* no_data_color() { return "#d9d9d9"; }

nlohmann::ordered_json analyze_report_json(const AnalyzeReport& report) {
  nlohmann::ordered_json doc;
  doc["schema_version"] = kReportSchemaVersion;
  doc["model"] = {{"arch", report.model.arch},
                  {"n_layers", report.model.n_layers},
                  {"d_model", report.model.d_model},
                  {"vocab_size", report.model.vocab_size}};
  doc["config"] = {{"top_k", report.config.top_k},
                   {"mask_fraction", report.config.mask_fraction},
                   {"noise_std", report.config.noise_std},
                   {"seed", report.config.seed}};
  if (report.particle.has_value()) {
    doc["particle"] = particle_object(*report.particle);
  }
  const LayerTrace* trace =
      report.particle.has_value() ? &report.particle->trace : nullptr;
  const VulnerabilityProfile* profile =
      report.vulnerability.has_value() ? &*report.vulnerability : nullptr;
  doc["layers"] = layers_array(trace, profile);
  if (profile != nullptr) {
    doc["vulnerability"] = vulnerability_object(*profile);
  }
  return doc;
}

nlohmann::ordered_json particle_json(const ParticleResult& particle) {
  nlohmann::ordered_json doc;
  doc["schema_version"] = kReportSchemaVersion;
  doc["n_layers"] = particle.n_layers;
  doc["particle"] = particle_object(particle);
  doc["layers"] = layers_array(&particle.trace, nullptr);
  return doc;
}

nlohmann::ordered_json vulnerability_json(const VulnerabilityProfile& profile) {
  nlohmann::ordered_json doc;
  doc["schema_version"] = kReportSchemaVersion;
  doc["perturbation"] = {{"mask_fraction", profile.perturbation.mask_fraction},
                         {"noise_std", profile.perturbation.noise_std},
                         {"seed", profile.perturbation.seed}};
  doc["vulnerability"] = vulnerability_object(profile);
  doc["degenerate"] = profile.degenerate;
  doc["layers"] = layers_array(nullptr, &profile);
  return doc;
}

nlohmann::ordered_json aggregate_json(const AggregateReport& report) {
  nlohmann::ordered_json doc;
  doc["schema_version"] = kReportSchemaVersion;
  doc["count"] = report.count;
  nlohmann::ordered_json hist = nlohmann::ordered_json::array();
  for (const auto& [layer, count] : report.layer_histogram) {
    hist.push_back({{"layer", layer}, {"count", count}});
  }
  doc["histogram"] = std::move(hist);
  doc["mean_relative_depth"] = report.mean_relative_depth;
  doc["median_relative_depth"] = report.median_relative_depth;
  doc["deep_half_fraction"] = report.deep_half_fraction;
  nlohmann::ordered_json prompts = nlohmann::ordered_json::array();
  for (size_t i = 0; i < report.results.size(); ++i) {
    const auto& [res, category] = report.results[i];
    nlohmann::ordered_json row;
    row["index"] = i;
    row["category"] =
        category.has_value() ? nlohmann::ordered_json(*category) : nullptr;
    row["target_token"] = res.target_token;
    row["particle_layer"] = res.particle_layer;
    row["particle_ratio"] = res.particle_ratio;
    row["relative_depth"] = res.relative_depth;
    prompts.push_back(std::move(row));
  }
  doc["prompts"] = std::move(prompts);
  nlohmann::ordered_json cats = nlohmann::ordered_json::array();
  for (const auto& [name, breakdown] : report.categories) {
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
  doc["categories"] = std::move(cats);
  return doc;
}

nlohmann::ordered_json hybrid_plan_json(const HybridPlan& plan) {
  nlohmann::ordered_json doc;
  doc["schema_version"] = kReportSchemaVersion;
  doc["particle_layer"] = plan.particle_layer;
  doc["n_layers"] = plan.n_layers;
  doc["q_freeze"] = plan.q_freeze;
  doc["freeze_threshold"] = json_opt(plan.freeze_threshold);
  doc["capacity_ratio"] = plan.capacity_ratio;
  doc["n_lightweight"] = plan.n_lightweight;
  doc["n_full"] = plan.n_full;
  doc["all_frozen"] = plan.all_frozen;
  nlohmann::ordered_json layers = nlohmann::ordered_json::array();
  for (const LayerPlan& lp : plan.layers) {
    layers.push_back(
        {{"index", lp.layer},
         {"js", lp.js},
         {"capacity", lp.capacity == Capacity::Full ? "full" : "lightweight"},
         {"training",
          lp.training == Training::Freeze ? "freeze" : "trainable"}});
  }
  doc["layers"] = std::move(layers);
  return doc;
}

void emit_json(const nlohmann::ordered_json& doc, const std::string& path) {
  write_text_file(path, doc.dump(2) + "\n");
}

void emit_json(const ParticleResult& particle, const std::string& path) {
  emit_json(particle_json(particle), path);
}

void emit_json(const VulnerabilityProfile& profile, const std::string& path) {
  emit_json(vulnerability_json(profile), path);
}

void emit_json(const AggregateReport& report, const std::string& path) {
  emit_json(aggregate_json(report), path);
}

std::string render_csv(const LayerTrace* trace,
                       const VulnerabilityProfile* profile, int top_k) {
  std::map<int, double> js_by_layer;
  if (profile != nullptr) {
    for (const auto& [layer, js] : profile->js_per_layer) {
      js_by_layer[layer] = js;
    }
  }
  std::string out = "layer,target_prob,ratio,js";
  for (int k = 1; k <= top_k; ++k) {
    out += ",top" + std::to_string(k) + "_token,top" + std::to_string(k) +
           "_prob";
  }
  out += "\n";

  const auto append_row = [&](int layer, const LayerTraceEntry* entry) {
    out += std::to_string(layer);
    out += ',';
    if (entry != nullptr) out += format_double(entry->target_prob);
    out += ',';
    if (entry != nullptr && entry->ratio.has_value()) {
      out += format_double(*entry->ratio);
    }
    out += ',';
    const auto it = js_by_layer.find(layer);
    if (it != js_by_layer.end()) out += format_double(it->second);
    for (int k = 0; k < top_k; ++k) {
      out += ',';
      if (entry != nullptr && k < static_cast<int>(entry->top_k.size())) {
        out += std::to_string(entry->top_k[static_cast<size_t>(k)].first);
        out += ',';
        out += format_double(entry->top_k[static_cast<size_t>(k)].second);
      } else {
        out += ',';
      }
    }
    out += "\n";
  };

  if (trace != nullptr) {
    for (const LayerTraceEntry& entry : trace->layers) {
      append_row(entry.layer, &entry);
    }
  } else if (profile != nullptr) {
    for (const auto& [layer, js] : profile->js_per_layer) {
      append_row(layer, nullptr);
    }
  }
  return out;
}

void emit_csv(const LayerTrace& trace, const VulnerabilityProfile* profile,
              int top_k, const std::string& path) {
  write_text_file(path, render_csv(&trace, profile, top_k));
}

void emit_csv(const VulnerabilityProfile& profile, const std::string& path) {
  write_text_file(path, render_csv(nullptr, &profile, 0));
}

std::string render_heatmap_svg(const HeatmapSpec& spec) {
  const int rows = static_cast<int>(spec.matrix.size());
  if (rows == 0) throw std::invalid_argument("heatmap: empty matrix");
  const int cols = static_cast<int>(spec.matrix[0].size());
  if (cols == 0) throw std::invalid_argument("heatmap: empty matrix row");
  for (const auto& row : spec.matrix) {
    if (static_cast<int>(row.size()) != cols) {
      throw std::invalid_argument("heatmap: matrix is not rectangular");
    }
  }
  if (!spec.row_labels.empty() &&
      static_cast<int>(spec.row_labels.size()) != rows) {
    throw std::invalid_argument("heatmap: row label count mismatch");
  }
  if (!spec.col_labels.empty() &&
      static_cast<int>(spec.col_labels.size()) != cols) {
    throw std::invalid_argument("heatmap: column label count mismatch");
  }
  if (spec.cell_size < 4) {
    throw std::invalid_argument("heatmap: cell_size too small");
  }

  std::vector<std::string> row_labels = spec.row_labels;
  std::vector<std::string> col_labels = spec.col_labels;
  if (row_labels.empty()) {
    for (int r = 1; r <= rows; ++r) row_labels.push_back("r" + std::to_string(r));
  }
  if (col_labels.empty()) {
    for (int c = 1; c <= cols; ++c) col_labels.push_back("c" + std::to_string(c));
  }

  size_t max_row_label = 0;
  for (const auto& label : row_labels) {
    max_row_label = std::max(max_row_label, label.size());
  }

  const int cs = spec.cell_size;
  const int title_h = spec.title.empty() ? 0 : 20;
  const int left = 10 + static_cast<int>(max_row_label) * 7;
  const int top = title_h + 18;
  const int legend_h = 46;
  const int width = left + cols * cs + 10;
  const int height = top + rows * cs + legend_h;

  const auto cell_fill = [&](const std::optional<double>& v) -> std::string {
    if (!v.has_value()) return no_data_color();
    return spec.mode == HeatmapSpec::Mode::Ratio ? ratio_color(*v)
                                                 : js_color(*v);
  };

  std::string svg;
  svg += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
         std::to_string(width) + "\" height=\"" + std::to_string(height) +
         "\" viewBox=\"0 0 " + std::to_string(width) + " " +
         std::to_string(height) + "\" font-family=\"monospace\">\n";
  if (!spec.title.empty()) {
    svg += "  <text class=\"title\" x=\"" + std::to_string(left) +
           "\" y=\"14\" font-size=\"12\">" + xml_escape(spec.title) +
           "</text>\n";
  }

  svg += "  <g class=\"col-labels\" font-size=\"9\" text-anchor=\"middle\">\n";
  for (int c = 0; c < cols; ++c) {
    svg += "    <text x=\"" + std::to_string(left + c * cs + cs / 2) +
           "\" y=\"" + std::to_string(top - 4) + "\">" +
           xml_escape(col_labels[c]) + "</text>\n";
  }
  svg += "  </g>\n";

  svg += "  <g class=\"row-labels\" font-size=\"9\" text-anchor=\"end\">\n";
  for (int r = 0; r < rows; ++r) {
    svg += "    <text x=\"" + std::to_string(left - 4) + "\" y=\"" +
           std::to_string(top + r * cs + cs / 2 + 3) + "\">" +
           xml_escape(row_labels[r]) + "</text>\n";
  }
  svg += "  </g>\n";

  svg += "  <g class=\"cells\">\n";
  for (int r = 0; r < rows; ++r) {
    svg += "    <g class=\"row\">\n";
    for (int c = 0; c < cols; ++c) {
      svg += "      <rect class=\"cell\" x=\"" + std::to_string(left + c * cs) +
             "\" y=\"" + std::to_string(top + r * cs) + "\" width=\"" +
             std::to_string(cs) + "\" height=\"" + std::to_string(cs) +
             "\" fill=\"" + cell_fill(spec.matrix[r][c]) + "\"/>\n";
    }
    svg += "    </g>\n";
  }
  svg += "  </g>\n";

  // Legend: swatches sampled across the mode's value range.
  const int n_swatches = 8;
  const int sw = 26;
  const int sh = 12;
  const int ly = top + rows * cs + 14;
  const double lo = spec.mode == HeatmapSpec::Mode::Ratio ? kRatioClipLo : 0.0;
  const double hi = spec.mode == HeatmapSpec::Mode::Ratio ? kRatioClipHi : 1.0;
  svg += "  <g class=\"legend\">\n";
  for (int i = 0; i < n_swatches; ++i) {
    const double v = lo + (hi - lo) * i / (n_swatches - 1);
    const std::string fill = spec.mode == HeatmapSpec::Mode::Ratio
                                 ? ratio_color(v)
                                 : js_color(v);
    svg += "    <rect class=\"legend-swatch\" x=\"" +
           std::to_string(left + i * sw) + "\" y=\"" + std::to_string(ly) +
           "\" width=\"" + std::to_string(sw) + "\" height=\"" +
           std::to_string(sh) + "\" fill=\"" + fill + "\"/>\n";
  }
  svg += "    <text x=\"" + std::to_string(left) + "\" y=\"" +
         std::to_string(ly + sh + 12) + "\" font-size=\"9\">" +
         format_double(lo) + "</text>\n";
  svg += "    <text x=\"" + std::to_string(left + n_swatches * sw) + "\" y=\"" +
         std::to_string(ly + sh + 12) +
         "\" font-size=\"9\" text-anchor=\"end\">" + format_double(hi) +
         "</text>\n";
  svg += "  </g>\n";
  svg += "</svg>\n";
  return svg;
}

void emit_heatmap_svg(const HeatmapSpec& spec, const std::string& path) {
  write_text_file(path, render_heatmap_svg(spec));
}

std::string format_double(double value) {
  char buf[64];
  const auto result = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, result.ptr);
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw std::runtime_error("cannot open '" + path + "' for writing");
  }
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

}  // namespace layertracer
