#include <doctest.h>

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "layertracer/report.hpp"
#include "support.hpp"

using namespace layertracer;
using test_support::TempDir;
using test_support::xml_well_formed;

namespace {

LayerTrace sample_trace() {
  LayerTrace trace;
  trace.target_token = 42;
  trace.n_layers = 3;
  for (int l = 1; l <= 3; ++l) {
    LayerTraceEntry entry;
    entry.layer = l;
    entry.target_prob = 0.1 * l + 1e-7;  // exercise full-precision round trips
    if (l > 1) entry.ratio = 0.5 / l;
    entry.top_k = {{42, 0.5}, {7, 0.25}};
    trace.layers.push_back(entry);
  }
  return trace;
}

VulnerabilityProfile sample_profile() {
  VulnerabilityProfile profile;
  profile.js_per_layer = {{1, 0.012345678901234567}, {2, 0.5}, {3, 0.25}};
  profile.vulnerable_layer = 2;
  profile.lrs = 0.2440054;
  profile.perturbation.mask_fraction = 1.0;
  profile.perturbation.noise_std = 0.0;
  profile.perturbation.seed = 9;
  return profile;
}

int count_occurrences(const std::string& text, const std::string& needle) {
  int count = 0;
  size_t pos = 0;
  while ((pos = text.find(needle, pos)) != std::string::npos) {
    ++count;
    pos += needle.size();
  }
  return count;
}

}  // namespace

TEST_CASE("analyze report json carries both phases at full precision") {
  AnalyzeReport report;
  report.model = {"decoder-attention", 3, 16, 64};
  report.config = {2, 1.0, 0.0, 12345678901234567ull};
  ParticleResult particle;
  particle.target_token = 42;
  particle.particle_layer = 2;
  particle.particle_ratio = 1.0 / 3.0;
  particle.relative_depth = 2.0 / 3.0;
  particle.n_layers = 3;
  particle.trace = sample_trace();
  report.particle = particle;
  report.vulnerability = sample_profile();

  const nlohmann::ordered_json doc = analyze_report_json(report);
  CHECK(doc["schema_version"] == kReportSchemaVersion);
  CHECK(doc["model"]["arch"] == "decoder-attention");
  CHECK(doc["config"]["seed"] == 12345678901234567ull);
  CHECK(doc["particle"]["layer"] == 2);
  CHECK(doc["layers"].size() == 3);
  CHECK(doc["layers"][0]["ratio"].is_null());
  CHECK(doc["layers"][1]["js"] == 0.5);
  CHECK(doc["layers"][0]["top_k"][0]["token"] == 42);
  CHECK(doc["vulnerability"]["layer"] == 2);

  // Round trip: parse the dump and compare numerics exactly.
  const nlohmann::json parsed = nlohmann::json::parse(doc.dump(2));
  CHECK(parsed["particle"]["ratio"].get<double>() == 1.0 / 3.0);
  CHECK(parsed["layers"][0]["target_prob"].get<double>() == 0.1 + 1e-7);
  CHECK(parsed["layers"][0]["js"].get<double>() == 0.012345678901234567);
}

TEST_CASE("phase-only json layouts") {
  ParticleResult particle;
  particle.target_token = 1;
  particle.particle_layer = 3;
  particle.particle_ratio = 0.75;
  particle.relative_depth = 1.0;
  particle.n_layers = 3;
  particle.trace = sample_trace();
  const nlohmann::ordered_json pdoc = particle_json(particle);
  CHECK(pdoc.contains("particle"));
  CHECK_FALSE(pdoc.contains("vulnerability"));
  CHECK(pdoc["layers"][1].contains("target_prob"));

  const nlohmann::ordered_json vdoc = vulnerability_json(sample_profile());
  CHECK(vdoc.contains("vulnerability"));
  CHECK_FALSE(vdoc.contains("particle"));
  CHECK(vdoc["degenerate"] == false);
  CHECK(vdoc["layers"][0] == nlohmann::ordered_json({{"index", 1},
                                                     {"js",
                                                      0.012345678901234567}}));
}

TEST_CASE("emitters are deterministic byte for byte") {
  TempDir dir("report");
  const std::string a = dir.file("a.json");
  const std::string b = dir.file("b.json");
  emit_json(sample_profile(), a);
  emit_json(sample_profile(), b);
  CHECK(test_support::read_file(a) == test_support::read_file(b));

  HeatmapSpec spec;
  spec.mode = HeatmapSpec::Mode::Js;
  spec.matrix = {{0.25, 0.5}, {0.75, std::nullopt}};
  CHECK(render_heatmap_svg(spec) == render_heatmap_svg(spec));
  CHECK(render_csv(nullptr, nullptr, 0) == render_csv(nullptr, nullptr, 0));
}

TEST_CASE("csv layout: one row per layer, empties stay empty") {
  const LayerTrace trace = sample_trace();
  const VulnerabilityProfile profile = sample_profile();
  const std::string csv = render_csv(&trace, &profile, 2);
  std::istringstream lines(csv);
  std::string line;
  REQUIRE(std::getline(lines, line));
  CHECK(line ==
        "layer,target_prob,ratio,js,top1_token,top1_prob,top2_token,top2_prob");
  REQUIRE(std::getline(lines, line));
  // Layer 1 has no ratio: the field is empty, not zero.
  CHECK(line.substr(0, 2) == "1,");
  const size_t first_comma = line.find(',');
  const size_t second_comma = line.find(',', first_comma + 1);
  const size_t third_comma = line.find(',', second_comma + 1);
  CHECK(third_comma == second_comma + 1);  // empty ratio field
  int rows = 1;
  while (std::getline(lines, line)) ++rows;
  CHECK(rows == 3);
}

TEST_CASE("csv round-trips the target probability series exactly") {
  const LayerTrace trace = sample_trace();
  const std::string csv = render_csv(&trace, nullptr, 2);
  std::istringstream lines(csv);
  std::string line;
  std::getline(lines, line);  // header
  size_t i = 0;
  while (std::getline(lines, line)) {
    const size_t c1 = line.find(',');
    const size_t c2 = line.find(',', c1 + 1);
    const double parsed = std::stod(line.substr(c1 + 1, c2 - c1 - 1));
    CHECK(parsed == trace.layers[i].target_prob);
    ++i;
  }
  CHECK(i == trace.layers.size());
}

TEST_CASE("profile-only csv leaves trace columns empty") {
  const VulnerabilityProfile profile = sample_profile();
  const std::string csv = render_csv(nullptr, &profile, 0);
  std::istringstream lines(csv);
  std::string line;
  std::getline(lines, line);
  CHECK(line == "layer,target_prob,ratio,js");
  std::getline(lines, line);
  CHECK(line == "1,,," + format_double(0.012345678901234567));
}

TEST_CASE("heatmap svg structure matches the matrix") {
  HeatmapSpec spec;
  spec.mode = HeatmapSpec::Mode::Ratio;
  spec.title = "ratio <&> check";
  spec.matrix = {{0.0, 0.5, std::nullopt}, {-1.0, 1.0, -4.0}};
  spec.row_labels = {"p1", "p2"};
  spec.col_labels = {"L1", "L2", "L3"};
  const std::string svg = render_heatmap_svg(spec);

  CHECK(xml_well_formed(svg));
  CHECK(count_occurrences(svg, "class=\"cell\"") == 6);
  CHECK(count_occurrences(svg, "<g class=\"row\">") == 2);
  // Zero maps to the neutral color; missing cells use the no-data fill.
  CHECK(svg.find("fill=\"#ffffff\"") != std::string::npos);
  CHECK(svg.find(no_data_color()) != std::string::npos);
  // -4 clips to the -3 endpoint color.
  CHECK(svg.find(ratio_color(-3.0)) != std::string::npos);
}

TEST_CASE("single-cell heatmap has exactly one data cell") {
  HeatmapSpec spec;
  spec.mode = HeatmapSpec::Mode::Js;
  spec.matrix = {{0.4}};
  const std::string svg = render_heatmap_svg(spec);
  CHECK(xml_well_formed(svg));
  CHECK(count_occurrences(svg, "class=\"cell\"") == 1);
}

TEST_CASE("js ramp endpoints are exact and the scales are monotone") {
  CHECK(js_color(0.0) == "#ffffff");
  CHECK(js_color(1.0) == "#08306b");
  CHECK(ratio_color(0.0) == "#ffffff");

  HeatmapSpec spec;
  spec.mode = HeatmapSpec::Mode::Js;
  spec.matrix = {{0.0, 1.0}};
  const std::string svg = render_heatmap_svg(spec);
  // Cell fills reproduce the legend endpoint swatches exactly.
  CHECK(count_occurrences(svg, "fill=\"#ffffff\"") >= 2);
  CHECK(count_occurrences(svg, "fill=\"#08306b\"") >= 2);

  // Monotone: green channel shrinks as js grows; ratio ramps deepen per side.
  const auto channel = [](const std::string& color, int i) {
    return std::stoi(color.substr(1 + 2 * static_cast<size_t>(i), 2), nullptr,
                     16);
  };
  for (double v = 0.0; v < 1.0; v += 0.1) {
    CHECK(channel(js_color(v), 1) >= channel(js_color(v + 0.1), 1));
    CHECK(channel(ratio_color(v), 0) >= channel(ratio_color(v + 0.1), 0));
    CHECK(channel(ratio_color(-3.0 * (v + 0.1)), 1) <=
          channel(ratio_color(-3.0 * v), 1));
  }
}

TEST_CASE("heatmap rejects malformed specs") {
  HeatmapSpec spec;
  CHECK_THROWS_AS(render_heatmap_svg(spec), std::invalid_argument);
  spec.matrix = {{0.1, 0.2}, {0.3}};
  CHECK_THROWS_AS(render_heatmap_svg(spec), std::invalid_argument);
  spec.matrix = {{0.1, 0.2}};
  spec.row_labels = {"a", "b"};
  CHECK_THROWS_AS(render_heatmap_svg(spec), std::invalid_argument);
}

TEST_CASE("aggregate json mirrors the aggregate report") {
  ParticleResult r;
  r.target_token = 5;
  r.particle_layer = 9;
  r.n_layers = 12;
  r.particle_ratio = 0.8;
  r.relative_depth = 0.75;
  const AggregateReport report =
      aggregate_particles({{r, std::string("cat-a")}, {r, std::nullopt}});
  const nlohmann::ordered_json doc = aggregate_json(report);
  CHECK(doc["count"] == 2);
  CHECK(doc["histogram"][0]["layer"] == 9);
  CHECK(doc["histogram"][0]["count"] == 2);
  CHECK(doc["deep_half_fraction"] == 1.0);
  CHECK(doc["prompts"].size() == 2);
  CHECK(doc["prompts"][1]["category"].is_null());
  CHECK(doc["categories"].size() == 1);
  CHECK(doc["categories"][0]["category"] == "cat-a");
}

TEST_CASE("hybrid plan json names capacity and training tags") {
  VulnerabilityProfile profile;
  for (int l = 1; l <= 4; ++l) {
    profile.js_per_layer.emplace_back(l, 0.1 * l);
  }
  profile.vulnerable_layer = 4;
  const HybridPlan plan = advise_hybrid(profile, 3, 0.75);
  const nlohmann::ordered_json doc = hybrid_plan_json(plan);
  CHECK(doc["capacity_ratio"] == "1:1");
  CHECK(doc["layers"][0]["capacity"] == "lightweight");
  CHECK(doc["layers"][3]["capacity"] == "full");
  CHECK(doc["layers"][3]["training"] == "freeze");
  CHECK(doc["layers"][0]["training"] == "trainable");
}
