#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "layertracer/analysis.hpp"
#include "support.hpp"

using namespace layertracer;
using test_support::random_dist;
using test_support::reference_spec;

namespace {

ProbDist make_dist(std::vector<double> probs) {
  return ProbDist{std::move(probs)};
}

// Trace with the given target-probability series, ratios filled the same way
// capture_layer_distributions does.
LayerTrace trace_from_series(const std::vector<double>& series,
                             double eps = 1e-12) {
  LayerTrace trace;
  trace.target_token = 0;
  trace.n_layers = static_cast<int>(series.size());
  for (size_t i = 0; i < series.size(); ++i) {
    LayerTraceEntry entry;
    entry.layer = static_cast<int>(i) + 1;
    entry.target_prob = series[i];
    if (i > 0) {
      entry.ratio = relative_increase_ratio(series[i - 1], series[i], eps);
    }
    trace.layers.push_back(entry);
  }
  return trace;
}

}  // namespace

TEST_CASE("relative increase ratio follows the defining formula") {
  CHECK(*relative_increase_ratio(0.1, 0.3, 1e-12) ==
        doctest::Approx(0.666667).epsilon(1e-6));
  CHECK(*relative_increase_ratio(0.25, 0.25, 1e-12) == doctest::Approx(0.0));
  CHECK_FALSE(relative_increase_ratio(0.5, 1e-15, 1e-12).has_value());
  CHECK_THROWS_AS(relative_increase_ratio(-0.1, 0.5, 1e-12),
                  std::invalid_argument);
  CHECK_THROWS_AS(relative_increase_ratio(0.1, 1.5, 1e-12),
                  std::invalid_argument);
}

TEST_CASE("defined ratios never exceed 1 and share sign with the change") {
  RngStream rng(31);
  for (int iter = 0; iter < 1000; ++iter) {
    const double prev = rng.uniform();
    const double curr = rng.uniform();
    const auto ratio = relative_increase_ratio(prev, curr, 1e-12);
    if (!ratio.has_value()) continue;
    CHECK(*ratio <= 1.0);
    CHECK((*ratio > 0.0) == (curr > prev));
  }
}

TEST_CASE("kl divergence reference values") {
  const ProbDist p = make_dist({1.0, 0.0});
  CHECK(kl_divergence(p, p) == doctest::Approx(0.0));
  CHECK(kl_divergence(p, make_dist({0.5, 0.5})) == doctest::Approx(1.0));
  // Disjoint supports stay finite under the eps floor: log2(1e12).
  const double disjoint = kl_divergence(p, make_dist({0.0, 1.0}));
  CHECK(disjoint == doctest::Approx(39.863137).epsilon(1e-6));
  CHECK(std::isfinite(disjoint));
  CHECK_THROWS_AS(kl_divergence(p, make_dist({1.0})), std::invalid_argument);
}

TEST_CASE("js divergence reference values") {
  const ProbDist p = make_dist({1.0, 0.0});
  CHECK(js_divergence(p, p) == doctest::Approx(0.0));
  CHECK(js_divergence(p, make_dist({0.0, 1.0})) == doctest::Approx(1.0));
  CHECK(js_divergence(p, make_dist({0.5, 0.5})) ==
        doctest::Approx(0.311278).epsilon(1e-6));
  CHECK_THROWS_AS(js_divergence(p, make_dist({1.0})), std::invalid_argument);
}

TEST_CASE("js divergence axioms over random pairs") {
  RngStream rng(41);
  for (const size_t vocab : {size_t(2), size_t(17), size_t(256)}) {
    for (int iter = 0; iter < 400; ++iter) {
      const ProbDist p = random_dist(rng, vocab, true);
      const ProbDist q = random_dist(rng, vocab, true);
      const double js = js_divergence(p, q);
      CHECK(js >= 0.0);
      CHECK(js <= 1.0);
      CHECK(std::abs(js - js_divergence(q, p)) <= 1e-9);
      CHECK(std::abs(js - test_support::js_oracle(p, q)) <= 1e-9);
      CHECK(js_divergence(p, p) <= 1e-12);
    }
  }
}

TEST_CASE("js divergence is permutation invariant") {
  RngStream rng(43);
  for (int iter = 0; iter < 200; ++iter) {
    const size_t vocab = 17;
    const ProbDist p = random_dist(rng, vocab, true);
    const ProbDist q = random_dist(rng, vocab, true);
    std::vector<size_t> perm(vocab);
    std::iota(perm.begin(), perm.end(), size_t(0));
    for (size_t i = vocab; i > 1; --i) {
      std::swap(perm[i - 1], perm[rng.uniform_index(i)]);
    }
    ProbDist pp, qp;
    pp.probs.resize(vocab);
    qp.probs.resize(vocab);
    for (size_t i = 0; i < vocab; ++i) {
      pp.probs[i] = p[perm[i]];
      qp.probs[i] = q[perm[i]];
    }
    CHECK(std::abs(js_divergence(p, q) - js_divergence(pp, qp)) <= 1e-9);
  }
}

TEST_CASE("lrs reference values and guards") {
  CHECK(lrs({0.1, 0.3}) == doctest::Approx(0.141421).epsilon(1e-6));
  CHECK(lrs({0.4, 0.4, 0.4, 0.4}) == doctest::Approx(0.0));
  CHECK_THROWS_AS(lrs({0.5}), std::invalid_argument);
  CHECK_THROWS_AS(lrs({}), std::invalid_argument);
}

TEST_CASE("lrs is shift invariant") {
  RngStream rng(47);
  for (int iter = 0; iter < 100; ++iter) {
    const size_t n = 2 + rng.uniform_index(20);
    std::vector<double> values(n), shifted(n);
    const double shift = rng.uniform_range(-5, 5);
    for (size_t i = 0; i < n; ++i) {
      values[i] = rng.uniform();
      shifted[i] = values[i] + shift;
    }
    CHECK(lrs(values) == doctest::Approx(lrs(shifted)).epsilon(1e-9));
  }
}

TEST_CASE("locate_task_particle picks the max-ratio layer") {
  const LayerTrace trace = trace_from_series({0.01, 0.02, 0.5, 0.6});
  CHECK(*trace.layers[1].ratio == doctest::Approx(0.5));
  CHECK(*trace.layers[2].ratio == doctest::Approx(0.96));
  CHECK(*trace.layers[3].ratio == doctest::Approx(1.0 / 6.0));
  const ParticleResult result = locate_task_particle(trace);
  CHECK(result.particle_layer == 3);
  CHECK(result.particle_ratio == doctest::Approx(0.96));
  CHECK(result.relative_depth == doctest::Approx(0.75));
}

TEST_CASE("locate_task_particle tie-breaks to the lowest layer") {
  const ParticleResult constant =
      locate_task_particle(trace_from_series({0.2, 0.2, 0.2, 0.2}));
  CHECK(constant.particle_layer == 2);  // all ratios 0, layer 1 ineligible

  const ParticleResult multi_max =
      locate_task_particle(trace_from_series({0.1, 0.2, 0.1, 0.2}));
  CHECK(multi_max.particle_layer == 2);  // layers 2 and 4 both at 0.5

  // Re-running on the same trace is stable.
  const LayerTrace trace = trace_from_series({0.1, 0.2, 0.1, 0.2});
  CHECK(locate_task_particle(trace).particle_layer ==
        locate_task_particle(trace).particle_layer);
}

TEST_CASE("a trace with no defined ratio is rejected as degenerate") {
  const LayerTrace trace = trace_from_series({1e-15, 1e-14, 1e-16});
  CHECK_THROWS_WITH_AS(locate_task_particle(trace),
                       "locate_task_particle: degenerate trace (no defined "
                       "ratio)",
                       std::runtime_error);
  CHECK_THROWS_AS(locate_task_particle(trace_from_series({0.5})),
                  std::invalid_argument);
}

TEST_CASE("negative ratios lose to any positive ratio") {
  const ParticleResult result =
      locate_task_particle(trace_from_series({0.5, 0.1, 0.12, 0.05}));
  CHECK(result.particle_layer == 3);  // the only positive step
}

TEST_CASE("capture_layer_distributions traces the final argmax token") {
  const LayeredModel model =
      plant_particle(reference_spec(Arch::DecoderAttention), 7, 'Z', 6.0, 5);
  const std::vector<int> tokens = byte_tokens("trace this prompt");
  AnalysisConfig config;
  const LayerTrace trace = capture_layer_distributions(model, tokens, config);

  REQUIRE(trace.layers.size() == 12);
  CHECK(trace.target_token == 'Z');
  CHECK_FALSE(trace.layers[0].ratio.has_value());
  for (const LayerTraceEntry& entry : trace.layers) {
    CHECK(entry.target_prob >= 0.0);
    CHECK(entry.target_prob <= 1.0);
    CHECK(entry.top_k.size() == 10);
    for (size_t i = 1; i < entry.top_k.size(); ++i) {
      CHECK(entry.top_k[i - 1].second >= entry.top_k[i].second);
    }
    if (entry.ratio.has_value()) CHECK(*entry.ratio <= 1.0);
  }

  // The final layer's stored distribution matches forward()'s output: its
  // target probability and top candidate agree.
  const ProbDist final_dist = forward(model, tokens).dist;
  const LayerTraceEntry& last = trace.layers.back();
  CHECK(std::abs(last.target_prob -
                 final_dist[static_cast<size_t>(trace.target_token)]) <= 1e-9);
  CHECK(last.top_k[0].first == trace.target_token);

  // The planted layer shows the largest single-step probability increase.
  double best_step = -1.0;
  int best_layer = 0;
  for (size_t i = 1; i < trace.layers.size(); ++i) {
    const double step =
        trace.layers[i].target_prob - trace.layers[i - 1].target_prob;
    if (step > best_step) {
      best_step = step;
      best_layer = trace.layers[i].layer;
    }
  }
  CHECK(best_layer == 7);
}

TEST_CASE("top_k equal to vocab stores a full distribution per layer") {
  ModelSpec spec = reference_spec(Arch::DecoderAttention);
  spec.n_layers = 3;
  const LayeredModel model = init_random(spec, 2);
  AnalysisConfig config;
  config.top_k = spec.vocab_size;
  const LayerTrace trace =
      capture_layer_distributions(model, byte_tokens("x"), config);
  for (const LayerTraceEntry& entry : trace.layers) {
    double sum = 0.0;
    for (const auto& [token, prob] : entry.top_k) sum += prob;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
  config.top_k = spec.vocab_size + 1;
  CHECK_THROWS_AS(capture_layer_distributions(model, byte_tokens("x"), config),
                  std::invalid_argument);
}

TEST_CASE("layer subset restricts the trace and the scan") {
  const LayeredModel model =
      plant_particle(reference_spec(Arch::DecoderAttention), 7, 'Z', 6.0, 5);
  const std::vector<int> tokens = byte_tokens("subset");
  AnalysisConfig config;
  config.layer_subset = {2, 6, 7, 10};
  const LayerTrace trace = capture_layer_distributions(model, tokens, config);
  REQUIRE(trace.layers.size() == 4);
  CHECK(trace.layers[2].layer == 7);
  CHECK(locate_task_particle(trace).particle_layer == 7);

  const VulnerabilityProfile profile =
      vulnerability_scan(model, tokens, config);
  REQUIRE(profile.js_per_layer.size() == 4);
  CHECK(profile.vulnerable_layer == 7);

  config.layer_subset = {3, 2};
  CHECK_THROWS_AS(capture_layer_distributions(model, tokens, config),
                  std::invalid_argument);
  config.layer_subset = {0};
  CHECK_THROWS_AS(capture_layer_distributions(model, tokens, config),
                  std::invalid_argument);
}

TEST_CASE("planted recovery for both phases at several layers") {
  const std::vector<int> tokens = byte_tokens("joint recovery check");
  for (int k : {3, 7, 10}) {
    const LayeredModel model =
        plant_particle(reference_spec(Arch::LinearAttention), k, 'Z', 6.0, 77);
    AnalysisConfig config;
    const LayerTrace trace = capture_layer_distributions(model, tokens, config);
    CHECK(locate_task_particle(trace).particle_layer == k);
    const VulnerabilityProfile profile =
        vulnerability_scan(model, tokens, config);
    CHECK(profile.vulnerable_layer == k);
    CHECK_FALSE(profile.degenerate);
  }
}

TEST_CASE("no-op perturbation flags the profile as degenerate") {
  const LayeredModel model = init_random(reference_spec(Arch::DecoderAttention),
                                         12);
  AnalysisConfig config;
  config.perturbation.mask_fraction = 0.0;
  config.perturbation.noise_std = 0.0;
  const VulnerabilityProfile profile =
      vulnerability_scan(model, byte_tokens("noop"), config);
  CHECK(profile.degenerate);
  for (const auto& [layer, js] : profile.js_per_layer) CHECK(js <= 1e-9);
}

TEST_CASE("vulnerability scan output does not depend on evaluation order") {
  const LayeredModel model =
      plant_particle(reference_spec(Arch::DecoderAttention), 9, 'k', 6.0, 31);
  const std::vector<int> tokens = byte_tokens("order independence");
  AnalysisConfig config;
  const VulnerabilityProfile sequential =
      vulnerability_scan(model, tokens, config, 1);
  const VulnerabilityProfile threaded =
      vulnerability_scan(model, tokens, config, 4);
  CHECK(sequential.js_per_layer == threaded.js_per_layer);
  CHECK(sequential.vulnerable_layer == threaded.vulnerable_layer);

  // Manual descending-order evaluation agrees layer by layer.
  const ProbDist ref = forward(model, tokens).dist;
  for (int l = model.spec.n_layers; l >= 1; --l) {
    Perturbation pert = config.perturbation;
    pert.layer = l;
    const double js = js_divergence(ref, forward_perturbed(model, tokens, pert));
    CHECK(js ==
          sequential.js_per_layer[static_cast<size_t>(l - 1)].second);
  }
}

TEST_CASE("aggregate_particles summarizes layers and depths") {
  const auto result_at = [](int layer, int n_layers) {
    ParticleResult r;
    r.target_token = 1;
    r.particle_layer = layer;
    r.n_layers = n_layers;
    r.particle_ratio = 0.9;
    r.relative_depth = double(layer) / n_layers;
    return r;
  };

  SUBCASE("singleton") {
    const AggregateReport report =
        aggregate_particles({{result_at(9, 12), std::nullopt}});
    CHECK(report.count == 1);
    CHECK(report.layer_histogram.at(9) == 1);
    CHECK(report.deep_half_fraction == doctest::Approx(1.0));
    CHECK(report.mean_relative_depth == doctest::Approx(0.75));
    CHECK(report.median_relative_depth == doctest::Approx(0.75));
  }
  SUBCASE("mixed depths") {
    const AggregateReport report = aggregate_particles(
        {{result_at(3, 12), std::string("syn")},
         {result_at(9, 12), std::string("syn")},
         {result_at(10, 12), std::string("ant")}});
    CHECK(report.deep_half_fraction == doctest::Approx(2.0 / 3.0));
    CHECK(report.layer_histogram.size() == 3);
    int histogram_total = 0;
    for (const auto& [layer, count] : report.layer_histogram) {
      histogram_total += count;
    }
    CHECK(histogram_total == report.count);
    REQUIRE(report.categories.size() == 2);
    CHECK(report.categories[0].first == "ant");
    CHECK(report.categories[0].second.count == 1);
    CHECK(report.categories[1].second.count == 2);
    CHECK(report.categories[1].second.deep_half_fraction ==
          doctest::Approx(0.5));
  }
  SUBCASE("twenty planted results in one bin") {
    std::vector<std::pair<ParticleResult, std::optional<std::string>>> results(
        20, {result_at(10, 12), std::nullopt});
    const AggregateReport report = aggregate_particles(results);
    CHECK(report.layer_histogram.at(10) == 20);
    CHECK(report.layer_histogram.size() == 1);
    CHECK(report.deep_half_fraction == doctest::Approx(1.0));
  }
  SUBCASE("midpoint layer is not deep") {
    const AggregateReport report =
        aggregate_particles({{result_at(6, 12), std::nullopt}});
    CHECK(report.deep_half_fraction == doctest::Approx(0.0));
  }
  CHECK_THROWS_AS(aggregate_particles({}), std::invalid_argument);
}

TEST_CASE("advise_hybrid applies the depth and quantile rules") {
  const auto uniform_profile = [](int n, double js) {
    VulnerabilityProfile profile;
    for (int l = 1; l <= n; ++l) profile.js_per_layer.emplace_back(l, js);
    profile.vulnerable_layer = 1;
    return profile;
  };

  SUBCASE("uniform profile, particle 9 of 12") {
    const HybridPlan plan = advise_hybrid(uniform_profile(12, 0.2), 9, 0.8);
    CHECK(plan.n_full == 4);
    CHECK(plan.n_lightweight == 8);
    CHECK(plan.capacity_ratio == "2:1");
    for (const LayerPlan& lp : plan.layers) {
      CHECK((lp.layer >= 9) == (lp.capacity == Capacity::Full));
      CHECK(lp.training == Training::Trainable);  // nothing exceeds the value
    }
    CHECK_FALSE(plan.all_frozen);
  }
  SUBCASE("u-shaped profile freezes the boundary layers") {
    VulnerabilityProfile profile;
    const std::vector<double> js = {0.9, 0.2, 0.1, 0.1, 0.2, 0.95};
    for (int l = 1; l <= 6; ++l) {
      profile.js_per_layer.emplace_back(l, js[static_cast<size_t>(l - 1)]);
    }
    profile.vulnerable_layer = 6;
    const HybridPlan plan = advise_hybrid(profile, 4, 0.8);
    CHECK(plan.layers.front().training == Training::Freeze);
    CHECK(plan.layers.back().training == Training::Freeze);
    int frozen = 0;
    for (const LayerPlan& lp : plan.layers) {
      frozen += lp.training == Training::Freeze;
    }
    CHECK(frozen == 2);
  }
  SUBCASE("particle at layer 1 makes every layer full capacity") {
    const HybridPlan plan = advise_hybrid(uniform_profile(8, 0.3), 1, 0.8);
    CHECK(plan.n_lightweight == 0);
    CHECK(plan.n_full == 8);
    CHECK(plan.capacity_ratio == "0:1");
  }
  SUBCASE("quantile boundaries") {
    const HybridPlan none = advise_hybrid(uniform_profile(6, 0.3), 3, 1.0);
    for (const LayerPlan& lp : none.layers) {
      CHECK(lp.training == Training::Trainable);
    }
    const HybridPlan all = advise_hybrid(uniform_profile(6, 0.3), 3, 0.0);
    CHECK(all.all_frozen);
    CHECK_FALSE(all.freeze_threshold.has_value());
  }
  SUBCASE("argument validation") {
    CHECK_THROWS_AS(advise_hybrid(uniform_profile(6, 0.3), 9, 0.8),
                    std::invalid_argument);
    CHECK_THROWS_AS(advise_hybrid(uniform_profile(6, 0.3), 3, 1.5),
                    std::invalid_argument);
    CHECK_THROWS_AS(advise_hybrid(VulnerabilityProfile{}, 1, 0.5),
                    std::invalid_argument);
  }
}

TEST_CASE("analysis runs identically on every architecture") {
  const std::vector<int> tokens = byte_tokens("agnostic pipeline");
  for (Arch arch : {Arch::DecoderAttention, Arch::LinearAttention,
                    Arch::HybridSequence}) {
    const LayeredModel model = plant_particle(reference_spec(arch), 8, 'q',
                                              6.0, 400);
    AnalysisConfig config;
    const LayerTrace trace = capture_layer_distributions(model, tokens, config);
    CHECK(locate_task_particle(trace).particle_layer == 8);
    CHECK(vulnerability_scan(model, tokens, config).vulnerable_layer == 8);
  }
}
