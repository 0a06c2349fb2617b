#include "layertracer/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <thread>

namespace layertracer {

namespace {

std::vector<int> resolve_layers(const AnalysisConfig& config,
                                const ModelSpec& spec) {
  if (config.layer_subset.empty()) {
    std::vector<int> all(static_cast<size_t>(spec.n_layers));
    std::iota(all.begin(), all.end(), 1);
    return all;
  }
  return config.layer_subset;
}

// Runs fn(i) for i in [0, n) across up to `threads` workers. Results must go
// into index-addressed slots so the outcome matches sequential execution.
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

}  // namespace

void AnalysisConfig::validate(const ModelSpec& spec) const {
  if (top_k < 1 || top_k > spec.vocab_size) {
    throw std::invalid_argument("AnalysisConfig: top_k " +
                                std::to_string(top_k) +
                                " out of range 1.." +
                                std::to_string(spec.vocab_size));
  }
  if (!(ratio_eps > 0.0)) {
    throw std::invalid_argument("AnalysisConfig: ratio_eps must be > 0");
  }
  perturbation.validate();
  int prev = 0;
  for (int l : layer_subset) {
    if (l < 1 || l > spec.n_layers) {
      throw std::invalid_argument("AnalysisConfig: layer " + std::to_string(l) +
                                  " out of range 1.." +
                                  std::to_string(spec.n_layers));
    }
    if (l <= prev) {
      throw std::invalid_argument(
          "AnalysisConfig: layer_subset must be strictly ascending");
    }
    prev = l;
  }
}

std::optional<double> relative_increase_ratio(double p_prev, double p_curr,
                                              double eps) {
  if (p_prev < 0.0 || p_prev > 1.0 || p_curr < 0.0 || p_curr > 1.0) {
    throw std::invalid_argument(
        "relative_increase_ratio: probabilities must be in [0,1]");
  }
  if (p_curr < eps) return std::nullopt;
  return (p_curr - p_prev) / p_curr;
}

double kl_divergence(const ProbDist& p, const ProbDist& q, double eps) {
  if (p.size() != q.size()) {
    throw std::invalid_argument("kl_divergence: length mismatch " +
                                std::to_string(p.size()) + " vs " +
                                std::to_string(q.size()));
  }
  double sum = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) sum += p[i] * std::log2(p[i] / std::max(q[i], eps));
  }
  return std::max(sum, 0.0);
}

double js_divergence(const ProbDist& p, const ProbDist& q) {
  if (p.size() != q.size()) {
    throw std::invalid_argument("js_divergence: length mismatch " +
                                std::to_string(p.size()) + " vs " +
                                std::to_string(q.size()));
  }
  double kl_p = 0.0;
  double kl_q = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);  // m == 0 implies p_i == q_i == 0
    if (p[i] > 0.0) kl_p += p[i] * std::log2(p[i] / m);
    if (q[i] > 0.0) kl_q += q[i] * std::log2(q[i] / m);
  }
  const double js = 0.5 * kl_p + 0.5 * kl_q;
  return std::clamp(js, 0.0, 1.0);
}

double lrs(const std::vector<double>& js_values) {
  const size_t n = js_values.size();
  if (n < 2) {
    throw std::invalid_argument("lrs: needs at least 2 layers, got " +
                                std::to_string(n));
  }
  // A constant profile has zero spread; skip the mean so its rounding cannot
  // produce a spurious 1e-17-scale result.
  if (std::all_of(js_values.begin(), js_values.end(),
                  [&](double v) { return v == js_values.front(); })) {
    return 0.0;
  }
  double mean = 0.0;
  for (double v : js_values) mean += v;
  mean /= static_cast<double>(n);
  double sum_sq = 0.0;
  for (double v : js_values) sum_sq += (v - mean) * (v - mean);
  return std::sqrt(sum_sq / static_cast<double>(n - 1));
}

LayerTrace capture_layer_distributions(const LayeredModel& model,
                                       const std::vector<int>& tokens,
                                       const AnalysisConfig& config) {
  config.validate(model.spec);
  const ProbDist final_dist = forward(model, tokens).dist;
  const int target = final_dist.argmax();
  const std::vector<int> layers = resolve_layers(config, model.spec);

  LayerTrace trace;
  trace.target_token = target;
  trace.n_layers = model.spec.n_layers;
  trace.layers.resize(layers.size());

  for (size_t i = 0; i < layers.size(); ++i) {
    const int l = layers[i];
    const CapturedState state = forward_until(model, tokens, l);
    const ProbDist dist = project_hidden(model, state.hidden);

    LayerTraceEntry& entry = trace.layers[i];
    entry.layer = l;
    entry.target_prob = dist[static_cast<size_t>(target)];

    std::vector<int> ids(dist.size());
    std::iota(ids.begin(), ids.end(), 0);
    const auto k = static_cast<size_t>(config.top_k);
    std::partial_sort(ids.begin(), ids.begin() + k, ids.end(),
                      [&dist](int a, int b) {
                        if (dist[a] != dist[b]) return dist[a] > dist[b];
                        return a < b;
                      });
    entry.top_k.reserve(k);
    for (size_t j = 0; j < k; ++j) {
      entry.top_k.emplace_back(ids[j], dist[static_cast<size_t>(ids[j])]);
    }
  }
  for (size_t i = 1; i < trace.layers.size(); ++i) {
    trace.layers[i].ratio = relative_increase_ratio(
        trace.layers[i - 1].target_prob, trace.layers[i].target_prob,
        config.ratio_eps);
  }
  return trace;
}

ParticleResult locate_task_particle(const LayerTrace& trace) {
  if (trace.layers.size() < 2) {
    throw std::invalid_argument(
        "locate_task_particle: trace needs at least 2 layers");
  }
  const LayerTraceEntry* best = nullptr;
  for (const LayerTraceEntry& entry : trace.layers) {
    if (!entry.ratio.has_value()) continue;
    if (best == nullptr || *entry.ratio > *best->ratio) best = &entry;
  }
  if (best == nullptr) {
    throw std::runtime_error(
        "locate_task_particle: degenerate trace (no defined ratio)");
  }
  ParticleResult result;
  result.target_token = trace.target_token;
  result.particle_layer = best->layer;
  result.particle_ratio = *best->ratio;
  result.n_layers = trace.n_layers;
  result.relative_depth =
      static_cast<double>(best->layer) / static_cast<double>(trace.n_layers);
  result.trace = trace;
  return result;
}

VulnerabilityProfile vulnerability_scan(const LayeredModel& model,
                                        const std::vector<int>& tokens,
                                        const AnalysisConfig& config,
                                        int threads) {
  config.validate(model.spec);
  if (threads < 1) threads = 1;
  const ProbDist ref = forward(model, tokens).dist;
  const std::vector<int> layers = resolve_layers(config, model.spec);

  std::vector<double> js(layers.size(), 0.0);
  std::exception_ptr failure;
  std::mutex failure_mutex;
  parallel_for(static_cast<int>(layers.size()), threads, [&](int i) {
    try {
      Perturbation pert = config.perturbation;
      pert.layer = layers[static_cast<size_t>(i)];
      const ProbDist q = forward_perturbed(model, tokens, pert);
      js[static_cast<size_t>(i)] = js_divergence(ref, q);
    } catch (...) {
      std::lock_guard<std::mutex> lock(failure_mutex);
      if (!failure) failure = std::current_exception();
    }
  });
  if (failure) std::rethrow_exception(failure);

  VulnerabilityProfile profile;
  profile.perturbation = config.perturbation;
  profile.perturbation.layer = 0;
  profile.js_per_layer.reserve(layers.size());
  size_t best = 0;
  double max_js = -1.0;
  for (size_t i = 0; i < layers.size(); ++i) {
    profile.js_per_layer.emplace_back(layers[i], js[i]);
    if (js[i] > max_js) {
      max_js = js[i];
      best = i;
    }
  }
  profile.vulnerable_layer = layers[best];
  if (js.size() >= 2) profile.lrs = lrs(js);
  profile.degenerate = max_js <= kDegenerateJsTol;
  return profile;
}

AggregateReport aggregate_particles(
    const std::vector<std::pair<ParticleResult, std::optional<std::string>>>&
        results) {
  if (results.empty()) {
    throw std::invalid_argument("aggregate_particles: empty input");
  }
  AggregateReport report;
  report.count = static_cast<int>(results.size());
  report.results = results;

  std::vector<double> depths;
  depths.reserve(results.size());
  int deep = 0;
  std::map<std::string, std::vector<const ParticleResult*>> by_category;
  for (const auto& [res, category] : results) {
    report.layer_histogram[res.particle_layer] += 1;
    depths.push_back(res.relative_depth);
    if (2 * res.particle_layer > res.n_layers) ++deep;
    if (category.has_value()) by_category[*category].push_back(&res);
  }
  report.mean_relative_depth =
      std::accumulate(depths.begin(), depths.end(), 0.0) /
      static_cast<double>(depths.size());
  std::sort(depths.begin(), depths.end());
  const size_t n = depths.size();
  report.median_relative_depth =
      n % 2 == 1 ? depths[n / 2] : 0.5 * (depths[n / 2 - 1] + depths[n / 2]);
  report.deep_half_fraction = static_cast<double>(deep) / static_cast<double>(n);

  for (const auto& [name, members] : by_category) {
    CategoryBreakdown breakdown;
    breakdown.count = static_cast<int>(members.size());
    int cat_deep = 0;
    double depth_sum = 0.0;
    for (const ParticleResult* res : members) {
      breakdown.layer_histogram[res->particle_layer] += 1;
      depth_sum += res->relative_depth;
      if (2 * res->particle_layer > res->n_layers) ++cat_deep;
    }
    breakdown.mean_relative_depth = depth_sum / members.size();
    breakdown.deep_half_fraction =
        static_cast<double>(cat_deep) / static_cast<double>(members.size());
    report.categories.emplace_back(name, breakdown);
  }
  return report;
}

HybridPlan advise_hybrid(const VulnerabilityProfile& profile,
                         int particle_layer, double q_freeze) {
  const int n = static_cast<int>(profile.js_per_layer.size());
  if (n == 0) {
    throw std::invalid_argument("advise_hybrid: empty vulnerability profile");
  }
  const int n_layers = profile.js_per_layer.back().first;
  if (particle_layer < 1 || particle_layer > n_layers) {
    throw std::invalid_argument("advise_hybrid: particle layer " +
                                std::to_string(particle_layer) +
                                " does not match profile depth " +
                                std::to_string(n_layers));
  }
  if (q_freeze < 0.0 || q_freeze > 1.0) {
    throw std::invalid_argument("advise_hybrid: q_freeze must be in [0,1]");
  }

  HybridPlan plan;
  plan.particle_layer = particle_layer;
  plan.n_layers = n_layers;
  plan.q_freeze = q_freeze;

  // Rank threshold: freeze layers whose JS exceeds the k-th smallest value,
  // k = floor(q*n). k == 0 means no threshold and everything freezes.
  const int k = static_cast<int>(q_freeze * n);
  if (k >= 1) {
    std::vector<double> sorted;
    sorted.reserve(static_cast<size_t>(n));
    for (const auto& [layer, js] : profile.js_per_layer) sorted.push_back(js);
    std::sort(sorted.begin(), sorted.end());
    plan.freeze_threshold = sorted[static_cast<size_t>(k - 1)];
  }

  plan.layers.reserve(static_cast<size_t>(n));
  for (const auto& [layer, js] : profile.js_per_layer) {
    LayerPlan lp;
    lp.layer = layer;
    lp.js = js;
    lp.capacity =
        layer >= particle_layer ? Capacity::Full : Capacity::Lightweight;
    const bool freeze =
        !plan.freeze_threshold.has_value() || js > *plan.freeze_threshold;
    lp.training = freeze ? Training::Freeze : Training::Trainable;
    if (lp.capacity == Capacity::Full) {
      ++plan.n_full;
    } else {
      ++plan.n_lightweight;
    }
    plan.layers.push_back(lp);
  }
  plan.all_frozen =
      std::all_of(plan.layers.begin(), plan.layers.end(), [](const LayerPlan& lp) {
        return lp.training == Training::Freeze;
      });

  const int divisor = std::gcd(plan.n_lightweight, plan.n_full);
  const int lite = divisor > 0 ? plan.n_lightweight / divisor : plan.n_lightweight;
  const int full = divisor > 0 ? plan.n_full / divisor : plan.n_full;
  plan.capacity_ratio = std::to_string(lite) + ":" + std::to_string(full);
  return plan;
}

}  // namespace layertracer
