#pragma once

// Joint layer analysis over any LayeredModel:
//   Phase 1 — task-particle localization. The final-layer argmax token t* is
//   traced through every layer's logit-lens distribution; the layer
//   maximizing the relative increase ratio
//       ratio(l) = (P_t(l) - P_t(l-1)) / P_t(l)
//   is the task particle.
//   Phase 2 — vulnerable-layer identification. Each layer's mixer output is
//   perturbed with the same mask/noise template; the layer maximizing the
//   base-2 JS divergence against the unperturbed final distribution is the
//   vulnerable layer. LRS (the (N-1)-normalized root of squared JS
//   deviations from their mean) summarizes how uniform robustness is.
//
// This module never branches on model architecture: it only consumes the
// forward contracts. All operations are pure given an immutable model, and
// per-layer scan steps are order-independent.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "layertracer/model.hpp"
#include "layertracer/numerics.hpp"

namespace layertracer {

// A scan with every JS value at or below this is flagged degenerate.
inline constexpr double kDegenerateJsTol = 1e-9;

struct AnalysisConfig {
  int top_k = 10;
  double ratio_eps = 1e-12;  // ratio undefined where P_t(l) < ratio_eps
  Perturbation perturbation;  // template; layer is filled per scan step
  // 1-based strictly ascending layer indices; empty means all layers. The
  // same subset drives both phases.
  std::vector<int> layer_subset;

  // Divergences are base-2 by definition, so JS lands in [0, 1].
  static constexpr double js_log_base = 2.0;

  void validate(const ModelSpec& spec) const;
};

struct LayerTraceEntry {
  int layer = 0;
  double target_prob = 0.0;
  // Absent for the first scanned layer and wherever target_prob < ratio_eps.
  std::optional<double> ratio;
  std::vector<std::pair<int, double>> top_k;  // (token, prob) descending
};

struct LayerTrace {
  int target_token = 0;
  int n_layers = 0;  // model depth N, independent of any subset
  std::vector<LayerTraceEntry> layers;
};

struct ParticleResult {
  int target_token = 0;
  int particle_layer = 0;
  double particle_ratio = 0.0;
  double relative_depth = 0.0;  // particle_layer / n_layers
  int n_layers = 0;
  LayerTrace trace;
};

struct VulnerabilityProfile {
  std::vector<std::pair<int, double>> js_per_layer;  // (layer, D_l) ascending
  int vulnerable_layer = 0;
  // Absent when fewer than two layers were scanned.
  std::optional<double> lrs;
  Perturbation perturbation;  // template used (layer field meaningless)
  bool degenerate = false;    // every D_l <= kDegenerateJsTol
};

struct CategoryBreakdown {
  int count = 0;
  std::map<int, int> layer_histogram;
  double mean_relative_depth = 0.0;
  double deep_half_fraction = 0.0;
};

struct AggregateReport {
  int count = 0;
  std::map<int, int> layer_histogram;
  double mean_relative_depth = 0.0;
  double median_relative_depth = 0.0;
  // Fraction of particles strictly past the midpoint (l > N/2, each result's
  // own N).
  double deep_half_fraction = 0.0;
  std::vector<std::pair<std::string, CategoryBreakdown>> categories;
  std::vector<std::pair<ParticleResult, std::optional<std::string>>> results;
};

enum class Capacity { Full, Lightweight };
enum class Training { Freeze, Trainable };

struct LayerPlan {
  int layer = 0;
  double js = 0.0;
  Capacity capacity = Capacity::Full;
  Training training = Training::Trainable;
};

struct HybridPlan {
  int particle_layer = 0;
  int n_layers = 0;
  double q_freeze = 0.0;
  // Freeze threshold actually applied; absent when q_freeze == 0 (everything
  // frozen).
  std::optional<double> freeze_threshold;
  std::vector<LayerPlan> layers;
  int n_lightweight = 0;
  int n_full = 0;
  std::string capacity_ratio;  // "lightweight:full", gcd-reduced
  bool all_frozen = false;
};

// Eq.-style relative increase ratio. Returns nullopt when p_curr < eps;
// rejects inputs outside [0, 1].
std::optional<double> relative_increase_ratio(double p_prev, double p_curr,
                                              double eps);

// sum_i p_i * log2(p_i / max(q_i, eps)) over p_i > 0. Clamped at 0.
double kl_divergence(const ProbDist& p, const ProbDist& q, double eps = 1e-12);

// 0.5*KL(p||m) + 0.5*KL(q||m), m = (p+q)/2, base-2 logs, no eps needed.
// Result clamped into [0, 1].
double js_divergence(const ProbDist& p, const ProbDist& q);

// Layer-wise relative stability: sqrt(sum((js - mean)^2) / (N-1)) with N
// summands. Rejects fewer than two values.
double lrs(const std::vector<double>& js_values);

// Phase 1 capture: per-layer logit-lens distributions of the final argmax
// token, top-k candidates, and ratios between consecutive scanned layers.
LayerTrace capture_layer_distributions(const LayeredModel& model,
                                       const std::vector<int>& tokens,
                                       const AnalysisConfig& config);

// Smallest layer attaining the maximum defined ratio; the first scanned
// layer is never eligible. Throws on a trace with no defined ratio
// ("degenerate trace").
ParticleResult locate_task_particle(const LayerTrace& trace);

// Phase 2 scan. Per-layer steps are independent; `threads` > 1 runs them
// concurrently with output identical to sequential execution.
VulnerabilityProfile vulnerability_scan(const LayeredModel& model,
                                        const std::vector<int>& tokens,
                                        const AnalysisConfig& config,
                                        int threads = 1);

AggregateReport aggregate_particles(
    const std::vector<std::pair<ParticleResult, std::optional<std::string>>>&
        results);

// Depth-aware layer plan: full capacity from the particle layer down, frozen
// training wherever D_l exceeds the q_freeze rank threshold (k-th smallest
// with k = floor(q*n); q == 0 freezes everything, q == 1 nothing).
HybridPlan advise_hybrid(const VulnerabilityProfile& profile,
                         int particle_layer, double q_freeze = 0.8);

}  // namespace layertracer
