#pragma once

// The layered-model contract: a stack of pre-norm residual blocks over a
// byte-level vocabulary, with per-layer hidden-state capture, early exit, and
// per-layer mixer-output perturbation. Two reference mixers are provided
// (causal multi-head attention and single-head cumulative-state linear
// attention); everything downstream of forward() is architecture-agnostic.
//
// Block structure, residual stream x:
//   m = mixer(rms_norm(x, ln1)) + out_bias     <- perturbation target
//   x = x + m
//   x = x + ff(rms_norm(x, ln2))
//
// Layer indices are 1-based throughout the public surface. Hidden states are
// read at the final token position. Models are immutable after construction;
// all forward variants are read-only and safe to run concurrently.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "layertracer/numerics.hpp"

namespace layertracer {

// RMS-normalization epsilon used by every block norm and the final norm.
inline constexpr double kNormEps = 1e-6;

enum class Arch : uint8_t {
  DecoderAttention = 0,
  LinearAttention = 1,
  HybridSequence = 2,
};

// Per-layer mixer kind. Non-hybrid models use one kind for every layer.
enum class LayerKind : uint8_t {
  Attention = 0,
  Linear = 1,
};

std::string arch_name(Arch arch);
std::optional<Arch> arch_from_name(std::string_view name);

struct ModelSpec {
  Arch arch = Arch::DecoderAttention;
  int n_layers = 0;
  int d_model = 0;
  int n_heads = 0;
  int d_ff = 0;
  int vocab_size = 0;
  int max_seq = 0;
  // Hybrid only: one kind per layer, length n_layers. Ignored otherwise.
  std::vector<LayerKind> layer_kinds;

  // Throws std::invalid_argument naming the offending field.
  void validate() const;

  // Mixer kind of 1-based layer l, resolving the hybrid list.
  LayerKind kind_of(int layer) const;
};

struct BlockParams {
  LayerKind kind = LayerKind::Attention;
  std::vector<float> ln1_gain;  // [d_model]
  Matrix wq, wk, wv, wo;        // [d_model, d_model] each
  std::vector<float> out_bias;  // [d_model], added to the mixer output
  std::vector<float> ln2_gain;  // [d_model]
  Matrix ff_w1;                 // [d_ff, d_model]
  Matrix ff_w2;                 // [d_model, d_ff]
};

struct LayeredModel {
  ModelSpec spec;
  Matrix embedding;                   // [vocab_size, d_model]
  std::vector<BlockParams> blocks;    // size n_layers
  std::vector<float> final_norm_gain;  // [d_model]
  Matrix unembedding;                 // [vocab_size, d_model]
};

// Uniform interference applied to one layer's mixer output: a deterministic
// floor(mask_fraction * d_model) channel subset is zeroed, then N(0, noise^2)
// noise is added to every channel. The channel mask and the noise sequence
// are functions of (seed, layer) only.
struct Perturbation {
  int layer = 0;               // 1-based, filled per scan step
  double mask_fraction = 1.0;  // in [0, 1]
  double noise_std = 0.0;      // >= 0
  uint64_t seed = 0;

  // Range checks on mask_fraction / noise_std (layer is checked per model).
  void validate() const;
};

// Residual-stream vector at the final token position after block `layer`.
struct CapturedState {
  int layer = 0;
  std::vector<float> hidden;  // length d_model
};

struct ForwardResult {
  ProbDist dist;                        // softmax(lm_head(final_norm(h_N)))
  std::vector<CapturedState> captured;  // one per layer when captured
};

// Byte-level tokenization: ids are byte values, no special tokens.
std::vector<int> byte_tokens(std::string_view text);

// Fresh model with scaled-uniform weights, deterministic in seed. Projection
// weights ~ U(+-sqrt(3/fan_in)), embeddings ~ U(-0.5, 0.5), norm gains 1,
// output biases 0. Draw order is fixed by the tensor order of the LTRC file.
LayeredModel init_random(const ModelSpec& spec, uint64_t seed);

// init_random with all mixer/FF projection weights scaled down so no layer
// dominates, plus block k's output bias set to strength * u/|u| where u is
// the unembedding row of `target`. The target logit surges at layer k, so k
// is that model's expected task particle and vulnerable layer. strength == 0
// returns init_random(spec, seed) unchanged.
LayeredModel plant_particle(const ModelSpec& spec, int k, int target,
                            double strength, uint64_t seed);

// Full forward variant: optional per-layer capture and optional perturbation.
// forward / forward_until / forward_perturbed are thin wrappers over this,
// which is what makes their cross-consistency bit-exact.
ForwardResult forward_with(const LayeredModel& model,
                           const std::vector<int>& tokens, bool capture,
                           const Perturbation* pert);

ForwardResult forward(const LayeredModel& model, const std::vector<int>& tokens,
                      bool capture = false);

// Runs blocks 1..l only and returns h_l; bit-identical to the l-th captured
// state of forward(capture=true).
CapturedState forward_until(const LayeredModel& model,
                            const std::vector<int>& tokens, int layer);

// Final distribution with `pert` applied to its layer's mixer output.
ProbDist forward_perturbed(const LayeredModel& model,
                           const std::vector<int>& tokens,
                           const Perturbation& pert);

// Logit-lens projection: softmax(unembed(final_norm(hidden))).
ProbDist project_hidden(const LayeredModel& model,
                        std::span<const float> hidden);

}  // namespace layertracer
