#include "layertracer/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace layertracer {

namespace {

constexpr double kRopeBase = 10000.0;

// Weight scale applied by plant_particle so no block dominates the residual
// stream on its own.
constexpr float kPlantWeightScale = 0.05f;

void check_tokens(const ModelSpec& spec, const std::vector<int>& tokens) {
  if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
  if (static_cast<int>(tokens.size()) > spec.max_seq) {
    throw std::invalid_argument(
        "forward: sequence length " + std::to_string(tokens.size()) +
        " exceeds max_seq " + std::to_string(spec.max_seq));
  }
  for (int id : tokens) {
    if (id < 0 || id >= spec.vocab_size) {
      throw std::invalid_argument("forward: token id " + std::to_string(id) +
                                  " out of range for vocab_size " +
                                  std::to_string(spec.vocab_size));
    }
  }
}

// Rotary position embedding applied in-place to one head slice.
void apply_rope(float* v, int head_dim, int pos) {
  for (int i = 0; i + 1 < head_dim; i += 2) {
    const double theta =
        pos * std::pow(kRopeBase, -double(i) / double(head_dim));
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    const double a = v[i];
    const double b = v[i + 1];
    v[i] = static_cast<float>(a * c - b * s);
    v[i + 1] = static_cast<float>(a * s + b * c);
  }
}

// Causal multi-head softmax attention with RoPE. xn holds the ln1-normalized
// residuals, one vector per position.
std::vector<std::vector<float>> attention_mixer(
    const BlockParams& b, const std::vector<std::vector<float>>& xn,
    int n_heads) {
  const int t_len = static_cast<int>(xn.size());
  const int d = static_cast<int>(xn[0].size());
  const int head_dim = d / n_heads;
  const double scale = 1.0 / std::sqrt(double(head_dim));

  std::vector<std::vector<float>> q(t_len), k(t_len), v(t_len);
  for (int t = 0; t < t_len; ++t) {
    q[t] = matvec(b.wq, xn[t]);
    k[t] = matvec(b.wk, xn[t]);
    v[t] = matvec(b.wv, xn[t]);
    for (int h = 0; h < n_heads; ++h) {
      apply_rope(q[t].data() + h * head_dim, head_dim, t);
      apply_rope(k[t].data() + h * head_dim, head_dim, t);
    }
  }

  std::vector<std::vector<float>> out(t_len);
  std::vector<double> scores;
  for (int t = 0; t < t_len; ++t) {
    std::vector<float> mixed(static_cast<size_t>(d), 0.0f);
    for (int h = 0; h < n_heads; ++h) {
      const int off = h * head_dim;
      scores.assign(static_cast<size_t>(t) + 1, 0.0);
      double max_score = -1e300;
      for (int s = 0; s <= t; ++s) {
        double dot = 0.0;
        for (int i = 0; i < head_dim; ++i) {
          dot += double(q[t][off + i]) * k[s][off + i];
        }
        scores[s] = dot * scale;
        if (scores[s] > max_score) max_score = scores[s];
      }
      double denom = 0.0;
      for (int s = 0; s <= t; ++s) {
        scores[s] = std::exp(scores[s] - max_score);
        denom += scores[s];
      }
      for (int i = 0; i < head_dim; ++i) {
        double acc = 0.0;
        for (int s = 0; s <= t; ++s) acc += scores[s] * v[s][off + i];
        mixed[off + i] = static_cast<float>(acc / denom);
      }
    }
    out[t] = matvec(b.wo, mixed);
  }
  return out;
}

// Single-head unnormalized linear attention: the running key-value outer
// product state S_t = sum_{s<=t} v_s k_s^T is applied to the query.
std::vector<std::vector<float>> linear_mixer(
    const BlockParams& b, const std::vector<std::vector<float>>& xn) {
  const int t_len = static_cast<int>(xn.size());
  const int d = static_cast<int>(xn[0].size());

  std::vector<double> state(static_cast<size_t>(d) * d, 0.0);  // [out][in]
  std::vector<std::vector<float>> out(t_len);
  for (int t = 0; t < t_len; ++t) {
    const std::vector<float> q = matvec(b.wq, xn[t]);
    const std::vector<float> k = matvec(b.wk, xn[t]);
    const std::vector<float> v = matvec(b.wv, xn[t]);
    for (int i = 0; i < d; ++i) {
      const double vi = v[i];
      double* srow = state.data() + static_cast<size_t>(i) * d;
      for (int j = 0; j < d; ++j) srow[j] += vi * k[j];
    }
    std::vector<float> mixed(static_cast<size_t>(d));
    for (int i = 0; i < d; ++i) {
      const double* srow = state.data() + static_cast<size_t>(i) * d;
      double acc = 0.0;
      for (int j = 0; j < d; ++j) acc += srow[j] * q[j];
      mixed[i] = static_cast<float>(acc);
    }
    out[t] = matvec(b.wo, mixed);
  }
  return out;
}

std::vector<float> feed_forward(const BlockParams& b,
                                std::span<const float> x) {
  std::vector<float> h = matvec(b.ff_w1, x);
  for (float& v : h) {
    const double z = v;
    v = static_cast<float>(z / (1.0 + std::exp(-z)));  // SiLU
  }
  return matvec(b.ff_w2, h);
}

// Zero the masked channel subset, then add noise to every channel, at every
// position of the targeted layer. Mask and noise come from one substream
// derived from (seed, layer), so the interference is a pure function of the
// perturbation parameters.
void apply_perturbation(std::vector<std::vector<float>>& mix,
                        const Perturbation& pert, int d_model) {
  RngStream stream(mix64(pert.seed, static_cast<uint64_t>(pert.layer)));

  const int n_masked = static_cast<int>(pert.mask_fraction * d_model);
  std::vector<int> channels(static_cast<size_t>(d_model));
  std::iota(channels.begin(), channels.end(), 0);
  for (int i = 0; i < n_masked; ++i) {
    const int j =
        i + static_cast<int>(stream.uniform_index(uint64_t(d_model - i)));
    std::swap(channels[i], channels[j]);
  }

  for (auto& m : mix) {
    for (int i = 0; i < n_masked; ++i) m[channels[i]] = 0.0f;
  }
  if (pert.noise_std > 0.0) {
    for (auto& m : mix) {
      for (int c = 0; c < d_model; ++c) {
        m[c] = static_cast<float>(m[c] + stream.normal(pert.noise_std));
      }
    }
  }
}

// Runs blocks 1..upto over the full sequence. Returns the residual stream at
// the final position; optionally records it after every block.
std::vector<float> run_blocks(const LayeredModel& model,
                              const std::vector<int>& tokens, int upto,
                              const Perturbation* pert,
                              std::vector<CapturedState>* capture_out) {
  const ModelSpec& spec = model.spec;
  const int t_len = static_cast<int>(tokens.size());
  const int d = spec.d_model;

  std::vector<std::vector<float>> x(static_cast<size_t>(t_len));
  for (int t = 0; t < t_len; ++t) {
    const float* row = model.embedding.row(tokens[t]);
    x[t].assign(row, row + d);
  }

  std::vector<std::vector<float>> xn(static_cast<size_t>(t_len));
  for (int l = 1; l <= upto; ++l) {
    const BlockParams& b = model.blocks[l - 1];

    for (int t = 0; t < t_len; ++t) {
      xn[t] = rms_norm(x[t], b.ln1_gain, kNormEps);
    }
    std::vector<std::vector<float>> mix =
        b.kind == LayerKind::Attention ? attention_mixer(b, xn, spec.n_heads)
                                       : linear_mixer(b, xn);
    for (int t = 0; t < t_len; ++t) {
      for (int c = 0; c < d; ++c) mix[t][c] += b.out_bias[c];
    }
    if (pert != nullptr && pert->layer == l) {
      apply_perturbation(mix, *pert, d);
    }
    for (int t = 0; t < t_len; ++t) {
      for (int c = 0; c < d; ++c) x[t][c] += mix[t][c];
    }

    for (int t = 0; t < t_len; ++t) {
      const std::vector<float> yn = rms_norm(x[t], b.ln2_gain, kNormEps);
      const std::vector<float> f = feed_forward(b, yn);
      for (int c = 0; c < d; ++c) x[t][c] += f[c];
    }

    if (capture_out != nullptr) {
      capture_out->push_back(CapturedState{l, x[t_len - 1]});
    }
  }
  return x[t_len - 1];
}

void init_matrix(Matrix& m, int rows, int cols, RngStream& rng, double bound) {
  m = Matrix(rows, cols);
  for (float& v : m.values) {
    v = static_cast<float>(rng.uniform_range(-bound, bound));
  }
}

}  // namespace

std::string arch_name(Arch arch) {
  switch (arch) {
    case Arch::DecoderAttention: return "decoder-attention";
    case Arch::LinearAttention: return "linear-attention";
    case Arch::HybridSequence: return "hybrid-sequence";
  }
  return "unknown";
}

std::optional<Arch> arch_from_name(std::string_view name) {
  if (name == "decoder-attention" || name == "decoder") {
    return Arch::DecoderAttention;
  }
  if (name == "linear-attention" || name == "linear") {
    return Arch::LinearAttention;
  }
  if (name == "hybrid-sequence" || name == "hybrid") {
    return Arch::HybridSequence;
  }
  return std::nullopt;
}

void ModelSpec::validate() const {
  if (n_layers < 1) throw std::invalid_argument("ModelSpec: n_layers must be >= 1");
  if (d_model < 1) throw std::invalid_argument("ModelSpec: d_model must be >= 1");
  if (n_heads < 1) throw std::invalid_argument("ModelSpec: n_heads must be >= 1");
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("ModelSpec: d_model (" +
                                std::to_string(d_model) +
                                ") not divisible by n_heads (" +
                                std::to_string(n_heads) + ")");
  }
  if (d_ff < 1) throw std::invalid_argument("ModelSpec: d_ff must be >= 1");
  if (vocab_size < 2) {
    throw std::invalid_argument("ModelSpec: vocab_size must be >= 2");
  }
  if (max_seq < 1) throw std::invalid_argument("ModelSpec: max_seq must be >= 1");
  if (arch == Arch::HybridSequence) {
    if (static_cast<int>(layer_kinds.size()) != n_layers) {
      throw std::invalid_argument(
          "ModelSpec: layer_kinds length " +
          std::to_string(layer_kinds.size()) + " != n_layers " +
          std::to_string(n_layers));
    }
  }
}

LayerKind ModelSpec::kind_of(int layer) const {
  switch (arch) {
    case Arch::DecoderAttention: return LayerKind::Attention;
    case Arch::LinearAttention: return LayerKind::Linear;
    case Arch::HybridSequence: return layer_kinds[layer - 1];
  }
  return LayerKind::Attention;
}

void Perturbation::validate() const {
  if (mask_fraction < 0.0 || mask_fraction > 1.0) {
    throw std::invalid_argument("Perturbation: mask_fraction must be in [0,1]");
  }
  if (noise_std < 0.0) {
    throw std::invalid_argument("Perturbation: noise_std must be >= 0");
  }
}

std::vector<int> byte_tokens(std::string_view text) {
  std::vector<int> tokens;
  tokens.reserve(text.size());
  for (char c : text) tokens.push_back(static_cast<unsigned char>(c));
  return tokens;
}

LayeredModel init_random(const ModelSpec& spec, uint64_t seed) {
  spec.validate();
  RngStream rng(seed);
  const int d = spec.d_model;
  const double proj_bound = std::sqrt(3.0 / d);
  const double ff2_bound = std::sqrt(3.0 / spec.d_ff);

  LayeredModel model;
  model.spec = spec;
  init_matrix(model.embedding, spec.vocab_size, d, rng, 0.5);
  model.blocks.resize(static_cast<size_t>(spec.n_layers));
  for (int l = 1; l <= spec.n_layers; ++l) {
    BlockParams& b = model.blocks[l - 1];
    b.kind = spec.kind_of(l);
    b.ln1_gain.assign(static_cast<size_t>(d), 1.0f);
    init_matrix(b.wq, d, d, rng, proj_bound);
    init_matrix(b.wk, d, d, rng, proj_bound);
    init_matrix(b.wv, d, d, rng, proj_bound);
    init_matrix(b.wo, d, d, rng, proj_bound);
    b.out_bias.assign(static_cast<size_t>(d), 0.0f);
    b.ln2_gain.assign(static_cast<size_t>(d), 1.0f);
    init_matrix(b.ff_w1, spec.d_ff, d, rng, proj_bound);
    init_matrix(b.ff_w2, d, spec.d_ff, rng, ff2_bound);
  }
  model.final_norm_gain.assign(static_cast<size_t>(d), 1.0f);
  init_matrix(model.unembedding, spec.vocab_size, d, rng, 0.5);
  return model;
}

LayeredModel plant_particle(const ModelSpec& spec, int k, int target,
                            double strength, uint64_t seed) {
  spec.validate();
  if (k < 1 || k > spec.n_layers) {
    throw std::invalid_argument("plant_particle: layer k " + std::to_string(k) +
                                " out of range 1.." +
                                std::to_string(spec.n_layers));
  }
  if (target < 0 || target >= spec.vocab_size) {
    throw std::invalid_argument("plant_particle: target token " +
                                std::to_string(target) +
                                " out of range for vocab_size " +
                                std::to_string(spec.vocab_size));
  }
  if (strength < 0.0) {
    throw std::invalid_argument("plant_particle: strength must be >= 0");
  }

  LayeredModel model = init_random(spec, seed);
  if (strength == 0.0) return model;  // no planted structure

  for (BlockParams& b : model.blocks) {
    for (Matrix* m : {&b.wq, &b.wk, &b.wv, &b.wo, &b.ff_w1, &b.ff_w2}) {
      for (float& v : m->values) v *= kPlantWeightScale;
    }
  }

  const float* u = model.unembedding.row(target);
  double norm_sq = 0.0;
  for (int c = 0; c < spec.d_model; ++c) norm_sq += double(u[c]) * u[c];
  const double inv_norm = 1.0 / std::sqrt(norm_sq);
  std::vector<float>& bias = model.blocks[k - 1].out_bias;
  for (int c = 0; c < spec.d_model; ++c) {
    bias[c] = static_cast<float>(strength * u[c] * inv_norm);
  }
  return model;
}

ForwardResult forward_with(const LayeredModel& model,
                           const std::vector<int>& tokens, bool capture,
                           const Perturbation* pert) {
  check_tokens(model.spec, tokens);
  if (pert != nullptr) {
    pert->validate();
    if (pert->layer < 1 || pert->layer > model.spec.n_layers) {
      throw std::invalid_argument("forward_perturbed: layer " +
                                  std::to_string(pert->layer) +
                                  " out of range 1.." +
                                  std::to_string(model.spec.n_layers));
    }
  }
  ForwardResult result;
  std::vector<CapturedState>* cap = capture ? &result.captured : nullptr;
  const std::vector<float> h =
      run_blocks(model, tokens, model.spec.n_layers, pert, cap);
  result.dist = project_hidden(model, h);
  return result;
}

ForwardResult forward(const LayeredModel& model, const std::vector<int>& tokens,
                      bool capture) {
  return forward_with(model, tokens, capture, nullptr);
}

CapturedState forward_until(const LayeredModel& model,
                            const std::vector<int>& tokens, int layer) {
  check_tokens(model.spec, tokens);
  if (layer < 1 || layer > model.spec.n_layers) {
    throw std::invalid_argument(
        "forward_until: layer " + std::to_string(layer) + " out of range 1.." +
        std::to_string(model.spec.n_layers));
  }
  return CapturedState{layer,
                       run_blocks(model, tokens, layer, nullptr, nullptr)};
}

ProbDist forward_perturbed(const LayeredModel& model,
                           const std::vector<int>& tokens,
                           const Perturbation& pert) {
  return forward_with(model, tokens, false, &pert).dist;
}

ProbDist project_hidden(const LayeredModel& model,
                        std::span<const float> hidden) {
  const std::vector<float> normed =
      rms_norm(hidden, model.final_norm_gain, kNormEps);
  const std::vector<double> logits = matvec_d(model.unembedding, normed);
  return softmax(logits);
}

}  // namespace layertracer
