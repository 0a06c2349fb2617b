#pragma once

// Dense float32 kernels and the seeded RNG the reference models and metrics
// are built on. Storage is 32-bit; accumulation runs in double so softmax and
// the divergence sums stay stable over full-vocabulary distributions.
//
// Everything here is a pure function of its inputs except RngStream, which
// mutates only its own state. A single RngStream must not be shared across
// concurrent callers.

#include <cstdint>
#include <span>
#include <vector>

namespace layertracer {

// Row-major float32 matrix. values.size() == rows * cols, entries finite.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<float> values;

  Matrix() = default;
  Matrix(int r, int c)
      : rows(r), cols(c), values(static_cast<size_t>(r) * c, 0.0f) {}

  float& at(int r, int c) { return values[static_cast<size_t>(r) * cols + c]; }
  float at(int r, int c) const {
    return values[static_cast<size_t>(r) * cols + c];
  }
  float* row(int r) { return values.data() + static_cast<size_t>(r) * cols; }
  const float* row(int r) const {
    return values.data() + static_cast<size_t>(r) * cols;
  }
};

// Probability distribution over a vocabulary: entries >= 0, sum 1 within 1e-6.
struct ProbDist {
  std::vector<double> probs;

  size_t size() const { return probs.size(); }
  double operator[](size_t i) const { return probs[i]; }

  // Smallest index on ties.
  int argmax() const;
  bool valid(double tol = 1e-6) const;
};

// Standard product; throws std::invalid_argument on dimension mismatch with
// the offending dims in the message. Accumulates in double.
Matrix matmul(const Matrix& a, const Matrix& b);

// y = m * x with x a column vector of length m.cols. Double accumulation,
// float32 result.
std::vector<float> matvec(const Matrix& m, std::span<const float> x);

// Same product kept in double, for logit computation ahead of softmax.
std::vector<double> matvec_d(const Matrix& m, std::span<const float> x);

// Numerically stable softmax (max is subtracted before exponentiation).
// Rejects empty input and non-finite entries.
ProbDist softmax(std::span<const double> logits);

// out[i] = gain[i] * x[i] / sqrt(mean(x^2) + eps). Lengths must match,
// eps >= 0. An all-zero x with eps == 0 maps to all zeros rather than NaN.
std::vector<float> rms_norm(std::span<const float> x,
                            std::span<const float> gain, double eps);

uint64_t splitmix64(uint64_t& state);

// Stateless mix of (seed, salt) into a substream seed. Used to derive
// per-layer and per-prompt streams from a root seed.
uint64_t mix64(uint64_t seed, uint64_t salt);

// xoshiro256** seeded through splitmix64. Integer output and uniform() are
// bit-identical across platforms; normal() goes through libm (Box-Muller)
// and is exact per platform, reproducible everywhere in practice.
class RngStream {
 public:
  explicit RngStream(uint64_t seed);

  uint64_t next_u64();

  // Uniform double in [0, 1).
  double uniform();

  // Uniform in [lo, hi).
  double uniform_range(double lo, double hi);

  // Unbiased integer in [0, n), n > 0. Rejection sampled.
  uint64_t uniform_index(uint64_t n);

  // N(0, stddev^2) via Box-Muller; consumes two uniforms per draw.
  double normal(double stddev);

  uint64_t seed() const { return seed_; }

 private:
  uint64_t seed_ = 0;
  uint64_t state_[4] = {};
};

// n uniform draws in [0,1); advances the stream.
std::vector<double> rng_uniform(RngStream& stream, size_t n);

}  // namespace layertracer
