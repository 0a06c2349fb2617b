#include "layertracer/numerics.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace layertracer {

int ProbDist::argmax() const {
  int best = 0;
  for (size_t i = 1; i < probs.size(); ++i) {
    if (probs[i] > probs[best]) best = static_cast<int>(i);
  }
  return best;
}

bool ProbDist::valid(double tol) const {
  if (probs.empty()) return false;
  double sum = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0) || !std::isfinite(p)) return false;
    sum += p;
  }
  return std::abs(sum - 1.0) <= tol;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) {
    throw std::invalid_argument(
        "matmul: dimension mismatch (" + std::to_string(a.rows) + "x" +
        std::to_string(a.cols) + ") * (" + std::to_string(b.rows) + "x" +
        std::to_string(b.cols) + ")");
  }
  Matrix out(a.rows, b.cols);
  std::vector<double> acc(static_cast<size_t>(b.cols));
  for (int i = 0; i < a.rows; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int k = 0; k < a.cols; ++k) {
      const double av = a.at(i, k);
      const float* brow = b.row(k);
      for (int j = 0; j < b.cols; ++j) acc[j] += av * brow[j];
    }
    float* orow = out.row(i);
    for (int j = 0; j < b.cols; ++j) orow[j] = static_cast<float>(acc[j]);
  }
  return out;
}

std::vector<float> matvec(const Matrix& m, std::span<const float> x) {
  if (static_cast<size_t>(m.cols) != x.size()) {
    throw std::invalid_argument("matvec: matrix cols " +
                                std::to_string(m.cols) + " != vector length " +
                                std::to_string(x.size()));
  }
  std::vector<float> y(static_cast<size_t>(m.rows));
  for (int i = 0; i < m.rows; ++i) {
    const float* row = m.row(i);
    double acc = 0.0;
    for (int j = 0; j < m.cols; ++j) acc += double(row[j]) * x[j];
    y[i] = static_cast<float>(acc);
  }
  return y;
}

std::vector<double> matvec_d(const Matrix& m, std::span<const float> x) {
  if (static_cast<size_t>(m.cols) != x.size()) {
    throw std::invalid_argument("matvec_d: matrix cols " +
                                std::to_string(m.cols) + " != vector length " +
                                std::to_string(x.size()));
  }
  std::vector<double> y(static_cast<size_t>(m.rows));
  for (int i = 0; i < m.rows; ++i) {
    const float* row = m.row(i);
    double acc = 0.0;
    for (int j = 0; j < m.cols; ++j) acc += double(row[j]) * x[j];
    y[i] = acc;
  }
  return y;
}

ProbDist softmax(std::span<const double> logits) {
  if (logits.empty()) throw std::invalid_argument("softmax: empty input");
  double max_logit = -std::numeric_limits<double>::infinity();
  for (double v : logits) {
    if (!std::isfinite(v)) {
      throw std::invalid_argument("softmax: non-finite logit");
    }
    if (v > max_logit) max_logit = v;
  }
  ProbDist out;
  out.probs.resize(logits.size());
  double sum = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    const double e = std::exp(logits[i] - max_logit);
    out.probs[i] = e;
    sum += e;
  }
  for (double& p : out.probs) p /= sum;
  return out;
}

std::vector<float> rms_norm(std::span<const float> x,
                            std::span<const float> gain, double eps) {
  if (x.size() != gain.size()) {
    throw std::invalid_argument("rms_norm: length mismatch " +
                                std::to_string(x.size()) + " vs " +
                                std::to_string(gain.size()));
  }
  if (eps < 0.0) throw std::invalid_argument("rms_norm: eps must be >= 0");
  double mean_sq = 0.0;
  for (float v : x) mean_sq += double(v) * v;
  mean_sq /= static_cast<double>(x.size());
  std::vector<float> out(x.size());
  const double denom_sq = mean_sq + eps;
  if (denom_sq == 0.0) return out;  // zero vector stays zero
  const double inv = 1.0 / std::sqrt(denom_sq);
  for (size_t i = 0; i < x.size(); ++i) {
    out[i] = static_cast<float>(double(gain[i]) * x[i] * inv);
  }
  return out;
}

uint64_t splitmix64(uint64_t& state) {
  state += 0x9E3779B97F4A7C15ull;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

uint64_t mix64(uint64_t seed, uint64_t salt) {
  uint64_t s = seed ^ (salt * 0x9E3779B97F4A7C15ull + 0xD1B54A32D192ED03ull);
  return splitmix64(s);
}

namespace {
inline uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
}  // namespace

RngStream::RngStream(uint64_t seed) : seed_(seed) {
  uint64_t x = seed;
  for (auto& word : state_) word = splitmix64(x);
}

uint64_t RngStream::next_u64() {
  const uint64_t result = rotl(state_[1] * 5, 7) * 9;
  const uint64_t t = state_[1] << 17;
  state_[2] ^= state_[0];
  state_[3] ^= state_[1];
  state_[1] ^= state_[2];
  state_[0] ^= state_[3];
  state_[2] ^= t;
  state_[3] = rotl(state_[3], 45);
  return result;
}

double RngStream::uniform() { return (next_u64() >> 11) * 0x1.0p-53; }

double RngStream::uniform_range(double lo, double hi) {
  return lo + (hi - lo) * uniform();
}

uint64_t RngStream::uniform_index(uint64_t n) {
  if (n == 0) throw std::invalid_argument("uniform_index: n must be > 0");
  const uint64_t threshold = (0 - n) % n;  // 2^64 mod n
  for (;;) {
    const uint64_t r = next_u64();
    if (r >= threshold) return r % n;
  }
}

double RngStream::normal(double stddev) {
  const double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  return stddev * r * std::cos(2.0 * std::numbers::pi * u2);
}

std::vector<double> rng_uniform(RngStream& stream, size_t n) {
  std::vector<double> out(n);
  for (double& v : out) v = stream.uniform();
  return out;
}

}  // namespace layertracer
