#pragma once

// Shared helpers for the unit and acceptance suites: scratch directories,
// randomized distribution generators, the independent JS oracle, and a
// minimal XML well-formedness checker for the SVG output.

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "layertracer/model.hpp"
#include "layertracer/numerics.hpp"

namespace test_support {

// Unique scratch directory, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static uint64_t counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("layertracer_" + tag + "_" + std::to_string(::getpid()) + "_" +
             std::to_string(++counter));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string file(const std::string& name) const {
    return (path_ / name).string();
  }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
}

// Sorted relative file names below a directory.
inline std::vector<std::string> list_files(const std::string& dir) {
  std::vector<std::string> names;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file()) {
      names.push_back(
          std::filesystem::relative(entry.path(), dir).string());
    }
  }
  std::sort(names.begin(), names.end());
  return names;
}

// Random distribution over n outcomes. When allow_zeros is set, a random
// subset of entries is zeroed (at least one entry stays positive).
inline layertracer::ProbDist random_dist(layertracer::RngStream& rng, size_t n,
                                         bool allow_zeros) {
  layertracer::ProbDist dist;
  dist.probs.resize(n);
  double sum = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double v = rng.uniform();
    if (allow_zeros && rng.uniform() < 0.3) v = 0.0;
    dist.probs[i] = v;
    sum += v;
  }
  if (sum == 0.0) {
    dist.probs[rng.uniform_index(n)] = 1.0;
    sum = 1.0;
  }
  for (double& p : dist.probs) p /= sum;
  return dist;
}

// Independent direct-summation JS oracle, base 2. Deliberately follows a
// different algebraic route (single pass over 2p/(p+q) terms, natural logs)
// than the shipped implementation.
inline double js_oracle(const layertracer::ProbDist& p,
                        const layertracer::ProbDist& q) {
  const double ln2 = std::log(2.0);
  double sum = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    const double pi = p[i];
    const double qi = q[i];
    const double denom = pi + qi;
    if (pi > 0.0) sum += 0.5 * pi * std::log(2.0 * pi / denom) / ln2;
    if (qi > 0.0) sum += 0.5 * qi * std::log(2.0 * qi / denom) / ln2;
  }
  return sum;
}

// Minimal XML well-formedness check: declaration/comment handling, tag
// balance, quoted attributes, sane entity references, single root.
inline bool xml_well_formed(const std::string& text) {
  std::vector<std::string> stack;
  size_t i = 0;
  const size_t n = text.size();
  int roots = 0;
  bool seen_root = false;

  const auto name_char = [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' ||
           c == '-' || c == ':' || c == '.';
  };

  while (i < n) {
    const char c = text[i];
    if (c == '<') {
      if (i + 1 >= n) return false;
      if (text.compare(i, 4, "<!--") == 0) {
        const size_t end = text.find("-->", i + 4);
        if (end == std::string::npos) return false;
        i = end + 3;
        continue;
      }
      if (text[i + 1] == '?') {
        const size_t end = text.find("?>", i + 2);
        if (end == std::string::npos) return false;
        i = end + 2;
        continue;
      }
      const bool closing = text[i + 1] == '/';
      size_t j = i + (closing ? 2 : 1);
      const size_t name_start = j;
      while (j < n && name_char(text[j])) ++j;
      if (j == name_start) return false;
      const std::string name = text.substr(name_start, j - name_start);

      if (closing) {
        while (j < n && std::isspace(static_cast<unsigned char>(text[j]))) ++j;
        if (j >= n || text[j] != '>') return false;
        if (stack.empty() || stack.back() != name) return false;
        stack.pop_back();
        i = j + 1;
        continue;
      }

      // Attributes: name="value" pairs until '>' or '/>'.
      bool self_closing = false;
      while (j < n) {
        while (j < n && std::isspace(static_cast<unsigned char>(text[j]))) ++j;
        if (j >= n) return false;
        if (text[j] == '>') break;
        if (text[j] == '/') {
          if (j + 1 >= n || text[j + 1] != '>') return false;
          self_closing = true;
          ++j;
          break;
        }
        const size_t attr_start = j;
        while (j < n && name_char(text[j])) ++j;
        if (j == attr_start) return false;
        if (j >= n || text[j] != '=') return false;
        ++j;
        if (j >= n || (text[j] != '"' && text[j] != '\'')) return false;
        const char quote = text[j];
        ++j;
        while (j < n && text[j] != quote) {
          if (text[j] == '<') return false;
          ++j;
        }
        if (j >= n) return false;
        ++j;
      }
      if (j >= n || text[j] != '>') return false;
      if (stack.empty()) {
        if (seen_root) return false;  // second root element
        seen_root = true;
        ++roots;
      }
      if (!self_closing) stack.push_back(name);
      i = j + 1;
      continue;
    }
    if (c == '>') return false;
    if (c == '&') {
      size_t j = i + 1;
      while (j < n && j < i + 8 && text[j] != ';') ++j;
      if (j >= n || text[j] != ';') return false;
      i = j + 1;
      continue;
    }
    if (!stack.empty() || std::isspace(static_cast<unsigned char>(c))) {
      ++i;
      continue;
    }
    return false;  // non-space text outside the root element
  }
  return stack.empty() && roots == 1;
}

// The 12-layer reference spec used across the planted-recovery checks.
inline layertracer::ModelSpec reference_spec(layertracer::Arch arch) {
  layertracer::ModelSpec spec;
  spec.arch = arch;
  spec.n_layers = 12;
  spec.d_model = 64;
  spec.n_heads = 4;
  spec.d_ff = 128;
  spec.vocab_size = 256;
  spec.max_seq = 128;
  if (arch == layertracer::Arch::HybridSequence) {
    for (int l = 0; l < spec.n_layers; ++l) {
      spec.layer_kinds.push_back(l % 4 == 3 ? layertracer::LayerKind::Linear
                                            : layertracer::LayerKind::Attention);
    }
  }
  return spec;
}

inline int run_cli(const std::string& args) {
  const std::string cmd = std::string(LAYERTRACER_CLI_PATH) + " " + args;
  const int status = std::system(cmd.c_str());
  if (status == -1) return -1;
  return WEXITSTATUS(status);
}

}  // namespace test_support
