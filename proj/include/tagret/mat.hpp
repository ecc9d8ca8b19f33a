// Copyright (c) 2026 tagret authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major double matrix, deterministic RNG recipes, and the
// little-endian binary encoding shared by every on-disk artifact.

#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace tagret {

// Error taxonomy. The CLI maps these onto its exit-code contract.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), d_(rows * cols, fill) {}

  static Mat from(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return d_.size(); }
  bool empty() const { return d_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return d_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return d_[r * cols_ + c]; }
  double& at(std::size_t i) { return d_[i]; }
  double at(std::size_t i) const { return d_[i]; }

  double* data() { return d_.data(); }
  const double* data() const { return d_.data(); }

  void fill(double v) { d_.assign(d_.size(), v); }
  void resize(std::size_t rows, std::size_t cols, double fill = 0.0) {
    rows_ = rows;
    cols_ = cols;
    d_.assign(rows * cols, fill);
  }

  bool same_shape(const Mat& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> d_;
};

// Plain (non-autodiff) kernels used by the optimizer, evaluation, and tests.
Mat matmul(const Mat& a, const Mat& b);
Mat transpose(const Mat& a);
double dot(const Mat& a, const Mat& b);
double l2norm(const Mat& a);
double max_abs_diff(const Mat& a, const Mat& b);
bool all_finite(const Mat& a);

// ---------------------------------------------------------------------------
// Deterministic randomness.
//
// Everything random in this codebase flows through the two recipes below so
// that outputs are reproducible bit-for-bit and independently recomputable:
//   * streams: std::mt19937_64 seeded with a single uint64
//   * integers in [0, n): next() % n
//   * doubles in [0, 1):  (next() >> 11) * 2^-53
//   * normals: Box-Muller on two fresh uniform draws per call, no caching
// Seeds for sub-streams are derived with mix_seed (splitmix64 over a ^ h(b)).
// ---------------------------------------------------------------------------

uint64_t splitmix64(uint64_t x);
uint64_t mix_seed(uint64_t a, uint64_t b);

class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}
  uint64_t next() { return gen_(); }
  uint64_t below(uint64_t n);  // n must be > 0
  double uniform();            // [0, 1)
  double uniform(double lo, double hi);
  double normal();             // standard normal, Box-Muller

 private:
  std::mt19937_64 gen_;
};

// Fills with iid N(0, stddev^2) draws in row-major order.
void fill_normal(Mat& m, Rng& rng, double stddev);

// Fills with a random column-orthonormal matrix (Gram-Schmidt over Gaussian
// draws, scaled by `scale`). Requires cols <= rows. Angle-preserving, so
// cosines computed after the projection equal cosines before it.
void fill_orthogonal(Mat& m, Rng& rng, double scale = 1.0);

// ---------------------------------------------------------------------------
// Little-endian binary encoding + FNV-1a checksums (sidecar format).
// ---------------------------------------------------------------------------

void append_u32le(std::string& out, uint32_t v);
void append_u64le(std::string& out, uint64_t v);
void append_f32le(std::string& out, float v);
void append_f64le(std::string& out, double v);

uint32_t read_u32le(const std::string& buf, std::size_t off);
uint64_t read_u64le(const std::string& buf, std::size_t off);
float read_f32le(const std::string& buf, std::size_t off);
double read_f64le(const std::string& buf, std::size_t off);

uint64_t fnv1a64(const void* data, std::size_t n);
std::string fnv1a64_hex(const std::string& bytes);

// Whole-file helpers. read_file throws DataError when the path is missing.
void write_file(const std::string& path, const std::string& bytes);
std::string read_file(const std::string& path);

}  // namespace tagret
