// Copyright (c) 2026 tagret authors
// SPDX-License-Identifier: Apache-2.0

#include "tagret/mat.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace tagret {

Mat Mat::from(std::initializer_list<std::initializer_list<double>> rows) {
  Mat m(rows.size(), rows.begin()->size());
  std::size_t r = 0;
  for (const auto& row : rows) {
    if (row.size() != m.cols()) throw ConfigError("Mat::from: ragged initializer");
    std::size_t c = 0;
    for (double v : row) m(r, c++) = v;
    ++r;
  }
  return m;
}

Mat matmul(const Mat& a, const Mat& b) {
  if (a.cols() != b.rows()) throw NumericError("matmul: inner dimension mismatch");
  Mat c(a.rows(), b.cols(), 0.0);
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = a.data() + i * k;
    double* crow = c.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

Mat transpose(const Mat& a) {
  Mat t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

double dot(const Mat& a, const Mat& b) {
  if (a.size() != b.size()) throw NumericError("dot: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.at(i) * b.at(i);
  return s;
}

double l2norm(const Mat& a) { return std::sqrt(dot(a, a)); }

double max_abs_diff(const Mat& a, const Mat& b) {
  if (!a.same_shape(b)) throw NumericError("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a.at(i) - b.at(i)));
  return m;
}

bool all_finite(const Mat& a) {
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!std::isfinite(a.at(i))) return false;
  return true;
}

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t mix_seed(uint64_t a, uint64_t b) { return splitmix64(a ^ splitmix64(b)); }

uint64_t Rng::below(uint64_t n) {
  if (n == 0) throw NumericError("Rng::below: n must be > 0");
  return next() % n;
}

double Rng::uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  double u1 = uniform();
  const double u2 = uniform();
  if (u1 < 1e-300) u1 = 1e-300;
  constexpr double two_pi = 6.283185307179586476925286766559;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
}

void fill_normal(Mat& m, Rng& rng, double stddev) {
  for (std::size_t i = 0; i < m.size(); ++i) m.at(i) = stddev * rng.normal();
}

void fill_orthogonal(Mat& m, Rng& rng, double scale) {
  const std::size_t rows = m.rows(), cols = m.cols();
  if (cols > rows) throw ConfigError("fill_orthogonal: needs cols <= rows");
  for (std::size_t c = 0; c < cols; ++c) {
    while (true) {
      for (std::size_t r = 0; r < rows; ++r) m(r, c) = rng.normal();
      // modified Gram-Schmidt against the previous columns
      for (std::size_t p = 0; p < c; ++p) {
        double proj = 0.0;
        for (std::size_t r = 0; r < rows; ++r) proj += m(r, c) * m(r, p);
        for (std::size_t r = 0; r < rows; ++r) m(r, c) -= proj * m(r, p);
      }
      double norm = 0.0;
      for (std::size_t r = 0; r < rows; ++r) norm += m(r, c) * m(r, c);
      norm = std::sqrt(norm);
      if (norm > 1e-8) {
        for (std::size_t r = 0; r < rows; ++r) m(r, c) /= norm;
        break;
      }
    }
  }
  if (scale != 1.0)
    for (std::size_t i = 0; i < m.size(); ++i) m.at(i) *= scale;
}

void append_u32le(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_u64le(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_f32le(std::string& out, float v) { append_u32le(out, std::bit_cast<uint32_t>(v)); }

void append_f64le(std::string& out, double v) { append_u64le(out, std::bit_cast<uint64_t>(v)); }

uint32_t read_u32le(const std::string& buf, std::size_t off) {
  if (off + 4 > buf.size()) throw DataError("read_u32le: truncated buffer");
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
  return v;
}

uint64_t read_u64le(const std::string& buf, std::size_t off) {
  if (off + 8 > buf.size()) throw DataError("read_u64le: truncated buffer");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
  return v;
}

float read_f32le(const std::string& buf, std::size_t off) {
  return std::bit_cast<float>(read_u32le(buf, off));
}

double read_f64le(const std::string& buf, std::size_t off) {
  return std::bit_cast<double>(read_u64le(buf, off));
}

uint64_t fnv1a64(const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string fnv1a64_hex(const std::string& bytes) {
  static const char* digits = "0123456789abcdef";
  const uint64_t h = fnv1a64(bytes.data(), bytes.size());
  std::string s(16, '0');
  for (int i = 0; i < 16; ++i) s[15 - i] = digits[(h >> (4 * i)) & 0xf];
  return s;
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open for write: " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("short write: " + path);
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for read: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace tagret
