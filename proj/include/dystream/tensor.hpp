#pragma once

#include <cstddef>
#include <initializer_list>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dystream {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Dense row-major array of doubles. Most of the engine works on rank-2
// tensors (frames x features); rank is kept general for checkpoints.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> values;
  bool requires_grad = false;

  Tensor() = default;
  Tensor(std::vector<std::size_t> shape_, std::vector<double> values_);
  static Tensor zeros(std::size_t rows, std::size_t cols);
  static Tensor filled(std::size_t rows, std::size_t cols, double value);
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t numel() const { return values.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  double& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }

  std::span<double> row(std::size_t r) { return {values.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {values.data() + r * cols(), cols()}; }

  // Rows [begin, end) as a new tensor.
  Tensor slice_rows(std::size_t begin, std::size_t end) const;

  bool all_finite() const;
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape && a.values == b.values;
  }
};

std::size_t shape_product(const std::vector<std::size_t>& shape);
std::string shape_string(const std::vector<std::size_t>& shape);

// Boolean attention permission matrix; allowed(i, j) lets query i read key j.
class AttentionMask {
 public:
  AttentionMask(std::size_t rows, std::size_t cols, std::vector<unsigned char> allowed);

  // allowed(i, j) iff j <= i + lookahead; nullopt lookahead means unbounded.
  static AttentionMask lookahead(std::size_t frames, std::optional<std::size_t> lookahead);
  // Same, additionally restricted to j >= i - past when past is set.
  static AttentionMask banded(std::size_t frames, std::optional<std::size_t> lookahead,
                              std::optional<std::size_t> past);
  static AttentionMask causal(std::size_t frames) { return lookahead(frames, 0); }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool allowed(std::size_t i, std::size_t j) const { return allowed_[i * cols_ + j] != 0; }
  std::size_t count_allowed() const;
  // Throws if some row permits no key at all.
  void require_nonempty_rows() const;

 private:
  std::size_t rows_;
  std::size_t cols_;
  std::vector<unsigned char> allowed_;
};

}  // namespace dystream
