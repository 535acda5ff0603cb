#include "dystream/tensor.hpp"

#include <cmath>
#include <sstream>

namespace dystream {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(std::vector<std::size_t> shape_, std::vector<double> values_)
    : shape(std::move(shape_)), values(std::move(values_)) {
  if (shape_product(shape) != values.size())
    throw ShapeError("tensor shape " + shape_string(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
}

Tensor Tensor::zeros(std::size_t rows, std::size_t cols) { return filled(rows, cols, 0.0); }

Tensor Tensor::filled(std::size_t rows, std::size_t cols, double value) {
  return Tensor({rows, cols}, std::vector<double>(rows * cols, value));
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  std::size_t cols = rows.size() ? rows.begin()->size() : 0;
  std::vector<double> v;
  v.reserve(rows.size() * cols);
  for (auto& r : rows) {
    if (r.size() != cols) throw ShapeError("ragged rows");
    v.insert(v.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), cols}, std::move(v));
}

std::size_t Tensor::rows() const {
  if (shape.empty()) return 1;
  return shape.size() == 1 ? 1 : shape[0];
}

std::size_t Tensor::cols() const {
  if (shape.empty()) return 1;
  return shape.back();
}

Tensor Tensor::slice_rows(std::size_t begin, std::size_t end) const {
  if (begin > end || end > rows()) throw ShapeError("row slice out of range");
  const std::size_t c = cols();
  return Tensor({end - begin, c},
                std::vector<double>(values.begin() + begin * c, values.begin() + end * c));
}

bool Tensor::all_finite() const {
  for (double v : values)
    if (!std::isfinite(v)) return false;
  return true;
}

AttentionMask::AttentionMask(std::size_t rows, std::size_t cols, std::vector<unsigned char> allowed)
    : rows_(rows), cols_(cols), allowed_(std::move(allowed)) {
  if (allowed_.size() != rows_ * cols_) throw ShapeError("attention mask size mismatch");
}

AttentionMask AttentionMask::lookahead(std::size_t frames, std::optional<std::size_t> lookahead) {
  return banded(frames, lookahead, std::nullopt);
}

AttentionMask AttentionMask::banded(std::size_t frames, std::optional<std::size_t> lookahead,
                                    std::optional<std::size_t> past) {
  std::vector<unsigned char> a(frames * frames, 0);
  for (std::size_t i = 0; i < frames; ++i) {
    for (std::size_t j = 0; j < frames; ++j) {
      bool ok = !lookahead || j <= i + *lookahead;
      if (past && j + *past < i) ok = false;
      a[i * frames + j] = ok ? 1 : 0;
    }
  }
  return AttentionMask(frames, frames, std::move(a));
}

std::size_t AttentionMask::count_allowed() const {
  std::size_t n = 0;
  for (auto v : allowed_) n += v != 0;
  return n;
}

void AttentionMask::require_nonempty_rows() const {
  for (std::size_t i = 0; i < rows_; ++i) {
    bool any = false;
    for (std::size_t j = 0; j < cols_ && !any; ++j) any = allowed(i, j);
    if (!any) throw ShapeError("attention mask row " + std::to_string(i) + " has no allowed key");
  }
}

}  // namespace dystream
