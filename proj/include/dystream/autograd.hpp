#pragma once

// Tensor-level reverse-mode differentiation. A Graph is built fresh for each
// forward pass; nodes are appended in evaluation order, so backward is a
// reverse sweep over the node list. A Graph constructed with record=false
// evaluates the same kernels without keeping backward closures.

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dystream/rng.hpp"
#include "dystream/tensor.hpp"

namespace dystream {

struct Parameter {
  std::string name;
  Tensor value;
  std::vector<double> grad;
};

// Named, insertion-ordered parameter collection with stable addresses.
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;

  Parameter& add(const std::string& name, std::vector<std::size_t> shape);
  Parameter& add_normal(const std::string& name, std::size_t rows, std::size_t cols, double stddev,
                        Rng& rng);
  Parameter& add_constant(const std::string& name, std::size_t rows, std::size_t cols,
                          double value);

  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.contains(name); }

  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();
  // Copies values of every same-named parameter; shapes must agree.
  void copy_values_from(const ParamStore& other, const std::string& prefix = "");
  void round_to_float();

 private:
  std::deque<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

class Graph;

class Var {
 public:
  Var() = default;
  Var(Graph* g, int id) : graph_(g), id_(id) {}

  bool valid() const { return graph_ != nullptr; }
  Graph& graph() const { return *graph_; }
  int id() const { return id_; }
  std::size_t rows() const;
  std::size_t cols() const;
  std::span<const double> value() const;
  Tensor tensor() const;
  double item() const;
  std::span<const double> grad() const;

 private:
  Graph* graph_ = nullptr;
  int id_ = -1;
};

class Graph {
 public:
  struct Node {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> value;
    std::vector<double> grad;
    std::function<void()> backward;
    Parameter* param = nullptr;
    bool needs_grad = false;
  };

  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }

  Var constant(const Tensor& t);
  Var constant(std::size_t rows, std::size_t cols, std::vector<double> values);
  Var param(Parameter& p);

  // Accumulates d(loss)/d(param) into every reachable Parameter::grad.
  void backward(Var loss);

  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return nodes_.size(); }

  // Appends a result node. `inputs` decide whether it participates in backward;
  // make_backward is only invoked when it does.
  Var emit(std::size_t rows, std::size_t cols, std::vector<double> value,
           std::initializer_list<Var> inputs, const std::function<std::function<void()>(int)>& make_backward);
  Var emit(std::size_t rows, std::size_t cols, std::vector<double> value,
           const std::vector<Var>& inputs, const std::function<std::function<void()>(int)>& make_backward);

 private:
  bool record_;
  std::vector<Node> nodes_;
};

struct InterpTap {
  std::size_t lo;
  std::size_t hi;
  double weight_hi;  // row = (1 - w) * x[lo] + w * x[hi]
};

namespace ag {

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
// x (n x m) + row (1 x m) broadcast over rows.
Var add_row(Var x, Var row);
// Repeats a 1 x m row n times.
Var broadcast_rows(Var row, std::size_t n);
Var linear(Var x, Var weight, Var bias);
Var layer_norm(Var x, std::optional<Var> gain, std::optional<Var> bias, double eps);
Var gelu(Var x);
Var silu(Var x);
Var attention(Var q, Var k, Var v, const AttentionMask& mask, std::size_t heads);
Var rope(Var x, std::span<const double> positions, double base, std::size_t head_dim);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(Var x, std::size_t begin, std::size_t end);
Var slice_cols(Var x, std::size_t begin, std::size_t end);
Var interp_rows(Var x, const std::vector<InterpTap>& taps);
Var sum(Var x);
Var mean(Var x);
// Mean over all elements of (a - b)^2.
Var mse(Var a, Var b);

}  // namespace ag
}  // namespace dystream
