#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "perldiff/params.hpp"
#include "perldiff/tensor.hpp"

namespace perldiff {

class Graph;

// Handle to a value recorded on a Graph.
struct Var {
  Graph* graph = nullptr;
  int id = -1;

  bool valid() const { return graph != nullptr && id >= 0; }
  const Tensor& value() const;
  const Dims& dims() const { return value().dims(); }
};

// Reverse-mode tape. Every op appends a node; backward() walks the tape in
// reverse and accumulates gradients. Parameter leaves flush their gradient
// into the owning ParameterStore at the end of backward().
//
// A graph built with record_backward=false keeps values only; used for
// sampling where no gradient is needed.
class Graph {
 public:
  explicit Graph(bool record_backward = true) : record_(record_backward) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  // One leaf per parameter and graph; repeated calls return the same Var.
  Var parameter(ParameterStore& store, const std::string& name);

  const Tensor& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)]->value; }
  bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)]->requires_grad; }
  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  // Seeds d(scalar)/d(scalar) = 1 and propagates to every parameter leaf.
  void backward(Var scalar);

  // Gradient of the last backward() w.r.t. a node, zero-filled if untouched.
  Tensor gradient(Var v) const;

  // Op plumbing. `backward` receives the output gradient and value and adds
  // into grad_buffer() of each differentiable input.
  using BackwardFn = std::function<void(Graph&, const Tensor& grad_out, const Tensor& out)>;
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);
  // Adds into the gradient buffer of `v`; buffer is allocated on demand.
  Tensor& grad_buffer(Var v);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    bool requires_grad = false;
    ParameterStore::Entry* param = nullptr;
  };
  bool record_;
  std::vector<std::unique_ptr<Node>> nodes_;
  std::map<const ParameterStore::Entry*, int> leaves_;
};

namespace ops {

Var matmul(Var a, Var b);              // [m,k] x [k,n]
Var matmul_nt(Var a, Var b);           // [m,k] x [n,k]^T
Var transpose(Var a);                  // 2D
Var add(Var a, Var b);                 // same shape
Var sub(Var a, Var b);
Var mul(Var a, Var b);                 // elementwise
Var scale(Var a, double s);
Var scale_by(Var a, Var s);            // s has one element
Var add_row_bias(Var a, Var bias);     // a [m,n], bias has n elements
Var add_channel_bias(Var a, Var bias); // a [C,...], bias has C elements
Var softmax_lastdim(Var a);
Var silu(Var a);
Var conv2d(Var x, Var kernel, int stride);  // x [Cin,H,W], kernel [Cout,Cin,3,3], zero pad 1
Var group_norm(Var x, int groups, Var gamma, Var beta, double eps = 1e-5);
Var concat0(Var a, Var b);             // along the leading dimension
Var concat_cols(Var a, Var b);         // 2D, along the last dimension
Var upsample2x(Var x);                 // nearest, [C,H,W] -> [C,2H,2W]
Var mean_spatial(Var x);               // [C,H,W] -> [1,C]
Var reshape(Var a, Dims dims);
Var broadcast_rows(Var row, int rows); // [1,n] -> [rows,n]
// Rows with valid[i] == false are replaced by `fill` ([1,n]).
Var fill_invalid_rows(Var a, const std::vector<bool>& valid, Var fill);
Var mse(Var prediction, Var target);   // mean squared error -> [1]
Var mean(Var a);                       // -> [1]
Var sum(Var a);                        // -> [1]

}  // namespace ops

}  // namespace perldiff
