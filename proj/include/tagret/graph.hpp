// Copyright (c) 2026 tagret authors
// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode autodiff over Mat. Nodes are recorded in creation
// order (a valid topological order); backward replays the tape in reverse.
// Discrete choices (argmax routing, top-k index selection) happen outside the
// tape on node values, so gradients flow only through the continuous paths.

#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "tagret/mat.hpp"
#include "tagret/params.hpp"

namespace tagret {

struct Node {
  Mat val;
  Mat grad;  // stays empty until some gradient reaches this node
  bool needs_grad = false;
  std::size_t idx = 0;
  std::function<void(Node&)> back;
};

class Graph {
 public:
  Node* input(Mat v);
  Node* scalar(double v);  // 1x1 constant
  Node* leaf(Mat v);       // differentiable input; read grad back after backward
  // Gradients accumulate into p.grad, or into sink->slot(p) when a per-thread
  // sink is given.
  Node* param(Param& p, GradBuffer* sink = nullptr);

  Node* add(Node* a, Node* b);
  Node* sub(Node* a, Node* b);
  Node* mul(Node* a, Node* b);  // elementwise
  Node* affine(Node* a, double k, double c);  // k*x + c elementwise
  Node* scale(Node* a, double k) { return affine(a, k, 0.0); }
  Node* matmul(Node* a, Node* b);
  Node* transpose(Node* a);

  Node* add_rowvec(Node* a, Node* v);  // v: 1 x C, broadcast over rows
  Node* mul_rowvec(Node* a, Node* v);
  Node* mul_colvec(Node* a, Node* u);  // u: R x 1, broadcast over columns
  Node* div_colvec(Node* a, Node* u);  // a_ij / u_i

  Node* slice_rows(Node* a, std::size_t r0, std::size_t n);
  Node* slice_cols(Node* a, std::size_t c0, std::size_t n);
  Node* concat_rows(const std::vector<Node*>& parts);
  Node* concat_cols(const std::vector<Node*>& parts);

  Node* layernorm(Node* a, double eps = 1e-5);  // row-wise, no affine
  Node* softmax_rows(Node* a);
  // Softmax restricted to entries where allowed != 0. Excluded entries are
  // never exponentiated and come out exactly 0.
  Node* masked_softmax_rows(Node* a, const Mat& allowed);
  Node* logsoftmax_rows(Node* a);
  Node* gelu(Node* a);

  Node* sum(Node* a);   // 1x1
  Node* mean(Node* a);  // 1x1
  Node* rowsum(Node* a);  // R x 1

  Node* l2_normalize_rows(Node* a);
  Node* rowwise_cosine(Node* a, Node* b);  // R x 1

  Node* abs(Node* a);
  Node* min_const(Node* a, double c);
  Node* clamp(Node* a, double lo, double hi);
  Node* reciprocal(Node* a);
  Node* mul_scalar_node(Node* a, Node* s);  // s: 1x1

  Node* rows_gather(Node* table, const std::vector<std::size_t>& indices);

  // Seeds d(loss)/d(loss) = 1 and accumulates parameter gradients.
  void backward(Node* loss);
  // Seeds explicit cotangents at arbitrary nodes (two-stage batch backward).
  void backward_seeded(const std::vector<std::pair<Node*, Mat>>& seeds);

  std::size_t num_nodes() const { return nodes_.size(); }

 private:
  std::deque<Node> nodes_;

  Node* make(Mat v, bool needs_grad, std::function<void(Node&)> back);
  static Mat& g(Node* n);  // grad of n, allocated on first touch
  void run_tape(std::size_t from_idx);
};

}  // namespace tagret
