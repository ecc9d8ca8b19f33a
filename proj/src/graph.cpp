// Copyright (c) 2026 tagret authors
// SPDX-License-Identifier: Apache-2.0

#include "tagret/graph.hpp"

#include <cmath>

namespace tagret {

namespace {

void check_same_shape(const Node* a, const Node* b, const char* op) {
  if (!a->val.same_shape(b->val))
    throw NumericError(std::string(op) + ": shape mismatch");
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

Node* Graph::make(Mat v, bool needs_grad, std::function<void(Node&)> back) {
  nodes_.emplace_back();
  Node& n = nodes_.back();
  n.val = std::move(v);
  n.needs_grad = needs_grad;
  n.idx = nodes_.size() - 1;
  n.back = std::move(back);
  return &n;
}

Mat& Graph::g(Node* n) {
  if (n->grad.empty() && n->val.size() > 0)
    n->grad.resize(n->val.rows(), n->val.cols(), 0.0);
  return n->grad;
}

Node* Graph::input(Mat v) { return make(std::move(v), false, nullptr); }

Node* Graph::scalar(double v) { return input(Mat(1, 1, v)); }

Node* Graph::leaf(Mat v) { return make(std::move(v), true, nullptr); }

Node* Graph::param(Param& p, GradBuffer* sink) {
  Param* pp = &p;
  if (sink) {
    Mat* slot = &sink->slot(p);
    return make(p.value, true, [slot](Node& n) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) slot->at(i) += n.grad.at(i);
    });
  }
  return make(p.value, true, [pp](Node& n) {
    if (pp->grad.empty()) pp->grad.resize(pp->value.rows(), pp->value.cols(), 0.0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) pp->grad.at(i) += n.grad.at(i);
  });
}

Node* Graph::add(Node* a, Node* b) {
  check_same_shape(a, b, "add");
  Mat v = a->val;
  for (std::size_t i = 0; i < v.size(); ++i) v.at(i) += b->val.at(i);
  bool ng = a->needs_grad || b->needs_grad;
  return make(std::move(v), ng, !ng ? std::function<void(Node&)>() : [a, b](Node& n) {
    if (a->needs_grad) {
      Mat& ga = g(a);
      for (std::size_t i = 0; i < n.grad.size(); ++i) ga.at(i) += n.grad.at(i);
    }
    if (b->needs_grad) {
      Mat& gb = g(b);
      for (std::size_t i = 0; i < n.grad.size(); ++i) gb.at(i) += n.grad.at(i);
    }
  });
}

Node* Graph::sub(Node* a, Node* b) {
  check_same_shape(a, b, "sub");
  Mat v = a->val;
  for (std::size_t i = 0; i < v.size(); ++i) v.at(i) -= b->val.at(i);
  bool ng = a->needs_grad || b->needs_grad;
  return make(std::move(v), ng, !ng ? std::function<void(Node&)>() : [a, b](Node& n) {
    if (a->needs_grad) {
      Mat& ga = g(a);
      for (std::size_t i = 0; i < n.grad.size(); ++i) ga.at(i) += n.grad.at(i);
    }
    if (b->needs_grad) {
      Mat& gb = g(b);
      for (std::size_t i = 0; i < n.grad.size(); ++i) gb.at(i) -= n.grad.at(i);
    }
  });
}

Node* Graph::mul(Node* a, Node* b) {
  check_same_shape(a, b, "mul");
  Mat v = a->val;
  for (std::size_t i = 0; i < v.size(); ++i) v.at(i) *= b->val.at(i);
  bool ng = a->needs_grad || b->needs_grad;
  return make(std::move(v), ng, !ng ? std::function<void(Node&)>() : [a, b](Node& n) {
    if (a->needs_grad) {
      Mat& ga = g(a);
      for (std::size_t i = 0; i < n.grad.size(); ++i) ga.at(i) += n.grad.at(i) * b->val.at(i);
    }
    if (b->needs_grad) {
      Mat& gb = g(b);
      for (std::size_t i = 0; i < n.grad.size(); ++i) gb.at(i) += n.grad.at(i) * a->val.at(i);
    }
  });
}

Node* Graph::affine(Node* a, double k, double c) {
  Mat v = a->val;
  for (std::size_t i = 0; i < v.size(); ++i) v.at(i) = k * v.at(i) + c;
  bool ng = a->needs_grad;
  return make(std::move(v), ng, !ng ? std::function<void(Node&)>() : [a, k](Node& n) {
    Mat& ga = g(a);
    for (std::size_t i = 0; i < n.grad.size(); ++i) ga.at(i) += k * n.grad.at(i);
  });
}

Node* Graph::matmul(Node* a, Node* b) {
  Mat v = tagret::matmul(a->val, b->val);
  bool ng = a->needs_grad || b->needs_grad;
  return make(std::move(v), ng, !ng ? std::function<void(Node&)>() : [a, b](Node& n) {
    if (a->needs_grad) {
      Mat da = tagret::matmul(n.grad, tagret::transpose(b->val));
      Mat& ga = g(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga.at(i) += da.at(i);
    }
    if (b->needs_grad) {
      Mat db = tagret::matmul(tagret::transpose(a->val), n.grad);
      Mat& gb = g(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb.at(i) += db.at(i);
    }
  });
}

Node* Graph::transpose(Node* a) {
  Mat v = tagret::transpose(a->val);
  bool ng = a->needs_grad;
  return make(std::move(v), ng, !ng ? std::function<void(Node&)>() : [a](Node& n) {
    Mat gt = tagret::transpose(n.grad);
    Mat& ga = g(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga.at(i) += gt.at(i);
  });
}

Node* Graph::add_rowvec(Node* a, Node* v) {
  if (v->val.rows() != 1 || v->val.cols() != a->val.cols())
    throw NumericError("add_rowvec: expected 1 x cols(a)");
  Mat out = a->val;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += v->val(0, c);
  bool ng = a->needs_grad || v->needs_grad;
  return make(std::move(out), ng, !ng ? std::function<void(Node&)>() : [a, v](Node& n) {
    if (a->needs_grad) {
      Mat& ga = g(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga.at(i) += n.grad.at(i);
    }
    if (v->needs_grad) {
      Mat& gv = g(v);
      for (std::size_t r = 0; r < n.grad.rows(); ++r)
        for (std::size_t c = 0; c < n.grad.cols(); ++c) gv(0, c) += n.grad(r, c);
    }
  });
}

Node* Graph::mul_rowvec(Node* a, Node* v) {
  if (v->val.rows() != 1 || v->val.cols() != a->val.cols())
    throw NumericError("mul_rowvec: expected 1 x cols(a)");
  Mat out = a->val;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) *= v->val(0, c);
  bool ng = a->needs_grad || v->needs_grad;
  return make(std::move(out), ng, !ng ? std::function<void(Node&)>() : [a, v](Node& n) {
    if (a->needs_grad) {
      Mat& ga = g(a);
      for (std::size_t r = 0; r < n.grad.rows(); ++r)
        for (std::size_t c = 0; c < n.grad.cols(); ++c) ga(r, c) += n.grad(r, c) * v->val(0, c);
    }
    if (v->needs_grad) {
      Mat& gv = g(v);
      for (std::size_t r = 0; r < n.grad.rows(); ++r)
        for (std::size_t c = 0; c < n.grad.cols(); ++c) gv(0, c) += n.grad(r, c) * a->val(r, c);
    }
  });
}

Node* Graph::mul_colvec(Node* a, Node* u) {
  if (u->val.cols() != 1 || u->val.rows() != a->val.rows())
    throw NumericError("mul_colvec: expected rows(a) x 1");
  Mat out = a->val;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) *= u->val(r, 0);
  bool ng = a->needs_grad || u->needs_grad;
  return make(std::move(out), ng, !ng ? std::function<void(Node&)>() : [a, u](Node& n) {
    if (a->needs_grad) {
      Mat& ga = g(a);
      for (std::size_t r = 0; r < n.grad.rows(); ++r)
        for (std::size_t c = 0; c < n.grad.cols(); ++c) ga(r, c) += n.grad(r, c) * u->val(r, 0);
    }
    if (u->needs_grad) {
      Mat& gu = g(u);
      for (std::size_t r = 0; r < n.grad.rows(); ++r)
        for (std::size_t c = 0; c < n.grad.cols(); ++c) gu(r, 0) += n.grad(r, c) * a->val(r, c);
    }
  });
}

Node* Graph::div_colvec(Node* a, Node* u) {
  if (u->val.cols() != 1 || u->val.rows() != a->val.rows())
    throw NumericError("div_colvec: expected rows(a) x 1");
  Mat out = a->val;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    if (u->val(r, 0) == 0.0) throw NumericError("div_colvec: division by zero at row " +
                                                std::to_string(r));
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) /= u->val(r, 0);
  }
  bool ng = a->needs_grad || u->needs_grad;
  return make(std::move(out), ng, !ng ? std::function<void(Node&)>() : [a, u](Node& n) {
    if (a->needs_grad) {
      Mat& ga = g(a);
      for (std::size_t r = 0; r < n.grad.rows(); ++r)
        for (std::size_t c = 0; c < n.grad.cols(); ++c) ga(r, c) += n.grad(r, c) / u->val(r, 0);
    }
    if (u->needs_grad) {
      Mat& gu = g(u);
      for (std::size_t r = 0; r < n.grad.rows(); ++r) {
        const double inv2 = 1.0 / (u->val(r, 0) * u->val(r, 0));
        for (std::size_t c = 0; c < n.grad.cols(); ++c)
          gu(r, 0) -= n.grad(r, c) * a->val(r, c) * inv2;
      }
    }
  });
}

Node* Graph::slice_rows(Node* a, std::size_t r0, std::size_t nrows) {
  if (r0 + nrows > a->val.rows()) throw NumericError("slice_rows: out of range");
  Mat out(nrows, a->val.cols());
  for (std::size_t r = 0; r < nrows; ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) = a->val(r0 + r, c);
  bool ng = a->needs_grad;
  return make(std::move(out), ng, !ng ? std::function<void(Node&)>() : [a, r0](Node& n) {
    Mat& ga = g(a);
    for (std::size_t r = 0; r < n.grad.rows(); ++r)
      for (std::size_t c = 0; c < n.grad.cols(); ++c) ga(r0 + r, c) += n.grad(r, c);
  });
}

Node* Graph::slice_cols(Node* a, std::size_t c0, std::size_t ncols) {
  if (c0 + ncols > a->val.cols()) throw NumericError("slice_cols: out of range");
  Mat out(a->val.rows(), ncols);
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < ncols; ++c) out(r, c) = a->val(r, c0 + c);
  bool ng = a->needs_grad;
  return make(std::move(out), ng, !ng ? std::function<void(Node&)>() : [a, c0](Node& n) {
    Mat& ga = g(a);
    for (std::size_t r = 0; r < n.grad.rows(); ++r)
      for (std::size_t c = 0; c < n.grad.cols(); ++c) ga(r, c0 + c) += n.grad(r, c);
  });
}

Node* Graph::concat_rows(const std::vector<Node*>& parts) {
  if (parts.empty()) throw NumericError("concat_rows: empty");
  std::size_t total = 0;
  const std::size_t cols = parts[0]->val.cols();
  bool ng = false;
  for (Node* p : parts) {
    if (p->val.cols() != cols) throw NumericError("concat_rows: column mismatch");
    total += p->val.rows();
    ng = ng || p->needs_grad;
  }
  Mat out(total, cols);
  std::size_t r0 = 0;
  for (Node* p : parts) {
    for (std::size_t r = 0; r < p->val.rows(); ++r)
      for (std::size_t c = 0; c < cols; ++c) out(r0 + r, c) = p->val(r, c);
    r0 += p->val.rows();
  }
  std::vector<Node*> ps = parts;
  return make(std::move(out), ng, !ng ? std::function<void(Node&)>() : [ps](Node& n) {
    std::size_t r0 = 0;
    for (Node* p : ps) {
      if (p->needs_grad) {
        Mat& gp = g(p);
        for (std::size_t r = 0; r < p->val.rows(); ++r)
          for (std::size_t c = 0; c < n.grad.cols(); ++c) gp(r, c) += n.grad(r0 + r, c);
      }
      r0 += p->val.rows();
    }
  });
}

Node* Graph::concat_cols(const std::vector<Node*>& parts) {
  if (parts.empty()) throw NumericError("concat_cols: empty");
  std::size_t total = 0;
  const std::size_t rows = parts[0]->val.rows();
  bool ng = false;
  for (Node* p : parts) {
    if (p->val.rows() != rows) throw NumericError("concat_cols: row mismatch");
    total += p->val.cols();
    ng = ng || p->needs_grad;
  }
  Mat out(rows, total);
  std::size_t c0 = 0;
  for (Node* p : parts) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < p->val.cols(); ++c) out(r, c0 + c) = p->val(r, c);
    c0 += p->val.cols();
  }
  std::vector<Node*> ps = parts;
  return make(std::move(out), ng, !ng ? std::function<void(Node&)>() : [ps](Node& n) {
    std::size_t c0 = 0;
    for (Node* p : ps) {
      if (p->needs_grad) {
        Mat& gp = g(p);
        for (std::size_t r = 0; r < n.grad.rows(); ++r)
          for (std::size_t c = 0; c < p->val.cols(); ++c) gp(r, c) += n.grad(r, c0 + c);
      }
      c0 += p->val.cols();
    }
  });
}

Node* Graph::layernorm(Node* a, double eps) {
  const std::size_t R = a->val.rows(), C = a->val.cols();
  Mat out(R, C);
  Mat inv_sigma(R, 1);
  for (std::size_t r = 0; r < R; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < C; ++c) mu += a->val(r, c);
    mu /= static_cast<double>(C);
    double var = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double d = a->val(r, c) - mu;
      var += d * d;
    }
    var /= static_cast<double>(C);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_sigma(r, 0) = is;
    for (std::size_t c = 0; c < C; ++c) out(r, c) = (a->val(r, c) - mu) * is;
  }
  bool ng = a->needs_grad;
  Mat y = out;
  return make(std::move(out), ng,
              !ng ? std::function<void(Node&)>() : [a, y, inv_sigma](Node& n) {
    const std::size_t R = n.grad.rows(), C = n.grad.cols();
    Mat& ga = g(a);
    for (std::size_t r = 0; r < R; ++r) {
      double gmean = 0.0, gymean = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        gmean += n.grad(r, c);
        gymean += n.grad(r, c) * y(r, c);
      }
      gmean /= static_cast<double>(C);
      gymean /= static_cast<double>(C);
      for (std::size_t c = 0; c < C; ++c)
        ga(r, c) += inv_sigma(r, 0) * (n.grad(r, c) - gmean - y(r, c) * gymean);
    }
  });
}

Node* Graph::softmax_rows(Node* a) {
  const std::size_t R = a->val.rows(), C = a->val.cols();
  Mat out(R, C);
  for (std::size_t r = 0; r < R; ++r) {
    double mx = a->val(r, 0);
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, a->val(r, c));
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      out(r, c) = std::exp(a->val(r, c) - mx);
      s += out(r, c);
    }
    for (std::size_t c = 0; c < C; ++c) out(r, c) /= s;
  }
  bool ng = a->needs_grad;
  Mat p = out;
  return make(std::move(out), ng, !ng ? std::function<void(Node&)>() : [a, p](Node& n) {
    const std::size_t R = n.grad.rows(), C = n.grad.cols();
    Mat& ga = g(a);
    for (std::size_t r = 0; r < R; ++r) {
      double gp = 0.0;
      for (std::size_t c = 0; c < C; ++c) gp += n.grad(r, c) * p(r, c);
      for (std::size_t c = 0; c < C; ++c) ga(r, c) += p(r, c) * (n.grad(r, c) - gp);
    }
  });
}

Node* Graph::masked_softmax_rows(Node* a, const Mat& allowed) {
  if (!allowed.same_shape(a->val)) throw NumericError("masked_softmax_rows: mask shape mismatch");
  const std::size_t R = a->val.rows(), C = a->val.cols();
  Mat out(R, C, 0.0);
  for (std::size_t r = 0; r < R; ++r) {
    bool any = false;
    double mx = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      if (allowed(r, c) == 0.0) continue;
      if (!any || a->val(r, c) > mx) mx = a->val(r, c);
      any = true;
    }
    if (!any) throw NumericError("masked_softmax_rows: all entries masked in row " + std::to_string(r));
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      if (allowed(r, c) == 0.0) continue;
      out(r, c) = std::exp(a->val(r, c) - mx);
      s += out(r, c);
    }
    for (std::size_t c = 0; c < C; ++c)
      if (allowed(r, c) != 0.0) out(r, c) /= s;
  }
  bool ng = a->needs_grad;
  Mat p = out;
  Mat msk = allowed;
  return make(std::move(out), ng, !ng ? std::function<void(Node&)>() : [a, p, msk](Node& n) {
    const std::size_t R = n.grad.rows(), C = n.grad.cols();
    Mat& ga = g(a);
    for (std::size_t r = 0; r < R; ++r) {
      double gp = 0.0;
      for (std::size_t c = 0; c < C; ++c)
        if (msk(r, c) != 0.0) gp += n.grad(r, c) * p(r, c);
      for (std::size_t c = 0; c < C; ++c)
        if (msk(r, c) != 0.0) ga(r, c) += p(r, c) * (n.grad(r, c) - gp);
    }
  });
}

Node* Graph::logsoftmax_rows(Node* a) {
  const std::size_t R = a->val.rows(), C = a->val.cols();
  Mat out(R, C);
  Mat p(R, C);
  for (std::size_t r = 0; r < R; ++r) {
    double mx = a->val(r, 0);
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, a->val(r, c));
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += std::exp(a->val(r, c) - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < C; ++c) {
      out(r, c) = a->val(r, c) - lse;
      p(r, c) = std::exp(out(r, c));
    }
  }
  bool ng = a->needs_grad;
  return make(std::move(out), ng, !ng ? std::function<void(Node&)>() : [a, p](Node& n) {
    const std::size_t R = n.grad.rows(), C = n.grad.cols();
    Mat& ga = g(a);
    for (std::size_t r = 0; r < R; ++r) {
      double gsum = 0.0;
      for (std::size_t c = 0; c < C; ++c) gsum += n.grad(r, c);
      for (std::size_t c = 0; c < C; ++c) ga(r, c) += n.grad(r, c) - p(r, c) * gsum;
    }
  });
}

Node* Graph::gelu(Node* a) {
  Mat out = a->val;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = out.at(i);
    out.at(i) = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
  }
  bool ng = a->needs_grad;
  return make(std::move(out), ng, !ng ? std::function<void(Node&)>() : [a](Node& n) {
    Mat& ga = g(a);
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const double x = a->val.at(i);
      const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
      ga.at(i) += n.grad.at(i) * (cdf + x * pdf);
    }
  });
}

Node* Graph::sum(Node* a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a->val.size(); ++i) s += a->val.at(i);
  bool ng = a->needs_grad;
  return make(Mat(1, 1, s), ng, !ng ? std::function<void(Node&)>() : [a](Node& n) {
    Mat& ga = g(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga.at(i) += n.grad(0, 0);
  });
}

Node* Graph::mean(Node* a) {
  const double inv = 1.0 / static_cast<double>(a->val.size());
  double s = 0.0;
  for (std::size_t i = 0; i < a->val.size(); ++i) s += a->val.at(i);
  bool ng = a->needs_grad;
  return make(Mat(1, 1, s * inv), ng, !ng ? std::function<void(Node&)>() : [a, inv](Node& n) {
    Mat& ga = g(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga.at(i) += n.grad(0, 0) * inv;
  });
}

Node* Graph::rowsum(Node* a) {
  Mat out(a->val.rows(), 1, 0.0);
  for (std::size_t r = 0; r < a->val.rows(); ++r)
    for (std::size_t c = 0; c < a->val.cols(); ++c) out(r, 0) += a->val(r, c);
  bool ng = a->needs_grad;
  return make(std::move(out), ng, !ng ? std::function<void(Node&)>() : [a](Node& n) {
    Mat& ga = g(a);
    for (std::size_t r = 0; r < ga.rows(); ++r)
      for (std::size_t c = 0; c < ga.cols(); ++c) ga(r, c) += n.grad(r, 0);
  });
}

Node* Graph::l2_normalize_rows(Node* a) {
  const std::size_t R = a->val.rows(), C = a->val.cols();
  Mat out(R, C);
  Mat norms(R, 1);
  for (std::size_t r = 0; r < R; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += a->val(r, c) * a->val(r, c);
    const double nrm = std::sqrt(s);
    if (nrm == 0.0)
      throw NumericError("l2_normalize_rows: zero-norm feature at row " + std::to_string(r));
    norms(r, 0) = nrm;
    for (std::size_t c = 0; c < C; ++c) out(r, c) = a->val(r, c) / nrm;
  }
  bool ng = a->needs_grad;
  Mat u = out;
  return make(std::move(out), ng, !ng ? std::function<void(Node&)>() : [a, u, norms](Node& n) {
    const std::size_t R = n.grad.rows(), C = n.grad.cols();
    Mat& ga = g(a);
    for (std::size_t r = 0; r < R; ++r) {
      double gu = 0.0;
      for (std::size_t c = 0; c < C; ++c) gu += n.grad(r, c) * u(r, c);
      for (std::size_t c = 0; c < C; ++c)
        ga(r, c) += (n.grad(r, c) - gu * u(r, c)) / norms(r, 0);
    }
  });
}

Node* Graph::rowwise_cosine(Node* a, Node* b) {
  check_same_shape(a, b, "rowwise_cosine");
  const std::size_t R = a->val.rows(), C = a->val.cols();
  Mat out(R, 1);
  Mat na(R, 1), nb(R, 1);
  for (std::size_t r = 0; r < R; ++r) {
    double sa = 0.0, sb = 0.0, ab = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      sa += a->val(r, c) * a->val(r, c);
      sb += b->val(r, c) * b->val(r, c);
      ab += a->val(r, c) * b->val(r, c);
    }
    if (sa == 0.0 || sb == 0.0)
      throw NumericError("rowwise_cosine: zero-norm feature at row " + std::to_string(r));
    na(r, 0) = std::sqrt(sa);
    nb(r, 0) = std::sqrt(sb);
    out(r, 0) = ab / (na(r, 0) * nb(r, 0));
  }
  bool ng = a->needs_grad || b->needs_grad;
  Mat cosv = out;
  return make(std::move(out), ng,
              !ng ? std::function<void(Node&)>() : [a, b, cosv, na, nb](Node& n) {
    const std::size_t R = a->val.rows(), C = a->val.cols();
    for (std::size_t r = 0; r < R; ++r) {
      const double gr = n.grad(r, 0);
      if (gr == 0.0) continue;
      const double inv_ab = 1.0 / (na(r, 0) * nb(r, 0));
      if (a->needs_grad) {
        Mat& ga = g(a);
        const double inv_aa = 1.0 / (na(r, 0) * na(r, 0));
        for (std::size_t c = 0; c < C; ++c)
          ga(r, c) += gr * (b->val(r, c) * inv_ab - cosv(r, 0) * a->val(r, c) * inv_aa);
      }
      if (b->needs_grad) {
        Mat& gb = g(b);
        const double inv_bb = 1.0 / (nb(r, 0) * nb(r, 0));
        for (std::size_t c = 0; c < C; ++c)
          gb(r, c) += gr * (a->val(r, c) * inv_ab - cosv(r, 0) * b->val(r, c) * inv_bb);
      }
    }
  });
}

Node* Graph::abs(Node* a) {
  Mat out = a->val;
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = std::fabs(out.at(i));
  bool ng = a->needs_grad;
  return make(std::move(out), ng, !ng ? std::function<void(Node&)>() : [a](Node& n) {
    Mat& ga = g(a);
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const double x = a->val.at(i);
      const double s = (x > 0.0) ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
      ga.at(i) += n.grad.at(i) * s;
    }
  });
}

Node* Graph::min_const(Node* a, double c) {
  Mat out = a->val;
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = std::min(out.at(i), c);
  bool ng = a->needs_grad;
  return make(std::move(out), ng, !ng ? std::function<void(Node&)>() : [a, c](Node& n) {
    Mat& ga = g(a);
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      if (a->val.at(i) <= c) ga.at(i) += n.grad.at(i);
  });
}

Node* Graph::clamp(Node* a, double lo, double hi) {
  Mat out = a->val;
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = std::min(std::max(out.at(i), lo), hi);
  bool ng = a->needs_grad;
  return make(std::move(out), ng, !ng ? std::function<void(Node&)>() : [a, lo, hi](Node& n) {
    Mat& ga = g(a);
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const double x = a->val.at(i);
      if (x >= lo && x <= hi) ga.at(i) += n.grad.at(i);
    }
  });
}

Node* Graph::reciprocal(Node* a) {
  Mat out = a->val;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out.at(i) == 0.0) throw NumericError("reciprocal: division by zero");
    out.at(i) = 1.0 / out.at(i);
  }
  bool ng = a->needs_grad;
  return make(std::move(out), ng, !ng ? std::function<void(Node&)>() : [a](Node& n) {
    Mat& ga = g(a);
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const double x = a->val.at(i);
      ga.at(i) -= n.grad.at(i) / (x * x);
    }
  });
}

Node* Graph::mul_scalar_node(Node* a, Node* s) {
  if (s->val.rows() != 1 || s->val.cols() != 1) throw NumericError("mul_scalar_node: s must be 1x1");
  const double sv = s->val(0, 0);
  Mat out = a->val;
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) *= sv;
  bool ng = a->needs_grad || s->needs_grad;
  return make(std::move(out), ng, !ng ? std::function<void(Node&)>() : [a, s, sv](Node& n) {
    if (a->needs_grad) {
      Mat& ga = g(a);
      for (std::size_t i = 0; i < n.grad.size(); ++i) ga.at(i) += n.grad.at(i) * sv;
    }
    if (s->needs_grad) {
      Mat& gs = g(s);
      double acc = 0.0;
      for (std::size_t i = 0; i < n.grad.size(); ++i) acc += n.grad.at(i) * a->val.at(i);
      gs(0, 0) += acc;
    }
  });
}

Node* Graph::rows_gather(Node* table, const std::vector<std::size_t>& indices) {
  Mat out(indices.size(), table->val.cols());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= table->val.rows()) throw DataError("rows_gather: index out of range");
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) = table->val(indices[r], c);
  }
  bool ng = table->needs_grad;
  std::vector<std::size_t> idx = indices;
  return make(std::move(out), ng, !ng ? std::function<void(Node&)>() : [table, idx](Node& n) {
    Mat& gt = g(table);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < n.grad.cols(); ++c) gt(idx[r], c) += n.grad(r, c);
  });
}

void Graph::run_tape(std::size_t from_idx) {
  for (std::size_t i = from_idx + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.empty() || !n.back) continue;
    n.back(n);
  }
}

void Graph::backward(Node* loss) {
  if (loss->val.rows() != 1 || loss->val.cols() != 1)
    throw NumericError("backward: loss must be a 1x1 node");
  g(loss)(0, 0) += 1.0;
  run_tape(loss->idx);
}

void Graph::backward_seeded(const std::vector<std::pair<Node*, Mat>>& seeds) {
  std::size_t hi = 0;
  for (const auto& [node, seed] : seeds) {
    if (!seed.same_shape(node->val)) throw NumericError("backward_seeded: seed shape mismatch");
    Mat& gn = g(node);
    for (std::size_t i = 0; i < gn.size(); ++i) gn.at(i) += seed.at(i);
    hi = std::max(hi, node->idx);
  }
  run_tape(hi);
}

}  // namespace tagret
