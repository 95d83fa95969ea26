/* Copyright 2026 The vla4d Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#include "vla4d/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

namespace vla4d::ad {
namespace {

thread_local bool g_grad_enabled = true;

// Gradient slot of parent i, or nullptr when it does not need one.
Tensor* slot(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  return p.requires_grad ? &p.grad_ref() : nullptr;
}

void require_same_numel(const Var& a, const Var& b, const char* op) {
  if (a.value().numel() != b.value().numel()) {
    throw ShapeError(std::string(op) + ": shape " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

Shape matrix_shape(int r, int c) { return {r, c}; }

}  // namespace

Tensor& Node::grad_ref() {
  if (grad.data.empty() && !value.data.empty()) {
    grad = Tensor(value.shape, 0.0);
  }
  return grad;
}

Var::Var(Tensor value, bool requires_grad)
    : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Var::grad() const {
  if (node_->grad.data.empty()) return Tensor(node_->value.shape, 0.0);
  return node_->grad;
}

double Var::item() const {
  if (node_->value.numel() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  }
  return node_->value[0];
}

void Var::backward() const {
  if (!node_->requires_grad) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->grad_ref().fill(1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.data.empty()) n->backward_fn(*n);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
  g_grad_enabled = false;
}
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Var make_op(Tensor value, std::vector<Var> parents,
            std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const Var& p : parents) any = any || p.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(parents.size());
      for (const Var& p : parents) node->parents.push_back(p.node());
      node->backward_fn = std::move(backward);
    }
  }
  return Var(std::move(node));
}

Var constant(Tensor value) { return Var(std::move(value), false); }
Var scalar(double v) { return Var(Tensor({1}, v), false); }

Var matmul(const Var& a, const Var& b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.cols() != B.rows()) {
    throw ShapeError("matmul: " + shape_str(A.shape) + " x " +
                     shape_str(B.shape));
  }
  Tensor out(matrix_shape(A.rows(), B.cols()));
  out.mat().noalias() = A.mat() * B.mat();
  return make_op(std::move(out), {a, b}, [](Node& self) {
    const Tensor& A = self.parents[0]->value;
    const Tensor& B = self.parents[1]->value;
    if (Tensor* ga = slot(self, 0)) ga->mat().noalias() += self.grad.mat() * B.mat().transpose();
    if (Tensor* gb = slot(self, 1)) gb->mat().noalias() += A.mat().transpose() * self.grad.mat();
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  const Tensor& X = x.value();
  const Tensor& W = w.value();
  if (X.cols() != W.rows()) {
    throw ShapeError("linear: input " + shape_str(X.shape) + " weight " +
                     shape_str(W.shape));
  }
  Tensor out(matrix_shape(X.rows(), W.cols()));
  out.mat().noalias() = X.mat() * W.mat();
  const bool has_bias = b.defined();
  if (has_bias) {
    if (b.value().numel() != W.cols()) {
      throw ShapeError("linear: bias " + shape_str(b.shape()));
    }
    out.mat().rowwise() +=
        Eigen::Map<const Eigen::RowVectorXd>(b.value().data.data(), W.cols());
  }
  std::vector<Var> parents{x, w};
  if (has_bias) parents.push_back(b);
  return make_op(std::move(out), std::move(parents), [has_bias](Node& self) {
    const Tensor& X = self.parents[0]->value;
    const Tensor& W = self.parents[1]->value;
    if (Tensor* gx = slot(self, 0)) gx->mat().noalias() += self.grad.mat() * W.mat().transpose();
    if (Tensor* gw = slot(self, 1)) gw->mat().noalias() += X.mat().transpose() * self.grad.mat();
    if (has_bias) {
      if (Tensor* gb = slot(self, 2)) {
        Eigen::Map<Eigen::RowVectorXd>(gb->data.data(), gb->numel()) +=
            self.grad.mat().colwise().sum();
      }
    }
  });
}

Var add(const Var& a, const Var& b) {
  require_same_numel(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.value().data[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (Tensor* g = slot(self, p)) {
        for (std::size_t i = 0; i < g->data.size(); ++i) g->data[i] += self.grad.data[i];
      }
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_numel(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.value().data[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    if (Tensor* g = slot(self, 0)) {
      for (std::size_t i = 0; i < g->data.size(); ++i) g->data[i] += self.grad.data[i];
    }
    if (Tensor* g = slot(self, 1)) {
      for (std::size_t i = 0; i < g->data.size(); ++i) g->data[i] -= self.grad.data[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_numel(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.value().data[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    const Tensor& A = self.parents[0]->value;
    const Tensor& B = self.parents[1]->value;
    if (Tensor* g = slot(self, 0)) {
      for (std::size_t i = 0; i < g->data.size(); ++i) g->data[i] += self.grad.data[i] * B.data[i];
    }
    if (Tensor* g = slot(self, 1)) {
      for (std::size_t i = 0; i < g->data.size(); ++i) g->data[i] += self.grad.data[i] * A.data[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.data) v *= s;
  return make_op(std::move(out), {a}, [s](Node& self) {
    if (Tensor* g = slot(self, 0)) {
      for (std::size_t i = 0; i < g->data.size(); ++i) g->data[i] += s * self.grad.data[i];
    }
  });
}

Var transpose(const Var& a) {
  const int r = a.rows(), c = a.cols();
  Tensor out({c, r});
  out.mat() = a.value().mat().transpose();
  return make_op(std::move(out), {a}, [](Node& self) {
    if (Tensor* g = slot(self, 0)) g->mat() += self.grad.cmat().transpose();
  });
}

Var add_row(const Var& a, const Var& b) {
  const int n = a.value().cols();
  if (b.value().numel() != n) {
    throw ShapeError("add_row: " + shape_str(a.shape()) + " + " +
                     shape_str(b.shape()));
  }
  Tensor out = a.value();
  out.mat().rowwise() +=
      Eigen::Map<const Eigen::RowVectorXd>(b.value().data.data(), n);
  return make_op(std::move(out), {a, b}, [n](Node& self) {
    if (Tensor* g = slot(self, 0)) g->mat() += self.grad.mat();
    if (Tensor* g = slot(self, 1)) {
      Eigen::Map<Eigen::RowVectorXd>(g->data.data(), n) +=
          self.grad.mat().colwise().sum();
    }
  });
}

namespace {

template <typename F, typename D>
Var pointwise(const Var& a, F f, D df) {
  Tensor out = a.value();
  for (double& v : out.data) v = f(v);
  return make_op(std::move(out), {a}, [df](Node& self) {
    const Tensor& X = self.parents[0]->value;
    if (Tensor* g = slot(self, 0)) {
      for (std::size_t i = 0; i < g->data.size(); ++i) {
        g->data[i] += self.grad.data[i] * df(X.data[i]);
      }
    }
  });
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

}  // namespace

Var gelu(const Var& a) {
  return pointwise(
      a,
      [](double x) {
        return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
      },
      [](double x) {
        const double t = std::tanh(kGeluC * (x + 0.044715 * x * x * x));
        return 0.5 * (1.0 + t) +
               0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
      });
}

Var silu(const Var& a) {
  return pointwise(
      a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

Var tanh(const Var& a) {
  return pointwise(
      a, [](double x) { return std::tanh(x); },
      [](double x) {
        const double t = std::tanh(x);
        return 1.0 - t * t;
      });
}

Var relu(const Var& a) {
  return pointwise(
      a, [](double x) { return x > 0 ? x : 0.0; },
      [](double x) { return x > 0 ? 1.0 : 0.0; });
}

Var abs(const Var& a) {
  return pointwise(
      a, [](double x) { return std::abs(x); },
      [](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var softmax_rows(const Var& a) {
  Tensor out = a.value();
  const int r = out.rows(), c = out.cols();
  for (int i = 0; i < r; ++i) {
    double* row = out.data.data() + static_cast<std::size_t>(i) * c;
    const double m = *std::max_element(row, row + c);
    double s = 0;
    for (int j = 0; j < c; ++j) {
      row[j] = std::exp(row[j] - m);
      s += row[j];
    }
    for (int j = 0; j < c; ++j) row[j] /= s;
  }
  return make_op(std::move(out), {a}, [r, c](Node& self) {
    Tensor* g = slot(self, 0);
    if (!g) return;
    const Tensor& y = self.value;
    for (int i = 0; i < r; ++i) {
      const std::size_t o = static_cast<std::size_t>(i) * c;
      double dot = 0;
      for (int j = 0; j < c; ++j) dot += self.grad.data[o + j] * y.data[o + j];
      for (int j = 0; j < c; ++j) {
        g->data[o + j] += y.data[o + j] * (self.grad.data[o + j] - dot);
      }
    }
  });
}

Var rms_norm(const Var& x, const Var& weight, double eps) {
  const Tensor& X = x.value();
  const int r = X.rows(), c = X.cols();
  if (weight.value().numel() != c) {
    throw ShapeError("rms_norm: weight " + shape_str(weight.shape()) +
                     " for input " + shape_str(X.shape));
  }
  Tensor out(X.shape);
  std::vector<double> inv(static_cast<std::size_t>(r));
  const auto& w = weight.value().data;
  for (int i = 0; i < r; ++i) {
    const std::size_t o = static_cast<std::size_t>(i) * c;
    double ss = 0;
    for (int j = 0; j < c; ++j) ss += X.data[o + j] * X.data[o + j];
    inv[i] = 1.0 / std::sqrt(ss / c + eps);
    for (int j = 0; j < c; ++j) out.data[o + j] = X.data[o + j] * inv[i] * w[j];
  }
  return make_op(std::move(out), {x, weight}, [r, c, inv](Node& self) {
    const Tensor& X = self.parents[0]->value;
    const auto& w = self.parents[1]->value.data;
    Tensor* gx = slot(self, 0);
    Tensor* gw = slot(self, 1);
    std::vector<double> gh(static_cast<std::size_t>(c));
    for (int i = 0; i < r; ++i) {
      const std::size_t o = static_cast<std::size_t>(i) * c;
      double dot = 0;
      for (int j = 0; j < c; ++j) {
        const double xh = X.data[o + j] * inv[i];
        gh[j] = self.grad.data[o + j] * w[j];
        dot += gh[j] * xh;
        if (gw) gw->data[j] += self.grad.data[o + j] * xh;
      }
      if (gx) {
        dot /= c;
        for (int j = 0; j < c; ++j) {
          gx->data[o + j] += (gh[j] - X.data[o + j] * inv[i] * dot) * inv[i];
        }
      }
    }
  });
}

Var sum_all(const Var& a) {
  double s = 0;
  for (double v : a.value().data) s += v;
  return make_op(Tensor({1}, s), {a}, [](Node& self) {
    if (Tensor* g = slot(self, 0)) {
      for (double& v : g->data) v += self.grad.data[0];
    }
  });
}

Var mean_all(const Var& a) {
  const double n = static_cast<double>(a.value().numel());
  return scale(sum_all(a), 1.0 / n);
}

Var mean_rows(const Var& a) {
  const int r = a.value().rows(), c = a.value().cols();
  Tensor out({1, c});
  Eigen::Map<Eigen::RowVectorXd>(out.data.data(), c) =
      a.value().mat().colwise().mean();
  return make_op(std::move(out), {a}, [r, c](Node& self) {
    if (Tensor* g = slot(self, 0)) {
      g->mat().rowwise() +=
          Eigen::Map<const Eigen::RowVectorXd>(self.grad.data.data(), c) /
          static_cast<double>(r);
    }
  });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_op(std::move(out), {a}, [](Node& self) {
    if (Tensor* g = slot(self, 0)) {
      for (std::size_t i = 0; i < g->data.size(); ++i) g->data[i] += self.grad.data[i];
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const int c = parts[0].value().cols();
  int total = 0;
  for (const Var& p : parts) {
    if (p.value().cols() != c) {
      throw ShapeError("concat_rows: column mismatch " + shape_str(p.shape()));
    }
    total += p.value().rows();
  }
  Tensor out(matrix_shape(total, c));
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + off);
    off += p.value().data.size();
  }
  return make_op(std::move(out), parts, [](Node& self) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      const std::size_t n = self.parents[i]->value.data.size();
      if (Tensor* g = slot(self, i)) {
        for (std::size_t j = 0; j < n; ++j) g->data[j] += self.grad.data[off + j];
      }
      off += n;
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const int r = parts[0].value().rows();
  int total = 0;
  for (const Var& p : parts) {
    if (p.value().rows() != r) {
      throw ShapeError("concat_cols: row mismatch " + shape_str(p.shape()));
    }
    total += p.value().cols();
  }
  Tensor out(matrix_shape(r, total));
  int off = 0;
  for (const Var& p : parts) {
    const int c = p.value().cols();
    out.mat().block(0, off, r, c) = p.value().mat();
    off += c;
  }
  return make_op(std::move(out), parts, [r](Node& self) {
    int off = 0;
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      const int c = self.parents[i]->value.cols();
      if (Tensor* g = slot(self, i)) g->mat() += self.grad.mat().block(0, off, r, c);
      off += c;
    }
  });
}

Var slice_rows(const Var& a, int begin, int end) {
  const Tensor& A = a.value();
  if (begin < 0 || end > A.rows() || begin > end) {
    throw LengthError("slice_rows [" + std::to_string(begin) + ", " +
                      std::to_string(end) + ") of " + shape_str(A.shape));
  }
  const int c = A.cols();
  Tensor out(matrix_shape(end - begin, c));
  std::copy(A.data.begin() + static_cast<std::ptrdiff_t>(begin) * c,
            A.data.begin() + static_cast<std::ptrdiff_t>(end) * c, out.data.begin());
  return make_op(std::move(out), {a}, [begin, c](Node& self) {
    if (Tensor* g = slot(self, 0)) {
      const std::size_t off = static_cast<std::size_t>(begin) * c;
      for (std::size_t j = 0; j < self.grad.data.size(); ++j) g->data[off + j] += self.grad.data[j];
    }
  });
}

Var gather_rows(const Var& a, const std::vector<int>& index) {
  const Tensor& A = a.value();
  const int c = A.cols();
  Tensor out(matrix_shape(static_cast<int>(index.size()), c));
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= A.rows()) {
      throw OutOfBounds("gather_rows index " + std::to_string(index[i]));
    }
    std::copy_n(A.data.begin() + static_cast<std::ptrdiff_t>(index[i]) * c, c,
                out.data.begin() + static_cast<std::ptrdiff_t>(i) * c);
  }
  return make_op(std::move(out), {a}, [index, c](Node& self) {
    if (Tensor* g = slot(self, 0)) {
      for (std::size_t i = 0; i < index.size(); ++i) {
        const std::size_t src = i * c, dst = static_cast<std::size_t>(index[i]) * c;
        for (int j = 0; j < c; ++j) g->data[dst + j] += self.grad.data[src + j];
      }
    }
  });
}

Var row_mix(const Var& a, const RowMix& mix) {
  const Tensor& A = a.value();
  if (A.rows() != mix.in_rows) {
    throw ShapeError("row_mix: expected " + std::to_string(mix.in_rows) +
                     " rows, got " + shape_str(A.shape));
  }
  const int c = A.cols();
  Tensor out(matrix_shape(static_cast<int>(mix.terms.size()), c));
  for (std::size_t i = 0; i < mix.terms.size(); ++i) {
    double* dst = out.data.data() + i * c;
    for (const auto& [j, w] : mix.terms[i]) {
      const double* src = A.data.data() + static_cast<std::size_t>(j) * c;
      for (int k = 0; k < c; ++k) dst[k] += w * src[k];
    }
  }
  return make_op(std::move(out), {a}, [mix, c](Node& self) {
    Tensor* g = slot(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < mix.terms.size(); ++i) {
      const double* src = self.grad.data.data() + i * c;
      for (const auto& [j, w] : mix.terms[i]) {
        double* dst = g->data.data() + static_cast<std::size_t>(j) * c;
        for (int k = 0; k < c; ++k) dst[k] += w * src[k];
      }
    }
  });
}

Var weighted_sum(const std::vector<Var>& states, const Var& w) {
  if (states.empty() ||
      w.value().numel() != static_cast<std::int64_t>(states.size())) {
    throw ShapeError("weighted_sum: " + std::to_string(states.size()) +
                     " states vs weights " + shape_str(w.shape()));
  }
  Tensor out(states[0].shape(), 0.0);
  for (std::size_t i = 0; i < states.size(); ++i) {
    require_same_numel(states[0], states[i], "weighted_sum");
    const double wi = w.value().data[i];
    for (std::size_t j = 0; j < out.data.size(); ++j) out.data[j] += wi * states[i].value().data[j];
  }
  std::vector<Var> parents = states;
  parents.push_back(w);
  const std::size_t L = states.size();
  return make_op(std::move(out), std::move(parents), [L](Node& self) {
    const Tensor& W = self.parents[L]->value;
    Tensor* gw = slot(self, L);
    for (std::size_t i = 0; i < L; ++i) {
      const Tensor& S = self.parents[i]->value;
      if (Tensor* g = slot(self, i)) {
        for (std::size_t j = 0; j < g->data.size(); ++j) g->data[j] += W.data[i] * self.grad.data[j];
      }
      if (gw) {
        double dot = 0;
        for (std::size_t j = 0; j < S.data.size(); ++j) dot += S.data[j] * self.grad.data[j];
        gw->data[i] += dot;
      }
    }
  });
}

void apply_rope(RowMatrix& m, int heads, double base, int offset, bool inverse) {
  const int T = static_cast<int>(m.rows());
  const int C = static_cast<int>(m.cols());
  const int dh = C / heads;
  for (int t = 0; t < T; ++t) {
    const double pos = static_cast<double>(offset + t);
    for (int h = 0; h < heads; ++h) {
      for (int j = 0; j < dh / 2; ++j) {
        const double theta = pos * std::pow(base, -2.0 * j / dh);
        const double cs = std::cos(theta);
        const double sn = inverse ? -std::sin(theta) : std::sin(theta);
        const int c0 = h * dh + 2 * j;
        const double x0 = m(t, c0), x1 = m(t, c0 + 1);
        m(t, c0) = x0 * cs - x1 * sn;
        m(t, c0 + 1) = x0 * sn + x1 * cs;
      }
    }
  }
}

Var causal_attention(const Var& q, const Var& k, const Var& v, int heads,
                     double rope_base, int position_offset) {
  const int T = q.value().rows();
  const int C = q.value().cols();
  if (k.value().rows() != T || v.value().rows() != T || k.value().cols() != C ||
      v.value().cols() != C) {
    throw ShapeError("causal_attention: q " + shape_str(q.shape()) + " k " +
                     shape_str(k.shape()) + " v " + shape_str(v.shape()));
  }
  if (heads <= 0 || C % heads != 0 || (C / heads) % 2 != 0) {
    throw ShapeError("causal_attention: width " + std::to_string(C) +
                     " not divisible into " + std::to_string(heads) +
                     " even-width heads");
  }
  const int dh = C / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  auto qr = std::make_shared<RowMatrix>(q.value().mat());
  auto kr = std::make_shared<RowMatrix>(k.value().mat());
  apply_rope(*qr, heads, rope_base, position_offset, false);
  apply_rope(*kr, heads, rope_base, position_offset, false);
  auto probs = std::make_shared<std::vector<RowMatrix>>(heads);
  Tensor out({T, C});
  const ConstMatMap V = v.value().mat();
  for (int h = 0; h < heads; ++h) {
    RowMatrix s = qr->middleCols(h * dh, dh) * kr->middleCols(h * dh, dh).transpose();
    s *= inv_sqrt;
    for (int i = 0; i < T; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (int j = 0; j <= i; ++j) m = std::max(m, s(i, j));
      double z = 0;
      for (int j = 0; j <= i; ++j) {
        s(i, j) = std::exp(s(i, j) - m);
        z += s(i, j);
      }
      for (int j = 0; j <= i; ++j) s(i, j) /= z;
      for (int j = i + 1; j < T; ++j) s(i, j) = 0.0;
    }
    out.mat().middleCols(h * dh, dh).noalias() = s * V.middleCols(h * dh, dh);
    (*probs)[h] = std::move(s);
  }
  return make_op(std::move(out), {q, k, v},
                 [=](Node& self) {
                   const ConstMatMap V = self.parents[2]->value.cmat();
                   const ConstMatMap G = self.grad.cmat();
                   RowMatrix dq = RowMatrix::Zero(T, C);
                   RowMatrix dk = RowMatrix::Zero(T, C);
                   RowMatrix dv = RowMatrix::Zero(T, C);
                   for (int h = 0; h < heads; ++h) {
                     const RowMatrix& P = (*probs)[h];
                     dv.middleCols(h * dh, dh).noalias() = P.transpose() * G.middleCols(h * dh, dh);
                     RowMatrix dp = G.middleCols(h * dh, dh) * V.middleCols(h * dh, dh).transpose();
                     for (int i = 0; i < T; ++i) {
                       double dot = 0;
                       for (int j = 0; j <= i; ++j) dot += dp(i, j) * P(i, j);
                       for (int j = 0; j < T; ++j) {
                         dp(i, j) = j <= i ? P(i, j) * (dp(i, j) - dot) * inv_sqrt : 0.0;
                       }
                     }
                     dq.middleCols(h * dh, dh).noalias() = dp * kr->middleCols(h * dh, dh);
                     dk.middleCols(h * dh, dh).noalias() = dp.transpose() * qr->middleCols(h * dh, dh);
                   }
                   apply_rope(dq, heads, rope_base, position_offset, true);
                   apply_rope(dk, heads, rope_base, position_offset, true);
                   if (Tensor* g = slot(self, 0)) g->mat() += dq;
                   if (Tensor* g = slot(self, 1)) g->mat() += dk;
                   if (Tensor* g = slot(self, 2)) g->mat() += dv;
                 });
}

Tensor grouped_attention_weights(const Tensor& q, const Tensor& k, int group,
                                 int heads) {
  const int N = q.rows();
  const int C = q.cols();
  if (heads <= 0 || C % heads != 0) {
    throw ShapeError("grouped attention: width " + std::to_string(C) +
                     " not divisible by heads " + std::to_string(heads));
  }
  if (k.rows() != N * group || k.cols() != C) {
    throw ShapeError("grouped attention: q " + shape_str(q.shape) + " k " +
                     shape_str(k.shape) + " group " + std::to_string(group));
  }
  const int dh = C / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor a({N * heads, group});
  for (int n = 0; n < N; ++n) {
    for (int h = 0; h < heads; ++h) {
      double* row = a.data.data() + static_cast<std::size_t>(n * heads + h) * group;
      double m = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < group; ++j) {
        double s = 0;
        for (int c = 0; c < dh; ++c) s += q.at(n, h * dh + c) * k.at(n * group + j, h * dh + c);
        row[j] = s * inv_sqrt;
        m = std::max(m, row[j]);
      }
      double z = 0;
      for (int j = 0; j < group; ++j) {
        row[j] = std::exp(row[j] - m);
        z += row[j];
      }
      for (int j = 0; j < group; ++j) row[j] /= z;
    }
  }
  return a;
}

Var grouped_query_attention(const Var& q, const Var& k, const Var& v,
                            int group, int heads) {
  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  const Tensor& Vt = v.value();
  if (Vt.rows() != K.rows() || Vt.cols() != K.cols()) {
    throw ShapeError("grouped attention: k " + shape_str(K.shape) + " v " +
                     shape_str(Vt.shape));
  }
  auto attn = std::make_shared<Tensor>(grouped_attention_weights(Q, K, group, heads));
  const int N = Q.rows();
  const int C = Q.cols();
  const int dh = C / heads;
  Tensor out({N, C});
  for (int n = 0; n < N; ++n) {
    for (int h = 0; h < heads; ++h) {
      const double* a = attn->data.data() + static_cast<std::size_t>(n * heads + h) * group;
      for (int j = 0; j < group; ++j) {
        for (int c = 0; c < dh; ++c) out.at(n, h * dh + c) += a[j] * Vt.at(n * group + j, h * dh + c);
      }
    }
  }
  return make_op(std::move(out), {q, k, v}, [=](Node& self) {
    const Tensor& Q = self.parents[0]->value;
    const Tensor& K = self.parents[1]->value;
    const Tensor& Vt = self.parents[2]->value;
    Tensor* gq = slot(self, 0);
    Tensor* gk = slot(self, 1);
    Tensor* gv = slot(self, 2);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> ds(static_cast<std::size_t>(group));
    for (int n = 0; n < N; ++n) {
      for (int h = 0; h < heads; ++h) {
        const double* a = attn->data.data() + static_cast<std::size_t>(n * heads + h) * group;
        double dot = 0;
        for (int j = 0; j < group; ++j) {
          double da = 0;
          for (int c = 0; c < dh; ++c) {
            const double g = self.grad.at(n, h * dh + c);
            da += g * Vt.at(n * group + j, h * dh + c);
            if (gv) gv->at(n * group + j, h * dh + c) += a[j] * g;
          }
          ds[j] = da;
          dot += a[j] * da;
        }
        for (int j = 0; j < group; ++j) {
          const double s = a[j] * (ds[j] - dot) * inv_sqrt;
          for (int c = 0; c < dh; ++c) {
            if (gq) gq->at(n, h * dh + c) += s * K.at(n * group + j, h * dh + c);
            if (gk) gk->at(n * group + j, h * dh + c) += s * Q.at(n, h * dh + c);
          }
        }
      }
    }
  });
}

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> nd(0.0, stddev);
  for (double& v : t.data) v = nd(rng);
  return t;
}

}  // namespace vla4d::ad
