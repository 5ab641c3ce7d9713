#include "transrad/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace transrad::ad {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

// Result node for an op; history is attached only when some input needs it.
std::shared_ptr<Node> make_result(Shape shape, std::vector<double> value,
                                  std::initializer_list<const Tensor*> inputs) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (!g_grad_enabled) return node;
  for (const Tensor* in : inputs) {
    if (in != nullptr && *in && in->requires_grad()) {
      node->requires_grad = true;
      break;
    }
  }
  if (node->requires_grad) {
    for (const Tensor* in : inputs) {
      node->parents.push_back(in != nullptr && *in ? in->node() : nullptr);
    }
  }
  return node;
}

bool wants(const Node& self, std::size_t i) {
  return i < self.parents.size() && self.parents[i] && self.parents[i]->requires_grad;
}

void require(bool cond, const std::string& what) {
  if (!cond) throw std::invalid_argument(what);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

struct Dims4 {
  int n, c, h, w;
};

Dims4 dims4(const Tensor& x, const char* op) {
  if (x.ndim() != 4) {
    throw std::invalid_argument(std::string(op) + ": expected [N, C, H, W], got " +
                                shape_str(x.shape()));
  }
  return {x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
}

template <class F>
Tensor unary(const Tensor& x, F&& f) {
  // f(v) -> pair(value, derivative)
  std::vector<double> out(x.values().size());
  std::vector<double> deriv;
  const bool record = g_grad_enabled && x.requires_grad();
  if (record) deriv.resize(out.size());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto [v, d] = f(xv[i]);
    out[i] = v;
    if (record) deriv[i] = d;
  }
  auto node = make_result(x.shape(), std::move(out), {&x});
  if (node->requires_grad) {
    node->backward = [deriv = std::move(deriv)](Node& self) {
      auto& p = *self.parents[0];
      p.ensure_grad();
      for (std::size_t i = 0; i < deriv.size(); ++i) p.grad[i] += self.grad[i] * deriv[i];
    };
  }
  return Tensor::wrap(node);
}

}  // namespace

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw std::invalid_argument("Tensor: " + std::to_string(values.size()) +
                                " values do not fill shape " + shape_str(shape));
  }
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = static_cast<std::size_t>(numel(shape));
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  auto n = static_cast<std::size_t>(numel(shape));
  return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
}

Tensor Tensor::wrap(std::shared_ptr<Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

int Tensor::dim(int i) const {
  if (i < 0) i += ndim();
  return node_->shape.at(static_cast<std::size_t>(i));
}

std::span<const double> Tensor::grad() const { return node_->grad; }

std::span<double> Tensor::grad_mut() {
  node_->ensure_grad();
  return node_->grad;
}

double Tensor::item() const {
  if (node_->value.size() != 1) throw std::logic_error("item() on non-scalar tensor");
  return node_->value[0];
}

void Tensor::zero_grad() const {
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->value, false); }

void Tensor::backward(double seed) const {
  if (node_->value.size() != 1) throw std::logic_error("backward(seed) needs a scalar");
  const double s[1] = {seed};
  backward(std::span<const double>(s, 1));
}

void Tensor::backward(std::span<const double> seed) const {
  if (seed.size() != node_->value.size()) throw std::invalid_argument("backward: seed size");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS to get a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (p != nullptr && p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->ensure_grad();
  for (std::size_t i = 0; i < seed.size(); ++i) node_->grad[i] += seed[i];
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  // Intermediate gradients are not needed after the pass.
  for (Node* n : order) {
    if (n != node_.get() && n->backward) {
      std::vector<double>().swap(n->grad);
    }
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  auto node = make_result(a.shape(), std::move(out), {&a, &b});
  if (node->requires_grad) {
    node->backward = [](Node& self) {
      for (std::size_t k = 0; k < 2; ++k) {
        if (!wants(self, k)) continue;
        auto& p = *self.parents[k];
        p.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
      }
    };
  }
  return Tensor::wrap(node);
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.values().size());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto node = make_result(a.shape(), std::move(out), {&a, &b});
  if (node->requires_grad) {
    node->backward = [](Node& self) {
      const auto& av = self.parents[0]->value;
      const auto& bv = self.parents[1]->value;
      if (wants(self, 0)) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * bv[i];
      }
      if (wants(self, 1)) {
        auto& p = *self.parents[1];
        p.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * av[i];
      }
    };
  }
  return Tensor::wrap(node);
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double v) { return std::pair{v * s, s}; });
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary(x, [](double v) {
    const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
    return std::pair{v * cdf, cdf + v * pdf};
  });
}

Tensor silu(const Tensor& x) {
  return unary(x, [](double v) {
    const double s = 1.0 / (1.0 + std::exp(-v));
    return std::pair{v * s, s * (1.0 + v * (1.0 - s))};
  });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x, [](double v) {
    const double s = 1.0 / (1.0 + std::exp(-v));
    return std::pair{s, s * (1.0 - s)};
  });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  auto xv = x.values();
  double s = std::accumulate(xv.begin(), xv.end(), 0.0);
  auto node = make_result({1}, {s}, {&x});
  if (node->requires_grad) {
    node->backward = [](Node& self) {
      auto& p = *self.parents[0];
      p.ensure_grad();
      for (double& g : p.grad) g += self.grad[0];
    };
  }
  return Tensor::wrap(node);
}

Tensor dot_const(const Tensor& x, std::span<const double> w) {
  require(static_cast<std::int64_t>(w.size()) == x.size(), "dot_const: size mismatch");
  auto xv = x.values();
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += xv[i] * w[i];
  auto node = make_result({1}, {s}, {&x});
  if (node->requires_grad) {
    node->backward = [wv = std::vector<double>(w.begin(), w.end())](Node& self) {
      auto& p = *self.parents[0];
      p.ensure_grad();
      for (std::size_t i = 0; i < wv.size(); ++i) p.grad[i] += self.grad[0] * wv[i];
    };
  }
  return Tensor::wrap(node);
}

// ---------------------------------------------------------------------------
// Layout

Tensor reshape(const Tensor& x, Shape shape) {
  require(numel(shape) == x.size(),
          "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<double> out(x.values().begin(), x.values().end());
  auto node = make_result(std::move(shape), std::move(out), {&x});
  if (node->requires_grad) {
    node->backward = [](Node& self) {
      auto& p = *self.parents[0];
      p.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    };
  }
  return Tensor::wrap(node);
}

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  const int nd = x.ndim();
  require(static_cast<int>(perm.size()) == nd, "permute: rank mismatch");
  Shape out_shape(nd);
  std::vector<std::int64_t> in_stride(nd), src_stride(nd);
  std::int64_t s = 1;
  for (int i = nd - 1; i >= 0; --i) {
    in_stride[i] = s;
    s *= x.dim(i);
  }
  for (int i = 0; i < nd; ++i) {
    out_shape[i] = x.dim(perm[i]);
    src_stride[i] = in_stride[perm[i]];
  }
  // Source offset for each output element, shared with backward.
  const auto total = x.size();
  auto index = std::make_shared<std::vector<std::int64_t>>(total);
  std::vector<int> counter(nd, 0);
  std::int64_t off = 0;
  for (std::int64_t i = 0; i < total; ++i) {
    (*index)[i] = off;
    for (int d = nd - 1; d >= 0; --d) {
      off += src_stride[d];
      if (++counter[d] < out_shape[d]) break;
      off -= src_stride[d] * out_shape[d];
      counter[d] = 0;
    }
  }
  std::vector<double> out(total);
  auto xv = x.values();
  for (std::int64_t i = 0; i < total; ++i) out[i] = xv[(*index)[i]];
  auto node = make_result(std::move(out_shape), std::move(out), {&x});
  if (node->requires_grad) {
    node->backward = [index](Node& self) {
      auto& p = *self.parents[0];
      p.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[(*index)[i]] += self.grad[i];
    };
  }
  return Tensor::wrap(node);
}

Tensor concat_channels(const std::vector<Tensor>& xs) {
  require(!xs.empty(), "concat_channels: no inputs");
  const auto d0 = dims4(xs[0], "concat_channels");
  int total_c = 0;
  for (const auto& x : xs) {
    const auto d = dims4(x, "concat_channels");
    require(d.n == d0.n && d.h == d0.h && d.w == d0.w, "concat_channels: spatial mismatch");
    total_c += d.c;
  }
  const std::int64_t hw = static_cast<std::int64_t>(d0.h) * d0.w;
  std::vector<double> out(static_cast<std::size_t>(d0.n) * total_c * hw);
  std::vector<int> offsets;
  int c_off = 0;
  for (const auto& x : xs) {
    offsets.push_back(c_off);
    const int c = x.dim(1);
    auto xv = x.values();
    for (int n = 0; n < d0.n; ++n) {
      std::copy_n(xv.begin() + static_cast<std::int64_t>(n) * c * hw, c * hw,
                  out.begin() + (static_cast<std::int64_t>(n) * total_c + c_off) * hw);
    }
    c_off += c;
  }
  auto node = std::make_shared<Node>();
  node->shape = {d0.n, total_c, d0.h, d0.w};
  node->value = std::move(out);
  if (g_grad_enabled) {
    for (const auto& x : xs) node->requires_grad |= x.requires_grad();
  }
  if (node->requires_grad) {
    std::vector<int> channels;
    for (const auto& x : xs) {
      node->parents.push_back(x.node());
      channels.push_back(x.dim(1));
    }
    node->backward = [offsets, channels, hw, total_c, n_batch = d0.n](Node& self) {
      for (std::size_t k = 0; k < channels.size(); ++k) {
        if (!wants(self, k)) continue;
        auto& p = *self.parents[k];
        p.ensure_grad();
        const int c = channels[k];
        for (int n = 0; n < n_batch; ++n) {
          const double* src = self.grad.data() + (static_cast<std::int64_t>(n) * total_c + offsets[k]) * hw;
          double* dst = p.grad.data() + static_cast<std::int64_t>(n) * c * hw;
          for (std::int64_t i = 0; i < c * hw; ++i) dst[i] += src[i];
        }
      }
    };
  }
  return Tensor::wrap(node);
}

Tensor slice_channels(const Tensor& x, int start, int count) {
  const auto d = dims4(x, "slice_channels");
  require(start >= 0 && count > 0 && start + count <= d.c, "slice_channels: range");
  const std::int64_t hw = static_cast<std::int64_t>(d.h) * d.w;
  std::vector<double> out(static_cast<std::size_t>(d.n) * count * hw);
  auto xv = x.values();
  for (int n = 0; n < d.n; ++n) {
    std::copy_n(xv.begin() + (static_cast<std::int64_t>(n) * d.c + start) * hw, count * hw,
                out.begin() + static_cast<std::int64_t>(n) * count * hw);
  }
  auto node = make_result({d.n, count, d.h, d.w}, std::move(out), {&x});
  if (node->requires_grad) {
    node->backward = [d, start, count, hw](Node& self) {
      auto& p = *self.parents[0];
      p.ensure_grad();
      for (int n = 0; n < d.n; ++n) {
        const double* src = self.grad.data() + static_cast<std::int64_t>(n) * count * hw;
        double* dst = p.grad.data() + (static_cast<std::int64_t>(n) * d.c + start) * hw;
        for (std::int64_t i = 0; i < count * hw; ++i) dst[i] += src[i];
      }
    };
  }
  return Tensor::wrap(node);
}

Tensor upsample_nearest2x(const Tensor& x) {
  const auto d = dims4(x, "upsample_nearest2x");
  const int ho = d.h * 2, wo = d.w * 2;
  std::vector<double> out(static_cast<std::size_t>(d.n) * d.c * ho * wo);
  auto xv = x.values();
  for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(d.n) * d.c; ++nc) {
    const double* src = xv.data() + nc * d.h * d.w;
    double* dst = out.data() + nc * ho * wo;
    for (int i = 0; i < ho; ++i)
      for (int j = 0; j < wo; ++j) dst[i * wo + j] = src[(i / 2) * d.w + j / 2];
  }
  auto node = make_result({d.n, d.c, ho, wo}, std::move(out), {&x});
  if (node->requires_grad) {
    node->backward = [d, ho, wo](Node& self) {
      auto& p = *self.parents[0];
      p.ensure_grad();
      for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(d.n) * d.c; ++nc) {
        const double* src = self.grad.data() + nc * ho * wo;
        double* dst = p.grad.data() + nc * d.h * d.w;
        for (int i = 0; i < ho; ++i)
          for (int j = 0; j < wo; ++j) dst[(i / 2) * d.w + j / 2] += src[i * wo + j];
      }
    };
  }
  return Tensor::wrap(node);
}

// ---------------------------------------------------------------------------
// Matrix products and attention

Tensor matmul(const Tensor& a_in, const Tensor& b_in, bool transpose_b) {
  Tensor a = a_in.ndim() == 2 ? reshape(a_in, {1, a_in.dim(0), a_in.dim(1)}) : a_in;
  Tensor b = b_in.ndim() == 2 ? reshape(b_in, {1, b_in.dim(0), b_in.dim(1)}) : b_in;
  require(a.ndim() == 3 && b.ndim() == 3, "matmul: expected rank 2 or 3 operands");
  const int batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  require(b.dim(0) == batch, "matmul: batch mismatch");
  const int n = transpose_b ? b.dim(1) : b.dim(2);
  require((transpose_b ? b.dim(2) : b.dim(1)) == k,
          "matmul: inner dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(static_cast<std::size_t>(batch) * m * n);
  const auto bk = static_cast<std::int64_t>(transpose_b ? n : k);
  const auto bn = static_cast<std::int64_t>(transpose_b ? k : n);
  for (int i = 0; i < batch; ++i) {
    ConstMapMat am(a.values().data() + static_cast<std::int64_t>(i) * m * k, m, k);
    ConstMapMat bm(b.values().data() + static_cast<std::int64_t>(i) * bk * bn, bk, bn);
    MapMat cm(out.data() + static_cast<std::int64_t>(i) * m * n, m, n);
    if (transpose_b) {
      cm.noalias() = am * bm.transpose();
    } else {
      cm.noalias() = am * bm;
    }
  }
  Shape shape = (a_in.ndim() == 2 && b_in.ndim() == 2) ? Shape{m, n} : Shape{batch, m, n};
  auto node = make_result(std::move(shape), std::move(out), {&a, &b});
  if (node->requires_grad) {
    node->backward = [batch, m, k, n, bk, bn, transpose_b](Node& self) {
      const auto& av = self.parents[0]->value;
      const auto& bv = self.parents[1]->value;
      if (wants(self, 0)) self.parents[0]->ensure_grad();
      if (wants(self, 1)) self.parents[1]->ensure_grad();
      for (int i = 0; i < batch; ++i) {
        ConstMapMat g(self.grad.data() + static_cast<std::int64_t>(i) * m * n, m, n);
        ConstMapMat am(av.data() + static_cast<std::int64_t>(i) * m * k, m, k);
        ConstMapMat bm(bv.data() + static_cast<std::int64_t>(i) * bk * bn, bk, bn);
        if (wants(self, 0)) {
          MapMat ga(self.parents[0]->grad.data() + static_cast<std::int64_t>(i) * m * k, m, k);
          if (transpose_b) {
            ga.noalias() += g * bm;
          } else {
            ga.noalias() += g * bm.transpose();
          }
        }
        if (wants(self, 1)) {
          MapMat gb(self.parents[1]->grad.data() + static_cast<std::int64_t>(i) * bk * bn, bk, bn);
          if (transpose_b) {
            gb.noalias() += g.transpose() * am;
          } else {
            gb.noalias() += am.transpose() * g;
          }
        }
      }
    };
  }
  return Tensor::wrap(node);
}

Tensor decay_attention(const Tensor& scores, std::shared_ptr<const std::vector<double>> decay,
                       int groups, int inner, bool apply_softmax) {
  require(scores.ndim() == 3, "decay_attention: scores must be [B, T, S]");
  const int batch = scores.dim(0), t = scores.dim(1), s = scores.dim(2);
  const std::int64_t mat = static_cast<std::int64_t>(t) * s;
  require(groups >= 1 && inner >= 1, "decay_attention: groups/inner must be positive");
  require(static_cast<std::int64_t>(decay->size()) == groups * mat,
          "decay_attention: decay has wrong size");
  auto sv = scores.values();
  // probs holds the pre-decay weights (softmax output or raw scores).
  auto probs = std::make_shared<std::vector<double>>(sv.begin(), sv.end());
  if (apply_softmax) {
    for (std::int64_t r = 0; r < static_cast<std::int64_t>(batch) * t; ++r) {
      double* row = probs->data() + r * s;
      const double mx = *std::max_element(row, row + s);
      double z = 0.0;
      for (int j = 0; j < s; ++j) z += (row[j] = std::exp(row[j] - mx));
      for (int j = 0; j < s; ++j) row[j] /= z;
    }
  }
  std::vector<double> out(probs->size());
  for (int b = 0; b < batch; ++b) {
    const double* dm = decay->data() + ((b / inner) % groups) * mat;
    const double* pm = probs->data() + b * mat;
    double* om = out.data() + b * mat;
    for (std::int64_t i = 0; i < mat; ++i) om[i] = pm[i] * dm[i];
  }
  auto node = make_result(scores.shape(), std::move(out), {&scores});
  if (node->requires_grad) {
    node->backward = [probs, decay, groups, inner, apply_softmax, batch, t, s, mat](Node& self) {
      auto& p = *self.parents[0];
      p.ensure_grad();
      std::vector<double> g(static_cast<std::size_t>(s));
      for (int b = 0; b < batch; ++b) {
        const double* dm = decay->data() + ((b / inner) % groups) * mat;
        for (int i = 0; i < t; ++i) {
          const std::int64_t row = b * mat + static_cast<std::int64_t>(i) * s;
          double dotp = 0.0;
          for (int j = 0; j < s; ++j) {
            g[j] = self.grad[row + j] * dm[i * s + j];
            dotp += g[j] * (*probs)[row + j];
          }
          for (int j = 0; j < s; ++j) {
            p.grad[row + j] += apply_softmax ? (*probs)[row + j] * (g[j] - dotp) : g[j];
          }
        }
      }
    };
  }
  return Tensor::wrap(node);
}

Tensor rotate_pairs(const Tensor& x, std::span<const double> theta, double sign) {
  require(x.ndim() == 2, "rotate_pairs: expected [T, d]");
  const int t = x.dim(0), d = x.dim(1);
  require(d % 2 == 0 && static_cast<int>(theta.size()) == d / 2,
          "rotate_pairs: need an even feature width and one angle per pair");
  auto cs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(t) * d);
  for (int n = 0; n < t; ++n) {
    for (int j = 0; j < d / 2; ++j) {
      const double ang = sign * n * theta[j];
      (*cs)[n * d + 2 * j] = std::cos(ang);
      (*cs)[n * d + 2 * j + 1] = std::sin(ang);
    }
  }
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (int n = 0; n < t; ++n) {
    for (int j = 0; j < d / 2; ++j) {
      const double c = (*cs)[n * d + 2 * j], s = (*cs)[n * d + 2 * j + 1];
      const double re = xv[n * d + 2 * j], im = xv[n * d + 2 * j + 1];
      out[n * d + 2 * j] = re * c - im * s;
      out[n * d + 2 * j + 1] = re * s + im * c;
    }
  }
  auto node = make_result(x.shape(), std::move(out), {&x});
  if (node->requires_grad) {
    node->backward = [cs, t, d](Node& self) {
      auto& p = *self.parents[0];
      p.ensure_grad();
      for (int n = 0; n < t; ++n) {
        for (int j = 0; j < d / 2; ++j) {
          const double c = (*cs)[n * d + 2 * j], s = (*cs)[n * d + 2 * j + 1];
          const double gr = self.grad[n * d + 2 * j], gi = self.grad[n * d + 2 * j + 1];
          p.grad[n * d + 2 * j] += gr * c + gi * s;
          p.grad[n * d + 2 * j + 1] += -gr * s + gi * c;
        }
      }
    };
  }
  return Tensor::wrap(node);
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeom {
  int n, ci, h, w, co, k, stride, pad, ho, wo;
  std::int64_t kk() const { return static_cast<std::int64_t>(ci) * k * k; }
};

// Columns for output rows [row0, row0 + rows) of one sample.
void im2col(const double* x, const ConvGeom& g, int row0, int rows, double* cols) {
  const std::int64_t p = static_cast<std::int64_t>(rows) * g.wo;
  for (int c = 0; c < g.ci; ++c) {
    const double* xc = x + static_cast<std::int64_t>(c) * g.h * g.w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        double* dst = cols + ((static_cast<std::int64_t>(c) * g.k + ky) * g.k + kx) * p;
        for (int oy = 0; oy < rows; ++oy) {
          const int iy = (row0 + oy) * g.stride - g.pad + ky;
          double* drow = dst + static_cast<std::int64_t>(oy) * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill_n(drow, g.wo, 0.0);
            continue;
          }
          const double* srow = xc + static_cast<std::int64_t>(iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            drow[ox] = (ix >= 0 && ix < g.w) ? srow[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeom& g, int row0, int rows, double* dx) {
  const std::int64_t p = static_cast<std::int64_t>(rows) * g.wo;
  for (int c = 0; c < g.ci; ++c) {
    double* xc = dx + static_cast<std::int64_t>(c) * g.h * g.w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const double* src = cols + ((static_cast<std::int64_t>(c) * g.k + ky) * g.k + kx) * p;
        for (int oy = 0; oy < rows; ++oy) {
          const int iy = (row0 + oy) * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          const double* srow = src + static_cast<std::int64_t>(oy) * g.wo;
          double* drow = xc + static_cast<std::int64_t>(iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) drow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

int chunk_rows(const ConvGeom& g) {
  constexpr std::int64_t kMaxColumnElems = std::int64_t{1} << 22;
  const std::int64_t per_row = g.kk() * g.wo;
  return static_cast<int>(std::clamp<std::int64_t>(kMaxColumnElems / std::max<std::int64_t>(per_row, 1),
                                                   1, g.ho));
}

bool is_pointwise(const ConvGeom& g) { return g.k == 1 && g.stride == 1 && g.pad == 0; }

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
  const auto d = dims4(x, "conv2d");
  require(w.ndim() == 4 && w.dim(1) == d.c && w.dim(2) == w.dim(3),
          "conv2d: weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
  require(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
  ConvGeom g{d.n, d.c, d.h, d.w, w.dim(0), w.dim(2), stride, pad, 0, 0};
  g.ho = (d.h + 2 * pad - g.k) / stride + 1;
  g.wo = (d.w + 2 * pad - g.k) / stride + 1;
  require(g.ho > 0 && g.wo > 0, "conv2d: output would be empty");
  if (bias) require(bias.size() == g.co, "conv2d: bias size");

  const std::int64_t in_sz = static_cast<std::int64_t>(g.ci) * g.h * g.w;
  const std::int64_t out_hw = static_cast<std::int64_t>(g.ho) * g.wo;
  std::vector<double> out(static_cast<std::size_t>(g.n) * g.co * out_hw);
  ConstMapMat wm(w.values().data(), g.co, g.kk());
  const int rows_per = chunk_rows(g);
  std::vector<double> cols;
  for (int n = 0; n < g.n; ++n) {
    const double* xn = x.values().data() + n * in_sz;
    double* on = out.data() + static_cast<std::int64_t>(n) * g.co * out_hw;
    if (is_pointwise(g)) {
      ConstMapMat xm(xn, g.ci, out_hw);
      MapMat om(on, g.co, out_hw);
      om.noalias() = wm * xm;
    } else {
      for (int r0 = 0; r0 < g.ho; r0 += rows_per) {
        const int rows = std::min(rows_per, g.ho - r0);
        const std::int64_t p = static_cast<std::int64_t>(rows) * g.wo;
        cols.resize(static_cast<std::size_t>(g.kk() * p));
        im2col(xn, g, r0, rows, cols.data());
        ConstMapMat cm(cols.data(), g.kk(), p);
        StridedMap om(on + static_cast<std::int64_t>(r0) * g.wo, g.co, p, Eigen::OuterStride<>(out_hw));
        om.noalias() = wm * cm;
      }
    }
    if (bias) {
      for (int c = 0; c < g.co; ++c) {
        const double bc = bias.values()[c];
        double* oc = on + c * out_hw;
        for (std::int64_t i = 0; i < out_hw; ++i) oc[i] += bc;
      }
    }
  }

  auto node = make_result({g.n, g.co, g.ho, g.wo}, std::move(out), {&x, &w, &bias});
  if (node->requires_grad) {
    node->backward = [g, in_sz, out_hw, rows_per](Node& self) {
      const auto& xv = self.parents[0]->value;
      const auto& wv = self.parents[1]->value;
      const bool gx = wants(self, 0), gw = wants(self, 1), gb = wants(self, 2);
      if (gx) self.parents[0]->ensure_grad();
      if (gw) self.parents[1]->ensure_grad();
      if (gb) self.parents[2]->ensure_grad();
      ConstMapMat wm(wv.data(), g.co, g.kk());
      std::vector<double> cols, dcols;
      for (int n = 0; n < g.n; ++n) {
        const double* xn = xv.data() + n * in_sz;
        const double* gn = self.grad.data() + static_cast<std::int64_t>(n) * g.co * out_hw;
        if (gb) {
          auto& bg = self.parents[2]->grad;
          for (int c = 0; c < g.co; ++c) {
            const double* gc = gn + c * out_hw;
            double s = 0.0;
            for (std::int64_t i = 0; i < out_hw; ++i) s += gc[i];
            bg[c] += s;
          }
        }
        if (is_pointwise(g)) {
          ConstMapMat gm(gn, g.co, out_hw);
          if (gw) {
            MapMat wg(self.parents[1]->grad.data(), g.co, g.kk());
            wg.noalias() += gm * ConstMapMat(xn, g.ci, out_hw).transpose();
          }
          if (gx) {
            MapMat xg(self.parents[0]->grad.data() + n * in_sz, g.ci, out_hw);
            xg.noalias() += wm.transpose() * gm;
          }
          continue;
        }
        for (int r0 = 0; r0 < g.ho; r0 += rows_per) {
          const int rows = std::min(rows_per, g.ho - r0);
          const std::int64_t p = static_cast<std::int64_t>(rows) * g.wo;
          ConstStridedMap gm(gn + static_cast<std::int64_t>(r0) * g.wo, g.co, p,
                             Eigen::OuterStride<>(out_hw));
          if (gw) {
            cols.resize(static_cast<std::size_t>(g.kk() * p));
            im2col(xn, g, r0, rows, cols.data());
            MapMat wg(self.parents[1]->grad.data(), g.co, g.kk());
            wg.noalias() += gm * ConstMapMat(cols.data(), g.kk(), p).transpose();
          }
          if (gx) {
            dcols.resize(static_cast<std::size_t>(g.kk() * p));
            MapMat dc(dcols.data(), g.kk(), p);
            dc.noalias() = wm.transpose() * gm;
            col2im_add(dcols.data(), g, r0, rows, self.parents[0]->grad.data() + n * in_sz);
          }
        }
      }
    };
  }
  return Tensor::wrap(node);
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int pad,
                        PadMode mode) {
  const auto d = dims4(x, "depthwise_conv2d");
  require(w.ndim() == 4 && w.dim(0) == d.c && w.dim(1) == 1 && w.dim(2) == w.dim(3),
          "depthwise_conv2d: weight " + shape_str(w.shape()) + " incompatible with input " +
              shape_str(x.shape()));
  const int k = w.dim(2);
  const int ho = d.h + 2 * pad - k + 1, wo = d.w + 2 * pad - k + 1;
  require(ho > 0 && wo > 0, "depthwise_conv2d: output would be empty");
  if (bias) require(bias.size() == d.c, "depthwise_conv2d: bias size");

  // Source index per (output pixel, tap); -1 marks zero padding.
  auto src = std::make_shared<std::vector<int>>(static_cast<std::size_t>(ho) * wo * k * k);
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          int iy = oy - pad + ky, ix = ox - pad + kx;
          int idx = -1;
          if (mode == PadMode::kReplicate) {
            iy = std::clamp(iy, 0, d.h - 1);
            ix = std::clamp(ix, 0, d.w - 1);
            idx = iy * d.w + ix;
          } else if (iy >= 0 && iy < d.h && ix >= 0 && ix < d.w) {
            idx = iy * d.w + ix;
          }
          (*src)[((static_cast<std::size_t>(oy) * wo + ox) * k + ky) * k + kx] = idx;
        }
      }
    }
  }
  const std::int64_t in_hw = static_cast<std::int64_t>(d.h) * d.w;
  const std::int64_t out_hw = static_cast<std::int64_t>(ho) * wo;
  const int taps = k * k;
  std::vector<double> out(static_cast<std::size_t>(d.n) * d.c * out_hw);
  auto xv = x.values();
  auto wv = w.values();
  for (int n = 0; n < d.n; ++n) {
    for (int c = 0; c < d.c; ++c) {
      const double* xc = xv.data() + (static_cast<std::int64_t>(n) * d.c + c) * in_hw;
      const double* wc = wv.data() + static_cast<std::int64_t>(c) * taps;
      double* oc = out.data() + (static_cast<std::int64_t>(n) * d.c + c) * out_hw;
      const double bc = bias ? bias.values()[c] : 0.0;
      for (std::int64_t o = 0; o < out_hw; ++o) {
        const int* s = src->data() + o * taps;
        double acc = bc;
        for (int t = 0; t < taps; ++t) {
          if (s[t] >= 0) acc += wc[t] * xc[s[t]];
        }
        oc[o] = acc;
      }
    }
  }
  auto node = make_result({d.n, d.c, ho, wo}, std::move(out), {&x, &w, &bias});
  if (node->requires_grad) {
    node->backward = [src, d, in_hw, out_hw, taps](Node& self) {
      const auto& xv = self.parents[0]->value;
      const auto& wv = self.parents[1]->value;
      const bool gx = wants(self, 0), gw = wants(self, 1), gb = wants(self, 2);
      if (gx) self.parents[0]->ensure_grad();
      if (gw) self.parents[1]->ensure_grad();
      if (gb) self.parents[2]->ensure_grad();
      for (int n = 0; n < d.n; ++n) {
        for (int c = 0; c < d.c; ++c) {
          const std::int64_t in_off = (static_cast<std::int64_t>(n) * d.c + c) * in_hw;
          const double* xc = xv.data() + in_off;
          const double* wc = wv.data() + static_cast<std::int64_t>(c) * taps;
          const double* gc = self.grad.data() + (static_cast<std::int64_t>(n) * d.c + c) * out_hw;
          double* xg = gx ? self.parents[0]->grad.data() + in_off : nullptr;
          double* wg = gw ? self.parents[1]->grad.data() + static_cast<std::int64_t>(c) * taps : nullptr;
          double bsum = 0.0;
          for (std::int64_t o = 0; o < out_hw; ++o) {
            const double go = gc[o];
            bsum += go;
            const int* s = src->data() + o * taps;
            for (int t = 0; t < taps; ++t) {
              if (s[t] < 0) continue;
              if (wg) wg[t] += go * xc[s[t]];
              if (xg) xg[s[t]] += go * wc[t];
            }
          }
          if (gb) self.parents[2]->grad[c] += bsum;
        }
      }
    };
  }
  return Tensor::wrap(node);
}

// ---------------------------------------------------------------------------
// Normalization

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  std::span<double> running_mean, std::span<double> running_var, bool training,
                  double momentum, double eps) {
  const auto d = dims4(x, "batch_norm");
  require(gamma.size() == d.c && beta.size() == d.c &&
              static_cast<int>(running_mean.size()) == d.c &&
              static_cast<int>(running_var.size()) == d.c,
          "batch_norm: parameter size mismatch");
  const std::int64_t hw = static_cast<std::int64_t>(d.h) * d.w;
  const std::int64_t count = hw * d.n;
  auto xv = x.values();
  auto mean = std::make_shared<std::vector<double>>(d.c);
  auto invstd = std::make_shared<std::vector<double>>(d.c);
  for (int c = 0; c < d.c; ++c) {
    double m, v;
    if (training) {
      double s = 0.0;
      for (int n = 0; n < d.n; ++n) {
        const double* p = xv.data() + (static_cast<std::int64_t>(n) * d.c + c) * hw;
        for (std::int64_t i = 0; i < hw; ++i) s += p[i];
      }
      m = s / static_cast<double>(count);
      double ss = 0.0;
      for (int n = 0; n < d.n; ++n) {
        const double* p = xv.data() + (static_cast<std::int64_t>(n) * d.c + c) * hw;
        for (std::int64_t i = 0; i < hw; ++i) ss += (p[i] - m) * (p[i] - m);
      }
      v = ss / static_cast<double>(count);
      const double unbiased = count > 1 ? ss / static_cast<double>(count - 1) : v;
      running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * m;
      running_var[c] = (1.0 - momentum) * running_var[c] + momentum * unbiased;
    } else {
      m = running_mean[c];
      v = running_var[c];
    }
    (*mean)[c] = m;
    (*invstd)[c] = 1.0 / std::sqrt(v + eps);
  }
  std::vector<double> out(xv.size());
  auto gv = gamma.values();
  auto bv = beta.values();
  for (int n = 0; n < d.n; ++n) {
    for (int c = 0; c < d.c; ++c) {
      const std::int64_t off = (static_cast<std::int64_t>(n) * d.c + c) * hw;
      const double a = gv[c] * (*invstd)[c];
      const double b = bv[c] - (*mean)[c] * a;
      for (std::int64_t i = 0; i < hw; ++i) out[off + i] = xv[off + i] * a + b;
    }
  }
  auto node = make_result(x.shape(), std::move(out), {&x, &gamma, &beta});
  if (node->requires_grad) {
    node->backward = [d, hw, count, mean, invstd, training](Node& self) {
      const auto& xv = self.parents[0]->value;
      const auto& gv = self.parents[1]->value;
      const bool gx = wants(self, 0), gg = wants(self, 1), gb = wants(self, 2);
      if (gx) self.parents[0]->ensure_grad();
      if (gg) self.parents[1]->ensure_grad();
      if (gb) self.parents[2]->ensure_grad();
      for (int c = 0; c < d.c; ++c) {
        const double m = (*mean)[c], is = (*invstd)[c];
        double sum_g = 0.0, sum_gx = 0.0;
        for (int n = 0; n < d.n; ++n) {
          const std::int64_t off = (static_cast<std::int64_t>(n) * d.c + c) * hw;
          for (std::int64_t i = 0; i < hw; ++i) {
            const double g = self.grad[off + i];
            sum_g += g;
            sum_gx += g * (xv[off + i] - m) * is;
          }
        }
        if (gg) self.parents[1]->grad[c] += sum_gx;
        if (gb) self.parents[2]->grad[c] += sum_g;
        if (!gx) continue;
        auto& xg = self.parents[0]->grad;
        const double a = gv[c] * is;
        const double inv_count = 1.0 / static_cast<double>(count);
        for (int n = 0; n < d.n; ++n) {
          const std::int64_t off = (static_cast<std::int64_t>(n) * d.c + c) * hw;
          for (std::int64_t i = 0; i < hw; ++i) {
            if (training) {
              const double xhat = (xv[off + i] - m) * is;
              xg[off + i] += a * (self.grad[off + i] - inv_count * sum_g - xhat * inv_count * sum_gx);
            } else {
              xg[off + i] += a * self.grad[off + i];
            }
          }
        }
      }
    };
  }
  return Tensor::wrap(node);
}

Tensor layer_norm_channels(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const auto d = dims4(x, "layer_norm_channels");
  require(gamma.size() == d.c && beta.size() == d.c, "layer_norm_channels: parameter size");
  const std::int64_t hw = static_cast<std::int64_t>(d.h) * d.w;
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto invstd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(d.n) * hw);
  std::vector<double> out(xv.size());
  for (int n = 0; n < d.n; ++n) {
    const std::int64_t base = static_cast<std::int64_t>(n) * d.c * hw;
    for (std::int64_t p = 0; p < hw; ++p) {
      double s = 0.0;
      for (int c = 0; c < d.c; ++c) s += xv[base + c * hw + p];
      const double m = s / d.c;
      double ss = 0.0;
      for (int c = 0; c < d.c; ++c) {
        const double t = xv[base + c * hw + p] - m;
        ss += t * t;
      }
      const double is = 1.0 / std::sqrt(ss / d.c + eps);
      (*invstd)[n * hw + p] = is;
      for (int c = 0; c < d.c; ++c) {
        const std::int64_t i = base + c * hw + p;
        (*xhat)[i] = (xv[i] - m) * is;
        out[i] = (*xhat)[i] * gv[c] + bv[c];
      }
    }
  }
  auto node = make_result(x.shape(), std::move(out), {&x, &gamma, &beta});
  if (node->requires_grad) {
    node->backward = [d, hw, xhat, invstd](Node& self) {
      const auto& gv = self.parents[1]->value;
      const bool gx = wants(self, 0), gg = wants(self, 1), gb = wants(self, 2);
      if (gx) self.parents[0]->ensure_grad();
      if (gg) self.parents[1]->ensure_grad();
      if (gb) self.parents[2]->ensure_grad();
      std::vector<double> dxhat(static_cast<std::size_t>(d.c));
      for (int n = 0; n < d.n; ++n) {
        const std::int64_t base = static_cast<std::int64_t>(n) * d.c * hw;
        for (std::int64_t p = 0; p < hw; ++p) {
          double s1 = 0.0, s2 = 0.0;
          for (int c = 0; c < d.c; ++c) {
            const std::int64_t i = base + c * hw + p;
            const double g = self.grad[i];
            if (gg) self.parents[1]->grad[c] += g * (*xhat)[i];
            if (gb) self.parents[2]->grad[c] += g;
            dxhat[c] = g * gv[c];
            s1 += dxhat[c];
            s2 += dxhat[c] * (*xhat)[i];
          }
          if (!gx) continue;
          const double is = (*invstd)[n * hw + p];
          for (int c = 0; c < d.c; ++c) {
            const std::int64_t i = base + c * hw + p;
            self.parents[0]->grad[i] += is * (dxhat[c] - s1 / d.c - (*xhat)[i] * s2 / d.c);
          }
        }
      }
    };
  }
  return Tensor::wrap(node);
}

// ---------------------------------------------------------------------------

Tensor external_loss(const std::vector<Tensor>& inputs, double value,
                     std::vector<std::vector<double>> grads) {
  require(inputs.size() == grads.size(), "external_loss: one gradient per input");
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    require(static_cast<std::int64_t>(grads[i].size()) == inputs[i].size(),
            "external_loss: gradient size mismatch");
  }
  auto node = std::make_shared<Node>();
  node->shape = {1};
  node->value = {value};
  if (g_grad_enabled) {
    for (const auto& in : inputs) node->requires_grad |= in.requires_grad();
  }
  if (node->requires_grad) {
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward = [grads = std::move(grads)](Node& self) {
      for (std::size_t k = 0; k < grads.size(); ++k) {
        if (!wants(self, k)) continue;
        auto& p = *self.parents[k];
        p.ensure_grad();
        for (std::size_t i = 0; i < grads[k].size(); ++i) p.grad[i] += self.grad[0] * grads[k][i];
      }
    };
  }
  return Tensor::wrap(node);
}

}  // namespace transrad::ad
