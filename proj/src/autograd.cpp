#include "perldiff/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>

#include "perldiff/params.hpp"

namespace perldiff {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

namespace {

MapR as_mat(Tensor& t, int rows, int cols) { return MapR(t.data(), rows, cols); }
CMapR as_mat(const Tensor& t, int rows, int cols) { return CMapR(t.data(), rows, cols); }

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

void require_rank2(const Tensor& t, const char* op) {
  require(t.rank() == 2, std::string(op) + ": expected a 2D tensor, got " + dims_to_string(t.dims()));
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  require(a.dims() == b.dims(),
          std::string(op) + ": shape mismatch " + dims_to_string(a.dims()) + " vs " + dims_to_string(b.dims()));
}

}  // namespace

const Tensor& Var::value() const { return graph->value(*this); }

Var Graph::constant(Tensor value) {
  auto node = std::make_unique<Node>();
  node->value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::parameter(ParameterStore& store, const std::string& name) {
  auto& entry = store.entry(name);
  if (auto it = leaves_.find(&entry); it != leaves_.end()) return Var{this, it->second};
  auto node = std::make_unique<Node>();
  node->value = entry.value;
  node->requires_grad = record_;
  node->param = &entry;
  nodes_.push_back(std::move(node));
  leaves_.emplace(&entry, static_cast<int>(nodes_.size()) - 1);
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  auto node = std::make_unique<Node>();
  node->value = std::move(value);
  if (record_) {
    for (const Var& in : inputs) {
      if (nodes_[static_cast<std::size_t>(in.id)]->requires_grad) {
        node->requires_grad = true;
        break;
      }
    }
    if (node->requires_grad) node->backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Tensor& Graph::grad_buffer(Var v) {
  auto& node = *nodes_[static_cast<std::size_t>(v.id)];
  if (node.grad.empty()) node.grad = Tensor(node.value.dims());
  return node.grad;
}

void Graph::backward(Var scalar) {
  if (!record_) throw std::logic_error("backward() on a graph built without recording");
  auto& root = *nodes_[static_cast<std::size_t>(scalar.id)];
  if (root.value.size() != 1) {
    throw ShapeError("backward() needs a one-element loss, got " + dims_to_string(root.value.dims()));
  }
  for (auto& n : nodes_) n->grad = Tensor();
  grad_buffer(scalar)[0] = 1.0;
  for (int i = scalar.id; i >= 0; --i) {
    auto& node = *nodes_[static_cast<std::size_t>(i)];
    if (node.grad.empty() || !node.backward) continue;
    node.backward(*this, node.grad, node.value);
  }
  for (auto& n : nodes_) {
    if (n->param == nullptr || n->grad.empty()) continue;
    Tensor& dst = n->param->grad;
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += n->grad[k];
    n->param->has_grad = true;
  }
}

Tensor Graph::gradient(Var v) const {
  const auto& node = *nodes_[static_cast<std::size_t>(v.id)];
  return node.grad.empty() ? Tensor(node.value.dims()) : node.grad;
}

namespace ops {

Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_rank2(A, "matmul");
  require_rank2(B, "matmul");
  const int m = A.dim(0), k = A.dim(1), n = B.dim(1);
  require(B.dim(0) == k, "matmul: inner dims disagree " + dims_to_string(A.dims()) + " x " + dims_to_string(B.dims()));
  Tensor C({m, n});
  as_mat(C, m, n).noalias() = as_mat(A, m, k) * as_mat(B, k, n);
  return a.graph->record(std::move(C), {a, b}, [a, b, m, k, n](Graph& g, const Tensor& dC, const Tensor&) {
    auto dCm = as_mat(dC, m, n);
    if (g.requires_grad(a)) as_mat(g.grad_buffer(a), m, k).noalias() += dCm * as_mat(b.value(), k, n).transpose();
    if (g.requires_grad(b)) as_mat(g.grad_buffer(b), k, n).noalias() += as_mat(a.value(), m, k).transpose() * dCm;
  });
}

Var matmul_nt(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_rank2(A, "matmul_nt");
  require_rank2(B, "matmul_nt");
  const int m = A.dim(0), k = A.dim(1), n = B.dim(0);
  require(B.dim(1) == k, "matmul_nt: inner dims disagree " + dims_to_string(A.dims()) + " x " +
                             dims_to_string(B.dims()) + "^T");
  Tensor C({m, n});
  as_mat(C, m, n).noalias() = as_mat(A, m, k) * as_mat(B, n, k).transpose();
  return a.graph->record(std::move(C), {a, b}, [a, b, m, k, n](Graph& g, const Tensor& dC, const Tensor&) {
    auto dCm = as_mat(dC, m, n);
    if (g.requires_grad(a)) as_mat(g.grad_buffer(a), m, k).noalias() += dCm * as_mat(b.value(), n, k);
    if (g.requires_grad(b)) as_mat(g.grad_buffer(b), n, k).noalias() += dCm.transpose() * as_mat(a.value(), m, k);
  });
}

Var transpose(Var a) {
  const Tensor& A = a.value();
  require_rank2(A, "transpose");
  const int m = A.dim(0), n = A.dim(1);
  Tensor T({n, m});
  as_mat(T, n, m) = as_mat(A, m, n).transpose();
  return a.graph->record(std::move(T), {a}, [a, m, n](Graph& g, const Tensor& dT, const Tensor&) {
    as_mat(g.grad_buffer(a), m, n) += as_mat(dT, n, m).transpose();
  });
}

Var add(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_same(A, B, "add");
  Tensor C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C[i] += B[i];
  return a.graph->record(std::move(C), {a, b}, [a, b](Graph& g, const Tensor& dC, const Tensor&) {
    for (Var v : {a, b}) {
      if (!g.requires_grad(v)) continue;
      Tensor& d = g.grad_buffer(v);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dC[i];
    }
  });
}

Var sub(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_same(A, B, "sub");
  Tensor C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C[i] -= B[i];
  return a.graph->record(std::move(C), {a, b}, [a, b](Graph& g, const Tensor& dC, const Tensor&) {
    if (g.requires_grad(a)) {
      Tensor& d = g.grad_buffer(a);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dC[i];
    }
    if (g.requires_grad(b)) {
      Tensor& d = g.grad_buffer(b);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= dC[i];
    }
  });
}

Var mul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_same(A, B, "mul");
  Tensor C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C[i] *= B[i];
  return a.graph->record(std::move(C), {a, b}, [a, b](Graph& g, const Tensor& dC, const Tensor&) {
    if (g.requires_grad(a)) {
      Tensor& d = g.grad_buffer(a);
      const Tensor& Bv = b.value();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dC[i] * Bv[i];
    }
    if (g.requires_grad(b)) {
      Tensor& d = g.grad_buffer(b);
      const Tensor& Av = a.value();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dC[i] * Av[i];
    }
  });
}

Var scale(Var a, double s) {
  Tensor C = a.value();
  for (double& v : C.storage()) v *= s;
  return a.graph->record(std::move(C), {a}, [a, s](Graph& g, const Tensor& dC, const Tensor&) {
    Tensor& d = g.grad_buffer(a);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s * dC[i];
  });
}

Var scale_by(Var a, Var s) {
  require(s.value().size() == 1, "scale_by: scale must have one element, got " + dims_to_string(s.dims()));
  const double sv = s.value()[0];
  Tensor C = a.value();
  for (double& v : C.storage()) v *= sv;
  return a.graph->record(std::move(C), {a, s}, [a, s](Graph& g, const Tensor& dC, const Tensor&) {
    const Tensor& Av = a.value();
    if (g.requires_grad(a)) {
      const double sv = s.value()[0];
      Tensor& d = g.grad_buffer(a);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += sv * dC[i];
    }
    if (g.requires_grad(s)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < Av.size(); ++i) acc += Av[i] * dC[i];
      g.grad_buffer(s)[0] += acc;
    }
  });
}

Var add_row_bias(Var a, Var bias) {
  const Tensor& A = a.value();
  require_rank2(A, "add_row_bias");
  const int m = A.dim(0), n = A.dim(1);
  require(static_cast<int>(bias.value().size()) == n,
          "add_row_bias: bias " + dims_to_string(bias.dims()) + " vs " + dims_to_string(A.dims()));
  Tensor C = A;
  const Tensor& B = bias.value();
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < n; ++c) C.at(r, c) += B[static_cast<std::size_t>(c)];
  return a.graph->record(std::move(C), {a, bias}, [a, bias, m, n](Graph& g, const Tensor& dC, const Tensor&) {
    if (g.requires_grad(a)) {
      Tensor& d = g.grad_buffer(a);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dC[i];
    }
    if (g.requires_grad(bias)) {
      Tensor& d = g.grad_buffer(bias);
      for (int r = 0; r < m; ++r)
        for (int c = 0; c < n; ++c) d[static_cast<std::size_t>(c)] += dC.at(r, c);
    }
  });
}

Var add_channel_bias(Var a, Var bias) {
  const Tensor& A = a.value();
  const int channels = A.dim(0);
  require(static_cast<int>(bias.value().size()) == channels,
          "add_channel_bias: bias " + dims_to_string(bias.dims()) + " vs " + dims_to_string(A.dims()));
  const std::size_t inner = A.size() / static_cast<std::size_t>(channels);
  Tensor C = A;
  const Tensor& B = bias.value();
  for (int c = 0; c < channels; ++c) {
    double* p = C.data() + static_cast<std::size_t>(c) * inner;
    const double b = B[static_cast<std::size_t>(c)];
    for (std::size_t i = 0; i < inner; ++i) p[i] += b;
  }
  return a.graph->record(std::move(C), {a, bias}, [a, bias, channels, inner](Graph& g, const Tensor& dC, const Tensor&) {
    if (g.requires_grad(a)) {
      Tensor& d = g.grad_buffer(a);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dC[i];
    }
    if (g.requires_grad(bias)) {
      Tensor& d = g.grad_buffer(bias);
      for (int c = 0; c < channels; ++c) {
        const double* p = dC.data() + static_cast<std::size_t>(c) * inner;
        double acc = 0.0;
        for (std::size_t i = 0; i < inner; ++i) acc += p[i];
        d[static_cast<std::size_t>(c)] += acc;
      }
    }
  });
}

Var softmax_lastdim(Var a) {
  const Tensor& A = a.value();
  const int rows = A.rows(), n = A.cols();
  Tensor Y = A;
  for (int r = 0; r < rows; ++r) {
    double* y = Y.data() + static_cast<std::size_t>(r) * static_cast<std::size_t>(n);
    const double mx = *std::max_element(y, y + n);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      y[i] = std::exp(y[i] - mx);
      total += y[i];
    }
    const double inv = 1.0 / total;
    for (int i = 0; i < n; ++i) y[i] *= inv;
  }
  return a.graph->record(std::move(Y), {a}, [a, rows, n](Graph& g, const Tensor& dY, const Tensor& Yv) {
    Tensor& d = g.grad_buffer(a);
    for (int r = 0; r < rows; ++r) {
      const std::size_t off = static_cast<std::size_t>(r) * static_cast<std::size_t>(n);
      double dot = 0.0;
      for (int i = 0; i < n; ++i) dot += dY[off + i] * Yv[off + i];
      for (int i = 0; i < n; ++i) d[off + i] += Yv[off + i] * (dY[off + i] - dot);
    }
  });
}

Var silu(Var a) {
  const Tensor& A = a.value();
  Tensor Y = A;
  for (double& v : Y.storage()) v = v / (1.0 + std::exp(-v));
  return a.graph->record(std::move(Y), {a}, [a](Graph& g, const Tensor& dY, const Tensor&) {
    const Tensor& X = a.value();
    Tensor& d = g.grad_buffer(a);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-X[i]));
      d[i] += dY[i] * s * (1.0 + X[i] * (1.0 - s));
    }
  });
}

namespace {

struct ConvGeom {
  int cin, h, w, cout, stride, oh, ow;
};

void im2col(const double* x, const ConvGeom& c, double* col) {
  const int ohw = c.oh * c.ow;
  for (int ci = 0; ci < c.cin; ++ci) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        double* row = col + static_cast<std::size_t>((ci * 9 + ky * 3 + kx)) * static_cast<std::size_t>(ohw);
        for (int oy = 0; oy < c.oh; ++oy) {
          const int iy = oy * c.stride + ky - 1;
          double* out = row + oy * c.ow;
          if (iy < 0 || iy >= c.h) {
            std::fill(out, out + c.ow, 0.0);
            continue;
          }
          const double* src = x + (static_cast<std::size_t>(ci) * c.h + iy) * c.w;
          for (int ox = 0; ox < c.ow; ++ox) {
            const int ix = ox * c.stride + kx - 1;
            out[ox] = (ix >= 0 && ix < c.w) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvGeom& c, double* dx) {
  const int ohw = c.oh * c.ow;
  for (int ci = 0; ci < c.cin; ++ci) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const double* row = col + static_cast<std::size_t>((ci * 9 + ky * 3 + kx)) * static_cast<std::size_t>(ohw);
        for (int oy = 0; oy < c.oh; ++oy) {
          const int iy = oy * c.stride + ky - 1;
          if (iy < 0 || iy >= c.h) continue;
          double* dst = dx + (static_cast<std::size_t>(ci) * c.h + iy) * c.w;
          const double* in = row + oy * c.ow;
          for (int ox = 0; ox < c.ow; ++ox) {
            const int ix = ox * c.stride + kx - 1;
            if (ix >= 0 && ix < c.w) dst[ix] += in[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(Var x, Var kernel, int stride) {
  const Tensor& X = x.value();
  const Tensor& K = kernel.value();
  require(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
  require(X.rank() == 3, "conv2d: input must be [C,H,W], got " + dims_to_string(X.dims()));
  require(K.rank() == 4 && K.dim(2) == 3 && K.dim(3) == 3 && K.dim(1) == X.dim(0),
          "conv2d: kernel " + dims_to_string(K.dims()) + " incompatible with input " + dims_to_string(X.dims()));
  ConvGeom c{X.dim(0), X.dim(1), X.dim(2), K.dim(0), stride, 0, 0};
  c.oh = (c.h - 1) / stride + 1;
  c.ow = (c.w - 1) / stride + 1;
  const int ohw = c.oh * c.ow;
  const int kdim = c.cin * 9;
  auto col = std::make_shared<Tensor>(Dims{kdim, ohw});
  im2col(X.data(), c, col->data());
  Tensor Y({c.cout, c.oh, c.ow});
  as_mat(Y, c.cout, ohw).noalias() = as_mat(K, c.cout, kdim) * as_mat(*col, kdim, ohw);
  return x.graph->record(std::move(Y), {x, kernel}, [x, kernel, c, col, ohw, kdim](Graph& g, const Tensor& dY, const Tensor&) {
    auto dYm = as_mat(dY, c.cout, ohw);
    if (g.requires_grad(kernel)) {
      as_mat(g.grad_buffer(kernel), c.cout, kdim).noalias() += dYm * as_mat(*col, kdim, ohw).transpose();
    }
    if (g.requires_grad(x)) {
      Tensor dcol({kdim, ohw});
      as_mat(dcol, kdim, ohw).noalias() = as_mat(kernel.value(), c.cout, kdim).transpose() * dYm;
      col2im_add(dcol.data(), c, g.grad_buffer(x).data());
    }
  });
}

Var group_norm(Var x, int groups, Var gamma, Var beta, double eps) {
  const Tensor& X = x.value();
  const int channels = X.dim(0);
  require(groups > 0 && channels % groups == 0,
          "group_norm: " + std::to_string(channels) + " channels not divisible by " + std::to_string(groups));
  require(static_cast<int>(gamma.value().size()) == channels && static_cast<int>(beta.value().size()) == channels,
          "group_norm: affine parameters must have one entry per channel");
  const std::size_t inner = X.size() / static_cast<std::size_t>(channels);
  const int per_group = channels / groups;
  const std::size_t group_len = inner * static_cast<std::size_t>(per_group);

  auto xhat = std::make_shared<Tensor>(X.dims());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(groups));
  Tensor Y(X.dims());
  const Tensor& G = gamma.value();
  const Tensor& B = beta.value();
  for (int gi = 0; gi < groups; ++gi) {
    const std::size_t off = static_cast<std::size_t>(gi) * group_len;
    double mu = 0.0;
    for (std::size_t i = 0; i < group_len; ++i) mu += X[off + i];
    mu /= static_cast<double>(group_len);
    double var = 0.0;
    for (std::size_t i = 0; i < group_len; ++i) var += (X[off + i] - mu) * (X[off + i] - mu);
    var /= static_cast<double>(group_len);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(gi)] = is;
    for (std::size_t i = 0; i < group_len; ++i) {
      const std::size_t idx = off + i;
      const auto ch = static_cast<std::size_t>(idx / inner);
      (*xhat)[idx] = (X[idx] - mu) * is;
      Y[idx] = G[ch] * (*xhat)[idx] + B[ch];
    }
  }
  return x.graph->record(
      std::move(Y), {x, gamma, beta},
      [x, gamma, beta, xhat, inv_std, groups, inner, group_len](Graph& g, const Tensor& dY, const Tensor&) {
        const Tensor& G = gamma.value();
        if (g.requires_grad(gamma) || g.requires_grad(beta)) {
          Tensor& dg = g.grad_buffer(gamma);
          Tensor& db = g.grad_buffer(beta);
          for (std::size_t idx = 0; idx < dY.size(); ++idx) {
            const auto ch = idx / inner;
            dg[ch] += dY[idx] * (*xhat)[idx];
            db[ch] += dY[idx];
          }
        }
        if (!g.requires_grad(x)) return;
        Tensor& dX = g.grad_buffer(x);
        const double n = static_cast<double>(group_len);
        for (int gi = 0; gi < groups; ++gi) {
          const std::size_t off = static_cast<std::size_t>(gi) * group_len;
          double sum_d = 0.0, sum_dx = 0.0;
          for (std::size_t i = 0; i < group_len; ++i) {
            const std::size_t idx = off + i;
            const double dxh = dY[idx] * G[idx / inner];
            sum_d += dxh;
            sum_dx += dxh * (*xhat)[idx];
          }
          const double is = (*inv_std)[static_cast<std::size_t>(gi)];
          for (std::size_t i = 0; i < group_len; ++i) {
            const std::size_t idx = off + i;
            const double dxh = dY[idx] * G[idx / inner];
            dX[idx] += is / n * (n * dxh - sum_d - (*xhat)[idx] * sum_dx);
          }
        }
      });
}

Var concat0(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require(A.rank() == B.rank() && A.rank() >= 1, "concat0: rank mismatch");
  for (int i = 1; i < A.rank(); ++i) {
    require(A.dim(i) == B.dim(i), "concat0: trailing dims differ " + dims_to_string(A.dims()) + " vs " +
                                      dims_to_string(B.dims()));
  }
  Dims dims = A.dims();
  dims[0] += B.dim(0);
  std::vector<double> data;
  data.reserve(A.size() + B.size());
  data.insert(data.end(), A.storage().begin(), A.storage().end());
  data.insert(data.end(), B.storage().begin(), B.storage().end());
  const std::size_t na = A.size();
  return a.graph->record(Tensor(std::move(dims), std::move(data)), {a, b}, [a, b, na](Graph& g, const Tensor& dC, const Tensor&) {
    if (g.requires_grad(a)) {
      Tensor& d = g.grad_buffer(a);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dC[i];
    }
    if (g.requires_grad(b)) {
      Tensor& d = g.grad_buffer(b);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dC[na + i];
    }
  });
}

Var concat_cols(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_rank2(A, "concat_cols");
  require_rank2(B, "concat_cols");
  require(A.dim(0) == B.dim(0), "concat_cols: row counts differ " + dims_to_string(A.dims()) + " vs " +
                                    dims_to_string(B.dims()));
  const int m = A.dim(0), na = A.dim(1), nb = B.dim(1);
  Tensor C({m, na + nb});
  for (int r = 0; r < m; ++r) {
    std::copy_n(A.data() + static_cast<std::size_t>(r) * na, na, C.data() + static_cast<std::size_t>(r) * (na + nb));
    std::copy_n(B.data() + static_cast<std::size_t>(r) * nb, nb,
                C.data() + static_cast<std::size_t>(r) * (na + nb) + na);
  }
  return a.graph->record(std::move(C), {a, b}, [a, b, m, na, nb](Graph& g, const Tensor& dC, const Tensor&) {
    if (g.requires_grad(a)) {
      Tensor& d = g.grad_buffer(a);
      for (int r = 0; r < m; ++r)
        for (int c = 0; c < na; ++c) d.at(r, c) += dC.at(r, c);
    }
    if (g.requires_grad(b)) {
      Tensor& d = g.grad_buffer(b);
      for (int r = 0; r < m; ++r)
        for (int c = 0; c < nb; ++c) d.at(r, c) += dC.at(r, na + c);
    }
  });
}

Var upsample2x(Var x) {
  const Tensor& X = x.value();
  require(X.rank() == 3, "upsample2x: input must be [C,H,W]");
  const int c = X.dim(0), h = X.dim(1), w = X.dim(2);
  Tensor Y({c, 2 * h, 2 * w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx)
        Y[(static_cast<std::size_t>(ch) * 2 * h + y) * 2 * w + xx] =
            X[(static_cast<std::size_t>(ch) * h + y / 2) * w + xx / 2];
  return x.graph->record(std::move(Y), {x}, [x, c, h, w](Graph& g, const Tensor& dY, const Tensor&) {
    Tensor& d = g.grad_buffer(x);
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx)
          d[(static_cast<std::size_t>(ch) * h + y / 2) * w + xx / 2] +=
              dY[(static_cast<std::size_t>(ch) * 2 * h + y) * 2 * w + xx];
  });
}

Var mean_spatial(Var x) {
  const Tensor& X = x.value();
  require(X.rank() >= 2, "mean_spatial: input must be [C,...]");
  const int c = X.dim(0);
  const std::size_t inner = X.size() / static_cast<std::size_t>(c);
  Tensor Y({1, c});
  for (int ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (std::size_t i = 0; i < inner; ++i) acc += X[static_cast<std::size_t>(ch) * inner + i];
    Y[static_cast<std::size_t>(ch)] = acc / static_cast<double>(inner);
  }
  return x.graph->record(std::move(Y), {x}, [x, c, inner](Graph& g, const Tensor& dY, const Tensor&) {
    Tensor& d = g.grad_buffer(x);
    for (int ch = 0; ch < c; ++ch) {
      const double v = dY[static_cast<std::size_t>(ch)] / static_cast<double>(inner);
      for (std::size_t i = 0; i < inner; ++i) d[static_cast<std::size_t>(ch) * inner + i] += v;
    }
  });
}

Var reshape(Var a, Dims dims) {
  Tensor Y = a.value().reshaped(std::move(dims));
  return a.graph->record(std::move(Y), {a}, [a](Graph& g, const Tensor& dY, const Tensor&) {
    Tensor& d = g.grad_buffer(a);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += dY[i];
  });
}

Var broadcast_rows(Var row, int rows) {
  const Tensor& R = row.value();
  const int n = static_cast<int>(R.size());
  Tensor Y({rows, n});
  for (int r = 0; r < rows; ++r) std::copy_n(R.data(), n, Y.data() + static_cast<std::size_t>(r) * n);
  return row.graph->record(std::move(Y), {row}, [row, rows, n](Graph& g, const Tensor& dY, const Tensor&) {
    Tensor& d = g.grad_buffer(row);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < n; ++c) d[static_cast<std::size_t>(c)] += dY.at(r, c);
  });
}

Var fill_invalid_rows(Var a, const std::vector<bool>& valid, Var fill) {
  const Tensor& A = a.value();
  require_rank2(A, "fill_invalid_rows");
  const int m = A.dim(0), n = A.dim(1);
  require(static_cast<int>(valid.size()) == m, "fill_invalid_rows: validity flags do not match rows");
  require(static_cast<int>(fill.value().size()) == n, "fill_invalid_rows: fill row has wrong width");
  Tensor Y = A;
  for (int r = 0; r < m; ++r) {
    if (!valid[static_cast<std::size_t>(r)]) std::copy_n(fill.value().data(), n, Y.data() + static_cast<std::size_t>(r) * n);
  }
  return a.graph->record(std::move(Y), {a, fill}, [a, fill, valid, m, n](Graph& g, const Tensor& dY, const Tensor&) {
    for (int r = 0; r < m; ++r) {
      const bool ok = valid[static_cast<std::size_t>(r)];
      if (ok && g.requires_grad(a)) {
        Tensor& d = g.grad_buffer(a);
        for (int c = 0; c < n; ++c) d.at(r, c) += dY.at(r, c);
      } else if (!ok && g.requires_grad(fill)) {
        Tensor& d = g.grad_buffer(fill);
        for (int c = 0; c < n; ++c) d[static_cast<std::size_t>(c)] += dY.at(r, c);
      }
    }
  });
}

Var mse(Var prediction, Var target) {
  const Tensor& P = prediction.value();
  const Tensor& T = target.value();
  require_same(P, T, "mse");
  double acc = 0.0;
  for (std::size_t i = 0; i < P.size(); ++i) acc += (P[i] - T[i]) * (P[i] - T[i]);
  const double n = static_cast<double>(P.size());
  return prediction.graph->record(Tensor::scalar(acc / n), {prediction, target},
                                  [prediction, target, n](Graph& g, const Tensor& dL, const Tensor&) {
                                    const Tensor& Pv = prediction.value();
                                    const Tensor& Tv = target.value();
                                    const double s = 2.0 * dL[0] / n;
                                    if (g.requires_grad(prediction)) {
                                      Tensor& d = g.grad_buffer(prediction);
                                      for (std::size_t i = 0; i < d.size(); ++i) d[i] += s * (Pv[i] - Tv[i]);
                                    }
                                    if (g.requires_grad(target)) {
                                      Tensor& d = g.grad_buffer(target);
                                      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= s * (Pv[i] - Tv[i]);
                                    }
                                  });
}

Var mean(Var a) {
  const Tensor& A = a.value();
  double acc = 0.0;
  for (double v : A.storage()) acc += v;
  const double n = static_cast<double>(A.size());
  return a.graph->record(Tensor::scalar(acc / n), {a}, [a, n](Graph& g, const Tensor& dL, const Tensor&) {
    Tensor& d = g.grad_buffer(a);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += dL[0] / n;
  });
}

Var sum(Var a) {
  const Tensor& A = a.value();
  double acc = 0.0;
  for (double v : A.storage()) acc += v;
  return a.graph->record(Tensor::scalar(acc), {a}, [a](Graph& g, const Tensor& dL, const Tensor&) {
    Tensor& d = g.grad_buffer(a);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += dL[0];
  });
}

}  // namespace ops
}  // namespace perldiff
