#include "cqvpr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "cqvpr/errors.hpp"

namespace cqvpr::ops {

namespace {

constexpr double kL2Eps = 1e-12;
constexpr double kGemClamp = 1e-6;
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

thread_local bool g_kink_tracking = false;
thread_local double g_kink_margin = std::numeric_limits<double>::infinity();

inline void note_kink_distance(double distance) {
  if (g_kink_tracking && distance < g_kink_margin) g_kink_margin = distance;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes differ, " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// outer/len/inner decomposition for an axis-wise op
struct AxisSpan {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSpan axis_span(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(shape));
  }
  AxisSpan s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto an = a.node();
  auto bn = b.node();
  return detail::make_op_node(a.shape(), std::move(out), {an, bn},
                              [an, bn](TensorNode& node) {
                                if (an->requires_grad) {
                                  an->ensure_grad();
                                  for (std::size_t i = 0; i < node.grad.size(); ++i)
                                    an->grad[i] += node.grad[i];
                                }
                                if (bn->requires_grad) {
                                  bn->ensure_grad();
                                  for (std::size_t i = 0; i < node.grad.size(); ++i)
                                    bn->grad[i] += node.grad[i];
                                }
                              });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  auto an = a.node();
  auto bn = b.node();
  return detail::make_op_node(a.shape(), std::move(out), {an, bn},
                              [an, bn](TensorNode& node) {
                                if (an->requires_grad) {
                                  an->ensure_grad();
                                  for (std::size_t i = 0; i < node.grad.size(); ++i)
                                    an->grad[i] += node.grad[i];
                                }
                                if (bn->requires_grad) {
                                  bn->ensure_grad();
                                  for (std::size_t i = 0; i < node.grad.size(); ++i)
                                    bn->grad[i] -= node.grad[i];
                                }
                              });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto an = a.node();
  auto bn = b.node();
  return detail::make_op_node(
      a.shape(), std::move(out), {an, bn}, [an, bn](TensorNode& node) {
        if (an->requires_grad) {
          an->ensure_grad();
          for (std::size_t i = 0; i < node.grad.size(); ++i)
            an->grad[i] += node.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t i = 0; i < node.grad.size(); ++i)
            bn->grad[i] += node.grad[i] * an->value[i];
        }
      });
}

Tensor add_n(const std::vector<Tensor>& terms) {
  if (terms.empty()) throw ShapeError("add_n: empty term list");
  for (const auto& t : terms) check_same_shape(terms[0], t, "add_n");
  std::vector<double> out(terms[0].size(), 0.0);
  std::vector<std::shared_ptr<TensorNode>> parents;
  parents.reserve(terms.size());
  for (const auto& t : terms) {
    const auto& v = t.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i];
    parents.push_back(t.node());
  }
  auto ps = parents;
  return detail::make_op_node(terms[0].shape(), std::move(out),
                              std::move(parents), [ps](TensorNode& node) {
                                for (const auto& p : ps) {
                                  if (!p->requires_grad) continue;
                                  p->ensure_grad();
                                  for (std::size_t i = 0; i < node.grad.size(); ++i)
                                    p->grad[i] += node.grad[i];
                                }
                              });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  const auto& av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  auto an = a.node();
  return detail::make_op_node(a.shape(), std::move(out), {an},
                              [an, c](TensorNode& node) {
                                if (!an->requires_grad) return;
                                an->ensure_grad();
                                for (std::size_t i = 0; i < node.grad.size(); ++i)
                                  an->grad[i] += node.grad[i] * c;
                              });
}

Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  const auto& av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + c;
  auto an = a.node();
  return detail::make_op_node(a.shape(), std::move(out), {an},
                              [an](TensorNode& node) {
                                if (!an->requires_grad) return;
                                an->ensure_grad();
                                for (std::size_t i = 0; i < node.grad.size(); ++i)
                                  an->grad[i] += node.grad[i];
                              });
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
  if (s.size() != 1) {
    throw ShapeError("scale_by: scale must be a single-element tensor, got " +
                     shape_str(s.shape()));
  }
  const double sv = s.value()[0];
  std::vector<double> out(a.size());
  const auto& av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * sv;
  auto an = a.node();
  auto sn = s.node();
  return detail::make_op_node(
      a.shape(), std::move(out), {an, sn}, [an, sn](TensorNode& node) {
        const double sv = sn->value[0];
        if (an->requires_grad) {
          an->ensure_grad();
          for (std::size_t i = 0; i < node.grad.size(); ++i)
            an->grad[i] += node.grad[i] * sv;
        }
        if (sn->requires_grad) {
          sn->ensure_grad();
          double acc = 0.0;
          for (std::size_t i = 0; i < node.grad.size(); ++i)
            acc += node.grad[i] * an->value[i];
          sn->grad[0] += acc;
        }
      });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (x.ndim() == 0 || bias.ndim() != 1 ||
      x.shape().back() != bias.shape()[0]) {
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) +
                     " does not match last dim of " + shape_str(x.shape()));
  }
  const std::size_t c = bias.shape()[0];
  const std::size_t rows = x.size() / c;
  std::vector<double> out(x.size());
  const auto& xv = x.value();
  const auto& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = xv[r * c + j] + bv[j];
  auto xn = x.node();
  auto bn = bias.node();
  return detail::make_op_node(
      x.shape(), std::move(out), {xn, bn}, [xn, bn, rows, c](TensorNode& node) {
        if (xn->requires_grad) {
          xn->ensure_grad();
          for (std::size_t i = 0; i < node.grad.size(); ++i)
            xn->grad[i] += node.grad[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j)
              bn->grad[j] += node.grad[r * c + j];
        }
      });
}

namespace {
// c[m x n] += a[m x k] * b[k x n]
void matmul_accumulate(const double* a, const double* b, double* c,
                       std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = arow[kk];
      if (aik == 0.0) continue;
      const double* brow = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
}

// c[m x n] += a[m x k] * b^T where b is [n x k]
void matmul_bt_accumulate(const double* a, const double* b, double* c,
                          std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      crow[j] += acc;
    }
  }
}

// c[k x n] += a^T * g where a is [m x k], g is [m x n]
void matmul_at_accumulate(const double* a, const double* g, double* c,
                          std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* grow = g + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = arow[kk];
      if (aik == 0.0) continue;
      double* crow = c + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aik * grow[j];
    }
  }
}
}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n, 0.0);
  matmul_accumulate(a.value().data(), b.value().data(), out.data(), m, k, n);
  auto an = a.node();
  auto bn = b.node();
  return detail::make_op_node(
      {m, n}, std::move(out), {an, bn}, [an, bn, m, k, n](TensorNode& node) {
        if (an->requires_grad) {
          an->ensure_grad();
          // dA = dC * B^T
          matmul_bt_accumulate(node.grad.data(), bn->value.data(),
                               an->grad.data(), m, n, k);
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          // dB = A^T * dC
          matmul_at_accumulate(an->value.data(), node.grad.data(),
                               bn->grad.data(), m, k, n);
        }
      });
}

Tensor transpose2d(const Tensor& a) {
  if (a.ndim() != 2) {
    throw ShapeError("transpose2d: expected 2D tensor, got " +
                     shape_str(a.shape()));
  }
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n);
  const auto& av = a.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  auto an = a.node();
  return detail::make_op_node({n, m}, std::move(out), {an},
                              [an, m, n](TensorNode& node) {
                                if (!an->requires_grad) return;
                                an->ensure_grad();
                                for (std::size_t i = 0; i < m; ++i)
                                  for (std::size_t j = 0; j < n; ++j)
                                    an->grad[i * n + j] += node.grad[j * m + i];
                              });
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  if (shape_size(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  }
  auto an = a.node();
  return detail::make_op_node(shape, a.value(), {an}, [an](TensorNode& node) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < node.grad.size(); ++i)
      an->grad[i] += node.grad[i];
  });
}

Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_last: empty part list");
  const Shape& first = parts[0].shape();
  std::size_t total_c = 0;
  for (const auto& p : parts) {
    if (p.ndim() != first.size()) {
      throw ShapeError("concat_last: rank mismatch " + shape_str(first) +
                       " vs " + shape_str(p.shape()));
    }
    for (std::size_t i = 0; i + 1 < first.size(); ++i) {
      if (p.shape()[i] != first[i]) {
        throw ShapeError("concat_last: leading dims differ, " +
                         shape_str(first) + " vs " + shape_str(p.shape()));
      }
    }
    total_c += p.shape().back();
  }
  Shape out_shape = first;
  out_shape.back() = total_c;
  const std::size_t rows = shape_size(out_shape) / total_c;

  std::vector<double> out(rows * total_c);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.shape().back();
    const auto& v = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(v.begin() + r * c, v.begin() + (r + 1) * c,
                out.begin() + r * total_c + off);
    offsets.push_back(off);
    off += c;
  }

  std::vector<std::shared_ptr<TensorNode>> parents;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    parents.push_back(p.node());
    widths.push_back(p.shape().back());
  }
  auto ps = parents;
  return detail::make_op_node(
      out_shape, std::move(out), std::move(parents),
      [ps, offsets, widths, rows, total_c](TensorNode& node) {
        for (std::size_t pi = 0; pi < ps.size(); ++pi) {
          if (!ps[pi]->requires_grad) continue;
          ps[pi]->ensure_grad();
          const std::size_t c = widths[pi], o = offsets[pi];
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j)
              ps[pi]->grad[r * c + j] += node.grad[r * total_c + o + j];
        }
      });
}

Tensor slice_last(const Tensor& a, std::size_t from, std::size_t to) {
  const std::size_t c = a.shape().back();
  if (from >= to || to > c) {
    throw ShapeError("slice_last: range [" + std::to_string(from) + "," +
                     std::to_string(to) + ") invalid for last dim " +
                     std::to_string(c));
  }
  Shape out_shape = a.shape();
  out_shape.back() = to - from;
  const std::size_t rows = a.size() / c;
  const std::size_t w = to - from;
  std::vector<double> out(rows * w);
  const auto& av = a.value();
  for (std::size_t r = 0; r < rows; ++r)
    std::copy(av.begin() + r * c + from, av.begin() + r * c + to,
              out.begin() + r * w);
  auto an = a.node();
  return detail::make_op_node(out_shape, std::move(out), {an},
                              [an, rows, c, from, w](TensorNode& node) {
                                if (!an->requires_grad) return;
                                an->ensure_grad();
                                for (std::size_t r = 0; r < rows; ++r)
                                  for (std::size_t j = 0; j < w; ++j)
                                    an->grad[r * c + from + j] +=
                                        node.grad[r * w + j];
                              });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: empty part list");
  const std::size_t c = parts[0].ndim() == 2 ? parts[0].shape()[1] : 0;
  std::size_t total_rows = 0;
  for (const auto& p : parts) {
    if (p.ndim() != 2 || p.shape()[1] != c) {
      throw ShapeError("concat_rows: expected 2D parts with " +
                       std::to_string(c) + " columns, got " +
                       shape_str(p.shape()));
    }
    total_rows += p.shape()[0];
  }
  std::vector<double> out;
  out.reserve(total_rows * c);
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::vector<std::size_t> row_offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    out.insert(out.end(), v.begin(), v.end());
    parents.push_back(p.node());
    row_offsets.push_back(off);
    off += p.shape()[0];
  }
  auto ps = parents;
  return detail::make_op_node(
      {total_rows, c}, std::move(out), std::move(parents),
      [ps, row_offsets, c](TensorNode& node) {
        for (std::size_t pi = 0; pi < ps.size(); ++pi) {
          if (!ps[pi]->requires_grad) continue;
          ps[pi]->ensure_grad();
          const std::size_t base = row_offsets[pi] * c;
          for (std::size_t i = 0; i < ps[pi]->grad.size(); ++i)
            ps[pi]->grad[i] += node.grad[base + i];
        }
      });
}

Tensor slice_rows(const Tensor& a, std::size_t from, std::size_t to) {
  if (a.ndim() != 2) {
    throw ShapeError("slice_rows: expected 2D tensor, got " +
                     shape_str(a.shape()));
  }
  const std::size_t rows = a.shape()[0], c = a.shape()[1];
  if (from >= to || to > rows) {
    throw ShapeError("slice_rows: range [" + std::to_string(from) + "," +
                     std::to_string(to) + ") invalid for " +
                     std::to_string(rows) + " rows");
  }
  std::vector<double> out(a.value().begin() + from * c,
                          a.value().begin() + to * c);
  auto an = a.node();
  return detail::make_op_node({to - from, c}, std::move(out), {an},
                              [an, from, c](TensorNode& node) {
                                if (!an->requires_grad) return;
                                an->ensure_grad();
                                const std::size_t base = from * c;
                                for (std::size_t i = 0; i < node.grad.size(); ++i)
                                  an->grad[base + i] += node.grad[i];
                              });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const AxisSpan s = axis_span(x.shape(), axis, "softmax");
  std::vector<double> out(x.size());
  const auto& xv = x.value();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < s.len; ++l)
        mx = std::max(mx, xv[base + l * s.inner]);
      double denom = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) {
        const double e = std::exp(xv[base + l * s.inner] - mx);
        out[base + l * s.inner] = e;
        denom += e;
      }
      for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] /= denom;
    }
  }
  auto xn = x.node();
  return detail::make_op_node(
      x.shape(), out, {xn}, [xn, s, y = out](TensorNode& node) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.len * s.inner + i;
            double dot = 0.0;
            for (std::size_t l = 0; l < s.len; ++l) {
              const std::size_t idx = base + l * s.inner;
              dot += node.grad[idx] * y[idx];
            }
            for (std::size_t l = 0; l < s.len; ++l) {
              const std::size_t idx = base + l * s.inner;
              xn->grad[idx] += y[idx] * (node.grad[idx] - dot);
            }
          }
        }
      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  if (x.ndim() == 0 || gain.ndim() != 1 || bias.ndim() != 1 ||
      gain.shape()[0] != x.shape().back() ||
      bias.shape()[0] != x.shape().back()) {
    throw ShapeError("layer_norm: gain/bias must match last dim of " +
                     shape_str(x.shape()));
  }
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.size() / c;
  const auto& xv = x.value();
  const auto& gv = gain.value();
  const auto& bv = bias.value();

  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_sigma(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_sigma[r] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (row[j] - mean) * is;
      xhat[r * c + j] = h;
      out[r * c + j] = gv[j] * h + bv[j];
    }
  }
  auto xn = x.node();
  auto gn = gain.node();
  auto bn = bias.node();
  return detail::make_op_node(
      x.shape(), std::move(out), {xn, gn, bn},
      [xn, gn, bn, rows, c, xhat = std::move(xhat),
       inv_sigma = std::move(inv_sigma)](TensorNode& node) {
        const auto& g = node.grad;
        if (gn->requires_grad) {
          gn->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j)
              gn->grad[j] += g[r * c + j] * xhat[r * c + j];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) bn->grad[j] += g[r * c + j];
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          const double cn = static_cast<double>(c);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_gg = 0.0, mean_ggx = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double gg = g[r * c + j] * gn->value[j];
              mean_gg += gg;
              mean_ggx += gg * xhat[r * c + j];
            }
            mean_gg /= cn;
            mean_ggx /= cn;
            for (std::size_t j = 0; j < c; ++j) {
              const double gg = g[r * c + j] * gn->value[j];
              xn->grad[r * c + j] +=
                  (gg - mean_gg - xhat[r * c + j] * mean_ggx) * inv_sigma[r];
            }
          }
        }
      });
}

Tensor l2_normalize(const Tensor& x, std::size_t axis,
                    std::vector<std::size_t>* zero_slices) {
  const AxisSpan s = axis_span(x.shape(), axis, "l2_normalize");
  std::vector<double> out(x.size());
  std::vector<double> norms(s.outer * s.inner);
  const auto& xv = x.value();
  if (zero_slices) zero_slices->clear();
  std::size_t slice_idx = 0;
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i, ++slice_idx) {
      const std::size_t base = o * s.len * s.inner + i;
      double sq = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) {
        const double v = xv[base + l * s.inner];
        sq += v * v;
      }
      const double norm = std::sqrt(sq);
      norms[slice_idx] = norm;
      if (norm < kL2Eps) {
        if (zero_slices) zero_slices->push_back(slice_idx);
        for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] = 0.0;
      } else {
        for (std::size_t l = 0; l < s.len; ++l)
          out[base + l * s.inner] = xv[base + l * s.inner] / norm;
      }
    }
  }
  auto xn = x.node();
  return detail::make_op_node(
      x.shape(), std::move(out), {xn},
      [xn, s, norms = std::move(norms)](TensorNode& node) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        std::size_t slice_idx = 0;
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t i = 0; i < s.inner; ++i, ++slice_idx) {
            const double norm = norms[slice_idx];
            if (norm < kL2Eps) continue;  // zero slice: zero gradient
            const std::size_t base = o * s.len * s.inner + i;
            double dot = 0.0;
            for (std::size_t l = 0; l < s.len; ++l) {
              const std::size_t idx = base + l * s.inner;
              dot += node.grad[idx] * xn->value[idx];
            }
            const double n3 = norm * norm * norm;
            for (std::size_t l = 0; l < s.len; ++l) {
              const std::size_t idx = base + l * s.inner;
              xn->grad[idx] +=
                  node.grad[idx] / norm - xn->value[idx] * dot / n3;
            }
          }
        }
      });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    note_kink_distance(std::abs(xv[i]));
    out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  }
  auto xn = x.node();
  return detail::make_op_node(x.shape(), std::move(out), {xn},
                              [xn](TensorNode& node) {
                                if (!xn->requires_grad) return;
                                xn->ensure_grad();
                                for (std::size_t i = 0; i < node.grad.size(); ++i)
                                  if (xn->value[i] > 0.0)
                                    xn->grad[i] += node.grad[i];
                              });
}

Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.size());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * kInvSqrt2));
  auto xn = x.node();
  return detail::make_op_node(
      x.shape(), std::move(out), {xn}, [xn](TensorNode& node) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < node.grad.size(); ++i) {
          const double v = xn->value[i];
          const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
          const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
          xn->grad[i] += node.grad[i] * (cdf + v * pdf);
        }
      });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (const double v : x.value()) acc += v;
  auto xn = x.node();
  return detail::make_op_node({1}, {acc}, {xn}, [xn](TensorNode& node) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < xn->grad.size(); ++i)
      xn->grad[i] += node.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  double acc = 0.0;
  for (const double v : x.value()) acc += v;
  const double inv = 1.0 / static_cast<double>(x.size());
  auto xn = x.node();
  return detail::make_op_node({1}, {acc * inv}, {xn},
                              [xn, inv](TensorNode& node) {
                                if (!xn->requires_grad) return;
                                xn->ensure_grad();
                                for (std::size_t i = 0; i < xn->grad.size(); ++i)
                                  xn->grad[i] += node.grad[0] * inv;
                              });
}

Tensor conv1x1(const Tensor& x, const Tensor& weights, const Tensor& bias) {
  if (x.ndim() != 3 || weights.ndim() != 2 || bias.ndim() != 1 ||
      x.shape()[2] != weights.shape()[0] ||
      weights.shape()[1] != bias.shape()[0]) {
    throw ShapeError("conv1x1: incompatible shapes x=" + shape_str(x.shape()) +
                     " w=" + shape_str(weights.shape()) +
                     " b=" + shape_str(bias.shape()));
  }
  const std::size_t h = x.shape()[0], w = x.shape()[1];
  const std::size_t cin = x.shape()[2], cout = weights.shape()[1];
  const std::size_t positions = h * w;
  std::vector<double> out(positions * cout);
  const auto& bv = bias.value();
  for (std::size_t p = 0; p < positions; ++p)
    std::copy(bv.begin(), bv.end(), out.begin() + p * cout);
  matmul_accumulate(x.value().data(), weights.value().data(), out.data(),
                    positions, cin, cout);
  auto xn = x.node();
  auto wn = weights.node();
  auto bn = bias.node();
  return detail::make_op_node(
      {h, w, cout}, std::move(out), {xn, wn, bn},
      [xn, wn, bn, positions, cin, cout](TensorNode& node) {
        if (xn->requires_grad) {
          xn->ensure_grad();
          matmul_bt_accumulate(node.grad.data(), wn->value.data(),
                               xn->grad.data(), positions, cout, cin);
        }
        if (wn->requires_grad) {
          wn->ensure_grad();
          matmul_at_accumulate(xn->value.data(), node.grad.data(),
                               wn->grad.data(), positions, cin, cout);
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t p = 0; p < positions; ++p)
            for (std::size_t j = 0; j < cout; ++j)
              bn->grad[j] += node.grad[p * cout + j];
        }
      });
}

std::size_t transposed_conv2d_output_size(std::size_t input_size,
                                          std::size_t kernel_size,
                                          std::size_t stride,
                                          std::size_t padding) {
  const long long out = static_cast<long long>(input_size - 1) *
                            static_cast<long long>(stride) -
                        2LL * static_cast<long long>(padding) +
                        static_cast<long long>(kernel_size);
  if (input_size == 0 || out <= 0) {
    throw ShapeError("transposed_conv2d: non-positive output size for input " +
                     std::to_string(input_size) + ", kernel " +
                     std::to_string(kernel_size) + ", stride " +
                     std::to_string(stride) + ", padding " +
                     std::to_string(padding));
  }
  return static_cast<std::size_t>(out);
}

Tensor transposed_conv2d(const Tensor& x, const Tensor& kernel,
                         const Tensor& bias, std::size_t stride,
                         std::size_t padding) {
  if (x.ndim() != 3 || kernel.ndim() != 4 || bias.ndim() != 1 ||
      kernel.shape()[2] != x.shape()[2] ||
      kernel.shape()[3] != bias.shape()[0]) {
    throw ShapeError("transposed_conv2d: incompatible shapes x=" +
                     shape_str(x.shape()) + " k=" + shape_str(kernel.shape()) +
                     " b=" + shape_str(bias.shape()));
  }
  const std::size_t hin = x.shape()[0], win = x.shape()[1];
  const std::size_t cin = x.shape()[2];
  const std::size_t kh = kernel.shape()[0], kw = kernel.shape()[1];
  const std::size_t cout = kernel.shape()[3];
  const std::size_t hout = transposed_conv2d_output_size(hin, kh, stride, padding);
  const std::size_t wout = transposed_conv2d_output_size(win, kw, stride, padding);

  std::vector<double> out(hout * wout * cout);
  const auto& bv = bias.value();
  for (std::size_t p = 0; p < hout * wout; ++p)
    std::copy(bv.begin(), bv.end(), out.begin() + p * cout);

  const auto& xv = x.value();
  const auto& kv = kernel.value();
  for (std::size_t iy = 0; iy < hin; ++iy) {
    for (std::size_t ix = 0; ix < win; ++ix) {
      const double* xpos = xv.data() + (iy * win + ix) * cin;
      for (std::size_t ky = 0; ky < kh; ++ky) {
        const long long oy = static_cast<long long>(iy * stride + ky) -
                             static_cast<long long>(padding);
        if (oy < 0 || oy >= static_cast<long long>(hout)) continue;
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const long long ox = static_cast<long long>(ix * stride + kx) -
                               static_cast<long long>(padding);
          if (ox < 0 || ox >= static_cast<long long>(wout)) continue;
          double* opos = out.data() + (static_cast<std::size_t>(oy) * wout +
                                       static_cast<std::size_t>(ox)) *
                                          cout;
          const double* ktap = kv.data() + (ky * kw + kx) * cin * cout;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const double xvv = xpos[ci];
            if (xvv == 0.0) continue;
            const double* krow = ktap + ci * cout;
            for (std::size_t co = 0; co < cout; ++co)
              opos[co] += xvv * krow[co];
          }
        }
      }
    }
  }

  auto xn = x.node();
  auto kn = kernel.node();
  auto bn = bias.node();
  return detail::make_op_node(
      {hout, wout, cout}, std::move(out), {xn, kn, bn},
      [xn, kn, bn, hin, win, cin, kh, kw, cout, hout, wout, stride,
       padding](TensorNode& node) {
        const auto& g = node.grad;
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t p = 0; p < hout * wout; ++p)
            for (std::size_t co = 0; co < cout; ++co)
              bn->grad[co] += g[p * cout + co];
        }
        const bool need_x = xn->requires_grad;
        const bool need_k = kn->requires_grad;
        if (!need_x && !need_k) return;
        if (need_x) xn->ensure_grad();
        if (need_k) kn->ensure_grad();
        for (std::size_t iy = 0; iy < hin; ++iy) {
          for (std::size_t ix = 0; ix < win; ++ix) {
            const std::size_t xbase = (iy * win + ix) * cin;
            for (std::size_t ky = 0; ky < kh; ++ky) {
              const long long oy = static_cast<long long>(iy * stride + ky) -
                                   static_cast<long long>(padding);
              if (oy < 0 || oy >= static_cast<long long>(hout)) continue;
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const long long ox = static_cast<long long>(ix * stride + kx) -
                                     static_cast<long long>(padding);
                if (ox < 0 || ox >= static_cast<long long>(wout)) continue;
                const double* gpos =
                    g.data() + (static_cast<std::size_t>(oy) * wout +
                                static_cast<std::size_t>(ox)) *
                                   cout;
                const std::size_t ktap = (ky * kw + kx) * cin * cout;
                for (std::size_t ci = 0; ci < cin; ++ci) {
                  const double* krow = kn->value.data() + ktap + ci * cout;
                  if (need_x) {
                    double acc = 0.0;
                    for (std::size_t co = 0; co < cout; ++co)
                      acc += gpos[co] * krow[co];
                    xn->grad[xbase + ci] += acc;
                  }
                  if (need_k) {
                    const double xvv = xn->value[xbase + ci];
                    if (xvv != 0.0) {
                      double* kg = kn->grad.data() + ktap + ci * cout;
                      for (std::size_t co = 0; co < cout; ++co)
                        kg[co] += xvv * gpos[co];
                    }
                  }
                }
              }
            }
          }
        }
      });
}

Tensor gem_pool(const Tensor& x, const Tensor& p) {
  if (x.ndim() != 2) {
    throw ShapeError("gem_pool: expected [N x C] input, got " +
                     shape_str(x.shape()));
  }
  if (p.size() != 1) {
    throw ParameterError("gem_pool: p must be a scalar tensor");
  }
  const double pv = p.value()[0];
  if (pv <= 0.0) {
    throw ParameterError("gem_pool: p must be > 0, got " + std::to_string(pv));
  }
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  const auto& xv = x.value();

  std::vector<double> clamped(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    note_kink_distance(std::abs(xv[i] - kGemClamp));
    clamped[i] = std::max(xv[i], kGemClamp);
  }

  std::vector<double> s(c, 0.0);     // mean of clamped^p per channel
  std::vector<double> slog(c, 0.0);  // mean of clamped^p * log(clamped)
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < c; ++j) {
      const double v = clamped[r * c + j];
      const double vp = std::pow(v, pv);
      s[j] += vp;
      slog[j] += vp * std::log(v);
    }
  }
  const double invn = 1.0 / static_cast<double>(n);
  std::vector<double> out(c);
  for (std::size_t j = 0; j < c; ++j) {
    s[j] *= invn;
    slog[j] *= invn;
    out[j] = std::pow(s[j], 1.0 / pv);
  }

  auto xn = x.node();
  auto pn = p.node();
  return detail::make_op_node(
      {c}, out, {xn, pn},
      [xn, pn, n, c, invn, y = out, s = std::move(s), slog = std::move(slog),
       clamped = std::move(clamped)](TensorNode& node) {
        const double pv = pn->value[0];
        if (xn->requires_grad) {
          xn->ensure_grad();
          for (std::size_t j = 0; j < c; ++j) {
            const double yf = std::pow(y[j], 1.0 - pv);
            for (std::size_t r = 0; r < n; ++r) {
              if (xn->value[r * c + j] < kGemClamp) continue;  // clamped flat
              const double xp = std::pow(clamped[r * c + j], pv - 1.0);
              xn->grad[r * c + j] += node.grad[j] * yf * xp * invn;
            }
          }
        }
        if (pn->requires_grad) {
          pn->ensure_grad();
          double acc = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            const double dy_dp =
                y[j] * (-std::log(s[j]) / (pv * pv) + slog[j] / (pv * s[j]));
            acc += node.grad[j] * dy_dp;
          }
          pn->grad[0] += acc;
        }
      });
}

Tensor euclidean_distance(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "euclidean_distance");
  const auto& av = a.value();
  const auto& bv = b.value();
  double sq = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = av[i] - bv[i];
    sq += d * d;
  }
  const double dist = std::sqrt(sq);
  note_kink_distance(dist);
  auto an = a.node();
  auto bn = b.node();
  return detail::make_op_node(
      {1}, {dist}, {an, bn}, [an, bn, dist](TensorNode& node) {
        // at coincident points the distance has no gradient; use 0
        if (dist < 1e-12) return;
        const double g = node.grad[0] / dist;
        if (an->requires_grad) {
          an->ensure_grad();
          for (std::size_t i = 0; i < an->value.size(); ++i)
            an->grad[i] += g * (an->value[i] - bn->value[i]);
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t i = 0; i < bn->value.size(); ++i)
            bn->grad[i] -= g * (an->value[i] - bn->value[i]);
        }
      });
}

Tensor pair_mean_similarity(
    const Tensor& a, const Tensor& b,
    const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[1]) {
    throw ShapeError("pair_mean_similarity: incompatible shapes " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t d = a.shape()[1];
  const auto& av = a.value();
  const auto& bv = b.value();
  double acc = 0.0;
  for (const auto& [i, j] : pairs) {
    if (i >= a.shape()[0] || j >= b.shape()[0]) {
      throw ShapeError("pair_mean_similarity: pair index out of range");
    }
    const double* ar = av.data() + i * d;
    const double* br = bv.data() + j * d;
    double dot = 0.0;
    for (std::size_t kk = 0; kk < d; ++kk) dot += ar[kk] * br[kk];
    acc += dot;
  }
  const double inv = pairs.empty() ? 0.0 : 1.0 / static_cast<double>(pairs.size());
  auto an = a.node();
  auto bn = b.node();
  return detail::make_op_node(
      {1}, {acc * inv}, {an, bn}, [an, bn, pairs, d, inv](TensorNode& node) {
        if (pairs.empty()) return;
        const double g = node.grad[0] * inv;
        if (an->requires_grad) an->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (const auto& [i, j] : pairs) {
          if (an->requires_grad)
            for (std::size_t kk = 0; kk < d; ++kk)
              an->grad[i * d + kk] += g * bn->value[j * d + kk];
          if (bn->requires_grad)
            for (std::size_t kk = 0; kk < d; ++kk)
              bn->grad[j * d + kk] += g * an->value[i * d + kk];
        }
      });
}

Tensor multi_head_attention(const Tensor& queries, const Tensor& keys,
                            const Tensor& values, const AttentionParams& params,
                            std::size_t num_heads) {
  if (queries.ndim() != 2 || keys.ndim() != 2 || values.ndim() != 2) {
    throw ShapeError("multi_head_attention: expected 2D token matrices");
  }
  const std::size_t d = params.wq.shape()[1];
  if (d % num_heads != 0) {
    throw ShapeError("multi_head_attention: model dim " + std::to_string(d) +
                     " not divisible by " + std::to_string(num_heads) +
                     " heads");
  }
  const std::size_t dh = d / num_heads;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));

  const Tensor q = add_bias(matmul(queries, params.wq), params.bq);
  const Tensor k = add_bias(matmul(keys, params.wk), params.bk);
  const Tensor v = add_bias(matmul(values, params.wv), params.bv);

  std::vector<Tensor> heads;
  heads.reserve(num_heads);
  for (std::size_t h = 0; h < num_heads; ++h) {
    const Tensor qh = slice_last(q, h * dh, (h + 1) * dh);
    const Tensor kh = slice_last(k, h * dh, (h + 1) * dh);
    const Tensor vh = slice_last(v, h * dh, (h + 1) * dh);
    const Tensor logits = scale(matmul(qh, transpose2d(kh)), scale_factor);
    const Tensor weights = softmax(logits, 1);
    heads.push_back(matmul(weights, vh));
  }
  const Tensor merged = concat_last(heads);
  return add_bias(matmul(merged, params.wo), params.bo);
}

void begin_kink_tracking() {
  g_kink_tracking = true;
  g_kink_margin = std::numeric_limits<double>::infinity();
}

double end_kink_tracking() {
  g_kink_tracking = false;
  return g_kink_margin;
}

}  // namespace cqvpr::ops
