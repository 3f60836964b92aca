#include "smdk/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

namespace smdk {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

Tensor elementwise(const Tensor& a, const Tensor& b,
                   double (*f)(double, double), double (*dfa)(double, double),
                   double (*dfb)(double, double), const char* name) {
  check_same_shape(a, b, name);
  size_t n = a.values().size();
  std::vector<double> out(n);
  for (size_t i = 0; i < n; ++i) out[i] = f(a.values()[i], b.values()[i]);
  return make_op(a.shape(), std::move(out), {a, b},
                 [a, b, dfa, dfb](const std::vector<double>& g) {
                   size_t n = g.size();
                   if (a.requires_grad()) {
                     std::vector<double> da(n);
                     for (size_t i = 0; i < n; ++i)
                       da[i] = g[i] * dfa(a.values()[i], b.values()[i]);
                     accumulate_grad(a, da);
                   }
                   if (b.requires_grad()) {
                     std::vector<double> db(n);
                     for (size_t i = 0; i < n; ++i)
                       db[i] = g[i] * dfb(a.values()[i], b.values()[i]);
                     accumulate_grad(b, db);
                   }
                 });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise(
      a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; },
      "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise(
      a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; },
      "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise(
      a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; },
      "mul");
}

Tensor scale(const Tensor& a, double c) {
  size_t n = a.values().size();
  std::vector<double> out(n);
  for (size_t i = 0; i < n; ++i) out[i] = a.values()[i] * c;
  return make_op(a.shape(), std::move(out), {a},
                 [a, c](const std::vector<double>& g) {
                   std::vector<double> da(g.size());
                   for (size_t i = 0; i < g.size(); ++i) da[i] = g[i] * c;
                   accumulate_grad(a, da);
                 });
}

Tensor exp(const Tensor& a) {
  size_t n = a.values().size();
  std::vector<double> out(n);
  for (size_t i = 0; i < n; ++i) out[i] = std::exp(a.values()[i]);
  Tensor res = make_op(a.shape(), std::move(out), {a}, nullptr);
  if (res.requires_grad()) {
    auto vals = res.values();  // copy for the closure
    res.node()->back = [a, vals](const std::vector<double>& g) {
      std::vector<double> da(g.size());
      for (size_t i = 0; i < g.size(); ++i) da[i] = g[i] * vals[i];
      accumulate_grad(a, da);
    };
  }
  return res;
}

Tensor add_rowvec(const Tensor& a, const Tensor& bias) {
  int r = a.rows(), c = a.cols();
  if (bias.shape() != Shape{c})
    throw ShapeError("add_rowvec: bias " + shape_str(bias.shape()) +
                     " does not match width " + std::to_string(c));
  std::vector<double> out(a.values());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<size_t>(i) * c + j] += bias.values()[j];
  return make_op(a.shape(), std::move(out), {a, bias},
                 [a, bias, r, c](const std::vector<double>& g) {
                   if (a.requires_grad()) accumulate_grad(a, g);
                   if (bias.requires_grad()) {
                     std::vector<double> db(static_cast<size_t>(c), 0.0);
                     for (int i = 0; i < r; ++i)
                       for (int j = 0; j < c; ++j)
                         db[j] += g[static_cast<size_t>(i) * c + j];
                     accumulate_grad(bias, db);
                   }
                 });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows())
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  int m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(static_cast<size_t>(m) * n);
  CMap A(a.values().data(), m, k), B(b.values().data(), k, n);
  MMap(out.data(), m, n).noalias() = A * B;
  return make_op({m, n}, std::move(out), {a, b},
                 [a, b, m, k, n](const std::vector<double>& g) {
                   CMap G(g.data(), m, n);
                   CMap A(a.values().data(), m, k), B(b.values().data(), k, n);
                   if (a.requires_grad()) {
                     std::vector<double> da(static_cast<size_t>(m) * k);
                     MMap(da.data(), m, k).noalias() = G * B.transpose();
                     accumulate_grad(a, da);
                   }
                   if (b.requires_grad()) {
                     std::vector<double> db(static_cast<size_t>(k) * n);
                     MMap(db.data(), k, n).noalias() = A.transpose() * G;
                     accumulate_grad(b, db);
                   }
                 });
}

Tensor transpose(const Tensor& a) {
  int r = a.rows(), c = a.cols();
  std::vector<double> out(a.values().size());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out[static_cast<size_t>(j) * r + i] = a.values()[static_cast<size_t>(i) * c + j];
  return make_op({c, r}, std::move(out), {a},
                 [a, r, c](const std::vector<double>& g) {
                   std::vector<double> da(g.size());
                   for (int i = 0; i < r; ++i)
                     for (int j = 0; j < c; ++j)
                       da[static_cast<size_t>(i) * c + j] = g[static_cast<size_t>(j) * r + i];
                   accumulate_grad(a, da);
                 });
}

Tensor slice_cols(const Tensor& a, int start, int width) {
  int r = a.rows(), c = a.cols();
  if (start < 0 || width <= 0 || start + width > c)
    throw ShapeError("slice_cols: [" + std::to_string(start) + "," +
                     std::to_string(start + width) + ") out of width " +
                     std::to_string(c));
  std::vector<double> out(static_cast<size_t>(r) * width);
  for (int i = 0; i < r; ++i)
    std::copy_n(a.values().data() + static_cast<size_t>(i) * c + start, width,
                out.data() + static_cast<size_t>(i) * width);
  return make_op({r, width}, std::move(out), {a},
                 [a, start, width, r, c](const std::vector<double>& g) {
                   std::vector<double> da(a.values().size(), 0.0);
                   for (int i = 0; i < r; ++i)
                     for (int j = 0; j < width; ++j)
                       da[static_cast<size_t>(i) * c + start + j] =
                           g[static_cast<size_t>(i) * width + j];
                   accumulate_grad(a, da);
                 });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  int r = parts[0].rows();
  int total = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) throw ShapeError("concat_cols: row mismatch");
    total += p.cols();
  }
  std::vector<double> out(static_cast<size_t>(r) * total);
  int off = 0;
  for (const auto& p : parts) {
    int w = p.cols();
    for (int i = 0; i < r; ++i)
      std::copy_n(p.values().data() + static_cast<size_t>(i) * w, w,
                  out.data() + static_cast<size_t>(i) * total + off);
    off += w;
  }
  return make_op({r, total}, std::move(out), parts,
                 [parts, r, total](const std::vector<double>& g) {
                   int off = 0;
                   for (const auto& p : parts) {
                     int w = p.cols();
                     if (p.requires_grad()) {
                       std::vector<double> dp(static_cast<size_t>(r) * w);
                       for (int i = 0; i < r; ++i)
                         std::copy_n(g.data() + static_cast<size_t>(i) * total + off, w,
                                     dp.data() + static_cast<size_t>(i) * w);
                       accumulate_grad(p, dp);
                     }
                     off += w;
                   }
                 });
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& indices) {
  int r = table.rows(), c = table.cols();
  for (int ix : indices)
    if (ix < 0 || ix >= r)
      throw ValueError("gather_rows: index " + std::to_string(ix) +
                       " out of range [0," + std::to_string(r) + ")");
  int m = static_cast<int>(indices.size());
  std::vector<double> out(static_cast<size_t>(m) * c);
  for (int i = 0; i < m; ++i)
    std::copy_n(table.values().data() + static_cast<size_t>(indices[i]) * c, c,
                out.data() + static_cast<size_t>(i) * c);
  return make_op({m, c}, std::move(out), {table},
                 [table, indices, c](const std::vector<double>& g) {
                   std::vector<double> dt(table.values().size(), 0.0);
                   for (size_t i = 0; i < indices.size(); ++i)
                     for (int j = 0; j < c; ++j)
                       dt[static_cast<size_t>(indices[i]) * c + j] += g[i * c + j];
                   accumulate_grad(table, dt);
                 });
}

namespace {

// Softmax over contiguous rows of width w; shared by softmax/causal variants.
void softmax_rows_inplace(std::vector<double>& v, int rows, int w) {
  for (int i = 0; i < rows; ++i) {
    double* row = v.data() + static_cast<size_t>(i) * w;
    double mx = *std::max_element(row, row + w);
    double s = 0;
    for (int j = 0; j < w; ++j) {
      row[j] = std::exp(row[j] - mx);
      s += row[j];
    }
    for (int j = 0; j < w; ++j) row[j] /= s;
  }
}

// d(softmax)/dz given output p and upstream g, per row.
void softmax_backward_rows(const std::vector<double>& p,
                           const std::vector<double>& g, int rows, int w,
                           std::vector<double>& dz) {
  for (int i = 0; i < rows; ++i) {
    const double* pr = p.data() + static_cast<size_t>(i) * w;
    const double* gr = g.data() + static_cast<size_t>(i) * w;
    double* dr = dz.data() + static_cast<size_t>(i) * w;
    double dot = 0;
    for (int j = 0; j < w; ++j) dot += pr[j] * gr[j];
    for (int j = 0; j < w; ++j) dr[j] = pr[j] * (gr[j] - dot);
  }
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  int nd = static_cast<int>(x.shape().size());
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd)
    throw ShapeError("softmax: invalid axis for " + shape_str(x.shape()));
  if (nd == 1 || (nd == 2 && axis == 1)) {
    int rows = nd == 1 ? 1 : x.shape()[0];
    int w = x.shape()[nd - 1];
    std::vector<double> out(x.values());
    softmax_rows_inplace(out, rows, w);
    Tensor res = make_op(x.shape(), std::move(out), {x}, nullptr);
    if (res.requires_grad()) {
      auto p = res.values();
      res.node()->back = [x, p, rows, w](const std::vector<double>& g) {
        std::vector<double> dz(g.size());
        softmax_backward_rows(p, g, rows, w, dz);
        accumulate_grad(x, dz);
      };
    }
    return res;
  }
  if (nd == 2 && axis == 0) return transpose(softmax(transpose(x), 1));
  throw ShapeError("softmax: only 1-D/2-D supported");
}

Tensor causal_softmax(const Tensor& scores) {
  int n = scores.rows();
  if (scores.cols() != n) throw ShapeError("causal_softmax: matrix not square");
  std::vector<double> out(scores.values());
  for (int i = 0; i < n; ++i) {
    double* row = out.data() + static_cast<size_t>(i) * n;
    double mx = *std::max_element(row, row + i + 1);
    double s = 0;
    for (int j = 0; j <= i; ++j) {
      row[j] = std::exp(row[j] - mx);
      s += row[j];
    }
    for (int j = 0; j <= i; ++j) row[j] /= s;
    for (int j = i + 1; j < n; ++j) row[j] = 0.0;
  }
  Tensor res = make_op(scores.shape(), std::move(out), {scores}, nullptr);
  if (res.requires_grad()) {
    auto p = res.values();
    res.node()->back = [scores, p, n](const std::vector<double>& g) {
      std::vector<double> dz(g.size(), 0.0);
      for (int i = 0; i < n; ++i) {
        const double* pr = p.data() + static_cast<size_t>(i) * n;
        const double* gr = g.data() + static_cast<size_t>(i) * n;
        double* dr = dz.data() + static_cast<size_t>(i) * n;
        double dot = 0;
        for (int j = 0; j <= i; ++j) dot += pr[j] * gr[j];
        for (int j = 0; j <= i; ++j) dr[j] = pr[j] * (gr[j] - dot);
      }
      accumulate_grad(scores, dz);
    };
  }
  return res;
}

Tensor log_softmax(const Tensor& x) {
  int rows = x.rows(), w = x.cols();
  std::vector<double> out(x.values());
  for (int i = 0; i < rows; ++i) {
    double* row = out.data() + static_cast<size_t>(i) * w;
    double mx = *std::max_element(row, row + w);
    double s = 0;
    for (int j = 0; j < w; ++j) s += std::exp(row[j] - mx);
    double lse = mx + std::log(s);
    for (int j = 0; j < w; ++j) row[j] -= lse;
  }
  Tensor res = make_op(x.shape(), std::move(out), {x}, nullptr);
  if (res.requires_grad()) {
    auto lp = res.values();
    res.node()->back = [x, lp, rows, w](const std::vector<double>& g) {
      std::vector<double> dz(g.size());
      for (int i = 0; i < rows; ++i) {
        const double* lr = lp.data() + static_cast<size_t>(i) * w;
        const double* gr = g.data() + static_cast<size_t>(i) * w;
        double* dr = dz.data() + static_cast<size_t>(i) * w;
        double gs = 0;
        for (int j = 0; j < w; ++j) gs += gr[j];
        for (int j = 0; j < w; ++j) dr[j] = gr[j] - std::exp(lr[j]) * gs;
      }
      accumulate_grad(x, dz);
    };
  }
  return res;
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                 double eps) {
  if (eps <= 0) throw ValueError("layernorm: eps must be > 0");
  int rows = x.rows(), w = x.cols();
  if (gain.shape() != Shape{w} || bias.shape() != Shape{w})
    throw ShapeError("layernorm: gain/bias width mismatch, expected " +
                     std::to_string(w));
  std::vector<double> out(x.values().size());
  std::vector<double> xhat(x.values().size());
  std::vector<double> rstd(static_cast<size_t>(rows));
  for (int i = 0; i < rows; ++i) {
    const double* row = x.values().data() + static_cast<size_t>(i) * w;
    double m = 0;
    for (int j = 0; j < w; ++j) m += row[j];
    m /= w;
    double var = 0;
    for (int j = 0; j < w; ++j) var += (row[j] - m) * (row[j] - m);
    var /= w;
    double rs = 1.0 / std::sqrt(var + eps);
    rstd[i] = rs;
    for (int j = 0; j < w; ++j) {
      double xh = (row[j] - m) * rs;
      xhat[static_cast<size_t>(i) * w + j] = xh;
      out[static_cast<size_t>(i) * w + j] = xh * gain.values()[j] + bias.values()[j];
    }
  }
  return make_op(
      x.shape(), std::move(out), {x, gain, bias},
      [x, gain, bias, xhat, rstd, rows, w](const std::vector<double>& g) {
        if (gain.requires_grad()) {
          std::vector<double> dg(static_cast<size_t>(w), 0.0);
          for (int i = 0; i < rows; ++i)
            for (int j = 0; j < w; ++j)
              dg[j] += g[static_cast<size_t>(i) * w + j] * xhat[static_cast<size_t>(i) * w + j];
          accumulate_grad(gain, dg);
        }
        if (bias.requires_grad()) {
          std::vector<double> db(static_cast<size_t>(w), 0.0);
          for (int i = 0; i < rows; ++i)
            for (int j = 0; j < w; ++j) db[j] += g[static_cast<size_t>(i) * w + j];
          accumulate_grad(bias, db);
        }
        if (x.requires_grad()) {
          std::vector<double> dx(g.size());
          for (int i = 0; i < rows; ++i) {
            const double* gr = g.data() + static_cast<size_t>(i) * w;
            const double* xh = xhat.data() + static_cast<size_t>(i) * w;
            double* dr = dx.data() + static_cast<size_t>(i) * w;
            double sum_gy = 0, sum_gyx = 0;
            for (int j = 0; j < w; ++j) {
              double gy = gr[j] * gain.values()[j];
              sum_gy += gy;
              sum_gyx += gy * xh[j];
            }
            for (int j = 0; j < w; ++j) {
              double gy = gr[j] * gain.values()[j];
              dr[j] = rstd[i] * (gy - sum_gy / w - xh[j] * sum_gyx / w);
            }
          }
          accumulate_grad(x, dx);
        }
      });
}

Tensor gelu(const Tensor& x) {
  size_t n = x.values().size();
  std::vector<double> out(n);
  for (size_t i = 0; i < n; ++i) {
    double v = x.values()[i];
    out[i] = 0.5 * v * (1.0 + std::erf(v / M_SQRT2));
  }
  return make_op(x.shape(), std::move(out), {x},
                 [x](const std::vector<double>& g) {
                   std::vector<double> dx(g.size());
                   for (size_t i = 0; i < g.size(); ++i) {
                     double v = x.values()[i];
                     double cdf = 0.5 * (1.0 + std::erf(v / M_SQRT2));
                     double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * M_PI);
                     dx[i] = g[i] * (cdf + v * pdf);
                   }
                   accumulate_grad(x, dx);
                 });
}

Tensor relu(const Tensor& x) {
  size_t n = x.values().size();
  std::vector<double> out(n);
  for (size_t i = 0; i < n; ++i) out[i] = std::max(0.0, x.values()[i]);
  return make_op(x.shape(), std::move(out), {x},
                 [x](const std::vector<double>& g) {
                   std::vector<double> dx(g.size());
                   for (size_t i = 0; i < g.size(); ++i)
                     dx[i] = x.values()[i] > 0 ? g[i] : 0.0;
                   accumulate_grad(x, dx);
                 });
}

Tensor sum(const Tensor& x) {
  double s = 0;
  for (double v : x.values()) s += v;
  return make_op({1}, {s}, {x}, [x](const std::vector<double>& g) {
    std::vector<double> dx(x.values().size(), g[0]);
    accumulate_grad(x, dx);
  });
}

Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum_sq(const Tensor& x) {
  double s = 0;
  for (double v : x.values()) s += v * v;
  return make_op({1}, {s}, {x}, [x](const std::vector<double>& g) {
    std::vector<double> dx(x.values().size());
    for (size_t i = 0; i < dx.size(); ++i) dx[i] = 2.0 * x.values()[i] * g[0];
    accumulate_grad(x, dx);
  });
}

Tensor col_mean(const Tensor& x) {
  int rows = x.rows(), w = x.cols();
  std::vector<double> out(static_cast<size_t>(w), 0.0);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < w; ++j) out[j] += x.values()[static_cast<size_t>(i) * w + j];
  for (int j = 0; j < w; ++j) out[j] /= rows;
  return make_op({w}, std::move(out), {x},
                 [x, rows, w](const std::vector<double>& g) {
                   std::vector<double> dx(x.values().size());
                   for (int i = 0; i < rows; ++i)
                     for (int j = 0; j < w; ++j)
                       dx[static_cast<size_t>(i) * w + j] = g[j] / rows;
                   accumulate_grad(x, dx);
                 });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
  int rows = logits.rows(), v = logits.cols();
  if (static_cast<int>(targets.size()) != rows)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(rows) + " rows");
  for (int t : targets)
    if (t < 0 || t >= v)
      throw ValueError("cross_entropy: target " + std::to_string(t) +
                       " out of range [0," + std::to_string(v) + ")");
  std::vector<double> lse(static_cast<size_t>(rows));
  double loss = 0;
  for (int i = 0; i < rows; ++i) {
    const double* row = logits.values().data() + static_cast<size_t>(i) * v;
    double mx = *std::max_element(row, row + v);
    double s = 0;
    for (int j = 0; j < v; ++j) s += std::exp(row[j] - mx);
    lse[i] = mx + std::log(s);
    loss += lse[i] - row[targets[i]];
  }
  loss /= rows;
  return make_op({1}, {loss}, {logits},
                 [logits, targets, lse, rows, v](const std::vector<double>& g) {
                   std::vector<double> dx(logits.values().size());
                   double inv = g[0] / rows;
                   for (int i = 0; i < rows; ++i) {
                     const double* row = logits.values().data() + static_cast<size_t>(i) * v;
                     double* dr = dx.data() + static_cast<size_t>(i) * v;
                     for (int j = 0; j < v; ++j)
                       dr[j] = std::exp(row[j] - lse[i]) * inv;
                     dr[targets[i]] -= inv;
                   }
                   accumulate_grad(logits, dx);
                 });
}

}  // namespace smdk
