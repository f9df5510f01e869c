#include "cdl/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <memory>

#include "cdl/error.hpp"
#include "cdl/kernels.hpp"

namespace cdl {

namespace {

std::atomic<std::uint64_t> g_next_param_id{1};

Tape* common_tape(std::initializer_list<Var> vars) {
  Tape* t = nullptr;
  for (const Var& v : vars) {
    if (v.tape == nullptr) throw TapeError("operation on a detached variable");
    if (t == nullptr) t = v.tape;
    if (v.tape != t) throw TapeError("operation mixes variables from different tapes");
  }
  return t;
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw ContractViolation(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
}

void check_finite(std::span<const double> v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x)) throw NumericError(std::string(what) + ": non-finite input");
}

Shape matrix_shape(int rows, int cols) { return {rows, cols}; }

}  // namespace

// ---- Parameter / Gradients ----------------------------------------------

Parameter::Parameter(std::string n, Tensor v, bool t)
    : name(std::move(n)), value(std::move(v)), trainable(t), id(g_next_param_id.fetch_add(1)) {}

void Gradients::accumulate(std::uint64_t id, const Tensor& g) {
  auto it = grads_.find(id);
  if (it == grads_.end()) {
    grads_.emplace(id, g);
    return;
  }
  CDL_REQUIRE(it->second.size() == g.size(), "gradient shape mismatch on accumulate");
  for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
}

void Gradients::scale(double s) {
  for (auto& [id, g] : grads_)
    for (double& v : g.values()) v *= s;
}

void Gradients::merge(const Gradients& other) {
  for (const auto& [id, g] : other.grads_) accumulate(id, g);
}

const Tensor& Gradients::at(std::uint64_t id) const {
  auto it = grads_.find(id);
  CDL_REQUIRE(it != grads_.end(), "no gradient for parameter id " + std::to_string(id));
  return it->second;
}

const Tensor* Gradients::find(std::uint64_t id) const {
  auto it = grads_.find(id);
  return it == grads_.end() ? nullptr : &it->second;
}

// ---- Var / Tape ------------------------------------------------------------

const Tensor& Var::value() const {
  if (tape == nullptr) throw TapeError("value() on a detached variable");
  return tape->value(index);
}

bool Var::requires_grad() const { return tape != nullptr && tape->requires_grad(index); }

void Tape::check_owned(const Var& v) const {
  if (v.tape != this || v.index >= nodes_.size()) throw TapeError("variable does not belong to this tape");
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::param(const Parameter& p) {
  Node n;
  n.external = &p.value;
  if (p.trainable) {
    n.requires_grad = true;
    n.param_id = p.id;
  }
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::push(Tensor value, std::initializer_list<Var> parents, Backward backward) {
  return push(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(backward));
}

Var Tape::push(Tensor value, std::span<const Var> parents, Backward backward) {
  Node n;
  n.value = std::move(value);
  for (const Var& p : parents) {
    check_owned(p);
    n.requires_grad = n.requires_grad || nodes_[p.index].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Tensor& Tape::grad_buffer(std::size_t i) {
  Node& n = nodes_[i];
  if (n.grad.empty()) n.grad = Tensor::zeros_like(value(i));
  return n.grad;
}

Gradients Tape::grad(Var loss) {
  check_owned(loss);
  if (value(loss.index).size() != 1)
    throw ContractViolation("grad() needs a scalar loss, got " + shape_str(loss.shape()));

  for (Node& n : nodes_) n.grad = Tensor();
  if (nodes_[loss.index].requires_grad) grad_buffer(loss.index)[0] = 1.0;

  for (std::size_t i = loss.index + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    // Closures only touch parent buffers; nodes_ is not resized here.
    n.backward(*this, n.grad);
  }

  Gradients out;
  for (Node& n : nodes_) {
    if (n.param_id == 0) continue;
    if (n.grad.empty())
      out.accumulate(n.param_id, Tensor::zeros_like(*n.external));
    else
      out.accumulate(n.param_id, n.grad);
  }
  return out;
}

// ---- primitives --------------------------------------------------------------

Var matmul(Var a, Var b) {
  Tape* t = common_tape({a, b});
  const int m = a.value().rows(), k = a.value().cols(), n = b.value().cols();
  if (b.value().rows() != k)
    throw ContractViolation("matmul: inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor out(matrix_shape(m, n));
  kernels::gemm_nn(a.value().span(), b.value().span(), out.span(), m, k, n);
  const std::size_t ai = a.index, bi = b.index;
  return t->push(std::move(out), {a, b}, [ai, bi, m, k, n](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(ai))  // dA = G * B^T
      kernels::gemm_nt(g.span(), tp.value(bi).span(), tp.grad_buffer(ai).span(), m, n, k, true);
    if (tp.requires_grad(bi))  // dB = A^T * G
      kernels::gemm_tn(tp.value(ai).span(), g.span(), tp.grad_buffer(bi).span(), k, m, n, true);
  });
}

Var matmul_nt(Var a, Var b) {
  Tape* t = common_tape({a, b});
  const int m = a.value().rows(), k = a.value().cols(), n = b.value().rows();
  if (b.value().cols() != k)
    throw ContractViolation("matmul_nt: inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  Tensor out(matrix_shape(m, n));
  kernels::gemm_nt(a.value().span(), b.value().span(), out.span(), m, k, n);
  const std::size_t ai = a.index, bi = b.index;
  return t->push(std::move(out), {a, b}, [ai, bi, m, k, n](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(ai))  // dA = G * B
      kernels::gemm_nn(g.span(), tp.value(bi).span(), tp.grad_buffer(ai).span(), m, n, k, true);
    if (tp.requires_grad(bi))  // dB = G^T * A
      kernels::gemm_tn(g.span(), tp.value(ai).span(), tp.grad_buffer(bi).span(), n, m, k, true);
  });
}

Var add(Var a, Var b) {
  Tape* t = common_tape({a, b});
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ai = a.index, bi = b.index;
  return t->push(std::move(out), {a, b}, [ai, bi](Tape& tp, const Tensor& g) {
    for (std::size_t idx : {ai, bi}) {
      if (!tp.requires_grad(idx)) continue;
      Tensor& d = tp.grad_buffer(idx);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
}

Var add_row(Var a, Var bias) {
  Tape* t = common_tape({a, bias});
  const int m = a.value().rows(), n = a.value().cols();
  if (static_cast<int>(bias.value().size()) != n)
    throw ContractViolation("add_row: bias " + shape_str(bias.shape()) + " vs " + shape_str(a.shape()));
  Tensor out = a.value();
  const Tensor& bv = bias.value();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) += bv[j];
  const std::size_t ai = a.index, bi = bias.index;
  return t->push(std::move(out), {a, bias}, [ai, bi, m, n](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(ai)) {
      Tensor& d = tp.grad_buffer(ai);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (tp.requires_grad(bi)) {
      Tensor& d = tp.grad_buffer(bi);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) d[j] += g.at(i, j);
    }
  });
}

Var sub(Var a, Var b) {
  Tape* t = common_tape({a, b});
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ai = a.index, bi = b.index;
  return t->push(std::move(out), {a, b}, [ai, bi](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(ai)) {
      Tensor& d = tp.grad_buffer(ai);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (tp.requires_grad(bi)) {
      Tensor& d = tp.grad_buffer(bi);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape* t = common_tape({a, b});
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ai = a.index, bi = b.index;
  return t->push(std::move(out), {a, b}, [ai, bi](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(ai)) {
      Tensor& d = tp.grad_buffer(ai);
      const Tensor& o = tp.value(bi);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * o[i];
    }
    if (tp.requires_grad(bi)) {
      Tensor& d = tp.grad_buffer(bi);
      const Tensor& o = tp.value(ai);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * o[i];
    }
  });
}

Var scale(Var a, double s) {
  Tape* t = common_tape({a});
  Tensor out = a.value();
  for (double& v : out.values()) v *= s;
  const std::size_t ai = a.index;
  return t->push(std::move(out), {a}, [ai, s](Tape& tp, const Tensor& g) {
    Tensor& d = tp.grad_buffer(ai);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += s * g[i];
  });
}

Var mul_scalar(Var a, Var s) {
  Tape* t = common_tape({a, s});
  CDL_REQUIRE(s.value().size() == 1, "mul_scalar: scale must have one element");
  const double sv = s.value()[0];
  Tensor out = a.value();
  for (double& v : out.values()) v *= sv;
  const std::size_t ai = a.index, si = s.index;
  return t->push(std::move(out), {a, s}, [ai, si](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(ai)) {
      const double sv = tp.value(si)[0];
      Tensor& d = tp.grad_buffer(ai);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += sv * g[i];
    }
    if (tp.requires_grad(si)) {
      const Tensor& av = tp.value(ai);
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
      tp.grad_buffer(si)[0] += acc;
    }
  });
}

Var add_constant(Var a, double c) {
  Tape* t = common_tape({a});
  Tensor out = a.value();
  for (double& v : out.values()) v += c;
  const std::size_t ai = a.index;
  return t->push(std::move(out), {a}, [ai](Tape& tp, const Tensor& g) {
    Tensor& d = tp.grad_buffer(ai);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

Var sum(Var a) {
  Tape* t = common_tape({a});
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const std::size_t ai = a.index;
  return t->push(Tensor::scalar(s), {a}, [ai](Tape& tp, const Tensor& g) {
    Tensor& d = tp.grad_buffer(ai);
    for (double& v : d.values()) v += g[0];
  });
}

Var mean(Var a) {
  Tape* t = common_tape({a});
  const double n = static_cast<double>(a.value().size());
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const std::size_t ai = a.index;
  return t->push(Tensor::scalar(s / n), {a}, [ai, n](Tape& tp, const Tensor& g) {
    Tensor& d = tp.grad_buffer(ai);
    for (double& v : d.values()) v += g[0] / n;
  });
}

Var log(Var a) {
  Tape* t = common_tape({a});
  Tensor out = a.value();
  for (double& v : out.values()) v = std::log(v);
  const std::size_t ai = a.index;
  return t->push(std::move(out), {a}, [ai](Tape& tp, const Tensor& g) {
    Tensor& d = tp.grad_buffer(ai);
    const Tensor& x = tp.value(ai);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] / x[i];
  });
}

Var sqrt(Var a) {
  Tape* t = common_tape({a});
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    CDL_REQUIRE(a.value()[i] >= 0.0, "sqrt of a negative value");
    out[i] = std::sqrt(a.value()[i]);
  }
  const std::size_t ai = a.index, oi = t->size();
  return t->push(std::move(out), {a}, [ai, oi](Tape& tp, const Tensor& g) {
    const Tensor& y = tp.value(oi);
    Tensor& d = tp.grad_buffer(ai);
    for (std::size_t i = 0; i < d.size(); ++i)
      if (y[i] > 0.0) d[i] += g[i] * 0.5 / y[i];
  });
}

Var sigmoid(Var a) {
  Tape* t = common_tape({a});
  Tensor out = a.value();
  for (double& v : out.values()) v = 1.0 / (1.0 + std::exp(-v));
  const std::size_t ai = a.index;
  auto y = std::make_shared<Tensor>(out);
  return t->push(std::move(out), {a}, [ai, y](Tape& tp, const Tensor& g) {
    Tensor& d = tp.grad_buffer(ai);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * (*y)[i] * (1.0 - (*y)[i]);
  });
}

Var gelu(Var a) {
  Tape* t = common_tape({a});
  Tensor out(a.shape());
  kernels::gelu(a.value().span(), out.span());
  const std::size_t ai = a.index;
  return t->push(std::move(out), {a}, [ai](Tape& tp, const Tensor& g) {
    kernels::gelu_grad(tp.value(ai).span(), g.span(), tp.grad_buffer(ai).span());
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Tape* t = common_tape({x, gamma, beta});
  const int m = x.value().rows(), n = x.value().cols();
  CDL_REQUIRE(static_cast<int>(gamma.value().size()) == n && static_cast<int>(beta.value().size()) == n,
              "layer_norm: affine parameters must match the feature dim");
  auto xhat = std::make_shared<Tensor>(x.shape());
  auto inv_std = std::make_shared<std::vector<double>>(m);
  kernels::layer_norm_rows(x.value().span(), xhat->span(), *inv_std, m, n, eps);
  Tensor out(x.shape());
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) = xhat->at(i, j) * gv[j] + bv[j];
  const std::size_t xi = x.index, gi = gamma.index, bi = beta.index;
  return t->push(std::move(out), {x, gamma, beta}, [=](Tape& tp, const Tensor& g) {
    const Tensor& gv = tp.value(gi);
    if (tp.requires_grad(xi)) {
      Tensor& dx = tp.grad_buffer(xi);
      std::vector<double> dxhat(n);
      for (int i = 0; i < m; ++i) {
        double mean_d = 0.0, mean_dx = 0.0;
        for (int j = 0; j < n; ++j) {
          dxhat[j] = g.at(i, j) * gv[j];
          mean_d += dxhat[j];
          mean_dx += dxhat[j] * xhat->at(i, j);
        }
        mean_d /= n;
        mean_dx /= n;
        for (int j = 0; j < n; ++j)
          dx.at(i, j) += (*inv_std)[i] * (dxhat[j] - mean_d - xhat->at(i, j) * mean_dx);
      }
    }
    if (tp.requires_grad(gi)) {
      Tensor& dg = tp.grad_buffer(gi);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) dg[j] += g.at(i, j) * xhat->at(i, j);
    }
    if (tp.requires_grad(bi)) {
      Tensor& db = tp.grad_buffer(bi);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) db[j] += g.at(i, j);
    }
  });
}

Var softmax(Var x, double tau) {
  Tape* t = common_tape({x});
  CDL_REQUIRE(tau > 0.0, "softmax: temperature must be positive");
  const int m = x.value().rows(), n = x.value().cols();
  Tensor out(x.shape());
  kernels::softmax_rows(x.value().span(), out.span(), m, n, tau);
  const std::size_t xi = x.index;
  auto y = std::make_shared<Tensor>(out);
  return t->push(std::move(out), {x}, [xi, y, m, n, tau](Tape& tp, const Tensor& g) {
    Tensor& dx = tp.grad_buffer(xi);
    for (int i = 0; i < m; ++i) {
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += g.at(i, j) * y->at(i, j);
      for (int j = 0; j < n; ++j) dx.at(i, j) += y->at(i, j) * (g.at(i, j) - dot) / tau;
    }
  });
}

Var log_softmax(Var x, double tau) {
  Tape* t = common_tape({x});
  CDL_REQUIRE(tau > 0.0, "log_softmax: temperature must be positive");
  const int m = x.value().rows(), n = x.value().cols();
  Tensor out(x.shape());
  auto p = std::make_shared<Tensor>(x.shape());
  const Tensor& xv = x.value();
  for (int i = 0; i < m; ++i) {
    double mx = xv.at(i, 0);
    for (int j = 1; j < n; ++j) mx = std::max(mx, xv.at(i, j));
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += std::exp((xv.at(i, j) - mx) / tau);
    const double lse = std::log(s);
    for (int j = 0; j < n; ++j) {
      out.at(i, j) = (xv.at(i, j) - mx) / tau - lse;
      p->at(i, j) = std::exp(out.at(i, j));
    }
  }
  const std::size_t xi = x.index;
  return t->push(std::move(out), {x}, [xi, p, m, n, tau](Tape& tp, const Tensor& g) {
    Tensor& dx = tp.grad_buffer(xi);
    for (int i = 0; i < m; ++i) {
      double gs = 0.0;
      for (int j = 0; j < n; ++j) gs += g.at(i, j);
      for (int j = 0; j < n; ++j) dx.at(i, j) += (g.at(i, j) - p->at(i, j) * gs) / tau;
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  CDL_REQUIRE(!parts.empty(), "concat_rows: nothing to concatenate");
  Tape* t = parts[0].tape;
  if (t == nullptr) throw TapeError("concat_rows on a detached variable");
  const int n = parts[0].value().cols();
  int m = 0;
  for (const Var& p : parts) {
    if (p.tape != t) throw TapeError("concat_rows mixes tapes");
    if (p.value().cols() != n) throw ContractViolation("concat_rows: column count mismatch");
    m += p.value().rows();
  }
  Tensor out(matrix_shape(m, n));
  std::vector<std::size_t> idx;
  std::vector<int> offsets;
  int r = 0;
  for (const Var& p : parts) {
    std::copy(p.value().values().begin(), p.value().values().end(), out.data() + static_cast<std::size_t>(r) * n);
    idx.push_back(p.index);
    offsets.push_back(r);
    r += p.value().rows();
  }
  return t->push(std::move(out), parts, [idx, offsets, n](Tape& tp, const Tensor& g) {
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (!tp.requires_grad(idx[k])) continue;
      Tensor& d = tp.grad_buffer(idx[k]);
      const double* src = g.data() + static_cast<std::size_t>(offsets[k]) * n;
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += src[i];
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  CDL_REQUIRE(!parts.empty(), "concat_cols: nothing to concatenate");
  Tape* t = parts[0].tape;
  if (t == nullptr) throw TapeError("concat_cols on a detached variable");
  const int m = parts[0].value().rows();
  int n = 0;
  for (const Var& p : parts) {
    if (p.tape != t) throw TapeError("concat_cols mixes tapes");
    if (p.value().rows() != m) throw ContractViolation("concat_cols: row count mismatch");
    n += p.value().cols();
  }
  Tensor out(matrix_shape(m, n));
  std::vector<std::size_t> idx;
  std::vector<int> offsets, widths;
  int c = 0;
  for (const Var& p : parts) {
    const int w = p.value().cols();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j) out.at(i, c + j) = p.value().at(i, j);
    idx.push_back(p.index);
    offsets.push_back(c);
    widths.push_back(w);
    c += w;
  }
  return t->push(std::move(out), parts, [idx, offsets, widths, m](Tape& tp, const Tensor& g) {
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (!tp.requires_grad(idx[k])) continue;
      Tensor& d = tp.grad_buffer(idx[k]);
      const int w = widths[k];
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j) d[static_cast<std::size_t>(i) * w + j] += g.at(i, offsets[k] + j);
    }
  });
}

Var slice_rows(Var x, int begin, int end) {
  Tape* t = common_tape({x});
  const int m = x.value().rows(), n = x.value().cols();
  CDL_REQUIRE(0 <= begin && begin < end && end <= m, "slice_rows: bad range");
  Tensor out(matrix_shape(end - begin, n),
             std::vector<double>(x.value().data() + static_cast<std::size_t>(begin) * n,
                                 x.value().data() + static_cast<std::size_t>(end) * n));
  const std::size_t xi = x.index;
  return t->push(std::move(out), {x}, [xi, begin, n](Tape& tp, const Tensor& g) {
    Tensor& d = tp.grad_buffer(xi);
    double* dst = d.data() + static_cast<std::size_t>(begin) * n;
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
}

Var slice_cols(Var x, int begin, int end) {
  Tape* t = common_tape({x});
  const int m = x.value().rows(), n = x.value().cols();
  CDL_REQUIRE(0 <= begin && begin < end && end <= n, "slice_cols: bad range");
  const int w = end - begin;
  Tensor out(matrix_shape(m, w));
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < w; ++j) out.at(i, j) = x.value().at(i, begin + j);
  const std::size_t xi = x.index;
  return t->push(std::move(out), {x}, [xi, begin, m, n, w](Tape& tp, const Tensor& g) {
    Tensor& d = tp.grad_buffer(xi);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j) d[static_cast<std::size_t>(i) * n + begin + j] += g.at(i, j);
  });
}

Var reshape(Var x, Shape shape) {
  Tape* t = common_tape({x});
  Tensor out = x.value().reshaped(std::move(shape));
  const std::size_t xi = x.index;
  return t->push(std::move(out), {x}, [xi](Tape& tp, const Tensor& g) {
    Tensor& d = tp.grad_buffer(xi);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

Var cross_entropy(Var logits, int label) {
  Tape* t = common_tape({logits});
  const Tensor& z = logits.value();
  CDL_REQUIRE(z.rows() == 1, "cross_entropy expects a single row of logits");
  const int n = z.cols();
  CDL_REQUIRE(0 <= label && label < n, "cross_entropy: label out of range");
  check_finite(z.span(), "cross_entropy");
  auto p = std::make_shared<std::vector<double>>(softmax_with_temperature(z.span(), 1.0));
  double mx = z[0];
  for (int j = 1; j < n; ++j) mx = std::max(mx, z[j]);
  double s = 0.0;
  for (int j = 0; j < n; ++j) s += std::exp(z[j] - mx);
  const double loss = -(z[label] - mx - std::log(s));
  const std::size_t zi = logits.index;
  return t->push(Tensor::scalar(loss), {logits}, [zi, p, label](Tape& tp, const Tensor& g) {
    Tensor& d = tp.grad_buffer(zi);
    for (std::size_t j = 0; j < p->size(); ++j) d[j] += g[0] * ((*p)[j] - (static_cast<int>(j) == label ? 1.0 : 0.0));
  });
}

Var kl_divergence(Var teacher_logits, Var student_logits, double tau) {
  Tape* t = common_tape({teacher_logits, student_logits});
  if (!(tau > 0.0)) throw ContractViolation("kl_divergence: temperature must be positive");
  const Tensor& zt = teacher_logits.value();
  const Tensor& zs = student_logits.value();
  CDL_REQUIRE(zt.size() == zs.size(), "kl_divergence: class dimension mismatch");
  check_finite(zt.span(), "kl_divergence");
  check_finite(zs.span(), "kl_divergence");
  const int n = static_cast<int>(zt.size());
  auto log_p = [n, tau](const Tensor& z) {
    double mx = z[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, z[j]);
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += std::exp((z[j] - mx) / tau);
    const double lse = std::log(s);
    std::vector<double> out(n);
    for (int j = 0; j < n; ++j) out[j] = (z[j] - mx) / tau - lse;
    return out;
  };
  auto lt = std::make_shared<std::vector<double>>(log_p(zt));
  auto ls = std::make_shared<std::vector<double>>(log_p(zs));
  double kl = 0.0;
  for (int j = 0; j < n; ++j) kl += std::exp((*lt)[j]) * ((*lt)[j] - (*ls)[j]);
  const std::size_t ti = teacher_logits.index, si = student_logits.index;
  return t->push(Tensor::scalar(kl), {teacher_logits, student_logits},
                 [ti, si, lt, ls, kl, n, tau](Tape& tp, const Tensor& g) {
                   if (tp.requires_grad(si)) {
                     Tensor& d = tp.grad_buffer(si);
                     for (int j = 0; j < n; ++j)
                       d[j] += g[0] * (std::exp((*ls)[j]) - std::exp((*lt)[j])) / tau;
                   }
                   if (tp.requires_grad(ti)) {
                     Tensor& d = tp.grad_buffer(ti);
                     for (int j = 0; j < n; ++j)
                       d[j] += g[0] * std::exp((*lt)[j]) * (((*lt)[j] - (*ls)[j]) - kl) / tau;
                   }
                 });
}

Var mse(Var a, Var b) {
  Tape* t = common_tape({a, b});
  CDL_REQUIRE(a.value().size() == b.value().size(), "mse: size mismatch");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const double n = static_cast<double>(av.size());
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = av[i] - bv[i];
    s += d * d;
  }
  const std::size_t ai = a.index, bi = b.index;
  return t->push(Tensor::scalar(s / n), {a, b}, [ai, bi, n](Tape& tp, const Tensor& g) {
    const Tensor& av = tp.value(ai);
    const Tensor& bv = tp.value(bi);
    if (tp.requires_grad(ai)) {
      Tensor& d = tp.grad_buffer(ai);
      for (std::size_t i = 0; i < av.size(); ++i) d[i] += g[0] * 2.0 * (av[i] - bv[i]) / n;
    }
    if (tp.requires_grad(bi)) {
      Tensor& d = tp.grad_buffer(bi);
      for (std::size_t i = 0; i < av.size(); ++i) d[i] -= g[0] * 2.0 * (av[i] - bv[i]) / n;
    }
  });
}

Var cosine_similarity(Var a, Var b) {
  Tape* t = common_tape({a, b});
  CDL_REQUIRE(a.value().size() == b.value().size(), "cosine_similarity: length mismatch");
  const double c = cosine_similarity(a.value().span(), b.value().span());
  const std::size_t ai = a.index, bi = b.index;
  return t->push(Tensor::scalar(c), {a, b}, [ai, bi, c](Tape& tp, const Tensor& g) {
    const Tensor& av = tp.value(ai);
    const Tensor& bv = tp.value(bi);
    double na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
      na += av[i] * av[i];
      nb += bv[i] * bv[i];
    }
    const double inv = 1.0 / (std::sqrt(na) * std::sqrt(nb));
    if (tp.requires_grad(ai)) {
      Tensor& d = tp.grad_buffer(ai);
      for (std::size_t i = 0; i < av.size(); ++i) d[i] += g[0] * (bv[i] * inv - c * av[i] / na);
    }
    if (tp.requires_grad(bi)) {
      Tensor& d = tp.grad_buffer(bi);
      for (std::size_t i = 0; i < av.size(); ++i) d[i] += g[0] * (av[i] * inv - c * bv[i] / nb);
    }
  });
}

// ---- untaped numerics ------------------------------------------------------

std::vector<double> softmax_with_temperature(std::span<const double> logits, double tau) {
  if (!(tau > 0.0)) throw ContractViolation("softmax_with_temperature: tau must be positive");
  CDL_REQUIRE(!logits.empty(), "softmax_with_temperature: empty logits");
  for (double z : logits)
    if (std::isnan(z)) throw NumericError("softmax_with_temperature: NaN logit");
  std::vector<double> out(logits.size());
  kernels::reference::softmax_rows(logits, out, 1, static_cast<int>(logits.size()), tau);
  return out;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  CDL_REQUIRE(a.size() == b.size() && !a.empty(), "cosine_similarity: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw DegenerateInput("cosine_similarity: zero-norm vector");
  const double c = dot / (std::sqrt(na) * std::sqrt(nb));
  return std::clamp(c, -1.0, 1.0);
}

}  // namespace cdl
