#include "mclaro/diffkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "mclaro/fft.hpp"
#include "mclaro/io.hpp"

namespace mclaro::diff {
namespace {

void check(bool ok, const char* msg) {
  if (!ok) throw std::invalid_argument(msg);
}

std::int64_t numel_of(const std::vector<int>& shape) {
  std::int64_t n = shape.empty() ? 0 : 1;
  for (int d : shape) n *= d;
  return n;
}

}  // namespace

Tensor Tensor::real(std::vector<int> shape, double fill) {
  Tensor t;
  t.shape = std::move(shape);
  t.re.assign(numel_of(t.shape), fill);
  return t;
}

Tensor Tensor::cplx(std::vector<int> shape, Cplx fill) {
  Tensor t;
  t.shape = std::move(shape);
  t.complex = true;
  t.cx.assign(numel_of(t.shape), fill);
  return t;
}

Tensor Tensor::from(const RGrid& g) {
  Tensor t;
  t.shape = g.shape();
  t.re = g.vec();
  return t;
}

Tensor Tensor::from(const CGrid& g) {
  Tensor t;
  t.shape = g.shape();
  t.complex = true;
  t.cx = g.vec();
  return t;
}

std::int64_t Tensor::numel() const { return numel_of(shape); }

RGrid Tensor::to_rgrid() const {
  check(!complex, "Tensor::to_rgrid on complex tensor");
  RGrid g(shape);
  g.vec() = re;
  return g;
}

CGrid Tensor::to_cgrid() const {
  check(complex, "Tensor::to_cgrid on real tensor");
  CGrid g(shape);
  g.vec() = cx;
  return g;
}

double Tensor::scalar_value() const {
  check(!complex && numel() == 1, "Tensor::scalar_value: not a real scalar");
  return re[0];
}

Var Graph::make(Tensor value, bool needs_grad,
                std::function<void(Graph&)> back) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return {(int)nodes_.size() - 1};
}

Var Graph::leaf(Tensor value, bool requires_grad) {
  return make(std::move(value), requires_grad, nullptr);
}

Var Graph::constant_like_zero(Var v) {
  const Tensor& t = node(v).value;
  return constant(t.complex ? Tensor::cplx(t.shape) : Tensor::real(t.shape));
}

const Tensor& Graph::val(Var v) const { return node(v).value; }

const Tensor& Graph::grad(Var v) const {
  static const Tensor empty;
  const Node& n = node(v);
  return n.has_grad ? n.grad : empty;
}

bool Graph::requires_grad(Var v) const { return node(v).needs_grad; }

Tensor& Graph::grad_buf(int id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = n.value.complex ? Tensor::cplx(n.value.shape)
                             : Tensor::real(n.value.shape);
    n.has_grad = true;
  }
  return n.grad;
}

void Graph::backward(Var loss) {
  check(loss.valid(), "backward: invalid loss var");
  const Node& ln = node(loss);
  check(!ln.value.complex && ln.value.numel() == 1,
        "backward: loss must be a real scalar");
  grad_buf(loss.id).re[0] = 1.0;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.has_grad && n.needs_grad && n.back) n.back(*this);
  }
}

// ---- arithmetic ----

Var Graph::add(Var a, Var b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  check(ta.shape == tb.shape && ta.complex == tb.complex, "add: shape mismatch");
  Tensor out = ta;
  if (ta.complex)
    for (std::int64_t i = 0; i < out.numel(); ++i) out.cx[i] += tb.cx[i];
  else
    for (std::int64_t i = 0; i < out.numel(); ++i) out.re[i] += tb.re[i];
  const bool req = node(a).needs_grad || node(b).needs_grad;
  const int ia = a.id, ib = b.id, self = (int)nodes_.size();
  return make(std::move(out), req, req ? [ia, ib, self](Graph& g) {
    const Tensor& gr = g.nodes_[self].grad;
    for (int p : {ia, ib}) {
      if (!g.nodes_[p].needs_grad) continue;
      Tensor& gp = g.grad_buf(p);
      if (gr.complex)
        for (std::int64_t i = 0; i < gr.numel(); ++i) gp.cx[i] += gr.cx[i];
      else
        for (std::int64_t i = 0; i < gr.numel(); ++i) gp.re[i] += gr.re[i];
    }
  } : std::function<void(Graph&)>());
}

Var Graph::neg(Var a) { return scale(a, -1.0); }

Var Graph::sub(Var a, Var b) { return add(a, neg(b)); }

Var Graph::scale(Var a, double s) {
  Tensor out = val(a);
  if (out.complex)
    for (auto& v : out.cx) v *= s;
  else
    for (auto& v : out.re) v *= s;
  const bool req = node(a).needs_grad;
  const int ia = a.id, self = (int)nodes_.size();
  return make(std::move(out), req, req ? [ia, s, self](Graph& g) {
    const Tensor& gr = g.nodes_[self].grad;
    Tensor& gp = g.grad_buf(ia);
    if (gr.complex)
      for (std::int64_t i = 0; i < gr.numel(); ++i) gp.cx[i] += s * gr.cx[i];
    else
      for (std::int64_t i = 0; i < gr.numel(); ++i) gp.re[i] += s * gr.re[i];
  } : std::function<void(Graph&)>());
}

Var Graph::add_const(Var a, double c) {
  Tensor out = val(a);
  if (out.complex)
    for (auto& v : out.cx) v += c;
  else
    for (auto& v : out.re) v += c;
  const bool req = node(a).needs_grad;
  const int ia = a.id, self = (int)nodes_.size();
  return make(std::move(out), req, req ? [ia, self](Graph& g) {
    const Tensor& gr = g.nodes_[self].grad;
    Tensor& gp = g.grad_buf(ia);
    if (gr.complex)
      for (std::int64_t i = 0; i < gr.numel(); ++i) gp.cx[i] += gr.cx[i];
    else
      for (std::int64_t i = 0; i < gr.numel(); ++i) gp.re[i] += gr.re[i];
  } : std::function<void(Graph&)>());
}

Var Graph::mul(Var a, Var b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  check(ta.shape == tb.shape && ta.complex == tb.complex, "mul: shape mismatch");
  Tensor out = ta;
  if (ta.complex)
    for (std::int64_t i = 0; i < out.numel(); ++i) out.cx[i] *= tb.cx[i];
  else
    for (std::int64_t i = 0; i < out.numel(); ++i) out.re[i] *= tb.re[i];
  const bool req = node(a).needs_grad || node(b).needs_grad;
  const int ia = a.id, ib = b.id, self = (int)nodes_.size();
  return make(std::move(out), req, req ? [ia, ib, self](Graph& g) {
    const Tensor& gr = g.nodes_[self].grad;
    const Tensor& va = g.nodes_[ia].value;
    const Tensor& vb = g.nodes_[ib].value;
    if (gr.complex) {
      if (g.nodes_[ia].needs_grad) {
        Tensor& ga = g.grad_buf(ia);
        for (std::int64_t i = 0; i < gr.numel(); ++i)
          ga.cx[i] += gr.cx[i] * std::conj(vb.cx[i]);
      }
      if (g.nodes_[ib].needs_grad) {
        Tensor& gb = g.grad_buf(ib);
        for (std::int64_t i = 0; i < gr.numel(); ++i)
          gb.cx[i] += gr.cx[i] * std::conj(va.cx[i]);
      }
    } else {
      if (g.nodes_[ia].needs_grad) {
        Tensor& ga = g.grad_buf(ia);
        for (std::int64_t i = 0; i < gr.numel(); ++i)
          ga.re[i] += gr.re[i] * vb.re[i];
      }
      if (g.nodes_[ib].needs_grad) {
        Tensor& gb = g.grad_buf(ib);
        for (std::int64_t i = 0; i < gr.numel(); ++i)
          gb.re[i] += gr.re[i] * va.re[i];
      }
    }
  } : std::function<void(Graph&)>());
}

Var Graph::mul_real(Var c, Var r) {
  const Tensor& tc = val(c);
  const Tensor& tr = val(r);
  check(tc.complex && !tr.complex && tc.shape == tr.shape,
        "mul_real: want complex .* real of same shape");
  Tensor out = tc;
  for (std::int64_t i = 0; i < out.numel(); ++i) out.cx[i] *= tr.re[i];
  const bool req = node(c).needs_grad || node(r).needs_grad;
  const int ic = c.id, ir = r.id, self = (int)nodes_.size();
  return make(std::move(out), req, req ? [ic, ir, self](Graph& g) {
    const Tensor& gr = g.nodes_[self].grad;
    const Tensor& vc = g.nodes_[ic].value;
    const Tensor& vr = g.nodes_[ir].value;
    if (g.nodes_[ic].needs_grad) {
      Tensor& gc = g.grad_buf(ic);
      for (std::int64_t i = 0; i < gr.numel(); ++i)
        gc.cx[i] += gr.cx[i] * vr.re[i];
    }
    if (g.nodes_[ir].needs_grad) {
      Tensor& gm = g.grad_buf(ir);
      for (std::int64_t i = 0; i < gr.numel(); ++i)
        gm.re[i] += std::real(gr.cx[i] * std::conj(vc.cx[i]));
    }
  } : std::function<void(Graph&)>());
}

Var Graph::div(Var a, Var b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  check(!ta.complex && !tb.complex && ta.shape == tb.shape,
        "div: want real/real of same shape");
  Tensor out = ta;
  for (std::int64_t i = 0; i < out.numel(); ++i) out.re[i] /= tb.re[i];
  const bool req = node(a).needs_grad || node(b).needs_grad;
  const int ia = a.id, ib = b.id, self = (int)nodes_.size();
  return make(std::move(out), req, req ? [ia, ib, self](Graph& g) {
    const Tensor& gr = g.nodes_[self].grad;
    const Tensor& va = g.nodes_[ia].value;
    const Tensor& vb = g.nodes_[ib].value;
    if (g.nodes_[ia].needs_grad) {
      Tensor& ga = g.grad_buf(ia);
      for (std::int64_t i = 0; i < gr.numel(); ++i)
        ga.re[i] += gr.re[i] / vb.re[i];
    }
    if (g.nodes_[ib].needs_grad) {
      Tensor& gb = g.grad_buf(ib);
      for (std::int64_t i = 0; i < gr.numel(); ++i)
        gb.re[i] -= gr.re[i] * va.re[i] / (vb.re[i] * vb.re[i]);
    }
  } : std::function<void(Graph&)>());
}

Var Graph::conj(Var a) {
  const Tensor& ta = val(a);
  check(ta.complex, "conj: complex input expected");
  Tensor out = ta;
  for (auto& v : out.cx) v = std::conj(v);
  const bool req = node(a).needs_grad;
  const int ia = a.id, self = (int)nodes_.size();
  return make(std::move(out), req, req ? [ia, self](Graph& g) {
    const Tensor& gr = g.nodes_[self].grad;
    Tensor& gp = g.grad_buf(ia);
    for (std::int64_t i = 0; i < gr.numel(); ++i)
      gp.cx[i] += std::conj(gr.cx[i]);
  } : std::function<void(Graph&)>());
}

Var Graph::mul_scalar_node(Var x, Var s) {
  const Tensor& tx = val(x);
  const Tensor& ts = val(s);
  check(!ts.complex && ts.numel() == 1, "mul_scalar_node: s must be real scalar");
  Tensor out = tx;
  const double sv = ts.re[0];
  if (out.complex)
    for (auto& v : out.cx) v *= sv;
  else
    for (auto& v : out.re) v *= sv;
  const bool req = node(x).needs_grad || node(s).needs_grad;
  const int ix = x.id, is = s.id, self = (int)nodes_.size();
  return make(std::move(out), req, req ? [ix, is, self](Graph& g) {
    const Tensor& gr = g.nodes_[self].grad;
    const Tensor& vx = g.nodes_[ix].value;
    const double sv = g.nodes_[is].value.re[0];
    if (g.nodes_[ix].needs_grad) {
      Tensor& gx = g.grad_buf(ix);
      if (gr.complex)
        for (std::int64_t i = 0; i < gr.numel(); ++i) gx.cx[i] += sv * gr.cx[i];
      else
        for (std::int64_t i = 0; i < gr.numel(); ++i) gx.re[i] += sv * gr.re[i];
    }
    if (g.nodes_[is].needs_grad) {
      double acc = 0;
      if (gr.complex)
        for (std::int64_t i = 0; i < gr.numel(); ++i)
          acc += std::real(gr.cx[i] * std::conj(vx.cx[i]));
      else
        for (std::int64_t i = 0; i < gr.numel(); ++i) acc += gr.re[i] * vx.re[i];
      g.grad_buf(is).re[0] += acc;
    }
  } : std::function<void(Graph&)>());
}

Var Graph::add_scaled(Var x, Var y, Var s) {
  const Tensor& tx = val(x);
  const Tensor& ty = val(y);
  const Tensor& ts = val(s);
  check(tx.shape == ty.shape && tx.complex == ty.complex,
        "add_scaled: x/y mismatch");
  check(!ts.complex && ts.numel() == 1, "add_scaled: s must be real scalar");
  Tensor out = tx;
  const double sv = ts.re[0];
  if (out.complex)
    for (std::int64_t i = 0; i < out.numel(); ++i) out.cx[i] += sv * ty.cx[i];
  else
    for (std::int64_t i = 0; i < out.numel(); ++i) out.re[i] += sv * ty.re[i];
  const bool req =
      node(x).needs_grad || node(y).needs_grad || node(s).needs_grad;
  const int ix = x.id, iy = y.id, is = s.id, self = (int)nodes_.size();
  return make(std::move(out), req, req ? [ix, iy, is, self](Graph& g) {
    const Tensor& gr = g.nodes_[self].grad;
    const Tensor& vy = g.nodes_[iy].value;
    const double sv = g.nodes_[is].value.re[0];
    if (g.nodes_[ix].needs_grad) {
      Tensor& gx = g.grad_buf(ix);
      if (gr.complex)
        for (std::int64_t i = 0; i < gr.numel(); ++i) gx.cx[i] += gr.cx[i];
      else
        for (std::int64_t i = 0; i < gr.numel(); ++i) gx.re[i] += gr.re[i];
    }
    if (g.nodes_[iy].needs_grad) {
      Tensor& gy = g.grad_buf(iy);
      if (gr.complex)
        for (std::int64_t i = 0; i < gr.numel(); ++i) gy.cx[i] += sv * gr.cx[i];
      else
        for (std::int64_t i = 0; i < gr.numel(); ++i) gy.re[i] += sv * gr.re[i];
    }
    if (g.nodes_[is].needs_grad) {
      double acc = 0;
      if (gr.complex)
        for (std::int64_t i = 0; i < gr.numel(); ++i)
          acc += std::real(gr.cx[i] * std::conj(vy.cx[i]));
      else
        for (std::int64_t i = 0; i < gr.numel(); ++i) acc += gr.re[i] * vy.re[i];
      g.grad_buf(is).re[0] += acc;
    }
  } : std::function<void(Graph&)>());
}

// ---- nonlinearities ----

Var Graph::relu(Var a) {
  const Tensor& ta = val(a);
  check(!ta.complex, "relu: real input expected");
  Tensor out = ta;
  for (auto& v : out.re) v = v > 0 ? v : 0.0;
  const bool req = node(a).needs_grad;
  const int ia = a.id, self = (int)nodes_.size();
  return make(std::move(out), req, req ? [ia, self](Graph& g) {
    const Tensor& gr = g.nodes_[self].grad;
    const Tensor& vx = g.nodes_[ia].value;
    Tensor& gp = g.grad_buf(ia);
    for (std::int64_t i = 0; i < gr.numel(); ++i)
      if (vx.re[i] > 0) gp.re[i] += gr.re[i];
  } : std::function<void(Graph&)>());
}

Var Graph::sigmoid(Var a) {
  const Tensor& ta = val(a);
  check(!ta.complex, "sigmoid: real input expected");
  Tensor out = ta;
  for (auto& v : out.re) v = 1.0 / (1.0 + std::exp(-v));
  const bool req = node(a).needs_grad;
  const int ia = a.id, self = (int)nodes_.size();
  return make(std::move(out), req, req ? [ia, self](Graph& g) {
    const Tensor& gr = g.nodes_[self].grad;
    const Tensor& y = g.nodes_[self].value;
    Tensor& gp = g.grad_buf(ia);
    for (std::int64_t i = 0; i < gr.numel(); ++i)
      gp.re[i] += gr.re[i] * y.re[i] * (1.0 - y.re[i]);
  } : std::function<void(Graph&)>());
}

Var Graph::exp(Var a) {
  const Tensor& ta = val(a);
  check(!ta.complex, "exp: real input expected");
  Tensor out = ta;
  for (auto& v : out.re) v = std::exp(v);
  const bool req = node(a).needs_grad;
  const int ia = a.id, self = (int)nodes_.size();
  return make(std::move(out), req, req ? [ia, self](Graph& g) {
    const Tensor& gr = g.nodes_[self].grad;
    const Tensor& y = g.nodes_[self].value;
    Tensor& gp = g.grad_buf(ia);
    for (std::int64_t i = 0; i < gr.numel(); ++i)
      gp.re[i] += gr.re[i] * y.re[i];
  } : std::function<void(Graph&)>());
}

Var Graph::clamp(Var a, double lo, double hi) {
  const Tensor& ta = val(a);
  check(!ta.complex, "clamp: real input expected");
  Tensor out = ta;
  for (auto& v : out.re) v = std::min(hi, std::max(lo, v));
  const bool req = node(a).needs_grad;
  const int ia = a.id, self = (int)nodes_.size();
  return make(std::move(out), req, req ? [ia, lo, hi, self](Graph& g) {
    const Tensor& gr = g.nodes_[self].grad;
    const Tensor& vx = g.nodes_[ia].value;
    Tensor& gp = g.grad_buf(ia);
    for (std::int64_t i = 0; i < gr.numel(); ++i)
      if (vx.re[i] > lo && vx.re[i] < hi) gp.re[i] += gr.re[i];
  } : std::function<void(Graph&)>());
}

// ---- reductions ----

Var Graph::sum(Var a) {
  const Tensor& ta = val(a);
  check(!ta.complex, "sum: real input expected");
  double acc = 0;
  for (double v : ta.re) acc += v;
  const bool req = node(a).needs_grad;
  const int ia = a.id, self = (int)nodes_.size();
  return make(Tensor::scalar(acc), req, req ? [ia, self](Graph& g) {
    const double gr = g.nodes_[self].grad.re[0];
    Tensor& gp = g.grad_buf(ia);
    for (auto& v : gp.re) v += gr;
  } : std::function<void(Graph&)>());
}

Var Graph::mean(Var a) {
  const double n = (double)val(a).numel();
  return scale(sum(a), 1.0 / n);
}

Var Graph::masked_mean(Var a, const RGrid& m) {
  const Tensor& ta = val(a);
  check(!ta.complex && ta.shape == m.shape(), "masked_mean: shape mismatch");
  double wsum = 0;
  for (double v : m.vec()) wsum += v;
  check(wsum > 0, "masked_mean: empty mask");
  Var am = mul(a, constant(Tensor::from(m)));
  return scale(sum(am), 1.0 / wsum);
}

Var Graph::real_inner(Var a, Var b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  check(ta.shape == tb.shape && ta.complex == tb.complex,
        "real_inner: shape mismatch");
  double acc = 0;
  if (ta.complex)
    for (std::int64_t i = 0; i < ta.numel(); ++i)
      acc += std::real(std::conj(ta.cx[i]) * tb.cx[i]);
  else
    for (std::int64_t i = 0; i < ta.numel(); ++i) acc += ta.re[i] * tb.re[i];
  const bool req = node(a).needs_grad || node(b).needs_grad;
  const int ia = a.id, ib = b.id, self = (int)nodes_.size();
  return make(Tensor::scalar(acc), req, req ? [ia, ib, self](Graph& g) {
    const double gr = g.nodes_[self].grad.re[0];
    const Tensor& va = g.nodes_[ia].value;
    const Tensor& vb = g.nodes_[ib].value;
    if (g.nodes_[ia].needs_grad) {
      Tensor& ga = g.grad_buf(ia);
      if (va.complex)
        for (std::int64_t i = 0; i < va.numel(); ++i) ga.cx[i] += gr * vb.cx[i];
      else
        for (std::int64_t i = 0; i < va.numel(); ++i) ga.re[i] += gr * vb.re[i];
    }
    if (g.nodes_[ib].needs_grad) {
      Tensor& gb = g.grad_buf(ib);
      if (va.complex)
        for (std::int64_t i = 0; i < va.numel(); ++i) gb.cx[i] += gr * va.cx[i];
      else
        for (std::int64_t i = 0; i < va.numel(); ++i) gb.re[i] += gr * va.re[i];
    }
  } : std::function<void(Graph&)>());
}

// ---- structure ----

Var Graph::concat_ch(const std::vector<Var>& xs) {
  check(!xs.empty(), "concat_ch: empty list");
  int ch = 0;
  const Tensor& t0 = val(xs[0]);
  check(!t0.complex && t0.shape.size() == 3, "concat_ch: want real [C,H,W]");
  const int h = t0.shape[1], w = t0.shape[2];
  bool req = false;
  for (Var x : xs) {
    const Tensor& t = val(x);
    check(!t.complex && t.shape.size() == 3 && t.shape[1] == h &&
              t.shape[2] == w,
          "concat_ch: inconsistent shapes");
    ch += t.shape[0];
    req = req || node(x).needs_grad;
  }
  Tensor out = Tensor::real({ch, h, w});
  std::int64_t off = 0;
  for (Var x : xs) {
    const Tensor& t = val(x);
    std::memcpy(out.re.data() + off, t.re.data(), t.re.size() * sizeof(double));
    off += t.numel();
  }
  std::vector<int> ids;
  for (Var x : xs) ids.push_back(x.id);
  const int self = (int)nodes_.size();
  return make(std::move(out), req, req ? [ids, self](Graph& g) {
    const Tensor& gr = g.nodes_[self].grad;
    std::int64_t off = 0;
    for (int id : ids) {
      const std::int64_t n = g.nodes_[id].value.numel();
      if (g.nodes_[id].needs_grad) {
        Tensor& gp = g.grad_buf(id);
        for (std::int64_t i = 0; i < n; ++i) gp.re[i] += gr.re[off + i];
      }
      off += n;
    }
  } : std::function<void(Graph&)>());
}

Var Graph::slice_ch(Var x, int c0, int c1) {
  const Tensor& t = val(x);
  check(!t.complex && t.shape.size() == 3, "slice_ch: want real [C,H,W]");
  check(0 <= c0 && c0 < c1 && c1 <= t.shape[0], "slice_ch: bad range");
  const int h = t.shape[1], w = t.shape[2];
  const std::int64_t plane = (std::int64_t)h * w;
  Tensor out = Tensor::real({c1 - c0, h, w});
  std::memcpy(out.re.data(), t.re.data() + c0 * plane,
              out.re.size() * sizeof(double));
  const bool req = node(x).needs_grad;
  const int ix = x.id, self = (int)nodes_.size();
  return make(std::move(out), req, req ? [ix, c0, plane, self](Graph& g) {
    const Tensor& gr = g.nodes_[self].grad;
    Tensor& gp = g.grad_buf(ix);
    for (std::int64_t i = 0; i < gr.numel(); ++i)
      gp.re[c0 * plane + i] += gr.re[i];
  } : std::function<void(Graph&)>());
}

Var Graph::pack_ri(Var c) {
  const Tensor& t = val(c);
  check(t.complex && t.shape.size() == 2, "pack_ri: want complex [H,W]");
  const int h = t.shape[0], w = t.shape[1];
  const std::int64_t plane = (std::int64_t)h * w;
  Tensor out = Tensor::real({2, h, w});
  for (std::int64_t i = 0; i < plane; ++i) {
    out.re[i] = t.cx[i].real();
    out.re[plane + i] = t.cx[i].imag();
  }
  const bool req = node(c).needs_grad;
  const int ic = c.id, self = (int)nodes_.size();
  return make(std::move(out), req, req ? [ic, plane, self](Graph& g) {
    const Tensor& gr = g.nodes_[self].grad;
    Tensor& gp = g.grad_buf(ic);
    for (std::int64_t i = 0; i < plane; ++i)
      gp.cx[i] += Cplx(gr.re[i], gr.re[plane + i]);
  } : std::function<void(Graph&)>());
}

Var Graph::unpack_ri(Var r) {
  const Tensor& t = val(r);
  check(!t.complex && t.shape.size() == 3 && t.shape[0] == 2,
        "unpack_ri: want real [2,H,W]");
  const int h = t.shape[1], w = t.shape[2];
  const std::int64_t plane = (std::int64_t)h * w;
  Tensor out = Tensor::cplx({h, w});
  for (std::int64_t i = 0; i < plane; ++i)
    out.cx[i] = Cplx(t.re[i], t.re[plane + i]);
  const bool req = node(r).needs_grad;
  const int ir = r.id, self = (int)nodes_.size();
  return make(std::move(out), req, req ? [ir, plane, self](Graph& g) {
    const Tensor& gr = g.nodes_[self].grad;
    Tensor& gp = g.grad_buf(ir);
    for (std::int64_t i = 0; i < plane; ++i) {
      gp.re[i] += gr.cx[i].real();
      gp.re[plane + i] += gr.cx[i].imag();
    }
  } : std::function<void(Graph&)>());
}

Var Graph::bias_planes(Var bias, int h, int w) {
  const Tensor& t = val(bias);
  check(!t.complex && t.shape.size() == 1, "bias_planes: want real [C]");
  const int ch = t.shape[0];
  Tensor out = Tensor::real({ch, h, w});
  const std::int64_t plane = (std::int64_t)h * w;
  for (int c = 0; c < ch; ++c)
    std::fill(out.re.begin() + c * plane, out.re.begin() + (c + 1) * plane,
              t.re[c]);
  const bool req = node(bias).needs_grad;
  const int ib = bias.id, self = (int)nodes_.size();
  return make(std::move(out), req, req ? [ib, ch, plane, self](Graph& g) {
    const Tensor& gr = g.nodes_[self].grad;
    Tensor& gp = g.grad_buf(ib);
    for (int c = 0; c < ch; ++c) {
      double acc = 0;
      for (std::int64_t i = 0; i < plane; ++i) acc += gr.re[c * plane + i];
      gp.re[c] += acc;
    }
  } : std::function<void(Graph&)>());
}

Var Graph::avg_pool2(Var x) {
  const Tensor& t = val(x);
  check(!t.complex && t.shape.size() == 3, "avg_pool2: want real [C,H,W]");
  const int ch = t.shape[0], h = t.shape[1], w = t.shape[2];
  check(h % 2 == 0 && w % 2 == 0, "avg_pool2: H and W must be even");
  Tensor out = Tensor::real({ch, h / 2, w / 2});
  for (int c = 0; c < ch; ++c)
    for (int y = 0; y < h / 2; ++y)
      for (int xw = 0; xw < w / 2; ++xw) {
        const std::int64_t base = ((std::int64_t)c * h + 2 * y) * w + 2 * xw;
        out.re[((std::int64_t)c * (h / 2) + y) * (w / 2) + xw] =
            0.25 * (t.re[base] + t.re[base + 1] + t.re[base + w] +
                    t.re[base + w + 1]);
      }
  const bool req = node(x).needs_grad;
  const int ix = x.id, self = (int)nodes_.size();
  return make(std::move(out), req, req ? [ix, ch, h, w, self](Graph& g) {
    const Tensor& gr = g.nodes_[self].grad;
    Tensor& gp = g.grad_buf(ix);
    for (int c = 0; c < ch; ++c)
      for (int y = 0; y < h / 2; ++y)
        for (int xw = 0; xw < w / 2; ++xw) {
          const double v =
              0.25 * gr.re[((std::int64_t)c * (h / 2) + y) * (w / 2) + xw];
          const std::int64_t base = ((std::int64_t)c * h + 2 * y) * w + 2 * xw;
          gp.re[base] += v;
          gp.re[base + 1] += v;
          gp.re[base + w] += v;
          gp.re[base + w + 1] += v;
        }
  } : std::function<void(Graph&)>());
}

Var Graph::upsample2(Var x) {
  const Tensor& t = val(x);
  check(!t.complex && t.shape.size() == 3, "upsample2: want real [C,H,W]");
  const int ch = t.shape[0], h = t.shape[1], w = t.shape[2];
  Tensor out = Tensor::real({ch, 2 * h, 2 * w});
  for (int c = 0; c < ch; ++c)
    for (int y = 0; y < h; ++y)
      for (int xw = 0; xw < w; ++xw) {
        const double v = t.re[((std::int64_t)c * h + y) * w + xw];
        const std::int64_t base =
            ((std::int64_t)c * 2 * h + 2 * y) * 2 * w + 2 * xw;
        out.re[base] = v;
        out.re[base + 1] = v;
        out.re[base + 2 * w] = v;
        out.re[base + 2 * w + 1] = v;
      }
  const bool req = node(x).needs_grad;
  const int ix = x.id, self = (int)nodes_.size();
  return make(std::move(out), req, req ? [ix, ch, h, w, self](Graph& g) {
    const Tensor& gr = g.nodes_[self].grad;
    Tensor& gp = g.grad_buf(ix);
    for (int c = 0; c < ch; ++c)
      for (int y = 0; y < h; ++y)
        for (int xw = 0; xw < w; ++xw) {
          const std::int64_t base =
              ((std::int64_t)c * 2 * h + 2 * y) * 2 * w + 2 * xw;
          gp.re[((std::int64_t)c * h + y) * w + xw] +=
              gr.re[base] + gr.re[base + 1] + gr.re[base + 2 * w] +
              gr.re[base + 2 * w + 1];
        }
  } : std::function<void(Graph&)>());
}

// ---- conv ----

namespace {

// out[co] += sum_ci corr(in[ci], k[co,ci]) with zero same-padding.
void conv_forward(const Tensor& in, const Tensor& k, const Tensor& b,
                  Tensor& out) {
  const int cin = in.shape[0], h = in.shape[1], w = in.shape[2];
  const int cout = k.shape[0], kh = k.shape[2], kw = k.shape[3];
  const int ph = kh / 2, pw = kw / 2;
  for (int co = 0; co < cout; ++co) {
    double* op = out.re.data() + (std::int64_t)co * h * w;
    const double bias = b.re[co];
    for (std::int64_t i = 0; i < (std::int64_t)h * w; ++i) op[i] = bias;
    for (int ci = 0; ci < cin; ++ci) {
      const double* ip = in.re.data() + (std::int64_t)ci * h * w;
      const double* kp =
          k.re.data() + (((std::int64_t)co * cin + ci) * kh) * kw;
      for (int dy = 0; dy < kh; ++dy) {
        const int sy = dy - ph;
        const int y0 = std::max(0, -sy), y1 = std::min(h, h - sy);
        for (int dx = 0; dx < kw; ++dx) {
          const int sx = dx - pw;
          const int x0 = std::max(0, -sx), x1 = std::min(w, w - sx);
          const double kv = kp[dy * kw + dx];
          if (kv == 0.0) continue;
          for (int y = y0; y < y1; ++y) {
            double* orow = op + (std::int64_t)y * w;
            const double* irow = ip + (std::int64_t)(y + sy) * w + sx;
            for (int x = x0; x < x1; ++x) orow[x] += kv * irow[x];
          }
        }
      }
    }
  }
}

}  // namespace

Var Graph::conv2d(Var input, Var kernel, Var bias) {
  const Tensor& in = val(input);
  const Tensor& k = val(kernel);
  const Tensor& b = val(bias);
  check(!in.complex && !k.complex && !b.complex, "conv2d: real tensors only");
  check(in.shape.size() == 3 && k.shape.size() == 4 && b.shape.size() == 1,
        "conv2d: want [Cin,H,W], [Cout,Cin,kh,kw], [Cout]");
  check(k.shape[1] == in.shape[0], "conv2d: channel mismatch");
  check(k.shape[0] == b.shape[0], "conv2d: bias mismatch");
  check(k.shape[2] % 2 == 1 && k.shape[3] % 2 == 1, "conv2d: kernel must be odd");

  Tensor out = Tensor::real({k.shape[0], in.shape[1], in.shape[2]});
  conv_forward(in, k, b, out);

  const bool req =
      node(input).needs_grad || node(kernel).needs_grad || node(bias).needs_grad;
  const int ii = input.id, ik = kernel.id, ib = bias.id,
            self = (int)nodes_.size();
  return make(std::move(out), req, req ? [ii, ik, ib, self](Graph& g) {
    const Tensor& gr = g.nodes_[self].grad;
    const Tensor& in = g.nodes_[ii].value;
    const Tensor& k = g.nodes_[ik].value;
    const int cin = in.shape[0], h = in.shape[1], w = in.shape[2];
    const int cout = k.shape[0], kh = k.shape[2], kw = k.shape[3];
    const int ph = kh / 2, pw = kw / 2;

    if (g.nodes_[ib].needs_grad) {
      Tensor& gb = g.grad_buf(ib);
      for (int co = 0; co < cout; ++co) {
        const double* gp = gr.re.data() + (std::int64_t)co * h * w;
        double acc = 0;
        for (std::int64_t i = 0; i < (std::int64_t)h * w; ++i) acc += gp[i];
        gb.re[co] += acc;
      }
    }
    if (g.nodes_[ii].needs_grad) {
      Tensor& gi = g.grad_buf(ii);
      for (int co = 0; co < cout; ++co) {
        const double* gp = gr.re.data() + (std::int64_t)co * h * w;
        for (int ci = 0; ci < cin; ++ci) {
          double* ip = gi.re.data() + (std::int64_t)ci * h * w;
          const double* kp =
              k.re.data() + (((std::int64_t)co * cin + ci) * kh) * kw;
          for (int dy = 0; dy < kh; ++dy) {
            const int sy = dy - ph;
            const int y0 = std::max(0, -sy), y1 = std::min(h, h - sy);
            for (int dx = 0; dx < kw; ++dx) {
              const int sx = dx - pw;
              const int x0 = std::max(0, -sx), x1 = std::min(w, w - sx);
              const double kv = kp[dy * kw + dx];
              if (kv == 0.0) continue;
              for (int y = y0; y < y1; ++y) {
                const double* grow = gp + (std::int64_t)y * w;
                double* irow = ip + (std::int64_t)(y + sy) * w + sx;
                for (int x = x0; x < x1; ++x) irow[x] += kv * grow[x];
              }
            }
          }
        }
      }
    }
    if (g.nodes_[ik].needs_grad) {
      Tensor& gk = g.grad_buf(ik);
      for (int co = 0; co < cout; ++co) {
        const double* gp = gr.re.data() + (std::int64_t)co * h * w;
        for (int ci = 0; ci < cin; ++ci) {
          const double* ip = in.re.data() + (std::int64_t)ci * h * w;
          double* kp =
              gk.re.data() + (((std::int64_t)co * cin + ci) * kh) * kw;
          for (int dy = 0; dy < kh; ++dy) {
            const int sy = dy - ph;
            const int y0 = std::max(0, -sy), y1 = std::min(h, h - sy);
            for (int dx = 0; dx < kw; ++dx) {
              const int sx = dx - pw;
              const int x0 = std::max(0, -sx), x1 = std::min(w, w - sx);
              double acc = 0;
              for (int y = y0; y < y1; ++y) {
                const double* grow = gp + (std::int64_t)y * w;
                const double* irow = ip + (std::int64_t)(y + sy) * w + sx;
                for (int x = x0; x < x1; ++x) acc += grow[x] * irow[x];
              }
              kp[dy * kw + dx] += acc;
            }
          }
        }
      }
    }
  } : std::function<void(Graph&)>());
}

namespace {

// depthwise separable blur with zero padding; kernel symmetric, so the
// operator is self-adjoint and backward reuses the forward.
void blur_apply(const double* in, double* out, int ch, int h, int w,
                const std::vector<double>& k1d, std::vector<double>& tmp) {
  const int kr = (int)k1d.size() / 2;
  tmp.assign((size_t)h * w, 0.0);
  for (int c = 0; c < ch; ++c) {
    const double* ip = in + (std::int64_t)c * h * w;
    double* op = out + (std::int64_t)c * h * w;
    // rows
    for (int y = 0; y < h; ++y) {
      const double* irow = ip + (std::int64_t)y * w;
      double* trow = tmp.data() + (std::int64_t)y * w;
      for (int x = 0; x < w; ++x) {
        double acc = 0;
        const int d0 = std::max(-kr, -x), d1 = std::min(kr, w - 1 - x);
        for (int d = d0; d <= d1; ++d) acc += k1d[d + kr] * irow[x + d];
        trow[x] = acc;
      }
    }
    // columns
    for (int y = 0; y < h; ++y) {
      double* orow = op + (std::int64_t)y * w;
      const int d0 = std::max(-kr, -y), d1 = std::min(kr, h - 1 - y);
      for (int x = 0; x < w; ++x) orow[x] = 0;
      for (int d = d0; d <= d1; ++d) {
        const double kv = k1d[d + kr];
        const double* trow = tmp.data() + (std::int64_t)(y + d) * w;
        for (int x = 0; x < w; ++x) orow[x] += kv * trow[x];
      }
    }
  }
}

}  // namespace

Var Graph::gauss_blur(Var x, const std::vector<double>& k1d) {
  const Tensor& t = val(x);
  check(!t.complex && t.shape.size() == 3, "gauss_blur: want real [C,H,W]");
  check(k1d.size() % 2 == 1, "gauss_blur: odd kernel expected");
  const int ch = t.shape[0], h = t.shape[1], w = t.shape[2];
  Tensor out = Tensor::real(t.shape);
  std::vector<double> tmp;
  blur_apply(t.re.data(), out.re.data(), ch, h, w, k1d, tmp);
  const bool req = node(x).needs_grad;
  const int ix = x.id, self = (int)nodes_.size();
  return make(std::move(out), req, req ? [ix, k1d, ch, h, w, self](Graph& g) {
    const Tensor& gr = g.nodes_[self].grad;
    Tensor blurred = Tensor::real(gr.shape);
    std::vector<double> tmp;
    blur_apply(gr.re.data(), blurred.re.data(), ch, h, w, k1d, tmp);
    Tensor& gp = g.grad_buf(ix);
    for (std::int64_t i = 0; i < gr.numel(); ++i) gp.re[i] += blurred.re[i];
  } : std::function<void(Graph&)>());
}

// ---- spectral ----

Var Graph::fft2c(Var x) {
  const Tensor& t = val(x);
  check(t.complex && t.shape.size() == 2, "fft2c: want complex [H,W]");
  CGrid grid = t.to_cgrid();
  fft::fft2c_inplace(grid);
  const bool req = node(x).needs_grad;
  const int ix = x.id, self = (int)nodes_.size();
  return make(Tensor::from(grid), req, req ? [ix, self](Graph& g) {
    CGrid gg = g.nodes_[self].grad.to_cgrid();
    fft::ifft2c_inplace(gg);  // unitary adjoint
    Tensor& gp = g.grad_buf(ix);
    for (std::int64_t i = 0; i < gp.numel(); ++i) gp.cx[i] += gg[i];
  } : std::function<void(Graph&)>());
}

Var Graph::ifft2c(Var x) {
  const Tensor& t = val(x);
  check(t.complex && t.shape.size() == 2, "ifft2c: want complex [H,W]");
  CGrid grid = t.to_cgrid();
  fft::ifft2c_inplace(grid);
  const bool req = node(x).needs_grad;
  const int ix = x.id, self = (int)nodes_.size();
  return make(Tensor::from(grid), req, req ? [ix, self](Graph& g) {
    CGrid gg = g.nodes_[self].grad.to_cgrid();
    fft::fft2c_inplace(gg);
    Tensor& gp = g.grad_buf(ix);
    for (std::int64_t i = 0; i < gp.numel(); ++i) gp.cx[i] += gg[i];
  } : std::function<void(Graph&)>());
}

// ---- sampling ----

Var Graph::ste_binarize(Var p, Rng& rng, int calib_block) {
  const Tensor& t = val(p);
  check(!t.complex && t.shape.size() == 2, "ste_binarize: want real [H,W]");
  Tensor out = Tensor::real(t.shape);
  for (std::int64_t i = 0; i < t.numel(); ++i)
    out.re[i] = rng.uniform() < t.re[i] ? 1.0 : 0.0;
  if (calib_block > 0) {
    const int ny = t.shape[0], nz = t.shape[1];
    const int y0 = ny / 2 - calib_block / 2, z0 = nz / 2 - calib_block / 2;
    for (int i = std::max(0, y0); i < std::min(ny, y0 + calib_block); ++i)
      for (int j = std::max(0, z0); j < std::min(nz, z0 + calib_block); ++j)
        out.re[(std::int64_t)i * nz + j] = 1.0;
  }
  const bool req = node(p).needs_grad;
  const int ip = p.id, self = (int)nodes_.size();
  // straight-through: route dL/dU to dL/dP unchanged
  return make(std::move(out), req, req ? [ip, self](Graph& g) {
    const Tensor& gr = g.nodes_[self].grad;
    Tensor& gp = g.grad_buf(ip);
    for (std::int64_t i = 0; i < gr.numel(); ++i) gp.re[i] += gr.re[i];
  } : std::function<void(Graph&)>());
}

// ---- ssim ----

std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> k(size);
  const int c = size / 2;
  double s = 0;
  for (int i = 0; i < size; ++i) {
    k[i] = std::exp(-0.5 * (i - c) * (i - c) / (sigma * sigma));
    s += k[i];
  }
  for (double& v : k) v /= s;
  return k;
}

Var Graph::ssim_channelwise(Var x, Var y_ref) {
  const Tensor& tx = val(x);
  const Tensor& ty = val(y_ref);
  check(!tx.complex && !ty.complex && tx.shape == ty.shape &&
            tx.shape.size() == 3,
        "ssim: want real [C,H,W] pairs");
  check(tx.numel() > 0, "ssim: empty input");
  const int ch = tx.shape[0];
  const auto win = gaussian_window(11, 1.5);
  const std::int64_t plane = (std::int64_t)tx.shape[1] * tx.shape[2];

  Var total;
  for (int c = 0; c < ch; ++c) {
    Var xs = slice_ch(x, c, c + 1);
    Var ys = slice_ch(y_ref, c, c + 1);
    // dynamic range of the reference channel sets the stabilizers
    double lo = ty.re[c * plane], hi = lo;
    for (std::int64_t i = 0; i < plane; ++i) {
      lo = std::min(lo, ty.re[c * plane + i]);
      hi = std::max(hi, ty.re[c * plane + i]);
    }
    const double range = std::max(hi - lo, 1e-12);
    const double c1 = (0.01 * range) * (0.01 * range);
    const double c2 = (0.03 * range) * (0.03 * range);

    Var mx = gauss_blur(xs, win);
    Var my = gauss_blur(ys, win);
    Var sxx = sub(gauss_blur(mul(xs, xs), win), mul(mx, mx));
    Var syy = sub(gauss_blur(mul(ys, ys), win), mul(my, my));
    Var sxy = sub(gauss_blur(mul(xs, ys), win), mul(mx, my));
    Var num = mul(add_const(scale(mul(mx, my), 2.0), c1),
                  add_const(scale(sxy, 2.0), c2));
    Var den = mul(add_const(add(mul(mx, mx), mul(my, my)), c1),
                  add_const(add(sxx, syy), c2));
    Var sc = mean(div(num, den));
    total = total.valid() ? add(total, sc) : sc;
  }
  return scale(total, 1.0 / ch);
}

// ---- conjugate gradient ----

Var Graph::cg_solve(const std::function<Var(Var)>& apply_a, Var b, int n_iter,
                    double tol) {
  Var x = constant_like_zero(b);
  Var r = b;
  Var p = b;
  Var rs = real_inner(r, r);
  const double rs0 = val(rs).scalar_value();
  if (!(rs0 > 0)) return x;  // zero rhs: x = 0 immediately
  for (int it = 0; it < n_iter; ++it) {
    Var q = apply_a(p);
    Var pq = real_inner(p, q);
    const double pqv = val(pq).scalar_value();
    if (!std::isfinite(pqv))
      throw std::runtime_error("cg_solve: non-finite curvature");
    if (pqv <= 0) break;  // numerically exhausted SPD direction
    Var alpha = div(rs, pq);
    x = add_scaled(x, p, alpha);
    r = add_scaled(r, q, neg(alpha));
    Var rs_new = real_inner(r, r);
    const double rv = val(rs_new).scalar_value();
    if (!std::isfinite(rv))
      throw std::runtime_error("cg_solve: non-finite residual");
    if (tol > 0 && std::sqrt(rv) < tol * std::sqrt(rs0)) break;
    if (rv <= 0) break;
    Var beta = div(rs_new, rs);
    p = add_scaled(r, p, beta);
    rs = rs_new;
  }
  return x;
}

// ---- parameters / Adam ----

int ParamStore::add(std::string name, std::string role, Tensor init,
                    bool trainable) {
  check(!init.complex, "ParamStore: parameters are real");
  Param p;
  p.name = std::move(name);
  p.role = std::move(role);
  p.m = Tensor::real(init.shape);
  p.v = Tensor::real(init.shape);
  p.value = std::move(init);
  p.trainable = trainable;
  params_.push_back(std::move(p));
  return (int)params_.size() - 1;
}

int ParamStore::find(const std::string& name) const {
  for (size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return (int)i;
  return -1;
}

void ParamStore::save(const std::string& dir,
                      const std::map<std::string, std::string>& sidecar) const {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  auto with_extra = [&](io::json j) {
    for (const auto& [k, v] : sidecar) j[k] = v;
    return j;
  };
  io::json manifest = io::json::array();
  for (size_t i = 0; i < params_.size(); ++i) {
    const Param& p = params_[i];
    const std::string base = std::to_string(i) + "_" + p.name;
    io::json meta;
    meta["name"] = p.name;
    meta["shape"] = p.value.shape;
    meta["role"] = p.role;
    meta["trainable"] = p.trainable;
    meta["file"] = base + ".f64";
    manifest.push_back(meta);
    io::save_f64(fs::path(dir) / (base + ".f64"), p.value.to_rgrid(),
                 with_extra({{"role", p.role}}));
    io::save_f64(fs::path(dir) / (base + ".m.f64"), p.m.to_rgrid(),
                 with_extra({{"role", "adam_m"}}));
    io::save_f64(fs::path(dir) / (base + ".v.f64"), p.v.to_rgrid(),
                 with_extra({{"role", "adam_v"}}));
  }
  io::write_json(fs::path(dir) / "manifest.json", manifest);
}

ParamStore ParamStore::load(const std::string& dir) {
  namespace fs = std::filesystem;
  const io::json manifest = io::read_json(fs::path(dir) / "manifest.json");
  ParamStore store;
  for (const auto& meta : manifest) {
    const std::string file = meta.at("file").get<std::string>();
    const std::string base = file.substr(0, file.size() - 4);
    Param p;
    p.name = meta.at("name").get<std::string>();
    p.role = meta.at("role").get<std::string>();
    p.trainable = meta.at("trainable").get<bool>();
    p.value = Tensor::from(io::load_f64(fs::path(dir) / file));
    p.m = Tensor::from(io::load_f64(fs::path(dir) / (base + ".m.f64")));
    p.v = Tensor::from(io::load_f64(fs::path(dir) / (base + ".v.f64")));
    store.params_.push_back(std::move(p));
  }
  return store;
}

void Adam::step(ParamStore& store,
                const std::vector<std::pair<int, Tensor>>& grads) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, (double)t_);
  const double bc2 = 1.0 - std::pow(beta2_, (double)t_);
  for (const auto& [idx, g] : grads) {
    Param& p = store.at(idx);
    if (!p.trainable) continue;
    check(g.shape == p.value.shape && !g.complex, "adam: gradient mismatch");
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      const double gi = g.re[i];
      p.m.re[i] = beta1_ * p.m.re[i] + (1.0 - beta1_) * gi;
      p.v.re[i] = beta2_ * p.v.re[i] + (1.0 - beta2_) * gi * gi;
      const double mh = p.m.re[i] / bc1;
      const double vh = p.v.re[i] / bc2;
      p.value.re[i] -= lr_ * mh / (std::sqrt(vh) + eps_);
    }
  }
}

}  // namespace mclaro::diff
