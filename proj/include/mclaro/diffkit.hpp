#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mclaro/array.hpp"
#include "mclaro/rng.hpp"

namespace mclaro::diff {

// Dense value, real or complex. Everything is double precision.
struct Tensor {
  std::vector<int> shape;
  bool complex = false;
  std::vector<double> re;
  std::vector<Cplx> cx;

  static Tensor real(std::vector<int> shape, double fill = 0.0);
  static Tensor cplx(std::vector<int> shape, Cplx fill = {});
  static Tensor scalar(double v) { return real({1}, v); }
  static Tensor from(const RGrid& g);
  static Tensor from(const CGrid& g);

  std::int64_t numel() const;
  RGrid to_rgrid() const;
  CGrid to_cgrid() const;
  double scalar_value() const;
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape over whole tensors. A fresh graph is built per training
// step; creation order is the topological order used by backward(). Complex
// gradients follow the dL/dRe + i dL/dIm convention, so fft2c's backward is
// ifft2c of the upstream gradient and descent on real losses of complex
// leaves is plain subtraction.
class Graph {
public:
  Graph() { nodes_.reserve(4096); }

  Var leaf(Tensor value, bool requires_grad = false);
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var constant_like_zero(Var v);

  const Tensor& val(Var v) const;
  const Tensor& grad(Var v) const;  // valid after backward()
  bool requires_grad(Var v) const;

  // arithmetic
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var neg(Var a);
  Var mul(Var a, Var b);       // elementwise, same domain
  Var mul_real(Var c, Var r);  // complex .* real
  Var div(Var a, Var b);       // real elementwise
  Var scale(Var a, double s);
  Var add_const(Var a, double c);
  Var conj(Var a);
  Var mul_scalar_node(Var x, Var s);    // array * real scalar node
  Var add_scaled(Var x, Var y, Var s);  // x + s*y, s real scalar node

  // nonlinearities (real)
  Var relu(Var a);
  Var sigmoid(Var a);
  Var exp(Var a);
  Var clamp(Var a, double lo, double hi);

  // reductions
  Var sum(Var a);                            // real -> scalar
  Var mean(Var a);                           // real -> scalar
  Var masked_mean(Var a, const RGrid& m);    // sum(a*m)/sum(m)
  Var real_inner(Var a, Var b);              // Re<a, b> -> scalar

  // structure
  Var concat_ch(const std::vector<Var>& xs);  // stack [C?,H,W] along axis 0
  Var slice_ch(Var x, int c0, int c1);
  Var pack_ri(Var c);    // [H,W] complex -> [2,H,W] real
  Var unpack_ri(Var r);  // [2,H,W] real -> [H,W] complex
  Var bias_planes(Var bias, int h, int w);  // [C] -> [C,H,W]
  Var avg_pool2(Var x);
  Var upsample2(Var x);

  // conv / filtering (real)
  Var conv2d(Var input, Var kernel, Var bias);  // same zero padding, odd k
  Var gauss_blur(Var x, const std::vector<double>& k1d);  // depthwise

  // spectral (complex, centered orthonormal)
  Var fft2c(Var x);
  Var ifft2c(Var x);

  // stochastic binarization with straight-through backward
  Var ste_binarize(Var p, Rng& rng, int calib_block);

  // channel-wise SSIM (Gaussian window 11, sigma 1.5; C1=(0.01 L)^2,
  // C2=(0.03 L)^2 with L the per-channel range of the reference)
  Var ssim_channelwise(Var x, Var y_ref);

  // unrolled conjugate gradient on an SPD map built from graph ops
  Var cg_solve(const std::function<Var(Var)>& apply_a, Var b, int n_iter,
               double tol = 0.0);

  void backward(Var loss);

  size_t size() const { return nodes_.size(); }

private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool needs_grad = false;
    std::function<void(Graph&)> back;  // accumulate into parents
  };
  std::vector<Node> nodes_;

  Var make(Tensor value, bool needs_grad, std::function<void(Graph&)> back);
  Node& node(Var v) { return nodes_[v.id]; }
  const Node& node(Var v) const { return nodes_[v.id]; }
  Tensor& grad_buf(int id);  // allocate-on-demand accumulator

  friend struct GradAccess;
};

// Gaussian window for SSIM (normalized).
std::vector<double> gaussian_window(int size, double sigma);

// Named parameter with Adam state.
struct Param {
  std::string name;
  std::string role;
  Tensor value;  // real
  Tensor m, v;   // Adam moments
  bool trainable = true;
};

class ParamStore {
public:
  int add(std::string name, std::string role, Tensor init, bool trainable = true);
  Param& at(int i) { return params_[i]; }
  const Param& at(int i) const { return params_[i]; }
  int find(const std::string& name) const;  // -1 if absent
  size_t size() const { return params_.size(); }

  // f64 blobs + manifest.json; `sidecar` is merged into every blob's
  // sidecar (producing stage, config hash).
  void save(const std::string& dir, const std::map<std::string, std::string>&
                                        sidecar = {}) const;
  static ParamStore load(const std::string& dir);

private:
  std::vector<Param> params_;
};

// Standard bias-corrected Adam on real tensors.
class Adam {
public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // One update over the trainable params whose gradient is present.
  void step(ParamStore& store, const std::vector<std::pair<int, Tensor>>& grads);
  long step_count() const { return t_; }
  double lr() const { return lr_; }

private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
};

}  // namespace mclaro::diff
