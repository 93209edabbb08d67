#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "camfool/tensor.hpp"

namespace camfool {

// Reverse-mode autodiff over a static DAG. Two properties matter here:
//
//  * The op vocabulary is closed under differentiation: every op's vjp is
//    emitted as graph nodes built from the same vocabulary, so a gradient
//    graph can itself be differentiated (backward-of-backward).
//  * Frozen selections: relu sign patterns and maxpool argmax choices are
//    exposed as ops (Step, MaxPoolGather/Scatter) whose derivative is zero.
//    Differentiating a gradient graph treats them as constants, which is
//    exact almost everywhere for piecewise-linear nets.

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct UnboundInputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NonScalarOutputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Op : std::uint8_t {
  Input,
  Constant,
  Add,
  Sub,
  Mul,
  ScalarMul,
  Sum,
  MulBcast,   // x * s, s a 1-element node
  DivBcast,   // x / s
  Relu,
  Step,       // x > 0 ? 1 : 0; derivative defined as zero
  StopGrad,   // identity; derivative defined as zero
  Conv2d,     // (x[C,H,W], w[O,C,kh,kw])
  Conv2dDx,   // (gy[O,OH,OW], w) -> x-shaped
  Conv2dDw,   // (gy, x) -> w-shaped
  BiasChan,   // (x[C,H,W], b[C])
  ChanSum,    // [C,H,W] -> [C]
  ChanBcast,  // [C] -> [C,H,W]
  SumChans,   // [C,H,W] -> [H,W]
  RepeatChans,  // [H,W] -> [C,H,W]
  MaxPool2,     // 2x2 stride-2 max pool
  MaxPoolGather,   // (u, x): pick u at argmax location of x per block
  MaxPoolScatter,  // (g, x): scatter g to argmax location of x per block
  Linear,     // (x[N], w[M,N]) -> [M]
  LinearTx,   // (y[M], w[M,N]) -> [N]
  Outer,      // (a[M], b[N]) -> [M,N]
  UpsampleNN,  // [H,W] -> [fH,fW]
  BlockSum,    // [fH,fW] -> [H,W]
  Softmax,
  CrossEntropyOH,  // (logits[N], onehot[N]) -> [1]
  Embed,  // [C,ph,pw] -> [C,H,W], zeros outside the rectangle
  Crop,   // [C,H,W] -> [C,ph,pw]
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Constant: return "constant";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::ScalarMul: return "scalar-mul";
    case Op::Sum: return "sum";
    case Op::MulBcast: return "mul-bcast";
    case Op::DivBcast: return "div-by-scalar";
    case Op::Relu: return "relu";
    case Op::Step: return "step";
    case Op::StopGrad: return "stop-grad";
    case Op::Conv2d: return "conv2d";
    case Op::Conv2dDx: return "conv2d-dx";
    case Op::Conv2dDw: return "conv2d-dw";
    case Op::BiasChan: return "bias-chan";
    case Op::ChanSum: return "chan-sum";
    case Op::ChanBcast: return "chan-bcast";
    case Op::SumChans: return "sum-chans";
    case Op::RepeatChans: return "repeat-chans";
    case Op::MaxPool2: return "maxpool";
    case Op::MaxPoolGather: return "maxpool-gather";
    case Op::MaxPoolScatter: return "maxpool-scatter";
    case Op::Linear: return "linear";
    case Op::LinearTx: return "linear-tx";
    case Op::Outer: return "outer";
    case Op::UpsampleNN: return "upsample-nn";
    case Op::BlockSum: return "block-sum";
    case Op::Softmax: return "softmax";
    case Op::CrossEntropyOH: return "softmax-ce";
    case Op::Embed: return "embed";
    case Op::Crop: return "crop";
  }
  return "?";
}

struct ConvSpec {
  int stride = 1, pad = 0;
  int aux_h = 0, aux_w = 0;  // Dx: input spatial dims; Dw: kernel dims
};

struct RectSpec {
  int x0 = 0, y0 = 0, w = 0, h = 0;  // patch rectangle
  int full_h = 0, full_w = 0;        // enclosing image dims
};

template <class R>
struct Node {
  Op op = Op::Input;
  int in0 = -1, in1 = -1;
  Shape shape;
  R scalar = R(0);    // ScalarMul factor
  int p0 = 0, p1 = 0; // UpsampleNN/BlockSum factor; ChanBcast H,W; RepeatChans C
  ConvSpec conv;
  RectSpec rect;
  Tensor<R> value;    // Constant payload
  std::string name;   // Input name
};

template <class R>
class Graph {
 public:
  std::vector<Node<R>> nodes;

  int size() const { return static_cast<int>(nodes.size()); }
  const Node<R>& node(int id) const { return nodes[id]; }
  const Shape& shape(int id) const { return nodes[id].shape; }

  int input(std::string name, Shape shape) {
    Node<R> n;
    n.op = Op::Input;
    n.name = std::move(name);
    n.shape = std::move(shape);
    numel_of(n.shape);
    return push(std::move(n));
  }

  int constant(Tensor<R> t) {
    Node<R> n;
    n.op = Op::Constant;
    n.shape = t.shape;
    n.value = std::move(t);
    return push(std::move(n));
  }

  int add(int a, int b) { return binary_same(Op::Add, a, b); }
  int sub(int a, int b) { return binary_same(Op::Sub, a, b); }
  int mul(int a, int b) { return binary_same(Op::Mul, a, b); }

  int scalar_mul(int a, R c) {
    Node<R> n;
    n.op = Op::ScalarMul;
    n.in0 = a;
    n.scalar = c;
    n.shape = shape(a);
    return push(std::move(n));
  }

  int sum(int a) {
    Node<R> n;
    n.op = Op::Sum;
    n.in0 = a;
    n.shape = {1};
    return push(std::move(n));
  }

  int mul_bcast(int a, int s) { return bcast(Op::MulBcast, a, s); }
  int div_bcast(int a, int s) { return bcast(Op::DivBcast, a, s); }

  int relu(int a) { return unary(Op::Relu, a); }
  int step(int a) { return unary(Op::Step, a); }
  int stop_grad(int a) { return unary(Op::StopGrad, a); }

  int conv2d(int x, int w, int stride, int pad) {
    require(shape(x).size() == 3 && shape(w).size() == 4, Op::Conv2d, x, "conv2d wants x[C,H,W], w[O,C,kh,kw]");
    const auto& xs = shape(x);
    const auto& ws = shape(w);
    require(ws[1] == xs[0], Op::Conv2d, w, "kernel in-channels mismatch");
    const int oh = (xs[1] + 2 * pad - ws[2]) / stride + 1;
    const int ow = (xs[2] + 2 * pad - ws[3]) / stride + 1;
    require(oh >= 1 && ow >= 1, Op::Conv2d, x, "kernel larger than padded input");
    Node<R> n;
    n.op = Op::Conv2d;
    n.in0 = x;
    n.in1 = w;
    n.conv = {stride, pad, 0, 0};
    n.shape = {ws[0], oh, ow};
    return push(std::move(n));
  }

  int conv2d_dx(int gy, int w, int stride, int pad, int xh, int xw) {
    const auto& ws = shape(w);
    Node<R> n;
    n.op = Op::Conv2dDx;
    n.in0 = gy;
    n.in1 = w;
    n.conv = {stride, pad, xh, xw};
    n.shape = {ws[1], xh, xw};
    return push(std::move(n));
  }

  int conv2d_dw(int gy, int x, int stride, int pad, int kh, int kw) {
    Node<R> n;
    n.op = Op::Conv2dDw;
    n.in0 = gy;
    n.in1 = x;
    n.conv = {stride, pad, kh, kw};
    n.shape = {shape(gy)[0], shape(x)[0], kh, kw};
    return push(std::move(n));
  }

  int bias_chan(int x, int b) {
    require(shape(x).size() == 3 && shape(b).size() == 1 && shape(b)[0] == shape(x)[0], Op::BiasChan, x,
            "bias length must equal channel count");
    Node<R> n;
    n.op = Op::BiasChan;
    n.in0 = x;
    n.in1 = b;
    n.shape = shape(x);
    return push(std::move(n));
  }

  int chan_sum(int x) {
    require(shape(x).size() == 3, Op::ChanSum, x, "wants [C,H,W]");
    Node<R> n;
    n.op = Op::ChanSum;
    n.in0 = x;
    n.shape = {shape(x)[0]};
    return push(std::move(n));
  }

  int chan_bcast(int v, int h, int w) {
    require(shape(v).size() == 1, Op::ChanBcast, v, "wants [C]");
    Node<R> n;
    n.op = Op::ChanBcast;
    n.in0 = v;
    n.p0 = h;
    n.p1 = w;
    n.shape = {shape(v)[0], h, w};
    return push(std::move(n));
  }

  int sum_chans(int x) {
    require(shape(x).size() == 3, Op::SumChans, x, "wants [C,H,W]");
    Node<R> n;
    n.op = Op::SumChans;
    n.in0 = x;
    n.shape = {shape(x)[1], shape(x)[2]};
    return push(std::move(n));
  }

  int repeat_chans(int hmap, int c) {
    require(shape(hmap).size() == 2, Op::RepeatChans, hmap, "wants [H,W]");
    Node<R> n;
    n.op = Op::RepeatChans;
    n.in0 = hmap;
    n.p0 = c;
    n.shape = {c, shape(hmap)[0], shape(hmap)[1]};
    return push(std::move(n));
  }

  int maxpool2(int x) {
    require(shape(x).size() == 3 && shape(x)[1] % 2 == 0 && shape(x)[2] % 2 == 0, Op::MaxPool2, x,
            "wants [C,H,W] with even spatial dims");
    Node<R> n;
    n.op = Op::MaxPool2;
    n.in0 = x;
    n.shape = {shape(x)[0], shape(x)[1] / 2, shape(x)[2] / 2};
    return push(std::move(n));
  }

  int maxpool_gather(int u, int x) {
    require(shape(u) == shape(x), Op::MaxPoolGather, u, "u must match x");
    Node<R> n;
    n.op = Op::MaxPoolGather;
    n.in0 = u;
    n.in1 = x;
    n.shape = {shape(x)[0], shape(x)[1] / 2, shape(x)[2] / 2};
    return push(std::move(n));
  }

  int maxpool_scatter(int g, int x) {
    require(shape(g).size() == 3 && shape(g)[0] == shape(x)[0] && shape(g)[1] * 2 == shape(x)[1] &&
                shape(g)[2] * 2 == shape(x)[2],
            Op::MaxPoolScatter, g, "g must be the pooled shape of x");
    Node<R> n;
    n.op = Op::MaxPoolScatter;
    n.in0 = g;
    n.in1 = x;
    n.shape = shape(x);
    return push(std::move(n));
  }

  int linear(int x, int w) {
    require(shape(x).size() == 1 && shape(w).size() == 2 && shape(w)[1] == shape(x)[0], Op::Linear, x,
            "wants x[N], w[M,N]");
    Node<R> n;
    n.op = Op::Linear;
    n.in0 = x;
    n.in1 = w;
    n.shape = {shape(w)[0]};
    return push(std::move(n));
  }

  int linear_tx(int y, int w) {
    require(shape(y).size() == 1 && shape(w).size() == 2 && shape(w)[0] == shape(y)[0], Op::LinearTx, y,
            "wants y[M], w[M,N]");
    Node<R> n;
    n.op = Op::LinearTx;
    n.in0 = y;
    n.in1 = w;
    n.shape = {shape(w)[1]};
    return push(std::move(n));
  }

  int outer(int a, int b) {
    require(shape(a).size() == 1 && shape(b).size() == 1, Op::Outer, a, "wants vectors");
    Node<R> n;
    n.op = Op::Outer;
    n.in0 = a;
    n.in1 = b;
    n.shape = {shape(a)[0], shape(b)[0]};
    return push(std::move(n));
  }

  int upsample_nn(int x, int f) {
    require(shape(x).size() == 2 && f >= 1, Op::UpsampleNN, x, "wants [H,W]");
    Node<R> n;
    n.op = Op::UpsampleNN;
    n.in0 = x;
    n.p0 = f;
    n.shape = {shape(x)[0] * f, shape(x)[1] * f};
    return push(std::move(n));
  }

  int block_sum(int x, int f) {
    require(shape(x).size() == 2 && shape(x)[0] % f == 0 && shape(x)[1] % f == 0, Op::BlockSum, x,
            "spatial dims must be divisible by the factor");
    Node<R> n;
    n.op = Op::BlockSum;
    n.in0 = x;
    n.p0 = f;
    n.shape = {shape(x)[0] / f, shape(x)[1] / f};
    return push(std::move(n));
  }

  int softmax(int x) {
    require(shape(x).size() == 1, Op::Softmax, x, "wants a vector");
    return unary(Op::Softmax, x);
  }

  int cross_entropy(int logits, int onehot) {
    require(shape(logits) == shape(onehot) && shape(logits).size() == 1, Op::CrossEntropyOH, logits,
            "logits and one-hot target must be equal-length vectors");
    Node<R> n;
    n.op = Op::CrossEntropyOH;
    n.in0 = logits;
    n.in1 = onehot;
    n.shape = {1};
    return push(std::move(n));
  }

  int embed(int z, int x0, int y0, int full_h, int full_w) {
    require(shape(z).size() == 3, Op::Embed, z, "wants [C,ph,pw]");
    const auto& zs = shape(z);
    require(x0 >= 0 && y0 >= 0 && y0 + zs[1] <= full_h && x0 + zs[2] <= full_w, Op::Embed, z,
            "rectangle outside image bounds");
    Node<R> n;
    n.op = Op::Embed;
    n.in0 = z;
    n.rect = {x0, y0, zs[2], zs[1], full_h, full_w};
    n.shape = {zs[0], full_h, full_w};
    return push(std::move(n));
  }

  int crop(int x, int x0, int y0, int h, int w) {
    require(shape(x).size() == 3, Op::Crop, x, "wants [C,H,W]");
    const auto& xs = shape(x);
    require(x0 >= 0 && y0 >= 0 && y0 + h <= xs[1] && x0 + w <= xs[2], Op::Crop, x, "rectangle outside input");
    Node<R> n;
    n.op = Op::Crop;
    n.in0 = x;
    n.rect = {x0, y0, w, h, xs[1], xs[2]};
    n.shape = {xs[0], h, w};
    return push(std::move(n));
  }

  // --- derived builders ---

  int gap(int x) {
    const auto& xs = shape(x);
    return scalar_mul(chan_sum(x), R(1) / static_cast<R>(xs[1] * xs[2]));
  }

  // Sum-to-one normalization with the all-zero guard: a zero map stays zero.
  int safe_normalize(int x) {
    const int s = sum(x);
    const int live = step(s);  // 1 if sum > 0, else 0; derivative zero
    const int one = constant(Tensor<R>::scalar(R(1)));
    const int denom = add(s, sub(one, live));
    return mul_bcast(div_bcast(x, denom), live);
  }

  int find_input(const std::string& name) const {
    for (int i = 0; i < size(); ++i)
      if (nodes[i].op == Op::Input && nodes[i].name == name) return i;
    throw UnboundInputError("no input named '" + name + "' in graph");
  }

 private:
  int push(Node<R> n) {
    nodes.push_back(std::move(n));
    return size() - 1;
  }

  int unary(Op op, int a) {
    Node<R> n;
    n.op = op;
    n.in0 = a;
    n.shape = shape(a);
    return push(std::move(n));
  }

  int binary_same(Op op, int a, int b) {
    require(shape(a) == shape(b), op, a, "operand shapes differ: " + shape_str(shape(a)) + " vs " + shape_str(shape(b)));
    Node<R> n;
    n.op = op;
    n.in0 = a;
    n.in1 = b;
    n.shape = shape(a);
    return push(std::move(n));
  }

  int bcast(Op op, int a, int s) {
    require(numel_of(shape(s)) == 1, op, s, "broadcast operand must have one element");
    Node<R> n;
    n.op = op;
    n.in0 = a;
    n.in1 = s;
    n.shape = shape(a);
    return push(std::move(n));
  }

  void require(bool ok, Op op, int id, const std::string& msg) const {
    if (!ok)
      throw ShapeError(std::string("shape mismatch at node ") + std::to_string(id) + " (" + op_name(op) + "): " + msg);
  }
};

// --- evaluation ---

template <class R>
struct Bindings {
  std::vector<std::pair<std::string, const Tensor<R>*>> items;

  void set(const std::string& name, const Tensor<R>& t) {
    for (auto& it : items)
      if (it.first == name) {
        it.second = &t;
        return;
      }
    items.emplace_back(name, &t);
  }
  const Tensor<R>* find(const std::string& name) const {
    for (const auto& it : items)
      if (it.first == name) return it.second;
    return nullptr;
  }
};

// Per-evaluation state. Buffers persist across evaluations of the same graph
// so repeated evaluation does not reallocate. Graphs are immutable once
// evaluated; one Eval per thread makes concurrent evaluation safe.
template <class R>
class Eval {
 public:
  void prepare(const Graph<R>& g) {
    vals_.resize(g.nodes.size());
    have_.assign(g.nodes.size(), 0);
  }

  const Tensor<R>& value(int id) const { return vals_[id]; }
  Tensor<R>& mut(int id) { return vals_[id]; }
  bool computed(int id) const { return id < static_cast<int>(have_.size()) && have_[id]; }
  void mark(int id) { have_[id] = 1; }

 private:
  std::vector<Tensor<R>> vals_;
  std::vector<std::uint8_t> have_;
};

namespace detail {

template <class R>
void ensure_shape(Tensor<R>& t, const Shape& s) {
  if (t.shape != s) {
    t.shape = s;
    t.data.assign(numel_of(s), R(0));
  }
}

// argmax within each 2x2 block, first-in-row-major wins ties
inline int block_argmax(const float* r0, const float* r1) {
  int best = 0;
  float bv = r0[0];
  if (r0[1] > bv) { bv = r0[1]; best = 1; }
  if (r1[0] > bv) { bv = r1[0]; best = 2; }
  if (r1[1] > bv) { best = 3; }
  return best;
}
inline int block_argmax(const double* r0, const double* r1) {
  int best = 0;
  double bv = r0[0];
  if (r0[1] > bv) { bv = r0[1]; best = 1; }
  if (r1[0] > bv) { bv = r1[0]; best = 2; }
  if (r1[1] > bv) { best = 3; }
  return best;
}

template <class R>
void conv2d_fwd(const Tensor<R>& x, const Tensor<R>& w, int stride, int pad, Tensor<R>& y) {
  const int C = x.shape[0], H = x.shape[1], W = x.shape[2];
  const int O = w.shape[0], KH = w.shape[2], KW = w.shape[3];
  const int OH = y.shape[1], OW = y.shape[2];
  std::fill(y.data.begin(), y.data.end(), R(0));
  for (int oc = 0; oc < O; ++oc) {
    R* yplane = y.ptr() + static_cast<std::size_t>(oc) * OH * OW;
    for (int ic = 0; ic < C; ++ic) {
      const R* xplane = x.ptr() + static_cast<std::size_t>(ic) * H * W;
      const R* wk = w.ptr() + ((static_cast<std::size_t>(oc) * C + ic) * KH) * KW;
      for (int kh = 0; kh < KH; ++kh) {
        for (int kw = 0; kw < KW; ++kw) {
          const R wv = wk[kh * KW + kw];
          if (stride == 1) {
            const int ow0 = std::max(0, pad - kw);
            const int ow1 = std::min(OW, W + pad - kw);
            for (int oh = 0; oh < OH; ++oh) {
              const int ih = oh - pad + kh;
              if (ih < 0 || ih >= H) continue;
              const R* xrow = xplane + static_cast<std::size_t>(ih) * W - pad + kw;
              R* yrow = yplane + static_cast<std::size_t>(oh) * OW;
              for (int ow = ow0; ow < ow1; ++ow) yrow[ow] += wv * xrow[ow];
            }
          } else {
            for (int oh = 0; oh < OH; ++oh) {
              const int ih = oh * stride - pad + kh;
              if (ih < 0 || ih >= H) continue;
              const R* xrow = xplane + static_cast<std::size_t>(ih) * W;
              R* yrow = yplane + static_cast<std::size_t>(oh) * OW;
              for (int ow = 0; ow < OW; ++ow) {
                const int iw = ow * stride - pad + kw;
                if (iw >= 0 && iw < W) yrow[ow] += wv * xrow[iw];
              }
            }
          }
        }
      }
    }
  }
}

template <class R>
void conv2d_dx(const Tensor<R>& gy, const Tensor<R>& w, int stride, int pad, Tensor<R>& gx) {
  const int O = gy.shape[0], OH = gy.shape[1], OW = gy.shape[2];
  const int C = gx.shape[0], H = gx.shape[1], W = gx.shape[2];
  const int KH = w.shape[2], KW = w.shape[3];
  std::fill(gx.data.begin(), gx.data.end(), R(0));
  for (int oc = 0; oc < O; ++oc) {
    const R* gplane = gy.ptr() + static_cast<std::size_t>(oc) * OH * OW;
    for (int ic = 0; ic < C; ++ic) {
      R* xplane = gx.ptr() + static_cast<std::size_t>(ic) * H * W;
      const R* wk = w.ptr() + ((static_cast<std::size_t>(oc) * C + ic) * KH) * KW;
      for (int kh = 0; kh < KH; ++kh) {
        for (int kw = 0; kw < KW; ++kw) {
          const R wv = wk[kh * KW + kw];
          if (stride == 1) {
            const int ow0 = std::max(0, pad - kw);
            const int ow1 = std::min(OW, W + pad - kw);
            for (int oh = 0; oh < OH; ++oh) {
              const int ih = oh - pad + kh;
              if (ih < 0 || ih >= H) continue;
              R* xrow = xplane + static_cast<std::size_t>(ih) * W - pad + kw;
              const R* grow = gplane + static_cast<std::size_t>(oh) * OW;
              for (int ow = ow0; ow < ow1; ++ow) xrow[ow] += wv * grow[ow];
            }
          } else {
            for (int oh = 0; oh < OH; ++oh) {
              const int ih = oh * stride - pad + kh;
              if (ih < 0 || ih >= H) continue;
              R* xrow = xplane + static_cast<std::size_t>(ih) * W;
              const R* grow = gplane + static_cast<std::size_t>(oh) * OW;
              for (int ow = 0; ow < OW; ++ow) {
                const int iw = ow * stride - pad + kw;
                if (iw >= 0 && iw < W) xrow[iw] += wv * grow[ow];
              }
            }
          }
        }
      }
    }
  }
}

template <class R>
void conv2d_dw(const Tensor<R>& gy, const Tensor<R>& x, int stride, int pad, Tensor<R>& gw) {
  const int O = gy.shape[0], OH = gy.shape[1], OW = gy.shape[2];
  const int C = x.shape[0], H = x.shape[1], W = x.shape[2];
  const int KH = gw.shape[2], KW = gw.shape[3];
  for (int oc = 0; oc < O; ++oc) {
    const R* gplane = gy.ptr() + static_cast<std::size_t>(oc) * OH * OW;
    for (int ic = 0; ic < C; ++ic) {
      const R* xplane = x.ptr() + static_cast<std::size_t>(ic) * H * W;
      R* wk = gw.ptr() + ((static_cast<std::size_t>(oc) * C + ic) * KH) * KW;
      for (int kh = 0; kh < KH; ++kh) {
        for (int kw = 0; kw < KW; ++kw) {
          R acc = R(0);
          if (stride == 1) {
            const int ow0 = std::max(0, pad - kw);
            const int ow1 = std::min(OW, W + pad - kw);
            for (int oh = 0; oh < OH; ++oh) {
              const int ih = oh - pad + kh;
              if (ih < 0 || ih >= H) continue;
              const R* xrow = xplane + static_cast<std::size_t>(ih) * W - pad + kw;
              const R* grow = gplane + static_cast<std::size_t>(oh) * OW;
              for (int ow = ow0; ow < ow1; ++ow) acc += grow[ow] * xrow[ow];
            }
          } else {
            for (int oh = 0; oh < OH; ++oh) {
              const int ih = oh * stride - pad + kh;
              if (ih < 0 || ih >= H) continue;
              const R* xrow = xplane + static_cast<std::size_t>(ih) * W;
              const R* grow = gplane + static_cast<std::size_t>(oh) * OW;
              for (int ow = 0; ow < OW; ++ow) {
                const int iw = ow * stride - pad + kw;
                if (iw >= 0 && iw < W) acc += grow[ow] * xrow[iw];
              }
            }
          }
          wk[kh * KW + kw] = acc;
        }
      }
    }
  }
}

}  // namespace detail

template <class R>
void eval_node(const Graph<R>& g, int id, Eval<R>& e, const Bindings<R>& b) {
  const Node<R>& n = g.nodes[id];
  Tensor<R>& out = e.mut(id);
  auto in = [&](int which) -> const Tensor<R>& { return e.value(which); };
  switch (n.op) {
    case Op::Input: {
      const Tensor<R>* t = b.find(n.name);
      if (!t) throw UnboundInputError("unbound input '" + n.name + "'");
      if (t->shape != n.shape)
        throw ShapeError("binding for '" + n.name + "' has shape " + shape_str(t->shape) + ", graph expects " +
                         shape_str(n.shape));
      out = *t;  // copy keeps the cache self-contained
      break;
    }
    case Op::Constant:
      out = n.value;
      break;
    case Op::Add: {
      detail::ensure_shape(out, n.shape);
      const auto& a = in(n.in0);
      const auto& c = in(n.in1);
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] + c[i];
      break;
    }
    case Op::Sub: {
      detail::ensure_shape(out, n.shape);
      const auto& a = in(n.in0);
      const auto& c = in(n.in1);
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] - c[i];
      break;
    }
    case Op::Mul: {
      detail::ensure_shape(out, n.shape);
      const auto& a = in(n.in0);
      const auto& c = in(n.in1);
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * c[i];
      break;
    }
    case Op::ScalarMul: {
      detail::ensure_shape(out, n.shape);
      const auto& a = in(n.in0);
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * n.scalar;
      break;
    }
    case Op::Sum: {
      detail::ensure_shape(out, n.shape);
      const auto& a = in(n.in0);
      R acc = R(0);
      for (std::size_t i = 0; i < a.numel(); ++i) acc += a[i];
      out[0] = acc;
      break;
    }
    case Op::MulBcast: {
      detail::ensure_shape(out, n.shape);
      const auto& a = in(n.in0);
      const R s = in(n.in1)[0];
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * s;
      break;
    }
    case Op::DivBcast: {
      detail::ensure_shape(out, n.shape);
      const auto& a = in(n.in0);
      const R s = in(n.in1)[0];
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] / s;
      break;
    }
    case Op::Relu: {
      detail::ensure_shape(out, n.shape);
      const auto& a = in(n.in0);
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] > R(0) ? a[i] : R(0);
      break;
    }
    case Op::Step: {
      detail::ensure_shape(out, n.shape);
      const auto& a = in(n.in0);
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] > R(0) ? R(1) : R(0);
      break;
    }
    case Op::StopGrad:
      out = in(n.in0);
      break;
    case Op::Conv2d: {
      detail::ensure_shape(out, n.shape);
      detail::conv2d_fwd(in(n.in0), in(n.in1), n.conv.stride, n.conv.pad, out);
      break;
    }
    case Op::Conv2dDx: {
      detail::ensure_shape(out, n.shape);
      detail::conv2d_dx(in(n.in0), in(n.in1), n.conv.stride, n.conv.pad, out);
      break;
    }
    case Op::Conv2dDw: {
      detail::ensure_shape(out, n.shape);
      detail::conv2d_dw(in(n.in0), in(n.in1), n.conv.stride, n.conv.pad, out);
      break;
    }
    case Op::BiasChan: {
      detail::ensure_shape(out, n.shape);
      const auto& x = in(n.in0);
      const auto& bias = in(n.in1);
      const int C = n.shape[0];
      const std::size_t hw = static_cast<std::size_t>(n.shape[1]) * n.shape[2];
      for (int c = 0; c < C; ++c) {
        const R bv = bias[c];
        const R* xp = x.ptr() + c * hw;
        R* op = out.ptr() + c * hw;
        for (std::size_t i = 0; i < hw; ++i) op[i] = xp[i] + bv;
      }
      break;
    }
    case Op::ChanSum: {
      detail::ensure_shape(out, n.shape);
      const auto& x = in(n.in0);
      const int C = x.shape[0];
      const std::size_t hw = static_cast<std::size_t>(x.shape[1]) * x.shape[2];
      for (int c = 0; c < C; ++c) {
        R acc = R(0);
        const R* xp = x.ptr() + c * hw;
        for (std::size_t i = 0; i < hw; ++i) acc += xp[i];
        out[c] = acc;
      }
      break;
    }
    case Op::ChanBcast: {
      detail::ensure_shape(out, n.shape);
      const auto& v = in(n.in0);
      const int C = n.shape[0];
      const std::size_t hw = static_cast<std::size_t>(n.shape[1]) * n.shape[2];
      for (int c = 0; c < C; ++c) {
        R* op = out.ptr() + c * hw;
        const R val = v[c];
        for (std::size_t i = 0; i < hw; ++i) op[i] = val;
      }
      break;
    }
    case Op::SumChans: {
      detail::ensure_shape(out, n.shape);
      const auto& x = in(n.in0);
      const int C = x.shape[0];
      const std::size_t hw = out.numel();
      std::fill(out.data.begin(), out.data.end(), R(0));
      for (int c = 0; c < C; ++c) {
        const R* xp = x.ptr() + c * hw;
        for (std::size_t i = 0; i < hw; ++i) out[i] += xp[i];
      }
      break;
    }
    case Op::RepeatChans: {
      detail::ensure_shape(out, n.shape);
      const auto& hmap = in(n.in0);
      const std::size_t hw = hmap.numel();
      for (int c = 0; c < n.p0; ++c) std::copy(hmap.ptr(), hmap.ptr() + hw, out.ptr() + c * hw);
      break;
    }
    case Op::MaxPool2:
    case Op::MaxPoolGather: {
      detail::ensure_shape(out, n.shape);
      const auto& u = in(n.in0);
      const auto& x = in(n.op == Op::MaxPool2 ? n.in0 : n.in1);
      const int C = x.shape[0], H = x.shape[1], W = x.shape[2];
      for (int c = 0; c < C; ++c)
        for (int oi = 0; oi < H / 2; ++oi) {
          const R* xr0 = x.ptr() + (static_cast<std::size_t>(c) * H + 2 * oi) * W;
          const R* xr1 = xr0 + W;
          const R* ur0 = u.ptr() + (static_cast<std::size_t>(c) * H + 2 * oi) * W;
          const R* ur1 = ur0 + W;
          R* orow = out.ptr() + (static_cast<std::size_t>(c) * (H / 2) + oi) * (W / 2);
          for (int oj = 0; oj < W / 2; ++oj) {
            const int a = detail::block_argmax(xr0 + 2 * oj, xr1 + 2 * oj);
            orow[oj] = (a < 2 ? ur0 : ur1)[2 * oj + (a & 1)];
          }
        }
      break;
    }
    case Op::MaxPoolScatter: {
      detail::ensure_shape(out, n.shape);
      std::fill(out.data.begin(), out.data.end(), R(0));
      const auto& gsrc = in(n.in0);
      const auto& x = in(n.in1);
      const int C = x.shape[0], H = x.shape[1], W = x.shape[2];
      for (int c = 0; c < C; ++c)
        for (int oi = 0; oi < H / 2; ++oi) {
          const R* xr0 = x.ptr() + (static_cast<std::size_t>(c) * H + 2 * oi) * W;
          const R* xr1 = xr0 + W;
          R* or0 = out.ptr() + (static_cast<std::size_t>(c) * H + 2 * oi) * W;
          R* or1 = or0 + W;
          const R* grow = gsrc.ptr() + (static_cast<std::size_t>(c) * (H / 2) + oi) * (W / 2);
          for (int oj = 0; oj < W / 2; ++oj) {
            const int a = detail::block_argmax(xr0 + 2 * oj, xr1 + 2 * oj);
            (a < 2 ? or0 : or1)[2 * oj + (a & 1)] += grow[oj];
          }
        }
      break;
    }
    case Op::Linear: {
      detail::ensure_shape(out, n.shape);
      const auto& x = in(n.in0);
      const auto& w = in(n.in1);
      const int M = w.shape[0], N = w.shape[1];
      for (int m = 0; m < M; ++m) {
        const R* wr = w.ptr() + static_cast<std::size_t>(m) * N;
        R acc = R(0);
        for (int k = 0; k < N; ++k) acc += wr[k] * x[k];
        out[m] = acc;
      }
      break;
    }
    case Op::LinearTx: {
      detail::ensure_shape(out, n.shape);
      const auto& y = in(n.in0);
      const auto& w = in(n.in1);
      const int M = w.shape[0], N = w.shape[1];
      std::fill(out.data.begin(), out.data.end(), R(0));
      for (int m = 0; m < M; ++m) {
        const R* wr = w.ptr() + static_cast<std::size_t>(m) * N;
        const R yv = y[m];
        for (int k = 0; k < N; ++k) out[k] += yv * wr[k];
      }
      break;
    }
    case Op::Outer: {
      detail::ensure_shape(out, n.shape);
      const auto& a = in(n.in0);
      const auto& c = in(n.in1);
      const int M = n.shape[0], N = n.shape[1];
      for (int m = 0; m < M; ++m) {
        R* orow = out.ptr() + static_cast<std::size_t>(m) * N;
        const R av = a[m];
        for (int k = 0; k < N; ++k) orow[k] = av * c[k];
      }
      break;
    }
    case Op::UpsampleNN: {
      detail::ensure_shape(out, n.shape);
      const auto& x = in(n.in0);
      const int f = n.p0, OH = n.shape[0], OW = n.shape[1], W = x.shape[1];
      for (int i = 0; i < OH; ++i) {
        const R* xrow = x.ptr() + static_cast<std::size_t>(i / f) * W;
        R* orow = out.ptr() + static_cast<std::size_t>(i) * OW;
        for (int j = 0; j < OW; ++j) orow[j] = xrow[j / f];
      }
      break;
    }
    case Op::BlockSum: {
      detail::ensure_shape(out, n.shape);
      const auto& x = in(n.in0);
      const int f = n.p0, H = n.shape[0], W = n.shape[1], XW = x.shape[1];
      for (int i = 0; i < H; ++i) {
        R* orow = out.ptr() + static_cast<std::size_t>(i) * W;
        for (int j = 0; j < W; ++j) {
          R acc = R(0);
          for (int di = 0; di < f; ++di) {
            const R* xrow = x.ptr() + (static_cast<std::size_t>(i) * f + di) * XW + static_cast<std::size_t>(j) * f;
            for (int dj = 0; dj < f; ++dj) acc += xrow[dj];
          }
          orow[j] = acc;
        }
      }
      break;
    }
    case Op::Softmax: {
      detail::ensure_shape(out, n.shape);
      const auto& x = in(n.in0);
      R mx = x[0];
      for (std::size_t i = 1; i < x.numel(); ++i) mx = std::max(mx, x[i]);
      R denom = R(0);
      for (std::size_t i = 0; i < x.numel(); ++i) {
        out[i] = std::exp(x[i] - mx);
        denom += out[i];
      }
      for (std::size_t i = 0; i < x.numel(); ++i) out[i] /= denom;
      break;
    }
    case Op::CrossEntropyOH: {
      detail::ensure_shape(out, n.shape);
      const auto& l = in(n.in0);
      const auto& t = in(n.in1);
      R mx = l[0];
      for (std::size_t i = 1; i < l.numel(); ++i) mx = std::max(mx, l[i]);
      R lse = R(0), picked = R(0);
      for (std::size_t i = 0; i < l.numel(); ++i) {
        lse += std::exp(l[i] - mx);
        picked += t[i] * l[i];
      }
      out[0] = mx + std::log(lse) - picked;
      break;
    }
    case Op::Embed: {
      detail::ensure_shape(out, n.shape);
      std::fill(out.data.begin(), out.data.end(), R(0));
      const auto& z = in(n.in0);
      const int C = n.shape[0];
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < n.rect.h; ++i) {
          const R* zr = z.ptr() + (static_cast<std::size_t>(c) * n.rect.h + i) * n.rect.w;
          R* orow = out.ptr() + (static_cast<std::size_t>(c) * n.rect.full_h + n.rect.y0 + i) * n.rect.full_w + n.rect.x0;
          std::copy(zr, zr + n.rect.w, orow);
        }
      break;
    }
    case Op::Crop: {
      detail::ensure_shape(out, n.shape);
      const auto& x = in(n.in0);
      const int C = n.shape[0];
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < n.rect.h; ++i) {
          const R* xr = x.ptr() + (static_cast<std::size_t>(c) * n.rect.full_h + n.rect.y0 + i) * n.rect.full_w + n.rect.x0;
          R* orow = out.ptr() + (static_cast<std::size_t>(c) * n.rect.h + i) * n.rect.w;
          std::copy(xr, xr + n.rect.w, orow);
        }
      break;
    }
  }
  e.mark(id);
}

// Evaluates the closure of `targets` in id order (ids are topological by
// construction). Results live in `e` until the next evaluate() call.
template <class R>
void evaluate(const Graph<R>& g, std::span<const int> targets, const Bindings<R>& b, Eval<R>& e) {
  e.prepare(g);
  std::vector<std::uint8_t> needed(g.nodes.size(), 0);
  std::vector<int> stack(targets.begin(), targets.end());
  while (!stack.empty()) {
    const int id = stack.back();
    stack.pop_back();
    if (needed[id]) continue;
    needed[id] = 1;
    const Node<R>& n = g.nodes[id];
    if (n.in0 >= 0) stack.push_back(n.in0);
    if (n.in1 >= 0) stack.push_back(n.in1);
  }
  for (int id = 0; id < g.size(); ++id)
    if (needed[id]) eval_node(g, id, e, b);
}

template <class R>
const Tensor<R>& evaluate_one(const Graph<R>& g, int target, const Bindings<R>& b, Eval<R>& e) {
  const int t[1] = {target};
  evaluate(g, std::span<const int>(t, 1), b, e);
  return e.value(target);
}

// --- differentiation ---

namespace detail {

template <class R>
std::vector<std::uint8_t> ancestors_of(const Graph<R>& g, int out) {
  std::vector<std::uint8_t> anc(g.nodes.size(), 0);
  std::vector<int> stack{out};
  while (!stack.empty()) {
    const int id = stack.back();
    stack.pop_back();
    if (anc[id]) continue;
    anc[id] = 1;
    const auto& n = g.nodes[id];
    if (n.in0 >= 0) stack.push_back(n.in0);
    if (n.in1 >= 0) stack.push_back(n.in1);
  }
  return anc;
}

template <class R>
std::vector<std::uint8_t> descendants_of(const Graph<R>& g, std::span<const int> seeds, int upto) {
  std::vector<std::uint8_t> desc(g.nodes.size(), 0);
  for (int s : seeds) desc[s] = 1;
  for (int id = 0; id <= upto; ++id) {
    const auto& n = g.nodes[id];
    if ((n.in0 >= 0 && desc[n.in0]) || (n.in1 >= 0 && desc[n.in1])) desc[id] = 1;
  }
  return desc;
}

}  // namespace detail

// Builds gradient nodes of `out` (a scalar node) with respect to each node in
// `wrts`, appending to the same graph so the result is differentiable again.
// Returns one node id per wrt; a wrt the output does not depend on yields a
// zero constant.
template <class R>
std::vector<int> backward_nodes(Graph<R>& g, int out, std::span<const int> wrts) {
  if (numel_of(g.shape(out)) != 1)
    throw NonScalarOutputError("backward requires a scalar output, got " + shape_str(g.shape(out)));
  const int frontier = g.size();  // nodes appended from here on are gradient nodes
  const auto anc = detail::ancestors_of(g, out);
  const auto desc = detail::descendants_of(g, wrts, frontier - 1);
  std::vector<int> adj(frontier, -1);
  adj[out] = g.constant(Tensor<R>::scalar(R(1)));

  auto accumulate = [&](int target, int contrib) {
    if (target < 0 || target >= frontier) return;
    if (!(anc[target] && desc[target])) return;
    adj[target] = adj[target] < 0 ? contrib : g.add(adj[target], contrib);
  };

  for (int id = out; id >= 0; --id) {
    if (adj[id] < 0 || !(anc[id] && desc[id])) continue;
    const int gid = adj[id];
    // Copy fields used below: g.nodes may reallocate as vjp nodes are pushed.
    const Node<R> n = g.nodes[id];
    switch (n.op) {
      case Op::Input:
      case Op::Constant:
      case Op::Step:
      case Op::StopGrad:
        break;  // leaves and frozen selections: no flow
      case Op::Add:
        accumulate(n.in0, gid);
        accumulate(n.in1, gid);
        break;
      case Op::Sub:
        accumulate(n.in0, gid);
        accumulate(n.in1, g.scalar_mul(gid, R(-1)));
        break;
      case Op::Mul:
        accumulate(n.in0, g.mul(gid, n.in1));
        accumulate(n.in1, g.mul(gid, n.in0));
        break;
      case Op::ScalarMul:
        accumulate(n.in0, g.scalar_mul(gid, n.scalar));
        break;
      case Op::Sum:
        accumulate(n.in0, g.mul_bcast(g.constant(Tensor<R>::full(g.shape(n.in0), R(1))), gid));
        break;
      case Op::MulBcast:
        accumulate(n.in0, g.mul_bcast(gid, n.in1));
        accumulate(n.in1, g.sum(g.mul(gid, n.in0)));
        break;
      case Op::DivBcast:
        accumulate(n.in0, g.div_bcast(gid, n.in1));
        accumulate(n.in1, g.scalar_mul(g.div_bcast(g.div_bcast(g.sum(g.mul(gid, n.in0)), n.in1), n.in1), R(-1)));
        break;
      case Op::Relu:
        accumulate(n.in0, g.mul(gid, g.step(n.in0)));
        break;
      case Op::Conv2d: {
        // copy extents up front: pushing nodes may reallocate and invalidate shape refs
        const int xh = g.shape(n.in0)[1], xw = g.shape(n.in0)[2];
        const int kh = g.shape(n.in1)[2], kw = g.shape(n.in1)[3];
        accumulate(n.in0, g.conv2d_dx(gid, n.in1, n.conv.stride, n.conv.pad, xh, xw));
        accumulate(n.in1, g.conv2d_dw(gid, n.in0, n.conv.stride, n.conv.pad, kh, kw));
        break;
      }
      case Op::Conv2dDx: {
        const int kh = g.shape(n.in1)[2], kw = g.shape(n.in1)[3];
        accumulate(n.in0, g.conv2d(gid, n.in1, n.conv.stride, n.conv.pad));
        accumulate(n.in1, g.conv2d_dw(n.in0, gid, n.conv.stride, n.conv.pad, kh, kw));
        break;
      }
      case Op::Conv2dDw: {
        const int xh = g.shape(n.in1)[1], xw = g.shape(n.in1)[2];
        accumulate(n.in0, g.conv2d(n.in1, gid, n.conv.stride, n.conv.pad));
        accumulate(n.in1, g.conv2d_dx(n.in0, gid, n.conv.stride, n.conv.pad, xh, xw));
        break;
      }
      case Op::BiasChan:
        accumulate(n.in0, gid);
        accumulate(n.in1, g.chan_sum(gid));
        break;
      case Op::ChanSum: {
        const auto& xs = g.shape(n.in0);
        accumulate(n.in0, g.chan_bcast(gid, xs[1], xs[2]));
        break;
      }
      case Op::ChanBcast:
        accumulate(n.in0, g.chan_sum(gid));
        break;
      case Op::SumChans:
        accumulate(n.in0, g.repeat_chans(gid, g.shape(n.in0)[0]));
        break;
      case Op::RepeatChans:
        accumulate(n.in0, g.sum_chans(gid));
        break;
      case Op::MaxPool2:
        accumulate(n.in0, g.maxpool_scatter(gid, n.in0));
        break;
      case Op::MaxPoolGather:
        accumulate(n.in0, g.maxpool_scatter(gid, n.in1));
        break;  // selection input is frozen
      case Op::MaxPoolScatter:
        accumulate(n.in0, g.maxpool_gather(gid, n.in1));
        break;
      case Op::Linear:
        accumulate(n.in0, g.linear_tx(gid, n.in1));
        accumulate(n.in1, g.outer(gid, n.in0));
        break;
      case Op::LinearTx:
        accumulate(n.in0, g.linear(gid, n.in1));
        accumulate(n.in1, g.outer(n.in0, gid));
        break;
      case Op::Outer:
        accumulate(n.in0, g.linear(n.in1, gid));
        accumulate(n.in1, g.linear_tx(n.in0, gid));
        break;
      case Op::UpsampleNN:
        accumulate(n.in0, g.block_sum(gid, n.p0));
        break;
      case Op::BlockSum:
        accumulate(n.in0, g.upsample_nn(gid, n.p0));
        break;
      case Op::Softmax: {
        const int t = g.mul(gid, id);
        accumulate(n.in0, g.sub(t, g.mul_bcast(id, g.sum(t))));
        break;
      }
      case Op::CrossEntropyOH:
        accumulate(n.in0, g.mul_bcast(g.sub(g.softmax(n.in0), n.in1), gid));
        accumulate(n.in1, g.scalar_mul(g.mul_bcast(n.in0, gid), R(-1)));
        break;
      case Op::Embed:
        accumulate(n.in0, g.crop(gid, n.rect.x0, n.rect.y0, n.rect.h, n.rect.w));
        break;
      case Op::Crop:
        accumulate(n.in0, g.embed(gid, n.rect.x0, n.rect.y0, n.rect.full_h, n.rect.full_w));
        break;
    }
  }

  std::vector<int> result;
  result.reserve(wrts.size());
  for (int w : wrts) {
    if (w < frontier && adj[w] >= 0)
      result.push_back(adj[w]);
    else
      result.push_back(g.constant(Tensor<R>::zeros(g.shape(w))));
  }
  return result;
}

template <class R>
int backward_node(Graph<R>& g, int out, int wrt) {
  const int w[1] = {wrt};
  return backward_nodes(g, out, std::span<const int>(w, 1))[0];
}

// Spec-level convenience: gradient of a scalar graph output with respect to a
// named input, evaluated immediately.
template <class R>
Tensor<R> backward(Graph<R>& g, int out, const std::string& wrt, const Bindings<R>& b, Eval<R>& e) {
  const int grad = backward_node(g, out, g.find_input(wrt));
  return evaluate_one(g, grad, b, e);
}

// Selection pattern fingerprint of an evaluation: relu/step sign bits and
// maxpool argmax choices, in node order. Two evaluations whose signatures
// match used identical selections, so the network was linear between them.
template <class R>
std::vector<std::int32_t> selection_signature(const Graph<R>& g, const Eval<R>& e) {
  std::vector<std::int32_t> sig;
  for (int id = 0; id < g.size(); ++id) {
    if (!e.computed(id)) continue;
    const Node<R>& n = g.nodes[id];
    if (n.op == Op::Relu || n.op == Op::Step) {
      const auto& x = e.value(n.in0);
      for (std::size_t i = 0; i < x.numel(); ++i) sig.push_back(x[i] > R(0) ? 1 : 0);
    } else if (n.op == Op::MaxPool2 || n.op == Op::MaxPoolGather || n.op == Op::MaxPoolScatter) {
      const auto& x = e.value(n.op == Op::MaxPool2 ? n.in0 : n.in1);
      const int C = x.shape[0], H = x.shape[1], W = x.shape[2];
      for (int c = 0; c < C; ++c)
        for (int oi = 0; oi < H / 2; ++oi) {
          const R* r0 = x.ptr() + (static_cast<std::size_t>(c) * H + 2 * oi) * W;
          const R* r1 = r0 + W;
          for (int oj = 0; oj < W / 2; ++oj) sig.push_back(detail::block_argmax(r0 + 2 * oj, r1 + 2 * oj));
        }
    }
  }
  return sig;
}

}  // namespace camfool
