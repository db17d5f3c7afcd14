#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "uir/errors.hpp"
#include "uir/tensor.hpp"

namespace uir::ad {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RowMat>;
using CMapM = Eigen::Map<const RowMat>;

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Nodes run their backward in reverse creation order, so a
// node's output gradient is complete before it propagates to parents. Exactly
// one backward() call per tape: composite objectives are composed into a
// single scalar root first.
class Tape {
 public:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool grad_alloc = false;
    std::function<void(Tape&, int)> backward;
  };

  Var leaf(Tensor value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, false, nullptr});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  Var make(Tensor value, bool requires_grad, std::function<void(Tape&, int)> back) {
    nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, false,
                          requires_grad ? std::move(back) : nullptr});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  const Tensor& value(int id) const { return nodes_[id].value; }
  bool needs_grad(Var v) const { return nodes_[v.id].requires_grad; }
  bool needs_grad(int id) const { return nodes_[id].requires_grad; }

  double scalar(Var v) const {
    const Tensor& t = value(v);
    require(t.numel() == 1, ErrorKind::ShapeMismatch, "scalar() on non-scalar node");
    return t.data[0];
  }

  Tensor& grad_buf(int id) {
    Node& n = nodes_[id];
    if (!n.grad_alloc) {
      n.grad = Tensor(n.value.dims);
      n.grad_alloc = true;
    }
    return n.grad;
  }

  const Tensor& grad_of(int id) { return grad_buf(id); }

  bool has_grad(int id) const { return nodes_[id].grad_alloc; }

  // Gradient w.r.t. a node; zero tensor if backward never reached it.
  Tensor gradient(Var v) const {
    const Node& n = nodes_[v.id];
    if (n.grad_alloc) return n.grad;
    return Tensor(n.value.dims);
  }

  void backward(Var root, double seed = 1.0) {
    require(!backward_done_, ErrorKind::InvalidConfig, "tape backward called twice");
    backward_done_ = true;
    const Node& r = nodes_[root.id];
    require(r.value.numel() == 1, ErrorKind::ShapeMismatch, "backward root must be scalar");
    if (!r.requires_grad) return;
    grad_buf(root.id).data[0] += seed;
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.grad_alloc && n.backward) n.backward(*this, i);
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// ---------------------------------------------------------------------------
// im2col machinery shared by conv2d and its gradient
// ---------------------------------------------------------------------------

namespace detail {

struct ConvGeom {
  int cin, h, w, cout, kh, kw, stride, dil, pad, ho, wo;
};

inline ConvGeom conv_geom(const Tensor& x, const Tensor& w, int stride, int dil, int pad) {
  require(x.ndim() == 3 && w.ndim() == 4, ErrorKind::ShapeMismatch,
          "conv2d expects 3D input, 4D kernel");
  ConvGeom g;
  g.cin = x.dim(0);
  g.h = x.dim(1);
  g.w = x.dim(2);
  g.cout = w.dim(0);
  g.kh = w.dim(2);
  g.kw = w.dim(3);
  require(w.dim(1) == g.cin, ErrorKind::ShapeMismatch,
          "conv2d channel mismatch: input " + shape_string(x.dims) + " kernel " +
              shape_string(w.dims));
  g.stride = stride;
  g.dil = dil;
  g.pad = pad;
  g.ho = (g.h + 2 * pad - dil * (g.kh - 1) - 1) / stride + 1;
  g.wo = (g.w + 2 * pad - dil * (g.kw - 1) - 1) / stride + 1;
  require(g.ho > 0 && g.wo > 0, ErrorKind::ShapeMismatch, "conv2d output collapses to zero");
  return g;
}

inline void im2col(const double* x, const ConvGeom& g, double* col) {
  int n = g.ho * g.wo;
  for (int ci = 0; ci < g.cin; ++ci) {
    const double* xp = x + static_cast<size_t>(ci) * g.h * g.w;
    for (int ky = 0; ky < g.kh; ++ky)
      for (int kx = 0; kx < g.kw; ++kx) {
        double* row = col + (static_cast<size_t>(ci) * g.kh * g.kw + ky * g.kw + kx) * n;
        for (int oy = 0; oy < g.ho; ++oy) {
          int iy = oy * g.stride - g.pad + ky * g.dil;
          if (iy < 0 || iy >= g.h) {
            std::fill(row + static_cast<size_t>(oy) * g.wo, row + static_cast<size_t>(oy + 1) * g.wo, 0.0);
            continue;
          }
          for (int ox = 0; ox < g.wo; ++ox) {
            int ix = ox * g.stride - g.pad + kx * g.dil;
            row[static_cast<size_t>(oy) * g.wo + ox] = (ix >= 0 && ix < g.w) ? xp[iy * g.w + ix] : 0.0;
          }
        }
      }
  }
}

inline void col2im_add(const double* col, const ConvGeom& g, double* dx) {
  int n = g.ho * g.wo;
  for (int ci = 0; ci < g.cin; ++ci) {
    double* xp = dx + static_cast<size_t>(ci) * g.h * g.w;
    for (int ky = 0; ky < g.kh; ++ky)
      for (int kx = 0; kx < g.kw; ++kx) {
        const double* row = col + (static_cast<size_t>(ci) * g.kh * g.kw + ky * g.kw + kx) * n;
        for (int oy = 0; oy < g.ho; ++oy) {
          int iy = oy * g.stride - g.pad + ky * g.dil;
          if (iy < 0 || iy >= g.h) continue;
          for (int ox = 0; ox < g.wo; ++ox) {
            int ix = ox * g.stride - g.pad + kx * g.dil;
            if (ix >= 0 && ix < g.w) xp[iy * g.w + ix] += row[static_cast<size_t>(oy) * g.wo + ox];
          }
        }
      }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

// 2-D convolution, NCHW single sample. pad<0 selects same padding (odd kernels).
inline Var conv2d(Tape& t, Var x, Var w, Var b, int stride = 1, int dil = 1, int pad = -1) {
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(w);
  const Tensor& bv = t.value(b);
  if (pad < 0) pad = dil * (wv.dim(2) - 1) / 2;
  detail::ConvGeom g = detail::conv_geom(xv, wv, stride, dil, pad);
  require(bv.numel() == g.cout, ErrorKind::ShapeMismatch, "conv2d bias size mismatch");

  const int K = g.cin * g.kh * g.kw;
  const int N = g.ho * g.wo;
  auto col = std::make_shared<std::vector<double>>(static_cast<size_t>(K) * N);
  detail::im2col(xv.ptr(), g, col->data());

  Tensor out({g.cout, g.ho, g.wo});
  {
    CMapM W(wv.ptr(), g.cout, K);
    CMapM C(col->data(), K, N);
    MapM O(out.ptr(), g.cout, N);
    O.noalias() = W * C;
  }
  for (int co = 0; co < g.cout; ++co) {
    double bias = bv.data[co];
    double* o = out.ptr() + static_cast<size_t>(co) * N;
    for (int i = 0; i < N; ++i) o[i] += bias;
  }

  bool req = t.needs_grad(x) || t.needs_grad(w) || t.needs_grad(b);
  int xid = x.id, wid = w.id, bid = b.id;
  return t.make(std::move(out), req, [xid, wid, bid, g, col, K, N](Tape& tp, int self) {
    const Tensor& gv = tp.grad_of(self);
    CMapM G(gv.ptr(), g.cout, N);
    if (tp.needs_grad(bid)) {
      Tensor& db = tp.grad_buf(bid);
      for (int co = 0; co < g.cout; ++co) {
        const double* gp = gv.ptr() + static_cast<size_t>(co) * N;
        double s = 0.0;
        for (int i = 0; i < N; ++i) s += gp[i];
        db.data[co] += s;
      }
    }
    if (tp.needs_grad(wid)) {
      Tensor& dw = tp.grad_buf(wid);
      MapM DW(dw.ptr(), g.cout, K);
      CMapM C(col->data(), K, N);
      DW.noalias() += G * C.transpose();
    }
    if (tp.needs_grad(xid)) {
      const Tensor& wv2 = tp.value(wid);
      CMapM W(wv2.ptr(), g.cout, K);
      std::vector<double> dcol(static_cast<size_t>(K) * N);
      MapM DC(dcol.data(), K, N);
      DC.noalias() = W.transpose() * G;
      detail::col2im_add(dcol.data(), g, tp.grad_buf(xid).ptr());
    }
  });
}

// Deformable 3x3 convolution (stride 1, same padding). `offsets` carries per
// kernel-tap (dy,dx) displacements as 2*9 channels; sampling is bilinear with
// zero outside the frame.
inline Var deform_conv2d(Tape& t, Var x, Var offsets, Var w, Var b) {
  const Tensor& xv = t.value(x);
  const Tensor& ov = t.value(offsets);
  const Tensor& wv = t.value(w);
  const Tensor& bv = t.value(b);
  require(wv.dim(2) == 3 && wv.dim(3) == 3, ErrorKind::ShapeMismatch, "deform_conv2d is 3x3 only");
  const int cin = xv.dim(0), h = xv.dim(1), wdt = xv.dim(2);
  const int cout = wv.dim(0);
  require(wv.dim(1) == cin, ErrorKind::ShapeMismatch, "deform_conv2d channel mismatch");
  require(ov.dim(0) == 18 && ov.dim(1) == h && ov.dim(2) == wdt, ErrorKind::ShapeMismatch,
          "deform_conv2d offset shape must be (18,H,W)");
  require(bv.numel() == cout, ErrorKind::ShapeMismatch, "deform_conv2d bias size mismatch");

  const int N = h * wdt;
  const int K = cin * 9;
  auto col = std::make_shared<std::vector<double>>(static_cast<size_t>(K) * N);

  auto sample = [&](const double* plane, double fy, double fx) -> double {
    int y0 = static_cast<int>(std::floor(fy));
    int x0 = static_cast<int>(std::floor(fx));
    double wy = fy - y0, wx = fx - x0;
    auto v = [&](int yy, int xx) -> double {
      if (yy < 0 || yy >= h || xx < 0 || xx >= wdt) return 0.0;
      return plane[yy * wdt + xx];
    };
    return (1 - wy) * ((1 - wx) * v(y0, x0) + wx * v(y0, x0 + 1)) +
           wy * ((1 - wx) * v(y0 + 1, x0) + wx * v(y0 + 1, x0 + 1));
  };

  for (int ci = 0; ci < cin; ++ci) {
    const double* plane = xv.ptr() + static_cast<size_t>(ci) * N;
    for (int j = 0; j < 9; ++j) {
      int ry = j / 3 - 1, rx = j % 3 - 1;
      const double* offy = ov.ptr() + static_cast<size_t>(2 * j) * N;
      const double* offx = ov.ptr() + static_cast<size_t>(2 * j + 1) * N;
      double* row = (*col).data() + (static_cast<size_t>(ci) * 9 + j) * N;
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < wdt; ++xx) {
          int i = y * wdt + xx;
          row[i] = sample(plane, y + ry + offy[i], xx + rx + offx[i]);
        }
    }
  }

  Tensor out({cout, h, wdt});
  {
    CMapM W(wv.ptr(), cout, K);
    CMapM C(col->data(), K, N);
    MapM O(out.ptr(), cout, N);
    O.noalias() = W * C;
  }
  for (int co = 0; co < cout; ++co) {
    double bias = bv.data[co];
    double* o = out.ptr() + static_cast<size_t>(co) * N;
    for (int i = 0; i < N; ++i) o[i] += bias;
  }

  bool req = t.needs_grad(x) || t.needs_grad(offsets) || t.needs_grad(w) || t.needs_grad(b);
  int xid = x.id, oid = offsets.id, wid = w.id, bid = b.id;
  return t.make(std::move(out), req,
                [xid, oid, wid, bid, col, cin, h, wdt, cout, K, N](Tape& tp, int self) {
    const Tensor& gv = tp.grad_of(self);
    CMapM G(gv.ptr(), cout, N);
    if (tp.needs_grad(bid)) {
      Tensor& db = tp.grad_buf(bid);
      for (int co = 0; co < cout; ++co) {
        const double* gp = gv.ptr() + static_cast<size_t>(co) * N;
        double s = 0.0;
        for (int i = 0; i < N; ++i) s += gp[i];
        db.data[co] += s;
      }
    }
    if (tp.needs_grad(wid)) {
      Tensor& dw = tp.grad_buf(wid);
      MapM DW(dw.ptr(), cout, K);
      CMapM C(col->data(), K, N);
      DW.noalias() += G * C.transpose();
    }
    if (!tp.needs_grad(xid) && !tp.needs_grad(oid)) return;

    const Tensor& wv2 = tp.value(wid);
    CMapM W(wv2.ptr(), cout, K);
    std::vector<double> dcol(static_cast<size_t>(K) * N);
    MapM DC(dcol.data(), K, N);
    DC.noalias() = W.transpose() * G;

    const Tensor& xv2 = tp.value(xid);
    const Tensor& ov2 = tp.value(oid);
    Tensor* dx = tp.needs_grad(xid) ? &tp.grad_buf(xid) : nullptr;
    Tensor* doff = tp.needs_grad(oid) ? &tp.grad_buf(oid) : nullptr;

    for (int ci = 0; ci < cin; ++ci) {
      const double* plane = xv2.ptr() + static_cast<size_t>(ci) * N;
      double* dplane = dx ? dx->ptr() + static_cast<size_t>(ci) * N : nullptr;
      for (int j = 0; j < 9; ++j) {
        int ry = j / 3 - 1, rx = j % 3 - 1;
        const double* offy = ov2.ptr() + static_cast<size_t>(2 * j) * N;
        const double* offx = ov2.ptr() + static_cast<size_t>(2 * j + 1) * N;
        double* doffy = doff ? doff->ptr() + static_cast<size_t>(2 * j) * N : nullptr;
        double* doffx = doff ? doff->ptr() + static_cast<size_t>(2 * j + 1) * N : nullptr;
        const double* drow = dcol.data() + (static_cast<size_t>(ci) * 9 + j) * N;
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < wdt; ++xx) {
            int i = y * wdt + xx;
            double gcol = drow[i];
            if (gcol == 0.0) continue;
            double fy = y + ry + offy[i];
            double fx = xx + rx + offx[i];
            int y0 = static_cast<int>(std::floor(fy));
            int x0 = static_cast<int>(std::floor(fx));
            double wy = fy - y0, wx = fx - x0;
            auto v = [&](int yy, int xc) -> double {
              if (yy < 0 || yy >= h || xc < 0 || xc >= wdt) return 0.0;
              return plane[yy * wdt + xc];
            };
            if (dplane) {
              auto scatter = [&](int yy, int xc, double wgt) {
                if (yy >= 0 && yy < h && xc >= 0 && xc < wdt) dplane[yy * wdt + xc] += gcol * wgt;
              };
              scatter(y0, x0, (1 - wy) * (1 - wx));
              scatter(y0, x0 + 1, (1 - wy) * wx);
              scatter(y0 + 1, x0, wy * (1 - wx));
              scatter(y0 + 1, x0 + 1, wy * wx);
            }
            if (doffy) {
              double v00 = v(y0, x0), v01 = v(y0, x0 + 1), v10 = v(y0 + 1, x0), v11 = v(y0 + 1, x0 + 1);
              double dsy = (1 - wx) * (v10 - v00) + wx * (v11 - v01);
              double dsx = (1 - wy) * (v01 - v00) + wy * (v11 - v10);
              doffy[i] += gcol * dsy;
              doffx[i] += gcol * dsx;
            }
          }
      }
    }
  });
}

inline Var lrelu(Tape& t, Var x, double slope = 0.2) {
  const Tensor& xv = t.value(x);
  Tensor out(xv.dims);
  for (size_t i = 0; i < out.data.size(); ++i) {
    double v = xv.data[i];
    out.data[i] = v > 0.0 ? v : slope * v;
  }
  int xid = x.id;
  return t.make(std::move(out), t.needs_grad(x), [xid, slope](Tape& tp, int self) {
    if (!tp.needs_grad(xid)) return;
    const Tensor& gv = tp.grad_of(self);
    const Tensor& xv2 = tp.value(xid);
    Tensor& dx = tp.grad_buf(xid);
    for (size_t i = 0; i < gv.data.size(); ++i)
      dx.data[i] += gv.data[i] * (xv2.data[i] > 0.0 ? 1.0 : slope);
  });
}

inline Var relu(Tape& t, Var x) { return lrelu(t, x, 0.0); }

inline Var sigmoid(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  Tensor out(xv.dims);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = 1.0 / (1.0 + std::exp(-xv.data[i]));
  int xid = x.id;
  return t.make(std::move(out), t.needs_grad(x), [xid](Tape& tp, int self) {
    if (!tp.needs_grad(xid)) return;
    const Tensor& gv = tp.grad_of(self);
    const Tensor& yv = tp.value(self);
    Tensor& dx = tp.grad_buf(xid);
    for (size_t i = 0; i < gv.data.size(); ++i)
      dx.data[i] += gv.data[i] * yv.data[i] * (1.0 - yv.data[i]);
  });
}

namespace detail {
inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.dims == b.dims, ErrorKind::ShapeMismatch,
          std::string(op) + ": " + shape_string(a.dims) + " vs " + shape_string(b.dims));
}
}  // namespace detail

inline Var add(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  detail::check_same_shape(av, bv, "add");
  Tensor out(av.dims);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = av.data[i] + bv.data[i];
  int aid = a.id, bid = b.id;
  return t.make(std::move(out), t.needs_grad(a) || t.needs_grad(b), [aid, bid](Tape& tp, int self) {
    const Tensor& gv = tp.grad_of(self);
    if (tp.needs_grad(aid)) {
      Tensor& da = tp.grad_buf(aid);
      for (size_t i = 0; i < gv.data.size(); ++i) da.data[i] += gv.data[i];
    }
    if (tp.needs_grad(bid)) {
      Tensor& db = tp.grad_buf(bid);
      for (size_t i = 0; i < gv.data.size(); ++i) db.data[i] += gv.data[i];
    }
  });
}

inline Var sub(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  detail::check_same_shape(av, bv, "sub");
  Tensor out(av.dims);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = av.data[i] - bv.data[i];
  int aid = a.id, bid = b.id;
  return t.make(std::move(out), t.needs_grad(a) || t.needs_grad(b), [aid, bid](Tape& tp, int self) {
    const Tensor& gv = tp.grad_of(self);
    if (tp.needs_grad(aid)) {
      Tensor& da = tp.grad_buf(aid);
      for (size_t i = 0; i < gv.data.size(); ++i) da.data[i] += gv.data[i];
    }
    if (tp.needs_grad(bid)) {
      Tensor& db = tp.grad_buf(bid);
      for (size_t i = 0; i < gv.data.size(); ++i) db.data[i] -= gv.data[i];
    }
  });
}

inline Var mul(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  detail::check_same_shape(av, bv, "mul");
  Tensor out(av.dims);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = av.data[i] * bv.data[i];
  int aid = a.id, bid = b.id;
  return t.make(std::move(out), t.needs_grad(a) || t.needs_grad(b), [aid, bid](Tape& tp, int self) {
    const Tensor& gv = tp.grad_of(self);
    const Tensor& av2 = tp.value(aid);
    const Tensor& bv2 = tp.value(bid);
    if (tp.needs_grad(aid)) {
      Tensor& da = tp.grad_buf(aid);
      for (size_t i = 0; i < gv.data.size(); ++i) da.data[i] += gv.data[i] * bv2.data[i];
    }
    if (tp.needs_grad(bid)) {
      Tensor& db = tp.grad_buf(bid);
      for (size_t i = 0; i < gv.data.size(); ++i) db.data[i] += gv.data[i] * av2.data[i];
    }
  });
}

inline Var div(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  detail::check_same_shape(av, bv, "div");
  Tensor out(av.dims);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = av.data[i] / bv.data[i];
  int aid = a.id, bid = b.id;
  return t.make(std::move(out), t.needs_grad(a) || t.needs_grad(b), [aid, bid](Tape& tp, int self) {
    const Tensor& gv = tp.grad_of(self);
    const Tensor& av2 = tp.value(aid);
    const Tensor& bv2 = tp.value(bid);
    if (tp.needs_grad(aid)) {
      Tensor& da = tp.grad_buf(aid);
      for (size_t i = 0; i < gv.data.size(); ++i) da.data[i] += gv.data[i] / bv2.data[i];
    }
    if (tp.needs_grad(bid)) {
      Tensor& db = tp.grad_buf(bid);
      for (size_t i = 0; i < gv.data.size(); ++i)
        db.data[i] -= gv.data[i] * av2.data[i] / (bv2.data[i] * bv2.data[i]);
    }
  });
}

inline Var scale(Tape& t, Var x, double c) {
  const Tensor& xv = t.value(x);
  Tensor out(xv.dims);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = c * xv.data[i];
  int xid = x.id;
  return t.make(std::move(out), t.needs_grad(x), [xid, c](Tape& tp, int self) {
    if (!tp.needs_grad(xid)) return;
    const Tensor& gv = tp.grad_of(self);
    Tensor& dx = tp.grad_buf(xid);
    for (size_t i = 0; i < gv.data.size(); ++i) dx.data[i] += c * gv.data[i];
  });
}

inline Var add_const(Tape& t, Var x, double c) {
  const Tensor& xv = t.value(x);
  Tensor out(xv.dims);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = xv.data[i] + c;
  int xid = x.id;
  return t.make(std::move(out), t.needs_grad(x), [xid](Tape& tp, int self) {
    if (!tp.needs_grad(xid)) return;
    const Tensor& gv = tp.grad_of(self);
    Tensor& dx = tp.grad_buf(xid);
    for (size_t i = 0; i < gv.data.size(); ++i) dx.data[i] += gv.data[i];
  });
}

// y[c,:,:] = x[c,:,:] * s[c]  with s of shape (C,1,1) or (C)
inline Var mul_channel(Tape& t, Var x, Var s) {
  const Tensor& xv = t.value(x);
  const Tensor& sv = t.value(s);
  int C = xv.dim(0);
  require(sv.numel() == C, ErrorKind::ShapeMismatch, "mul_channel scale size mismatch");
  size_t plane = static_cast<size_t>(xv.dim(1)) * xv.dim(2);
  Tensor out(xv.dims);
  for (int c = 0; c < C; ++c) {
    double sc = sv.data[c];
    const double* xp = xv.ptr() + c * plane;
    double* op = out.ptr() + c * plane;
    for (size_t i = 0; i < plane; ++i) op[i] = sc * xp[i];
  }
  int xid = x.id, sid = s.id;
  return t.make(std::move(out), t.needs_grad(x) || t.needs_grad(s),
                [xid, sid, C, plane](Tape& tp, int self) {
    const Tensor& gv = tp.grad_of(self);
    const Tensor& xv2 = tp.value(xid);
    const Tensor& sv2 = tp.value(sid);
    if (tp.needs_grad(xid)) {
      Tensor& dx = tp.grad_buf(xid);
      for (int c = 0; c < C; ++c) {
        double sc = sv2.data[c];
        const double* gp = gv.ptr() + c * plane;
        double* dp = dx.ptr() + c * plane;
        for (size_t i = 0; i < plane; ++i) dp[i] += sc * gp[i];
      }
    }
    if (tp.needs_grad(sid)) {
      Tensor& ds = tp.grad_buf(sid);
      for (int c = 0; c < C; ++c) {
        const double* gp = gv.ptr() + c * plane;
        const double* xp = xv2.ptr() + c * plane;
        double acc = 0.0;
        for (size_t i = 0; i < plane; ++i) acc += gp[i] * xp[i];
        ds.data[c] += acc;
      }
    }
  });
}

// y[c,:,:] = x[c,:,:] + v[c]
inline Var add_channel(Tape& t, Var x, Var v) {
  const Tensor& xv = t.value(x);
  const Tensor& vv = t.value(v);
  int C = xv.dim(0);
  require(vv.numel() == C, ErrorKind::ShapeMismatch, "add_channel bias size mismatch");
  size_t plane = static_cast<size_t>(xv.dim(1)) * xv.dim(2);
  Tensor out(xv.dims);
  for (int c = 0; c < C; ++c) {
    double bc = vv.data[c];
    const double* xp = xv.ptr() + c * plane;
    double* op = out.ptr() + c * plane;
    for (size_t i = 0; i < plane; ++i) op[i] = xp[i] + bc;
  }
  int xid = x.id, vid = v.id;
  return t.make(std::move(out), t.needs_grad(x) || t.needs_grad(v),
                [xid, vid, C, plane](Tape& tp, int self) {
    const Tensor& gv = tp.grad_of(self);
    if (tp.needs_grad(xid)) {
      Tensor& dx = tp.grad_buf(xid);
      for (size_t i = 0; i < gv.data.size(); ++i) dx.data[i] += gv.data[i];
    }
    if (tp.needs_grad(vid)) {
      Tensor& dv = tp.grad_buf(vid);
      for (int c = 0; c < C; ++c) {
        const double* gp = gv.ptr() + c * plane;
        double acc = 0.0;
        for (size_t i = 0; i < plane; ++i) acc += gp[i];
        dv.data[c] += acc;
      }
    }
  });
}

// Fixed per-channel affine (x - mean)/std style normalization with constants.
inline Var channel_affine(Tape& t, Var x, const std::vector<double>& scale_c,
                          const std::vector<double>& shift_c) {
  const Tensor& xv = t.value(x);
  int C = xv.dim(0);
  require(static_cast<int>(scale_c.size()) == C && static_cast<int>(shift_c.size()) == C,
          ErrorKind::ShapeMismatch, "channel_affine constant size mismatch");
  size_t plane = static_cast<size_t>(xv.dim(1)) * xv.dim(2);
  Tensor out(xv.dims);
  for (int c = 0; c < C; ++c) {
    const double* xp = xv.ptr() + c * plane;
    double* op = out.ptr() + c * plane;
    double sc = scale_c[c], sh = shift_c[c];
    for (size_t i = 0; i < plane; ++i) op[i] = sc * xp[i] + sh;
  }
  int xid = x.id;
  return t.make(std::move(out), t.needs_grad(x), [xid, scale_c, C, plane](Tape& tp, int self) {
    if (!tp.needs_grad(xid)) return;
    const Tensor& gv = tp.grad_of(self);
    Tensor& dx = tp.grad_buf(xid);
    for (int c = 0; c < C; ++c) {
      const double* gp = gv.ptr() + c * plane;
      double* dp = dx.ptr() + c * plane;
      double sc = scale_c[c];
      for (size_t i = 0; i < plane; ++i) dp[i] += sc * gp[i];
    }
  });
}

inline Var concat_channels(Tape& t, const std::vector<Var>& xs) {
  require(!xs.empty(), ErrorKind::ShapeMismatch, "concat of zero tensors");
  int H = t.value(xs[0]).dim(1), W = t.value(xs[0]).dim(2);
  int Ctot = 0;
  bool req = false;
  for (Var v : xs) {
    const Tensor& tv = t.value(v);
    require(tv.dim(1) == H && tv.dim(2) == W, ErrorKind::ShapeMismatch, "concat spatial mismatch");
    Ctot += tv.dim(0);
    req = req || t.needs_grad(v);
  }
  Tensor out({Ctot, H, W});
  size_t off = 0;
  for (Var v : xs) {
    const Tensor& tv = t.value(v);
    std::copy(tv.data.begin(), tv.data.end(), out.data.begin() + off);
    off += tv.data.size();
  }
  std::vector<int> ids(xs.size());
  for (size_t i = 0; i < xs.size(); ++i) ids[i] = xs[i].id;
  return t.make(std::move(out), req, [ids](Tape& tp, int self) {
    const Tensor& gv = tp.grad_of(self);
    size_t off = 0;
    for (int id : ids) {
      size_t n = tp.value(id).data.size();
      if (tp.needs_grad(id)) {
        Tensor& dx = tp.grad_buf(id);
        for (size_t i = 0; i < n; ++i) dx.data[i] += gv.data[off + i];
      }
      off += n;
    }
  });
}

inline Var slice_channels(Tape& t, Var x, int c0, int count) {
  const Tensor& xv = t.value(x);
  int H = xv.dim(1), W = xv.dim(2);
  require(c0 >= 0 && c0 + count <= xv.dim(0), ErrorKind::ShapeMismatch, "slice out of range");
  size_t plane = static_cast<size_t>(H) * W;
  Tensor out({count, H, W});
  std::copy(xv.data.begin() + c0 * plane, xv.data.begin() + (c0 + count) * plane, out.data.begin());
  int xid = x.id;
  return t.make(std::move(out), t.needs_grad(x), [xid, c0, plane](Tape& tp, int self) {
    if (!tp.needs_grad(xid)) return;
    const Tensor& gv = tp.grad_of(self);
    Tensor& dx = tp.grad_buf(xid);
    for (size_t i = 0; i < gv.data.size(); ++i) dx.data[c0 * plane + i] += gv.data[i];
  });
}

inline Var global_avg_pool(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  int C = xv.dim(0);
  size_t plane = static_cast<size_t>(xv.dim(1)) * xv.dim(2);
  Tensor out({C, 1, 1});
  for (int c = 0; c < C; ++c) {
    const double* xp = xv.ptr() + c * plane;
    double acc = 0.0;
    for (size_t i = 0; i < plane; ++i) acc += xp[i];
    out.data[c] = acc / static_cast<double>(plane);
  }
  int xid = x.id;
  return t.make(std::move(out), t.needs_grad(x), [xid, C, plane](Tape& tp, int self) {
    if (!tp.needs_grad(xid)) return;
    const Tensor& gv = tp.grad_of(self);
    Tensor& dx = tp.grad_buf(xid);
    for (int c = 0; c < C; ++c) {
      double g = gv.data[c] / static_cast<double>(plane);
      double* dp = dx.ptr() + c * plane;
      for (size_t i = 0; i < plane; ++i) dp[i] += g;
    }
  });
}

// 3x3 box average with valid-count normalization at the borders.
inline Var avg_pool3x3_same(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  Tensor out(xv.dims);
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx) {
        double acc = 0.0;
        int cnt = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            int yy = y + dy, xc = xx + dx;
            if (yy >= 0 && yy < H && xc >= 0 && xc < W) {
              acc += xv.at(c, yy, xc);
              ++cnt;
            }
          }
        out.at(c, y, xx) = acc / cnt;
      }
  int xid = x.id;
  return t.make(std::move(out), t.needs_grad(x), [xid, C, H, W](Tape& tp, int self) {
    if (!tp.needs_grad(xid)) return;
    const Tensor& gv = tp.grad_of(self);
    Tensor& dx = tp.grad_buf(xid);
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx) {
          int cnt = 0;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx2 = -1; dx2 <= 1; ++dx2) {
              int yy = y + dy, xc = xx + dx2;
              if (yy >= 0 && yy < H && xc >= 0 && xc < W) ++cnt;
            }
          double g = gv.at(c, y, xx) / cnt;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx2 = -1; dx2 <= 1; ++dx2) {
              int yy = y + dy, xc = xx + dx2;
              if (yy >= 0 && yy < H && xc >= 0 && xc < W) dx.at(c, yy, xc) += g;
            }
        }
  });
}

// 2x2 max pooling, stride 2. Ties resolve to the first maximal position.
inline Var maxpool2(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  require(H % 2 == 0 && W % 2 == 0, ErrorKind::ShapeMismatch, "maxpool2 needs even spatial size");
  int Ho = H / 2, Wo = W / 2;
  Tensor out({C, Ho, Wo});
  auto arg = std::make_shared<std::vector<int>>(static_cast<size_t>(C) * Ho * Wo);
  for (int c = 0; c < C; ++c)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        double best = -1e300;
        int bidx = 0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            int yy = 2 * oy + dy, xx = 2 * ox + dx;
            double v = xv.at(c, yy, xx);
            if (v > best) {
              best = v;
              bidx = yy * W + xx;
            }
          }
        out.at(c, oy, ox) = best;
        (*arg)[(static_cast<size_t>(c) * Ho + oy) * Wo + ox] = bidx;
      }
  int xid = x.id;
  size_t plane = static_cast<size_t>(H) * W;
  return t.make(std::move(out), t.needs_grad(x), [xid, arg, C, Ho, Wo, plane](Tape& tp, int self) {
    if (!tp.needs_grad(xid)) return;
    const Tensor& gv = tp.grad_of(self);
    Tensor& dx = tp.grad_buf(xid);
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < Ho * Wo; ++i) {
        size_t oi = static_cast<size_t>(c) * Ho * Wo + i;
        dx.data[c * plane + (*arg)[oi]] += gv.data[oi];
      }
  });
}

// Corner-aligned bilinear resize to (oh,ow); backward scatters the same weights.
inline Var bilinear_resize(Tape& t, Var x, int oh, int ow) {
  const Tensor& xv = t.value(x);
  int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  if (oh == H && ow == W) return x;
  Tensor out({C, oh, ow});
  double sy = oh > 1 ? static_cast<double>(H - 1) / (oh - 1) : 0.0;
  double sx = ow > 1 ? static_cast<double>(W - 1) / (ow - 1) : 0.0;
  for (int c = 0; c < C; ++c) {
    const double* src = xv.ptr() + static_cast<size_t>(c) * H * W;
    double* dst = out.ptr() + static_cast<size_t>(c) * oh * ow;
    for (int y = 0; y < oh; ++y) {
      double fy = y * sy;
      int y0 = static_cast<int>(fy);
      int y1 = std::min(y0 + 1, H - 1);
      double wy = fy - y0;
      for (int xx = 0; xx < ow; ++xx) {
        double fx = xx * sx;
        int x0 = static_cast<int>(fx);
        int x1 = std::min(x0 + 1, W - 1);
        double wx = fx - x0;
        dst[y * ow + xx] = (1 - wy) * ((1 - wx) * src[y0 * W + x0] + wx * src[y0 * W + x1]) +
                           wy * ((1 - wx) * src[y1 * W + x0] + wx * src[y1 * W + x1]);
      }
    }
  }
  int xid = x.id;
  return t.make(std::move(out), t.needs_grad(x), [xid, C, H, W, oh, ow, sy, sx](Tape& tp, int self) {
    if (!tp.needs_grad(xid)) return;
    const Tensor& gv = tp.grad_of(self);
    Tensor& dx = tp.grad_buf(xid);
    for (int c = 0; c < C; ++c) {
      const double* gp = gv.ptr() + static_cast<size_t>(c) * oh * ow;
      double* dp = dx.ptr() + static_cast<size_t>(c) * H * W;
      for (int y = 0; y < oh; ++y) {
        double fy = y * sy;
        int y0 = static_cast<int>(fy);
        int y1 = std::min(y0 + 1, H - 1);
        double wy = fy - y0;
        for (int xx = 0; xx < ow; ++xx) {
          double fx = xx * sx;
          int x0 = static_cast<int>(fx);
          int x1 = std::min(x0 + 1, W - 1);
          double wx = fx - x0;
          double g = gp[y * ow + xx];
          dp[y0 * W + x0] += g * (1 - wy) * (1 - wx);
          dp[y0 * W + x1] += g * (1 - wy) * wx;
          dp[y1 * W + x0] += g * wy * (1 - wx);
          dp[y1 * W + x1] += g * wy * wx;
        }
      }
    }
  });
}

// Average pooling onto a coarser (oh,ow) grid with rectangular cells.
inline Var adaptive_avg_pool(Tape& t, Var x, int oh, int ow) {
  const Tensor& xv = t.value(x);
  int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  if (oh >= H && ow >= W) return x;
  oh = std::min(oh, H);
  ow = std::min(ow, W);
  Tensor out({C, oh, ow});
  auto bounds = [](int i, int n, int o) {
    return std::pair<int, int>{(i * n) / o, ((i + 1) * n) / o};
  };
  for (int c = 0; c < C; ++c)
    for (int oy = 0; oy < oh; ++oy) {
      auto [y0, y1] = bounds(oy, H, oh);
      for (int ox = 0; ox < ow; ++ox) {
        auto [x0, x1] = bounds(ox, W, ow);
        double acc = 0.0;
        for (int y = y0; y < y1; ++y)
          for (int xx = x0; xx < x1; ++xx) acc += xv.at(c, y, xx);
        out.at(c, oy, ox) = acc / ((y1 - y0) * (x1 - x0));
      }
    }
  int xid = x.id;
  return t.make(std::move(out), t.needs_grad(x), [xid, C, H, W, oh, ow, bounds](Tape& tp, int self) {
    if (!tp.needs_grad(xid)) return;
    const Tensor& gv = tp.grad_of(self);
    Tensor& dx = tp.grad_buf(xid);
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < oh; ++oy) {
        auto [y0, y1] = bounds(oy, H, oh);
        for (int ox = 0; ox < ow; ++ox) {
          auto [x0, x1] = bounds(ox, W, ow);
          double g = gv.at(c, oy, ox) / ((y1 - y0) * (x1 - x0));
          for (int y = y0; y < y1; ++y)
            for (int xx = x0; xx < x1; ++xx) dx.at(c, y, xx) += g;
        }
      }
  });
}

inline Var reshape(Tape& t, Var x, std::vector<int> dims) {
  const Tensor& xv = t.value(x);
  require(Tensor::numel_of(dims) == xv.numel(), ErrorKind::ShapeMismatch, "reshape numel mismatch");
  Tensor out(dims);
  out.data = xv.data;
  int xid = x.id;
  return t.make(std::move(out), t.needs_grad(x), [xid](Tape& tp, int self) {
    if (!tp.needs_grad(xid)) return;
    const Tensor& gv = tp.grad_of(self);
    Tensor& dx = tp.grad_buf(xid);
    for (size_t i = 0; i < gv.data.size(); ++i) dx.data[i] += gv.data[i];
  });
}

// 2-D matrix product with optional transposes: C = opA(A) * opB(B).
inline Var matmul(Tape& t, Var a, Var b, bool trans_a = false, bool trans_b = false) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require(av.ndim() == 2 && bv.ndim() == 2, ErrorKind::ShapeMismatch, "matmul expects 2D tensors");
  int m = trans_a ? av.dim(1) : av.dim(0);
  int k = trans_a ? av.dim(0) : av.dim(1);
  int k2 = trans_b ? bv.dim(1) : bv.dim(0);
  int n = trans_b ? bv.dim(0) : bv.dim(1);
  require(k == k2, ErrorKind::ShapeMismatch, "matmul inner dim mismatch");
  Tensor out({m, n});
  {
    CMapM A(av.ptr(), av.dim(0), av.dim(1));
    CMapM B(bv.ptr(), bv.dim(0), bv.dim(1));
    MapM O(out.ptr(), m, n);
    if (!trans_a && !trans_b) O.noalias() = A * B;
    else if (trans_a && !trans_b) O.noalias() = A.transpose() * B;
    else if (!trans_a && trans_b) O.noalias() = A * B.transpose();
    else O.noalias() = A.transpose() * B.transpose();
  }
  int aid = a.id, bid = b.id;
  return t.make(std::move(out), t.needs_grad(a) || t.needs_grad(b),
                [aid, bid, trans_a, trans_b, m, n](Tape& tp, int self) {
    const Tensor& gv = tp.grad_of(self);
    const Tensor& av2 = tp.value(aid);
    const Tensor& bv2 = tp.value(bid);
    CMapM G(gv.ptr(), m, n);
    CMapM A(av2.ptr(), av2.dim(0), av2.dim(1));
    CMapM B(bv2.ptr(), bv2.dim(0), bv2.dim(1));
    if (tp.needs_grad(aid)) {
      MapM DA(tp.grad_buf(aid).ptr(), av2.dim(0), av2.dim(1));
      if (!trans_a && !trans_b) DA.noalias() += G * B.transpose();
      else if (trans_a && !trans_b) DA.noalias() += B * G.transpose();
      else if (!trans_a && trans_b) DA.noalias() += G * B;
      else DA.noalias() += B.transpose() * G.transpose();
    }
    if (tp.needs_grad(bid)) {
      MapM DB(tp.grad_buf(bid).ptr(), bv2.dim(0), bv2.dim(1));
      if (!trans_a && !trans_b) DB.noalias() += A.transpose() * G;
      else if (trans_a && !trans_b) DB.noalias() += A * G;
      else if (!trans_a && trans_b) DB.noalias() += G.transpose() * A;
      else DB.noalias() += G.transpose() * A.transpose();
    }
  });
}

inline Var softmax_rows(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  require(xv.ndim() == 2, ErrorKind::ShapeMismatch, "softmax_rows expects 2D tensor");
  int m = xv.dim(0), n = xv.dim(1);
  Tensor out(xv.dims);
  for (int r = 0; r < m; ++r) {
    const double* xp = xv.ptr() + static_cast<size_t>(r) * n;
    double* op = out.ptr() + static_cast<size_t>(r) * n;
    double mx = xp[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, xp[i]);
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
      op[i] = std::exp(xp[i] - mx);
      s += op[i];
    }
    for (int i = 0; i < n; ++i) op[i] /= s;
  }
  int xid = x.id;
  return t.make(std::move(out), t.needs_grad(x), [xid, m, n](Tape& tp, int self) {
    if (!tp.needs_grad(xid)) return;
    const Tensor& gv = tp.grad_of(self);
    const Tensor& yv = tp.value(self);
    Tensor& dx = tp.grad_buf(xid);
    for (int r = 0; r < m; ++r) {
      const double* gp = gv.ptr() + static_cast<size_t>(r) * n;
      const double* yp = yv.ptr() + static_cast<size_t>(r) * n;
      double* dp = dx.ptr() + static_cast<size_t>(r) * n;
      double dot = 0.0;
      for (int i = 0; i < n; ++i) dot += gp[i] * yp[i];
      for (int i = 0; i < n; ++i) dp[i] += yp[i] * (gp[i] - dot);
    }
  });
}

// Scalar node: mean |x - target| against a constant target.
inline Var mean_abs_diff(Tape& t, Var x, const Tensor& target) {
  const Tensor& xv = t.value(x);
  detail::check_same_shape(xv, target, "mean_abs_diff");
  double acc = 0.0;
  for (size_t i = 0; i < xv.data.size(); ++i) acc += std::fabs(xv.data[i] - target.data[i]);
  double n = static_cast<double>(xv.numel());
  Tensor out({1});
  out.data[0] = acc / n;
  int xid = x.id;
  auto tgt = std::make_shared<Tensor>(target);
  return t.make(std::move(out), t.needs_grad(x), [xid, tgt, n](Tape& tp, int self) {
    if (!tp.needs_grad(xid)) return;
    double g = tp.grad_of(self).data[0] / n;
    const Tensor& xv2 = tp.value(xid);
    Tensor& dx = tp.grad_buf(xid);
    for (size_t i = 0; i < xv2.data.size(); ++i) {
      double d = xv2.data[i] - tgt->data[i];
      dx.data[i] += g * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
    }
  });
}

// Scalar node: mean |a - b| between two tape nodes.
inline Var mean_abs_diff(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  detail::check_same_shape(av, bv, "mean_abs_diff");
  double acc = 0.0;
  for (size_t i = 0; i < av.data.size(); ++i) acc += std::fabs(av.data[i] - bv.data[i]);
  double n = static_cast<double>(av.numel());
  Tensor out({1});
  out.data[0] = acc / n;
  int aid = a.id, bid = b.id;
  return t.make(std::move(out), t.needs_grad(a) || t.needs_grad(b), [aid, bid, n](Tape& tp, int self) {
    double g = tp.grad_of(self).data[0] / n;
    const Tensor& av2 = tp.value(aid);
    const Tensor& bv2 = tp.value(bid);
    for (size_t i = 0; i < av2.data.size(); ++i) {
      double d = av2.data[i] - bv2.data[i];
      double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
      if (tp.needs_grad(aid)) tp.grad_buf(aid).data[i] += g * s;
      if (tp.needs_grad(bid)) tp.grad_buf(bid).data[i] -= g * s;
    }
  });
}

inline Var mean_all(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  double n = static_cast<double>(xv.numel());
  double acc = 0.0;
  for (double v : xv.data) acc += v;
  Tensor out({1});
  out.data[0] = acc / n;
  int xid = x.id;
  return t.make(std::move(out), t.needs_grad(x), [xid, n](Tape& tp, int self) {
    if (!tp.needs_grad(xid)) return;
    double g = tp.grad_of(self).data[0] / n;
    Tensor& dx = tp.grad_buf(xid);
    for (double& v : dx.data) v += g;
  });
}

}  // namespace uir::ad
