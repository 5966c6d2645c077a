#include "advrestore/autodiff.hpp"

#include <cmath>
#include <stdexcept>

namespace advrestore {

const Tensor& Var::value() const { return tape_->value(id_); }
const std::vector<int>& Var::shape() const { return tape_->value(id_).shape; }

int Tape::push(Tensor value, bool needs_grad, std::function<void(Tape&, const Tensor&)> backward) {
    nodes_.push_back(Node{std::move(value), needs_grad, std::move(backward)});
    return static_cast<int>(nodes_.size()) - 1;
}

void Tape::accumulate(int id, const Tensor& g) {
    Tensor& slot = grads_[static_cast<std::size_t>(id)];
    if (slot.empty()) {
        slot = g;
    } else {
        for (std::size_t i = 0; i < slot.data.size(); ++i) slot.data[i] += g.data[i];
    }
}

void Tape::check_owned(Var v, const char* op) const {
    if (!v.valid() || v.id() < 0 || v.id() >= static_cast<int>(nodes_.size())) {
        throw std::invalid_argument(std::string(op) + ": var does not belong to this tape");
    }
}

Var Tape::leaf(Tensor value) { return Var(this, push(std::move(value), true, nullptr)); }

Var Tape::constant(Tensor value) { return Var(this, push(std::move(value), false, nullptr)); }

Var Tape::add(Var a, Var b) {
    check_owned(a, "add");
    check_owned(b, "add");
    require_same_shape("add", a.value(), b.value());
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
    const int ia = a.id(), ib = b.id();
    const bool na = needs(a), nb = needs(b);
    return Var(this, push(std::move(out), na || nb, [ia, ib, na, nb](Tape& t, const Tensor& g) {
                   if (na) t.accumulate(ia, g);
                   if (nb) t.accumulate(ib, g);
               }));
}

Var Tape::sub(Var a, Var b) {
    check_owned(a, "sub");
    check_owned(b, "sub");
    require_same_shape("sub", a.value(), b.value());
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bv.data[i];
    const int ia = a.id(), ib = b.id();
    const bool na = needs(a), nb = needs(b);
    return Var(this, push(std::move(out), na || nb, [ia, ib, na, nb](Tape& t, const Tensor& g) {
                   if (na) t.accumulate(ia, g);
                   if (nb) {
                       Tensor neg = g;
                       for (double& v : neg.data) v = -v;
                       t.accumulate(ib, neg);
                   }
               }));
}

Var Tape::mul(Var a, Var b) {
    check_owned(a, "mul");
    check_owned(b, "mul");
    require_same_shape("mul", a.value(), b.value());
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
    const int ia = a.id(), ib = b.id();
    const bool na = needs(a), nb = needs(b);
    return Var(this, push(std::move(out), na || nb, [ia, ib, na, nb](Tape& t, const Tensor& g) {
                   if (na) {
                       Tensor ga = g;
                       const Tensor& bv2 = t.value(ib);
                       for (std::size_t i = 0; i < ga.data.size(); ++i) ga.data[i] *= bv2.data[i];
                       t.accumulate(ia, ga);
                   }
                   if (nb) {
                       Tensor gb = g;
                       const Tensor& av2 = t.value(ia);
                       for (std::size_t i = 0; i < gb.data.size(); ++i) gb.data[i] *= av2.data[i];
                       t.accumulate(ib, gb);
                   }
               }));
}

Var Tape::scale(Var a, double s) {
    check_owned(a, "scale");
    Tensor out = a.value();
    for (double& v : out.data) v *= s;
    const int ia = a.id();
    const bool na = needs(a);
    return Var(this, push(std::move(out), na, [ia, s, na](Tape& t, const Tensor& g) {
                   if (!na) return;
                   Tensor ga = g;
                   for (double& v : ga.data) v *= s;
                   t.accumulate(ia, ga);
               }));
}

Var Tape::add_scalar(Var a, double s) {
    check_owned(a, "add_scalar");
    Tensor out = a.value();
    for (double& v : out.data) v += s;
    const int ia = a.id();
    const bool na = needs(a);
    return Var(this, push(std::move(out), na, [ia, na](Tape& t, const Tensor& g) {
                   if (na) t.accumulate(ia, g);
               }));
}

Var Tape::silu(Var a) {
    check_owned(a, "silu");
    Tensor out = a.value();
    for (double& v : out.data) v = v / (1.0 + std::exp(-v));
    const int ia = a.id();
    const bool na = needs(a);
    return Var(this, push(std::move(out), na, [ia, na](Tape& t, const Tensor& g) {
                   if (!na) return;
                   const Tensor& x = t.value(ia);
                   Tensor ga = g;
                   for (std::size_t i = 0; i < ga.data.size(); ++i) {
                       const double s = 1.0 / (1.0 + std::exp(-x.data[i]));
                       ga.data[i] *= s * (1.0 + x.data[i] * (1.0 - s));
                   }
                   t.accumulate(ia, ga);
               }));
}

Var Tape::reshape(Var a, std::vector<int> shape) {
    check_owned(a, "reshape");
    if (shape_numel(shape) != a.value().numel()) {
        throw std::invalid_argument("reshape: cannot view " + shape_str(a.value().shape) + " as " +
                                    shape_str(shape));
    }
    Tensor out(shape, a.value().data);
    const int ia = a.id();
    const bool na = needs(a);
    std::vector<int> in_shape = a.value().shape;
    return Var(this, push(std::move(out), na, [ia, na, in_shape](Tape& t, const Tensor& g) {
                   if (na) t.accumulate(ia, Tensor(in_shape, g.data));
               }));
}

Var Tape::sum(Var a) {
    check_owned(a, "sum");
    double acc = 0.0;
    for (double v : a.value().data) acc += v;
    const int ia = a.id();
    const bool na = needs(a);
    std::vector<int> in_shape = a.value().shape;
    return Var(this, push(Tensor::scalar(acc), na, [ia, na, in_shape](Tape& t, const Tensor& g) {
                   if (na) t.accumulate(ia, Tensor::full(in_shape, g.data[0]));
               }));
}

Var Tape::matmul(Var a, Var b) {
    check_owned(a, "matmul");
    check_owned(b, "matmul");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.shape.size() != 2 || bv.shape.size() != 2 || av.shape[1] != bv.shape[0]) {
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(av.shape) + " x " +
                                    shape_str(bv.shape));
    }
    const int m = av.shape[0], k = av.shape[1], n = bv.shape[1];
    Tensor out = Tensor::zeros({m, n});
    for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
            const double aip = av.data[static_cast<std::size_t>(i * k + p)];
            if (aip == 0.0) continue;
            const std::size_t brow = static_cast<std::size_t>(p * n);
            const std::size_t orow = static_cast<std::size_t>(i * n);
            for (int j = 0; j < n; ++j) out.data[orow + j] += aip * bv.data[brow + j];
        }
    }
    const int ia = a.id(), ib = b.id();
    const bool na = needs(a), nb = needs(b);
    return Var(this, push(std::move(out), na || nb, [ia, ib, na, nb, m, k, n](Tape& t, const Tensor& g) {
                   const Tensor& av2 = t.value(ia);
                   const Tensor& bv2 = t.value(ib);
                   if (na) {
                       Tensor ga = Tensor::zeros({m, k});
                       for (int i = 0; i < m; ++i)
                           for (int j = 0; j < n; ++j) {
                               const double gij = g.data[static_cast<std::size_t>(i * n + j)];
                               if (gij == 0.0) continue;
                               for (int p = 0; p < k; ++p)
                                   ga.data[static_cast<std::size_t>(i * k + p)] +=
                                       gij * bv2.data[static_cast<std::size_t>(p * n + j)];
                           }
                       t.accumulate(ia, ga);
                   }
                   if (nb) {
                       Tensor gb = Tensor::zeros({k, n});
                       for (int i = 0; i < m; ++i)
                           for (int p = 0; p < k; ++p) {
                               const double aip = av2.data[static_cast<std::size_t>(i * k + p)];
                               if (aip == 0.0) continue;
                               for (int j = 0; j < n; ++j)
                                   gb.data[static_cast<std::size_t>(p * n + j)] +=
                                       aip * g.data[static_cast<std::size_t>(i * n + j)];
                           }
                       t.accumulate(ib, gb);
                   }
               }));
}

namespace {

struct ConvDims {
    int ic, ih, iw, oc, k, oh, ow;
};

ConvDims conv_dims(const char* op, const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
                   int pad, bool transposed) {
    if (x.shape.size() != 3 || w.shape.size() != 4) {
        throw std::invalid_argument(std::string(op) + ": expected x [C,H,W] and w [A,B,K,K], got " +
                                    shape_str(x.shape) + " and " + shape_str(w.shape));
    }
    if (w.shape[2] != w.shape[3]) {
        throw std::invalid_argument(std::string(op) + ": non-square kernel " + shape_str(w.shape));
    }
    if (stride < 1 || pad < 0) throw std::invalid_argument(std::string(op) + ": bad stride/pad");
    ConvDims d{};
    d.ic = x.shape[0];
    d.ih = x.shape[1];
    d.iw = x.shape[2];
    d.k = w.shape[2];
    if (!transposed) {
        if (w.shape[1] != d.ic) {
            throw std::invalid_argument(std::string(op) + ": input channels mismatch, x " + shape_str(x.shape) +
                                        " vs w " + shape_str(w.shape));
        }
        d.oc = w.shape[0];
        // floor semantics: trailing rows/cols that do not fit are dropped
        d.oh = (d.ih + 2 * pad - d.k) / stride + 1;
        d.ow = (d.iw + 2 * pad - d.k) / stride + 1;
        if (d.ih + 2 * pad - d.k < 0 || d.iw + 2 * pad - d.k < 0) {
            throw std::invalid_argument(std::string(op) + ": kernel larger than padded input, x " +
                                        shape_str(x.shape) + " w " + shape_str(w.shape) + " pad " +
                                        std::to_string(pad));
        }
    } else {
        if (w.shape[0] != d.ic) {
            throw std::invalid_argument(std::string(op) + ": input channels mismatch, x " + shape_str(x.shape) +
                                        " vs w " + shape_str(w.shape));
        }
        d.oc = w.shape[1];
        d.oh = (d.ih - 1) * stride - 2 * pad + d.k;
        d.ow = (d.iw - 1) * stride - 2 * pad + d.k;
        if (d.oh <= 0 || d.ow <= 0) {
            throw std::invalid_argument(std::string(op) + ": empty output, x " + shape_str(x.shape) + " w " +
                                        shape_str(w.shape));
        }
    }
    if (bias.shape != std::vector<int>{d.oc}) {
        throw std::invalid_argument(std::string(op) + ": bias " + shape_str(bias.shape) + " does not match " +
                                    std::to_string(d.oc) + " output channels");
    }
    return d;
}

// out[oc,oy,ox] += w[oc,ic,ky,kx] * x[ic, oy*s-p+ky, ox*s-p+kx]
// Output ranges with in-bounds input coordinates, hoisted out of the loops:
// lo = smallest index with i*s - p + k >= 0, hi = largest with i*s - p + k < n.
struct TapRange {
    int lo, hi;
};

TapRange tap_range(int n_in, int n_out, int stride, int pad, int k) {
    const int a = pad - k;  // i*s >= a  <=>  i >= a/s
    int lo = a <= 0 ? 0 : (a + stride - 1) / stride;
    int hi = (n_in - 1 + pad - k);
    hi = hi < 0 ? -1 : hi / stride;
    if (hi > n_out - 1) hi = n_out - 1;
    return {lo, hi};
}

void conv_forward(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad,
                  const ConvDims& d, Tensor& out) {
    for (int oc = 0; oc < d.oc; ++oc) {
        const double bv = bias.data[static_cast<std::size_t>(oc)];
        double* obase = out.data.data() + static_cast<std::ptrdiff_t>(oc) * d.oh * d.ow;
        for (int i = 0; i < d.oh * d.ow; ++i) obase[i] = bv;
    }
    for (int oc = 0; oc < d.oc; ++oc) {
        for (int ic = 0; ic < d.ic; ++ic) {
            const double* xbase = x.data.data() + static_cast<std::ptrdiff_t>(ic) * d.ih * d.iw;
            double* obase = out.data.data() + static_cast<std::ptrdiff_t>(oc) * d.oh * d.ow;
            for (int ky = 0; ky < d.k; ++ky) {
                const TapRange ry = tap_range(d.ih, d.oh, stride, pad, ky);
                for (int kx = 0; kx < d.k; ++kx) {
                    const double wv =
                        w.data[static_cast<std::size_t>(((oc * d.ic + ic) * d.k + ky) * d.k + kx)];
                    if (wv == 0.0) continue;
                    const TapRange rx = tap_range(d.iw, d.ow, stride, pad, kx);
                    for (int oy = ry.lo; oy <= ry.hi; ++oy) {
                        const double* xrow = xbase + (oy * stride - pad + ky) * d.iw;
                        double* orow = obase + oy * d.ow;
                        int ix = rx.lo * stride - pad + kx;
                        for (int ox = rx.lo; ox <= rx.hi; ++ox, ix += stride) {
                            orow[ox] += wv * xrow[ix];
                        }
                    }
                }
            }
        }
    }
}

// Shared gradient loops; NX/NW select which gradients are materialized.
template <bool NX, bool NW>
void conv_backward_impl(const Tensor& x, const Tensor& w, const Tensor& g, int stride, int pad,
                        const ConvDims& d, Tensor& gx, Tensor& gw) {
    for (int oc = 0; oc < d.oc; ++oc) {
        const double* gbase = g.data.data() + static_cast<std::ptrdiff_t>(oc) * d.oh * d.ow;
        for (int ic = 0; ic < d.ic; ++ic) {
            const double* xbase = x.data.data() + static_cast<std::ptrdiff_t>(ic) * d.ih * d.iw;
            double* gxbase = NX ? gx.data.data() + static_cast<std::ptrdiff_t>(ic) * d.ih * d.iw : nullptr;
            for (int ky = 0; ky < d.k; ++ky) {
                const TapRange ry = tap_range(d.ih, d.oh, stride, pad, ky);
                for (int kx = 0; kx < d.k; ++kx) {
                    const std::size_t widx =
                        static_cast<std::size_t>(((oc * d.ic + ic) * d.k + ky) * d.k + kx);
                    const double wv = w.data[widx];
                    const TapRange rx = tap_range(d.iw, d.ow, stride, pad, kx);
                    double wacc = 0.0;
                    for (int oy = ry.lo; oy <= ry.hi; ++oy) {
                        const int iy = oy * stride - pad + ky;
                        const double* grow = gbase + oy * d.ow;
                        const double* xrow = xbase + iy * d.iw;
                        double* gxrow = NX ? gxbase + iy * d.iw : nullptr;
                        int ix = rx.lo * stride - pad + kx;
                        for (int ox = rx.lo; ox <= rx.hi; ++ox, ix += stride) {
                            const double gv = grow[ox];
                            if constexpr (NW) wacc += gv * xrow[ix];
                            if constexpr (NX) gxrow[ix] += gv * wv;
                        }
                    }
                    if constexpr (NW) gw.data[widx] += wacc;
                }
            }
        }
    }
}

void conv_backward(const Tensor& x, const Tensor& w, const Tensor& g, int stride, int pad,
                   const ConvDims& d, bool nx, bool nw, Tensor& gx, Tensor& gw) {
    if (nx && nw) {
        conv_backward_impl<true, true>(x, w, g, stride, pad, d, gx, gw);
    } else if (nx) {
        conv_backward_impl<true, false>(x, w, g, stride, pad, d, gx, gw);
    } else if (nw) {
        conv_backward_impl<false, true>(x, w, g, stride, pad, d, gx, gw);
    }
}

}  // namespace

Var Tape::conv2d(Var x, Var w, Var bias, int stride, int pad) {
    check_owned(x, "conv2d");
    check_owned(w, "conv2d");
    check_owned(bias, "conv2d");
    const ConvDims d = conv_dims("conv2d", x.value(), w.value(), bias.value(), stride, pad, false);
    Tensor out = Tensor::zeros({d.oc, d.oh, d.ow});
    conv_forward(x.value(), w.value(), bias.value(), stride, pad, d, out);
    const int ix = x.id(), iw = w.id(), ib = bias.id();
    const bool nx = needs(x), nw = needs(w), nb = needs(bias);
    return Var(this, push(std::move(out), nx || nw || nb,
                          [ix, iw, ib, nx, nw, nb, stride, pad, d](Tape& t, const Tensor& g) {
                              const Tensor& xv = t.value(ix);
                              const Tensor& wv = t.value(iw);
                              if (nb) {
                                  Tensor gb = Tensor::zeros({d.oc});
                                  for (int oc = 0; oc < d.oc; ++oc) {
                                      const double* grow =
                                          g.data.data() + static_cast<std::ptrdiff_t>(oc) * d.oh * d.ow;
                                      double acc = 0.0;
                                      for (int i = 0; i < d.oh * d.ow; ++i) acc += grow[i];
                                      gb.data[static_cast<std::size_t>(oc)] = acc;
                                  }
                                  t.accumulate(ib, gb);
                              }
                              Tensor gx = nx ? Tensor::zeros(xv.shape) : Tensor();
                              Tensor gw = nw ? Tensor::zeros(wv.shape) : Tensor();
                              conv_backward(xv, wv, g, stride, pad, d, nx, nw, gx, gw);
                              if (nx) t.accumulate(ix, gx);
                              if (nw) t.accumulate(iw, gw);
                          }));
}

// out[oc, iy*s-p+ky, ix*s-p+kx] += w[ic,oc,ky,kx] * x[ic,iy,ix]
Var Tape::conv2d_transpose(Var x, Var w, Var bias, int stride, int pad) {
    check_owned(x, "conv2d_transpose");
    check_owned(w, "conv2d_transpose");
    check_owned(bias, "conv2d_transpose");
    const ConvDims d =
        conv_dims("conv2d_transpose", x.value(), w.value(), bias.value(), stride, pad, true);
    Tensor out = Tensor::zeros({d.oc, d.oh, d.ow});
    const Tensor& xv0 = x.value();
    const Tensor& wv0 = w.value();
    for (int oc = 0; oc < d.oc; ++oc) {
        const double bv = bias.value().data[static_cast<std::size_t>(oc)];
        double* obase = out.data.data() + static_cast<std::ptrdiff_t>(oc) * d.oh * d.ow;
        for (int i = 0; i < d.oh * d.ow; ++i) obase[i] = bv;
    }
    for (int ic = 0; ic < d.ic; ++ic) {
        const double* xbase = xv0.data.data() + static_cast<std::ptrdiff_t>(ic) * d.ih * d.iw;
        for (int oc = 0; oc < d.oc; ++oc) {
            double* obase = out.data.data() + static_cast<std::ptrdiff_t>(oc) * d.oh * d.ow;
            for (int ky = 0; ky < d.k; ++ky) {
                const TapRange ry = tap_range(d.oh, d.ih, stride, pad, ky);
                for (int kx = 0; kx < d.k; ++kx) {
                    const double wv =
                        wv0.data[static_cast<std::size_t>(((ic * d.oc + oc) * d.k + ky) * d.k + kx)];
                    if (wv == 0.0) continue;
                    const TapRange rx = tap_range(d.ow, d.iw, stride, pad, kx);
                    for (int iy = ry.lo; iy <= ry.hi; ++iy) {
                        const double* xrow = xbase + iy * d.iw;
                        double* orow = obase + (iy * stride - pad + ky) * d.ow;
                        int ox = rx.lo * stride - pad + kx;
                        for (int ixx = rx.lo; ixx <= rx.hi; ++ixx, ox += stride) {
                            orow[ox] += wv * xrow[ixx];
                        }
                    }
                }
            }
        }
    }
    const int ix = x.id(), iw = w.id(), ib = bias.id();
    const bool nx = needs(x), nw = needs(w), nb = needs(bias);
    return Var(this, push(std::move(out), nx || nw || nb,
                          [ix, iw, ib, nx, nw, nb, stride, pad, d](Tape& t, const Tensor& g) {
                              const Tensor& xv = t.value(ix);
                              const Tensor& wv = t.value(iw);
                              if (nb) {
                                  Tensor gb = Tensor::zeros({d.oc});
                                  for (int oc = 0; oc < d.oc; ++oc) {
                                      const double* grow =
                                          g.data.data() + static_cast<std::ptrdiff_t>(oc) * d.oh * d.ow;
                                      double acc = 0.0;
                                      for (int i = 0; i < d.oh * d.ow; ++i) acc += grow[i];
                                      gb.data[static_cast<std::size_t>(oc)] = acc;
                                  }
                                  t.accumulate(ib, gb);
                              }
                              Tensor gx = nx ? Tensor::zeros(xv.shape) : Tensor();
                              Tensor gw = nw ? Tensor::zeros(wv.shape) : Tensor();
                              // dx[ic,iy,ix] = sum w[ic,oc,ky,kx] * g[oc, iy*s-p+ky, ix*s-p+kx]
                              // dw[ic,oc,ky,kx] = sum x[ic,iy,ix] * g[oc, ...]
                              for (int ic = 0; ic < d.ic; ++ic) {
                                  const double* xbase =
                                      xv.data.data() + static_cast<std::ptrdiff_t>(ic) * d.ih * d.iw;
                                  double* gxbase =
                                      nx ? gx.data.data() + static_cast<std::ptrdiff_t>(ic) * d.ih * d.iw
                                         : nullptr;
                                  for (int oc = 0; oc < d.oc; ++oc) {
                                      const double* gbase =
                                          g.data.data() + static_cast<std::ptrdiff_t>(oc) * d.oh * d.ow;
                                      for (int ky = 0; ky < d.k; ++ky) {
                                          const TapRange ry = tap_range(d.oh, d.ih, stride, pad, ky);
                                          for (int kx = 0; kx < d.k; ++kx) {
                                              const std::size_t widx = static_cast<std::size_t>(
                                                  ((ic * d.oc + oc) * d.k + ky) * d.k + kx);
                                              const double wval = wv.data[widx];
                                              const TapRange rx = tap_range(d.ow, d.iw, stride, pad, kx);
                                              double wacc = 0.0;
                                              for (int iy = ry.lo; iy <= ry.hi; ++iy) {
                                                  const double* grow =
                                                      gbase + (iy * stride - pad + ky) * d.ow;
                                                  const double* xrow = xbase + iy * d.iw;
                                                  double* gxrow = nx ? gxbase + iy * d.iw : nullptr;
                                                  int ox = rx.lo * stride - pad + kx;
                                                  for (int ixx = rx.lo; ixx <= rx.hi;
                                                       ++ixx, ox += stride) {
                                                      const double gv = grow[ox];
                                                      if (nw) wacc += gv * xrow[ixx];
                                                      if (nx) gxrow[ixx] += gv * wval;
                                                  }
                                              }
                                              if (nw) gw.data[widx] += wacc;
                                          }
                                      }
                                  }
                              }
                              if (nx) t.accumulate(ix, gx);
                              if (nw) t.accumulate(iw, gw);
                          }));
}

Var Tape::bias_add(Var x, Var bias) {
    check_owned(x, "bias_add");
    check_owned(bias, "bias_add");
    const Tensor& xv = x.value();
    const Tensor& bv = bias.value();
    if (xv.shape.size() != 3 || bv.shape != std::vector<int>{xv.shape[0]}) {
        throw std::invalid_argument("bias_add: x " + shape_str(xv.shape) + " incompatible with bias " +
                                    shape_str(bv.shape));
    }
    const int c = xv.shape[0], h = xv.shape[1], w = xv.shape[2];
    Tensor out = xv;
    for (int ci = 0; ci < c; ++ci) {
        const double b = bv.data[static_cast<std::size_t>(ci)];
        for (int i = 0; i < h * w; ++i) out.data[static_cast<std::size_t>(ci * h * w + i)] += b;
    }
    const int ix = x.id(), ib = bias.id();
    const bool nx = needs(x), nb = needs(bias);
    return Var(this, push(std::move(out), nx || nb, [ix, ib, nx, nb, c, h, w](Tape& t, const Tensor& g) {
                   if (nx) t.accumulate(ix, g);
                   if (nb) {
                       Tensor gb = Tensor::zeros({c});
                       for (int ci = 0; ci < c; ++ci) {
                           double acc = 0.0;
                           for (int i = 0; i < h * w; ++i)
                               acc += g.data[static_cast<std::size_t>(ci * h * w + i)];
                           gb.data[static_cast<std::size_t>(ci)] = acc;
                       }
                       t.accumulate(ib, gb);
                   }
               }));
}

// Concatenation along the channel axis, which sits third from the end:
// [C,H,W] rank 3 or [N,C,H,W] rank 4.
Var Tape::concat_channels(Var a, Var b) {
    check_owned(a, "concat_channels");
    check_owned(b, "concat_channels");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const std::size_t rank = av.shape.size();
    bool compatible = rank == bv.shape.size() && (rank == 3 || rank == 4);
    if (compatible) {
        for (std::size_t d = 0; d < rank; ++d) {
            if (d == rank - 3) continue;
            compatible = compatible && av.shape[d] == bv.shape[d];
        }
    }
    if (!compatible) {
        throw std::invalid_argument("concat_channels: incompatible shapes " + shape_str(av.shape) + " and " +
                                    shape_str(bv.shape));
    }
    const int axis = static_cast<int>(rank) - 3;
    const int outer = axis == 0 ? 1 : av.shape[0];
    const int ca = av.shape[static_cast<std::size_t>(axis)], cb = bv.shape[static_cast<std::size_t>(axis)];
    const int inner = av.shape[rank - 2] * av.shape[rank - 1];
    std::vector<int> out_shape = av.shape;
    out_shape[static_cast<std::size_t>(axis)] = ca + cb;
    Tensor out = Tensor::zeros(out_shape);
    for (int o = 0; o < outer; ++o) {
        std::copy_n(av.data.begin() + static_cast<std::ptrdiff_t>(o) * ca * inner, ca * inner,
                    out.data.begin() + static_cast<std::ptrdiff_t>(o) * (ca + cb) * inner);
        std::copy_n(bv.data.begin() + static_cast<std::ptrdiff_t>(o) * cb * inner, cb * inner,
                    out.data.begin() + static_cast<std::ptrdiff_t>(o) * (ca + cb) * inner + ca * inner);
    }
    const int ia = a.id(), ib = b.id();
    const bool na = needs(a), nb = needs(b);
    std::vector<int> ash = av.shape, bsh = bv.shape;
    return Var(this, push(std::move(out), na || nb,
                          [ia, ib, na, nb, ash, bsh, outer, ca, cb, inner](Tape& t, const Tensor& g) {
                              if (na) {
                                  Tensor ga = Tensor::zeros(ash);
                                  for (int o = 0; o < outer; ++o) {
                                      std::copy_n(g.data.begin() +
                                                      static_cast<std::ptrdiff_t>(o) * (ca + cb) * inner,
                                                  ca * inner,
                                                  ga.data.begin() + static_cast<std::ptrdiff_t>(o) * ca * inner);
                                  }
                                  t.accumulate(ia, ga);
                              }
                              if (nb) {
                                  Tensor gb = Tensor::zeros(bsh);
                                  for (int o = 0; o < outer; ++o) {
                                      std::copy_n(g.data.begin() +
                                                      static_cast<std::ptrdiff_t>(o) * (ca + cb) * inner +
                                                      ca * inner,
                                                  cb * inner,
                                                  gb.data.begin() + static_cast<std::ptrdiff_t>(o) * cb * inner);
                                  }
                                  t.accumulate(ib, gb);
                              }
                          }));
}

Var Tape::group_norm(Var x, Var gamma, Var beta, int groups) {
    check_owned(x, "group_norm");
    check_owned(gamma, "group_norm");
    check_owned(beta, "group_norm");
    const Tensor& xv = x.value();
    if (xv.shape.size() != 3) {
        throw std::invalid_argument("group_norm: expected [C,H,W], got " + shape_str(xv.shape));
    }
    const int c = xv.shape[0], h = xv.shape[1], w = xv.shape[2];
    if (groups < 1 || c % groups != 0) {
        throw std::invalid_argument("group_norm: channels " + std::to_string(c) + " not divisible by groups " +
                                    std::to_string(groups));
    }
    if (gamma.value().shape != std::vector<int>{c} || beta.value().shape != std::vector<int>{c}) {
        throw std::invalid_argument("group_norm: gamma/beta must be [C]=[" + std::to_string(c) + "], got " +
                                    shape_str(gamma.value().shape) + " and " + shape_str(beta.value().shape));
    }
    constexpr double kEps = 1e-5;
    const int cpg = c / groups;
    const int gsize = cpg * h * w;
    std::vector<double> mean(static_cast<std::size_t>(groups)), inv_std(static_cast<std::size_t>(groups));
    Tensor xhat = Tensor::zeros(xv.shape);
    Tensor out = Tensor::zeros(xv.shape);
    const Tensor& gv = gamma.value();
    const Tensor& bv = beta.value();
    for (int g0 = 0; g0 < groups; ++g0) {
        const std::size_t base = static_cast<std::size_t>(g0 * gsize);
        double mu = 0.0;
        for (int i = 0; i < gsize; ++i) mu += xv.data[base + static_cast<std::size_t>(i)];
        mu /= gsize;
        double var = 0.0;
        for (int i = 0; i < gsize; ++i) {
            const double dlt = xv.data[base + static_cast<std::size_t>(i)] - mu;
            var += dlt * dlt;
        }
        var /= gsize;
        mean[static_cast<std::size_t>(g0)] = mu;
        inv_std[static_cast<std::size_t>(g0)] = 1.0 / std::sqrt(var + kEps);
    }
    for (int ci = 0; ci < c; ++ci) {
        const int g0 = ci / cpg;
        const double mu = mean[static_cast<std::size_t>(g0)];
        const double is = inv_std[static_cast<std::size_t>(g0)];
        const double ga = gv.data[static_cast<std::size_t>(ci)];
        const double be = bv.data[static_cast<std::size_t>(ci)];
        for (int i = 0; i < h * w; ++i) {
            const std::size_t idx = static_cast<std::size_t>(ci * h * w + i);
            const double xh = (xv.data[idx] - mu) * is;
            xhat.data[idx] = xh;
            out.data[idx] = ga * xh + be;
        }
    }
    const int ix = x.id(), ig = gamma.id(), ibt = beta.id();
    const bool nx = needs(x), ng = needs(gamma), nb = needs(beta);
    return Var(this, push(std::move(out), nx || ng || nb,
                          [ix, ig, ibt, nx, ng, nb, groups, cpg, c, h, w, gsize,
                           xhat = std::move(xhat), inv_std = std::move(inv_std)](
                              Tape& t, const Tensor& g) {
                              const Tensor& gv2 = t.value(ig);
                              if (ng || nb) {
                                  Tensor ggam = Tensor::zeros({c});
                                  Tensor gbet = Tensor::zeros({c});
                                  for (int ci = 0; ci < c; ++ci) {
                                      double sg = 0.0, sb = 0.0;
                                      for (int i = 0; i < h * w; ++i) {
                                          const std::size_t idx = static_cast<std::size_t>(ci * h * w + i);
                                          sg += g.data[idx] * xhat.data[idx];
                                          sb += g.data[idx];
                                      }
                                      ggam.data[static_cast<std::size_t>(ci)] = sg;
                                      gbet.data[static_cast<std::size_t>(ci)] = sb;
                                  }
                                  if (ng) t.accumulate(ig, ggam);
                                  if (nb) t.accumulate(ibt, gbet);
                              }
                              if (!nx) return;
                              Tensor gx = Tensor::zeros({c, h, w});
                              for (int g0 = 0; g0 < groups; ++g0) {
                                  // ghat = upstream * gamma (per channel); then the usual
                                  // normalization backward within the group.
                                  double mean_gh = 0.0, mean_ghx = 0.0;
                                  const int c0 = g0 * cpg;
                                  for (int cc = 0; cc < cpg; ++cc) {
                                      const int ci = c0 + cc;
                                      const double ga = gv2.data[static_cast<std::size_t>(ci)];
                                      for (int i = 0; i < h * w; ++i) {
                                          const std::size_t idx = static_cast<std::size_t>(ci * h * w + i);
                                          const double gh = g.data[idx] * ga;
                                          mean_gh += gh;
                                          mean_ghx += gh * xhat.data[idx];
                                      }
                                  }
                                  mean_gh /= gsize;
                                  mean_ghx /= gsize;
                                  const double is = inv_std[static_cast<std::size_t>(g0)];
                                  for (int cc = 0; cc < cpg; ++cc) {
                                      const int ci = c0 + cc;
                                      const double ga = gv2.data[static_cast<std::size_t>(ci)];
                                      for (int i = 0; i < h * w; ++i) {
                                          const std::size_t idx = static_cast<std::size_t>(ci * h * w + i);
                                          const double gh = g.data[idx] * ga;
                                          gx.data[idx] = is * (gh - mean_gh - xhat.data[idx] * mean_ghx);
                                      }
                                  }
                              }
                              t.accumulate(ix, gx);
                          }));
}

Var Tape::upsample_nearest(Var x, int factor) {
    check_owned(x, "upsample_nearest");
    const Tensor& xv = x.value();
    if (xv.shape.size() != 3 || factor < 1) {
        throw std::invalid_argument("upsample_nearest: expected [C,H,W] and factor>=1, got " +
                                    shape_str(xv.shape));
    }
    const int c = xv.shape[0], h = xv.shape[1], w = xv.shape[2];
    Tensor out = Tensor::zeros({c, h * factor, w * factor});
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < h * factor; ++y)
            for (int xx = 0; xx < w * factor; ++xx) out.at(ci, y, xx) = xv.at(ci, y / factor, xx / factor);
    const int ix = x.id();
    const bool nx = needs(x);
    return Var(this, push(std::move(out), nx, [ix, nx, c, h, w, factor](Tape& t, const Tensor& g) {
                   if (!nx) return;
                   Tensor gx = Tensor::zeros({c, h, w});
                   for (int ci = 0; ci < c; ++ci)
                       for (int y = 0; y < h * factor; ++y)
                           for (int xx = 0; xx < w * factor; ++xx)
                               gx.at(ci, y / factor, xx / factor) += g.at(ci, y, xx);
                   t.accumulate(ix, gx);
               }));
}

Var Tape::downsample_nearest(Var x, int factor) {
    check_owned(x, "downsample_nearest");
    const Tensor& xv = x.value();
    if (xv.shape.size() != 3 || factor < 1 || xv.shape[1] % factor != 0 || xv.shape[2] % factor != 0) {
        throw std::invalid_argument("downsample_nearest: shape " + shape_str(xv.shape) +
                                    " not divisible by factor " + std::to_string(factor));
    }
    const int c = xv.shape[0], h = xv.shape[1] / factor, w = xv.shape[2] / factor;
    Tensor out = Tensor::zeros({c, h, w});
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) out.at(ci, y, xx) = xv.at(ci, y * factor, xx * factor);
    const int ix = x.id();
    const bool nx = needs(x);
    std::vector<int> in_shape = xv.shape;
    return Var(this, push(std::move(out), nx, [ix, nx, c, h, w, factor, in_shape](Tape& t, const Tensor& g) {
                   if (!nx) return;
                   Tensor gx = Tensor::zeros(in_shape);
                   for (int ci = 0; ci < c; ++ci)
                       for (int y = 0; y < h; ++y)
                           for (int xx = 0; xx < w; ++xx) gx.at(ci, y * factor, xx * factor) = g.at(ci, y, xx);
                   t.accumulate(ix, gx);
               }));
}

Var Tape::mse(Var a, Var b) {
    check_owned(a, "mse");
    check_owned(b, "mse");
    require_same_shape("mse", a.value(), b.value());
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const double n = static_cast<double>(av.numel());
    double acc = 0.0;
    for (std::size_t i = 0; i < av.data.size(); ++i) {
        const double dlt = av.data[i] - bv.data[i];
        acc += dlt * dlt;
    }
    const int ia = a.id(), ib = b.id();
    const bool na = needs(a), nb = needs(b);
    return Var(this, push(Tensor::scalar(acc / n), na || nb, [ia, ib, na, nb, n](Tape& t, const Tensor& g) {
                   const Tensor& av2 = t.value(ia);
                   const Tensor& bv2 = t.value(ib);
                   const double s = 2.0 * g.data[0] / n;
                   if (na) {
                       Tensor ga = Tensor::zeros(av2.shape);
                       for (std::size_t i = 0; i < ga.data.size(); ++i)
                           ga.data[i] = s * (av2.data[i] - bv2.data[i]);
                       t.accumulate(ia, ga);
                   }
                   if (nb) {
                       Tensor gb = Tensor::zeros(bv2.shape);
                       for (std::size_t i = 0; i < gb.data.size(); ++i)
                           gb.data[i] = -s * (av2.data[i] - bv2.data[i]);
                       t.accumulate(ib, gb);
                   }
               }));
}

Var Tape::softmax_cross_entropy(Var logits, int label) {
    check_owned(logits, "softmax_cross_entropy");
    const Tensor& lv = logits.value();
    const int n = static_cast<int>(lv.numel());
    if (label < 0 || label >= n) {
        throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(label) +
                                    " out of range for " + shape_str(lv.shape));
    }
    double mx = lv.data[0];
    for (double v : lv.data) mx = std::max(mx, v);
    double lse = 0.0;
    for (double v : lv.data) lse += std::exp(v - mx);
    lse = mx + std::log(lse);
    const double loss = lse - lv.data[static_cast<std::size_t>(label)];
    const int il = logits.id();
    const bool nl = needs(logits);
    return Var(this, push(Tensor::scalar(loss), nl, [il, nl, label, lse](Tape& t, const Tensor& g) {
                   if (!nl) return;
                   const Tensor& lv2 = t.value(il);
                   Tensor gl = Tensor::zeros(lv2.shape);
                   for (std::size_t i = 0; i < gl.data.size(); ++i)
                       gl.data[i] = g.data[0] * std::exp(lv2.data[i] - lse);
                   gl.data[static_cast<std::size_t>(label)] -= g.data[0];
                   t.accumulate(il, gl);
               }));
}

Var Tape::clamp(Var x, double lo, double hi, ClampGrad mode) {
    check_owned(x, "clamp");
    const Tensor& xv = x.value();
    Tensor out = xv;
    for (double& v : out.data) v = v < lo ? lo : (v > hi ? hi : v);
    const int ix = x.id();
    const bool nx = needs(x);
    return Var(this, push(std::move(out), nx, [ix, nx, lo, hi, mode](Tape& t, const Tensor& g) {
                   if (!nx) return;
                   if (mode == ClampGrad::StraightThrough) {
                       t.accumulate(ix, g);
                       return;
                   }
                   const Tensor& xv2 = t.value(ix);
                   Tensor gx = g;
                   for (std::size_t i = 0; i < gx.data.size(); ++i) {
                       if (xv2.data[i] < lo || xv2.data[i] > hi) gx.data[i] = 0.0;
                   }
                   t.accumulate(ix, gx);
               }));
}

Var Tape::clamp_box(Var x, const Tensor& lo, const Tensor& hi, ClampGrad mode) {
    check_owned(x, "clamp_box");
    const Tensor& xv = x.value();
    require_same_shape("clamp_box", xv, lo);
    require_same_shape("clamp_box", xv, hi);
    Tensor out = xv;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] = out.data[i] < lo.data[i] ? lo.data[i] : (out.data[i] > hi.data[i] ? hi.data[i] : out.data[i]);
    }
    const int ix = x.id();
    const bool nx = needs(x);
    return Var(this, push(std::move(out), nx, [ix, nx, lo, hi, mode](Tape& t, const Tensor& g) {
                   if (!nx) return;
                   if (mode == ClampGrad::StraightThrough) {
                       t.accumulate(ix, g);
                       return;
                   }
                   const Tensor& xv2 = t.value(ix);
                   Tensor gx = g;
                   for (std::size_t i = 0; i < gx.data.size(); ++i) {
                       if (xv2.data[i] < lo.data[i] || xv2.data[i] > hi.data[i]) gx.data[i] = 0.0;
                   }
                   t.accumulate(ix, gx);
               }));
}

Var Tape::l2_normalize(Var v) {
    check_owned(v, "l2_normalize");
    const Tensor& xv = v.value();
    double norm_sq = 0.0;
    for (double x : xv.data) norm_sq += x * x;
    const double norm = std::sqrt(norm_sq);
    if (norm <= 0.0) throw std::invalid_argument("l2_normalize: zero vector");
    Tensor out = xv;
    for (double& x : out.data) x /= norm;
    const int iv = v.id();
    const bool nv = needs(v);
    const Tensor unit = out;
    return Var(this, push(std::move(out), nv, [iv, nv, norm, unit](Tape& t, const Tensor& g) {
                   if (!nv) return;
                   double gy = 0.0;
                   for (std::size_t i = 0; i < g.data.size(); ++i) gy += g.data[i] * unit.data[i];
                   Tensor gx = g;
                   for (std::size_t i = 0; i < gx.data.size(); ++i)
                       gx.data[i] = (g.data[i] - unit.data[i] * gy) / norm;
                   t.accumulate(iv, gx);
               }));
}

Var Tape::squared_distance(Var a, Var b) {
    check_owned(a, "squared_distance");
    check_owned(b, "squared_distance");
    require_same_shape("squared_distance", a.value(), b.value());
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    double acc = 0.0;
    for (std::size_t i = 0; i < av.data.size(); ++i) {
        const double dlt = av.data[i] - bv.data[i];
        acc += dlt * dlt;
    }
    const int ia = a.id(), ib = b.id();
    const bool na = needs(a), nb = needs(b);
    return Var(this, push(Tensor::scalar(acc), na || nb, [ia, ib, na, nb](Tape& t, const Tensor& g) {
                   const Tensor& av2 = t.value(ia);
                   const Tensor& bv2 = t.value(ib);
                   const double s = 2.0 * g.data[0];
                   if (na) {
                       Tensor ga = Tensor::zeros(av2.shape);
                       for (std::size_t i = 0; i < ga.data.size(); ++i)
                           ga.data[i] = s * (av2.data[i] - bv2.data[i]);
                       t.accumulate(ia, ga);
                   }
                   if (nb) {
                       Tensor gb = Tensor::zeros(bv2.shape);
                       for (std::size_t i = 0; i < gb.data.size(); ++i)
                           gb.data[i] = -s * (av2.data[i] - bv2.data[i]);
                       t.accumulate(ib, gb);
                   }
               }));
}

void Tape::backward(Var loss) {
    check_owned(loss, "backward");
    if (loss.value().numel() != 1) {
        throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.value().shape));
    }
    grads_.assign(nodes_.size(), Tensor());
    grads_[static_cast<std::size_t>(loss.id())] = Tensor::scalar(1.0);
    for (int id = loss.id(); id >= 0; --id) {
        const Node& node = nodes_[static_cast<std::size_t>(id)];
        const Tensor& g = grads_[static_cast<std::size_t>(id)];
        if (g.empty() || !node.backward) continue;
        node.backward(*this, g);
    }
}

Tensor Tape::grad(Var v) const {
    check_owned(v, "grad");
    if (grads_.size() != nodes_.size()) {
        throw std::logic_error("grad: backward() has not been run on this tape");
    }
    const Tensor& g = grads_[static_cast<std::size_t>(v.id())];
    if (g.empty()) return Tensor::zeros(v.value().shape);
    return g;
}

Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                  double step) {
    Tensor g = Tensor::zeros(x.shape);
    Tensor probe = x;
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        const double orig = probe.data[i];
        probe.data[i] = orig + step;
        const double fp = f(probe);
        probe.data[i] = orig - step;
        const double fm = f(probe);
        probe.data[i] = orig;
        g.data[i] = (fp - fm) / (2.0 * step);
    }
    return g;
}

}  // namespace advrestore
