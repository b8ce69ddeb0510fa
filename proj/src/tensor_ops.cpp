#include "lsp/tensor_ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

namespace lsp::ops {

namespace {

template <class S>
using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class S>
using CMatMap = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// cols: [OH*OW, IC*KH*KW] for one image x: [C, H, W]
template <class S>
void im2col(const S* x, const Conv2dGeom& g, S* cols) {
    const int64_t oh = g.out_h(), ow = g.out_w();
    const int64_t row_len = g.in_c * g.kh * g.kw;
    for (int64_t y = 0; y < oh; ++y) {
        for (int64_t xq = 0; xq < ow; ++xq) {
            S* row = cols + (y * ow + xq) * row_len;
            int64_t idx = 0;
            for (int64_t c = 0; c < g.in_c; ++c) {
                const S* plane = x + c * g.in_h * g.in_w;
                for (int64_t ky = 0; ky < g.kh; ++ky) {
                    const int64_t iy = y * g.stride - g.pad + ky;
                    for (int64_t kx = 0; kx < g.kw; ++kx) {
                        const int64_t ix = xq * g.stride - g.pad + kx;
                        row[idx++] = (iy >= 0 && iy < g.in_h && ix >= 0 && ix < g.in_w)
                                         ? plane[iy * g.in_w + ix]
                                         : S(0);
                    }
                }
            }
        }
    }
}

// Scatter-add of cols back into one image.
template <class S>
void col2im(const S* cols, const Conv2dGeom& g, S* x) {
    const int64_t oh = g.out_h(), ow = g.out_w();
    const int64_t row_len = g.in_c * g.kh * g.kw;
    for (int64_t y = 0; y < oh; ++y) {
        for (int64_t xq = 0; xq < ow; ++xq) {
            const S* row = cols + (y * ow + xq) * row_len;
            int64_t idx = 0;
            for (int64_t c = 0; c < g.in_c; ++c) {
                S* plane = x + c * g.in_h * g.in_w;
                for (int64_t ky = 0; ky < g.kh; ++ky) {
                    const int64_t iy = y * g.stride - g.pad + ky;
                    for (int64_t kx = 0; kx < g.kw; ++kx) {
                        const int64_t ix = xq * g.stride - g.pad + kx;
                        if (iy >= 0 && iy < g.in_h && ix >= 0 && ix < g.in_w)
                            plane[iy * g.in_w + ix] += row[idx];
                        ++idx;
                    }
                }
            }
        }
    }
}

template <class S>
Conv2dGeom as_conv_geom(const ConvT2dGeom& t) {
    // A transposed convolution is the data-gradient of the convolution that
    // maps its output back to its input.
    Conv2dGeom g;
    g.in_c = t.out_c;
    g.in_h = t.out_h();
    g.in_w = t.out_w();
    g.out_c = t.in_c;
    g.kh = t.kh;
    g.kw = t.kw;
    g.stride = t.stride;
    g.pad = t.pad;
    return g;
}

}  // namespace

template <class S>
void gemm(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n, bool trans_a, bool trans_b,
          S beta) {
    MatMap<S> C(c, m, n);
    auto run = [&](auto&& A, auto&& B) {
        if (beta == S(0))
            C.noalias() = A * B;
        else
            C.noalias() = beta * C + A * B;
    };
    if (!trans_a && !trans_b)
        run(CMatMap<S>(a, m, k), CMatMap<S>(b, k, n));
    else if (trans_a && !trans_b)
        run(CMatMap<S>(a, k, m).transpose(), CMatMap<S>(b, k, n));
    else if (!trans_a && trans_b)
        run(CMatMap<S>(a, m, k), CMatMap<S>(b, n, k).transpose());
    else
        run(CMatMap<S>(a, k, m).transpose(), CMatMap<S>(b, n, k).transpose());
}

template <class S>
Tensor<S> conv2d_fwd(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>* bias,
                     const Conv2dGeom& g) {
    const int64_t n = x.dim(0), oh = g.out_h(), ow = g.out_w();
    const int64_t k = g.in_c * g.kh * g.kw;
    Tensor<S> y({n, g.out_c, oh, ow});
    std::vector<S> cols(static_cast<size_t>(oh * ow * k));
    for (int64_t i = 0; i < n; ++i) {
        im2col(x.data() + i * g.in_c * g.in_h * g.in_w, g, cols.data());
        // y_i [OC, OHOW] = w [OC, K] * cols^T [K, OHOW]
        gemm<S>(w.data(), cols.data(), y.data() + i * g.out_c * oh * ow, g.out_c, k, oh * ow, false,
                true, S(0));
    }
    if (bias) {
        for (int64_t i = 0; i < n; ++i)
            for (int64_t c = 0; c < g.out_c; ++c) {
                S* plane = y.data() + (i * g.out_c + c) * oh * ow;
                const S b = (*bias)[c];
                for (int64_t p = 0; p < oh * ow; ++p) plane[p] += b;
            }
    }
    return y;
}

template <class S>
Tensor<S> conv2d_bwd_data(const Tensor<S>& dy, const Tensor<S>& w, const Conv2dGeom& g) {
    const int64_t n = dy.dim(0), oh = g.out_h(), ow = g.out_w();
    const int64_t k = g.in_c * g.kh * g.kw;
    Tensor<S> dx({n, g.in_c, g.in_h, g.in_w});
    std::vector<S> cols(static_cast<size_t>(oh * ow * k));
    for (int64_t i = 0; i < n; ++i) {
        // cols [OHOW, K] = dy_i^T [OHOW, OC] * w [OC, K]
        gemm<S>(dy.data() + i * g.out_c * oh * ow, w.data(), cols.data(), oh * ow, g.out_c, k, true,
                false, S(0));
        col2im(cols.data(), g, dx.data() + i * g.in_c * g.in_h * g.in_w);
    }
    return dx;
}

template <class S>
Tensor<S> conv2d_bwd_weights(const Tensor<S>& x, const Tensor<S>& dy, const Conv2dGeom& g) {
    const int64_t n = x.dim(0), oh = g.out_h(), ow = g.out_w();
    const int64_t k = g.in_c * g.kh * g.kw;
    Tensor<S> dw({g.out_c, g.in_c, g.kh, g.kw});
    std::vector<S> cols(static_cast<size_t>(oh * ow * k));
    for (int64_t i = 0; i < n; ++i) {
        im2col(x.data() + i * g.in_c * g.in_h * g.in_w, g, cols.data());
        // dw [OC, K] += dy_i [OC, OHOW] * cols [OHOW, K]
        gemm<S>(dy.data() + i * g.out_c * oh * ow, cols.data(), dw.data(), g.out_c, oh * ow, k,
                false, false, S(1));
    }
    return dw;
}

template <class S>
Tensor<S> conv2d_bwd_bias(const Tensor<S>& dy) {
    const int64_t n = dy.dim(0), c = dy.dim(1), hw = dy.dim(2) * dy.dim(3);
    Tensor<S> db({c});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < c; ++j) {
            const S* plane = dy.data() + (i * c + j) * hw;
            S acc = 0;
            for (int64_t p = 0; p < hw; ++p) acc += plane[p];
            db[j] += acc;
        }
    return db;
}

template <class S>
Tensor<S> convt2d_fwd(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>* bias,
                      const ConvT2dGeom& t) {
    Conv2dGeom g = as_conv_geom<S>(t);
    Tensor<S> y = conv2d_bwd_data(x, w, g);
    if (bias) {
        const int64_t n = y.dim(0), c = y.dim(1), hw = y.dim(2) * y.dim(3);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < c; ++j) {
                S* plane = y.data() + (i * c + j) * hw;
                const S b = (*bias)[j];
                for (int64_t p = 0; p < hw; ++p) plane[p] += b;
            }
    }
    return y;
}

template <class S>
Tensor<S> convt2d_bwd_data(const Tensor<S>& dy, const Tensor<S>& w, const ConvT2dGeom& t) {
    return conv2d_fwd<S>(dy, w, nullptr, as_conv_geom<S>(t));
}

template <class S>
Tensor<S> convt2d_bwd_weights(const Tensor<S>& x, const Tensor<S>& dy, const ConvT2dGeom& t) {
    return conv2d_bwd_weights(dy, x, as_conv_geom<S>(t));
}

template <class S>
Tensor<S> maxpool2_fwd(const Tensor<S>& x, std::vector<int32_t>& argmax) {
    const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int64_t oh = h / 2, ow = w / 2;
    Tensor<S> y({n, c, oh, ow});
    argmax.assign(static_cast<size_t>(n * c * oh * ow), 0);
    for (int64_t img = 0; img < n * c; ++img) {
        const S* plane = x.data() + img * h * w;
        S* out = y.data() + img * oh * ow;
        int32_t* am = argmax.data() + img * oh * ow;
        for (int64_t py = 0; py < oh; ++py)
            for (int64_t px = 0; px < ow; ++px) {
                int64_t base = (py * 2) * w + px * 2;
                int64_t best = base;
                S bv = plane[base];
                const int64_t cand[3] = {base + 1, base + w, base + w + 1};
                for (int64_t q : cand)
                    if (plane[q] > bv) {
                        bv = plane[q];
                        best = q;
                    }
                out[py * ow + px] = bv;
                am[py * ow + px] = static_cast<int32_t>(best);
            }
    }
    return y;
}

template <class S>
Tensor<S> maxpool2_bwd(const Tensor<S>& dy, const std::vector<int32_t>& argmax, const Shape& xshape) {
    Tensor<S> dx(xshape);
    const int64_t hw = xshape[2] * xshape[3];
    const int64_t ohw = dy.dim(2) * dy.dim(3);
    for (int64_t img = 0; img < dy.dim(0) * dy.dim(1); ++img) {
        S* plane = dx.data() + img * hw;
        const S* g = dy.data() + img * ohw;
        const int32_t* am = argmax.data() + img * ohw;
        for (int64_t p = 0; p < ohw; ++p) plane[am[p]] += g[p];
    }
    return dx;
}

template <class S>
Tensor<S> dense_fwd(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>* bias) {
    const int64_t n = x.dim(0), k = x.dim(1), m = w.dim(1);
    Tensor<S> y({n, m});
    gemm<S>(x.data(), w.data(), y.data(), n, k, m, false, false, S(0));
    if (bias)
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < m; ++j) y.at2(i, j) += (*bias)[j];
    return y;
}

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, bool trans_a, bool trans_b) {
    const int64_t m = trans_a ? a.dim(1) : a.dim(0);
    const int64_t k = trans_a ? a.dim(0) : a.dim(1);
    const int64_t k2 = trans_b ? b.dim(1) : b.dim(0);
    const int64_t n = trans_b ? b.dim(0) : b.dim(1);
    if (k != k2) fail(ErrorCode::ShapeMismatch, "matmul inner dims " + shape_str({k, k2}));
    Tensor<S> c({m, n});
    gemm<S>(a.data(), b.data(), c.data(), m, k, n, trans_a, trans_b, S(0));
    return c;
}

template <class S>
Tensor<S> softmax_rows(const Tensor<S>& x, S inv_temp) {
    const int64_t n = x.dim(0), d = x.dim(1);
    Tensor<S> y(x.shape());
    for (int64_t i = 0; i < n; ++i) {
        const S* row = x.data() + i * d;
        S* out = y.data() + i * d;
        S mx = row[0];
        for (int64_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
        S sum = 0;
        for (int64_t j = 0; j < d; ++j) {
            out[j] = std::exp((row[j] - mx) * inv_temp);
            sum += out[j];
        }
        for (int64_t j = 0; j < d; ++j) out[j] /= sum;
    }
    return y;
}

template <class S>
Tensor<S> transpose2d(const Tensor<S>& x) {
    Tensor<S> y({x.dim(1), x.dim(0)});
    MatMap<S>(y.data(), y.dim(0), y.dim(1)) = CMatMap<S>(x.data(), x.dim(0), x.dim(1)).transpose();
    return y;
}

template <class S>
Tensor<S> colwise_sum(const Tensor<S>& x) {
    const int64_t n = x.dim(0), d = x.dim(1);
    Tensor<S> out({d});
    for (int64_t i = 0; i < n; ++i) {
        const S* row = x.data() + i * d;
        for (int64_t j = 0; j < d; ++j) out[j] += row[j];
    }
    return out;
}

#define LSP_INSTANTIATE_OPS(S)                                                                     \
    template void gemm<S>(const S*, const S*, S*, int64_t, int64_t, int64_t, bool, bool, S);       \
    template Tensor<S> conv2d_fwd<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>*,        \
                                     const Conv2dGeom&);                                           \
    template Tensor<S> conv2d_bwd_data<S>(const Tensor<S>&, const Tensor<S>&, const Conv2dGeom&); \
    template Tensor<S> conv2d_bwd_weights<S>(const Tensor<S>&, const Tensor<S>&,                   \
                                             const Conv2dGeom&);                                  \
    template Tensor<S> conv2d_bwd_bias<S>(const Tensor<S>&);                                      \
    template Tensor<S> convt2d_fwd<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>*,       \
                                      const ConvT2dGeom&);                                         \
    template Tensor<S> convt2d_bwd_data<S>(const Tensor<S>&, const Tensor<S>&,                     \
                                           const ConvT2dGeom&);                                   \
    template Tensor<S> convt2d_bwd_weights<S>(const Tensor<S>&, const Tensor<S>&,                  \
                                              const ConvT2dGeom&);                                \
    template Tensor<S> maxpool2_fwd<S>(const Tensor<S>&, std::vector<int32_t>&);                  \
    template Tensor<S> maxpool2_bwd<S>(const Tensor<S>&, const std::vector<int32_t>&,             \
                                       const Shape&);                                             \
    template Tensor<S> dense_fwd<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>*);        \
    template Tensor<S> matmul<S>(const Tensor<S>&, const Tensor<S>&, bool, bool);                 \
    template Tensor<S> softmax_rows<S>(const Tensor<S>&, S);                                      \
    template Tensor<S> transpose2d<S>(const Tensor<S>&);                                          \
    template Tensor<S> colwise_sum<S>(const Tensor<S>&);

LSP_INSTANTIATE_OPS(float)
LSP_INSTANTIATE_OPS(double)

}  // namespace lsp::ops
