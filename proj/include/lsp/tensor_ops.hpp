#pragma once

#include "lsp/tensor.hpp"

#include <cstdint>
#include <vector>

// Raw numeric kernels. Autograd ops and inference-only forward passes both
// call these; nothing here records a graph.
namespace lsp::ops {

struct Conv2dGeom {
    int64_t in_c = 0, in_h = 0, in_w = 0;
    int64_t out_c = 0, kh = 0, kw = 0;
    int64_t stride = 1, pad = 0;

    int64_t out_h() const { return (in_h + 2 * pad - kh) / stride + 1; }
    int64_t out_w() const { return (in_w + 2 * pad - kw) / stride + 1; }
};

// Transposed convolution geometry; out = (in-1)*stride - 2*pad + k.
struct ConvT2dGeom {
    int64_t in_c = 0, in_h = 0, in_w = 0;
    int64_t out_c = 0, kh = 0, kw = 0;
    int64_t stride = 1, pad = 0;

    int64_t out_h() const { return (in_h - 1) * stride - 2 * pad + kh; }
    int64_t out_w() const { return (in_w - 1) * stride - 2 * pad + kw; }
};

// C[M,N] = A[M,K] * B[K,N], row-major. transpose flags apply to the stored
// operand before the product.
template <class S>
void gemm(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n, bool trans_a, bool trans_b,
          S beta);

// x: [N, C, H, W]; w: [OC, IC, KH, KW]; bias: [OC] (may be null); y: [N, OC, OH, OW]
template <class S>
Tensor<S> conv2d_fwd(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>* bias,
                     const Conv2dGeom& g);
template <class S>
Tensor<S> conv2d_bwd_data(const Tensor<S>& dy, const Tensor<S>& w, const Conv2dGeom& g);
template <class S>
Tensor<S> conv2d_bwd_weights(const Tensor<S>& x, const Tensor<S>& dy, const Conv2dGeom& g);
template <class S>
Tensor<S> conv2d_bwd_bias(const Tensor<S>& dy);

// x: [N, IC, H, W]; w: [IC, OC, KH, KW]; y: [N, OC, OH, OW]
template <class S>
Tensor<S> convt2d_fwd(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>* bias,
                      const ConvT2dGeom& g);
template <class S>
Tensor<S> convt2d_bwd_data(const Tensor<S>& dy, const Tensor<S>& w, const ConvT2dGeom& g);
template <class S>
Tensor<S> convt2d_bwd_weights(const Tensor<S>& x, const Tensor<S>& dy, const ConvT2dGeom& g);

// 2x2 max pooling, stride 2. argmax holds the flat offset within each input
// feature map, for the backward scatter.
template <class S>
Tensor<S> maxpool2_fwd(const Tensor<S>& x, std::vector<int32_t>& argmax);
template <class S>
Tensor<S> maxpool2_bwd(const Tensor<S>& dy, const std::vector<int32_t>& argmax, const Shape& xshape);

// y[N,M] = x[N,K] * w[K,M] + b
template <class S>
Tensor<S> dense_fwd(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>* bias);

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, bool trans_a = false, bool trans_b = false);

template <class S>
Tensor<S> softmax_rows(const Tensor<S>& x, S inv_temp = S(1));

template <class S>
Tensor<S> transpose2d(const Tensor<S>& x);

// Column sums of a [N,D] matrix -> [D].
template <class S>
Tensor<S> colwise_sum(const Tensor<S>& x);

}  // namespace lsp::ops
