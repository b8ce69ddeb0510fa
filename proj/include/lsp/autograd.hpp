#pragma once

#include "lsp/tensor.hpp"
#include "lsp/tensor_ops.hpp"

#include <functional>
#include <memory>
#include <vector>

// Reverse-mode autodiff over Tensor<S>. Graphs are built per batch and
// discarded; nodes own their forward values plus whatever the backward
// closure cached. Gradients are only propagated into subgraphs that can reach
// a trainable leaf.
namespace lsp::ag {

using lsp::Shape;
using lsp::Tensor;

template <class S>
struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node<S>>> parents;
    std::function<void(Node<S>&)> backward_fn;

    void accum_grad(const Tensor<S>& g) {
        if (grad.size() == 0) grad = Tensor<S>(value.shape());
        for (int64_t i = 0; i < g.size(); ++i) grad[i] += g[i];
    }
};

template <class S>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<S>> n) : node_(std::move(n)) {}

    static Var leaf(Tensor<S> v, bool requires_grad) {
        auto n = std::make_shared<Node<S>>();
        n->value = std::move(v);
        n->requires_grad = requires_grad;
        return Var(std::move(n));
    }
    static Var constant(Tensor<S> v) { return leaf(std::move(v), false); }

    bool defined() const { return node_ != nullptr; }
    const Tensor<S>& value() const { return node_->value; }
    Tensor<S>& mutable_value() { return node_->value; }
    const Tensor<S>& grad() const { return node_->grad; }
    bool has_grad() const { return node_->grad.size() != 0; }
    void zero_grad() {
        if (node_->grad.size() != 0) node_->grad.fill(S(0));
    }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }
    std::shared_ptr<Node<S>>& node() { return node_; }
    const std::shared_ptr<Node<S>>& node() const { return node_; }

    const Shape& shape() const { return node_->value.shape(); }
    int64_t dim(size_t i) const { return node_->value.dim(i); }

private:
    std::shared_ptr<Node<S>> node_;
};

// Runs reverse accumulation from a scalar root (grad seeded with ones).
template <class S>
void backward(const Var<S>& root);

// --- graph construction -----------------------------------------------------

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b);
template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b);
template <class S>
Var<S> mul(const Var<S>& a, const Var<S>& b);
template <class S>
Var<S> div(const Var<S>& a, const Var<S>& b);
template <class S>
Var<S> add_scalar(const Var<S>& a, S c);
template <class S>
Var<S> mul_scalar(const Var<S>& a, S c);

// X[N,D] + v[D] per row.
template <class S>
Var<S> add_rowvec(const Var<S>& x, const Var<S>& v);
// X[N,D] - v[N] per column (subtract a per-row scalar from each row).
template <class S>
Var<S> sub_colvec(const Var<S>& x, const Var<S>& v);
// X[N,D] * v[N] per column (scale each row by a per-row scalar).
template <class S>
Var<S> mul_colvec(const Var<S>& x, const Var<S>& v);

template <class S>
Var<S> matmul(const Var<S>& a, const Var<S>& b);
template <class S>
Var<S> dense(const Var<S>& x, const Var<S>& w, const Var<S>& b);
template <class S>
Var<S> conv2d(const Var<S>& x, const Var<S>& w, const Var<S>& b, const ops::Conv2dGeom& g);
template <class S>
Var<S> convt2d(const Var<S>& x, const Var<S>& w, const Var<S>& b, const ops::ConvT2dGeom& g);
template <class S>
Var<S> maxpool2(const Var<S>& x);

template <class S>
Var<S> relu(const Var<S>& x);
template <class S>
Var<S> sigmoid(const Var<S>& x);
template <class S>
Var<S> exp_(const Var<S>& x);
template <class S>
Var<S> log_(const Var<S>& x);
template <class S>
Var<S> sqrt_(const Var<S>& x, S eps = S(0));
template <class S>
Var<S> square(const Var<S>& x);
// Smooth |x|: sqrt(x^2 + eps).
template <class S>
Var<S> softabs(const Var<S>& x, S eps);
// Pass-through inside (lo,hi), zero gradient outside.
template <class S>
Var<S> clamp(const Var<S>& x, S lo, S hi);

template <class S>
Var<S> softmax_rows(const Var<S>& x, S inv_temp = S(1));

template <class S>
Var<S> sum_all(const Var<S>& x);
template <class S>
Var<S> mean_all(const Var<S>& x);
template <class S>
Var<S> rowwise_sum(const Var<S>& x);
template <class S>
Var<S> rowwise_mean(const Var<S>& x);
// (1/T) * log(mean_j exp(T*x_ij)); smooth approximation of rowwise max from
// below, exactly 0 when all entries are 0.
template <class S>
Var<S> rowwise_logmeanexp(const Var<S>& x, S temp);

template <class S>
Var<S> concat_cols(const std::vector<Var<S>>& xs);
template <class S>
Var<S> slice_cols(const Var<S>& x, int64_t c0, int64_t c1);
template <class S>
Var<S> reshape(const Var<S>& x, Shape shape);
template <class S>
Var<S> stop_grad(const Var<S>& x);

// -sum_k t[i,k] * log softmax(logits)[i,k], one value per row; stable.
template <class S>
Var<S> cross_entropy_rows(const Var<S>& logits, const Tensor<S>& target_probs);

// sum_k -w_k [ t log p + (1-t) log(1-p) ] per row, p clamped to
// [clamp_eps, 1-clamp_eps]; gradients vanish at the clamp.
template <class S>
Var<S> bce_rows(const Var<S>& probs, const Tensor<S>& targets, const Tensor<S>* weights,
                S clamp_eps);

// KL(N(mu, sigma^2) || N(0, I)) summed over dims, per row; sigma = exp(log_sigma).
template <class S>
Var<S> gaussian_kl_rows(const Var<S>& mu, const Var<S>& log_sigma);

// KL(Cat(p) || Uniform(n)) = sum p log p + log n, per row.
template <class S>
Var<S> categorical_kl_uniform_rows(const Var<S>& probs);

// max(x,0) / sum(max(x,0)) per row; rows whose positive mass is <= floor_eps
// become uniform with zero gradient.
template <class S>
Var<S> simplex_renorm_rows(const Var<S>& x, S floor_eps);

}  // namespace lsp::ag
