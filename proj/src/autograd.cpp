#include "lsp/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace lsp::ag {

namespace {

template <class S>
Var<S> make_node(Tensor<S> value, std::vector<std::shared_ptr<Node<S>>> parents,
                 std::function<void(Node<S>&)> backward_fn) {
    auto n = std::make_shared<Node<S>>();
    n->value = std::move(value);
    n->parents = std::move(parents);
    for (const auto& p : n->parents)
        if (p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) n->backward_fn = std::move(backward_fn);
    return Var<S>(std::move(n));
}

template <class S>
bool needs(const std::shared_ptr<Node<S>>& n) {
    return n->requires_grad;
}

}  // namespace

template <class S>
void backward(const Var<S>& root) {
    auto& r = root.node();
    if (!r->requires_grad) return;
    // DFS post-order over grad-requiring parents; reversed it is a valid
    // topological order (every node precedes its parents).
    std::vector<Node<S>*> order;
    std::vector<std::pair<Node<S>*, size_t>> stack;
    std::unordered_set<Node<S>*> seen;
    stack.push_back({r.get(), 0});
    seen.insert(r.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node<S>* p = node->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    r->accum_grad(Tensor<S>(r->value.shape(), S(1)));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<S>* n = *it;
        if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
    }
}

// --- elementwise -------------------------------------------------------------

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
    check_same_shape(a.value(), b.value(), "add");
    Tensor<S> y = a.value();
    for (int64_t i = 0; i < y.size(); ++i) y[i] += b.value()[i];
    auto pa = a.node(), pb = b.node();
    return make_node<S>(std::move(y), {pa, pb}, [pa, pb](Node<S>& n) {
        if (needs(pa)) pa->accum_grad(n.grad);
        if (needs(pb)) pb->accum_grad(n.grad);
    });
}

template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
    check_same_shape(a.value(), b.value(), "sub");
    Tensor<S> y = a.value();
    for (int64_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
    auto pa = a.node(), pb = b.node();
    return make_node<S>(std::move(y), {pa, pb}, [pa, pb](Node<S>& n) {
        if (needs(pa)) pa->accum_grad(n.grad);
        if (needs(pb)) {
            Tensor<S> g(n.grad.shape());
            for (int64_t i = 0; i < g.size(); ++i) g[i] = -n.grad[i];
            pb->accum_grad(g);
        }
    });
}

template <class S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
    check_same_shape(a.value(), b.value(), "mul");
    Tensor<S> y = a.value();
    for (int64_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
    auto pa = a.node(), pb = b.node();
    return make_node<S>(std::move(y), {pa, pb}, [pa, pb](Node<S>& n) {
        if (needs(pa)) {
            Tensor<S> g(n.grad.shape());
            for (int64_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * pb->value[i];
            pa->accum_grad(g);
        }
        if (needs(pb)) {
            Tensor<S> g(n.grad.shape());
            for (int64_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * pa->value[i];
            pb->accum_grad(g);
        }
    });
}

template <class S>
Var<S> div(const Var<S>& a, const Var<S>& b) {
    check_same_shape(a.value(), b.value(), "div");
    Tensor<S> y = a.value();
    for (int64_t i = 0; i < y.size(); ++i) y[i] /= b.value()[i];
    auto pa = a.node(), pb = b.node();
    Tensor<S> yv = y;
    return make_node<S>(std::move(y), {pa, pb}, [pa, pb, yv](Node<S>& n) {
        if (needs(pa)) {
            Tensor<S> g(n.grad.shape());
            for (int64_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] / pb->value[i];
            pa->accum_grad(g);
        }
        if (needs(pb)) {
            Tensor<S> g(n.grad.shape());
            for (int64_t i = 0; i < g.size(); ++i) g[i] = -n.grad[i] * yv[i] / pb->value[i];
            pb->accum_grad(g);
        }
    });
}

template <class S>
Var<S> add_scalar(const Var<S>& a, S c) {
    Tensor<S> y = a.value();
    for (int64_t i = 0; i < y.size(); ++i) y[i] += c;
    auto pa = a.node();
    return make_node<S>(std::move(y), {pa}, [pa](Node<S>& n) { pa->accum_grad(n.grad); });
}

template <class S>
Var<S> mul_scalar(const Var<S>& a, S c) {
    Tensor<S> y = a.value();
    for (int64_t i = 0; i < y.size(); ++i) y[i] *= c;
    auto pa = a.node();
    return make_node<S>(std::move(y), {pa}, [pa, c](Node<S>& n) {
        Tensor<S> g(n.grad.shape());
        for (int64_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * c;
        pa->accum_grad(g);
    });
}

// --- broadcasts --------------------------------------------------------------

template <class S>
Var<S> add_rowvec(const Var<S>& x, const Var<S>& v) {
    const int64_t n = x.dim(0), d = x.dim(1);
    Tensor<S> y = x.value();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) y[i * d + j] += v.value()[j];
    auto px = x.node(), pv = v.node();
    return make_node<S>(std::move(y), {px, pv}, [px, pv, n, d](Node<S>& nd) {
        if (needs(px)) px->accum_grad(nd.grad);
        if (needs(pv)) {
            Tensor<S> g({d});
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < d; ++j) g[j] += nd.grad[i * d + j];
            pv->accum_grad(g);
        }
    });
}

template <class S>
Var<S> sub_colvec(const Var<S>& x, const Var<S>& v) {
    const int64_t n = x.dim(0), d = x.dim(1);
    Tensor<S> y = x.value();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) y[i * d + j] -= v.value()[i];
    auto px = x.node(), pv = v.node();
    return make_node<S>(std::move(y), {px, pv}, [px, pv, n, d](Node<S>& nd) {
        if (needs(px)) px->accum_grad(nd.grad);
        if (needs(pv)) {
            Tensor<S> g({n});
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < d; ++j) g[i] -= nd.grad[i * d + j];
            pv->accum_grad(g);
        }
    });
}

template <class S>
Var<S> mul_colvec(const Var<S>& x, const Var<S>& v) {
    const int64_t n = x.dim(0), d = x.dim(1);
    Tensor<S> y = x.value();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) y[i * d + j] *= v.value()[i];
    auto px = x.node(), pv = v.node();
    return make_node<S>(std::move(y), {px, pv}, [px, pv, n, d](Node<S>& nd) {
        if (needs(px)) {
            Tensor<S> g(nd.grad.shape());
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < d; ++j) g[i * d + j] = nd.grad[i * d + j] * pv->value[i];
            px->accum_grad(g);
        }
        if (needs(pv)) {
            Tensor<S> g({n});
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < d; ++j) g[i] += nd.grad[i * d + j] * px->value[i * d + j];
            pv->accum_grad(g);
        }
    });
}

// --- linear algebra ----------------------------------------------------------

template <class S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
    Tensor<S> y = ops::matmul(a.value(), b.value());
    auto pa = a.node(), pb = b.node();
    return make_node<S>(std::move(y), {pa, pb}, [pa, pb](Node<S>& n) {
        if (needs(pa)) pa->accum_grad(ops::matmul(n.grad, pb->value, false, true));
        if (needs(pb)) pb->accum_grad(ops::matmul(pa->value, n.grad, true, false));
    });
}

template <class S>
Var<S> dense(const Var<S>& x, const Var<S>& w, const Var<S>& b) {
    Tensor<S> y = ops::dense_fwd(x.value(), w.value(), &b.value());
    auto px = x.node(), pw = w.node(), pb = b.node();
    return make_node<S>(std::move(y), {px, pw, pb}, [px, pw, pb](Node<S>& n) {
        if (needs(px)) px->accum_grad(ops::matmul(n.grad, pw->value, false, true));
        if (needs(pw)) pw->accum_grad(ops::matmul(px->value, n.grad, true, false));
        if (needs(pb)) pb->accum_grad(ops::colwise_sum(n.grad));
    });
}

template <class S>
Var<S> conv2d(const Var<S>& x, const Var<S>& w, const Var<S>& b, const ops::Conv2dGeom& g) {
    Tensor<S> y = ops::conv2d_fwd(x.value(), w.value(), &b.value(), g);
    auto px = x.node(), pw = w.node(), pb = b.node();
    return make_node<S>(std::move(y), {px, pw, pb}, [px, pw, pb, g](Node<S>& n) {
        if (needs(px)) px->accum_grad(ops::conv2d_bwd_data(n.grad, pw->value, g));
        if (needs(pw)) pw->accum_grad(ops::conv2d_bwd_weights(px->value, n.grad, g));
        if (needs(pb)) pb->accum_grad(ops::conv2d_bwd_bias(n.grad));
    });
}

template <class S>
Var<S> convt2d(const Var<S>& x, const Var<S>& w, const Var<S>& b, const ops::ConvT2dGeom& g) {
    Tensor<S> y = ops::convt2d_fwd(x.value(), w.value(), &b.value(), g);
    auto px = x.node(), pw = w.node(), pb = b.node();
    return make_node<S>(std::move(y), {px, pw, pb}, [px, pw, pb, g](Node<S>& n) {
        if (needs(px)) px->accum_grad(ops::convt2d_bwd_data(n.grad, pw->value, g));
        if (needs(pw)) pw->accum_grad(ops::convt2d_bwd_weights(px->value, n.grad, g));
        if (needs(pb)) pb->accum_grad(ops::conv2d_bwd_bias(n.grad));
    });
}

template <class S>
Var<S> maxpool2(const Var<S>& x) {
    auto argmax = std::make_shared<std::vector<int32_t>>();
    Tensor<S> y = ops::maxpool2_fwd(x.value(), *argmax);
    auto px = x.node();
    Shape xs = x.shape();
    return make_node<S>(std::move(y), {px}, [px, argmax, xs](Node<S>& n) {
        px->accum_grad(ops::maxpool2_bwd(n.grad, *argmax, xs));
    });
}

// --- nonlinearities ----------------------------------------------------------

template <class S>
Var<S> relu(const Var<S>& x) {
    Tensor<S> y = x.value();
    for (int64_t i = 0; i < y.size(); ++i) y[i] = std::max(y[i], S(0));
    auto px = x.node();
    return make_node<S>(std::move(y), {px}, [px](Node<S>& n) {
        Tensor<S> g(n.grad.shape());
        for (int64_t i = 0; i < g.size(); ++i) g[i] = px->value[i] > S(0) ? n.grad[i] : S(0);
        px->accum_grad(g);
    });
}

template <class S>
Var<S> sigmoid(const Var<S>& x) {
    Tensor<S> y = x.value();
    for (int64_t i = 0; i < y.size(); ++i) y[i] = S(1) / (S(1) + std::exp(-y[i]));
    auto px = x.node();
    Tensor<S> yv = y;
    return make_node<S>(std::move(y), {px}, [px, yv](Node<S>& n) {
        Tensor<S> g(n.grad.shape());
        for (int64_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * yv[i] * (S(1) - yv[i]);
        px->accum_grad(g);
    });
}

template <class S>
Var<S> exp_(const Var<S>& x) {
    Tensor<S> y = x.value();
    for (int64_t i = 0; i < y.size(); ++i) y[i] = std::exp(y[i]);
    auto px = x.node();
    Tensor<S> yv = y;
    return make_node<S>(std::move(y), {px}, [px, yv](Node<S>& n) {
        Tensor<S> g(n.grad.shape());
        for (int64_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * yv[i];
        px->accum_grad(g);
    });
}

template <class S>
Var<S> log_(const Var<S>& x) {
    Tensor<S> y = x.value();
    for (int64_t i = 0; i < y.size(); ++i) y[i] = std::log(y[i]);
    auto px = x.node();
    return make_node<S>(std::move(y), {px}, [px](Node<S>& n) {
        Tensor<S> g(n.grad.shape());
        for (int64_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] / px->value[i];
        px->accum_grad(g);
    });
}

template <class S>
Var<S> sqrt_(const Var<S>& x, S eps) {
    Tensor<S> y = x.value();
    for (int64_t i = 0; i < y.size(); ++i) y[i] = std::sqrt(y[i] + eps);
    auto px = x.node();
    Tensor<S> yv = y;
    return make_node<S>(std::move(y), {px, }, [px, yv](Node<S>& n) {
        Tensor<S> g(n.grad.shape());
        for (int64_t i = 0; i < g.size(); ++i)
            g[i] = n.grad[i] / (S(2) * std::max(yv[i], S(1e-20)));
        px->accum_grad(g);
    });
}

template <class S>
Var<S> square(const Var<S>& x) {
    Tensor<S> y = x.value();
    for (int64_t i = 0; i < y.size(); ++i) y[i] *= y[i];
    auto px = x.node();
    return make_node<S>(std::move(y), {px}, [px](Node<S>& n) {
        Tensor<S> g(n.grad.shape());
        for (int64_t i = 0; i < g.size(); ++i) g[i] = S(2) * n.grad[i] * px->value[i];
        px->accum_grad(g);
    });
}

template <class S>
Var<S> softabs(const Var<S>& x, S eps) {
    Tensor<S> y = x.value();
    for (int64_t i = 0; i < y.size(); ++i) y[i] = std::sqrt(y[i] * y[i] + eps);
    auto px = x.node();
    Tensor<S> yv = y;
    return make_node<S>(std::move(y), {px}, [px, yv](Node<S>& n) {
        Tensor<S> g(n.grad.shape());
        for (int64_t i = 0; i < g.size(); ++i)
            g[i] = n.grad[i] * px->value[i] / std::max(yv[i], S(1e-20));
        px->accum_grad(g);
    });
}

template <class S>
Var<S> clamp(const Var<S>& x, S lo, S hi) {
    Tensor<S> y = x.value();
    for (int64_t i = 0; i < y.size(); ++i) y[i] = std::min(std::max(y[i], lo), hi);
    auto px = x.node();
    return make_node<S>(std::move(y), {px}, [px, lo, hi](Node<S>& n) {
        Tensor<S> g(n.grad.shape());
        for (int64_t i = 0; i < g.size(); ++i) {
            const S v = px->value[i];
            g[i] = (v > lo && v < hi) ? n.grad[i] : S(0);
        }
        px->accum_grad(g);
    });
}

template <class S>
Var<S> softmax_rows(const Var<S>& x, S inv_temp) {
    Tensor<S> y = ops::softmax_rows(x.value(), inv_temp);
    auto px = x.node();
    Tensor<S> yv = y;
    const int64_t n = x.dim(0), d = x.dim(1);
    return make_node<S>(std::move(y), {px}, [px, yv, n, d, inv_temp](Node<S>& nd) {
        Tensor<S> g(nd.grad.shape());
        for (int64_t i = 0; i < n; ++i) {
            S dot = 0;
            for (int64_t j = 0; j < d; ++j) dot += nd.grad[i * d + j] * yv[i * d + j];
            for (int64_t j = 0; j < d; ++j)
                g[i * d + j] = inv_temp * yv[i * d + j] * (nd.grad[i * d + j] - dot);
        }
        px->accum_grad(g);
    });
}

// --- reductions --------------------------------------------------------------

template <class S>
Var<S> sum_all(const Var<S>& x) {
    S acc = 0;
    for (int64_t i = 0; i < x.value().size(); ++i) acc += x.value()[i];
    auto px = x.node();
    return make_node<S>(Tensor<S>({1}, {acc}), {px}, [px](Node<S>& n) {
        px->accum_grad(Tensor<S>(px->value.shape(), n.grad[0]));
    });
}

template <class S>
Var<S> mean_all(const Var<S>& x) {
    const S inv = S(1) / S(x.value().size());
    S acc = 0;
    for (int64_t i = 0; i < x.value().size(); ++i) acc += x.value()[i];
    acc *= inv;
    auto px = x.node();
    return make_node<S>(Tensor<S>({1}, {acc}), {px}, [px, inv](Node<S>& n) {
        px->accum_grad(Tensor<S>(px->value.shape(), n.grad[0] * inv));
    });
}

template <class S>
Var<S> rowwise_sum(const Var<S>& x) {
    const int64_t n = x.dim(0), d = x.dim(1);
    Tensor<S> y({n});
    for (int64_t i = 0; i < n; ++i) {
        S acc = 0;
        for (int64_t j = 0; j < d; ++j) acc += x.value()[i * d + j];
        y[i] = acc;
    }
    auto px = x.node();
    return make_node<S>(std::move(y), {px}, [px, n, d](Node<S>& nd) {
        Tensor<S> g({n, d});
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < d; ++j) g[i * d + j] = nd.grad[i];
        px->accum_grad(g);
    });
}

template <class S>
Var<S> rowwise_mean(const Var<S>& x) {
    const int64_t n = x.dim(0), d = x.dim(1);
    const S inv = S(1) / S(d);
    Tensor<S> y({n});
    for (int64_t i = 0; i < n; ++i) {
        S acc = 0;
        for (int64_t j = 0; j < d; ++j) acc += x.value()[i * d + j];
        y[i] = acc * inv;
    }
    auto px = x.node();
    return make_node<S>(std::move(y), {px}, [px, n, d, inv](Node<S>& nd) {
        Tensor<S> g({n, d});
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < d; ++j) g[i * d + j] = nd.grad[i] * inv;
        px->accum_grad(g);
    });
}

template <class S>
Var<S> rowwise_logmeanexp(const Var<S>& x, S temp) {
    const int64_t n = x.dim(0), d = x.dim(1);
    Tensor<S> y({n});
    Tensor<S> weights({n, d});
    for (int64_t i = 0; i < n; ++i) {
        const S* row = x.value().data() + i * d;
        S mx = row[0];
        for (int64_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
        S sum = 0;
        for (int64_t j = 0; j < d; ++j) {
            weights[i * d + j] = std::exp(temp * (row[j] - mx));
            sum += weights[i * d + j];
        }
        for (int64_t j = 0; j < d; ++j) weights[i * d + j] /= sum;
        y[i] = mx + (std::log(sum) - std::log(S(d))) / temp;
    }
    auto px = x.node();
    return make_node<S>(std::move(y), {px}, [px, weights, n, d](Node<S>& nd) {
        Tensor<S> g({n, d});
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < d; ++j) g[i * d + j] = nd.grad[i] * weights[i * d + j];
        px->accum_grad(g);
    });
}

// --- structure ---------------------------------------------------------------

template <class S>
Var<S> concat_cols(const std::vector<Var<S>>& xs) {
    const int64_t n = xs.at(0).dim(0);
    int64_t total = 0;
    for (const auto& x : xs) total += x.dim(1);
    Tensor<S> y({n, total});
    int64_t off = 0;
    for (const auto& x : xs) {
        const int64_t d = x.dim(1);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < d; ++j) y[i * total + off + j] = x.value()[i * d + j];
        off += d;
    }
    std::vector<std::shared_ptr<Node<S>>> parents;
    for (const auto& x : xs) parents.push_back(x.node());
    return make_node<S>(std::move(y), parents, [parents, n, total](Node<S>& nd) {
        int64_t off = 0;
        for (const auto& p : parents) {
            const int64_t d = p->value.dim(1);
            if (needs(p)) {
                Tensor<S> g({n, d});
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t j = 0; j < d; ++j) g[i * d + j] = nd.grad[i * total + off + j];
                p->accum_grad(g);
            }
            off += d;
        }
    });
}

template <class S>
Var<S> slice_cols(const Var<S>& x, int64_t c0, int64_t c1) {
    const int64_t n = x.dim(0), d = x.dim(1), w = c1 - c0;
    Tensor<S> y({n, w});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < w; ++j) y[i * w + j] = x.value()[i * d + c0 + j];
    auto px = x.node();
    return make_node<S>(std::move(y), {px}, [px, n, d, c0, w](Node<S>& nd) {
        Tensor<S> g({n, d});
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < w; ++j) g[i * d + c0 + j] = nd.grad[i * w + j];
        px->accum_grad(g);
    });
}

template <class S>
Var<S> reshape(const Var<S>& x, Shape shape) {
    Tensor<S> y = x.value().reshaped(shape);
    auto px = x.node();
    Shape orig = x.shape();
    return make_node<S>(std::move(y), {px}, [px, orig](Node<S>& n) {
        px->accum_grad(n.grad.reshaped(orig));
    });
}

template <class S>
Var<S> stop_grad(const Var<S>& x) {
    return Var<S>::constant(x.value());
}

// --- losses ------------------------------------------------------------------

template <class S>
Var<S> cross_entropy_rows(const Var<S>& logits, const Tensor<S>& target_probs) {
    check_same_shape(logits.value(), target_probs, "cross_entropy_rows");
    const int64_t n = logits.dim(0), k = logits.dim(1);
    Tensor<S> probs = ops::softmax_rows(logits.value());
    Tensor<S> y({n});
    Tensor<S> tsum({n});
    for (int64_t i = 0; i < n; ++i) {
        // -sum_k t * log p, computed from the stable softmax
        S acc = 0, s = 0;
        for (int64_t j = 0; j < k; ++j) {
            const S t = target_probs[i * k + j];
            s += t;
            if (t != S(0)) acc -= t * std::log(std::max(probs[i * k + j], S(1e-30)));
        }
        y[i] = acc;
        tsum[i] = s;
    }
    auto pl = logits.node();
    return make_node<S>(std::move(y), {pl}, [pl, probs, target_probs, tsum, n, k](Node<S>& nd) {
        Tensor<S> g({n, k});
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < k; ++j)
                g[i * k + j] =
                    nd.grad[i] * (tsum[i] * probs[i * k + j] - target_probs[i * k + j]);
        pl->accum_grad(g);
    });
}

template <class S>
Var<S> bce_rows(const Var<S>& probs, const Tensor<S>& targets, const Tensor<S>* weights,
                S clamp_eps) {
    check_same_shape(probs.value(), targets, "bce_rows");
    const int64_t n = probs.dim(0), d = probs.dim(1);
    const S lo = clamp_eps, hi = S(1) - clamp_eps;
    Tensor<S> y({n});
    for (int64_t i = 0; i < n; ++i) {
        S acc = 0;
        for (int64_t j = 0; j < d; ++j) {
            const S p = std::min(std::max(probs.value()[i * d + j], lo), hi);
            const S t = targets[i * d + j];
            const S w = weights ? (*weights)[j] : S(1);
            acc -= w * (t * std::log(p) + (S(1) - t) * std::log(S(1) - p));
        }
        y[i] = acc;
    }
    auto pp = probs.node();
    Tensor<S> wcopy = weights ? *weights : Tensor<S>();
    const bool has_w = weights != nullptr;
    return make_node<S>(std::move(y), {pp},
                        [pp, targets, wcopy, has_w, lo, hi, n, d](Node<S>& nd) {
        Tensor<S> g({n, d});
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < d; ++j) {
                const S raw = pp->value[i * d + j];
                if (raw <= lo || raw >= hi) {
                    g[i * d + j] = 0;
                    continue;
                }
                const S t = targets[i * d + j];
                const S w = has_w ? wcopy[j] : S(1);
                g[i * d + j] = nd.grad[i] * w * (raw - t) / (raw * (S(1) - raw));
            }
        pp->accum_grad(g);
    });
}

template <class S>
Var<S> gaussian_kl_rows(const Var<S>& mu, const Var<S>& log_sigma) {
    check_same_shape(mu.value(), log_sigma.value(), "gaussian_kl_rows");
    const int64_t n = mu.dim(0), d = mu.dim(1);
    Tensor<S> y({n});
    for (int64_t i = 0; i < n; ++i) {
        S acc = 0;
        for (int64_t j = 0; j < d; ++j) {
            const S m = mu.value()[i * d + j];
            const S ls = log_sigma.value()[i * d + j];
            acc += S(0.5) * (m * m + std::exp(S(2) * ls) - S(1) - S(2) * ls);
        }
        y[i] = acc;
    }
    auto pm = mu.node(), pl = log_sigma.node();
    return make_node<S>(std::move(y), {pm, pl}, [pm, pl, n, d](Node<S>& nd) {
        if (needs(pm)) {
            Tensor<S> g({n, d});
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < d; ++j) g[i * d + j] = nd.grad[i] * pm->value[i * d + j];
            pm->accum_grad(g);
        }
        if (needs(pl)) {
            Tensor<S> g({n, d});
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < d; ++j)
                    g[i * d + j] =
                        nd.grad[i] * (std::exp(S(2) * pl->value[i * d + j]) - S(1));
            pl->accum_grad(g);
        }
    });
}

template <class S>
Var<S> categorical_kl_uniform_rows(const Var<S>& probs) {
    const int64_t n = probs.dim(0), d = probs.dim(1);
    const S logd = std::log(S(d));
    Tensor<S> y({n});
    for (int64_t i = 0; i < n; ++i) {
        S acc = logd;
        for (int64_t j = 0; j < d; ++j) {
            const S p = probs.value()[i * d + j];
            if (p > S(1e-12)) acc += p * std::log(p);
        }
        y[i] = acc;
    }
    auto pp = probs.node();
    return make_node<S>(std::move(y), {pp}, [pp, n, d](Node<S>& nd) {
        Tensor<S> g({n, d});
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < d; ++j) {
                const S p = std::max(pp->value[i * d + j], S(1e-12));
                g[i * d + j] = nd.grad[i] * (std::log(p) + S(1));
            }
        pp->accum_grad(g);
    });
}

template <class S>
Var<S> simplex_renorm_rows(const Var<S>& x, S floor_eps) {
    const int64_t n = x.dim(0), d = x.dim(1);
    Tensor<S> y({n, d});
    Tensor<S> sums({n});
    for (int64_t i = 0; i < n; ++i) {
        S s = 0;
        for (int64_t j = 0; j < d; ++j) s += std::max(x.value()[i * d + j], S(0));
        sums[i] = s;
        if (s <= floor_eps) {
            for (int64_t j = 0; j < d; ++j) y[i * d + j] = S(1) / S(d);
        } else {
            for (int64_t j = 0; j < d; ++j) y[i * d + j] = std::max(x.value()[i * d + j], S(0)) / s;
        }
    }
    auto px = x.node();
    Tensor<S> yv = y;
    return make_node<S>(std::move(y), {px}, [px, yv, sums, floor_eps, n, d](Node<S>& nd) {
        Tensor<S> g({n, d});
        for (int64_t i = 0; i < n; ++i) {
            const S s = sums[i];
            if (s <= floor_eps) continue;  // uniform fallback is constant
            S dot = 0;
            for (int64_t j = 0; j < d; ++j) dot += nd.grad[i * d + j] * yv[i * d + j];
            for (int64_t j = 0; j < d; ++j)
                g[i * d + j] =
                    px->value[i * d + j] > S(0) ? (nd.grad[i * d + j] - dot) / s : S(0);
        }
        px->accum_grad(g);
    });
}

// --- instantiation -----------------------------------------------------------

#define LSP_INSTANTIATE_AG(S)                                                                     \
    template void backward<S>(const Var<S>&);                                                     \
    template Var<S> add<S>(const Var<S>&, const Var<S>&);                                         \
    template Var<S> sub<S>(const Var<S>&, const Var<S>&);                                         \
    template Var<S> mul<S>(const Var<S>&, const Var<S>&);                                         \
    template Var<S> div<S>(const Var<S>&, const Var<S>&);                                         \
    template Var<S> add_scalar<S>(const Var<S>&, S);                                              \
    template Var<S> mul_scalar<S>(const Var<S>&, S);                                              \
    template Var<S> add_rowvec<S>(const Var<S>&, const Var<S>&);                                  \
    template Var<S> sub_colvec<S>(const Var<S>&, const Var<S>&);                                  \
    template Var<S> mul_colvec<S>(const Var<S>&, const Var<S>&);                                  \
    template Var<S> matmul<S>(const Var<S>&, const Var<S>&);                                      \
    template Var<S> dense<S>(const Var<S>&, const Var<S>&, const Var<S>&);                        \
    template Var<S> conv2d<S>(const Var<S>&, const Var<S>&, const Var<S>&,                        \
                              const ops::Conv2dGeom&);                                            \
    template Var<S> convt2d<S>(const Var<S>&, const Var<S>&, const Var<S>&,                       \
                               const ops::ConvT2dGeom&);                                          \
    template Var<S> maxpool2<S>(const Var<S>&);                                                   \
    template Var<S> relu<S>(const Var<S>&);                                                       \
    template Var<S> sigmoid<S>(const Var<S>&);                                                    \
    template Var<S> exp_<S>(const Var<S>&);                                                       \
    template Var<S> log_<S>(const Var<S>&);                                                       \
    template Var<S> sqrt_<S>(const Var<S>&, S);                                                   \
    template Var<S> square<S>(const Var<S>&);                                                     \
    template Var<S> softabs<S>(const Var<S>&, S);                                                 \
    template Var<S> clamp<S>(const Var<S>&, S, S);                                                \
    template Var<S> softmax_rows<S>(const Var<S>&, S);                                            \
    template Var<S> sum_all<S>(const Var<S>&);                                                    \
    template Var<S> mean_all<S>(const Var<S>&);                                                   \
    template Var<S> rowwise_sum<S>(const Var<S>&);                                                \
    template Var<S> rowwise_mean<S>(const Var<S>&);                                               \
    template Var<S> rowwise_logmeanexp<S>(const Var<S>&, S);                                      \
    template Var<S> concat_cols<S>(const std::vector<Var<S>>&);                                   \
    template Var<S> slice_cols<S>(const Var<S>&, int64_t, int64_t);                               \
    template Var<S> reshape<S>(const Var<S>&, Shape);                                             \
    template Var<S> stop_grad<S>(const Var<S>&);                                                  \
    template Var<S> cross_entropy_rows<S>(const Var<S>&, const Tensor<S>&);                       \
    template Var<S> bce_rows<S>(const Var<S>&, const Tensor<S>&, const Tensor<S>*, S);            \
    template Var<S> gaussian_kl_rows<S>(const Var<S>&, const Var<S>&);                            \
    template Var<S> categorical_kl_uniform_rows<S>(const Var<S>&);                                \
    template Var<S> simplex_renorm_rows<S>(const Var<S>&, S);

LSP_INSTANTIATE_AG(float)
LSP_INSTANTIATE_AG(double)

}  // namespace lsp::ag
