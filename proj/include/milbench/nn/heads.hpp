#pragma once

#include <cmath>
#include <random>
#include <utility>
#include <vector>

#include "milbench/core/errors.hpp"
#include "milbench/core/rng.hpp"
#include "milbench/nn/layers.hpp"
#include "milbench/nn/tensor.hpp"

namespace milbench::nn {

template <typename T>
T sigmoid(T x) {
    return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

// Numerically stable log(1 + exp(x)).
template <typename T>
T softplus(T x) {
    return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename T>
Vec<T> softmax(const Vec<T>& e) {
    Vec<T> a = (e.array() - e.maxCoeff()).exp();
    return a / a.sum();
}

template <typename T>
struct AttentionPool {
    Vec<T> embedding;  // M
    Vec<T> weights;    // K, a probability vector
    Vec<T> scores;     // K raw scores before softmax
};

// Attention pooling head: e_k = w^T tanh(V h_k), a = softmax(e),
// z = sum_k a_k h_k, bag probability = sigmoid(c^T z + b).
template <typename T>
class AttentionHead {
public:
    AttentionHead(int embedding_dim, int attention_dim)
        : M_(embedding_dim), L_(attention_dim), V_("attention.V", {attention_dim, embedding_dim}),
          w_("attention.w", {attention_dim}), c_("classifier.weight", {embedding_dim}), b_("classifier.bias", {1}) {
        if (M_ <= 0 || L_ <= 0) throw ConfigError("attention head dimensions must be positive");
    }

    void init(Rng& rng) {
        detail::uniform_fill(V_.value, 1.0 / std::sqrt(static_cast<double>(M_)), rng);
        detail::uniform_fill(w_.value, 1.0 / std::sqrt(static_cast<double>(L_)), rng);
        detail::uniform_fill(c_.value, 1.0 / std::sqrt(static_cast<double>(M_)), rng);
        detail::uniform_fill(b_.value, 1.0 / std::sqrt(static_cast<double>(M_)), rng);
    }

    void collect(std::vector<Param<T>*>& out) {
        out.push_back(&V_);
        out.push_back(&w_);
        out.push_back(&c_);
        out.push_back(&b_);
    }

    [[nodiscard]] int embedding_dim() const { return M_; }
    [[nodiscard]] int attention_dim() const { return L_; }

    Param<T>& V() { return V_; }
    Param<T>& w() { return w_; }
    Param<T>& classifier_weight() { return c_; }
    Param<T>& classifier_bias() { return b_; }

    // H is K x M (one embedding per row).
    [[nodiscard]] AttentionPool<T> pool(const Eigen::Ref<const Mat<T>>& H) const {
        if (H.rows() < 1) throw DataError("attention pooling needs at least one instance");
        if (H.cols() != M_) throw ConfigError("embedding width does not match the attention head");
        ConstMatMap<T> V(V_.value.data(), L_, M_);
        Eigen::Map<const Vec<T>> w(w_.value.data(), L_);
        const Mat<T> A = (H * V.transpose()).array().tanh();
        AttentionPool<T> r;
        r.scores = A * w;
        r.weights = softmax<T>(r.scores);
        r.embedding = H.transpose() * r.weights;
        return r;
    }

    [[nodiscard]] T logit(const Vec<T>& bag_embedding) const {
        Eigen::Map<const Vec<T>> c(c_.value.data(), M_);
        return c.dot(bag_embedding) + b_.value[0];
    }

    [[nodiscard]] T predict(const Vec<T>& bag_embedding) const { return sigmoid(logit(bag_embedding)); }

    // Training pass: caches intermediates, returns the bag logit.
    T forward(const Eigen::Ref<const Mat<T>>& H) {
        ConstMatMap<T> V(V_.value.data(), L_, M_);
        Eigen::Map<const Vec<T>> w(w_.value.data(), L_);
        H_ = H;
        A_ = (H * V.transpose()).array().tanh();
        const Vec<T> e = A_ * w;
        a_ = softmax<T>(e);
        z_ = H.transpose() * a_;
        return logit(z_);
    }

    // Given dLoss/dlogit, accumulates parameter gradients and returns dLoss/dH.
    Mat<T> backward(T dlogit) {
        ConstMatMap<T> V(V_.value.data(), L_, M_);
        Eigen::Map<const Vec<T>> w(w_.value.data(), L_);
        Eigen::Map<const Vec<T>> c(c_.value.data(), M_);
        Eigen::Map<Vec<T>> dc(c_.grad.data(), M_);
        dc += dlogit * z_;
        b_.grad[0] += dlogit;
        const Vec<T> dz = dlogit * c;
        const Vec<T> da = H_ * dz;
        const Vec<T> de = a_.cwiseProduct(da.array().matrix() - Vec<T>::Constant(a_.size(), a_.dot(da)));
        Eigen::Map<Vec<T>> dw(w_.grad.data(), L_);
        dw.noalias() += A_.transpose() * de;
        const Mat<T> dpre = (de * w.transpose()).array() * (T(1) - A_.array().square());
        MatMap<T> dV(V_.grad.data(), L_, M_);
        dV.noalias() += dpre.transpose() * H_;
        Mat<T> dH = a_ * dz.transpose();
        dH.noalias() += dpre * V;
        return dH;
    }

    [[nodiscard]] const Vec<T>& last_weights() const { return a_; }

private:
    int M_, L_;
    Param<T> V_, w_, c_, b_;
    Mat<T> H_, A_;
    Vec<T> a_, z_;
};

template <typename T>
AttentionPool<T> attention_pool(const Eigen::Ref<const Mat<T>>& H, const AttentionHead<T>& head) {
    return head.pool(H);
}

template <typename T>
T bag_predict(const Vec<T>& bag_embedding, const AttentionHead<T>& head) {
    return head.predict(bag_embedding);
}

// Binary cross-entropy on a logit; returns (loss, dloss/dlogit).
template <typename T>
std::pair<T, T> bce_with_logit(T logit, int label) {
    const T loss = softplus(logit) - static_cast<T>(label) * logit;
    return {loss, sigmoid(logit) - static_cast<T>(label)};
}

// Single-instance head: affine M -> 2 followed by softmax.
template <typename T>
class SilHead {
public:
    explicit SilHead(int embedding_dim) : M_(embedding_dim), linear_(embedding_dim, 2) {}

    void init(Rng& rng) { linear_.init(rng); }
    void collect(std::vector<Param<T>*>& out) { linear_.collect(out); }

    // N x 2 logits.
    Tensor<T> forward(const Tensor<T>& embeddings, Mode mode) { return linear_.forward(embeddings, mode); }
    Tensor<T> backward(const Tensor<T>& dlogits) { return linear_.backward(dlogits); }

    [[nodiscard]] int embedding_dim() const { return M_; }

private:
    int M_;
    Linear<T> linear_;
};

// (p_negative, p_positive) from two logits.
template <typename T>
std::pair<T, T> sil_softmax(T logit_neg, T logit_pos) {
    const T m = std::max(logit_neg, logit_pos);
    const T en = std::exp(logit_neg - m), ep = std::exp(logit_pos - m);
    return {en / (en + ep), ep / (en + ep)};
}

template <typename T>
std::pair<T, T> sil_predict(const Tensor<T>& embedding, SilHead<T>& head) {
    const Tensor<T> logits = head.forward(embedding, Mode::eval);
    return sil_softmax(logits.data[0], logits.data[1]);
}

// Mean softmax cross-entropy over the batch; fills dlogits.
template <typename T>
T softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels, Tensor<T>& dlogits) {
    const int n = logits.shape.n;
    dlogits = Tensor<T>(logits.shape);
    T total = 0;
    for (int i = 0; i < n; ++i) {
        const T l0 = logits.data[2 * i], l1 = logits.data[2 * i + 1];
        const T m = std::max(l0, l1);
        const T lse = m + std::log(std::exp(l0 - m) + std::exp(l1 - m));
        const auto [p0, p1] = sil_softmax(l0, l1);
        total += lse - (labels[i] == 1 ? l1 : l0);
        dlogits.data[2 * i] = (p0 - (labels[i] == 0 ? T(1) : T(0))) / static_cast<T>(n);
        dlogits.data[2 * i + 1] = (p1 - (labels[i] == 1 ? T(1) : T(0))) / static_cast<T>(n);
    }
    return total / static_cast<T>(n);
}

}  // namespace milbench::nn
