#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "milbench/core/errors.hpp"
#include "milbench/core/rng.hpp"
#include "milbench/nn/tensor.hpp"

namespace milbench::nn {

enum class Mode { train, eval };

// A differentiable layer. `forward` in train mode caches what `backward`
// needs; `backward` accumulates parameter gradients and returns dL/dx.
template <typename T>
class Module {
public:
    virtual ~Module() = default;
    [[nodiscard]] virtual Shape output_shape(const Shape& in) const = 0;
    virtual Tensor<T> forward(const Tensor<T>& x, Mode mode) = 0;
    virtual Tensor<T> backward(const Tensor<T>& dy) = 0;
    virtual void collect(std::vector<Param<T>*>&) {}
    virtual void init(Rng&) {}

    std::vector<Param<T>*> params() {
        std::vector<Param<T>*> out;
        collect(out);
        return out;
    }
};

template <typename T>
using ModulePtr = std::unique_ptr<Module<T>>;

namespace detail {

// PyTorch-style default init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename T>
void uniform_fill(Buffer<T>& v, double bound, Rng& rng) {
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto& x : v) x = static_cast<T>(u(rng));
}

inline int conv_out(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

}  // namespace detail

template <typename T>
class Conv2d final : public Module<T> {
public:
    Conv2d(int in_ch, int out_ch, int kernel, int stride = 1, int pad = 0, bool bias = true)
        : cin_(in_ch), cout_(out_ch), k_(kernel), stride_(stride), pad_(pad), has_bias_(bias),
          weight_("conv.weight", {out_ch, in_ch, kernel, kernel}), bias_("conv.bias", {bias ? out_ch : 0}) {}

    [[nodiscard]] Shape output_shape(const Shape& in) const override {
        if (in.c != cin_) throw ConfigError("conv expects " + std::to_string(cin_) + " channels, got " + to_string(in));
        const int ho = detail::conv_out(in.h, k_, stride_, pad_), wo = detail::conv_out(in.w, k_, stride_, pad_);
        if (ho < 1 || wo < 1) throw ConfigError("input " + to_string(in) + " too small for a " + std::to_string(k_) + "x" + std::to_string(k_) + " convolution");
        return {in.n, cout_, ho, wo};
    }

    void init(Rng& rng) override {
        const double bound = 1.0 / std::sqrt(static_cast<double>(cin_ * k_ * k_));
        detail::uniform_fill(weight_.value, bound, rng);
        if (has_bias_) detail::uniform_fill(bias_.value, bound, rng);
    }

    void collect(std::vector<Param<T>*>& out) override {
        out.push_back(&weight_);
        if (has_bias_) out.push_back(&bias_);
    }

    Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
        const Shape os = output_shape(x.shape);
        Tensor<T> y(os);
        const int P = os.h * os.w;
        ConstMatMap<T> W(weight_.value.data(), cout_, cin_ * k_ * k_);
        Mat<T> col(cin_ * k_ * k_, P);
        for (int n = 0; n < x.shape.n; ++n) {
            im2col(x.item(n), x.shape, os, col);
            MatMap<T> Y(y.item(n), cout_, P);
            Y.noalias() = W * col;
            if (has_bias_)
                for (int c = 0; c < cout_; ++c) Y.row(c).array() += bias_.value[c];
        }
        if (mode == Mode::train) input_ = x;
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) override {
        const Shape& is = input_.shape;
        const Shape& os = dy.shape;
        const int P = os.h * os.w;
        const int K = cin_ * k_ * k_;
        ConstMatMap<T> W(weight_.value.data(), cout_, K);
        MatMap<T> dW(weight_.grad.data(), cout_, K);
        Tensor<T> dx(is);
        Mat<T> col(K, P), dcol(K, P);
        for (int n = 0; n < is.n; ++n) {
            ConstMatMap<T> dY(dy.item(n), cout_, P);
            im2col(input_.item(n), is, os, col);
            dW.noalias() += dY * col.transpose();
            if (has_bias_)
                for (int c = 0; c < cout_; ++c) bias_.grad[c] += dY.row(c).sum();
            dcol.noalias() = W.transpose() * dY;
            col2im(dcol, is, os, dx.item(n));
        }
        return dx;
    }

private:
    void im2col(const T* x, const Shape& is, const Shape& os, Mat<T>& col) const {
        for (int c = 0; c < cin_; ++c)
            for (int ki = 0; ki < k_; ++ki)
                for (int kj = 0; kj < k_; ++kj) {
                    T* row = col.data() + static_cast<std::size_t>((c * k_ + ki) * k_ + kj) * os.h * os.w;
                    for (int oy = 0; oy < os.h; ++oy) {
                        const int iy = oy * stride_ - pad_ + ki;
                        T* out = row + oy * os.w;
                        if (iy < 0 || iy >= is.h) {
                            std::fill(out, out + os.w, T(0));
                            continue;
                        }
                        const T* src = x + (static_cast<std::size_t>(c) * is.h + iy) * is.w;
                        for (int ox = 0; ox < os.w; ++ox) {
                            const int ix = ox * stride_ - pad_ + kj;
                            out[ox] = (ix >= 0 && ix < is.w) ? src[ix] : T(0);
                        }
                    }
                }
    }

    void col2im(const Mat<T>& col, const Shape& is, const Shape& os, T* dx) const {
        for (int c = 0; c < cin_; ++c)
            for (int ki = 0; ki < k_; ++ki)
                for (int kj = 0; kj < k_; ++kj) {
                    const T* row = col.data() + static_cast<std::size_t>((c * k_ + ki) * k_ + kj) * os.h * os.w;
                    for (int oy = 0; oy < os.h; ++oy) {
                        const int iy = oy * stride_ - pad_ + ki;
                        if (iy < 0 || iy >= is.h) continue;
                        T* dst = dx + (static_cast<std::size_t>(c) * is.h + iy) * is.w;
                        const T* in = row + oy * os.w;
                        for (int ox = 0; ox < os.w; ++ox) {
                            const int ix = ox * stride_ - pad_ + kj;
                            if (ix >= 0 && ix < is.w) dst[ix] += in[ox];
                        }
                    }
                }
    }

    int cin_, cout_, k_, stride_, pad_;
    bool has_bias_;
    Param<T> weight_, bias_;
    Tensor<T> input_;
};

template <typename T>
class Linear final : public Module<T> {
public:
    Linear(int in, int out) : in_(in), out_(out), weight_("linear.weight", {out, in}), bias_("linear.bias", {out}) {}

    [[nodiscard]] Shape output_shape(const Shape& in) const override {
        if (static_cast<int>(in.per_item()) != in_)
            throw ConfigError("linear expects " + std::to_string(in_) + " features, got " + to_string(in));
        return {in.n, out_, 1, 1};
    }

    void init(Rng& rng) override {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in_));
        detail::uniform_fill(weight_.value, bound, rng);
        detail::uniform_fill(bias_.value, bound, rng);
    }

    void collect(std::vector<Param<T>*>& out) override {
        out.push_back(&weight_);
        out.push_back(&bias_);
    }

    Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
        Tensor<T> y(output_shape(x.shape));
        ConstMatMap<T> W(weight_.value.data(), out_, in_);
        Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(bias_.value.data(), out_);
        y.matrix().noalias() = x.matrix() * W.transpose();
        y.matrix().rowwise() += b;
        if (mode == Mode::train) input_ = x;
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) override {
        ConstMatMap<T> W(weight_.value.data(), out_, in_);
        MatMap<T> dW(weight_.grad.data(), out_, in_);
        const auto dY = dy.matrix();
        dW.noalias() += dY.transpose() * input_.matrix();
        for (int o = 0; o < out_; ++o) bias_.grad[o] += dY.col(o).sum();
        Tensor<T> dx(input_.shape);
        dx.matrix().noalias() = dY * W;
        return dx;
    }

private:
    int in_, out_;
    Param<T> weight_, bias_;
    Tensor<T> input_;
};

template <typename T>
class ReLU final : public Module<T> {
public:
    [[nodiscard]] Shape output_shape(const Shape& in) const override { return in; }

    Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
        Tensor<T> y = x;
        for (auto& v : y.data) v = v > T(0) ? v : T(0);
        if (mode == Mode::train) output_ = y;
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) override {
        Tensor<T> dx = dy;
        for (std::size_t i = 0; i < dx.data.size(); ++i)
            if (!(output_.data[i] > T(0))) dx.data[i] = T(0);
        return dx;
    }

private:
    Tensor<T> output_;
};

template <typename T>
class MaxPool2d final : public Module<T> {
public:
    MaxPool2d(int kernel, int stride, int pad = 0, bool ceil_mode = false)
        : k_(kernel), stride_(stride), pad_(pad), ceil_(ceil_mode) {}

    [[nodiscard]] Shape output_shape(const Shape& in) const override {
        auto out = [&](int size) {
            const int span = size + 2 * pad_ - k_;
            if (span < 0) throw ConfigError("input " + to_string(in) + " too small for max pooling");
            int o = (ceil_ ? (span + stride_ - 1) / stride_ : span / stride_) + 1;
            if (ceil_ && (o - 1) * stride_ >= size + pad_) --o;
            return o;
        };
        return {in.n, in.c, out(in.h), out(in.w)};
    }

    Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
        const Shape os = output_shape(x.shape);
        Tensor<T> y(os);
        const bool train = mode == Mode::train;
        if (train) argmax_.assign(y.numel(), 0);
        const Shape& is = x.shape;
        std::size_t o = 0;
        for (int n = 0; n < is.n; ++n)
            for (int c = 0; c < is.c; ++c) {
                const std::size_t plane = (static_cast<std::size_t>(n) * is.c + c) * is.h * is.w;
                for (int oy = 0; oy < os.h; ++oy)
                    for (int ox = 0; ox < os.w; ++ox, ++o) {
                        T best = -std::numeric_limits<T>::infinity();
                        std::size_t best_idx = plane;
                        for (int ky = 0; ky < k_; ++ky) {
                            const int iy = oy * stride_ - pad_ + ky;
                            if (iy < 0 || iy >= is.h) continue;
                            for (int kx = 0; kx < k_; ++kx) {
                                const int ix = ox * stride_ - pad_ + kx;
                                if (ix < 0 || ix >= is.w) continue;
                                const std::size_t idx = plane + static_cast<std::size_t>(iy) * is.w + ix;
                                if (x.data[idx] > best) {
                                    best = x.data[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        y.data[o] = best;
                        if (train) argmax_[o] = best_idx;
                    }
            }
        if (train) input_shape_ = is;
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) override {
        Tensor<T> dx(input_shape_);
        for (std::size_t o = 0; o < dy.data.size(); ++o) dx.data[argmax_[o]] += dy.data[o];
        return dx;
    }

private:
    int k_, stride_, pad_;
    bool ceil_;
    std::vector<std::size_t> argmax_;
    Shape input_shape_;
};

template <typename T>
class GlobalAvgPool final : public Module<T> {
public:
    [[nodiscard]] Shape output_shape(const Shape& in) const override { return {in.n, in.c, 1, 1}; }

    Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
        Tensor<T> y(output_shape(x.shape));
        const int hw = x.shape.h * x.shape.w;
        for (std::size_t p = 0; p < y.data.size(); ++p) {
            T s = 0;
            const T* src = x.data.data() + p * hw;
            for (int i = 0; i < hw; ++i) s += src[i];
            y.data[p] = s / static_cast<T>(hw);
        }
        if (mode == Mode::train) input_shape_ = x.shape;
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) override {
        Tensor<T> dx(input_shape_);
        const int hw = input_shape_.h * input_shape_.w;
        for (std::size_t p = 0; p < dy.data.size(); ++p) {
            const T g = dy.data[p] / static_cast<T>(hw);
            std::fill(dx.data.begin() + static_cast<std::ptrdiff_t>(p * hw),
                      dx.data.begin() + static_cast<std::ptrdiff_t>((p + 1) * hw), g);
        }
        return dx;
    }

private:
    Shape input_shape_;
};

template <typename T>
class Flatten final : public Module<T> {
public:
    [[nodiscard]] Shape output_shape(const Shape& in) const override {
        return {in.n, static_cast<int>(in.per_item()), 1, 1};
    }
    Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
        if (mode == Mode::train) input_shape_ = x.shape;
        Tensor<T> y;
        y.shape = output_shape(x.shape);
        y.data = x.data;
        return y;
    }
    Tensor<T> backward(const Tensor<T>& dy) override {
        Tensor<T> dx;
        dx.shape = input_shape_;
        dx.data = dy.data;
        return dx;
    }

private:
    Shape input_shape_;
};

template <typename T>
class BatchNorm2d final : public Module<T> {
public:
    explicit BatchNorm2d(int channels, double momentum = 0.1, double eps = 1e-5)
        : c_(channels), momentum_(momentum), eps_(eps), gamma_("bn.weight", {channels}), beta_("bn.bias", {channels}),
          running_mean_("bn.running_mean", {channels}, false), running_var_("bn.running_var", {channels}, false) {
        std::fill(gamma_.value.begin(), gamma_.value.end(), T(1));
        std::fill(running_var_.value.begin(), running_var_.value.end(), T(1));
    }

    [[nodiscard]] Shape output_shape(const Shape& in) const override {
        if (in.c != c_) throw ConfigError("batch norm channel mismatch");
        return in;
    }

    void collect(std::vector<Param<T>*>& out) override {
        out.push_back(&gamma_);
        out.push_back(&beta_);
        out.push_back(&running_mean_);
        out.push_back(&running_var_);
    }

    Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
        (void)output_shape(x.shape);
        const Shape& s = x.shape;
        const std::size_t hw = static_cast<std::size_t>(s.h) * s.w;
        const double m = static_cast<double>(s.n) * hw;
        Tensor<T> y(s);
        std::vector<T> mean(c_), inv_std(c_);
        if (mode == Mode::train) {
            for (int c = 0; c < c_; ++c) {
                double sum = 0, sq = 0;
                for (int n = 0; n < s.n; ++n) {
                    const T* p = x.item(n) + c * hw;
                    for (std::size_t i = 0; i < hw; ++i) sum += p[i];
                }
                const double mu = sum / m;
                for (int n = 0; n < s.n; ++n) {
                    const T* p = x.item(n) + c * hw;
                    for (std::size_t i = 0; i < hw; ++i) sq += (p[i] - mu) * (p[i] - mu);
                }
                const double var = sq / m;
                mean[c] = static_cast<T>(mu);
                inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + eps_));
                const double unbiased = m > 1 ? sq / (m - 1) : var;
                running_mean_.value[c] = static_cast<T>((1 - momentum_) * running_mean_.value[c] + momentum_ * mu);
                running_var_.value[c] = static_cast<T>((1 - momentum_) * running_var_.value[c] + momentum_ * unbiased);
            }
        } else {
            for (int c = 0; c < c_; ++c) {
                mean[c] = running_mean_.value[c];
                inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var_.value[c]) + eps_));
            }
        }
        xhat_ = Tensor<T>(s);
        batch_stats_ = mode == Mode::train;
        for (int n = 0; n < s.n; ++n)
            for (int c = 0; c < c_; ++c) {
                const T* p = x.item(n) + c * hw;
                T* q = y.item(n) + c * hw;
                for (std::size_t i = 0; i < hw; ++i) {
                    const T xh = (p[i] - mean[c]) * inv_std[c];
                    xhat_.item(n)[c * hw + i] = xh;
                    q[i] = gamma_.value[c] * xh + beta_.value[c];
                }
            }
        inv_std_ = std::move(inv_std);
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) override {
        const Shape& s = dy.shape;
        const std::size_t hw = static_cast<std::size_t>(s.h) * s.w;
        const T m = static_cast<T>(static_cast<double>(s.n) * hw);
        Tensor<T> dx(s);
        for (int c = 0; c < c_; ++c) {
            T sum_dy = 0, sum_dy_xh = 0;
            for (int n = 0; n < s.n; ++n) {
                const T* g = dy.item(n) + c * hw;
                const T* xh = xhat_.item(n) + c * hw;
                for (std::size_t i = 0; i < hw; ++i) {
                    sum_dy += g[i];
                    sum_dy_xh += g[i] * xh[i];
                }
            }
            gamma_.grad[c] += sum_dy_xh;
            beta_.grad[c] += sum_dy;
            const T scale = gamma_.value[c] * inv_std_[c] / m;
            for (int n = 0; n < s.n; ++n) {
                const T* g = dy.item(n) + c * hw;
                const T* xh = xhat_.item(n) + c * hw;
                T* d = dx.item(n) + c * hw;
                if (batch_stats_)
                    for (std::size_t i = 0; i < hw; ++i) d[i] = scale * (m * g[i] - sum_dy - xh[i] * sum_dy_xh);
                else  // running statistics are constants here
                    for (std::size_t i = 0; i < hw; ++i) d[i] = scale * m * g[i];
            }
        }
        return dx;
    }

private:
    int c_;
    double momentum_, eps_;
    Param<T> gamma_, beta_, running_mean_, running_var_;
    Tensor<T> xhat_;
    std::vector<T> inv_std_;
    bool batch_stats_ = true;
};

template <typename T>
class Sequential : public Module<T> {
public:
    Sequential() = default;

    template <typename M, typename... Args>
    Sequential& add(Args&&... args) {
        layers_.push_back(std::make_unique<M>(std::forward<Args>(args)...));
        return *this;
    }
    Sequential& add(ModulePtr<T> m) {
        layers_.push_back(std::move(m));
        return *this;
    }

    [[nodiscard]] Shape output_shape(const Shape& in) const override {
        Shape s = in;
        for (const auto& l : layers_) s = l->output_shape(s);
        return s;
    }

    Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
        Tensor<T> cur = x;
        for (auto& l : layers_) cur = l->forward(cur, mode);
        return cur;
    }

    Tensor<T> backward(const Tensor<T>& dy) override {
        Tensor<T> cur = dy;
        for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) cur = (*it)->backward(cur);
        return cur;
    }

    void collect(std::vector<Param<T>*>& out) override {
        for (auto& l : layers_) l->collect(out);
    }

    void init(Rng& rng) override {
        for (auto& l : layers_) l->init(rng);
    }

    [[nodiscard]] std::size_t size() const { return layers_.size(); }

private:
    std::vector<ModulePtr<T>> layers_;
};

// Two 3x3 conv/BN stages plus an identity or 1x1-projection shortcut.
template <typename T>
class BasicBlock final : public Module<T> {
public:
    BasicBlock(int in_ch, int out_ch, int stride) {
        main_.template add<Conv2d<T>>(in_ch, out_ch, 3, stride, 1, false)
            .template add<BatchNorm2d<T>>(out_ch)
            .template add<ReLU<T>>()
            .template add<Conv2d<T>>(out_ch, out_ch, 3, 1, 1, false)
            .template add<BatchNorm2d<T>>(out_ch);
        if (stride != 1 || in_ch != out_ch) {
            shortcut_ = std::make_unique<Sequential<T>>();
            shortcut_->template add<Conv2d<T>>(in_ch, out_ch, 1, stride, 0, false).template add<BatchNorm2d<T>>(out_ch);
        }
    }

    [[nodiscard]] Shape output_shape(const Shape& in) const override { return main_.output_shape(in); }

    Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
        Tensor<T> y = main_.forward(x, mode);
        const Tensor<T> s = shortcut_ ? shortcut_->forward(x, mode) : x;
        for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] = std::max(T(0), y.data[i] + s.data[i]);
        if (mode == Mode::train) output_ = y;
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) override {
        Tensor<T> g = dy;
        for (std::size_t i = 0; i < g.data.size(); ++i)
            if (!(output_.data[i] > T(0))) g.data[i] = T(0);
        Tensor<T> dx = main_.backward(g);
        const Tensor<T> ds = shortcut_ ? shortcut_->backward(g) : g;
        for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += ds.data[i];
        return dx;
    }

    void collect(std::vector<Param<T>*>& out) override {
        main_.collect(out);
        if (shortcut_) shortcut_->collect(out);
    }

    void init(Rng& rng) override {
        main_.init(rng);
        if (shortcut_) shortcut_->init(rng);
    }

private:
    Sequential<T> main_;
    std::unique_ptr<Sequential<T>> shortcut_;
    Tensor<T> output_;
};

// SqueezeNet fire module: 1x1 squeeze, then 1x1 and 3x3 expands concatenated.
template <typename T>
class Fire final : public Module<T> {
public:
    Fire(int in_ch, int squeeze, int expand1, int expand3) : e1_(expand1), e3_(expand3) {
        squeeze_.template add<Conv2d<T>>(in_ch, squeeze, 1).template add<ReLU<T>>();
        expand1_.template add<Conv2d<T>>(squeeze, expand1, 1).template add<ReLU<T>>();
        expand3_.template add<Conv2d<T>>(squeeze, expand3, 3, 1, 1).template add<ReLU<T>>();
    }

    [[nodiscard]] Shape output_shape(const Shape& in) const override {
        Shape s = squeeze_.output_shape(in);
        s.c = e1_ + e3_;
        return s;
    }

    Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
        const Tensor<T> s = squeeze_.forward(x, mode);
        const Tensor<T> a = expand1_.forward(s, mode);
        const Tensor<T> b = expand3_.forward(s, mode);
        Tensor<T> y(output_shape(x.shape));
        const std::size_t na = a.shape.per_item(), nb = b.shape.per_item();
        for (int n = 0; n < y.shape.n; ++n) {
            std::copy(a.item(n), a.item(n) + na, y.item(n));
            std::copy(b.item(n), b.item(n) + nb, y.item(n) + na);
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) override {
        Shape sa = dy.shape, sb = dy.shape;
        sa.c = e1_;
        sb.c = e3_;
        Tensor<T> ga(sa), gb(sb);
        const std::size_t na = sa.per_item(), nb = sb.per_item();
        for (int n = 0; n < dy.shape.n; ++n) {
            std::copy(dy.item(n), dy.item(n) + na, ga.item(n));
            std::copy(dy.item(n) + na, dy.item(n) + na + nb, gb.item(n));
        }
        Tensor<T> ds = expand1_.backward(ga);
        const Tensor<T> ds3 = expand3_.backward(gb);
        for (std::size_t i = 0; i < ds.data.size(); ++i) ds.data[i] += ds3.data[i];
        return squeeze_.backward(ds);
    }

    void collect(std::vector<Param<T>*>& out) override {
        squeeze_.collect(out);
        expand1_.collect(out);
        expand3_.collect(out);
    }

    void init(Rng& rng) override {
        squeeze_.init(rng);
        expand1_.init(rng);
        expand3_.init(rng);
    }

private:
    int e1_, e3_;
    Sequential<T> squeeze_, expand1_, expand3_;
};

}  // namespace milbench::nn
