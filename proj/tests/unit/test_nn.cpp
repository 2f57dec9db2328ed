#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>

#include "milbench/nn/extractors.hpp"
#include "milbench/nn/heads.hpp"
#include "milbench/nn/layers.hpp"
#include "milbench/nn/model.hpp"
#include "test_util.hpp"

using namespace milbench;
using namespace milbench::nn;

namespace {

Tensor<double> random_tensor(Shape s, std::mt19937_64& rng, double scale = 1.0) {
    Tensor<double> t(s);
    std::normal_distribution<double> d(0.0, scale);
    for (auto& v : t.data) v = d(rng);
    return t;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-4}); }

// Central-difference check of dL/dx and dL/dparams for L = sum(y * R).
void check_module_gradients(Module<double>& m, Shape in, Mode mode, std::uint64_t seed, double tol = 1e-3) {
    std::mt19937_64 rng(seed);
    Rng init_rng(seed + 1);
    m.init(init_rng);
    std::vector<Param<double>*> params;
    m.collect(params);
    // Nonzero biases and scales make the check stronger.
    for (auto* p : params)
        if (p->trainable)
            for (auto& v : p->value) v += std::normal_distribution<double>(0.0, 0.1)(rng);

    auto x = random_tensor(in, rng);
    const auto out_shape = m.output_shape(in);
    const auto R = random_tensor(out_shape, rng);
    auto loss = [&](const Tensor<double>& input) {
        const auto y = m.forward(input, mode);
        double s = 0.0;
        for (std::size_t i = 0; i < y.data.size(); ++i) s += y.data[i] * R.data[i];
        return s;
    };

    for (auto* p : params) p->zero_grad();
    const auto y = m.forward(x, mode);
    ASSERT_EQ(y.shape, out_shape);
    const auto dx = m.backward(R);
    std::vector<nn::Buffer<double>> grads;
    for (auto* p : params) grads.push_back(p->grad);

    const double h = 1e-6;
    for (std::size_t i = 0; i < x.data.size(); i += std::max<std::size_t>(1, x.data.size() / 40)) {
        const double orig = x.data[i];
        x.data[i] = orig + h;
        const double up = loss(x);
        x.data[i] = orig - h;
        const double down = loss(x);
        x.data[i] = orig;
        EXPECT_LT(rel_err(dx.data[i], (up - down) / (2 * h)), tol) << "input " << i;
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto* p = params[k];
        if (!p->trainable) continue;
        for (std::size_t i = 0; i < p->size(); i += std::max<std::size_t>(1, p->size() / 25)) {
            const double orig = p->value[i];
            p->value[i] = orig + h;
            const double up = loss(x);
            p->value[i] = orig - h;
            const double down = loss(x);
            p->value[i] = orig;
            EXPECT_LT(rel_err(grads[k][i], (up - down) / (2 * h)), tol) << p->name << "[" << i << "]";
        }
    }
}

}  // namespace

TEST(Gradients, Conv2d) {
    Conv2d<double> conv(2, 3, 3, 1, 1, true);
    check_module_gradients(conv, {2, 2, 5, 6}, Mode::train, 1);
    Conv2d<double> strided(3, 2, 3, 2, 0, false);
    check_module_gradients(strided, {1, 3, 7, 7}, Mode::train, 2);
}

TEST(Gradients, Linear) {
    Linear<double> lin(7, 4);
    check_module_gradients(lin, {3, 7}, Mode::train, 3);
}

TEST(Gradients, MaxPool) {
    MaxPool2d<double> pool(2, 2);
    check_module_gradients(pool, {2, 2, 6, 6}, Mode::train, 4);
    MaxPool2d<double> ceil_pool(3, 2, 0, true);
    check_module_gradients(ceil_pool, {1, 2, 8, 8}, Mode::train, 5);
    MaxPool2d<double> padded(3, 2, 1);
    check_module_gradients(padded, {1, 1, 7, 7}, Mode::train, 6);
}

TEST(Gradients, BatchNormTrainAndEval) {
    BatchNorm2d<double> bn(3);
    check_module_gradients(bn, {4, 3, 3, 3}, Mode::train, 7);
    BatchNorm2d<double> bn_eval(2);
    check_module_gradients(bn_eval, {2, 2, 3, 3}, Mode::eval, 8);
}

TEST(Gradients, ReluFlattenGlobalPool) {
    Sequential<double> net;
    net.add<ReLU<double>>().add<GlobalAvgPool<double>>().add<Flatten<double>>();
    check_module_gradients(net, {2, 3, 4, 4}, Mode::train, 9);
}

TEST(Gradients, BasicBlockAndFire) {
    BasicBlock<double> same(3, 3, 1);
    check_module_gradients(same, {2, 3, 5, 5}, Mode::train, 10);
    BasicBlock<double> down(2, 4, 2);
    check_module_gradients(down, {2, 2, 6, 6}, Mode::train, 11);
    Fire<double> fire(4, 2, 3, 3);
    check_module_gradients(fire, {2, 4, 5, 5}, Mode::train, 12);
}

TEST(Gradients, TinyLenetEndToEnd) {
    FeatureExtractorConfig cfg;
    cfg.embedding_dim = 6;
    cfg.height = cfg.width = 16;
    auto net = make_extractor<double>(cfg);
    check_module_gradients(*net, {2, 3, 16, 16}, Mode::train, 13, 2e-3);
}

TEST(Gradients, AttentionHeadSmallDims) {
    // M = 4, L = 3, K = 5, loss = BCE on the bag logit.
    std::mt19937_64 rng(21);
    AttentionHead<double> head(4, 3);
    Rng init(22);
    head.init(init);
    Mat<double> H(5, 4);
    std::normal_distribution<double> d(0.0, 1.0);
    for (Eigen::Index i = 0; i < H.size(); ++i) H.data()[i] = d(rng);
    for (int label : {0, 1}) {
        std::vector<Param<double>*> params;
        head.collect(params);
        for (auto* p : params) p->zero_grad();
        const double logit = head.forward(H);
        const auto [loss, dlogit] = bce_with_logit(logit, label);
        (void)loss;
        const Mat<double> dH = head.backward(dlogit);
        auto f = [&]() { return bce_with_logit(head.logit(head.pool(H).embedding), label).first; };
        const double h = 1e-6;
        for (auto* p : params)
            for (std::size_t i = 0; i < p->size(); ++i) {
                const double o = p->value[i];
                p->value[i] = o + h;
                const double up = f();
                p->value[i] = o - h;
                const double down = f();
                p->value[i] = o;
                EXPECT_LT(rel_err(p->grad[i], (up - down) / (2 * h)), 1e-3) << p->name << i;
            }
        for (Eigen::Index i = 0; i < H.size(); ++i) {
            const double o = H.data()[i];
            H.data()[i] = o + h;
            const double up = f();
            H.data()[i] = o - h;
            const double down = f();
            H.data()[i] = o;
            EXPECT_LT(rel_err(dH.data()[i], (up - down) / (2 * h)), 1e-3) << "H" << i;
        }
    }
}

TEST(Attention, WeightsSumToOneAndPermutationInvariant) {
    std::mt19937_64 rng(5);
    AttentionHead<float> head(32, 16);
    Rng init(6);
    head.init(init);
    std::normal_distribution<float> d(0.0f, 1.0f);
    for (int K : {1, 2, 10, 1000}) {
        Mat<float> H(K, 32);
        for (Eigen::Index i = 0; i < H.size(); ++i) H.data()[i] = d(rng);
        const auto p = head.pool(H);
        EXPECT_NEAR(p.weights.sum(), 1.0f, 1e-6f) << K;
        EXPECT_TRUE((p.weights.array() >= 0).all());
        std::vector<int> perm(K);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        Mat<float> P(K, 32);
        for (int k = 0; k < K; ++k) P.row(k) = H.row(perm[k]);
        const auto q = head.pool(P);
        EXPECT_NEAR(head.predict(p.embedding), head.predict(q.embedding), 1e-5f) << K;
        for (int k = 0; k < K; ++k) EXPECT_NEAR(q.weights[k], p.weights[perm[k]], 1e-6f);
    }
}

TEST(Attention, SingleInstanceBagGetsFullWeight) {
    AttentionHead<double> head(4, 3);
    Rng init(1);
    head.init(init);
    Mat<double> H(1, 4);
    H << 1, 2, 3, 4;
    const auto p = head.pool(H);
    EXPECT_DOUBLE_EQ(p.weights[0], 1.0);
    EXPECT_TRUE(p.embedding.isApprox(H.row(0).transpose()));
    const double prob = head.predict(p.embedding);
    EXPECT_GT(prob, 0.0);
    EXPECT_LT(prob, 1.0);
}

TEST(Sil, SoftmaxIsAProbabilityPair) {
    const auto [n, p] = sil_softmax(2.0, -1.0);
    EXPECT_NEAR(n + p, 1.0, 1e-15);
    EXPECT_NEAR(p, 1.0 / (1.0 + std::exp(3.0)), 1e-15);
    const auto [n2, p2] = sil_softmax(1000.0, 0.0);
    EXPECT_TRUE(std::isfinite(n2) && std::isfinite(p2));
    EXPECT_EQ(sil_softmax(0.5, 0.5).second, 0.5);
}

TEST(Sil, CrossEntropyGradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(3);
    auto logits = random_tensor({5, 2}, rng);
    const std::vector<int> labels{0, 1, 1, 0, 1};
    Tensor<double> d;
    (void)softmax_cross_entropy(logits, labels, d);
    Tensor<double> scratch;
    for (std::size_t i = 0; i < logits.data.size(); ++i) {
        const double o = logits.data[i];
        logits.data[i] = o + 1e-6;
        const double up = softmax_cross_entropy(logits, labels, scratch);
        logits.data[i] = o - 1e-6;
        const double down = softmax_cross_entropy(logits, labels, scratch);
        logits.data[i] = o;
        EXPECT_LT(rel_err(d.data[i], (up - down) / 2e-6), 1e-4);
    }
}

TEST(Bce, StableAndCorrect) {
    const auto [l1, g1] = bce_with_logit(0.0, 1);
    EXPECT_NEAR(l1, std::log(2.0), 1e-15);
    EXPECT_NEAR(g1, -0.5, 1e-15);
    const auto [l2, g2] = bce_with_logit(-800.0, 1);
    EXPECT_NEAR(l2, 800.0, 1e-9);
    EXPECT_NEAR(g2, -1.0, 1e-12);
}

TEST(Extractors, OutputShapes) {
    for (auto arch : {Architecture::lenet, Architecture::resnet18, Architecture::squeezenet}) {
        FeatureExtractorConfig cfg;
        cfg.architecture = arch;
        cfg.width_divisor = arch == Architecture::lenet ? 1 : 8;
        auto net = make_extractor<float>(cfg);
        EXPECT_EQ(net->output_shape({3, 3, 80, 80}), (Shape{3, 500, 1, 1})) << to_string(arch);
        Rng rng(1);
        net->init(rng);
        Tensor<float> x({2, 3, 80, 80}, 0.5f);
        const auto y = net->forward(x, Mode::eval);
        EXPECT_EQ(y.shape.n, 2);
        EXPECT_EQ(y.shape.per_item(), 500u);
        for (float v : y.data) EXPECT_GE(v, 0.0f);
    }
    EXPECT_EQ(architecture_from_string("resnet18-style"), Architecture::resnet18);
    EXPECT_THROW(architecture_from_string("vgg"), ConfigError);
}

TEST(Extractors, LenetLayout) {
    // conv5 -> 76, pool -> 38, conv5 -> 34, pool -> 17: 50*17*17 inputs to the 500-unit layer.
    FeatureExtractorConfig cfg;
    auto net = make_extractor<float>(cfg);
    std::vector<Param<float>*> params;
    net->collect(params);
    ASSERT_EQ(params.size(), 6u);
    EXPECT_EQ(params[0]->dims, (std::vector<int>{20, 3, 5, 5}));
    EXPECT_EQ(params[2]->dims, (std::vector<int>{50, 20, 5, 5}));
    EXPECT_EQ(params[4]->dims, (std::vector<int>{500, 50 * 17 * 17}));
}

TEST(Model, InitIsSeededAndCheckpointRoundTrips) {
    testutil::TempDir dir("ckpt");
    FeatureExtractorConfig cfg;
    cfg.height = cfg.width = 28;
    cfg.embedding_dim = 20;
    Model<float> a(Method::abmil, cfg, 8), b(Method::abmil, cfg, 8), c(Method::abmil, cfg, 8);
    a.init(4);
    b.init(4);
    c.init(5);
    EXPECT_EQ(a.params()[0]->value, b.params()[0]->value);
    EXPECT_NE(a.params()[0]->value, c.params()[0]->value);
    save_checkpoint(dir.path() / "a.ckpt", a, {"abmil", "", 7, "digest", {}});
    const auto info = load_checkpoint(dir.path() / "a.ckpt", c);
    EXPECT_EQ(info.epoch, 7);
    EXPECT_EQ(info.rng_digest, "digest");
    const auto pa = a.params(), pc = c.params();
    for (std::size_t k = 0; k < pa.size(); ++k) EXPECT_EQ(pa[k]->value, pc[k]->value) << pa[k]->name;

    Model<float> sil(Method::sil, cfg);
    EXPECT_THROW(load_checkpoint(dir.path() / "a.ckpt", sil), FormatError);
    EXPECT_THROW(sil.attention(), ConfigError);
    testutil::TempDir junk("junk");
    write_text_file(junk.path() / "x.ckpt", "not a checkpoint");
    EXPECT_THROW(load_checkpoint(junk.path() / "x.ckpt", a), FormatError);
}

TEST(Model, AdamWMatchesHandComputedSteps) {
    Param<double> p("p", {2});
    p.value = {1.0, -2.0};
    AdamW<double> opt({&p}, 0.1, 0.01);
    const double g[2][2] = {{0.5, -1.0}, {0.25, 2.0}};
    double m[2] = {0, 0}, v[2] = {0, 0}, x[2] = {1.0, -2.0};
    for (int t = 1; t <= 2; ++t) {
        p.grad = {g[t - 1][0], g[t - 1][1]};
        opt.step();
        for (int i = 0; i < 2; ++i) {
            m[i] = 0.9 * m[i] + 0.1 * g[t - 1][i];
            v[i] = 0.999 * v[i] + 0.001 * g[t - 1][i] * g[t - 1][i];
            const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
            x[i] = x[i] - 0.1 * 0.01 * x[i] - 0.1 * mh / (std::sqrt(vh) + 1e-8);
            EXPECT_NEAR(p.value[i], x[i], 1e-12);
        }
    }
}

TEST(Tensor, BuffersAreAlignedForVectorizedReductions) {
    for (int n = 1; n < 40; n += 3) {
        Tensor<float> t(Shape{n, 3, 1, 1});
        Param<float> p("p", {n, 5});
        EXPECT_EQ(reinterpret_cast<std::uintptr_t>(t.data.data()) % EIGEN_MAX_ALIGN_BYTES, 0u);
        EXPECT_EQ(reinterpret_cast<std::uintptr_t>(p.value.data()) % EIGEN_MAX_ALIGN_BYTES, 0u);
        EXPECT_EQ(reinterpret_cast<std::uintptr_t>(p.grad.data()) % EIGEN_MAX_ALIGN_BYTES, 0u);
    }
}
