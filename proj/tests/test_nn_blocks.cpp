#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <set>

#include "resmoco/gradcheck.hpp"
#include "resmoco/nn.hpp"
#include "test_util.hpp"

using namespace resmoco;
using resmoco::testing::random_tensor;

namespace {

nn::EncoderSpec small_conv_spec() {
    nn::EncoderSpec spec;
    spec.backbone_kind = nn::BackboneKind::smallconv;
    spec.backbone_widths = {4, 6, 8};
    spec.input_channels = 3;
    spec.input_size = 8;
    spec.projector_hidden = 16;
    spec.projector_out = 12;
    spec.predictor_hidden = 16;
    return spec;
}

nn::EncoderSpec mlp_spec() {
    nn::EncoderSpec spec;
    spec.backbone_kind = nn::BackboneKind::mlp;
    spec.backbone_widths = {48, 64};
    spec.input_channels = 3;
    spec.input_size = 4;
    spec.projector_hidden = 32;
    spec.projector_out = 256;
    spec.predictor_hidden = 32;
    return spec;
}

template <typename T>
std::vector<unsigned char> parameter_bytes(const nn::Encoder<T>& enc) {
    std::vector<unsigned char> out;
    for (const auto& p : enc.params()) {
        const auto* b = reinterpret_cast<const unsigned char*>(p.value.values().data());
        out.insert(out.end(), b, b + p.value.numel() * sizeof(T));
    }
    return out;
}

}  // namespace

TEST(BuildEncoder, SameSeedGivesIdenticalBytes) {
    auto a = nn::build_encoder<float>(small_conv_spec(), 42);
    auto b = nn::build_encoder<float>(small_conv_spec(), 42);
    auto c = nn::build_encoder<float>(small_conv_spec(), 43);
    EXPECT_EQ(parameter_bytes(a), parameter_bytes(b));
    EXPECT_NE(parameter_bytes(a), parameter_bytes(c));
    EXPECT_EQ(nn::checksum(a), nn::checksum(b));
}

TEST(BuildEncoder, MlpShapes) {
    auto enc = nn::build_encoder<float>(mlp_spec(), 1);
    Rng rng(2);
    auto x = random_tensor<float>(Shape{5, 3, 4, 4}, rng);
    auto e = nn::encode(enc, x, nn::Mode::train);
    EXPECT_EQ(e.h.shape(), (Shape{5, 64}));
    EXPECT_EQ(e.z.shape(), (Shape{5, 256}));
    EXPECT_EQ(e.p.shape(), (Shape{5, 256}));
}

TEST(BuildEncoder, SmallConvPooledWidth) {
    auto enc = nn::build_encoder<float>(small_conv_spec(), 1);
    Rng rng(3);
    auto e = nn::encode(enc, random_tensor<float>(Shape{4, 3, 8, 8}, rng), nn::Mode::train);
    EXPECT_EQ(e.h.shape(), (Shape{4, 8}));
    EXPECT_EQ(e.z.shape(), (Shape{4, 12}));
    EXPECT_EQ(e.p.shape(), (Shape{4, 12}));
}

TEST(BuildEncoder, InvalidSpec) {
    auto spec = small_conv_spec();
    spec.projector_out = 1;
    EXPECT_THROW((void)nn::build_encoder<float>(spec, 0), Error);
    spec = small_conv_spec();
    spec.backbone_widths = {4, 0};
    EXPECT_THROW((void)nn::build_encoder<float>(spec, 0), Error);
}

TEST(BuildEncoder, RegistryIsCompleteAndFlagged) {
    for (const auto& spec : {small_conv_spec(), mlp_spec()}) {
        auto enc = nn::build_encoder<double>(spec, 5);
        std::set<std::string> names;
        std::size_t total = 0;
        for (const auto& p : enc.params()) {
            EXPECT_TRUE(names.insert(p.name).second) << "duplicate " << p.name;
            EXPECT_TRUE(p.value.requires_grad());
            total += p.value.numel();
            const bool is_bias_or_norm = p.name.ends_with(".bias") || p.name.ends_with(".gamma") || p.name.ends_with(".beta");
            EXPECT_EQ(p.exclude_from_adaptation, is_bias_or_norm) << p.name;
            EXPECT_EQ(p.no_weight_decay, is_bias_or_norm) << p.name;
        }
        EXPECT_EQ(total, enc.parameter_count());

        // Every trainable value receives a gradient, so the registry covers the forward graph.
        Rng rng(6);
        auto x = random_tensor<double>(Shape{4, 3, spec.input_size, spec.input_size}, rng);
        auto mix = random_tensor<double>(Shape{4, spec.projector_out}, rng);
        {
            Tape<double> tape;
            auto e = enc.encode(x, nn::Mode::train);
            backward(ops::sum(e.p * mix));
        }
        for (const auto& p : enc.params()) EXPECT_TRUE(p.value.has_grad()) << p.name;
    }
}

TEST(BuildEncoder, HeUniformBounds) {
    auto enc = nn::build_encoder<double>(small_conv_spec(), 9);
    for (const auto& p : enc.params()) {
        if (!p.name.ends_with(".weight")) continue;
        const auto& s = p.value.shape();
        const std::size_t fan_in = s.rank() == 4 ? s[1] * s[2] * s[3] : s[0];
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        for (double v : p.value.values()) EXPECT_LE(std::abs(v), bound) << p.name;
    }
    for (const auto& p : enc.params()) {
        if (p.name.ends_with(".bias") || p.name.ends_with(".beta")) {
            for (double v : p.value.values()) EXPECT_EQ(v, 0.0);
        } else if (p.name.ends_with(".gamma")) {
            for (double v : p.value.values()) EXPECT_EQ(v, 1.0);
        }
    }
}

TEST(BatchNorm, ConstantChannelTrainModeIsShift) {
    nn::BatchNormLayer<double> st;
    st.gamma = Tensor<double>::parameter(Shape{2}, {2.0, 3.0});
    st.beta = Tensor<double>::parameter(Shape{2}, {0.5, -1.0});
    st.running_mean = Tensor<double>::zeros(Shape{2});
    st.running_var = Tensor<double>::ones(Shape{2});
    auto x = Tensor<double>::full(Shape{3, 2, 2, 2}, 7.0);
    auto y = nn::batchnorm2d(x, st, nn::Mode::train);
    for (std::size_t n = 0; n < 3; ++n)
        for (std::size_t c = 0; c < 2; ++c)
            for (std::size_t k = 0; k < 4; ++k) EXPECT_DOUBLE_EQ(y.values()[(n * 2 + c) * 4 + k], c == 0 ? 0.5 : -1.0);
}

TEST(BatchNorm, EvalWithUnitStatsIsIdentity) {
    nn::BatchNormLayer<double> st;
    st.gamma = Tensor<double>::ones(Shape{3});
    st.beta = Tensor<double>::zeros(Shape{3});
    st.running_mean = Tensor<double>::zeros(Shape{3});
    st.running_var = Tensor<double>::ones(Shape{3});
    Rng rng(4);
    auto x = random_tensor<double>(Shape{2, 3, 4, 4}, rng);
    auto y = nn::batchnorm2d(x, st, nn::Mode::eval);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y[i], x[i] / std::sqrt(1.0 + 1e-5), 1e-15);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y[i], x[i], 1e-5);
}

TEST(BatchNorm, TrainOutputMoments) {
    nn::BatchNormLayer<double> st;
    st.gamma = Tensor<double>::ones(Shape{3});
    st.beta = Tensor<double>::zeros(Shape{3});
    st.running_mean = Tensor<double>::zeros(Shape{3});
    st.running_var = Tensor<double>::ones(Shape{3});
    Rng rng(8);
    auto x = random_tensor<double>(Shape{4, 3, 5, 5}, rng, -3, 5);
    auto y = nn::batchnorm2d(x, st, nn::Mode::train);
    for (std::size_t c = 0; c < 3; ++c) {
        double m = 0, v = 0, xm = 0, xv = 0;
        const double cnt = 4 * 25;
        for (std::size_t n = 0; n < 4; ++n)
            for (std::size_t k = 0; k < 25; ++k) {
                m += y.values()[(n * 3 + c) * 25 + k];
                xm += x.values()[(n * 3 + c) * 25 + k];
            }
        m /= cnt;
        xm /= cnt;
        for (std::size_t n = 0; n < 4; ++n)
            for (std::size_t k = 0; k < 25; ++k) {
                v += std::pow(y.values()[(n * 3 + c) * 25 + k] - m, 2);
                xv += std::pow(x.values()[(n * 3 + c) * 25 + k] - xm, 2);
            }
        v /= cnt;
        EXPECT_NEAR(m, 0.0, 1e-4);
        EXPECT_NEAR(v, 1.0, 1e-4);
        // running stats: momentum 0.1, unbiased variance
        EXPECT_NEAR(st.running_mean[c], 0.1 * xm, 1e-12);
        EXPECT_NEAR(st.running_var[c], 0.9 + 0.1 * xv / (cnt - 1), 1e-12);
    }
}

TEST(BatchNorm, BatchOfOneIsDegenerate) {
    nn::BatchNormLayer<double> st;
    st.gamma = Tensor<double>::ones(Shape{2});
    st.beta = Tensor<double>::zeros(Shape{2});
    st.running_mean = Tensor<double>::zeros(Shape{2});
    st.running_var = Tensor<double>::ones(Shape{2});
    try {
        (void)nn::batchnorm2d(Tensor<double>::ones(Shape{1, 2, 3, 3}), st, nn::Mode::train);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::degenerate_batch);
    }
    EXPECT_NO_THROW((void)nn::batchnorm2d(Tensor<double>::ones(Shape{1, 2, 3, 3}), st, nn::Mode::eval));
    EXPECT_THROW((void)nn::batchnorm2d(Tensor<double>::ones(Shape{2, 3, 3, 3}), st, nn::Mode::eval), Error);
}

TEST(Encode, ShapeContractAndErrors) {
    auto enc = nn::build_encoder<float>(small_conv_spec(), 1);
    EXPECT_THROW((void)nn::encode(enc, Tensor<float>::zeros(Shape{2, 3, 7, 7}), nn::Mode::eval), Error);
    EXPECT_THROW((void)nn::encode(enc, Tensor<float>::zeros(Shape{2, 1, 8, 8}), nn::Mode::eval), Error);
}

TEST(Encode, IdenticalRowsInEvalMode) {
    auto enc = nn::build_encoder<float>(small_conv_spec(), 11);
    Rng rng(12);
    auto one = random_tensor<float>(Shape{1, 3, 8, 8}, rng);
    std::vector<float> both(one.values().begin(), one.values().end());
    both.insert(both.end(), one.values().begin(), one.values().end());
    auto e = nn::encode(enc, Tensor<float>::from(Shape{2, 3, 8, 8}, both), nn::Mode::eval);
    for (std::size_t j = 0; j < 12; ++j) EXPECT_EQ(e.p.values()[j], e.p.values()[12 + j]);
}

TEST(Encode, EvalIsPure) {
    auto enc = nn::build_encoder<float>(small_conv_spec(), 13);
    Rng rng(14);
    auto x = random_tensor<float>(Shape{3, 3, 8, 8}, rng);
    const auto before = nn::checksum(enc);
    auto a = nn::encode(enc, x, nn::Mode::eval);
    auto b = nn::encode(enc, x, nn::Mode::eval);
    EXPECT_EQ(nn::checksum(enc), before);
    EXPECT_TRUE(std::equal(a.p.values().begin(), a.p.values().end(), b.p.values().begin()));
}

TEST(Encode, TrainModeUpdatesRunningStatsOnly) {
    auto enc = nn::build_encoder<float>(small_conv_spec(), 13);
    Rng rng(15);
    const auto params_before = parameter_bytes(enc);
    const auto before = nn::checksum(enc);
    (void)nn::encode(enc, random_tensor<float>(Shape{3, 3, 8, 8}, rng), nn::Mode::train);
    EXPECT_EQ(parameter_bytes(enc), params_before);
    EXPECT_NE(nn::checksum(enc), before);
}

TEST(Encode, NoPredictorMeansPEqualsZ) {
    auto spec = small_conv_spec();
    spec.use_predictor = false;
    auto enc = nn::build_encoder<float>(spec, 2);
    Rng rng(16);
    auto e = nn::encode(enc, random_tensor<float>(Shape{3, 3, 8, 8}, rng), nn::Mode::train);
    ASSERT_EQ(e.p.shape(), e.z.shape());
    EXPECT_TRUE(std::equal(e.p.values().begin(), e.p.values().end(), e.z.values().begin()));
    for (const auto& p : enc.params()) EXPECT_FALSE(p.name.starts_with("predictor")) << p.name;
}

TEST(CopyParameters, ExactCopyWithValueSemantics) {
    auto src = nn::build_encoder<float>(small_conv_spec(), 21);
    auto dst = nn::build_encoder<float>(small_conv_spec(), 22);
    Rng rng(23);
    (void)nn::encode(src, random_tensor<float>(Shape{4, 3, 8, 8}, rng), nn::Mode::train);  // non-trivial running stats
    nn::copy_parameters(src, dst);
    EXPECT_EQ(nn::max_abs_distance(src, dst), 0.0);
    for (std::size_t i = 0; i < src.buffers().size(); ++i) {
        EXPECT_TRUE(std::equal(src.buffers()[i].value.values().begin(), src.buffers()[i].value.values().end(),
                               dst.buffers()[i].value.values().begin()));
    }
    for (const auto& p : dst.params()) {
        for (float g : p.value.grad()) EXPECT_EQ(g, 0.0f);
    }
    const auto snapshot = nn::checksum(dst);
    src.params()[0].value.mutable_values()[0] += 1.0f;
    EXPECT_EQ(nn::checksum(dst), snapshot);
    EXPECT_GT(nn::max_abs_distance(src, dst), 0.0);
}

TEST(CopyParameters, SpecMismatch) {
    auto src = nn::build_encoder<float>(small_conv_spec(), 1);
    auto other = small_conv_spec();
    other.projector_hidden = 8;
    auto dst = nn::build_encoder<float>(other, 1);
    try {
        nn::copy_parameters(src, dst);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::spec_mismatch);
    }
}

TEST(EncoderGradient, MatchesFiniteDifferences) {
    auto spec = small_conv_spec();
    spec.backbone_widths = {3, 4};
    spec.input_size = 6;
    auto enc = nn::build_encoder<double>(spec, 31);
    Rng rng(32);
    auto x = random_tensor<double>(Shape{3, 3, 6, 6}, rng);
    auto mix = random_tensor<double>(Shape{3, spec.projector_out}, rng);
    std::vector<Tensor<double>> leaves;
    for (auto& p : enc.params()) leaves.push_back(p.value);
    GradCheckOptions opt;
    auto report = check_gradients<double>([&] { return ops::sum(enc.encode(x, nn::Mode::train, false).p * mix); }, leaves, opt);
    EXPECT_TRUE(report.passed) << report.max_relative_error << " at " << report.worst_leaf;
}
