#ifndef RESMOCO_NN_HPP
#define RESMOCO_NN_HPP

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "resmoco/ops.hpp"
#include "resmoco/random.hpp"

namespace resmoco::nn {

enum class BackboneKind { mlp, smallconv };
enum class Mode { train, eval };

inline constexpr double bn_momentum = 0.1;
inline constexpr double bn_eps = 1e-5;

/// Student/teacher architecture. The backbone maps images to features h, the
/// projector maps h to z and the optional predictor maps z to p.
struct EncoderSpec {
    BackboneKind backbone_kind = BackboneKind::smallconv;
    std::vector<std::size_t> backbone_widths{32, 64, 128};
    std::size_t input_channels = 3;
    std::size_t input_size = 32;
    std::size_t projector_hidden = 512;
    std::size_t projector_out = 256;
    std::size_t predictor_hidden = 512;
    bool use_predictor = true;

    void validate() const {
        require(!backbone_widths.empty(), ErrorKind::invalid_argument, "backbone needs at least one layer");
        for (auto w : backbone_widths) {
            require(w >= 1, ErrorKind::invalid_argument, "backbone widths must be >= 1");
        }
        require(input_channels >= 1 && input_size >= 1, ErrorKind::invalid_argument, "input geometry must be >= 1");
        require(projector_hidden >= 1 && predictor_hidden >= 1, ErrorKind::invalid_argument,
                "head widths must be >= 1");
        require(projector_out >= 2, ErrorKind::invalid_argument, "projector output must be >= 2");
        if (backbone_kind == BackboneKind::smallconv) {
            std::size_t size = input_size;
            for (std::size_t i = 0; i < backbone_widths.size(); ++i) size = (size + 2 - 3) / 2 + 1;
            require(size >= 1 && input_size >= 2, ErrorKind::invalid_argument, "input too small for smallconv");
        }
    }

    [[nodiscard]] std::size_t feature_dim() const { return backbone_widths.back(); }

    friend bool operator==(const EncoderSpec&, const EncoderSpec&) = default;
};

template <typename T>
struct ParamTensor {
    std::string name;
    Tensor<T> value;
    // LARS trust-ratio adaptation and weight decay are skipped for biases and norm parameters.
    bool exclude_from_adaptation = false;
    bool no_weight_decay = false;
};

/// Non-trainable state (batch-norm running statistics).
template <typename T>
struct BufferTensor {
    std::string name;
    Tensor<T> value;
};

template <typename T>
struct BatchNormLayer {
    Tensor<T> gamma, beta;
    Tensor<T> running_mean, running_var;
};

template <typename T>
struct LinearLayer {
    Tensor<T> weight;  // (in, out)
    Tensor<T> bias;    // (out)
};

template <typename T>
struct Embeddings {
    Tensor<T> h;  // backbone features
    Tensor<T> z;  // projector output
    Tensor<T> p;  // predictor output, or z when the predictor is disabled
};

template <typename T>
class Encoder {
public:
    Encoder() = default;
    Encoder(const Encoder&) = delete;
    Encoder& operator=(const Encoder&) = delete;
    Encoder(Encoder&&) noexcept = default;
    Encoder& operator=(Encoder&&) noexcept = default;

    [[nodiscard]] const EncoderSpec& spec() const { return spec_; }
    [[nodiscard]] std::vector<ParamTensor<T>>& params() { return params_; }
    [[nodiscard]] const std::vector<ParamTensor<T>>& params() const { return params_; }
    [[nodiscard]] std::vector<BufferTensor<T>>& buffers() { return buffers_; }
    [[nodiscard]] const std::vector<BufferTensor<T>>& buffers() const { return buffers_; }

    [[nodiscard]] std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.value.numel();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.value.zero_grad();
    }

    void set_trainable(bool flag) {
        for (auto& p : params_) p.value.set_requires_grad(flag);
    }

    Tensor<T> backbone(const Tensor<T>& x, Mode mode, bool update_stats) {
        if (spec_.backbone_kind == BackboneKind::smallconv) {
            require(x.shape().rank() == 4 && x.shape()[1] == spec_.input_channels &&
                        x.shape()[2] == spec_.input_size && x.shape()[3] == spec_.input_size,
                    ErrorKind::shape_mismatch, "encoder expects (N," + std::to_string(spec_.input_channels) + "," +
                                                   std::to_string(spec_.input_size) + "," +
                                                   std::to_string(spec_.input_size) + "), got " +
                                                   x.shape().to_string());
            Tensor<T> a = x;
            for (std::size_t i = 0; i < conv_.size(); ++i) {
                a = ops::relu(batch_norm(ops::conv2d(a, conv_[i], 2, 1), backbone_bn_[i], mode, update_stats));
            }
            return ops::global_avg_pool(a);
        }
        const std::size_t in = spec_.input_channels * spec_.input_size * spec_.input_size;
        require(x.shape()[0] >= 1 && x.numel() == x.shape()[0] * in, ErrorKind::shape_mismatch,
                "encoder expects " + std::to_string(in) + " features per sample, got " + x.shape().to_string());
        Tensor<T> a = x.shape().rank() == 2 ? x : ops::reshape(x, Shape{x.shape()[0], in});
        for (std::size_t i = 0; i < fc_.size(); ++i) {
            a = ops::relu(batch_norm(linear(a, fc_[i]), backbone_bn_[i], mode, update_stats));
        }
        return a;
    }

    Embeddings<T> encode(const Tensor<T>& x, Mode mode, bool update_stats = true) {
        Embeddings<T> out;
        out.h = backbone(x, mode, update_stats);
        out.z = linear(ops::relu(batch_norm(linear(out.h, proj_fc0_), proj_bn_, mode, update_stats)), proj_fc1_);
        if (spec_.use_predictor) {
            out.p = linear(ops::relu(batch_norm(linear(out.z, pred_fc0_), pred_bn_, mode, update_stats)), pred_fc1_);
        } else {
            out.p = out.z;
        }
        return out;
    }

    static Tensor<T> linear(const Tensor<T>& x, const LinearLayer<T>& layer) {
        return ops::matmul(x, layer.weight) + layer.bias;
    }

    /// Batch norm against a layer's state. Training mode normalizes by batch
    /// moments and, when `update_stats`, folds them into the running statistics.
    static Tensor<T> batch_norm(const Tensor<T>& x, BatchNormLayer<T>& state, Mode mode, bool update_stats) {
        const std::size_t channels = x.shape().rank() >= 2 ? x.shape()[1] : 0;
        require(channels == state.gamma.numel(), ErrorKind::shape_mismatch,
                "batch norm channel count " + std::to_string(channels) + " does not match state " +
                    std::to_string(state.gamma.numel()));
        const T eps = static_cast<T>(bn_eps);
        if (mode == Mode::eval) {
            return ops::batch_norm_eval(x, state.gamma, state.beta, state.running_mean.values(),
                                        state.running_var.values(), eps);
        }
        ops::BatchMoments<T> moments;
        auto y = ops::batch_norm_train(x, state.gamma, state.beta, eps, &moments);
        if (update_stats) {
            const T m = static_cast<T>(bn_momentum);
            const T unbias = static_cast<T>(moments.count) / static_cast<T>(moments.count - 1);
            auto rm = state.running_mean.mutable_values();
            auto rv = state.running_var.mutable_values();
            for (std::size_t c = 0; c < rm.size(); ++c) {
                rm[c] = (T(1) - m) * rm[c] + m * moments.mean[c];
                rv[c] = (T(1) - m) * rv[c] + m * moments.var[c] * unbias;
            }
        }
        return y;
    }

    static Encoder build(const EncoderSpec& spec, std::uint64_t seed) {
        spec.validate();
        Encoder enc;
        enc.spec_ = spec;
        Rng rng(seed);
        std::size_t in = spec.input_channels;
        if (spec.backbone_kind == BackboneKind::smallconv) {
            for (std::size_t i = 0; i < spec.backbone_widths.size(); ++i) {
                const std::size_t out = spec.backbone_widths[i];
                const std::string prefix = "backbone.conv" + std::to_string(i);
                enc.conv_.push_back(enc.he_uniform(prefix + ".weight", Shape{out, in, 3, 3}, in * 9, rng));
                enc.backbone_bn_.push_back(enc.make_bn("backbone.bn" + std::to_string(i), out));
                in = out;
            }
        } else {
            in = spec.input_channels * spec.input_size * spec.input_size;
            for (std::size_t i = 0; i < spec.backbone_widths.size(); ++i) {
                const std::size_t out = spec.backbone_widths[i];
                enc.fc_.push_back(enc.make_linear("backbone.fc" + std::to_string(i), in, out, rng));
                enc.backbone_bn_.push_back(enc.make_bn("backbone.bn" + std::to_string(i), out));
                in = out;
            }
        }
        enc.proj_fc0_ = enc.make_linear("projector.fc0", spec.feature_dim(), spec.projector_hidden, rng);
        enc.proj_bn_ = enc.make_bn("projector.bn0", spec.projector_hidden);
        enc.proj_fc1_ = enc.make_linear("projector.fc1", spec.projector_hidden, spec.projector_out, rng);
        if (spec.use_predictor) {
            enc.pred_fc0_ = enc.make_linear("predictor.fc0", spec.projector_out, spec.predictor_hidden, rng);
            enc.pred_bn_ = enc.make_bn("predictor.bn0", spec.predictor_hidden);
            enc.pred_fc1_ = enc.make_linear("predictor.fc1", spec.predictor_hidden, spec.projector_out, rng);
        }
        return enc;
    }

private:
    Tensor<T> he_uniform(const std::string& name, const Shape& shape, std::size_t fan_in, Rng& rng) {
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        std::vector<T> values(shape.numel());
        for (auto& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
        auto t = Tensor<T>::parameter(shape, std::move(values));
        params_.push_back({name, t, false, false});
        return t;
    }

    Tensor<T> flagged_parameter(const std::string& name, std::size_t n, T fill) {
        auto t = Tensor<T>::parameter(Shape{n}, std::vector<T>(n, fill));
        params_.push_back({name, t, true, true});
        return t;
    }

    LinearLayer<T> make_linear(const std::string& prefix, std::size_t in, std::size_t out, Rng& rng) {
        LinearLayer<T> layer;
        layer.weight = he_uniform(prefix + ".weight", Shape{in, out}, in, rng);
        layer.bias = flagged_parameter(prefix + ".bias", out, T(0));
        return layer;
    }

    BatchNormLayer<T> make_bn(const std::string& prefix, std::size_t channels) {
        BatchNormLayer<T> bn;
        bn.gamma = flagged_parameter(prefix + ".gamma", channels, T(1));
        bn.beta = flagged_parameter(prefix + ".beta", channels, T(0));
        bn.running_mean = Tensor<T>::zeros(Shape{channels});
        bn.running_var = Tensor<T>::ones(Shape{channels});
        buffers_.push_back({prefix + ".running_mean", bn.running_mean});
        buffers_.push_back({prefix + ".running_var", bn.running_var});
        return bn;
    }

    EncoderSpec spec_;
    std::vector<Tensor<T>> conv_;
    std::vector<LinearLayer<T>> fc_;
    std::vector<BatchNormLayer<T>> backbone_bn_;
    LinearLayer<T> proj_fc0_, proj_fc1_, pred_fc0_, pred_fc1_;
    BatchNormLayer<T> proj_bn_, pred_bn_;
    std::vector<ParamTensor<T>> params_;
    std::vector<BufferTensor<T>> buffers_;
};

template <typename T>
Encoder<T> build_encoder(const EncoderSpec& spec, std::uint64_t seed) {
    return Encoder<T>::build(spec, seed);
}

template <typename T>
Embeddings<T> encode(Encoder<T>& enc, const Tensor<T>& x, Mode mode) {
    return enc.encode(x, mode);
}

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, BatchNormLayer<T>& state, Mode mode) {
    return Encoder<T>::batch_norm(x, state, mode, true);
}

/// dst <- src for every parameter and running statistic; dst gradients are cleared.
template <typename T>
void copy_parameters(const Encoder<T>& src, Encoder<T>& dst) {
    require(src.spec() == dst.spec(), ErrorKind::spec_mismatch, "copy_parameters between different encoder specs");
    for (std::size_t i = 0; i < src.params().size(); ++i) {
        auto from = src.params()[i].value.values();
        auto to = dst.params()[i].value.mutable_values();
        std::copy(from.begin(), from.end(), to.begin());
        dst.params()[i].value.zero_grad();
    }
    for (std::size_t i = 0; i < src.buffers().size(); ++i) {
        auto from = src.buffers()[i].value.values();
        auto to = dst.buffers()[i].value.mutable_values();
        std::copy(from.begin(), from.end(), to.begin());
    }
}

/// Content hash of every parameter and buffer value.
template <typename T>
std::uint64_t checksum(const Encoder<T>& enc) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : enc.params()) h = fnv1a(p.value.values().data(), p.value.numel() * sizeof(T), h);
    for (const auto& b : enc.buffers()) h = fnv1a(b.value.values().data(), b.value.numel() * sizeof(T), h);
    return h;
}

/// Largest absolute difference over all parameters and buffers.
template <typename T>
double max_abs_distance(const Encoder<T>& a, const Encoder<T>& b) {
    require(a.spec() == b.spec(), ErrorKind::spec_mismatch, "distance between different encoder specs");
    double d = 0;
    auto scan = [&d](std::span<const T> x, std::span<const T> y) {
        for (std::size_t i = 0; i < x.size(); ++i) d = std::max(d, std::abs(static_cast<double>(x[i]) - y[i]));
    };
    for (std::size_t i = 0; i < a.params().size(); ++i) scan(a.params()[i].value.values(), b.params()[i].value.values());
    for (std::size_t i = 0; i < a.buffers().size(); ++i) scan(a.buffers()[i].value.values(), b.buffers()[i].value.values());
    return d;
}

}  // namespace resmoco::nn

#endif  // RESMOCO_NN_HPP
