#ifndef RESMOCO_EVALKIT_HPP
#define RESMOCO_EVALKIT_HPP

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "resmoco/nn.hpp"
#include "resmoco/pipeline.hpp"

namespace resmoco::eval {

struct FeatureBank {
    std::size_t rows = 0;
    std::size_t dim = 0;
    std::vector<double> features;  // rows x dim
    std::vector<int> labels;
    int class_count = 0;
    std::string split;

    [[nodiscard]] const double* row(std::size_t i) const { return features.data() + i * dim; }
};

/// Backbone features of every image in `split`, computed in eval mode with
/// frozen parameters.
template <typename T>
FeatureBank extract_features(nn::Encoder<T>& enc, const data::Split& split, const data::Normalization& norm, int class_count,
                             const std::string& tag, nn::Mode mode = nn::Mode::eval, std::size_t chunk = 256) {
    require(mode == nn::Mode::eval, ErrorKind::mode_error, "feature extraction requires eval mode");
    FeatureBank bank;
    bank.rows = split.size();
    bank.dim = enc.spec().feature_dim();
    bank.labels = split.labels;
    bank.class_count = class_count;
    bank.split = tag;
    bank.features.resize(bank.rows * bank.dim);
    NoGradGuard<T> no_grad;
    for (std::size_t first = 0; first < bank.rows; first += chunk) {
        const std::size_t count = std::min(chunk, bank.rows - first);
        auto x = data::eval_batch<T>(split, norm, enc.spec().input_size, first, count);
        auto h = enc.backbone(x, nn::Mode::eval, false);
        std::copy(h.values().begin(), h.values().end(), bank.features.begin() + static_cast<std::ptrdiff_t>(first * bank.dim));
    }
    return bank;
}

/// Percent of rows whose label is among the k largest logits; equal logits
/// rank the lower class index first.
inline double topk_accuracy(const std::vector<double>& logits, std::size_t classes, const std::vector<int>& labels, std::size_t k) {
    require(k >= 1 && k <= classes, ErrorKind::invalid_argument, "k must be in [1, classes]");
    require(logits.size() == labels.size() * classes, ErrorKind::shape_mismatch, "logits do not match labels");
    if (labels.empty()) return 0.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto y = static_cast<std::size_t>(labels[i]);
        const double* r = logits.data() + i * classes;
        std::size_t ahead = 0;
        for (std::size_t j = 0; j < classes; ++j) {
            if (r[j] > r[y] || (r[j] == r[y] && j < y)) ++ahead;
        }
        correct += ahead < k;
    }
    return 100.0 * static_cast<double>(correct) / static_cast<double>(labels.size());
}

/// Cosine nearest neighbour; the lowest train index wins ties.
inline double knn1(const FeatureBank& train, const FeatureBank& test) {
    require(train.rows > 0 && test.rows > 0, ErrorKind::empty_bank, "knn1 needs nonempty banks");
    require(train.dim == test.dim, ErrorKind::shape_mismatch, "feature widths differ");
    using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    auto normalized = [](const FeatureBank& b) {
        Mat m = Eigen::Map<const Mat>(b.features.data(), static_cast<Eigen::Index>(b.rows), static_cast<Eigen::Index>(b.dim));
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            const double n = m.row(i).norm();
            if (n > 0) m.row(i) /= n;
        }
        return m;
    };
    const Mat a = normalized(train);
    const Mat q = normalized(test);
    std::size_t correct = 0;
    const Eigen::Index chunk = 512;
    for (Eigen::Index first = 0; first < q.rows(); first += chunk) {
        const Eigen::Index count = std::min(chunk, q.rows() - first);
        const Mat sim = q.middleRows(first, count) * a.transpose();
        for (Eigen::Index i = 0; i < count; ++i) {
            Eigen::Index best = 0;
            for (Eigen::Index j = 1; j < sim.cols(); ++j) {
                if (sim(i, j) > sim(i, best)) best = j;
            }
            correct += train.labels[static_cast<std::size_t>(best)] == test.labels[static_cast<std::size_t>(first + i)];
        }
    }
    return 100.0 * static_cast<double>(correct) / static_cast<double>(test.rows);
}

struct ProbeConfig {
    std::int64_t epochs = 100;
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 0.0;
    std::size_t batch_size = 256;
    std::uint64_t seed = 0;
};

struct ProbeResult {
    double top1 = 0.0;
    double top5 = 0.0;
};

/// Softmax regression on standardized frozen features, SGD with momentum and
/// a cosine learning-rate schedule.
inline ProbeResult linear_probe(const FeatureBank& train, const FeatureBank& test, const ProbeConfig& cfg) {
    require(train.class_count == test.class_count && train.class_count >= 2, ErrorKind::class_mismatch,
            "train has " + std::to_string(train.class_count) + " classes, test has " + std::to_string(test.class_count));
    require(train.dim == test.dim && train.rows > 0 && test.rows > 0, ErrorKind::shape_mismatch, "incompatible feature banks");
    using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const auto C = static_cast<Eigen::Index>(train.class_count);
    const auto F = static_cast<Eigen::Index>(train.dim);
    Mat xtr = Eigen::Map<const Mat>(train.features.data(), static_cast<Eigen::Index>(train.rows), F);
    Mat xte = Eigen::Map<const Mat>(test.features.data(), static_cast<Eigen::Index>(test.rows), F);
    const Eigen::RowVectorXd mu = xtr.colwise().mean();
    Eigen::RowVectorXd sd = ((xtr.rowwise() - mu).array().square().colwise().sum() / static_cast<double>(xtr.rows())).sqrt();
    for (Eigen::Index j = 0; j < F; ++j) sd(j) = std::max(sd(j), 1e-6);
    xtr = ((xtr.rowwise() - mu).array().rowwise() / sd.array()).matrix();
    xte = ((xte.rowwise() - mu).array().rowwise() / sd.array()).matrix();

    Mat w = Mat::Zero(F, C), vw = Mat::Zero(F, C);
    Eigen::RowVectorXd b = Eigen::RowVectorXd::Zero(C), vb = Eigen::RowVectorXd::Zero(C);
    const std::size_t n = train.rows;
    const std::size_t bs = std::min(cfg.batch_size, n);
    const std::size_t per_epoch = (n + bs - 1) / bs;
    const double total = static_cast<double>(per_epoch * static_cast<std::size_t>(cfg.epochs));
    std::size_t step = 0;
    for (std::int64_t e = 0; e < cfg.epochs; ++e) {
        const auto order = data::plan_epoch(n, 1, mix_seed(cfg.seed, static_cast<std::uint64_t>(e))).order;
        for (std::size_t first = 0; first < n; first += bs, ++step) {
            const std::size_t count = std::min(bs, n - first);
            Mat xb(static_cast<Eigen::Index>(count), F);
            Mat grad_logits = Mat::Zero(static_cast<Eigen::Index>(count), C);
            for (std::size_t i = 0; i < count; ++i) xb.row(static_cast<Eigen::Index>(i)) = xtr.row(static_cast<Eigen::Index>(order[first + i]));
            Mat logits = (xb * w).rowwise() + b;
            for (Eigen::Index i = 0; i < logits.rows(); ++i) {
                const double mx = logits.row(i).maxCoeff();
                Eigen::RowVectorXd p = (logits.row(i).array() - mx).exp();
                p /= p.sum();
                p(train.labels[order[first + static_cast<std::size_t>(i)]]) -= 1.0;
                grad_logits.row(i) = p / static_cast<double>(count);
            }
            const Mat gw = xb.transpose() * grad_logits + cfg.weight_decay * w;
            const Eigen::RowVectorXd gb = grad_logits.colwise().sum();
            const double lr = cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / total));
            vw = cfg.momentum * vw + gw;
            vb = cfg.momentum * vb + gb;
            w -= lr * vw;
            b -= lr * vb;
        }
    }
    const Mat logits = (xte * w).rowwise() + b;
    std::vector<double> flat(logits.data(), logits.data() + logits.size());
    const auto classes = static_cast<std::size_t>(C);
    return {topk_accuracy(flat, classes, test.labels, 1), topk_accuracy(flat, classes, test.labels, std::min<std::size_t>(5, classes))};
}

struct EvalReport {
    double top1 = 0.0;
    double top5 = 0.0;
    double knn1 = 0.0;
    std::string fingerprint;
    bool has_probe = true;
    bool has_knn = true;

    friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

/// Only the metrics that were computed are serialized.
inline void to_json(nlohmann::json& j, const EvalReport& r) {
    j = nlohmann::json{{"fingerprint", r.fingerprint}};
    if (r.has_probe) {
        j["top1"] = r.top1;
        j["top5"] = r.top5;
    }
    if (r.has_knn) j["knn1"] = r.knn1;
}

inline void from_json(const nlohmann::json& j, EvalReport& r) {
    j.at("fingerprint").get_to(r.fingerprint);
    r.has_probe = j.contains("top1");
    r.has_knn = j.contains("knn1");
    r.top1 = r.has_probe ? j.at("top1").get<double>() : 0.0;
    r.top5 = r.has_probe ? j.at("top5").get<double>() : 0.0;
    r.knn1 = r.has_knn ? j.at("knn1").get<double>() : 0.0;
}

struct EvalConfig {
    ProbeConfig probe;
    bool run_probe = true;
    bool run_knn = true;
};

/// Features from the center view of both splits, then probe and KNN-1.
template <typename T>
EvalReport evaluate(nn::Encoder<T>& enc, const data::DatasetHandle& ds, const EvalConfig& cfg, std::string fingerprint) {
    const auto train = extract_features(enc, ds.train, ds.norm, ds.class_count, "train");
    const auto test = extract_features(enc, ds.test, ds.norm, ds.class_count, "test");
    EvalReport r;
    r.fingerprint = std::move(fingerprint);
    r.has_probe = cfg.run_probe;
    r.has_knn = cfg.run_knn;
    if (cfg.run_probe) {
        const auto p = linear_probe(train, test, cfg.probe);
        r.top1 = p.top1;
        r.top5 = p.top5;
    }
    if (cfg.run_knn) r.knn1 = knn1(train, test);
    return r;
}

}  // namespace resmoco::eval

#endif  // RESMOCO_EVALKIT_HPP
