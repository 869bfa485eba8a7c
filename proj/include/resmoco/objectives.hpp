#ifndef RESMOCO_OBJECTIVES_HPP
#define RESMOCO_OBJECTIVES_HPP

#include <cmath>
#include <string>
#include <string_view>

#include "resmoco/ops.hpp"

namespace resmoco {

enum class InterLoss { infonce_ema, infonce_noema, byol, simsiam, none };
enum class IntraLoss { none, cosine, ce, mse };

inline std::string_view to_string(InterLoss v) {
    switch (v) {
        case InterLoss::infonce_ema: return "infonce_ema";
        case InterLoss::infonce_noema: return "infonce_noema";
        case InterLoss::byol: return "byol";
        case InterLoss::simsiam: return "simsiam";
        case InterLoss::none: return "none";
    }
    return "?";
}

inline std::string_view to_string(IntraLoss v) {
    switch (v) {
        case IntraLoss::none: return "none";
        case IntraLoss::cosine: return "cosine";
        case IntraLoss::ce: return "ce";
        case IntraLoss::mse: return "mse";
    }
    return "?";
}

inline InterLoss parse_inter(std::string_view s) {
    for (auto v : {InterLoss::infonce_ema, InterLoss::infonce_noema, InterLoss::byol, InterLoss::simsiam, InterLoss::none}) {
        if (to_string(v) == s) return v;
    }
    throw Error(ErrorKind::invalid_argument, "unknown inter loss '" + std::string(s) + "'");
}

inline IntraLoss parse_intra(std::string_view s) {
    for (auto v : {IntraLoss::none, IntraLoss::cosine, IntraLoss::ce, IntraLoss::mse}) {
        if (to_string(v) == s) return v;
    }
    throw Error(ErrorKind::invalid_argument, "unknown intra loss '" + std::string(s) + "'");
}

struct ObjectiveConfig {
    InterLoss inter = InterLoss::infonce_ema;
    IntraLoss intra = IntraLoss::cosine;
    double tau = 0.2;
    double tau_s = 4.0;
    double intra_weight = 1.0;
    // Compare the student predictor with the teacher projector instead of the
    // teacher predictor (the asymmetric variant, off by default).
    bool asymmetric_intra = false;

    void validate() const {
        require(tau > 0.0, ErrorKind::invalid_argument, "tau must be positive");
        require(tau_s > 0.0, ErrorKind::invalid_argument, "tau_s must be positive");
        require(!(inter == InterLoss::none && intra == IntraLoss::none), ErrorKind::invalid_argument,
                "objective needs an inter or an intra term");
    }

    friend bool operator==(const ObjectiveConfig&, const ObjectiveConfig&) = default;
};

/// Student outputs for both views plus detached teacher outputs.
template <typename T>
struct BatchEmbeddings {
    Tensor<T> p1, p2;    // student predictor
    Tensor<T> z1, z2;    // student projector
    Tensor<T> p1m, p2m;  // teacher predictor
    Tensor<T> z1m, z2m;  // teacher projector
};

/// Mean over rows of -log softmax(q_i . k_j / tau)_ii, with q and k l2-normalized
/// and the other rows of k acting as negatives.
template <typename T>
Tensor<T> infonce(const Tensor<T>& q, const Tensor<T>& k, double tau) {
    require(q.shape().rank() == 2 && q.shape() == k.shape(), ErrorKind::shape_mismatch,
            "infonce needs matching (B,D) inputs, got " + q.shape().to_string() + " and " + k.shape().to_string());
    const std::size_t batch = q.shape()[0];
    require(batch >= 2, ErrorKind::invalid_argument, "infonce needs B >= 2 for in-batch negatives");
    auto logits = ops::matmul(ops::l2_normalize(q, 1), ops::transpose(ops::l2_normalize(k, 1)));
    auto log_prob = ops::diagonal(ops::log_softmax_t(logits, 1, static_cast<T>(tau)));
    return ops::mean(log_prob) * T(-1);
}

/// Mean of 2 - 2 cos(q_i, qm_i); range [0, 4].
template <typename T>
Tensor<T> intra_gap_cosine(const Tensor<T>& q, const Tensor<T>& qm) {
    require(q.shape() == qm.shape() && q.shape().rank() == 2, ErrorKind::shape_mismatch,
            "cosine distance needs matching (B,D) inputs");
    auto cos = ops::sum(ops::l2_normalize(q, 1) * ops::l2_normalize(qm, 1), 1);
    return ops::mean(T(2) - cos * T(2));
}

/// Mean of -sum P(q) log P(qm) with temperature softmax; the teacher side is constant.
template <typename T>
Tensor<T> intra_gap_ce(const Tensor<T>& q, const Tensor<T>& qm, double tau_s) {
    require(q.shape() == qm.shape() && q.shape().rank() == 2, ErrorKind::shape_mismatch,
            "cross-entropy distance needs matching (B,D) inputs");
    const T t = static_cast<T>(tau_s);
    auto target_log = ops::log_softmax_t(ops::detach(qm), 1, t);
    return ops::mean(ops::sum(ops::softmax_t(q, 1, t) * target_log, 1)) * T(-1);
}

/// Mean of 0.5 ||P(q) - P(qm)||^2; range [0, 1].
template <typename T>
Tensor<T> intra_gap_mse(const Tensor<T>& q, const Tensor<T>& qm, double tau_s) {
    require(q.shape() == qm.shape() && q.shape().rank() == 2, ErrorKind::shape_mismatch,
            "mse distance needs matching (B,D) inputs");
    const T t = static_cast<T>(tau_s);
    auto diff = ops::softmax_t(q, 1, t) - ops::softmax_t(ops::detach(qm), 1, t);
    return ops::mean(ops::sum(diff * diff, 1)) * T(0.5);
}

template <typename T>
Tensor<T> intra_distance(IntraLoss kind, const Tensor<T>& q, const Tensor<T>& qm, double tau_s) {
    switch (kind) {
        case IntraLoss::cosine: return intra_gap_cosine(q, qm);
        case IntraLoss::ce: return intra_gap_ce(q, qm, tau_s);
        case IntraLoss::mse: return intra_gap_mse(q, qm, tau_s);
        case IntraLoss::none: break;
    }
    throw Error(ErrorKind::invalid_argument, "intra distance requested with intra = none");
}

/// Symmetrized InfoNCE: student predictor queries against teacher projector keys.
template <typename T>
Tensor<T> inter_moco(const BatchEmbeddings<T>& be, double tau) {
    return (infonce(be.p1, ops::detach(be.z2m), tau) + infonce(be.p2, ops::detach(be.z1m), tau)) * T(0.5);
}

/// Momentum-free variant: keys are the student's own detached projections.
template <typename T>
Tensor<T> cl_no_ema(const BatchEmbeddings<T>& be, double tau) {
    return (infonce(be.p1, ops::detach(be.z2), tau) + infonce(be.p2, ops::detach(be.z1), tau)) * T(0.5);
}

/// Same-view distance between student and teacher, averaged over both views.
template <typename T>
Tensor<T> intra_m(const BatchEmbeddings<T>& be, const ObjectiveConfig& cfg) {
    require(cfg.intra != IntraLoss::none, ErrorKind::invalid_argument, "intra_m with intra = none");
    const Tensor<T>& t1 = cfg.asymmetric_intra ? be.z1m : be.p1m;
    const Tensor<T>& t2 = cfg.asymmetric_intra ? be.z2m : be.p2m;
    return (intra_distance(cfg.intra, be.p1, ops::detach(t1), cfg.tau_s) +
            intra_distance(cfg.intra, be.p2, ops::detach(t2), cfg.tau_s)) *
           T(0.5);
}

template <typename T>
Tensor<T> byol_inter(const BatchEmbeddings<T>& be) {
    return (intra_gap_cosine(be.p1, ops::detach(be.z2m)) + intra_gap_cosine(be.p2, ops::detach(be.z1m))) * T(0.5);
}

template <typename T>
Tensor<T> simsiam_inter(const BatchEmbeddings<T>& be) {
    return (intra_gap_cosine(be.p1, ops::detach(be.z2)) + intra_gap_cosine(be.p2, ops::detach(be.z1))) * T(0.5);
}

template <typename T>
struct LossParts {
    Tensor<T> total;
    double inter = 0.0;
    double intra = 0.0;
};

/// inter term + intra_weight * intra term; a `none` term contributes 0.
template <typename T>
LossParts<T> total_loss(const BatchEmbeddings<T>& be, const ObjectiveConfig& cfg) {
    cfg.validate();
    LossParts<T> parts;
    Tensor<T> inter;
    switch (cfg.inter) {
        case InterLoss::infonce_ema: inter = inter_moco(be, cfg.tau); break;
        case InterLoss::infonce_noema: inter = cl_no_ema(be, cfg.tau); break;
        case InterLoss::byol: inter = byol_inter(be); break;
        case InterLoss::simsiam: inter = simsiam_inter(be); break;
        case InterLoss::none: break;
    }
    Tensor<T> intra;
    if (cfg.intra != IntraLoss::none) intra = intra_m(be, cfg);
    if (inter.defined()) parts.inter = static_cast<double>(inter.item());
    if (intra.defined()) parts.intra = static_cast<double>(intra.item());
    if (inter.defined() && intra.defined()) {
        parts.total = inter + intra * static_cast<T>(cfg.intra_weight);
    } else if (inter.defined()) {
        parts.total = inter;
    } else {
        parts.total = intra * static_cast<T>(cfg.intra_weight);
    }
    return parts;
}

}  // namespace resmoco

#endif  // RESMOCO_OBJECTIVES_HPP
