#ifndef RESMOCO_GRADCHECK_SUITE_HPP
#define RESMOCO_GRADCHECK_SUITE_HPP

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "resmoco/gradcheck.hpp"
#include "resmoco/nn.hpp"
#include "resmoco/objectives.hpp"
#include "resmoco/random.hpp"

namespace resmoco::gradsuite {

struct Row {
    std::string name;
    double max_relative_error = 0.0;
    std::size_t evaluated = 0;
    bool passed = true;
};

namespace detail {

using D = double;
using T64 = Tensor<D>;

/// Identity forward whose backward scales the gradient; stands in for a
/// wrong backward rule when testing that the suite catches one.
inline T64 faulty_identity(const T64& x) {
    std::vector<D> v(x.values().begin(), x.values().end());
    return ops::detail::make_op<D>("faulty_identity", x.shape(), std::move(v), {x}, [](Node<D>& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += 1.5 * self.grad[i];
    });
}

inline T64 rand_t(Rng& rng, const Shape& s, double lo = -1.0, double hi = 1.0) {
    std::vector<D> v(s.numel());
    for (auto& x : v) x = rng.uniform(lo, hi);
    return T64::from(s, std::move(v));
}

inline T64 away_from_zero(Rng& rng, const Shape& s, double lo, double hi) {
    std::vector<D> v(s.numel());
    for (auto& x : v) x = rng.bernoulli(0.5) ? rng.uniform(lo, hi) : -rng.uniform(lo, hi);
    return T64::from(s, std::move(v));
}

/// Scalar projection with fixed random weights so every output element
/// contributes a distinct coefficient.
inline T64 project(const T64& y, std::uint64_t seed) {
    Rng rng(seed);
    return ops::sum(ops::mul(y, rand_t(rng, y.shape())));
}

struct Case {
    std::string name;
    std::function<T64()> f;
    std::vector<T64> leaves;
};

inline nn::EncoderSpec graph_spec() {
    nn::EncoderSpec s;
    s.backbone_widths = {3, 4};
    s.input_size = 6;
    s.projector_hidden = 6;
    s.projector_out = 5;
    s.predictor_hidden = 6;
    return s;
}

inline std::vector<Case> build_cases(std::uint64_t seed) {
    std::vector<Case> cases;
    Rng rng(seed);
    auto add = [&](std::string name, std::vector<T64> leaves, std::function<T64()> f) {
        cases.push_back({std::move(name), std::move(f), std::move(leaves)});
    };
    {
        auto a = rand_t(rng, {3, 4}), b = rand_t(rng, {1, 4});
        add("add", {a, b}, [=] { return project(ops::add(a, b), 1); });
    }
    {
        auto a = rand_t(rng, {3, 4}), b = rand_t(rng, {3, 1});
        add("sub", {a, b}, [=] { return project(ops::sub(a, b), 2); });
    }
    {
        auto a = rand_t(rng, {2, 3, 4}), b = rand_t(rng, {3, 4});
        add("mul", {a, b}, [=] { return project(ops::mul(a, b), 3); });
    }
    {
        auto a = rand_t(rng, {3, 4}), b = away_from_zero(rng, {3, 4}, 0.5, 2.0);
        add("div", {a, b}, [=] { return project(ops::div(a, b), 4); });
    }
    {
        auto a = rand_t(rng, {3, 5}), b = rand_t(rng, {5, 2});
        add("matmul", {a, b}, [=] { return project(ops::matmul(a, b), 5); });
    }
    {
        auto a = rand_t(rng, {3, 5});
        add("transpose", {a}, [=] { return project(ops::transpose(a), 6); });
    }
    {
        auto a = rand_t(rng, {2, 6});
        add("reshape", {a}, [=] { return project(ops::reshape(a, Shape{3, 2, 2}), 7); });
    }
    {
        auto x = rand_t(rng, {2, 2, 5, 5}), w = rand_t(rng, {3, 2, 3, 3});
        add("conv2d", {x, w}, [=] { return project(ops::conv2d(x, w, 2, 1), 8); });
    }
    {
        auto a = away_from_zero(rng, {4, 5}, 0.1, 1.0);
        add("relu", {a}, [=] { return project(ops::relu(a), 9); });
    }
    {
        auto a = rand_t(rng, {3, 5}, -2, 2);
        add("softmax", {a}, [=] { return project(ops::softmax_t(a, 1, 0.7), 10); });
    }
    {
        auto a = rand_t(rng, {3, 5}, -2, 2);
        add("log_softmax", {a}, [=] { return project(ops::log_softmax_t(a, 0, 1.3), 11); });
    }
    {
        auto a = away_from_zero(rng, {4, 3}, 0.2, 1.0);
        add("l2_normalize", {a}, [=] { return project(ops::l2_normalize(a, 1), 12); });
    }
    {
        auto a = rand_t(rng, {3, 4});
        add("sum", {a}, [=] { return project(ops::sum(a, 1), 13); });
    }
    {
        auto a = rand_t(rng, {3, 4});
        add("mean", {a}, [=] { return project(ops::mean(a, 0), 14); });
    }
    {
        auto a = rand_t(rng, {4, 4});
        add("diagonal", {a}, [=] { return project(ops::diagonal(a), 15); });
    }
    {
        auto a = rand_t(rng, {2, 3, 3, 3});
        add("global_avg_pool", {a}, [=] { return project(ops::global_avg_pool(a), 16); });
    }
    {
        auto x = rand_t(rng, {4, 3, 2, 2}), g = rand_t(rng, {3}, 0.5, 1.5), b = rand_t(rng, {3});
        add("batch_norm_train", {x, g, b}, [=] { return project(ops::batch_norm_train(x, g, b, 1e-5), 17); });
    }
    {
        auto x = rand_t(rng, {4, 3}), g = rand_t(rng, {3}, 0.5, 1.5), b = rand_t(rng, {3});
        const std::vector<D> rm{0.1, -0.2, 0.3}, rv{0.5, 1.2, 0.8};
        add("batch_norm_eval", {x, g, b}, [=] {
            return project(ops::batch_norm_eval(x, g, b, std::span<const D>(rm), std::span<const D>(rv), 1e-5), 18);
        });
    }
    {
        auto q = rand_t(rng, {4, 5}), k = rand_t(rng, {4, 5});
        add("infonce", {q, k}, [=] { return infonce(q, k, 0.2); });
    }
    {
        auto q = rand_t(rng, {4, 5}), k = rand_t(rng, {4, 5});
        add("intra_gap_cosine", {q, k}, [=] { return intra_gap_cosine(q, k); });
    }
    // The CE and MSE distances hold the teacher side constant, so only q is a leaf.
    {
        auto q = rand_t(rng, {4, 5}), k = rand_t(rng, {4, 5});
        add("intra_gap_ce", {q}, [=] { return intra_gap_ce(q, k, 4.0); });
    }
    {
        auto q = rand_t(rng, {4, 5}), k = rand_t(rng, {4, 5});
        add("intra_gap_mse", {q}, [=] { return intra_gap_mse(q, k, 4.0); });
    }
    {
        // Full combined objective through student encoder, with a perturbed teacher.
        auto student = std::make_shared<nn::Encoder<D>>(nn::build_encoder<D>(graph_spec(), seed + 1));
        auto teacher = std::make_shared<nn::Encoder<D>>(nn::build_encoder<D>(graph_spec(), seed + 2));
        auto x1 = rand_t(rng, {4, 3, 6, 6}), x2 = rand_t(rng, {4, 3, 6, 6});
        std::vector<T64> leaves;
        for (auto& p : student->params()) leaves.push_back(p.value);
        ObjectiveConfig obj;
        obj.inter = InterLoss::infonce_ema;
        obj.intra = IntraLoss::cosine;
        add("res_moco_total", leaves, [=] {
            auto s1 = student->encode(x1, nn::Mode::train, false);
            auto s2 = student->encode(x2, nn::Mode::train, false);
            nn::Embeddings<D> t1, t2;
            {
                NoGradGuard<D> no_grad;
                t1 = teacher->encode(x1, nn::Mode::train, false);
                t2 = teacher->encode(x2, nn::Mode::train, false);
            }
            return total_loss(BatchEmbeddings<D>{s1.p, s2.p, s1.z, s2.z, t1.p, t2.p, t1.z, t2.z}, obj).total;
        });
    }
    return cases;
}

}  // namespace detail

/// Names of all cases in run order.
inline std::vector<std::string> case_names() {
    std::vector<std::string> names;
    for (const auto& c : detail::build_cases(0)) names.push_back(c.name);
    return names;
}

/// Runs every case in double precision. `fault` routes the named case's
/// output through a deliberately wrong backward rule.
inline std::vector<Row> run(const GradCheckOptions& options = {}, const std::optional<std::string>& fault = std::nullopt,
                            std::uint64_t seed = 7) {
    auto cases = detail::build_cases(seed);
    if (fault) {
        const bool known = std::any_of(cases.begin(), cases.end(), [&](const auto& c) { return c.name == *fault; });
        require(known, ErrorKind::invalid_argument, "unknown gradcheck case '" + *fault + "'");
    }
    std::vector<Row> rows;
    for (auto& c : cases) {
        std::function<detail::T64()> f = c.f;
        if (fault && c.name == *fault) f = [g = c.f] { return detail::faulty_identity(g()); };
        const auto rep = check_gradients<double>(f, c.leaves, options);
        rows.push_back({c.name, rep.max_relative_error, rep.evaluated, rep.passed});
    }
    return rows;
}

}  // namespace resmoco::gradsuite

#endif  // RESMOCO_GRADCHECK_SUITE_HPP
