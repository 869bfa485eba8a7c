#ifndef RESMOCO_GRADCHECK_HPP
#define RESMOCO_GRADCHECK_HPP

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "resmoco/ops.hpp"

namespace resmoco {

struct GradCheckOptions {
    double step = 1e-5;
    double tolerance = 1e-4;
    // Denominator floor: below this magnitude the error is effectively absolute,
    // so analytically-zero gradients are not judged against rounding noise.
    double magnitude_floor = 1e-3;
};

struct GradCheckReport {
    double max_relative_error = 0.0;
    bool passed = true;
    std::size_t worst_leaf = 0;
    std::size_t worst_index = 0;
    std::size_t evaluated = 0;
    std::vector<std::vector<double>> analytic;
    std::vector<std::vector<double>> numeric;
};

inline double relative_error(double analytic, double numeric, double floor) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences, perturbing every element of every leaf in place.
template <typename T>
GradCheckReport check_gradients(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> leaves,
                                const GradCheckOptions& options = {}) {
    GradCheckReport report;
    for (auto& leaf : leaves) {
        leaf.set_requires_grad(true);
        leaf.zero_grad();
    }
    {
        Tape<T> tape;
        Tensor<T> loss = f();
        backward(loss);
    }
    NoGradGuard<T> no_grad;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        auto& leaf = leaves[li];
        const auto g = leaf.grad();
        std::vector<double> a(g.begin(), g.end());
        std::vector<double> n(a.size());
        auto values = leaf.mutable_values();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const T saved = values[i];
            values[i] = saved + static_cast<T>(options.step);
            const double up = static_cast<double>(f().item());
            values[i] = saved - static_cast<T>(options.step);
            const double down = static_cast<double>(f().item());
            values[i] = saved;
            n[i] = (up - down) / (2.0 * options.step);
            const double err = relative_error(a[i], n[i], options.magnitude_floor);
            ++report.evaluated;
            if (err > report.max_relative_error) {
                report.max_relative_error = err;
                report.worst_leaf = li;
                report.worst_index = i;
            }
        }
        report.analytic.push_back(std::move(a));
        report.numeric.push_back(std::move(n));
    }
    report.passed = report.max_relative_error <= options.tolerance;
    return report;
}

/// Single-input form: `f` receives the leaf being differentiated.
template <typename T>
GradCheckReport finite_diff_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x,
                                  double step, double tolerance) {
    Tensor<T> leaf = x.clone();
    GradCheckOptions options;
    options.step = step;
    options.tolerance = tolerance;
    return check_gradients<T>([&] { return f(leaf); }, {leaf}, options);
}

}  // namespace resmoco

#endif  // RESMOCO_GRADCHECK_HPP
