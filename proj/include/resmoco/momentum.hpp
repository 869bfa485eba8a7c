#ifndef RESMOCO_MOMENTUM_HPP
#define RESMOCO_MOMENTUM_HPP

#include <cmath>
#include <cstdint>
#include <numbers>

#include "resmoco/nn.hpp"

namespace resmoco {

/// EMA coefficient ramp: beta_base at t = 0 rising to beta_final at t = total_steps
/// along a half cosine.
struct MomentumSchedule {
    double beta_base = 0.996;
    double beta_final = 1.0;
    std::int64_t total_steps = 1;

    void validate() const {
        require(beta_base > 0.0 && beta_base <= 1.0, ErrorKind::invalid_argument, "beta_base must be in (0,1]");
        require(beta_final >= beta_base && beta_final <= 1.0, ErrorKind::invalid_argument,
                "beta_final must be in [beta_base, 1]");
        require(total_steps >= 1, ErrorKind::invalid_argument, "total_steps must be >= 1");
    }
};

inline double beta_at(const MomentumSchedule& sched, std::int64_t t) {
    require(t >= 0 && t <= sched.total_steps, ErrorKind::invalid_argument,
            "step " + std::to_string(t) + " outside [0, " + std::to_string(sched.total_steps) + "]");
    const double ramp = (std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(sched.total_steps)) + 1.0) / 2.0;
    return sched.beta_final - (sched.beta_final - sched.beta_base) * ramp;
}

template <typename T>
struct TeacherState {
    nn::Encoder<T> encoder;
    std::int64_t step_of_last_update = -1;
};

/// Teacher starts as an exact copy of the student and never takes gradients.
template <typename T>
TeacherState<T> init_teacher(const nn::Encoder<T>& student) {
    TeacherState<T> teacher;
    teacher.encoder = nn::build_encoder<T>(student.spec(), 0);
    nn::copy_parameters(student, teacher.encoder);
    teacher.encoder.set_trainable(false);
    return teacher;
}

/// xi <- beta * xi + (1 - beta) * theta over parameters and running statistics.
template <typename T>
void ema_update(TeacherState<T>& teacher, const nn::Encoder<T>& student, double beta, std::int64_t step = -1) {
    require(beta > 0.0 && beta <= 1.0, ErrorKind::invalid_argument, "beta must be in (0,1]");
    require(teacher.encoder.spec() == student.spec(), ErrorKind::spec_mismatch, "teacher/student specs differ");
    const T keep = static_cast<T>(beta);
    const T take = static_cast<T>(1.0 - beta);
    auto blend = [keep, take](std::span<T> xi, std::span<const T> theta) {
        for (std::size_t i = 0; i < xi.size(); ++i) xi[i] = keep * xi[i] + take * theta[i];
    };
    auto& tp = teacher.encoder.params();
    for (std::size_t i = 0; i < tp.size(); ++i) blend(tp[i].value.mutable_values(), student.params()[i].value.values());
    auto& tb = teacher.encoder.buffers();
    for (std::size_t i = 0; i < tb.size(); ++i) blend(tb[i].value.mutable_values(), student.buffers()[i].value.values());
    teacher.step_of_last_update = step;
}

/// Teacher embeddings with recording suspended; running statistics are left untouched.
template <typename T>
nn::Embeddings<T> teacher_forward(TeacherState<T>& teacher, const Tensor<T>& x, nn::Mode mode) {
    NoGradGuard<T> no_grad;
    return teacher.encoder.encode(x, mode, false);
}

}  // namespace resmoco

#endif  // RESMOCO_MOMENTUM_HPP
