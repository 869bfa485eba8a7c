#ifndef RESMOCO_TRAINER_HPP
#define RESMOCO_TRAINER_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "resmoco/momentum.hpp"
#include "resmoco/objectives.hpp"
#include "resmoco/optim.hpp"
#include "resmoco/pipeline.hpp"

namespace resmoco {

enum class BetaMode { cosine_ramp, fixed };
enum class OptimizerKind { lars, sgd };

inline std::string_view to_string(BetaMode m) { return m == BetaMode::fixed ? "fixed" : "cosine_ramp"; }
inline std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "lars"; }

inline BetaMode parse_beta_mode(std::string_view s) {
    if (s == "cosine_ramp") return BetaMode::cosine_ramp;
    if (s == "fixed") return BetaMode::fixed;
    throw Error(ErrorKind::invalid_argument, "unknown beta mode '" + std::string(s) + "'");
}

inline OptimizerKind parse_optimizer(std::string_view s) {
    if (s == "lars") return OptimizerKind::lars;
    if (s == "sgd") return OptimizerKind::sgd;
    throw Error(ErrorKind::invalid_argument, "unknown optimizer '" + std::string(s) + "'");
}

struct TrainConfig {
    double lr = 0.3;
    double eta_lars = 0.02;
    double weight_decay = 1e-6;
    double momentum = 0.9;
    OptimizerKind optimizer = OptimizerKind::lars;
    std::size_t batch_size = 256;
    std::int64_t epochs = 100;
    std::int64_t warmup_epochs = 10;
    double beta_base = 0.996;
    BetaMode beta_mode = BetaMode::cosine_ramp;
    ObjectiveConfig objective;
    std::uint64_t seed = 0;
    // Equal-length on/off phases for the intra term, starting on; 0 disables.
    std::int64_t intra_toggle_period = 0;
    nn::EncoderSpec encoder;
    data::AugmentParams view1 = data::AugmentParams::view1();
    data::AugmentParams view2 = data::AugmentParams::view2();

    void validate() const {
        require(lr > 0.0, ErrorKind::invalid_argument, "lr must be positive");
        require(epochs >= 1, ErrorKind::invalid_argument, "epochs must be >= 1");
        require(warmup_epochs >= 0 && warmup_epochs < epochs, ErrorKind::invalid_argument, "warmup_epochs must be in [0, epochs)");
        require(batch_size >= 2, ErrorKind::invalid_argument, "batch_size must be >= 2");
        require(beta_base > 0.0 && beta_base <= 1.0, ErrorKind::invalid_argument, "beta_base must be in (0,1]");
        require(momentum >= 0.0 && momentum < 1.0, ErrorKind::invalid_argument, "momentum must be in [0,1)");
        require(weight_decay >= 0.0 && eta_lars > 0.0, ErrorKind::invalid_argument, "weight_decay >= 0 and eta_lars > 0 required");
        require(intra_toggle_period >= 0, ErrorKind::invalid_argument, "intra_toggle_period must be >= 0");
        require(intra_toggle_period == 0 || objective.inter != InterLoss::none, ErrorKind::invalid_argument,
                "intra toggling needs an inter term for the off-phases");
        require(view1.crop_size == encoder.input_size && view2.crop_size == encoder.input_size, ErrorKind::invalid_argument,
                "crop size must match the encoder input size");
        objective.validate();
        encoder.validate();
        view1.validate();
        view2.validate();
    }

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct StepSchedule {
    std::int64_t steps_per_epoch = 1;
    std::int64_t total_steps = 1;
    std::int64_t warmup_steps = 0;
};

inline StepSchedule make_schedule(const TrainConfig& cfg, std::size_t dataset_size) {
    require(cfg.batch_size <= dataset_size, ErrorKind::batch_too_large,
            "batch size " + std::to_string(cfg.batch_size) + " exceeds dataset size " + std::to_string(dataset_size));
    StepSchedule s;
    s.steps_per_epoch = static_cast<std::int64_t>(dataset_size / cfg.batch_size);
    s.total_steps = s.steps_per_epoch * cfg.epochs;
    s.warmup_steps = s.steps_per_epoch * cfg.warmup_epochs;
    return s;
}

/// Linear warmup from 0, then half-cosine decay to 0 at the final step.
inline double lr_at(const TrainConfig& cfg, const StepSchedule& s, std::int64_t step) {
    require(step >= 0 && step <= s.total_steps, ErrorKind::invalid_argument, "step outside the run");
    if (step < s.warmup_steps) return cfg.lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
    const double progress = static_cast<double>(step - s.warmup_steps) / static_cast<double>(s.total_steps - s.warmup_steps);
    return cfg.lr * (std::cos(std::numbers::pi * progress) + 1.0) / 2.0;
}

inline double beta_for_step(const TrainConfig& cfg, const StepSchedule& s, std::int64_t step) {
    if (cfg.beta_mode == BetaMode::fixed) return cfg.beta_base;
    return beta_at(MomentumSchedule{cfg.beta_base, 1.0, s.total_steps}, step);
}

inline bool intra_active(const TrainConfig& cfg, std::int64_t step) {
    return cfg.intra_toggle_period == 0 || (step / cfg.intra_toggle_period) % 2 == 0;
}

struct GapRecord {
    std::int64_t step = 0;
    double intra_gap = 0.0;  // cosine distance between p and p_m, mean of both views
    double sim_pct = 100.0;
    double inter_loss = 0.0;
    double intra_loss = 0.0;
    double total_loss = 0.0;
    double beta = 0.0;
    double lr = 0.0;
    bool intra_active = true;

    friend bool operator==(const GapRecord&, const GapRecord&) = default;
};

template <typename T>
struct TrainState {
    nn::Encoder<T> student;
    TeacherState<T> teacher;
    OptimizerState<T> optimizer;
    std::int64_t step = 0;
};

template <typename T>
TrainState<T> init_train_state(const TrainConfig& cfg) {
    cfg.validate();
    TrainState<T> st;
    st.student = nn::build_encoder<T>(cfg.encoder, cfg.seed);
    st.teacher = init_teacher(st.student);
    st.optimizer.ensure(st.student.params());
    return st;
}

/// One update: forwards, loss, backward, optimizer, then EMA.
template <typename T>
GapRecord train_step(TrainState<T>& st, const data::PretrainBatch<T>& batch, const TrainConfig& cfg, const StepSchedule& sched) {
    const std::int64_t step = st.step;
    GapRecord rec;
    rec.step = step;
    rec.lr = lr_at(cfg, sched, step);
    rec.beta = beta_for_step(cfg, sched, step);
    rec.intra_active = intra_active(cfg, step);

    ObjectiveConfig obj = cfg.objective;
    if (!rec.intra_active) obj.intra = IntraLoss::none;
    {
        Tape<T> tape;
        auto s1 = st.student.encode(batch.x1, nn::Mode::train);
        auto s2 = st.student.encode(batch.x2, nn::Mode::train);
        auto t1 = teacher_forward(st.teacher, batch.x1, nn::Mode::train);
        auto t2 = teacher_forward(st.teacher, batch.x2, nn::Mode::train);
        BatchEmbeddings<T> be{s1.p, s2.p, s1.z, s2.z, t1.p, t2.p, t1.z, t2.z};
        auto parts = total_loss(be, obj);
        rec.inter_loss = parts.inter;
        rec.intra_loss = parts.intra;
        rec.total_loss = static_cast<double>(parts.total.item());
        require(std::isfinite(rec.total_loss), ErrorKind::non_finite,
                "non-finite loss at step " + std::to_string(step) + " (inter " + std::to_string(rec.inter_loss) + ", intra " +
                    std::to_string(rec.intra_loss) + ")");
        {
            NoGradGuard<T> no_grad;
            const double gap = 0.5 * (static_cast<double>(intra_gap_cosine(s1.p, t1.p).item()) +
                                      static_cast<double>(intra_gap_cosine(s2.p, t2.p).item()));
            // float rounding can push 2 - 2cos a hair outside its range
            rec.intra_gap = std::clamp(gap, 0.0, 4.0);
        }
        st.student.zero_grad();
        backward(parts.total);
    }
    rec.sim_pct = (1.0 - rec.intra_gap / 2.0) * 100.0;

    const OptimizerHyper hyper{cfg.momentum, cfg.weight_decay, cfg.eta_lars};
    if (cfg.optimizer == OptimizerKind::lars) lars_step(st.student.params(), st.optimizer, rec.lr, hyper);
    else sgd_step(st.student.params(), st.optimizer, rec.lr, hyper);
    ema_update(st.teacher, st.student, rec.beta, step);
    ++st.step;
    return rec;
}

struct EpochSummary {
    std::int64_t epoch = 0;
    std::int64_t last_step = 0;
    double mean_total_loss = 0.0;
    double mean_intra_gap = 0.0;
    double mean_sim_pct = 0.0;
};

template <typename T>
struct PretrainHooks {
    std::function<void(const GapRecord&)> on_step;
    std::function<void(const EpochSummary&, const TrainState<T>&)> on_epoch;
};

/// Runs from st.step up to (but excluding) `stop_step`, or to the end of the
/// schedule. Epoch order and augmentation seeds are pure functions of
/// (seed, epoch, sample index), so a restored state continues exactly.
template <typename T>
std::vector<GapRecord> run_pretraining(TrainState<T>& st, const TrainConfig& cfg, const data::DatasetHandle& ds,
                                       const PretrainHooks<T>& hooks = {}, std::optional<std::int64_t> stop_step = std::nullopt) {
    cfg.validate();
    const auto sched = make_schedule(cfg, ds.train.size());
    const std::int64_t end = std::min(stop_step.value_or(sched.total_steps), sched.total_steps);
    std::vector<GapRecord> records;
    std::optional<data::EpochPlan> plan;
    std::int64_t plan_epoch = -1;
    EpochSummary acc;
    std::int64_t acc_count = 0;
    while (st.step < end) {
        const std::int64_t epoch = st.step / sched.steps_per_epoch;
        const auto b = static_cast<std::size_t>(st.step % sched.steps_per_epoch);
        if (epoch != plan_epoch) {
            plan = data::plan_epoch(ds.train.size(), cfg.batch_size, data::epoch_seed(cfg.seed, epoch));
            plan_epoch = epoch;
            acc = EpochSummary{epoch};
            acc_count = 0;
        }
        const auto batch = data::make_pretrain_batch<T>(ds.train, ds.norm, *plan, b, cfg.view1, cfg.view2);
        const auto rec = train_step(st, batch, cfg, sched);
        records.push_back(rec);
        if (hooks.on_step) hooks.on_step(rec);
        acc.mean_total_loss += rec.total_loss;
        acc.mean_intra_gap += rec.intra_gap;
        acc.mean_sim_pct += rec.sim_pct;
        ++acc_count;
        if (st.step % sched.steps_per_epoch == 0 && hooks.on_epoch) {
            acc.last_step = rec.step;
            acc.mean_total_loss /= static_cast<double>(acc_count);
            acc.mean_intra_gap /= static_cast<double>(acc_count);
            acc.mean_sim_pct /= static_cast<double>(acc_count);
            hooks.on_epoch(acc, st);
        }
    }
    return records;
}

template <typename T>
struct PretrainResult {
    TrainState<T> state;
    std::vector<GapRecord> metrics;
};

template <typename T>
PretrainResult<T> pretrain(const TrainConfig& cfg, const data::DatasetHandle& ds) {
    PretrainResult<T> r{init_train_state<T>(cfg), {}};
    r.metrics = run_pretraining(r.state, cfg, ds);
    return r;
}

}  // namespace resmoco

#endif  // RESMOCO_TRAINER_HPP
