#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>

#include "resmoco/trainer.hpp"
#include "test_util.hpp"

using namespace resmoco;

namespace {

TrainConfig tiny_config(std::int64_t epochs = 2) {
    TrainConfig cfg;
    cfg.encoder.backbone_widths = {4, 8};
    cfg.encoder.input_size = 8;
    cfg.encoder.projector_hidden = 16;
    cfg.encoder.projector_out = 8;
    cfg.encoder.predictor_hidden = 16;
    cfg.view1.crop_size = 8;
    cfg.view2.crop_size = 8;
    cfg.batch_size = 16;
    cfg.epochs = epochs;
    cfg.warmup_epochs = 1;
    cfg.objective.inter = InterLoss::infonce_ema;
    cfg.objective.intra = IntraLoss::cosine;
    cfg.seed = 3;
    return cfg;
}

data::DatasetHandle tiny_data(std::size_t per_class = 16) {
    data::SynthParams p;
    p.classes = 4;
    p.per_class = per_class;
    p.test_per_class = 4;
    p.image_size = 8;
    p.seed = 11;
    return data::synth_blobs(p);
}

nn::ParamTensor<double> scalar_param(double w, double g, bool excluded = false) {
    nn::ParamTensor<double> p{"w", Tensor<double>::parameter(Shape{1}, {w}), excluded, excluded};
    p.value.mutable_grad()[0] = g;
    return p;
}

double mean_of(const std::vector<GapRecord>& r, std::size_t first, std::size_t count, double GapRecord::*field) {
    double s = 0;
    for (std::size_t i = first; i < first + count; ++i) s += r[i].*field;
    return s / static_cast<double>(count);
}

}  // namespace

TEST(LrAt, Examples) {
    TrainConfig cfg = tiny_config(10);
    cfg.warmup_epochs = 2;
    const StepSchedule s{5, 50, 10};
    EXPECT_EQ(lr_at(cfg, s, 0), 0.0);
    EXPECT_DOUBLE_EQ(lr_at(cfg, s, 5), 0.15);
    EXPECT_DOUBLE_EQ(lr_at(cfg, s, 10), cfg.lr);
    EXPECT_NEAR(lr_at(cfg, s, 50), 0.0, 1e-9);
    EXPECT_NEAR(lr_at(cfg, s, 30), cfg.lr / 2, 1e-12);
    EXPECT_THROW((void)lr_at(cfg, s, 51), Error);
}

TEST(LrAt, ContinuousAtWarmupBoundary) {
    Rng rng(5);
    for (int draw = 0; draw < 30; ++draw) {
        TrainConfig cfg = tiny_config();
        cfg.lr = rng.uniform(0.01, 2.0);
        const auto per = rng.uniform_int(1, 200);
        const auto warm = rng.uniform_int(1, 20);
        const StepSchedule s{per, per * (warm + rng.uniform_int(1, 50)), per * warm};
        // the ramp formula evaluated at the boundary must agree with the cosine branch
        const double ramp_end = cfg.lr * static_cast<double>(s.warmup_steps) / static_cast<double>(s.warmup_steps);
        EXPECT_NEAR(lr_at(cfg, s, s.warmup_steps), ramp_end, 1e-9);
        EXPECT_LE(std::abs(lr_at(cfg, s, s.warmup_steps) - lr_at(cfg, s, s.warmup_steps - 1)),
                  cfg.lr / static_cast<double>(s.warmup_steps) + 1e-12);
        for (std::int64_t t = 0; t <= s.total_steps; t += std::max<std::int64_t>(1, s.total_steps / 37)) {
            const double v = lr_at(cfg, s, t);
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, cfg.lr + 1e-15);
        }
    }
}

TEST(Schedule, StepsPerEpochDropLast) {
    TrainConfig cfg = tiny_config(3);
    cfg.batch_size = 256;
    const auto s = make_schedule(cfg, 50000);
    EXPECT_EQ(s.steps_per_epoch, 195);
    EXPECT_EQ(s.total_steps, 585);
    EXPECT_EQ(s.warmup_steps, 195);
    EXPECT_THROW((void)make_schedule(cfg, 100), Error);
}

TEST(Lars, TrustExample) {
    EXPECT_DOUBLE_EQ(lars_trust(1.0, 1.0, 0.02, 0.0), 0.02);
    EXPECT_DOUBLE_EQ(lars_trust(0.0, 1.0, 0.02, 0.0), 1.0);
    EXPECT_DOUBLE_EQ(lars_trust(1.0, 0.0, 0.02, 0.0), 1.0);
    std::vector<nn::ParamTensor<double>> ps{scalar_param(1.0, 1.0)};
    OptimizerState<double> st;
    lars_step(ps, st, 1.0, OptimizerHyper{0.9, 0.0, 0.02});
    EXPECT_DOUBLE_EQ(ps[0].value.values()[0], 1.0 - 0.02);
    EXPECT_EQ(st.step, 1);
}

TEST(Lars, ZeroGradientIsFixedPoint) {
    std::vector<nn::ParamTensor<double>> ps{scalar_param(0.7, 0.0), scalar_param(-2.0, 0.0, true)};
    OptimizerState<double> st;
    lars_step(ps, st, 0.5, OptimizerHyper{0.9, 0.0, 0.02});
    EXPECT_EQ(ps[0].value.values()[0], 0.7);
    EXPECT_EQ(ps[1].value.values()[0], -2.0);
}

TEST(Lars, ExcludedBiasGetsNoDecay) {
    for (double w : {-3.0, 0.0, 1.0, 40.0}) {
        std::vector<nn::ParamTensor<double>> ps{scalar_param(w, 0.25, true)};
        OptimizerState<double> st;
        lars_step(ps, st, 0.1, OptimizerHyper{0.9, 0.5, 0.02});
        EXPECT_NEAR(w - ps[0].value.values()[0], 0.1 * 0.25, 1e-12) << "w=" << w;
    }
}

TEST(Lars, AdaptedUpdateMatchesHandComputation) {
    std::vector<nn::ParamTensor<double>> ps{
        {"w", Tensor<double>::parameter(Shape{2}, {3.0, 4.0}), false, false}};
    ps[0].value.mutable_grad()[0] = 0.0;
    ps[0].value.mutable_grad()[1] = 2.0;
    OptimizerState<double> st;
    const double wd = 0.1, eta = 0.02, lr = 0.5;
    lars_step(ps, st, lr, OptimizerHyper{0.9, wd, eta});
    const double trust = eta * 5.0 / (2.0 + wd * 5.0);
    EXPECT_NEAR(ps[0].value.values()[0], 3.0 - lr * trust * (0.0 + wd * 3.0), 1e-15);
    EXPECT_NEAR(ps[0].value.values()[1], 4.0 - lr * trust * (2.0 + wd * 4.0), 1e-15);
}

TEST(Sgd, PlainStep) {
    std::vector<nn::ParamTensor<double>> ps{scalar_param(2.0, 0.5)};
    OptimizerState<double> st;
    sgd_step(ps, st, 0.1, OptimizerHyper{0.0, 0.0, 0.02});
    EXPECT_DOUBLE_EQ(ps[0].value.values()[0], 2.0 - 0.05);
}

TEST(Sgd, TwoStepMomentumRecursion) {
    std::vector<nn::ParamTensor<double>> ps{scalar_param(0.0, 1.0)};
    OptimizerState<double> st;
    const double lr = 0.1;
    sgd_step(ps, st, lr, OptimizerHyper{0.9, 0.0, 0.02});
    const double after1 = ps[0].value.values()[0];
    sgd_step(ps, st, lr, OptimizerHyper{0.9, 0.0, 0.02});
    const double after2 = ps[0].value.values()[0];
    // hand recursion: buffers 1, then 0.9*1 + 1 = 1.9
    EXPECT_DOUBLE_EQ(after1, -lr * 1.0);
    EXPECT_DOUBLE_EQ(after2, -lr * (1.0 + 1.9));
}

TEST(Sgd, BufferDecaysWithZeroGradient) {
    std::vector<nn::ParamTensor<double>> ps{scalar_param(0.0, 1.0)};
    OptimizerState<double> st;
    sgd_step(ps, st, 0.1, OptimizerHyper{0.9, 0.0, 0.02});
    ps[0].value.mutable_grad()[0] = 0.0;
    double prev = st.buffers[0][0];
    for (int i = 0; i < 200; ++i) {
        sgd_step(ps, st, 0.1, OptimizerHyper{0.9, 0.0, 0.02});
        EXPECT_NEAR(st.buffers[0][0], 0.9 * prev, 1e-15);
        prev = st.buffers[0][0];
    }
    EXPECT_LT(std::abs(prev), 1e-9);
}

TEST(Optimizers, NanGradientAborts) {
    for (bool lars : {true, false}) {
        std::vector<nn::ParamTensor<double>> ps{scalar_param(1.0, std::numeric_limits<double>::quiet_NaN())};
        OptimizerState<double> st;
        try {
            if (lars) lars_step(ps, st, 0.1, OptimizerHyper{});
            else sgd_step(ps, st, 0.1, OptimizerHyper{});
            FAIL() << "expected non_finite";
        } catch (const Error& e) {
            EXPECT_EQ(e.kind(), ErrorKind::non_finite);
        }
        EXPECT_EQ(ps[0].value.values()[0], 1.0);
        EXPECT_EQ(st.step, 0);
    }
}

TEST(TrainConfig, Validation) {
    TrainConfig cfg = tiny_config();
    EXPECT_NO_THROW(cfg.validate());
    auto bad = cfg;
    bad.lr = 0.0;
    EXPECT_THROW(bad.validate(), Error);
    bad = cfg;
    bad.warmup_epochs = bad.epochs;
    EXPECT_THROW(bad.validate(), Error);
    bad = cfg;
    bad.batch_size = 1;
    EXPECT_THROW(bad.validate(), Error);
    bad = cfg;
    bad.view1.crop_size = 16;
    EXPECT_THROW(bad.validate(), Error);
}

TEST(IntraToggle, Phases) {
    TrainConfig cfg = tiny_config();
    EXPECT_TRUE(intra_active(cfg, 12345));
    cfg.intra_toggle_period = 3;
    const bool expect[] = {true, true, true, false, false, false, true, true, true, false};
    for (std::int64_t t = 0; t < 10; ++t) EXPECT_EQ(intra_active(cfg, t), expect[t]) << t;
}

TEST(TrainStep, TeacherUntouchedByBackwardAndOptimizer) {
    const auto cfg = tiny_config();
    const auto ds = tiny_data();
    auto st = init_train_state<double>(cfg);
    const auto sched = make_schedule(cfg, ds.train.size());
    const auto plan = data::plan_epoch(ds.train.size(), cfg.batch_size, data::epoch_seed(cfg.seed, 0));
    const auto batch = data::make_pretrain_batch<double>(ds.train, ds.norm, plan, 0, cfg.view1, cfg.view2);

    // replay the step by hand up to the optimizer, checking the teacher in between
    const auto before = nn::checksum(st.teacher.encoder);
    {
        Tape<double> tape;
        auto s1 = st.student.encode(batch.x1, nn::Mode::train);
        auto s2 = st.student.encode(batch.x2, nn::Mode::train);
        auto t1 = teacher_forward(st.teacher, batch.x1, nn::Mode::train);
        auto t2 = teacher_forward(st.teacher, batch.x2, nn::Mode::train);
        auto parts = total_loss(BatchEmbeddings<double>{s1.p, s2.p, s1.z, s2.z, t1.p, t2.p, t1.z, t2.z}, cfg.objective);
        st.student.zero_grad();
        backward(parts.total);
    }
    EXPECT_EQ(nn::checksum(st.teacher.encoder), before);
    lars_step(st.student.params(), st.optimizer, 0.3, OptimizerHyper{});
    EXPECT_EQ(nn::checksum(st.teacher.encoder), before);
    for (const auto& p : st.teacher.encoder.params()) EXPECT_FALSE(p.value.has_grad()) << p.name;
}

TEST(TrainStep, FirstStepGapIsZeroAndRecordFieldsConsistent) {
    auto cfg = tiny_config();
    cfg.warmup_epochs = 0;
    const auto ds = tiny_data();
    auto st = init_train_state<double>(cfg);
    const auto sched = make_schedule(cfg, ds.train.size());
    const auto plan = data::plan_epoch(ds.train.size(), cfg.batch_size, data::epoch_seed(cfg.seed, 0));
    const auto batch = data::make_pretrain_batch<double>(ds.train, ds.norm, plan, 0, cfg.view1, cfg.view2);
    const auto rec = train_step(st, batch, cfg, sched);
    EXPECT_EQ(rec.step, 0);
    EXPECT_NEAR(rec.intra_gap, 0.0, 1e-12);
    EXPECT_NEAR(rec.sim_pct, 100.0, 1e-9);
    EXPECT_NEAR(rec.total_loss, rec.inter_loss + rec.intra_loss, 1e-12);
    EXPECT_DOUBLE_EQ(rec.beta, cfg.beta_base);
    EXPECT_DOUBLE_EQ(rec.lr, cfg.lr);
    EXPECT_EQ(st.step, 1);
    EXPECT_GT(nn::max_abs_distance(st.student, st.teacher.encoder), 0.0);
}

TEST(Pretrain, BaselineHasZeroIntraLoss) {
    auto cfg = tiny_config(1);
    cfg.warmup_epochs = 0;
    cfg.objective.intra = IntraLoss::none;
    const auto r = pretrain<double>(cfg, tiny_data());
    for (const auto& rec : r.metrics) {
        EXPECT_EQ(rec.intra_loss, 0.0);
        EXPECT_DOUBLE_EQ(rec.total_loss, rec.inter_loss);
    }
}

TEST(Pretrain, ToggleOffPhaseZeroesIntraButRecordsGap) {
    auto cfg = tiny_config(3);
    cfg.intra_toggle_period = 2;
    const auto r = pretrain<double>(cfg, tiny_data());
    ASSERT_EQ(r.metrics.size(), 12u);
    bool saw_off_gap = false, saw_on_loss = false;
    for (const auto& rec : r.metrics) {
        EXPECT_EQ(rec.intra_active, intra_active(cfg, rec.step));
        if (!rec.intra_active) {
            EXPECT_EQ(rec.intra_loss, 0.0);
            saw_off_gap |= rec.intra_gap > 0.0;
        } else {
            saw_on_loss |= rec.intra_loss > 1e-9;
        }
    }
    EXPECT_TRUE(saw_off_gap);
    EXPECT_TRUE(saw_on_loss);
}

TEST(Pretrain, DeterministicAndCounted) {
    const auto cfg = tiny_config(2);
    const auto ds = tiny_data();
    const auto a = pretrain<float>(cfg, ds);
    const auto b = pretrain<float>(cfg, ds);
    EXPECT_EQ(a.metrics.size(), 2u * 4u);
    EXPECT_EQ(a.metrics, b.metrics);
    EXPECT_EQ(nn::checksum(a.state.student), nn::checksum(b.state.student));
    EXPECT_EQ(nn::checksum(a.state.teacher.encoder), nn::checksum(b.state.teacher.encoder));
    for (std::size_t i = 0; i < a.metrics.size(); ++i) EXPECT_EQ(a.metrics[i].step, static_cast<std::int64_t>(i));
}

TEST(Pretrain, ResumeMatchesUninterrupted) {
    const auto cfg = tiny_config(3);
    const auto ds = tiny_data();
    const auto full = pretrain<float>(cfg, ds);
    auto st = init_train_state<float>(cfg);
    auto head = run_pretraining(st, cfg, ds, {}, 5);
    auto tail = run_pretraining(st, cfg, ds);
    head.insert(head.end(), tail.begin(), tail.end());
    EXPECT_EQ(head, full.metrics);
    EXPECT_EQ(nn::checksum(st.student), nn::checksum(full.state.student));
}

TEST(Pretrain, EpochHookSeesEveryEpoch) {
    const auto cfg = tiny_config(3);
    std::vector<EpochSummary> seen;
    auto st = init_train_state<float>(cfg);
    PretrainHooks<float> hooks;
    hooks.on_epoch = [&](const EpochSummary& e, const TrainState<float>&) { seen.push_back(e); };
    const auto recs = run_pretraining(st, cfg, tiny_data(), hooks);
    ASSERT_EQ(seen.size(), 3u);
    for (std::size_t e = 0; e < 3; ++e) {
        EXPECT_EQ(seen[e].epoch, static_cast<std::int64_t>(e));
        EXPECT_EQ(seen[e].last_step, static_cast<std::int64_t>(4 * e + 3));
        EXPECT_NEAR(seen[e].mean_total_loss, mean_of(recs, 4 * e, 4, &GapRecord::total_loss), 1e-12);
    }
}

TEST(Pretrain, LossDecreasesOnSyntheticData) {
    auto cfg = tiny_config(20);
    cfg.warmup_epochs = 2;
    const auto r = pretrain<float>(cfg, tiny_data(32));
    const std::size_t n = r.metrics.size();
    ASSERT_EQ(n, 160u);
    const std::size_t k = n / 10;
    const double first = mean_of(r.metrics, 0, k, &GapRecord::total_loss);
    const double last = mean_of(r.metrics, n - k, k, &GapRecord::total_loss);
    EXPECT_LT(last, first);
    for (const auto& rec : r.metrics) EXPECT_TRUE(std::isfinite(rec.total_loss));
}

TEST(Pretrain, FrozenTeacherGapGrows) {
    auto cfg = tiny_config(50);
    cfg.objective.intra = IntraLoss::none;
    cfg.beta_mode = BetaMode::fixed;
    cfg.beta_base = 1.0;
    const auto ds = tiny_data();
    auto st = init_train_state<float>(cfg);
    const auto teacher_before = nn::checksum(st.teacher.encoder);
    const auto recs = run_pretraining(st, cfg, ds);
    ASSERT_GE(recs.size(), 200u);
    EXPECT_EQ(nn::checksum(st.teacher.encoder), teacher_before);
    EXPECT_GT(recs.back().intra_gap, recs.front().intra_gap);
    for (const auto& rec : recs) {
        EXPECT_GE(rec.intra_gap, 0.0);
        EXPECT_LE(rec.intra_gap, 4.0);
    }
}
