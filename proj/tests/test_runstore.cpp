#include <gtest/gtest.h>

#include <fstream>
#include <set>
#include <sstream>

#include "resmoco/gradcheck_suite.hpp"
#include "resmoco/runstore.hpp"
#include "test_util.hpp"

using namespace resmoco;
using namespace resmoco::store;
using resmoco::testing::temp_dir;

namespace {

RunConfig tiny_run(std::int64_t epochs = 4) {
    RunConfig r;
    auto& c = r.train;
    c.encoder.backbone_widths = {4, 8};
    c.encoder.input_size = 8;
    c.encoder.projector_hidden = 16;
    c.encoder.projector_out = 8;
    c.encoder.predictor_hidden = 16;
    c.view1.crop_size = 8;
    c.view2.crop_size = 8;
    c.batch_size = 16;
    c.epochs = epochs;
    c.warmup_epochs = 1;
    c.seed = 5;
    r.synthetic.per_class = 16;
    r.synthetic.test_per_class = 4;
    r.synthetic.image_size = 8;
    r.checkpoint_every = 2;
    return r;
}

std::string slurp(const fs::path& p) { return read_text(p); }

void spit(const fs::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << s;
}

template <typename F>
ErrorKind kind_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    ADD_FAILURE() << "expected an Error";
    return ErrorKind::invalid_argument;
}

RunConfig random_run_config(Rng& rng) {
    RunConfig r = tiny_run();
    auto& c = r.train;
    c.lr = rng.uniform(0.01, 1.0);
    c.eta_lars = rng.uniform(0.001, 0.1);
    c.weight_decay = rng.uniform(0, 1e-3);
    c.momentum = rng.uniform(0, 0.99);
    c.optimizer = rng.bernoulli(0.5) ? OptimizerKind::lars : OptimizerKind::sgd;
    c.batch_size = static_cast<std::size_t>(rng.uniform_int(2, 512));
    c.epochs = rng.uniform_int(2, 1000);
    c.warmup_epochs = rng.uniform_int(0, c.epochs - 1);
    c.beta_base = rng.uniform(0.9, 1.0);
    c.beta_mode = rng.bernoulli(0.5) ? BetaMode::fixed : BetaMode::cosine_ramp;
    c.seed = rng.next();
    c.intra_toggle_period = rng.uniform_int(0, 9000);
    c.objective.intra = static_cast<IntraLoss>(rng.uniform_int(0, 3));
    c.objective.tau = rng.uniform(0.05, 1.0);
    c.objective.tau_s = rng.uniform(0.5, 8.0);
    c.objective.intra_weight = rng.uniform(0, 2);
    c.objective.asymmetric_intra = rng.bernoulli(0.5);
    c.encoder.backbone_kind = rng.bernoulli(0.5) ? nn::BackboneKind::mlp : nn::BackboneKind::smallconv;
    c.encoder.backbone_widths.resize(static_cast<std::size_t>(rng.uniform_int(1, 4)));
    for (auto& w : c.encoder.backbone_widths) w = static_cast<std::size_t>(rng.uniform_int(1, 256));
    c.encoder.use_predictor = rng.bernoulli(0.5);
    c.view1.min_scale = rng.uniform(0.05, 1.0);
    c.view2.solarize_p = rng.uniform(0, 1);
    c.view2.hue = rng.uniform(0, 0.5);
    r.dataset = static_cast<data::DatasetKind>(rng.uniform_int(0, 2));
    r.data_dir = "dir" + std::to_string(rng.uniform_int(0, 99));
    r.synthetic.separation = rng.uniform(1, 300);
    r.synthetic.noise = rng.uniform(0, 50);
    r.checkpoint_every = rng.uniform_int(1, 50);
    return r;
}

}  // namespace

TEST(Config, RoundTripOnRandomConfigs) {
    Rng rng(77);
    for (int draw = 0; draw < 50; ++draw) {
        const auto cfg = random_run_config(rng);
        const auto text = to_json(cfg).dump();
        const auto back = run_config_from_json(json::parse(text));
        EXPECT_EQ(back, cfg);
        EXPECT_EQ(to_json(back).dump(), text);
    }
}

TEST(Config, PartialFileKeepsDefaultsAndRejectsUnknownKeys) {
    const auto r = run_config_from_json(json::parse(R"({"train": {"epochs": 7, "objective": {"intra": "mse"}}})"));
    EXPECT_EQ(r.train.epochs, 7);
    EXPECT_EQ(r.train.objective.intra, IntraLoss::mse);
    EXPECT_EQ(r.train.lr, 0.3);
    EXPECT_EQ(r.train.weight_decay, 1e-6);
    EXPECT_EQ(r.train.eta_lars, 0.02);
    EXPECT_EQ(r.train.batch_size, 256u);
    EXPECT_EQ(kind_of([] { (void)run_config_from_json(json::parse(R"({"train": {"epoch": 7}})")); }), ErrorKind::invalid_argument);
    EXPECT_EQ(kind_of([] { (void)run_config_from_json(json::parse(R"({"train": {"beta_mode": "linear"}})")); }),
              ErrorKind::invalid_argument);
    EXPECT_EQ(kind_of([] { (void)run_config_from_json(json::parse(R"({"train": {"lr": "fast"}})")); }), ErrorKind::invalid_argument);
}

TEST(Manifest, RunIdIsContentHash) {
    const auto cfg = tiny_run();
    const auto ds = data::synth_blobs(cfg.synthetic);
    const auto a = make_manifest(cfg, ds);
    EXPECT_EQ(a, make_manifest(cfg, ds));
    EXPECT_EQ(a.run_id.size(), 16u);
    auto other = cfg;
    other.train.seed += 1;
    EXPECT_NE(make_manifest(other, ds).run_id, a.run_id);
    auto ds2 = ds;
    ds2.train.images[0].pixels[0] ^= 1;
    EXPECT_NE(make_manifest(cfg, ds2).run_id, a.run_id);
    EXPECT_EQ(manifest_from_json(json::parse(to_json(a).dump())), a);
}

TEST(Checkpoint, BitwiseRoundTripAndIdempotentBytes) {
    const auto cfg = tiny_run();
    const auto ds = data::synth_blobs(cfg.synthetic);
    const auto manifest = make_manifest(cfg, ds);
    auto st = init_train_state<float>(cfg.train);
    run_pretraining(st, cfg.train, ds, {}, 6);
    const auto bytes = encode_checkpoint(st, manifest);
    const auto file = parse_checkpoint(bytes, "mem");
    auto loaded = load_train_state<float>(file);
    EXPECT_EQ(encode_checkpoint(loaded, manifest), bytes);
    EXPECT_EQ(loaded.step, 6);
    EXPECT_EQ(loaded.optimizer.step, 6);
    EXPECT_EQ(loaded.teacher.step_of_last_update, 5);
    EXPECT_EQ(nn::checksum(loaded.student), nn::checksum(st.student));
    EXPECT_EQ(nn::checksum(loaded.teacher.encoder), nn::checksum(st.teacher.encoder));
    EXPECT_EQ(loaded.optimizer.buffers, st.optimizer.buffers);
    EXPECT_EQ(file.manifest, manifest);
    EXPECT_EQ(bytes.substr(0, 8), std::string("RESMOCO\0", 8));
    EXPECT_EQ(file.header.at("endianness"), "little");
}

TEST(Checkpoint, CorruptionIsDetected) {
    const auto cfg = tiny_run();
    const auto ds = data::synth_blobs(cfg.synthetic);
    const auto bytes = encode_checkpoint(init_train_state<float>(cfg.train), make_manifest(cfg, ds));
    auto expect_corrupt = [](const std::string& b) {
        EXPECT_EQ(kind_of([&] { (void)parse_checkpoint(b, "mem"); }), ErrorKind::checkpoint_corrupt);
    };
    expect_corrupt(bytes.substr(0, bytes.size() - 4));
    expect_corrupt(bytes + "x");
    expect_corrupt(bytes.substr(0, 10));
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    expect_corrupt(bad_magic);
    auto flipped = bytes;
    flipped[flipped.size() - 1] = static_cast<char>(flipped.back() ^ 0x40);
    expect_corrupt(flipped);
    auto long_header = bytes;
    long_header[15] = '\x7f';
    expect_corrupt(long_header);
    const auto dir = temp_dir("ckpt_missing");
    EXPECT_EQ(kind_of([&] { (void)read_checkpoint(dir / "nope.bin"); }), ErrorKind::checkpoint_corrupt);
}

TEST(Checkpoint, RandomByteDamageNeverLoadsSilently) {
    const auto cfg = tiny_run();
    const auto ds = data::synth_blobs(cfg.synthetic);
    const auto bytes = encode_checkpoint(init_train_state<float>(cfg.train), make_manifest(cfg, ds));
    Rng rng(4);
    for (int draw = 0; draw < 60; ++draw) {
        auto damaged = bytes;
        const auto pos = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(bytes.size()) - 1));
        damaged[pos] = static_cast<char>(damaged[pos] ^ (1 << rng.uniform_int(0, 7)));
        try {
            const auto f = parse_checkpoint(damaged, "mem");
            // a flip inside the JSON header can still parse; it must then fail to restore or change nothing numeric
            auto st = load_train_state<float>(f);
            EXPECT_EQ(encode_checkpoint(st, f.manifest).size(), damaged.size()) << "pos " << pos;
        } catch (const Error& e) {
            EXPECT_TRUE(e.kind() == ErrorKind::checkpoint_corrupt || e.kind() == ErrorKind::invalid_argument) << e.what();
        }
    }
}

TEST(Metrics, WriteReadAndLineNumbers) {
    const auto dir = temp_dir("metrics_rw");
    const auto path = dir / "m.jsonl";
    {
        MetricsWriter w(path, "abc");
        for (int s = 0; s < 4; ++s) w.step(GapRecord{s, 0.1 * s, 100 - 5.0 * s, 1, 0.5, 1.5, 0.99, 0.3, s % 2 == 0});
        w.epoch_end(0, 3, 4);
    }
    const auto log = read_metrics(path);
    EXPECT_EQ(log.run_id, "abc");
    ASSERT_EQ(log.steps.size(), 4u);
    EXPECT_EQ(log.steps[2], (GapRecord{2, 0.2, 90, 1, 0.5, 1.5, 0.99, 0.3, true}));
    ASSERT_EQ(log.epochs.size(), 1u);
    EXPECT_NEAR(log.epochs[0].mean_intra_gap, 0.15, 1e-15);

    auto text = slurp(path);
    std::istringstream bad(text.substr(0, text.find('\n') + 1) + "{not json}\n");
    try {
        (void)parse_metrics(bad, "m");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::metrics_malformed);
        EXPECT_NE(std::string(e.what()).find("m:2"), std::string::npos) << e.what();
    }
    const auto first = text.substr(0, text.find('\n') + 1);
    std::istringstream repeat(first + first);
    EXPECT_EQ(kind_of([&] { (void)parse_metrics(repeat, "m"); }), ErrorKind::metrics_malformed);
    std::istringstream missing_field(R"({"type":"step","run_id":"abc","step":1})" "\n");
    EXPECT_EQ(kind_of([&] { (void)parse_metrics(missing_field, "m"); }), ErrorKind::metrics_malformed);
}

TEST(GapReport, RowsAndTailMean) {
    Rng rng(9);
    for (int draw = 0; draw < 20; ++draw) {
        MetricsLog log{"rid", {}, {}};
        const auto n = rng.uniform_int(1, 300);
        for (std::int64_t s = 0; s < n; ++s) {
            GapRecord r;
            r.step = s;
            r.intra_gap = rng.uniform(0, 4);
            r.sim_pct = (1 - r.intra_gap / 2) * 100;
            log.steps.push_back(r);
        }
        const auto csv = gap_csv(log);
        std::size_t rows = 0;
        std::istringstream in(csv);
        std::string line;
        while (std::getline(in, line)) rows += !line.empty() && line[0] != '#' && line.rfind("step,", 0) != 0;
        EXPECT_EQ(rows, log.steps.size());
        EXPECT_NE(csv.find("# run_id=rid"), std::string::npos);

        const auto s = summarize_gap(log.steps);
        const std::size_t tail = static_cast<std::size_t>(n) - static_cast<std::size_t>(n) * 3 / 4;
        double mean = 0;
        for (std::size_t i = log.steps.size() - tail; i < log.steps.size(); ++i) mean += log.steps[i].intra_gap;
        mean /= static_cast<double>(tail);
        EXPECT_EQ(s.tail_count, tail);
        EXPECT_NEAR(s.tail_mean_intra_gap, mean, 1e-9);
    }
    EXPECT_EQ(kind_of([] { (void)summarize_gap({}); }), ErrorKind::metrics_malformed);
}

TEST(RunDir, DeterministicFilesEmbedRunId) {
    const auto cfg = tiny_run();
    const auto ds = data::synth_blobs(cfg.synthetic);
    const auto a = temp_dir("run_a"), b = temp_dir("run_b");
    const auto ra = run_pretrain(cfg, ds, a, {});
    run_pretrain(cfg, ds, b, {});
    EXPECT_TRUE(ra.finished);
    EXPECT_EQ(slurp(a / "metrics.jsonl"), slurp(b / "metrics.jsonl"));
    EXPECT_EQ(slurp(a / "checkpoint.bin"), slurp(b / "checkpoint.bin"));
    EXPECT_EQ(slurp(a / "manifest.json"), slurp(b / "manifest.json"));
    const auto log = read_metrics(a / "metrics.jsonl");
    EXPECT_EQ(log.run_id, ra.manifest.run_id);
    EXPECT_EQ(log.steps.size(), 16u);
    EXPECT_EQ(log.epochs.size(), 4u);
    for (std::size_t i = 0; i < log.steps.size(); ++i) EXPECT_EQ(log.steps[i].step, static_cast<std::int64_t>(i));
    EXPECT_EQ(read_checkpoint(a / "checkpoint.bin").manifest.run_id, ra.manifest.run_id);
    EXPECT_NE(slurp(a / "manifest.json").find(ra.manifest.run_id), std::string::npos);
}

TEST(RunDir, RefusesPopulatedDirectoryWithoutForce) {
    const auto cfg = tiny_run(2);
    const auto ds = data::synth_blobs(cfg.synthetic);
    const auto dir = temp_dir("run_force");
    run_pretrain(cfg, ds, dir, {});
    EXPECT_EQ(kind_of([&] { run_pretrain(cfg, ds, dir, {}); }), ErrorKind::io_error);
    spit(dir / "stray.txt", "x");
    RunOptions force;
    force.force = true;
    run_pretrain(cfg, ds, dir, force);
    EXPECT_FALSE(fs::exists(dir / "stray.txt"));
}

TEST(RunDir, ResumeReproducesUninterruptedRun) {
    const auto cfg = tiny_run(4);
    const auto ds = data::synth_blobs(cfg.synthetic);
    const auto full = temp_dir("run_full"), split = temp_dir("run_split");
    run_pretrain(cfg, ds, full, {});
    for (std::int64_t stop : {8, 6}) {
        // stop on an epoch boundary, then mid-epoch
        fs::remove_all(split);
        RunOptions first;
        first.stop_step = stop;
        const auto head = run_pretrain(cfg, ds, split, first);
        EXPECT_FALSE(head.finished);
        EXPECT_EQ(read_checkpoint(split / "checkpoint.bin").header.at("step"), stop);
        RunOptions rest;
        rest.resume = true;
        const auto tail = run_pretrain(cfg, ds, split, rest);
        EXPECT_TRUE(tail.finished);
        EXPECT_EQ(slurp(split / "metrics.jsonl"), slurp(full / "metrics.jsonl")) << "stop " << stop;
        EXPECT_EQ(slurp(split / "checkpoint.bin"), slurp(full / "checkpoint.bin")) << "stop " << stop;
    }
}

TEST(RunDir, ResumeRejectsDifferentConfig) {
    const auto cfg = tiny_run(2);
    const auto ds = data::synth_blobs(cfg.synthetic);
    const auto dir = temp_dir("run_mismatch");
    RunOptions stop;
    stop.stop_step = 2;
    run_pretrain(cfg, ds, dir, stop);
    auto other = cfg;
    other.train.lr = 0.1;
    RunOptions resume;
    resume.resume = true;
    EXPECT_EQ(kind_of([&] { run_pretrain(other, ds, dir, resume); }), ErrorKind::invalid_argument);
}

TEST(RunDir, MissingCifarDirectory) {
    RunConfig cfg = tiny_run();
    cfg.dataset = data::DatasetKind::cifar10;
    cfg.data_dir = "/nonexistent/cifar";
    EXPECT_EQ(kind_of([&] { (void)load_run_dataset(cfg); }), ErrorKind::dataset_not_found);
}

TEST(GradSuite, EveryCaseListedOnceAndPasses) {
    const auto names = gradsuite::case_names();
    EXPECT_EQ(std::set<std::string>(names.begin(), names.end()).size(), names.size());
    for (const char* op : {"add", "sub", "mul", "div", "matmul", "transpose", "reshape", "conv2d", "relu", "softmax", "log_softmax",
                           "l2_normalize", "sum", "mean", "diagonal", "global_avg_pool", "batch_norm_train", "batch_norm_eval",
                           "infonce", "intra_gap_cosine", "intra_gap_ce", "intra_gap_mse", "res_moco_total"}) {
        EXPECT_NE(std::find(names.begin(), names.end(), op), names.end()) << op;
    }
    for (const auto& row : gradsuite::run()) {
        EXPECT_TRUE(row.passed) << row.name << " " << row.max_relative_error;
        EXPECT_LE(row.max_relative_error, 1e-4) << row.name;
        EXPECT_GT(row.evaluated, 0u);
    }
}

TEST(GradSuite, InjectedFaultIsCaught) {
    for (const char* op : {"matmul", "res_moco_total"}) {
        for (const auto& row : gradsuite::run({}, std::string(op))) {
            EXPECT_EQ(row.passed, row.name != op) << row.name;
        }
    }
    EXPECT_EQ(kind_of([] { (void)gradsuite::run({}, std::string("nope")); }), ErrorKind::invalid_argument);
}
