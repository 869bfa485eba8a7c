// Command-line front end: pretrain, probe, knn, gapreport, gradcheck.
//
// Exit codes: 0 ok, 1 usage or other error, 2 dataset, 3 checkpoint,
// 4 metrics, 5 gradcheck failure. Errors are also printed to stderr as one
// JSON object.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "resmoco/resmoco.hpp"

using namespace resmoco;
using nlohmann::json;

namespace {

int exit_code_for(ErrorKind k) {
    switch (k) {
        case ErrorKind::dataset_not_found:
        case ErrorKind::truncated_record:
        case ErrorKind::label_out_of_range: return 2;
        case ErrorKind::checkpoint_corrupt: return 3;
        case ErrorKind::metrics_malformed: return 4;
        default: return 1;
    }
}

int report_error(const std::string& kind, const std::string& message, int code) {
    std::cerr << json{{"error", {{"kind", kind}, {"message", message}}}, {"exit_code", code}}.dump() << std::endl;
    return code;
}

/// "inter=infonce_ema,intra=cosine"; either half may be omitted.
void apply_objective(const std::string& spec, ObjectiveConfig& obj) {
    std::size_t pos = 0;
    while (pos <= spec.size()) {
        const auto comma = spec.find(',', pos);
        const auto item = spec.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        const auto eq = item.find('=');
        require(eq != std::string::npos, ErrorKind::invalid_argument, "objective item '" + item + "' is not key=value");
        const auto key = item.substr(0, eq), value = item.substr(eq + 1);
        if (key == "inter") obj.inter = parse_inter(value);
        else if (key == "intra") obj.intra = parse_intra(value);
        else throw Error(ErrorKind::invalid_argument, "objective key '" + key + "' must be inter or intra");
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
}

struct DatasetFlags {
    std::string kind;
    std::string dir;

    void apply(store::RunConfig& cfg) const {
        if (!kind.empty()) cfg.dataset = store::detail::parse_dataset_kind(kind);
        if (!dir.empty()) cfg.data_dir = dir;
    }
};

struct PretrainArgs {
    std::string config;
    DatasetFlags data;
    std::string objective;
    std::optional<std::int64_t> epochs;
    std::optional<std::uint64_t> seed;
    std::optional<double> beta;
    std::string beta_mode;
    std::optional<std::int64_t> intra_toggle;
    std::string out;
    store::RunOptions opts;
    std::optional<std::int64_t> stop_step;
};

int cmd_pretrain(const PretrainArgs& a) {
    store::RunConfig cfg = a.config.empty() ? store::RunConfig{} : store::load_run_config(a.config);
    a.data.apply(cfg);
    if (!a.objective.empty()) apply_objective(a.objective, cfg.train.objective);
    if (a.epochs) cfg.train.epochs = *a.epochs;
    if (a.seed) cfg.train.seed = *a.seed;
    if (a.beta) cfg.train.beta_base = *a.beta;
    if (!a.beta_mode.empty()) cfg.train.beta_mode = parse_beta_mode(a.beta_mode);
    if (a.intra_toggle) cfg.train.intra_toggle_period = *a.intra_toggle;
    cfg.validate();
    const auto ds = store::load_run_dataset(cfg);
    auto opts = a.opts;
    opts.stop_step = a.stop_step;
    const auto outcome = store::run_pretrain(cfg, ds, a.out, opts);
    std::cout << json{{"run_id", outcome.manifest.run_id},
                      {"step", outcome.state.step},
                      {"finished", outcome.finished},
                      {"out", a.out}}
                     .dump()
              << std::endl;
    return 0;
}

struct EvalArgs {
    std::string checkpoint;
    DatasetFlags data;
    eval::ProbeConfig probe;
};

int cmd_eval(const EvalArgs& a, bool probe) {
    const auto ckpt = store::read_checkpoint(a.checkpoint);
    auto state = store::load_train_state<float>(ckpt);
    store::RunConfig cfg = ckpt.manifest.config;
    a.data.apply(cfg);
    const auto ds = store::load_run_dataset(cfg);
    eval::EvalConfig ec;
    ec.probe = a.probe;
    ec.run_probe = probe;
    ec.run_knn = true;
    const json eval_key{{"command", probe ? "probe" : "knn"},
                        {"run_id", ckpt.manifest.run_id},
                        {"step", state.step},
                        {"dataset", store::hex64(ds.fingerprint())},
                        {"probe", {{"epochs", a.probe.epochs}, {"lr", a.probe.lr}, {"batch", a.probe.batch_size}, {"seed", a.probe.seed}}}};
    const auto key = eval_key.dump();
    const auto report = eval::evaluate(state.student, ds, ec, store::hex64(fnv1a(key.data(), key.size())));
    std::cout << json(report).dump() << std::endl;
    return 0;
}

int cmd_gapreport(const std::string& metrics, const std::string& out) {
    const auto log = store::read_metrics(metrics);
    require(!log.steps.empty(), ErrorKind::metrics_malformed, metrics + ": no step records");
    const auto csv = store::gap_csv(log);
    if (!out.empty()) store::write_atomic(out, csv);
    std::cout << store::to_json(store::summarize_gap(log.steps), log.run_id).dump() << std::endl;
    return 0;
}

int cmd_gradcheck(const std::string& fault) {
    const auto rows = gradsuite::run({}, fault.empty() ? std::nullopt : std::optional<std::string>(fault));
    bool ok = true;
    std::printf("%-20s %14s %8s  %s\n", "op", "max_rel_err", "checked", "status");
    for (const auto& r : rows) {
        std::printf("%-20s %14.3e %8zu  %s\n", r.name.c_str(), r.max_relative_error, r.evaluated, r.passed ? "ok" : "FAIL");
        ok = ok && r.passed;
    }
    if (!ok) {
        std::string failed;
        for (const auto& r : rows) {
            if (!r.passed) failed += (failed.empty() ? "" : ",") + r.name;
        }
        return report_error("gradcheck_failed", "gradient mismatch in " + failed, 5);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Self-supervised pretraining with an EMA teacher"};
    app.require_subcommand(1);

    PretrainArgs pa;
    auto* pretrain = app.add_subcommand("pretrain", "run self-supervised pretraining");
    pretrain->add_option("--config", pa.config, "JSON run config");
    pretrain->add_option("--dataset", pa.data.kind, "cifar10 | cifar100 | synthetic")
        ->check(CLI::IsMember({"cifar10", "cifar100", "synthetic"}));
    pretrain->add_option("--data-dir", pa.data.dir, "directory with the CIFAR binary batches");
    pretrain->add_option("--objective", pa.objective, "inter=X,intra=Y");
    pretrain->add_option("--epochs", pa.epochs);
    pretrain->add_option("--seed", pa.seed);
    pretrain->add_option("--out", pa.out, "run directory")->required();
    pretrain->add_option("--beta", pa.beta, "base EMA coefficient");
    pretrain->add_option("--beta-mode", pa.beta_mode, "cosine_ramp | fixed")->check(CLI::IsMember({"cosine_ramp", "fixed"}));
    pretrain->add_option("--intra-toggle", pa.intra_toggle, "steps per on/off phase of the intra term (0 = always on)");
    pretrain->add_flag("--force", pa.opts.force, "overwrite a populated run directory");
    pretrain->add_flag("--resume", pa.opts.resume, "continue from the run directory's checkpoint");
    pretrain->add_option("--stop-after-step", pa.stop_step, "stop (with a checkpoint) before this step")->group("");

    EvalArgs ea;
    auto add_eval_options = [&](CLI::App* sub, bool probe) {
        sub->add_option("--checkpoint", ea.checkpoint)->required();
        sub->add_option("--dataset", ea.data.kind)->check(CLI::IsMember({"cifar10", "cifar100", "synthetic"}));
        sub->add_option("--data-dir", ea.data.dir);
        if (probe) {
            sub->add_option("--epochs", ea.probe.epochs, "probe epochs")->capture_default_str();
            sub->add_option("--lr", ea.probe.lr, "probe learning rate")->capture_default_str();
            sub->add_option("--seed", ea.probe.seed)->capture_default_str();
        }
    };
    auto* probe = app.add_subcommand("probe", "linear probe and KNN-1 on frozen backbone features");
    add_eval_options(probe, true);
    auto* knn = app.add_subcommand("knn", "KNN-1 on frozen backbone features");
    add_eval_options(knn, false);

    std::string metrics, csv;
    auto* gap = app.add_subcommand("gapreport", "CSV and tail summary of the teacher-student gap");
    gap->add_option("--metrics", metrics)->required();
    gap->add_option("--out", csv, "CSV path");

    std::string fault;
    auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
    grad->add_option("--inject-fault", fault, "route one case through a wrong backward rule")->group("");

    auto* show = app.add_subcommand("config", "print the default run config as JSON");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return report_error("usage", e.what(), 1);
    }

    try {
        if (*pretrain) return cmd_pretrain(pa);
        if (*probe) return cmd_eval(ea, true);
        if (*knn) return cmd_eval(ea, false);
        if (*gap) return cmd_gapreport(metrics, csv);
        if (*grad) return cmd_gradcheck(fault);
        if (*show) {
            std::cout << store::to_json(store::RunConfig{}).dump(2) << std::endl;
            return 0;
        }
    } catch (const Error& e) {
        return report_error(std::string(to_string(e.kind())), e.what(), exit_code_for(e.kind()));
    } catch (const std::exception& e) {
        return report_error("internal", e.what(), 1);
    }
    return 1;
}
