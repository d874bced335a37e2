// Copyright (C) 2026 retkv authors
// SPDX-License-Identifier: Apache-2.0

// retkv command line: theory, train, eval and survival subcommands.
// Exit status: 0 success, 1 violation or divergence, 2 configuration error.

#include "retkv/experiments.hpp"

#include "CLI11.hpp"

#include <iostream>
#include <optional>

namespace {

using namespace retkv;

struct Common {
    std::string config;
    std::string preset = "toy";
    std::optional<std::uint64_t> seed;
    std::string out;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "run configuration (JSON)");
    sub->add_option("--preset", c.preset, "built-in configuration when --config is absent")
        ->check(CLI::IsMember({"toy", "smoke", "unstable"}));
    sub->add_option("--seed", c.seed, "master seed; overrides the config");
    sub->add_option("--out", c.out, "output directory; overrides the config");
}

RunConfig resolve(const Common& c) {
    RunConfig cfg = c.config.empty() ? preset(c.preset) : load_run_config(c.config);
    if (c.seed) {
        cfg.seed = *c.seed;
        cfg.has_seed = true;
    }
    if (!c.out.empty()) cfg.out = c.out;
    cfg.validate();
    return cfg;
}

GateParams load_gates(const std::string& path) {
    try {
        return load_checkpoint(path).gates;
    } catch (const CheckpointError& e) {
        throw ConfigError(e.what());
    }
}

int cmd_theory(const Common& c) {
    const RunConfig cfg = resolve(c);
    const TheoryReport rep = run_theory_suite(cfg);
    write_theory_outputs(cfg.out, rep);
    if (rep.assumption_violated) {
        std::cerr << "assumption violated: " << rep.body["assumption"].get<std::string>() << "\n";
        return 1;
    }
    std::cout << "theory: " << rep.violations << " violations\n";
    return rep.violations == 0 ? 0 : 1;
}

int cmd_train(const Common& c) {
    const RunConfig cfg = resolve(c);
    const TrainResult res = run_train(cfg);
    write_train_outputs(cfg.out, cfg, res);
    write_file_atomic(std::filesystem::path(cfg.out) / "config.json", run_config_to_json(cfg).dump(2) + "\n");
    const auto& first = res.curve.front();
    const auto& last = res.curve.back();
    std::cout << "train: quality " << first.quality << " -> " << last.quality << ", cap " << first.cap
              << " -> " << last.cap << "\n";
    return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint) {
    const RunConfig cfg = resolve(c);
    std::optional<GateParams> gates;
    if (!checkpoint.empty()) gates = load_gates(checkpoint);
    const auto rows = run_eval(cfg, gates ? &*gates : nullptr);
    write_eval_outputs(cfg.out, rows);
    for (const auto& r : rows)
        std::cout << policy_name(r.policy) << " budget " << r.budget << " accuracy " << r.summary.accuracy << "\n";
    return 0;
}

int cmd_survival(const Common& c, const std::string& checkpoint) {
    const RunConfig cfg = resolve(c);
    std::optional<GateParams> gates;
    if (!checkpoint.empty()) gates = load_gates(checkpoint);
    const SurvivalReport rep = run_survival(cfg, gates ? &*gates : nullptr);
    write_survival_outputs(cfg.out, cfg, rep);
    std::cout << "survival: " << rep.curves.size() << " curves\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"retkv: retention-gated KV eviction experiments"};
    app.require_subcommand(1);
    Common theory, train, eval, survival;
    std::string eval_ckpt, surv_ckpt;
    auto* t = app.add_subcommand("theory", "dilution identities, bounds and persistence checks");
    add_common(t, theory);
    auto* tr = app.add_subcommand("train", "train retention gates on the needle task");
    add_common(tr, train);
    auto* e = app.add_subcommand("eval", "accuracy per eviction policy and budget");
    add_common(e, eval);
    e->add_option("--checkpoint", eval_ckpt, "trained gates");
    auto* s = app.add_subcommand("survival", "token survival curves from decoding traces");
    add_common(s, survival);
    s->add_option("--checkpoint", surv_ckpt, "trained gates, for retention policies");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int rc = app.exit(err);
        return rc == 0 ? 0 : 2;
    }
    try {
        if (*t) return cmd_theory(theory);
        if (*tr) return cmd_train(train);
        if (*e) return cmd_eval(eval, eval_ckpt);
        if (*s) return cmd_survival(survival, surv_ckpt);
    } catch (const ConfigError& err) {
        std::cerr << "config error: " << err.what() << "\n";
        return 2;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 1;
    }
    return 2;
}
