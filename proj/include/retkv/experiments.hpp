// Copyright (C) 2026 retkv authors
// SPDX-License-Identifier: Apache-2.0

// Experiment runners behind the command line tool: run configuration,
// theory checks, gate training, policy evaluation and survival traces.
//
// Every runner is a pure function of (config, seed) and writes its files
// through write_file_atomic after validating them. Nothing here prints.

#pragma once

#include "retkv/checkpoint.hpp"
#include "retkv/engine.hpp"
#include "retkv/eviction.hpp"
#include "retkv/task.hpp"
#include "retkv/theory.hpp"
#include "retkv/training.hpp"

#include "json.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace retkv {

using json = nlohmann::json;

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr int kReportSchemaVersion = 1;

/// Bad configuration, checkpoint or environment. Maps to exit status 2.
class ConfigError : public Error {
public:
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Threads

/// Worker count from RETKV_THREADS, else the hardware concurrency.
inline Index thread_count() {
    if (const char* env = std::getenv("RETKV_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end == env || *end != '\0' || v < 1 || v > 1024)
            throw ConfigError("RETKV_THREADS must be an integer in [1, 1024]");
        return static_cast<Index>(v);
    }
    return std::max<Index>(1, static_cast<Index>(std::thread::hardware_concurrency()));
}

/// Runs fn(i) for i in [0, n). Results must go to per-index slots; the first
/// exception thrown by any worker is rethrown.
template <class Fn>
void parallel_for(Index n, Fn&& fn) {
    const Index workers = std::min(n, thread_count());
    if (workers <= 1) {
        for (Index i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<Index> next{0};
    std::exception_ptr err;
    std::mutex mu;
    std::vector<std::thread> pool;
    for (Index w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (Index i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(mu);
                    if (!err) err = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    if (err) std::rethrow_exception(err);
}

// ---------------------------------------------------------------------------
// Run configuration

struct ModelConfig {
    Index heads = 2;  // per layer; the circuit always has two layers
    Index head_dim = 16;
    Index d_model = 64;
    Index gate_hidden = 16;
    GateInput gate_input = GateInput::kEmbedding;
    bool tied = true;
    double bias_init = kDefaultGateBias;
    double readout_scale = 0.01;
};

struct EvalConfig {
    std::vector<PolicyKind> policies = {PolicyKind::kFullCache, PolicyKind::kGlobalRetention,
                                        PolicyKind::kPerHeadRetention, PolicyKind::kRecency};
    std::vector<Index> budgets = {33, 66, 132, 528};
    Index samples = 200;
    Index page_size = 16;
};

struct TheoryConfig {
    Index identity_instances = 1000;
    Index max_tokens = 64;
    Index bound_instances = 1000;
    std::vector<Index> sweep_distractors = {10, 100, 1000, 10000};
    double sweep_margin = 1.0;
    Index var_configs = 10;
    PersistenceOptions persistence;
    Index fit_trajectories = 10;
    Index fit_length = 400;
    Index fit_dim = 4;
    double fit_radius = 0.8;
    double force_radius = 0.0;  // > 0 replaces every sampled transition radius
};

struct SurvivalConfig {
    Index samples = 8;
    std::vector<SelectionCriterion> criteria = {SelectionCriterion::topk(1), SelectionCriterion::topk(2),
                                                SelectionCriterion::topk(4), SelectionCriterion::mass(0.99)};
    std::vector<Index> horizons = {1, 2, 4, 8, 16, 32, 64, 128};
    PolicyKind policy = PolicyKind::kFullCache;
    Index budget = 132;
};

struct RunConfig {
    std::uint64_t seed = 0;
    bool has_seed = false;
    std::string task_id = "needle";
    TaskSpec task;
    ModelConfig model;
    EvictionConfig eviction;
    TrainConfig train;
    EvalConfig eval;
    TheoryConfig theory;
    SurvivalConfig survival;
    std::string out = "out";

    RunConfig() {
        train.cap_weight = 1e-3;
        train.cap_budget = 128.0;
    }

    void validate() const {
        if (!has_seed) throw ConfigError("config: seed is mandatory");
        if (task_id != "needle") throw ConfigError("config: unknown task id '" + task_id + "'");
        try {
            task.validate();
            train.validate();
            EvictionConfig probe = eviction;
            probe.validate();
        } catch (const ConfigError&) {
            throw;
        } catch (const Error& e) {
            throw ConfigError(std::string("config: ") + e.what());
        }
        if (model.heads < 1 || model.gate_hidden < 1) throw ConfigError("config: model sizes must be positive");
        if (eval.samples < 1 || eval.page_size < 1) throw ConfigError("config: eval sizes must be positive");
        if (eval.policies.empty() || eval.budgets.empty())
            throw ConfigError("config: eval needs at least one policy and one budget");
        for (Index b : eval.budgets)
            if (b < 1) throw ConfigError("config: budgets must be positive");
        if (theory.identity_instances < 0 || theory.bound_instances < 0 || theory.var_configs < 0)
            throw ConfigError("config: theory counts must be >= 0");
        if (theory.max_tokens < 2) throw ConfigError("config: theory.max_tokens must be >= 2");
        if (theory.fit_dim < 1 || theory.fit_length < theory.fit_dim + 2 || theory.fit_trajectories < 1)
            throw ConfigError("config: VAR fit sizes are too small");
        if (!(theory.fit_radius > 0.0 && theory.fit_radius < 1.0))
            throw ConfigError("config: theory.fit_radius must lie in (0, 1)");
        if (theory.force_radius < 0.0) throw ConfigError("config: theory.force_radius must be >= 0");
        if (survival.samples < 1 || survival.criteria.empty() || survival.horizons.empty())
            throw ConfigError("config: survival needs samples, criteria and horizons");
        for (const auto& c : survival.criteria)
            if ((c.kind == SelectionCriterion::Kind::kTopK && c.top_k < 1) ||
                (c.kind == SelectionCriterion::Kind::kMass && !(c.tau > 0.0 && c.tau <= 1.0)))
                throw ConfigError("config: bad survival criterion " + c.name());
        for (Index h : survival.horizons)
            if (h < 1) throw ConfigError("config: survival horizons must be positive");
    }
};

namespace detail {

inline std::string gate_input_name(GateInput g) {
    return g == GateInput::kEmbedding ? "embedding" : "key_value";
}

inline GateInput parse_gate_input(const std::string& s) {
    if (s == "embedding") return GateInput::kEmbedding;
    if (s == "key_value") return GateInput::kKeyValue;
    throw ConfigError("config: unknown gate_input '" + s + "'");
}

inline SelectionCriterion parse_criterion(const std::string& s) {
    try {
        if (s.rfind("top", 0) == 0) return SelectionCriterion::topk(std::stol(s.substr(3)));
        if (s.rfind("mass", 0) == 0) return SelectionCriterion::mass(std::stod(s.substr(4)));
    } catch (const std::logic_error&) {
    }
    throw ConfigError("config: unknown survival criterion '" + s + "'");
}

// Reads optional fields from one JSON object and rejects unknown keys.
class Reader {
public:
    Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j.is_object()) throw ConfigError("config: " + where_ + " must be an object");
    }
    ~Reader() = default;

    template <class T>
    void get(const char* key, T& dst) {
        seen_.push_back(key);
        if (!j_.contains(key)) return;
        try {
            dst = j_.at(key).get<T>();
        } catch (const json::exception&) {
            throw ConfigError("config: " + where_ + "." + key + " has the wrong type");
        }
    }

    const json* child(const char* key) {
        seen_.push_back(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (std::find(seen_.begin(), seen_.end(), k) == seen_.end())
                throw ConfigError("config: unknown key " + where_ + "." + k);
    }

private:
    const json& j_;
    std::string where_;
    std::vector<std::string> seen_;
};

}  // namespace detail

inline RunConfig parse_run_config(const json& j) {
    RunConfig c;
    detail::Reader top(j, "config");
    int version = -1;
    top.get("schema_version", version);
    if (version != kConfigSchemaVersion)
        throw ConfigError("config: schema_version must be " + std::to_string(kConfigSchemaVersion));
    if (j.contains("seed")) {
        std::uint64_t s = 0;
        top.get("seed", s);
        c.seed = s;
        c.has_seed = true;
    } else {
        top.child("seed");
    }
    top.get("out", c.out);
    if (const json* t = top.child("task")) {
        detail::Reader r(*t, "task");
        r.get("id", c.task_id);
        r.get("context_length", c.task.context_length);
        r.get("num_keys", c.task.num_keys);
        r.get("num_queries", c.task.num_queries);
        r.get("num_distractors", c.task.num_distractors);
        r.get("key_alphabet", c.task.key_alphabet);
        r.get("value_alphabet", c.task.value_alphabet);
        r.get("filler_alphabet", c.task.filler_alphabet);
        r.finish();
    }
    if (const json* m = top.child("model")) {
        detail::Reader r(*m, "model");
        r.get("heads", c.model.heads);
        r.get("head_dim", c.model.head_dim);
        r.get("d_model", c.model.d_model);
        r.get("gate_hidden", c.model.gate_hidden);
        std::string input = detail::gate_input_name(c.model.gate_input);
        r.get("gate_input", input);
        c.model.gate_input = detail::parse_gate_input(input);
        r.get("tied", c.model.tied);
        r.get("bias_init", c.model.bias_init);
        r.get("readout_scale", c.model.readout_scale);
        r.finish();
    }
    if (const json* e = top.child("eviction")) {
        detail::Reader r(*e, "eviction");
        r.get("horizon", c.eviction.horizon);
        r.get("cadence", c.eviction.cadence);
        r.get("protected_recent", c.eviction.protected_recent);
        std::string tb = c.eviction.tie_break == TieBreak::kYoungerFirst ? "younger_first" : "older_first";
        r.get("tie_break", tb);
        if (tb == "younger_first") c.eviction.tie_break = TieBreak::kYoungerFirst;
        else if (tb == "older_first") c.eviction.tie_break = TieBreak::kOlderFirst;
        else throw ConfigError("config: unknown tie_break '" + tb + "'");
        r.finish();
    }
    if (const json* t = top.child("train")) {
        detail::Reader r(*t, "train");
        r.get("steps", c.train.steps);
        r.get("batch", c.train.batch);
        r.get("lr", c.train.lr);
        r.get("lr_final", c.train.lr_final);
        r.get("cap_weight", c.train.cap_weight);
        r.get("cap_budget", c.train.cap_budget);
        r.get("per_head_cap", c.train.per_head_cap);
        r.get("adam_beta1", c.train.adam_beta1);
        r.get("adam_beta2", c.train.adam_beta2);
        r.get("adam_eps", c.train.adam_eps);
        r.get("divergence_factor", c.train.divergence_factor);
        r.finish();
    }
    if (const json* e = top.child("eval")) {
        detail::Reader r(*e, "eval");
        std::vector<std::string> names;
        for (auto p : c.eval.policies) names.push_back(policy_name(p));
        r.get("policies", names);
        c.eval.policies.clear();
        for (const auto& n : names) {
            try {
                c.eval.policies.push_back(parse_policy(n));
            } catch (const Error& err) {
                throw ConfigError(std::string("config: ") + err.what());
            }
        }
        r.get("budgets", c.eval.budgets);
        r.get("samples", c.eval.samples);
        r.get("page_size", c.eval.page_size);
        r.finish();
    }
    if (const json* t = top.child("theory")) {
        detail::Reader r(*t, "theory");
        r.get("identity_instances", c.theory.identity_instances);
        r.get("max_tokens", c.theory.max_tokens);
        r.get("bound_instances", c.theory.bound_instances);
        r.get("sweep_distractors", c.theory.sweep_distractors);
        r.get("sweep_margin", c.theory.sweep_margin);
        r.get("var_configs", c.theory.var_configs);
        r.get("max_steps", c.theory.persistence.max_steps);
        r.get("trials", c.theory.persistence.trials);
        r.get("start_states", c.theory.persistence.start_states);
        r.get("rollouts_per_state", c.theory.persistence.rollouts_per_state);
        r.get("fit_trajectories", c.theory.fit_trajectories);
        r.get("fit_length", c.theory.fit_length);
        r.get("fit_dim", c.theory.fit_dim);
        r.get("fit_radius", c.theory.fit_radius);
        r.get("force_radius", c.theory.force_radius);
        r.finish();
    }
    if (const json* s = top.child("survival")) {
        detail::Reader r(*s, "survival");
        r.get("samples", c.survival.samples);
        std::vector<std::string> names;
        for (const auto& k : c.survival.criteria) names.push_back(k.name());
        r.get("criteria", names);
        c.survival.criteria.clear();
        for (const auto& n : names) c.survival.criteria.push_back(detail::parse_criterion(n));
        r.get("horizons", c.survival.horizons);
        std::string pol = policy_name(c.survival.policy);
        r.get("policy", pol);
        try {
            c.survival.policy = parse_policy(pol);
        } catch (const Error& err) {
            throw ConfigError(std::string("config: ") + err.what());
        }
        r.get("budget", c.survival.budget);
        r.finish();
    }
    top.finish();
    return c;
}

inline json run_config_to_json(const RunConfig& c) {
    json j;
    j["schema_version"] = kConfigSchemaVersion;
    if (c.has_seed) j["seed"] = c.seed;
    j["out"] = c.out;
    j["task"] = {{"id", c.task_id},
                 {"context_length", c.task.context_length},
                 {"num_keys", c.task.num_keys},
                 {"num_queries", c.task.num_queries},
                 {"num_distractors", c.task.num_distractors},
                 {"key_alphabet", c.task.key_alphabet},
                 {"value_alphabet", c.task.value_alphabet},
                 {"filler_alphabet", c.task.filler_alphabet}};
    j["model"] = {{"heads", c.model.heads},
                  {"head_dim", c.model.head_dim},
                  {"d_model", c.model.d_model},
                  {"gate_hidden", c.model.gate_hidden},
                  {"gate_input", detail::gate_input_name(c.model.gate_input)},
                  {"tied", c.model.tied},
                  {"bias_init", c.model.bias_init},
                  {"readout_scale", c.model.readout_scale}};
    j["eviction"] = {{"horizon", c.eviction.horizon},
                     {"cadence", c.eviction.cadence},
                     {"protected_recent", c.eviction.protected_recent},
                     {"tie_break", c.eviction.tie_break == TieBreak::kYoungerFirst ? "younger_first"
                                                                                  : "older_first"}};
    j["train"] = {{"steps", c.train.steps},
                  {"batch", c.train.batch},
                  {"lr", c.train.lr},
                  {"lr_final", c.train.lr_final},
                  {"cap_weight", c.train.cap_weight},
                  {"cap_budget", c.train.cap_budget},
                  {"per_head_cap", c.train.per_head_cap},
                  {"adam_beta1", c.train.adam_beta1},
                  {"adam_beta2", c.train.adam_beta2},
                  {"adam_eps", c.train.adam_eps},
                  {"divergence_factor", c.train.divergence_factor}};
    std::vector<std::string> pols;
    for (auto p : c.eval.policies) pols.push_back(policy_name(p));
    j["eval"] = {{"policies", pols},
                 {"budgets", c.eval.budgets},
                 {"samples", c.eval.samples},
                 {"page_size", c.eval.page_size}};
    const auto& t = c.theory;
    j["theory"] = {{"identity_instances", t.identity_instances},
                   {"max_tokens", t.max_tokens},
                   {"bound_instances", t.bound_instances},
                   {"sweep_distractors", t.sweep_distractors},
                   {"sweep_margin", t.sweep_margin},
                   {"var_configs", t.var_configs},
                   {"max_steps", t.persistence.max_steps},
                   {"trials", t.persistence.trials},
                   {"start_states", t.persistence.start_states},
                   {"rollouts_per_state", t.persistence.rollouts_per_state},
                   {"fit_trajectories", t.fit_trajectories},
                   {"fit_length", t.fit_length},
                   {"fit_dim", t.fit_dim},
                   {"fit_radius", t.fit_radius},
                   {"force_radius", t.force_radius}};
    std::vector<std::string> crit;
    for (const auto& k : c.survival.criteria) crit.push_back(k.name());
    j["survival"] = {{"samples", c.survival.samples},
                     {"criteria", crit},
                     {"horizons", c.survival.horizons},
                     {"policy", policy_name(c.survival.policy)},
                     {"budget", c.survival.budget}};
    return j;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path);
    json j;
    try {
        is >> j;
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    return parse_run_config(j);
}

/// Named starting points. "toy" is the default configuration; "smoke" is
/// small enough for unit tests; "unstable" forces an explosive VAR(1).
inline RunConfig preset(const std::string& name) {
    RunConfig c;
    if (name == "toy") return c;
    if (name == "smoke") {
        c.train.steps = 20;
        c.eval.samples = 8;
        c.eval.budgets = {33, 132, 528};
        c.theory.identity_instances = 50;
        c.theory.bound_instances = 50;
        c.theory.var_configs = 2;
        c.theory.persistence.trials = 500;
        c.theory.persistence.start_states = 50;
        c.theory.persistence.rollouts_per_state = 50;
        c.theory.persistence.max_steps = 50;
        c.survival.samples = 2;
        return c;
    }
    if (name == "unstable") {
        c = preset("smoke");
        c.theory.force_radius = 1.05;
        return c;
    }
    throw ConfigError("unknown preset '" + name + "'");
}

// ---------------------------------------------------------------------------
// Output

/// A tidy table; every cell is already formatted.
struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    void validate() const {
        if (header.empty()) throw Error("table: empty header");
        for (const auto& h : header)
            if (h.empty() || h.find_first_of(",\n\"") != std::string::npos)
                throw Error("table: bad column name '" + h + "'");
        for (const auto& r : rows) {
            if (r.size() != header.size()) throw Error("table: row width differs from the header");
            for (const auto& cell : r)
                if (cell.empty() || cell.find_first_of(",\n\"") != std::string::npos ||
                    cell == "nan" || cell == "-nan" || cell == "inf" || cell == "-inf")
                    throw Error("table: bad cell '" + cell + "'");
        }
    }

    std::string to_csv() const {
        std::ostringstream os;
        for (std::size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << header[i];
        os << '\n';
        for (const auto& r : rows) {
            for (std::size_t i = 0; i < r.size(); ++i) os << (i ? "," : "") << r[i];
            os << '\n';
        }
        return os.str();
    }
};

/// Shortest decimal that reads back to the same double.
inline std::string fmt(double v) {
    if (!std::isfinite(v)) return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
    char buf[32];
    for (int p = 1; p <= 17; ++p) {
        std::snprintf(buf, sizeof buf, "%.*g", p, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

inline std::string fmt(Index v) { return std::to_string(v); }

/// Writes to a sibling temporary and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw Error("cannot write " + tmp.string());
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!os) throw Error("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline void write_table(const std::filesystem::path& path, const Table& t) {
    t.validate();
    write_file_atomic(path, t.to_csv());
}

// ---------------------------------------------------------------------------
// Theory suite

struct TheoryReport {
    json body;
    Index violations = 0;
    bool assumption_violated = false;
    Table persistence_curves;
};

namespace detail {

inline void require_keys(const json& j, std::initializer_list<const char*> keys) {
    for (const char* k : keys)
        if (!j.contains(k)) throw Error(std::string("report: missing field ") + k);
}

inline void check_finite_numbers(const json& j) {
    if (j.is_number_float() && !std::isfinite(j.get<double>())) throw Error("report: non-finite number");
    if (j.is_structured())
        for (const auto& v : j) check_finite_numbers(v);
}

/// Matrix with eigenvalues of modulus `radius`: a scaled product of random rotations.
inline Matrix random_transition(Index m, double radius, std::mt19937_64& rng) {
    std::normal_distribution<double> n01;
    Eigen::MatrixXd g(m, m);
    for (Index i = 0; i < m; ++i)
        for (Index j = 0; j < m; ++j) g(i, j) = n01(rng);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ();
    return Matrix(radius * q);
}

}  // namespace detail

inline json identity_suite(const TheoryConfig& t, std::uint64_t seed) {
    std::mt19937_64 rng(derive_seed(seed, 11));
    std::uniform_int_distribution<Index> len(2, t.max_tokens);
    std::normal_distribution<double> logit(0.0, 2.0);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    double worst = 0.0;
    Index violations = 0;
    for (Index k = 0; k < t.identity_instances; ++k) {
        const Index n = len(rng);
        Vector logits(n), ret(n);
        for (Index i = 0; i < n; ++i) {
            logits[i] = logit(rng);
            ret[i] = 0.01 + 0.99 * u01(rng);
        }
        UsefulSet useful;
        std::uniform_int_distribution<Index> pick(0, n - 1);
        const Index nu = std::uniform_int_distribution<Index>(1, n - 1)(rng);
        while (static_cast<Index>(useful.size()) < nu) useful.insert(pick(rng));
        const Cor1Check c = check_cor1(logits, useful, ret);
        const double err = std::abs(c.direct - c.formula);
        worst = std::max(worst, err);
        if (!(err <= 1e-12)) ++violations;
    }
    return {{"instances", t.identity_instances}, {"violations", violations}, {"max_abs_error", worst},
            {"tolerance", 1e-12}};
}

inline json dilution_bound_suite(const TheoryConfig& t, std::uint64_t seed) {
    std::mt19937_64 rng(derive_seed(seed, 12));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    Index violations = 0;
    double min_margin = std::numeric_limits<double>::infinity();
    for (Index k = 0; k < t.bound_instances; ++k) {
        const Index nu = std::uniform_int_distribution<Index>(1, 4)(rng);
        const Index nd = std::uniform_int_distribution<Index>(1, t.max_tokens - nu)(rng);
        const Index extra = std::uniform_int_distribution<Index>(0, t.max_tokens - nu - nd)(rng);
        const double margin = 3.0 * u01(rng);
        DilutionInstance inst;
        inst.margin = margin;
        inst.logits.resize(nu + nd + extra);
        const double best = 4.0 * u01(rng) - 2.0;
        for (Index i = 0; i < nu; ++i) {
            inst.logits[i] = i == 0 ? best : best - 4.0 * u01(rng);
            inst.useful.insert(i);
        }
        for (Index i = nu; i < nu + nd; ++i) {
            inst.logits[i] = best - margin * u01(rng);
            inst.near_tie.insert(i);
        }
        for (Index i = nu + nd; i < nu + nd + extra; ++i) inst.logits[i] = best - 6.0 * u01(rng);
        const Prop1Check c = check_prop1(inst);
        min_margin = std::min(min_margin, c.delta - c.bound);
        if (!c.holds) ++violations;
    }

    // Two useful tokens against a growing crowd inside a fixed margin.
    json sweep = json::array();
    bool monotone = true;
    double prev = -1.0;
    for (Index nd : t.sweep_distractors) {
        DilutionInstance inst;
        inst.margin = t.sweep_margin;
        inst.logits.resize(2 + nd);
        inst.logits[0] = 0.0;
        inst.logits[1] = -0.5 * t.sweep_margin;
        inst.useful = {0, 1};
        for (Index i = 2; i < 2 + nd; ++i) {
            inst.logits[i] = -t.sweep_margin * u01(rng);
            inst.near_tie.insert(i);
        }
        const Prop1Check c = check_prop1(inst);
        if (!c.holds) ++violations;
        if (c.delta <= prev) monotone = false;
        prev = c.delta;
        sweep.push_back({{"distractors", nd}, {"delta", c.delta}, {"bound", c.bound}});
    }
    return {{"instances", t.bound_instances},
            {"violations", violations},
            {"min_margin", t.bound_instances > 0 ? min_margin : 0.0},
            {"sweep", sweep},
            {"sweep_monotone", monotone},
            {"sweep_final_delta", prev}};
}

/// One randomized persistence setting: small VAR(1) state, eight cached
/// tokens, relaxed top-K region around one of them.
inline PersistenceConfig random_persistence_config(std::uint64_t seed, double force_radius) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::normal_distribution<double> n01;
    PersistenceConfig cfg;
    cfg.dim = std::uniform_int_distribution<Index>(2, 3)(rng);
    const double radius = force_radius > 0.0 ? force_radius : 0.3 + 0.6 * u01(rng);
    cfg.transition = detail::random_transition(cfg.dim, radius, rng);
    cfg.drift.resize(cfg.dim);
    for (Index j = 0; j < cfg.dim; ++j) cfg.drift[j] = 0.5 * n01(rng);
    cfg.noise_scale = 0.5 + u01(rng);
    cfg.compat.resize(8, cfg.dim);
    for (Index i = 0; i < 8; ++i)
        for (Index j = 0; j < cfg.dim; ++j) cfg.compat(i, j) = n01(rng);
    cfg.token = 0;
    cfg.top_k = std::uniform_int_distribution<Index>(1, 4)(rng);
    cfg.slack = 2.0 * u01(rng);
    const Index blocks[] = {1, 2, 4};
    cfg.block = blocks[std::uniform_int_distribution<int>(0, 2)(rng)];
    return cfg;
}

inline json var_fit_suite(const TheoryConfig& t, std::uint64_t seed) {
    std::vector<double> radii;
    bool all_stable = true;
    for (Index f = 0; f < t.fit_trajectories; ++f) {
        std::mt19937_64 rng(derive_seed(seed, 1000 + static_cast<std::uint64_t>(f)));
        std::normal_distribution<double> n01;
        const Matrix a = detail::random_transition(t.fit_dim, t.fit_radius, rng);
        Matrix traj(t.fit_length, t.fit_dim);
        Vector r = Vector::Zero(t.fit_dim);
        for (Index s = 0; s < t.fit_length; ++s) {
            Vector next = a * r;
            for (Index j = 0; j < t.fit_dim; ++j) next[j] += n01(rng);
            r = next;
            traj.row(s) = r.transpose();
        }
        const Var1Fit fit = fit_var1({traj});
        radii.push_back(fit.spectral_radius);
        all_stable = all_stable && fit.stable;
    }
    std::vector<double> sorted = radii;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    const double median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    return {{"configured_radius", t.fit_radius},
            {"median_fitted_radius", median},
            {"fits", static_cast<Index>(n)},
            {"all_stable", all_stable}};
}

inline TheoryReport run_theory_suite(const RunConfig& cfg) {
    cfg.validate();
    const auto& t = cfg.theory;
    TheoryReport rep;
    json& j = rep.body;
    j["schema_version"] = kReportSchemaVersion;
    j["seed"] = cfg.seed;
    j["identity"] = identity_suite(t, cfg.seed);
    j["dilution_bound"] = dilution_bound_suite(t, cfg.seed);
    j["var_fit"] = var_fit_suite(t, cfg.seed);

    rep.persistence_curves.header = {"config", "horizon", "survival", "stderr", "bound"};
    std::vector<json> per(static_cast<std::size_t>(t.var_configs));
    std::vector<std::vector<std::vector<std::string>>> rows(per.size());
    std::vector<std::string> assumption(per.size());
    parallel_for(t.var_configs, [&](Index k) {
        const auto seed_k = derive_seed(cfg.seed, 100 + static_cast<std::uint64_t>(k));
        const PersistenceConfig pc = random_persistence_config(seed_k, t.force_radius);
        PersistenceOptions opt = t.persistence;
        opt.seed = derive_seed(seed_k, 1);
        json& o = per[static_cast<std::size_t>(k)];
        o = {{"config", k},
             {"dim", pc.dim},
             {"spectral_radius", spectral_radius(pc.transition)},
             {"top_k", pc.top_k},
             {"slack", pc.slack},
             {"block", pc.block}};
        try {
            const PersistenceResult r = simulate_persistence(pc, opt);
            o["exit_estimate"] = r.exit_estimate;
            o["beta"] = r.bound.beta;
            o["scale"] = r.vacuous ? 0.0 : r.bound.scale;
            o["vacuous"] = r.vacuous;
            o["violations"] = r.violations;
            o["min_margin"] = r.vacuous ? 0.0 : r.min_margin;
            auto& rk = rows[static_cast<std::size_t>(k)];
            for (std::size_t n = 1; n < r.survival.size(); ++n)
                rk.push_back({fmt(k), fmt(static_cast<Index>(n)), fmt(r.survival[n]), fmt(r.stderr_[n]),
                              fmt(r.vacuous ? 1.0 : std::min(1.0, r.bound.at(static_cast<Index>(n))))});
        } catch (const AssumptionViolation& e) {
            assumption[static_cast<std::size_t>(k)] = e.what();
            o["assumption_violated"] = e.what();
        }
    });
    Index pviol = 0, vacuous = 0;
    double pmargin = std::numeric_limits<double>::infinity();
    std::string first_assumption;
    for (std::size_t k = 0; k < per.size(); ++k) {
        if (!assumption[k].empty()) {
            if (first_assumption.empty()) first_assumption = assumption[k];
            continue;
        }
        pviol += per[k]["violations"].get<Index>();
        if (per[k]["vacuous"].get<bool>()) ++vacuous;
        else pmargin = std::min(pmargin, per[k]["min_margin"].get<double>());
        for (auto& r : rows[k]) rep.persistence_curves.rows.push_back(std::move(r));
    }
    j["persistence"] = {{"configs", t.var_configs},
                        {"violations", pviol},
                        {"vacuous", vacuous},
                        {"min_margin", std::isfinite(pmargin) ? pmargin : 0.0},
                        {"per_config", per}};

    rep.assumption_violated = !first_assumption.empty();
    j["status"] = rep.assumption_violated ? "assumption violated" : "ok";
    if (rep.assumption_violated) j["assumption"] = first_assumption;
    rep.violations = j["identity"]["violations"].get<Index>() +
                     j["dilution_bound"]["violations"].get<Index>() + pviol +
                     (j["dilution_bound"]["sweep_monotone"].get<bool>() ? 0 : 1);
    j["total_violations"] = rep.violations;

    detail::require_keys(j, {"schema_version", "seed", "identity", "dilution_bound", "var_fit",
                             "persistence", "status", "total_violations"});
    detail::check_finite_numbers(j);
    return rep;
}

inline void write_theory_outputs(const std::filesystem::path& dir, const TheoryReport& rep) {
    write_file_atomic(dir / "theory.json", rep.body.dump(2) + "\n");
    write_table(dir / "persistence.csv", rep.persistence_curves);
}

// ---------------------------------------------------------------------------
// Model construction

inline Backbone make_backbone(const RunConfig& cfg) {
    CircuitSpec cs;
    cs.heads = cfg.model.heads;
    cs.head_dim = cfg.model.head_dim;
    cs.d_model = cfg.model.d_model;
    try {
        return build_needle_circuit(cfg.task, cs);
    } catch (const Error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
}

inline ModelShape gate_shape(const RunConfig& cfg, const Backbone& bb) {
    ModelShape s = bb.shape;
    s.gate_hidden = cfg.model.gate_hidden;
    return s;
}

inline GateParams initial_gates(const RunConfig& cfg, const Backbone& bb) {
    return GateParams::init(gate_shape(cfg, bb), cfg.model.gate_input, cfg.model.tied, cfg.seed,
                            cfg.model.bias_init, cfg.model.readout_scale);
}

// ---------------------------------------------------------------------------
// Training

inline Table loss_table(const std::vector<LossRecord>& curve) {
    Table t;
    t.header = {"step", "quality", "cap", "total"};
    for (const auto& r : curve) t.rows.push_back({fmt(r.step), fmt(r.quality), fmt(r.cap), fmt(r.total)});
    return t;
}

inline TrainResult run_train(const RunConfig& cfg) {
    cfg.validate();
    const Backbone bb = make_backbone(cfg);
    TrainConfig tc = cfg.train;
    tc.seed = cfg.seed;
    return train_gates(bb, initial_gates(cfg, bb), cfg.task, tc);
}

inline void write_train_outputs(const std::filesystem::path& dir, const RunConfig& cfg,
                                const TrainResult& res) {
    std::ostringstream os(std::ios::binary);
    write_checkpoint(os, Checkpoint{res.gates, cfg.seed, kGateActivation});
    write_table(dir / "loss.csv", loss_table(res.curve));
    write_file_atomic(dir / "checkpoint.bin", os.str());
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalRow {
    PolicyKind policy = PolicyKind::kFullCache;
    Index budget = 0;
    EvalSummary summary;
    double seconds_per_step = 0.0;
};

inline constexpr std::uint64_t kEvalStream = 0xE7A1;

inline std::vector<Sample> eval_samples(const RunConfig& cfg) {
    return generate_samples(cfg.task, cfg.eval.samples, derive_seed(cfg.seed, kEvalStream));
}

/// Evaluates every (policy, budget) cell. The full cache ignores the budget
/// and is reported once at L * H * sequence length.
inline std::vector<EvalRow> run_eval(const RunConfig& cfg, const GateParams* gates) {
    cfg.validate();
    const Backbone bb = make_backbone(cfg);
    if (gates) {
        const ModelShape want = gate_shape(cfg, bb);
        const ModelShape& got = gates->shape;
        if (got.layers != want.layers || got.heads != want.heads || got.head_dim != want.head_dim ||
            got.d_model != want.d_model)
            throw ConfigError("checkpoint shape does not match the configured model");
    }
    const auto samples = eval_samples(cfg);
    const Index full = bb.shape.num_heads_total() * cfg.task.sequence_length();
    std::vector<EvalRow> cells;
    for (PolicyKind p : cfg.eval.policies) {
        if (p == PolicyKind::kFullCache) {
            cells.push_back({p, full, {}, 0.0});
            continue;
        }
        const bool needs_gates = p == PolicyKind::kGlobalRetention || p == PolicyKind::kPerHeadRetention;
        if (needs_gates && !gates) throw ConfigError("policy " + policy_name(p) + " needs a checkpoint");
        for (Index b : cfg.eval.budgets) cells.push_back({p, b, {}, 0.0});
    }
    parallel_for(static_cast<Index>(cells.size()), [&](Index i) {
        EvalRow& row = cells[static_cast<std::size_t>(i)];
        EngineConfig ec;
        ec.policy = row.policy;
        ec.eviction = cfg.eviction;
        ec.eviction.budget = row.budget;
        ec.page_size = cfg.eval.page_size;
        const GateParams* g = row.policy == PolicyKind::kRecency ? nullptr : gates;
        try {
            const DecodeEngine engine(bb, g, ec);
            const auto t0 = std::chrono::steady_clock::now();
            row.summary = evaluate_samples(engine, samples);
            const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
            row.seconds_per_step = dt.count() / static_cast<double>(samples.size() * cfg.task.sequence_length());
        } catch (const Error& e) {
            throw ConfigError(std::string("eval: ") + e.what());
        }
    });
    return cells;
}

inline Table accuracy_table(const std::vector<EvalRow>& rows) {
    Table t;
    t.header = {"policy", "budget", "accuracy", "mean_retained", "peak_entries", "peak_pages"};
    for (const auto& r : rows)
        t.rows.push_back({policy_name(r.policy), fmt(r.budget), fmt(r.summary.accuracy),
                          fmt(r.summary.mean_retained), fmt(r.summary.peak_entries),
                          fmt(r.summary.peak_pages)});
    return t;
}

inline Table timing_table(const std::vector<EvalRow>& rows) {
    Table t;
    t.header = {"policy", "budget", "seconds_per_step"};
    for (const auto& r : rows)
        t.rows.push_back({policy_name(r.policy), fmt(r.budget), fmt(r.seconds_per_step)});
    return t;
}

inline void write_eval_outputs(const std::filesystem::path& dir, const std::vector<EvalRow>& rows) {
    write_table(dir / "accuracy.csv", accuracy_table(rows));
    write_table(dir / "timing.csv", timing_table(rows));
}

// ---------------------------------------------------------------------------
// Survival

struct SurvivalCurve {
    Index layer = 0;
    Index head = 0;
    SelectionCriterion criterion;
    std::vector<double> fraction;  // one per configured horizon
};

struct SurvivalReport {
    std::vector<SurvivalCurve> curves;
    std::vector<double> median_mass_size;  // per flattened head, for each mass criterion in order
};

/// Decodes sample prompts, records which cached tokens each query selects
/// under every criterion, and turns the records into survival curves per head.
inline SurvivalReport run_survival(const RunConfig& cfg, const GateParams* gates) {
    cfg.validate();
    const Backbone bb = make_backbone(cfg);
    const auto& s = bb.shape;
    const auto& crit = cfg.survival.criteria;
    const Index H = s.num_heads_total();
    const Index C = static_cast<Index>(crit.size());
    const Index T = cfg.task.sequence_length();
    // records[head][criterion][birth] per sample, pooled across samples
    std::vector<std::vector<std::vector<SurvivalRecord>>> pooled(
        static_cast<std::size_t>(H), std::vector<std::vector<SurvivalRecord>>(static_cast<std::size_t>(C)));
    std::vector<std::vector<Index>> mass_sizes(static_cast<std::size_t>(H));

    EngineConfig ec;
    ec.policy = cfg.survival.policy;
    ec.eviction = cfg.eviction;
    ec.eviction.budget = cfg.survival.budget;
    ec.page_size = cfg.eval.page_size;
    const bool needs_gates = ec.policy == PolicyKind::kGlobalRetention || ec.policy == PolicyKind::kPerHeadRetention;
    if (needs_gates && !gates) throw ConfigError("survival policy needs a checkpoint");
    std::unique_ptr<DecodeEngine> engine;
    try {
        engine = std::make_unique<DecodeEngine>(bb, needs_gates ? gates : nullptr, ec);
    } catch (const Error& e) {
        throw ConfigError(std::string("survival: ") + e.what());
    }
    const auto samples = generate_samples(cfg.task, cfg.survival.samples, derive_seed(cfg.seed, 0x5A));
    for (const auto& smp : samples) {
        std::vector<std::vector<std::vector<SurvivalRecord>>> rec(
            static_cast<std::size_t>(H), std::vector<std::vector<SurvivalRecord>>(static_cast<std::size_t>(C)));
        for (auto& per_head : rec)
            for (Index c = 0; c < C; ++c) {
                auto& v = per_head[static_cast<std::size_t>(c)];
                v.resize(static_cast<std::size_t>(T));
                for (Index b = 0; b < T; ++b) v[static_cast<std::size_t>(b)] = {b, {}, crit[static_cast<std::size_t>(c)]};
            }
        engine->run(smp, [&](Index l, Index h, Index step, const HeadCache& hc, const Vector& logits) {
            const auto hi = static_cast<std::size_t>(s.head_index(l, h));
            for (Index c = 0; c < C; ++c) {
                const auto& k = crit[static_cast<std::size_t>(c)];
                const auto picked = select_tokens(logits, k);
                if (k.kind == SelectionCriterion::Kind::kMass) mass_sizes[hi].push_back(static_cast<Index>(picked.size()));
                for (Index idx : picked) {
                    const Index birth = hc.births[static_cast<std::size_t>(idx)];
                    rec[hi][static_cast<std::size_t>(c)][static_cast<std::size_t>(birth)].selection_steps.push_back(step);
                }
            }
        });
        for (std::size_t h = 0; h < rec.size(); ++h)
            for (std::size_t c = 0; c < rec[h].size(); ++c)
                pooled[h][c].insert(pooled[h][c].end(), rec[h][c].begin(), rec[h][c].end());
    }
    SurvivalReport rep;
    for (Index l = 0; l < s.layers; ++l)
        for (Index h = 0; h < s.heads; ++h) {
            const auto hi = static_cast<std::size_t>(s.head_index(l, h));
            for (Index c = 0; c < C; ++c)
                rep.curves.push_back({l, h, crit[static_cast<std::size_t>(c)],
                                      survival_curve(pooled[hi][static_cast<std::size_t>(c)], cfg.survival.horizons)});
            auto& m = mass_sizes[hi];
            if (m.empty()) {
                rep.median_mass_size.push_back(0.0);
            } else {
                std::sort(m.begin(), m.end());
                rep.median_mass_size.push_back(static_cast<double>(m[m.size() / 2]));
            }
        }
    return rep;
}

inline Table survival_table(const RunConfig& cfg, const SurvivalReport& rep) {
    Table t;
    t.header = {"layer", "head", "horizon", "criterion", "fraction"};
    for (const auto& c : rep.curves)
        for (std::size_t i = 0; i < c.fraction.size(); ++i)
            t.rows.push_back({fmt(c.layer), fmt(c.head), fmt(cfg.survival.horizons[i]), c.criterion.name(),
                              fmt(c.fraction[i])});
    return t;
}

inline void write_survival_outputs(const std::filesystem::path& dir, const RunConfig& cfg,
                                   const SurvivalReport& rep) {
    write_table(dir / "survival.csv", survival_table(cfg, rep));
}

}  // namespace retkv
