#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "lider/analysis.hpp"
#include "lider/benchmark.hpp"
#include "lider/errors.hpp"
#include "lider/methods.hpp"
#include "lider/regularizer.hpp"

namespace lider {

// Defaults of the desk benchmark: 5 tasks x 2 classes, dim 16, 200 train and
// 100 test points per class. cluster_spread 0.5 keeps the tasks hard enough
// that rehearsal dynamics (forgetting, buffer overfitting) actually show.
struct StreamSpec {
    enum class Kind { synthetic, csv };
    Kind kind = Kind::synthetic;
    // synthetic
    std::size_t n_tasks = 5;
    std::size_t classes_per_task = 2;
    std::size_t dim = 16;
    std::size_t train_per_class = 200;
    std::size_t test_per_class = 100;
    double cluster_spread = 0.5;
    std::uint64_t seed = 1;
    // csv
    std::string path;
    double split_fraction = 0.8;

    TaskStream build(std::uint64_t seed_offset = 0) const {
        if (kind == Kind::csv) return load_csv_stream(path, n_tasks, split_fraction, seed);
        return make_synthetic_stream(n_tasks, classes_per_task, dim, train_per_class,
                                     test_per_class, cluster_spread, seed + seed_offset);
    }
};

struct AnalysisConfig {
    double eps = 0.5;
    std::size_t grid_size = 21;
    std::size_t n_perturb = 32;
    double radius = 0.1;
    std::vector<double> sigmas{0.0, 0.25, 0.5, 1.0, 2.0};
    std::size_t trials = 20;
    int power_iters = 50;
    std::uint64_t seed = 0;
    std::size_t surface_task = 0;
    std::size_t surface_index = 0;
};

struct ExperimentConfig {
    StreamSpec stream;
    MethodConfig method;
    bool lider_enabled = false;
    LiderConfig lider;
    TrainConfig train;
    AnalysisConfig analysis;
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    std::string out_dir = "out";

    LiderConfig effective_lider() const { return lider_enabled ? lider : LiderConfig{}; }
};

namespace detail {

using nlohmann::ordered_json;

inline void reject_unknown_keys(const ordered_json& j, const std::set<std::string>& allowed,
                                const std::string& where) {
    if (!j.is_object()) throw ConfigError("config: " + where + " must be an object");
    for (const auto& [key, value] : j.items())
        if (!allowed.count(key))
            throw ConfigError("config: unknown key '" + key + "' in " + where);
}

template <typename T>
T get_or(const ordered_json& j, const std::string& key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("config: bad value for key '" + key + "'");
    }
}

inline Method parse_method(const std::string& name) {
    if (name == "er") return Method::er;
    if (name == "er_ace") return Method::er_ace;
    if (name == "derpp") return Method::derpp;
    if (name == "gdumb") return Method::gdumb;
    if (name == "joint") return Method::joint;
    if (name == "finetune") return Method::finetune;
    throw ConfigError("config: unknown method '" + name + "'");
}

inline std::string method_name(Method m) {
    switch (m) {
        case Method::er: return "er";
        case Method::er_ace: return "er_ace";
        case Method::derpp: return "derpp";
        case Method::gdumb: return "gdumb";
        case Method::joint: return "joint";
        case Method::finetune: return "finetune";
    }
    return "?";
}

}  // namespace detail

// Strict parse: every unknown key is an error, referenced files must exist,
// and every default is materialized so the echoed config is complete.
inline ExperimentConfig parse_experiment_config(const nlohmann::ordered_json& j) {
    using detail::get_or;
    using detail::reject_unknown_keys;
    ExperimentConfig cfg;
    reject_unknown_keys(j, {"stream", "method", "buffer", "derpp", "gdumb", "lider", "model",
                            "train", "analysis", "seeds", "out_dir"},
                        "top level");

    if (j.contains("stream")) {
        const auto& js = j.at("stream");
        const std::string kind = get_or<std::string>(js, "kind", "synthetic");
        if (kind == "synthetic") {
            reject_unknown_keys(js,
                                {"kind", "n_tasks", "classes_per_task", "dim", "train_per_class",
                                 "test_per_class", "cluster_spread", "seed"},
                                "stream");
            cfg.stream.kind = StreamSpec::Kind::synthetic;
            cfg.stream.n_tasks = get_or<std::size_t>(js, "n_tasks", cfg.stream.n_tasks);
            cfg.stream.classes_per_task =
                get_or<std::size_t>(js, "classes_per_task", cfg.stream.classes_per_task);
            cfg.stream.dim = get_or<std::size_t>(js, "dim", cfg.stream.dim);
            cfg.stream.train_per_class =
                get_or<std::size_t>(js, "train_per_class", cfg.stream.train_per_class);
            cfg.stream.test_per_class =
                get_or<std::size_t>(js, "test_per_class", cfg.stream.test_per_class);
            cfg.stream.cluster_spread =
                get_or<double>(js, "cluster_spread", cfg.stream.cluster_spread);
            cfg.stream.seed = get_or<std::uint64_t>(js, "seed", cfg.stream.seed);
        } else if (kind == "csv") {
            reject_unknown_keys(js, {"kind", "path", "n_tasks", "split_fraction", "seed"},
                                "stream");
            cfg.stream.kind = StreamSpec::Kind::csv;
            if (!js.contains("path")) throw ConfigError("config: csv stream needs 'path'");
            cfg.stream.path = js.at("path").get<std::string>();
            cfg.stream.n_tasks = get_or<std::size_t>(js, "n_tasks", cfg.stream.n_tasks);
            cfg.stream.split_fraction =
                get_or<double>(js, "split_fraction", cfg.stream.split_fraction);
            cfg.stream.seed = get_or<std::uint64_t>(js, "seed", cfg.stream.seed);
            if (!std::filesystem::exists(cfg.stream.path))
                throw ConfigError("config: stream file does not exist: " + cfg.stream.path);
        } else {
            throw ConfigError("config: unknown stream kind '" + kind + "'");
        }
    }

    cfg.method.method = detail::parse_method(get_or<std::string>(j, "method", "er"));
    if (j.contains("buffer")) {
        const auto& jb = j.at("buffer");
        reject_unknown_keys(jb, {"capacity", "poison_p"}, "buffer");
        cfg.method.buffer_capacity =
            get_or<std::size_t>(jb, "capacity", cfg.method.buffer_capacity);
        cfg.method.poison_p = get_or<double>(jb, "poison_p", cfg.method.poison_p);
        if (cfg.method.poison_p < 0.0 || cfg.method.poison_p > 1.0)
            throw ConfigError("config: buffer.poison_p must lie in [0, 1]");
    }
    if (j.contains("derpp")) {
        const auto& jd = j.at("derpp");
        reject_unknown_keys(jd, {"alpha", "beta"}, "derpp");
        cfg.method.derpp_alpha = get_or<double>(jd, "alpha", cfg.method.derpp_alpha);
        cfg.method.derpp_beta = get_or<double>(jd, "beta", cfg.method.derpp_beta);
    }
    if (j.contains("gdumb")) {
        const auto& jg = j.at("gdumb");
        reject_unknown_keys(jg, {"fit_epochs"}, "gdumb");
        cfg.method.gdumb_fit_epochs = get_or<int>(jg, "fit_epochs", cfg.method.gdumb_fit_epochs);
    }

    if (j.contains("model")) {
        const auto& jm = j.at("model");
        reject_unknown_keys(jm, {"hidden_dims"}, "model");
        cfg.train.hidden_dims =
            get_or<std::vector<std::size_t>>(jm, "hidden_dims", cfg.train.hidden_dims);
        if (cfg.train.hidden_dims.empty())
            throw ConfigError("config: model.hidden_dims must name at least one hidden layer");
    }
    if (j.contains("train")) {
        const auto& jt = j.at("train");
        reject_unknown_keys(jt, {"epochs", "lr", "batch_size"}, "train");
        cfg.train.epochs = get_or<int>(jt, "epochs", cfg.train.epochs);
        cfg.train.lr = get_or<double>(jt, "lr", cfg.train.lr);
        cfg.train.batch_size = get_or<std::size_t>(jt, "batch_size", cfg.train.batch_size);
        if (cfg.train.epochs < 0) throw ConfigError("config: train.epochs must be >= 0");
        if (cfg.train.lr <= 0.0) throw ConfigError("config: train.lr must be positive");
        if (cfg.train.batch_size < 1) throw ConfigError("config: train.batch_size must be >= 1");
    }

    if (j.contains("lider") && !j.at("lider").is_null()) {
        const auto& jl = j.at("lider");
        reject_unknown_keys(jl,
                            {"alpha", "beta", "power_iters", "target_mode", "fixed_target",
                             "target_lr", "regularization_target"},
                            "lider");
        cfg.lider_enabled = true;
        cfg.lider.alpha = get_or<double>(jl, "alpha", 0.1);
        cfg.lider.beta = get_or<double>(jl, "beta", 0.1);
        cfg.lider.power_iters = get_or<int>(jl, "power_iters", 5);
        const std::string mode = get_or<std::string>(jl, "target_mode", "learned");
        if (mode == "learned")
            cfg.lider.target_mode = TargetMode::learned;
        else if (mode == "fixed")
            cfg.lider.target_mode = TargetMode::fixed;
        else
            throw ConfigError("config: lider.target_mode must be 'learned' or 'fixed'");
        cfg.lider.fixed_target = get_or<double>(jl, "fixed_target", 1.0);
        // the target step size follows the backbone lr unless overridden
        cfg.lider.target_lr = get_or<double>(jl, "target_lr", cfg.train.lr);
        const std::string target =
            get_or<std::string>(jl, "regularization_target", "buffer");
        if (target == "buffer")
            cfg.lider.regularization_target = RegTarget::buffer;
        else if (target == "stream")
            cfg.lider.regularization_target = RegTarget::stream;
        else
            throw ConfigError("config: lider.regularization_target must be 'buffer' or 'stream'");
        cfg.lider.validate();
    }

    if (j.contains("analysis")) {
        const auto& ja = j.at("analysis");
        reject_unknown_keys(ja,
                            {"eps", "grid_size", "n_perturb", "radius", "sigmas", "trials",
                             "power_iters", "seed", "surface_task", "surface_index"},
                            "analysis");
        cfg.analysis.eps = get_or<double>(ja, "eps", cfg.analysis.eps);
        cfg.analysis.grid_size = get_or<std::size_t>(ja, "grid_size", cfg.analysis.grid_size);
        cfg.analysis.n_perturb = get_or<std::size_t>(ja, "n_perturb", cfg.analysis.n_perturb);
        cfg.analysis.radius = get_or<double>(ja, "radius", cfg.analysis.radius);
        cfg.analysis.sigmas = get_or<std::vector<double>>(ja, "sigmas", cfg.analysis.sigmas);
        cfg.analysis.trials = get_or<std::size_t>(ja, "trials", cfg.analysis.trials);
        cfg.analysis.power_iters = get_or<int>(ja, "power_iters", cfg.analysis.power_iters);
        cfg.analysis.seed = get_or<std::uint64_t>(ja, "seed", cfg.analysis.seed);
        cfg.analysis.surface_task =
            get_or<std::size_t>(ja, "surface_task", cfg.analysis.surface_task);
        cfg.analysis.surface_index =
            get_or<std::size_t>(ja, "surface_index", cfg.analysis.surface_index);
    }

    cfg.seeds = detail::get_or<std::vector<std::uint64_t>>(j, "seeds", cfg.seeds);
    if (cfg.seeds.empty()) throw ConfigError("config: seeds must not be empty");
    cfg.out_dir = detail::get_or<std::string>(j, "out_dir", cfg.out_dir);
    return cfg;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config file does not exist: " + path.string());
    nlohmann::ordered_json j;
    try {
        j = nlohmann::ordered_json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
    return parse_experiment_config(j);
}

// Complete effective configuration (defaults materialized), echoed into every
// summary so runs are reproducible from their outputs alone.
inline nlohmann::ordered_json echo_config(const ExperimentConfig& cfg) {
    nlohmann::ordered_json j;
    nlohmann::ordered_json js;
    if (cfg.stream.kind == StreamSpec::Kind::synthetic) {
        js["kind"] = "synthetic";
        js["n_tasks"] = cfg.stream.n_tasks;
        js["classes_per_task"] = cfg.stream.classes_per_task;
        js["dim"] = cfg.stream.dim;
        js["train_per_class"] = cfg.stream.train_per_class;
        js["test_per_class"] = cfg.stream.test_per_class;
        js["cluster_spread"] = cfg.stream.cluster_spread;
        js["seed"] = cfg.stream.seed;
    } else {
        js["kind"] = "csv";
        js["path"] = cfg.stream.path;
        js["n_tasks"] = cfg.stream.n_tasks;
        js["split_fraction"] = cfg.stream.split_fraction;
        js["seed"] = cfg.stream.seed;
    }
    j["stream"] = std::move(js);
    j["method"] = detail::method_name(cfg.method.method);
    j["buffer"] = {{"capacity", cfg.method.buffer_capacity}, {"poison_p", cfg.method.poison_p}};
    j["derpp"] = {{"alpha", cfg.method.derpp_alpha}, {"beta", cfg.method.derpp_beta}};
    j["gdumb"] = {{"fit_epochs", cfg.method.gdumb_fit_epochs}};
    if (cfg.lider_enabled) {
        j["lider"] = {{"alpha", cfg.lider.alpha},
                      {"beta", cfg.lider.beta},
                      {"power_iters", cfg.lider.power_iters},
                      {"target_mode",
                       cfg.lider.target_mode == TargetMode::learned ? "learned" : "fixed"},
                      {"fixed_target", cfg.lider.fixed_target},
                      {"target_lr", cfg.lider.target_lr},
                      {"regularization_target",
                       cfg.lider.regularization_target == RegTarget::buffer ? "buffer"
                                                                            : "stream"}};
    } else {
        j["lider"] = nullptr;
    }
    j["model"] = {{"hidden_dims", cfg.train.hidden_dims}};
    j["train"] = {{"epochs", cfg.train.epochs},
                  {"lr", cfg.train.lr},
                  {"batch_size", cfg.train.batch_size}};
    j["analysis"] = {{"eps", cfg.analysis.eps},
                     {"grid_size", cfg.analysis.grid_size},
                     {"n_perturb", cfg.analysis.n_perturb},
                     {"radius", cfg.analysis.radius},
                     {"sigmas", cfg.analysis.sigmas},
                     {"trials", cfg.analysis.trials},
                     {"power_iters", cfg.analysis.power_iters},
                     {"seed", cfg.analysis.seed},
                     {"surface_task", cfg.analysis.surface_task},
                     {"surface_index", cfg.analysis.surface_index}};
    j["seeds"] = cfg.seeds;
    j["out_dir"] = cfg.out_dir;
    return j;
}

}  // namespace lider
