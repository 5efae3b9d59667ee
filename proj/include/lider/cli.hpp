#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lider/analysis.hpp"
#include "lider/benchmark.hpp"
#include "lider/config.hpp"
#include "lider/parallel.hpp"
#include "lider/serialize.hpp"

namespace lider {

namespace cli {

namespace fs = std::filesystem;

// Output root resolution: an explicit --out wins, otherwise the config's
// out_dir, rooted at $LIDER_OUT when that is set and the path is relative.
inline fs::path resolve_out_dir(const std::string& cli_out, const std::string& cfg_out) {
    if (!cli_out.empty()) return fs::path(cli_out);
    fs::path out(cfg_out);
    if (out.is_relative()) {
        if (const char* root = std::getenv("LIDER_OUT")) return fs::path(root) / out;
    }
    return out;
}

struct CellSummary {
    std::uint64_t seed = 0;
    double faa_cil = 0.0, faa_til = 0.0;
    std::optional<double> ff_cil, ff_til;
    std::vector<double> lipschitz_product_per_task;
    long lider_skipped_steps = 0;
    long total_steps = 0;
};

struct RunOutput {
    std::vector<CellSummary> cells;
    std::vector<RunResult> results;  // indexed like cells
};

// One full (seed per cell) experiment. When artifact_dir is non-empty, each
// cell writes its accuracy matrices plus a checkpoint and buffer dump at
// every task boundary under <artifact_dir>/seed<k>/.
inline RunOutput run_all_seeds(const ExperimentConfig& cfg, const LiderConfig& lider,
                               const fs::path& artifact_dir, std::size_t jobs) {
    RunOutput out;
    out.cells.resize(cfg.seeds.size());
    out.results.reserve(cfg.seeds.size());
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i)
        out.results.push_back(RunResult{AccuracyMatrix(1), AccuracyMatrix(1), RunLog{},
                                        MlpBackbone{}, MemoryBuffer(0, Rng(0))});

    parallel_for(cfg.seeds.size(), jobs, [&](std::size_t i) {
        const std::uint64_t seed = cfg.seeds[i];
        const TaskStream stream = cfg.stream.build(seed);
        TrainConfig tcfg = cfg.train;
        fs::path cell_dir;
        if (!artifact_dir.empty()) {
            cell_dir = artifact_dir / ("seed" + std::to_string(seed));
            fs::create_directories(cell_dir);
            tcfg.on_task_end = [cell_dir](std::size_t task, const MlpBackbone& model,
                                          const MemoryBuffer& buffer) {
                save_checkpoint(model, cell_dir / ("ckpt_task" + std::to_string(task) + ".json"));
                save_buffer(buffer, cell_dir / ("buffer_task" + std::to_string(task) + ".json"));
            };
        }
        RunResult res = run_experiment(stream, cfg.method, lider, tcfg, seed);
        if (!artifact_dir.empty()) {
            detail::write_text_file(cell_dir / "matrix_cil.csv", accuracy_matrix_csv(res.cil));
            detail::write_text_file(cell_dir / "matrix_til.csv", accuracy_matrix_csv(res.til));
        }

        CellSummary cell;
        cell.seed = seed;
        cell.faa_cil = faa(res.cil);
        cell.faa_til = faa(res.til);
        if (res.cil.num_tasks() >= 2) {
            cell.ff_cil = ff(res.cil);
            cell.ff_til = ff(res.til);
        }
        cell.lipschitz_product_per_task = res.log.lipschitz_product_per_task;
        cell.lider_skipped_steps = res.log.lider_skipped_steps;
        cell.total_steps = res.log.total_steps;
        out.cells[i] = std::move(cell);
        out.results[i] = std::move(res);
    });
    return out;
}

inline double mean_of(const std::vector<double>& v) {
    double total = 0.0;
    for (double x : v) total += x;
    return v.empty() ? 0.0 : total / static_cast<double>(v.size());
}

inline nlohmann::ordered_json cells_to_json(const std::vector<CellSummary>& cells) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const CellSummary& c : cells) {
        nlohmann::ordered_json jc;
        jc["seed"] = c.seed;
        jc["faa_cil"] = c.faa_cil;
        jc["faa_til"] = c.faa_til;
        jc["ff_cil"] = c.ff_cil ? nlohmann::ordered_json(*c.ff_cil) : nlohmann::ordered_json();
        jc["ff_til"] = c.ff_til ? nlohmann::ordered_json(*c.ff_til) : nlohmann::ordered_json();
        jc["lipschitz_product_per_task"] = c.lipschitz_product_per_task;
        jc["lider_skipped_steps"] = c.lider_skipped_steps;
        jc["total_steps"] = c.total_steps;
        arr.push_back(std::move(jc));
    }
    return arr;
}

inline nlohmann::ordered_json aggregate_json(const std::vector<CellSummary>& cells) {
    std::vector<double> faa_cil, faa_til, ff_cil, ff_til, final_lip;
    for (const CellSummary& c : cells) {
        faa_cil.push_back(c.faa_cil);
        faa_til.push_back(c.faa_til);
        if (c.ff_cil) ff_cil.push_back(*c.ff_cil);
        if (c.ff_til) ff_til.push_back(*c.ff_til);
        if (!c.lipschitz_product_per_task.empty())
            final_lip.push_back(c.lipschitz_product_per_task.back());
    }
    nlohmann::ordered_json j;
    j["mean_faa_cil"] = mean_of(faa_cil);
    j["mean_faa_til"] = mean_of(faa_til);
    j["mean_ff_cil"] = ff_cil.empty() ? nlohmann::ordered_json() : nlohmann::ordered_json(mean_of(ff_cil));
    j["mean_ff_til"] = ff_til.empty() ? nlohmann::ordered_json() : nlohmann::ordered_json(mean_of(ff_til));
    j["mean_final_lipschitz_product"] = mean_of(final_lip);
    return j;
}

inline int cmd_run(const std::string& config_path, const std::string& cli_out,
                   const std::vector<std::uint64_t>& seed_override, std::size_t jobs) {
    ExperimentConfig cfg = load_experiment_config(config_path);
    if (!seed_override.empty()) cfg.seeds = seed_override;
    const fs::path out = resolve_out_dir(cli_out, cfg.out_dir);
    fs::create_directories(out);

    RunOutput run = run_all_seeds(cfg, cfg.effective_lider(), out, jobs);

    nlohmann::ordered_json summary;
    summary["config"] = echo_config(cfg);
    summary["cells"] = cells_to_json(run.cells);
    summary["aggregate"] = aggregate_json(run.cells);
    detail::write_text_file(out / "summary.json", summary.dump(2) + "\n");

    for (const CellSummary& c : run.cells)
        std::printf("seed %llu: faa_cil=%.4f faa_til=%.4f\n",
                    static_cast<unsigned long long>(c.seed), c.faa_cil, c.faa_til);
    std::printf("mean faa_cil=%.4f -> %s\n",
                summary["aggregate"]["mean_faa_cil"].get<double>(),
                (out / "summary.json").string().c_str());
    return 0;
}

inline int cmd_sweep(const std::string& config_path, const std::string& cli_out,
                     const std::vector<double>& alphas, const std::vector<double>& betas,
                     std::size_t jobs) {
    if (alphas.empty() || betas.empty())
        throw ConfigError("sweep: alpha and beta grids must be non-empty");
    ExperimentConfig cfg = load_experiment_config(config_path);
    const fs::path out = resolve_out_dir(cli_out, cfg.out_dir);
    fs::create_directories(out);

    std::vector<std::vector<double>> mean_faa(alphas.size(),
                                              std::vector<double>(betas.size(), 0.0));
    nlohmann::ordered_json cells_json = nlohmann::ordered_json::array();
    for (std::size_t a = 0; a < alphas.size(); ++a) {
        for (std::size_t b = 0; b < betas.size(); ++b) {
            ExperimentConfig cell_cfg = cfg;
            cell_cfg.lider_enabled = true;
            if (!cfg.lider_enabled) cell_cfg.lider = LiderConfig{};
            cell_cfg.lider.alpha = alphas[a];
            cell_cfg.lider.beta = betas[b];
            if (!cfg.lider_enabled) cell_cfg.lider.target_lr = cfg.train.lr;
            const fs::path cell_dir =
                out / ("sweep_a" + std::to_string(a) + "_b" + std::to_string(b));
            RunOutput run = run_all_seeds(cell_cfg, cell_cfg.lider, cell_dir, jobs);
            std::vector<double> faas;
            for (const CellSummary& c : run.cells) faas.push_back(c.faa_cil);
            mean_faa[a][b] = mean_of(faas);

            nlohmann::ordered_json jc;
            jc["alpha"] = alphas[a];
            jc["beta"] = betas[b];
            jc["mean_faa_cil"] = mean_faa[a][b];
            jc["cells"] = cells_to_json(run.cells);
            cells_json.push_back(std::move(jc));
        }
    }

    double grid_mean = 0.0;
    for (const auto& row : mean_faa)
        for (double v : row) grid_mean += v;
    grid_mean /= static_cast<double>(alphas.size() * betas.size());

    // FAA deltas against the grid mean, alpha rows x beta columns
    std::string csv = "alpha_beta";
    for (double b : betas) csv += "," + detail::format_double(b);
    csv += "\n";
    for (std::size_t a = 0; a < alphas.size(); ++a) {
        csv += detail::format_double(alphas[a]);
        for (std::size_t b = 0; b < betas.size(); ++b)
            csv += "," + detail::format_double(mean_faa[a][b] - grid_mean);
        csv += "\n";
    }
    detail::write_text_file(out / "sweep_delta_faa.csv", csv);

    nlohmann::ordered_json summary;
    summary["config"] = echo_config(cfg);
    summary["alphas"] = alphas;
    summary["betas"] = betas;
    summary["grid_mean_faa_cil"] = grid_mean;
    summary["cells"] = std::move(cells_json);
    detail::write_text_file(out / "sweep_summary.json", summary.dump(2) + "\n");
    std::printf("sweep grid mean faa_cil=%.4f -> %s\n", grid_mean,
                (out / "sweep_delta_faa.csv").string().c_str());
    return 0;
}

inline std::vector<Example> test_union(const TaskStream& stream) {
    std::vector<Example> all;
    for (const Task& t : stream.tasks) all.insert(all.end(), t.test.begin(), t.test.end());
    return all;
}

inline int cmd_analyze(const std::string& kind, const std::string& checkpoint_path,
                       const std::string& config_path, const std::string& cli_out,
                       const std::string& buffer_path_flag, std::uint64_t run_seed) {
    ExperimentConfig cfg = load_experiment_config(config_path);
    const fs::path out = resolve_out_dir(cli_out, cfg.out_dir);
    fs::create_directories(out);
    const MlpBackbone model = load_checkpoint(checkpoint_path);
    const TaskStream stream = standardize_stream(cfg.stream.build(run_seed)).first;
    const AnalysisConfig& an = cfg.analysis;

    if (kind == "surface") {
        if (an.surface_task >= stream.num_tasks())
            throw ConfigError("analyze surface: surface_task out of range");
        const Task& task = stream.tasks[an.surface_task];
        if (an.surface_index >= task.train.size())
            throw ConfigError("analyze surface: surface_index out of range");
        const Example& e = task.train[an.surface_index];
        SurfaceGrid grid = decision_surface(model, e.x, e.y, an.eps, an.grid_size, an.seed,
                                            task.classes);
        detail::write_text_file(out / "surface.csv", surface_csv(grid));
        std::printf("surface: %zux%zu grid around task %zu point %zu%s -> %s\n", an.grid_size,
                    an.grid_size, an.surface_task, an.surface_index,
                    grid.fgsm_fallback ? " (fgsm fallback direction)" : "",
                    (out / "surface.csv").string().c_str());
        return 0;
    }
    if (kind == "guess") {
        fs::path buffer_path(buffer_path_flag);
        if (buffer_path.empty()) {
            std::string name = fs::path(checkpoint_path).filename().string();
            const std::size_t pos = name.find("ckpt");
            if (pos == std::string::npos)
                throw ConfigError("analyze guess: cannot derive buffer dump path; pass --buffer");
            name.replace(pos, 4, "buffer");
            buffer_path = fs::path(checkpoint_path).parent_path() / name;
        }
        if (!fs::exists(buffer_path))
            throw ConfigError("analyze guess: buffer dump not found: " + buffer_path.string());
        const MemoryBuffer buffer = load_buffer(buffer_path);
        ProbeConfig probe{an.n_perturb, an.radius, an.seed};
        BufferGuessResult guess = buffer_guessing_auc(model, buffer, stream.tasks[0].train,
                                                      stream.tasks[0].classes, probe);
        detail::write_text_file(out / "roc.csv", roc_csv(guess.roc));
        nlohmann::ordered_json j;
        j["auc"] = guess.auc;
        j["in_buffer"] = guess.in_buffer;
        j["total"] = guess.total;
        detail::write_text_file(out / "guess_summary.json", j.dump(2) + "\n");
        std::printf("buffer guessing auc=%.4f (%zu/%zu resident) -> %s\n", guess.auc,
                    guess.in_buffer, guess.total, (out / "roc.csv").string().c_str());
        return 0;
    }
    if (kind == "perturb") {
        const std::vector<PerturbationPoint> curve = weight_perturbation_robustness(
            model, test_union(stream), an.sigmas, an.trials, an.seed);
        detail::write_text_file(out / "perturb.csv", perturbation_csv(curve));
        std::printf("weight perturbation curve (%zu sigmas) -> %s\n", an.sigmas.size(),
                    (out / "perturb.csv").string().c_str());
        return 0;
    }
    if (kind == "lipschitz") {
        const Tensor probe = detail::test_union_batch(stream);
        MlpBackbone frozen;
        frozen.layer_dims = model.layer_dims;
        for (const Tensor& w : model.weights) frozen.weights.push_back(detach(w));
        Tape tape;
        ForwardTrace trace = forward_with_trace(tape, frozen, probe);
        Rng rng(an.seed);
        SpectralEstimate est = layer_lipschitz_estimates(tape, trace, an.power_iters, rng);
        std::string csv = "layer,lambda\n";
        double product = 1.0;
        for (std::size_t k = 0; k < est.num_layers(); ++k) {
            csv += std::to_string(k + 1) + "," + detail::format_double(est.values()[k]) + "\n";
            product *= est.values()[k];
        }
        csv += "product," + detail::format_double(product) + "\n";
        detail::write_text_file(out / "lipschitz.csv", csv);
        std::printf("lipschitz product=%.6g -> %s\n", product,
                    (out / "lipschitz.csv").string().c_str());
        return 0;
    }
    throw ConfigError("analyze: unknown kind '" + kind + "'");
}

inline int cmd_poison(const std::string& config_path, const std::string& cli_out,
                      const std::vector<double>& p_list, std::size_t jobs) {
    if (p_list.empty()) throw ConfigError("poison: p list must be non-empty");
    for (double p : p_list)
        if (p < 0.0 || p > 1.0) throw ConfigError("poison: p values must lie in [0, 1]");
    ExperimentConfig cfg = load_experiment_config(config_path);
    const fs::path out = resolve_out_dir(cli_out, cfg.out_dir);
    fs::create_directories(out);

    std::string csv = "p,mean_faa_cil,std_faa_cil\n";
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (double p : p_list) {
        ExperimentConfig run_cfg = cfg;
        run_cfg.method.poison_p = p;
        RunOutput run = run_all_seeds(run_cfg, run_cfg.effective_lider(), fs::path{}, jobs);
        std::vector<double> faas;
        for (const CellSummary& c : run.cells) faas.push_back(c.faa_cil);
        const double mean = mean_of(faas);
        double var = 0.0;
        for (double f : faas) var += (f - mean) * (f - mean);
        const double stddev = std::sqrt(var / static_cast<double>(faas.size()));
        csv += detail::format_double(p) + "," + detail::format_double(mean) + "," +
               detail::format_double(stddev) + "\n";
        nlohmann::ordered_json row;
        row["p"] = p;
        row["mean_faa_cil"] = mean;
        row["std_faa_cil"] = stddev;
        row["cells"] = cells_to_json(run.cells);
        rows.push_back(std::move(row));
        std::printf("p=%.3f mean faa_cil=%.4f\n", p, mean);
    }
    detail::write_text_file(out / "poison.csv", csv);
    nlohmann::ordered_json summary;
    summary["config"] = echo_config(cfg);
    summary["rows"] = std::move(rows);
    detail::write_text_file(out / "poison_summary.json", summary.dump(2) + "\n");
    return 0;
}

}  // namespace cli

// Entry point shared by the binary and the tests. Exit codes: 0 success,
// 2 configuration error, 3 numeric/runtime failure.
inline int cli_main(std::vector<std::string> args) {
    CLI::App app{"desk-scale continual-learning rehearsal laboratory"};
    app.require_subcommand(1);

    std::string config_path, out_dir, kind, checkpoint, buffer_path;
    std::vector<std::uint64_t> seeds;
    std::vector<double> alphas, betas, p_list;
    std::size_t jobs = 1;
    std::uint64_t run_seed = 0;
    bool run_seed_given = false;

    CLI::App* run = app.add_subcommand("run", "run all configured seeds of one method");
    run->add_option("--config", config_path, "experiment config (json)")->required();
    run->add_option("--out", out_dir, "output directory override");
    run->add_option("--seeds", seeds, "seed list override");
    run->add_option("--jobs", jobs, "parallel cells");

    CLI::App* sweep = app.add_subcommand("sweep", "alpha x beta grid of full runs");
    sweep->add_option("--config", config_path, "experiment config (json)")->required();
    sweep->add_option("--out", out_dir, "output directory override");
    sweep->add_option("--alphas", alphas, "alpha grid")->required();
    sweep->add_option("--betas", betas, "beta grid")->required();
    sweep->add_option("--jobs", jobs, "parallel cells");

    CLI::App* analyze = app.add_subcommand("analyze", "diagnostics on a saved checkpoint");
    analyze->add_option("--kind", kind, "surface | guess | perturb | lipschitz")->required();
    analyze->add_option("--checkpoint", checkpoint, "model checkpoint (json)")->required();
    analyze->add_option("--config", config_path, "experiment config (json)")->required();
    analyze->add_option("--out", out_dir, "output directory override");
    analyze->add_option("--buffer", buffer_path, "buffer dump (derived from checkpoint if omitted)");
    analyze->add_option("--seed", run_seed, "run seed the checkpoint came from")
        ->each([&](const std::string&) { run_seed_given = true; });

    CLI::App* poison = app.add_subcommand("poison", "full runs across poisoning probabilities");
    poison->add_option("--config", config_path, "experiment config (json)")->required();
    poison->add_option("--out", out_dir, "output directory override");
    poison->add_option("--p", p_list, "poison probabilities")->required();
    poison->add_option("--jobs", jobs, "parallel cells");

    std::vector<const char*> argv;
    argv.push_back("lider");
    for (const std::string& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (run->parsed()) return cli::cmd_run(config_path, out_dir, seeds, jobs);
        if (sweep->parsed()) return cli::cmd_sweep(config_path, out_dir, alphas, betas, jobs);
        if (analyze->parsed()) {
            if (!run_seed_given) {
                const ExperimentConfig cfg = load_experiment_config(config_path);
                run_seed = cfg.seeds.front();
            }
            return cli::cmd_analyze(kind, checkpoint, config_path, out_dir, buffer_path,
                                    run_seed);
        }
        if (poison->parsed()) return cli::cmd_poison(config_path, out_dir, p_list, jobs);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "runtime error: %s\n", e.what());
        return 3;
    }
    return 2;
}

}  // namespace lider
