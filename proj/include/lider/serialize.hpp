#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lider/analysis.hpp"
#include "lider/backbone.hpp"
#include "lider/benchmark.hpp"
#include "lider/buffer.hpp"
#include "lider/errors.hpp"

namespace lider {

using ordered_json = nlohmann::ordered_json;

namespace detail {

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + path.string());
    out << content;
}

inline ordered_json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open " + path.string());
    try {
        return ordered_json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

}  // namespace detail

// ---- model checkpoints: flat JSON with layer_dims + row-major weights ----

inline ordered_json checkpoint_to_json(const MlpBackbone& model) {
    ordered_json j;
    j["layer_dims"] = model.layer_dims;
    ordered_json weights = ordered_json::array();
    for (const Tensor& w : model.weights) weights.push_back(w.data());
    j["weights"] = std::move(weights);
    return j;
}

inline void save_checkpoint(const MlpBackbone& model, const std::filesystem::path& path) {
    detail::write_text_file(path, checkpoint_to_json(model).dump(2) + "\n");
}

inline MlpBackbone load_checkpoint(const std::filesystem::path& path) {
    const ordered_json j = detail::read_json_file(path);
    if (!j.contains("layer_dims") || !j.contains("weights"))
        throw ConfigError(path.string() + ": not a model checkpoint");
    MlpBackbone model;
    model.layer_dims = j.at("layer_dims").get<std::vector<std::size_t>>();
    const auto& weights = j.at("weights");
    if (model.layer_dims.size() < 3 || weights.size() + 1 != model.layer_dims.size())
        throw ConfigError(path.string() + ": inconsistent checkpoint");
    for (std::size_t k = 0; k < weights.size(); ++k) {
        std::vector<double> data = weights[k].get<std::vector<double>>();
        const std::size_t rows = model.layer_dims[k], cols = model.layer_dims[k + 1];
        if (data.size() != rows * cols)
            throw ConfigError(path.string() + ": weight size mismatch at layer " +
                              std::to_string(k));
        model.weights.push_back(Tensor::matrix(rows, cols, std::move(data), true));
    }
    return model;
}

// ---- buffer dumps ----

inline ordered_json buffer_to_json(const MemoryBuffer& buffer) {
    ordered_json j;
    j["capacity"] = buffer.capacity();
    j["seen_count"] = buffer.seen_count();
    ordered_json entries = ordered_json::array();
    for (const BufferEntry& e : buffer.entries()) {
        ordered_json je;
        je["x"] = e.x;
        je["y"] = e.y;
        je["task_id"] = e.task_id;
        je["insertion_step"] = e.insertion_step;
        if (e.stored_logits)
            je["stored_logits"] = *e.stored_logits;
        else
            je["stored_logits"] = nullptr;
        entries.push_back(std::move(je));
    }
    j["entries"] = std::move(entries);
    return j;
}

inline void save_buffer(const MemoryBuffer& buffer, const std::filesystem::path& path) {
    detail::write_text_file(path, buffer_to_json(buffer).dump(2) + "\n");
}

inline MemoryBuffer load_buffer(const std::filesystem::path& path) {
    const ordered_json j = detail::read_json_file(path);
    if (!j.contains("capacity") || !j.contains("entries"))
        throw ConfigError(path.string() + ": not a buffer dump");
    std::vector<BufferEntry> entries;
    for (const auto& je : j.at("entries")) {
        BufferEntry e;
        e.x = je.at("x").get<std::vector<double>>();
        e.y = je.at("y").get<int>();
        e.task_id = je.at("task_id").get<int>();
        e.insertion_step = je.at("insertion_step").get<long>();
        if (!je.at("stored_logits").is_null())
            e.stored_logits = je.at("stored_logits").get<std::vector<double>>();
        entries.push_back(std::move(e));
    }
    return MemoryBuffer::restore(j.at("capacity").get<std::size_t>(),
                                 j.at("seen_count").get<long>(), std::move(entries), Rng(0));
}

// ---- CSV emission ----

// rows = task i, cols = after-task t; cells with t < i stay empty
inline std::string accuracy_matrix_csv(const AccuracyMatrix& m) {
    std::string out = "task";
    for (std::size_t t = 0; t < m.num_tasks(); ++t)
        out += ",after_task_" + std::to_string(t);
    out += "\n";
    for (std::size_t i = 0; i < m.num_tasks(); ++i) {
        out += std::to_string(i);
        for (std::size_t t = 0; t < m.num_tasks(); ++t) {
            out += ",";
            if (m.defined(i, t)) out += detail::format_double(m.at(i, t));
        }
        out += "\n";
    }
    return out;
}

inline std::string surface_csv(const SurfaceGrid& grid) {
    std::string out = "i,j,s\n";
    for (std::size_t i = 0; i < grid.grid_size; ++i)
        for (std::size_t j = 0; j < grid.grid_size; ++j)
            out += detail::format_double(grid.coeffs[i]) + "," +
                   detail::format_double(grid.coeffs[j]) + "," +
                   detail::format_double(grid.at(i, j)) + "\n";
    return out;
}

inline std::string roc_csv(const std::vector<RocPoint>& points) {
    std::string out = "fpr,tpr,threshold\n";
    for (const RocPoint& p : points)
        out += detail::format_double(p.fpr) + "," + detail::format_double(p.tpr) + "," +
               detail::format_double(p.threshold) + "\n";
    return out;
}

inline std::string perturbation_csv(const std::vector<PerturbationPoint>& curve) {
    std::string out = "sigma,mean_acc,std_acc\n";
    for (const PerturbationPoint& p : curve)
        out += detail::format_double(p.sigma) + "," + detail::format_double(p.mean_acc) + "," +
               detail::format_double(p.std_acc) + "\n";
    return out;
}

}  // namespace lider
