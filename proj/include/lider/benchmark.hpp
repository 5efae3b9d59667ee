#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "lider/backbone.hpp"
#include "lider/buffer.hpp"
#include "lider/errors.hpp"
#include "lider/methods.hpp"
#include "lider/regularizer.hpp"
#include "lider/rng.hpp"
#include "lider/spectral.hpp"

namespace lider {

struct Example {
    std::vector<double> x;
    int y = 0;
};

struct Task {
    std::vector<Example> train;
    std::vector<Example> test;
    std::vector<int> classes;
};

// Succession of tasks with pairwise-disjoint class sets. Class ids are
// contiguous 0..C-1; original_labels maps them back to the source labels
// (identity for synthetic streams).
struct TaskStream {
    std::vector<Task> tasks;
    std::size_t dim = 0;
    int num_classes = 0;
    std::vector<long> original_labels;

    std::size_t num_tasks() const { return tasks.size(); }
};

// Isotropic Gaussian blob per class, mean drawn uniformly on the unit
// sphere; classes are grouped contiguously into tasks.
inline TaskStream make_synthetic_stream(std::size_t n_tasks, std::size_t classes_per_task,
                                        std::size_t dim, std::size_t train_per_class,
                                        std::size_t test_per_class, double cluster_spread,
                                        std::uint64_t seed) {
    if (n_tasks < 1 || classes_per_task < 1 || dim < 1 || train_per_class < 1 ||
        test_per_class < 1)
        throw ConfigError("make_synthetic_stream: all counts must be >= 1");
    if (cluster_spread < 0.0) throw ConfigError("make_synthetic_stream: negative spread");

    TaskStream stream;
    stream.dim = dim;
    stream.num_classes = static_cast<int>(n_tasks * classes_per_task);
    Rng rng(seed);
    int cls = 0;
    for (std::size_t t = 0; t < n_tasks; ++t) {
        Task task;
        for (std::size_t c = 0; c < classes_per_task; ++c, ++cls) {
            task.classes.push_back(cls);
            const std::vector<double> mean = rng.unit_vector(dim);
            auto sample = [&](std::vector<Example>& dst, std::size_t count) {
                for (std::size_t i = 0; i < count; ++i) {
                    Example e;
                    e.y = cls;
                    e.x.resize(dim);
                    for (std::size_t d = 0; d < dim; ++d)
                        e.x[d] = mean[d] + cluster_spread * rng.normal();
                    dst.push_back(std::move(e));
                }
            };
            sample(task.train, train_per_class);
            sample(task.test, test_per_class);
        }
        stream.tasks.push_back(std::move(task));
    }
    for (int c = 0; c < stream.num_classes; ++c) stream.original_labels.push_back(c);
    return stream;
}

namespace detail {

inline std::string format_double(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline long parse_label(const std::string& field, std::size_t line_no) {
    long value = 0;
    auto res = std::from_chars(field.data(), field.data() + field.size(), value);
    if (res.ec != std::errc() || res.ptr != field.data() + field.size())
        throw ConfigError("csv stream: non-integer label at line " + std::to_string(line_no));
    return value;
}

inline double parse_feature(const std::string& field, std::size_t line_no) {
    double value = 0.0;
    auto res = std::from_chars(field.data(), field.data() + field.size(), value);
    if (res.ec != std::errc() || res.ptr != field.data() + field.size())
        throw ConfigError("csv stream: malformed feature at line " + std::to_string(line_no));
    return value;
}

}  // namespace detail

// Rows are "label,f1,...,fd". Classes are sorted, split contiguously into
// n_tasks groups, and each class is split train/test with a seeded shuffle.
inline TaskStream load_csv_stream(const std::string& path, std::size_t n_tasks,
                                  double split_fraction, std::uint64_t seed) {
    if (n_tasks < 1) throw ConfigError("load_csv_stream: n_tasks must be >= 1");
    if (split_fraction <= 0.0 || split_fraction > 1.0)
        throw ConfigError("load_csv_stream: split_fraction must be in (0, 1]");
    std::ifstream in(path);
    if (!in) throw ConfigError("load_csv_stream: cannot open " + path);

    std::vector<long> labels;
    std::vector<std::vector<double>> rows;
    std::string line;
    std::size_t line_no = 0;
    std::size_t width = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (fields.size() < 2)
            throw ConfigError("csv stream: too few columns at line " + std::to_string(line_no));
        if (width == 0) width = fields.size();
        if (fields.size() != width)
            throw ConfigError("csv stream: ragged row at line " + std::to_string(line_no));
        labels.push_back(detail::parse_label(fields[0], line_no));
        std::vector<double> x;
        for (std::size_t i = 1; i < fields.size(); ++i)
            x.push_back(detail::parse_feature(fields[i], line_no));
        rows.push_back(std::move(x));
    }
    if (rows.empty()) throw ConfigError("load_csv_stream: no data rows in " + path);

    std::vector<long> distinct(labels);
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    if (distinct.size() % n_tasks != 0)
        throw ConfigError("load_csv_stream: class count " + std::to_string(distinct.size()) +
                          " is not divisible by n_tasks " + std::to_string(n_tasks));
    const std::size_t per_task = distinct.size() / n_tasks;

    TaskStream stream;
    stream.dim = width - 1;
    stream.num_classes = static_cast<int>(distinct.size());
    stream.original_labels = distinct;

    std::vector<std::vector<std::size_t>> by_class(distinct.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto it = std::lower_bound(distinct.begin(), distinct.end(), labels[i]);
        by_class[static_cast<std::size_t>(it - distinct.begin())].push_back(i);
    }

    int cls = 0;
    for (std::size_t t = 0; t < n_tasks; ++t) {
        Task task;
        for (std::size_t c = 0; c < per_task; ++c, ++cls) {
            task.classes.push_back(cls);
            const std::vector<std::size_t>& members = by_class[static_cast<std::size_t>(cls)];
            Rng split_rng = Rng::stream(seed, static_cast<std::uint64_t>(cls));
            const std::vector<std::size_t> order = split_rng.permutation(members.size());
            const std::size_t train_n = static_cast<std::size_t>(
                std::lround(split_fraction * static_cast<double>(members.size())));
            for (std::size_t i = 0; i < members.size(); ++i) {
                Example e{rows[members[order[i]]], cls};
                (i < train_n ? task.train : task.test).push_back(std::move(e));
            }
        }
        stream.tasks.push_back(std::move(task));
    }
    return stream;
}

// Writes "label,f1,...,fd" rows (original labels), tasks in order, train rows
// before test rows. Doubles use the shortest round-trip representation.
inline void emit_csv_stream(const TaskStream& stream, std::ostream& out) {
    auto write = [&](const Example& e) {
        out << stream.original_labels[static_cast<std::size_t>(e.y)];
        for (double v : e.x) out << ',' << detail::format_double(v);
        out << '\n';
    };
    for (const Task& task : stream.tasks) {
        for (const Example& e : task.train) write(e);
        for (const Example& e : task.test) write(e);
    }
}

struct StandardizeStats {
    std::vector<double> mean;
    std::vector<double> std_dev;
};

// Zero mean, unit variance per feature over the union of train sets; the
// same affine map is applied to the test sets.
inline std::pair<TaskStream, StandardizeStats> standardize_stream(const TaskStream& stream) {
    StandardizeStats stats;
    stats.mean.assign(stream.dim, 0.0);
    stats.std_dev.assign(stream.dim, 0.0);
    std::size_t count = 0;
    for (const Task& t : stream.tasks)
        for (const Example& e : t.train) {
            for (std::size_t d = 0; d < stream.dim; ++d) stats.mean[d] += e.x[d];
            ++count;
        }
    if (count == 0) throw ConfigError("standardize_stream: no training data");
    for (double& m : stats.mean) m /= static_cast<double>(count);
    for (const Task& t : stream.tasks)
        for (const Example& e : t.train)
            for (std::size_t d = 0; d < stream.dim; ++d) {
                const double c = e.x[d] - stats.mean[d];
                stats.std_dev[d] += c * c;
            }
    for (double& s : stats.std_dev) s = std::max(std::sqrt(s / static_cast<double>(count)), 1e-12);

    TaskStream out = stream;
    for (Task& t : out.tasks) {
        for (Example& e : t.train)
            for (std::size_t d = 0; d < out.dim; ++d)
                e.x[d] = (e.x[d] - stats.mean[d]) / stats.std_dev[d];
        for (Example& e : t.test)
            for (std::size_t d = 0; d < out.dim; ++d)
                e.x[d] = (e.x[d] - stats.mean[d]) / stats.std_dev[d];
    }
    return {std::move(out), std::move(stats)};
}

// a[i][t]: accuracy on task i's test set after finishing training on task t,
// defined for t >= i.
class AccuracyMatrix {
public:
    explicit AccuracyMatrix(std::size_t n_tasks)
        : n_(n_tasks), v_(n_tasks * n_tasks, std::numeric_limits<double>::quiet_NaN()) {}

    std::size_t num_tasks() const { return n_; }

    void set(std::size_t i, std::size_t t, double acc) {
        if (i >= n_ || t >= n_ || t < i) throw ShapeError("accuracy matrix: bad cell");
        v_[i * n_ + t] = acc;
    }

    bool defined(std::size_t i, std::size_t t) const {
        return i < n_ && t < n_ && t >= i && !std::isnan(v_[i * n_ + t]);
    }

    double at(std::size_t i, std::size_t t) const {
        if (!defined(i, t)) throw ShapeError("accuracy matrix: undefined cell");
        return v_[i * n_ + t];
    }

private:
    std::size_t n_;
    std::vector<double> v_;
};

// Final Average Accuracy: mean over tasks of the last column.
inline double faa(const AccuracyMatrix& m) {
    const std::size_t n = m.num_tasks();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += m.at(i, n - 1);  // throws if incomplete
    return total / static_cast<double>(n);
}

// Final Forgetting: mean over non-final tasks of the drop from the best
// pre-final accuracy to the final one, clamped at zero per task so monotone
// histories score exactly 0.
inline double ff(const AccuracyMatrix& m) {
    const std::size_t n = m.num_tasks();
    if (n < 2) throw ConfigError("ff: needs at least two tasks");
    double total = 0.0;
    for (std::size_t i = 0; i + 1 < n; ++i) {
        double best_drop = 0.0;
        for (std::size_t t = i; t + 1 < n; ++t)
            best_drop = std::max(best_drop, m.at(i, t) - m.at(i, n - 1));
        total += best_drop;
    }
    return total / static_cast<double>(n - 1);
}

namespace detail {

inline std::size_t argmax_row(const double* row, const std::vector<int>& allowed) {
    std::size_t best = static_cast<std::size_t>(allowed[0]);
    for (int c : allowed)
        if (row[c] > row[best]) best = static_cast<std::size_t>(c);
    return best;
}

inline double accuracy_over(const MlpBackbone& model, const std::vector<Example>& test,
                            const std::vector<int>& allowed) {
    if (test.empty()) throw ConfigError("accuracy: empty test set");
    const std::size_t dim = model.input_dim();
    std::vector<double> xs;
    xs.reserve(test.size() * dim);
    for (const Example& e : test) xs.insert(xs.end(), e.x.begin(), e.x.end());
    const std::vector<double> logits = forward_plain(model, xs, test.size());
    const std::size_t classes = model.num_classes();
    std::size_t correct = 0;
    for (std::size_t i = 0; i < test.size(); ++i)
        if (argmax_row(logits.data() + i * classes, allowed) ==
            static_cast<std::size_t>(test[i].y))
            ++correct;
    return static_cast<double>(correct) / static_cast<double>(test.size());
}

}  // namespace detail

// Class-IL: argmax over every class the model knows.
inline double class_il_accuracy(const MlpBackbone& model, const std::vector<Example>& test) {
    std::vector<int> all(model.num_classes());
    for (std::size_t c = 0; c < all.size(); ++c) all[c] = static_cast<int>(c);
    return detail::accuracy_over(model, test, all);
}

// Task-IL: argmax restricted to the task's own classes.
inline double task_il_accuracy(const MlpBackbone& model, const std::vector<Example>& test,
                               const std::vector<int>& task_classes) {
    if (task_classes.empty()) throw ConfigError("task_il_accuracy: empty class set");
    return detail::accuracy_over(model, test, task_classes);
}

// Defaults give the desk benchmark enough optimization pressure per stream
// example that rehearsal pathologies (buffer overfitting, eroding old-task
// boundaries) are measurable within seconds.
struct TrainConfig {
    int epochs = 5;
    double lr = 0.2;
    std::size_t batch_size = 8;
    std::vector<std::size_t> hidden_dims = {64};
    bool record_steps = true;
    int lipschitz_probe_iters = 50;
    std::function<void(std::size_t, const MlpBackbone&, const MemoryBuffer&)> on_task_end;
};

struct StepRecord {
    std::size_t task = 0;
    int epoch = 0;
    long step = 0;
    StepLosses losses;
};

struct RunLog {
    std::vector<double> lipschitz_product_per_task;
    long lider_skipped_steps = 0;
    long total_steps = 0;
    std::vector<StepRecord> steps;  // populated when TrainConfig::record_steps
};

struct RunResult {
    AccuracyMatrix cil;
    AccuracyMatrix til;
    RunLog log;
    MlpBackbone model;
    MemoryBuffer buffer;
};

namespace detail {

// All tasks merged into one (for the joint upper bound). Train/test order is
// the task order, so |T|=1 streams are unchanged.
inline TaskStream merge_tasks(const TaskStream& stream) {
    TaskStream merged;
    merged.dim = stream.dim;
    merged.num_classes = stream.num_classes;
    merged.original_labels = stream.original_labels;
    Task all;
    for (const Task& t : stream.tasks) {
        all.train.insert(all.train.end(), t.train.begin(), t.train.end());
        all.test.insert(all.test.end(), t.test.begin(), t.test.end());
        all.classes.insert(all.classes.end(), t.classes.begin(), t.classes.end());
    }
    merged.tasks.push_back(std::move(all));
    return merged;
}

inline Batch batch_from_indices(const std::vector<Example>& data,
                                const std::vector<std::size_t>& order, std::size_t begin,
                                std::size_t end, std::size_t dim) {
    std::vector<double> xs;
    std::vector<int> ys;
    xs.reserve((end - begin) * dim);
    for (std::size_t i = begin; i < end; ++i) {
        const Example& e = data[order[i]];
        xs.insert(xs.end(), e.x.begin(), e.x.end());
        ys.push_back(e.y);
    }
    return Batch{Tensor::matrix(end - begin, dim, std::move(xs)), std::move(ys)};
}

inline Tensor test_union_batch(const TaskStream& stream) {
    std::vector<double> xs;
    std::size_t rows = 0;
    for (const Task& t : stream.tasks)
        for (const Example& e : t.test) {
            xs.insert(xs.end(), e.x.begin(), e.x.end());
            ++rows;
        }
    return Tensor::matrix(rows, stream.dim, std::move(xs));
}

}  // namespace detail

// Sequential continual training over the stream: train_cfg.epochs passes per
// task (epochs=1 gives the single-epoch setting), evaluation of every seen
// task after each task boundary in both class-IL and task-IL modes, per-task
// Lipschitz products on the test union. Features are standardized internally.
inline RunResult run_experiment(const TaskStream& raw_stream, const MethodConfig& mcfg,
                                const LiderConfig& lcfg, const TrainConfig& tcfg,
                                std::uint64_t seed) {
    lcfg.validate();
    if (raw_stream.tasks.empty()) throw ConfigError("run_experiment: empty stream");
    if (tcfg.epochs < 0) throw ConfigError("run_experiment: negative epochs");
    if (tcfg.batch_size < 1) throw ConfigError("run_experiment: batch_size must be >= 1");

    const TaskStream stream = standardize_stream(raw_stream).first;
    const bool is_joint = mcfg.method == Method::joint;
    const TaskStream train_view = is_joint ? detail::merge_tasks(stream) : stream;
    const bool uses_buffer = mcfg.method == Method::er || mcfg.method == Method::er_ace ||
                             mcfg.method == Method::derpp || mcfg.method == Method::gdumb;

    std::vector<std::size_t> dims;
    dims.push_back(stream.dim);
    for (std::size_t h : tcfg.hidden_dims) dims.push_back(h);
    dims.push_back(static_cast<std::size_t>(stream.num_classes));

    MlpBackbone model = init_backbone(dims, Rng::stream(seed, 0).next_u64());
    Rng shuffle_rng = Rng::stream(seed, 1);
    MemoryBuffer buffer(uses_buffer ? mcfg.buffer_capacity : 0, Rng::stream(seed, 2));
    Rng sample_rng = Rng::stream(seed, 3);
    Rng power_rng = Rng::stream(seed, 4);
    Rng gdumb_rng = Rng::stream(seed, 5);
    Rng probe_rng = Rng::stream(seed, 6);

    LipschitzTargets targets;
    const Tensor probe = detail::test_union_batch(stream);

    RunResult result{AccuracyMatrix(stream.num_tasks()), AccuracyMatrix(stream.num_tasks()),
                     RunLog{}, model, buffer};

    std::optional<PoisonConfig> poison;
    long global_step = 0;
    std::vector<int> seen_classes;

    for (std::size_t t = 0; t < train_view.num_tasks(); ++t) {
        const Task& task = train_view.tasks[t];
        seen_classes.insert(seen_classes.end(), task.classes.begin(), task.classes.end());

        StepContext ctx;
        ctx.lr = tcfg.lr;
        ctx.method = mcfg;
        ctx.lider = lcfg;
        ctx.targets = &targets;
        ctx.sample_rng = &sample_rng;
        ctx.power_rng = &power_rng;
        ctx.task_classes = task.classes;
        ctx.seen_classes = seen_classes;

        if (mcfg.poison_p > 0.0)
            poison = PoisonConfig{mcfg.poison_p, task.classes};
        else
            poison.reset();

        const int epochs = mcfg.method == Method::gdumb ? std::min(tcfg.epochs, 1) : tcfg.epochs;
        for (int epoch = 0; epoch < epochs; ++epoch) {
            const std::vector<std::size_t> order = shuffle_rng.permutation(task.train.size());
            for (std::size_t begin = 0; begin < order.size(); begin += tcfg.batch_size) {
                const std::size_t end = std::min(begin + tcfg.batch_size, order.size());
                Batch batch = detail::batch_from_indices(task.train, order, begin, end, stream.dim);

                StepLosses losses;
                switch (mcfg.method) {
                    case Method::er:
                        losses = er_step(model, batch, buffer, ctx);
                        break;
                    case Method::er_ace:
                        losses = er_ace_step(model, batch, buffer, ctx);
                        break;
                    case Method::derpp:
                        losses = derpp_step(model, batch, buffer, ctx);
                        break;
                    case Method::joint:
                    case Method::finetune:
                        losses = plain_ce_step(model, batch, ctx);
                        break;
                    case Method::gdumb:
                        break;  // stream pass only fills the buffer
                }

                if (lcfg.enabled() && losses.lider_skipped) ++result.log.lider_skipped_steps;
                if (tcfg.record_steps)
                    result.log.steps.push_back(StepRecord{t, epoch, global_step, losses});

                // one reservoir insertion per stream example, on its first
                // epoch only, so buffer composition is epoch-count-free
                if (uses_buffer && epoch == 0) {
                    const std::size_t classes = static_cast<std::size_t>(stream.num_classes);
                    for (std::size_t i = begin; i < end; ++i) {
                        const Example& e = task.train[order[i]];
                        BufferEntry entry;
                        entry.x = e.x;
                        entry.y = e.y;
                        entry.task_id = static_cast<int>(t);
                        entry.insertion_step = global_step;
                        if (mcfg.method != Method::gdumb && !losses.stream_logits.empty()) {
                            const std::size_t row = i - begin;
                            entry.stored_logits = std::vector<double>(
                                losses.stream_logits.begin() + row * classes,
                                losses.stream_logits.begin() + (row + 1) * classes);
                        }
                        buffer.insert(std::move(entry), poison);
                    }
                }
                ++global_step;
            }
        }

        if (mcfg.method == Method::gdumb && !buffer.empty()) {
            model = gdumb_fit(buffer, dims, Rng::stream(seed, 100 + t).next_u64(),
                              mcfg.gdumb_fit_epochs, tcfg.batch_size, tcfg.lr, lcfg, gdumb_rng,
                              power_rng);
        }

        if (is_joint) {
            for (std::size_t i = 0; i < stream.num_tasks(); ++i) {
                const double cil = class_il_accuracy(model, stream.tasks[i].test);
                const double til = task_il_accuracy(model, stream.tasks[i].test,
                                                    stream.tasks[i].classes);
                for (std::size_t col = i; col < stream.num_tasks(); ++col) {
                    result.cil.set(i, col, cil);
                    result.til.set(i, col, til);
                }
            }
        } else {
            for (std::size_t i = 0; i <= t; ++i) {
                result.cil.set(i, t, class_il_accuracy(model, stream.tasks[i].test));
                result.til.set(i, t,
                               task_il_accuracy(model, stream.tasks[i].test,
                                                stream.tasks[i].classes));
            }
        }

        result.log.lipschitz_product_per_task.push_back(
            model_lipschitz_product(model, probe, tcfg.lipschitz_probe_iters, probe_rng));
        if (tcfg.on_task_end) tcfg.on_task_end(t, model, buffer);
    }

    result.log.total_steps = global_step;
    result.model = model;
    result.buffer = buffer;
    return result;
}

// Upper bound: one i.i.d. pass over the union of all tasks.
inline MlpBackbone joint_fit(const TaskStream& stream, const TrainConfig& tcfg,
                             std::uint64_t seed) {
    MethodConfig mcfg;
    mcfg.method = Method::joint;
    return run_experiment(stream, mcfg, LiderConfig{}, tcfg, seed).model;
}

// Lower bound: sequential training with no countermeasures.
inline MlpBackbone finetune_run(const TaskStream& stream, const TrainConfig& tcfg,
                                std::uint64_t seed) {
    MethodConfig mcfg;
    mcfg.method = Method::finetune;
    return run_experiment(stream, mcfg, LiderConfig{}, tcfg, seed).model;
}

}  // namespace lider
