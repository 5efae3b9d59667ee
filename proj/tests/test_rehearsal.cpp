#include <doctest.h>

#include <cmath>
#include <map>

#include "lider/benchmark.hpp"
#include "lider/buffer.hpp"
#include "lider/methods.hpp"
#include "oracles.hpp"

using namespace lider;

namespace {

// deterministic index source for exhaustive reservoir enumeration
struct ScriptedRng {
    std::vector<std::size_t> script;
    std::size_t pos = 0;

    std::size_t uniform_index(std::size_t n) {
        REQUIRE(pos < script.size());
        REQUIRE(script[pos] < n);
        return script[pos++];
    }
    double uniform() {  // only the poisoning path draws this
        FAIL("uniform() must not be drawn in this test");
        return 0.0;
    }
};

BufferEntry entry_of(int y, double x0 = 0.0) {
    BufferEntry e;
    e.x = {x0, 0.0};
    e.y = y;
    return e;
}

StepContext basic_ctx(Rng& sample_rng, Rng& power_rng, std::vector<int> task_classes,
                      std::vector<int> seen_classes, LipschitzTargets& targets) {
    StepContext ctx;
    ctx.lr = 0.05;
    ctx.targets = &targets;
    ctx.sample_rng = &sample_rng;
    ctx.power_rng = &power_rng;
    ctx.task_classes = std::move(task_classes);
    ctx.seen_classes = std::move(seen_classes);
    return ctx;
}

Batch blob_batch(Rng& rng, const std::vector<int>& classes, std::size_t per_class,
                 std::size_t dim) {
    std::vector<double> xs;
    std::vector<int> ys;
    for (int c : classes)
        for (std::size_t i = 0; i < per_class; ++i) {
            for (std::size_t d = 0; d < dim; ++d)
                xs.push_back((d % classes.size() == static_cast<std::size_t>(c) ? 2.0 : -2.0) +
                             0.3 * rng.normal());
            ys.push_back(c);
        }
    return Batch{Tensor::matrix(ys.size(), dim, std::move(xs)), std::move(ys)};
}

}  // namespace

TEST_CASE("reservoir keeps everything while under capacity") {
    MemoryBuffer buf(2, Rng(1));
    buf.insert(entry_of(0));
    buf.insert(entry_of(1));
    REQUIRE(buf.size() == 2);
    CHECK(buf.entry(0).y == 0);
    CHECK(buf.entry(1).y == 1);
    CHECK(buf.seen_count() == 2);
}

TEST_CASE("exhaustive enumeration: N=4, capacity=2 gives inclusion exactly 1/2") {
    // items 1 and 2 append without drawing; item 3 draws an index in [0,3),
    // item 4 in [0,4); an item lands iff its index is < capacity
    std::map<int, int> resident_count;
    int outcomes = 0;
    for (std::size_t j3 = 0; j3 < 3; ++j3) {
        for (std::size_t j4 = 0; j4 < 4; ++j4) {
            MemoryBuffer buf(2, Rng(0));
            ScriptedRng script{{j3, j4}};
            buf.insert_with(entry_of(1), std::nullopt, script);
            buf.insert_with(entry_of(2), std::nullopt, script);
            buf.insert_with(entry_of(3), std::nullopt, script);
            buf.insert_with(entry_of(4), std::nullopt, script);
            // items 1..2 never draw; 3 and 4 consumed exactly the script
            CHECK(script.pos == 2);
            ++outcomes;
            for (const BufferEntry& e : buf.entries()) resident_count[e.y] += 1;
        }
    }
    REQUIRE(outcomes == 12);
    for (int item = 1; item <= 4; ++item) CHECK(resident_count[item] * 2 == outcomes);
}

TEST_CASE("monte-carlo inclusion frequency tracks capacity/N") {
    const std::size_t n_items = 500, capacity = 50;
    const int trials = 1500;
    const double p = static_cast<double>(capacity) / static_cast<double>(n_items);
    std::vector<int> counts(n_items, 0);
    Rng rng(99);
    for (int trial = 0; trial < trials; ++trial) {
        MemoryBuffer buf(capacity, Rng(1000 + static_cast<std::uint64_t>(trial)));
        for (std::size_t i = 0; i < n_items; ++i) buf.insert(entry_of(static_cast<int>(i)));
        for (const BufferEntry& e : buf.entries()) counts[static_cast<std::size_t>(e.y)] += 1;
    }
    const double sigma = std::sqrt(p * (1.0 - p) / trials);
    int within3 = 0;
    double mean_freq = 0.0;
    for (std::size_t i = 0; i < n_items; ++i) {
        const double freq = static_cast<double>(counts[i]) / trials;
        mean_freq += freq / static_cast<double>(n_items);
        if (std::abs(freq - p) <= 3.0 * sigma) ++within3;
        CHECK(std::abs(freq - p) <= 5.0 * sigma);  // family-wise sane bound
    }
    CHECK(within3 >= static_cast<int>(0.98 * n_items));
    CHECK(std::abs(mean_freq - p) <= 3.0 * sigma / std::sqrt(static_cast<double>(n_items)));
}

TEST_CASE("poisoning relabels within the pool at insertion") {
    MemoryBuffer buf(4, Rng(3));
    PoisonConfig poison{1.0, {7, 8}};
    BufferEntry e = entry_of(7);
    buf.insert(e, poison);
    REQUIRE(buf.size() == 1);
    CHECK(buf.entry(0).y == 8);

    // p = 0 must keep labels and draw nothing extra
    MemoryBuffer a(16, Rng(4));
    MemoryBuffer b(16, Rng(4));
    PoisonConfig none{0.0, {0, 1}};
    for (int i = 0; i < 40; ++i) {
        a.insert(entry_of(i % 2), none);
        b.insert(entry_of(i % 2), std::nullopt);
    }
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a.entry(i).y == b.entry(i).y);
        CHECK(a.entry(i).x == b.entry(i).x);
    }

    PoisonConfig bad{1.5, {0}};
    CHECK_THROWS_AS(buf.insert(entry_of(0), bad), ConfigError);
}

TEST_CASE("sample_batch basics and uniformity") {
    MemoryBuffer buf(8, Rng(5));
    Rng rng(6);
    CHECK_THROWS_AS(sample_batch(buf, 3, rng), ConfigError);

    buf.insert(entry_of(42));
    CHECK(sample_batch(buf, 0, rng).empty());
    const std::vector<BufferEntry> five = sample_batch(buf, 5, rng);
    REQUIRE(five.size() == 5);
    for (const BufferEntry& e : five) CHECK(e.y == 42);

    MemoryBuffer ten(10, Rng(7));
    for (int i = 0; i < 10; ++i) ten.insert(entry_of(i));
    const int draws = 100000;
    std::vector<int> counts(10, 0);
    Rng srng(8);
    for (const BufferEntry& e : sample_batch(ten, draws, srng))
        counts[static_cast<std::size_t>(e.y)] += 1;
    const double sigma = std::sqrt(0.1 * 0.9 / draws);
    for (int c : counts) CHECK(std::abs(static_cast<double>(c) / draws - 0.1) <= 3.0 * sigma);
}

TEST_CASE("er_step with an empty buffer equals plain SGD on the stream batch") {
    Rng data_rng(9);
    Batch stream = blob_batch(data_rng, {0, 1}, 4, 4);

    MlpBackbone a = init_backbone({4, 8, 2}, 10);
    MlpBackbone b = init_backbone({4, 8, 2}, 10);
    MemoryBuffer empty(10, Rng(11));
    LipschitzTargets ta, tb;
    Rng sa(12), pa(13), sb(12), pb(13);
    StepContext ca = basic_ctx(sa, pa, {0, 1}, {0, 1}, ta);
    StepContext cb = basic_ctx(sb, pb, {0, 1}, {0, 1}, tb);
    StepLosses la = er_step(a, stream, empty, ca);
    StepLosses lb = plain_ce_step(b, stream, cb);
    CHECK(la.total == lb.total);
    for (std::size_t k = 0; k < a.weights.size(); ++k)
        CHECK(a.weights[k].data() == b.weights[k].data());
}

TEST_CASE("er with the regularizer disabled is bit-identical to a lider-free loop") {
    Rng data_rng(14);
    const std::size_t dim = 4;
    Batch stream = blob_batch(data_rng, {0, 1}, 6, dim);

    // reference implementation, written without any regularizer machinery
    MlpBackbone ref = init_backbone({dim, 8, 2}, 15);
    MemoryBuffer ref_buf(6, Rng(16));
    Rng ref_sample(17);
    for (int step = 0; step < 10; ++step) {
        Batch replay{Tensor::matrix(0, dim, {}), {}};
        if (!ref_buf.empty())
            replay = make_batch(sample_batch(ref_buf, stream.size(), ref_sample), dim);
        const Batch joint = replay.empty() ? stream : concat_batches(stream, replay);
        Tape tape;
        ForwardTrace trace = forward_with_trace(tape, ref, joint.x);
        Tensor ce = softmax_cross_entropy(tape, trace.logits(), joint.y);
        Gradients grads = tape.backward(ce);
        sgd_step(ref.params(), grads, 0.05);
        for (std::size_t i = 0; i < stream.size(); ++i) {
            BufferEntry e;
            e.x = std::vector<double>(stream.x.data().begin() + i * dim,
                                      stream.x.data().begin() + (i + 1) * dim);
            e.y = stream.y[i];
            ref_buf.insert(std::move(e));
        }
    }

    // library path with lider disabled (alpha = beta = 0)
    MlpBackbone lib = init_backbone({dim, 8, 2}, 15);
    MemoryBuffer lib_buf(6, Rng(16));
    LipschitzTargets targets;
    Rng sample_rng(17), power_rng(18);
    StepContext ctx = basic_ctx(sample_rng, power_rng, {0, 1}, {0, 1}, targets);
    for (int step = 0; step < 10; ++step) {
        er_step(lib, stream, lib_buf, ctx);
        for (std::size_t i = 0; i < stream.size(); ++i) {
            BufferEntry e;
            e.x = std::vector<double>(stream.x.data().begin() + i * dim,
                                      stream.x.data().begin() + (i + 1) * dim);
            e.y = stream.y[i];
            lib_buf.insert(std::move(e));
        }
    }

    for (std::size_t k = 0; k < ref.weights.size(); ++k)
        CHECK(ref.weights[k].data() == lib.weights[k].data());
}

TEST_CASE("er loss decreases on a separable blob task") {
    Rng data_rng(19);
    MlpBackbone model = init_backbone({4, 8, 2}, 20);
    MemoryBuffer buffer(20, Rng(21));
    LipschitzTargets targets;
    Rng sample_rng(22), power_rng(23);
    StepContext ctx = basic_ctx(sample_rng, power_rng, {0, 1}, {0, 1}, targets);
    double first = 0.0, last = 0.0;
    for (int step = 0; step < 100; ++step) {
        Batch stream = blob_batch(data_rng, {0, 1}, 4, 4);
        StepLosses l = er_step(model, stream, buffer, ctx);
        if (step == 0) first = l.total;
        last = l.total;
        for (std::size_t i = 0; i < stream.size(); ++i) {
            BufferEntry e;
            e.x = std::vector<double>(stream.x.data().begin() + i * 4,
                                      stream.x.data().begin() + (i + 1) * 4);
            e.y = stream.y[i];
            buffer.insert(std::move(e));
        }
    }
    CHECK(last < 0.5 * first);
}

TEST_CASE("er_ace on task 0 with an empty buffer equals masked-CE training") {
    Rng data_rng(24);
    Batch stream = blob_batch(data_rng, {0, 1}, 4, 4);
    // four total classes; task 0 owns {0, 1}
    MlpBackbone a = init_backbone({4, 8, 4}, 25);
    MlpBackbone b = init_backbone({4, 8, 4}, 25);
    MemoryBuffer empty(10, Rng(26));
    LipschitzTargets ta;
    Rng sa(27), pa(28);
    StepContext ctx = basic_ctx(sa, pa, {0, 1}, {0, 1}, ta);
    StepLosses l = er_ace_step(a, stream, empty, ctx);
    CHECK(l.ce_buffer == 0.0);

    Tape tape;
    ForwardTrace trace = forward_with_trace(tape, b, stream.x);
    Tensor ce = softmax_cross_entropy(tape, trace.logits(), stream.y, std::vector<int>{0, 1});
    Gradients grads = tape.backward(ce);
    sgd_step(b.params(), grads, 0.05);
    for (std::size_t k = 0; k < a.weights.size(); ++k)
        CHECK(a.weights[k].data() == b.weights[k].data());

    // a stream label outside the current task is a configuration error
    Batch bad = stream;
    bad.y[0] = 3;
    MlpBackbone c = init_backbone({4, 8, 4}, 25);
    CHECK_THROWS_AS(er_ace_step(c, bad, empty, ctx), ConfigError);
}

TEST_CASE("derpp replay of freshly stored logits has zero consistency loss") {
    Rng data_rng(29);
    MlpBackbone model = init_backbone({4, 8, 3}, 30);
    Batch stream = blob_batch(data_rng, {0, 1}, 3, 4);

    MemoryBuffer buffer(16, Rng(31));
    for (std::size_t i = 0; i < stream.size(); ++i) {
        BufferEntry e;
        e.x = std::vector<double>(stream.x.data().begin() + i * 4,
                                  stream.x.data().begin() + (i + 1) * 4);
        e.y = stream.y[i];
        e.stored_logits = logits_for(model, e.x);
        buffer.insert(std::move(e));
    }
    LipschitzTargets targets;
    Rng sample_rng(32), power_rng(33);
    StepContext ctx = basic_ctx(sample_rng, power_rng, {0, 1}, {0, 1}, targets);
    StepLosses l = derpp_step(model, stream, buffer, ctx);
    CHECK(l.mse_logits == 0.0);
}

TEST_CASE("derpp with alpha=0, beta=1 reduces to stream CE plus buffer CE") {
    Rng data_rng(34);
    MlpBackbone model = init_backbone({4, 8, 3}, 35);
    Batch stream = blob_batch(data_rng, {0, 1}, 3, 4);
    MemoryBuffer buffer(16, Rng(36));
    for (std::size_t i = 0; i < stream.size(); ++i) {
        BufferEntry e;
        e.x = std::vector<double>(stream.x.data().begin() + i * 4,
                                  stream.x.data().begin() + (i + 1) * 4);
        e.y = stream.y[i];
        e.stored_logits = logits_for(model, e.x);
        buffer.insert(std::move(e));
    }
    LipschitzTargets targets;
    Rng sample_rng(37), power_rng(38);
    StepContext ctx = basic_ctx(sample_rng, power_rng, {0, 1}, {0, 1}, targets);
    ctx.method.derpp_alpha = 0.0;
    ctx.method.derpp_beta = 1.0;
    StepLosses l = derpp_step(model, stream, buffer, ctx);
    CHECK(l.total == l.ce_stream + 0.0 * l.mse_logits + 1.0 * l.ce_buffer);
}

TEST_CASE("derpp requires stored logits on buffer entries") {
    Rng data_rng(39);
    MlpBackbone model = init_backbone({4, 8, 3}, 40);
    Batch stream = blob_batch(data_rng, {0, 1}, 2, 4);
    MemoryBuffer buffer(8, Rng(41));
    BufferEntry no_logits;
    no_logits.x = {0.1, -0.2, 0.3, 0.4};
    no_logits.y = 0;
    buffer.insert(std::move(no_logits));
    LipschitzTargets targets;
    Rng sample_rng(42), power_rng(43);
    StepContext ctx = basic_ctx(sample_rng, power_rng, {0, 1}, {0, 1}, targets);
    CHECK_THROWS_AS(derpp_step(model, stream, buffer, ctx), ConfigError);
}

TEST_CASE("derpp default weights") {
    MethodConfig cfg;
    CHECK(cfg.derpp_alpha == 0.3);
    CHECK(cfg.derpp_beta == 0.3);
}

TEST_CASE("gdumb fits the buffer only") {
    // one-class buffer: the refit model predicts that class everywhere
    MemoryBuffer buffer(12, Rng(44));
    Rng data_rng(45);
    for (int i = 0; i < 12; ++i) {
        BufferEntry e;
        e.x = {1.0 + 0.1 * data_rng.normal(), -1.0 + 0.1 * data_rng.normal()};
        e.y = 1;
        buffer.insert(std::move(e));
    }
    Rng fit_rng(46), power_rng(47);
    MlpBackbone model =
        gdumb_fit(buffer, {2, 8, 3}, 48, 60, 4, 0.1, LiderConfig{}, fit_rng, power_rng);
    // bias-free logits vanish wherever every hidden unit is inactive, so the
    // probe stays on data-like inputs
    Rng probe_rng(49);
    for (int i = 0; i < 20; ++i) {
        const std::vector<double> x{1.0 + 0.4 * probe_rng.normal(),
                                    -1.0 + 0.4 * probe_rng.normal()};
        const std::vector<double> logits = logits_for(model, x);
        const std::size_t argmax =
            static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) -
                                     logits.begin());
        CHECK(argmax == 1);
    }

    MemoryBuffer empty(4, Rng(50));
    Rng f2(51), p2(52);
    CHECK_THROWS_AS(gdumb_fit(empty, {2, 8, 3}, 48, 10, 4, 0.1, LiderConfig{}, f2, p2),
                    ConfigError);
}

TEST_CASE("gdumb depends on nothing but the buffer and seeds") {
    auto fill = [](MemoryBuffer& buf) {
        Rng data_rng(53);
        for (int i = 0; i < 10; ++i) {
            BufferEntry e;
            e.x = {data_rng.normal(), data_rng.normal(), data_rng.normal()};
            e.y = i % 2;
            buf.insert(std::move(e));
        }
    };
    MemoryBuffer b1(16, Rng(54));
    MemoryBuffer b2(16, Rng(55));  // different rng state, same contents
    fill(b1);
    fill(b2);
    Rng f1(56), p1(57), f2(56), p2(57);
    MlpBackbone m1 = gdumb_fit(b1, {3, 6, 2}, 58, 20, 4, 0.1, LiderConfig{}, f1, p1);
    MlpBackbone m2 = gdumb_fit(b2, {3, 6, 2}, 58, 20, 4, 0.1, LiderConfig{}, f2, p2);
    for (std::size_t k = 0; k < m1.weights.size(); ++k)
        CHECK(m1.weights[k].data() == m2.weights[k].data());
}

TEST_CASE("buffer never holds entries from unseen tasks") {
    TaskStream stream = make_synthetic_stream(3, 2, 6, 30, 10, 0.3, 59);
    MethodConfig mcfg;
    mcfg.method = Method::er;
    mcfg.buffer_capacity = 20;
    TrainConfig tcfg;
    tcfg.epochs = 1;
    tcfg.batch_size = 8;
    tcfg.hidden_dims = {12};
    tcfg.on_task_end = [](std::size_t task, const MlpBackbone&, const MemoryBuffer& buf) {
        for (const BufferEntry& e : buf.entries())
            CHECK(e.task_id <= static_cast<int>(task));
    };
    run_experiment(stream, mcfg, LiderConfig{}, tcfg, 60);
}

TEST_CASE("in buffer mode the regularizer ignores the stream batch") {
    Rng data_rng(61);
    Batch stream_a = blob_batch(data_rng, {0, 1}, 4, 4);
    Batch stream_b = blob_batch(data_rng, {0, 1}, 4, 4);  // different contents
    MemoryBuffer buffer(16, Rng(62));
    for (int i = 0; i < 8; ++i) {
        BufferEntry e;
        e.x = {0.5 * i, 1.0, -1.0, 0.25};
        e.y = i % 2;
        buffer.insert(std::move(e));
    }

    auto lider_term = [&](const Batch& stream) {
        MlpBackbone model = init_backbone({4, 8, 2}, 63);
        LipschitzTargets targets;
        Rng sample_rng(64), power_rng(65);
        StepContext ctx = basic_ctx(sample_rng, power_rng, {0, 1}, {0, 1}, targets);
        ctx.lider.alpha = 0.1;
        ctx.lider.beta = 0.1;
        StepLosses l = er_step(model, stream, buffer, ctx);
        return std::pair<double, double>(l.lider_c, l.lider_0);
    };
    CHECK(lider_term(stream_a) == lider_term(stream_b));
}
