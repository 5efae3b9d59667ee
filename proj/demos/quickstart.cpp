// Minimal library walkthrough: build a synthetic stream, train DER++ with and
// without the Lipschitz regularizer on paired seeds, and print the outcome.
#include <cstdio>

#include "lider/analysis.hpp"
#include "lider/benchmark.hpp"

int main() {
    using namespace lider;
    TaskStream stream = make_synthetic_stream(5, 2, 16, 200, 100, 0.5, 1);

    MethodConfig method;
    method.method = Method::derpp;
    method.buffer_capacity = 50;

    TrainConfig train;  // desk defaults: 5 epochs, lr 0.2, batch 8, one 64-wide hidden layer

    LiderConfig off;  // alpha = beta = 0 disables the regularizer
    LiderConfig on;
    on.alpha = 0.3;
    on.beta = 0.03;
    on.target_lr = 0.5;

    RunResult base = run_experiment(stream, method, off, train, 0);
    RunResult reg = run_experiment(stream, method, on, train, 0);

    std::printf("DER++        faa=%.4f ff=%.4f lipschitz=%.3g\n", faa(base.cil), ff(base.cil),
                base.log.lipschitz_product_per_task.back());
    std::printf("DER++ +LiDER faa=%.4f ff=%.4f lipschitz=%.3g\n", faa(reg.cil), ff(reg.cil),
                reg.log.lipschitz_product_per_task.back());
    return 0;
}
