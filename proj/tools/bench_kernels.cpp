#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#include "bsr/kernels.hpp"
#include "bsr/matrix.hpp"
#include "bsr/rng.hpp"

using bsr::Matrix;

namespace {

Matrix random_matrix(int64_t rows, int64_t cols, bsr::Rng & rng) {
    Matrix m(rows, cols);
    for (double & v : m.data) v = rng.uniform(-1.0, 1.0);
    return m;
}

double seconds() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

struct Case {
    const char * name;
    int64_t m, k, n;
};

using Fn = void (*)(const Matrix &, const Matrix &, Matrix &);

double time_gemm(Fn fn, const Matrix & a, const Matrix & b, Matrix & c, int reps) {
    fn(a, b, c); // warm up
    double t0 = seconds();
    for (int i = 0; i < reps; ++i) fn(a, b, c);
    return (seconds() - t0) / reps;
}

} // namespace

int main(int argc, char ** argv) {
    int reps = argc > 1 ? std::atoi(argv[1]) : 5;
    int max_threads = argc > 2 ? std::atoi(argv[2]) : 4;
    const Case cases[] = {
        {"train fwd", 128, 784, 256},
        {"train bwd", 256, 128, 784},
        {"eval", 512, 784, 256},
        {"square", 384, 384, 384},
    };
    bsr::Rng rng(7);
    std::printf("%-10s %6s %6s %6s | %9s", "case", "m", "k", "n", "serial");
    for (int t = 1; t <= max_threads; ++t) std::printf(" %8s%d", "omp x", t);
    std::printf("  (GFLOP/s, bitwise-checked)\n");
    bool all_equal = true;
    for (const Case & cs : cases) {
        Matrix a = random_matrix(cs.m, cs.k, rng);
        Matrix b = random_matrix(cs.k, cs.n, rng);
        Matrix out_serial(cs.m, cs.n), out_omp(cs.m, cs.n);
        double flops = 2.0 * cs.m * cs.k * cs.n;
        double ts = time_gemm(&bsr::kernels::gemm_nn_serial, a, b, out_serial, reps);
        std::printf("%-10s %6lld %6lld %6lld | %9.3f", cs.name, (long long)cs.m,
                    (long long)cs.k, (long long)cs.n, flops / ts / 1e9);
        for (int t = 1; t <= max_threads; ++t) {
            bsr::kernels::set_threads(t);
            double to = time_gemm(
                [](const Matrix & x, const Matrix & y, Matrix & z) {
                    bsr::kernels::gemm_nn_omp(x, y, z, bsr::kernels::threads());
                },
                a, b, out_omp, reps);
            if (bsr::max_abs_diff(out_serial, out_omp) != 0.0) all_equal = false;
            std::printf(" %9.3f", flops / to / 1e9);
        }
        std::printf("\n");
    }
    std::printf("serial/parallel outputs bitwise equal: %s\n", all_equal ? "yes" : "NO");
    return all_equal ? 0 : 1;
}
