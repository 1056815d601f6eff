#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace bsr {

struct InvalidInput : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Malformed file contents (bad magic, truncated blob, shape mismatch, ...).
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite loss during an optimization run.
struct TrainingError : std::runtime_error {
    int epoch;
    int batch;
    TrainingError(const std::string & msg, int epoch_, int batch_)
        : std::runtime_error(msg), epoch(epoch_), batch(batch_) {}
};

// Rank search could not place a candidate inside the requested ratio band.
// Carries the best candidate seen so the caller can still inspect it.
struct SearchFailure : std::runtime_error {
    std::vector<int64_t> best_ranks;
    double best_ratio;
    double best_accuracy;
    SearchFailure(const std::string & msg, std::vector<int64_t> ranks, double ratio, double acc)
        : std::runtime_error(msg), best_ranks(std::move(ranks)), best_ratio(ratio), best_accuracy(acc) {}
};

} // namespace bsr
