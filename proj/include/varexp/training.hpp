#pragma once

// Pieces shared by the tokenizer and flow training loops.

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <limits>

#include "varexp/adam.hpp"
#include "varexp/rng.hpp"

namespace varexp {

struct TrainLoopConfig {
    std::int64_t iterations = 20000;
    int batch_size = 512;
    std::int64_t log_every = 100;
    /// 0 disables periodic checkpoints.
    std::int64_t ckpt_every = 0;
    LrSchedule schedule;
    AdamHyper adam;
    /// Stop (as if interrupted) once this many iterations are done.
    std::int64_t stop_after = std::numeric_limits<std::int64_t>::max();
};

/// rows x cols matrix of standard normals, filled column by column.
inline Eigen::MatrixXd draw_normals(RngStream& rng, Eigen::Index rows, Eigen::Index cols) {
    Eigen::MatrixXd out(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i) out(i, j) = rng.normal();
    return out;
}

inline bool should_log(std::int64_t it, std::int64_t total, std::int64_t every) {
    return every > 0 && (it % every == 0 || it + 1 == total);
}

}  // namespace varexp
