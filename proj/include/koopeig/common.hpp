#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <functional>
#include <iostream>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace koopeig {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using Index = Eigen::Index;

// ============================================================================
// Errors
// ============================================================================

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid or inconsistent experiment/configuration input.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A regularized Gram matrix that could not be factorized.
class ConditioningError : public Error {
public:
    using Error::Error;
};

/// Non-finite values produced while integrating a trajectory.
class IntegrationOverflowError : public Error {
public:
    IntegrationOverflowError(Index trajectory, Index step)
        : Error("integration overflow in trajectory " + std::to_string(trajectory) + " at step " +
                std::to_string(step)),
          trajectory_(trajectory), step_(step) {}

    Index trajectory() const { return trajectory_; }
    Index step() const { return step_; }

private:
    Index trajectory_;
    Index step_;
};

/// An operation was called on an object missing a required piece of state.
class StateError : public Error {
public:
    using Error::Error;
};

/// Riccati / Lyapunov solver failure.
class SolverError : public Error {
public:
    SolverError(const std::string& what, double residual = -1.0) : Error(what), residual_(residual) {}
    double residual() const { return residual_; }

private:
    double residual_;
};

class InsufficientDataError : public Error {
public:
    using Error::Error;
};

/// Setpoint allocation failed (singular steady-state block system).
class AllocationError : public Error {
public:
    using Error::Error;
};

/// Controller/observer synthesis failure.
class DesignError : public Error {
public:
    using Error::Error;
};

/// Closed-loop or open-loop simulation left the finite range.
class SimulationError : public Error {
public:
    using Error::Error;
};

// ============================================================================
// Warnings
// ============================================================================

namespace log {

using WarningHandler = std::function<void(const std::string&)>;

inline WarningHandler& warning_handler() {
    static WarningHandler handler = [](const std::string& msg) { std::cerr << "warning: " << msg << '\n'; };
    return handler;
}

inline void set_warning_handler(WarningHandler handler) { warning_handler() = std::move(handler); }

inline void warn(const std::string& msg) {
    static std::mutex mutex;
    std::lock_guard<std::mutex> lock(mutex);
    if (warning_handler()) warning_handler()(msg);
}

}  // namespace log

// ============================================================================
// Threading
// ============================================================================

inline std::atomic<int>& thread_setting() {
    static std::atomic<int> n{0};
    return n;
}

/// Worker count used by parallel_for; 0 selects hardware_concurrency().
inline void set_num_threads(int n) { thread_setting() = std::max(0, n); }

inline int num_threads() {
    const int n = thread_setting();
    if (n > 0) return n;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

inline bool& in_parallel_region() {
    thread_local bool flag = false;
    return flag;
}

/// Runs fn(i) for i in [0, n) on a static partition. Each index must write only
/// its own output slot; results are then independent of the worker count.
/// Nested calls from a worker run serially.
template <typename Fn>
void parallel_for(Index n, Fn&& fn, int threads = 0) {
    if (n <= 0) return;
    int workers = static_cast<int>(std::min<Index>(threads > 0 ? threads : num_threads(), n));
    if (in_parallel_region()) workers = 1;
    if (workers <= 1) {
        for (Index i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            in_parallel_region() = true;
            try {
                for (Index i = w; i < n; i += workers) fn(i);
            } catch (...) {
                errors[static_cast<std::size_t>(w)] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

// ============================================================================
// Small helpers
// ============================================================================

inline bool all_finite(const Eigen::Ref<const Mat>& m) { return m.allFinite(); }

inline double mean_square(const Eigen::Ref<const Mat>& m) {
    return m.size() == 0 ? 0.0 : m.squaredNorm() / static_cast<double>(m.size());
}

/// Uniformly spaced samples lo..hi inclusive.
inline Vec linspace(double lo, double hi, Index n) {
    if (n == 1) return Vec::Constant(1, lo);
    return Vec::LinSpaced(n, lo, hi);
}

}  // namespace koopeig
