#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace dfps {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

/// Thrown when a caller violates a documented precondition.
class ContractError : public std::logic_error {
public:
    explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

/// Thrown when a simulation produces a non-finite state.
class SimulationFault : public std::runtime_error {
public:
    SimulationFault(const std::string& msg, int step)
        : std::runtime_error(msg + " at step " + std::to_string(step)), step_index(step) {}
    int step_index;
};

/// Thrown when a training loop hits a non-recoverable numerical fault.
class TrainingFault : public std::runtime_error {
public:
    TrainingFault(const std::string& msg, int picard_iter)
        : std::runtime_error(msg + " at picard iteration " + std::to_string(picard_iter)),
          picard_iteration(picard_iter) {}
    int picard_iteration;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ContractError(msg);
}

enum class LogLevel { Error = 0, Info = 1, Debug = 2 };

// Log level comes from DFPS_LOG={error|info|debug}; default info.
inline LogLevel log_level() {
    static LogLevel lvl = [] {
        const char* env = std::getenv("DFPS_LOG");
        if (!env) return LogLevel::Info;
        std::string s(env);
        if (s == "error") return LogLevel::Error;
        if (s == "debug") return LogLevel::Debug;
        return LogLevel::Info;
    }();
    return lvl;
}

template <typename... Args>
void log_at(LogLevel lvl, const char* fmt, Args... args) {
    if (static_cast<int>(lvl) > static_cast<int>(log_level())) return;
    std::fprintf(stderr, fmt, args...);
    std::fprintf(stderr, "\n");
}

template <typename... Args>
void log_info(const char* fmt, Args... args) {
    log_at(LogLevel::Info, fmt, args...);
}
template <typename... Args>
void log_debug(const char* fmt, Args... args) {
    log_at(LogLevel::Debug, fmt, args...);
}
template <typename... Args>
void log_error(const char* fmt, Args... args) {
    log_at(LogLevel::Error, fmt, args...);
}

}  // namespace dfps
