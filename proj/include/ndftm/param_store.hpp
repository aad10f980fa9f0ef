#pragma once

#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "ndftm/tensor.hpp"

namespace ndftm {

struct AdamConfig {
    real learning_rate = real(0.002);
    real beta1 = real(0.9);
    real beta2 = real(0.999);
    real epsilon = real(1e-8);
    real clip_norm = real(2.0);  // <= 0 disables global-norm clipping
};

struct StepResult {
    bool applied = false;
    real grad_norm = real(0);   // pre-clip global norm
    real clip_scale = real(1);  // factor applied to all gradients
};

// Named trainable tensors plus per-slot Adam moment accumulators. Names are
// unique and shapes immutable after creation. Reads may proceed concurrently
// with tape construction; optimizer_step takes the exclusive lock.
class ParameterStore {
public:
    Tensor& create(const std::string& name, int rows, int cols);
    Tensor& create_randn(const std::string& name, int rows, int cols, Rng& rng, real scale);

    bool has(const std::string& name) const;
    const Tensor& at(const std::string& name) const;
    Tensor& mutate(const std::string& name);  // test/tooling access, shape preserved

    std::vector<std::string> names() const;
    size_t num_slots() const { return slots_.size(); }
    size_t num_scalars() const;
    int64_t step_count() const { return step_; }

    // Adaptive-moment update with optional global-norm clipping. Gradient
    // names must be a subset of slot names. Any non-finite gradient skips the
    // whole step; the incident count is exposed for logging.
    StepResult optimizer_step(const std::map<std::string, Tensor>& grads, const AdamConfig& cfg);
    long skipped_steps() const { return skipped_; }

    // Checkpoint round-trips are bit-exact, including moments and the step
    // counter. Little-endian on-disk layout; see save_checkpoint in
    // param_store.cpp for the format.
    void save_checkpoint(const std::string& path) const;
    static ParameterStore load_checkpoint(const std::string& path);
    uint64_t content_hash() const;

    ParameterStore clone() const;

    std::shared_mutex& mutex() const { return *mutex_; }

private:
    struct Slot {
        Tensor value;
        Tensor m;
        Tensor v;
    };
    std::map<std::string, Slot> slots_;
    int64_t step_ = 0;
    long skipped_ = 0;
    mutable std::unique_ptr<std::shared_mutex> mutex_ = std::make_unique<std::shared_mutex>();
};

}  // namespace ndftm
