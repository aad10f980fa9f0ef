#pragma once

#include <functional>
#include <string>

#include "ndftm/param_store.hpp"
#include "ndftm/tape.hpp"

namespace ndftm {

// Fused LSTM cell built from tape primitives; gate order (input, forget,
// cell, output). wx: in x 4H, wh: H x 4H, bias: 1 x 4H.
struct LstmState {
    Value h;
    Value c;
};
LstmState lstm_cell(Tape& tape, Value x, Value h_prev, Value c_prev, Value wx, Value wh,
                    Value bias);

struct GradCheckOptions {
    real epsilon = real(1e-5);
    // Relative-error denominator floor; below it the comparison is absolute.
    real denom_floor = real(1e-3);
    // > 0: check only this many randomly chosen coordinates per slot.
    int coords_per_slot = 0;
    uint64_t sample_seed = 7;
};

struct GradCheckReport {
    real max_rel_err = real(0);
    std::string worst_slot;
    int worst_index = -1;
    real analytic = real(0);
    real numeric = real(0);
    long coords_checked = 0;
};

// Compares reverse-mode gradients of a scalar-valued tape program against
// central finite differences (f(x+eps) - f(x-eps)) / (2 eps), coordinate by
// coordinate. `build` must be deterministic given the store contents.
GradCheckReport gradient_check(const std::function<Value(Tape&)>& build, ParameterStore& store,
                               const GradCheckOptions& opt = {});

}  // namespace ndftm
