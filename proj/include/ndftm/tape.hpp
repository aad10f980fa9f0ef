#pragma once

#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ndftm/tensor.hpp"

namespace ndftm {

class ParameterStore;

// Handle into a Tape's node list.
struct Value {
    int idx = -1;
    bool valid() const { return idx >= 0; }
};

// The primitive set exposed for generic dispatch (tests and tools). The
// named Tape methods below are the ordinary construction API.
enum class PrimitiveOp {
    MatMul,
    Affine,
    Add,
    Mul,
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Softmax,
    Sum,
    Mean,
    Concat,
    Slice,
    Broadcast,
};

const char* primitive_name(PrimitiveOp op);

struct PrimitiveAttrs {
    int i0 = 0;  // Slice: first column; Broadcast: target row count
    int i1 = 0;  // Slice: one-past-last column
};

// Sparse nonzero counts of a document batch, used by the reconstruction
// reduction. Entries are (row, column, count).
struct SparseCounts {
    int rows = 0;
    int cols = 0;
    std::vector<std::tuple<int, int, real>> entries;
};

// Append-only reverse-mode tape over Tensor-valued nodes. Single writer; a
// built tape can be differentiated against a read-locked ParameterStore.
class Tape {
public:
    Value constant(Tensor v);
    // Leaf backed by a named ParameterStore slot. Repeated calls with the
    // same name return the same node so gradients accumulate in one place.
    Value parameter(const ParameterStore& store, const std::string& name);

    Value matmul(Value a, Value b);
    Value matmul_nt(Value a, Value b);  // a * b^T
    Value affine(Value x, Value w, Value bias);
    Value add(Value a, Value b);
    Value sub(Value a, Value b);
    Value mul(Value a, Value b);
    Value scale(Value a, real s);
    Value add_scalar(Value a, real s);
    Value exp(Value a);
    Value log(Value a);
    Value sigmoid(Value a);
    Value tanh(Value a);
    Value softplus(Value a);
    Value clamp(Value a, real lo, real hi);
    Value softmax_rows(Value a);
    Value sum_all(Value a);
    Value mean_all(Value a);
    Value rowsum(Value a);  // m x n -> m x 1
    Value concat_cols(Value a, Value b);
    Value slice_cols(Value a, int c0, int c1);
    Value broadcast_rows(Value a, int rows);  // 1 x n -> rows x n
    // sum over sparse entries of count * log(max(mix, floor)); increments
    // *guard_count when the floor fires.
    Value weighted_log_sum(Value mix, std::shared_ptr<const SparseCounts> counts, real floor_p,
                           long* guard_count);

    Value primitive(PrimitiveOp op, std::span<const Value> inputs, PrimitiveAttrs attrs = {});

    const Tensor& val(Value v) const { return nodes_[v.idx].val; }
    size_t num_nodes() const { return nodes_.size(); }

    // Reverse sweep from a scalar output. Returns gradients for every slot of
    // `store` (zeros for slots the output does not reach).
    std::map<std::string, Tensor> backward(Value scalar_out, const ParameterStore& store);

    // Gradient of `scalar_out` with respect to an individual node (for
    // checking non-parameter inputs). Runs its own reverse sweep.
    Tensor grad_wrt(Value scalar_out, Value node);

    // Re-runs every forward computation in order and verifies the cached
    // values reproduce bit-exactly.
    bool replay_check();

private:
    struct Node {
        Tensor val;
        int in0 = -1, in1 = -1, in2 = -1;
        std::function<void(Tape&, const Tensor&, int)> back;  // (tape, upstream grad, self)
        std::function<Tensor(Tape&, int)> fwd;                // recompute for replay
        std::string pname;                                    // parameter leaves only
    };

    Value push(Tensor v, int i0, int i1, int i2, std::function<void(Tape&, const Tensor&, int)> back,
               std::function<Tensor(Tape&, int)> fwd);
    Tensor& grad_buf(int idx, int rows, int cols);
    void sweep(Value scalar_out);

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    std::map<std::string, int> param_nodes_;

    friend struct TapeBackdoor;
};

}  // namespace ndftm
