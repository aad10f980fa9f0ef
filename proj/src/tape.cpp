#include "ndftm/tape.hpp"

#include <algorithm>
#include <sstream>

#include "ndftm/kernels.hpp"
#include "ndftm/param_store.hpp"

namespace ndftm {

namespace {

[[noreturn]] void shape_fail(const char* op, const Tensor& a, const Tensor& b) {
    std::ostringstream os;
    os << op << ": incompatible shapes " << a.shape_str() << " and " << b.shape_str();
    throw ShapeError(os.str());
}

[[noreturn]] void shape_fail(const char* op, const Tensor& a, const std::string& detail) {
    std::ostringstream os;
    os << op << ": bad shape " << a.shape_str() << " (" << detail << ")";
    throw ShapeError(os.str());
}

}  // namespace

const char* primitive_name(PrimitiveOp op) {
    switch (op) {
        case PrimitiveOp::MatMul: return "matmul";
        case PrimitiveOp::Affine: return "affine";
        case PrimitiveOp::Add: return "add";
        case PrimitiveOp::Mul: return "mul";
        case PrimitiveOp::Exp: return "exp";
        case PrimitiveOp::Log: return "log";
        case PrimitiveOp::Sigmoid: return "sigmoid";
        case PrimitiveOp::Tanh: return "tanh";
        case PrimitiveOp::Softmax: return "softmax";
        case PrimitiveOp::Sum: return "sum";
        case PrimitiveOp::Mean: return "mean";
        case PrimitiveOp::Concat: return "concat";
        case PrimitiveOp::Slice: return "slice";
        case PrimitiveOp::Broadcast: return "broadcast";
    }
    return "?";
}

Value Tape::push(Tensor v, int i0, int i1, int i2,
                 std::function<void(Tape&, const Tensor&, int)> back,
                 std::function<Tensor(Tape&, int)> fwd) {
    Node n;
    n.val = std::move(v);
    n.in0 = i0;
    n.in1 = i1;
    n.in2 = i2;
    n.back = std::move(back);
    n.fwd = std::move(fwd);
    nodes_.push_back(std::move(n));
    return Value{static_cast<int>(nodes_.size()) - 1};
}

Tensor& Tape::grad_buf(int idx, int rows, int cols) {
    if (grads_[idx].size() == 0) grads_[idx] = Tensor::zeros(rows, cols);
    return grads_[idx];
}

Value Tape::constant(Tensor v) {
    Tensor copy = v;
    return push(std::move(v), -1, -1, -1, nullptr,
                [copy](Tape&, int) { return copy; });
}

Value Tape::parameter(const ParameterStore& store, const std::string& name) {
    if (auto it = param_nodes_.find(name); it != param_nodes_.end()) {
        return Value{it->second};
    }
    Tensor snapshot = store.at(name);
    Tensor copy = snapshot;
    Value v = push(std::move(snapshot), -1, -1, -1, nullptr,
                   [copy](Tape&, int) { return copy; });
    nodes_[v.idx].pname = name;
    param_nodes_[name] = v.idx;
    return v;
}

Value Tape::matmul(Value a, Value b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.c != tb.r) shape_fail("matmul", ta, tb);
    Tensor out(ta.r, tb.c);
    kernels::matmul(ta, tb, out);
    const int ia = a.idx, ib = b.idx;
    return push(std::move(out), ia, ib, -1,
                [ia, ib](Tape& t, const Tensor& g, int) {
                    const Tensor& A = t.nodes_[ia].val;
                    const Tensor& B = t.nodes_[ib].val;
                    Tensor& ga = t.grad_buf(ia, A.r, A.c);
                    Tensor da(A.r, A.c);
                    kernels::matmul_nt(g, B, da);
                    for (size_t i = 0; i < ga.d.size(); ++i) ga.d[i] += da.d[i];
                    Tensor& gb = t.grad_buf(ib, B.r, B.c);
                    kernels::matmul_tn_add(A, g, gb);
                },
                [ia, ib](Tape& t, int) {
                    Tensor out(t.nodes_[ia].val.r, t.nodes_[ib].val.c);
                    kernels::matmul(t.nodes_[ia].val, t.nodes_[ib].val, out);
                    return out;
                });
}

Value Tape::matmul_nt(Value a, Value b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.c != tb.c) shape_fail("matmul_nt", ta, tb);
    Tensor out(ta.r, tb.r);
    kernels::matmul_nt(ta, tb, out);
    const int ia = a.idx, ib = b.idx;
    return push(std::move(out), ia, ib, -1,
                [ia, ib](Tape& t, const Tensor& g, int) {
                    const Tensor& A = t.nodes_[ia].val;  // m x k
                    const Tensor& B = t.nodes_[ib].val;  // n x k
                    Tensor& ga = t.grad_buf(ia, A.r, A.c);
                    Tensor da(A.r, A.c);  // g (m x n) * B (n x k)
                    kernels::matmul(g, B, da);
                    for (size_t i = 0; i < ga.d.size(); ++i) ga.d[i] += da.d[i];
                    Tensor& gb = t.grad_buf(ib, B.r, B.c);  // g^T (n x m) * A (m x k)
                    kernels::matmul_tn_add(g, A, gb);
                },
                [ia, ib](Tape& t, int) {
                    Tensor out(t.nodes_[ia].val.r, t.nodes_[ib].val.r);
                    kernels::matmul_nt(t.nodes_[ia].val, t.nodes_[ib].val, out);
                    return out;
                });
}

Value Tape::affine(Value x, Value w, Value bias) {
    const Tensor& tx = val(x);
    const Tensor& tw = val(w);
    const Tensor& tb = val(bias);
    if (tx.c != tw.r) shape_fail("affine", tx, tw);
    if (tb.r != 1 || tb.c != tw.c) shape_fail("affine", tb, "bias must be 1 x out_dim");
    Tensor out(tx.r, tw.c);
    kernels::affine(tx, tw, tb, out);
    const int ix = x.idx, iw = w.idx, ib = bias.idx;
    return push(std::move(out), ix, iw, ib,
                [ix, iw, ib](Tape& t, const Tensor& g, int) {
                    const Tensor& X = t.nodes_[ix].val;
                    const Tensor& W = t.nodes_[iw].val;
                    Tensor& gx = t.grad_buf(ix, X.r, X.c);
                    Tensor dx(X.r, X.c);
                    kernels::matmul_nt(g, W, dx);
                    for (size_t i = 0; i < gx.d.size(); ++i) gx.d[i] += dx.d[i];
                    Tensor& gw = t.grad_buf(iw, W.r, W.c);
                    kernels::matmul_tn_add(X, g, gw);
                    Tensor& gb = t.grad_buf(ib, 1, W.c);
                    for (int i = 0; i < g.r; ++i) {
                        const real* gi = g.row_ptr(i);
                        for (int j = 0; j < g.c; ++j) gb.d[j] += gi[j];
                    }
                },
                [ix, iw, ib](Tape& t, int) {
                    Tensor out(t.nodes_[ix].val.r, t.nodes_[iw].val.c);
                    kernels::affine(t.nodes_[ix].val, t.nodes_[iw].val, t.nodes_[ib].val, out);
                    return out;
                });
}

Value Tape::add(Value a, Value b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (!ta.same_shape(tb)) shape_fail("add", ta, tb);
    Tensor out = ta;
    for (size_t i = 0; i < out.d.size(); ++i) out.d[i] += tb.d[i];
    const int ia = a.idx, ib = b.idx;
    return push(std::move(out), ia, ib, -1,
                [ia, ib](Tape& t, const Tensor& g, int) {
                    Tensor& ga = t.grad_buf(ia, g.r, g.c);
                    Tensor& gb = t.grad_buf(ib, g.r, g.c);
                    for (size_t i = 0; i < g.d.size(); ++i) {
                        ga.d[i] += g.d[i];
                        gb.d[i] += g.d[i];
                    }
                },
                [ia, ib](Tape& t, int) {
                    Tensor out = t.nodes_[ia].val;
                    for (size_t i = 0; i < out.d.size(); ++i) out.d[i] += t.nodes_[ib].val.d[i];
                    return out;
                });
}

Value Tape::sub(Value a, Value b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (!ta.same_shape(tb)) shape_fail("sub", ta, tb);
    Tensor out = ta;
    for (size_t i = 0; i < out.d.size(); ++i) out.d[i] -= tb.d[i];
    const int ia = a.idx, ib = b.idx;
    return push(std::move(out), ia, ib, -1,
                [ia, ib](Tape& t, const Tensor& g, int) {
                    Tensor& ga = t.grad_buf(ia, g.r, g.c);
                    Tensor& gb = t.grad_buf(ib, g.r, g.c);
                    for (size_t i = 0; i < g.d.size(); ++i) {
                        ga.d[i] += g.d[i];
                        gb.d[i] -= g.d[i];
                    }
                },
                [ia, ib](Tape& t, int) {
                    Tensor out = t.nodes_[ia].val;
                    for (size_t i = 0; i < out.d.size(); ++i) out.d[i] -= t.nodes_[ib].val.d[i];
                    return out;
                });
}

Value Tape::mul(Value a, Value b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (!ta.same_shape(tb)) shape_fail("mul", ta, tb);
    Tensor out = ta;
    for (size_t i = 0; i < out.d.size(); ++i) out.d[i] *= tb.d[i];
    const int ia = a.idx, ib = b.idx;
    return push(std::move(out), ia, ib, -1,
                [ia, ib](Tape& t, const Tensor& g, int) {
                    const Tensor& A = t.nodes_[ia].val;
                    const Tensor& B = t.nodes_[ib].val;
                    Tensor& ga = t.grad_buf(ia, g.r, g.c);
                    Tensor& gb = t.grad_buf(ib, g.r, g.c);
                    for (size_t i = 0; i < g.d.size(); ++i) {
                        ga.d[i] += g.d[i] * B.d[i];
                        gb.d[i] += g.d[i] * A.d[i];
                    }
                },
                [ia, ib](Tape& t, int) {
                    Tensor out = t.nodes_[ia].val;
                    for (size_t i = 0; i < out.d.size(); ++i) out.d[i] *= t.nodes_[ib].val.d[i];
                    return out;
                });
}

Value Tape::scale(Value a, real s) {
    Tensor out = val(a);
    for (auto& v : out.d) v *= s;
    const int ia = a.idx;
    return push(std::move(out), ia, -1, -1,
                [ia, s](Tape& t, const Tensor& g, int) {
                    Tensor& ga = t.grad_buf(ia, g.r, g.c);
                    for (size_t i = 0; i < g.d.size(); ++i) ga.d[i] += s * g.d[i];
                },
                [ia, s](Tape& t, int) {
                    Tensor out = t.nodes_[ia].val;
                    for (auto& v : out.d) v *= s;
                    return out;
                });
}

Value Tape::add_scalar(Value a, real s) {
    Tensor out = val(a);
    for (auto& v : out.d) v += s;
    const int ia = a.idx;
    return push(std::move(out), ia, -1, -1,
                [ia](Tape& t, const Tensor& g, int) {
                    Tensor& ga = t.grad_buf(ia, g.r, g.c);
                    for (size_t i = 0; i < g.d.size(); ++i) ga.d[i] += g.d[i];
                },
                [ia, s](Tape& t, int) {
                    Tensor out = t.nodes_[ia].val;
                    for (auto& v : out.d) v += s;
                    return out;
                });
}

Value Tape::exp(Value a) {
    Tensor out = val(a);
    for (auto& v : out.d) v = std::exp(v);
    const int ia = a.idx;
    return push(std::move(out), ia, -1, -1,
                [ia](Tape& t, const Tensor& g, int self) {
                    const Tensor& Y = t.nodes_[self].val;
                    Tensor& ga = t.grad_buf(ia, g.r, g.c);
                    for (size_t i = 0; i < g.d.size(); ++i) ga.d[i] += g.d[i] * Y.d[i];
                },
                [ia](Tape& t, int) {
                    Tensor out = t.nodes_[ia].val;
                    for (auto& v : out.d) v = std::exp(v);
                    return out;
                });
}

Value Tape::log(Value a) {
    Tensor out = val(a);
    for (auto& v : out.d) v = std::log(v);
    const int ia = a.idx;
    return push(std::move(out), ia, -1, -1,
                [ia](Tape& t, const Tensor& g, int) {
                    const Tensor& X = t.nodes_[ia].val;
                    Tensor& ga = t.grad_buf(ia, g.r, g.c);
                    for (size_t i = 0; i < g.d.size(); ++i) ga.d[i] += g.d[i] / X.d[i];
                },
                [ia](Tape& t, int) {
                    Tensor out = t.nodes_[ia].val;
                    for (auto& v : out.d) v = std::log(v);
                    return out;
                });
}

Value Tape::sigmoid(Value a) {
    Tensor out = val(a);
    for (auto& v : out.d) v = kernels::sigmoid(v);
    const int ia = a.idx;
    return push(std::move(out), ia, -1, -1,
                [ia](Tape& t, const Tensor& g, int self) {
                    const Tensor& Y = t.nodes_[self].val;
                    Tensor& ga = t.grad_buf(ia, g.r, g.c);
                    for (size_t i = 0; i < g.d.size(); ++i) {
                        ga.d[i] += g.d[i] * Y.d[i] * (real(1) - Y.d[i]);
                    }
                },
                [ia](Tape& t, int) {
                    Tensor out = t.nodes_[ia].val;
                    for (auto& v : out.d) v = kernels::sigmoid(v);
                    return out;
                });
}

Value Tape::tanh(Value a) {
    Tensor out = val(a);
    for (auto& v : out.d) v = std::tanh(v);
    const int ia = a.idx;
    return push(std::move(out), ia, -1, -1,
                [ia](Tape& t, const Tensor& g, int self) {
                    const Tensor& Y = t.nodes_[self].val;
                    Tensor& ga = t.grad_buf(ia, g.r, g.c);
                    for (size_t i = 0; i < g.d.size(); ++i) {
                        ga.d[i] += g.d[i] * (real(1) - Y.d[i] * Y.d[i]);
                    }
                },
                [ia](Tape& t, int) {
                    Tensor out = t.nodes_[ia].val;
                    for (auto& v : out.d) v = std::tanh(v);
                    return out;
                });
}

Value Tape::softplus(Value a) {
    Tensor out = val(a);
    for (auto& v : out.d) v = kernels::softplus(v);
    const int ia = a.idx;
    return push(std::move(out), ia, -1, -1,
                [ia](Tape& t, const Tensor& g, int) {
                    const Tensor& X = t.nodes_[ia].val;
                    Tensor& ga = t.grad_buf(ia, g.r, g.c);
                    for (size_t i = 0; i < g.d.size(); ++i) {
                        ga.d[i] += g.d[i] * kernels::sigmoid(X.d[i]);
                    }
                },
                [ia](Tape& t, int) {
                    Tensor out = t.nodes_[ia].val;
                    for (auto& v : out.d) v = kernels::softplus(v);
                    return out;
                });
}

Value Tape::clamp(Value a, real lo, real hi) {
    Tensor out = val(a);
    for (auto& v : out.d) v = std::min(hi, std::max(lo, v));
    const int ia = a.idx;
    return push(std::move(out), ia, -1, -1,
                [ia, lo, hi](Tape& t, const Tensor& g, int) {
                    const Tensor& X = t.nodes_[ia].val;
                    Tensor& ga = t.grad_buf(ia, g.r, g.c);
                    for (size_t i = 0; i < g.d.size(); ++i) {
                        if (X.d[i] > lo && X.d[i] < hi) ga.d[i] += g.d[i];
                    }
                },
                [ia, lo, hi](Tape& t, int) {
                    Tensor out = t.nodes_[ia].val;
                    for (auto& v : out.d) v = std::min(hi, std::max(lo, v));
                    return out;
                });
}

Value Tape::softmax_rows(Value a) {
    const Tensor& ta = val(a);
    Tensor out(ta.r, ta.c);
    kernels::softmax_rows(ta, out);
    const int ia = a.idx;
    return push(std::move(out), ia, -1, -1,
                [ia](Tape& t, const Tensor& g, int self) {
                    const Tensor& Y = t.nodes_[self].val;
                    Tensor& ga = t.grad_buf(ia, g.r, g.c);
                    for (int i = 0; i < g.r; ++i) {
                        const real* yi = Y.row_ptr(i);
                        const real* gi = g.row_ptr(i);
                        real dot = real(0);
                        for (int j = 0; j < g.c; ++j) dot += gi[j] * yi[j];
                        real* gai = ga.row_ptr(i);
                        for (int j = 0; j < g.c; ++j) gai[j] += yi[j] * (gi[j] - dot);
                    }
                },
                [ia](Tape& t, int) {
                    const Tensor& X = t.nodes_[ia].val;
                    Tensor out(X.r, X.c);
                    kernels::softmax_rows(X, out);
                    return out;
                });
}

Value Tape::sum_all(Value a) {
    const Tensor& ta = val(a);
    real s = real(0);
    for (real v : ta.d) s += v;
    const int ia = a.idx;
    return push(Tensor::scalar(s), ia, -1, -1,
                [ia](Tape& t, const Tensor& g, int) {
                    const Tensor& X = t.nodes_[ia].val;
                    Tensor& ga = t.grad_buf(ia, X.r, X.c);
                    for (auto& v : ga.d) v += g.d[0];
                },
                [ia](Tape& t, int) {
                    real s = real(0);
                    for (real v : t.nodes_[ia].val.d) s += v;
                    return Tensor::scalar(s);
                });
}

Value Tape::mean_all(Value a) {
    const Tensor& ta = val(a);
    real s = real(0);
    for (real v : ta.d) s += v;
    const real inv = real(1) / static_cast<real>(ta.size());
    const int ia = a.idx;
    return push(Tensor::scalar(s * inv), ia, -1, -1,
                [ia, inv](Tape& t, const Tensor& g, int) {
                    const Tensor& X = t.nodes_[ia].val;
                    Tensor& ga = t.grad_buf(ia, X.r, X.c);
                    for (auto& v : ga.d) v += g.d[0] * inv;
                },
                [ia, inv](Tape& t, int) {
                    real s = real(0);
                    for (real v : t.nodes_[ia].val.d) s += v;
                    return Tensor::scalar(s * inv);
                });
}

Value Tape::rowsum(Value a) {
    const Tensor& ta = val(a);
    Tensor out(ta.r, 1);
    for (int i = 0; i < ta.r; ++i) {
        const real* xi = ta.row_ptr(i);
        real s = real(0);
        for (int j = 0; j < ta.c; ++j) s += xi[j];
        out.d[i] = s;
    }
    const int ia = a.idx;
    return push(std::move(out), ia, -1, -1,
                [ia](Tape& t, const Tensor& g, int) {
                    const Tensor& X = t.nodes_[ia].val;
                    Tensor& ga = t.grad_buf(ia, X.r, X.c);
                    for (int i = 0; i < X.r; ++i) {
                        real* gai = ga.row_ptr(i);
                        for (int j = 0; j < X.c; ++j) gai[j] += g.d[i];
                    }
                },
                [ia](Tape& t, int) {
                    const Tensor& X = t.nodes_[ia].val;
                    Tensor out(X.r, 1);
                    for (int i = 0; i < X.r; ++i) {
                        real s = real(0);
                        for (int j = 0; j < X.c; ++j) s += X.at(i, j);
                        out.d[i] = s;
                    }
                    return out;
                });
}

Value Tape::concat_cols(Value a, Value b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.r != tb.r) shape_fail("concat", ta, tb);
    Tensor out(ta.r, ta.c + tb.c);
    for (int i = 0; i < ta.r; ++i) {
        std::copy(ta.row_ptr(i), ta.row_ptr(i) + ta.c, out.row_ptr(i));
        std::copy(tb.row_ptr(i), tb.row_ptr(i) + tb.c, out.row_ptr(i) + ta.c);
    }
    const int ia = a.idx, ib = b.idx, ca = ta.c, cb = tb.c;
    return push(std::move(out), ia, ib, -1,
                [ia, ib, ca, cb](Tape& t, const Tensor& g, int) {
                    Tensor& ga = t.grad_buf(ia, g.r, ca);
                    Tensor& gb = t.grad_buf(ib, g.r, cb);
                    for (int i = 0; i < g.r; ++i) {
                        const real* gi = g.row_ptr(i);
                        real* gai = ga.row_ptr(i);
                        real* gbi = gb.row_ptr(i);
                        for (int j = 0; j < ca; ++j) gai[j] += gi[j];
                        for (int j = 0; j < cb; ++j) gbi[j] += gi[ca + j];
                    }
                },
                [ia, ib](Tape& t, int) {
                    const Tensor& A = t.nodes_[ia].val;
                    const Tensor& B = t.nodes_[ib].val;
                    Tensor out(A.r, A.c + B.c);
                    for (int i = 0; i < A.r; ++i) {
                        std::copy(A.row_ptr(i), A.row_ptr(i) + A.c, out.row_ptr(i));
                        std::copy(B.row_ptr(i), B.row_ptr(i) + B.c, out.row_ptr(i) + A.c);
                    }
                    return out;
                });
}

Value Tape::slice_cols(Value a, int c0, int c1) {
    const Tensor& ta = val(a);
    if (c0 < 0 || c1 > ta.c || c0 >= c1) shape_fail("slice", ta, "column range out of bounds");
    Tensor out(ta.r, c1 - c0);
    for (int i = 0; i < ta.r; ++i) {
        std::copy(ta.row_ptr(i) + c0, ta.row_ptr(i) + c1, out.row_ptr(i));
    }
    const int ia = a.idx;
    return push(std::move(out), ia, -1, -1,
                [ia, c0](Tape& t, const Tensor& g, int) {
                    const Tensor& X = t.nodes_[ia].val;
                    Tensor& ga = t.grad_buf(ia, X.r, X.c);
                    for (int i = 0; i < g.r; ++i) {
                        const real* gi = g.row_ptr(i);
                        real* gai = ga.row_ptr(i) + c0;
                        for (int j = 0; j < g.c; ++j) gai[j] += gi[j];
                    }
                },
                [ia, c0, c1](Tape& t, int) {
                    const Tensor& X = t.nodes_[ia].val;
                    Tensor out(X.r, c1 - c0);
                    for (int i = 0; i < X.r; ++i) {
                        std::copy(X.row_ptr(i) + c0, X.row_ptr(i) + c1, out.row_ptr(i));
                    }
                    return out;
                });
}

Value Tape::broadcast_rows(Value a, int rows) {
    const Tensor& ta = val(a);
    if (ta.r != 1) shape_fail("broadcast", ta, "expected a single row");
    Tensor out(rows, ta.c);
    for (int i = 0; i < rows; ++i) {
        std::copy(ta.d.begin(), ta.d.end(), out.row_ptr(i));
    }
    const int ia = a.idx;
    return push(std::move(out), ia, -1, -1,
                [ia](Tape& t, const Tensor& g, int) {
                    Tensor& ga = t.grad_buf(ia, 1, g.c);
                    for (int i = 0; i < g.r; ++i) {
                        const real* gi = g.row_ptr(i);
                        for (int j = 0; j < g.c; ++j) ga.d[j] += gi[j];
                    }
                },
                [ia, rows](Tape& t, int) {
                    const Tensor& X = t.nodes_[ia].val;
                    Tensor out(rows, X.c);
                    for (int i = 0; i < rows; ++i) {
                        std::copy(X.d.begin(), X.d.end(), out.row_ptr(i));
                    }
                    return out;
                });
}

Value Tape::weighted_log_sum(Value mix, std::shared_ptr<const SparseCounts> counts, real floor_p,
                             long* guard_count) {
    const Tensor& tm = val(mix);
    if (tm.r != counts->rows || tm.c != counts->cols) {
        shape_fail("weighted_log_sum", tm, "counts grid does not match mixture matrix");
    }
    auto eval = [counts, floor_p](const Tensor& m, long* guard) {
        real s = real(0);
        for (const auto& [i, w, cnt] : counts->entries) {
            real p = m.at(i, w);
            if (p < floor_p) {
                p = floor_p;
                if (guard) ++*guard;
            }
            s += cnt * std::log(p);
        }
        return s;
    };
    const real s = eval(tm, guard_count);
    const int im = mix.idx;
    return push(Tensor::scalar(s), im, -1, -1,
                [im, counts, floor_p](Tape& t, const Tensor& g, int) {
                    const Tensor& M = t.nodes_[im].val;
                    Tensor& gm = t.grad_buf(im, M.r, M.c);
                    for (const auto& [i, w, cnt] : counts->entries) {
                        const real p = M.at(i, w);
                        if (p >= floor_p) gm.at(i, w) += g.d[0] * cnt / p;
                    }
                },
                [im, eval](Tape& t, int) {
                    return Tensor::scalar(eval(t.nodes_[im].val, nullptr));
                });
}

Value Tape::primitive(PrimitiveOp op, std::span<const Value> in, PrimitiveAttrs attrs) {
    auto need = [&](size_t n) {
        if (in.size() != n) {
            std::ostringstream os;
            os << primitive_name(op) << ": expected " << n << " inputs, got " << in.size();
            throw ShapeError(os.str());
        }
    };
    switch (op) {
        case PrimitiveOp::MatMul: need(2); return matmul(in[0], in[1]);
        case PrimitiveOp::Affine: need(3); return affine(in[0], in[1], in[2]);
        case PrimitiveOp::Add: need(2); return add(in[0], in[1]);
        case PrimitiveOp::Mul: need(2); return mul(in[0], in[1]);
        case PrimitiveOp::Exp: need(1); return exp(in[0]);
        case PrimitiveOp::Log: need(1); return log(in[0]);
        case PrimitiveOp::Sigmoid: need(1); return sigmoid(in[0]);
        case PrimitiveOp::Tanh: need(1); return tanh(in[0]);
        case PrimitiveOp::Softmax: need(1); return softmax_rows(in[0]);
        case PrimitiveOp::Sum: need(1); return sum_all(in[0]);
        case PrimitiveOp::Mean: need(1); return mean_all(in[0]);
        case PrimitiveOp::Concat: need(2); return concat_cols(in[0], in[1]);
        case PrimitiveOp::Slice: need(1); return slice_cols(in[0], attrs.i0, attrs.i1);
        case PrimitiveOp::Broadcast: need(1); return broadcast_rows(in[0], attrs.i0);
    }
    throw ShapeError("unknown primitive");
}

void Tape::sweep(Value scalar_out) {
    if (!scalar_out.valid() || val(scalar_out).size() != 1) {
        throw ShapeError("backward: output must be a scalar of shape [1x1]");
    }
    grads_.assign(nodes_.size(), Tensor{});
    grads_[scalar_out.idx] = Tensor::scalar(real(1));
    for (int i = scalar_out.idx; i >= 0; --i) {
        if (grads_[i].size() == 0 || !nodes_[i].back) continue;
        nodes_[i].back(*this, grads_[i], i);
    }
}

std::map<std::string, Tensor> Tape::backward(Value scalar_out, const ParameterStore& store) {
    sweep(scalar_out);
    std::map<std::string, Tensor> out;
    for (const auto& name : store.names()) {
        auto it = param_nodes_.find(name);
        if (it != param_nodes_.end() && grads_[it->second].size() != 0) {
            out[name] = std::move(grads_[it->second]);
        } else {
            const Tensor& v = store.at(name);
            out[name] = Tensor::zeros(v.r, v.c);
        }
    }
    grads_.clear();
    return out;
}

Tensor Tape::grad_wrt(Value scalar_out, Value node) {
    sweep(scalar_out);
    Tensor g = grads_[node.idx].size() != 0
                   ? std::move(grads_[node.idx])
                   : Tensor::zeros(nodes_[node.idx].val.r, nodes_[node.idx].val.c);
    grads_.clear();
    return g;
}

bool Tape::replay_check() {
    for (size_t i = 0; i < nodes_.size(); ++i) {
        if (!nodes_[i].fwd) return false;
        Tensor redo = nodes_[i].fwd(*this, static_cast<int>(i));
        if (!bit_equal(redo, nodes_[i].val)) return false;
    }
    return true;
}

}  // namespace ndftm
