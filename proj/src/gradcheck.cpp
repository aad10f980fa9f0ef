#include "ndftm/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace ndftm {

LstmState lstm_cell(Tape& tape, Value x, Value h_prev, Value c_prev, Value wx, Value wh,
                    Value bias) {
    const int hid = tape.val(h_prev).c;
    if (tape.val(wx).c != 4 * hid || tape.val(wh).r != hid || tape.val(wh).c != 4 * hid ||
        tape.val(bias).c != 4 * hid) {
        throw ShapeError("lstm_cell: weight shapes do not match hidden size " +
                         std::to_string(hid));
    }
    Value gates = tape.add(tape.affine(x, wx, bias), tape.matmul(h_prev, wh));
    Value ig = tape.sigmoid(tape.slice_cols(gates, 0, hid));
    Value fg = tape.sigmoid(tape.slice_cols(gates, hid, 2 * hid));
    Value cg = tape.tanh(tape.slice_cols(gates, 2 * hid, 3 * hid));
    Value og = tape.sigmoid(tape.slice_cols(gates, 3 * hid, 4 * hid));
    Value c = tape.add(tape.mul(fg, c_prev), tape.mul(ig, cg));
    Value h = tape.mul(og, tape.tanh(c));
    return {h, c};
}

GradCheckReport gradient_check(const std::function<Value(Tape&)>& build, ParameterStore& store,
                               const GradCheckOptions& opt) {
    GradCheckReport rep;

    Tape tape;
    Value out = build(tape);
    auto grads = tape.backward(out, store);

    auto eval = [&]() {
        Tape t;
        return t.val(build(t)).item();
    };

    Rng pick(opt.sample_seed);
    for (const auto& name : store.names()) {
        Tensor& slot = store.mutate(name);
        const Tensor& g = grads.at(name);
        std::vector<size_t> coords;
        if (opt.coords_per_slot > 0 && static_cast<size_t>(opt.coords_per_slot) < slot.size()) {
            for (int i = 0; i < opt.coords_per_slot; ++i) {
                coords.push_back(static_cast<size_t>(pick.below(slot.size())));
            }
            std::sort(coords.begin(), coords.end());
            coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
        } else {
            coords.resize(slot.size());
            for (size_t i = 0; i < slot.size(); ++i) coords[i] = i;
        }
        for (size_t i : coords) {
            const real saved = slot.d[i];
            slot.d[i] = saved + opt.epsilon;
            const real fp = eval();
            slot.d[i] = saved - opt.epsilon;
            const real fm = eval();
            slot.d[i] = saved;
            const real numeric = (fp - fm) / (real(2) * opt.epsilon);
            const real analytic = g.d[i];
            const real denom =
                std::max({std::abs(analytic), std::abs(numeric), opt.denom_floor});
            const real rel = std::abs(analytic - numeric) / denom;
            ++rep.coords_checked;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_slot = name;
                rep.worst_index = static_cast<int>(i);
                rep.analytic = analytic;
                rep.numeric = numeric;
            }
        }
    }
    return rep;
}

}  // namespace ndftm
