#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "ndftm/gradcheck.hpp"
#include "ndftm/param_store.hpp"
#include "ndftm/tape.hpp"

using namespace ndftm;

namespace {

Tensor random_tensor(int r, int c, Rng& rng, real lo = real(-2), real hi = real(2)) {
    Tensor t(r, c);
    for (auto& v : t.d) v = lo + (hi - lo) * static_cast<real>(rng.uniform());
    return t;
}

// Finite-difference check of a single primitive: f = sum(op(inputs)), with
// all inputs living in a parameter store.
real primitive_fd_error(const std::function<Value(Tape&, std::vector<Value>&)>& op,
                        const std::vector<Tensor>& inputs) {
    ParameterStore store;
    for (size_t i = 0; i < inputs.size(); ++i) {
        Tensor& slot = store.create("in" + std::to_string(i), inputs[i].r, inputs[i].c);
        slot = inputs[i];
    }
    auto build = [&](Tape& tape) {
        std::vector<Value> vals;
        for (size_t i = 0; i < inputs.size(); ++i) {
            vals.push_back(tape.parameter(store, "in" + std::to_string(i)));
        }
        Value out = op(tape, vals);
        return tape.val(out).size() == 1 ? out : tape.sum_all(out);
    };
    GradCheckOptions opt;
    opt.epsilon = real(1e-5);
    return gradient_check(build, store, opt).max_rel_err;
}

}  // namespace

TEST_CASE("primitive trivia") {
    Tape tape;
    Value x = tape.constant(Tensor::scalar(0));
    CHECK(tape.val(tape.sigmoid(x)).item() == doctest::Approx(0.5).epsilon(1e-12));

    Value z = tape.constant(Tensor::row({0, 0, 0}));
    const Tensor& sm = tape.val(tape.softmax_rows(z));
    for (real v : sm.d) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-12));

    Value eye = tape.constant(Tensor::identity(3));
    Rng rng(1);
    Tensor xt = random_tensor(3, 2, rng);
    Value xv = tape.constant(xt);
    const Tensor& got = tape.val(tape.matmul(eye, xv));
    for (size_t i = 0; i < xt.d.size(); ++i) CHECK(got.d[i] == doctest::Approx(xt.d[i]));
}

TEST_CASE("primitive dispatch covers the advertised op set") {
    Tape tape;
    Rng rng(3);
    Value a = tape.constant(random_tensor(2, 3, rng));
    Value b = tape.constant(random_tensor(2, 3, rng));
    Value m = tape.constant(random_tensor(3, 4, rng));
    Value bias = tape.constant(random_tensor(1, 4, rng));
    Value row = tape.constant(random_tensor(1, 3, rng));

    auto p = [&](PrimitiveOp op, std::initializer_list<Value> in, PrimitiveAttrs attrs = {}) {
        std::vector<Value> vs(in);
        return tape.primitive(op, vs, attrs);
    };
    CHECK(tape.val(p(PrimitiveOp::MatMul, {a, m})).shape() == std::vector<int>{2, 4});
    CHECK(tape.val(p(PrimitiveOp::Affine, {a, m, bias})).shape() == std::vector<int>{2, 4});
    CHECK(tape.val(p(PrimitiveOp::Add, {a, b})).shape() == std::vector<int>{2, 3});
    CHECK(tape.val(p(PrimitiveOp::Mul, {a, b})).shape() == std::vector<int>{2, 3});
    CHECK(tape.val(p(PrimitiveOp::Exp, {a})).shape() == std::vector<int>{2, 3});
    CHECK(tape.val(p(PrimitiveOp::Log, {p(PrimitiveOp::Exp, {a})})).shape() == std::vector<int>{2, 3});
    CHECK(tape.val(p(PrimitiveOp::Sigmoid, {a})).shape() == std::vector<int>{2, 3});
    CHECK(tape.val(p(PrimitiveOp::Tanh, {a})).shape() == std::vector<int>{2, 3});
    CHECK(tape.val(p(PrimitiveOp::Softmax, {a})).shape() == std::vector<int>{2, 3});
    CHECK(tape.val(p(PrimitiveOp::Sum, {a})).size() == 1);
    CHECK(tape.val(p(PrimitiveOp::Mean, {a})).size() == 1);
    CHECK(tape.val(p(PrimitiveOp::Concat, {a, b})).shape() == std::vector<int>{2, 6});
    CHECK(tape.val(p(PrimitiveOp::Slice, {a}, {1, 3})).shape() == std::vector<int>{2, 2});
    CHECK(tape.val(p(PrimitiveOp::Broadcast, {row}, {5, 0})).shape() == std::vector<int>{5, 3});
}

TEST_CASE("every primitive's VJP matches central finite differences") {
    Rng rng(42);
    auto in = [&](int r, int c) { return random_tensor(r, c, rng); };
    const real tol = real(1e-4);

    CHECK(primitive_fd_error([](Tape& t, auto& v) { return t.matmul(v[0], v[1]); },
                             {in(3, 4), in(4, 2)}) < tol);
    CHECK(primitive_fd_error([](Tape& t, auto& v) { return t.matmul_nt(v[0], v[1]); },
                             {in(3, 4), in(5, 4)}) < tol);
    CHECK(primitive_fd_error([](Tape& t, auto& v) { return t.affine(v[0], v[1], v[2]); },
                             {in(3, 4), in(4, 2), in(1, 2)}) < tol);
    CHECK(primitive_fd_error([](Tape& t, auto& v) { return t.add(v[0], v[1]); },
                             {in(3, 3), in(3, 3)}) < tol);
    CHECK(primitive_fd_error([](Tape& t, auto& v) { return t.sub(v[0], v[1]); },
                             {in(3, 3), in(3, 3)}) < tol);
    CHECK(primitive_fd_error([](Tape& t, auto& v) { return t.mul(v[0], v[1]); },
                             {in(3, 3), in(3, 3)}) < tol);
    CHECK(primitive_fd_error([](Tape& t, auto& v) { return t.scale(v[0], real(1.7)); },
                             {in(3, 3)}) < tol);
    CHECK(primitive_fd_error([](Tape& t, auto& v) { return t.exp(v[0]); }, {in(3, 3)}) < tol);
    {
        Tensor pos = in(3, 3);
        for (auto& v : pos.d) v = std::abs(v) + real(0.5);
        CHECK(primitive_fd_error([](Tape& t, auto& v) { return t.log(v[0]); }, {pos}) < tol);
    }
    CHECK(primitive_fd_error([](Tape& t, auto& v) { return t.sigmoid(v[0]); }, {in(3, 3)}) < tol);
    CHECK(primitive_fd_error([](Tape& t, auto& v) { return t.tanh(v[0]); }, {in(3, 3)}) < tol);
    CHECK(primitive_fd_error([](Tape& t, auto& v) { return t.softplus(v[0]); }, {in(3, 3)}) < tol);
    CHECK(primitive_fd_error(
              [](Tape& t, auto& v) { return t.mul(t.softmax_rows(v[0]), v[1]); },
              {in(4, 5), in(4, 5)}) < tol);
    CHECK(primitive_fd_error([](Tape& t, auto& v) { return t.mean_all(v[0]); }, {in(3, 5)}) < tol);
    CHECK(primitive_fd_error(
              [](Tape& t, auto& v) { return t.mul(t.rowsum(v[0]), v[1]); },
              {in(4, 3), in(4, 1)}) < tol);
    CHECK(primitive_fd_error(
              [](Tape& t, auto& v) { return t.mul(t.concat_cols(v[0], v[1]), v[2]); },
              {in(2, 3), in(2, 2), in(2, 5)}) < tol);
    CHECK(primitive_fd_error(
              [](Tape& t, auto& v) { return t.mul(t.slice_cols(v[0], 1, 3), v[1]); },
              {in(2, 4), in(2, 2)}) < tol);
    CHECK(primitive_fd_error(
              [](Tape& t, auto& v) { return t.mul(t.broadcast_rows(v[0], 4), v[1]); },
              {in(1, 3), in(4, 3)}) < tol);
    {
        auto counts = std::make_shared<SparseCounts>();
        counts->rows = 2;
        counts->cols = 3;
        counts->entries = {{0, 0, real(2)}, {0, 2, real(1)}, {1, 1, real(3)}};
        Tensor pos = in(2, 3);
        for (auto& v : pos.d) v = std::abs(v) + real(0.5);
        CHECK(primitive_fd_error(
                  [counts](Tape& t, auto& v) {
                      return t.weighted_log_sum(v[0], counts, real(1e-12), nullptr);
                  },
                  {pos}) < tol);
    }
}

TEST_CASE("softmax rows sum to one and sigmoid stays strictly interior") {
    Rng rng(7);
    Tape tape;
    Value x = tape.constant(random_tensor(20, 11, rng, real(-30), real(30)));
    const Tensor& sm = tape.val(tape.softmax_rows(x));
    for (int i = 0; i < sm.r; ++i) {
        real s = 0;
        for (int j = 0; j < sm.c; ++j) s += sm.at(i, j);
        CHECK(std::abs(s - real(1)) < real(1e-12));
    }
    const Tensor& sg = tape.val(tape.sigmoid(x));
    for (real v : sg.d) {
        CHECK(v > real(0));
        CHECK(v < real(1));
    }
}

TEST_CASE("replay reproduces cached forward values bit-exactly") {
    Rng rng(11);
    ParameterStore store;
    store.create_randn("w", 4, 4, rng, real(0.7));
    Tape tape;
    Value w = tape.parameter(store, "w");
    Value x = tape.constant(random_tensor(2, 4, rng));
    Value y = tape.sum_all(tape.softmax_rows(tape.tanh(tape.matmul(x, w))));
    (void)y;
    CHECK(tape.replay_check());
}

TEST_CASE("shape errors name the op and the shapes") {
    Tape tape;
    Value a = tape.constant(Tensor::zeros(2, 3));
    Value b = tape.constant(Tensor::zeros(2, 3));
    try {
        tape.matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("matmul") != std::string::npos);
        CHECK(msg.find("[2x3]") != std::string::npos);
    }
}

TEST_CASE("backward basics") {
    SUBCASE("d/dx x^2 at 3 is 6") {
        ParameterStore store;
        store.create("x", 1, 1).d[0] = real(3);
        Tape tape;
        Value x = tape.parameter(store, "x");
        auto grads = tape.backward(tape.mul(x, x), store);
        CHECK(grads.at("x").item() == doctest::Approx(6.0).epsilon(1e-12));
    }
    SUBCASE("sum of softmax is constant, gradient vanishes") {
        ParameterStore store;
        Rng rng(5);
        store.create_randn("x", 1, 7, rng, real(1));
        Tape tape;
        Value x = tape.parameter(store, "x");
        auto grads = tape.backward(tape.sum_all(tape.softmax_rows(x)), store);
        for (real g : grads.at("x").d) CHECK(std::abs(g) < real(1e-12));
    }
    SUBCASE("unreachable slots get zero gradients") {
        ParameterStore store;
        store.create("used", 1, 1).d[0] = real(2);
        store.create("unused", 2, 2);
        Tape tape;
        Value x = tape.parameter(store, "used");
        auto grads = tape.backward(tape.mul(x, x), store);
        CHECK(grads.count("unused") == 1);
        for (real g : grads.at("unused").d) CHECK(g == real(0));
    }
    SUBCASE("non-scalar output is rejected") {
        ParameterStore store;
        store.create("x", 2, 2);
        Tape tape;
        Value x = tape.parameter(store, "x");
        CHECK_THROWS_AS(tape.backward(x, store), ShapeError);
    }
}

TEST_CASE("lstm cell") {
    const int in_dim = 3, hid = 4;
    SUBCASE("all-zero weights and states give a zero hidden state") {
        ParameterStore store;
        store.create("wx", in_dim, 4 * hid);
        store.create("wh", hid, 4 * hid);
        store.create("b", 1, 4 * hid);
        Tape tape;
        LstmState s = lstm_cell(tape, tape.constant(Tensor::zeros(1, in_dim)),
                                tape.constant(Tensor::zeros(1, hid)),
                                tape.constant(Tensor::zeros(1, hid)),
                                tape.parameter(store, "wx"), tape.parameter(store, "wh"),
                                tape.parameter(store, "b"));
        for (real v : tape.val(s.h).d) CHECK(v == real(0));
    }
    SUBCASE("large forget-gate bias carries the cell state through") {
        ParameterStore store;
        Rng rng(9);
        store.create("wx", in_dim, 4 * hid);
        store.create("wh", hid, 4 * hid);
        Tensor& b = store.create("b", 1, 4 * hid);
        for (int j = 0; j < hid; ++j) {
            b.d[static_cast<size_t>(hid + j)] = real(30);   // forget gate saturated on
            b.d[static_cast<size_t>(2 * hid + j)] = real(0);  // zero candidate
        }
        Tensor c_prev = random_tensor(1, hid, rng);
        Tape tape;
        LstmState s = lstm_cell(tape, tape.constant(Tensor::zeros(1, in_dim)),
                                tape.constant(Tensor::zeros(1, hid)), tape.constant(c_prev),
                                tape.parameter(store, "wx"), tape.parameter(store, "wh"),
                                tape.parameter(store, "b"));
        for (int j = 0; j < hid; ++j) {
            CHECK(tape.val(s.c).d[static_cast<size_t>(j)] ==
                  doctest::Approx(c_prev.d[static_cast<size_t>(j)]).epsilon(1e-6));
        }
    }
    SUBCASE("gradient of sum(h) wrt x matches finite differences") {
        ParameterStore store;
        Rng rng(13);
        store.create_randn("wx", in_dim, 4 * hid, rng, real(0.6));
        store.create_randn("wh", hid, 4 * hid, rng, real(0.6));
        store.create_randn("b", 1, 4 * hid, rng, real(0.3));
        store.create_randn("x", 1, in_dim, rng, real(1));
        store.create_randn("h0", 1, hid, rng, real(0.5));
        store.create_randn("c0", 1, hid, rng, real(0.5));
        auto build = [&](Tape& tape) {
            LstmState s = lstm_cell(tape, tape.parameter(store, "x"), tape.parameter(store, "h0"),
                                    tape.parameter(store, "c0"), tape.parameter(store, "wx"),
                                    tape.parameter(store, "wh"), tape.parameter(store, "b"));
            return tape.sum_all(s.h);
        };
        GradCheckOptions opt;
        opt.epsilon = real(1e-5);
        CHECK(gradient_check(build, store, opt).max_rel_err < real(1e-4));
    }
}

TEST_CASE("optimizer") {
    SUBCASE("zero gradients leave parameters unchanged") {
        ParameterStore store;
        Rng rng(17);
        store.create_randn("p", 3, 3, rng, real(1));
        const Tensor before = store.at("p");
        std::map<std::string, Tensor> grads{{"p", Tensor::zeros(3, 3)}};
        StepResult res = store.optimizer_step(grads, {});
        CHECK(res.applied);
        CHECK(bit_equal(before, store.at("p")));
    }
    SUBCASE("first bias-corrected step moves by about -lr for unit gradient") {
        ParameterStore store;
        store.create("p", 1, 1).d[0] = real(1);
        AdamConfig cfg;
        cfg.learning_rate = real(0.1);
        cfg.clip_norm = real(0);
        std::map<std::string, Tensor> grads{{"p", Tensor::scalar(real(1))}};
        store.optimizer_step(grads, cfg);
        CHECK(store.at("p").item() == doctest::Approx(0.9).epsilon(1e-6));
    }
    SUBCASE("global-norm clipping rescales to the clip value") {
        ParameterStore store;
        store.create("p", 1, 2);
        AdamConfig cfg;
        cfg.clip_norm = real(1);
        Tensor g(1, 2);
        g.d = {real(6), real(8)};  // norm 10
        std::map<std::string, Tensor> grads{{"p", g}};
        StepResult res = store.optimizer_step(grads, cfg);
        CHECK(res.grad_norm == doctest::Approx(10.0).epsilon(1e-12));
        const real applied_norm = res.grad_norm * res.clip_scale;
        CHECK(std::abs(applied_norm - real(1)) < real(1e-9));
    }
    SUBCASE("non-finite gradients skip the step") {
        ParameterStore store;
        store.create("p", 1, 1).d[0] = real(2);
        Tensor g = Tensor::scalar(std::numeric_limits<real>::quiet_NaN());
        std::map<std::string, Tensor> grads{{"p", g}};
        StepResult res = store.optimizer_step(grads, {});
        CHECK(!res.applied);
        CHECK(store.at("p").item() == real(2));
        CHECK(store.skipped_steps() == 1);
        CHECK(store.step_count() == 0);
    }
}

TEST_CASE("checkpoint round-trip is bit-exact including optimizer state") {
    const std::string path = (std::filesystem::temp_directory_path() / "ndftm_ckpt_test.bin").string();
    ParameterStore store;
    Rng rng(23);
    store.create_randn("a", 3, 5, rng, real(1.3));
    store.create_randn("b", 1, 7, rng, real(0.2));
    std::map<std::string, Tensor> grads{{"a", random_tensor(3, 5, rng)},
                                        {"b", random_tensor(1, 7, rng)}};
    store.optimizer_step(grads, {});
    store.save_checkpoint(path);
    ParameterStore loaded = ParameterStore::load_checkpoint(path);
    CHECK(loaded.step_count() == store.step_count());
    CHECK(loaded.content_hash() == store.content_hash());
    CHECK(bit_equal(loaded.at("a"), store.at("a")));
    CHECK(bit_equal(loaded.at("b"), store.at("b")));
    // a second step from the loaded state reproduces the original bitwise
    ParameterStore fresh = ParameterStore::load_checkpoint(path);
    std::map<std::string, Tensor> g2{{"a", random_tensor(3, 5, rng)},
                                     {"b", Tensor::zeros(1, 7)}};
    store.optimizer_step(g2, {});
    fresh.optimizer_step(g2, {});
    CHECK(bit_equal(fresh.at("a"), store.at("a")));

    SUBCASE("tampering is detected") {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(40);
        char byte = 0x5a;
        f.write(&byte, 1);
        f.close();
        CHECK_THROWS_AS(ParameterStore::load_checkpoint(path), CompatError);
    }
    std::filesystem::remove(path);
}

TEST_CASE("gradient_check oracles") {
    SUBCASE("quadratic form is exact up to roundoff") {
        ParameterStore store;
        Rng rng(29);
        store.create_randn("x", 1, 6, rng, real(1));
        Tensor a = random_tensor(6, 6, rng);
        auto build = [&](Tape& tape) {
            Value x = tape.parameter(store, "x");
            Value av = tape.constant(a);
            return tape.sum_all(tape.mul(x, tape.matmul(x, av)));
        };
        GradCheckOptions opt;
        opt.epsilon = real(1e-4);  // central differences are exact for quadratics
        CHECK(gradient_check(build, store, opt).max_rel_err < real(1e-8));
    }
    SUBCASE("sigmoid chain of depth 5") {
        ParameterStore store;
        Rng rng(31);
        for (int i = 0; i < 5; ++i) {
            store.create_randn("w" + std::to_string(i), 6, 6, rng, real(0.8));
            store.create_randn("b" + std::to_string(i), 1, 6, rng, real(0.3));
        }
        store.create_randn("x", 1, 6, rng, real(1));
        auto build = [&](Tape& tape) {
            Value h = tape.parameter(store, "x");
            for (int i = 0; i < 5; ++i) {
                h = tape.sigmoid(tape.affine(h, tape.parameter(store, "w" + std::to_string(i)),
                                             tape.parameter(store, "b" + std::to_string(i))));
            }
            return tape.sum_all(h);
        };
        GradCheckOptions opt;
        opt.epsilon = real(1e-5);
        CHECK(gradient_check(build, store, opt).max_rel_err < real(1e-5));
    }
}
