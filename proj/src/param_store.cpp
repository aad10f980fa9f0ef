#include "ndftm/param_store.hpp"

#include <cstring>
#include <fstream>
#include <mutex>

#include "ndftm/common.hpp"

namespace ndftm {

namespace {

// Checkpoint layout (all integers little-endian):
//   magic "NDFC", u32 version, u8 scalar width, u8 has_moments, u32 slot count
//   per slot: u32 name length, name bytes, u32 rows, u32 cols
//   i64 step counter
//   per slot: value payload [, m payload, v payload]  (raw scalars)
//   u64 fnv1a of everything before it
constexpr uint32_t kVersion = 1;

void put_u32(std::string& buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& buf, uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_real(std::string& buf, real v) {
    static_assert(sizeof(real) == 8 || sizeof(real) == 4);
    uint64_t bits = 0;
    std::memcpy(&bits, &v, sizeof(real));
    for (size_t i = 0; i < sizeof(real); ++i) {
        buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
    }
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;
    explicit Reader(const std::string& b) : buf(b) {}
    void need(size_t n) const {
        if (pos + n > buf.size()) throw CompatError("checkpoint: truncated file");
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    uint8_t u8() {
        need(1);
        return static_cast<uint8_t>(buf[pos++]);
    }
    std::string bytes(size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
    real real_val() {
        need(sizeof(real));
        uint64_t bits = 0;
        for (size_t i = 0; i < sizeof(real); ++i) {
            bits |= static_cast<uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        }
        pos += sizeof(real);
        real v;
        std::memcpy(&v, &bits, sizeof(real));
        return v;
    }
};

}  // namespace

Tensor& ParameterStore::create(const std::string& name, int rows, int cols) {
    std::unique_lock lock(*mutex_);
    auto [it, inserted] = slots_.try_emplace(name);
    if (!inserted) throw ConfigError("parameter slot already exists: " + name);
    it->second.value = Tensor::zeros(rows, cols);
    return it->second.value;
}

Tensor& ParameterStore::create_randn(const std::string& name, int rows, int cols, Rng& rng,
                                     real scale) {
    Tensor& t = create(name, rows, cols);
    for (auto& v : t.d) v = static_cast<real>(rng.normal()) * scale;
    return t;
}

bool ParameterStore::has(const std::string& name) const {
    std::shared_lock lock(*mutex_);
    return slots_.count(name) != 0;
}

const Tensor& ParameterStore::at(const std::string& name) const {
    std::shared_lock lock(*mutex_);
    auto it = slots_.find(name);
    if (it == slots_.end()) throw ConfigError("unknown parameter slot: " + name);
    return it->second.value;
}

Tensor& ParameterStore::mutate(const std::string& name) {
    std::unique_lock lock(*mutex_);
    auto it = slots_.find(name);
    if (it == slots_.end()) throw ConfigError("unknown parameter slot: " + name);
    return it->second.value;
}

std::vector<std::string> ParameterStore::names() const {
    std::shared_lock lock(*mutex_);
    std::vector<std::string> out;
    out.reserve(slots_.size());
    for (const auto& [name, _] : slots_) out.push_back(name);
    return out;
}

size_t ParameterStore::num_scalars() const {
    std::shared_lock lock(*mutex_);
    size_t n = 0;
    for (const auto& [_, slot] : slots_) n += slot.value.size();
    return n;
}

StepResult ParameterStore::optimizer_step(const std::map<std::string, Tensor>& grads,
                                          const AdamConfig& cfg) {
    std::unique_lock lock(*mutex_);
    StepResult res;

    double sq = 0.0;
    for (const auto& [name, g] : grads) {
        auto it = slots_.find(name);
        if (it == slots_.end()) throw ConfigError("gradient for unknown slot: " + name);
        if (!it->second.value.same_shape(g)) {
            throw ShapeError("gradient shape mismatch for slot " + name);
        }
        for (real v : g.d) {
            if (!std::isfinite(v)) {
                ++skipped_;
                return res;  // skip the whole step, leave state untouched
            }
            sq += static_cast<double>(v) * static_cast<double>(v);
        }
    }
    res.grad_norm = static_cast<real>(std::sqrt(sq));
    if (cfg.clip_norm > real(0) && res.grad_norm > cfg.clip_norm) {
        res.clip_scale = cfg.clip_norm / res.grad_norm;
    }

    ++step_;
    const real bc1 = real(1) - std::pow(cfg.beta1, static_cast<real>(step_));
    const real bc2 = real(1) - std::pow(cfg.beta2, static_cast<real>(step_));
    for (const auto& [name, g] : grads) {
        Slot& slot = slots_[name];
        if (slot.m.size() == 0) {
            slot.m = Tensor::zeros(g.r, g.c);
            slot.v = Tensor::zeros(g.r, g.c);
        }
        for (size_t i = 0; i < g.d.size(); ++i) {
            const real gi = g.d[i] * res.clip_scale;
            slot.m.d[i] = cfg.beta1 * slot.m.d[i] + (real(1) - cfg.beta1) * gi;
            slot.v.d[i] = cfg.beta2 * slot.v.d[i] + (real(1) - cfg.beta2) * gi * gi;
            const real mhat = slot.m.d[i] / bc1;
            const real vhat = slot.v.d[i] / bc2;
            slot.value.d[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
        }
    }
    res.applied = true;
    return res;
}

void ParameterStore::save_checkpoint(const std::string& path) const {
    std::shared_lock lock(*mutex_);
    std::string buf;
    buf.append("NDFC");
    put_u32(buf, kVersion);
    buf.push_back(static_cast<char>(sizeof(real)));
    buf.push_back(static_cast<char>(1));  // moments always included
    put_u32(buf, static_cast<uint32_t>(slots_.size()));
    for (const auto& [name, slot] : slots_) {
        put_u32(buf, static_cast<uint32_t>(name.size()));
        buf.append(name);
        put_u32(buf, static_cast<uint32_t>(slot.value.r));
        put_u32(buf, static_cast<uint32_t>(slot.value.c));
    }
    put_u64(buf, static_cast<uint64_t>(step_));
    for (const auto& [name, slot] : slots_) {
        for (real v : slot.value.d) put_real(buf, v);
        const Tensor m = slot.m.size() ? slot.m : Tensor::zeros(slot.value.r, slot.value.c);
        const Tensor v2 = slot.v.size() ? slot.v : Tensor::zeros(slot.value.r, slot.value.c);
        for (real v : m.d) put_real(buf, v);
        for (real v : v2.d) put_real(buf, v);
    }
    put_u64(buf, fnv1a(buf.data(), buf.size()));

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw InputError("cannot write checkpoint: " + path);
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

ParameterStore ParameterStore::load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot read checkpoint: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() < 12) throw CompatError("checkpoint: truncated file");
    const uint64_t stored = [&] {
        Reader r(buf);
        r.pos = buf.size() - 8;
        return r.u64();
    }();
    if (fnv1a(buf.data(), buf.size() - 8) != stored) {
        throw CompatError("checkpoint: content hash mismatch (file corrupt or tampered)");
    }

    Reader r(buf);
    if (r.bytes(4) != "NDFC") throw CompatError("checkpoint: bad magic");
    if (r.u32() != kVersion) throw CompatError("checkpoint: unsupported version");
    if (r.u8() != sizeof(real)) {
        throw CompatError("checkpoint: scalar width differs from this build");
    }
    const bool has_moments = r.u8() != 0;
    const uint32_t count = r.u32();
    struct Meta {
        std::string name;
        int rows, cols;
    };
    std::vector<Meta> metas;
    metas.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t len = r.u32();
        std::string name = r.bytes(len);
        const int rows = static_cast<int>(r.u32());
        const int cols = static_cast<int>(r.u32());
        metas.push_back({std::move(name), rows, cols});
    }
    ParameterStore store;
    store.step_ = static_cast<int64_t>(r.u64());
    for (const auto& meta : metas) {
        Slot slot;
        slot.value = Tensor(meta.rows, meta.cols);
        for (auto& v : slot.value.d) v = r.real_val();
        if (has_moments) {
            slot.m = Tensor(meta.rows, meta.cols);
            slot.v = Tensor(meta.rows, meta.cols);
            for (auto& v : slot.m.d) v = r.real_val();
            for (auto& v : slot.v.d) v = r.real_val();
        }
        store.slots_.emplace(meta.name, std::move(slot));
    }
    return store;
}

ParameterStore ParameterStore::clone() const {
    std::shared_lock lock(*mutex_);
    ParameterStore out;
    out.slots_ = slots_;
    out.step_ = step_;
    out.skipped_ = skipped_;
    return out;
}

uint64_t ParameterStore::content_hash() const {
    std::shared_lock lock(*mutex_);
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, slot] : slots_) {
        h = fnv1a(name, h);
        h = fnv1a(slot.value.d.data(), slot.value.d.size() * sizeof(real), h);
    }
    h = fnv1a(&step_, sizeof(step_), h);
    return h;
}

}  // namespace ndftm
