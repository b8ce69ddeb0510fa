#include "lsp/substrate.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace lsp {

template <class S>
ag::Var<S>& ParamStore<S>::add(const std::string& name, Tensor<S> init) {
    if (name.empty()) fail(ErrorCode::PreconditionViolation, "empty parameter name");
    if (index_.count(name))
        fail(ErrorCode::PreconditionViolation, "duplicate parameter name " + name);
    names_.push_back(name);
    auto [it, ok] = index_.emplace(name, ag::Var<S>::leaf(std::move(init), true));
    (void)ok;
    return it->second;
}

template <class S>
ag::Var<S>& ParamStore<S>::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) fail(ErrorCode::PreconditionViolation, "unknown parameter " + name);
    return it->second;
}

template <class S>
const ag::Var<S>& ParamStore<S>::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) fail(ErrorCode::PreconditionViolation, "unknown parameter " + name);
    return it->second;
}

template <class S>
int64_t ParamStore<S>::count_params() const {
    int64_t total = 0;
    for (const auto& n : names_) total += at(n).value().size();
    return total;
}

template <class S>
void ParamStore<S>::zero_grads() {
    for (const auto& n : names_) at(n).node()->grad = Tensor<S>();
}

template <class S>
void ParamStore<S>::set_trainable(bool on) {
    for (const auto& n : names_) at(n).set_requires_grad(on);
}

template <class S>
ParamStore<S> init_params(const ModelSpec& spec, uint64_t seed) {
    ParamStore<S> store;
    Rng rng(hash_seed(seed, "init:" + spec.arch));
    for (const auto& def : spec.defs) {
        Tensor<S> t(def.shape);
        if (def.fan_in > 0) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(def.fan_in));
            rng.fill_uniform(t, -bound, bound);
        }
        store.add(def.name, std::move(t));
    }
    return store;
}

template <class S>
void adam_step(ParamStore<S>& store, AdamState<S>& state) {
    for (const auto& name : store.names()) {
        auto& var = store.at(name);
        const Tensor<S>& g = var.node()->grad;
        if (g.size() == 0)
            fail(ErrorCode::PreconditionViolation, "no gradient for parameter " + name);
        if (!g.all_finite()) fail(ErrorCode::NonFiniteGradient, "gradient for " + name);
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (const auto& name : store.names()) {
        auto& var = store.at(name);
        const Tensor<S>& g = var.node()->grad;
        Tensor<S>& w = var.mutable_value();
        auto mit = state.m.find(name);
        if (mit == state.m.end()) {
            mit = state.m.emplace(name, Tensor<S>(w.shape())).first;
            state.v.emplace(name, Tensor<S>(w.shape()));
        }
        Tensor<S>& m = mit->second;
        Tensor<S>& v = state.v.at(name);
        for (int64_t i = 0; i < w.size(); ++i) {
            const double gi = static_cast<double>(g[i]);
            const double mi = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            const double vi = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            m[i] = static_cast<S>(mi);
            v[i] = static_cast<S>(vi);
            w[i] -= static_cast<S>(state.lr * (mi / bc1) / (std::sqrt(vi / bc2) + state.eps));
        }
    }
    ++store.step;
}

template <class S>
double finite_diff_check(const LossFn<S>& loss_fn, ParamStore<S>& store, int probes, double eps,
                         Rng& rng) {
    const int64_t total = store.count_params();
    if (total == 0) return 0.0;
    store.zero_grads();
    (void)loss_fn(store, true);

    // Snapshot analytic gradients before FD evaluations disturb anything.
    std::vector<std::pair<std::string, int64_t>> coords;
    std::vector<double> analytic;
    for (int p = 0; p < probes; ++p) {
        int64_t flat = static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(total)));
        for (const auto& name : store.names()) {
            const int64_t n = store.at(name).value().size();
            if (flat < n) {
                coords.push_back({name, flat});
                const Tensor<S>& g = store.at(name).node()->grad;
                analytic.push_back(g.size() ? static_cast<double>(g[flat]) : 0.0);
                break;
            }
            flat -= n;
        }
    }

    double worst = 0.0;
    for (size_t p = 0; p < coords.size(); ++p) {
        auto& [name, idx] = coords[p];
        Tensor<S>& w = store.at(name).mutable_value();
        const S orig = w[idx];
        w[idx] = static_cast<S>(static_cast<double>(orig) + eps);
        const double lp = loss_fn(store, false);
        w[idx] = static_cast<S>(static_cast<double>(orig) - eps);
        const double lm = loss_fn(store, false);
        w[idx] = orig;
        const double fd = (lp - lm) / (2.0 * eps);
        const double err =
            std::abs(analytic[p] - fd) / std::max(1e-8, std::abs(analytic[p]) + std::abs(fd));
        worst = std::max(worst, err);
    }
    return worst;
}

// --- checkpointing -------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'L', 'S', 'P', 'C'};
constexpr uint32_t kVersion = 1;

void put_bytes(std::string& buf, const void* p, size_t n) {
    buf.append(static_cast<const char*>(p), n);
}

template <class T>
void put_scalar(std::string& buf, T v) {
    put_bytes(buf, &v, sizeof(v));
}

class Reader {
public:
    Reader(const std::string& buf, const std::string& path) : buf_(buf), path_(path) {}

    void read(void* out, size_t n) {
        if (pos_ + n > buf_.size())
            fail(ErrorCode::CorruptFile, path_ + ": truncated at byte " + std::to_string(pos_));
        std::memcpy(out, buf_.data() + pos_, n);
        pos_ += n;
    }
    template <class T>
    T scalar() {
        T v;
        read(&v, sizeof(v));
        return v;
    }
    size_t pos() const { return pos_; }

private:
    const std::string& buf_;
    std::string path_;
    size_t pos_ = 0;
};

}  // namespace

template <class S>
void save_checkpoint(const ParamStore<S>& store, const MetaMap& meta, const std::string& path) {
    for (const auto& name : store.names())
        if (!store.at(name).value().all_finite())
            fail(ErrorCode::InvariantViolation, "non-finite parameter " + name);

    std::string buf;
    put_bytes(buf, kMagic, 4);
    put_scalar<uint32_t>(buf, kVersion);
    put_scalar<uint8_t>(buf, static_cast<uint8_t>(sizeof(S)));
    put_scalar<int64_t>(buf, store.step);
    put_scalar<uint32_t>(buf, static_cast<uint32_t>(store.size()));
    for (const auto& name : store.names()) {
        const Tensor<S>& t = store.at(name).value();
        put_scalar<uint32_t>(buf, static_cast<uint32_t>(name.size()));
        put_bytes(buf, name.data(), name.size());
        put_scalar<uint32_t>(buf, static_cast<uint32_t>(t.shape().size()));
        for (int64_t d : t.shape()) put_scalar<int64_t>(buf, d);
        put_bytes(buf, t.data(), static_cast<size_t>(t.size()) * sizeof(S));
    }
    const uint32_t crc = static_cast<uint32_t>(
        crc32(0, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size())));
    put_scalar<uint32_t>(buf, crc);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::IoError, "cannot write " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) fail(ErrorCode::IoError, "short write to " + path);
    out.close();

    std::ofstream ms(path + ".meta", std::ios::trunc);
    if (!ms) fail(ErrorCode::IoError, "cannot write " + path + ".meta");
    for (const auto& [k, v] : meta) ms << k << " = " << v << "\n";
}

template <class S>
std::pair<ParamStore<S>, MetaMap> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::MissingFile, path);
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string buf = ss.str();

    if (buf.size() < 4 + sizeof(uint32_t)) fail(ErrorCode::CorruptFile, path + ": too short");
    uint32_t stored_crc;
    std::memcpy(&stored_crc, buf.data() + buf.size() - sizeof(uint32_t), sizeof(uint32_t));
    const uint32_t crc = static_cast<uint32_t>(crc32(
        0, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size() - 4)));
    if (crc != stored_crc) fail(ErrorCode::CorruptFile, path + ": checksum mismatch");

    Reader r(buf, path);
    char magic[4];
    r.read(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) fail(ErrorCode::BadMagic, path);
    const uint32_t version = r.scalar<uint32_t>();
    if (version != kVersion)
        fail(ErrorCode::VersionMismatch,
             path + ": version " + std::to_string(version) + ", expected " +
                 std::to_string(kVersion));
    const uint8_t dtype = r.scalar<uint8_t>();
    if (dtype != sizeof(S))
        fail(ErrorCode::VersionMismatch, path + ": element width " + std::to_string(dtype) +
                                             ", reader expects " + std::to_string(sizeof(S)));
    ParamStore<S> store;
    store.step = r.scalar<int64_t>();
    const uint32_t ntensors = r.scalar<uint32_t>();
    for (uint32_t i = 0; i < ntensors; ++i) {
        const uint32_t name_len = r.scalar<uint32_t>();
        std::string name(name_len, '\0');
        r.read(name.data(), name_len);
        const uint32_t ndims = r.scalar<uint32_t>();
        Shape shape(ndims);
        for (uint32_t d = 0; d < ndims; ++d) shape[d] = r.scalar<int64_t>();
        Tensor<S> t(shape);
        r.read(t.data(), static_cast<size_t>(t.size()) * sizeof(S));
        if (!t.all_finite()) fail(ErrorCode::CorruptFile, path + ": non-finite tensor " + name);
        store.add(name, std::move(t));
    }
    if (r.pos() != buf.size() - sizeof(uint32_t))
        fail(ErrorCode::CorruptFile, path + ": trailing bytes");

    MetaMap meta;
    std::ifstream ms(path + ".meta");
    for (std::string line; std::getline(ms, line);) {
        const size_t eq = line.find(" = ");
        if (eq == std::string::npos) continue;
        meta.push_back({line.substr(0, eq), line.substr(eq + 3)});
    }
    return {std::move(store), std::move(meta)};
}

#define LSP_INSTANTIATE_SUBSTRATE(S)                                                              \
    template class ParamStore<S>;                                                                 \
    template ParamStore<S> init_params<S>(const ModelSpec&, uint64_t);                            \
    template void adam_step<S>(ParamStore<S>&, AdamState<S>&);                                    \
    template double finite_diff_check<S>(const LossFn<S>&, ParamStore<S>&, int, double, Rng&);    \
    template void save_checkpoint<S>(const ParamStore<S>&, const MetaMap&, const std::string&);   \
    template std::pair<ParamStore<S>, MetaMap> load_checkpoint<S>(const std::string&);

LSP_INSTANTIATE_SUBSTRATE(float)
LSP_INSTANTIATE_SUBSTRATE(double)

}  // namespace lsp
