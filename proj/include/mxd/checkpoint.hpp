#pragma once

// Binary checkpoint container (all integers little-endian):
//
//   "MXD1" | version u32 | kind u16 | dtype u8 (1 = f32, 2 = f64) | count u32
//   per tensor: name_len u16 | name (UTF-8) | ndims u8 | dims u64 × ndims | values
//   CRC32 (zlib polynomial) of every preceding byte
//
// Parameters are stored as 2-D tensors (vectors as 1×n). Layer
// hyperparameters (K, activations, flags) travel as 1-element tensors named
// "meta.*".

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "mxd/error.hpp"
#include "mxd/layers.hpp"

namespace mxd {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'M', 'X', 'D', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

template <class T>
constexpr DType dtype_of() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

template <class T>
struct TensorRecord {
    std::string name;
    std::vector<std::uint64_t> dims;
    std::vector<T> values;
};

template <class T>
struct Checkpoint {
    LayerKind kind = LayerKind::tc;
    std::vector<TensorRecord<T>> tensors;

    const TensorRecord<T>* find(std::string_view name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }

    const TensorRecord<T>& get(std::string_view name) const {
        if (const auto* t = find(name)) return *t;
        throw FormatError("checkpoint is missing tensor '" + std::string(name) + "'");
    }

    void add(std::string name, std::vector<std::uint64_t> dims, std::vector<T> values) {
        tensors.push_back({std::move(name), std::move(dims), std::move(values)});
    }

    void add_meta(std::string name, double value) { add("meta." + name, {1}, {static_cast<T>(value)}); }

    double meta(std::string_view name) const {
        const auto& t = get("meta." + std::string(name));
        if (t.values.size() != 1) throw FormatError("meta tensor '" + std::string(name) + "' must hold one value");
        return static_cast<double>(t.values[0]);
    }
};

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t size) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    while (size > 0) {
        const uInt chunk = static_cast<uInt>(std::min<std::size_t>(size, std::numeric_limits<uInt>::max()));
        crc = ::crc32(crc, data, chunk);
        data += chunk;
        size -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

namespace detail {

template <class I>
void put(std::vector<std::uint8_t>& out, I v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(I));
}

class Reader {
public:
    Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

    template <class I>
    I get() {
        need(sizeof(I));
        I v;
        std::memcpy(&v, data_ + pos_, sizeof(I));
        pos_ += sizeof(I);
        return v;
    }

    const std::uint8_t* take(std::size_t n) {
        need(n);
        const auto* p = data_ + pos_;
        pos_ += n;
        return p;
    }

    std::size_t remaining() const { return size_ - pos_; }

private:
    void need(std::size_t n) const {
        if (n > size_ - pos_) throw FormatError("checkpoint truncated");
    }

    const std::uint8_t* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

} // namespace detail

template <class T>
std::vector<std::uint8_t> serialize(const Checkpoint<T>& ckpt) {
    std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
    detail::put<std::uint32_t>(out, kCheckpointVersion);
    detail::put<std::uint16_t>(out, static_cast<std::uint16_t>(ckpt.kind));
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(dtype_of<T>()));
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& t : ckpt.tensors) {
        if (t.name.size() > std::numeric_limits<std::uint16_t>::max()) throw FormatError("tensor name too long");
        if (t.dims.size() > std::numeric_limits<std::uint8_t>::max()) throw FormatError("too many tensor dims");
        std::uint64_t count = 1;
        for (auto d : t.dims) count *= d;
        if (count != t.values.size()) throw FormatError("tensor '" + t.name + "' dims disagree with its data");
        detail::put<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
        out.insert(out.end(), t.name.begin(), t.name.end());
        detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dims.size()));
        for (auto d : t.dims) detail::put<std::uint64_t>(out, d);
        const auto* p = reinterpret_cast<const std::uint8_t*>(t.values.data());
        out.insert(out.end(), p, p + t.values.size() * sizeof(T));
    }
    detail::put<std::uint32_t>(out, crc32_of(out.data(), out.size()));
    return out;
}

struct CheckpointHeader {
    std::uint32_t version = 0;
    LayerKind kind = LayerKind::tc;
    DType dtype = DType::f32;
    std::uint32_t tensor_count = 0;
};

/// Validates magic, version, CRC and returns the fixed header fields.
inline CheckpointHeader read_header(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
        throw FormatError("bad magic: not an MXD1 checkpoint");
    if (bytes.size() < 4 + 4 + 2 + 1 + 4 + 4) throw FormatError("checkpoint truncated");
    std::uint32_t stored_crc;
    std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
    if (crc32_of(bytes.data(), bytes.size() - 4) != stored_crc) throw FormatError("CRC mismatch");

    detail::Reader r(bytes.data() + 4, bytes.size() - 8);
    CheckpointHeader h;
    h.version = r.get<std::uint32_t>();
    if (h.version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(h.version));
    h.kind = static_cast<LayerKind>(r.get<std::uint16_t>());
    const auto dtype = r.get<std::uint8_t>();
    if (dtype != 1 && dtype != 2) throw FormatError("unknown dtype code " + std::to_string(dtype));
    h.dtype = static_cast<DType>(dtype);
    h.tensor_count = r.get<std::uint32_t>();
    return h;
}

template <class T>
Checkpoint<T> deserialize(const std::vector<std::uint8_t>& bytes) {
    const CheckpointHeader h = read_header(bytes);
    if (h.dtype != dtype_of<T>()) throw FormatError("dtype mismatch: file and requested precision differ");
    if (h.tensor_count == 0) throw FormatError("checkpoint holds no tensors (empty layer)");

    detail::Reader r(bytes.data() + 15, bytes.size() - 15 - 4);
    Checkpoint<T> ckpt;
    ckpt.kind = h.kind;
    for (std::uint32_t i = 0; i < h.tensor_count; ++i) {
        TensorRecord<T> t;
        const auto name_len = r.get<std::uint16_t>();
        const auto* name = r.take(name_len);
        t.name.assign(reinterpret_cast<const char*>(name), name_len);
        const auto ndims = r.get<std::uint8_t>();
        std::uint64_t count = 1;
        for (std::uint8_t d = 0; d < ndims; ++d) {
            const auto dim = r.get<std::uint64_t>();
            if (dim != 0 && count > std::numeric_limits<std::uint64_t>::max() / dim)
                throw FormatError("tensor '" + t.name + "' dims overflow");
            count *= dim;
            t.dims.push_back(dim);
        }
        if (count > r.remaining() / sizeof(T)) throw FormatError("tensor '" + t.name + "' exceeds file size (truncated or bad dims)");
        const auto* raw = r.take(count * sizeof(T));
        t.values.resize(count);
        std::memcpy(t.values.data(), raw, count * sizeof(T));
        ckpt.tensors.push_back(std::move(t));
    }
    if (r.remaining() != 0) throw FormatError("trailing bytes after last tensor");
    return ckpt;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Layer <-> checkpoint
// ---------------------------------------------------------------------------

namespace detail {

inline double activation_code(Activation a) { return static_cast<double>(static_cast<int>(a)); }

inline Activation activation_from_code(double c) {
    const int v = static_cast<int>(c);
    if (v < 0 || v > static_cast<int>(Activation::identity) || v != c) throw FormatError("bad activation code");
    return static_cast<Activation>(v);
}

inline std::size_t meta_count(double v) {
    if (!(v >= 0) || v != static_cast<double>(static_cast<std::uint64_t>(v))) throw FormatError("bad count in metadata");
    return static_cast<std::size_t>(v);
}

template <class T>
void load_into(const Checkpoint<T>& c, std::string_view name, std::size_t rows, std::size_t cols, std::span<T> dest) {
    const auto& t = c.get(name);
    const std::uint64_t r = t.dims.size() == 2 ? t.dims[0] : 1;
    const std::uint64_t cc = t.dims.empty() ? 0 : t.dims.back();
    if (t.dims.size() > 2 || r != rows || cc != cols || t.values.size() != dest.size())
        throw FormatError("tensor '" + std::string(name) + "' has unexpected shape");
    std::copy(t.values.begin(), t.values.end(), dest.begin());
}

template <class T>
Matrix<T> matrix_from(const Checkpoint<T>& c, std::string_view name) {
    const auto& t = c.get(name);
    if (t.dims.size() != 2) throw FormatError("tensor '" + std::string(name) + "' must be 2-D");
    return Matrix<T>(t.dims[0], t.dims[1], t.values);
}

template <class T>
Vector<T> vector_from(const Checkpoint<T>& c, std::string_view name) {
    const auto& t = c.get(name);
    if (!(t.dims.size() == 1 || (t.dims.size() == 2 && t.dims[0] == 1)))
        throw FormatError("tensor '" + std::string(name) + "' must be a vector");
    return t.values;
}

template <class T, class L>
void add_params(Checkpoint<T>& c, const L& l, std::string_view prefix = "") {
    l.visit_params([&](std::string_view name, std::size_t rows, std::size_t cols, std::span<const T> data) {
        c.add(std::string(prefix) + std::string(name), {rows, cols}, {data.begin(), data.end()});
    });
}

} // namespace detail

template <class T>
Checkpoint<T> to_checkpoint(const Layer<T>& layer) {
    Checkpoint<T> c;
    c.kind = kind_of(layer);
    std::visit(
        [&](const auto& l) {
            using L = std::decay_t<decltype(l)>;
            detail::add_params<T>(c, l);
            if constexpr (std::is_same_v<L, TeacherMlp<T>>) c.add_meta("act", detail::activation_code(l.act));
            else if constexpr (std::is_same_v<L, TeacherGlu<T>>) c.add_meta("gate_act", detail::activation_code(l.gate_act));
            else if constexpr (std::is_same_v<L, SparseMlp<T>>) {
                c.add_meta("k", static_cast<double>(l.k));
                c.add_meta("pre_relu", l.pre_relu ? 1 : 0);
            } else {
                c.add_meta("k", static_cast<double>(l.k));
                c.add_meta("enc_act", detail::activation_code(l.enc_act));
                c.add_meta("gate_relu", l.gate_relu ? 1 : 0);
                if constexpr (std::is_same_v<L, Mxd<T>>) c.add_meta("glu_act", detail::activation_code(l.glu_act));
            }
        },
        layer);
    return c;
}

/// Rebuilds a layer. When `expected` is given, a checkpoint of any other kind
/// is rejected.
template <class T>
Layer<T> from_checkpoint(const Checkpoint<T>& c, std::optional<LayerKind> expected = std::nullopt) {
    if (expected && *expected != c.kind)
        throw FormatError("layer kind mismatch: file holds " + std::string(to_string(c.kind)) + ", expected " +
                          std::string(to_string(*expected)));
    using detail::matrix_from;
    using detail::vector_from;
    auto finish = [](auto l) -> Layer<T> {
        try {
            l.validate();
        } catch (const std::exception& e) {
            throw FormatError(std::string("inconsistent layer in checkpoint: ") + e.what());
        }
        return l;
    };
    switch (c.kind) {
        case LayerKind::teacher_mlp: {
            TeacherMlp<T> l{matrix_from(c, "E"), matrix_from(c, "D"), vector_from(c, "b_enc"), vector_from(c, "b_dec"),
                            detail::activation_from_code(c.meta("act"))};
            return finish(std::move(l));
        }
        case LayerKind::teacher_glu: {
            TeacherGlu<T> l{matrix_from(c, "E_glu"), matrix_from(c, "E"), matrix_from(c, "D"), vector_from(c, "b_enc"),
                            vector_from(c, "b_dec"), detail::activation_from_code(c.meta("gate_act"))};
            return finish(std::move(l));
        }
        case LayerKind::sae:
        case LayerKind::tc:
        case LayerKind::stc: {
            SparseMlp<T> l;
            l.variant = c.kind;
            l.E = matrix_from(c, "E");
            l.D = matrix_from(c, "D");
            l.b_enc = vector_from(c, "b_enc");
            l.b_dec = vector_from(c, "b_dec");
            if (c.kind == LayerKind::stc) l.skip = matrix_from(c, "S");
            l.k = detail::meta_count(c.meta("k"));
            l.pre_relu = c.meta("pre_relu") != 0;
            return finish(std::move(l));
        }
        case LayerKind::mxd:
        case LayerKind::mxd_glu: {
            Mxd<T> l;
            l.G = matrix_from(c, "G");
            l.E = matrix_from(c, "E");
            l.C = matrix_from(c, "C");
            l.D = matrix_from(c, "D");
            l.b_gate = vector_from(c, "b_gate");
            l.b_enc = vector_from(c, "b_enc");
            l.b_dec = vector_from(c, "b_dec");
            if (c.kind == LayerKind::mxd_glu) l.E_glu = matrix_from(c, "E_glu");
            l.k = detail::meta_count(c.meta("k"));
            l.enc_act = detail::activation_from_code(c.meta("enc_act"));
            l.glu_act = detail::activation_from_code(c.meta("glu_act"));
            l.gate_relu = c.meta("gate_relu") != 0;
            return finish(std::move(l));
        }
        case LayerKind::mumoe: {
            MuMoe<T> l;
            l.G = matrix_from(c, "G");
            l.E = matrix_from(c, "E");
            l.C = matrix_from(c, "C");
            l.D = matrix_from(c, "D");
            l.W = matrix_from(c, "W");
            l.b_gate = vector_from(c, "b_gate");
            l.b_enc = vector_from(c, "b_enc");
            l.b_dec = vector_from(c, "b_dec");
            l.k = detail::meta_count(c.meta("k"));
            l.enc_act = detail::activation_from_code(c.meta("enc_act"));
            l.gate_relu = c.meta("gate_relu") != 0;
            return finish(std::move(l));
        }
        case LayerKind::mov: {
            Mov<T> l;
            l.G = matrix_from(c, "G");
            l.E = matrix_from(c, "E");
            l.C = matrix_from(c, "C");
            l.D = matrix_from(c, "D");
            l.b_gate = vector_from(c, "b_gate");
            l.b_enc = vector_from(c, "b_enc");
            l.b_dec = vector_from(c, "b_dec");
            l.k = detail::meta_count(c.meta("k"));
            l.enc_act = detail::activation_from_code(c.meta("enc_act"));
            l.gate_relu = c.meta("gate_relu") != 0;
            return finish(std::move(l));
        }
        case LayerKind::toy_lm: break;
    }
    throw FormatError("checkpoint kind " + std::string(to_string(c.kind)) + " is not a layer");
}

template <class T>
void save_checkpoint(const Layer<T>& layer, const std::filesystem::path& path) {
    write_file_bytes(path, serialize(to_checkpoint(layer)));
}

template <class T>
Layer<T> load_checkpoint(const std::filesystem::path& path, std::optional<LayerKind> expected = std::nullopt) {
    return from_checkpoint<T>(deserialize<T>(read_file_bytes(path)), expected);
}

} // namespace mxd
