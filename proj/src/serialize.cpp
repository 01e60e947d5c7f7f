#include "act360/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "act360/error.hpp"

namespace act360 {

namespace {

constexpr std::array<char, 4> kMagic{'A', 'C', 'T', 'T'};

template <typename U>
void put_le(std::ostream& os, U value) {
    std::array<char, sizeof(U)> bytes{};
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        bytes[i] = static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF);
    }
    os.write(bytes.data(), bytes.size());
}

template <typename U>
U get_le(std::istream& is) {
    std::array<unsigned char, sizeof(U)> bytes{};
    is.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
    if (!is) throw ValidationError("tensor stream truncated");
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    return static_cast<U>(v);
}

void write_header(std::ostream& os, const Shape& shape, DType dtype) {
    os.write(kMagic.data(), kMagic.size());
    put_le<std::uint32_t>(os, kTensorFormatVersion);
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(shape.size()));
    for (auto e : shape) put_le<std::uint64_t>(os, e);
    put_le<std::uint8_t>(os, static_cast<std::uint8_t>(dtype));
}

struct Header {
    Shape shape;
    DType dtype;
};

Header read_header(std::istream& is) {
    std::array<char, 4> magic{};
    is.read(magic.data(), magic.size());
    if (!is || magic != kMagic) throw ValidationError("bad tensor magic (expected ACTT)");
    const auto version = get_le<std::uint32_t>(is);
    if (version != kTensorFormatVersion) {
        throw ValidationError("unsupported tensor format version " + std::to_string(version));
    }
    const auto rank = get_le<std::uint32_t>(is);
    if (rank == 0 || rank > 8) throw ValidationError("bad tensor rank " + std::to_string(rank));
    Header h;
    for (std::uint32_t i = 0; i < rank; ++i) h.shape.push_back(get_le<std::uint64_t>(is));
    const auto tag = get_le<std::uint8_t>(is);
    if (tag > 1) throw ValidationError("unknown tensor dtype tag " + std::to_string(tag));
    h.dtype = static_cast<DType>(tag);
    return h;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
    write_header(os, t.shape(), DType::Real32);
    for (float v : t.data()) put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(v));
}

void write_tensor(std::ostream& os, const Int8Tensor& t) {
    if (t.data.size() != shape_numel(t.shape)) throw ValidationError("int8 tensor size mismatch");
    write_header(os, t.shape, DType::Int8);
    os.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size()));
}

AnyTensor read_any_tensor(std::istream& is) {
    Header h = read_header(is);
    const std::size_t n = shape_numel(h.shape);
    if (h.dtype == DType::Real32) {
        std::vector<float> data(n);
        for (auto& v : data) v = std::bit_cast<float>(get_le<std::uint32_t>(is));
        return Tensor(std::move(h.shape), std::move(data));
    }
    Int8Tensor t{std::move(h.shape), std::vector<std::int8_t>(n)};
    is.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(n));
    if (!is) throw ValidationError("tensor stream truncated");
    return t;
}

Tensor read_tensor(std::istream& is) {
    auto any = read_any_tensor(is);
    if (auto* t = std::get_if<Tensor>(&any)) return std::move(*t);
    throw ValidationError("expected a real32 tensor, found int8");
}

Int8Tensor read_int8_tensor(std::istream& is) {
    auto any = read_any_tensor(is);
    if (auto* t = std::get_if<Int8Tensor>(&any)) return std::move(*t);
    throw ValidationError("expected an int8 tensor, found real32");
}

std::size_t serialized_size(const Shape& shape, DType dtype) {
    const std::size_t header = 4 + 4 + 4 + 8 * shape.size() + 1;
    return header + shape_numel(shape) * (dtype == DType::Real32 ? 4 : 1);
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw RuntimeFailure("cannot open " + path.string() + " for writing");
    write_tensor(os, t);
    if (!os) throw RuntimeFailure("write failed: " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("cannot open tensor file " + path.string());
    return read_tensor(is);
}

}  // namespace act360
