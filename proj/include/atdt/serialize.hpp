#ifndef ATDT_SERIALIZE_HPP_
#define ATDT_SERIALIZE_HPP_

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "atdt/tensor.hpp"

// "TNSR v1" binary tensor format:
//   magic "TNSR", u8 version=1, u8 dtype (0=f32, 1=f64), u8 rank, u8 padding,
//   rank x u32 little-endian extents, row-major little-endian payload.

namespace atdt {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

namespace detail {
template <class S>
constexpr std::uint8_t tnsr_dtype() {
    static_assert(sizeof(S) == 4 || sizeof(S) == 8, "TNSR supports f32/f64 only");
    return sizeof(S) == 4 ? 0 : 1;
}
}  // namespace detail

template <class S>
void write_tnsr(std::ostream& os, const Tensor<S>& t) {
    check(t.rank() <= 255, "tnsr: rank too large");
    os.write("TNSR", 4);
    std::uint8_t header[4] = {1, detail::tnsr_dtype<S>(), static_cast<std::uint8_t>(t.rank()), 0};
    os.write(reinterpret_cast<const char*>(header), 4);
    for (int e : t.shape) {
        std::uint32_t u = static_cast<std::uint32_t>(e);
        os.write(reinterpret_cast<const char*>(&u), 4);
    }
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(S)));
    check(os.good(), "tnsr: write failed");
}

template <class S>
Tensor<S> read_tnsr(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    check(is.good() && std::memcmp(magic, "TNSR", 4) == 0, "tnsr: bad magic");
    std::uint8_t header[4];
    is.read(reinterpret_cast<char*>(header), 4);
    check(is.good() && header[0] == 1, "tnsr: unsupported version");
    check(header[1] == detail::tnsr_dtype<S>(), "tnsr: dtype mismatch");
    const int rank = header[2];
    check(rank <= 4, "tnsr: rank > 4");
    std::vector<int> shape(rank);
    for (int i = 0; i < rank; ++i) {
        std::uint32_t u;
        is.read(reinterpret_cast<char*>(&u), 4);
        shape[i] = static_cast<int>(u);
    }
    Tensor<S> t(shape);
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(S)));
    check(is.good(), "tnsr: truncated payload");
    return t;
}

template <class S>
void save_tnsr(const std::string& path, const Tensor<S>& t) {
    std::ofstream os(path, std::ios::binary);
    check(os.is_open(), "tnsr: cannot open for write: " + path);
    write_tnsr(os, t);
}

template <class S>
Tensor<S> load_tnsr(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    check(is.is_open(), "tnsr: cannot open for read: " + path);
    return read_tnsr<S>(is);
}

}  // namespace atdt

#endif  // ATDT_SERIALIZE_HPP_
