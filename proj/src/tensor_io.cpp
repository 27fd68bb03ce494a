#include "tsrep/tensor_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "tsrep/errors.hpp"

namespace tsrep {

namespace {

template <typename T>
void put_le(std::ostream& os, T value) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
    unsigned char bytes[sizeof(T)];
    if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw IoError("TSB1: truncated stream");
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
}

}  // namespace

void write_tsb(std::ostream& os, const Tensor& t) {
    if (t.rank() > 255) throw ContractError("TSB1: rank exceeds 255");
    os.write(kTsbMagic, 4);
    put_le<std::uint8_t>(os, kDtypeF32);
    put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
    for (auto e : t.shape()) put_le<std::uint64_t>(os, e);
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
    } else {
        for (float v : t.data()) put_le<float>(os, v);
    }
    if (!os) throw IoError("TSB1: write failed");
}

Tensor read_tsb(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kTsbMagic, 4) != 0) throw IoError("TSB1: bad magic");
    const auto dtype = get_le<std::uint8_t>(is);
    if (dtype != kDtypeF32) throw IoError("TSB1: unsupported dtype code " + std::to_string(dtype));
    const auto rank = get_le<std::uint8_t>(is);
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::size_t>(get_le<std::uint64_t>(is));
    std::vector<float> data(shape_numel(shape));
    if constexpr (std::endian::native == std::endian::little) {
        if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float))))
            throw IoError("TSB1: truncated payload");
    } else {
        for (auto& v : data) v = get_le<float>(is);
    }
    return Tensor::from_data(std::move(shape), std::move(data));
}

void save_tsb(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    write_tsb(os, t);
}

Tensor load_tsb(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    return read_tsb(is);
}

std::string tsb_bytes(const Tensor& t) {
    std::ostringstream os(std::ios::binary);
    write_tsb(os, t);
    return os.str();
}

}  // namespace tsrep
