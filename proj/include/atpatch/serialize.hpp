#pragma once

// Binary tensor format used by every checkpoint file:
//   "ATPT" | u32 version | u32 rank | rank x u64 dims | numel x f64 data
// All integers and floats little-endian.

#include <atpatch/errors.hpp>
#include <atpatch/tensor.hpp>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <string>

namespace atpatch {

inline constexpr std::array<char, 4> kTensorMagic{'A', 'T', 'P', 'T'};
inline constexpr std::uint32_t kTensorFormatVersion = 1;

namespace detail {

template <typename T>
void write_le(std::ostream& os, T value) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    U bits = std::bit_cast<U>(value);
    std::array<char, sizeof(U)> buf{};
    for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
    os.write(buf.data(), buf.size());
}

template <typename T>
T read_le(std::istream& is) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    std::array<unsigned char, sizeof(U)> buf{};
    is.read(reinterpret_cast<char*>(buf.data()), buf.size());
    if (!is) throw IoError("truncated ATPT stream");
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<U>(buf[i]) << (8 * i);
    return std::bit_cast<T>(bits);
}

} // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
    os.write(kTensorMagic.data(), kTensorMagic.size());
    detail::write_le<std::uint32_t>(os, kTensorFormatVersion);
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::write_le<std::uint64_t>(os, d);
    for (double v : t.data()) detail::write_le<double>(os, v);
    if (!os) throw IoError("failed writing ATPT stream");
}

inline Tensor read_tensor(std::istream& is) {
    std::array<char, 4> magic{};
    is.read(magic.data(), magic.size());
    if (!is || magic != kTensorMagic) throw IoError("bad ATPT magic");
    const auto version = detail::read_le<std::uint32_t>(is);
    if (version != kTensorFormatVersion) {
        throw IoError("unsupported ATPT version " + std::to_string(version));
    }
    const auto rank = detail::read_le<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(detail::read_le<std::uint64_t>(is));
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) v = detail::read_le<double>(is);
    return Tensor(std::move(shape), std::move(data));
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    write_tensor(os, t);
}

inline Tensor load_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    return read_tensor(is);
}

/// Writes each named tensor as `<dir>/<name>.atpt`.
inline void save_tensor_dir(const std::filesystem::path& dir, const std::map<std::string, Tensor>& tensors) {
    std::filesystem::create_directories(dir);
    for (const auto& [name, t] : tensors) save_tensor(dir / (name + ".atpt"), t);
}

inline std::map<std::string, Tensor> load_tensor_dir(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
    std::map<std::string, Tensor> out;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.path().extension() == ".atpt") out.emplace(entry.path().stem().string(), load_tensor(entry.path()));
    }
    return out;
}

} // namespace atpatch
