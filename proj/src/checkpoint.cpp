#include "chronofuse/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>

#include "chronofuse/errors.hpp"

static_assert(std::endian::native == std::endian::little, "CFCK I/O assumes a little-endian host");

namespace chronofuse {

namespace {

constexpr char kMagic[4] = {'C', 'F', 'C', 'K'};

template <typename T>
void put(std::ofstream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& is, const std::string& path) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw DataError("truncated checkpoint file: " + path);
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const std::vector<std::pair<std::string, Tensor>>& entries) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open checkpoint for writing: " + path);
    os.write(kMagic, 4);
    put<std::uint32_t>(os, kCheckpointVersion);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
    std::set<std::string> seen;
    for (const auto& [name, t] : entries) {
        if (!seen.insert(name).second) throw ContractError("duplicate checkpoint entry '" + name + "'");
        if (!t.defined()) throw ContractError("checkpoint entry '" + name + "' is undefined");
        put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
        for (const auto e : t.shape()) put<std::uint64_t>(os, static_cast<std::uint64_t>(e));
        os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    os.flush();
    if (!os) throw DataError("failed while writing checkpoint: " + path);
}

void save_checkpoint(const std::string& path, const ParamRegistry& registry) {
    save_checkpoint(path, registry.entries());
}

std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) throw DataError("not a CFCK checkpoint: " + path);
    const auto version = get<std::uint32_t>(is, path);
    if (version != kCheckpointVersion)
        throw DataError("unsupported checkpoint version " + std::to_string(version) + ": " + path);
    const auto count = get<std::uint32_t>(is, path);
    std::vector<std::pair<std::string, Tensor>> out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = get<std::uint32_t>(is, path);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw DataError("truncated checkpoint file: " + path);
        const auto rank = get<std::uint32_t>(is, path);
        if (rank > 8) throw DataError("implausible tensor rank in checkpoint: " + path);
        std::vector<std::size_t> shape(rank);
        std::size_t numel = 1;
        for (auto& e : shape) {
            const auto ext = get<std::uint64_t>(is, path);
            if (ext == 0) throw DataError("zero extent in checkpoint: " + path);
            e = static_cast<std::size_t>(ext);
            numel *= e;
        }
        std::vector<double> data(numel);
        is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(numel * sizeof(double)));
        if (!is) throw DataError("truncated checkpoint file: " + path);
        out.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(data)));
    }
    return out;
}

void load_into_registry(const std::string& path, ParamRegistry& registry) {
    auto entries = load_checkpoint(path);
    if (entries.size() != registry.size())
        throw DataError("checkpoint holds " + std::to_string(entries.size()) + " entries but model expects " +
                        std::to_string(registry.size()) + ": " + path);
    for (auto& [name, loaded] : entries) {
        if (!registry.contains(name)) throw DataError("checkpoint entry '" + name + "' unknown to model: " + path);
        Tensor& dst = registry.at(name);
        if (dst.shape() != loaded.shape())
            throw DataError("checkpoint entry '" + name + "' shape mismatch: " + path);
        std::memcpy(dst.data(), loaded.data(), dst.size() * sizeof(double));
    }
}

}  // namespace chronofuse
