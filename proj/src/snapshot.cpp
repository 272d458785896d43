#include "gflowmask/snapshot.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <unordered_map>
#include <unordered_set>

namespace gfm {

namespace {

constexpr char kMagic[5] = {'G', 'F', 'M', 'K', '1'};

// On-disk layout is little-endian; this code assumes a little-endian host.
template <typename T>
void write_pod(std::ofstream& f, T v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& f, const std::string& path) {
    T v;
    f.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!f) throw SnapshotError("truncated snapshot: " + path);
    return v;
}

} // namespace

void save_snapshot(const std::string& path, const std::vector<Parameter*>& params) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open snapshot for writing: " + path);
    f.write(kMagic, sizeof(kMagic));
    write_pod<std::uint64_t>(f, params.size());
    for (const Parameter* p : params) {
        write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(p->name.size()));
        f.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
        write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(p->value.rank()));
        for (std::size_t e : p->value.shape) write_pod<std::uint64_t>(f, e);
        f.write(reinterpret_cast<const char*>(p->value.data.data()),
                static_cast<std::streamsize>(p->value.size() * sizeof(double)));
    }
    if (!f) throw IoError("short write on snapshot: " + path);
}

void load_snapshot(const std::string& path, const std::vector<Parameter*>& params) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open snapshot: " + path);
    char magic[5];
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw SnapshotError("bad magic in snapshot: " + path);

    std::unordered_map<std::string, Parameter*> by_name;
    for (Parameter* p : params) by_name.emplace(p->name, p);

    const auto count = read_pod<std::uint64_t>(f, path);
    if (count != params.size())
        throw SnapshotError("snapshot has " + std::to_string(count) +
                            " tensors, model expects " + std::to_string(params.size()));

    std::unordered_set<std::string> seen;
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto name_len = read_pod<std::uint32_t>(f, path);
        std::string name(name_len, '\0');
        f.read(name.data(), name_len);
        if (!f) throw SnapshotError("truncated snapshot: " + path);
        const auto rank = read_pod<std::uint32_t>(f, path);
        std::vector<std::size_t> shape(rank);
        for (auto& e : shape) e = static_cast<std::size_t>(read_pod<std::uint64_t>(f, path));

        auto it = by_name.find(name);
        if (it == by_name.end())
            throw SnapshotError("snapshot tensor '" + name + "' unknown to the model");
        if (!seen.insert(name).second)
            throw SnapshotError("duplicate tensor '" + name + "' in snapshot");
        Parameter* p = it->second;
        if (p->value.shape != shape)
            throw SnapshotError("shape mismatch for '" + name + "': snapshot " +
                                Tensor(shape).shape_str() + " vs model " +
                                p->value.shape_str());
        f.read(reinterpret_cast<char*>(p->value.data.data()),
               static_cast<std::streamsize>(p->value.size() * sizeof(double)));
        if (!f) throw SnapshotError("truncated snapshot: " + path);
    }
}

} // namespace gfm
