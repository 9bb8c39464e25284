#include "sheetcoder/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace sheetcoder {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'S', 'H', 'C', 'K', 'P', 'T', '0', '1'};

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_values(std::ostream& os, const ad::DenseArray& a) {
    os.write(reinterpret_cast<const char*>(a.data()), static_cast<std::streamsize>(a.size() * sizeof(double)));
}

class Reader {
public:
    Reader(std::istream& is, std::string where) : is_(is), where_(std::move(where)) {}

    template <typename T>
    T get(const char* what) {
        T v{};
        is_.read(reinterpret_cast<char*>(&v), sizeof v);
        if (!is_) fail(std::string("truncated while reading ") + what);
        return v;
    }

    std::string bytes(size_t n, const char* what) {
        std::string s(n, '\0');
        is_.read(s.data(), static_cast<std::streamsize>(n));
        if (!is_) fail(std::string("truncated while reading ") + what);
        return s;
    }

    void values(ad::DenseArray& a, const std::string& name) {
        is_.read(reinterpret_cast<char*>(a.data()), static_cast<std::streamsize>(a.size() * sizeof(double)));
        if (!is_) fail("truncated in values of '" + name + "'");
    }

    [[noreturn]] void fail(const std::string& msg) const { throw CheckpointError(where_ + ": " + msg); }

private:
    std::istream& is_;
    std::string where_;
};

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const nlohmann::json& meta, const ad::ParamStore& params,
                      bool include_optimizer_state) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw CheckpointError("cannot write checkpoint " + tmp.string());
        os.write(kMagic, sizeof kMagic);
        put<uint32_t>(os, kCheckpointVersion);
        nlohmann::json header = meta;
        header["optimizer_state"] = include_optimizer_state;
        std::string text = header.dump();
        put<uint64_t>(os, text.size());
        os.write(text.data(), static_cast<std::streamsize>(text.size()));
        put<uint64_t>(os, params.all().size());
        for (const auto& [name, p] : params.all()) {
            put<uint32_t>(os, static_cast<uint32_t>(name.size()));
            os.write(name.data(), static_cast<std::streamsize>(name.size()));
            put<uint32_t>(os, static_cast<uint32_t>(p.value.shape().size()));
            for (auto d : p.value.shape()) put<uint64_t>(os, d);
            put_values(os, p.value);
            if (include_optimizer_state) {
                put_values(os, p.m);
                put_values(os, p.v);
            }
        }
        if (include_optimizer_state) put<int64_t>(os, params.step());
        if (!os) throw CheckpointError("failed writing checkpoint " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
    Reader r(is, path.string());
    if (r.bytes(sizeof kMagic, "magic") != std::string(kMagic, sizeof kMagic)) r.fail("not a checkpoint file");
    auto version = r.get<uint32_t>("version");
    if (version != kCheckpointVersion) r.fail("unsupported format version " + std::to_string(version));
    auto meta_len = r.get<uint64_t>("header length");
    if (meta_len > (uint64_t{1} << 32)) r.fail("implausible header length");
    CheckpointData out;
    try {
        out.meta = nlohmann::json::parse(r.bytes(meta_len, "header"));
    } catch (const nlohmann::json::exception& e) {
        r.fail(std::string("corrupt header: ") + e.what());
    }
    out.has_optimizer_state = out.meta.value("optimizer_state", false);
    out.meta.erase("optimizer_state");
    auto count = r.get<uint64_t>("parameter count");
    for (uint64_t i = 0; i < count; ++i) {
        auto name_len = r.get<uint32_t>("name length");
        if (name_len > 4096) r.fail("implausible parameter name length");
        auto name = r.bytes(name_len, "parameter name");
        auto rank = r.get<uint32_t>("rank");
        if (rank > 8) r.fail("implausible rank for '" + name + "'");
        std::vector<size_t> shape;
        size_t n = 1;
        for (uint32_t k = 0; k < rank; ++k) {
            shape.push_back(r.get<uint64_t>("dimension"));
            n *= shape.back();
        }
        if (n > (size_t{1} << 31)) r.fail("implausible size for '" + name + "'");
        if (out.params.contains(name)) r.fail("duplicate parameter '" + name + "'");
        auto& value = out.params.add(name, ad::DenseArray(shape));
        r.values(value, name);
        if (out.has_optimizer_state) {
            auto& p = out.params.param(name);
            r.values(p.m, name);
            r.values(p.v, name);
        }
    }
    if (out.has_optimizer_state) out.params.set_step(r.get<int64_t>("optimizer step"));
    return out;
}

}  // namespace sheetcoder
