#include "eraser/checkpoint.h"

#include <bit>
#include <cstring>
#include <fstream>

namespace eraser {

namespace {

void require(bool ok, const std::string & msg) {
    if (!ok) throw contract_error(msg);
}

static_assert(std::endian::native == std::endian::little,
              "blob payloads are little-endian; big-endian hosts are unsupported");

} // namespace

void write_blob(const std::string & path, const std::string & kind, nlohmann::json meta,
                const std::vector<NamedTensor> & tensors) {
    meta["version"] = 1;
    meta["kind"] = kind;
    nlohmann::json tlist = nlohmann::json::array();
    int64_t offset = 0;
    for (const auto & nt : tensors) {
        nlohmann::json e;
        e["name"] = nt.name;
        e["shape"] = nt.t.shape;
        e["offset"] = offset;
        tlist.push_back(std::move(e));
        offset += nt.t.size() * static_cast<int64_t>(sizeof(float));
    }
    meta["tensors"] = std::move(tlist);

    std::ofstream f(path, std::ios::binary);
    require(f.good(), "cannot open for write: " + path);
    std::string header = meta.dump();
    f.write(header.data(), static_cast<std::streamsize>(header.size()));
    f.put('\n');
    for (const auto & nt : tensors) {
        f.write(reinterpret_cast<const char *>(nt.t.data.data()),
                static_cast<std::streamsize>(nt.t.data.size() * sizeof(float)));
    }
    require(f.good(), "write failed: " + path);
}

Blob read_blob(const std::string & path, const std::string & expect_kind) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "cannot open: " + path);
    std::string header;
    std::getline(f, header);
    require(f.good(), "truncated header: " + path);

    Blob blob;
    try {
        blob.meta = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception & e) {
        throw contract_error("bad blob header in " + path + ": " + e.what());
    }
    require(blob.meta.value("version", 0) == 1, "unsupported blob version in " + path);
    require(blob.meta.value("kind", "") == expect_kind,
            "expected kind '" + expect_kind + "' in " + path);

    std::streampos payload_start = f.tellg();
    for (const auto & e : blob.meta.at("tensors")) {
        std::string name = e.at("name").get<std::string>();
        Shape shape = e.at("shape").get<Shape>();
        int64_t offset = e.at("offset").get<int64_t>();
        Tensor t(shape);
        f.seekg(payload_start + static_cast<std::streamoff>(offset));
        f.read(reinterpret_cast<char *>(t.data.data()),
               static_cast<std::streamsize>(t.data.size() * sizeof(float)));
        require(f.good(), "truncated payload for tensor '" + name + "' in " + path);
        t.check_finite(("tensor '" + name + "' in " + path).c_str());
        blob.tensors.emplace(std::move(name), std::move(t));
    }
    return blob;
}

void save_checkpoint(const std::string & path, const DenoiserWeights & w, const NoiseSchedule & sched,
                     int image_size) {
    std::vector<NamedTensor> tensors;
    w.visit([&](const std::string & name, const Tensor & t) { tensors.push_back({name, t}); });
    nlohmann::json meta;
    meta["schedule"] = {{"T", sched.T}, {"beta_start", sched.beta_start}, {"beta_end", sched.beta_end}};
    meta["image_size"] = image_size;
    meta["param_count"] = w.param_count();
    write_blob(path, "checkpoint", std::move(meta), tensors);
}

Checkpoint load_checkpoint(const std::string & path) {
    Blob blob = read_blob(path, "checkpoint");
    Checkpoint ck;
    const auto & sj = blob.meta.at("schedule");
    ck.sched = NoiseSchedule::linear(sj.at("T").get<int>(), sj.at("beta_start").get<double>(),
                                     sj.at("beta_end").get<double>());
    ck.image_size = blob.meta.at("image_size").get<int>();

    ck.weights = DenoiserWeights::alloc();
    size_t used = 0;
    ck.weights.visit([&](const std::string & name, Tensor & t) {
        auto it = blob.tensors.find(name);
        require(it != blob.tensors.end(), "checkpoint missing tensor '" + name + "'");
        require(shape_eq(it->second.shape, t.shape),
                "checkpoint tensor '" + name + "' has shape " + shape_str(it->second.shape) +
                    ", expected " + shape_str(t.shape));
        t.data = it->second.data;
        ++used;
    });
    require(used == blob.tensors.size(), "checkpoint has unexpected extra tensors");
    require(blob.meta.at("param_count").get<int64_t>() == ck.weights.param_count(),
            "checkpoint parameter count mismatch");
    return ck;
}

} // namespace eraser
