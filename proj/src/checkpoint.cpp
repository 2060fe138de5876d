#include "qdiff/checkpoint.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace qdiff {

using nlohmann::json;

namespace {
constexpr char kMagic[8] = {'Q', 'D', 'I', 'F', 'F', 'C', 'K', '1'};

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

void put_f64(std::vector<std::uint8_t>& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }

json quantizer_json(const SiteCalibration& s) {
    return {{"site", s.site},
            {"layer", s.layer},
            {"role", s.role == TensorRole::weight ? "weight" : "activation"},
            {"kind", to_string(s.kind)},
            {"bits", s.bits},
            {"mode", to_string(s.mode)},
            {"e", s.params.format.exponent_bits},
            {"m", s.params.format.mantissa_bits},
            {"signed", s.params.format.is_signed},
            {"maxval", s.params.maxval},
            {"zero_point", s.params.zero_point},
            {"maxval0", s.maxval0},
            {"mse", s.mse},
            {"degenerate", s.degenerate}};
}

SiteCalibration quantizer_from_json(const json& j) {
    SiteCalibration s;
    s.site = j.at("site").get<std::string>();
    s.layer = j.at("layer").get<std::size_t>();
    s.role = j.at("role").get<std::string>() == "weight" ? TensorRole::weight : TensorRole::activation;
    s.kind = j.at("kind").get<std::string>() == "AAL" ? LayerKind::aal : LayerKind::nal;
    s.bits = j.at("bits").get<int>();
    const auto mode = j.at("mode").get<std::string>();
    s.mode = mode == "signed" ? QuantMode::signed_fp : mode == "unsigned" ? QuantMode::unsigned_fp : QuantMode::passthrough;
    s.params.format = {j.at("e").get<int>(), j.at("m").get<int>(), j.at("signed").get<bool>()};
    s.params.maxval = j.at("maxval").get<double>();
    s.params.zero_point = j.at("zero_point").get<double>();
    s.maxval0 = j.at("maxval0").get<double>();
    s.mse = j.at("mse").get<double>();
    s.degenerate = j.at("degenerate").get<bool>();
    if (s.mode != QuantMode::passthrough) s.params.validate();
    return s;
}

struct TensorRef {
    std::string name;
    Tensor* tensor;
};
}  // namespace

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt) {
    ckpt.model.validate();
    json manifest;
    manifest["version"] = kCheckpointVersion;
    json layers = json::array();
    for (const auto& l : ckpt.model.layers)
        layers.push_back({{"in", l.in_dim()},
                          {"out", l.out_dim()},
                          {"activation", l.activation == Activation::silu ? "silu" : "none"},
                          {"time_projection", l.has_time_projection()}});
    manifest["architecture"] = {
        {"input_dim", ckpt.model.input_dim}, {"time_embed_dim", ckpt.model.time_embed_dim}, {"layers", layers}};

    std::vector<std::pair<std::string, const Tensor*>> tensors;
    ckpt.model.for_each_param([&](const std::string& n, const Tensor& t) { tensors.emplace_back("model." + n, &t); });
    if (ckpt.quantizers) {
        json q = json::array();
        for (const auto& s : *ckpt.quantizers) q.push_back(quantizer_json(s));
        manifest["quantizers"] = q;
    }
    if (ckpt.hub) {
        manifest["adapters"] = {{"rank", ckpt.hub->rank},
                                {"hub_size", ckpt.hub->hub_size},
                                {"alpha", ckpt.hub->alpha},
                                {"layers", ckpt.hub->layers}};
        ckpt.hub->for_each_param([&](const std::string& n, const Tensor& t) { tensors.emplace_back(n, &t); });
    }
    if (ckpt.router) {
        manifest["router"] = {
            {"embed_dim", ckpt.router->embed_dim}, {"groups", ckpt.router->groups}, {"hub_size", ckpt.router->hub_size}};
        ckpt.router->for_each_param([&](const std::string& n, const Tensor& t) { tensors.emplace_back(n, &t); });
    }
    if (ckpt.strategy) manifest["strategy"] = to_string(*ckpt.strategy);

    json index = json::array();
    std::size_t offset = 0;
    for (const auto& [name, t] : tensors) {
        const std::size_t len = t->size() * sizeof(double);
        index.push_back({{"name", name}, {"shape", t->shape()}, {"offset", offset}, {"length", len}});
        offset += len;
    }
    manifest["tensors"] = index;

    const std::string text = manifest.dump();
    std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
    put_u64(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    out.reserve(out.size() + offset);
    for (const auto& [name, t] : tensors)
        for (double v : t->raw()) put_f64(out, v);
    return out;
}

Checkpoint deserialize(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0)
        throw std::runtime_error("not a checkpoint (bad magic)");
    const std::uint64_t mlen = get_u64(bytes.data() + 8);
    if (mlen > bytes.size() - 16) throw std::runtime_error("checkpoint manifest truncated");
    const json manifest = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(mlen));
    if (manifest.at("version").get<std::string>() != kCheckpointVersion)
        throw std::runtime_error("unsupported checkpoint version " + manifest.at("version").get<std::string>());
    const std::size_t blob_start = 16 + mlen;
    const std::size_t blob_size = bytes.size() - blob_start;

    Checkpoint ckpt;
    const auto& arch = manifest.at("architecture");
    ckpt.model.input_dim = arch.at("input_dim").get<std::size_t>();
    ckpt.model.time_embed_dim = arch.at("time_embed_dim").get<std::size_t>();
    for (const auto& l : arch.at("layers")) {
        LinearLayer layer;
        const auto in = l.at("in").get<std::size_t>(), out = l.at("out").get<std::size_t>();
        layer.weight = Tensor({out, in});
        layer.bias = Tensor({out});
        layer.activation = l.at("activation").get<std::string>() == "silu" ? Activation::silu : Activation::none;
        if (l.at("time_projection").get<bool>()) {
            layer.time_weight = Tensor({out, ckpt.model.time_embed_dim});
            layer.time_bias = Tensor({out});
        }
        ckpt.model.layers.push_back(std::move(layer));
    }
    if (manifest.contains("quantizers")) {
        ckpt.quantizers.emplace();
        for (const auto& q : manifest["quantizers"]) ckpt.quantizers->push_back(quantizer_from_json(q));
    }
    if (manifest.contains("adapters")) {
        const auto& a = manifest["adapters"];
        LoraHub hub;
        hub.rank = a.at("rank").get<std::size_t>();
        hub.hub_size = a.at("hub_size").get<std::size_t>();
        hub.alpha = a.at("alpha").get<double>();
        hub.layers = a.at("layers").get<std::vector<std::size_t>>();
        for (std::size_t layer : hub.layers) {
            if (layer >= ckpt.model.layers.size()) throw std::runtime_error("adapter on missing layer");
            const auto& w = ckpt.model.layers[layer].weight;
            hub.adapters.emplace_back(hub.hub_size,
                                      LoraAdapter{Tensor({w.rows(), hub.rank}), Tensor({hub.rank, w.cols()})});
        }
        ckpt.hub = std::move(hub);
    }
    if (manifest.contains("router")) {
        const auto& r = manifest["router"];
        ckpt.router = Router::zeros(r.at("embed_dim").get<std::size_t>(), r.at("groups").get<std::size_t>(),
                                    r.at("hub_size").get<std::size_t>());
    }
    if (manifest.contains("strategy")) ckpt.strategy = parse_strategy(manifest["strategy"].get<std::string>());

    std::vector<TensorRef> slots;
    ckpt.model.for_each_param([&](const std::string& n, Tensor& t) { slots.push_back({"model." + n, &t}); });
    if (ckpt.hub) ckpt.hub->for_each_param([&](const std::string& n, Tensor& t) { slots.push_back({n, &t}); });
    if (ckpt.router) ckpt.router->for_each_param([&](const std::string& n, Tensor& t) { slots.push_back({n, &t}); });

    const auto& index = manifest.at("tensors");
    if (index.size() != slots.size()) throw std::runtime_error("checkpoint tensor index does not match architecture");
    std::size_t expected = 0;
    for (std::size_t i = 0; i < slots.size(); ++i) {
        const auto& e = index[i];
        if (e.at("name").get<std::string>() != slots[i].name)
            throw std::runtime_error("checkpoint tensor order mismatch at " + slots[i].name);
        const auto shape = e.at("shape").get<std::vector<std::size_t>>();
        if (shape != slots[i].tensor->shape()) throw std::runtime_error("checkpoint shape mismatch for " + slots[i].name);
        const auto off = e.at("offset").get<std::size_t>(), len = e.at("length").get<std::size_t>();
        if (off != expected || len != slots[i].tensor->size() * sizeof(double))
            throw std::runtime_error("checkpoint tensor " + slots[i].name + " does not tile the blob");
        const std::uint8_t* p = bytes.data() + blob_start + off;
        for (std::size_t k = 0; k < slots[i].tensor->size(); ++k)
            (*slots[i].tensor)[k] = std::bit_cast<double>(get_u64(p + 8 * k));
        expected += len;
    }
    if (expected != blob_size) throw std::runtime_error("checkpoint blob has trailing or missing bytes");
    ckpt.model.validate();
    return ckpt;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) { write_file(path, serialize(ckpt)); }

Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize(read_file(path)); }

}  // namespace qdiff
