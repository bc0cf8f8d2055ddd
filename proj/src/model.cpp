#include "v2drop/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "v2drop/errors.hpp"
#include "v2drop/rng.hpp"

namespace v2drop {

void ModelConfig::validate() const {
    if (n_layers < 1) {
        throw ConfigError("config: n_layers must be >= 1");
    }
    if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0) {
        throw ConfigError("config: d_model must be a positive multiple of n_heads");
    }
    if (positional_mode == PositionalMode::rope && head_dim() % 2 != 0) {
        throw ConfigError("config: head_dim must be even under rope positioning");
    }
    if (d_ff < 1) {
        throw ConfigError("config: d_ff must be >= 1");
    }
    if (vocab_size < 1) {
        throw ConfigError("config: vocab_size must be >= 1");
    }
    if (rope_base <= 0.0) {
        throw ConfigError("config: rope_base must be positive");
    }
}

std::string ModelConfig::to_json() const {
    nlohmann::ordered_json j;
    j["n_layers"] = n_layers;
    j["d_model"] = d_model;
    j["n_heads"] = n_heads;
    j["d_ff"] = d_ff;
    j["vocab_size"] = vocab_size;
    j["positional_mode"] = positional_mode == PositionalMode::rope ? "rope" : "nope";
    j["rope_base"] = rope_base;
    return j.dump(2) + "\n";
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("config: invalid JSON: ") + e.what());
    }
    ModelConfig cfg;
    try {
        cfg.n_layers = j.at("n_layers").get<int>();
        cfg.d_model = j.at("d_model").get<int>();
        cfg.n_heads = j.at("n_heads").get<int>();
        cfg.d_ff = j.at("d_ff").get<int>();
        cfg.vocab_size = j.at("vocab_size").get<int>();
        const std::string mode = j.at("positional_mode").get<std::string>();
        if (mode == "rope") {
            cfg.positional_mode = PositionalMode::rope;
        } else if (mode == "nope") {
            cfg.positional_mode = PositionalMode::nope;
        } else {
            throw FormatError("config: unknown positional_mode '" + mode + "'");
        }
        cfg.rope_base = j.at("rope_base").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("config: missing or mistyped key: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

std::string attn_path_name(AttnPath path) {
    return path == AttnPath::dense ? "dense" : "streaming";
}

AttnPath attn_path_from_name(const std::string& name) {
    if (name == "dense") {
        return AttnPath::dense;
    }
    if (name == "streaming") {
        return AttnPath::streaming;
    }
    throw ConfigError("unknown attention path '" + name + "'");
}

namespace {

void fill_uniform(Tensor2D& t, Xoshiro256ss& rng, double scale) {
    for (float& v : t.data) {
        v = static_cast<float>(rng.next_symmetric() * scale);
    }
}

} // namespace

ModelWeights generate_weights(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Xoshiro256ss rng(seed);
    const double scale = 1.0 / std::sqrt(static_cast<double>(config.d_model));
    const int d = config.d_model;
    const int f = config.d_ff;

    ModelWeights w;
    w.embedding_table = Tensor2D(config.vocab_size, d);
    fill_uniform(w.embedding_table, rng, scale);
    w.layers.resize(config.n_layers);
    for (LayerWeights& layer : w.layers) {
        layer.attn_norm_gain.assign(d, 1.0f);
        layer.wq = Tensor2D(d, d);
        layer.wk = Tensor2D(d, d);
        layer.wv = Tensor2D(d, d);
        layer.wo = Tensor2D(d, d);
        fill_uniform(layer.wq, rng, scale);
        fill_uniform(layer.wk, rng, scale);
        fill_uniform(layer.wv, rng, scale);
        fill_uniform(layer.wo, rng, scale);
        layer.mlp_norm_gain.assign(d, 1.0f);
        layer.w_gate = Tensor2D(d, f);
        layer.w_up = Tensor2D(d, f);
        layer.w_down = Tensor2D(f, d);
        fill_uniform(layer.w_gate, rng, scale);
        fill_uniform(layer.w_up, rng, scale);
        fill_uniform(layer.w_down, rng, scale);
    }
    w.final_norm_gain.assign(d, 1.0f);
    w.lm_head = Tensor2D(d, config.vocab_size);
    fill_uniform(w.lm_head, rng, scale);
    return w;
}

// --- binary serialization ----------------------------------------------------

namespace {

constexpr char kMagic[4] = {'V', '2', 'D', 'M'};
constexpr std::uint32_t kVersion = 1;

void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

void put_f32(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

struct NamedTensor {
    std::string name;
    std::vector<std::uint64_t> dims;
    const float* data;
    std::size_t count;
};

void append_tensor(std::vector<NamedTensor>& out, std::string name,
                   std::vector<std::uint64_t> dims, const float* data) {
    std::size_t count = 1;
    for (std::uint64_t dim : dims) {
        count *= dim;
    }
    out.push_back({std::move(name), std::move(dims), data, count});
}

std::vector<NamedTensor> tensor_list(const ModelWeights& w) {
    std::vector<NamedTensor> list;
    append_tensor(list, "embedding_table",
                  {static_cast<std::uint64_t>(w.embedding_table.rows),
                   static_cast<std::uint64_t>(w.embedding_table.cols)},
                  w.embedding_table.data.data());
    for (std::size_t i = 0; i < w.layers.size(); ++i) {
        const LayerWeights& l = w.layers[i];
        const std::string prefix = "layers." + std::to_string(i) + ".";
        append_tensor(list, prefix + "attn_norm_gain", {l.attn_norm_gain.size()},
                      l.attn_norm_gain.data());
        for (const auto& [suffix, t] :
             {std::pair{"wq", &l.wq}, {"wk", &l.wk}, {"wv", &l.wv}, {"wo", &l.wo}}) {
            append_tensor(list, prefix + suffix,
                          {static_cast<std::uint64_t>(t->rows),
                           static_cast<std::uint64_t>(t->cols)},
                          t->data.data());
        }
        append_tensor(list, prefix + "mlp_norm_gain", {l.mlp_norm_gain.size()},
                      l.mlp_norm_gain.data());
        for (const auto& [suffix, t] :
             {std::pair{"w_gate", &l.w_gate}, {"w_up", &l.w_up}, {"w_down", &l.w_down}}) {
            append_tensor(list, prefix + suffix,
                          {static_cast<std::uint64_t>(t->rows),
                           static_cast<std::uint64_t>(t->cols)},
                          t->data.data());
        }
    }
    append_tensor(list, "final_norm_gain", {w.final_norm_gain.size()},
                  w.final_norm_gain.data());
    append_tensor(list, "lm_head",
                  {static_cast<std::uint64_t>(w.lm_head.rows),
                   static_cast<std::uint64_t>(w.lm_head.cols)},
                  w.lm_head.data.data());
    return list;
}

class Reader {
public:
    Reader(const std::string& bytes, std::string path)
        : bytes_(bytes), path_(std::move(path)) {}

    void need(std::size_t n) const {
        if (pos_ + n > bytes_.size()) {
            throw FormatError("model file '" + path_ + "': truncated payload");
        }
    }

    std::uint16_t u16() {
        need(2);
        std::uint16_t v = static_cast<std::uint8_t>(bytes_[pos_]) |
                          (static_cast<std::uint16_t>(static_cast<std::uint8_t>(bytes_[pos_ + 1]))
                           << 8);
        pos_ += 2;
        return v;
    }

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes_[pos_ + i]))
                 << (8 * i);
        }
        pos_ += 4;
        return v;
    }

    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(bytes_[pos_ + i]))
                 << (8 * i);
        }
        pos_ += 8;
        return v;
    }

    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(bytes_[pos_++]);
    }

    std::string str(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    void f32_block(float* dst, std::size_t count) {
        need(count * 4);
        for (std::size_t i = 0; i < count; ++i) {
            std::uint32_t bits = 0;
            for (int b = 0; b < 4; ++b) {
                bits |= static_cast<std::uint32_t>(
                            static_cast<std::uint8_t>(bytes_[pos_ + i * 4 + b]))
                        << (8 * b);
            }
            std::memcpy(&dst[i], &bits, 4);
        }
        pos_ += count * 4;
    }

    bool done() const { return pos_ == bytes_.size(); }

private:
    const std::string& bytes_;
    std::string path_;
    std::size_t pos_ = 0;
};

} // namespace

void save_model(const ModelWeights& weights, const ModelConfig& config,
                const std::string& path) {
    config.validate();
    std::string out;
    out.append(kMagic, 4);
    put_u32(out, kVersion);
    const std::vector<NamedTensor> list = tensor_list(weights);
    put_u32(out, static_cast<std::uint32_t>(list.size()));
    for (const NamedTensor& t : list) {
        put_u16(out, static_cast<std::uint16_t>(t.name.size()));
        out.append(t.name);
        out.push_back(static_cast<char>(t.dims.size()));
        for (std::uint64_t dim : t.dims) {
            put_u64(out, dim);
        }
        for (std::size_t i = 0; i < t.count; ++i) {
            put_f32(out, t.data[i]);
        }
    }

    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    if (!file) {
        throw FormatError("model file '" + path + "': cannot open for writing");
    }
    file.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!file) {
        throw FormatError("model file '" + path + "': write failed");
    }

    std::ofstream side(path + ".json", std::ios::binary | std::ios::trunc);
    if (!side) {
        throw FormatError("config sidecar '" + path + ".json': cannot open for writing");
    }
    side << config.to_json();
}

LoadedModel load_model(const std::string& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) {
        throw FormatError("model file '" + path + "': cannot open");
    }
    std::ostringstream buf;
    buf << file.rdbuf();
    const std::string bytes = buf.str();

    std::ifstream side(path + ".json", std::ios::binary);
    if (!side) {
        throw FormatError("config sidecar '" + path + ".json': cannot open");
    }
    std::ostringstream side_buf;
    side_buf << side.rdbuf();

    LoadedModel loaded;
    loaded.config = ModelConfig::from_json(side_buf.str());
    const ModelConfig& cfg = loaded.config;

    Reader r(bytes, path);
    if (r.str(4) != std::string(kMagic, 4)) {
        throw FormatError("model file '" + path + "': bad magic");
    }
    const std::uint32_t version = r.u32();
    if (version != kVersion) {
        throw FormatError("model file '" + path + "': unsupported version " +
                          std::to_string(version));
    }
    const std::uint32_t count = r.u32();
    if (count == 0) {
        throw FormatError("model file '" + path + "': empty model");
    }

    // Build the expected skeleton from the sidecar config, then require the
    // file to contain exactly those tensors.
    ModelWeights w;
    w.embedding_table = Tensor2D(cfg.vocab_size, cfg.d_model);
    w.layers.resize(cfg.n_layers);
    for (LayerWeights& l : w.layers) {
        l.attn_norm_gain.assign(cfg.d_model, 0.0f);
        l.wq = Tensor2D(cfg.d_model, cfg.d_model);
        l.wk = Tensor2D(cfg.d_model, cfg.d_model);
        l.wv = Tensor2D(cfg.d_model, cfg.d_model);
        l.wo = Tensor2D(cfg.d_model, cfg.d_model);
        l.mlp_norm_gain.assign(cfg.d_model, 0.0f);
        l.w_gate = Tensor2D(cfg.d_model, cfg.d_ff);
        l.w_up = Tensor2D(cfg.d_model, cfg.d_ff);
        l.w_down = Tensor2D(cfg.d_ff, cfg.d_model);
    }
    w.final_norm_gain.assign(cfg.d_model, 0.0f);
    w.lm_head = Tensor2D(cfg.d_model, cfg.vocab_size);

    struct Slot {
        std::vector<std::uint64_t> dims;
        float* data;
        bool seen = false;
    };
    std::vector<std::pair<std::string, Slot>> slots;
    for (const NamedTensor& t : tensor_list(w)) {
        slots.push_back({t.name, {t.dims, const_cast<float*>(t.data), false}});
    }
    auto find_slot = [&](const std::string& name) -> Slot* {
        for (auto& [slot_name, slot] : slots) {
            if (slot_name == name) {
                return &slot;
            }
        }
        return nullptr;
    };

    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t name_len = r.u16();
        const std::string name = r.str(name_len);
        const std::uint8_t rank = r.u8();
        std::vector<std::uint64_t> dims(rank);
        std::size_t elems = 1;
        for (std::uint8_t d = 0; d < rank; ++d) {
            dims[d] = r.u64();
            elems *= dims[d];
        }
        Slot* slot = find_slot(name);
        if (slot == nullptr) {
            throw FormatError("model file '" + path + "': unexpected tensor '" + name + "'");
        }
        if (slot->seen) {
            throw FormatError("model file '" + path + "': duplicate tensor '" + name + "'");
        }
        if (dims != slot->dims) {
            throw FormatError("model file '" + path + "': tensor '" + name +
                              "' shape disagrees with config sidecar");
        }
        r.f32_block(slot->data, elems);
        slot->seen = true;
    }
    if (!r.done()) {
        throw FormatError("model file '" + path + "': trailing bytes after last tensor");
    }
    for (const auto& [name, slot] : slots) {
        if (!slot.seen) {
            throw FormatError("model file '" + path + "': missing tensor '" + name + "'");
        }
    }
    for (const NamedTensor& t : tensor_list(w)) {
        for (std::size_t i = 0; i < t.count; ++i) {
            if (!std::isfinite(t.data[i])) {
                throw FormatError("model file '" + path + "': non-finite value in '" +
                                  t.name + "'");
            }
        }
    }
    loaded.weights = std::move(w);
    return loaded;
}

} // namespace v2drop
