#include "cgce/store.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include <unistd.h>

#include "cgce/errors.hpp"
#include "json.hpp"

namespace cgce {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr std::array<std::uint8_t, 4> kTensorMagic = {'C', 'G', 'T', '1'};
constexpr std::array<std::uint8_t, 4> kCheckpointMagic = {'C', 'G', 'C', 'K'};
constexpr std::uint8_t kDtypeF32 = 1;

class ByteWriter {
public:
    void bytes(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }
    void u8(std::uint8_t v) { out_.push_back(v); }
    void u16(std::uint16_t v) { little_endian(v, 2); }
    void u32(std::uint32_t v) { little_endian(v, 4); }
    void u64(std::uint64_t v) { little_endian(v, 8); }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void text(const std::string& s) { out_.insert(out_.end(), s.begin(), s.end()); }

    std::vector<std::uint8_t> take() { return std::move(out_); }

private:
    void little_endian(std::uint64_t v, int width) {
        for (int i = 0; i < width; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }

    std::vector<std::uint8_t> out_;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

    std::size_t offset() const noexcept { return pos_; }
    std::size_t remaining() const noexcept { return data_.size() - pos_; }

    std::span<const std::uint8_t> bytes(std::size_t n, const char* what) {
        need(n, what);
        auto s = data_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    std::uint8_t u8(const char* what) { return bytes(1, what)[0]; }
    std::uint16_t u16(const char* what) { return static_cast<std::uint16_t>(little_endian(2, what)); }
    std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(little_endian(4, what)); }
    std::uint64_t u64(const char* what) { return little_endian(8, what); }

private:
    void need(std::size_t n, const char* what) const {
        if (remaining() < n) {
            throw FormatError(std::string("truncated ") + what + ": need " + std::to_string(n) + " bytes, " +
                                  std::to_string(remaining()) + " left",
                              pos_);
        }
    }
    std::uint64_t little_endian(int width, const char* what) {
        const auto b = bytes(static_cast<std::size_t>(width), what);
        std::uint64_t v = 0;
        for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(b[static_cast<std::size_t>(i)]) << (8 * i);
        return v;
    }

    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
};

// Tensor record without magic: dtype, rank, reserved, dims, payload.
void put_record(ByteWriter& w, const Tensor& t) {
    if (t.shape.size() > std::numeric_limits<std::uint8_t>::max()) throw ShapeError("tensor rank exceeds 255");
    if (t.values.size() != t.element_count()) {
        throw ShapeError("tensor holds " + std::to_string(t.values.size()) + " values but its shape needs " +
                         std::to_string(t.element_count()));
    }
    w.u8(kDtypeF32);
    w.u8(static_cast<std::uint8_t>(t.shape.size()));
    w.u8(0);
    w.u8(0);
    for (auto dim : t.shape) w.u64(dim);
    for (double v : t.values) w.f32(static_cast<float>(v));
}

Tensor get_record(ByteReader& r) {
    const std::size_t dtype_at = r.offset();
    const std::uint8_t dtype = r.u8("dtype");
    if (dtype != kDtypeF32) throw FormatError("unsupported dtype code " + std::to_string(dtype), dtype_at);
    const std::uint8_t rank = r.u8("rank");
    const std::size_t reserved_at = r.offset();
    const auto reserved = r.bytes(2, "reserved bytes");
    if (reserved[0] != 0 || reserved[1] != 0) throw FormatError("reserved bytes are not zero", reserved_at);

    Tensor t;
    t.shape.reserve(rank);
    std::uint64_t count = 1;
    for (std::uint8_t i = 0; i < rank; ++i) {
        const std::size_t dim_at = r.offset();
        const std::uint64_t dim = r.u64("dimension");
        if (dim != 0 && count > std::numeric_limits<std::uint64_t>::max() / 4 / dim) {
            throw FormatError("dimensions overflow", dim_at);
        }
        count *= dim;
        t.shape.push_back(dim);
    }
    if (count > r.remaining() / 4) {
        throw FormatError("truncated payload: need " + std::to_string(count * 4) + " bytes, " +
                              std::to_string(r.remaining()) + " left",
                          r.offset());
    }
    const std::size_t payload_at = r.offset();
    const auto payload = r.bytes(static_cast<std::size_t>(count) * 4, "payload");
    t.values.resize(static_cast<std::size_t>(count));
    for (std::size_t i = 0; i < t.values.size(); ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(payload[i * 4 + b]) << (8 * b);
        const float v = std::bit_cast<float>(bits);
        if (!std::isfinite(v)) throw FormatError("non-finite value in payload", payload_at + i * 4);
        t.values[i] = static_cast<double>(v);
    }
    return t;
}

void expect_magic(ByteReader& r, const std::array<std::uint8_t, 4>& magic, const char* kind) {
    const auto got = r.bytes(4, "magic");
    if (!std::equal(got.begin(), got.end(), magic.begin())) {
        throw FormatError(std::string("bad magic for ") + kind + " file", 0);
    }
}

Tensor bias_tensor(const Matrix& m) { return {{m.cols()}, std::vector<double>(m.values().begin(), m.values().end())}; }

fs::path resolve(const fs::path& base_dir, const std::string& rel, const std::optional<fs::path>& fallback) {
    const fs::path p(rel);
    if (p.is_absolute()) return p;
    const fs::path primary = base_dir / p;
    if (fs::exists(primary) || !fallback) return primary;
    return *fallback / p;
}

}  // namespace

std::uint64_t Tensor::element_count() const {
    std::uint64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

Tensor to_tensor(const Matrix& m) {
    return {{m.rows(), m.cols()}, std::vector<double>(m.values().begin(), m.values().end())};
}

Matrix to_matrix(const Tensor& t) {
    if (t.shape.size() == 2) return Matrix(t.shape[0], t.shape[1], t.values);
    if (t.shape.size() == 1) return Matrix(1, t.shape[0], t.values);
    throw ShapeError("expected a rank-1 or rank-2 tensor, got rank " + std::to_string(t.shape.size()));
}

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
    ByteWriter w;
    w.bytes(kTensorMagic);
    put_record(w, t);
    return w.take();
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    expect_magic(r, kTensorMagic, "tensor");
    Tensor t = get_record(r);
    if (r.remaining() != 0) throw FormatError("trailing bytes after tensor payload", r.offset());
    return t;
}

void write_tensor(const Tensor& t, const fs::path& path) { write_file_atomic(path, encode_tensor(t)); }

void write_tensor(const Matrix& m, const fs::path& path) { write_tensor(to_tensor(m), path); }

Tensor read_tensor(const fs::path& path) { return decode_tensor(read_file(path)); }

Matrix read_matrix(const fs::path& path) {
    Tensor t = read_tensor(path);
    if (t.shape.size() != 2) {
        throw ShapeError(path.string() + ": expected a rank-2 tensor, got rank " + std::to_string(t.shape.size()));
    }
    return to_matrix(t);
}

std::vector<std::uint8_t> encode_checkpoint(const ClassifierParams& params) {
    params.arch.validate();
    const json header = {{"d", params.arch.d},
                         {"h", params.arch.h},
                         {"heads", params.arch.heads},
                         {"concept_name", params.concept_name},
                         {"default_tau", params.default_tau}};
    const std::string header_text = header.dump();

    ByteWriter w;
    w.bytes(kCheckpointMagic);
    w.u32(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(header_text.size()));
    w.text(header_text);
    w.u32(static_cast<std::uint32_t>(ParamTensors::kCount));
    const auto tensors = params.weights.list();
    for (std::size_t i = 0; i < ParamTensors::kCount; ++i) {
        const std::string name(ParamTensors::kNames[i]);
        w.u16(static_cast<std::uint16_t>(name.size()));
        w.text(name);
        const Matrix& m = *tensors[i];
        put_record(w, m.rows() == 1 && name.ends_with(".bias") ? bias_tensor(m) : to_tensor(m));
    }
    return w.take();
}

ClassifierParams decode_checkpoint(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    expect_magic(r, kCheckpointMagic, "checkpoint");
    const std::uint32_t version = r.u32("version");
    if (version != kCheckpointVersion) throw UnsupportedVersionError(version, kCheckpointVersion);

    const std::uint32_t header_len = r.u32("header length");
    const std::size_t header_at = r.offset();
    const auto header_bytes = r.bytes(header_len, "header");
    json header;
    try {
        header = json::parse(header_bytes.begin(), header_bytes.end());
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what(), header_at);
    }

    ClassifierParams params;
    try {
        params.arch.d = header.at("d").get<std::size_t>();
        params.arch.h = header.at("h").get<std::size_t>();
        params.arch.heads = header.at("heads").get<std::size_t>();
        params.concept_name = header.at("concept_name").get<std::string>();
        params.default_tau = header.at("default_tau").get<double>();
    } catch (const json::exception& e) {
        throw IntegrityError(std::string("checkpoint header is incomplete: ") + e.what());
    }
    try {
        params.arch.validate();
    } catch (const ConfigError& e) {
        throw IntegrityError(std::string("checkpoint header describes an invalid architecture: ") + e.what());
    }
    params.weights = ParamTensors::zeros(params.arch);
    auto slots = params.weights.list();
    std::array<bool, ParamTensors::kCount> seen{};

    const std::uint32_t count = r.u32("tensor count");
    for (std::uint32_t n = 0; n < count; ++n) {
        const std::uint16_t name_len = r.u16("tensor name length");
        const auto name_bytes = r.bytes(name_len, "tensor name");
        const std::string name(name_bytes.begin(), name_bytes.end());
        const Tensor t = get_record(r);

        std::size_t slot = ParamTensors::kCount;
        for (std::size_t i = 0; i < ParamTensors::kCount; ++i) {
            if (ParamTensors::kNames[i] == name) slot = i;
        }
        if (slot == ParamTensors::kCount) throw IntegrityError("unknown tensor '" + name + "' in checkpoint");
        if (seen[slot]) throw IntegrityError("tensor '" + name + "' appears twice in checkpoint");
        seen[slot] = true;

        Matrix& dst = *slots[slot];
        const bool is_bias = name.ends_with(".bias");
        const bool shape_ok = is_bias ? (t.shape.size() == 1 && t.shape[0] == dst.cols())
                                      : (t.shape.size() == 2 && t.shape[0] == dst.rows() && t.shape[1] == dst.cols());
        if (!shape_ok) {
            std::string got;
            for (auto d : t.shape) got += (got.empty() ? "" : "x") + std::to_string(d);
            throw IntegrityError("tensor '" + name + "' has shape [" + got + "], header implies " +
                                 dst.shape_string());
        }
        dst = to_matrix(t);
    }
    for (std::size_t i = 0; i < ParamTensors::kCount; ++i) {
        if (!seen[i]) throw IntegrityError("checkpoint is missing tensor '" + std::string(ParamTensors::kNames[i]) + "'");
    }
    if (r.remaining() != 0) throw FormatError("trailing bytes after last tensor", r.offset());
    return params;
}

void write_checkpoint(const ClassifierParams& params, const fs::path& path) {
    write_file_atomic(path, encode_checkpoint(params));
}

ClassifierParams read_checkpoint(const fs::path& path) { return decode_checkpoint(read_file(path)); }

void write_manifest(std::span<const ManifestEntry> entries, const fs::path& path) {
    std::string text;
    for (const auto& e : entries) {
        json line = {{"id", e.id}, {"text", e.text}, {"label", e.label}, {"embedding", e.embedding},
                     {"concept", e.concept_name}};
        if (e.pair_id) line["pair_id"] = *e.pair_id;
        text += line.dump();
        text += '\n';
    }
    write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::vector<LabeledExample> read_manifest(const fs::path& path, const std::optional<fs::path>& fallback_dir) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest " + path.string());
    const fs::path base = path.parent_path();

    std::vector<LabeledExample> out;
    std::optional<std::size_t> expected_d;
    std::size_t first_dim_line = 0;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = path.string() + ":" + std::to_string(line_no);
        json obj;
        try {
            obj = json::parse(line);
        } catch (const json::exception& e) {
            throw ValidationError(where + ": invalid JSON (" + e.what() + ")");
        }
        if (!obj.is_object()) throw ValidationError(where + ": expected a JSON object");
        if (obj.contains("encoder_id") && !obj.contains("label")) {
            if (obj.contains("d")) {
                expected_d = obj["d"].get<std::size_t>();
                first_dim_line = line_no;
            }
            continue;
        }

        try {
            const json& label = obj.at("label");
            if (!label.is_number_integer() || (label.get<long long>() != 0 && label.get<long long>() != 1)) {
                throw ValidationError(where + ": label must be 0 or 1, got " + label.dump());
            }
            const std::string rel = obj.at("embedding").get<std::string>();
            const fs::path tensor_path = resolve(base, rel, fallback_dir);
            if (!fs::exists(tensor_path)) {
                throw ValidationError(where + ": embedding file '" + rel + "' does not exist");
            }
            Matrix values = read_matrix(tensor_path);
            if (values.rows() == 0 || values.cols() == 0) {
                throw ValidationError(where + ": embedding '" + rel + "' is empty");
            }
            if (!expected_d) {
                expected_d = values.cols();
                first_dim_line = line_no;
            } else if (*expected_d != values.cols()) {
                throw ValidationError(where + ": dimension-consistency error, embedding width " +
                                      std::to_string(values.cols()) + " differs from " + std::to_string(*expected_d) +
                                      " (line " + std::to_string(first_dim_line) + ")");
            }
            std::optional<std::string> pair_id;
            if (obj.contains("pair_id") && !obj["pair_id"].is_null()) pair_id = obj["pair_id"].get<std::string>();
            out.push_back(LabeledExample{obj.at("id").get<std::string>(), obj.value("text", std::string{}),
                                         EmbeddingMatrix(std::move(values)), static_cast<int>(label.get<long long>()),
                                         std::move(pair_id), obj.value("concept", std::string{})});
        } catch (const json::exception& e) {
            throw ValidationError(where + ": " + e.what());
        } catch (const FormatError& e) {
            throw ValidationError(where + ": " + e.what());
        } catch (const ShapeError& e) {
            throw ValidationError(where + ": " + e.what());
        }
    }
    return out;
}

void write_file_atomic(const fs::path& path, std::span<const std::uint8_t> bytes) {
    fs::path tmp = path;
    tmp += ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            std::error_code ignored;
            fs::remove(tmp, ignored);
            throw IoError("write failed for " + tmp.string());
        }
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        std::error_code ignored;
        fs::remove(tmp, ignored);
        throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
    }
}

std::vector<std::uint8_t> read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failed for " + path.string());
    return data;
}

}  // namespace cgce
