#include <cstring>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "cgce/errors.hpp"
#include "cgce/store.hpp"
#include "doctest.h"
#include "support/oracles.hpp"

using namespace cgce;
using namespace cgce::testing;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        static int counter = 0;
        path = fs::temp_directory_path() / ("cgce_store_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

double quantize(double v) { return static_cast<double>(static_cast<float>(v)); }

Matrix quantized(const Matrix& m) {
    Matrix out = m;
    for (double& v : out.values()) v = quantize(v);
    return out;
}

void put_u32(std::vector<std::uint8_t>& b, std::size_t at, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b[at + i] = static_cast<std::uint8_t>(v >> (8 * i));
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

}  // namespace

TEST_CASE("tensor file: 2x3 zeros is 48 bytes with the documented header") {
    TempDir dir;
    const fs::path p = dir.path / "z.cgt";
    write_tensor(Matrix(2, 3), p);
    const auto bytes = read_file(p);
    REQUIRE(bytes.size() == 48);
    CHECK(std::memcmp(bytes.data(), "CGT1", 4) == 0);
    CHECK(bytes[4] == 1);
    CHECK(bytes[5] == 2);
    CHECK(bytes[6] == 0);
    CHECK(bytes[7] == 0);
    CHECK(bytes[8] == 2);
    for (int i = 9; i < 16; ++i) CHECK(bytes[i] == 0);
    CHECK(bytes[16] == 3);
    for (std::size_t i = 24; i < 48; ++i) CHECK(bytes[i] == 0);
}

TEST_CASE("tensor file: payload is little-endian binary32") {
    const auto bytes = encode_tensor(to_tensor(Matrix(1, 1, {1.0})));
    REQUIRE(bytes.size() == 4 + 4 + 2 * 8 + 4);
    // 1.0f = 0x3F800000
    CHECK(bytes[24] == 0x00);
    CHECK(bytes[25] == 0x00);
    CHECK(bytes[26] == 0x80);
    CHECK(bytes[27] == 0x3F);
}

TEST_CASE("tensor file: round-trip equals 32-bit quantisation") {
    TempDir dir;
    Rng rng(40);
    const Matrix m = random_matrix(5, 7, rng, 100.0);
    write_tensor(m, dir.path / "m.cgt");
    CHECK(read_matrix(dir.path / "m.cgt") == quantized(m));
}

TEST_CASE("tensor file: corrupt inputs") {
    auto bytes = encode_tensor(to_tensor(Matrix(2, 3, {1, 2, 3, 4, 5, 6})));

    SUBCASE("bad magic") {
        std::memcpy(bytes.data(), "XXXX", 4);
        try {
            (void)decode_tensor(bytes);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(e.offset() == 0);
        }
    }
    SUBCASE("truncated payload names the offset") {
        bytes.resize(bytes.size() - 5);
        try {
            (void)decode_tensor(bytes);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(e.offset() == 24);
            CHECK(std::string(e.what()).find("truncated") != std::string::npos);
        }
    }
    SUBCASE("truncated header") {
        bytes.resize(10);
        CHECK_THROWS_AS(decode_tensor(bytes), FormatError);
    }
    SUBCASE("unknown dtype") {
        bytes[4] = 7;
        try {
            (void)decode_tensor(bytes);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(e.offset() == 4);
        }
    }
    SUBCASE("reserved bytes") {
        bytes[6] = 1;
        CHECK_THROWS_AS(decode_tensor(bytes), FormatError);
    }
    SUBCASE("trailing bytes") {
        bytes.push_back(0);
        CHECK_THROWS_AS(decode_tensor(bytes), FormatError);
    }
    SUBCASE("non-finite payload") {
        const float nan = std::numeric_limits<float>::quiet_NaN();
        std::memcpy(bytes.data() + 24, &nan, 4);
        CHECK_THROWS_AS(decode_tensor(bytes), FormatError);
    }
}

TEST_CASE("tensor file: missing file is an I/O error") {
    CHECK_THROWS_AS(read_tensor("/nonexistent/dir/x.cgt"), IoError);
}

TEST_CASE("tensor file: rank-1 and rank-3 tensors round-trip; read_matrix needs rank 2") {
    TempDir dir;
    const Tensor t3{{2, 3, 4}, std::vector<double>(24, 0.5)};
    write_tensor(t3, dir.path / "t3.cgt");
    CHECK(read_tensor(dir.path / "t3.cgt") == t3);
    CHECK_THROWS_AS(read_matrix(dir.path / "t3.cgt"), ShapeError);

    const Tensor t1{{3}, {1.0, 2.0, 3.0}};
    CHECK(decode_tensor(encode_tensor(t1)) == t1);
    CHECK(to_matrix(t1) == Matrix(1, 3, {1, 2, 3}));
}

TEST_CASE("tensor file: random shapes up to rank 3 round-trip exactly at 32-bit precision") {
    Rng rng(41);
    for (int trial = 0; trial < 200; ++trial) {
        Tensor t;
        const std::size_t rank = 1 + rng.below(3);
        std::uint64_t count = 1;
        for (std::size_t r = 0; r < rank; ++r) {
            t.shape.push_back(1 + rng.below(64));
            count *= t.shape.back();
        }
        for (std::uint64_t i = 0; i < count; ++i) t.values.push_back(quantize(rng.normal() * 1e3));
        CHECK(decode_tensor(encode_tensor(t)) == t);
    }
}

TEST_CASE("checkpoint: round-trip and byte-identical saves") {
    TempDir dir;
    Rng rng(42);
    ClassifierParams p = random_classifier({12, 8, 2}, rng);
    p.concept_name = "church";
    p.default_tau = 0.7;
    write_checkpoint(p, dir.path / "a.cgck");
    write_checkpoint(p, dir.path / "b.cgck");
    CHECK(read_file(dir.path / "a.cgck") == read_file(dir.path / "b.cgck"));

    const ClassifierParams back = read_checkpoint(dir.path / "a.cgck");
    CHECK(back.arch.d == 12);
    CHECK(back.arch.h == 8);
    CHECK(back.arch.heads == 2);
    CHECK(back.concept_name == "church");
    CHECK(back.default_tau == 0.7);
    CHECK(back.weights.scalar_count() == count_params(12, 8));
    const auto orig = p.weights.list();
    const auto got = back.weights.list();
    for (std::size_t k = 0; k < ParamTensors::kCount; ++k) CHECK(*got[k] == quantized(*orig[k]));

    // A quantised checkpoint survives a second round-trip unchanged.
    CHECK(decode_checkpoint(encode_checkpoint(back)) == back);
}

TEST_CASE("checkpoint: header layout and tensor order") {
    const ClassifierParams p = init_params({4, 4, 1}, 1, "x");
    const auto bytes = encode_checkpoint(p);
    CHECK(std::memcmp(bytes.data(), "CGCK", 4) == 0);
    CHECK(bytes[4] == 1);
    const std::uint32_t header_len = bytes[8] | (bytes[9] << 8) | (bytes[10] << 16) | (bytes[11] << 24);
    const std::string header(bytes.begin() + 12, bytes.begin() + 12 + header_len);
    CHECK(header.find("\"d\":4") != std::string::npos);
    CHECK(header.find("\"concept_name\":\"x\"") != std::string::npos);

    const std::string text(bytes.begin(), bytes.end());
    std::size_t last = 0;
    for (auto name : ParamTensors::kNames) {
        const std::size_t at = text.find(std::string(name), last);
        REQUIRE(at != std::string::npos);
        CHECK(at >= last);
        last = at;
    }
}

TEST_CASE("checkpoint: corrupt files") {
    const ClassifierParams p = init_params({6, 4, 2}, 2, "x");
    auto bytes = encode_checkpoint(p);

    SUBCASE("version 99") {
        put_u32(bytes, 4, 99);
        try {
            (void)decode_checkpoint(bytes);
            FAIL("expected UnsupportedVersionError");
        } catch (const UnsupportedVersionError& e) {
            CHECK(std::string(e.what()).find("99") != std::string::npos);
        }
    }
    SUBCASE("header d disagrees with tensor shapes") {
        const std::string text(bytes.begin(), bytes.end());
        const std::size_t at = text.find("\"d\":6");
        REQUIRE(at != std::string::npos);
        bytes[at + 4] = '8';
        CHECK_THROWS_AS(decode_checkpoint(bytes), IntegrityError);
    }
    SUBCASE("missing tensor") {
        ClassifierParams short_params = p;
        auto full = encode_checkpoint(short_params);
        // Drop the last record (mlp2.bias: u16 + 9 name bytes + record of rank 1 with one value).
        const std::size_t last_record = 2 + 9 + 4 + 8 + 4;
        full.resize(full.size() - last_record);
        const std::size_t count_at = 12 + (full[8] | (full[9] << 8));
        put_u32(full, count_at, ParamTensors::kCount - 1);
        try {
            (void)decode_checkpoint(full);
            FAIL("expected IntegrityError");
        } catch (const IntegrityError& e) {
            CHECK(std::string(e.what()).find("mlp2.bias") != std::string::npos);
        }
    }
    SUBCASE("bad magic") {
        bytes[0] = 'X';
        CHECK_THROWS_AS(decode_checkpoint(bytes), FormatError);
    }
    SUBCASE("truncated") {
        bytes.resize(bytes.size() / 2);
        CHECK_THROWS_AS(decode_checkpoint(bytes), FormatError);
    }
}

TEST_CASE("manifest: valid two-line file") {
    TempDir dir;
    Rng rng(43);
    fs::create_directories(dir.path / "emb");
    write_tensor(random_matrix(3, 8, rng), dir.path / "emb" / "a.cgt");
    write_tensor(random_matrix(5, 8, rng), dir.path / "emb" / "b.cgt");
    const std::vector<ManifestEntry> entries{{"a", "a safe prompt", 0, "emb/a.cgt", "p0", "nudity"},
                                             {"b", "an unsafe prompt", 1, "emb/b.cgt", "p0", "nudity"}};
    write_manifest(entries, dir.path / "m.jsonl");
    const auto examples = read_manifest(dir.path / "m.jsonl");
    REQUIRE(examples.size() == 2);
    CHECK(examples[0].id == "a");
    CHECK(examples[0].label == 0);
    CHECK(examples[1].label == 1);
    CHECK(examples[1].embedding.tokens() == 5);
    CHECK(examples[1].pair_id == std::optional<std::string>("p0"));
    CHECK(examples[1].concept_name == "nudity");
    CHECK(examples[1].text == "an unsafe prompt");
}

TEST_CASE("manifest: validation errors") {
    TempDir dir;
    Rng rng(44);
    write_tensor(random_matrix(3, 768, rng), dir.path / "wide.cgt");
    write_tensor(random_matrix(3, 512, rng), dir.path / "narrow.cgt");
    const fs::path m = dir.path / "m.jsonl";

    SUBCASE("label 2 names the line") {
        write_text(m, R"({"id":"a","text":"","label":0,"embedding":"wide.cgt","concept":"c"})"
                      "\n"
                      R"({"id":"b","text":"","label":2,"embedding":"wide.cgt","concept":"c"})"
                      "\n");
        try {
            (void)read_manifest(m);
            FAIL("expected ValidationError");
        } catch (const ValidationError& e) {
            CHECK(std::string(e.what()).find("m.jsonl:2") != std::string::npos);
        }
    }
    SUBCASE("mixed widths") {
        write_text(m, R"({"id":"a","text":"","label":0,"embedding":"wide.cgt","concept":"c"})"
                      "\n"
                      R"({"id":"b","text":"","label":1,"embedding":"narrow.cgt","concept":"c"})"
                      "\n");
        try {
            (void)read_manifest(m);
            FAIL("expected ValidationError");
        } catch (const ValidationError& e) {
            CHECK(std::string(e.what()).find("dimension-consistency") != std::string::npos);
        }
    }
    SUBCASE("dangling path") {
        write_text(m, R"({"id":"a","text":"","label":0,"embedding":"gone.cgt","concept":"c"})"
                      "\n");
        CHECK_THROWS_AS(read_manifest(m), ValidationError);
    }
    SUBCASE("broken JSON") {
        write_text(m, "{not json\n");
        CHECK_THROWS_AS(read_manifest(m), ValidationError);
    }
    SUBCASE("header line fixes d") {
        write_text(m, R"({"encoder_id":"clip-l14","d":512})"
                      "\n"
                      R"({"id":"a","text":"","label":0,"embedding":"wide.cgt","concept":"c"})"
                      "\n");
        CHECK_THROWS_AS(read_manifest(m), ValidationError);
    }
    SUBCASE("fallback directory") {
        fs::create_directories(dir.path / "sub");
        write_text(dir.path / "sub" / "m.jsonl",
                   R"({"id":"a","text":"","label":1,"embedding":"narrow.cgt","concept":"c"})"
                   "\n");
        CHECK_THROWS_AS(read_manifest(dir.path / "sub" / "m.jsonl"), ValidationError);
        CHECK(read_manifest(dir.path / "sub" / "m.jsonl", dir.path).size() == 1);
    }
    SUBCASE("missing manifest") {
        CHECK_THROWS_AS(read_manifest(dir.path / "nope.jsonl"), IoError);
    }
}

TEST_CASE("atomic writes leave no temporary files behind") {
    TempDir dir;
    write_tensor(Matrix(1, 2, {1, 2}), dir.path / "x.cgt");
    write_tensor(Matrix(1, 2, {3, 4}), dir.path / "x.cgt");
    std::size_t files = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir.path)) ++files;
    CHECK(files == 1);
    CHECK(read_matrix(dir.path / "x.cgt") == Matrix(1, 2, {3, 4}));
}
