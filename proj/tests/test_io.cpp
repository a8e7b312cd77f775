#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "xr2vol/io.hpp"
#include "xr2vol/rng.hpp"

using namespace xr2vol;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path p;
    TempDir() {
        p = fs::temp_directory_path() /
            ("xr2vol_io_" + std::to_string(::getpid()) + "_" +
             std::to_string(reinterpret_cast<std::uintptr_t>(this)));
        fs::create_directories(p);
    }
    ~TempDir() { std::error_code ec; fs::remove_all(p, ec); }
    std::string file(const std::string& name) const { return (p / name).string(); }
};

}  // namespace

TEST_CASE("atomic write creates parents, leaves no temp and round trips") {
    TempDir td;
    std::string path = td.file("a/b/c.bin");
    std::string payload = "hello\0world";
    payload.push_back('\x01');
    atomic_write_file(path, payload);
    CHECK(read_file(path) == payload);
    CHECK_FALSE(fs::exists(path + ".tmp"));

    atomic_write_file(path, "second");
    CHECK(read_file(path) == "second");

    CHECK_THROWS_AS(read_file(td.file("missing.bin")), std::runtime_error);
}

TEST_CASE("tensor files round trip through float precision") {
    TempDir td;
    Tensor t({2, 3});
    RngHandle rng(51);
    for (auto& v : t.v) v = rng.normal() * 10.0;
    std::string path = td.file("t.f32");
    write_tensor_file(path, t);
    CHECK(fs::exists(path));
    CHECK(fs::exists(path + ".json"));

    Tensor back = read_tensor_file(path);
    CHECK(back.shape == t.shape);
    for (size_t i = 0; i < t.v.size(); ++i)
        CHECK(back.v[i] == static_cast<double>(static_cast<float>(t.v[i])));

    // a second write of the reread tensor is byte identical
    std::string path2 = td.file("t2.f32");
    write_tensor_file(path2, back);
    CHECK(read_file(path2) == read_file(path));
    CHECK(read_file(path2 + ".json") == read_file(path + ".json"));
}

TEST_CASE("tensor file corruption and missing sidecar are detected") {
    TempDir td;
    Tensor t({4}, {1.0, -2.0, 3.0, -4.0});
    std::string path = td.file("t.f32");
    write_tensor_file(path, t);

    std::string bytes = read_file(path);
    bytes[5] = static_cast<char>(bytes[5] ^ 0x40);
    atomic_write_file(path, bytes);
    CHECK_THROWS_AS(read_tensor_file(path), std::runtime_error);

    std::string orphan = td.file("orphan.f32");
    atomic_write_file(orphan, std::string(16, '\0'));
    CHECK_THROWS_AS(read_tensor_file(orphan), std::runtime_error);

    // truncated payload no longer matches the recorded size
    write_tensor_file(path, t);
    atomic_write_file(path, read_file(path).substr(0, 8));
    CHECK_THROWS_AS(read_tensor_file(path), std::runtime_error);
}

TEST_CASE("double formatting is exact and canonical for specials") {
    RngHandle rng(52);
    for (int i = 0; i < 200; ++i) {
        double x = rng.normal() * std::pow(10.0, rng.uniform(-12.0, 12.0));
        CHECK(std::stod(format_double(x)) == x);
    }
    CHECK(std::stod(format_double(0.1)) == 0.1);
    CHECK(std::stod(format_double(1.0 / 3.0)) == 1.0 / 3.0);
    CHECK(format_double(1.0) == "1");
    CHECK(format_double(0.0) == "0");
    CHECK(format_double(std::numeric_limits<double>::infinity()) == "inf");
    CHECK(format_double(-std::numeric_limits<double>::infinity()) == "-inf");
    CHECK(format_double(std::numeric_limits<double>::quiet_NaN()) == "nan");
}

TEST_CASE("csv documents round trip and reject ragged rows") {
    std::vector<std::string> header = {"slice", "psnr", "ssim"};
    std::vector<std::vector<std::string>> rows = {
        {"0", format_double(28.130803608679106), format_double(0.991)},
        {"1", format_double(-1.5), "nan"},
    };
    std::string doc = csv_document(header, rows);
    auto parsed = parse_csv(doc);
    REQUIRE(parsed.size() == 3);
    CHECK(parsed[0] == header);
    CHECK(parsed[1] == rows[0]);
    CHECK(parsed[2] == rows[1]);
    CHECK(std::stod(parsed[1][1]) == 28.130803608679106);

    // carriage returns are tolerated on parse
    auto crlf = parse_csv("a,b\r\n1,2\r\n");
    REQUIRE(crlf.size() == 2);
    CHECK(crlf[1][1] == "2");

    CHECK_THROWS_AS(csv_document(header, {{"only", "two"}}), std::invalid_argument);
}

TEST_CASE("gray png carries the magic, dimensions and value mapping") {
    TempDir td;
    Tensor img({2, 3});
    img.v = {-1.0, 0.0, 1.0, -2.0, 2.0, 0.5};
    std::string path = td.file("img.png");
    write_gray_png(path, img);

    std::string bytes = read_file(path);
    REQUIRE(bytes.size() > 33);
    const unsigned char magic[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    for (int i = 0; i < 8; ++i)
        CHECK(static_cast<unsigned char>(bytes[static_cast<size_t>(i)]) == magic[i]);

    auto be32 = [&](size_t off) {
        return (static_cast<unsigned>(static_cast<unsigned char>(bytes[off])) << 24) |
               (static_cast<unsigned>(static_cast<unsigned char>(bytes[off + 1])) << 16) |
               (static_cast<unsigned>(static_cast<unsigned char>(bytes[off + 2])) << 8) |
               static_cast<unsigned>(static_cast<unsigned char>(bytes[off + 3]));
    };
    // IHDR payload starts at byte 16: width, then height
    CHECK(be32(16) == 3);
    CHECK(be32(20) == 2);
    CHECK(bytes[24] == 8);  // bit depth
    CHECK(bytes[25] == 0);  // grayscale

    // {1,h,w} is accepted as a single plane
    Tensor plane({1, 2, 3}, img.v);
    write_gray_png(td.file("p.png"), plane);
    CHECK(read_file(td.file("p.png")) == bytes);

    Tensor bad({2, 2, 2});
    CHECK_THROWS_AS(write_gray_png(td.file("bad.png"), bad), std::invalid_argument);
}
