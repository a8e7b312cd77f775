#include "xr2vol/io.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "tensor file format assumes a little-endian host");

namespace xr2vol {

void atomic_write_file(const std::string& path, const std::string& bytes) {
    namespace fs = std::filesystem;
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("io: cannot open " + tmp);
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw std::runtime_error("io: short write to " + tmp);
    }
    fs::rename(tmp, path);
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("io: cannot open " + path);
    std::string out((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return out;
}

void write_tensor_file(const std::string& path, const Tensor& t) {
    std::string payload(t.v.size() * sizeof(float), '\0');
    float* dst = reinterpret_cast<float*>(payload.data());
    for (size_t i = 0; i < t.v.size(); ++i) dst[i] = static_cast<float>(t.v[i]);

    nlohmann::json side;
    side["dtype"] = "float32";
    side["shape"] = t.shape;
    side["checksum"] = fnv1a64_hex(payload.data(), payload.size());
    atomic_write_file(path, payload);
    atomic_write_file(path + ".json", side.dump(2) + "\n");
}

Tensor read_tensor_file(const std::string& path) {
    std::string payload = read_file(path);
    nlohmann::json side = nlohmann::json::parse(read_file(path + ".json"));
    if (side.at("dtype").get<std::string>() != "float32")
        throw std::runtime_error("tensor file: unsupported dtype in " + path);
    std::vector<int> shape = side.at("shape").get<std::vector<int>>();
    std::string want = side.at("checksum").get<std::string>();
    std::string got = fnv1a64_hex(payload.data(), payload.size());
    if (want != got) throw std::runtime_error("tensor file: checksum mismatch in " + path);
    std::int64_t n = Tensor::count(shape);
    if (payload.size() != static_cast<size_t>(n) * sizeof(float))
        throw std::runtime_error("tensor file: size does not match shape in " + path);
    Tensor t(shape);
    const float* src = reinterpret_cast<const float*>(payload.data());
    for (std::int64_t i = 0; i < n; ++i) t.v[static_cast<size_t>(i)] = src[i];
    return t;
}

static void put_be32(std::string& s, std::uint32_t x) {
    s.push_back(static_cast<char>((x >> 24) & 0xff));
    s.push_back(static_cast<char>((x >> 16) & 0xff));
    s.push_back(static_cast<char>((x >> 8) & 0xff));
    s.push_back(static_cast<char>(x & 0xff));
}

static void put_chunk(std::string& s, const char type[4], const std::string& data) {
    put_be32(s, static_cast<std::uint32_t>(data.size()));
    std::string body(type, 4);
    body += data;
    s += body;
    std::uint32_t crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size())));
    put_be32(s, crc);
}

void write_gray_png(const std::string& path, const Tensor& img) {
    int h = 0, w = 0;
    const double* px = nullptr;
    if (img.rank() == 2) {
        h = img.dim(0);
        w = img.dim(1);
        px = img.v.data();
    } else if (img.rank() == 3 && img.dim(0) == 1) {
        h = img.dim(1);
        w = img.dim(2);
        px = img.v.data();
    } else {
        throw std::invalid_argument("png: needs {h,w} or {1,h,w}");
    }

    std::string raw(static_cast<size_t>(h) * (static_cast<size_t>(w) + 1), '\0');
    size_t o = 0;
    for (int y = 0; y < h; ++y) {
        raw[o++] = 0;  // filter: none
        for (int x = 0; x < w; ++x) {
            double v = px[static_cast<size_t>(y) * w + x];
            v = (v + 1.0) * 0.5 * 255.0;
            int q = static_cast<int>(v + 0.5);
            raw[o++] = static_cast<char>(q < 0 ? 0 : (q > 255 ? 255 : q));
        }
    }

    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::string compressed(bound, '\0');
    if (compress2(reinterpret_cast<Bytef*>(compressed.data()), &bound,
                  reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()),
                  6) != Z_OK)
        throw std::runtime_error("png: compression failed");
    compressed.resize(bound);

    std::string out("\x89PNG\r\n\x1a\n", 8);
    std::string ihdr;
    put_be32(ihdr, static_cast<std::uint32_t>(w));
    put_be32(ihdr, static_cast<std::uint32_t>(h));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(0);  // grayscale
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    put_chunk(out, "IHDR", ihdr);
    put_chunk(out, "IDAT", compressed);
    put_chunk(out, "IEND", "");
    atomic_write_file(path, out);
}

std::string format_double(double x) {
    if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
    if (std::isnan(x)) return "nan";
    char buf[40];
    for (int prec = 15; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof(buf), "%.*g", prec, x);
        double back = std::strtod(buf, nullptr);
        if (back == x) return buf;
    }
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

std::string csv_document(const std::vector<std::string>& header,
                         const std::vector<std::vector<std::string>>& rows) {
    std::string out;
    auto emit = [&out](const std::vector<std::string>& cells) {
        for (size_t i = 0; i < cells.size(); ++i) {
            if (i) out.push_back(',');
            out += cells[i];
        }
        out.push_back('\n');
    };
    emit(header);
    for (const auto& r : rows) {
        if (r.size() != header.size()) throw std::invalid_argument("csv: ragged row");
        emit(r);
    }
    return out;
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> cur;
    std::string cell;
    for (char c : text) {
        if (c == ',') {
            cur.push_back(cell);
            cell.clear();
        } else if (c == '\n') {
            cur.push_back(cell);
            cell.clear();
            rows.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cell.push_back(c);
        }
    }
    if (!cell.empty() || !cur.empty()) {
        cur.push_back(cell);
        rows.push_back(cur);
    }
    return rows;
}

}  // namespace xr2vol
