#ifndef XR2VOL_IO_HPP
#define XR2VOL_IO_HPP

#include <string>
#include <vector>

#include "xr2vol/tensor.hpp"

namespace xr2vol {

// Writes bytes to path via a temp file and rename, so readers never observe
// a partial file.
void atomic_write_file(const std::string& path, const std::string& bytes);

std::string read_file(const std::string& path);

// Raw tensor container: little-endian 32-bit floats at `path`, plus a JSON
// sidecar `path + ".json"` holding shape, dtype and an fnv1a64 checksum of
// the payload bytes. Values are rounded to float on write.
void write_tensor_file(const std::string& path, const Tensor& t);
Tensor read_tensor_file(const std::string& path);

// 8-bit grayscale PNG. Input {h,w} or {1,h,w} with values in [-1,1], mapped
// affinely to 0..255.
void write_gray_png(const std::string& path, const Tensor& img);

// Shortest decimal form that round-trips a double exactly.
std::string format_double(double x);

// One CSV document: header row + data rows, comma-separated, '\n' line ends.
std::string csv_document(const std::vector<std::string>& header,
                         const std::vector<std::vector<std::string>>& rows);

// Strict parser for documents produced by csv_document (no quoting).
std::vector<std::vector<std::string>> parse_csv(const std::string& text);

}  // namespace xr2vol

#endif
