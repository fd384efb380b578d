#pragma once

#include <filesystem>

#include "bifair/common.hpp"

namespace bifair {

// Binary matrix blob: magic "BIFE", u32 rows, u32 cols, then little-endian
// float32 values in row-major order. "BIFD" is the same layout with float64.
enum class BlobPrecision { Float32, Float64 };

void write_blob(const Matrix& m, const std::filesystem::path& path,
                BlobPrecision precision = BlobPrecision::Float32);
Matrix read_blob(const std::filesystem::path& path);
bool is_blob_file(const std::filesystem::path& path);

// Whitespace-separated text, one matrix row per line.
void write_text_matrix(const Matrix& m, const std::filesystem::path& path);
Matrix read_text_matrix(const std::filesystem::path& path);

}  // namespace bifair
