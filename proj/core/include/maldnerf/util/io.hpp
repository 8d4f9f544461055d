#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "maldnerf/util/image.hpp"

namespace maldnerf {

// ---- raw files -------------------------------------------------------------

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);
bool file_exists(const std::string& path);

// Raw little-endian float32 stream, dims supplied by the manifest.
void write_f32(const std::string& path, const float* data, size_t n);
std::vector<float> read_f32(const std::string& path, size_t expected_n);

// ---- PNG (8-bit) -----------------------------------------------------------

// Values are clamped to [0,1] and quantized; the .f32 stream stays
// authoritative for pixels, PNGs exist for masks and for human viewing.
void write_png_rgb8(const std::string& path, const ImageF& img);
void write_png_gray8(const std::string& path, const Mask& mask);
ImageF read_png(const std::string& path);  // returns float in [0,1], c = 1 or 3
Mask read_png_mask(const std::string& path);

// ---- versioned parameter blob ----------------------------------------------

// Checkpoint container shared by every model in the project:
//   magic "MNRF" | u32 version | u32 kind | u32 n_meta | i64 meta[n_meta]
//   | u64 n_params | f32 params[n_params]  (little-endian throughout)
// Parameters appear in model declaration order. Training state is kept
// f32-valued (see Adam), so the round trip is lossless.
struct Blob {
  uint32_t kind = 0;
  std::vector<int64_t> meta;
  std::vector<float> params;
};

inline constexpr uint32_t kBlobVersion = 1;

void write_blob(const std::string& path, const Blob& blob);
Blob read_blob(const std::string& path, uint32_t expected_kind);

// ---- hashing ----------------------------------------------------------------

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::string& path);

}  // namespace maldnerf
