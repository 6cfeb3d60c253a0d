#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "perldiff/conditioning.hpp"
#include "perldiff/diffusion.hpp"
#include "perldiff/params.hpp"
#include "perldiff/scenegen.hpp"

namespace perldiff {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Binary P6, 8-bit. `image` is [3, H, W] in [-1, 1]; values are clamped and
// mapped to round((v + 1) * 127.5).
void write_ppm(const std::string& path, const Tensor& image);
Tensor read_ppm(const std::string& path);
// Binary P5 of a [H, W] map in [0, 1] (values clamped), scaled to 0..255.
void write_pgm(const std::string& path, const Tensor& map);
Tensor read_pgm(const std::string& path);

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig model;
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 2e-2;
  Vocabulary vocab;
  Palette palette;
  ParameterStore params;
};

// Layout: "PERL", u32 version, u32 tensor count, then per tensor (name order)
// u32 name length, name bytes, u8 dtype (0 = f32), u8 rank, u32 dims, data;
// then the vocabulary, palette and config (JSON) sections. Little-endian.
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);
NoiseSchedule checkpoint_schedule(const Checkpoint& ckpt);

// Parameter values as they read back from a checkpoint (rounded to f32).
void round_to_storage(ParameterStore& params);

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes);

}  // namespace perldiff
