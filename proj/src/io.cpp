#include "perldiff/io.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <nlohmann/json.hpp>

#include "perldiff/config.hpp"

namespace perldiff {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write to '" + path + "' failed");
}

namespace {

std::uint8_t to_byte(double v, double lo) {
  const double x = std::clamp(v, lo, 1.0);
  return static_cast<std::uint8_t>(std::lround(lo < 0.0 ? (x + 1.0) * 127.5 : x * 255.0));
}

void write_netpbm(const std::string& path, const char* magic, int w, int h, const std::vector<std::uint8_t>& pixels) {
  std::vector<std::uint8_t> bytes;
  const std::string header = std::string(magic) + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  bytes.insert(bytes.end(), header.begin(), header.end());
  bytes.insert(bytes.end(), pixels.begin(), pixels.end());
  write_file_bytes(path, bytes);
}

// Returns the pixel payload and fills width/height.
std::vector<std::uint8_t> read_netpbm(const std::string& path, const std::string& magic, int& w, int& h) {
  const auto bytes = read_file_bytes(path);
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) t.push_back(static_cast<char>(bytes[pos++]));
    return t;
  };
  if (token() != magic) throw IoError("'" + path + "' is not a binary " + magic + " file");
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    if (std::stoi(token()) != 255) throw IoError("'" + path + "': only 8-bit images are supported");
  } catch (const std::logic_error&) {
    throw IoError("'" + path + "': malformed header");
  }
  ++pos;  // single whitespace before the raster
  const std::size_t channels = magic == "P6" ? 3 : 1;
  const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * channels;
  if (w <= 0 || h <= 0 || bytes.size() < pos + need) throw IoError("'" + path + "': truncated raster");
  return {bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + need)};
}

}  // namespace

void write_ppm(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("write_ppm: expected [3, H, W], got " + dims_to_string(image.dims()));
  const int h = image.dim(1), w = image.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  std::vector<std::uint8_t> px(plane * 3);
  for (std::size_t p = 0; p < plane; ++p) {
    for (std::size_t c = 0; c < 3; ++c) px[p * 3 + c] = to_byte(image[c * plane + p], -1.0);
  }
  write_netpbm(path, "P6", w, h, px);
}

Tensor read_ppm(const std::string& path) {
  int w = 0, h = 0;
  const auto px = read_netpbm(path, "P6", w, h);
  Tensor img({3, h, w});
  const std::size_t plane = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  for (std::size_t p = 0; p < plane; ++p) {
    for (std::size_t c = 0; c < 3; ++c) img[c * plane + p] = px[p * 3 + c] / 127.5 - 1.0;
  }
  return img;
}

void write_pgm(const std::string& path, const Tensor& map) {
  if (map.rank() != 2) throw ShapeError("write_pgm: expected [H, W], got " + dims_to_string(map.dims()));
  std::vector<std::uint8_t> px(map.size());
  for (std::size_t p = 0; p < map.size(); ++p) px[p] = to_byte(map[p], 0.0);
  write_netpbm(path, "P5", map.dim(1), map.dim(0), px);
}

Tensor read_pgm(const std::string& path) {
  int w = 0, h = 0;
  const auto px = read_netpbm(path, "P5", w, h);
  Tensor map({h, w});
  for (std::size_t p = 0; p < px.size(); ++p) map[p] = px[p] / 255.0;
  return map;
}

namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { out.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
  }
  std::vector<std::uint8_t> out;
};

class Cursor {
 public:
  explicit Cursor(const std::vector<std::uint8_t>& b) : bytes(b) {}
  void need(std::size_t n) const {
    if (pos + n > bytes.size()) throw IoError("checkpoint truncated at byte " + std::to_string(pos));
  }
  std::uint8_t u8() {
    need(1);
    return bytes[pos++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos++]) << (8 * i);
    return v;
  }
  double f32() { return static_cast<double>(std::bit_cast<float>(u32())); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
    pos += n;
    return s;
  }
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;
};

void write_color(Writer& w, const Eigen::Vector3d& c) {
  for (int k = 0; k < 3; ++k) w.f32(c[k]);
}

Eigen::Vector3d read_color(Cursor& c) {
  Eigen::Vector3d v;
  for (int k = 0; k < 3; ++k) v[k] = c.f32();
  return v;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  for (char ch : std::string("PERL")) w.u8(static_cast<std::uint8_t>(ch));
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& [name, entry] : ckpt.params.entries()) {
    w.str(name);
    w.u8(0);
    w.u8(static_cast<std::uint8_t>(entry.value.rank()));
    for (int d : entry.value.dims()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : entry.value.storage()) w.f32(v);
  }
  w.u32(static_cast<std::uint32_t>(ckpt.vocab.size()));
  for (const auto& t : ckpt.vocab.tokens()) w.str(t);
  const Palette& p = ckpt.palette;
  w.u32(static_cast<std::uint32_t>(p.categories.size()));
  for (std::size_t k = 0; k < p.categories.size(); ++k) {
    w.str(p.categories[k]);
    write_color(w, p.colors[k]);
  }
  write_color(w, p.road);
  w.u32(static_cast<std::uint32_t>(p.backgrounds.size()));
  for (std::size_t k = 0; k < p.backgrounds.size(); ++k) {
    w.str(p.backgrounds[k]);
    write_color(w, p.background_colors[k]);
  }
  const nlohmann::json config = {{"model", model_config_to_json(ckpt.model)},
                                 {"T", ckpt.T},
                                 {"beta_start", ckpt.beta_start},
                                 {"beta_end", ckpt.beta_end}};
  w.str(config.dump());
  return w.out;
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Cursor c(bytes);
  c.need(4);
  if (std::memcmp(bytes.data(), "PERL", 4) != 0) throw IoError("not a checkpoint (bad magic)");
  c.pos = 4;
  const std::uint32_t version = c.u32();
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  const std::uint32_t count = c.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = c.str();
    const std::uint8_t dtype = c.u8();
    if (dtype != 0) throw IoError("tensor '" + name + "': unsupported dtype code " + std::to_string(dtype));
    const std::uint8_t rank = c.u8();
    Dims dims;
    for (std::uint8_t r = 0; r < rank; ++r) dims.push_back(static_cast<int>(c.u32()));
    Tensor t(dims);
    c.need(t.size() * 4);
    for (double& v : t.storage()) v = c.f32();
    ckpt.params.add(name, std::move(t));
  }
  std::vector<std::string> tokens(c.u32());
  for (auto& t : tokens) t = c.str();
  ckpt.vocab = Vocabulary(std::move(tokens));
  Palette& p = ckpt.palette;
  p.categories.resize(c.u32());
  for (std::size_t k = 0; k < p.categories.size(); ++k) {
    p.categories[k] = c.str();
    p.colors.push_back(read_color(c));
  }
  p.road = read_color(c);
  p.backgrounds.resize(c.u32());
  for (std::size_t k = 0; k < p.backgrounds.size(); ++k) {
    p.backgrounds[k] = c.str();
    p.background_colors.push_back(read_color(c));
  }
  try {
    const auto config = nlohmann::json::parse(c.str());
    ckpt.model = model_config_from_json(config.at("model"));
    ckpt.T = config.at("T").get<int>();
    ckpt.beta_start = config.at("beta_start").get<double>();
    ckpt.beta_end = config.at("beta_end").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint model config: ") + e.what());
  }
  if (c.pos != bytes.size()) throw IoError("checkpoint has " + std::to_string(bytes.size() - c.pos) + " trailing bytes");
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) { write_file_bytes(path, serialize_checkpoint(ckpt)); }

Checkpoint load_checkpoint(const std::string& path) { return deserialize_checkpoint(read_file_bytes(path)); }

NoiseSchedule checkpoint_schedule(const Checkpoint& ckpt) { return make_schedule(ckpt.T, ckpt.beta_start, ckpt.beta_end); }

void round_to_storage(ParameterStore& params) {
  for (auto& [name, entry] : params.entries()) {
    for (double& v : entry.value.storage()) v = static_cast<double>(static_cast<float>(v));
  }
}

}  // namespace perldiff
