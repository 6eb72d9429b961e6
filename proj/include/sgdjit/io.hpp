#pragma once

// Binary containers for datasets and checkpoints.
//
//   magic[8] | u32 version | u64 header bytes | JSON header | f64 payload
//
// All integers and floats are little-endian. The header lists every array
// with its shape, so the payload length is known before it is read and a
// short file is rejected without touching the destination.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "sgdjit/datagen.hpp"
#include "sgdjit/nets.hpp"
#include "sgdjit/schemes.hpp"
#include "sgdjit/tensor.hpp"

namespace sgdjit {

inline constexpr std::uint32_t dataset_format_version = 1;
inline constexpr std::uint32_t checkpoint_format_version = 1;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <class T>
T byteswap_if_big(T v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
}

template <class T>
void put(std::string& out, T v) {
  v = byteswap_if_big(v);
  char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  out.append(b, sizeof(T));
}

template <class T>
T get(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw FormatError("corrupt payload: unexpected end of data");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return byteswap_if_big(v);
}

inline std::string encode(const char (&magic)[9], std::uint32_t version, const nlohmann::json& header,
                          const std::vector<const Tensor*>& arrays) {
  std::string out(magic, 8);
  put(out, version);
  const std::string h = header.dump();
  put(out, static_cast<std::uint64_t>(h.size()));
  out += h;
  for (const Tensor* t : arrays)
    for (double v : t->data) put(out, v);
  return out;
}

struct Decoded {
  nlohmann::json header;
  std::size_t payload = 0;  // offset of the first f64
};

inline Decoded decode_header(const std::string& in, const char (&magic)[9], std::uint32_t version,
                             const char* what) {
  if (in.size() < 20 || in.compare(0, 8, magic) != 0)
    throw FormatError(std::string(what) + ": bad magic, not a " + what + " file");
  std::size_t pos = 8;
  const auto v = get<std::uint32_t>(in, pos);
  if (v != version)
    throw FormatError(std::string(what) + ": format version " + std::to_string(v) + ", expected " +
                      std::to_string(version));
  const auto len = get<std::uint64_t>(in, pos);
  if (pos + len > in.size()) throw FormatError(std::string(what) + ": corrupt payload: header truncated");
  Decoded d;
  try {
    d.header = nlohmann::json::parse(in.begin() + static_cast<std::ptrdiff_t>(pos),
                                     in.begin() + static_cast<std::ptrdiff_t>(pos + len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string(what) + ": corrupt header: " + e.what());
  }
  d.payload = pos + len;
  return d;
}

inline void check_payload(const std::string& in, std::size_t offset, std::size_t values, const char* what) {
  const std::size_t expected = offset + values * sizeof(double);
  if (in.size() != expected)
    throw FormatError(std::string(what) + ": corrupt payload: " + std::to_string(in.size()) + " bytes, expected " +
                      std::to_string(expected));
}

inline Tensor read_array(const std::string& in, std::size_t& pos, Shape shape) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = get<double>(in, pos);
  return t;
}

inline std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for reading");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void spit(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write to '" + path + "' failed");
}

inline constexpr char dataset_magic[9] = "SGDJDATA";
inline constexpr char checkpoint_magic[9] = "SGDJCKPT";

}  // namespace detail

inline std::string encode_dataset(const Dataset& d) {
  d.validate();
  nlohmann::json h = {{"x_shape", d.x.shape}, {"y_shape", d.y.shape}, {"op", d.op},
                      {"noise_variance", d.noise_variance}, {"split", d.split}, {"seed", d.seed},
                      {"meta", d.meta}};
  return detail::encode(detail::dataset_magic, dataset_format_version, h, {&d.x, &d.y});
}

inline Dataset decode_dataset_fields(const std::string& bytes) {
  const auto dec = detail::decode_header(bytes, detail::dataset_magic, dataset_format_version, "dataset");
  const auto& h = dec.header;
  Dataset d;
  const Shape xs = h.at("x_shape").get<Shape>(), ys = h.at("y_shape").get<Shape>();
  detail::check_payload(bytes, dec.payload, numel(xs) + numel(ys), "dataset");
  std::size_t pos = dec.payload;
  d.x = detail::read_array(bytes, pos, xs);
  d.y = detail::read_array(bytes, pos, ys);
  d.op = h.at("op");
  d.noise_variance = h.at("noise_variance").get<double>();
  d.split = h.at("split").get<std::string>();
  d.seed = h.at("seed").get<std::uint64_t>();
  d.meta = h.at("meta");
  d.validate();
  return d;
}

inline Dataset decode_dataset(const std::string& bytes) {
  try {
    return decode_dataset_fields(bytes);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset: corrupt header: ") + e.what());
  }
}

inline void save_dataset(const std::string& path, const Dataset& d) { detail::spit(path, encode_dataset(d)); }
inline Dataset load_dataset(const std::string& path) { return decode_dataset(detail::slurp(path)); }

inline void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = {{"epoch", r.epoch}, {"mean_loss", r.mean_loss}, {"wall_seconds", r.wall_seconds}};
}
inline void from_json(const nlohmann::json& j, EpochRecord& r) {
  j.at("epoch").get_to(r.epoch);
  j.at("mean_loss").get_to(r.mean_loss);
  j.at("wall_seconds").get_to(r.wall_seconds);
}

struct Checkpoint {
  Architecture architecture;
  std::vector<NamedTensor> parameters;
  nlohmann::json config;      // training config echo
  std::string rng_digest;     // digest of the seeds/streams used
  std::vector<EpochRecord> history;

  static Checkpoint of(const GradientNet& net, nlohmann::json config = nlohmann::json::object(),
                       std::string rng_digest = {}, std::vector<EpochRecord> history = {}) {
    return {net.architecture(), net.parameters(), std::move(config), std::move(rng_digest), std::move(history)};
  }

  /// Rebuilds the net; throws naming the first tensor that does not fit `arch`.
  GradientNet net() const { return GradientNet::from_parameters(architecture, parameters); }
  GradientNet net_as(const Architecture& arch) const { return GradientNet::from_parameters(arch, parameters); }
};

inline std::string encode_checkpoint(const Checkpoint& c) {
  nlohmann::json tensors = nlohmann::json::array();
  std::vector<const Tensor*> arrays;
  for (const auto& p : c.parameters) {
    tensors.push_back({{"name", p.name}, {"shape", p.value.shape}});
    arrays.push_back(&p.value);
  }
  nlohmann::json h = {{"architecture", c.architecture}, {"config", c.config}, {"rng_digest", c.rng_digest},
                      {"history", c.history}, {"tensors", tensors}};
  return detail::encode(detail::checkpoint_magic, checkpoint_format_version, h, arrays);
}

inline Checkpoint decode_checkpoint_fields(const std::string& bytes) {
  const auto dec = detail::decode_header(bytes, detail::checkpoint_magic, checkpoint_format_version, "checkpoint");
  const auto& h = dec.header;
  std::size_t total = 0;
  for (const auto& t : h.at("tensors")) total += numel(t.at("shape").get<Shape>());
  detail::check_payload(bytes, dec.payload, total, "checkpoint");
  Checkpoint c;
  c.architecture = h.at("architecture").get<Architecture>();
  c.config = h.at("config");
  c.rng_digest = h.at("rng_digest").get<std::string>();
  c.history = h.at("history").get<std::vector<EpochRecord>>();
  std::size_t pos = dec.payload;
  for (const auto& t : h.at("tensors"))
    c.parameters.push_back({t.at("name").get<std::string>(), detail::read_array(bytes, pos, t.at("shape").get<Shape>())});
  return c;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  try {
    return decode_checkpoint_fields(bytes);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: corrupt header: ") + e.what());
  }
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) { detail::spit(path, encode_checkpoint(c)); }
inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(detail::slurp(path)); }

}  // namespace sgdjit
