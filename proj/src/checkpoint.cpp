#include "lqseg/checkpoint.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

#include "lqseg/errors.hpp"

namespace lqseg {

namespace {

void put_u16le(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u64le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

std::string tensor_payload_f32(const Tensor& t) {
  std::string bytes;
  bytes.reserve(static_cast<std::size_t>(t.numel()) * 4);
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    const float f = static_cast<float>(t.data()[i]);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    for (int b = 0; b < 4; ++b) bytes.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
  }
  return bytes;
}

std::uint32_t payload_crc(const std::string& bytes) {
  return static_cast<std::uint32_t>(
      crc32(0, reinterpret_cast<const Bytef*>(bytes.data()),
            static_cast<uInt>(bytes.size())));
}

}  // namespace

void round_to_f32(Tensor& t) {
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t.data()[i] = static_cast<double>(static_cast<float>(t.data()[i]));
}

void save_checkpoint(const std::string& path, const CheckpointData& data) {
  nlohmann::json header;
  header["config"] = data.config;
  header["iteration"] = data.iteration;
  header["opt_step"] = data.opt_step;

  std::string payload;
  nlohmann::json dir;
  for (const auto& [name, tensor] : data.tensors) {
    const std::string bytes = tensor_payload_f32(tensor);
    nlohmann::json entry;
    entry["shape"] = tensor.shape();
    entry["offset"] = payload.size();
    entry["length"] = bytes.size();
    entry["crc32"] = payload_crc(bytes);
    dir[name] = std::move(entry);
    payload += bytes;
  }
  header["tensors"] = std::move(dir);

  std::string out;
  out.append(kCheckpointMagic, 4);
  put_u16le(out, kCheckpointVersion);
  const std::string header_str = header.dump();
  put_u64le(out, header_str.size());
  out += header_str;
  out += payload;

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ContractError("save_checkpoint: cannot open " + path + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw ContractError("save_checkpoint: write failed for " + path);
}

CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParseError("load_checkpoint: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
  const unsigned char* data = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t total = bytes.size();

  if (total < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw ParseError("load_checkpoint: bad magic in " + path, 0);
  if (total < 6)
    throw ParseError("load_checkpoint: truncated version field", 4);
  const std::uint16_t version =
      static_cast<std::uint16_t>(data[4] | (static_cast<std::uint16_t>(data[5]) << 8));
  if (version != kCheckpointVersion)
    throw ParseError("load_checkpoint: unsupported version " + std::to_string(version), 4);
  if (total < 14)
    throw ParseError("load_checkpoint: truncated header length", 6);
  const std::uint64_t header_len = get_u64le(data + 6);
  if (14 + header_len > total)
    throw ParseError("load_checkpoint: truncated header", 14);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 14,
                                   bytes.begin() + 14 + static_cast<long>(header_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("load_checkpoint: malformed header JSON: ") + e.what(),
                     14 + static_cast<long long>(e.byte));
  }

  const std::size_t payload_start = 14 + header_len;
  const std::size_t payload_size = total - payload_start;

  CheckpointData out;
  out.config = header.value("config", nlohmann::json::object());
  out.iteration = header.value("iteration", std::int64_t{0});
  out.opt_step = header.value("opt_step", std::int64_t{0});

  if (!header.contains("tensors"))
    throw ParseError("load_checkpoint: header missing tensor directory", 14);
  for (const auto& [name, entry] : header["tensors"].items()) {
    const std::vector<int> shape = entry["shape"].get<std::vector<int>>();
    const std::size_t offset = entry["offset"].get<std::size_t>();
    const std::size_t length = entry["length"].get<std::size_t>();
    if (offset + length > payload_size)
      throw ParseError("load_checkpoint: tensor '" + name + "' extent outside payload",
                       static_cast<long long>(payload_start + offset));
    if (length != static_cast<std::size_t>(shape_numel(shape)) * 4)
      throw ParseError("load_checkpoint: tensor '" + name + "' length/shape mismatch",
                       static_cast<long long>(payload_start + offset));
    const std::string view = bytes.substr(payload_start + offset, length);
    if (payload_crc(view) != entry["crc32"].get<std::uint32_t>())
      throw ParseError("load_checkpoint: tensor '" + name + "' payload corrupt",
                       static_cast<long long>(payload_start + offset));
    std::vector<double> values(length / 4);
    for (std::size_t i = 0; i < values.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b)
        bits |= static_cast<std::uint32_t>(
                    static_cast<unsigned char>(view[i * 4 + static_cast<std::size_t>(b)]))
                << (8 * b);
      float fv;
      std::memcpy(&fv, &bits, 4);
      values[i] = static_cast<double>(fv);
    }
    out.tensors.emplace_back(name, Tensor::from_data(shape, std::move(values)));
  }
  return out;
}

}  // namespace lqseg
