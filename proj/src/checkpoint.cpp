#include "rvit/checkpoint.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "binary_io.hpp"

namespace rvit {

namespace detail {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  const std::filesystem::path parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("short write to " + path);
}

}  // namespace detail

std::string encode_checkpoint(const Network& net, const nlohmann::json& meta) {
  detail::ByteWriter w;
  w.put_bytes("RVIT");
  w.put<std::uint32_t>(kCheckpointVersion);
  const std::string header = nlohmann::json{{"model", net.config().to_json()}, {"meta", meta}}.dump();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(header.size()));
  w.put_bytes(header);
  const Params& params = net.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(params.name(i).size()));
    w.put_bytes(params.name(i));
    const Tensor& t = params[i];
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) w.put<std::uint64_t>(e);
    for (double v : t.data()) w.put<double>(v);
  }
  return std::move(w.str());
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  detail::ByteReader r(bytes, "checkpoint");
  if (r.get_bytes(4, "magic") != "RVIT") throw ParseError("checkpoint: bad magic", 0);
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) r.fail("unsupported version " + std::to_string(version));
  const auto json_len = r.get<std::uint32_t>("header length");
  const std::size_t json_at = r.offset();
  const std::string_view header_text = r.get_bytes(json_len, "header");
  Checkpoint ckpt;
  try {
    const auto header = nlohmann::json::parse(header_text);
    ckpt.config = ModelConfig::from_json(header.at("model"));
    ckpt.meta = header.value("meta", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint: malformed header: ") + e.what(), json_at);
  }
  while (r.remaining() > 0) {
    const auto name_len = r.get<std::uint32_t>("tensor name length");
    std::string name(r.get_bytes(name_len, "tensor name"));
    const auto rank = r.get<std::uint32_t>("tensor rank");
    if (rank > 8) r.fail("implausible tensor rank " + std::to_string(rank));
    Shape shape;
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      shape.push_back(r.get<std::uint64_t>("tensor extent"));
      // Checked as we go so corrupt extents cannot overflow the product.
      if (shape.back() != 0 && count > r.remaining() / sizeof(double) / shape.back()) {
        r.fail("tensor larger than the remaining input");
      }
      count *= shape.back();
    }
    r.require(count * sizeof(double), "tensor values");
    std::vector<double> data(count);
    for (double& v : data) v = r.get<double>("tensor value");
    ckpt.params.add(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  // Validates names and extents against the config.
  try {
    Network check(ckpt.config, ckpt.params);
  } catch (const ParseError&) {
    throw;
  } catch (const Error& e) {
    throw ParseError(std::string("checkpoint: tensors do not match the model: ") + e.what(), json_at);
  }
  return ckpt;
}

void write_checkpoint(const std::string& path, const Network& net, const nlohmann::json& meta) {
  detail::write_file(path, encode_checkpoint(net, meta));
}

Checkpoint read_checkpoint(const std::string& path) { return decode_checkpoint(detail::read_file(path)); }

}  // namespace rvit
