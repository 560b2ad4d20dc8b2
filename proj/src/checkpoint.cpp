#include "triflow/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "triflow/tensor.hpp"

namespace triflow {

namespace {

constexpr const char* kMagicLine = "triflow-ckpt 1";

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error("checkpoint: " + msg); }

void push_f32le(std::string& out, float v) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  out.push_back(static_cast<char>(bits & 0xff));
  out.push_back(static_cast<char>((bits >> 8) & 0xff));
  out.push_back(static_cast<char>((bits >> 16) & 0xff));
  out.push_back(static_cast<char>((bits >> 24) & 0xff));
}

float take_f32le(const unsigned char* p) {
  const std::uint32_t bits = std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 |
                             std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
  return std::bit_cast<float>(bits);
}

struct DirEntry {
  std::string name;
  Shape shape;
  std::int64_t offset = 0;  // bytes from payload start
};

struct Header {
  CheckpointMeta meta;
  std::vector<DirEntry> dir;
  std::int64_t payload_bytes = 0;
  std::int64_t payload_start = 0;  // bytes from file start
};

Header read_header(std::istream& in, const std::string& path) {
  Header h;
  std::string line;
  if (!std::getline(in, line) || line != kMagicLine)
    fail("'" + path + "' is not a checkpoint (bad magic line)");
  while (std::getline(in, line)) {
    if (line == "end-header") {
      h.payload_start = static_cast<std::int64_t>(in.tellg());
      return h;
    }
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "step") {
      if (!(ls >> h.meta.step)) fail("malformed step line in '" + path + "'");
    } else if (tag == "rng") {
      std::getline(ls, h.meta.rng_state);
      if (!h.meta.rng_state.empty() && h.meta.rng_state.front() == ' ')
        h.meta.rng_state.erase(0, 1);
    } else if (tag == "config") {
      std::string rest;
      std::getline(ls, rest);
      if (!rest.empty() && rest.front() == ' ') rest.erase(0, 1);
      const auto eq = rest.find('=');
      if (eq == std::string::npos || eq == 0) fail("malformed config line in '" + path + "'");
      h.meta.config.set(rest.substr(0, eq), rest.substr(eq + 1));
    } else if (tag == "tensor") {
      DirEntry e;
      int ndim = 0;
      if (!(ls >> e.name >> e.offset >> ndim) || ndim < 0 || ndim > 8)
        fail("malformed tensor line in '" + path + "'");
      e.shape.resize(ndim);
      for (int i = 0; i < ndim; ++i)
        if (!(ls >> e.shape[i]) || e.shape[i] <= 0)
          fail("malformed tensor shape in '" + path + "'");
      h.dir.push_back(std::move(e));
    } else if (tag == "payload") {
      if (!(ls >> h.payload_bytes)) fail("malformed payload line in '" + path + "'");
    } else {
      fail("unknown header line '" + line + "' in '" + path + "'");
    }
  }
  fail("'" + path + "' ended before end-header");
}

}  // namespace

void save_checkpoint(const std::string& path, const std::vector<NamedParam<float>>& params,
                     const CheckpointMeta& meta) {
  std::ostringstream header;
  header << kMagicLine << '\n';
  header << "step " << meta.step << '\n';
  if (!meta.rng_state.empty()) header << "rng " << meta.rng_state << '\n';
  for (const auto& [k, v] : meta.config.items()) header << "config " << k << '=' << v << '\n';

  std::string payload;
  std::int64_t offset = 0;
  for (const auto& p : params) {
    if (!p.tensor.defined()) fail("parameter '" + p.name + "' is undefined");
    header << "tensor " << p.name << ' ' << offset << ' ' << p.tensor.ndim();
    for (int i = 0; i < p.tensor.ndim(); ++i) header << ' ' << p.tensor.dim(i);
    header << '\n';
    for (float v : p.tensor.data()) push_f32le(payload, v);
    offset = static_cast<std::int64_t>(payload.size());
  }
  header << "payload " << payload.size() << '\n';
  header << "end-header\n";

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("cannot open '" + path + "' for writing");
  const auto text = header.str();
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) fail("short write to '" + path + "'");
}

CheckpointMeta read_checkpoint_meta(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open '" + path + "'");
  return read_header(in, path).meta;
}

CheckpointMeta load_checkpoint(const std::string& path, std::vector<NamedParam<float>>& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open '" + path + "'");
  auto header = read_header(in, path);

  std::string payload(static_cast<size_t>(header.payload_bytes), '\0');
  in.read(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (in.gcount() != static_cast<std::streamsize>(payload.size()))
    fail("'" + path + "' payload is truncated");

  std::vector<bool> filled(params.size(), false);
  for (const auto& entry : header.dir) {
    bool matched = false;
    for (size_t i = 0; i < params.size(); ++i) {
      if (params[i].name != entry.name) continue;
      if (filled[i]) fail("duplicate tensor '" + entry.name + "' in '" + path + "'");
      if (params[i].tensor.shape() != entry.shape)
        fail("tensor '" + entry.name + "' has shape " + shape_str(entry.shape) + " on disk but " +
             shape_str(params[i].tensor.shape()) + " in the model");
      const auto n = params[i].tensor.size();
      if (entry.offset < 0 || entry.offset + n * 4 > header.payload_bytes)
        fail("tensor '" + entry.name + "' payload lies outside the file");
      auto dst = params[i].tensor.data_mut();
      const auto* src = reinterpret_cast<const unsigned char*>(payload.data()) + entry.offset;
      for (std::int64_t j = 0; j < n; ++j) dst[j] = take_f32le(src + 4 * j);
      filled[i] = matched = true;
      break;
    }
    if (!matched) fail("tensor '" + entry.name + "' in '" + path + "' has no matching parameter");
  }
  for (size_t i = 0; i < params.size(); ++i)
    if (!filled[i]) fail("parameter '" + params[i].name + "' missing from '" + path + "'");
  return header.meta;
}

}  // namespace triflow
