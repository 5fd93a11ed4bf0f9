// SPDX-License-Identifier: Apache-2.0

#include "blu/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "blu/hash.hpp"

namespace blu {

using nlohmann::json;

namespace {

void put_f64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

double get_f64(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<double>(bits);
}

json model_json(const DenoiserConfig& m) {
  return {{"input_dim", m.input_dim},         {"hidden", m.hidden},
          {"time_embed_dim", m.time_embed_dim}, {"concept_count", m.concept_count},
          {"concept_embed_dim", m.concept_embed_dim}, {"feature_taps", m.feature_taps}};
}

DenoiserConfig model_from(const json& j) {
  DenoiserConfig m;
  m.input_dim = j.at("input_dim").get<std::size_t>();
  m.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  m.time_embed_dim = j.at("time_embed_dim").get<std::size_t>();
  m.concept_count = j.at("concept_count").get<std::size_t>();
  m.concept_embed_dim = j.at("concept_embed_dim").get<std::size_t>();
  m.feature_taps = j.at("feature_taps").get<std::vector<std::size_t>>();
  m.validate();
  return m;
}

[[noreturn]] void corrupt(const std::string& why) { throw std::runtime_error("bad checkpoint: " + why); }

// Stored parameters must match the layout the model config implies.
void check_layout(const DenoiserConfig& model, const ParamStore& params) {
  Stream rng(0);
  const ParamStore ref = init_params(model, rng);
  if (ref.names() != params.names()) corrupt("parameter names do not match the model config");
  for (const auto& [name, p] : ref)
    if (p.value.shape() != params.value(name).shape())
      corrupt("tensor '" + name + "' has shape " + shape_str(params.value(name).shape()) + ", model expects " +
              shape_str(p.value.shape()));
}

}  // namespace

std::string serialize_checkpoint(Checkpoint& ckpt) {
  check_layout(ckpt.model, ckpt.params);
  std::string payload;
  std::ostringstream dir;
  std::size_t count = 0;
  for (const auto& [name, p] : ckpt.params) {
    if (name.find_first_of(" \t\n") != std::string::npos) throw std::invalid_argument("tensor name with whitespace");
    dir << "tensor " << name << ' ' << p.value.rank();
    for (std::size_t d : p.value.shape()) dir << ' ' << d;
    dir << " offset " << payload.size() << " masked " << (p.mask ? 1 : 0) << '\n';
    for (double v : p.value.data()) put_f64(payload, v);
    if (p.mask)
      for (double v : p.mask->data()) put_f64(payload, v);
    ++count;
  }
  ckpt.content_hash = git_blob_sha1_hex(payload);
  std::ostringstream head;
  head << "blu-checkpoint\n"
       << "version " << kCheckpointVersion << '\n'
       << "config_digest " << (ckpt.config_digest.empty() ? "-" : ckpt.config_digest) << '\n'
       << "step " << ckpt.step << '\n'
       << "model " << model_json(ckpt.model).dump() << '\n'
       << "tensors " << count << '\n'
       << dir.str() << "content_hash " << ckpt.content_hash << '\n'
       << "payload_bytes " << payload.size() << '\n'
       << "end\n";
  return head.str() + payload;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  const std::size_t end = bytes.find("\nend\n");
  if (bytes.rfind("blu-checkpoint\n", 0) != 0 || end == std::string::npos) corrupt("missing header");
  std::istringstream head(bytes.substr(0, end + 1));
  const std::string payload = bytes.substr(end + 5);
  std::string line, word;
  std::getline(head, line);

  auto expect = [&](const char* key) {
    if (!std::getline(head, line) || line.rfind(std::string(key) + " ", 0) != 0)
      corrupt(std::string("expected '") + key + "' line");
    return line.substr(std::strlen(key) + 1);
  };
  Checkpoint ck;
  const int version = std::stoi(expect("version"));
  if (version != kCheckpointVersion) corrupt("unsupported format version " + std::to_string(version));
  ck.config_digest = expect("config_digest");
  if (ck.config_digest == "-") ck.config_digest.clear();
  ck.step = std::stoll(expect("step"));
  try {
    ck.model = model_from(json::parse(expect("model")));
  } catch (const json::exception& e) {
    corrupt(std::string("model config: ") + e.what());
  }
  const std::size_t count = std::stoull(expect("tensors"));
  struct Entry {
    std::string name;
    Shape shape;
    std::size_t offset;
    bool masked;
  };
  std::vector<Entry> entries;
  for (std::size_t i = 0; i < count; ++i) {
    std::istringstream ls(expect("tensor"));
    Entry e;
    std::size_t rank = 0;
    int masked = 0;
    ls >> e.name >> rank;
    e.shape.resize(rank);
    for (auto& d : e.shape) ls >> d;
    ls >> word >> e.offset;
    if (word != "offset") corrupt("tensor directory line");
    ls >> word >> masked;
    if (!ls || word != "masked") corrupt("tensor directory line");
    e.masked = masked != 0;
    entries.push_back(std::move(e));
  }
  ck.content_hash = expect("content_hash");
  const std::size_t size = std::stoull(expect("payload_bytes"));
  if (payload.size() != size) corrupt("payload is " + std::to_string(payload.size()) + " bytes, header says " +
                                      std::to_string(size));
  if (git_blob_sha1_hex(payload) != ck.content_hash) corrupt("content hash mismatch");

  for (const auto& e : entries) {
    std::size_t n = 1;
    for (std::size_t d : e.shape) n *= d;
    const std::size_t need = n * 8 * (e.masked ? 2 : 1);
    if (e.offset + need > payload.size()) corrupt("tensor '" + e.name + "' runs past the payload");
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = get_f64(payload.data() + e.offset + 8 * i);
    ck.params.add(e.name, Tensor(e.shape, std::move(v)));
    if (e.masked) {
      std::vector<double> m(n);
      for (std::size_t i = 0; i < n; ++i) {
        m[i] = get_f64(payload.data() + e.offset + 8 * (n + i));
        if (m[i] != 0.0 && m[i] != 1.0) corrupt("mask of '" + e.name + "' is not binary");
      }
      ck.params.attach_mask(e.name, std::make_shared<const Tensor>(e.shape, std::move(m)));
    }
  }
  check_layout(ck.model, ck.params);
  return ck;
}

void save_checkpoint(Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(ckpt);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return deserialize_checkpoint(ss.str());
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

}  // namespace blu
