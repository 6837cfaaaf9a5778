#pragma once

// Checkpoint container: magic line, uint64 manifest length, JSON manifest, raw little-endian tensors.

#include "sft/common.hpp"
#include "sft/nn.hpp"

#include "json.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace sft {

inline constexpr const char* kCheckpointMagic = "SFTCKPT 1\n";
inline constexpr int kCheckpointVersion = 1;

struct TensorRecord {
  std::string group;
  Eigen::Index rows = 0, cols = 0;
  std::vector<double> data;  // row-major
};

struct CheckpointData {
  std::uint64_t config_hash = 0;
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, TensorRecord> tensors;
  std::int64_t optimizer_step = 0;
};

namespace ckpt_detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename S>
constexpr const char* dtype_name() {
  return sizeof(S) == 4 ? "f32" : "f64";
}

template <typename S>
void add_tensor(nlohmann::json& manifest, std::string& blob, const std::string& name, const std::string& group,
                const Mat<S>& m) {
  nlohmann::json t;
  t["name"] = name;
  t["group"] = group;
  t["shape"] = {m.rows(), m.cols()};
  t["dtype"] = dtype_name<S>();
  t["offset"] = blob.size();
  manifest["tensors"].push_back(t);
  blob.append(reinterpret_cast<const char*>(m.data()), sizeof(S) * std::size_t(m.size()));
}

}  // namespace ckpt_detail

/// Writes parameters (and optionally AdamW moments) with the architecture hash and free-form metadata.
template <typename S>
void save_checkpoint(const std::filesystem::path& path, const ParamStore<S>& store, std::uint64_t config_hash,
                     const nlohmann::json& meta = nlohmann::json::object(), const AdamW<S>* opt = nullptr) {
  nlohmann::json manifest;
  manifest["version"] = kCheckpointVersion;
  manifest["config_hash"] = config_hash;
  manifest["meta"] = meta;
  manifest["tensors"] = nlohmann::json::array();
  std::string blob;
  for (const auto* p : store.params()) ckpt_detail::add_tensor(manifest, blob, p->name, p->group, p->value);
  if (opt) {
    manifest["optimizer_step"] = opt->step_count();
    for (const auto& [name, st] : opt->state()) {
      ckpt_detail::add_tensor(manifest, blob, "optim.m." + name, "optim", st.m);
      ckpt_detail::add_tensor(manifest, blob, "optim.v." + name, "optim", st.v);
    }
  }
  const std::string text = manifest.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error(detail::cat("cannot write checkpoint ", tmp.string()));
    out << kCheckpointMagic;
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out << text;
    out.write(blob.data(), std::streamsize(blob.size()));
    if (!out) throw Error(detail::cat("short write to ", tmp.string()));
  }
  std::filesystem::rename(tmp, path);
}

inline CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(detail::cat("cannot open checkpoint ", path.string()));
  std::string magic(std::strlen(kCheckpointMagic), '\0');
  in.read(magic.data(), std::streamsize(magic.size()));
  if (!in || magic != kCheckpointMagic) throw ParseError(detail::cat(path.string(), ": not a checkpoint"));
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string text(len, '\0');
  in.read(text.data(), std::streamsize(len));
  if (!in) throw ParseError(detail::cat(path.string(), ": truncated manifest"));
  const auto manifest = nlohmann::json::parse(text);
  if (manifest.value("version", 0) != kCheckpointVersion)
    throw ParseError(detail::cat(path.string(), ": unsupported checkpoint version"));
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  CheckpointData ck;
  ck.config_hash = manifest.at("config_hash").get<std::uint64_t>();
  ck.meta = manifest.value("meta", nlohmann::json::object());
  ck.optimizer_step = manifest.value("optimizer_step", std::int64_t(0));
  for (const auto& t : manifest.at("tensors")) {
    TensorRecord r;
    r.group = t.at("group").get<std::string>();
    r.rows = t.at("shape")[0].get<Eigen::Index>();
    r.cols = t.at("shape")[1].get<Eigen::Index>();
    const auto dtype = t.at("dtype").get<std::string>();
    const auto offset = t.at("offset").get<std::size_t>();
    const std::size_t n = std::size_t(r.rows * r.cols);
    const std::size_t width = dtype == "f32" ? 4 : dtype == "f64" ? 8 : 0;
    if (!width) throw ParseError(detail::cat("unknown dtype ", dtype));
    if (offset + n * width > blob.size()) throw ParseError(detail::cat(path.string(), ": tensor data out of range"));
    r.data.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (width == 4) {
        float f;
        std::memcpy(&f, blob.data() + offset + 4 * i, 4);
        r.data[i] = f;
      } else {
        std::memcpy(&r.data[i], blob.data() + offset + 8 * i, 8);
      }
    }
    ck.tensors.emplace(t.at("name").get<std::string>(), std::move(r));
  }
  return ck;
}

namespace ckpt_detail {
template <typename S>
void assign(const std::string& name, const TensorRecord& r, Mat<S>& dst) {
  if (r.rows != dst.rows() || r.cols != dst.cols())
    throw ShapeError(detail::cat("checkpoint tensor '", name, "' has shape ", r.rows, "x", r.cols, ", expected ",
                                 dst.rows(), "x", dst.cols()));
  for (Eigen::Index i = 0; i < dst.size(); ++i) dst.data()[i] = S(r.data[std::size_t(i)]);
}
}  // namespace ckpt_detail

/// Loads every parameter of `store`; the hash must match unless expected_hash is 0.
template <typename S>
void load_params(const CheckpointData& ck, ParamStore<S>& store, std::uint64_t expected_hash) {
  if (expected_hash && ck.config_hash != expected_hash)
    throw ConfigError(detail::cat("checkpoint config hash ", ck.config_hash, " does not match the current config ",
                                  expected_hash));
  for (auto* p : store.params()) {
    auto it = ck.tensors.find(p->name);
    if (it == ck.tensors.end()) throw ConfigError(detail::cat("checkpoint lacks parameter '", p->name, "'"));
    ckpt_detail::assign(p->name, it->second, p->value);
  }
}

template <typename S>
void load_optimizer(const CheckpointData& ck, const ParamStore<S>& store, AdamW<S>& opt) {
  opt.set_step_count(ck.optimizer_step);
  opt.state().clear();
  for (const auto* p : store.params()) {
    auto m = ck.tensors.find("optim.m." + p->name);
    auto v = ck.tensors.find("optim.v." + p->name);
    if (m == ck.tensors.end() || v == ck.tensors.end()) continue;
    auto& st = opt.state()[p->name];
    st.m.resize(p->value.rows(), p->value.cols());
    st.v.resize(p->value.rows(), p->value.cols());
    ckpt_detail::assign(m->first, m->second, st.m);
    ckpt_detail::assign(v->first, v->second, st.v);
  }
}

}  // namespace sft
