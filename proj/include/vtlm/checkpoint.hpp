#pragma once

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "vtlm/error.hpp"
#include "vtlm/optim.hpp"
#include "vtlm/params.hpp"

namespace vtlm {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

/// Binary checkpoint:
///
///   "VTLMCKPT" | u32 version | u64 header bytes | header (UTF-8 JSON)
///   u32 tensor count, then per tensor:
///     u32 name bytes | name | u8 dtype (1 = f32) | u32 rank | u64 extents[rank]
///     | little-endian f32 payload
struct Checkpoint {
  nlohmann::json header = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const Tensor<float>& tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return t;
    }
    throw DataError("checkpoint has no tensor '" + name + "'");
  }

  bool operator==(const Checkpoint& o) const {
    if (header != o.header || tensors.size() != o.tensors.size()) return false;
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      if (tensors[i].first != o.tensors[i].first || tensors[i].second.shape() != o.tensors[i].second.shape() ||
          tensors[i].second.values() != o.tensors[i].second.values()) {
        return false;
      }
    }
    return true;
  }
};

inline constexpr char kCheckpointMagic[8] = {'V', 'T', 'L', 'M', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 1;

namespace detail {

template <class V>
void put(std::string& out, V v) {
  char buf[sizeof(V)];
  std::memcpy(buf, &v, sizeof(V));
  out.append(buf, sizeof(V));
}

class Reader {
 public:
  Reader(const std::string& data, std::string path) : data_(data), path_(std::move(path)) {}

  template <class V>
  V get() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, data_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw DataError(path_ + ": truncated checkpoint");
  }
  const std::string& data_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize(const Checkpoint& ck) {
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  const std::string header = ck.header.dump();
  detail::put<std::uint64_t>(out, header.size());
  out += header;
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put<std::uint8_t>(out, kDtypeF32);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (Index e : t.shape()) detail::put<std::uint64_t>(out, static_cast<std::uint64_t>(e));
    out.append(reinterpret_cast<const char*>(t.values().data()), t.values().size() * sizeof(float));
  }
  return out;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const std::string bytes = serialize(ck);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw DataError("cannot move checkpoint into place at " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path);
  const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  detail::Reader rd(data, path);
  if (rd.bytes(sizeof kCheckpointMagic) != std::string(kCheckpointMagic, sizeof kCheckpointMagic)) {
    throw DataError(path + ": not a checkpoint");
  }
  if (rd.get<std::uint32_t>() != kCheckpointVersion) throw DataError(path + ": unsupported checkpoint version");
  Checkpoint ck;
  const auto hlen = rd.get<std::uint64_t>();
  try {
    ck.header = nlohmann::json::parse(rd.bytes(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": bad checkpoint header: " + e.what());
  }
  const auto count = rd.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto nlen = rd.get<std::uint32_t>();
    std::string name = rd.bytes(nlen);
    if (rd.get<std::uint8_t>() != kDtypeF32) throw DataError(path + ": unsupported dtype for " + name);
    const auto rank = rd.get<std::uint32_t>();
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(static_cast<Index>(rd.get<std::uint64_t>()));
    const std::string payload = rd.bytes(static_cast<std::size_t>(numel_of(shape)) * sizeof(float));
    std::vector<float> values(static_cast<std::size_t>(numel_of(shape)));
    std::memcpy(values.data(), payload.data(), payload.size());
    ck.tensors.emplace_back(std::move(name), Tensor<float>(std::move(shape), std::move(values)));
  }
  if (!rd.done()) throw DataError(path + ": trailing bytes after checkpoint");
  return ck;
}

/// Appends a parameter store under `prefix`.
inline void add_params(Checkpoint& ck, const std::string& prefix, const ParamStore<float>& ps) {
  for (const auto& [name, t] : ps) ck.tensors.emplace_back(prefix + name, t.clone());
}

inline ParamStore<float> extract_params(const Checkpoint& ck, const std::string& prefix) {
  ParamStore<float> ps;
  for (const auto& [name, t] : ck.tensors) {
    if (name.rfind(prefix, 0) == 0) ps.add(name.substr(prefix.size()), t.clone());
  }
  if (ps.size() == 0) throw DataError("checkpoint has no parameters under '" + prefix + "'");
  return ps;
}

/// Optimizer moments go in as tensors, counters into the header.
inline void add_optimizer(Checkpoint& ck, const Adam<float>& adam, const ParamStore<float>& ps) {
  for (const auto& [name, m] : adam.first_moments()) {
    ck.tensors.emplace_back("adam.m/" + name, Tensor<float>(ps.at(name).shape(), m));
  }
  for (const auto& [name, v] : adam.second_moments()) {
    ck.tensors.emplace_back("adam.v/" + name, Tensor<float>(ps.at(name).shape(), v));
  }
  ck.header["optimizer"] = {{"steps", adam.steps()},
                            {"skipped", adam.skipped()},
                            {"clipped", adam.clipped()},
                            {"beta1", adam.config().beta1},
                            {"beta2", adam.config().beta2},
                            {"eps", adam.config().eps},
                            {"clip_norm", adam.config().clip_norm}};
}

inline Adam<float> extract_optimizer(const Checkpoint& ck) {
  if (!ck.header.contains("optimizer")) throw DataError("checkpoint carries no optimizer state");
  const auto& o = ck.header["optimizer"];
  AdamConfig cfg{o.at("beta1").get<double>(), o.at("beta2").get<double>(), o.at("eps").get<double>(), o.at("clip_norm").get<double>()};
  Adam<float> adam(cfg);
  for (const auto& [name, t] : ck.tensors) {
    if (name.rfind("adam.m/", 0) == 0) adam.first_moments()[name.substr(7)] = t.values();
    if (name.rfind("adam.v/", 0) == 0) adam.second_moments()[name.substr(7)] = t.values();
  }
  adam.restore(o.at("steps").get<long>(), o.at("skipped").get<long>(), o.at("clipped").get<long>());
  return adam;
}

}  // namespace vtlm
