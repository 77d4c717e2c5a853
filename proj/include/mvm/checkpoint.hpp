#pragma once

// Precision-independent snapshot of a model, its optimizer and RNG.
//
// File layout (little-endian):
//   "MVMC" | u32 version | str config_text | u64 step | str rng_state
//   | u32 n_params | n_params x (u32 ndim, ndim x u32 dims, f64 data[])
//   | u64 optimizer_step | n_params x (f64 m[], f64 v[]) | u32 crc32

#include <cstdint>
#include <filesystem>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mvm/config.hpp"
#include "mvm/io.hpp"
#include "mvm/model.hpp"
#include "mvm/optim.hpp"

namespace mvm {

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

struct StoredArray {
  Shape shape;
  std::vector<double> data;
  bool operator==(const StoredArray&) const = default;
};

struct Checkpoint {
  ModelConfig config;
  std::uint64_t step = 0;
  std::string rng_state;
  std::vector<StoredArray> parameters;
  std::uint64_t optimizer_step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;

  bool operator==(const Checkpoint&) const = default;
};

inline std::string rng_state_string(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline std::mt19937_64 rng_from_state(const std::string& state) {
  std::mt19937_64 rng;
  if (!state.empty()) {
    std::istringstream is(state);
    is >> rng;
    if (!is) throw FormatError("checkpoint: malformed RNG state");
  }
  return rng;
}

template <class T>
Checkpoint make_checkpoint(const LipReadingModel<T>& model, const OptimizerState<T>* opt, std::uint64_t step,
                           const std::mt19937_64& rng) {
  Checkpoint c;
  c.config = model.config;
  c.step = step;
  c.rng_state = rng_state_string(rng);
  for (const auto& p : model.parameters())
    c.parameters.push_back({p.shape(), std::vector<double>(p.data().begin(), p.data().end())});
  if (opt) {
    c.optimizer_step = opt->step;
    for (const auto& m : opt->first_moment) c.first_moment.emplace_back(m.begin(), m.end());
    for (const auto& v : opt->second_moment) c.second_moment.emplace_back(v.begin(), v.end());
  } else {
    for (const auto& p : c.parameters) {
      c.first_moment.emplace_back(p.data.size(), 0.0);
      c.second_moment.emplace_back(p.data.size(), 0.0);
    }
  }
  return c;
}

/// Rebuilds the model (in precision T) from the stored config and arrays.
template <class T>
LipReadingModel<T> model_from_checkpoint(const Checkpoint& c) {
  auto model = LipReadingModel<T>::init(c.config);
  auto params = model.parameters();
  if (params.size() != c.parameters.size())
    throw FormatError("checkpoint: holds " + std::to_string(c.parameters.size()) + " arrays, config implies " +
                      std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != c.parameters[i].shape)
      throw FormatError("checkpoint: array " + std::to_string(i) + " has shape " + shape_str(c.parameters[i].shape) +
                        ", expected " + shape_str(params[i].shape()));
    auto d = params[i].data();
    for (std::size_t k = 0; k < d.size(); ++k) d[k] = static_cast<T>(c.parameters[i].data[k]);
  }
  return model;
}

template <class T>
OptimizerState<T> optimizer_from_checkpoint(const Checkpoint& c) {
  OptimizerState<T> st;
  st.settings = {c.config.lr, c.config.beta1, c.config.beta2, c.config.adam_eps, c.config.weight_decay};
  st.step = c.optimizer_step;
  for (const auto& m : c.first_moment) st.first_moment.emplace_back(m.begin(), m.end());
  for (const auto& v : c.second_moment) st.second_moment.emplace_back(v.begin(), v.end());
  return st;
}

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  ByteWriter w;
  w.bytes("MVMC");
  w.u32(kCheckpointFormatVersion);
  w.str(to_text(c.config));
  w.u64(c.step);
  w.str(c.rng_state);
  w.u32(static_cast<std::uint32_t>(c.parameters.size()));
  for (const auto& p : c.parameters) {
    w.u32(static_cast<std::uint32_t>(p.shape.size()));
    for (auto d : p.shape) w.u32(static_cast<std::uint32_t>(d));
    for (double x : p.data) w.f64(x);
  }
  w.u64(c.optimizer_step);
  for (std::size_t i = 0; i < c.parameters.size(); ++i) {
    for (double x : c.first_moment.at(i)) w.f64(x);
    for (double x : c.second_moment.at(i)) w.f64(x);
  }
  w.seal();
  return w.buffer();
}

inline Checkpoint decode_checkpoint(ByteReader r) {
  r.verify_seal();
  r.expect_magic("MVMC");
  const auto version = r.u32();
  if (version != kCheckpointFormatVersion)
    throw FormatError(r.context() + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  try {
    c.config = parse_config_text(r.str());
  } catch (const std::invalid_argument& e) {
    throw FormatError(r.context() + ": embedded config: " + e.what());
  }
  c.step = r.u64();
  c.rng_state = r.str();
  const auto n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    StoredArray a;
    const auto nd = r.u32();
    if (nd > 8) throw FormatError(r.context() + ": implausible array rank");
    for (std::uint32_t k = 0; k < nd; ++k) a.shape.push_back(r.u32());
    a.data.resize(shape_size(a.shape));
    for (auto& x : a.data) x = r.f64();
    c.parameters.push_back(std::move(a));
  }
  c.optimizer_step = r.u64();
  for (const auto& p : c.parameters) {
    std::vector<double> m(p.data.size()), v(p.data.size());
    for (auto& x : m) x = r.f64();
    for (auto& x : v) x = r.f64();
    c.first_moment.push_back(std::move(m));
    c.second_moment.push_back(std::move(v));
  }
  r.expect_end();
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  ByteWriter w;
  const auto bytes = encode_checkpoint(c);
  w.bytes(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  w.save(path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(ByteReader::load(path));
}

}  // namespace mvm
