#pragma once

// Multi-head visual-audio memory: h key memories addressed by projected
// visual queries, one shared value memory holding audio representations.

#include <cmath>
#include <cstddef>
#include <iomanip>
#include <limits>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "mvm/numerics.hpp"

namespace mvm {

/// One memory level. head_keys[l] is N x D/h, value is N x D,
/// query_projections[l] is D x D/h and output_projection is (D*h) x D.
template <class T>
struct MemoryBank {
  std::vector<Array<T>> head_keys;
  Array<T> value;
  std::vector<Array<T>> query_projections;
  Array<T> output_projection;
  Array<T> fusion_gain;
  Array<T> fusion_bias;
  T alpha = T{16};

  std::size_t slots() const { return value.rows(); }
  std::size_t dim() const { return value.cols(); }
  std::size_t heads() const { return head_keys.size(); }

  /// Uniform(-1/sqrt(D), 1/sqrt(D)) for memories and projections; unit gain,
  /// zero bias.
  template <class Rng>
  static MemoryBank init(std::size_t slots, std::size_t dim, std::size_t heads, T alpha, Rng& rng) {
    if (heads == 0 || dim % heads != 0)
      throw std::invalid_argument("MemoryBank: D=" + std::to_string(dim) + " is not divisible by h=" +
                                  std::to_string(heads));
    if (slots == 0) throw std::invalid_argument("MemoryBank: N must be positive");
    const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
    std::uniform_real_distribution<double> u(-bound, bound);
    auto draw = [&](Shape shape) {
      std::vector<T> d(shape_size(shape));
      for (auto& v : d) v = static_cast<T>(u(rng));
      return Array<T>(std::move(shape), std::move(d), true);
    };
    const std::size_t sub = dim / heads;
    MemoryBank b;
    b.alpha = alpha;
    for (std::size_t l = 0; l < heads; ++l) b.head_keys.push_back(draw({slots, sub}));
    b.value = draw({slots, dim});
    for (std::size_t l = 0; l < heads; ++l) b.query_projections.push_back(draw({dim, sub}));
    b.output_projection = draw({dim * heads, dim});
    b.fusion_gain = Array<T>(Shape{dim}, std::vector<T>(dim, T{1}), true);
    b.fusion_bias = Array<T>(Shape{dim}, true);
    return b;
  }

  /// Declared parameter order, used by the optimizer and checkpoints.
  std::vector<Array<T>> parameters() const {
    std::vector<Array<T>> ps(head_keys.begin(), head_keys.end());
    ps.push_back(value);
    ps.insert(ps.end(), query_projections.begin(), query_projections.end());
    ps.push_back(output_projection);
    ps.push_back(fusion_gain);
    ps.push_back(fusion_bias);
    return ps;
  }

  /// Key memories plus query projections: N*D + D*D for any h.
  std::size_t key_side_parameter_count() const {
    std::size_t n = 0;
    for (const auto& k : head_keys) n += k.size();
    for (const auto& q : query_projections) n += q.size();
    return n;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.size();
    return n;
  }
};

/// heads[l] is [frames x N]; each row is a probability vector over slots.
template <class T>
struct AddressingTensor {
  std::vector<Array<T>> heads;

  std::size_t num_heads() const { return heads.size(); }
  std::size_t frames() const { return heads.empty() ? 0 : heads.front().rows(); }
  std::size_t slots() const { return heads.empty() ? 0 : heads.front().cols(); }
};

template <class T>
struct MvmOutput {
  Array<T> fused;
  Array<T> audio_knowledge;
  AddressingTensor<T> addressing;
};

/// Per head l and frame j: softmax over slots of
/// alpha * cos(head_keys[l][i], query[j] * query_projections[l]).
template <class T>
AddressingTensor<T> address_heads(Tape<T>* tape, const MemoryBank<T>& bank, const Array<T>& query) {
  if (query.ndim() != 2 || query.cols() != bank.dim())
    throw std::invalid_argument("address_heads: query " + shape_str(query.shape()) +
                                " does not match memory dimension " + std::to_string(bank.dim()));
  AddressingTensor<T> out;
  out.heads.reserve(bank.heads());
  for (std::size_t l = 0; l < bank.heads(); ++l) {
    auto projected = op::matmul(tape, query, bank.query_projections[l]);
    auto sim = op::cosine_matrix(tape, projected, bank.head_keys[l]);
    out.heads.push_back(op::softmax_rows(tape, sim, bank.alpha));
  }
  return out;
}

/// a_l[j] = sum_i A_l[j][i] * value[i], one read per head.
template <class T>
std::vector<Array<T>> read_value(Tape<T>* tape, const AddressingTensor<T>& addressing, const Array<T>& value) {
  std::vector<Array<T>> reads;
  reads.reserve(addressing.num_heads());
  for (const auto& a : addressing.heads) {
    if (a.cols() != value.rows())
      throw std::invalid_argument("read_value: addressing has " + std::to_string(a.cols()) +
                                  " slots, value memory has " + std::to_string(value.rows()));
    reads.push_back(op::matmul(tape, a, value));
  }
  return reads;
}

/// Concat(a_1 .. a_h) * output_projection, heads in ascending order.
template <class T>
Array<T> aggregate_heads(Tape<T>* tape, const std::vector<Array<T>>& reads, const Array<T>& output_projection) {
  if (reads.empty()) throw std::invalid_argument("aggregate_heads: no reads");
  const std::size_t d = reads.front().cols();
  for (const auto& r : reads)
    if (r.shape() != reads.front().shape()) throw std::invalid_argument("aggregate_heads: reads differ in shape");
  if (output_projection.ndim() != 2 || output_projection.rows() != d * reads.size())
    throw std::invalid_argument("aggregate_heads: projection " + shape_str(output_projection.shape()) +
                                " does not match " + std::to_string(reads.size()) + " heads of width " +
                                std::to_string(d));
  return op::matmul(tape, op::concat_cols(tape, reads), output_projection);
}

/// layer_norm(visual + audio_knowledge) per frame.
template <class T>
Array<T> fuse(Tape<T>* tape, const Array<T>& visual, const Array<T>& audio_knowledge, const Array<T>& gain,
              const Array<T>& bias) {
  if (visual.shape() != audio_knowledge.shape())
    throw std::invalid_argument("fuse: shape mismatch " + shape_str(visual.shape()) + " vs " +
                                shape_str(audio_knowledge.shape()));
  return op::layer_norm_rows(tape, op::add(tape, visual, audio_knowledge), gain, bias);
}

/// Audio frames address the value memory directly (no learned projection).
template <class T>
Array<T> self_address_value(Tape<T>* tape, const Array<T>& value, const Array<T>& audio, T alpha) {
  if (audio.ndim() != 2 || audio.cols() != value.cols())
    throw std::invalid_argument("self_address_value: audio " + shape_str(audio.shape()) +
                                " does not match value memory " + shape_str(value.shape()));
  return op::softmax_rows(tape, op::cosine_matrix(tape, audio, value), alpha);
}

template <class T>
Array<T> reconstruct_audio(Tape<T>* tape, const Array<T>& value, const Array<T>& self_addressing) {
  AddressingTensor<T> single{{self_addressing}};
  return read_value(tape, single, value).front();
}

template <class T>
MvmOutput<T> mvm_forward(Tape<T>* tape, const MemoryBank<T>& bank, const Array<T>& query) {
  MvmOutput<T> out;
  out.addressing = address_heads(tape, bank, query);
  auto reads = read_value(tape, out.addressing, bank.value);
  out.audio_knowledge = aggregate_heads(tape, reads, bank.output_projection);
  out.fused = fuse(tape, query, out.audio_knowledge, bank.fusion_gain, bank.fusion_bias);
  return out;
}

/// Largest |row sum - 1| over all heads and frames, or +inf if any entry
/// falls outside [0, 1].
template <class T>
double max_row_sum_deviation(const AddressingTensor<T>& addressing) {
  double worst = 0.0;
  for (const auto& a : addressing.heads)
    for (std::size_t r = 0; r < a.rows(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < a.cols(); ++c) {
        const double v = a.at(r, c);
        if (!(v >= 0.0 && v <= 1.0)) return std::numeric_limits<double>::infinity();
        s += v;
      }
      worst = std::max(worst, std::abs(s - 1.0));
    }
  return worst;
}

inline constexpr const char* kAddressingCsvHeader = "level,head,frame,slot,score";

/// Writes rows [first_frame, first_frame + frames) of every head as
/// level,head,frame,slot,score records. Frame indices restart at 0.
template <class T>
void write_addressing_csv(std::ostream& os, std::size_t level, const AddressingTensor<T>& addressing,
                          std::size_t first_frame, std::size_t frames) {
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t l = 0; l < addressing.num_heads(); ++l) {
    const auto& a = addressing.heads[l];
    if (first_frame + frames > a.rows()) throw std::out_of_range("write_addressing_csv: frame range");
    for (std::size_t j = 0; j < frames; ++j)
      for (std::size_t i = 0; i < a.cols(); ++i)
        os << level << ',' << l << ',' << j << ',' << i << ',' << static_cast<double>(a.at(first_frame + j, i))
           << '\n';
  }
}

}  // namespace mvm
