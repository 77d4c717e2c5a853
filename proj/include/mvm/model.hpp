#pragma once

// Toy lip-reading network: token front-ends, a dilated temporal-convolution
// back-end, and one memory bank in front of each of the first `levels`
// back-end blocks.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mvm/config.hpp"
#include "mvm/losses.hpp"
#include "mvm/memory.hpp"
#include "mvm/numerics.hpp"

namespace mvm {

/// B aligned sequences of length T, flattened batch-major.
struct Batch {
  std::size_t size = 0;
  std::size_t frames = 0;
  std::vector<int> viseme_tokens;
  std::vector<int> phoneme_tokens;
  std::vector<int> labels;
};

struct NamedParameter {
  std::string name;
  std::size_t index;
};

template <class T>
struct LipReadingModel {
  ModelConfig config;

  Array<T> visual_embedding;
  Array<T> visual_conv_weight;
  Array<T> visual_conv_bias;
  Array<T> audio_embedding;
  Array<T> audio_conv_weight;
  Array<T> audio_conv_bias;
  std::vector<Array<T>> block_weight;
  std::vector<Array<T>> block_bias;
  std::vector<MemoryBank<T>> banks;
  Array<T> classifier_weight;
  Array<T> classifier_bias;

  // Counts audio front-end invocations; evaluation must leave it untouched.
  std::shared_ptr<std::atomic<std::uint64_t>> audio_frontend_calls =
      std::make_shared<std::atomic<std::uint64_t>>(0);

  static LipReadingModel init(const ModelConfig& config) {
    config.validate();
    std::mt19937_64 rng(config.seed);
    const auto D = static_cast<std::size_t>(config.dim);
    auto uniform = [&](Shape shape, double bound) {
      std::uniform_real_distribution<double> u(-bound, bound);
      std::vector<T> d(shape_size(shape));
      for (auto& v : d) v = static_cast<T>(u(rng));
      return Array<T>(std::move(shape), std::move(d), true);
    };
    auto normal = [&](Shape shape) {
      std::normal_distribution<double> n(0.0, 1.0);
      std::vector<T> d(shape_size(shape));
      for (auto& v : d) v = static_cast<T>(n(rng));
      return Array<T>(std::move(shape), std::move(d), true);
    };
    auto zeros = [](Shape shape) { return Array<T>(std::move(shape), true); };

    LipReadingModel m;
    m.config = config;
    const auto fk = static_cast<std::size_t>(config.frontend_kernel);
    const auto bk = static_cast<std::size_t>(config.backend_kernel);
    m.visual_embedding = normal({static_cast<std::size_t>(config.visual_vocab()), D});
    m.visual_conv_weight = uniform({fk * D, D}, 1.0 / std::sqrt(static_cast<double>(fk * D)));
    m.visual_conv_bias = zeros({D});
    m.audio_embedding = normal({static_cast<std::size_t>(config.audio_vocab()), D});
    m.audio_conv_weight = uniform({fk * D, D}, 1.0 / std::sqrt(static_cast<double>(fk * D)));
    m.audio_conv_bias = zeros({D});
    for (int b = 0; b < config.backend_blocks; ++b) {
      m.block_weight.push_back(uniform({bk * D, D}, 1.0 / std::sqrt(static_cast<double>(bk * D))));
      m.block_bias.push_back(zeros({D}));
    }
    for (int l = 0; l < config.levels; ++l)
      m.banks.push_back(MemoryBank<T>::init(static_cast<std::size_t>(config.slots), D,
                                            static_cast<std::size_t>(config.heads), static_cast<T>(config.alpha), rng));
    m.classifier_weight = uniform({D, static_cast<std::size_t>(config.words)}, 1.0 / std::sqrt(static_cast<double>(D)));
    m.classifier_bias = zeros({static_cast<std::size_t>(config.words)});
    return m;
  }

  /// All trainable arrays in declared (checkpoint) order.
  std::vector<Array<T>> parameters() const {
    std::vector<Array<T>> ps{visual_embedding, visual_conv_weight, visual_conv_bias,
                             audio_embedding,  audio_conv_weight,  audio_conv_bias};
    for (std::size_t b = 0; b < block_weight.size(); ++b) {
      ps.push_back(block_weight[b]);
      ps.push_back(block_bias[b]);
    }
    for (const auto& bank : banks)
      for (const auto& p : bank.parameters()) ps.push_back(p);
    ps.push_back(classifier_weight);
    ps.push_back(classifier_bias);
    return ps;
  }

  /// Human-readable names aligned with parameters().
  std::vector<std::string> parameter_names() const {
    std::vector<std::string> n{"visual_embedding", "visual_conv_weight", "visual_conv_bias",
                               "audio_embedding",  "audio_conv_weight",  "audio_conv_bias"};
    for (std::size_t b = 0; b < block_weight.size(); ++b) {
      n.push_back("block" + std::to_string(b) + ".weight");
      n.push_back("block" + std::to_string(b) + ".bias");
    }
    for (std::size_t l = 0; l < banks.size(); ++l) {
      const auto pre = "level" + std::to_string(l) + ".";
      for (std::size_t h = 0; h < banks[l].heads(); ++h) n.push_back(pre + "head_key" + std::to_string(h));
      n.push_back(pre + "value");
      for (std::size_t h = 0; h < banks[l].heads(); ++h) n.push_back(pre + "query_projection" + std::to_string(h));
      n.push_back(pre + "output_projection");
      n.push_back(pre + "fusion_gain");
      n.push_back(pre + "fusion_bias");
    }
    n.push_back("classifier_weight");
    n.push_back("classifier_bias");
    return n;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.size();
    return n;
  }

  /// Deep copy with independent storage.
  LipReadingModel clone() const {
    LipReadingModel m = *this;
    auto deep = [](Array<T>& a) { a = a.clone(); };
    for (auto* a : {&m.visual_embedding, &m.visual_conv_weight, &m.visual_conv_bias, &m.audio_embedding,
                    &m.audio_conv_weight, &m.audio_conv_bias, &m.classifier_weight, &m.classifier_bias})
      deep(*a);
    for (auto& a : m.block_weight) deep(a);
    for (auto& a : m.block_bias) deep(a);
    for (auto& bank : m.banks) {
      for (auto& a : bank.head_keys) deep(a);
      for (auto& a : bank.query_projections) deep(a);
      deep(bank.value);
      deep(bank.output_projection);
      deep(bank.fusion_gain);
      deep(bank.fusion_bias);
    }
    m.audio_frontend_calls = std::make_shared<std::atomic<std::uint64_t>>(0);
    return m;
  }
};

template <class T>
Array<T> visual_frontend(Tape<T>* tape, const LipReadingModel<T>& m, std::span<const int> tokens, std::size_t frames) {
  auto e = op::embedding(tape, m.visual_embedding, tokens);
  return op::conv1d_time(tape, e, m.visual_conv_weight, m.visual_conv_bias, frames,
                         static_cast<std::size_t>(m.config.frontend_kernel));
}

template <class T>
Array<T> audio_frontend(Tape<T>* tape, const LipReadingModel<T>& m, std::span<const int> tokens, std::size_t frames) {
  m.audio_frontend_calls->fetch_add(1, std::memory_order_relaxed);
  auto e = op::embedding(tape, m.audio_embedding, tokens);
  return op::conv1d_time(tape, e, m.audio_conv_weight, m.audio_conv_bias, frames,
                         static_cast<std::size_t>(m.config.frontend_kernel));
}

/// x + gelu(dilated_conv(x))
template <class T>
Array<T> backend_block(Tape<T>* tape, const LipReadingModel<T>& m, std::size_t b, const Array<T>& x,
                       std::size_t frames) {
  auto y = op::conv1d_time(tape, x, m.block_weight[b], m.block_bias[b], frames,
                           static_cast<std::size_t>(m.config.backend_kernel),
                           static_cast<std::size_t>(m.config.dilations[b]));
  return op::add(tape, x, op::gelu(tape, y));
}

template <class T>
Array<T> classify(Tape<T>* tape, const LipReadingModel<T>& m, const Array<T>& x, std::size_t frames) {
  auto pooled = op::mean_pool_time(tape, x, frames);
  return op::add_row(tape, op::matmul(tape, pooled, m.classifier_weight), m.classifier_bias);
}

namespace detail {

inline void check_tokens(const char* what, std::span<const int> tokens, int vocab) {
  for (int t : tokens)
    if (t < 0 || t >= vocab)
      throw std::invalid_argument(std::string(what) + ": token " + std::to_string(t) + " out of range [0, " +
                                  std::to_string(vocab) + ")");
}

inline std::size_t sequence_count(std::span<const int> tokens, std::size_t frames) {
  if (frames == 0 || tokens.empty() || tokens.size() % frames != 0)
    throw std::invalid_argument("token count " + std::to_string(tokens.size()) + " is not a multiple of T=" +
                                std::to_string(frames));
  return tokens.size() / frames;
}

}  // namespace detail

/// Visual path: features query each level's memory and the fused output feeds
/// the next back-end block.
template <class T>
struct VisualPath {
  Array<T> logits;
  std::vector<MvmOutput<T>> levels;
};

template <class T>
VisualPath<T> visual_path(Tape<T>* tape, const LipReadingModel<T>& m, const Array<T>& visual_features,
                          std::size_t frames) {
  VisualPath<T> out;
  Array<T> h = visual_features;
  const auto blocks = m.block_weight.size();
  for (std::size_t i = 0; i <= blocks; ++i) {
    if (i < m.banks.size()) {
      out.levels.push_back(mvm_forward(tape, m.banks[i], h));
      h = out.levels.back().fused;
    }
    if (i < blocks) h = backend_block(tape, m, i, h, frames);
  }
  out.logits = classify(tape, m, h, frames);
  return out;
}

/// Inference: visual tokens only. Returns [B x K] logits.
template <class T>
VisualPath<T> forward_infer_detailed(const LipReadingModel<T>& m, std::span<const int> viseme_tokens,
                                     std::size_t frames, Tape<T>* tape = nullptr) {
  detail::check_tokens("forward_infer", viseme_tokens, m.config.visual_vocab());
  detail::sequence_count(viseme_tokens, frames);
  return visual_path(tape, m, visual_frontend(tape, m, viseme_tokens, frames), frames);
}

template <class T>
Array<T> forward_infer(const LipReadingModel<T>& m, std::span<const int> viseme_tokens, std::size_t frames) {
  return forward_infer_detailed(m, viseme_tokens, frames).logits;
}

template <class T>
struct TrainForward {
  Array<T> logits_visual_path;
  Array<T> logits_audio_path;  // empty for the memory-free baseline
  std::vector<MvmOutput<T>> levels;
  std::vector<Array<T>> self_addressing;
  std::vector<Array<T>> reconstructions;
  Array<T> audio_features;
  TotalLoss<T> loss;
};

/// Both task branches and all memory losses. The audio branch replaces each
/// level's memory read by the value memory's reconstruction of the front-end
/// audio features, fused through the same layer norm.
template <class T>
TrainForward<T> forward_train(Tape<T>* tape, const LipReadingModel<T>& m, const Batch& batch) {
  const std::size_t frames = batch.frames;
  if (m.config.has_memory() && batch.viseme_tokens.size() != batch.phoneme_tokens.size())
    throw std::invalid_argument("forward_train: visual and audio sequences differ in length (" +
                                std::to_string(batch.viseme_tokens.size()) + " vs " +
                                std::to_string(batch.phoneme_tokens.size()) + ")");
  const auto B = detail::sequence_count(batch.viseme_tokens, frames);
  if (batch.labels.size() != B) throw std::invalid_argument("forward_train: one label per sequence required");
  detail::check_tokens("forward_train (visual)", batch.viseme_tokens, m.config.visual_vocab());

  TrainForward<T> out;
  auto fv = visual_frontend(tape, m, batch.viseme_tokens, frames);
  auto vis = visual_path(tape, m, fv, frames);
  out.logits_visual_path = vis.logits;
  out.levels = std::move(vis.levels);

  if (!m.config.has_memory()) {
    auto task = op::cross_entropy(tape, out.logits_visual_path, std::span<const int>(batch.labels));
    out.loss = total_loss<T>(tape, {}, {}, task, m.config.loss_weights());
    return out;
  }

  detail::check_tokens("forward_train (audio)", batch.phoneme_tokens, m.config.audio_vocab());
  const auto w = m.config.loss_weights();
  out.audio_features = audio_frontend(tape, m, batch.phoneme_tokens, frames);
  const auto& fa = out.audio_features;
  std::vector<Array<T>> rec_terms, cont_terms;
  Array<T> h = fv;
  const auto blocks = m.block_weight.size();
  for (std::size_t i = 0; i <= blocks; ++i) {
    if (i < m.banks.size()) {
      const auto& bank = m.banks[i];
      auto self = self_address_value(tape, bank.value, fa, bank.alpha);
      auto rec = reconstruct_audio(tape, bank.value, self);
      rec_terms.push_back(reconstruction_loss(tape, rec, fa, w.literal_reconstruction_sum));
      cont_terms.push_back(contrastive_loss(tape, bank.value, w.literal_contrastive_sum));
      h = fuse(tape, h, rec, bank.fusion_gain, bank.fusion_bias);
      out.self_addressing.push_back(std::move(self));
      out.reconstructions.push_back(std::move(rec));
    }
    if (i < blocks) h = backend_block(tape, m, i, h, frames);
  }
  out.logits_audio_path = classify(tape, m, h, frames);
  auto task = task_loss(tape, out.logits_visual_path, out.logits_audio_path, std::span<const int>(batch.labels));
  out.loss = total_loss(tape, rec_terms, cont_terms, task, w);
  return out;
}

}  // namespace mvm
