#pragma once

#include <iostream>
#include <span>
#include <stdexcept>
#include <vector>

#include "mvm/numerics.hpp"

namespace mvm {

struct LossWeights {
  double reconstruction = 1.0;
  double contrastive = 1.0;
  // Literal sums instead of means (over frames / over slot pairs).
  bool literal_reconstruction_sum = false;
  bool literal_contrastive_sum = false;
};

struct LossReport {
  double task = 0.0;
  double reconstruction = 0.0;
  double contrastive = 0.0;
  double total = 0.0;
  std::vector<double> per_level_reconstruction;
};

/// mean_j (1 - cos(reconstructed[j], target[j])), in [0, 2].
template <class T>
Array<T> reconstruction_loss(Tape<T>* tape, const Array<T>& reconstructed, const Array<T>& target,
                             bool literal_sum = false) {
  if (reconstructed.shape() != target.shape() || reconstructed.ndim() != 2)
    throw std::invalid_argument("reconstruction_loss: shape mismatch " + shape_str(reconstructed.shape()) + " vs " +
                                shape_str(target.shape()));
  auto gap = op::affine(tape, op::cosine_rows(tape, reconstructed, target), T{-1}, T{1});
  return literal_sum ? op::sum(tape, gap) : op::mean(tape, gap);
}

/// Mean over ordered slot pairs i != j of |cos(value[i], value[j])|.
template <class T>
Array<T> contrastive_loss(Tape<T>* tape, const Array<T>& value, bool literal_sum = false) {
  if (value.ndim() != 2) throw std::invalid_argument("contrastive_loss: value memory must be a matrix");
  const std::size_t n = value.rows();
  if (n < 2) {
    std::clog << "warning: contrastive_loss on a memory with " << n << " slot(s); returning 0\n";
    return Array<T>::scalar(T{0});
  }
  auto total = op::sum_offdiag(tape, op::abs(tape, op::cosine_matrix(tape, value, value)));
  return literal_sum ? total : op::scale(tape, total, T{1} / static_cast<T>(n * (n - 1)));
}

/// CE(visual-path logits) + CE(audio-path logits), each averaged over rows.
template <class T>
Array<T> task_loss(Tape<T>* tape, const Array<T>& logits_visual_path, const Array<T>& logits_audio_path,
                   std::span<const int> labels) {
  if (logits_visual_path.shape() != logits_audio_path.shape())
    throw std::invalid_argument("task_loss: branch logits differ in shape");
  return op::add(tape, op::cross_entropy(tape, logits_visual_path, labels),
                 op::cross_entropy(tape, logits_audio_path, labels));
}

template <class T>
struct TotalLoss {
  Array<T> total;
  // The individual terms, level means for the memory losses. The memory terms
  // stay empty when there are no levels.
  Array<T> task;
  Array<T> reconstruction;
  Array<T> contrastive;
  LossReport report;
};

/// task + w_rec * mean_levels(rec) + w_cont * mean_levels(cont). With no
/// levels (memory-free model) the total is the task term alone.
template <class T>
TotalLoss<T> total_loss(Tape<T>* tape, const std::vector<Array<T>>& level_reconstruction,
                        const std::vector<Array<T>>& level_contrastive, const Array<T>& task,
                        const LossWeights& weights = {}) {
  if (level_reconstruction.size() != level_contrastive.size())
    throw std::invalid_argument("total_loss: per-level term counts differ");
  TotalLoss<T> out;
  out.task = task;
  out.report.task = static_cast<double>(task.item());
  const std::size_t levels = level_reconstruction.size();
  if (levels == 0) {
    out.total = task;
    out.report.total = out.report.task;
    return out;
  }
  const T inv = T{1} / static_cast<T>(levels);
  Array<T> rec = level_reconstruction.front();
  Array<T> cont = level_contrastive.front();
  for (std::size_t i = 1; i < levels; ++i) {
    rec = op::add(tape, rec, level_reconstruction[i]);
    cont = op::add(tape, cont, level_contrastive[i]);
  }
  rec = op::scale(tape, rec, inv);
  cont = op::scale(tape, cont, inv);
  out.total = op::add(tape, task,
                      op::add(tape, op::scale(tape, rec, static_cast<T>(weights.reconstruction)),
                              op::scale(tape, cont, static_cast<T>(weights.contrastive))));
  out.reconstruction = rec;
  out.contrastive = cont;
  out.report.reconstruction = static_cast<double>(rec.item());
  out.report.contrastive = static_cast<double>(cont.item());
  for (const auto& r : level_reconstruction) out.report.per_level_reconstruction.push_back(static_cast<double>(r.item()));
  out.report.total = out.report.task + weights.reconstruction * out.report.reconstruction +
                     weights.contrastive * out.report.contrastive;
  return out;
}

}  // namespace mvm
