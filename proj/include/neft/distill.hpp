#pragma once

#include <string>

#include "json.hpp"
#include "neft/trainer.hpp"

namespace neft {

/// Reconstruction, codeword and attention maps of one forward pass.
template <typename Scalar>
using AlignmentBundle = ForwardResult<Scalar>;

/// Mean squared difference of the two reconstructions.
template <typename Scalar>
Tensor<Scalar> loss_ra(const Tensor<Scalar>& teacher, const Tensor<Scalar>& student);

/// (1/N_d) |z_T - z_S|^2 averaged over the batch; codewords are [B, N_d].
template <typename Scalar>
Tensor<Scalar> loss_ca(const Tensor<Scalar>& teacher, const Tensor<Scalar>& student);

/// Mean over layers of (1/heads) sum_i |A_T - A_S|_F^2, averaged over the batch.
template <typename Scalar>
Tensor<Scalar> loss_aa(const AttentionTrace<Scalar>& teacher, const AttentionTrace<Scalar>& student);

struct DistillConfig {
  double lambda1 = 0.3;  // reconstruction alignment
  double lambda2 = 2.0;  // attention alignment
  double lambda3 = 2.0;  // codeword alignment
  TrainConfig train = [] {
    TrainConfig t;
    t.lr_max = 3e-4;
    return t;
  }();
  std::string teacher_checkpoint;

  static DistillConfig full();
  /// Reconstruction alignment only (lambda2 = lambda3 = 0).
  static DistillConfig only_recon();
  /// Every alignment weight zero: plain reconstruction training.
  static DistillConfig without_kd();
  static DistillConfig preset(const std::string& name);

  void validate() const;
  nlohmann::json to_json() const;
  static DistillConfig from_json(const nlohmann::json& j, DistillConfig base);
  static DistillConfig from_json(const nlohmann::json& j);
};

/// rec + lambda1 ra + lambda2 aa + lambda3 ca. Terms with a zero weight are
/// left out so that the all-zero case is exactly `rec`.
template <typename Scalar>
Tensor<Scalar> total_loss(const Tensor<Scalar>& rec, const Tensor<Scalar>& ra, const Tensor<Scalar>& aa,
                          const Tensor<Scalar>& ca, const DistillConfig& config);

/// Throws DistillCompatibilityError unless the codeword length, attention
/// layer count, and per-layer head and token counts agree.
template <typename Scalar>
void check_compatible(const Model<Scalar>& teacher, const Model<Scalar>& student);

/// Trains `student` against the frozen `teacher`. The teacher runs in
/// inference mode without gradient recording and is left untouched.
template <typename Scalar>
ExperimentReport distill_train(const Model<Scalar>& teacher, Model<Scalar>& student,
                               const ChannelDataset& train_set, const ChannelDataset& val_set,
                               const DistillConfig& config);

}  // namespace neft
