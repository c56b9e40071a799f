#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "neft/config.hpp"
#include "neft/ops.hpp"
#include "neft/tensor.hpp"

namespace neft {

/// A parameter or buffer owned by a model. Buffers (batch-norm running
/// statistics) are saved in checkpoints but never optimized.
template <typename Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar> tensor;
  bool trainable = true;
};

/// One row of a model's topology, in execution order. The dimension fields
/// carry whatever the FLOPs rule for `kind` needs:
///   conv2d            h, w = output extent; kernel, c_in, c_out
///   conv_transpose2d  h, w = input extent; kernel, c_in, c_out
///   dense             rows = applications per sample; c_in, c_out
///   msa               h, w = token grid; c_in = token width; heads
///   layer_norm, batch_norm, gelu, relu: elementwise, c_in = channels
struct LayerInfo {
  std::string name;
  std::string kind;
  bool encoder = false;
  Index params = 0;
  Index h = 0;
  Index w = 0;
  Index c_in = 0;
  Index c_out = 0;
  Index kernel = 0;
  Index rows = 1;
  Index heads = 0;
};

/// Post-softmax attention of one block, maps[B, heads, N, N].
template <typename Scalar>
struct AttentionRecord {
  std::string stage;  // "encoder.1", "encoder.2", "decoder.2", "decoder.1"
  Index block = 0;
  Tensor<Scalar> maps;
};

template <typename Scalar>
using AttentionTrace = std::vector<AttentionRecord<Scalar>>;

template <typename Scalar>
struct ForwardResult {
  Tensor<Scalar> reconstruction;  // [B, C, H, W]
  Tensor<Scalar> codeword;        // [B, K]
  AttentionTrace<Scalar> attention;
};

/// Encoder/decoder pair for any of the four variants.
///
/// Parameters live in one ordered list; layers refer to them by position, so
/// copying a model deep-copies every tensor.
template <typename Scalar>
class Model {
 public:
  explicit Model(NeftConfig config);

  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const NeftConfig& config() const { return config_; }

  /// x is [B, C, H, W]; an unbatched [C, H, W] input is treated as B = 1.
  /// In training mode batch-norm layers update their running statistics.
  ForwardResult<Scalar> forward(const Tensor<Scalar>& x) const;
  Tensor<Scalar> encode(const Tensor<Scalar>& x, AttentionTrace<Scalar>* trace = nullptr) const;
  Tensor<Scalar> decode(const Tensor<Scalar>& codeword,
                        AttentionTrace<Scalar>* trace = nullptr) const;

  /// Intermediate encoder feature maps: the patch-embedded and merged maps for
  /// the transformer encoder, the three CNN stage outputs for the hybrid one.
  std::vector<Tensor<Scalar>> encoder_stages(const Tensor<Scalar>& x) const;
  /// Runs one ViT block, or only its attention layer, on [B, N, C] tokens.
  Tensor<Scalar> apply_block(const std::string& stage, Index index, const Tensor<Scalar>& tokens,
                             Tensor<Scalar>* maps = nullptr) const;
  Tensor<Scalar> apply_attention(const std::string& stage, Index index, const Tensor<Scalar>& tokens,
                                 Tensor<Scalar>* maps = nullptr) const;

  bool training() const { return training_; }
  void set_training(bool training) { training_ = training; }

  std::vector<NamedTensor<Scalar>>& tensors() { return tensors_; }
  const std::vector<NamedTensor<Scalar>>& tensors() const { return tensors_; }
  /// Handles to the trainable tensors, in construction order.
  std::vector<Tensor<Scalar>> parameters() const;
  Tensor<Scalar>& tensor(const std::string& name);
  const Tensor<Scalar>& tensor(const std::string& name) const;

  Index parameter_count() const;
  const std::vector<LayerInfo>& topology() const { return topology_; }
  void zero_grad();
  void set_requires_grad(bool flag);

  /// Same configuration and values at another precision.
  template <typename Other>
  Model<Other> cast() const {
    Model<Other> m(config_);
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      m.tensors()[i].tensor.values() = tensors_[i].tensor.values().template cast<Other>();
    }
    m.set_training(training_);
    return m;
  }

 private:
  struct Linear {
    std::size_t w = 0, b = 0;
  };
  struct Norm {
    std::size_t gain = 0, bias = 0;
  };
  struct Attention {
    Linear q, k, v, o;
    std::size_t rpb = 0;
    Index heads = 1;
    Index grid_h = 1, grid_w = 1;
    std::vector<Index> rel_index;
  };
  struct Block {
    Norm ln1, ln2;
    Attention attn;
    Linear fc1, fc2;
  };
  struct Conv {
    std::size_t w = 0, b = 0;
    bool has_bias = true;
    Index stride = 1, padding = 0;
  };
  struct BatchNorm {
    std::size_t gamma = 0, beta = 0, mean = 0, var = 0;
  };

  enum class Init { Zeros, Ones, TruncNormal, FanIn };

  std::size_t add_tensor(const std::string& name, Shape shape, Init init, Index fan_in = 1,
                         bool trainable = true);
  Linear make_linear(const std::string& name, Index in, Index out);
  Norm make_norm(const std::string& name, Index width);
  Block make_block(const std::string& name, Index width, Index heads, Index gh, Index gw,
                   bool encoder);
  Conv make_conv(const std::string& name, Index c_in, Index c_out, Index k, Index stride,
                 Index padding, bool bias, bool transposed);
  Index layer_params(std::initializer_list<std::size_t> ids) const;

  const Tensor<Scalar>& at(std::size_t i) const { return tensors_[i].tensor; }
  Tensor<Scalar> linear(const Tensor<Scalar>& x, const Linear& l) const;
  Tensor<Scalar> norm(const Tensor<Scalar>& x, const Norm& n) const;
  Tensor<Scalar> attention(const Tensor<Scalar>& x, const Attention& a, Tensor<Scalar>* maps) const;
  Tensor<Scalar> block(const Tensor<Scalar>& x, const Block& b, Tensor<Scalar>* maps) const;
  Tensor<Scalar> encode_impl(const Tensor<Scalar>& x, AttentionTrace<Scalar>* trace,
                             std::vector<Tensor<Scalar>>* stages) const;
  const Block& find_block(const std::string& stage, Index index) const;
  Tensor<Scalar> run_stage(const Tensor<Scalar>& tokens, const std::vector<Block>& blocks,
                           const std::string& stage, AttentionTrace<Scalar>* trace) const;

  NeftConfig config_;
  bool training_ = true;
  std::vector<NamedTensor<Scalar>> tensors_;
  std::vector<LayerInfo> topology_;
  std::mt19937_64 rng_;

  // Transformer encoder.
  Conv patch_embed_, patch_merge_;
  std::vector<Block> enc1_, enc2_;
  // Hybrid CNN encoder.
  std::vector<Conv> cnn_;
  std::vector<BatchNorm> cnn_bn_;
  Linear project_, expand_;
  std::vector<Block> dec2_, dec1_;
  Conv divide2_, divide1_;  // 2C1 -> C1 (k = 2), C1 -> C (k = 4)
};

/// Parameter count derived from the configuration alone.
Index count_parameters(const NeftConfig& config);

/// [B, C, h, w] feature maps <-> [B, N, C] tokens, row-major token order.
template <typename Scalar>
Tensor<Scalar> map_to_tokens(const Tensor<Scalar>& map);
template <typename Scalar>
Tensor<Scalar> tokens_to_map(const Tensor<Scalar>& tokens, Index h, Index w);

/// Flat offsets into a [(2 gh - 1) * (2 gw - 1)] bias table for every token
/// pair (i, j) of a gh x gw grid, row-major over (i, j).
std::vector<Index> relative_position_index(Index gh, Index gw);

using ModelF = Model<float>;
using ModelD = Model<double>;

}  // namespace neft
