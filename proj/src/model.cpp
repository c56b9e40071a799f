#include "neft/model.hpp"

#include <cmath>

#include "neft/errors.hpp"

namespace neft {

namespace {

Index block_parameters(Index width, Index heads, Index gh, Index gw, Index hidden) {
  const Index norms = 2 * 2 * width;
  const Index attn = 4 * (width * width + width) + heads * (2 * gh - 1) * (2 * gw - 1);
  const Index mlp = width * hidden + hidden + hidden * width + width;
  return norms + attn + mlp;
}

}  // namespace

std::vector<Index> relative_position_index(Index gh, Index gw) {
  const Index n = gh * gw;
  std::vector<Index> idx(static_cast<std::size_t>(n * n));
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      const Index dy = i / gw - j / gw + gh - 1;
      const Index dx = i % gw - j % gw + gw - 1;
      idx[static_cast<std::size_t>(i * n + j)] = dy * (2 * gw - 1) + dx;
    }
  }
  return idx;
}

template <typename Scalar>
Tensor<Scalar> map_to_tokens(const Tensor<Scalar>& map) {
  if (map.rank() != 4) throw DimensionError("map_to_tokens expects [B, C, h, w], got " + shape_string(map.shape()));
  const Index b = map.dim(0), c = map.dim(1), n = map.dim(2) * map.dim(3);
  return permute(reshape(map, {b, c, n}), {0, 2, 1});
}

template <typename Scalar>
Tensor<Scalar> tokens_to_map(const Tensor<Scalar>& tokens, Index h, Index w) {
  if (tokens.rank() != 3 || tokens.dim(1) != h * w) {
    throw DimensionError("tokens_to_map: " + shape_string(tokens.shape()) + " is not a " +
                         std::to_string(h) + " x " + std::to_string(w) + " token grid");
  }
  const Index b = tokens.dim(0), c = tokens.dim(2);
  return reshape(permute(tokens, {0, 2, 1}), {b, c, h, w});
}

Index count_parameters(const NeftConfig& config) {
  config.validate();
  const Index k = config.codeword_length();
  const Index c1 = config.c1, c2 = 2 * c1, cin = config.in_channels;
  const Index flat = config.tokens(1) * c2;
  const Index h1 = config.heads_per_stage[0], h2 = config.heads_per_stage[1];
  const Index stage1 = config.blocks_per_stage *
                       block_parameters(c1, h1, config.grid_h(0), config.grid_w(0), config.mlp_hidden(c1));
  const Index stage2 = config.blocks_per_stage *
                       block_parameters(c2, h2, config.grid_h(1), config.grid_w(1), config.mlp_hidden(c2));
  Index encoder = 0;
  if (has_hybrid_encoder(config.variant)) {
    Index in = cin;
    for (Index out : {config.c0 / 4, config.c0 / 2, config.c0}) {
      encoder += 9 * in * out + 2 * out;
      in = out;
    }
    encoder += config.c0 * config.tokens(1) * k + k;
  } else {
    encoder = cin * c1 * 16 + c1 + stage1 + c1 * c2 * 4 + c2 + stage2 + flat * k + k;
  }
  const Index decoder = k * flat + flat + stage2 + c2 * c1 * 4 + c1 + stage1 + c1 * cin * 16 + cin;
  return encoder + decoder;
}

template <typename Scalar>
std::size_t Model<Scalar>::add_tensor(const std::string& name, Shape shape, Init init, Index fan_in,
                                      bool trainable) {
  Tensor<Scalar> t(std::move(shape));
  switch (init) {
    case Init::Zeros:
      break;
    case Init::Ones:
      t.values().setOnes();
      break;
    case Init::TruncNormal: {
      std::normal_distribution<double> dist(0.0, 0.02);
      for (auto& v : t.data()) {
        double x;
        do x = dist(rng_);
        while (std::abs(x) > 0.04);
        v = static_cast<Scalar>(x);
      }
      break;
    }
    case Init::FanIn: {
      const double bound = 1.0 / std::sqrt(double(fan_in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (auto& v : t.data()) v = static_cast<Scalar>(dist(rng_));
      break;
    }
  }
  t.set_requires_grad(trainable);
  tensors_.push_back({name, t, trainable});
  return tensors_.size() - 1;
}

template <typename Scalar>
typename Model<Scalar>::Linear Model<Scalar>::make_linear(const std::string& name, Index in, Index out) {
  Linear l;
  l.w = add_tensor(name + ".weight", {in, out}, Init::TruncNormal);
  l.b = add_tensor(name + ".bias", {out}, Init::Zeros);
  return l;
}

template <typename Scalar>
typename Model<Scalar>::Norm Model<Scalar>::make_norm(const std::string& name, Index width) {
  Norm n;
  n.gain = add_tensor(name + ".gain", {width}, Init::Ones);
  n.bias = add_tensor(name + ".bias", {width}, Init::Zeros);
  return n;
}

template <typename Scalar>
Index Model<Scalar>::layer_params(std::initializer_list<std::size_t> ids) const {
  Index n = 0;
  for (std::size_t i : ids) n += tensors_[i].tensor.size();
  return n;
}

template <typename Scalar>
typename Model<Scalar>::Block Model<Scalar>::make_block(const std::string& name, Index width,
                                                        Index heads, Index gh, Index gw,
                                                        bool encoder) {
  Block b;
  const Index n = gh * gw;
  const Index hidden = config_.mlp_hidden(width);
  b.ln1 = make_norm(name + ".norm1", width);
  topology_.push_back({name + ".norm1", "layer_norm", encoder, layer_params({b.ln1.gain, b.ln1.bias}),
                       gh, gw, width, width});
  b.attn.q = make_linear(name + ".attn.q", width, width);
  b.attn.k = make_linear(name + ".attn.k", width, width);
  b.attn.v = make_linear(name + ".attn.v", width, width);
  b.attn.o = make_linear(name + ".attn.o", width, width);
  b.attn.rpb = add_tensor(name + ".attn.rel_pos_bias", {heads, (2 * gh - 1) * (2 * gw - 1)}, Init::Zeros);
  b.attn.heads = heads;
  b.attn.grid_h = gh;
  b.attn.grid_w = gw;
  b.attn.rel_index = relative_position_index(gh, gw);
  const auto& a = b.attn;
  LayerInfo msa{name + ".attn", "msa", encoder,
                layer_params({a.q.w, a.q.b, a.k.w, a.k.b, a.v.w, a.v.b, a.o.w, a.o.b, a.rpb}),
                gh, gw, width, width};
  msa.heads = heads;
  topology_.push_back(msa);
  b.ln2 = make_norm(name + ".norm2", width);
  topology_.push_back({name + ".norm2", "layer_norm", encoder, layer_params({b.ln2.gain, b.ln2.bias}),
                       gh, gw, width, width});
  b.fc1 = make_linear(name + ".mlp.fc1", width, hidden);
  topology_.push_back({name + ".mlp.fc1", "dense", encoder, layer_params({b.fc1.w, b.fc1.b}), gh, gw,
                       width, hidden, 0, n});
  topology_.push_back({name + ".mlp.gelu", "gelu", encoder, 0, gh, gw, hidden, hidden});
  b.fc2 = make_linear(name + ".mlp.fc2", hidden, width);
  topology_.push_back({name + ".mlp.fc2", "dense", encoder, layer_params({b.fc2.w, b.fc2.b}), gh, gw,
                       hidden, width, 0, n});
  return b;
}

template <typename Scalar>
typename Model<Scalar>::Conv Model<Scalar>::make_conv(const std::string& name, Index c_in,
                                                      Index c_out, Index k, Index stride,
                                                      Index padding, bool bias, bool transposed) {
  Conv c;
  c.stride = stride;
  c.padding = padding;
  c.has_bias = bias;
  if (transposed) {
    c.w = add_tensor(name + ".weight", {c_in, c_out, k, k}, Init::FanIn, c_in);
  } else {
    c.w = add_tensor(name + ".weight", {c_out, c_in, k, k}, Init::FanIn, c_in * k * k);
  }
  if (bias) c.b = add_tensor(name + ".bias", {c_out}, Init::Zeros);
  return c;
}

template <typename Scalar>
Model<Scalar>::Model(NeftConfig config) : config_(std::move(config)), rng_(config_.seed) {
  config_.validate();
  const Index k = config_.codeword_length();
  const Index cin = config_.in_channels, c1 = config_.c1, c2 = 2 * c1;
  const Index g1h = config_.grid_h(0), g1w = config_.grid_w(0);
  const Index g2h = config_.grid_h(1), g2w = config_.grid_w(1);
  const Index h1 = config_.heads_per_stage[0], h2 = config_.heads_per_stage[1];
  const Index depth = config_.blocks_per_stage;
  Index flat = config_.tokens(1) * c2;

  auto conv_row = [&](const std::string& name, const std::string& kind, const Conv& c, Index h,
                      Index w, Index ci, Index co, Index kernel, bool encoder) {
    LayerInfo row{name, kind, encoder, c.has_bias ? layer_params({c.w, c.b}) : layer_params({c.w}),
                  h, w, ci, co, kernel};
    topology_.push_back(row);
  };

  if (!has_hybrid_encoder(config_.variant)) {
    patch_embed_ = make_conv("encoder.patch_embed", cin, c1, 4, 4, 0, true, false);
    conv_row("encoder.patch_embed", "conv2d", patch_embed_, g1h, g1w, cin, c1, 4, true);
    for (Index i = 0; i < depth; ++i) {
      enc1_.push_back(make_block("encoder.stage1.block" + std::to_string(i), c1, h1, g1h, g1w, true));
    }
    patch_merge_ = make_conv("encoder.patch_merge", c1, c2, 2, 2, 0, true, false);
    conv_row("encoder.patch_merge", "conv2d", patch_merge_, g2h, g2w, c1, c2, 2, true);
    for (Index i = 0; i < depth; ++i) {
      enc2_.push_back(make_block("encoder.stage2.block" + std::to_string(i), c2, h2, g2h, g2w, true));
    }
  } else {
    const Index c0 = config_.c0;
    Index in = cin, h = config_.height, w = config_.width;
    int s = 1;
    for (Index out : {c0 / 4, c0 / 2, c0}) {
      h /= 2;
      w /= 2;
      const std::string name = "encoder.cnn" + std::to_string(s++);
      cnn_.push_back(make_conv(name + ".conv", in, out, 3, 2, 1, false, false));
      conv_row(name + ".conv", "conv2d", cnn_.back(), h, w, in, out, 3, true);
      BatchNorm bn;
      bn.gamma = add_tensor(name + ".bn.gamma", {out}, Init::Ones);
      bn.beta = add_tensor(name + ".bn.beta", {out}, Init::Zeros);
      bn.mean = add_tensor(name + ".bn.running_mean", {out}, Init::Zeros, 1, false);
      bn.var = add_tensor(name + ".bn.running_var", {out}, Init::Ones, 1, false);
      cnn_bn_.push_back(bn);
      topology_.push_back({name + ".bn", "batch_norm", true, layer_params({bn.gamma, bn.beta}), h, w, out, out});
      topology_.push_back({name + ".relu", "relu", true, 0, h, w, out, out});
      in = out;
    }
    flat = c0 * h * w;
  }
  project_ = make_linear("encoder.project", flat, k);
  topology_.push_back({"encoder.project", "dense", true, layer_params({project_.w, project_.b}), 1, 1, flat, k});

  const Index dec_flat = config_.tokens(1) * c2;
  expand_ = make_linear("decoder.expand", k, dec_flat);
  topology_.push_back({"decoder.expand", "dense", false, layer_params({expand_.w, expand_.b}), 1, 1, k, dec_flat});
  for (Index i = 0; i < depth; ++i) {
    dec2_.push_back(make_block("decoder.stage2.block" + std::to_string(i), c2, h2, g2h, g2w, false));
  }
  divide2_ = make_conv("decoder.patch_divide2", c2, c1, 2, 2, 0, true, true);
  conv_row("decoder.patch_divide2", "conv_transpose2d", divide2_, g2h, g2w, c2, c1, 2, false);
  for (Index i = 0; i < depth; ++i) {
    dec1_.push_back(make_block("decoder.stage1.block" + std::to_string(i), c1, h1, g1h, g1w, false));
  }
  divide1_ = make_conv("decoder.patch_divide1", c1, cin, 4, 4, 0, true, true);
  conv_row("decoder.patch_divide1", "conv_transpose2d", divide1_, g1h, g1w, c1, cin, 4, false);
}

template <typename Scalar>
Model<Scalar>::Model(const Model& other) {
  *this = other;
}

template <typename Scalar>
Model<Scalar>& Model<Scalar>::operator=(const Model& other) {
  if (this == &other) return *this;
  config_ = other.config_;
  training_ = other.training_;
  topology_ = other.topology_;
  rng_ = other.rng_;
  tensors_.clear();
  for (const auto& t : other.tensors_) tensors_.push_back({t.name, t.tensor.clone(), t.trainable});
  patch_embed_ = other.patch_embed_;
  patch_merge_ = other.patch_merge_;
  enc1_ = other.enc1_;
  enc2_ = other.enc2_;
  cnn_ = other.cnn_;
  cnn_bn_ = other.cnn_bn_;
  project_ = other.project_;
  expand_ = other.expand_;
  dec2_ = other.dec2_;
  dec1_ = other.dec1_;
  divide2_ = other.divide2_;
  divide1_ = other.divide1_;
  return *this;
}

template <typename Scalar>
std::vector<Tensor<Scalar>> Model<Scalar>::parameters() const {
  std::vector<Tensor<Scalar>> out;
  for (const auto& t : tensors_) {
    if (t.trainable) out.push_back(t.tensor);
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar>& Model<Scalar>::tensor(const std::string& name) {
  for (auto& t : tensors_) {
    if (t.name == name) return t.tensor;
  }
  throw ConfigError("model has no tensor named '" + name + "'");
}

template <typename Scalar>
const Tensor<Scalar>& Model<Scalar>::tensor(const std::string& name) const {
  return const_cast<Model*>(this)->tensor(name);
}

template <typename Scalar>
Index Model<Scalar>::parameter_count() const {
  Index n = 0;
  for (const auto& t : tensors_) {
    if (t.trainable) n += t.tensor.size();
  }
  return n;
}

template <typename Scalar>
void Model<Scalar>::zero_grad() {
  for (auto& t : tensors_) t.tensor.zero_grad();
}

template <typename Scalar>
void Model<Scalar>::set_requires_grad(bool flag) {
  for (auto& t : tensors_) {
    if (t.trainable) t.tensor.set_requires_grad(flag);
  }
}

template <typename Scalar>
Tensor<Scalar> Model<Scalar>::linear(const Tensor<Scalar>& x, const Linear& l) const {
  return matmul(x, at(l.w)) + at(l.b);
}

template <typename Scalar>
Tensor<Scalar> Model<Scalar>::norm(const Tensor<Scalar>& x, const Norm& n) const {
  return layer_norm(x, at(n.gain), at(n.bias));
}

template <typename Scalar>
Tensor<Scalar> Model<Scalar>::attention(const Tensor<Scalar>& x, const Attention& a,
                                        Tensor<Scalar>* maps) const {
  const Index b = x.dim(0), n = x.dim(1), c = x.dim(2);
  const Index h = a.heads, d = c / h;
  if (n != a.grid_h * a.grid_w) {
    throw DimensionError("attention expects " + std::to_string(a.grid_h * a.grid_w) + " tokens, got " +
                         std::to_string(n));
  }
  auto split = [&](const Tensor<Scalar>& t) { return permute(reshape(t, {b, n, h, d}), {0, 2, 1, 3}); };
  const Tensor<Scalar> q = split(linear(x, a.q));
  const Tensor<Scalar> k = split(linear(x, a.k));
  const Tensor<Scalar> v = split(linear(x, a.v));
  const Tensor<Scalar> bias = reshape(index_select(at(a.rpb), a.rel_index), {h, n, n});
  const Tensor<Scalar> logits = scale(matmul_transposed(q, k), Scalar(1) / std::sqrt(Scalar(d))) + bias;
  const Tensor<Scalar> attn = softmax(logits, -1);
  if (maps) *maps = attn;
  const Tensor<Scalar> merged = reshape(permute(matmul(attn, v), {0, 2, 1, 3}), {b, n, c});
  return linear(merged, a.o);
}

template <typename Scalar>
Tensor<Scalar> Model<Scalar>::block(const Tensor<Scalar>& x, const Block& blk, Tensor<Scalar>* maps) const {
  const Tensor<Scalar> y = x + attention(norm(x, blk.ln1), blk.attn, maps);
  return y + linear(gelu(linear(norm(y, blk.ln2), blk.fc1)), blk.fc2);
}

template <typename Scalar>
Tensor<Scalar> Model<Scalar>::run_stage(const Tensor<Scalar>& tokens, const std::vector<Block>& blocks,
                                        const std::string& stage, AttentionTrace<Scalar>* trace) const {
  Tensor<Scalar> t = tokens;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    Tensor<Scalar> maps;
    t = block(t, blocks[i], trace ? &maps : nullptr);
    if (trace) trace->push_back({stage, static_cast<Index>(i), maps});
  }
  return t;
}

template <typename Scalar>
const typename Model<Scalar>::Block& Model<Scalar>::find_block(const std::string& stage, Index index) const {
  const std::vector<Block>* blocks = nullptr;
  if (stage == "encoder.1") blocks = &enc1_;
  else if (stage == "encoder.2") blocks = &enc2_;
  else if (stage == "decoder.2") blocks = &dec2_;
  else if (stage == "decoder.1") blocks = &dec1_;
  if (!blocks || index < 0 || index >= static_cast<Index>(blocks->size())) {
    throw BoundsError("no block " + std::to_string(index) + " in stage '" + stage + "'");
  }
  return (*blocks)[static_cast<std::size_t>(index)];
}

template <typename Scalar>
Tensor<Scalar> Model<Scalar>::apply_block(const std::string& stage, Index index,
                                          const Tensor<Scalar>& tokens, Tensor<Scalar>* maps) const {
  return block(tokens, find_block(stage, index), maps);
}

template <typename Scalar>
Tensor<Scalar> Model<Scalar>::apply_attention(const std::string& stage, Index index,
                                              const Tensor<Scalar>& tokens, Tensor<Scalar>* maps) const {
  return attention(tokens, find_block(stage, index).attn, maps);
}

template <typename Scalar>
std::vector<Tensor<Scalar>> Model<Scalar>::encoder_stages(const Tensor<Scalar>& x) const {
  std::vector<Tensor<Scalar>> stages;
  encode_impl(x, nullptr, &stages);
  return stages;
}

template <typename Scalar>
Tensor<Scalar> Model<Scalar>::encode(const Tensor<Scalar>& input, AttentionTrace<Scalar>* trace) const {
  return encode_impl(input, trace, nullptr);
}

template <typename Scalar>
Tensor<Scalar> Model<Scalar>::encode_impl(const Tensor<Scalar>& input, AttentionTrace<Scalar>* trace,
                                          std::vector<Tensor<Scalar>>* stages) const {
  const Tensor<Scalar> x = input.rank() == 3 ? reshape(input, {1, input.dim(0), input.dim(1), input.dim(2)}) : input;
  if (x.rank() != 4 || x.dim(1) != config_.in_channels || x.dim(2) != config_.height ||
      x.dim(3) != config_.width) {
    throw DimensionError("model expects [B, " + std::to_string(config_.in_channels) + ", " +
                         std::to_string(config_.height) + ", " + std::to_string(config_.width) +
                         "] input, got " + shape_string(input.shape()));
  }
  const Index b = x.dim(0);
  Tensor<Scalar> t;
  if (!has_hybrid_encoder(config_.variant)) {
    t = conv2d(x, at(patch_embed_.w), at(patch_embed_.b), 4, 0);
    if (stages) stages->push_back(t);
    t = run_stage(map_to_tokens(t), enc1_, "encoder.1", trace);
    t = conv2d(tokens_to_map(t, config_.grid_h(0), config_.grid_w(0)), at(patch_merge_.w),
               at(patch_merge_.b), 2, 0);
    if (stages) stages->push_back(t);
    t = run_stage(map_to_tokens(t), enc2_, "encoder.2", trace);
  } else {
    t = x;
    for (std::size_t s = 0; s < cnn_.size(); ++s) {
      t = conv2d(t, at(cnn_[s].w), Tensor<Scalar>(), 2, 1);
      BatchNormStats<Scalar> stats{at(cnn_bn_[s].mean), at(cnn_bn_[s].var)};
      t = relu(batch_norm(t, at(cnn_bn_[s].gamma), at(cnn_bn_[s].beta), stats, training_));
      if (stages) stages->push_back(t);
    }
  }
  return linear(reshape(t, {b, t.size() / b}), project_);
}

template <typename Scalar>
Tensor<Scalar> Model<Scalar>::decode(const Tensor<Scalar>& codeword, AttentionTrace<Scalar>* trace) const {
  const Index k = config_.codeword_length();
  const Tensor<Scalar> z = codeword.rank() == 1 ? reshape(codeword, {1, codeword.dim(0)}) : codeword;
  if (z.rank() != 2 || z.dim(1) != k) {
    throw DimensionError("decoder expects [B, " + std::to_string(k) + "] codewords, got " +
                         shape_string(codeword.shape()));
  }
  const Index b = z.dim(0), c1 = config_.c1;
  Tensor<Scalar> t = reshape(linear(z, expand_), {b, config_.tokens(1), 2 * c1});
  t = run_stage(t, dec2_, "decoder.2", trace);
  t = conv_transpose2d(tokens_to_map(t, config_.grid_h(1), config_.grid_w(1)), at(divide2_.w),
                       at(divide2_.b), 2);
  t = run_stage(map_to_tokens(t), dec1_, "decoder.1", trace);
  return conv_transpose2d(tokens_to_map(t, config_.grid_h(0), config_.grid_w(0)), at(divide1_.w),
                          at(divide1_.b), 4);
}

template <typename Scalar>
ForwardResult<Scalar> Model<Scalar>::forward(const Tensor<Scalar>& x) const {
  ForwardResult<Scalar> r;
  r.codeword = encode(x, &r.attention);
  r.reconstruction = decode(r.codeword, &r.attention);
  return r;
}

#define NEFT_INSTANTIATE(S)                                                 \
  template class Model<S>;                                                  \
  template Tensor<S> map_to_tokens<S>(const Tensor<S>&);                    \
  template Tensor<S> tokens_to_map<S>(const Tensor<S>&, Index, Index);
NEFT_INSTANTIATE(float)
NEFT_INSTANTIATE(double)
#undef NEFT_INSTANTIATE

}  // namespace neft
