#pragma once

#include "rearrange/optim.hpp"
#include "rearrange/tensor.hpp"

namespace rearrange {
namespace nn {

// ---------------------------------------------------------------------------
// Named parameter registry. Creation order is the canonical order used by the
// optimizer and the checkpoint format.
// ---------------------------------------------------------------------------

template <typename Real>
class ParamSetT {
 public:
  // Returns the existing tensor when the name is already registered (e.g.
  // after loading a checkpoint); otherwise creates it via init().
  template <typename InitFn>
  TensorT<Real> param(const std::string& name, const Shape& shape, InitFn init) {
    auto it = index_.find(name);
    if (it != index_.end()) {
      TensorT<Real>& t = tensors_[it->second];
      if (t.shape() != shape)
        fail("param " + name + ": shape " + shape_str(t.shape()) + " != expected " +
             shape_str(shape));
      return t;
    }
    std::vector<Real> values(size_t(shape_numel(shape)));
    init(values);
    TensorT<Real> t = TensorT<Real>::from(shape, std::move(values), true);
    index_[name] = tensors_.size();
    names_.push_back(name);
    tensors_.push_back(t);
    return t;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  TensorT<Real> get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) fail("unknown param: " + name);
    return tensors_[it->second];
  }

  void put(const std::string& name, TensorT<Real> t) {
    if (index_.count(name)) fail("duplicate param: " + name);
    t.set_requires_grad(true);
    index_[name] = tensors_.size();
    names_.push_back(name);
    tensors_.push_back(std::move(t));
  }

  const std::vector<std::string>& names() const { return names_; }
  std::vector<TensorT<Real>>& tensors() { return tensors_; }
  const std::vector<TensorT<Real>>& tensors() const { return tensors_; }
  size_t size() const { return tensors_.size(); }

  long total_values() const {
    long n = 0;
    for (const auto& t : tensors_) n += t.numel();
    return n;
  }

  void zero_grads() {
    for (auto& t : tensors_) t.zero_grad();
  }

  template <typename OtherReal>
  ParamSetT<OtherReal> cast() const {
    ParamSetT<OtherReal> out;
    for (size_t i = 0; i < tensors_.size(); ++i) {
      const auto& src = tensors_[i].values();
      std::vector<OtherReal> v(src.size());
      for (size_t j = 0; j < src.size(); ++j) v[j] = OtherReal(src[j]);
      out.put(names_[i], TensorT<OtherReal>::from(tensors_[i].shape(), std::move(v), true));
    }
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<TensorT<Real>> tensors_;
  std::unordered_map<std::string, size_t> index_;
};

using ParamSet = ParamSetT<float>;

// Initializers.
template <typename Real>
auto init_normal(Rng& rng, double stddev) {
  return [&rng, stddev](std::vector<Real>& v) {
    for (auto& x : v) x = Real(rng.normal(0.0, stddev));
  };
}
template <typename Real>
auto init_zeros() {
  return [](std::vector<Real>& v) { std::fill(v.begin(), v.end(), Real(0)); };
}
template <typename Real>
auto init_ones() {
  return [](std::vector<Real>& v) { std::fill(v.begin(), v.end(), Real(1)); };
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <typename Real>
struct LinearT {
  TensorT<Real> w;  // [in x out]
  TensorT<Real> b;  // [out]

  static LinearT create(ParamSetT<Real>& ps, const std::string& prefix, int in, int out,
                        Rng& rng) {
    LinearT l;
    l.w = ps.param(prefix + ".w", {in, out}, init_normal<Real>(rng, 1.0 / std::sqrt(double(in))));
    l.b = ps.param(prefix + ".b", {out}, init_zeros<Real>());
    return l;
  }

  TensorT<Real> forward(const TensorT<Real>& x) const { return add(matmul(x, w), b); }
};

template <typename Real>
struct LayerNormT {
  TensorT<Real> gain;
  TensorT<Real> bias;
  double eps = 1e-5;

  static LayerNormT create(ParamSetT<Real>& ps, const std::string& prefix, int d) {
    LayerNormT ln;
    ln.gain = ps.param(prefix + ".g", {d}, init_ones<Real>());
    ln.bias = ps.param(prefix + ".b", {d}, init_zeros<Real>());
    return ln;
  }

  TensorT<Real> forward(const TensorT<Real>& x) const {
    return layernorm_lastdim(x, gain, bias, eps);
  }
};

// Strictly-lower-plus-diagonal visibility pattern.
struct CausalMask {
  int length = 0;
  bool allowed(int i, int j) const { return j <= i; }
};

// Additive attention mask; blocked entries get a large negative value whose
// exp underflows to exactly zero.
template <typename Real>
TensorT<Real> causal_mask_tensor(const CausalMask& mask) {
  const int t = mask.length;
  TensorT<Real> m = TensorT<Real>::zeros({t, t});
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < t; ++j)
      if (!mask.allowed(i, j)) m.values()[size_t(i) * size_t(t) + size_t(j)] = Real(-1e9);
  return m;
}

template <typename Real>
struct AttentionT {
  LinearT<Real> qkv;  // H -> 3H
  LinearT<Real> proj;
  int n_heads = 1;
  int hidden = 0;

  static AttentionT create(ParamSetT<Real>& ps, const std::string& prefix, int hidden,
                           int n_heads, Rng& rng) {
    if (hidden % n_heads != 0) fail("attention: hidden not divisible by heads");
    AttentionT a;
    a.qkv = LinearT<Real>::create(ps, prefix + ".qkv", hidden, 3 * hidden, rng);
    a.proj = LinearT<Real>::create(ps, prefix + ".proj", hidden, hidden, rng);
    a.n_heads = n_heads;
    a.hidden = hidden;
    return a;
  }

  // tokens: [T x H]; mask_t: additive [T x T].
  TensorT<Real> forward(const TensorT<Real>& tokens, const TensorT<Real>& mask_t) const {
    const int t = tokens.dim(0);
    if (mask_t.dim(0) != t || mask_t.dim(1) != t)
      fail("attention: mask length " + std::to_string(mask_t.dim(0)) + " != tokens " +
           std::to_string(t));
    const int dh = hidden / n_heads;
    TensorT<Real> fused = qkv.forward(tokens);  // [T x 3H]
    TensorT<Real> q = slice(fused, {0, 0}, {t, hidden});
    TensorT<Real> k = slice(fused, {0, hidden}, {t, hidden});
    TensorT<Real> v = slice(fused, {0, 2 * hidden}, {t, hidden});
    const Real inv_sqrt_dh = Real(1.0 / std::sqrt(double(dh)));
    std::vector<TensorT<Real>> head_outs;
    head_outs.reserve(size_t(n_heads));
    for (int h = 0; h < n_heads; ++h) {
      TensorT<Real> qh = slice(q, {0, h * dh}, {t, dh});
      TensorT<Real> kh = slice(k, {0, h * dh}, {t, dh});
      TensorT<Real> vh = slice(v, {0, h * dh}, {t, dh});
      TensorT<Real> scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
      scores = add(scores, mask_t);
      TensorT<Real> att = softmax_lastdim(scores);
      head_outs.push_back(matmul(att, vh));
    }
    TensorT<Real> ctx = n_heads == 1 ? head_outs[0] : concat(head_outs, 1);
    return proj.forward(ctx);
  }
};

// causal_self_attention over raw head params; output at position i depends
// only on tokens j <= i.
template <typename Real>
TensorT<Real> causal_self_attention(const TensorT<Real>& tokens, const CausalMask& mask,
                                    const AttentionT<Real>& params) {
  if (mask.length != tokens.dim(0)) fail("causal_self_attention: mask length mismatch");
  return params.forward(tokens, causal_mask_tensor<Real>(mask));
}

template <typename Real>
struct TransformerBlockT {
  LayerNormT<Real> ln1;
  AttentionT<Real> attn;
  LayerNormT<Real> ln2;
  LinearT<Real> ff1;  // H -> 4H
  LinearT<Real> ff2;  // 4H -> H

  static TransformerBlockT create(ParamSetT<Real>& ps, const std::string& prefix, int hidden,
                                  int n_heads, Rng& rng) {
    TransformerBlockT b;
    b.ln1 = LayerNormT<Real>::create(ps, prefix + ".ln1", hidden);
    b.attn = AttentionT<Real>::create(ps, prefix + ".attn", hidden, n_heads, rng);
    b.ln2 = LayerNormT<Real>::create(ps, prefix + ".ln2", hidden);
    b.ff1 = LinearT<Real>::create(ps, prefix + ".ff1", hidden, 4 * hidden, rng);
    b.ff2 = LinearT<Real>::create(ps, prefix + ".ff2", 4 * hidden, hidden, rng);
    return b;
  }

  TensorT<Real> forward(const TensorT<Real>& x, const TensorT<Real>& mask_t) const {
    TensorT<Real> h = add(x, attn.forward(ln1.forward(x), mask_t));
    TensorT<Real> f = ff2.forward(gelu(ff1.forward(ln2.forward(h))));
    return add(h, f);
  }
};

struct TransformerCfg {
  int token_dim = 64;
  int hidden_dim = 64;
  int n_heads = 4;
  int n_layers = 2;
  int max_positions = 64;
  double dropout = 0.0;
};

// Pre-norm causal transformer: input projection followed by n_layers blocks.
template <typename Real>
struct TransformerT {
  LinearT<Real> in_proj;
  std::vector<TransformerBlockT<Real>> blocks;
  int max_positions = 0;

  static TransformerT create(ParamSetT<Real>& ps, const std::string& prefix,
                             const TransformerCfg& cfg, Rng& rng) {
    if (cfg.hidden_dim % cfg.n_heads != 0) fail("transformer: hidden_dim % n_heads != 0");
    TransformerT t;
    t.in_proj = LinearT<Real>::create(ps, prefix + ".in", cfg.token_dim, cfg.hidden_dim, rng);
    for (int l = 0; l < cfg.n_layers; ++l)
      t.blocks.push_back(TransformerBlockT<Real>::create(
          ps, prefix + ".blk" + std::to_string(l), cfg.hidden_dim, cfg.n_heads, rng));
    t.max_positions = cfg.max_positions;
    return t;
  }

  TensorT<Real> forward(const TensorT<Real>& tokens, const TensorT<Real>& mask_t) const {
    TensorT<Real> h = in_proj.forward(tokens);
    for (const auto& blk : blocks) h = blk.forward(h, mask_t);
    return h;
  }

  TensorT<Real> forward_causal(const TensorT<Real>& tokens) const {
    if (tokens.dim(0) > max_positions)
      fail("transformer: " + std::to_string(tokens.dim(0)) + " tokens exceed max_positions " +
           std::to_string(max_positions));
    CausalMask m{tokens.dim(0)};
    return forward(tokens, causal_mask_tensor<Real>(m));
  }
};

// transformer_encode per the module contract.
template <typename Real>
TensorT<Real> transformer_encode(const TensorT<Real>& tokens, const TransformerT<Real>& t) {
  return t.forward_causal(tokens);
}

// ---------------------------------------------------------------------------
// Positional embedding: token t receives the table row for its timestep.
// Several tokens of one timestep may share an index.
// ---------------------------------------------------------------------------

template <typename Real>
TensorT<Real> positional_embed(const TensorT<Real>& tokens, const TensorT<Real>& table,
                               const std::vector<int>& timestep_of_token) {
  if (int(timestep_of_token.size()) != tokens.dim(0))
    fail("positional_embed: index count does not match tokens");
  for (int idx : timestep_of_token)
    if (idx >= table.dim(0))
      fail("positional_embed: timestep " + std::to_string(idx) + " exceeds max_positions " +
           std::to_string(table.dim(0)));
  return add(tokens, embedding_lookup(table, timestep_of_token));
}

template <typename Real>
TensorT<Real> positional_embed(const TensorT<Real>& tokens, const TensorT<Real>& table) {
  std::vector<int> idx(size_t(tokens.dim(0)));
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = int(i);
  return positional_embed(tokens, table, idx);
}

// ---------------------------------------------------------------------------
// Recurrent backbone (gated, LSTM-style) for the architecture ablation.
// ---------------------------------------------------------------------------

template <typename Real>
TensorT<Real> sigmoid(const TensorT<Real>& x) {
  // 0.5 * (1 + tanh(x/2))
  return scale(shift(vtanh(scale(x, Real(0.5))), Real(1)), Real(0.5));
}

template <typename Real>
struct LstmLayerT {
  LinearT<Real> gates;  // [in + hidden] -> 4*hidden, gate order i,f,g,o
  int hidden = 0;

  static LstmLayerT create(ParamSetT<Real>& ps, const std::string& prefix, int in, int hidden,
                           Rng& rng) {
    LstmLayerT l;
    l.gates = LinearT<Real>::create(ps, prefix + ".gates", in + hidden, 4 * hidden, rng);
    l.hidden = hidden;
    return l;
  }

  // tokens: [T x in] -> [T x hidden]; zero initial state.
  TensorT<Real> forward(const TensorT<Real>& tokens) const {
    const int t_len = tokens.dim(0);
    const int in = tokens.dim(1);
    TensorT<Real> h = TensorT<Real>::zeros({1, hidden});
    TensorT<Real> c = TensorT<Real>::zeros({1, hidden});
    std::vector<TensorT<Real>> outs;
    outs.reserve(size_t(t_len));
    for (int t = 0; t < t_len; ++t) {
      TensorT<Real> xt = slice(tokens, {t, 0}, {1, in});
      TensorT<Real> xi = concat(std::vector<TensorT<Real>>{xt, h}, 1);  // [1 x in+hidden]
      TensorT<Real> z = gates.forward(xi);                              // [1 x 4H]
      TensorT<Real> gi = sigmoid(slice(z, {0, 0}, {1, hidden}));
      TensorT<Real> gf = sigmoid(slice(z, {0, hidden}, {1, hidden}));
      TensorT<Real> gg = vtanh(slice(z, {0, 2 * hidden}, {1, hidden}));
      TensorT<Real> go = sigmoid(slice(z, {0, 3 * hidden}, {1, hidden}));
      c = add(mul(gf, c), mul(gi, gg));
      h = mul(go, vtanh(c));
      outs.push_back(h);
    }
    return concat(outs, 0);
  }
};

template <typename Real>
struct RecurrentEncoderT {
  LstmLayerT<Real> l1;
  LstmLayerT<Real> l2;

  static RecurrentEncoderT create(ParamSetT<Real>& ps, const std::string& prefix, int token_dim,
                                  int hidden, Rng& rng) {
    RecurrentEncoderT r;
    r.l1 = LstmLayerT<Real>::create(ps, prefix + ".l1", token_dim, hidden, rng);
    r.l2 = LstmLayerT<Real>::create(ps, prefix + ".l2", hidden, hidden, rng);
    return r;
  }

  TensorT<Real> forward(const TensorT<Real>& tokens) const {
    return l2.forward(l1.forward(tokens));
  }
};

template <typename Real>
TensorT<Real> recurrent_encode(const TensorT<Real>& tokens, const RecurrentEncoderT<Real>& r) {
  return r.forward(tokens);
}

// ---------------------------------------------------------------------------
// Losses. All return [1] tensors on the active tape.
// ---------------------------------------------------------------------------

template <typename Real>
TensorT<Real> logsumexp(const TensorT<Real>& logits) {
  TensorT<Real> m = max_all(logits);
  TensorT<Real> e = vexp(sub(logits, m));
  return add(vlog(sum_all(e)), m);
}

// -log softmax(logits)[target]
template <typename Real>
TensorT<Real> cross_entropy(const TensorT<Real>& logits, int target) {
  if (logits.rank() != 1 || logits.dim(0) < 2)
    fail("cross_entropy: logits must be rank-1 with K >= 2");
  if (target < 0 || target >= logits.dim(0))
    fail("cross_entropy: target " + std::to_string(target) + " out of range");
  TensorT<Real> logp = sub(slice(logits, {target}, {1}), logsumexp(logits));
  return scale(logp, Real(-1));
}

// -(1-p)^gamma * log p with p = softmax(logits)[target]. Integer gamma uses
// exact repeated products so gamma = 0 reduces to cross-entropy bit-for-bit.
template <typename Real>
TensorT<Real> focal_loss(const TensorT<Real>& logits, int target, double gamma) {
  if (logits.rank() != 1 || logits.dim(0) < 2)
    fail("focal_loss: logits must be rank-1 with K >= 2");
  if (target < 0 || target >= logits.dim(0))
    fail("focal_loss: target " + std::to_string(target) + " out of range");
  if (gamma < 0.0) fail("focal_loss: gamma must be >= 0");
  TensorT<Real> logp = sub(slice(logits, {target}, {1}), logsumexp(logits));
  TensorT<Real> neg_logp = scale(logp, Real(-1));
  const int gi = int(gamma);
  if (double(gi) == gamma) {
    if (gi == 0) return neg_logp;
    TensorT<Real> q = shift(scale(vexp(logp), Real(-1)), Real(1));  // 1 - p
    TensorT<Real> w = q;
    for (int k = 1; k < gi; ++k) w = mul(w, q);
    return mul(w, neg_logp);
  }
  // Fractional gamma: (1-p)^gamma = exp(gamma * log(1-p + tiny)).
  TensorT<Real> q = shift(scale(vexp(logp), Real(-1)), Real(1));
  TensorT<Real> w = vexp(scale(vlog(shift(q, Real(1e-12))), Real(gamma)));
  return mul(w, neg_logp);
}

// Mean of squared differences over all elements.
template <typename Real>
TensorT<Real> mse_loss(const TensorT<Real>& pred, const TensorT<Real>& target) {
  if (pred.shape() != target.shape())
    fail("mse_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
         shape_str(target.shape()));
  TensorT<Real> d = sub(pred, target);
  return mean_all(mul(d, d));
}

// ---------------------------------------------------------------------------
// Dropout: scaled Bernoulli mask, identity at p = 0.
// ---------------------------------------------------------------------------

template <typename Real>
TensorT<Real> dropout(const TensorT<Real>& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  TensorT<Real> mask = TensorT<Real>::zeros(x.shape());
  const Real keep = Real(1.0 / (1.0 - p));
  for (auto& v : mask.values()) v = rng.uniform() >= p ? keep : Real(0);
  return mul(x, mask);
}

// Non-differentiating helpers used on the inference path.
template <typename Real>
int argmax_row(const std::vector<Real>& v, size_t off, size_t n) {
  size_t best = 0;
  for (size_t j = 1; j < n; ++j)
    if (v[off + j] > v[off + best]) best = j;
  return int(best);
}

}  // namespace nn
}  // namespace rearrange
