#pragma once
// Unsupervised feature fusion: one two-layer MLP per modality followed by a
// linear projection, trained so that the projections of the image and point
// features of the same patch agree (symmetric InfoNCE). Gradients are written
// out by hand and checked against finite differences in the tests.

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "mmnr/io.hpp"

namespace mmnr {

struct Linear {
  std::size_t in = 0, out = 0;
  Vec weight;  // out x in, row-major
  Vec bias;    // out

  Linear() = default;
  Linear(std::size_t in_dim, std::size_t out_dim) : in(in_dim), out(out_dim), weight(in_dim * out_dim, 0.0), bias(out_dim, 0.0) {}

  /// Uniform in +-1/sqrt(fan_in) for weights and biases.
  static Linear init(std::size_t in_dim, std::size_t out_dim, Rng& rng) {
    Linear l(in_dim, out_dim);
    const double a = 1.0 / std::sqrt(static_cast<double>(in_dim));
    for (double& x : l.weight) x = rng.uniform(-a, a);
    for (double& x : l.bias) x = rng.uniform(-a, a);
    return l;
  }

  Vec forward(VecView x) const {
    Vec y(bias);
    for (std::size_t o = 0; o < out; ++o) {
      const double* row = weight.data() + o * in;
      double s = 0.0;
      for (std::size_t i = 0; i < in; ++i) s += row[i] * x[i];
      y[o] += s;
    }
    return y;
  }

  /// Accumulates parameter gradients into `grad` and returns dL/dx.
  Vec backward(VecView x, VecView dy, Linear& grad) const {
    Vec dx(in, 0.0);
    for (std::size_t o = 0; o < out; ++o) {
      const double g = dy[o];
      grad.bias[o] += g;
      const double* row = weight.data() + o * in;
      double* grow = grad.weight.data() + o * in;
      for (std::size_t i = 0; i < in; ++i) {
        grow[i] += g * x[i];
        dx[i] += g * row[i];
      }
    }
    return dx;
  }

  bool operator==(const Linear&) const = default;
};

/// D -> hidden -> D perceptron with ReLU after the hidden layer.
struct Mlp {
  Linear hidden, output;

  Vec forward(VecView x) const {
    Vec a = hidden.forward(x);
    for (double& v : a) v = std::max(v, 0.0);
    return output.forward(a);
  }

  bool operator==(const Mlp&) const = default;
};

struct FusionConfig {
  std::size_t rgb_dim = 16;
  std::size_t pc_dim = 16;
  std::size_t hidden_factor = 4;
  std::size_t proj_dim = 16;
  double temperature = 0.07;

  void validate() const {
    if (rgb_dim == 0 || pc_dim == 0 || proj_dim == 0 || hidden_factor == 0)
      throw ConfigError("fusion: dimensions must be >= 1");
    if (!(temperature > 0.0)) throw ConfigError("fusion: temperature must be > 0");
  }
};

struct FusionHead {
  Mlp mlp_rgb, mlp_pc;
  Linear proj_rgb, proj_pc;
  double temperature = 0.07;

  static FusionHead init(const FusionConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(mix_seed(seed ^ 0x666e7573ull));
    FusionHead h;
    h.mlp_rgb.hidden = Linear::init(cfg.rgb_dim, cfg.hidden_factor * cfg.rgb_dim, rng);
    h.mlp_rgb.output = Linear::init(cfg.hidden_factor * cfg.rgb_dim, cfg.rgb_dim, rng);
    h.mlp_pc.hidden = Linear::init(cfg.pc_dim, cfg.hidden_factor * cfg.pc_dim, rng);
    h.mlp_pc.output = Linear::init(cfg.hidden_factor * cfg.pc_dim, cfg.pc_dim, rng);
    h.proj_rgb = Linear::init(cfg.rgb_dim, cfg.proj_dim, rng);
    h.proj_pc = Linear::init(cfg.pc_dim, cfg.proj_dim, rng);
    h.temperature = cfg.temperature;
    return h;
  }

  /// Same architecture, every parameter zero (gradient accumulator).
  FusionHead zeros_like() const {
    FusionHead z;
    for (auto [dst, src] : {std::pair{&z.mlp_rgb.hidden, &mlp_rgb.hidden}, std::pair{&z.mlp_rgb.output, &mlp_rgb.output},
                            std::pair{&z.mlp_pc.hidden, &mlp_pc.hidden}, std::pair{&z.mlp_pc.output, &mlp_pc.output},
                            std::pair{&z.proj_rgb, &proj_rgb}, std::pair{&z.proj_pc, &proj_pc}})
      *dst = Linear(src->in, src->out);
    z.temperature = temperature;
    return z;
  }

  std::vector<Vec*> parameters() {
    return {&mlp_rgb.hidden.weight, &mlp_rgb.hidden.bias, &mlp_rgb.output.weight, &mlp_rgb.output.bias,
            &mlp_pc.hidden.weight,  &mlp_pc.hidden.bias,  &mlp_pc.output.weight,  &mlp_pc.output.bias,
            &proj_rgb.weight,       &proj_rgb.bias,       &proj_pc.weight,        &proj_pc.bias};
  }

  std::size_t rgb_dim() const { return mlp_rgb.hidden.in; }
  std::size_t pc_dim() const { return mlp_pc.hidden.in; }

  void validate() const {
    if (proj_rgb.out != proj_pc.out) throw DataError("FusionHead: projection dims differ");
    if (!(temperature > 0.0)) throw DataError("FusionHead: temperature must be > 0");
    for (Vec* p : const_cast<FusionHead*>(this)->parameters())
      if (!all_finite(*p)) throw NumericError("FusionHead: non-finite parameter");
  }

  bool operator==(const FusionHead&) const = default;
};

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

inline constexpr double kNormFloor = 1e-12;

struct UffOutput {
  Vec h_rgb, h_pc;  // unit-norm projections (zero if the projection vanishes)
  Vec fused;        // concat(mlp_rgb(f_rgb), mlp_pc(f_pc))
};

inline Vec safe_normalize(VecView x) {
  const double n = std::max(norm(x), kNormFloor);
  Vec out(x.begin(), x.end());
  for (double& v : out) v /= n;
  return out;
}

inline UffOutput uff_forward(VecView f_rgb, VecView f_pc, const FusionHead& head) {
  if (f_rgb.size() != head.rgb_dim() || f_pc.size() != head.pc_dim()) throw DataError("uff_forward: input dim mismatch");
  const Vec z_rgb = head.mlp_rgb.forward(f_rgb);
  const Vec z_pc = head.mlp_pc.forward(f_pc);
  UffOutput out{safe_normalize(head.proj_rgb.forward(z_rgb)), safe_normalize(head.proj_pc.forward(z_pc)), z_rgb};
  out.fused.insert(out.fused.end(), z_pc.begin(), z_pc.end());
  return out;
}

/// Fused feature only (inference path).
inline Vec uff_fuse(VecView f_rgb, VecView f_pc, const FusionHead& head) {
  Vec a = head.mlp_rgb.forward(f_rgb);
  const Vec b = head.mlp_pc.forward(f_pc);
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

// ---------------------------------------------------------------------------
// InfoNCE
// ---------------------------------------------------------------------------

/// Symmetric InfoNCE on a B x B logit matrix whose diagonal holds the
/// positives: mean of the row-wise (rgb -> pc) and column-wise (pc -> rgb)
/// cross entropies. If `grad` is given it receives dL/dlogits.
inline double infonce_from_logits(const std::vector<Vec>& logits, std::vector<Vec>* grad = nullptr) {
  const std::size_t b = logits.size();
  if (b < 2) throw DataError("infonce: need at least two pairs");
  for (const auto& row : logits)
    if (row.size() != b) throw DataError("infonce: logits must be square");
  if (grad) grad->assign(b, Vec(b, 0.0));
  const double scale = 0.5 / static_cast<double>(b);
  double loss = 0.0;
  Vec p(b);
  for (int dir = 0; dir < 2; ++dir) {
    for (std::size_t i = 0; i < b; ++i) {
      const auto at = [&](std::size_t j) { return dir == 0 ? logits[i][j] : logits[j][i]; };
      double mx = at(0);
      for (std::size_t j = 1; j < b; ++j) mx = std::max(mx, at(j));
      double z = 0.0;
      for (std::size_t j = 0; j < b; ++j) z += (p[j] = std::exp(at(j) - mx));
      loss += scale * (std::log(z) + mx - at(i));
      if (grad)
        for (std::size_t j = 0; j < b; ++j) {
          const double g = scale * (p[j] / z - (i == j ? 1.0 : 0.0));
          (dir == 0 ? (*grad)[i][j] : (*grad)[j][i]) += g;
        }
    }
  }
  return std::max(loss, 0.0);
}

struct PatchPair {
  Vec rgb, pc;
};

namespace detail {

struct ModalityTrace {
  Vec x, pre_hidden, hidden, z, p, h;
  double pnorm = 0.0;
};

inline ModalityTrace trace_forward(VecView x, const Mlp& mlp, const Linear& proj) {
  ModalityTrace t;
  t.x.assign(x.begin(), x.end());
  t.pre_hidden = mlp.hidden.forward(x);
  t.hidden = t.pre_hidden;
  for (double& v : t.hidden) v = std::max(v, 0.0);
  t.z = mlp.output.forward(t.hidden);
  t.p = proj.forward(t.z);
  t.pnorm = std::max(norm(t.p), kNormFloor);
  t.h = t.p;
  for (double& v : t.h) v /= t.pnorm;
  return t;
}

inline void trace_backward(const ModalityTrace& t, const Vec& dh, const Mlp& mlp, const Linear& proj, Mlp& gmlp,
                           Linear& gproj) {
  const double hd = dot(t.h, dh);
  Vec dp(dh.size());
  for (std::size_t k = 0; k < dp.size(); ++k) dp[k] = (dh[k] - t.h[k] * hd) / t.pnorm;
  const Vec dz = proj.backward(t.z, dp, gproj);
  Vec da = mlp.output.backward(t.hidden, dz, gmlp.output);
  for (std::size_t k = 0; k < da.size(); ++k)
    if (!(t.pre_hidden[k] > 0.0)) da[k] = 0.0;
  mlp.hidden.backward(t.x, da, gmlp.hidden);
}

}  // namespace detail

/// Loss of a batch of patch pairs; with `grad` set, also the gradient of
/// every head parameter (accumulated into a zeroed head of equal shape).
inline double infonce_loss(const std::vector<PatchPair>& batch, const FusionHead& head, FusionHead* grad = nullptr) {
  const std::size_t b = batch.size();
  if (b < 2) throw DataError("infonce: need at least two pairs");
  std::vector<detail::ModalityTrace> tr(b), tp(b);
  parallel_for(b, [&](std::size_t i) {
    tr[i] = detail::trace_forward(batch[i].rgb, head.mlp_rgb, head.proj_rgb);
    tp[i] = detail::trace_forward(batch[i].pc, head.mlp_pc, head.proj_pc);
  });
  std::vector<Vec> logits(b, Vec(b));
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j) logits[i][j] = dot(tr[i].h, tp[j].h) / head.temperature;
  std::vector<Vec> dl;
  const double loss = infonce_from_logits(logits, grad ? &dl : nullptr);
  if (!grad) return loss;
  const std::size_t pdim = head.proj_rgb.out;
  for (std::size_t i = 0; i < b; ++i) {
    Vec dh_r(pdim, 0.0), dh_p(pdim, 0.0);
    for (std::size_t j = 0; j < b; ++j) {
      const double gr = dl[i][j] / head.temperature;  // d/dh_rgb_i via logits[i][j]
      const double gp = dl[j][i] / head.temperature;  // d/dh_pc_i via logits[j][i]
      for (std::size_t k = 0; k < pdim; ++k) {
        dh_r[k] += gr * tp[j].h[k];
        dh_p[k] += gp * tr[j].h[k];
      }
    }
    detail::trace_backward(tr[i], dh_r, head.mlp_rgb, head.proj_rgb, grad->mlp_rgb, grad->proj_rgb);
    detail::trace_backward(tp[i], dh_p, head.mlp_pc, head.proj_pc, grad->mlp_pc, grad->proj_pc);
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
  double lr = 0.003;
  std::size_t warmup_steps = 250;
  std::size_t batch = 16;  // samples per step
  std::size_t steps = 750;
  std::uint64_t seed = 0;
  /// Patches drawn from each sample per step; 0 takes every patch.
  std::size_t patches_per_sample = 0;
  double weight_decay = 0.01;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

  void validate() const {
    if (!(lr >= 0.0)) throw ConfigError("uff: lr must be >= 0");
    if (batch == 0 || steps == 0) throw ConfigError("uff: batch and steps must be >= 1");
    if (!(weight_decay >= 0.0)) throw ConfigError("uff: weight_decay must be >= 0");
  }
};

/// Linear warmup to `lr`, then cosine decay to 0 at `steps`.
inline double learning_rate(const TrainConfig& cfg, std::size_t step) {
  if (step < cfg.warmup_steps)
    return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  const std::size_t span = cfg.steps > cfg.warmup_steps ? cfg.steps - cfg.warmup_steps : 1;
  const double t = std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(span));
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

class AdamW {
 public:
  AdamW(FusionHead& head, const TrainConfig& cfg) : cfg_(cfg) {
    for (Vec* p : head.parameters()) {
      m_.emplace_back(p->size(), 0.0);
      v_.emplace_back(p->size(), 0.0);
    }
  }

  void step(FusionHead& head, FusionHead& grad, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    auto params = head.parameters();
    auto grads = grad.parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
      Vec& p = *params[k];
      const Vec& g = *grads[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * g[i];
        v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mh = m_[k][i] / c1, vh = v_[k][i] / c2;
        p[i] -= lr * (mh / (std::sqrt(vh) + cfg_.adam_eps) + cfg_.weight_decay * p[i]);
      }
    }
  }

 private:
  TrainConfig cfg_;
  std::vector<Vec> m_, v_;
  std::size_t t_ = 0;
};

/// Patch pairs of one training sample (cells valid in both modalities).
using SamplePatches = std::vector<PatchPair>;

struct TrainReport {
  double initial_heldout_loss = 0.0;
  double final_heldout_loss = 0.0;
  std::vector<double> losses;  // training loss per step
};

namespace detail {

inline std::vector<PatchPair> draw_batch(const std::vector<SamplePatches>& samples, const TrainConfig& cfg, Rng& rng) {
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<PatchPair> batch;
  for (std::size_t s = 0; s < std::min(cfg.batch, order.size()); ++s) {
    const auto& pats = samples[order[s]];
    if (cfg.patches_per_sample == 0 || cfg.patches_per_sample >= pats.size()) {
      batch.insert(batch.end(), pats.begin(), pats.end());
      continue;
    }
    std::vector<std::size_t> idx(pats.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    rng.shuffle(std::span<std::size_t>(idx));
    for (std::size_t i = 0; i < cfg.patches_per_sample; ++i) batch.push_back(pats[idx[i]]);
  }
  return batch;
}

}  // namespace detail

inline FusionHead train_uff(const std::vector<SamplePatches>& samples, const FusionConfig& fcfg, const TrainConfig& cfg,
                            TrainReport* report = nullptr) {
  cfg.validate();
  std::size_t usable = 0;
  for (const auto& s : samples) usable += !s.empty();
  if (usable < 2 * cfg.batch) throw DataError("train_uff: need at least 2 * batch samples with patches");
  std::vector<SamplePatches> pool;
  for (const auto& s : samples)
    if (!s.empty()) pool.push_back(s);

  FusionHead head = FusionHead::init(fcfg, cfg.seed);
  Rng rng(mix_seed(cfg.seed ^ 0x747261696eull));
  Rng heldout_rng(mix_seed(cfg.seed ^ 0x68656c64ull));
  const auto heldout = detail::draw_batch(pool, cfg, heldout_rng);
  TrainReport rep;
  rep.initial_heldout_loss = infonce_loss(heldout, head);
  AdamW opt(head, cfg);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const auto batch = detail::draw_batch(pool, cfg, rng);
    if (batch.size() < 2) continue;
    FusionHead grad = head.zeros_like();
    const double loss = infonce_loss(batch, head, &grad);
    if (!std::isfinite(loss)) throw NumericError("train_uff: loss diverged at step " + std::to_string(step));
    rep.losses.push_back(loss);
    opt.step(head, grad, learning_rate(cfg, step));
  }
  head.validate();
  rep.final_heldout_loss = infonce_loss(heldout, head);
  if (!std::isfinite(rep.final_heldout_loss)) throw NumericError("train_uff: held-out loss is not finite");
  if (report) *report = std::move(rep);
  return head;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline TensorPack head_to_pack(const FusionHead& h) {
  TensorPack p;
  const auto put = [&](const std::string& name, const Linear& l) {
    p[name + ".weight"] = Tensor{{l.out, l.in}, l.weight};
    p[name + ".bias"] = Tensor{{l.out}, l.bias};
  };
  put("mlp_rgb.hidden", h.mlp_rgb.hidden);
  put("mlp_rgb.output", h.mlp_rgb.output);
  put("mlp_pc.hidden", h.mlp_pc.hidden);
  put("mlp_pc.output", h.mlp_pc.output);
  put("proj_rgb", h.proj_rgb);
  put("proj_pc", h.proj_pc);
  p["temperature"] = Tensor{{1}, {h.temperature}};
  return p;
}

inline FusionHead head_from_pack(const TensorPack& p) {
  const auto get = [&](const std::string& name) {
    const Tensor& w = require(p, name + ".weight");
    const Tensor& b = require(p, name + ".bias");
    if (w.shape.size() != 2 || b.shape.size() != 1 || b.shape[0] != w.shape[0])
      throw ParseError(ParseErrc::ShapeMismatch, "fusion head layer '" + name + "'");
    Linear l(w.shape[1], w.shape[0]);
    l.weight = w.values;
    l.bias = b.values;
    return l;
  };
  FusionHead h;
  h.mlp_rgb = Mlp{get("mlp_rgb.hidden"), get("mlp_rgb.output")};
  h.mlp_pc = Mlp{get("mlp_pc.hidden"), get("mlp_pc.output")};
  h.proj_rgb = get("proj_rgb");
  h.proj_pc = get("proj_pc");
  const Tensor& t = require(p, "temperature");
  if (t.values.size() != 1) throw ParseError(ParseErrc::ShapeMismatch, "fusion head temperature");
  h.temperature = t.values[0];
  if (h.mlp_rgb.hidden.out != h.mlp_rgb.output.in || h.mlp_pc.hidden.out != h.mlp_pc.output.in ||
      h.proj_rgb.in != h.mlp_rgb.output.out || h.proj_pc.in != h.mlp_pc.output.out)
    throw ParseError(ParseErrc::ShapeMismatch, "fusion head layer chain");
  h.validate();
  return h;
}

inline void write_head(const FusionHead& h, const std::filesystem::path& path) { write_pack(head_to_pack(h), path); }
inline FusionHead read_head(const std::filesystem::path& path) { return head_from_pack(read_pack(path)); }

}  // namespace mmnr
