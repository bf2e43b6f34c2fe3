#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dfam/layers.hpp"
#include "dfam/ops.hpp"
#include "dfam/tensor.hpp"

namespace dfam {

struct ModelConfig {
  int d_model = 64;
  int heads = 4;
  int points = 4;  // sampling points per head per level
  int levels = 4;
  int enc_layers = 2;
  int dec_layers = 2;
  int queries = 25;
  int num_classes = 1;
  int ffn_dim = 256;

  void validate() const {
    if (d_model % heads != 0) throw ShapeError("model config: d_model not divisible by heads");
  }
};

struct LevelShape {
  int h = 0, w = 0;
};

// Fixed 2-D sinusoidal positional encoding; first half of the channels encode
// x, second half y, in sin/cos pairs.
inline void sinusoidal_pos(double nx, double ny, int d, double* out) {
  const int half = d / 2;
  const double scale = 2.0 * 3.14159265358979323846;
  for (int i = 0; i < half; i += 2) {
    const double freq = std::pow(10000.0, static_cast<double>(i) / half);
    out[i] = std::sin(nx * scale / freq);
    out[i + 1] = std::cos(nx * scale / freq);
    out[half + i] = std::sin(ny * scale / freq);
    out[half + i + 1] = std::cos(ny * scale / freq);
  }
}

// --------------------------------------------------------------------------
// Multi-scale deformable attention. Each query predicts, per head and level,
// K sampling offsets and attention logits; weights are softmaxed over the
// L*K samples of a head; values are bilinear-sampled from the value-projected
// memory. Reference points and sampling locations are normalized (x,y) in
// [0,1]^2; offsets are in pixels of the sampled level.
class MSDeformAttn {
 public:
  MSDeformAttn() = default;
  MSDeformAttn(const ModelConfig& cfg, Rng& rng)
      : d_(cfg.d_model), m_(cfg.heads), l_(cfg.levels), k_(cfg.points) {
    const double s = std::sqrt(1.0 / d_);
    value_proj_ = Linear(d_, d_, rng, s);
    out_proj_ = Linear(d_, d_, rng, s);
    offset_gen_ = Linear(m_ * l_ * k_ * 2, d_, rng, 0.01);
    weight_gen_ = Linear(m_ * l_ * k_, d_, rng, 0.01);
  }

  Tensor forward(const Tensor& query, const Tensor& ref, const Tensor& memory,
                 const std::vector<LevelShape>& shapes) {
    require_rank(query, 2, "ms_deform_attn query");
    const int N = query.dim(0);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < 2; ++c) {
        const double v = ref.at2(n, c);
        if (v < 0.0 || v > 1.0)
          throw ShapeError("ms_deform_attn: reference point outside [0,1]^2 at query " +
                           std::to_string(n));
      }
    shapes_ = shapes;
    ref_ = ref;
    level_base_.assign(shapes.size() + 1, 0);
    for (size_t i = 0; i < shapes.size(); ++i)
      level_base_[i + 1] = level_base_[i] + shapes[i].h * shapes[i].w;

    value_ = value_proj_.forward(memory);
    offsets_ = offset_gen_.forward(query);                 // [N, M*L*K*2], (dx,dy) pairs
    Tensor wlog = weight_gen_.forward(query);              // [N, M*L*K]
    attn_ = softmax(Tensor({N * m_, l_ * k_}, wlog.vec()), 1);

    const int dh = d_ / m_;
    Tensor head_out({N, d_});
    for (int n = 0; n < N; ++n) {
      for (int m = 0; m < m_; ++m) {
        double* o = head_out.data() + static_cast<int64_t>(n) * d_ + m * dh;
        for (int l = 0; l < l_; ++l) {
          const int H = shapes_[static_cast<size_t>(l)].h, W = shapes_[static_cast<size_t>(l)].w;
          for (int k = 0; k < k_; ++k) {
            const int64_t si = sample_index(n, m, l, k);
            const double a = attn_[si];
            const double px = ref.at2(n, 0) * W - 0.5 + offsets_[2 * si];
            const double py = ref.at2(n, 1) * H - 0.5 + offsets_[2 * si + 1];
            accumulate_sample(l, m * dh, dh, py, px, a, o);
            (void)H;
          }
        }
      }
    }
    query_cache_ = query;
    head_out_ = head_out;
    return out_proj_.forward(head_out);
  }

  // grad_ref may be null (encoder reference points are constants)
  void backward(const Tensor& gout, Tensor& grad_query, Tensor& grad_memory, Tensor* grad_ref) {
    const int N = query_cache_.dim(0);
    const int dh = d_ / m_;
    Tensor ghead = out_proj_.backward(gout);
    Tensor gvalue(value_.shape());
    Tensor gattn({N * m_, l_ * k_});
    Tensor goff(offsets_.shape());
    Tensor gref({N, 2});

    for (int n = 0; n < N; ++n) {
      for (int m = 0; m < m_; ++m) {
        const double* g = ghead.data() + static_cast<int64_t>(n) * d_ + m * dh;
        for (int l = 0; l < l_; ++l) {
          const int H = shapes_[static_cast<size_t>(l)].h, W = shapes_[static_cast<size_t>(l)].w;
          for (int k = 0; k < k_; ++k) {
            const int64_t si = sample_index(n, m, l, k);
            const double a = attn_[si];
            const double px = ref_.at2(n, 0) * W - 0.5 + offsets_[2 * si];
            const double py = ref_.at2(n, 1) * H - 0.5 + offsets_[2 * si + 1];
            double ga = 0.0, gx = 0.0, gy = 0.0;
            sample_backward(l, m * dh, dh, py, px, a, g, gvalue, ga, gy, gx);
            gattn[si] = ga;
            goff[2 * si] += gx;
            goff[2 * si + 1] += gy;
            gref.at2(n, 0) += gx * W;
            gref.at2(n, 1) += gy * H;
          }
        }
      }
    }
    Tensor gwlog = softmax_backward(attn_, gattn, 1);
    grad_query = weight_gen_.backward(Tensor({N, m_ * l_ * k_}, gwlog.vec()));
    grad_query.add_(offset_gen_.backward(goff));
    grad_memory = value_proj_.backward(gvalue);
    if (grad_ref) grad_ref->add_(gref);
  }

  const Tensor& attention() const { return attn_; }

  void collect(ParamList& out, const std::string& prefix) {
    value_proj_.collect(out, prefix + ".value_proj");
    offset_gen_.collect(out, prefix + ".offset_gen");
    weight_gen_.collect(out, prefix + ".weight_gen");
    out_proj_.collect(out, prefix + ".out_proj");
  }

 private:
  int64_t sample_index(int n, int m, int l, int k) const {
    return ((static_cast<int64_t>(n) * m_ + m) * l_ + l) * k_ + k;
  }

  // out[dim] += a * bilinear(value plane at level l, rows as grid)
  void accumulate_sample(int l, int dim0, int dh, double py, double px, double a, double* out) {
    const int H = shapes_[static_cast<size_t>(l)].h, W = shapes_[static_cast<size_t>(l)].w;
    const int y0 = static_cast<int>(std::floor(py));
    const int x0 = static_cast<int>(std::floor(px));
    const double dy = py - y0, dx = px - x0;
    for (int i = 0; i < 2; ++i) {
      const int yy = y0 + i;
      if (yy < 0 || yy >= H) continue;
      const double wy = i ? dy : 1.0 - dy;
      for (int j = 0; j < 2; ++j) {
        const int xx = x0 + j;
        if (xx < 0 || xx >= W) continue;
        const double wx = j ? dx : 1.0 - dx;
        const double wgt = a * wy * wx;
        const double* row =
            value_.data() + static_cast<int64_t>(level_base_[static_cast<size_t>(l)] + yy * W + xx) * d_ + dim0;
        for (int c = 0; c < dh; ++c) out[c] += wgt * row[c];
      }
    }
  }

  void sample_backward(int l, int dim0, int dh, double py, double px, double a, const double* g,
                       Tensor& gvalue, double& ga, double& gy_out, double& gx_out) {
    const int H = shapes_[static_cast<size_t>(l)].h, W = shapes_[static_cast<size_t>(l)].w;
    const int y0 = static_cast<int>(std::floor(py));
    const int x0 = static_cast<int>(std::floor(px));
    const double dy = py - y0, dx = px - x0;
    for (int i = 0; i < 2; ++i) {
      const int yy = y0 + i;
      if (yy < 0 || yy >= H) continue;
      const double wy = i ? dy : 1.0 - dy;
      const double dwy = i ? 1.0 : -1.0;
      for (int j = 0; j < 2; ++j) {
        const int xx = x0 + j;
        if (xx < 0 || xx >= W) continue;
        const double wx = j ? dx : 1.0 - dx;
        const double dwx = j ? 1.0 : -1.0;
        const int64_t row = static_cast<int64_t>(level_base_[static_cast<size_t>(l)] + yy * W + xx);
        const double* v = value_.data() + row * d_ + dim0;
        double* gv = gvalue.data() + row * d_ + dim0;
        double dot = 0.0;
        for (int c = 0; c < dh; ++c) {
          dot += g[c] * v[c];
          gv[c] += g[c] * a * wy * wx;
        }
        ga += wy * wx * dot;
        gy_out += a * dwy * wx * dot;
        gx_out += a * wy * dwx * dot;
      }
    }
  }

  int d_ = 0, m_ = 0, l_ = 0, k_ = 0;
  Linear value_proj_, offset_gen_, weight_gen_, out_proj_;
  std::vector<LevelShape> shapes_;
  std::vector<int> level_base_;
  Tensor value_, offsets_, attn_, ref_, query_cache_, head_out_;
};

// --------------------------------------------------------------------------
// Standard scaled dot-product multi-head attention (decoder self-attention)

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(int d_model, int heads, Rng& rng) : d_(d_model), m_(heads) {
    const double s = std::sqrt(1.0 / d_model);
    q_proj_ = Linear(d_, d_, rng, s);
    k_proj_ = Linear(d_, d_, rng, s);
    v_proj_ = Linear(d_, d_, rng, s);
    out_proj_ = Linear(d_, d_, rng, s);
  }

  Tensor forward(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in) {
    const int N = q_in.dim(0), S = k_in.dim(0);
    const int dh = d_ / m_;
    q_ = q_proj_.forward(q_in);
    k_ = k_proj_.forward(k_in);
    v_ = v_proj_.forward(v_in);
    Tensor scores({m_ * N, S});
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int m = 0; m < m_; ++m)
      for (int n = 0; n < N; ++n)
        for (int s = 0; s < S; ++s) {
          double acc = 0.0;
          const double* qr = q_.data() + static_cast<int64_t>(n) * d_ + m * dh;
          const double* kr = k_.data() + static_cast<int64_t>(s) * d_ + m * dh;
          for (int c = 0; c < dh; ++c) acc += qr[c] * kr[c];
          scores.at2(m * N + n, s) = acc * scale;
        }
    attn_ = softmax(scores, 1);
    Tensor head({N, d_});
    for (int m = 0; m < m_; ++m)
      for (int n = 0; n < N; ++n) {
        double* o = head.data() + static_cast<int64_t>(n) * d_ + m * dh;
        for (int s = 0; s < S; ++s) {
          const double a = attn_.at2(m * N + n, s);
          const double* vr = v_.data() + static_cast<int64_t>(s) * d_ + m * dh;
          for (int c = 0; c < dh; ++c) o[c] += a * vr[c];
        }
      }
    return out_proj_.forward(head);
  }

  void backward(const Tensor& gout, Tensor& gq_in, Tensor& gk_in, Tensor& gv_in) {
    const int N = q_.dim(0), S = k_.dim(0);
    const int dh = d_ / m_;
    Tensor ghead = out_proj_.backward(gout);
    Tensor gattn({m_ * N, S});
    Tensor gv(v_.shape());
    for (int m = 0; m < m_; ++m)
      for (int n = 0; n < N; ++n) {
        const double* g = ghead.data() + static_cast<int64_t>(n) * d_ + m * dh;
        for (int s = 0; s < S; ++s) {
          const double* vr = v_.data() + static_cast<int64_t>(s) * d_ + m * dh;
          double* gvr = gv.data() + static_cast<int64_t>(s) * d_ + m * dh;
          const double a = attn_.at2(m * N + n, s);
          double dot = 0.0;
          for (int c = 0; c < dh; ++c) {
            dot += g[c] * vr[c];
            gvr[c] += a * g[c];
          }
          gattn.at2(m * N + n, s) = dot;
        }
      }
    Tensor gscores = softmax_backward(attn_, gattn, 1);
    Tensor gq(q_.shape()), gk(k_.shape());
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int m = 0; m < m_; ++m)
      for (int n = 0; n < N; ++n)
        for (int s = 0; s < S; ++s) {
          const double gs = gscores.at2(m * N + n, s) * scale;
          const double* qr = q_.data() + static_cast<int64_t>(n) * d_ + m * dh;
          const double* kr = k_.data() + static_cast<int64_t>(s) * d_ + m * dh;
          double* gqr = gq.data() + static_cast<int64_t>(n) * d_ + m * dh;
          double* gkr = gk.data() + static_cast<int64_t>(s) * d_ + m * dh;
          for (int c = 0; c < dh; ++c) {
            gqr[c] += gs * kr[c];
            gkr[c] += gs * qr[c];
          }
        }
    gq_in = q_proj_.backward(gq);
    gk_in = k_proj_.backward(gk);
    gv_in = v_proj_.backward(gv);
  }

  void collect(ParamList& out, const std::string& prefix) {
    q_proj_.collect(out, prefix + ".q_proj");
    k_proj_.collect(out, prefix + ".k_proj");
    v_proj_.collect(out, prefix + ".v_proj");
    out_proj_.collect(out, prefix + ".out_proj");
  }

 private:
  int d_ = 0, m_ = 0;
  Linear q_proj_, k_proj_, v_proj_, out_proj_;
  Tensor q_, k_, v_, attn_;
};

class FFN {
 public:
  FFN() = default;
  FFN(int d_model, int hidden, Rng& rng)
      : l1_(hidden, d_model, rng, std::sqrt(2.0 / d_model)),
        l2_(d_model, hidden, rng, std::sqrt(1.0 / hidden)) {}

  Tensor forward(const Tensor& x) { return l2_.forward(act_.forward(l1_.forward(x))); }
  Tensor backward(const Tensor& gout) { return l1_.backward(act_.backward(l2_.backward(gout))); }

  void collect(ParamList& out, const std::string& prefix) {
    l1_.collect(out, prefix + ".linear1");
    l2_.collect(out, prefix + ".linear2");
  }

 private:
  Linear l1_, l2_;
  ReLU act_;
};

// --------------------------------------------------------------------------
// Encoder: flattened pyramid tokens attend to the multi-scale memory at their
// own normalized locations.

class EncoderLayer {
 public:
  EncoderLayer() = default;
  EncoderLayer(const ModelConfig& cfg, Rng& rng)
      : attn_(cfg, rng), ln1_(cfg.d_model), ln2_(cfg.d_model), ffn_(cfg.d_model, cfg.ffn_dim, rng) {}

  Tensor forward(const Tensor& x, const Tensor& pos, const Tensor& ref,
                 const std::vector<LevelShape>& shapes) {
    Tensor q = x;
    q.add_(pos);
    Tensor a = attn_.forward(q, ref, x, shapes);
    a.add_(x);
    Tensor x1 = ln1_.forward(a);
    Tensor f = ffn_.forward(x1);
    f.add_(x1);
    return ln2_.forward(f);
  }

  // gpos accumulates the positional-encoding path (for learned level embeds)
  Tensor backward(const Tensor& gout, Tensor& gpos) {
    Tensor g = ln2_.backward(gout);
    Tensor gx1 = ffn_.backward(g);
    gx1.add_(g);
    Tensor ga = ln1_.backward(gx1);
    Tensor gq, gmem;
    attn_.backward(ga, gq, gmem, nullptr);
    gpos.add_(gq);
    Tensor gx = ga;  // residual
    gx.add_(gq);
    gx.add_(gmem);
    return gx;
  }

  void collect(ParamList& out, const std::string& prefix) {
    attn_.collect(out, prefix + ".attn");
    ln1_.collect(out, prefix + ".norm1");
    ln2_.collect(out, prefix + ".norm2");
    ffn_.collect(out, prefix + ".ffn");
  }

  MSDeformAttn& attn() { return attn_; }

 private:
  MSDeformAttn attn_;
  LayerNorm ln1_, ln2_;
  FFN ffn_;
};

class Encoder {
 public:
  Encoder() = default;
  Encoder(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
    level_embed_ = Tensor::randn({cfg.levels, cfg.d_model}, rng, 0.02);
    g_level_embed_ = Tensor(level_embed_.shape());
    for (int i = 0; i < cfg.enc_layers; ++i) layers_.emplace_back(cfg, rng);
  }

  // src: flattened pyramid [S, d]; shapes per level, level-major token order
  Tensor forward(const Tensor& src, const std::vector<LevelShape>& shapes) {
    shapes_ = shapes;
    const int S = src.dim(0);
    pos_ = Tensor({S, cfg_.d_model});
    ref_ = Tensor({S, 2});
    int t = 0;
    for (size_t l = 0; l < shapes.size(); ++l) {
      for (int y = 0; y < shapes[l].h; ++y)
        for (int x = 0; x < shapes[l].w; ++x, ++t) {
          const double nx = (x + 0.5) / shapes[l].w;
          const double ny = (y + 0.5) / shapes[l].h;
          sinusoidal_pos(nx, ny, cfg_.d_model, pos_.data() + static_cast<int64_t>(t) * cfg_.d_model);
          for (int c = 0; c < cfg_.d_model; ++c)
            pos_[static_cast<int64_t>(t) * cfg_.d_model + c] +=
                level_embed_.at2(static_cast<int>(l), c);
          ref_.at2(t, 0) = nx;
          ref_.at2(t, 1) = ny;
        }
    }
    Tensor x = src;
    for (auto& layer : layers_) x = layer.forward(x, pos_, ref_, shapes);
    return x;
  }

  Tensor backward(const Tensor& gout) {
    Tensor gpos({gout.dim(0), cfg_.d_model});
    Tensor g = gout;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = it->backward(g, gpos);
    // positional path: only the learned level embeds carry parameters
    int t = 0;
    for (size_t l = 0; l < shapes_.size(); ++l) {
      const int count = shapes_[l].h * shapes_[l].w;
      for (int i = 0; i < count; ++i, ++t)
        for (int c = 0; c < cfg_.d_model; ++c)
          g_level_embed_.at2(static_cast<int>(l), c) += gpos[static_cast<int64_t>(t) * cfg_.d_model + c];
    }
    return g;
  }

  const Tensor& reference_points() const { return ref_; }

  void collect(ParamList& out, const std::string& prefix) {
    out.push_back({prefix + ".level_embed", &level_embed_, &g_level_embed_, false});
    for (size_t i = 0; i < layers_.size(); ++i)
      layers_[i].collect(out, prefix + ".layer" + std::to_string(i));
  }

  std::vector<EncoderLayer>& layers() { return layers_; }

 private:
  ModelConfig cfg_;
  Tensor level_embed_, g_level_embed_, pos_, ref_;
  std::vector<LevelShape> shapes_;
  std::vector<EncoderLayer> layers_;
};

// --------------------------------------------------------------------------
// Decoder with object queries, per-layer auxiliary outputs, shared heads

struct DetectionOutput {
  Tensor logits;  // [Q, num_classes]
  Tensor boxes;   // [Q, 4] (cx, cy, w, h), sigmoid-bounded
};

class DecoderLayer {
 public:
  DecoderLayer() = default;
  DecoderLayer(const ModelConfig& cfg, Rng& rng)
      : self_attn_(cfg.d_model, cfg.heads, rng),
        cross_attn_(cfg, rng),
        ln1_(cfg.d_model),
        ln2_(cfg.d_model),
        ln3_(cfg.d_model),
        ffn_(cfg.d_model, cfg.ffn_dim, rng) {}

  Tensor forward(const Tensor& tgt, const Tensor& ref, const Tensor& memory,
                 const std::vector<LevelShape>& shapes) {
    Tensor sa = self_attn_.forward(tgt, tgt, tgt);
    sa.add_(tgt);
    Tensor x1 = ln1_.forward(sa);
    Tensor ca = cross_attn_.forward(x1, ref, memory, shapes);
    ca.add_(x1);
    Tensor x2 = ln2_.forward(ca);
    Tensor f = ffn_.forward(x2);
    f.add_(x2);
    return ln3_.forward(f);
  }

  Tensor backward(const Tensor& gout, Tensor& gmemory, Tensor& gref) {
    Tensor g = ln3_.backward(gout);
    Tensor gx2 = ffn_.backward(g);
    gx2.add_(g);
    Tensor gca = ln2_.backward(gx2);
    Tensor gcq, gmem;
    cross_attn_.backward(gca, gcq, gmem, &gref);
    gmemory.add_(gmem);
    Tensor gx1 = gca;  // residual
    gx1.add_(gcq);
    Tensor gsa = ln1_.backward(gx1);
    Tensor gq1, gq2, gv;
    self_attn_.backward(gsa, gq1, gq2, gv);
    Tensor gtgt = gsa;  // residual
    gtgt.add_(gq1);
    gtgt.add_(gq2);
    gtgt.add_(gv);
    return gtgt;
  }

  void collect(ParamList& out, const std::string& prefix) {
    self_attn_.collect(out, prefix + ".self_attn");
    cross_attn_.collect(out, prefix + ".cross_attn");
    ln1_.collect(out, prefix + ".norm1");
    ln2_.collect(out, prefix + ".norm2");
    ln3_.collect(out, prefix + ".norm3");
    ffn_.collect(out, prefix + ".ffn");
  }

 private:
  MultiHeadAttention self_attn_;
  MSDeformAttn cross_attn_;
  LayerNorm ln1_, ln2_, ln3_;
  FFN ffn_;
};

// Class and box heads, shared across decoder layers (deep supervision).
class PredictionHeads {
 public:
  PredictionHeads() = default;
  PredictionHeads(const ModelConfig& cfg, Rng& rng) {
    cls_ = Linear(cfg.num_classes, cfg.d_model, rng, std::sqrt(1.0 / cfg.d_model));
    box1_ = Linear(cfg.d_model, cfg.d_model, rng, std::sqrt(2.0 / cfg.d_model));
    box2_ = Linear(4, cfg.d_model, rng, std::sqrt(1.0 / cfg.d_model));
    // bias the box head toward mid-sized boxes at init
    box2_.bias()[2] = -1.5;
    box2_.bias()[3] = -1.5;
  }

  DetectionOutput forward(int layer, const Tensor& x) {
    if (static_cast<size_t>(layer) >= caches_.size()) caches_.resize(static_cast<size_t>(layer) + 1);
    auto& c = caches_[static_cast<size_t>(layer)];
    DetectionOutput out;
    out.logits = cls_.forward_with(x, c.cls_in);
    Tensor h = box1_.forward_with(x, c.box1_in);
    c.box_hidden = h;
    Tensor hr = relu(h);
    c.box_pre = box2_.forward_with(hr, c.box2_in);
    out.boxes = sigmoid(c.box_pre);
    c.boxes = out.boxes;
    return out;
  }

  Tensor backward(int layer, const Tensor& glogits, const Tensor& gboxes) {
    auto& c = caches_[static_cast<size_t>(layer)];
    Tensor gx = cls_.backward_with(glogits, c.cls_in);
    Tensor gpre = sigmoid_backward(c.boxes, gboxes);
    Tensor ghr = box2_.backward_with(gpre, c.box2_in);
    Tensor gh = relu_backward(c.box_hidden, ghr);
    gx.add_(box1_.backward_with(gh, c.box1_in));
    return gx;
  }

  void collect(ParamList& out, const std::string& prefix) {
    cls_.collect(out, prefix + ".cls");
    box1_.collect(out, prefix + ".box1");
    box2_.collect(out, prefix + ".box2");
  }

 private:
  struct Cache {
    Tensor cls_in, box1_in, box2_in, box_hidden, box_pre, boxes;
  };
  Linear cls_, box1_, box2_;
  std::vector<Cache> caches_;
};

class Decoder {
 public:
  Decoder() = default;
  Decoder(const ModelConfig& cfg, Rng& rng) : cfg_(cfg), heads_(cfg, rng) {
    query_embed_ = Tensor::randn({cfg.queries, cfg.d_model}, rng, 0.5);
    ref_embed_ = Tensor::randn({cfg.queries, 2}, rng, 1.0);
    g_query_embed_ = Tensor(query_embed_.shape());
    g_ref_embed_ = Tensor(ref_embed_.shape());
    for (int i = 0; i < cfg.dec_layers; ++i) layers_.emplace_back(cfg, rng);
  }

  // per-layer detection sets (deep supervision)
  std::vector<DetectionOutput> forward(const Tensor& memory, const std::vector<LevelShape>& shapes) {
    shapes_ = shapes;
    ref_points_ = sigmoid(ref_embed_);  // (x,y) in (0,1)^2
    Tensor tgt = query_embed_;          // learned content embeddings seed the decoder state
    std::vector<DetectionOutput> outputs;
    for (size_t i = 0; i < layers_.size(); ++i) {
      tgt = layers_[i].forward(tgt, ref_points_, memory, shapes);
      outputs.push_back(heads_.forward(static_cast<int>(i), tgt));
    }
    return outputs;
  }

  // grads per layer for logits/boxes; returns grad wrt memory
  Tensor backward(const std::vector<Tensor>& glogits, const std::vector<Tensor>& gboxes,
                  int memory_len) {
    Tensor gmemory({memory_len, cfg_.d_model});
    Tensor gref({cfg_.queries, 2});
    Tensor gtgt({cfg_.queries, cfg_.d_model});
    for (int i = static_cast<int>(layers_.size()) - 1; i >= 0; --i) {
      Tensor g = heads_.backward(i, glogits[static_cast<size_t>(i)], gboxes[static_cast<size_t>(i)]);
      g.add_(gtgt);
      gtgt = layers_[static_cast<size_t>(i)].backward(g, gmemory, gref);
    }
    g_query_embed_.add_(gtgt);
    g_ref_embed_.add_(sigmoid_backward(ref_points_, gref));
    return gmemory;
  }

  const Tensor& reference_points() const { return ref_points_; }

  void collect(ParamList& out, const std::string& prefix) {
    out.push_back({prefix + ".query_embed", &query_embed_, &g_query_embed_, false});
    out.push_back({prefix + ".ref_embed", &ref_embed_, &g_ref_embed_, false});
    for (size_t i = 0; i < layers_.size(); ++i)
      layers_[i].collect(out, prefix + ".layer" + std::to_string(i));
    heads_.collect(out, prefix + ".heads");
  }

 private:
  ModelConfig cfg_;
  Tensor query_embed_, ref_embed_, g_query_embed_, g_ref_embed_, ref_points_;
  std::vector<LevelShape> shapes_;
  std::vector<DecoderLayer> layers_;
  PredictionHeads heads_;
};

}  // namespace dfam
