#include "emem/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "emem/error.hpp"
#include "emem/kernels.hpp"
#include "emem/rng.hpp"
#include "json.hpp"

namespace emem {

using nlohmann::json;
using kernels::axpy;
using kernels::dot;
using kernels::gemv;
using kernels::gemv_t;
using kernels::ger;
using kernels::scal;

namespace {

constexpr int kF = EncoderConfig::kTokenDim;       // 9
constexpr int kE = EncoderConfig::kClassEmbedDim;  // 4
constexpr int kC = kNumAgentClasses;

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// ---------------------------------------------------------------------------
// Parameter layout: one flat buffer, addressed through named slices.
// Ordered state block | graph block | head block so the two learning-rate
// lanes and the fusion head are contiguous ranges.
// ---------------------------------------------------------------------------

struct Slice {
  std::size_t off = 0;
  std::size_t rows = 0;
  std::size_t cols = 1;
  std::size_t size() const { return rows * cols; }
};

struct LayerSlices {
  Slice wq, bq, wk, bk, wv, bv, wo, bo, alpha_attn;
  Slice ff_w1, ff_b1, ff_w2, ff_b2, alpha_ff;
};

struct Layout {
  EncoderConfig cfg;

  Slice s_embed, s_in_w, s_in_b;
  std::vector<LayerSlices> layers;

  Slice g_embed, gcn_w;
  Slice gru_az, gru_ar, gru_ah, gru_bz, gru_br, gru_bh;
  Slice iatt_wq, iatt_bq, iatt_wk, iatt_bk, iatt_wv, iatt_bv;
  Slice oatt_wq, oatt_bq, oatt_wk, oatt_bk, oatt_wv, oatt_bv;

  Slice fuse_w, fuse_b, cls_w, cls_b;

  std::size_t state_end = 0;
  std::size_t graph_end = 0;
  std::size_t total = 0;

  explicit Layout(const EncoderConfig& c) : cfg(c) {
    std::size_t at = 0;
    auto alloc = [&](std::size_t rows, std::size_t cols) {
      Slice s{at, rows, cols};
      at += s.size();
      return s;
    };
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto dg = static_cast<std::size_t>(cfg.d_graph);
    const auto dff = static_cast<std::size_t>(cfg.d_ff());
    const auto dd = static_cast<std::size_t>(cfg.gru_dim());

    s_embed = alloc(kC, kE);
    s_in_w = alloc(d, kF);
    s_in_b = alloc(d, 1);
    for (int l = 0; l < cfg.n_layers; ++l) {
      LayerSlices ls;
      ls.wq = alloc(d, d);
      ls.bq = alloc(d, 1);
      ls.wk = alloc(d, d);
      ls.bk = alloc(d, 1);
      ls.wv = alloc(d, d);
      ls.bv = alloc(d, 1);
      ls.wo = alloc(d, d);
      ls.bo = alloc(d, 1);
      ls.alpha_attn = alloc(d, 1);
      ls.ff_w1 = alloc(dff, d);
      ls.ff_b1 = alloc(dff, 1);
      ls.ff_w2 = alloc(d, dff);
      ls.ff_b2 = alloc(d, 1);
      ls.alpha_ff = alloc(d, 1);
      layers.push_back(ls);
    }
    state_end = at;

    g_embed = alloc(kC, kE);
    gcn_w = alloc(dg, kF);
    gru_az = alloc(dd, dd);
    gru_ar = alloc(dd, dd);
    gru_ah = alloc(dd, dd);
    gru_bz = alloc(dd, 1);
    gru_br = alloc(dd, 1);
    gru_bh = alloc(dd, 1);
    iatt_wq = alloc(dg, dg);
    iatt_bq = alloc(dg, 1);
    iatt_wk = alloc(dg, dg);
    iatt_bk = alloc(dg, 1);
    iatt_wv = alloc(dg, dg);
    iatt_bv = alloc(dg, 1);
    oatt_wq = alloc(dg, dg);
    oatt_bq = alloc(dg, 1);
    oatt_wk = alloc(dg, dg);
    oatt_bk = alloc(dg, 1);
    oatt_wv = alloc(dg, dg);
    oatt_bv = alloc(dg, 1);
    graph_end = at;

    fuse_w = alloc(d, d + dg);
    fuse_b = alloc(d, 1);
    cls_w = alloc(static_cast<std::size_t>(cfg.n_classes), d);
    cls_b = alloc(static_cast<std::size_t>(cfg.n_classes), 1);
    total = at;
  }

  std::vector<std::pair<std::string, Slice>> named() const {
    std::vector<std::pair<std::string, Slice>> out = {
        {"state_class_embed", s_embed}, {"state_in_w", s_in_w}, {"state_in_b", s_in_b}};
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& ls = layers[l];
      const std::string p = "state_layer" + std::to_string(l) + "_";
      out.insert(out.end(), {{p + "wq", ls.wq}, {p + "bq", ls.bq}, {p + "wk", ls.wk},
                             {p + "bk", ls.bk}, {p + "wv", ls.wv}, {p + "bv", ls.bv},
                             {p + "wo", ls.wo}, {p + "bo", ls.bo},
                             {p + "alpha_attn", ls.alpha_attn},
                             {p + "ff_w1", ls.ff_w1}, {p + "ff_b1", ls.ff_b1},
                             {p + "ff_w2", ls.ff_w2}, {p + "ff_b2", ls.ff_b2},
                             {p + "alpha_ff", ls.alpha_ff}});
    }
    out.insert(out.end(), {{"graph_class_embed", g_embed},
                           {"gcn_w", gcn_w},
                           {"gru_az", gru_az},
                           {"gru_ar", gru_ar},
                           {"gru_ah", gru_ah},
                           {"gru_bz", gru_bz},
                           {"gru_br", gru_br},
                           {"gru_bh", gru_bh},
                           {"inner_att_wq", iatt_wq},
                           {"inner_att_bq", iatt_bq},
                           {"inner_att_wk", iatt_wk},
                           {"inner_att_bk", iatt_bk},
                           {"inner_att_wv", iatt_wv},
                           {"inner_att_bv", iatt_bv},
                           {"outer_att_wq", oatt_wq},
                           {"outer_att_bq", oatt_bq},
                           {"outer_att_wk", oatt_wk},
                           {"outer_att_bk", oatt_bk},
                           {"outer_att_wv", oatt_wv},
                           {"outer_att_bv", oatt_bv},
                           {"fuse_w", fuse_w},
                           {"fuse_b", fuse_b},
                           {"cls_w", cls_w},
                           {"cls_b", cls_b}});
    return out;
  }
};

inline const double* at(const std::vector<double>& w, const Slice& s) { return w.data() + s.off; }
inline double* at(std::vector<double>& w, const Slice& s) { return w.data() + s.off; }

// Sinusoidal positional encoding added to the raw tokens before the input
// projection, so a zero projection still annihilates the input.
void add_positional(double* token, std::int64_t t) {
  for (int i = 0; i < kF; ++i) {
    const double omega = std::pow(10000.0, -2.0 * static_cast<double>(i / 2) / kF);
    token[i] += (i % 2 == 0) ? std::sin(static_cast<double>(t) * omega)
                             : std::cos(static_cast<double>(t) * omega);
  }
}

// ---------------------------------------------------------------------------
// State path
// ---------------------------------------------------------------------------

struct LayerTape {
  std::vector<double> x0, q, k, v, attn_w, ctx, attn_out, x_mid, h1, ff_out, x_out;
};

struct StateTape {
  std::vector<double> tokens;  // T x kF
  std::vector<int> cls_codes;  // T
  std::vector<double> x_in;    // T x d
  std::vector<LayerTape> layers;
  std::vector<double> f_state;  // d
};

void softmax_row(double* row, std::size_t n) { kernels::softmax_inplace(row, n); }

void forward_state(const std::vector<double>& states, const std::vector<double>& w,
                   const Layout& L, StateTape& tp) {
  const int T = L.cfg.t_len;
  const int d = L.cfg.d_model;
  const int H = L.cfg.n_heads;
  const int dh = d / H;
  const int dff = L.cfg.d_ff();
  if (states.size() != static_cast<std::size_t>(T) * 6) {
    throw data_error("encode_states: expected a " + std::to_string(T) +
                     "x6 state array, got " + std::to_string(states.size()) + " values");
  }
  for (double v : states) {
    if (!std::isfinite(v)) throw data_error("encode_states: non-finite state value");
  }

  tp.tokens.assign(static_cast<std::size_t>(T) * kF, 0.0);
  tp.cls_codes.assign(T, 0);
  for (int t = 0; t < T; ++t) {
    const double* row = states.data() + static_cast<std::size_t>(t) * 6;
    const int code = static_cast<int>(row[1]);
    if (code < 0 || code >= kC) {
      throw data_error("encode_states: class code " + std::to_string(code) + " out of range");
    }
    tp.cls_codes[t] = code;
    double* tok = tp.tokens.data() + static_cast<std::size_t>(t) * kF;
    std::copy_n(at(w, L.s_embed) + static_cast<std::size_t>(code) * kE, kE, tok);
    tok[kE + 0] = row[0];
    tok[kE + 1] = row[2];
    tok[kE + 2] = row[3];
    tok[kE + 3] = row[4];
    tok[kE + 4] = row[5];
    add_positional(tok, t);
  }

  tp.x_in.assign(static_cast<std::size_t>(T) * d, 0.0);
  for (int t = 0; t < T; ++t) {
    double* x = tp.x_in.data() + static_cast<std::size_t>(t) * d;
    gemv(at(w, L.s_in_w), d, kF, tp.tokens.data() + static_cast<std::size_t>(t) * kF, x);
    axpy(1.0, at(w, L.s_in_b), x, d);
  }

  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  tp.layers.assign(L.cfg.n_layers, {});
  const std::vector<double>* x_prev = &tp.x_in;
  for (int l = 0; l < L.cfg.n_layers; ++l) {
    const LayerSlices& ls = L.layers[l];
    LayerTape& lt = tp.layers[l];
    lt.x0 = *x_prev;
    const auto td = static_cast<std::size_t>(T) * d;
    lt.q.assign(td, 0.0);
    lt.k.assign(td, 0.0);
    lt.v.assign(td, 0.0);
    for (int t = 0; t < T; ++t) {
      const double* x = lt.x0.data() + static_cast<std::size_t>(t) * d;
      double* q = lt.q.data() + static_cast<std::size_t>(t) * d;
      double* k = lt.k.data() + static_cast<std::size_t>(t) * d;
      double* v = lt.v.data() + static_cast<std::size_t>(t) * d;
      gemv(at(w, ls.wq), d, d, x, q);
      axpy(1.0, at(w, ls.bq), q, d);
      gemv(at(w, ls.wk), d, d, x, k);
      axpy(1.0, at(w, ls.bk), k, d);
      gemv(at(w, ls.wv), d, d, x, v);
      axpy(1.0, at(w, ls.bv), v, d);
    }
    lt.attn_w.assign(static_cast<std::size_t>(H) * T * T, 0.0);
    lt.ctx.assign(td, 0.0);
    for (int h = 0; h < H; ++h) {
      double* aw = lt.attn_w.data() + static_cast<std::size_t>(h) * T * T;
      for (int i = 0; i < T; ++i) {
        double* row = aw + static_cast<std::size_t>(i) * T;
        const double* qi = lt.q.data() + static_cast<std::size_t>(i) * d + h * dh;
        for (int j = 0; j < T; ++j) {
          row[j] = dot(qi, lt.k.data() + static_cast<std::size_t>(j) * d + h * dh, dh) *
                   inv_sqrt_dh;
        }
        softmax_row(row, T);
        double* ci = lt.ctx.data() + static_cast<std::size_t>(i) * d + h * dh;
        for (int j = 0; j < T; ++j) {
          axpy(row[j], lt.v.data() + static_cast<std::size_t>(j) * d + h * dh, ci, dh);
        }
      }
    }
    lt.attn_out.assign(td, 0.0);
    lt.x_mid.assign(td, 0.0);
    for (int t = 0; t < T; ++t) {
      double* ao = lt.attn_out.data() + static_cast<std::size_t>(t) * d;
      gemv(at(w, ls.wo), d, d, lt.ctx.data() + static_cast<std::size_t>(t) * d, ao);
      axpy(1.0, at(w, ls.bo), ao, d);
      const double* x = lt.x0.data() + static_cast<std::size_t>(t) * d;
      double* xm = lt.x_mid.data() + static_cast<std::size_t>(t) * d;
      const double* alpha = at(w, ls.alpha_attn);
      for (int i = 0; i < d; ++i) xm[i] = x[i] + alpha[i] * ao[i];
    }
    lt.h1.assign(static_cast<std::size_t>(T) * dff, 0.0);
    lt.ff_out.assign(td, 0.0);
    lt.x_out.assign(td, 0.0);
    for (int t = 0; t < T; ++t) {
      double* h1 = lt.h1.data() + static_cast<std::size_t>(t) * dff;
      gemv(at(w, ls.ff_w1), dff, d, lt.x_mid.data() + static_cast<std::size_t>(t) * d, h1);
      axpy(1.0, at(w, ls.ff_b1), h1, dff);
      kernels::tanh_vec(h1, h1, dff);
      double* fo = lt.ff_out.data() + static_cast<std::size_t>(t) * d;
      gemv(at(w, ls.ff_w2), d, dff, h1, fo);
      axpy(1.0, at(w, ls.ff_b2), fo, d);
      const double* xm = lt.x_mid.data() + static_cast<std::size_t>(t) * d;
      double* xo = lt.x_out.data() + static_cast<std::size_t>(t) * d;
      const double* alpha = at(w, ls.alpha_ff);
      for (int i = 0; i < d; ++i) xo[i] = xm[i] + alpha[i] * fo[i];
    }
    x_prev = &lt.x_out;
  }

  tp.f_state.assign(d, 0.0);
  for (int t = 0; t < T; ++t) {
    axpy(1.0 / T, x_prev->data() + static_cast<std::size_t>(t) * d, tp.f_state.data(), d);
  }
}

void backward_state(const StateTape& tp, const std::vector<double>& df_state,
                    const std::vector<double>& w, const Layout& L, std::vector<double>& g) {
  const int T = L.cfg.t_len;
  const int d = L.cfg.d_model;
  const int H = L.cfg.n_heads;
  const int dh = d / H;
  const int dff = L.cfg.d_ff();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto td = static_cast<std::size_t>(T) * d;

  std::vector<double> dx(td, 0.0);
  for (int t = 0; t < T; ++t) {
    axpy(1.0 / T, df_state.data(), dx.data() + static_cast<std::size_t>(t) * d, d);
  }

  std::vector<double> dxm(td), dattn(td), dctx(td), dq(td), dk(td), dv(td);
  std::vector<double> dpre_ff(dff), dh1(dff);
  for (int l = L.cfg.n_layers - 1; l >= 0; --l) {
    const LayerSlices& ls = L.layers[l];
    const LayerTape& lt = tp.layers[l];

    // x_out = x_mid + alpha_ff .* ff_out
    dxm = dx;
    for (int t = 0; t < T; ++t) {
      const std::size_t o = static_cast<std::size_t>(t) * d;
      const double* dxo = dx.data() + o;
      const double* fo = lt.ff_out.data() + o;
      double* galpha = at(g, ls.alpha_ff);
      const double* alpha = at(w, ls.alpha_ff);
      // ff backward for this row
      std::vector<double> dfo(d);
      for (int i = 0; i < d; ++i) {
        galpha[i] += dxo[i] * fo[i];
        dfo[i] = dxo[i] * alpha[i];
      }
      const double* h1 = lt.h1.data() + static_cast<std::size_t>(t) * dff;
      ger(at(g, ls.ff_w2), d, dff, 1.0, dfo.data(), h1);
      axpy(1.0, dfo.data(), at(g, ls.ff_b2), d);
      gemv_t(at(w, ls.ff_w2), d, dff, dfo.data(), dh1.data());
      for (int i = 0; i < dff; ++i) dpre_ff[i] = dh1[i] * (1.0 - h1[i] * h1[i]);
      const double* xm = lt.x_mid.data() + o;
      ger(at(g, ls.ff_w1), dff, d, 1.0, dpre_ff.data(), xm);
      axpy(1.0, dpre_ff.data(), at(g, ls.ff_b1), dff);
      gemv_t(at(w, ls.ff_w1), dff, d, dpre_ff.data(), dxm.data() + o, /*accumulate=*/true);
    }

    // x_mid = x0 + alpha_attn .* attn_out
    std::fill(dattn.begin(), dattn.end(), 0.0);
    dx = dxm;  // residual into x0
    for (int t = 0; t < T; ++t) {
      const std::size_t o = static_cast<std::size_t>(t) * d;
      const double* ao = lt.attn_out.data() + o;
      double* galpha = at(g, ls.alpha_attn);
      const double* alpha = at(w, ls.alpha_attn);
      for (int i = 0; i < d; ++i) {
        galpha[i] += dxm[o + i] * ao[i];
        dattn[o + i] = dxm[o + i] * alpha[i];
      }
      ger(at(g, ls.wo), d, d, 1.0, dattn.data() + o, lt.ctx.data() + o);
      axpy(1.0, dattn.data() + o, at(g, ls.bo), d);
    }
    std::fill(dctx.begin(), dctx.end(), 0.0);
    for (int t = 0; t < T; ++t) {
      const std::size_t o = static_cast<std::size_t>(t) * d;
      gemv_t(at(w, ls.wo), d, d, dattn.data() + o, dctx.data() + o);
    }

    std::fill(dq.begin(), dq.end(), 0.0);
    std::fill(dk.begin(), dk.end(), 0.0);
    std::fill(dv.begin(), dv.end(), 0.0);
    std::vector<double> da(T), ds(T);
    for (int h = 0; h < H; ++h) {
      const double* aw = lt.attn_w.data() + static_cast<std::size_t>(h) * T * T;
      for (int i = 0; i < T; ++i) {
        const double* arow = aw + static_cast<std::size_t>(i) * T;
        const double* dci = dctx.data() + static_cast<std::size_t>(i) * d + h * dh;
        double inner = 0.0;
        for (int j = 0; j < T; ++j) {
          da[j] = dot(dci, lt.v.data() + static_cast<std::size_t>(j) * d + h * dh, dh);
          axpy(arow[j], dci, dv.data() + static_cast<std::size_t>(j) * d + h * dh, dh);
          inner += da[j] * arow[j];
        }
        for (int j = 0; j < T; ++j) ds[j] = arow[j] * (da[j] - inner) * inv_sqrt_dh;
        double* dqi = dq.data() + static_cast<std::size_t>(i) * d + h * dh;
        const double* qi = lt.q.data() + static_cast<std::size_t>(i) * d + h * dh;
        for (int j = 0; j < T; ++j) {
          axpy(ds[j], lt.k.data() + static_cast<std::size_t>(j) * d + h * dh, dqi, dh);
          axpy(ds[j], qi, dk.data() + static_cast<std::size_t>(j) * d + h * dh, dh);
        }
      }
    }
    for (int t = 0; t < T; ++t) {
      const std::size_t o = static_cast<std::size_t>(t) * d;
      const double* x = lt.x0.data() + o;
      ger(at(g, ls.wq), d, d, 1.0, dq.data() + o, x);
      axpy(1.0, dq.data() + o, at(g, ls.bq), d);
      gemv_t(at(w, ls.wq), d, d, dq.data() + o, dx.data() + o, true);
      ger(at(g, ls.wk), d, d, 1.0, dk.data() + o, x);
      axpy(1.0, dk.data() + o, at(g, ls.bk), d);
      gemv_t(at(w, ls.wk), d, d, dk.data() + o, dx.data() + o, true);
      ger(at(g, ls.wv), d, d, 1.0, dv.data() + o, x);
      axpy(1.0, dv.data() + o, at(g, ls.bv), d);
      gemv_t(at(w, ls.wv), d, d, dv.data() + o, dx.data() + o, true);
    }
  }

  // input projection and class embedding
  std::vector<double> dtok(kF);
  for (int t = 0; t < T; ++t) {
    const std::size_t o = static_cast<std::size_t>(t) * d;
    const double* tok = tp.tokens.data() + static_cast<std::size_t>(t) * kF;
    ger(at(g, L.s_in_w), L.cfg.d_model, kF, 1.0, dx.data() + o, tok);
    axpy(1.0, dx.data() + o, at(g, L.s_in_b), d);
    gemv_t(at(w, L.s_in_w), d, kF, dx.data() + o, dtok.data());
    axpy(1.0, dtok.data(),
         at(g, L.s_embed) + static_cast<std::size_t>(tp.cls_codes[t]) * kE, kE);
  }
}

// ---------------------------------------------------------------------------
// Graph path
// ---------------------------------------------------------------------------

// Fixed featurization of one instance's graphs: per frame the target's
// closed neighborhood as a class histogram plus mean numeric features.
struct GraphFeat {
  int T = 0;
  std::vector<double> cls_frac;  // T x kC
  std::vector<double> mean_num;  // T x 5
};

GraphFeat build_graph_feat(const std::vector<InteractionGraph>& graphs) {
  if (graphs.empty()) throw data_error("encode_graphs: empty graph list");
  GraphFeat feat;
  feat.T = static_cast<int>(graphs.size());
  feat.cls_frac.assign(static_cast<std::size_t>(feat.T) * kC, 0.0);
  feat.mean_num.assign(static_cast<std::size_t>(feat.T) * 5, 0.0);

  const AgentState* target0 = nullptr;
  for (const AgentState& v : graphs.front().vertices) {
    if (v.uid == graphs.front().target_uid) target0 = &v;
  }
  if (!target0) throw data_error("encode_graphs: target vertex missing from first graph");
  const double ox = target0->x, oy = target0->y, oz = target0->z;
  const double rc = std::cos(-target0->orientation);
  const double rs = std::sin(-target0->orientation);

  for (int t = 0; t < feat.T; ++t) {
    const InteractionGraph& gr = graphs[t];
    std::set<std::int64_t> member_uids{gr.target_uid};
    for (const auto& [a, b] : gr.edges) {
      if (a == gr.target_uid) member_uids.insert(b);
      if (b == gr.target_uid) member_uids.insert(a);
    }
    double* frac = feat.cls_frac.data() + static_cast<std::size_t>(t) * kC;
    double* num = feat.mean_num.data() + static_cast<std::size_t>(t) * 5;
    int n = 0;
    bool target_seen = false;
    for (const AgentState& v : gr.vertices) {
      if (!member_uids.count(v.uid)) continue;
      if (v.uid == gr.target_uid) target_seen = true;
      const double dx = v.x - ox;
      const double dy = v.y - oy;
      frac[static_cast<int>(v.cls)] += 1.0;
      num[0] += static_cast<double>(v.uid) * 0.01;
      num[1] += (rc * dx - rs * dy) * 0.1;
      num[2] += (rs * dx + rc * dy) * 0.1;
      num[3] += (v.z - oz) * 0.1;
      num[4] += wrap_angle(v.orientation - target0->orientation);
      ++n;
    }
    if (!target_seen) {
      throw data_error("encode_graphs: target vertex missing from graph at index " +
                       std::to_string(t));
    }
    scal(1.0 / n, frac, kC);
    scal(1.0 / n, num, 5);
  }
  return feat;
}

// Evolved GCN weights: one GRU step per frame applied to the flattened
// matrix. Input-independent, so it is computed once per batch.
struct EvolTape {
  std::vector<double> w_seq;   // T x D, w_seq[0] = gcn_w
  std::vector<double> z, r, c;  // (T-1) x D
};

void evolve_forward(const std::vector<double>& w, const Layout& L, int T, EvolTape& tp) {
  const int D = L.cfg.gru_dim();
  tp.w_seq.assign(static_cast<std::size_t>(T) * D, 0.0);
  std::copy_n(at(w, L.gcn_w), D, tp.w_seq.data());
  tp.z.assign(static_cast<std::size_t>(std::max(0, T - 1)) * D, 0.0);
  tp.r = tp.z;
  tp.c = tp.z;
  std::vector<double> buf(D);
  for (int t = 1; t < T; ++t) {
    const double* prev = tp.w_seq.data() + static_cast<std::size_t>(t - 1) * D;
    double* z = tp.z.data() + static_cast<std::size_t>(t - 1) * D;
    double* r = tp.r.data() + static_cast<std::size_t>(t - 1) * D;
    double* c = tp.c.data() + static_cast<std::size_t>(t - 1) * D;
    gemv(at(w, L.gru_az), D, D, prev, z);
    axpy(1.0, at(w, L.gru_bz), z, D);
    for (int i = 0; i < D; ++i) z[i] = sigmoid(z[i]);
    gemv(at(w, L.gru_ar), D, D, prev, r);
    axpy(1.0, at(w, L.gru_br), r, D);
    for (int i = 0; i < D; ++i) r[i] = sigmoid(r[i]);
    for (int i = 0; i < D; ++i) buf[i] = r[i] * prev[i];
    gemv(at(w, L.gru_ah), D, D, buf.data(), c);
    axpy(1.0, at(w, L.gru_bh), c, D);
    kernels::tanh_vec(c, c, D);
    double* cur = tp.w_seq.data() + static_cast<std::size_t>(t) * D;
    for (int i = 0; i < D; ++i) cur[i] = (1.0 - z[i]) * prev[i] + z[i] * c[i];
  }
}

// BPTT through the weight evolution; consumes the per-step gradients
// accumulated over a batch and adds into the flat gradient buffer.
void evolve_backward(const EvolTape& tp, const std::vector<double>& d_w_seq,
                     const std::vector<double>& w, const Layout& L, int T,
                     std::vector<double>& g) {
  const int D = L.cfg.gru_dim();
  std::vector<double> gcur(D, 0.0), gprev(D), buf(D), daz(D), dar(D), dac(D);
  std::copy_n(d_w_seq.data() + static_cast<std::size_t>(T - 1) * D, D, gcur.data());
  for (int t = T - 1; t >= 1; --t) {
    const double* prev = tp.w_seq.data() + static_cast<std::size_t>(t - 1) * D;
    const double* z = tp.z.data() + static_cast<std::size_t>(t - 1) * D;
    const double* r = tp.r.data() + static_cast<std::size_t>(t - 1) * D;
    const double* c = tp.c.data() + static_cast<std::size_t>(t - 1) * D;

    for (int i = 0; i < D; ++i) gprev[i] = gcur[i] * (1.0 - z[i]);
    for (int i = 0; i < D; ++i) dac[i] = gcur[i] * z[i] * (1.0 - c[i] * c[i]);
    for (int i = 0; i < D; ++i) buf[i] = r[i] * prev[i];
    ger(at(g, L.gru_ah), D, D, 1.0, dac.data(), buf.data());
    axpy(1.0, dac.data(), at(g, L.gru_bh), D);
    gemv_t(at(w, L.gru_ah), D, D, dac.data(), buf.data());  // buf = d(r .* prev)
    for (int i = 0; i < D; ++i) {
      gprev[i] += buf[i] * r[i];
      dar[i] = buf[i] * prev[i] * r[i] * (1.0 - r[i]);
      daz[i] = gcur[i] * (c[i] - prev[i]) * z[i] * (1.0 - z[i]);
    }
    ger(at(g, L.gru_ar), D, D, 1.0, dar.data(), prev);
    axpy(1.0, dar.data(), at(g, L.gru_br), D);
    gemv_t(at(w, L.gru_ar), D, D, dar.data(), gprev.data(), true);
    ger(at(g, L.gru_az), D, D, 1.0, daz.data(), prev);
    axpy(1.0, daz.data(), at(g, L.gru_bz), D);
    gemv_t(at(w, L.gru_az), D, D, daz.data(), gprev.data(), true);

    for (int i = 0; i < D; ++i) {
      gcur[i] = gprev[i] + d_w_seq[static_cast<std::size_t>(t - 1) * D + i];
    }
  }
  axpy(1.0, gcur.data(), at(g, L.gcn_w), D);
}

struct GraphTape {
  std::vector<double> m;       // T x kF
  std::vector<double> h;       // T x dg
  std::vector<double> y;       // T x dg
  std::vector<double> q, k, v;  // T x dg
  std::vector<double> attn_w;  // T x T
  std::vector<double> zctx;    // T x dg
  std::vector<double> f_graph;  // dg
};

void forward_graph(const GraphFeat& feat, const EvolTape& ev, const std::vector<double>& w,
                   const Layout& L, GraphTape& tp) {
  const int T = feat.T;
  const int dg = L.cfg.d_graph;
  const int D = L.cfg.gru_dim();
  const auto tdg = static_cast<std::size_t>(T) * dg;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dg));

  tp.m.assign(static_cast<std::size_t>(T) * kF, 0.0);
  tp.h.assign(tdg, 0.0);
  tp.y.assign(tdg, 0.0);
  for (int t = 0; t < T; ++t) {
    double* m = tp.m.data() + static_cast<std::size_t>(t) * kF;
    gemv_t(at(w, L.g_embed), kC, kE, feat.cls_frac.data() + static_cast<std::size_t>(t) * kC, m);
    std::copy_n(feat.mean_num.data() + static_cast<std::size_t>(t) * 5, 5, m + kE);
    double* h = tp.h.data() + static_cast<std::size_t>(t) * dg;
    gemv(ev.w_seq.data() + static_cast<std::size_t>(t) * D, dg, kF, m, h);
    kernels::tanh_vec(h, h, dg);
    double* y = tp.y.data() + static_cast<std::size_t>(t) * dg;
    gemv(at(w, L.iatt_wv), dg, dg, h, y);
    axpy(1.0, at(w, L.iatt_bv), y, dg);
  }

  tp.q.assign(tdg, 0.0);
  tp.k.assign(tdg, 0.0);
  tp.v.assign(tdg, 0.0);
  for (int t = 0; t < T; ++t) {
    const double* y = tp.y.data() + static_cast<std::size_t>(t) * dg;
    double* q = tp.q.data() + static_cast<std::size_t>(t) * dg;
    double* k = tp.k.data() + static_cast<std::size_t>(t) * dg;
    double* v = tp.v.data() + static_cast<std::size_t>(t) * dg;
    gemv(at(w, L.oatt_wq), dg, dg, y, q);
    axpy(1.0, at(w, L.oatt_bq), q, dg);
    gemv(at(w, L.oatt_wk), dg, dg, y, k);
    axpy(1.0, at(w, L.oatt_bk), k, dg);
    gemv(at(w, L.oatt_wv), dg, dg, y, v);
    axpy(1.0, at(w, L.oatt_bv), v, dg);
  }
  tp.attn_w.assign(static_cast<std::size_t>(T) * T, 0.0);
  tp.zctx.assign(tdg, 0.0);
  for (int i = 0; i < T; ++i) {
    double* row = tp.attn_w.data() + static_cast<std::size_t>(i) * T;
    const double* qi = tp.q.data() + static_cast<std::size_t>(i) * dg;
    for (int j = 0; j < T; ++j) {
      row[j] = dot(qi, tp.k.data() + static_cast<std::size_t>(j) * dg, dg) * inv_sqrt;
    }
    softmax_row(row, T);
    double* zi = tp.zctx.data() + static_cast<std::size_t>(i) * dg;
    for (int j = 0; j < T; ++j) {
      axpy(row[j], tp.v.data() + static_cast<std::size_t>(j) * dg, zi, dg);
    }
  }
  tp.f_graph.assign(dg, 0.0);
  for (int t = 0; t < T; ++t) {
    axpy(1.0 / T, tp.zctx.data() + static_cast<std::size_t>(t) * dg, tp.f_graph.data(), dg);
  }
}

void backward_graph(const GraphTape& tp, const GraphFeat& feat, const EvolTape& ev,
                    const std::vector<double>& df_graph, const std::vector<double>& w,
                    const Layout& L, std::vector<double>& g, std::vector<double>& d_w_seq) {
  const int T = feat.T;
  const int dg = L.cfg.d_graph;
  const int D = L.cfg.gru_dim();
  const auto tdg = static_cast<std::size_t>(T) * dg;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dg));

  std::vector<double> dz(tdg, 0.0);
  for (int t = 0; t < T; ++t) {
    axpy(1.0 / T, df_graph.data(), dz.data() + static_cast<std::size_t>(t) * dg, dg);
  }

  std::vector<double> dq(tdg, 0.0), dk(tdg, 0.0), dv(tdg, 0.0), da(T), ds(T);
  for (int i = 0; i < T; ++i) {
    const double* arow = tp.attn_w.data() + static_cast<std::size_t>(i) * T;
    const double* dzi = dz.data() + static_cast<std::size_t>(i) * dg;
    double inner = 0.0;
    for (int j = 0; j < T; ++j) {
      da[j] = dot(dzi, tp.v.data() + static_cast<std::size_t>(j) * dg, dg);
      axpy(arow[j], dzi, dv.data() + static_cast<std::size_t>(j) * dg, dg);
      inner += da[j] * arow[j];
    }
    for (int j = 0; j < T; ++j) ds[j] = arow[j] * (da[j] - inner) * inv_sqrt;
    double* dqi = dq.data() + static_cast<std::size_t>(i) * dg;
    const double* qi = tp.q.data() + static_cast<std::size_t>(i) * dg;
    for (int j = 0; j < T; ++j) {
      axpy(ds[j], tp.k.data() + static_cast<std::size_t>(j) * dg, dqi, dg);
      axpy(ds[j], qi, dk.data() + static_cast<std::size_t>(j) * dg, dg);
    }
  }

  std::vector<double> dy(tdg, 0.0);
  for (int t = 0; t < T; ++t) {
    const std::size_t o = static_cast<std::size_t>(t) * dg;
    const double* y = tp.y.data() + o;
    ger(at(g, L.oatt_wq), dg, dg, 1.0, dq.data() + o, y);
    axpy(1.0, dq.data() + o, at(g, L.oatt_bq), dg);
    gemv_t(at(w, L.oatt_wq), dg, dg, dq.data() + o, dy.data() + o, true);
    ger(at(g, L.oatt_wk), dg, dg, 1.0, dk.data() + o, y);
    axpy(1.0, dk.data() + o, at(g, L.oatt_bk), dg);
    gemv_t(at(w, L.oatt_wk), dg, dg, dk.data() + o, dy.data() + o, true);
    ger(at(g, L.oatt_wv), dg, dg, 1.0, dv.data() + o, y);
    axpy(1.0, dv.data() + o, at(g, L.oatt_bv), dg);
    gemv_t(at(w, L.oatt_wv), dg, dg, dv.data() + o, dy.data() + o, true);
  }

  std::vector<double> dh(dg), dpre(dg), dm(kF), dembed_part(kE);
  for (int t = 0; t < T; ++t) {
    const std::size_t o = static_cast<std::size_t>(t) * dg;
    const double* h = tp.h.data() + o;
    ger(at(g, L.iatt_wv), dg, dg, 1.0, dy.data() + o, h);
    axpy(1.0, dy.data() + o, at(g, L.iatt_bv), dg);
    gemv_t(at(w, L.iatt_wv), dg, dg, dy.data() + o, dh.data());
    for (int i = 0; i < dg; ++i) dpre[i] = dh[i] * (1.0 - h[i] * h[i]);
    const double* m = tp.m.data() + static_cast<std::size_t>(t) * kF;
    ger(d_w_seq.data() + static_cast<std::size_t>(t) * D, dg, kF, 1.0, dpre.data(), m);
    gemv_t(ev.w_seq.data() + static_cast<std::size_t>(t) * D, dg, kF, dpre.data(), dm.data());
    const double* frac = feat.cls_frac.data() + static_cast<std::size_t>(t) * kC;
    std::copy_n(dm.data(), kE, dembed_part.data());
    for (int c = 0; c < kC; ++c) {
      if (frac[c] != 0.0) {
        axpy(frac[c], dembed_part.data(), at(g, L.g_embed) + static_cast<std::size_t>(c) * kE,
             kE);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Head
// ---------------------------------------------------------------------------

struct HeadTape {
  std::vector<double> cat;     // d + dg
  std::vector<double> g_vec;   // d
  std::vector<double> logits;  // M
  std::vector<double> probs;   // M
};

void forward_head(const std::vector<double>& f_state, const std::vector<double>& f_graph,
                  const std::vector<double>& w, const Layout& L, HeadTape& tp) {
  const int d = L.cfg.d_model;
  const int dg = L.cfg.d_graph;
  const int M = L.cfg.n_classes;
  tp.cat.assign(static_cast<std::size_t>(d) + dg, 0.0);
  std::copy_n(f_state.data(), d, tp.cat.data());
  std::copy_n(f_graph.data(), dg, tp.cat.data() + d);
  tp.g_vec.assign(d, 0.0);
  gemv(at(w, L.fuse_w), d, d + dg, tp.cat.data(), tp.g_vec.data());
  axpy(1.0, at(w, L.fuse_b), tp.g_vec.data(), d);
  tp.logits.assign(M, 0.0);
  gemv(at(w, L.cls_w), M, d, tp.g_vec.data(), tp.logits.data());
  axpy(1.0, at(w, L.cls_b), tp.logits.data(), M);
  tp.probs = tp.logits;
  kernels::softmax_inplace(tp.probs.data(), M);
}

// dlogits -> grads + (df_state, df_graph)
void backward_head(const HeadTape& tp, const std::vector<double>& dlogits,
                   const std::vector<double>& w, const Layout& L, std::vector<double>& g,
                   std::vector<double>& df_state, std::vector<double>& df_graph) {
  const int d = L.cfg.d_model;
  const int dg = L.cfg.d_graph;
  const int M = L.cfg.n_classes;
  ger(at(g, L.cls_w), M, d, 1.0, dlogits.data(), tp.g_vec.data());
  axpy(1.0, dlogits.data(), at(g, L.cls_b), M);
  std::vector<double> dgv(d, 0.0);
  gemv_t(at(w, L.cls_w), M, d, dlogits.data(), dgv.data());
  ger(at(g, L.fuse_w), d, d + dg, 1.0, dgv.data(), tp.cat.data());
  axpy(1.0, dgv.data(), at(g, L.fuse_b), d);
  std::vector<double> dcat(static_cast<std::size_t>(d) + dg, 0.0);
  gemv_t(at(w, L.fuse_w), d, d + dg, dgv.data(), dcat.data());
  df_state.assign(dcat.begin(), dcat.begin() + d);
  df_graph.assign(dcat.begin() + d, dcat.end());
}

// ---------------------------------------------------------------------------
// Full-instance forward/backward used by training and grad checking
// ---------------------------------------------------------------------------

struct InstanceFeat {
  std::vector<double> states;  // T x 6
  GraphFeat graph;
  std::size_t label_index = 0;
};

struct FullTape {
  StateTape state;
  GraphTape graph;
  HeadTape head;
};

double forward_full(const InstanceFeat& feat, const EvolTape& ev, const std::vector<double>& w,
                    const Layout& L, FullTape& tp) {
  forward_state(feat.states, w, L, tp.state);
  forward_graph(feat.graph, ev, w, L, tp.graph);
  forward_head(tp.state.f_state, tp.graph.f_graph, w, L, tp.head);
  std::vector<double> logp(L.cfg.n_classes);
  kernels::log_softmax(tp.head.logits.data(), logp.data(), L.cfg.n_classes);
  return -logp[feat.label_index];
}

void backward_full(const InstanceFeat& feat, const FullTape& tp, const EvolTape& ev,
                   const std::vector<double>& w, const Layout& L, std::vector<double>& g,
                   std::vector<double>& d_w_seq) {
  std::vector<double> dlogits = tp.head.probs;
  dlogits[feat.label_index] -= 1.0;
  std::vector<double> df_state, df_graph;
  backward_head(tp.head, dlogits, w, L, g, df_state, df_graph);
  backward_state(tp.state, df_state, w, L, g);
  backward_graph(tp.graph, feat.graph, ev, df_graph, w, L, g, d_w_seq);
}

InstanceFeat featurize(const Instance& inst, const std::vector<InteractionGraph>& graphs,
                       std::size_t label_index) {
  InstanceFeat f;
  f.states = state_features(inst);
  f.graph = build_graph_feat(graphs);
  f.label_index = label_index;
  return f;
}

}  // namespace

// ---------------------------------------------------------------------------
// Public API
// ---------------------------------------------------------------------------

std::vector<ParamSlice> encoder_param_slices(const EncoderConfig& config) {
  config.validate();
  Layout L(config);
  std::vector<ParamSlice> out;
  for (const auto& [name, s] : L.named()) {
    out.push_back({name, s.off, s.rows, s.cols});
  }
  return out;
}

void EncoderConfig::validate() const {
  if (d_model < 1 || n_heads < 1 || n_layers < 1 || d_graph < 1 || t_len < 1 || n_classes < 2) {
    throw usage_error("encoder config: all dimensions must be >= 1 and n_classes >= 2");
  }
  if (d_model % n_heads != 0) {
    throw usage_error("encoder config: d_model must be divisible by n_heads");
  }
}

EncoderParams init_encoder_params(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  Layout L(config);
  EncoderParams p;
  p.config = config;
  p.w.assign(L.total, 0.0);
  Rng rng(seed);
  auto fill_uniform = [&](const Slice& s, double scale) {
    double* dst = at(p.w, s);
    for (std::size_t i = 0; i < s.size(); ++i) dst[i] = rng.uniform(-scale, scale);
  };
  auto fill_const = [&](const Slice& s, double v) {
    std::fill_n(at(p.w, s), s.size(), v);
  };
  auto fanin = [](const Slice& s) { return 1.0 / std::sqrt(static_cast<double>(s.cols)); };

  fill_uniform(L.s_embed, 0.5);
  fill_uniform(L.s_in_w, fanin(L.s_in_w));
  for (const LayerSlices& ls : L.layers) {
    // Wider q/k init makes the attention maps position-structured from the
    // start (the positional code enters the tokens before projection), so
    // pooled features expose temporal contrasts early in training.
    fill_uniform(ls.wq, 3.0 * fanin(ls.wq));
    fill_uniform(ls.wk, 3.0 * fanin(ls.wk));
    fill_uniform(ls.wv, fanin(ls.wv));
    fill_uniform(ls.wo, fanin(ls.wo));
    fill_const(ls.alpha_attn, 1.0);
    fill_uniform(ls.ff_w1, fanin(ls.ff_w1));
    fill_uniform(ls.ff_w2, fanin(ls.ff_w2));
    fill_const(ls.alpha_ff, 1.0);
  }
  fill_uniform(L.g_embed, 0.5);
  fill_uniform(L.gcn_w, fanin(L.gcn_w));
  fill_uniform(L.gru_az, fanin(L.gru_az));
  fill_uniform(L.gru_ar, fanin(L.gru_ar));
  fill_uniform(L.gru_ah, fanin(L.gru_ah));
  fill_const(L.gru_bz, -2.0);  // near-identity weight evolution at init
  fill_uniform(L.iatt_wq, fanin(L.iatt_wq));
  fill_uniform(L.iatt_wk, fanin(L.iatt_wk));
  fill_uniform(L.iatt_wv, fanin(L.iatt_wv));
  fill_uniform(L.oatt_wq, fanin(L.oatt_wq));
  fill_uniform(L.oatt_wk, fanin(L.oatt_wk));
  fill_uniform(L.oatt_wv, fanin(L.oatt_wv));
  fill_uniform(L.fuse_w, fanin(L.fuse_w));
  fill_uniform(L.cls_w, fanin(L.cls_w));
  return p;
}

std::vector<double> state_features(const Instance& inst) {
  validate_instance(inst);
  const std::size_t T = inst.t_len();
  std::vector<double> out(T * 6, 0.0);
  const AgentState* t0 = inst.frames.front().find(inst.frames.front().target_uid);
  const double rc = std::cos(-t0->orientation);
  const double rs = std::sin(-t0->orientation);
  for (std::size_t t = 0; t < T; ++t) {
    const AgentState* a = inst.frames[t].find(inst.frames[t].target_uid);
    double* row = out.data() + t * 6;
    const double dx = a->x - t0->x;
    const double dy = a->y - t0->y;
    row[0] = static_cast<double>(a->uid) * 0.01;
    row[1] = static_cast<double>(static_cast<int>(a->cls));
    row[2] = (rc * dx - rs * dy) * 0.1;
    row[3] = (rs * dx + rc * dy) * 0.1;
    row[4] = (a->z - t0->z) * 0.1;
    row[5] = wrap_angle(a->orientation - t0->orientation);
  }
  return out;
}

std::vector<double> encode_states(const std::vector<double>& states, const EncoderParams& params) {
  params.config.validate();
  Layout L(params.config);
  StateTape tp;
  forward_state(states, params.w, L, tp);
  return tp.f_state;
}

std::vector<double> encode_graphs(const std::vector<InteractionGraph>& graphs,
                                  const EncoderParams& params) {
  params.config.validate();
  if (graphs.empty()) throw data_error("encode_graphs: empty graph list");
  if (static_cast<int>(graphs.size()) != params.config.t_len) {
    throw data_error("encode_graphs: expected " + std::to_string(params.config.t_len) +
                     " graphs, got " + std::to_string(graphs.size()));
  }
  Layout L(params.config);
  EvolTape ev;
  evolve_forward(params.w, L, params.config.t_len, ev);
  GraphFeat feat = build_graph_feat(graphs);
  GraphTape tp;
  forward_graph(feat, ev, params.w, L, tp);
  return tp.f_graph;
}

ForwardResult fuse_and_classify(const std::vector<double>& f_state,
                                const std::vector<double>& f_graph,
                                const EncoderParams& params) {
  params.config.validate();
  Layout L(params.config);
  if (f_state.size() != static_cast<std::size_t>(params.config.d_model) ||
      f_graph.size() != static_cast<std::size_t>(params.config.d_graph)) {
    throw data_error("fuse_and_classify: embedding width mismatch");
  }
  HeadTape tp;
  forward_head(f_state, f_graph, params.w, L, tp);
  ForwardResult r;
  r.embedding.f_state = f_state;
  r.embedding.f_graph = f_graph;
  r.embedding.g = tp.g_vec;
  r.probs = tp.probs;
  return r;
}

ForwardResult encode_instance(const Instance& inst, const std::vector<InteractionGraph>& graphs,
                              const EncoderParams& params) {
  std::vector<double> f_state = encode_states(state_features(inst), params);
  std::vector<double> f_graph = encode_graphs(graphs, params);
  return fuse_and_classify(f_state, f_graph, params);
}

std::vector<ForwardResult> encode_instances(const std::vector<Instance>& instances,
                                            const EncoderParams& params, const EdgePolicy& policy,
                                            int threads) {
  params.config.validate();
  Layout L(params.config);
  EvolTape ev;
  evolve_forward(params.w, L, params.config.t_len, ev);

  std::vector<ForwardResult> out(instances.size());
  auto encode_range = [&](std::size_t lo, std::size_t hi) {
    StateTape st;
    GraphTape gt;
    HeadTape ht;
    for (std::size_t i = lo; i < hi; ++i) {
      const Instance& inst = instances[i];
      if (static_cast<int>(inst.t_len()) != params.config.t_len) {
        throw data_error("encode: instance '" + inst.instance_id + "' has T=" +
                         std::to_string(inst.t_len()) + ", encoder expects T=" +
                         std::to_string(params.config.t_len));
      }
      forward_state(state_features(inst), params.w, L, st);
      forward_graph(build_graph_feat(build_interaction_graphs(inst, policy)), ev, params.w, L, gt);
      forward_head(st.f_state, gt.f_graph, params.w, L, ht);
      out[i].embedding.f_state = st.f_state;
      out[i].embedding.f_graph = gt.f_graph;
      out[i].embedding.g = ht.g_vec;
      out[i].probs = ht.probs;
    }
  };

  const int n_threads = std::max(1, std::min<int>(threads, static_cast<int>(instances.size())));
  if (n_threads == 1) {
    encode_range(0, instances.size());
    return out;
  }
  std::vector<std::thread> workers;
  std::vector<std::exception_ptr> errors(n_threads);
  const std::size_t chunk = (instances.size() + n_threads - 1) / n_threads;
  for (int t = 0; t < n_threads; ++t) {
    const std::size_t lo = static_cast<std::size_t>(t) * chunk;
    const std::size_t hi = std::min(instances.size(), lo + chunk);
    workers.emplace_back([&, t, lo, hi] {
      try {
        encode_range(lo, hi);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& w : workers) w.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

std::vector<ForwardResult> encode_dataset(const Dataset& ds, const EncoderParams& params,
                                          const EdgePolicy& policy) {
  return encode_instances(ds.instances, params, policy, 1);
}

double cross_entropy(const std::vector<double>& probs, std::size_t label_index) {
  if (label_index >= probs.size()) throw usage_error("cross_entropy: label index out of range");
  return -std::log(std::max(probs[label_index], 1e-300));
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

struct Adam {
  std::vector<double> m, v;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::int64_t t = 0;

  explicit Adam(std::size_t n) : m(n, 0.0), v(n, 0.0) {}

  // lr per coordinate is supplied by the caller through a span map
  void step(std::vector<double>& w, const std::vector<double>& g, double lr, std::size_t lo,
            std::size_t hi) {
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = lo; i < hi; ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
      w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
    }
  }
};

}  // namespace

EncoderParams train_base(const Dataset& train, const BaseTrainConfig& tc, EncoderConfig config,
                         const EdgePolicy& policy) {
  if (train.instances.empty()) throw data_error("train_base: empty dataset");
  if (tc.epochs < 1 || tc.batch_size < 1 || tc.lr_state <= 0.0 || tc.lr_graph <= 0.0) {
    throw usage_error("train_base: epochs, batch_size and learning rates must be positive");
  }
  validate_dataset(train);
  const std::size_t T = train.instances.front().t_len();
  for (const Instance& inst : train.instances) {
    if (inst.t_len() != T) {
      throw data_error("train_base: non-uniform T; instance '" + inst.instance_id + "' has T=" +
                       std::to_string(inst.t_len()));
    }
  }
  if (config.t_len == 0) config.t_len = static_cast<int>(T);
  if (config.n_classes == 0) config.n_classes = static_cast<int>(train.taxonomy.size());
  config.validate();
  if (config.t_len != static_cast<int>(T)) throw data_error("train_base: config T differs from data");

  Layout L(config);
  EncoderParams params = init_encoder_params(config, tc.seed);

  std::vector<InstanceFeat> feats;
  feats.reserve(train.size());
  for (const Instance& inst : train.instances) {
    const auto idx = train.taxonomy.index_of(inst.label);
    feats.push_back(featurize(inst, build_interaction_graphs(inst, policy), *idx));
  }

  Adam adam(L.total);
  Rng shuffle_rng(tc.seed ^ 0xD1B54A32D192ED03ULL);
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::vector<double> grads(L.total, 0.0);
  std::vector<double> d_w_seq(T * static_cast<std::size_t>(config.gru_dim()), 0.0);
  EvolTape ev;
  FullTape tape;

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
      const std::size_t end = std::min(order.size(), start + tc.batch_size);
      const double inv_b = 1.0 / static_cast<double>(end - start);
      std::fill(grads.begin(), grads.end(), 0.0);
      std::fill(d_w_seq.begin(), d_w_seq.end(), 0.0);
      evolve_forward(params.w, L, config.t_len, ev);
      double batch_loss = 0.0;
      for (std::size_t bi = start; bi < end; ++bi) {
        const InstanceFeat& f = feats[order[bi]];
        batch_loss += forward_full(f, ev, params.w, L, tape);
        backward_full(f, tape, ev, params.w, L, grads, d_w_seq);
      }
      batch_loss *= inv_b;
      if (!std::isfinite(batch_loss)) {
        throw numeric_error("train_base: non-finite loss in epoch " + std::to_string(epoch) +
                            ", batch " + std::to_string(n_batches));
      }
      scal(inv_b, grads.data(), grads.size());
      scal(inv_b, d_w_seq.data(), d_w_seq.size());
      evolve_backward(ev, d_w_seq, params.w, L, config.t_len, grads);
      if (tc.weight_decay != 0.0) {
        axpy(tc.weight_decay, params.w.data(), grads.data(), L.total);
      }
      adam.t += 1;
      adam.step(params.w, grads, tc.lr_state, 0, L.state_end);
      // fusion head rides the faster graph-path rate
      adam.step(params.w, grads, tc.lr_graph, L.state_end, L.total);
      epoch_loss += batch_loss;
      ++n_batches;
    }
    std::cerr << "[train-base] epoch " << (epoch + 1) << "/" << tc.epochs
              << " mean_loss=" << (epoch_loss / static_cast<double>(n_batches)) << "\n";
  }
  return params;
}

double encoder_loss(const EncoderParams& params, const Instance& inst,
                    const BehaviorTaxonomy& taxonomy, const EdgePolicy& policy) {
  params.config.validate();
  const auto label_idx = taxonomy.index_of(inst.label);
  if (!label_idx) throw data_error("encoder_loss: instance label not in taxonomy");
  Layout L(params.config);
  const InstanceFeat feat = featurize(inst, build_interaction_graphs(inst, policy), *label_idx);
  EvolTape ev;
  evolve_forward(params.w, L, params.config.t_len, ev);
  FullTape tape;
  return forward_full(feat, ev, params.w, L, tape);
}

std::pair<double, std::vector<double>> encoder_loss_and_grad(const EncoderParams& params,
                                                             const Instance& inst,
                                                             const BehaviorTaxonomy& taxonomy,
                                                             const EdgePolicy& policy) {
  params.config.validate();
  const auto label_idx = taxonomy.index_of(inst.label);
  if (!label_idx) throw data_error("encoder_loss_and_grad: instance label not in taxonomy");
  Layout L(params.config);
  const InstanceFeat feat = featurize(inst, build_interaction_graphs(inst, policy), *label_idx);
  EvolTape ev;
  evolve_forward(params.w, L, params.config.t_len, ev);
  FullTape tape;
  const double loss = forward_full(feat, ev, params.w, L, tape);
  std::vector<double> grads(L.total, 0.0);
  std::vector<double> d_w_seq(
      static_cast<std::size_t>(params.config.t_len) * params.config.gru_dim(), 0.0);
  backward_full(feat, tape, ev, params.w, L, grads, d_w_seq);
  evolve_backward(ev, d_w_seq, params.w, L, params.config.t_len, grads);
  return {loss, std::move(grads)};
}

GradCheckResult grad_check(const EncoderParams& params, const Instance& inst,
                           const BehaviorTaxonomy& taxonomy, const EdgePolicy& policy,
                           double epsilon, std::size_t n_samples, std::uint64_t seed) {
  if (epsilon < 1e-6 || epsilon > 1e-3) {
    throw usage_error("grad_check: epsilon must be in [1e-6, 1e-3]");
  }
  params.config.validate();
  const auto label_idx = taxonomy.index_of(inst.label);
  if (!label_idx) throw data_error("grad_check: instance label not in taxonomy");
  Layout L(params.config);
  const InstanceFeat feat = featurize(inst, build_interaction_graphs(inst, policy), *label_idx);

  auto loss_at = [&](const std::vector<double>& w) {
    EvolTape ev;
    evolve_forward(w, L, params.config.t_len, ev);
    FullTape tape;
    return forward_full(feat, ev, w, L, tape);
  };

  std::vector<double> analytic(L.total, 0.0);
  {
    EvolTape ev;
    evolve_forward(params.w, L, params.config.t_len, ev);
    FullTape tape;
    forward_full(feat, ev, params.w, L, tape);
    std::vector<double> d_w_seq(
        static_cast<std::size_t>(params.config.t_len) * params.config.gru_dim(), 0.0);
    backward_full(feat, tape, ev, params.w, L, analytic, d_w_seq);
    evolve_backward(ev, d_w_seq, params.w, L, params.config.t_len, analytic);
  }

  Rng rng(seed);
  std::set<std::size_t> coords;
  while (coords.size() < std::min(n_samples, L.total)) {
    coords.insert(static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(L.total) - 1)));
  }

  GradCheckResult result;
  std::vector<double> w = params.w;
  for (std::size_t c : coords) {
    const double keep = w[c];
    w[c] = keep + epsilon;
    const double lp = loss_at(w);
    w[c] = keep - epsilon;
    const double lm = loss_at(w);
    w[c] = keep;
    const double fd = (lp - lm) / (2.0 * epsilon);
    const double rel = std::abs(analytic[c] - fd) /
                       std::max({std::abs(analytic[c]), std::abs(fd), 1e-6});
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_coordinate = c;
    }
    ++result.n_checked;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

void save_encoder(const EncoderParams& params, const std::string& path) {
  params.config.validate();
  Layout L(params.config);
  json weights = json::object();
  for (const auto& [name, slice] : L.named()) {
    weights[name] = std::vector<double>(params.w.begin() + slice.off,
                                        params.w.begin() + slice.off + slice.size());
  }
  json j{{"version", "encoder/v1"},
         {"config",
          {{"d_model", params.config.d_model},
           {"n_heads", params.config.n_heads},
           {"n_layers", params.config.n_layers},
           {"d_graph", params.config.d_graph},
           {"t_len", params.config.t_len},
           {"n_classes", params.config.n_classes}}},
         {"weights", std::move(weights)}};
  std::ofstream out(path);
  if (!out) throw data_error("cannot open output file: " + path);
  out << j.dump() << '\n';
  if (!out) throw data_error("write failure: " + path);
}

EncoderParams load_encoder(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open encoder file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw data_error(path + ": parse error: " + e.what());
  }
  if (!j.contains("version") || j.at("version") != "encoder/v1") {
    throw data_error(path + ": expected version encoder/v1");
  }
  EncoderParams p;
  const json& jc = j.at("config");
  p.config.d_model = jc.at("d_model").get<int>();
  p.config.n_heads = jc.at("n_heads").get<int>();
  p.config.n_layers = jc.at("n_layers").get<int>();
  p.config.d_graph = jc.at("d_graph").get<int>();
  p.config.t_len = jc.at("t_len").get<int>();
  p.config.n_classes = jc.at("n_classes").get<int>();
  p.config.validate();
  Layout L(p.config);
  p.w.assign(L.total, 0.0);
  const json& weights = j.at("weights");
  for (const auto& [name, slice] : L.named()) {
    auto it = weights.find(name);
    if (it == weights.end()) throw data_error(path + ": missing weight array '" + name + "'");
    if (!it->is_array() || it->size() != slice.size()) {
      throw data_error(path + ": weight array '" + name + "' must have " +
                       std::to_string(slice.size()) + " entries");
    }
    for (std::size_t i = 0; i < slice.size(); ++i) {
      const double v = (*it)[i].get<double>();
      if (!std::isfinite(v)) throw data_error(path + ": non-finite value in '" + name + "'");
      p.w[slice.off + i] = v;
    }
  }
  return p;
}

std::string file_content_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open file for hashing: " + path);
  std::uint64_t h = 14695981039346656037ULL;
  char buf[65536];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    const std::streamsize n = in.gcount();
    for (std::streamsize i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;
    }
    if (!in) break;
  }
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

}  // namespace emem
