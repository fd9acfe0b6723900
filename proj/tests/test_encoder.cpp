#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "emem/data_model.hpp"
#include "emem/encoder.hpp"
#include "emem/error.hpp"
#include "emem/rng.hpp"

using namespace emem;
namespace fs = std::filesystem;

namespace {

struct TempFile {
  fs::path path;
  explicit TempFile(const std::string& name)
      : path(fs::temp_directory_path() / ("emem_en_" + std::to_string(::getpid()) + "_" + name)) {}
  ~TempFile() { std::error_code ec; fs::remove(path, ec); }
  std::string str() const { return path.string(); }
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void set_slice(EncoderParams& p, const std::string& name, const std::vector<double>& v) {
  for (const ParamSlice& s : encoder_param_slices(p.config)) {
    if (s.name == name) {
      REQUIRE(v.size() == s.size());
      std::copy(v.begin(), v.end(), p.w.begin() + s.offset);
      return;
    }
  }
  FAIL("unknown param slice: " << name);
}

EncoderParams zero_params(const EncoderConfig& cfg) {
  EncoderParams p = init_encoder_params(cfg, 1);
  std::fill(p.w.begin(), p.w.end(), 0.0);
  return p;
}

// the same sinusoidal code the encoder documents: omega_i = 10000^(-2*(i/2)/9)
std::vector<double> positional(std::int64_t t, std::size_t width) {
  std::vector<double> pe(width);
  for (std::size_t i = 0; i < width; ++i) {
    const double omega = std::pow(10000.0, -2.0 * static_cast<double>(i / 2) / static_cast<double>(width));
    pe[i] = (i % 2 == 0) ? std::sin(static_cast<double>(t) * omega)
                         : std::cos(static_cast<double>(t) * omega);
  }
  return pe;
}

Instance two_agent_instance(std::size_t t_len) {
  Instance inst;
  inst.instance_id = "manual";
  inst.label = "stopping";
  inst.ttb_frames = 5;
  inst.frame_rate_hz = 10.0;
  for (std::size_t t = 0; t < t_len; ++t) {
    Frame f;
    f.t = static_cast<std::int64_t>(t);
    f.target_uid = 1;
    f.agents = {{1, AgentClass::kCar, 1.0 * t, 0.5 * t, 0.0, 0.1},
                {2, AgentClass::kPedestrian, 3.0, 4.0, 0.0, 0.5}};
    inst.frames.push_back(std::move(f));
  }
  return inst;
}

}  // namespace

TEST_CASE("all-zero parameters annihilate any input") {
  EncoderConfig cfg;
  cfg.d_model = 4;
  cfg.n_heads = 2;
  cfg.n_layers = 2;
  cfg.d_graph = 4;
  cfg.t_len = 3;
  cfg.n_classes = 2;
  EncoderParams p = zero_params(cfg);
  const std::vector<double> states = {0.1, 2, 5.0,  -3.0, 0.0, 0.2,  //
                                      0.1, 2, 6.0,  -2.5, 0.0, 0.3,  //
                                      0.1, 2, 7.0,  -2.0, 0.0, 0.4};
  const auto f = encode_states(states, p);
  REQUIRE(f.size() == 4);
  for (double v : f) CHECK(v == 0.0);
}

TEST_CASE("encode_states matches a hand-computed attention forward pass") {
  EncoderConfig cfg;
  cfg.d_model = 2;
  cfg.n_heads = 1;
  cfg.n_layers = 1;
  cfg.d_graph = 2;
  cfg.t_len = 2;
  cfg.n_classes = 2;
  EncoderParams p = zero_params(cfg);

  Rng rng(17);
  auto rand_vec = [&](std::size_t n) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(-0.8, 0.8);
    return v;
  };
  const auto embed = rand_vec(8 * 4);
  const auto in_w = rand_vec(2 * 9);
  const auto in_b = rand_vec(2);
  const auto wq = rand_vec(4), bq = rand_vec(2);
  const auto wk = rand_vec(4), bk = rand_vec(2);
  const auto wv = rand_vec(4), bv = rand_vec(2);
  const auto wo = rand_vec(4), bo = rand_vec(2);
  const auto a1 = rand_vec(2);
  const auto w1 = rand_vec(4 * 2), b1 = rand_vec(4);
  const auto w2 = rand_vec(2 * 4), b2 = rand_vec(2);
  const auto a2 = rand_vec(2);
  set_slice(p, "state_class_embed", embed);
  set_slice(p, "state_in_w", in_w);
  set_slice(p, "state_in_b", in_b);
  set_slice(p, "state_layer0_wq", wq);
  set_slice(p, "state_layer0_bq", bq);
  set_slice(p, "state_layer0_wk", wk);
  set_slice(p, "state_layer0_bk", bk);
  set_slice(p, "state_layer0_wv", wv);
  set_slice(p, "state_layer0_bv", bv);
  set_slice(p, "state_layer0_wo", wo);
  set_slice(p, "state_layer0_bo", bo);
  set_slice(p, "state_layer0_alpha_attn", a1);
  set_slice(p, "state_layer0_ff_w1", w1);
  set_slice(p, "state_layer0_ff_b1", b1);
  set_slice(p, "state_layer0_ff_w2", w2);
  set_slice(p, "state_layer0_ff_b2", b2);
  set_slice(p, "state_layer0_alpha_ff", a2);

  const std::vector<double> states = {0.3, 2, 0.5, -0.2, 0.1, 0.7,  //
                                      0.3, 2, 0.9, -0.1, 0.1, 0.6};
  const auto got = encode_states(states, p);

  // independent arithmetic with plain loops
  auto matvec = [](const std::vector<double>& m, std::size_t rows, std::size_t cols,
                   const std::vector<double>& x, const std::vector<double>& b) {
    std::vector<double> y(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) y[r] += m[r * cols + c] * x[c];
      y[r] += b[r];
    }
    return y;
  };

  std::vector<std::vector<double>> tokens;
  for (int t = 0; t < 2; ++t) {
    std::vector<double> tok(9, 0.0);
    for (int i = 0; i < 4; ++i) tok[i] = embed[2 * 4 + i];  // class code 2
    tok[4] = states[t * 6 + 0];
    tok[5] = states[t * 6 + 2];
    tok[6] = states[t * 6 + 3];
    tok[7] = states[t * 6 + 4];
    tok[8] = states[t * 6 + 5];
    const auto pe = positional(t, 9);
    for (int i = 0; i < 9; ++i) tok[i] += pe[i];
    tokens.push_back(matvec(in_w, 2, 9, tok, in_b));
  }

  std::vector<std::vector<double>> q, k, v;
  for (int t = 0; t < 2; ++t) {
    q.push_back(matvec(wq, 2, 2, tokens[t], bq));
    k.push_back(matvec(wk, 2, 2, tokens[t], bk));
    v.push_back(matvec(wv, 2, 2, tokens[t], bv));
  }
  std::vector<std::vector<double>> ctx(2, std::vector<double>(2, 0.0));
  for (int i = 0; i < 2; ++i) {
    double s0 = (q[i][0] * k[0][0] + q[i][1] * k[0][1]) / std::sqrt(2.0);
    double s1 = (q[i][0] * k[1][0] + q[i][1] * k[1][1]) / std::sqrt(2.0);
    const double mx = std::max(s0, s1);
    const double e0 = std::exp(s0 - mx), e1 = std::exp(s1 - mx);
    const double p0 = e0 / (e0 + e1), p1 = e1 / (e0 + e1);
    for (int d = 0; d < 2; ++d) ctx[i][d] = p0 * v[0][d] + p1 * v[1][d];
  }
  std::vector<std::vector<double>> x_out;
  for (int t = 0; t < 2; ++t) {
    const auto ao = matvec(wo, 2, 2, ctx[t], bo);
    std::vector<double> xm(2);
    for (int d = 0; d < 2; ++d) xm[d] = tokens[t][d] + a1[d] * ao[d];
    auto h = matvec(w1, 4, 2, xm, b1);
    for (double& z : h) z = std::tanh(z);
    const auto ff = matvec(w2, 2, 4, h, b2);
    std::vector<double> xo(2);
    for (int d = 0; d < 2; ++d) xo[d] = xm[d] + a2[d] * ff[d];
    x_out.push_back(std::move(xo));
  }
  for (int d = 0; d < 2; ++d) {
    const double expect = (x_out[0][d] + x_out[1][d]) / 2.0;
    CHECK(got[d] == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("permuting identical frames leaves the pooled state output unchanged") {
  Instance inst = two_agent_instance(4);
  inst.frames[2] = inst.frames[1];  // duplicate content, keep frame indices
  inst.frames[2].t = 2;
  EncoderConfig cfg;
  cfg.t_len = 4;
  cfg.n_classes = 2;
  EncoderParams p = init_encoder_params(cfg, 5);
  const auto base = encode_states(state_features(inst), p);

  Instance swapped = inst;
  std::swap(swapped.frames[1].agents, swapped.frames[2].agents);
  const auto after = encode_states(state_features(swapped), p);
  CHECK(base == after);
}

TEST_CASE("single zero-feature vertex with identity weights maps to zero") {
  EncoderConfig cfg;
  cfg.d_model = 2;
  cfg.n_heads = 1;
  cfg.n_layers = 1;
  cfg.d_graph = 9;  // square so gcn_w can be the identity
  cfg.t_len = 1;
  cfg.n_classes = 2;
  EncoderParams p = zero_params(cfg);
  std::vector<double> eye(9 * 9, 0.0);
  for (int i = 0; i < 9; ++i) eye[i * 9 + i] = 1.0;
  set_slice(p, "gcn_w", eye);

  InteractionGraph g;
  g.target_uid = 0;
  g.vertices = {{0, AgentClass::kCar, 0.0, 0.0, 0.0, 0.0}};
  const auto f = encode_graphs({g}, p);
  REQUIRE(f.size() == 9);
  for (double v : f) CHECK(v == 0.0);
}

TEST_CASE("two-vertex graph matches tanh(W * mean feature) with pass-through attention") {
  EncoderConfig cfg;
  cfg.d_model = 2;
  cfg.n_heads = 1;
  cfg.n_layers = 1;
  cfg.d_graph = 2;
  cfg.t_len = 1;
  cfg.n_classes = 2;
  EncoderParams p = zero_params(cfg);

  Rng rng(23);
  std::vector<double> w(2 * 9), embed(8 * 4);
  for (double& x : w) x = rng.uniform(-1.0, 1.0);
  for (double& x : embed) x = rng.uniform(-0.5, 0.5);
  set_slice(p, "gcn_w", w);
  set_slice(p, "graph_class_embed", embed);
  const std::vector<double> eye2 = {1.0, 0.0, 0.0, 1.0};
  set_slice(p, "inner_att_wv", eye2);
  set_slice(p, "outer_att_wv", eye2);

  InteractionGraph g;
  g.target_uid = 1;
  g.vertices = {{1, AgentClass::kCar, 0.0, 0.0, 0.0, 0.0},
                {2, AgentClass::kPedestrian, 3.0, 4.0, 0.0, 0.5}};
  g.edges = {{1, 2}};
  const auto f = encode_graphs({g}, p);

  // documented featurization: [class embed | uid/100, x', y', z', dtheta]
  std::vector<double> fa(9, 0.0), fb(9, 0.0);
  for (int i = 0; i < 4; ++i) fa[i] = embed[static_cast<int>(AgentClass::kCar) * 4 + i];
  fa[4] = 0.01;
  for (int i = 0; i < 4; ++i) fb[i] = embed[static_cast<int>(AgentClass::kPedestrian) * 4 + i];
  fb[4] = 0.02;
  fb[5] = 0.3;
  fb[6] = 0.4;
  fb[8] = 0.5;
  std::vector<double> expect(2, 0.0);
  for (int r = 0; r < 2; ++r) {
    double acc = 0.0;
    for (int c = 0; c < 9; ++c) acc += w[r * 9 + c] * (fa[c] + fb[c]) / 2.0;
    expect[r] = std::tanh(acc);
  }
  REQUIRE(f.size() == 2);
  CHECK(f[0] == doctest::Approx(expect[0]).epsilon(1e-12));
  CHECK(f[1] == doctest::Approx(expect[1]).epsilon(1e-12));
}

TEST_CASE("frozen update gate makes graph encoding independent of the evolution cell") {
  EncoderConfig cfg;
  cfg.d_model = 2;
  cfg.n_heads = 1;
  cfg.n_layers = 1;
  cfg.d_graph = 3;
  cfg.t_len = 2;
  cfg.n_classes = 2;

  InteractionGraph g;
  g.target_uid = 1;
  g.vertices = {{1, AgentClass::kCar, 0.0, 0.0, 0.0, 0.0},
                {2, AgentClass::kCyclist, 1.0, 2.0, 0.0, 0.3}};
  g.edges = {{1, 2}};
  const std::vector<InteractionGraph> graphs = {g, g};

  auto build = [&](std::uint64_t cell_seed, double bz) {
    EncoderParams p = init_encoder_params(cfg, 3);
    Rng rng(cell_seed);
    const int d = cfg.gru_dim();
    std::vector<double> az(static_cast<std::size_t>(d) * d);
    for (double& x : az) x = rng.uniform(-0.3, 0.3);
    set_slice(p, "gru_az", az);
    set_slice(p, "gru_bz", std::vector<double>(d, bz));
    return encode_graphs(graphs, p);
  };

  // update gate pinned to zero: the weights never evolve, so the cell
  // matrices cannot influence the output and both frames embed identically
  const auto frozen_a = build(100, -1000.0);
  const auto frozen_b = build(200, -1000.0);
  CHECK(frozen_a == frozen_b);
  const auto live_a = build(100, 0.0);
  const auto live_b = build(200, 0.0);
  CHECK(live_a != live_b);
}

TEST_CASE("fuse_and_classify: zero weights give exactly uniform probabilities") {
  EncoderConfig cfg;
  cfg.t_len = 2;
  cfg.n_classes = 8;
  EncoderParams p = zero_params(cfg);
  const std::vector<double> fs(cfg.d_model, 0.3), fg(cfg.d_graph, -0.2);
  const auto r = fuse_and_classify(fs, fg, p);
  REQUIRE(r.probs.size() == 8);
  for (double v : r.probs) CHECK(v == 0.125);
  double sum = 0.0;
  for (double v : r.probs) sum += v;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("fuse_and_classify: logits (1, 0) give the textbook two-class softmax") {
  EncoderConfig cfg;
  cfg.t_len = 2;
  cfg.n_classes = 2;
  EncoderParams p = zero_params(cfg);
  set_slice(p, "cls_b", {1.0, 0.0});
  const std::vector<double> fs(cfg.d_model, 0.0), fg(cfg.d_graph, 0.0);
  const auto r = fuse_and_classify(fs, fg, p);
  CHECK(r.probs[0] == doctest::Approx(0.7311).epsilon(1e-4));
  CHECK(r.probs[1] == doctest::Approx(0.2689).epsilon(1e-4));
}

TEST_CASE("training defaults follow the published recipe") {
  BaseTrainConfig tc;
  CHECK(tc.epochs == 80);
  CHECK(tc.weight_decay == 1e-5);
  CHECK(tc.lr_state == 0.0005);
  CHECK(tc.lr_graph == 0.005);
  CHECK(tc.batch_size == 64);
}

TEST_CASE("one epoch on one batch strictly decreases that batch's loss") {
  SyntheticConfig sc;
  sc.per_class_count = 2;
  sc.t_frames = 6;
  sc.ttb_frames = 6;
  const Dataset ds = generate_synthetic(sc, 31);

  EncoderConfig cfg;
  cfg.d_model = 16;
  cfg.d_graph = 16;
  BaseTrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = static_cast<int>(ds.size());
  tc.lr_state = 1e-4;
  tc.lr_graph = 1e-4;
  tc.weight_decay = 0.0;
  tc.seed = 9;

  EncoderConfig full = cfg;
  full.t_len = 6;
  full.n_classes = 8;
  const EncoderParams before = init_encoder_params(full, tc.seed);
  const EdgePolicy policy = EdgePolicy::complete();
  auto mean_loss = [&](const EncoderParams& p) {
    double sum = 0.0;
    for (const Instance& inst : ds.instances) {
      sum += encoder_loss(p, inst, ds.taxonomy, policy);
    }
    return sum / static_cast<double>(ds.size());
  };
  const double loss_before = mean_loss(before);
  const EncoderParams after = train_base(ds, tc, cfg, policy);
  CHECK(mean_loss(after) < loss_before);
}

TEST_CASE("training is deterministic per seed") {
  SyntheticConfig sc;
  sc.per_class_count = 2;
  sc.t_frames = 5;
  sc.ttb_frames = 5;
  const Dataset ds = generate_synthetic(sc, 8);
  EncoderConfig cfg;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_graph = 8;
  BaseTrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 8;
  tc.seed = 77;
  TempFile a("det_a.json"), b("det_b.json");
  save_encoder(train_base(ds, tc, cfg, EdgePolicy::complete()), a.str());
  save_encoder(train_base(ds, tc, cfg, EdgePolicy::complete()), b.str());
  CHECK(read_file(a.str()) == read_file(b.str()));
}

TEST_CASE("gradient check: analytic matches central differences at d_model 8") {
  SyntheticConfig sc;
  sc.per_class_count = 1;
  sc.t_frames = 6;
  sc.ttb_frames = 6;
  const Dataset ds = generate_synthetic(sc, 3);
  EncoderConfig cfg;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_graph = 8;
  cfg.t_len = 6;
  cfg.n_classes = 8;
  const EncoderParams p = init_encoder_params(cfg, 11);
  const auto res = grad_check(p, ds.instances[2], ds.taxonomy, EdgePolicy::complete(), 1e-5, 120, 5);
  CHECK(res.n_checked >= 100);
  CHECK(res.max_rel_error <= 1e-4);
}

TEST_CASE("a zeroed analytic coordinate is flagged with relative error >= 0.1") {
  SyntheticConfig sc;
  sc.per_class_count = 1;
  sc.t_frames = 5;
  sc.ttb_frames = 5;
  const Dataset ds = generate_synthetic(sc, 4);
  EncoderConfig cfg;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_graph = 8;
  cfg.t_len = 5;
  cfg.n_classes = 8;
  EncoderParams p = init_encoder_params(cfg, 13);
  const EdgePolicy policy = EdgePolicy::complete();
  const Instance& inst = ds.instances[1];

  auto [loss, grads] = encoder_loss_and_grad(p, inst, ds.taxonomy, policy);
  // pick a classifier bias coordinate: its gradient is p_c - [c == label],
  // never negligible for the true class
  const auto slices = encoder_param_slices(cfg);
  const auto cls_b = std::find_if(slices.begin(), slices.end(),
                                  [](const ParamSlice& s) { return s.name == "cls_b"; });
  REQUIRE(cls_b != slices.end());
  const std::size_t coord = cls_b->offset + 1;
  REQUIRE(std::abs(grads[coord]) > 1e-3);

  const double eps = 1e-5;
  EncoderParams probe = p;
  probe.w[coord] += eps;
  const double lp = encoder_loss(probe, inst, ds.taxonomy, policy);
  probe.w[coord] = p.w[coord] - eps;
  const double lm = encoder_loss(probe, inst, ds.taxonomy, policy);
  const double fd = (lp - lm) / (2.0 * eps);

  const double zeroed = 0.0;  // fault injection: analytic gradient suppressed
  const double rel = std::abs(zeroed - fd) / std::max({std::abs(zeroed), std::abs(fd), 1e-6});
  CHECK(rel >= 0.1);
}

TEST_CASE("grad_check rejects epsilon outside [1e-6, 1e-3]") {
  const Dataset ds = generate_synthetic({}, 6);
  EncoderConfig cfg;
  cfg.t_len = 10;
  cfg.n_classes = 8;
  const EncoderParams p = init_encoder_params(cfg, 2);
  CHECK_THROWS_AS(grad_check(p, ds.instances[0], ds.taxonomy, EdgePolicy::complete(), 1e-7),
                  Error);
  CHECK_THROWS_AS(grad_check(p, ds.instances[0], ds.taxonomy, EdgePolicy::complete(), 1e-2),
                  Error);
}

TEST_CASE("encoder serialization round trips and validates") {
  EncoderConfig cfg;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_graph = 8;
  cfg.t_len = 4;
  cfg.n_classes = 3;
  const EncoderParams p = init_encoder_params(cfg, 44);
  TempFile f("enc.json"), f2("enc2.json");
  save_encoder(p, f.str());
  const EncoderParams back = load_encoder(f.str());
  CHECK(back.w == p.w);
  CHECK(back.config.d_model == cfg.d_model);
  save_encoder(back, f2.str());
  CHECK(read_file(f.str()) == read_file(f2.str()));

  TempFile bad("enc_bad.json");
  {
    std::ofstream out(bad.path);
    out << R"({"version":"encoder/v0","config":{},"weights":{}})";
  }
  CHECK_THROWS_AS(load_encoder(bad.str()), Error);
}

TEST_CASE("threaded encoding matches the serial path bitwise") {
  SyntheticConfig sc;
  sc.per_class_count = 3;
  sc.t_frames = 5;
  sc.ttb_frames = 5;
  const Dataset ds = generate_synthetic(sc, 15);
  EncoderConfig cfg;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_graph = 8;
  cfg.t_len = 5;
  cfg.n_classes = 8;
  const EncoderParams p = init_encoder_params(cfg, 20);
  const auto serial = encode_instances(ds.instances, p, EdgePolicy::complete(), 1);
  const auto threaded = encode_instances(ds.instances, p, EdgePolicy::complete(), 4);
  REQUIRE(serial.size() == threaded.size());
  for (std::size_t i = 0; i < serial.size(); ++i) {
    CHECK(serial[i].embedding.g == threaded[i].embedding.g);
    CHECK(serial[i].probs == threaded[i].probs);
  }
}

TEST_CASE("shape and config validation errors") {
  EncoderConfig cfg;
  cfg.d_model = 10;
  cfg.n_heads = 4;  // not divisible
  cfg.t_len = 2;
  cfg.n_classes = 2;
  CHECK_THROWS_AS(cfg.validate(), Error);

  EncoderConfig ok;
  ok.t_len = 3;
  ok.n_classes = 2;
  const EncoderParams p = init_encoder_params(ok, 1);
  CHECK_THROWS_AS(encode_states(std::vector<double>(7, 0.0), p), Error);  // not T x 6
}
