// emem: command-line front end for the behavior-prediction pipeline.
//
// Exit codes: 0 success, 1 usage error, 2 data/invariant error,
// 3 numeric failure. Logs go to stderr; machine-readable results go to
// stdout or --out.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "emem/data_model.hpp"
#include "emem/encoder.hpp"
#include "emem/error.hpp"
#include "emem/eval.hpp"
#include "emem/kernels.hpp"
#include "emem/memory.hpp"
#include "emem/ndt.hpp"
#include "emem/tree.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kToolVersion = "emem 1.0.0 (formats: encoder/v1, tree/v1, emem-ndt/v1)";

struct RunConfig {
  std::optional<std::uint64_t> seed;
  emem::SyntheticConfig synthetic;
  struct {
    int d_model = 32;
    int n_heads = 4;
    int n_layers = 2;
    int d_graph = 32;
  } encoder;
  emem::BaseTrainConfig base_train;
  struct {
    int hidden = 64;
    int out = 32;
    double rho = 30.0;
    std::string aggregation = "max";
    bool shared_h = false;
    double eta = 0.7;
  } ndt;
  emem::NdtTrainConfig ndt_train;
  emem::EdgePolicy edge_policy;
  double frame_rate_hz = 10.0;
};

template <typename T>
void maybe(const json& j, const char* key, T& slot) {
  if (j.contains(key)) slot = j.at(key).get<T>();
}

RunConfig load_run_config(const std::string& path) {
  RunConfig cfg;
  if (path.empty()) return cfg;
  std::ifstream in(path);
  if (!in) throw emem::data_error("cannot open config file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw emem::data_error(path + ": parse error: " + e.what());
  }
  if (!j.contains("schema_version") || j.at("schema_version").get<int>() != 1) {
    throw emem::data_error(path + ": config requires \"schema_version\": 1");
  }
  if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
  maybe(j, "frame_rate_hz", cfg.frame_rate_hz);
  if (j.contains("synthetic")) {
    const json& s = j.at("synthetic");
    maybe(s, "t_frames", cfg.synthetic.t_frames);
    maybe(s, "ttb_frames", cfg.synthetic.ttb_frames);
    maybe(s, "frame_rate_hz", cfg.synthetic.frame_rate_hz);
    maybe(s, "per_class_count", cfg.synthetic.per_class_count);
    maybe(s, "sigma_pos", cfg.synthetic.sigma_pos);
    maybe(s, "neighbors_min", cfg.synthetic.neighbors_min);
    maybe(s, "neighbors_max", cfg.synthetic.neighbors_max);
  }
  if (j.contains("encoder")) {
    const json& e = j.at("encoder");
    maybe(e, "d_model", cfg.encoder.d_model);
    maybe(e, "n_heads", cfg.encoder.n_heads);
    maybe(e, "n_layers", cfg.encoder.n_layers);
    maybe(e, "d_graph", cfg.encoder.d_graph);
  }
  if (j.contains("base_train")) {
    const json& b = j.at("base_train");
    maybe(b, "epochs", cfg.base_train.epochs);
    maybe(b, "lr_state", cfg.base_train.lr_state);
    maybe(b, "lr_graph", cfg.base_train.lr_graph);
    maybe(b, "weight_decay", cfg.base_train.weight_decay);
    maybe(b, "batch_size", cfg.base_train.batch_size);
  }
  if (j.contains("ndt")) {
    const json& n = j.at("ndt");
    maybe(n, "hidden", cfg.ndt.hidden);
    maybe(n, "out", cfg.ndt.out);
    maybe(n, "rho", cfg.ndt.rho);
    maybe(n, "aggregation", cfg.ndt.aggregation);
    maybe(n, "shared_h", cfg.ndt.shared_h);
    maybe(n, "eta", cfg.ndt.eta);
  }
  if (j.contains("ndt_train")) {
    const json& n = j.at("ndt_train");
    maybe(n, "epochs", cfg.ndt_train.epochs);
    maybe(n, "lr", cfg.ndt_train.lr);
    maybe(n, "weight_decay", cfg.ndt_train.weight_decay);
    maybe(n, "batch_size", cfg.ndt_train.batch_size);
  }
  if (j.contains("edge_policy")) {
    const json& e = j.at("edge_policy");
    std::string type = "complete";
    maybe(e, "type", type);
    if (type == "complete") {
      cfg.edge_policy = emem::EdgePolicy::complete();
    } else if (type == "radius") {
      double r = 30.0;
      maybe(e, "radius", r);
      cfg.edge_policy = emem::EdgePolicy::radius(r);
    } else {
      throw emem::data_error(path + ": edge_policy.type must be 'complete' or 'radius'");
    }
  }
  return cfg;
}

std::uint64_t require_seed(const RunConfig& cfg, std::optional<std::uint64_t> flag_seed) {
  if (flag_seed) return *flag_seed;
  if (cfg.seed) return *cfg.seed;
  throw emem::usage_error("a seed is required: pass --seed or set \"seed\" in the config file");
}

void ensure_writable(const std::string& path, bool force) {
  if (path.empty()) return;
  if (fs::exists(path) && !force) {
    throw emem::usage_error("output file exists: " + path + " (pass --force to overwrite)");
  }
}

void write_result(const std::string& out_path, const std::string& content, bool force) {
  if (out_path.empty()) {
    std::cout << content;
    return;
  }
  ensure_writable(out_path, force);
  std::ofstream out(out_path);
  if (!out) throw emem::data_error("cannot open output file: " + out_path);
  out << content;
  if (!out) throw emem::data_error("write failure: " + out_path);
}

emem::Aggregation parse_aggregation(const std::string& name) {
  const auto a = emem::aggregation_from_name(name);
  if (!a) throw emem::usage_error("aggregation must be 'max' or 'mean', got '" + name + "'");
  return *a;
}

void check_encoder_hash(const emem::EMemNdtModel& model, const std::string& encoder_path) {
  if (model.encoder_hash.empty()) return;
  const std::string h = emem::file_content_hash(encoder_path);
  if (h != model.encoder_hash) {
    throw emem::data_error("encoder file " + encoder_path + " (hash " + h +
                           ") does not match the encoder this model was built against (hash " +
                           model.encoder_hash + ")");
  }
}

json trace_to_json(const emem::ExplanationTrace& trace, const emem::Tree& tree) {
  json path = json::array();
  for (const auto& pn : trace.path) {
    json children = json::array();
    for (const auto& [cid, prob] : pn.child_probs) {
      children.push_back(json{{"node_id", cid}, {"prob", prob}});
    }
    path.push_back(json{{"node_id", pn.node_id}, {"name", pn.name}, {"children", children}});
  }
  json leaf_probs = json::object();
  for (const auto& [leaf, p] : trace.distribution.s) {
    leaf_probs[tree.node(leaf).label] = p;
  }
  return json{{"instance_id", trace.instance_id},
              {"predicted_label", trace.predicted_label},
              {"predicted_leaf", trace.predicted_leaf},
              {"path", std::move(path)},
              {"prototype",
               {{"leaf_id", trace.prototype.leaf_id},
                {"index", trace.prototype.index},
                {"instance_id", trace.prototype.instance_id},
                {"gamma", trace.prototype.gamma}}},
              {"leaf_probs", std::move(leaf_probs)}};
}

int run(int argc, char** argv) {
  CLI::App app{"episodic-memory neural decision tree for vehicle behavior prediction"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed_flag;
  bool force = false;
  int threads = 1;
  app.add_option("--config", config_path, "JSON run configuration")->envname("EMEM_CONFIG");
  app.add_option("--seed", seed_flag, "seed override (flags win over the config file)");
  app.add_flag("--force", force, "overwrite existing output files");
  app.add_option("--threads", threads, "worker thread cap for evaluation/prediction")
      ->check(CLI::PositiveNumber);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a deterministic synthetic dataset");
  std::string gen_out, gen_tax_out;
  gen->add_option("--out", gen_out, "output dataset JSONL")->required();
  gen->add_option("--taxonomy-out", gen_tax_out, "also write the synthetic taxonomy JSON");

  // train-base
  auto* tb = app.add_subcommand("train-base", "train the base encoder");
  std::string tb_data, tb_tax, tb_out;
  std::optional<int> tb_epochs;
  tb->add_option("--data", tb_data, "training dataset JSONL")->required();
  tb->add_option("--taxonomy", tb_tax, "taxonomy JSON")->required();
  tb->add_option("--out", tb_out, "output encoder JSON")->required();
  tb->add_option("--epochs", tb_epochs, "epoch override");

  // build-tree
  auto* bt = app.add_subcommand("build-tree", "cluster behavior text embeddings into a tree");
  std::string bt_tax, bt_emb, bt_out, bt_linkage = "average";
  std::size_t bt_width = 256;
  bt->add_option("--taxonomy", bt_tax, "taxonomy JSON")->required();
  bt->add_option("--embeddings", bt_emb, "label->vector JSON from an embedding service");
  bt->add_option("--fallback-width", bt_width, "trigram-hash width when no embeddings file");
  bt->add_option("--linkage", bt_linkage, "average | single | complete");
  bt->add_option("--out", bt_out, "output tree JSON")->required();

  // implant
  auto* im = app.add_subcommand("implant", "filter training instances into leaf memory banks");
  std::string im_data, im_tax, im_enc, im_tree, im_out;
  std::optional<double> im_eta;
  im->add_option("--data", im_data, "training dataset JSONL")->required();
  im->add_option("--taxonomy", im_tax, "taxonomy JSON")->required();
  im->add_option("--encoder", im_enc, "trained encoder JSON")->required();
  im->add_option("--tree", im_tree, "tree JSON")->required();
  im->add_option("--eta", im_eta, "memory admission threshold in [-1, 1]");
  im->add_option("--out", im_out, "output model JSON")->required();

  // train-ndt
  auto* tn = app.add_subcommand("train-ndt", "optimize the leaf transforms");
  std::string tn_model, tn_data, tn_tax, tn_enc, tn_out;
  std::optional<int> tn_epochs;
  tn->add_option("--model", tn_model, "model JSON from implant")->required();
  tn->add_option("--data", tn_data, "training dataset JSONL")->required();
  tn->add_option("--taxonomy", tn_tax, "taxonomy JSON")->required();
  tn->add_option("--encoder", tn_enc, "trained encoder JSON")->required();
  tn->add_option("--epochs", tn_epochs, "epoch override");
  tn->add_option("--out", tn_out, "output model JSON")->required();

  // predict
  auto* pr = app.add_subcommand("predict", "predict behavior labels for instances");
  std::string pr_model, pr_enc, pr_in, pr_out;
  pr->add_option("--model", pr_model, "model JSON")->required();
  pr->add_option("--encoder", pr_enc, "encoder JSON")->required();
  pr->add_option("--instance", pr_in, "input instances JSONL")->required();
  pr->add_option("--out", pr_out, "output JSONL (default stdout)");

  // explain
  auto* ex = app.add_subcommand("explain", "emit one explanation trace per input instance");
  std::string ex_model, ex_enc, ex_in, ex_out;
  ex->add_option("--model", ex_model, "model JSON")->required();
  ex->add_option("--encoder", ex_enc, "encoder JSON")->required();
  ex->add_option("--instance", ex_in, "input instances JSONL")->required();
  ex->add_option("--out", ex_out, "output JSONL (default stdout)");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate the model on a labeled dataset");
  std::string ev_model, ev_enc, ev_data, ev_tax, ev_out, ev_csv, ev_util;
  ev->add_option("--model", ev_model, "model JSON")->required();
  ev->add_option("--encoder", ev_enc, "encoder JSON")->required();
  ev->add_option("--data", ev_data, "test dataset JSONL")->required();
  ev->add_option("--taxonomy", ev_tax, "taxonomy JSON")->required();
  ev->add_option("--out", ev_out, "metrics report JSON (default stdout)");
  ev->add_option("--confusion-csv", ev_csv, "also write the confusion matrix CSV");
  ev->add_option("--utilization-out", ev_util, "also write the prototype utilization JSON");

  // sweep-eta
  auto* sw = app.add_subcommand("sweep-eta", "implant/train/evaluate across eta values");
  std::string sw_train, sw_test, sw_tax, sw_enc, sw_tree, sw_out;
  std::vector<double> sw_etas;
  sw->add_option("--data", sw_train, "training dataset JSONL")->required();
  sw->add_option("--test", sw_test, "test dataset JSONL")->required();
  sw->add_option("--taxonomy", sw_tax, "taxonomy JSON")->required();
  sw->add_option("--encoder", sw_enc, "encoder JSON")->required();
  sw->add_option("--tree", sw_tree, "tree JSON")->required();
  sw->add_option("--etas", sw_etas, "eta values")->required()->delimiter(',');
  sw->add_option("--out", sw_out, "sweep table JSON (default stdout)");

  CLI11_PARSE(app, argc, argv);

  const RunConfig cfg = load_run_config(config_path);

  if (gen->parsed()) {
    const std::uint64_t seed = require_seed(cfg, seed_flag);
    ensure_writable(gen_out, force);
    if (!gen_tax_out.empty()) ensure_writable(gen_tax_out, force);
    const emem::Dataset ds = emem::generate_synthetic(cfg.synthetic, seed);
    emem::save_dataset(ds, gen_out);
    if (!gen_tax_out.empty()) emem::save_taxonomy(ds.taxonomy, gen_tax_out);
    std::cerr << "[gen-data] wrote " << ds.size() << " instances to " << gen_out << "\n";
    return 0;
  }

  if (tb->parsed()) {
    const std::uint64_t seed = require_seed(cfg, seed_flag);
    ensure_writable(tb_out, force);
    const emem::BehaviorTaxonomy tax = emem::load_taxonomy(tb_tax);
    const emem::Dataset train =
        emem::load_dataset(tb_data, cfg.frame_rate_hz, tax, /*require_uniform_t=*/true);
    emem::EncoderConfig ec;
    ec.d_model = cfg.encoder.d_model;
    ec.n_heads = cfg.encoder.n_heads;
    ec.n_layers = cfg.encoder.n_layers;
    ec.d_graph = cfg.encoder.d_graph;
    emem::BaseTrainConfig btc = cfg.base_train;
    btc.seed = seed;
    if (tb_epochs) btc.epochs = *tb_epochs;
    const emem::EncoderParams params = emem::train_base(train, btc, ec, cfg.edge_policy);
    emem::save_encoder(params, tb_out);
    std::cerr << "[train-base] wrote " << tb_out << "\n";
    return 0;
  }

  if (bt->parsed()) {
    const std::uint64_t seed = require_seed(cfg, seed_flag);
    ensure_writable(bt_out, force);
    const emem::BehaviorTaxonomy tax = emem::load_taxonomy(bt_tax);
    const auto linkage = emem::linkage_from_name(bt_linkage);
    if (!linkage) throw emem::usage_error("unknown linkage '" + bt_linkage + "'");
    std::vector<emem::TextEmbedding> embeddings;
    if (!bt_emb.empty()) {
      embeddings = emem::load_label_embeddings(bt_emb, tax);
    } else {
      embeddings = emem::fallback_embed_taxonomy(tax, bt_width, seed);
    }
    const emem::Tree tree = emem::build_tree(embeddings, *linkage);
    emem::save_tree(tree, bt_out);
    std::cerr << "[build-tree] " << tree.leaf_count << " leaves, root " << tree.root_id
              << " -> " << bt_out << "\n";
    return 0;
  }

  if (im->parsed()) {
    const std::uint64_t seed = require_seed(cfg, seed_flag);
    ensure_writable(im_out, force);
    const emem::BehaviorTaxonomy tax = emem::load_taxonomy(im_tax);
    const emem::Dataset train =
        emem::load_dataset(im_data, cfg.frame_rate_hz, tax, /*require_uniform_t=*/true);
    const emem::EncoderParams enc = emem::load_encoder(im_enc);
    const emem::Tree tree = emem::load_tree(im_tree);
    const double eta = im_eta.value_or(cfg.ndt.eta);
    emem::MemoryBankSet banks = emem::implant(train, enc, tree, eta, cfg.edge_policy);
    emem::EMemNdtModel model = emem::init_model(
        tree, std::move(banks), enc.config.d_model, cfg.ndt.hidden, cfg.ndt.out, cfg.ndt.rho,
        parse_aggregation(cfg.ndt.aggregation), cfg.ndt.shared_h, seed,
        emem::file_content_hash(im_enc));
    emem::save_model(model, im_out);
    std::cerr << "[implant] eta=" << eta << " total_emb=" << model.banks.total_size() << " -> "
              << im_out << "\n";
    return 0;
  }

  if (tn->parsed()) {
    const std::uint64_t seed = require_seed(cfg, seed_flag);
    ensure_writable(tn_out, force);
    const emem::BehaviorTaxonomy tax = emem::load_taxonomy(tn_tax);
    const emem::Dataset train =
        emem::load_dataset(tn_data, cfg.frame_rate_hz, tax, /*require_uniform_t=*/true);
    const emem::EncoderParams enc = emem::load_encoder(tn_enc);
    emem::EMemNdtModel model = emem::load_model(tn_model);
    check_encoder_hash(model, tn_enc);
    emem::NdtTrainConfig ntc = cfg.ndt_train;
    ntc.seed = seed;
    if (tn_epochs) ntc.epochs = *tn_epochs;
    emem::train_ndt(model, train, enc, ntc, cfg.edge_policy);
    emem::save_model(model, tn_out);
    std::cerr << "[train-ndt] wrote " << tn_out << "\n";
    return 0;
  }

  if (pr->parsed()) {
    const emem::EncoderParams enc = emem::load_encoder(pr_enc);
    emem::EMemNdtModel model = emem::load_model(pr_model);
    check_encoder_hash(model, pr_enc);
    const emem::Dataset ds =
        emem::load_dataset(pr_in, cfg.frame_rate_hz, /*require_uniform_t=*/true);
    const auto encoded = emem::encode_instances(ds.instances, enc, cfg.edge_policy, threads);
    std::ostringstream lines;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const emem::PredictResult res = emem::predict(encoded[i].embedding.g, model);
      json probs = json::object();
      for (const auto& [leaf, p] : res.distribution.s) {
        probs[model.tree.node(leaf).label] = p;
      }
      lines << json{{"instance_id", ds.instances[i].instance_id},
                    {"predicted_label", res.label},
                    {"probs", std::move(probs)}}
                   .dump()
            << '\n';
    }
    write_result(pr_out, lines.str(), force);
    return 0;
  }

  if (ex->parsed()) {
    const emem::EncoderParams enc = emem::load_encoder(ex_enc);
    emem::EMemNdtModel model = emem::load_model(ex_model);
    check_encoder_hash(model, ex_enc);
    const emem::Dataset ds =
        emem::load_dataset(ex_in, cfg.frame_rate_hz, /*require_uniform_t=*/true);
    std::ostringstream lines;
    for (const emem::Instance& inst : ds.instances) {
      const emem::ExplanationTrace trace =
          emem::explain(inst, enc, model, cfg.edge_policy, /*track_usage=*/true);
      lines << trace_to_json(trace, model.tree).dump() << '\n';
    }
    write_result(ex_out, lines.str(), force);
    return 0;
  }

  if (ev->parsed()) {
    const emem::BehaviorTaxonomy tax = emem::load_taxonomy(ev_tax);
    const emem::EncoderParams enc = emem::load_encoder(ev_enc);
    emem::EMemNdtModel model = emem::load_model(ev_model);
    check_encoder_hash(model, ev_enc);
    const emem::Dataset test =
        emem::load_dataset(ev_data, cfg.frame_rate_hz, tax, /*require_uniform_t=*/true);
    auto [cm, report] = emem::evaluate(model, enc, test, cfg.edge_policy, threads,
                                       /*track_usage=*/true);
    std::cerr << emem::report_to_text(report);
    write_result(ev_out, emem::report_to_json(cm, report).dump(2) + "\n", force);
    if (!ev_csv.empty()) {
      ensure_writable(ev_csv, force);
      std::ofstream out(ev_csv);
      if (!out) throw emem::data_error("cannot open output file: " + ev_csv);
      out << cm.to_csv();
    }
    if (!ev_util.empty()) {
      ensure_writable(ev_util, force);
      json util = json::array();
      for (const auto& u : emem::utilization_report(model)) {
        json top = json::array();
        for (const auto& [idx, count] : u.top_used) {
          top.push_back(json{{"index", idx}, {"count", count}});
        }
        util.push_back(json{{"leaf_id", u.leaf_id},
                            {"label", u.label},
                            {"k", u.k},
                            {"entropy_nats", u.entropy},
                            {"zero_usage_fraction", u.zero_usage_fraction},
                            {"top_used", std::move(top)}});
      }
      std::ofstream out(ev_util);
      if (!out) throw emem::data_error("cannot open output file: " + ev_util);
      out << util.dump(2) << '\n';
    }
    return 0;
  }

  if (sw->parsed()) {
    const std::uint64_t seed = require_seed(cfg, seed_flag);
    const emem::BehaviorTaxonomy tax = emem::load_taxonomy(sw_tax);
    const emem::Dataset train =
        emem::load_dataset(sw_train, cfg.frame_rate_hz, tax, /*require_uniform_t=*/true);
    const emem::Dataset test =
        emem::load_dataset(sw_test, cfg.frame_rate_hz, tax, /*require_uniform_t=*/true);
    const emem::EncoderParams enc = emem::load_encoder(sw_enc);
    const emem::Tree tree = emem::load_tree(sw_tree);
    emem::NdtBuildConfig build;
    build.hidden = cfg.ndt.hidden;
    build.out = cfg.ndt.out;
    build.rho = cfg.ndt.rho;
    build.aggregation = parse_aggregation(cfg.ndt.aggregation);
    build.shared_h = cfg.ndt.shared_h;
    build.seed = seed;
    emem::NdtTrainConfig ntc = cfg.ndt_train;
    ntc.seed = seed;
    const auto rows = emem::sweep_eta(train, test, enc, tree, sw_etas, build, ntc,
                                      cfg.edge_policy);
    json out = json::array();
    for (const auto& r : rows) {
      out.push_back(json{{"eta", r.eta},
                         {"macro_precision", r.macro_precision},
                         {"macro_recall", r.macro_recall},
                         {"macro_f1", r.macro_f1},
                         {"emb_total", r.emb_total}});
    }
    write_result(sw_out, out.dump(2) + "\n", force);
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const emem::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    switch (e.kind()) {
      case emem::ErrorKind::kUsage: return 1;
      case emem::ErrorKind::kData: return 2;
      case emem::ErrorKind::kNumeric: return 3;
    }
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
