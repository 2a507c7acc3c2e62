#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "vessam/eval.hpp"
#include "vessam/model.hpp"
#include "vessam/prompts.hpp"
#include "vessam/skeleton.hpp"
#include "vessam/synthgen.hpp"
#include "vessam/topology.hpp"

namespace fs = std::filesystem;
using namespace vessam;
using nlohmann::ordered_json;

namespace {

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) raise(ErrorCode::IoError, "cannot open " + path);
  return std::vector<uint8_t>((std::istreambuf_iterator<char>(f)),
                              std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) raise(ErrorCode::IoError, "cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!f) raise(ErrorCode::IoError, "short write to " + path);
}

void write_text(const std::string& path, const std::string& text) {
  write_file(path, std::vector<uint8_t>(text.begin(), text.end()));
}

std::string zero_pad(int value, int width) {
  std::string s = std::to_string(value);
  while (int(s.size()) < width) s.insert(s.begin(), '0');
  return s;
}

// Masks live on disk; images are re-rendered deterministically from the mask
// content, so a dataset directory fully defines the dataset.
std::vector<eval::Sample> load_dataset_dir(const std::string& dir) {
  std::vector<fs::path> mask_files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.size() > 9 && name.substr(name.size() - 9) == "_mask.pgm")
      mask_files.push_back(entry.path());
  }
  std::sort(mask_files.begin(), mask_files.end());
  if (mask_files.empty())
    raise(ErrorCode::EmptyDataset, "no *_mask.pgm files in " + dir);
  std::vector<eval::Sample> out;
  out.reserve(mask_files.size());
  for (const auto& p : mask_files) out.push_back(eval::make_sample(load_mask_file(p.string())));
  return out;
}

struct ModelOptions {
  std::string config_path;
  model::ModelConfig base;  // built-in toy defaults
  // CLI override slots; applied only when the flag was actually given.
  int image_size = -1, patch_size = -1, embed_dim = -1, vit_depth = -1, heads = -1,
      adapter_reduction = -1, gcn_layers = -1, decoder_upsample_stages = -1;
  long long seed = -1;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "model config JSON (flags override it)");
    cmd->add_option("--image-size", image_size, "square image extent");
    cmd->add_option("--patch-size", patch_size, "ViT patch extent");
    cmd->add_option("--embed-dim", embed_dim, "token embedding width");
    cmd->add_option("--vit-depth", vit_depth, "frozen stub depth");
    cmd->add_option("--heads", heads, "attention heads");
    cmd->add_option("--adapter-reduction", adapter_reduction, "adapter bottleneck ratio");
    cmd->add_option("--gcn-layers", gcn_layers, "graph convolution rounds");
    cmd->add_option("--decoder-stages", decoder_upsample_stages, "decoder upsample stages");
    cmd->add_option("--model-seed", seed, "parameter init seed");
  }

  model::ModelConfig resolve() const {
    model::ModelConfig c = base;
    if (!config_path.empty()) {
      auto bytes = read_file(config_path);
      c = model::ModelConfig::from_json(std::string(bytes.begin(), bytes.end()));
    }
    if (image_size > 0) c.image_size = image_size;
    if (patch_size > 0) c.patch_size = patch_size;
    if (embed_dim > 0) c.embed_dim = embed_dim;
    if (vit_depth > 0) c.vit_depth = vit_depth;
    if (heads > 0) c.heads = heads;
    if (adapter_reduction > 0) c.adapter_reduction = adapter_reduction;
    if (gcn_layers > 0) c.gcn_layers = gcn_layers;
    if (decoder_upsample_stages > 0) c.decoder_upsample_stages = decoder_upsample_stages;
    if (seed >= 0) c.seed = uint64_t(seed);
    c.validate();
    return c;
  }
};

model::PromptFlags parse_flags(const std::string& spec) {
  model::PromptFlags f{false, false, false};
  std::string token;
  std::istringstream in(spec);
  while (std::getline(in, token, ',')) {
    if (token == "bif") f.use_bif = true;
    else if (token == "mid") f.use_mid = true;
    else if (token == "skel") f.use_skel = true;
    else if (!token.empty())
      raise(ErrorCode::BadConfig, "unknown prompt flag '" + token + "'");
  }
  return f;
}

ordered_json flags_json(model::PromptFlags f) {
  auto arr = ordered_json::array();
  if (f.use_bif) arr.push_back("bif");
  if (f.use_mid) arr.push_back("mid");
  if (f.use_skel) arr.push_back("skel");
  return arr;
}

ordered_json model_config_json(const model::ModelConfig& c) {
  return ordered_json::parse(c.to_json());
}

void dump_run_config(const std::string& out_dir, const ordered_json& doc) {
  write_text((fs::path(out_dir) / "run_config.json").string(), doc.dump(2) + "\n");
}

// ---- subcommand bodies ------------------------------------------------------

int cmd_prompts_extract(const std::string& mask_path, const std::string& out_path,
                        const std::string& skeleton_out, const std::string& overlay_out) {
  BinaryMask mask = load_mask_file(mask_path);
  PromptSet ps = generate_prompt_set(mask);
  write_file(out_path, serialize_prompts(ps));
  if (!skeleton_out.empty()) save_mask_file(ps.skeleton, skeleton_out);
  if (!overlay_out.empty()) {
    std::vector<uint8_t> gray(mask.size(), 0);
    for (size_t i = 0; i < mask.size(); ++i)
      if (mask.bits()[i]) gray[i] = 80;
    for (size_t i = 0; i < mask.size(); ++i)
      if (ps.skeleton.bits()[i]) gray[i] = 160;
    for (const Midpoint& m : ps.midpoints)
      gray[size_t(m.point.y) * mask.width() + m.point.x] = 255;
    for (Point p : ps.bifurcations) gray[size_t(p.y) * mask.width() + p.x] = 255;
    write_file(overlay_out, save_pgm_gray(mask.width(), mask.height(), gray));
  }
  std::cout << "bifurcations: " << ps.bifurcations.size()
            << "  midpoints: " << ps.midpoints.size() << "\n";
  return 0;
}

int cmd_graph_build(const std::string& prompts_path, const std::string& out_path,
                    const std::string& dot_path) {
  PromptSet ps = deserialize_prompts(read_file(prompts_path));
  VesselGraph g = build_graph(ps);
  write_text(out_path, graph_to_json(g));
  if (!dot_path.empty()) write_text(dot_path, graph_to_dot(g));
  std::cout << "nodes: " << g.nodes.size() << "  edges: " << g.edges.size() << "\n";
  return 0;
}

int cmd_synth(uint64_t seed, int n, int size, int branches, int width, double wiggle,
              const std::string& out_dir) {
  fs::create_directories(out_dir);
  for (int i = 0; i < n; ++i) {
    TreeSpec spec;
    spec.seed = derive_seed(seed, uint64_t(i));
    spec.size = size;
    spec.branch_events = branches;
    spec.width_px = width;
    spec.wiggle = wiggle;
    GeneratedTree tree = generate_vessel_tree(spec);
    const std::string stem = zero_pad(i, 3);
    save_mask_file(tree.mask, (fs::path(out_dir) / (stem + "_mask.pgm")).string());
    ordered_json truth;
    auto pts = ordered_json::array();
    for (Point p : tree.truth.branch_points) pts.push_back({p.x, p.y});
    truth["branch_points"] = std::move(pts);
    write_text((fs::path(out_dir) / (stem + "_truth.json")).string(), truth.dump() + "\n");
  }
  ordered_json rc;
  rc["command"] = "synth";
  rc["seed"] = seed;
  rc["n"] = n;
  rc["size"] = size;
  rc["branches"] = branches;
  rc["width"] = width;
  rc["wiggle"] = wiggle;
  dump_run_config(out_dir, rc);
  std::cout << "wrote " << n << " mask/truth pairs to " << out_dir << "\n";
  return 0;
}

int cmd_train_toy(const ModelOptions& mopts, const std::string& data_dir, int train_n,
                  uint64_t data_seed, int epochs, double lr, uint64_t train_seed,
                  const std::string& flag_spec, const std::string& out_dir) {
  model::ModelConfig config = mopts.resolve();
  model::PromptFlags flags = parse_flags(flag_spec);
  std::vector<eval::Sample> dataset =
      data_dir.empty() ? eval::make_synthetic_dataset(train_n, data_seed, config.image_size)
                       : load_dataset_dir(data_dir);
  for (const auto& s : dataset)
    if (s.mask.width() != config.image_size || s.mask.height() != config.image_size)
      raise(ErrorCode::DimMismatch, "dataset image size does not match model config");

  model::VesSam m(config);
  eval::TrainResult r = eval::train(m, dataset, flags, epochs, lr, train_seed);

  fs::create_directories(out_dir);
  m.save((fs::path(out_dir) / "checkpoint.ckpt").string(),
         (fs::path(out_dir) / "model_config.json").string());
  std::ostringstream csv;
  csv << "epoch,loss\n";
  for (size_t e = 0; e < r.epoch_loss.size(); ++e) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", e, r.epoch_loss[e]);
    csv << buf;
  }
  write_text((fs::path(out_dir) / "loss.csv").string(), csv.str());

  ordered_json rc;
  rc["command"] = "train-toy";
  rc["model"] = model_config_json(config);
  rc["data_dir"] = data_dir;
  rc["train_n"] = train_n;
  rc["data_seed"] = data_seed;
  rc["epochs"] = epochs;
  rc["lr"] = lr;
  rc["train_seed"] = train_seed;
  rc["prompts"] = flags_json(flags);
  dump_run_config(out_dir, rc);

  std::cout << "final epoch loss: " << r.epoch_loss.back() << " over " << r.steps
            << " steps\n";
  return 0;
}

int cmd_ablate(const ModelOptions& mopts, int train_n, int test_n, uint64_t seed,
               int epochs, double lr, bool sequential, const std::string& out_dir) {
  model::ModelConfig config = mopts.resolve();
  eval::AblationConfig ac;
  ac.model = config;
  ac.seed = seed;
  ac.epochs = epochs;
  ac.lr = lr;
  ac.parallel = !sequential;
  auto train_set = eval::make_synthetic_dataset(train_n, seed, config.image_size, 0);
  auto test_set = eval::make_synthetic_dataset(test_n, seed, config.image_size, train_n);
  auto rows = eval::run_ablation(ac, train_set, test_set);

  fs::create_directories(out_dir);
  write_text((fs::path(out_dir) / "ablation.json").string(),
             eval::ablation_table_json(rows));
  const std::string table = eval::ablation_table_text(rows);
  write_text((fs::path(out_dir) / "ablation.txt").string(), table);

  ordered_json rc;
  rc["command"] = "ablate";
  rc["model"] = model_config_json(config);
  rc["train_n"] = train_n;
  rc["test_n"] = test_n;
  rc["seed"] = seed;
  rc["epochs"] = epochs;
  rc["lr"] = lr;
  dump_run_config(out_dir, rc);

  std::cout << table;
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& config_path,
             const std::string& data_dir, const std::string& flag_spec) {
  model::VesSam m = model::VesSam::load(ckpt, config_path);
  auto dataset = load_dataset_dir(data_dir);
  for (const auto& s : dataset)
    if (s.mask.width() != m.config().image_size || s.mask.height() != m.config().image_size)
      raise(ErrorCode::DimMismatch, "dataset image size does not match checkpoint config");
  eval::EvalResult r = eval::evaluate(m, dataset, parse_flags(flag_spec));
  char buf[96];
  std::snprintf(buf, sizeof(buf), "dice %.4f  iou %.4f  n %d\n", r.mean_dice, r.mean_iou,
                r.n);
  std::cout << buf;
  return 0;
}

int cmd_gradcheck(const ModelOptions& mopts, uint64_t sample_seed, int per_param,
                  double tol) {
  model::ModelConfig config = mopts.resolve();
  model::VesSam m(config);
  m.params().get("adapter.alpha").data()[0] = 0.25;  // exercise the adapter branches

  TreeSpec spec{sample_seed, config.image_size, 3, 2, 0.3};
  eval::Sample s = eval::make_sample(generate_vessel_tree(spec).mask);

  auto reports = eval::full_model_grad_check(m, s, {true, true, true}, per_param,
                                             sample_seed, tol);
  double max_rel = 0.0;
  bool all_pass = true;
  for (const auto& rep : reports) {
    max_rel = std::max(max_rel, rep.max_rel_err);
    all_pass = all_pass && rep.pass;
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-24s %-4s max_rel_err %.3e (%zu coords)\n",
                  rep.name.c_str(), rep.pass ? "ok" : "FAIL", rep.max_rel_err,
                  rep.coords);
    std::cout << buf;
  }
  std::cout << (all_pass ? "PASS" : "FAIL") << " overall max_rel_err " << max_rel << "\n";
  return all_pass ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vessel mask prompt extraction and toy VesSAM training"};
  app.require_subcommand(1);

  // prompts extract
  auto* prompts_cmd = app.add_subcommand("prompts", "prompt-set operations");
  prompts_cmd->require_subcommand(1);
  auto* extract = prompts_cmd->add_subcommand("extract", "extract a PromptSet from a mask");
  std::string mask_path, prompt_out, skeleton_out, overlay_out;
  extract->add_option("--mask", mask_path, "input mask (PGM or grayscale PNG)")->required();
  extract->add_option("--out", prompt_out, "output PromptSet JSON")->required();
  extract->add_option("--skeleton-out", skeleton_out, "optional skeleton PGM");
  extract->add_option("--overlay-out", overlay_out, "optional overlay PGM");

  // graph build
  auto* graph_cmd = app.add_subcommand("graph", "vessel graph operations");
  graph_cmd->require_subcommand(1);
  auto* gbuild = graph_cmd->add_subcommand("build", "build the vessel graph from prompts");
  std::string gb_prompts, gb_out, gb_dot;
  gbuild->add_option("--prompts", gb_prompts, "PromptSet JSON path")->required();
  gbuild->add_option("--out", gb_out, "output graph JSON")->required();
  gbuild->add_option("--dot", gb_dot, "optional DOT output");

  // synth
  auto* synth = app.add_subcommand("synth", "generate synthetic vessel trees");
  uint64_t sy_seed = 1;
  int sy_n = 1, sy_size = 64, sy_branches = 3, sy_width = 3;
  double sy_wiggle = 0.25;
  std::string sy_out;
  synth->add_option("--seed", sy_seed, "generation seed");
  synth->add_option("--n", sy_n, "number of mask/truth pairs");
  synth->add_option("--size", sy_size, "canvas extent");
  synth->add_option("--branches", sy_branches, "branch events per tree");
  synth->add_option("--width", sy_width, "stroke width in pixels (1..5)");
  synth->add_option("--wiggle", sy_wiggle, "curvature in [0,1]");
  synth->add_option("--out-dir", sy_out, "output directory")->required();

  // train-toy
  auto* train_cmd = app.add_subcommand("train-toy", "train the toy model");
  ModelOptions train_mopts;
  train_mopts.attach(train_cmd);
  std::string tr_data_dir, tr_flags = "bif,mid,skel", tr_out;
  int tr_train_n = 8, tr_epochs = 10;
  uint64_t tr_data_seed = 42, tr_seed = 7;
  double tr_lr = 1e-3;
  train_cmd->add_option("--data-dir", tr_data_dir, "mask directory (else synthetic)");
  train_cmd->add_option("--train-n", tr_train_n, "synthetic training samples");
  train_cmd->add_option("--data-seed", tr_data_seed, "synthetic dataset seed");
  train_cmd->add_option("--epochs", tr_epochs, "training epochs");
  train_cmd->add_option("--lr", tr_lr, "Adam learning rate");
  train_cmd->add_option("--seed", tr_seed, "shuffle seed");
  train_cmd->add_option("--prompts", tr_flags, "prompt flags, e.g. bif,mid,skel");
  train_cmd->add_option("--out-dir", tr_out, "output directory")->required();

  // ablate
  auto* ablate = app.add_subcommand("ablate", "run the six-configuration prompt ablation");
  ModelOptions ab_mopts;
  ab_mopts.attach(ablate);
  int ab_train_n = 200, ab_test_n = 50, ab_epochs = 30;
  uint64_t ab_seed = 42;
  double ab_lr = 1e-3;
  bool ab_sequential = false;
  std::string ab_out;
  ablate->add_option("--train-n", ab_train_n, "training samples");
  ablate->add_option("--test-n", ab_test_n, "held-out samples");
  ablate->add_option("--seed", ab_seed, "benchmark seed");
  ablate->add_option("--epochs", ab_epochs, "epochs per configuration");
  ablate->add_option("--lr", ab_lr, "Adam learning rate");
  ablate->add_flag("--sequential", ab_sequential, "disable parallel training");
  ablate->add_option("--out-dir", ab_out, "output directory")->required();

  // eval
  auto* evalc = app.add_subcommand("eval", "score a checkpoint against a dataset");
  std::string ev_ckpt, ev_cfg, ev_data, ev_flags = "bif,mid,skel";
  evalc->add_option("--checkpoint", ev_ckpt, "checkpoint path")->required();
  evalc->add_option("--model-config", ev_cfg, "model config JSON path")->required();
  evalc->add_option("--data-dir", ev_data, "mask directory")->required();
  evalc->add_option("--prompts", ev_flags, "prompt flags, e.g. bif,mid,skel");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "full-model gradient check");
  ModelOptions gc_mopts;
  gc_mopts.attach(gc);
  uint64_t gc_sample_seed = 1;
  int gc_per_param = 6;
  double gc_tol = 1e-4;
  gc->add_option("--sample-seed", gc_sample_seed, "synthetic sample seed");
  gc->add_option("--per-param", gc_per_param, "sampled coordinates per parameter");
  gc->add_option("--tol", gc_tol, "relative-error tolerance");

  CLI11_PARSE(app, argc, argv);

  try {
    if (extract->parsed())
      return cmd_prompts_extract(mask_path, prompt_out, skeleton_out, overlay_out);
    if (gbuild->parsed()) return cmd_graph_build(gb_prompts, gb_out, gb_dot);
    if (synth->parsed())
      return cmd_synth(sy_seed, sy_n, sy_size, sy_branches, sy_width, sy_wiggle, sy_out);
    if (train_cmd->parsed())
      return cmd_train_toy(train_mopts, tr_data_dir, tr_train_n, tr_data_seed, tr_epochs,
                           tr_lr, tr_seed, tr_flags, tr_out);
    if (ablate->parsed())
      return cmd_ablate(ab_mopts, ab_train_n, ab_test_n, ab_seed, ab_epochs, ab_lr,
                        ab_sequential, ab_out);
    if (evalc->parsed()) return cmd_eval(ev_ckpt, ev_cfg, ev_data, ev_flags);
    if (gc->parsed())
      return cmd_gradcheck(gc_mopts, gc_sample_seed, gc_per_param, gc_tol);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.internal() ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
