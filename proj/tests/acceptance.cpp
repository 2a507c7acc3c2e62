// Acceptance suite: runs every gate criterion at its stated tolerance and
// prints one PASS/FAIL line per criterion. Exits nonzero if any gate fails.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <vector>

#include "oracles.hpp"
#include "test_helpers.hpp"
#include "vessam/eval.hpp"
#include "vessam/model.hpp"
#include "vessam/prompts.hpp"
#include "vessam/skeleton.hpp"
#include "vessam/synthgen.hpp"
#include "vessam/topology.hpp"

namespace fs = std::filesystem;
using namespace vessam;
using ad::Tensor;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<TreeSpec> corpus_specs(int count) {
  std::vector<TreeSpec> specs;
  specs.reserve(size_t(count));
  for (int i = 0; i < count; ++i) {
    TreeSpec s;
    s.seed = uint64_t(i) * 2654435761ull + 12345;
    s.size = 64 + (i % 5) * 16;           // 64..128
    s.branch_events = i % 7;              // 0..6
    s.width_px = 1 + i % 3;               // 1..3
    s.wiggle = 0.1 + 0.04 * double(i % 9);
    specs.push_back(s);
  }
  return specs;
}

bool subset_of(const BinaryMask& sub, const BinaryMask& super) {
  for (size_t i = 0; i < sub.size(); ++i)
    if (sub.bits()[i] && !super.bits()[i]) return false;
  return true;
}

model::ModelConfig toy_config() {
  model::ModelConfig c;  // the library defaults are the toy defaults
  c.seed = 2024;
  return c;
}

model::ModelConfig small_config(uint64_t seed) {
  model::ModelConfig c;
  c.image_size = 32;
  c.patch_size = 8;
  c.embed_dim = 16;
  c.vit_depth = 1;
  c.heads = 2;
  c.adapter_reduction = 4;
  c.gcn_layers = 2;
  c.decoder_upsample_stages = 3;
  c.seed = seed;
  return c;
}

// ---- criterion 1: skeleton property suite -----------------------------------

bool criterion1() {
  auto t0 = Clock::now();
  int failures = 0;
  for (const TreeSpec& spec : corpus_specs(200)) {
    BinaryMask mask = generate_vessel_tree(spec).mask;
    BinaryMask skel = skeletonize(mask);
    bool ok = subset_of(skel, mask) && is_thin(skel) && skeletonize(skel) == skel &&
              connected_components(skel, 8).count ==
                  connected_components(mask, 8).count;
    if (!ok) ++failures;
  }
  double elapsed = seconds_since(t0);
  std::printf("  200 masks checked in %.1f s (budget 30 s), %d failures\n", elapsed,
              failures);
  return failures == 0 && elapsed < 30.0;
}

// ---- criterion 2: prompt oracle suite -----------------------------------------

bool criterion2() {
  int failures = 0;
  for (const TreeSpec& spec : corpus_specs(200)) {
    BinaryMask skel = skeletonize(generate_vessel_tree(spec).mask);
    if (detect_bifurcations(skel) != testing::oracle_bifurcations(skel)) {
      ++failures;
      continue;
    }
    auto segments = decompose_segments(skel, detect_bifurcations(skel));
    BinaryMask rebuilt(skel.width(), skel.height());
    bool dup = false;
    for (const auto& s : segments)
      for (Point p : s.path) {
        if (rebuilt.at(p)) dup = true;
        rebuilt.set(p, 1);
      }
    for (const auto& cluster : junction_clusters(skel))
      for (Point p : cluster) {
        if (rebuilt.at(p)) dup = true;
        rebuilt.set(p, 1);
      }
    if (dup || rebuilt != skel) ++failures;
  }
  std::printf("  oracle and reconstruction checked on 200 masks, %d failures\n", failures);
  return failures == 0;
}

// ---- criterion 3: graph algebra -------------------------------------------------

bool criterion3() {
  int failures = 0;
  SplitMix64 rng(99);
  for (int trial = 0; trial < 100; ++trial) {
    const size_t n = 2 + rng.next_below(24);
    VesselGraph g;
    for (size_t i = 0; i < n; ++i)
      g.nodes.push_back({Point{int(rng.next_below(64)), int(rng.next_below(64))},
                         rng.next_below(2) ? NodeKind::Bifurcation : NodeKind::Midpoint,
                         0.0, 0.0});
    for (size_t i = 0; i < n; ++i)
      for (size_t j = i + 1; j < n; ++j)
        if (rng.next_double() < 0.2) g.edges.emplace_back(int(i), int(j));

    auto a = normalized_adjacency(g);
    bool ok = true;
    for (size_t i = 0; i < n && ok; ++i)
      for (size_t j = 0; j < n; ++j)
        if (std::abs(a[i * n + j] - a[j * n + i]) > 1e-12) {
          ok = false;
          break;
        }

    // Power iteration for the spectral radius (symmetric nonnegative matrix).
    std::vector<double> v(n, 1.0), w(n);
    double lambda = 0.0;
    for (int it = 0; it < 300; ++it) {
      for (size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (size_t j = 0; j < n; ++j) acc += a[i * n + j] * v[j];
        w[i] = acc;
      }
      double norm = 0.0;
      for (double x : w) norm += x * x;
      norm = std::sqrt(norm);
      if (norm == 0.0) break;
      lambda = norm;
      for (size_t i = 0; i < n; ++i) v[i] = w[i] / norm;
    }
    if (lambda > 1.0 + 1e-9) ok = false;

    // Permutation consistency, exact.
    std::vector<size_t> perm(n);
    for (size_t i = 0; i < n; ++i) perm[i] = i;
    for (size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.next_below(i)]);
    VesselGraph h;
    h.nodes.resize(n);
    for (size_t i = 0; i < n; ++i) h.nodes[perm[i]] = g.nodes[i];
    for (auto [i, j] : g.edges) {
      int pa = int(perm[size_t(i)]), pb = int(perm[size_t(j)]);
      h.edges.emplace_back(std::min(pa, pb), std::max(pa, pb));
    }
    auto ah = normalized_adjacency(h);
    for (size_t i = 0; i < n && ok; ++i)
      for (size_t j = 0; j < n; ++j)
        if (ah[perm[i] * n + perm[j]] != a[i * n + j]) {
          ok = false;
          break;
        }
    if (!ok) ++failures;
  }
  std::printf("  100 random graphs, %d failures\n", failures);
  return failures == 0;
}

// ---- criterion 4: gradient checks -----------------------------------------------

bool criterion4() {
  auto t0 = Clock::now();
  bool all = true;
  double worst = 0.0;
  auto demand = [&](const char* label, ad::GradCheckReport rep) {
    worst = std::max(worst, rep.max_rel_err);
    if (!rep.pass) {
      std::printf("  op check FAILED: %s (max_rel_err %.3e)\n", label, rep.max_rel_err);
      all = false;
    }
  };
  auto rand_t = [](ad::Shape shape, uint64_t seed, double half = 1.0) {
    SplitMix64 rng(seed);
    std::vector<double> v(ad::shape_size(shape));
    for (double& x : v) x = rng.next_symmetric(half);
    return Tensor(std::move(shape), std::move(v));
  };

  for (uint64_t s : {1ull, 2ull, 3ull}) {
    Tensor m = rand_t({3, 4}, s), rhs = rand_t({4, 5}, s + 10), v2 = rand_t({3, 4}, s + 20);
    Tensor x3 = rand_t({2, 4, 6}, s + 30);
    Tensor w4 = rand_t({3, 2, 3, 3}, s + 40), wd = rand_t({2, 3, 3}, s + 50);
    demand("matmul", ad::grad_check([&](const Tensor& t) {
      return ad::sum_all(ad::matmul(t, rhs));
    }, m));
    demand("conv2d/x", ad::grad_check([&](const Tensor& t) {
      return ad::mean_all(ad::conv2d(t, w4, 1, 1));
    }, x3));
    demand("conv2d/w", ad::grad_check([&](const Tensor& t) {
      return ad::mean_all(ad::conv2d(x3, t, 2, 1));
    }, w4));
    demand("depthwise", ad::grad_check([&](const Tensor& t) {
      return ad::mean_all(ad::depthwise_conv2d(x3, t, 1, 1));
    }, wd));
    demand("relu", ad::grad_check([&](const Tensor& t) {
      return ad::sum_all(ad::relu(t));
    }, m));
    demand("sigmoid", ad::grad_check([&](const Tensor& t) {
      return ad::sum_all(ad::sigmoid(t));
    }, m));
    demand("add+scale", ad::grad_check([&](const Tensor& t) {
      return ad::sum_all(ad::add(ad::scale(t, 0.7), v2));
    }, m));
    demand("mul", ad::grad_check([&](const Tensor& t) {
      return ad::sum_all(ad::mul(t, v2));
    }, m));
    demand("div", ad::grad_check([&](const Tensor& t) {
      return ad::sum_all(ad::div(t, ad::add(ad::sigmoid(v2), Tensor({3, 4}, 0.5))));
    }, m));
    demand("softmax", ad::grad_check([&](const Tensor& t) {
      return ad::mean_all(ad::mul(ad::softmax(t, 1), v2));
    }, m));
    demand("layer_norm", ad::grad_check([&](const Tensor& t) {
      return ad::mean_all(ad::mul(ad::layer_norm(t, 1), v2));
    }, m));
    demand("concat+slice", ad::grad_check([&](const Tensor& t) {
      return ad::sum_all(ad::slice_rows(ad::concat({t, v2}, 0), 1, 5));
    }, m));
    demand("transpose+reshape", ad::grad_check([&](const Tensor& t) {
      return ad::sum_all(ad::mul(ad::reshape(ad::transpose(t), {3, 4}), v2));
    }, m));
    demand("mean/sum axes", ad::grad_check([&](const Tensor& t) {
      return ad::sum_all(ad::mean(ad::sum(t, {2}), {0}));
    }, x3));
    demand("downsample", ad::grad_check([&](const Tensor& t) {
      return ad::mean_all(ad::downsample(t, 2));
    }, x3));
    demand("upsample", ad::grad_check([&](const Tensor& t) {
      return ad::mean_all(ad::upsample(t, 3));
    }, x3));
    Tensor targets({3, 4});
    SplitMix64 trng(s + 60);
    for (size_t i = 0; i < targets.size(); ++i) targets.data()[i] = double(trng.next_below(2));
    demand("bce_with_logits", ad::grad_check([&](const Tensor& t) {
      return ad::bce_with_logits(t, targets);
    }, rand_t({3, 4}, s + 70, 2.0)));
    demand("scale by tensor", ad::grad_check([&](const Tensor& t) {
      return ad::sum_all(ad::scale(v2, t));
    }, Tensor::scalar(0.8)));
  }

  // Full-model checks through the dice+bce loss, sampled coordinates per
  // parameter, via the shared central-difference harness (one backward pass,
  // per-coordinate step selection, sub-resolution gradients recorded rather
  // than scored).
  auto full_model = [&](model::ModelConfig cfg, uint64_t sample_seed, int per_param,
                        const char* label) {
    model::VesSam m(cfg);
    m.params().get("adapter.alpha").data()[0] = 0.25;
    TreeSpec spec{sample_seed, cfg.image_size, 3, 2, 0.3};
    eval::Sample s = eval::make_sample(generate_vessel_tree(spec).mask);
    auto reports = eval::full_model_grad_check(m, s, {true, true, true}, per_param,
                                               sample_seed, 1e-4);
    for (const auto& rep : reports) {
      worst = std::max(worst, rep.max_rel_err);
      if (!rep.pass) {
        std::printf("  full model (%s) FAILED at %s: max_rel_err %.3e\n", label,
                    rep.name.c_str(), rep.max_rel_err);
        all = false;
      }
    }
  };
  full_model(small_config(31), 601, 6, "image 32");
  full_model(toy_config(), 602, 2, "image 64 toy");

  double elapsed = seconds_since(t0);
  std::printf("  worst rel err %.3e, elapsed %.1f s (budget 300 s)\n", worst, elapsed);
  return all && elapsed < 300.0;
}

// ---- criterion 5: PEFT contracts -------------------------------------------------

bool criterion5() {
  bool ok = true;

  // Adapter identity at init, exact.
  model::VesSam m(small_config(41));
  TreeSpec spec{71, 32, 2, 2, 0.3};
  eval::Sample s = eval::make_sample(generate_vessel_tree(spec).mask);
  Tensor tokens = m.vit_stub_forward(s.image);
  Tensor adapted = m.adapter_forward(tokens);
  for (size_t i = 0; i < tokens.size(); ++i)
    if (adapted.at(i) != tokens.at(i)) {
      ok = false;
      break;
    }
  std::printf("  adapter identity at init: %s\n", ok ? "exact" : "VIOLATED");

  // Frozen ViT bit-identical after 200 training steps.
  auto dataset = eval::make_synthetic_dataset(4, 5, 32);
  std::vector<double> before;
  for (const auto& [name, t] : m.params().entries())
    if (name.rfind("vit.", 0) == 0) before.insert(before.end(), t.data(), t.data() + t.size());
  eval::train(m, dataset, {true, true, true}, 50, 1e-3, 13, 200);
  std::vector<double> after;
  for (const auto& [name, t] : m.params().entries())
    if (name.rfind("vit.", 0) == 0) after.insert(after.end(), t.data(), t.data() + t.size());
  bool frozen = before == after;
  std::printf("  frozen backbone after 200 steps: %s\n",
              frozen ? "bit-identical" : "CHANGED");
  ok = ok && frozen;

  // Permutation equivariance with logits unchanged to 1e-9.
  model::VesSam mp(small_config(42));
  if (s.prompts.midpoints.size() >= 2) {
    PromptSet shuffled = s.prompts;
    std::rotate(shuffled.midpoints.begin(), shuffled.midpoints.begin() + 1,
                shuffled.midpoints.end());
    Tensor sf_a = mp.encode_sparse(s.prompts.bifurcations, s.prompts.midpoints);
    Tensor sf_b = mp.encode_sparse(shuffled.bifurcations, shuffled.midpoints);
    model::FeatureSet fa, fb;
    fa.sf = sf_a;
    fb.sf = sf_b;
    fa.df = fb.df = mp.encode_dense(s.prompts.skeleton, BinaryMask(32, 32));
    fa.gf = fb.gf = mp.encode_graph(s.graph);
    fa = mp.fuse_prompts(fa);
    fb = mp.fuse_prompts(fb);
    const size_t nb = s.prompts.bifurcations.size(), nm = s.prompts.midpoints.size();
    const size_t d = fa.sf_fused.extent(1);
    bool equivariant = true;
    for (size_t i = 0; i < nm && equivariant; ++i) {
      size_t src = nb + (i + 1) % nm;
      for (size_t j = 0; j < d; ++j)
        if (std::abs(fa.sf_fused.at(src * d + j) - fb.sf_fused.at((nb + i) * d + j)) >
            1e-9) {
          equivariant = false;
          break;
        }
    }
    Tensor la = mp.forward(s.image, s.prompts, s.graph, {true, true, true});
    Tensor lb = mp.forward(s.image, shuffled, s.graph, {true, true, true});
    for (size_t i = 0; i < la.size() && equivariant; ++i)
      if (std::abs(la.at(i) - lb.at(i)) > 1e-9) equivariant = false;
    std::printf("  permutation equivariance: %s\n", equivariant ? "holds" : "VIOLATED");
    ok = ok && equivariant;
  }
  return ok;
}

// ---- criterion 6: metric identity -------------------------------------------------

bool criterion6() {
  int failures = 0;
  for (uint64_t seed = 0; seed < 1000; ++seed) {
    BinaryMask p = testing::random_mask(13, 11, seed * 2 + 1, 0.3 + 0.001 * double(seed % 300));
    BinaryMask g = testing::random_mask(13, 11, seed * 2 + 2, 0.35);
    double dc = eval::dice(p, g), jc = eval::iou(p, g);
    if (std::abs(dc - 2.0 * jc / (1.0 + jc)) > 1e-12) ++failures;
  }
  BinaryMask e1(6, 6), e2(6, 6);
  bool both_empty_ok = eval::dice(e1, e2) == 1.0 && eval::iou(e1, e2) == 1.0;
  std::printf("  1000 pairs, %d identity failures; both-empty convention %s\n", failures,
              both_empty_ok ? "honored" : "VIOLATED");
  return failures == 0 && both_empty_ok;
}

// ---- criterion 7: toy learning ----------------------------------------------------

bool criterion7() {
  auto t0 = Clock::now();

  // Overfit one 64x64 sample within 500 steps at lr 1e-3.
  model::ModelConfig cfg = toy_config();
  auto one = eval::make_synthetic_dataset(1, 77, cfg.image_size);
  model::VesSam m(cfg);
  eval::TrainResult r = eval::train(m, one, {true, true, true}, 500, 1e-3, 3, 500);
  eval::EvalResult train_fit = eval::evaluate(m, one, {true, true, true});
  double final_loss = r.epoch_loss.back();
  std::printf("  overfit: %zu steps, final loss %.4f (< 0.05), train dice %.4f (> 0.95), %.0f s\n",
              r.steps, final_loss, train_fit.mean_dice, seconds_since(t0));
  bool overfit_ok = final_loss < 0.05 && train_fit.mean_dice > 0.95;

  // Standard synthetic benchmark: 200 train / 50 test, seed 42, 30 epochs.
  eval::AblationConfig ac;
  ac.model = toy_config();
  ac.seed = 42;
  ac.epochs = 30;
  ac.lr = 1e-3;
  ac.parallel = true;
  auto train_set = eval::make_synthetic_dataset(200, 42, cfg.image_size, 0);
  auto test_set = eval::make_synthetic_dataset(50, 42, cfg.image_size, 200);
  auto rows = eval::run_ablation(ac, train_set, test_set);
  std::fputs(eval::ablation_table_text(rows).c_str(), stdout);

  double all_three = 0.0;
  double singles_max = 0.0;
  bool found_all = false;
  for (const auto& row : rows) {
    const int enabled = int(row.flags.use_bif) + int(row.flags.use_mid) +
                        int(row.flags.use_skel);
    if (enabled == 3) {
      all_three = row.mean_dice;
      found_all = true;
    } else if (enabled == 1) {
      singles_max = std::max(singles_max, row.mean_dice);
    }
  }
  double elapsed = seconds_since(t0);
  std::printf("  all-three dice %.4f vs best single %.4f; elapsed %.0f s (budget 7200 s)\n",
              all_three, singles_max, elapsed);
  return overfit_ok && found_all && all_three >= singles_max && elapsed < 7200.0;
}

// ---- criterion 9: determinism / round-trips ----------------------------------------

bool criterion9() {
  bool ok = true;

  for (uint64_t seed = 0; seed < 20; ++seed) {
    BinaryMask m = testing::random_mask(48, 32, seed + 900);
    if (load_mask(save_mask(m)) != m) ok = false;
  }

  for (uint64_t seed = 0; seed < 10; ++seed) {
    TreeSpec spec{seed + 40, 64, 3, 2, 0.3};
    PromptSet ps = generate_prompt_set(generate_vessel_tree(spec).mask);
    auto bytes = serialize_prompts(ps);
    if (!(deserialize_prompts(bytes) == ps)) ok = false;
    if (serialize_prompts(deserialize_prompts(bytes)) != bytes) ok = false;
  }

  {
    model::VesSam m(small_config(91));
    fs::path dir = fs::temp_directory_path() / "vessam_acceptance_ckpt";
    fs::create_directories(dir);
    m.save((dir / "c.ckpt").string(), (dir / "c.json").string());
    model::VesSam back = model::VesSam::load((dir / "c.ckpt").string(),
                                             (dir / "c.json").string());
    for (const auto& [name, t] : m.params().entries()) {
      const auto& u = back.params().get(name);
      for (size_t i = 0; i < t.size(); ++i)
        if (t.at(i) != u.at(i)) ok = false;
    }
    fs::remove_all(dir);
  }

  // Identical CLI invocations produce byte-identical outputs.
  auto run_cli = [](const std::string& args) {
    const std::string cmd = std::string(VESSAM_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    int status = std::system(cmd.c_str());
    return status != -1 && WIFEXITED(status) && WEXITSTATUS(status) == 0;
  };
  auto slurp = [](const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)),
                       std::istreambuf_iterator<char>());
  };
  fs::path dir = fs::temp_directory_path() / "vessam_acceptance_cli";
  fs::remove_all(dir);
  fs::create_directories(dir);
  bool cli_ok = run_cli("synth --seed 11 --n 2 --size 64 --branches 2 --out-dir " +
                        (dir / "a").string()) &&
                run_cli("synth --seed 11 --n 2 --size 64 --branches 2 --out-dir " +
                        (dir / "b").string());
  if (cli_ok)
    for (const char* name : {"000_mask.pgm", "001_mask.pgm", "000_truth.json"})
      if (slurp(dir / "a" / name) != slurp(dir / "b" / name)) cli_ok = false;
  if (cli_ok) {
    cli_ok = run_cli("prompts extract --mask " + (dir / "a/000_mask.pgm").string() +
                     " --out " + (dir / "p1.json").string()) &&
             run_cli("prompts extract --mask " + (dir / "a/000_mask.pgm").string() +
                     " --out " + (dir / "p2.json").string()) &&
             slurp(dir / "p1.json") == slurp(dir / "p2.json");
  }
  fs::remove_all(dir);
  std::printf("  serializer round-trips %s; CLI byte-determinism %s\n",
              ok ? "exact" : "BROKEN", cli_ok ? "holds" : "BROKEN");
  return ok && cli_ok;
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* label;
    std::function<bool()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "skeleton property suite (subset/thin/idempotent/topology, 200 masks, <30s)",
       criterion1},
      {2, "prompt oracle suite (bifurcation oracle + exact reconstruction, 200 masks)",
       criterion2},
      {3, "graph algebra (symmetry 1e-12, spectral radius, permutation exact, 100 graphs)",
       criterion3},
      {4, "autodiff gradient checks (every op + full model at rel-tol 1e-4, <5min)",
       criterion4},
      {5, "PEFT contracts (adapter identity, frozen backbone, permutation equivariance)",
       criterion5},
      {6, "metric identity (dice = 2*iou/(1+iou) to 1e-12, 1000 pairs)", criterion6},
      {7, "toy learning (single-sample overfit + six-way ablation ordering, <2h)",
       criterion7},
      {9, "determinism and round-trips (serializers exact, CLI byte-identical)",
       criterion9},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    std::printf("criterion %d: %s\n", c.id, c.label);
    std::fflush(stdout);
    bool pass = false;
    try {
      pass = c.run();
    } catch (const std::exception& e) {
      std::printf("  exception: %s\n", e.what());
    }
    std::printf("[%s] criterion %d\n", pass ? "PASS" : "FAIL", c.id);
    std::fflush(stdout);
    if (!pass) ++failed;
  }
  std::printf(
      "[NOTE] criterion 8: full-scale results (published-table accuracy, OoD averages) "
      "require pretrained backbones, eight real datasets, and GPU training; the property "
      "suites above are the desk-scale substitute by design.\n");
  if (failed) {
    std::printf("%d criterion(s) failed\n", failed);
    return 1;
  }
  std::printf("all criteria passed\n");
  return 0;
}
