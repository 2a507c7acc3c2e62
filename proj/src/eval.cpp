#include "vessam/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "json.hpp"
#include "vessam/prompts.hpp"
#include "vessam/rng.hpp"

namespace vessam::eval {

using ad::Tensor;

namespace {

void require_same_dims(const BinaryMask& a, const BinaryMask& b) {
  if (a.width() != b.width() || a.height() != b.height())
    raise(ErrorCode::DimMismatch, "mask dimensions differ");
}

uint64_t fnv1a64(const std::vector<uint8_t>& bytes, uint64_t seed) {
  uint64_t h = 0xcbf29ce484222325ull ^ seed;
  for (uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace

double dice(const BinaryMask& pred, const BinaryMask& gt) {
  require_same_dims(pred, gt);
  size_t inter = 0, p = 0, g = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    p += pred.bits()[i];
    g += gt.bits()[i];
    inter += pred.bits()[i] & gt.bits()[i];
  }
  if (p + g == 0) return 1.0;
  return 2.0 * double(inter) / double(p + g);
}

double iou(const BinaryMask& pred, const BinaryMask& gt) {
  require_same_dims(pred, gt);
  size_t inter = 0, uni = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    inter += pred.bits()[i] & gt.bits()[i];
    uni += pred.bits()[i] | gt.bits()[i];
  }
  if (uni == 0) return 1.0;
  return double(inter) / double(uni);
}

Tensor dice_bce_loss(const Tensor& logits, const BinaryMask& gt) {
  if (logits.rank() != 2 || logits.extent(0) != size_t(gt.height()) ||
      logits.extent(1) != size_t(gt.width()))
    raise(ErrorCode::DimMismatch, "logits dims must equal mask dims");
  std::vector<double> tvals(gt.size());
  for (size_t i = 0; i < gt.size(); ++i) tvals[i] = gt.bits()[i] ? 1.0 : 0.0;
  Tensor targets(logits.shape(), std::move(tvals));

  Tensor bce = ad::bce_with_logits(logits, targets);

  Tensor probs = ad::sigmoid(logits);
  Tensor inter = ad::sum_all(ad::mul(probs, targets));
  Tensor psum = ad::sum_all(probs);
  Tensor numer = ad::add(ad::scale(inter, 2.0), Tensor::scalar(1.0));
  Tensor denom = ad::add(psum, Tensor::scalar(double(gt.popcount()) + 1.0));
  Tensor soft_dice = ad::div(numer, denom);

  return ad::add(bce, ad::add(Tensor::scalar(1.0), ad::scale(soft_dice, -1.0)));
}

BinaryMask predict_mask(const Tensor& logits) {
  if (logits.rank() != 2)
    raise(ErrorCode::DimMismatch, "predict_mask expects [H x W] logits");
  const int h = int(logits.extent(0)), w = int(logits.extent(1));
  BinaryMask out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      out.set(x, y, logits.at(size_t(y) * w + x) > 0.0 ? 1 : 0);
  return out;
}

Tensor render_image(const BinaryMask& mask) {
  SplitMix64 rng(fnv1a64(mask.bits(), 0x76657373616d6921ull));
  std::vector<double> values(mask.size());
  for (size_t i = 0; i < mask.size(); ++i) {
    const double base = mask.bits()[i] ? 0.65 : 0.35;
    values[i] = std::clamp(base + rng.next_symmetric(0.25), 0.0, 1.0);
  }
  return Tensor({1, size_t(mask.height()), size_t(mask.width())}, std::move(values));
}

Sample make_sample(const BinaryMask& mask) {
  Sample s;
  s.mask = mask;
  s.prompts = generate_prompt_set(mask);
  s.graph = build_graph(s.prompts);
  s.image = render_image(mask);
  return s;
}

std::vector<Sample> make_synthetic_dataset(int count, uint64_t seed, int image_size,
                                           int index_base) {
  std::vector<Sample> out;
  out.reserve(size_t(count));
  for (int i = 0; i < count; ++i) {
    SplitMix64 item_rng(derive_seed(seed, uint64_t(index_base + i)));
    TreeSpec spec;
    spec.seed = item_rng.next();
    spec.size = image_size;
    spec.branch_events = 1 + int(item_rng.next_below(4));
    spec.width_px = 1 + int(item_rng.next_below(3));
    spec.wiggle = 0.15 + 0.25 * item_rng.next_double();
    out.push_back(make_sample(generate_vessel_tree(spec).mask));
  }
  return out;
}

namespace {

// Adam over the trainable entries of a ParamStore, fixed parameter order.
class Adam {
 public:
  Adam(model::ParamStore& params, double lr) : lr_(lr) {
    for (const std::string& name : params.names()) {
      Tensor& t = params.get(name);
      if (!t.requires_grad()) continue;
      slots_.push_back({t, std::vector<double>(t.size(), 0.0),
                        std::vector<double>(t.size(), 0.0)});
    }
  }

  void zero_grads() {
    for (Slot& s : slots_) s.tensor.zero_grad();
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(kBeta1, double(t_));
    const double bc2 = 1.0 - std::pow(kBeta2, double(t_));
    for (Slot& s : slots_) {
      double* theta = s.tensor.data();
      const double* g = s.tensor.grad();
      for (size_t i = 0; i < s.m.size(); ++i) {
        s.m[i] = kBeta1 * s.m[i] + (1.0 - kBeta1) * g[i];
        s.v[i] = kBeta2 * s.v[i] + (1.0 - kBeta2) * g[i] * g[i];
        const double mhat = s.m[i] / bc1;
        const double vhat = s.v[i] / bc2;
        theta[i] -= lr_ * mhat / (std::sqrt(vhat) + kEps);
      }
    }
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  struct Slot {
    Tensor tensor;
    std::vector<double> m, v;
  };
  std::vector<Slot> slots_;
  double lr_;
  long t_ = 0;
};

std::vector<size_t> shuffled_indices(size_t n, uint64_t seed) {
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  SplitMix64 rng(seed);
  for (size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.next_below(i)]);
  return idx;
}

}  // namespace

TrainResult train(model::VesSam& m, const std::vector<Sample>& dataset,
                  model::PromptFlags flags, int epochs, double lr, uint64_t seed,
                  int max_steps) {
  if (dataset.empty()) raise(ErrorCode::EmptyDataset, "training needs at least one sample");
  Adam adam(m.params(), lr);
  TrainResult result;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    auto order = shuffled_indices(dataset.size(), derive_seed(seed, uint64_t(epoch)));
    double epoch_sum = 0.0;
    size_t epoch_steps = 0;
    for (size_t idx : order) {
      const Sample& s = dataset[idx];
      adam.zero_grads();
      double loss_value;
      {
        ad::Tape tape;
        Tensor logits = m.forward(s.image, s.prompts, s.graph, flags);
        Tensor loss = dice_bce_loss(logits, s.mask);
        loss_value = loss.at(0);
        if (!std::isfinite(loss_value))
          raise(ErrorCode::DivergedLoss,
                "non-finite loss at step " + std::to_string(result.steps));
        tape.backward(loss);
      }
      adam.step();
      epoch_sum += loss_value;
      ++epoch_steps;
      ++result.steps;
      if (max_steps > 0 && result.steps >= size_t(max_steps)) {
        result.epoch_loss.push_back(epoch_sum / double(epoch_steps));
        return result;
      }
    }
    result.epoch_loss.push_back(epoch_sum / double(epoch_steps));
  }
  return result;
}

EvalResult evaluate(const model::VesSam& m, const std::vector<Sample>& dataset,
                    model::PromptFlags flags) {
  EvalResult r;
  for (const Sample& s : dataset) {
    Tensor logits = m.forward(s.image, s.prompts, s.graph, flags);
    BinaryMask pred = predict_mask(logits);
    r.mean_dice += dice(pred, s.mask);
    r.mean_iou += iou(pred, s.mask);
    ++r.n;
  }
  if (r.n > 0) {
    r.mean_dice /= double(r.n);
    r.mean_iou /= double(r.n);
  }
  return r;
}

std::vector<ParamGradReport> full_model_grad_check(model::VesSam& m, const Sample& s,
                                                   model::PromptFlags flags,
                                                   int per_param, uint64_t seed,
                                                   double tol) {
  // Generic point: nudge every trainable parameter off its init.
  SplitMix64 jitter(derive_seed(seed, 99));
  for (const std::string& name : m.params().names()) {
    Tensor& t = m.params().get(name);
    if (!t.requires_grad()) continue;
    for (size_t i = 0; i < t.size(); ++i) t.data()[i] += jitter.next_symmetric(0.02);
  }

  auto loss_fn = [&]() {
    return dice_bce_loss(m.forward(s.image, s.prompts, s.graph, flags), s.mask);
  };

  // One backward pass gives the analytic gradient of every parameter.
  {
    ad::Tape tape;
    Tensor loss = loss_fn();
    tape.backward(loss);
  }
  std::unordered_map<std::string, std::vector<double>> analytic;
  for (const std::string& name : m.params().names()) {
    const Tensor& t = m.params().get(name);
    if (!t.requires_grad()) continue;
    analytic[name].assign(t.grad(), t.grad() + t.size());
  }

  constexpr double kSteps[] = {1e-4, 1e-5, 1e-6, 4e-4, 1e-3};
  // Central differences of an O(1) loss carry ~1e-12 absolute noise, so at
  // rel-tol 1e-4 only coordinates with |grad| >= ~1e-8 are measurable. A
  // wrong adjoint on any measurable coordinate still fails outright.
  constexpr double kMinResolvable = 1e-8;
  std::vector<ParamGradReport> reports;
  for (const std::string& name : m.params().names()) {
    Tensor& t = m.params().get(name);
    if (!t.requires_grad()) continue;
    ParamGradReport rep;
    rep.name = name;
    rep.pass = true;

    std::vector<size_t> coords;
    if (per_param <= 0 || size_t(per_param) >= t.size()) {
      coords.resize(t.size());
      for (size_t i = 0; i < t.size(); ++i) coords[i] = i;
    } else {
      SplitMix64 pick(derive_seed(seed, std::hash<std::string>{}(name)));
      std::vector<uint8_t> chosen(t.size(), 0);
      while (coords.size() < size_t(per_param)) {
        size_t i = size_t(pick.next_below(t.size()));
        if (!chosen[i]) {
          chosen[i] = 1;
          coords.push_back(i);
        }
      }
    }

    const std::vector<double>& grads = analytic[name];
    for (size_t i : coords) {
      ++rep.coords;
      const double a = grads[i];
      double best_rel = std::numeric_limits<double>::infinity();
      bool coord_ok = false, coord_unresolvable = false;
      for (double eps : kSteps) {
        const double keep = t.data()[i];
        t.data()[i] = keep + eps;
        const double up = loss_fn().at(0);
        t.data()[i] = keep - eps;
        const double down = loss_fn().at(0);
        t.data()[i] = keep;
        const double numeric = (up - down) / (2.0 * eps);
        if (std::abs(a) < kMinResolvable && std::abs(numeric) < kMinResolvable) {
          coord_unresolvable = true;
          break;
        }
        const double rel =
            std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
        best_rel = std::min(best_rel, rel);
        if (rel <= tol) {
          coord_ok = true;
          break;
        }
      }
      if (coord_unresolvable) {
        ++rep.unresolvable;
        continue;
      }
      rep.max_rel_err = std::max(rep.max_rel_err, best_rel);
      if (!coord_ok) rep.pass = false;
    }
    reports.push_back(std::move(rep));
  }
  return reports;
}

std::vector<std::pair<std::string, model::PromptFlags>> ablation_configurations() {
  return {
      {"bif", {true, false, false}},
      {"mid", {false, true, false}},
      {"skel", {false, false, true}},
      {"bif+mid", {true, true, false}},
      {"bif+skel", {true, false, true}},
      {"bif+mid+skel", {true, true, true}},
  };
}

std::vector<AblationRow> run_ablation(const AblationConfig& ac,
                                      const std::vector<Sample>& train_set,
                                      const std::vector<Sample>& test_set) {
  auto configs = ablation_configurations();
  std::vector<AblationRow> rows(configs.size());
  auto run_one = [&](size_t i) {
    model::VesSam m(ac.model);  // identical init seed across configurations
    train(m, train_set, configs[i].second, ac.epochs, ac.lr, ac.seed);
    EvalResult r = evaluate(m, test_set, configs[i].second);
    rows[i] = {configs[i].first, configs[i].second, r.mean_dice, r.mean_iou, r.n};
  };
  if (ac.parallel) {
    std::vector<std::thread> threads;
    threads.reserve(configs.size());
    for (size_t i = 0; i < configs.size(); ++i) threads.emplace_back(run_one, i);
    for (auto& t : threads) t.join();
  } else {
    for (size_t i = 0; i < configs.size(); ++i) run_one(i);
  }
  return rows;
}

std::string ablation_table_text(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << "configuration     dice     iou      n\n";
  out << "-------------------------------------\n";
  char line[128];
  for (const AblationRow& r : rows) {
    std::snprintf(line, sizeof(line), "%-15s %7.4f %7.4f %6d\n", r.name.c_str(),
                  r.mean_dice, r.mean_iou, r.n_test);
    out << line;
  }
  return out.str();
}

std::string ablation_table_json(const std::vector<AblationRow>& rows) {
  nlohmann::ordered_json doc = nlohmann::ordered_json::array();
  for (const AblationRow& r : rows) {
    nlohmann::ordered_json row;
    auto cfg = nlohmann::ordered_json::array();
    if (r.flags.use_bif) cfg.push_back("bif");
    if (r.flags.use_mid) cfg.push_back("mid");
    if (r.flags.use_skel) cfg.push_back("skel");
    row["config"] = std::move(cfg);
    row["dice"] = r.mean_dice;
    row["iou"] = r.mean_iou;
    row["n_test"] = r.n_test;
    doc.push_back(std::move(row));
  }
  return doc.dump() + "\n";
}

}  // namespace vessam::eval
