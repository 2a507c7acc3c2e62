#pragma once

#include <string>
#include <vector>

#include "vessam/model.hpp"
#include "vessam/synthgen.hpp"

namespace vessam::eval {

// Overlap metrics on hard masks. Both-empty scores 1.0.
double dice(const BinaryMask& pred, const BinaryMask& gt);
double iou(const BinaryMask& pred, const BinaryMask& gt);

// BCE(sigmoid(logits), gt) + (1 - softDice), soft Dice smoothed with eps=1.
ad::Tensor dice_bce_loss(const ad::Tensor& logits, const BinaryMask& gt);

// Hard mask at probability 0.5 (logit > 0).
BinaryMask predict_mask(const ad::Tensor& logits);

struct Sample {
  ad::Tensor image;  // [1 x H x W]
  BinaryMask mask;
  PromptSet prompts;
  VesselGraph graph;
};

// Noisy low-contrast rendering of a mask; the noise stream is derived from
// the mask content so datasets rebuild identically from disk.
ad::Tensor render_image(const BinaryMask& mask);

Sample make_sample(const BinaryMask& mask);

// Items are generated from seeds derived as (seed, index_base + i).
std::vector<Sample> make_synthetic_dataset(int count, uint64_t seed, int image_size,
                                           int index_base = 0);

struct TrainResult {
  std::vector<double> epoch_loss;  // mean per epoch, recorded in order
  size_t steps = 0;
};

// Adam (beta1 0.9, beta2 0.999, eps 1e-8) over all non-frozen parameters,
// one sample per step, seeded shuffle per epoch. Raises EmptyDataset /
// DivergedLoss (model state is left as of the failing step).
TrainResult train(model::VesSam& m, const std::vector<Sample>& dataset,
                  model::PromptFlags flags, int epochs, double lr, uint64_t seed,
                  int max_steps = 0);

struct EvalResult {
  double mean_dice = 0.0;
  double mean_iou = 0.0;
  int n = 0;
};

EvalResult evaluate(const model::VesSam& m, const std::vector<Sample>& dataset,
                    model::PromptFlags flags);

struct ParamGradReport {
  std::string name;
  bool pass = false;
  double max_rel_err = 0.0;
  size_t coords = 0;
  size_t unresolvable = 0;
};

// Central-difference validation of the full forward + dice/bce loss against
// the tape's gradients, sampled coordinates per trainable parameter. One
// backward supplies every analytic gradient; each coordinate is then checked
// at several steps because no fixed step serves all of them (large steps
// straddle relu kinks, small steps lose tiny gradients to f64 roundoff). A
// coordinate passes when some step agrees within tol; coordinates whose
// analytic and numeric derivatives both stay under 1e-9 are recorded as
// unresolvable rather than scored. Parameters are first jittered to a
// generic point (zero-initialized biases sit exactly on the relu kink).
std::vector<ParamGradReport> full_model_grad_check(model::VesSam& m, const Sample& s,
                                                   model::PromptFlags flags,
                                                   int per_param, uint64_t seed,
                                                   double tol = 1e-4);

struct AblationConfig {
  model::ModelConfig model;
  uint64_t seed = 42;
  int epochs = 30;
  double lr = 1e-3;
  bool parallel = true;
};

struct AblationRow {
  std::string name;
  model::PromptFlags flags;
  double mean_dice = 0.0;
  double mean_iou = 0.0;
  int n_test = 0;
};

// The paper's six prompt combinations, in this order.
std::vector<std::pair<std::string, model::PromptFlags>> ablation_configurations();

// One model per configuration from the same initialization seed, identical
// shuffle schedule, evaluated on the held-out split.
std::vector<AblationRow> run_ablation(const AblationConfig& ac,
                                      const std::vector<Sample>& train_set,
                                      const std::vector<Sample>& test_set);

std::string ablation_table_text(const std::vector<AblationRow>& rows);
std::string ablation_table_json(const std::vector<AblationRow>& rows);

}  // namespace vessam::eval
