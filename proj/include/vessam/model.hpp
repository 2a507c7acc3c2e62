#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "vessam/autodiff.hpp"
#include "vessam/raster.hpp"
#include "vessam/rng.hpp"
#include "vessam/topology.hpp"

namespace vessam::model {

struct ModelConfig {
  int image_size = 64;
  int patch_size = 8;
  int embed_dim = 64;
  int vit_depth = 2;
  int heads = 4;
  int adapter_reduction = 4;
  int gcn_layers = 2;
  int decoder_upsample_stages = 3;
  uint64_t seed = 0;

  int grid_side() const { return image_size / patch_size; }
  int token_count() const { return grid_side() * grid_side(); }

  void validate() const;  // raises BadConfig
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);

  friend bool operator==(const ModelConfig& a, const ModelConfig& b) {
    return a.image_size == b.image_size && a.patch_size == b.patch_size &&
           a.embed_dim == b.embed_dim && a.vit_depth == b.vit_depth &&
           a.heads == b.heads && a.adapter_reduction == b.adapter_reduction &&
           a.gcn_layers == b.gcn_layers &&
           a.decoder_upsample_stages == b.decoder_upsample_stages &&
           a.seed == b.seed;
  }
};

// Named parameter set with deterministic seeded init (uniform +-1/sqrt(fan_in)).
// Frozen parameters never require grad.
class ParamStore {
 public:
  explicit ParamStore(uint64_t seed) : rng_(seed) {}

  ad::Tensor& create(const std::string& name, ad::Shape shape, size_t fan_in,
                     bool frozen = false);
  ad::Tensor& create_const(const std::string& name, ad::Shape shape,
                           double value, bool frozen = false);
  ad::Tensor& get(const std::string& name);
  const ad::Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const { return map_.count(name) > 0; }
  const std::vector<std::string>& names() const { return order_; }

  std::vector<std::pair<std::string, ad::Tensor>> entries() const;
  // Copies values by name; shapes must match exactly.
  void load_values(const std::vector<std::pair<std::string, ad::Tensor>>& loaded);

 private:
  SplitMix64 rng_;
  std::vector<std::string> order_;
  std::unordered_map<std::string, ad::Tensor> map_;
};

struct PromptFlags {
  bool use_bif = true;
  bool use_mid = true;
  bool use_skel = true;
};

// The three prompt streams and their fused counterparts.
struct FeatureSet {
  ad::Tensor sf;  // [N_s x d]
  ad::Tensor df;  // [N_d x d]
  ad::Tensor gf;  // [N_g x d]
  ad::Tensor sf_fused;   // SF'
  ad::Tensor df_stage1;  // DF'
  ad::Tensor df_fused;   // DF''
  ad::Tensor gf_fused;   // GF'
};

// Optional capture of attention matrices (one entry per head per block).
struct AttnTrace {
  std::vector<ad::Tensor> mats;
};

class VesSam {
 public:
  explicit VesSam(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // Frozen patch-embed + pre-norm transformer stub. image: [1,H,W].
  ad::Tensor vit_stub_forward(const ad::Tensor& image, AttnTrace* trace = nullptr) const;

  // Residual channel/spatial attention adapter; exact identity at init.
  ad::Tensor adapter_forward(const ad::Tensor& tokens) const;

  ad::Tensor encode_sparse(const std::vector<Point>& bifurcations,
                           const std::vector<Midpoint>& midpoints) const;
  ad::Tensor encode_dense(const BinaryMask& skeleton, const BinaryMask& mask_prior) const;
  ad::Tensor encode_graph(const VesselGraph& graph) const;

  // Bidirectional cross attention; returns (updated_q, updated_kv).
  std::pair<ad::Tensor, ad::Tensor> cross_attention(const ad::Tensor& q_seq,
                                                    const ad::Tensor& kv_seq,
                                                    const std::string& prefix,
                                                    AttnTrace* trace = nullptr) const;

  // Two-stage fusion; stage 1 is skipped when SF is empty.
  FeatureSet fuse_prompts(FeatureSet fs, AttnTrace* trace = nullptr) const;

  // Token/prompt fusion blocks + conv upsampling head. Returns [H x W] logits.
  ad::Tensor decode(const ad::Tensor& image_tokens, const FeatureSet& fs,
                    AttnTrace* trace = nullptr) const;

  ad::Tensor forward(const ad::Tensor& image, const PromptSet& ps,
                     const VesselGraph& graph, PromptFlags flags,
                     AttnTrace* trace = nullptr) const;

  void save(const std::string& checkpoint_path, const std::string& config_path) const;
  static VesSam load(const std::string& checkpoint_path, const std::string& config_path);

 private:
  ModelConfig config_;
  ParamStore params_;
  ad::Tensor patchify_kernel_;  // constant identity kernel, not a parameter

  ad::Tensor mha(const ad::Tensor& q, const ad::Tensor& kv,
                 const std::string& prefix, AttnTrace* trace) const;
  ad::Tensor transformer_block(const ad::Tensor& x, const std::string& prefix,
                               AttnTrace* trace) const;
  ad::Tensor dense_encoder(const ad::Tensor& map, const std::string& prefix) const;
};

// [1 x H x W] float tensor from a binary mask (foreground 1.0).
ad::Tensor mask_to_tensor(const BinaryMask& mask);

// Restriction to the enabled node kinds with edges reindexed; nullopt when no
// node survives.
std::optional<VesselGraph> restrict_graph(const VesselGraph& g, PromptFlags flags);

}  // namespace vessam::model
