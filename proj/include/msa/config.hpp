#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "msa/ops.hpp"

namespace msa {

enum class MscmatMode { kStandard, kNoCls, kSelfAttention };
enum class AblationSetting { kBase, kBaseM, kBaseMAB, kFull };

const char* mscmat_mode_name(MscmatMode mode);
const char* ablation_setting_name(AblationSetting setting);
MscmatMode mscmat_mode_from(const std::string& name);
AblationSetting ablation_setting_from(const std::string& name);

struct LossConfig {
  double margin = 0.2;
  double tau_cl = 0.1;  // contrastive temperature
  double mu = 1.0;      // distillation temperature
  double alpha = 15.0;
  double beta = 10.0;
  NegativeStrategy negative_strategy = NegativeStrategy::kHardest;
  bool teacher_detached = true;
};

struct Dims {
  std::size_t n_scales = 4;
  std::size_t d = 64;        // shared embedding dimension
  std::size_t d0 = 16;       // stage 1 width; stage i has d0 * 2^(i-1) channels
  std::size_t p = 12;        // text length
  std::size_t vocab = 256;
  std::size_t heads = 8;
  std::size_t image_c = 3;
  std::size_t image_h = 16;
  std::size_t image_w = 16;

  std::size_t scale_dim(std::size_t scale) const;  // scale in [1, n_scales]
};

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t epochs = 30;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  std::uint64_t seed = 0;
  Dims dims;
  LossConfig loss;
  double tau_attn = 0.0;  // <= 0 means the sqrt(d/heads) default
  AblationSetting ablation = AblationSetting::kFull;
  std::vector<bool> scale_mask;  // empty means all scales aligned
  MscmatMode mscmat_mode = MscmatMode::kStandard;
  bool use_bias = true;
  std::size_t early_stop_patience = 10;  // 0 disables early stopping
  bool prefetch = false;

  double attn_temperature() const;
  std::vector<bool> effective_scale_mask() const;
  void validate() const;
};

struct SynthSpec {
  std::size_t pairs = 704;
  std::size_t n_scales = 4;
  std::size_t latent_k = 1;  // latent dimensions per scale
  std::size_t c = 3, h = 16, w = 16;
  std::size_t p = 12;
  std::size_t vocab = 256;
  double sigma = 0.25;
  std::uint64_t seed = 0;
  // 0 means "use the 70/10/20 split of `pairs`"
  std::size_t split_train = 0, split_val = 0, split_test = 0;

  struct VocabRange {
    std::size_t lo = 0, hi = 0;  // [lo, hi)
  };
  std::vector<VocabRange> scale_ranges() const;  // one per scale
  VocabRange filler_range() const;
  void resolve_splits(std::size_t& train, std::size_t& val, std::size_t& test) const;
  void validate() const;
};

// Flat UTF-8 "key = value" configuration text. Unknown keys are rejected by
// name; missing keys fall back to defaults unless fetched as required.
class ConfigMap {
 public:
  static ConfigMap parse(const std::string& text);
  static ConfigMap load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;
  const std::string& required(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;

  std::string serialize() const;
  const std::map<std::string, std::string>& entries() const { return entries_; }

 private:
  std::map<std::string, std::string> entries_;
};

TrainConfig train_config_from(const ConfigMap& map);
ConfigMap to_config_map(const TrainConfig& cfg);
SynthSpec synth_spec_from(const ConfigMap& map);
ConfigMap to_config_map(const SynthSpec& spec);

// Every key either config object understands; anything else is a typo.
const std::vector<std::string>& known_config_keys();

}  // namespace msa
