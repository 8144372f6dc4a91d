#pragma once

// The nine fully-connected networks of the hashing model:
//
//   text_encoder            bag-of-words -> text features F^T
//   gf_i2t / gf_t2i         outer generators, F -> F_fake, tapping the 256-wide common representation Z
//   df_image / df_text      outer discriminators on features
//   gz_i2t / gz_t2i         inner generators, Z -> Z_fake, tapping the K-wide hashing layer H
//   dz_image / dz_text      inner discriminators on common representations
//
// Image features are precomputed and pass through unchanged.

#include <array>
#include <bitset>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "uch/ndcore.hpp"
#include "uch/random.hpp"

namespace uch {

enum class Activation { identity, relu, tanh, sigmoid };

Var apply_activation(Activation act, const Var& x);

struct MlpSpec {
  std::vector<std::size_t> widths;
  Activation hidden = Activation::relu;
  Activation output = Activation::identity;
  // Index into `widths` of a hidden activation exported alongside the output.
  std::optional<std::size_t> tap;
  // Overrides `hidden` for the tapped layer.
  std::optional<Activation> tap_activation;

  void validate() const;
};

struct Parameter {
  std::string name;
  Matrix value;
};

// y = x·W + b with W stored fan_in × fan_out.
struct DenseLayer {
  Parameter weight;
  Parameter bias;
};

class Mlp {
 public:
  Mlp() = default;
  Mlp(std::string name, MlpSpec spec);

  // Weights ~ U(-1/√fan_in, 1/√fan_in) rounded to float precision; biases zero.
  void initialize(Rng& rng);

  const std::string& name() const noexcept { return name_; }
  const MlpSpec& spec() const noexcept { return spec_; }
  std::size_t input_width() const { return spec_.widths.front(); }
  std::size_t output_width() const { return spec_.widths.back(); }
  Activation activation_after(std::size_t layer) const;

  std::vector<DenseLayer>& layers() noexcept { return layers_; }
  const std::vector<DenseLayer>& layers() const noexcept { return layers_; }

 private:
  std::string name_;
  MlpSpec spec_;
  std::vector<DenseLayer> layers_;
};

struct MlpOutput {
  Var out;
  std::optional<Var> tap;
};

// An Mlp whose parameters have been placed on a tape.
class BoundMlp {
 public:
  BoundMlp(Tape& tape, const Mlp& net, bool trainable);

  MlpOutput forward(const Var& input) const;
  // Runs only the layers up to and including the tap.
  Var forward_to_tap(const Var& input) const;

  const Mlp& net() const noexcept { return *net_; }
  bool trainable() const noexcept { return trainable_; }
  // Per layer: {weight, bias}.
  const std::vector<std::pair<Var, Var>>& parameters() const noexcept { return params_; }

 private:
  const Mlp* net_;
  bool trainable_;
  std::vector<std::pair<Var, Var>> params_;
};

inline constexpr std::size_t kCommonWidth = 256;
inline constexpr double kProbabilityEpsilon = 1e-7;

struct BundleDims {
  std::size_t image_dim = 4096;
  std::size_t text_dim = 1386;  // vocabulary size of the raw text input
  std::size_t text_embed_dim = 300;
  std::size_t code_bits = 16;

  void validate() const;
  bool operator==(const BundleDims&) const = default;
};

// 4096-d CNN features, 300-d text embedding.
BundleDims full_scale_dims(std::size_t vocabulary, std::size_t code_bits);

enum class NetId : std::size_t { text_encoder, gf_i2t, gf_t2i, df_image, df_text, gz_i2t, gz_t2i, dz_image, dz_text };
inline constexpr std::size_t kNetCount = 9;
inline constexpr std::array<NetId, kNetCount> kAllNets = {NetId::text_encoder, NetId::gf_i2t,   NetId::gf_t2i,
                                                          NetId::df_image,     NetId::df_text,  NetId::gz_i2t,
                                                          NetId::gz_t2i,       NetId::dz_image, NetId::dz_text};

const char* net_name(NetId id);
MlpSpec net_spec(NetId id, const BundleDims& dims);

using NetSet = std::bitset<kNetCount>;
NetSet net_set(std::initializer_list<NetId> ids);

class NetworkBundle {
 public:
  NetworkBundle() = default;
  static NetworkBundle create(const BundleDims& dims, std::uint64_t seed);

  const BundleDims& dims() const noexcept { return dims_; }
  Mlp& net(NetId id) { return nets_[static_cast<std::size_t>(id)]; }
  const Mlp& net(NetId id) const { return nets_[static_cast<std::size_t>(id)]; }

  bool all_finite() const;
  bool operator==(const NetworkBundle& other) const;

 private:
  BundleDims dims_;
  std::array<Mlp, kNetCount> nets_;
};

// A bundle placed on a tape. Networks are bound on first use; those in `trainable` become
// gradient-tracked leaves, the rest constants.
class BoundBundle {
 public:
  BoundBundle(Tape& tape, const NetworkBundle& bundle, NetSet trainable = {});

  const BoundMlp& net(NetId id) const;
  Tape& tape() const noexcept { return *tape_; }
  const BundleDims& dims() const noexcept { return bundle_->dims(); }

 private:
  Tape* tape_;
  const NetworkBundle* bundle_;
  NetSet trainable_;
  mutable std::array<std::optional<BoundMlp>, kNetCount> bound_;
};

enum class Direction { image_to_text, text_to_image };
enum class Critic { f_image, f_text, z_image, z_text };

struct Generated {
  Var fake;
  Var tap;
};

Var encode_image(const BoundBundle& nets, const Var& images);
Var encode_text(const BoundBundle& nets, const Var& texts);
// Outer generator: tap is the common representation Z.
Generated gen_outer(const BoundBundle& nets, Direction direction, const Var& features);
// Z only, without evaluating the generator's remaining layers.
Var common_representation(const BoundBundle& nets, Direction direction, const Var& features);
// Inner generator: tap is the continuous hash layer H.
Generated gen_inner(const BoundBundle& nets, Direction direction, const Var& common);
// Probabilities clamped to [ε, 1-ε].
Var discriminate(const BoundBundle& nets, Critic critic, const Var& x);

// Checkpoint container: "UCHCKPT1", then per tensor
//   u32 name length, name bytes, u32 rows, u32 cols, rows*cols f32, all little-endian.
void write_checkpoint(std::ostream& os, const NetworkBundle& bundle);
NetworkBundle read_checkpoint(std::istream& is);
void save_checkpoint(const std::filesystem::path& path, const NetworkBundle& bundle);
NetworkBundle load_checkpoint(const std::filesystem::path& path);

}  // namespace uch
