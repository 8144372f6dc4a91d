#include "uch/networks.hpp"

#include <cmath>
#include <fstream>
#include <map>

#include "uch/binary_io.hpp"
#include "uch/errors.hpp"

namespace uch {

namespace {

constexpr std::string_view kCheckpointMagic = "UCHCKPT1";

std::string width_string(const std::vector<std::size_t>& widths) {
  std::string s;
  for (std::size_t i = 0; i < widths.size(); ++i) s += (i ? "->" : "") + std::to_string(widths[i]);
  return s;
}

void require_width(const char* what, const Var& x, std::size_t expected) {
  if (x.cols() != expected)
    throw ShapeError(std::string(what) + ": expected width " + std::to_string(expected) + ", got " + shape_string(x.value()));
}

}  // namespace

Var apply_activation(Activation act, const Var& x) {
  switch (act) {
    case Activation::identity: return x;
    case Activation::relu: return relu(x);
    case Activation::tanh: return tanh(x);
    case Activation::sigmoid: return sigmoid(x);
  }
  return x;
}

void MlpSpec::validate() const {
  if (widths.size() < 2) throw ContractError("MlpSpec: at least two widths are required");
  for (std::size_t w : widths)
    if (w == 0) throw ContractError("MlpSpec: zero width in " + width_string(widths));
  if (tap && (*tap == 0 || *tap + 1 >= widths.size()))
    throw ContractError("MlpSpec: tap index " + std::to_string(*tap) + " is not a hidden layer of " + width_string(widths));
}

// ---------------------------------------------------------------------------
// Mlp

Mlp::Mlp(std::string name, MlpSpec spec) : name_(std::move(name)), spec_(std::move(spec)) {
  spec_.validate();
  for (std::size_t l = 0; l + 1 < spec_.widths.size(); ++l) {
    const std::string prefix = name_ + "." + std::to_string(l) + ".";
    layers_.push_back(DenseLayer{{prefix + "weight", Matrix(spec_.widths[l], spec_.widths[l + 1])},
                                 {prefix + "bias", Matrix(1, spec_.widths[l + 1])}});
  }
}

void Mlp::initialize(Rng& rng) {
  for (auto& layer : layers_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(layer.weight.value.rows()));
    for (double& w : layer.weight.value.values()) w = static_cast<float>(rng.uniform(-bound, bound));
    for (double& b : layer.bias.value.values()) b = 0.0;
  }
}

Activation Mlp::activation_after(std::size_t layer) const {
  const std::size_t width_index = layer + 1;
  if (width_index + 1 == spec_.widths.size()) return spec_.output;
  if (spec_.tap && *spec_.tap == width_index && spec_.tap_activation) return *spec_.tap_activation;
  return spec_.hidden;
}

BoundMlp::BoundMlp(Tape& tape, const Mlp& net, bool trainable) : net_(&net), trainable_(trainable) {
  params_.reserve(net.layers().size());
  for (const auto& layer : net.layers()) {
    if (trainable)
      params_.emplace_back(tape.variable(layer.weight.value), tape.variable(layer.bias.value));
    else
      params_.emplace_back(tape.constant(layer.weight.value), tape.constant(layer.bias.value));
  }
}

namespace {
void check_input(const Mlp& net, const Var& input) {
  if (input.cols() != net.input_width())
    throw ShapeError(net.name() + ": input " + shape_string(input.value()) + " does not match first layer width " +
                     std::to_string(net.input_width()));
}
}  // namespace

MlpOutput BoundMlp::forward(const Var& input) const {
  check_input(*net_, input);
  MlpOutput result;
  Var h = input;
  for (std::size_t l = 0; l < params_.size(); ++l) {
    h = apply_activation(net_->activation_after(l), add_row(matmul(h, params_[l].first), params_[l].second));
    if (net_->spec().tap && *net_->spec().tap == l + 1) result.tap = h;
  }
  result.out = h;
  return result;
}

Var BoundMlp::forward_to_tap(const Var& input) const {
  if (!net_->spec().tap) throw ContractError(net_->name() + " has no tap layer");
  check_input(*net_, input);
  Var h = input;
  for (std::size_t l = 0; l < *net_->spec().tap; ++l)
    h = apply_activation(net_->activation_after(l), add_row(matmul(h, params_[l].first), params_[l].second));
  return h;
}

// ---------------------------------------------------------------------------
// Bundle

void BundleDims::validate() const {
  if (image_dim == 0 || text_dim == 0 || text_embed_dim == 0) throw ContractError("BundleDims: feature widths must be positive");
  if (code_bits == 0 || code_bits > 128) throw ContractError("BundleDims: code length must be in [1, 128]");
}

BundleDims full_scale_dims(std::size_t vocabulary, std::size_t code_bits) {
  return BundleDims{.image_dim = 4096, .text_dim = vocabulary, .text_embed_dim = 300, .code_bits = code_bits};
}

const char* net_name(NetId id) {
  switch (id) {
    case NetId::text_encoder: return "text_encoder";
    case NetId::gf_i2t: return "gf_i2t";
    case NetId::gf_t2i: return "gf_t2i";
    case NetId::df_image: return "df_image";
    case NetId::df_text: return "df_text";
    case NetId::gz_i2t: return "gz_i2t";
    case NetId::gz_t2i: return "gz_t2i";
    case NetId::dz_image: return "dz_image";
    case NetId::dz_text: return "dz_text";
  }
  return "?";
}

MlpSpec net_spec(NetId id, const BundleDims& d) {
  const std::size_t z = kCommonWidth;
  MlpSpec s;
  switch (id) {
    case NetId::text_encoder:
      s.widths = {d.text_dim, d.text_embed_dim};
      return s;
    case NetId::gf_i2t:
      s.widths = {d.image_dim, 512, z, 512, d.text_embed_dim};
      s.tap = 2;
      return s;
    case NetId::gf_t2i:
      s.widths = {d.text_embed_dim, 512, z, 512, d.image_dim};
      s.tap = 2;
      return s;
    case NetId::df_image:
      s.widths = {d.image_dim, 256, 32, 1};
      s.output = Activation::sigmoid;
      return s;
    case NetId::df_text:
      s.widths = {d.text_embed_dim, 256, 32, 1};
      s.output = Activation::sigmoid;
      return s;
    case NetId::gz_i2t:
    case NetId::gz_t2i:
      s.widths = {z, 128, d.code_bits, 128, z};
      s.tap = 2;
      s.tap_activation = Activation::tanh;
      return s;
    case NetId::dz_image:
    case NetId::dz_text:
      s.widths = {z, 128, 32, 1};
      s.output = Activation::sigmoid;
      return s;
  }
  throw ContractError("unknown network id");
}

NetSet net_set(std::initializer_list<NetId> ids) {
  NetSet s;
  for (NetId id : ids) s.set(static_cast<std::size_t>(id));
  return s;
}

NetworkBundle NetworkBundle::create(const BundleDims& dims, std::uint64_t seed) {
  dims.validate();
  NetworkBundle bundle;
  bundle.dims_ = dims;
  Rng rng(seed);
  for (NetId id : kAllNets) {
    Mlp& net = bundle.net(id);
    net = Mlp(net_name(id), net_spec(id, dims));
    net.initialize(rng);
  }
  return bundle;
}

bool NetworkBundle::all_finite() const {
  for (const auto& net : nets_)
    for (const auto& layer : net.layers())
      if (!layer.weight.value.all_finite() || !layer.bias.value.all_finite()) return false;
  return true;
}

bool NetworkBundle::operator==(const NetworkBundle& other) const {
  if (!(dims_ == other.dims_)) return false;
  for (std::size_t i = 0; i < kNetCount; ++i) {
    const auto& a = nets_[i].layers();
    const auto& b = other.nets_[i].layers();
    if (a.size() != b.size()) return false;
    for (std::size_t l = 0; l < a.size(); ++l)
      if (a[l].weight.value != b[l].weight.value || a[l].bias.value != b[l].bias.value) return false;
  }
  return true;
}

BoundBundle::BoundBundle(Tape& tape, const NetworkBundle& bundle, NetSet trainable)
    : tape_(&tape), bundle_(&bundle), trainable_(trainable) {}

const BoundMlp& BoundBundle::net(NetId id) const {
  auto& slot = bound_[static_cast<std::size_t>(id)];
  if (!slot) slot.emplace(*tape_, bundle_->net(id), trainable_.test(static_cast<std::size_t>(id)));
  return *slot;
}

// ---------------------------------------------------------------------------
// Forward passes

Var encode_image(const BoundBundle& nets, const Var& images) {
  require_width("encode_image", images, nets.dims().image_dim);
  return images;
}

Var encode_text(const BoundBundle& nets, const Var& texts) {
  require_width("encode_text", texts, nets.dims().text_dim);
  return nets.net(NetId::text_encoder).forward(texts).out;
}

Generated gen_outer(const BoundBundle& nets, Direction direction, const Var& features) {
  const bool i2t = direction == Direction::image_to_text;
  require_width("gen_outer", features, i2t ? nets.dims().image_dim : nets.dims().text_embed_dim);
  auto out = nets.net(i2t ? NetId::gf_i2t : NetId::gf_t2i).forward(features);
  return {out.out, *out.tap};
}

Var common_representation(const BoundBundle& nets, Direction direction, const Var& features) {
  const bool i2t = direction == Direction::image_to_text;
  require_width("common_representation", features, i2t ? nets.dims().image_dim : nets.dims().text_embed_dim);
  return nets.net(i2t ? NetId::gf_i2t : NetId::gf_t2i).forward_to_tap(features);
}

Generated gen_inner(const BoundBundle& nets, Direction direction, const Var& common) {
  require_width("gen_inner", common, kCommonWidth);
  auto out = nets.net(direction == Direction::image_to_text ? NetId::gz_i2t : NetId::gz_t2i).forward(common);
  return {out.out, *out.tap};
}

Var discriminate(const BoundBundle& nets, Critic critic, const Var& x) {
  NetId id = NetId::df_image;
  switch (critic) {
    case Critic::f_image: id = NetId::df_image; break;
    case Critic::f_text: id = NetId::df_text; break;
    case Critic::z_image: id = NetId::dz_image; break;
    case Critic::z_text: id = NetId::dz_text; break;
  }
  return clamp(nets.net(id).forward(x).out, kProbabilityEpsilon, 1.0 - kProbabilityEpsilon);
}

// ---------------------------------------------------------------------------
// Checkpoints

void write_checkpoint(std::ostream& os, const NetworkBundle& bundle) {
  io::write_magic(os, kCheckpointMagic);
  auto write_tensor = [&os](const Parameter& p) {
    io::write_u32_checked(os, p.name.size(), "tensor name length");
    os.write(p.name.data(), std::streamsize(p.name.size()));
    io::write_u32_checked(os, p.value.rows(), "tensor rows");
    io::write_u32_checked(os, p.value.cols(), "tensor cols");
    for (double v : p.value.values()) io::write_f32(os, static_cast<float>(v));
  };
  for (NetId id : kAllNets)
    for (const auto& layer : bundle.net(id).layers()) {
      write_tensor(layer.weight);
      write_tensor(layer.bias);
    }
  if (!os) throw FormatError("checkpoint write failed");
}

NetworkBundle read_checkpoint(std::istream& is) {
  io::expect_magic(is, kCheckpointMagic, "checkpoint");
  std::map<std::string, Matrix> tensors;
  while (is.peek() != std::char_traits<char>::eof()) {
    const auto name_len = io::read_le<std::uint32_t>(is, "tensor name length");
    if (name_len > 4096) throw FormatError("checkpoint: implausible tensor name length");
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw FormatError("truncated input while reading tensor name");
    const auto rows = io::read_le<std::uint32_t>(is, "tensor rows");
    const auto cols = io::read_le<std::uint32_t>(is, "tensor cols");
    Matrix m(rows, cols);
    for (double& v : m.values()) v = io::read_f32(is, name);
    if (!tensors.emplace(name, std::move(m)).second) throw FormatError("checkpoint: duplicate tensor '" + name + "'");
  }

  auto shape_of = [&](const std::string& name) -> const Matrix& {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw FormatError("checkpoint: missing tensor '" + name + "'");
    return it->second;
  };
  BundleDims dims;
  dims.text_dim = shape_of("text_encoder.0.weight").rows();
  dims.text_embed_dim = shape_of("text_encoder.0.weight").cols();
  dims.image_dim = shape_of("gf_i2t.0.weight").rows();
  dims.code_bits = shape_of("gz_i2t.1.weight").cols();

  NetworkBundle bundle = NetworkBundle::create(dims, 0);
  std::size_t consumed = 0;
  for (NetId id : kAllNets)
    for (auto& layer : bundle.net(id).layers())
      for (Parameter* p : {&layer.weight, &layer.bias}) {
        const Matrix& stored = shape_of(p->name);
        if (!stored.same_shape(p->value))
          throw FormatError("checkpoint: tensor '" + p->name + "' has shape " + shape_string(stored) + ", expected " +
                            shape_string(p->value));
        p->value = stored;
        ++consumed;
      }
  if (consumed != tensors.size()) throw FormatError("checkpoint: unexpected extra tensors");
  return bundle;
}

void save_checkpoint(const std::filesystem::path& path, const NetworkBundle& bundle) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_checkpoint(os, bundle);
}

NetworkBundle load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  return read_checkpoint(is);
}

}  // namespace uch
