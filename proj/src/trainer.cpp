#include "uch/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "uch/errors.hpp"

namespace uch {

namespace {

constexpr std::uint64_t kShuffleStream = 0x9E3779B97F4A7C15ull;
constexpr std::size_t kEncodeChunk = 512;

struct PhaseGraph {
  Var objective;
  // Filled by generator phases for the training log.
  LossBreakdown partial;
};

Var fooling_loss(const Var& d_fake) { return adv_loss(d_fake, d_fake, AdvSide::generator); }

PhaseGraph build_phase(const BoundBundle& nets, Phase phase, const Batch& batch, const TrainConfig& config) {
  if (batch.images.rows() != batch.texts.rows())
    throw ContractError("batch: " + std::to_string(batch.images.rows()) + " images vs " + std::to_string(batch.texts.rows()) +
                        " texts");
  if (batch.images.rows() == 0) throw ContractError("batch: empty");
  Tape& tape = nets.tape();
  const LossWeights& w = config.weights;
  const Var f_image = encode_image(nets, tape.constant(batch.images));
  const Var f_text = encode_text(nets, tape.constant(batch.texts));
  PhaseGraph g;

  switch (phase) {
    case Phase::outer_discriminators: {
      const Var f_text_fake = gen_outer(nets, Direction::image_to_text, f_image).fake;
      const Var f_image_fake = gen_outer(nets, Direction::text_to_image, f_text).fake;
      g.objective = adv_loss(discriminate(nets, Critic::f_image, f_image), discriminate(nets, Critic::f_image, f_image_fake),
                             AdvSide::discriminator) +
                    adv_loss(discriminate(nets, Critic::f_text, f_text), discriminate(nets, Critic::f_text, f_text_fake),
                             AdvSide::discriminator);
      return g;
    }
    case Phase::outer_generators: {
      const auto i2t = gen_outer(nets, Direction::image_to_text, f_image);
      const auto t2i = gen_outer(nets, Direction::text_to_image, f_text);
      const Var f_image_rec = gen_outer(nets, Direction::text_to_image, i2t.fake).fake;
      const Var f_text_rec = gen_outer(nets, Direction::image_to_text, t2i.fake).fake;
      const Var rec = cycle_reconstruction_loss(f_image, f_image_rec, f_text, f_text_rec);
      const Var sim = similarity_loss(i2t.tap, t2i.tap);
      const Var adv_i = fooling_loss(discriminate(nets, Critic::f_image, t2i.fake));
      const Var adv_t = fooling_loss(discriminate(nets, Critic::f_text, i2t.fake));
      g.objective = scale(rec, w.rec) + scale(sim, w.sim_f);
      if (config.gen_adv) g.objective = g.objective + scale(adv_i + adv_t, w.adv);
      g.partial.adv_f_I = adv_i.scalar();
      g.partial.adv_f_T = adv_t.scalar();
      g.partial.rec_f = rec.scalar();
      g.partial.sim_f = sim.scalar();
      return g;
    }
    case Phase::inner_discriminators:
    case Phase::inner_generators: {
      const Var z_image = common_representation(nets, Direction::image_to_text, f_image);
      const Var z_text = common_representation(nets, Direction::text_to_image, f_text);
      const auto i2t = gen_inner(nets, Direction::image_to_text, z_image);
      const auto t2i = gen_inner(nets, Direction::text_to_image, z_text);
      if (phase == Phase::inner_discriminators) {
        g.objective = adv_loss(discriminate(nets, Critic::z_image, z_image), discriminate(nets, Critic::z_image, t2i.fake),
                               AdvSide::discriminator) +
                      adv_loss(discriminate(nets, Critic::z_text, z_text), discriminate(nets, Critic::z_text, i2t.fake),
                               AdvSide::discriminator);
        return g;
      }
      const Var z_image_rec = gen_inner(nets, Direction::text_to_image, i2t.fake).fake;
      const Var z_text_rec = gen_inner(nets, Direction::image_to_text, t2i.fake).fake;
      const Var rec = cycle_reconstruction_loss(z_image, z_image_rec, z_text, z_text_rec);
      const Var sim = similarity_loss(i2t.tap, t2i.tap);
      const Var adv_i = fooling_loss(discriminate(nets, Critic::z_image, t2i.fake));
      const Var adv_t = fooling_loss(discriminate(nets, Critic::z_text, i2t.fake));
      g.objective = scale(rec, w.rec) + scale(sim, w.sim_z);
      if (config.gen_adv) g.objective = g.objective + scale(adv_i + adv_t, w.adv);
      g.partial.adv_z_I = adv_i.scalar();
      g.partial.adv_z_T = adv_t.scalar();
      g.partial.rec_z = rec.scalar();
      g.partial.sim_z = sim.scalar();
      return g;
    }
  }
  throw ContractError("unknown phase");
}

void compose_totals(LossBreakdown& b, const LossWeights& w) {
  b.L_f = w.adv * (b.adv_f_I + b.adv_f_T) + w.rec * b.rec_f + w.sim_f * b.sim_f;
  b.L_z = w.adv * (b.adv_z_I + b.adv_z_T) + w.rec * b.rec_z + w.sim_z * b.sim_z;
  b.L_total = b.L_f + b.L_z;
}

double update_phase(TrainState& state, Phase phase, const Batch& batch, const TrainConfig& config, LossBreakdown* log_row) {
  Tape tape;
  const NetSet trainable = phase_nets(phase);
  BoundBundle nets(tape, state.bundle, trainable);
  PhaseGraph graph = build_phase(nets, phase, batch, config);
  const double objective = graph.objective.scalar();
  if (!std::isfinite(objective)) throw DivergenceError(state.iteration, phase_name(phase));
  if (log_row != nullptr) {
    if (phase == Phase::outer_generators) {
      log_row->adv_f_I = graph.partial.adv_f_I;
      log_row->adv_f_T = graph.partial.adv_f_T;
      log_row->rec_f = graph.partial.rec_f;
      log_row->sim_f = graph.partial.sim_f;
    } else if (phase == Phase::inner_generators) {
      log_row->adv_z_I = graph.partial.adv_z_I;
      log_row->adv_z_T = graph.partial.adv_z_T;
      log_row->rec_z = graph.partial.rec_z;
      log_row->sim_z = graph.partial.sim_z;
    }
  }

  const Gradients grads = tape.backward(graph.objective);
  const bool ascend = is_ascent(phase);
  for (NetId id : kAllNets) {
    const auto slot = static_cast<std::size_t>(id);
    if (!trainable.test(slot)) continue;
    Mlp& net = state.bundle.net(id);
    const auto& bound = nets.net(id).parameters();
    const double lr = learning_rate_for(id, config);
    for (std::size_t l = 0; l < net.layers().size(); ++l) {
      auto& layer = net.layers()[l];
      auto& velocity = state.velocity[slot][l];
      apply_update(layer.weight.value, grads.of(bound[l].first), velocity.first, lr, ascend, config);
      apply_update(layer.bias.value, grads.of(bound[l].second), velocity.second, lr, ascend, config);
      if (!layer.weight.value.all_finite() || !layer.bias.value.all_finite())
        throw DivergenceError(state.iteration, "parameters of " + net.name());
    }
  }
  return objective;
}

}  // namespace

void TrainConfig::validate() const {
  if (code_bits != 8 && code_bits != 16 && code_bits != 32 && code_bits != 64)
    throw ContractError("code length must be one of 8, 16, 32, 64 (got " + std::to_string(code_bits) + ")");
  if (batch_size < 2) throw ContractError("batch size must be at least 2");
  if (!(lr_image > 0) || !(lr_text > 0)) throw ContractError("learning rates must be positive");
  if (!(weight_decay >= 0)) throw ContractError("weight decay must be non-negative");
  if (!(momentum >= 0 && momentum < 1)) throw ContractError("momentum must lie in [0, 1)");
  if (text_embed_dim == 0) throw ContractError("text embedding width must be positive");
  if (!(weights.adv >= 0 && weights.rec >= 0 && weights.sim_f >= 0 && weights.sim_z >= 0)) throw ContractError("loss weights must be non-negative");
}

const char* phase_name(Phase phase) {
  switch (phase) {
    case Phase::outer_discriminators: return "outer_discriminators";
    case Phase::outer_generators: return "outer_generators";
    case Phase::inner_discriminators: return "inner_discriminators";
    case Phase::inner_generators: return "inner_generators";
  }
  return "?";
}

bool is_ascent(Phase phase) { return phase == Phase::outer_discriminators || phase == Phase::inner_discriminators; }

NetSet phase_nets(Phase phase) {
  switch (phase) {
    case Phase::outer_discriminators: return net_set({NetId::df_image, NetId::df_text});
    case Phase::outer_generators: return net_set({NetId::text_encoder, NetId::gf_i2t, NetId::gf_t2i});
    case Phase::inner_discriminators: return net_set({NetId::dz_image, NetId::dz_text});
    case Phase::inner_generators: return net_set({NetId::gz_i2t, NetId::gz_t2i});
  }
  return {};
}

double learning_rate_for(NetId id, const TrainConfig& config) {
  switch (id) {
    case NetId::gf_t2i:
    case NetId::df_image:
    case NetId::gz_t2i:
    case NetId::dz_image:
      return config.lr_image;
    default:
      return config.lr_text;
  }
}

TrainState TrainState::initialize(NetworkBundle bundle, const TrainConfig& config) {
  TrainState state;
  state.bundle = std::move(bundle);
  for (NetId id : kAllNets) {
    auto& slots = state.velocity[static_cast<std::size_t>(id)];
    for (const auto& layer : state.bundle.net(id).layers())
      slots.emplace_back(Matrix(layer.weight.value.rows(), layer.weight.value.cols()),
                         Matrix(layer.bias.value.rows(), layer.bias.value.cols()));
  }
  state.rng = Rng(config.seed ^ kShuffleStream);
  return state;
}

void apply_update(Matrix& param, const Matrix& grad, Matrix& velocity, double lr, bool ascend, const TrainConfig& config) {
  if (!param.same_shape(grad) || !param.same_shape(velocity)) throw ShapeError("apply_update: parameter/gradient shape mismatch");
  const double shrink = 1.0 - lr * config.weight_decay;
  const double sign = ascend ? -1.0 : 1.0;
  const bool use_momentum = config.optimizer == OptimizerKind::sgd_momentum;
  auto p = param.values();
  auto g = grad.values();
  auto v = velocity.values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    double step = sign * g[i];
    if (use_momentum) {
      v[i] = config.momentum * v[i] + step;
      step = v[i];
    }
    p[i] = p[i] * shrink - lr * step;
  }
}

double phase_objective(const NetworkBundle& bundle, Phase phase, const Batch& batch, const TrainConfig& config) {
  Tape tape;
  BoundBundle nets(tape, bundle);
  return build_phase(nets, phase, batch, config).objective.scalar();
}

double run_phase(TrainState& state, Phase phase, const Batch& batch, const TrainConfig& config) {
  return update_phase(state, phase, batch, config, nullptr);
}

LossBreakdown train_step(TrainState& state, const Batch& batch, const TrainConfig& config, const PhaseObserver& observer) {
  LossBreakdown row;
  for (Phase phase : kPhaseOrder) {
    if (observer) observer(phase);
    update_phase(state, phase, batch, config, &row);
  }
  compose_totals(row, config.weights);
  if (const std::string bad = row.first_non_finite(); !bad.empty()) throw DivergenceError(state.iteration, bad);
  ++state.iteration;
  return row;
}

BundleDims dims_for(const PairedDataset& dataset, const TrainConfig& config) {
  return BundleDims{.image_dim = dataset.images.cols(),
                    .text_dim = dataset.texts.cols(),
                    .text_embed_dim = config.text_embed_dim,
                    .code_bits = config.code_bits};
}

FitResult fit(const PairedDataset& dataset, const TrainConfig& config, const StepCallback& on_step) {
  config.validate();
  if (dataset.size() == 0) throw ContractError("fit: empty dataset");
  if (dataset.images.rows() != dataset.texts.rows()) throw IngestionError("fit: image and text item counts differ");

  TrainState state = TrainState::initialize(NetworkBundle::create(dims_for(dataset, config), config.seed), config);
  const std::size_t n = dataset.size();
  const std::size_t batch_size = std::min(config.batch_size, n);
  state.order.resize(n);
  std::iota(state.order.begin(), state.order.end(), std::size_t{0});
  state.cursor = n;  // forces a shuffle before the first batch

  std::vector<std::size_t> rows(batch_size);
  while (state.iteration < config.max_iterations) {
    if (state.cursor + batch_size > n) {
      state.rng.shuffle(std::span<std::size_t>(state.order));
      state.cursor = 0;
    }
    std::copy_n(state.order.begin() + std::ptrdiff_t(state.cursor), batch_size, rows.begin());
    state.cursor += batch_size;
    const Batch batch{dataset.images.gather_rows(rows), dataset.texts.gather_rows(rows)};
    const std::size_t iteration = state.iteration;
    LossBreakdown row = train_step(state, batch, config);
    state.log.push_back(row);
    if (on_step) on_step(iteration, row);
  }
  return FitResult{std::move(state.bundle), std::move(state.log)};
}

Matrix hash_layer_outputs(const NetworkBundle& bundle, CodeSource source, const Matrix& images, const Matrix& texts) {
  const bool need_images = source != CodeSource::text_only;
  const bool need_texts = source != CodeSource::image_only;
  if (need_images && images.cols() != bundle.dims().image_dim)
    throw ShapeError("extract_codes: image features " + shape_string(images) + " do not match width " +
                     std::to_string(bundle.dims().image_dim));
  if (need_texts && texts.cols() != bundle.dims().text_dim)
    throw ShapeError("extract_codes: text features " + shape_string(texts) + " do not match width " +
                     std::to_string(bundle.dims().text_dim));
  if (need_images && need_texts && images.rows() != texts.rows())
    throw ShapeError("extract_codes: paired inputs have " + std::to_string(images.rows()) + " and " +
                     std::to_string(texts.rows()) + " items");

  const std::size_t n = need_images ? images.rows() : texts.rows();
  Matrix h(n, bundle.dims().code_bits);
  std::vector<std::size_t> rows;
  for (std::size_t begin = 0; begin < n; begin += kEncodeChunk) {
    const std::size_t end = std::min(n, begin + kEncodeChunk);
    rows.resize(end - begin);
    std::iota(rows.begin(), rows.end(), begin);
    Tape tape;
    BoundBundle nets(tape, bundle);
    std::optional<Matrix> chunk;
    if (need_images) {
      const Var z = common_representation(nets, Direction::image_to_text, encode_image(nets, tape.constant(images.gather_rows(rows))));
      chunk = gen_inner(nets, Direction::image_to_text, z).tap.value();
    }
    if (need_texts) {
      const Var z = common_representation(nets, Direction::text_to_image, encode_text(nets, tape.constant(texts.gather_rows(rows))));
      const Matrix& ht = gen_inner(nets, Direction::text_to_image, z).tap.value();
      if (chunk) {
        auto dst = chunk->values();
        auto src = ht.values();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      } else {
        chunk = ht;
      }
    }
    for (std::size_t r = begin; r < end; ++r) std::copy_n(chunk->row(r - begin).begin(), h.cols(), h.row(r).begin());
  }
  return h;
}

CodeMatrix extract_codes(const NetworkBundle& bundle, CodeSource source, const Matrix& images, const Matrix& texts) {
  return CodeMatrix::from_signs(hash_layer_outputs(bundle, source, images, texts));
}

}  // namespace uch
