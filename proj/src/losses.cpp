#include "uch/losses.hpp"

#include <cmath>
#include <cstdio>

#include "uch/errors.hpp"

namespace uch {

Var adv_loss(const Var& d_real, const Var& d_fake, AdvSide side) {
  if (d_fake.value().empty() || (side == AdvSide::discriminator && d_real.value().empty()))
    throw ContractError("adv_loss: empty probability batch");
  if (side == AdvSide::generator) return scale(reduce_mean(log(d_fake)), -1.0);
  return reduce_mean(log(d_real)) + reduce_mean(log(add_scalar(scale(d_fake, -1.0), 1.0)));
}

Var similarity_loss(const Var& a, const Var& b) {
  if (!a.value().same_shape(b.value()))
    throw ShapeError("similarity_loss: " + shape_string(a.value()) + " vs " + shape_string(b.value()));
  if (a.rows() == 0) throw ContractError("similarity_loss: empty batch");
  return scale(reduce_sum(square(a - b)), 1.0 / static_cast<double>(a.rows()));
}

Var cycle_reconstruction_loss(const Var& real_a, const Var& regenerated_a, const Var& real_b, const Var& regenerated_b) {
  return similarity_loss(real_a, regenerated_a) + similarity_loss(real_b, regenerated_b);
}

BatchForward run_forward(const BoundBundle& nets, const Matrix& images, const Matrix& texts) {
  if (images.rows() != texts.rows())
    throw ShapeError("run_forward: " + std::to_string(images.rows()) + " images vs " + std::to_string(texts.rows()) + " texts");
  Tape& tape = nets.tape();
  BatchForward f;
  f.f_image = encode_image(nets, tape.constant(images));
  f.f_text = encode_text(nets, tape.constant(texts));

  const auto i2t = gen_outer(nets, Direction::image_to_text, f.f_image);
  const auto t2i = gen_outer(nets, Direction::text_to_image, f.f_text);
  f.f_text_fake = i2t.fake;
  f.z_image = i2t.tap;
  f.f_image_fake = t2i.fake;
  f.z_text = t2i.tap;
  f.f_image_rec = gen_outer(nets, Direction::text_to_image, f.f_text_fake).fake;
  f.f_text_rec = gen_outer(nets, Direction::image_to_text, f.f_image_fake).fake;

  const auto zi2t = gen_inner(nets, Direction::image_to_text, f.z_image);
  const auto zt2i = gen_inner(nets, Direction::text_to_image, f.z_text);
  f.z_text_fake = zi2t.fake;
  f.h_image = zi2t.tap;
  f.z_image_fake = zt2i.fake;
  f.h_text = zt2i.tap;
  f.z_image_rec = gen_inner(nets, Direction::text_to_image, f.z_text_fake).fake;
  f.z_text_rec = gen_inner(nets, Direction::image_to_text, f.z_image_fake).fake;

  f.df_image_real = discriminate(nets, Critic::f_image, f.f_image);
  f.df_image_fake = discriminate(nets, Critic::f_image, f.f_image_fake);
  f.df_text_real = discriminate(nets, Critic::f_text, f.f_text);
  f.df_text_fake = discriminate(nets, Critic::f_text, f.f_text_fake);
  f.dz_image_real = discriminate(nets, Critic::z_image, f.z_image);
  f.dz_image_fake = discriminate(nets, Critic::z_image, f.z_image_fake);
  f.dz_text_real = discriminate(nets, Critic::z_text, f.z_text);
  f.dz_text_fake = discriminate(nets, Critic::z_text, f.z_text_fake);
  return f;
}

LossVars loss_terms(const BatchForward& f, const LossWeights& w) {
  LossVars v;
  v.adv_f_I = adv_loss(f.df_image_real, f.df_image_fake, AdvSide::generator);
  v.adv_f_T = adv_loss(f.df_text_real, f.df_text_fake, AdvSide::generator);
  v.disc_f_I = adv_loss(f.df_image_real, f.df_image_fake, AdvSide::discriminator);
  v.disc_f_T = adv_loss(f.df_text_real, f.df_text_fake, AdvSide::discriminator);
  v.rec_f = cycle_reconstruction_loss(f.f_image, f.f_image_rec, f.f_text, f.f_text_rec);
  v.sim_f = similarity_loss(f.z_image, f.z_text);

  v.adv_z_I = adv_loss(f.dz_image_real, f.dz_image_fake, AdvSide::generator);
  v.adv_z_T = adv_loss(f.dz_text_real, f.dz_text_fake, AdvSide::generator);
  v.disc_z_I = adv_loss(f.dz_image_real, f.dz_image_fake, AdvSide::discriminator);
  v.disc_z_T = adv_loss(f.dz_text_real, f.dz_text_fake, AdvSide::discriminator);
  v.rec_z = cycle_reconstruction_loss(f.z_image, f.z_image_rec, f.z_text, f.z_text_rec);
  v.sim_z = similarity_loss(f.h_image, f.h_text);

  v.L_f = scale(v.adv_f_I + v.adv_f_T, w.adv) + scale(v.rec_f, w.rec) + scale(v.sim_f, w.sim_f);
  v.L_z = scale(v.adv_z_I + v.adv_z_T, w.adv) + scale(v.rec_z, w.rec) + scale(v.sim_z, w.sim_z);
  v.L_total = v.L_f + v.L_z;
  return v;
}

LossBreakdown breakdown_of(const LossVars& v) {
  LossBreakdown b;
  b.adv_f_I = v.adv_f_I.scalar();
  b.adv_f_T = v.adv_f_T.scalar();
  b.rec_f = v.rec_f.scalar();
  b.sim_f = v.sim_f.scalar();
  b.adv_z_I = v.adv_z_I.scalar();
  b.adv_z_T = v.adv_z_T.scalar();
  b.rec_z = v.rec_z.scalar();
  b.sim_z = v.sim_z.scalar();
  b.L_f = v.L_f.scalar();
  b.L_z = v.L_z.scalar();
  b.L_total = v.L_total.scalar();
  return b;
}

LossBreakdown total_losses(const BatchForward& fwd, const LossWeights& weights) {
  return breakdown_of(loss_terms(fwd, weights));
}

std::string LossBreakdown::first_non_finite() const {
  const std::pair<const char*, double> fields[] = {{"adv_f_I", adv_f_I}, {"adv_f_T", adv_f_T}, {"rec_f", rec_f},
                                                   {"sim_f", sim_f},     {"adv_z_I", adv_z_I}, {"adv_z_T", adv_z_T},
                                                   {"rec_z", rec_z},     {"sim_z", sim_z},     {"L_f", L_f},
                                                   {"L_z", L_z},         {"L_total", L_total}};
  for (const auto& [name, value] : fields)
    if (!std::isfinite(value)) return name;
  return {};
}

std::string loss_csv_header() { return "iter,adv_f_I,adv_f_T,rec_f,sim_f,adv_z_I,adv_z_T,rec_z,sim_z,L_f,L_z,L_total"; }

std::string loss_csv_row(std::size_t iteration, const LossBreakdown& b) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", iteration, b.adv_f_I,
                b.adv_f_T, b.rec_f, b.sim_f, b.adv_z_I, b.adv_z_T, b.rec_z, b.sim_z, b.L_f, b.L_z, b.L_total);
  return buf;
}

}  // namespace uch
