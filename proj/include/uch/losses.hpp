#pragma once

// Differentiable loss terms of both cycles. Every term is a batch mean.

#include <string>

#include "uch/ndcore.hpp"
#include "uch/networks.hpp"

namespace uch {

enum class AdvSide { discriminator, generator };

// Discriminator side: mean log d_real + mean log(1 - d_fake), to be maximized.
// Generator side: mean -log d_fake (non-saturating form), to be minimized.
Var adv_loss(const Var& d_real, const Var& d_fake, AdvSide side);

// Batch mean of the per-item squared Euclidean distance.
Var similarity_loss(const Var& a, const Var& b);

// similarity_loss(real_a, regenerated_a) + similarity_loss(real_b, regenerated_b).
Var cycle_reconstruction_loss(const Var& real_a, const Var& regenerated_a, const Var& real_b, const Var& regenerated_b);

struct LossWeights {
  double adv = 1.0;
  double rec = 1.0;
  double sim_f = 1.0;
  double sim_z = 1.0;
};

// Every intermediate of one full forward pass over a paired batch.
struct BatchForward {
  Var f_image, f_text;                // F^I_real, F^T_real
  Var f_text_fake, f_image_fake;      // G_f^{I→T}(F^I_real), G_f^{T→I}(F^T_real)
  Var f_image_rec, f_text_rec;        // G_f^{T→I}(F^T_fake), G_f^{I→T}(F^I_fake)
  Var z_image, z_text;                // Z^I_real, Z^T_real (outer generator taps)
  Var z_text_fake, z_image_fake;      // G_z^{I→T}(Z^I_real), G_z^{T→I}(Z^T_real)
  Var z_image_rec, z_text_rec;        // G_z^{T→I}(Z^T_fake), G_z^{I→T}(Z^I_fake)
  Var h_image, h_text;                // hash-layer taps
  Var df_image_real, df_image_fake, df_text_real, df_text_fake;
  Var dz_image_real, dz_image_fake, dz_text_real, dz_text_fake;
};

BatchForward run_forward(const BoundBundle& nets, const Matrix& images, const Matrix& texts);

struct LossVars {
  // Generator-side adversarial terms.
  Var adv_f_I, adv_f_T, adv_z_I, adv_z_T;
  // Discriminator-side objectives (maximized by the discriminators).
  Var disc_f_I, disc_f_T, disc_z_I, disc_z_T;
  Var rec_f, sim_f, rec_z, sim_z;
  Var L_f, L_z, L_total;
};

LossVars loss_terms(const BatchForward& fwd, const LossWeights& weights = {});

struct LossBreakdown {
  double adv_f_I = 0, adv_f_T = 0, rec_f = 0, sim_f = 0;
  double adv_z_I = 0, adv_z_T = 0, rec_z = 0, sim_z = 0;
  double L_f = 0, L_z = 0, L_total = 0;

  // Name of the first non-finite field, or empty.
  std::string first_non_finite() const;
  bool operator==(const LossBreakdown&) const = default;
};

LossBreakdown breakdown_of(const LossVars& vars);
LossBreakdown total_losses(const BatchForward& fwd, const LossWeights& weights = {});

std::string loss_csv_header();
std::string loss_csv_row(std::size_t iteration, const LossBreakdown& b);

}  // namespace uch
