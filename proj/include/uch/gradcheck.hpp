#pragma once

// Central finite-difference check of every loss term's gradient with respect to every
// parameter tensor of a seeded bundle.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "uch/ndcore.hpp"
#include "uch/networks.hpp"

namespace uch {

struct GradcheckOptions {
  BundleDims dims{.image_dim = 16, .text_dim = 12, .text_embed_dim = 12, .code_bits = 8};
  std::size_t batch = 4;
  std::uint64_t seed = 1;
  std::size_t samples_per_tensor = 8;
  double step = 1e-5;
  double tolerance = 1e-4;
  // Denominator floor of the relative error. Central differences of an O(10) loss carry about 1e-10 of
  // rounding noise at step 1e-5, so gradients far below this floor are compared absolutely.
  double error_floor = 1e-5;
  // Negative control: scale every adjoint emitted by ops of this kind.
  std::optional<OpKind> fault;
  double fault_factor = 1.01;
};

struct TermCheck {
  std::string term;
  double max_relative_error = 0;
  std::size_t entries = 0;
  bool passed = false;
};

struct GradcheckReport {
  std::vector<TermCheck> terms;
  std::size_t skipped_kinks = 0;  // sampled entries whose ±step straddles a ReLU/clamp kink
  bool passed() const;
};

GradcheckReport run_gradcheck(const GradcheckOptions& options);

}  // namespace uch
