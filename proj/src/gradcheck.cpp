#include "uch/gradcheck.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "uch/errors.hpp"
#include "uch/losses.hpp"
#include "uch/random.hpp"

namespace uch {

namespace {

struct TermRef {
  const char* name;
  Var LossVars::*member;
};

constexpr TermRef kTerms[] = {
    {"adv_f_I", &LossVars::adv_f_I},   {"adv_f_T", &LossVars::adv_f_T},   {"disc_f_I", &LossVars::disc_f_I},
    {"disc_f_T", &LossVars::disc_f_T}, {"rec_f", &LossVars::rec_f},       {"sim_f", &LossVars::sim_f},
    {"adv_z_I", &LossVars::adv_z_I},   {"adv_z_T", &LossVars::adv_z_T},   {"disc_z_I", &LossVars::disc_z_I},
    {"disc_z_T", &LossVars::disc_z_T}, {"rec_z", &LossVars::rec_z},       {"sim_z", &LossVars::sim_z},
    {"L_f", &LossVars::L_f},           {"L_z", &LossVars::L_z},           {"L_total", &LossVars::L_total},
};
constexpr std::size_t kTermCount = std::size(kTerms);

struct Probe {
  NetId net;
  std::size_t layer;
  bool bias;
  std::size_t entry;
};

Matrix& tensor(NetworkBundle& bundle, const Probe& p) {
  auto& layer = bundle.net(p.net).layers()[p.layer];
  return p.bias ? layer.bias.value : layer.weight.value;
}

Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
  Matrix m(rows, cols);
  for (double& v : m.values()) v = rng.uniform(-1.0, 1.0);
  return m;
}

struct Evaluation {
  std::array<double, kTermCount> values{};
  std::vector<bool> branches;
};

Evaluation evaluate_terms(const NetworkBundle& bundle, const Matrix& images, const Matrix& texts) {
  Tape tape;
  BoundBundle nets(tape, bundle);
  const LossVars vars = loss_terms(run_forward(nets, images, texts));
  Evaluation e;
  for (std::size_t t = 0; t < kTermCount; ++t) e.values[t] = (vars.*kTerms[t].member).scalar();
  e.branches = tape.branch_pattern();
  return e;
}

}  // namespace

bool GradcheckReport::passed() const {
  return !terms.empty() && std::all_of(terms.begin(), terms.end(), [](const TermCheck& t) { return t.passed; });
}

GradcheckReport run_gradcheck(const GradcheckOptions& options) {
  options.dims.validate();
  if (options.batch == 0 || options.samples_per_tensor == 0 || !(options.step > 0))
    throw ContractError("gradcheck: batch, samples per tensor and step must be positive");

  Rng rng(options.seed);
  NetworkBundle bundle = NetworkBundle::create(options.dims, rng.next_u64());
  for (NetId id : kAllNets)
    for (auto& layer : bundle.net(id).layers())
      for (double& b : layer.bias.value.values()) b = rng.uniform(-0.1, 0.1);
  const Matrix images = random_matrix(rng, options.batch, options.dims.image_dim);
  const Matrix texts = random_matrix(rng, options.batch, options.dims.text_dim);

  std::vector<Probe> probes;
  for (NetId id : kAllNets) {
    const auto& layers = bundle.net(id).layers();
    for (std::size_t l = 0; l < layers.size(); ++l)
      for (bool bias : {false, true}) {
        const std::size_t n = (bias ? layers[l].bias.value : layers[l].weight.value).size();
        for (std::size_t s = 0; s < std::min(options.samples_per_tensor, n); ++s)
          probes.push_back({id, l, bias, rng.index(n)});
      }
  }

  // Analytic gradients of every term at every probe.
  std::vector<std::array<double, kTermCount>> analytic(probes.size());
  {
    Tape tape;
    if (options.fault) tape.inject_fault(*options.fault, options.fault_factor);
    NetSet all;
    all.set();
    BoundBundle nets(tape, bundle, all);
    const LossVars vars = loss_terms(run_forward(nets, images, texts));
    for (std::size_t t = 0; t < kTermCount; ++t) {
      const Gradients grads = tape.backward(vars.*kTerms[t].member);
      for (std::size_t i = 0; i < probes.size(); ++i) {
        const auto& param = nets.net(probes[i].net).parameters()[probes[i].layer];
        const Matrix g = grads.of(probes[i].bias ? param.second : param.first);
        analytic[i][t] = g.values()[probes[i].entry];
      }
    }
  }

  GradcheckReport report;
  report.terms.resize(kTermCount);
  for (std::size_t t = 0; t < kTermCount; ++t) report.terms[t].term = kTerms[t].name;

  for (std::size_t i = 0; i < probes.size(); ++i) {
    double& slot = tensor(bundle, probes[i]).values()[probes[i].entry];
    const double original = slot;
    slot = original + options.step;
    const Evaluation plus = evaluate_terms(bundle, images, texts);
    slot = original - options.step;
    const Evaluation minus = evaluate_terms(bundle, images, texts);
    slot = original;
    if (plus.branches != minus.branches) {
      ++report.skipped_kinks;
      continue;
    }
    for (std::size_t t = 0; t < kTermCount; ++t) {
      const double numeric = (plus.values[t] - minus.values[t]) / (2.0 * options.step);
      const double a = analytic[i][t];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.error_floor});
      auto& check = report.terms[t];
      check.max_relative_error = std::max(check.max_relative_error, std::abs(a - numeric) / denom);
      ++check.entries;
    }
  }
  for (auto& check : report.terms) check.passed = check.entries > 0 && check.max_relative_error <= options.tolerance;
  return report;
}

}  // namespace uch
