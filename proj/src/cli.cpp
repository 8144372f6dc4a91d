#include "uch/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include "uch/data.hpp"
#include "uch/errors.hpp"
#include "uch/gradcheck.hpp"
#include "uch/networks.hpp"
#include "uch/retrieval.hpp"
#include "uch/trainer.hpp"

namespace uch::cli {

namespace {

const std::map<std::string, SplitTag> kSetNames = {{"query", SplitTag::query}, {"retrieval", SplitTag::retrieval}};

// Items selected by --set style flags: "all" or one split side.
std::vector<std::size_t> select_items(std::size_t n, std::size_t query_count, std::uint64_t seed, const std::string& set) {
  const auto tags = split_tags(n, query_count, seed);
  std::vector<std::size_t> items;
  for (std::size_t i = 0; i < n; ++i)
    if (set == "all" || tags[i] == kSetNames.at(set)) items.push_back(i);
  return items;
}

std::ofstream open_output(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  return os;
}

struct SynthArgs {
  SyntheticSpec spec;
  std::string prefix = "synthetic";
};

void add_synth(CLI::App& app, SynthArgs& a) {
  auto* cmd = app.add_subcommand("synth", "Generate a clustered paired dataset (<out>.images, <out>.texts, <out>.labels)");
  cmd->add_option("--clusters", a.spec.clusters, "Number of clusters")->capture_default_str();
  cmd->add_option("--pairs-per-cluster", a.spec.pairs_per_cluster, "Pairs per cluster")->capture_default_str();
  cmd->add_option("--dimg", a.spec.image_dim, "Image feature dimension")->capture_default_str();
  cmd->add_option("--dtxt", a.spec.text_dim, "Text feature dimension")->capture_default_str();
  cmd->add_option("--sigma", a.spec.sigma, "Per-coordinate noise standard deviation")->capture_default_str();
  cmd->add_option("--rho", a.spec.misalignment, "Fraction of misaligned pairs")->capture_default_str();
  cmd->add_option("--seed", a.spec.seed, "Random seed")->capture_default_str();
  cmd->add_option("--out", a.prefix, "Output path prefix")->capture_default_str();
}

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  const SyntheticDataset synthetic = generate_synthetic(a.spec);
  const PairedDataset& d = synthetic.dataset;
  save_features(a.prefix + ".images", d.images);
  save_features(a.prefix + ".texts", d.texts);
  save_labels(a.prefix + ".labels", *d.labels);
  out << "wrote " << d.size() << " pairs to " << a.prefix << ".{images,texts,labels}\n";
  return kExitOk;
}

struct DatasetArgs {
  std::string images;
  std::string texts;
  std::optional<std::string> labels;
  std::size_t query_count = 0;
  std::uint64_t seed = 0;
};

void add_dataset_flags(CLI::App* cmd, DatasetArgs& a) {
  cmd->add_option("--images", a.images, "Image feature file (UCHFEAT1 or CSV)")->required();
  cmd->add_option("--texts", a.texts, "Text feature file (UCHFEAT1 or CSV)")->required();
  cmd->add_option("--labels", a.labels, "Label file; items without labels are dropped");
  cmd->add_option("--query-count", a.query_count, "Items held out as queries")->capture_default_str();
  cmd->add_option("--seed", a.seed, "Seed for the query split and initialization")->capture_default_str();
}

LoadedDataset load(const DatasetArgs& a) {
  std::optional<std::filesystem::path> labels;
  if (a.labels) labels = *a.labels;
  return load_dataset(a.images, a.texts, labels);
}

struct TrainArgs {
  DatasetArgs data;
  TrainConfig config;
  std::string optimizer = "sgd-momentum";
  std::string gen_adv = "on";
  std::string checkpoint;
  std::optional<std::string> log;
};

void add_train(CLI::App& app, TrainArgs& a) {
  auto* cmd = app.add_subcommand("train", "Train on the retrieval split and write a checkpoint");
  add_dataset_flags(cmd, a.data);
  auto& c = a.config;
  cmd->add_option("--k", c.code_bits, "Code length in bits (8, 16, 32 or 64)")->capture_default_str();
  cmd->add_option("--iters", c.max_iterations, "Training iterations")->capture_default_str();
  cmd->add_option("--batch", c.batch_size, "Minibatch size")->capture_default_str();
  cmd->add_option("--lr-image", c.lr_image, "Learning rate of image-side networks")->capture_default_str();
  cmd->add_option("--lr-text", c.lr_text, "Learning rate of text-side networks")->capture_default_str();
  cmd->add_option("--weight-decay", c.weight_decay, "Decoupled weight decay")->capture_default_str();
  cmd->add_option("--momentum", c.momentum, "Momentum coefficient")->capture_default_str();
  cmd->add_option("--optimizer", a.optimizer, "sgd or sgd-momentum")
      ->check(CLI::IsMember({"sgd", "sgd-momentum"}))
      ->capture_default_str();
  cmd->add_option("--gen-adv", a.gen_adv, "Generator adversarial term: on or off")
      ->check(CLI::IsMember({"on", "off"}))
      ->capture_default_str();
  cmd->add_option("--emb-dim", c.text_embed_dim, "Text embedding width")->capture_default_str();
  cmd->add_option("--w-adv", c.weights.adv, "Adversarial loss weight")->capture_default_str();
  cmd->add_option("--w-rec", c.weights.rec, "Cycle reconstruction loss weight")->capture_default_str();
  cmd->add_option("--w-sim-f", c.weights.sim_f, "Common-representation similarity loss weight")->capture_default_str();
  cmd->add_option("--w-sim-z", c.weights.sim_z, "Hash-layer similarity loss weight")->capture_default_str();
  cmd->add_option("--checkpoint", a.checkpoint, "Output checkpoint path")->required();
  cmd->add_option("--log", a.log, "Training log CSV path (default: standard output)");
}

int cmd_train(TrainArgs& a, std::ostream& out, std::ostream& err) {
  a.config.seed = a.data.seed;
  a.config.optimizer = a.optimizer == "sgd" ? OptimizerKind::sgd : OptimizerKind::sgd_momentum;
  a.config.gen_adv = a.gen_adv == "on";
  a.config.validate();

  LoadedDataset loaded = load(a.data);
  if (loaded.pruned_unlabeled > 0) err << "dropped " << loaded.pruned_unlabeled << " items without labels\n";
  const PairedDataset tagged = split(std::move(loaded.dataset), a.data.query_count, a.data.seed);
  const PairedDataset training = tagged.subset(tagged.indices(SplitTag::retrieval));

  std::ofstream log_file;
  if (a.log) log_file = open_output(*a.log);
  std::ostream& log = a.log ? static_cast<std::ostream&>(log_file) : out;
  log << loss_csv_header() << '\n' << std::flush;

  try {
    const FitResult result = fit(training, a.config, [&log](std::size_t iteration, const LossBreakdown& row) {
      log << loss_csv_row(iteration, row) << '\n' << std::flush;
    });
    save_checkpoint(a.checkpoint, result.bundle);
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << " (log holds the rows before the failure)\n";
    return kExitDivergence;
  }
  err << "trained " << a.config.max_iterations << " iterations on " << training.size() << " pairs; checkpoint "
      << a.checkpoint << '\n';
  return kExitOk;
}

struct EncodeArgs {
  DatasetArgs data;
  std::string checkpoint;
  std::string mode = "paired";
  std::string set = "all";
  std::string out;
};

void add_encode(CLI::App& app, EncodeArgs& a) {
  auto* cmd = app.add_subcommand("encode", "Compute hash codes with a trained checkpoint");
  add_dataset_flags(cmd, a.data);
  cmd->add_option("--checkpoint", a.checkpoint, "Checkpoint path")->required();
  cmd->add_option("--mode", a.mode, "paired, image or text")
      ->check(CLI::IsMember({"paired", "image", "text"}))
      ->capture_default_str();
  cmd->add_option("--set", a.set, "Items to encode: all, query or retrieval")
      ->check(CLI::IsMember({"all", "query", "retrieval"}))
      ->capture_default_str();
  cmd->add_option("--out", a.out, "Output code file")->required();
}

int cmd_encode(const EncodeArgs& a, std::ostream& out) {
  const NetworkBundle bundle = load_checkpoint(a.checkpoint);
  const PairedDataset dataset = load(a.data).dataset;
  const auto items = select_items(dataset.size(), a.data.query_count, a.data.seed, a.set);
  const PairedDataset chosen = dataset.subset(items);
  const CodeSource source =
      a.mode == "paired" ? CodeSource::paired : (a.mode == "image" ? CodeSource::image_only : CodeSource::text_only);
  const CodeMatrix codes = extract_codes(bundle, source, chosen.images, chosen.texts);
  save_codes(a.out, codes);
  out << "wrote " << codes.rows() << " x " << codes.bits() << "-bit codes to " << a.out << '\n';
  return kExitOk;
}

struct EvalArgs {
  std::string queries;
  std::string database;
  std::string labels;
  std::size_t query_count = 0;
  std::uint64_t seed = 0;
  std::string query_set = "query";
  std::string database_set = "retrieval";
  std::string direction = "i2t";
  std::vector<std::size_t> ns;
  std::optional<std::string> out;
};

void add_eval(CLI::App& app, EvalArgs& a) {
  auto* cmd = app.add_subcommand("eval", "Score query codes against database codes");
  cmd->add_option("--queries", a.queries, "Query code file")->required();
  cmd->add_option("--database", a.database, "Database code file")->required();
  cmd->add_option("--labels", a.labels, "Label file of the whole dataset")->required();
  cmd->add_option("--query-count", a.query_count, "Items held out as queries")->capture_default_str();
  cmd->add_option("--seed", a.seed, "Seed of the query split")->capture_default_str();
  cmd->add_option("--query-set", a.query_set, "Items behind the query codes: all, query or retrieval")
      ->check(CLI::IsMember({"all", "query", "retrieval"}))
      ->capture_default_str();
  cmd->add_option("--database-set", a.database_set, "Items behind the database codes: all, query or retrieval")
      ->check(CLI::IsMember({"all", "query", "retrieval"}))
      ->capture_default_str();
  cmd->add_option("--direction", a.direction, "i2t or t2i")->check(CLI::IsMember({"i2t", "t2i"}))->capture_default_str();
  cmd->add_option("--n", a.ns, "Cut-offs for precision@N")->delimiter(',');
  cmd->add_option("--out", a.out, "Report CSV path (default: standard output)");
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const CodeMatrix queries = load_codes(a.queries);
  const CodeMatrix database = load_codes(a.database);
  const LabelMatrix all_labels = load_labels(a.labels);

  // Mirror load_dataset: unlabeled items are not part of the dataset.
  std::vector<std::size_t> labeled;
  for (std::size_t i = 0; i < all_labels.rows(); ++i)
    if (all_labels.count(i) > 0) labeled.push_back(i);
  const LabelMatrix labels = all_labels.subset(labeled);

  const auto query_items = select_items(labels.rows(), a.query_count, a.seed, a.query_set);
  const auto database_items = select_items(labels.rows(), a.query_count, a.seed, a.database_set);
  if (query_items.size() != queries.rows())
    throw ContractError("query code file has " + std::to_string(queries.rows()) + " items but the " + a.query_set +
                        " set has " + std::to_string(query_items.size()));
  if (database_items.size() != database.rows())
    throw ContractError("database code file has " + std::to_string(database.rows()) + " items but the " +
                        a.database_set + " set has " + std::to_string(database_items.size()));

  EvalOptions options;
  options.precision_at = a.ns;
  options.threads = evaluation_threads_from_env();
  const auto direction = a.direction == "i2t" ? RetrievalDirection::image_to_text : RetrievalDirection::text_to_image;
  const RetrievalReport report =
      evaluate(queries, database, labels.subset(query_items), labels.subset(database_items), direction, options);
  if (a.out) {
    std::ofstream os = open_output(*a.out);
    write_report_csv(os, report);
  } else {
    write_report_csv(out, report);
  }
  return kExitOk;
}

struct GradcheckArgs {
  GradcheckOptions options;
  std::optional<std::string> corrupt;
};

void add_gradcheck(CLI::App& app, GradcheckArgs& a) {
  auto* cmd = app.add_subcommand("gradcheck", "Compare analytic gradients of every loss term with finite differences");
  auto& o = a.options;
  cmd->add_option("--seed", o.seed, "Seed for parameters and inputs")->capture_default_str();
  cmd->add_option("--dimg", o.dims.image_dim, "Image feature dimension")->capture_default_str();
  cmd->add_option("--dtxt", o.dims.text_dim, "Text feature dimension")->capture_default_str();
  cmd->add_option("--emb-dim", o.dims.text_embed_dim, "Text embedding width")->capture_default_str();
  cmd->add_option("--k", o.dims.code_bits, "Code length")->capture_default_str();
  cmd->add_option("--batch", o.batch, "Batch size")->capture_default_str();
  cmd->add_option("--samples", o.samples_per_tensor, "Entries probed per parameter tensor")->capture_default_str();
  cmd->add_option("--step", o.step, "Finite-difference step")->capture_default_str();
  cmd->add_option("--tolerance", o.tolerance, "Maximum relative error")->capture_default_str();
  cmd->add_option("--corrupt-adjoint", a.corrupt, "Scale the adjoints of one op kind (test hook)")->group("");
  cmd->add_option("--corrupt-factor", o.fault_factor, "Scale factor of --corrupt-adjoint")->group("");
}

int cmd_gradcheck(GradcheckArgs& a, std::ostream& out) {
  if (a.corrupt) {
    static constexpr OpKind kKinds[] = {OpKind::matmul,  OpKind::add,     OpKind::add_row, OpKind::sub,
                                        OpKind::mul,     OpKind::scale,   OpKind::add_scalar, OpKind::tanh,
                                        OpKind::relu,    OpKind::sigmoid, OpKind::square,  OpKind::log,
                                        OpKind::clamp,   OpKind::sum,     OpKind::mean};
    const auto it = std::find_if(std::begin(kKinds), std::end(kKinds), [&](OpKind k) { return *a.corrupt == op_name(k); });
    if (it == std::end(kKinds)) throw ContractError("unknown op kind '" + *a.corrupt + "'");
    a.options.fault = *it;
  }
  const GradcheckReport report = run_gradcheck(a.options);
  char line[160];
  for (const auto& t : report.terms) {
    std::snprintf(line, sizeof line, "%-9s max_rel_err=%.3e entries=%zu %s\n", t.term.c_str(), t.max_relative_error,
                  t.entries, t.passed ? "PASS" : "FAIL");
    out << line;
  }
  out << "skipped " << report.skipped_kinks << " entries straddling a kink\n";
  out << (report.passed() ? "gradcheck PASS\n" : "gradcheck FAIL\n");
  return report.passed() ? kExitOk : kExitFailure;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Learned binary codes for paired image and text retrieval", "uch"};
  app.require_subcommand(1);
  app.allow_extras(false);

  SynthArgs synth;
  TrainArgs train;
  EncodeArgs encode;
  EvalArgs eval;
  GradcheckArgs gradcheck;
  add_synth(app, synth);
  add_train(app, train);
  add_encode(app, encode);
  add_eval(app, eval);
  add_gradcheck(app, gradcheck);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitInvalid;
  }

  try {
    if (app.got_subcommand("synth")) return cmd_synth(synth, out);
    if (app.got_subcommand("train")) return cmd_train(train, out, err);
    if (app.got_subcommand("encode")) return cmd_encode(encode, out);
    if (app.got_subcommand("eval")) return cmd_eval(eval, out);
    if (app.got_subcommand("gradcheck")) return cmd_gradcheck(gradcheck, out);
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitInvalid;
}

}  // namespace uch::cli
