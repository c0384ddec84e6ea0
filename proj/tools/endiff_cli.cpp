// endiff: dataset generation, training, sampling, evaluation and checkpoint
// inspection.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error
// (unreadable or invalid input, corrupt checkpoint), 3 numeric divergence.
// END_OUTPUT_DIR sets the default output directory.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "endiff/endiff.hpp"

namespace fs = std::filesystem;
using namespace endiff;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitDiverged = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// --config plus one string flag per config key; resolves
/// defaults < file < flags.
struct ConfigFlags {
  std::string file;
  std::map<std::string, std::string> flags;

  void attach(CLI::App* app, const std::vector<std::string>& keys) {
    app->add_option("--config", file, "flat key = value config file");
    for (const auto& k : keys) {
      std::string flag = "--" + k;
      for (char& c : flag)
        if (c == '_') c = '-';
      app->add_option_function<std::string>(flag, [this, k](const std::string& v) { flags[k] = v; },
                                            "overrides config key " + k);
    }
  }

  /// Adds a flag with a different spelling that sets `key`.
  void alias(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    app->add_option_function<std::string>(flag, [this, key](const std::string& v) { flags[key] = v; }, help);
  }

  KeyValueConfig file_entries() const {
    if (file.empty()) return {};
    std::ifstream in(file);
    if (!in) throw UsageError("cannot read config file " + file);
    std::stringstream ss;
    ss << in.rdbuf();
    try {
      return KeyValueConfig::parse(ss.str());
    } catch (const endiff::ParseError& e) {
      throw UsageError(file + ": " + e.what());
    }
  }

  KeyValueConfig flag_entries() const {
    KeyValueConfig kv;
    for (const auto& [k, v] : flags) kv.set(k, v);
    return kv;
  }

  RunConfig resolve() const {
    RunConfig rc;
    if (const char* env = std::getenv("END_OUTPUT_DIR"); env && *env) rc.output_dir = env;
    rc.apply(file_entries());
    rc.apply(flag_entries());
    rc.train.seed = rc.seed;
    rc.validate();
    return rc;
  }
};

fs::path output_path(const RunConfig& rc, const std::string& explicit_path, const std::string& default_name) {
  fs::path p = explicit_path.empty() ? fs::path(rc.output_dir) / default_name : fs::path(explicit_path);
  if (p.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
  }
  return p;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out << text;
  if (!out) throw InvalidInput("cannot write " + path.string());
}

std::vector<MoleculeRecord> read_dataset(const std::string& path, const AtomVocabulary& vocab) {
  auto records = parse_xyz(detail::read_file(path), vocab);
  if (records.empty()) throw InvalidInput(path + ": no molecules");
  return records;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void print_sizes(const SizeDistribution& d) {
  std::cout << "p(N):";
  for (const auto& [n, p] : d.probs()) std::cout << " " << n << ":" << fmt(p);
  std::cout << "\n";
}

// ---------------------------------------------------------------- gen-synthetic

struct GenArgs {
  ConfigFlags cfg;
  std::string templates = "tetra,chain5";
  int count = 2000;
  double jitter = 0.05;
  std::string out;
};

int cmd_gen_synthetic(const GenArgs& a) {
  const RunConfig rc = a.cfg.resolve();
  if (a.count < 1) throw UsageError("--count must be positive");
  if (!(a.jitter >= 0.0)) throw UsageError("--jitter must be non-negative");
  KeyValueConfig names_kv;
  names_kv.set("templates", a.templates);
  std::vector<Template> templates;
  try {
    templates = templates_by_name(names_kv.list("templates"));
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  if (templates.empty()) throw UsageError("--templates is empty");
  const AtomVocabulary vocab = rc.vocab();
  const auto records = gen_synthetic(templates, a.jitter, a.count, RandomSource(rc.seed), vocab);
  const fs::path path = output_path(rc, a.out, "synthetic.xyz");
  write_text(path, write_xyz(records, vocab));
  std::cout << "wrote " << records.size() << " molecules to " << path.string() << "\n";
  print_sizes(SizeDistribution::from_records(records));
  return kExitOk;
}

// ------------------------------------------------------------------------ train

struct TrainArgs {
  ConfigFlags cfg;
  std::string data;
  std::string checkpoint;
  std::string loss_csv;
  int log_every = 100;
};

int cmd_train(const TrainArgs& a) {
  const RunConfig rc = a.cfg.resolve();
  if (a.data.empty()) throw UsageError("--data is required");
  const AtomVocabulary vocab = rc.vocab();
  std::vector<MoleculeRecord> records;
  try {
    records = read_dataset(a.data, vocab);
  } catch (const ConfigError& e) {
    // Unknown element: the dataset does not fit the vocabulary.
    throw InvalidInput(a.data + ": " + e.what());
  }
  std::vector<GeometricGraph> data;
  data.reserve(records.size());
  for (const auto& r : records) data.push_back(encode_graph(r, vocab, rc.diffusion.feature_scale, rc.conditional));

  Model model = Model::create(rc.diffusion, rc.net, vocab, SizeDistribution::from_records(records),
                              rc.conditional, rc.seed);
  const fs::path ckpt = output_path(rc, a.checkpoint, "model.ckpt");
  const fs::path csv_path = output_path(rc, a.loss_csv, "loss.csv");
  std::ofstream csv(csv_path, std::ios::trunc);
  if (!csv) throw InvalidInput("cannot write " + csv_path.string());
  csv << "step,loss,wall_ms\n" << std::flush;

  std::cout << "training " << to_string(rc.diffusion.forward) << (rc.conditional ? " (conditional)" : "")
            << " on " << data.size() << " molecules, " << model.params.size() << " parameters, "
            << rc.train.steps << " steps\n";
  const TrainResult res = train(model, data, rc.train, [&](const TrainStep& s) {
    csv << s.step << "," << fmt(s.loss) << "," << fmt(s.wall_ms) << "\n" << std::flush;
    if (a.log_every > 0 && (s.step + 1) % a.log_every == 0)
      std::cout << "step " << s.step + 1 << " loss " << s.loss << "\n";
  });
  save_checkpoint(ckpt.string(), model, rc);
  if (res.diverged) {
    std::cerr << "endiff: training diverged at " << res.divergence << "; checkpoint of the last finite state written to "
              << ckpt.string() << "\n";
    return kExitDiverged;
  }
  if (!res.trace.empty()) std::cout << "final loss " << fmt(res.trace.back().loss) << "\n";
  std::cout << "checkpoint " << ckpt.string() << "\nloss trace " << csv_path.string() << "\n";
  return kExitOk;
}

// ----------------------------------------------------------------------- sample

struct SampleArgs {
  ConfigFlags cfg;
  std::string checkpoint;
  int count = 100;
  std::string composition;
  std::string out;
  std::string manifest;
};

// Model-defining keys in the run config must agree with the checkpoint.
void check_compatible(const KeyValueConfig& requested, const RunConfig& stored) {
  static const std::vector<std::string> free_keys = {"seed", "sample_steps", "output_dir", "train_steps",
                                                     "batch_size", "lr", "clip_norm"};
  const KeyValueConfig have = stored.to_kv();
  for (const auto& [k, v] : requested.entries()) {
    if (std::find(free_keys.begin(), free_keys.end(), k) != free_keys.end()) continue;
    RunConfig a = stored, b = stored;
    b.apply(KeyValueConfig::parse(k + " = \"" + v + "\"\n"));
    if (a.to_kv().str(k) != b.to_kv().str(k))
      throw InvalidInput("checkpoint/config incompatibility: " + k + " is " + have.str(k) + " in the checkpoint, " +
                         v + " requested");
  }
}

int cmd_sample(const SampleArgs& a) {
  if (a.checkpoint.empty()) throw UsageError("--checkpoint is required");
  if (a.count < 1) throw UsageError("--count must be positive");
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  KeyValueConfig requested = a.cfg.file_entries();
  requested.merge(a.cfg.flag_entries());
  check_compatible(requested, ck.config);

  RunConfig rc = ck.config;
  rc.seed = 0;
  rc.output_dir = ".";
  if (const char* env = std::getenv("END_OUTPUT_DIR"); env && *env) rc.output_dir = env;
  rc.apply(requested);
  rc.validate();

  SampleOptions opt;
  opt.count = a.count;
  opt.steps = rc.diffusion.steps;
  opt.seed = rc.seed;
  if (!a.composition.empty()) {
    if (!ck.model.conditional()) throw UsageError("--composition given but the checkpoint is unconditional");
    KeyValueConfig kv;
    kv.set("prompts", a.composition);
    for (const auto& f : kv.list("prompts")) {
      try {
        opt.prompts.push_back(parse_composition(f, ck.model.vocab));
      } catch (const Error& e) {
        throw endiff::ParseError("composition '" + f + "': " + e.what(), 1);
      }
    }
  } else if (ck.model.conditional()) {
    throw UsageError("conditional checkpoint needs --composition");
  }

  const SampleBatch batch = sample(ck.model, opt);
  const fs::path path = output_path(rc, a.out, "samples.xyz");
  write_text(path, write_xyz(batch.molecules, ck.model.vocab));
  if (!a.manifest.empty()) {
    std::string text;
    for (const auto& m : batch.molecules) text += m.tag + "\n";
    write_text(output_path(rc, a.manifest, ""), text);
  }
  std::cout << "wrote " << batch.molecules.size() << " molecules to " << path.string() << " (T=" << opt.steps
            << ")\n";
  if (!batch.failed_chains.empty()) {
    for (const auto& f : batch.failures) std::cerr << "endiff: " << f << "\n";
    std::cerr << "endiff: " << batch.failed_chains.size() << " of " << a.count << " chains diverged\n";
    return kExitDiverged;
  }
  return kExitOk;
}

// ------------------------------------------------------------------------- eval

struct EvalArgs {
  ConfigFlags cfg;
  std::string samples;
  std::string reference;
  std::string metrics = "stability,atom_tv,distance_tv,mmd,size_tv";
  std::string manifest;
  std::string bond_table = std::string(ENDIFF_DATA_DIR) + "/bond_table.txt";
  std::string valence = std::string(ENDIFF_DATA_DIR) + "/valence_rules.txt";
  std::string out;
};

int cmd_eval(const EvalArgs& a) {
  const RunConfig rc = a.cfg.resolve();
  if (a.samples.empty()) throw UsageError("--samples is required");
  KeyValueConfig mk;
  mk.set("metrics", a.metrics);
  const auto metrics = mk.list("metrics");
  static const std::vector<std::string> known = {"stability", "atom_tv", "distance_tv", "mmd", "size_tv", "matching"};
  bool needs_reference = false;
  for (const auto& m : metrics) {
    if (std::find(known.begin(), known.end(), m) == known.end()) throw UsageError("unknown metric '" + m + "'");
    needs_reference = needs_reference || (m != "stability" && m != "matching");
  }
  if (metrics.empty()) throw UsageError("--metric is empty");
  const bool wants_matching = std::find(metrics.begin(), metrics.end(), "matching") != metrics.end();
  if (wants_matching && a.manifest.empty()) throw UsageError("--metric matching needs --manifest");
  if (needs_reference && a.reference.empty()) throw UsageError("these metrics need --reference");

  const AtomVocabulary vocab = rc.vocab();
  const auto gen = parse_xyz(detail::read_file(a.samples), vocab);
  if (gen.empty()) throw InvalidInput(a.samples + ": empty sample file");
  std::vector<MoleculeRecord> ref;
  if (needs_reference) ref = read_dataset(a.reference, vocab);

  std::string csv = "metric,value,n\n";
  const std::string n = std::to_string(gen.size());
  auto row = [&](const std::string& name, double v) { csv += name + "," + fmt(v) + "," + n + "\n"; };
  for (const auto& m : metrics) {
    if (m == "stability") {
      const BondTable table = BondTable::load(a.bond_table);
      const ValenceRules rules = ValenceRules::load(a.valence);
      long stable_atoms = 0, atoms = 0, stable_mols = 0;
      for (const auto& g : gen) {
        const Stability s = stability(g, vocab, table, rules);
        stable_atoms += s.stable_atoms;
        atoms += s.atoms;
        stable_mols += s.molecule_stable;
      }
      row("atom_stability", atoms ? static_cast<double>(stable_atoms) / atoms : 0.0);
      row("molecule_stability", static_cast<double>(stable_mols) / static_cast<double>(gen.size()));
    } else if (m == "atom_tv") {
      row("atom_tv", total_variation_atoms(gen, ref, vocab.size()));
    } else if (m == "distance_tv") {
      row("distance_tv", pairwise_distance_tv(gen, ref));
    } else if (m == "mmd") {
      row("mmd", mmd_pairwise_distances(gen, ref));
    } else if (m == "size_tv") {
      row("size_tv", total_variation(SizeDistribution::from_records(gen), SizeDistribution::from_records(ref)));
    } else if (m == "matching") {
      std::vector<std::vector<int>> prompts;
      int line_no = 0;
      std::istringstream in(detail::read_file(a.manifest));
      std::string line;
      while (std::getline(in, line)) {
        ++line_no;
        const std::string f(detail::trim(line));
        if (f.empty() || f.front() == '#') continue;
        try {
          prompts.push_back(parse_composition(f, vocab));
        } catch (const Error& e) {
          throw endiff::ParseError(a.manifest + ": " + e.what(), static_cast<std::size_t>(line_no));
        }
      }
      if (prompts.size() != gen.size())
        throw InvalidInput("manifest has " + std::to_string(prompts.size()) + " prompts for " +
                           std::to_string(gen.size()) + " samples");
      row("matching_rate", matching_rate(gen, prompts));
    }
  }
  const fs::path path = output_path(rc, a.out, "metrics.csv");
  write_text(path, csv);
  std::cout << csv;
  return kExitOk;
}

// ---------------------------------------------------------------------- inspect

int cmd_inspect(const std::string& path) {
  if (path.empty()) throw UsageError("--checkpoint is required");
  const Checkpoint ck = load_checkpoint(path);
  char sum[32];
  std::snprintf(sum, sizeof(sum), "%016llx", static_cast<unsigned long long>(ck.checksum));
  std::cout << "format version: " << ck.version << "\n"
            << "checksum: " << sum << " (valid)\n"
            << "config:\n";
  std::istringstream in(ck.config_text);
  std::string line;
  while (std::getline(in, line)) std::cout << "  " << line << "\n";
  std::cout << "segments: " << ck.model.params.segments().size() << "\n";
  for (const auto& s : ck.model.params.segments())
    std::cout << "  " << s.name << " " << s.rows << "x" << s.cols << "\n";
  std::cout << "parameters: " << ck.model.params.size() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"E(3)-equivariant neural-flow diffusion for small molecules"};
  app.require_subcommand(1);

  const auto& keys = RunConfig::keys();

  GenArgs gen;
  auto* g = app.add_subcommand("gen-synthetic", "write a synthetic XYZ dataset from built-in templates");
  gen.cfg.attach(g, {"seed", "output_dir", "vocabulary"});
  g->add_option("--templates", gen.templates, "comma-separated template names")->capture_default_str();
  g->add_option("--count", gen.count, "number of molecules")->capture_default_str();
  g->add_option("--jitter", gen.jitter, "positional noise std (Angstrom)")->capture_default_str();
  g->add_option("--out", gen.out, "output XYZ path (default <output_dir>/synthetic.xyz)");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a model; writes a checkpoint and a loss CSV");
  tr.cfg.attach(t, keys);
  tr.cfg.alias(t, "--steps", "train_steps", "number of optimizer steps");
  t->add_option("--data", tr.data, "training XYZ file");
  t->add_option("--checkpoint", tr.checkpoint, "checkpoint path (default <output_dir>/model.ckpt)");
  t->add_option("--loss-csv", tr.loss_csv, "loss trace path (default <output_dir>/loss.csv)");
  t->add_option("--log-every", tr.log_every, "progress print interval, 0 disables")->capture_default_str();

  SampleArgs sa;
  auto* s = app.add_subcommand("sample", "draw molecules from a checkpoint");
  sa.cfg.attach(s, {"seed", "output_dir"});
  sa.cfg.alias(s, "--steps", "sample_steps", "number of sampler steps T");
  s->add_option("--checkpoint", sa.checkpoint, "checkpoint path");
  s->add_option("--count", sa.count, "number of molecules")->capture_default_str();
  s->add_option("--composition", sa.composition, "comma-separated formula prompts, e.g. C3H8O");
  s->add_option("--out", sa.out, "output XYZ path (default <output_dir>/samples.xyz)");
  s->add_option("--manifest", sa.manifest, "also write one prompt formula per sample to this path");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "compute metrics of a sample file; writes a CSV");
  ev.cfg.attach(e, {"output_dir", "vocabulary"});
  e->add_option("--samples", ev.samples, "generated XYZ file");
  e->add_option("--reference", ev.reference, "reference XYZ file");
  e->add_option("--metric", ev.metrics,
                "comma list of stability, atom_tv, distance_tv, mmd, size_tv, matching")
      ->capture_default_str();
  e->add_option("--manifest", ev.manifest, "one formula per sample, for --metric matching");
  e->add_option("--bond-table", ev.bond_table, "bond length table")->capture_default_str();
  e->add_option("--valence", ev.valence, "valence rules")->capture_default_str();
  e->add_option("--out", ev.out, "metrics CSV path (default <output_dir>/metrics.csv)");

  std::string inspect_path;
  auto* in = app.add_subcommand("inspect", "summarize a checkpoint");
  in->add_option("--checkpoint", inspect_path, "checkpoint path");
  in->add_option("path", inspect_path, "checkpoint path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*g) return cmd_gen_synthetic(gen);
    if (*t) return cmd_train(tr);
    if (*s) return cmd_sample(sa);
    if (*e) return cmd_eval(ev);
    if (*in) return cmd_inspect(inspect_path);
  } catch (const UsageError& err) {
    std::cerr << "endiff: " << err.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& err) {
    std::cerr << "endiff: configuration error: " << err.what() << "\n";
    return kExitUsage;
  } catch (const CorruptCheckpoint& err) {
    std::cerr << "endiff: corrupt checkpoint: " << err.what() << "\n";
    return kExitData;
  } catch (const NumericError& err) {
    std::cerr << "endiff: numeric divergence: " << err.what() << "\n";
    return kExitDiverged;
  } catch (const SingularTransform& err) {
    std::cerr << "endiff: numeric divergence: " << err.what() << "\n";
    return kExitDiverged;
  } catch (const Error& err) {
    std::cerr << "endiff: " << err.what() << "\n";
    return kExitData;
  } catch (const std::exception& err) {
    std::cerr << "endiff: " << err.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
