// capsamc: dataset generation, training, evaluation and the dataset-shift
// experiments from the command line. Exit status 0 on success, 1 on runtime
// failure, 2 on usage or validation errors.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "capsamc/capsnet.hpp"
#include "capsamc/dataio.hpp"
#include "capsamc/error.hpp"
#include "capsamc/eval.hpp"
#include "capsamc/modsig.hpp"
#include "capsamc/trainer.hpp"

namespace fs = std::filesystem;
using namespace capsamc;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

// Raised for inputs that are well-formed but unusable (bad profile field,
// class mismatch, ...). Maps to exit status 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::uint64_t seed = 1;
  std::string out = "run";
  std::size_t threads = 1;
  bool deterministic = false;
};

struct ProfileOpts {
  std::string name = "toy";
  std::optional<std::size_t> count;
  std::size_t length = 0;
  std::vector<double> sps;
  std::vector<double> snr;
  std::vector<double> cfo;
  std::vector<double> rolloff;
  std::vector<std::string> schemes;
  bool strict_sps = false;
  std::string dqpsk = "standard";
};

struct TrainOpts {
  std::string net = "toy";
  std::vector<std::string> classes;
  std::size_t batch = 50;
  double lr = 0.05;
  double momentum = 0.9;
  std::size_t epochs = 20;
  double decay_factor = 0.1;
  std::size_t decay_period = 10;
  std::size_t patience = 5;
  bool no_normalize = false;
  std::vector<double> split{0.70, 0.05, 0.25};
};

std::vector<Scheme> parse_schemes(const std::vector<std::string>& names) {
  std::vector<Scheme> out;
  for (const auto& n : names) {
    try {
      out.push_back(parse_scheme(n));
    } catch (const ValueError& e) {
      throw UsageError(e.what());
    }
  }
  return out;
}

RealRange real_range(const std::vector<double>& v, RealRange fallback, const char* field) {
  if (v.empty()) return fallback;
  if (v.size() != 2) throw UsageError(std::string("--") + field + " takes two values: lo hi");
  return {v[0], v[1]};
}

DatasetProfile resolve_profile(const ProfileOpts& o) {
  DatasetProfile p;
  try {
    p = builtin_profile(o.name, o.strict_sps);
  } catch (const ValueError& e) {
    throw UsageError(e.what());
  }
  if (o.length) p.length = o.length;
  if (!o.sps.empty()) {
    if (o.sps.size() != 2) throw UsageError("--sps takes two values: lo hi");
    p.sps = {static_cast<std::int64_t>(o.sps[0]), static_cast<std::int64_t>(o.sps[1])};
  }
  p.snr_db = real_range(o.snr, p.snr_db, "snr");
  p.cfo = real_range(o.cfo, p.cfo, "cfo");
  p.rolloff = real_range(o.rolloff, p.rolloff, "rolloff");
  if (!o.schemes.empty()) p.schemes = parse_schemes(o.schemes);
  if (o.dqpsk == "pi4") {
    p.dqpsk = DqpskVariant::kPi4;
  } else if (o.dqpsk != "standard") {
    throw UsageError("--dqpsk must be standard or pi4");
  }
  if (o.count) {
    if (*o.count == 0) throw UsageError("--count must be positive");
    p.count = *o.count;
  }
  try {
    p.validate();
  } catch (const ValueError& e) {
    throw UsageError(std::string("invalid profile '") + p.name + "': " + e.what());
  }
  return p;
}

void add_profile_options(CLI::App* app, ProfileOpts& o, const std::string& prefix = "") {
  app->add_option("--" + prefix + "profile", o.name, "Built-in profile: ds1, ds2, toy, toy-ds1, toy-ds2")
      ->capture_default_str();
  app->add_option("--" + prefix + "count", o.count, "Frames to generate (default: profile count)");
  app->add_option("--" + prefix + "length", o.length, "Override frame length");
  app->add_option("--" + prefix + "sps", o.sps, "Override samples/symbol range: lo hi")->expected(2);
  app->add_option("--" + prefix + "snr", o.snr, "Override in-band SNR range (dB): lo hi")->expected(2);
  app->add_option("--" + prefix + "cfo", o.cfo, "Override CFO range (cycles/sample): lo hi")->expected(2);
  app->add_option("--" + prefix + "rolloff", o.rolloff, "Override roll-off range: lo hi")->expected(2);
  app->add_option("--" + prefix + "schemes", o.schemes, "Restrict to these schemes");
  app->add_flag("--" + prefix + "strict-sps", o.strict_sps, "Allow sps = 1");
  app->add_option("--" + prefix + "dqpsk", o.dqpsk, "DQPSK variant: standard or pi4")->capture_default_str();
}

void add_train_options(CLI::App* app, TrainOpts& o) {
  app->add_option("--net", o.net, "Network preset: toy (stride-2 second branch conv) or full")->capture_default_str();
  app->add_option("--classes", o.classes, "Schemes the network classifies (default: those in the data)");
  app->add_option("--batch", o.batch, "Mini-batch size")->capture_default_str();
  app->add_option("--lr", o.lr, "Learning rate")->capture_default_str();
  app->add_option("--momentum", o.momentum, "SGD momentum")->capture_default_str();
  app->add_option("--epochs", o.epochs, "Maximum epochs")->capture_default_str();
  app->add_option("--decay-factor", o.decay_factor, "Learning-rate decay factor")->capture_default_str();
  app->add_option("--decay-period", o.decay_period, "Epochs between decays (0: none)")->capture_default_str();
  app->add_option("--patience", o.patience, "Early-stop patience in epochs")->capture_default_str();
  app->add_flag("--no-normalize", o.no_normalize, "Skip unit-power normalization of inputs");
  app->add_option("--split", o.split, "Train/validation/test fractions")->expected(3)->capture_default_str();
}

NetworkConfig resolve_network(const TrainOpts& o, std::size_t length, const std::vector<Scheme>& fallback_classes,
                              std::uint64_t seed) {
  NetworkConfig c;
  if (o.net == "toy") {
    c = toy_network_config(length);
  } else if (o.net == "full") {
    c.input_length = length;
  } else {
    throw UsageError("--net must be toy or full");
  }
  c.classes = o.classes.empty() ? fallback_classes : parse_schemes(o.classes);
  c.seed = seed;
  try {
    shape_trace(c);
  } catch (const ShapeError& e) {
    throw UsageError(e.what());
  }
  return c;
}

TrainConfig resolve_training(const TrainOpts& o, const Common& common, const std::string& tag) {
  TrainConfig t;
  t.batch_size = o.batch;
  t.learning_rate = o.lr;
  t.momentum = o.momentum;
  t.max_epochs = o.epochs;
  t.decay_factor = o.decay_factor;
  t.decay_period = o.decay_period;
  t.patience = o.patience;
  t.seed = common.seed;
  t.deterministic = common.deterministic;
  t.normalize_input = !o.no_normalize;
  t.threads = common.threads;
  t.dataset_tag = tag;
  try {
    t.validate();
  } catch (const ValueError& e) {
    throw UsageError(e.what());
  }
  return t;
}

SplitSpec resolve_split(const TrainOpts& o, std::uint64_t seed) {
  SplitSpec s{o.split.at(0), o.split.at(1), o.split.at(2), seed};
  try {
    s.validate();
  } catch (const ValueError& e) {
    throw UsageError(e.what());
  }
  return s;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  os << text;
  os.flush();
  if (!os) throw IoError("cannot write " + path.string());
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

std::string tag_of(const std::string& experiment, std::uint64_t seed) {
  return experiment + "_seed" + std::to_string(seed);
}

std::string summary(const DatasetManifest& m) {
  std::ostringstream os;
  os << "frames " << m.frame_count() << " seed " << m.seed << '\n';
  const auto counts = m.class_counts();
  for (std::size_t k = 0; k < kNumSchemes; ++k) {
    os << "  " << scheme_name(scheme_from_label(k)) << ' ' << counts[k] << '\n';
  }
  double lo = INFINITY, hi = -INFINITY;
  std::size_t noiseless = 0;
  for (const auto& r : m.records) {
    if (!std::isfinite(r.meta.inband_snr_db)) {
      ++noiseless;
      continue;
    }
    lo = std::min(lo, r.meta.inband_snr_db);
    hi = std::max(hi, r.meta.inband_snr_db);
  }
  if (lo <= hi) os << "  snr_db " << lo << " .. " << hi << '\n';
  if (noiseless) os << "  noiseless " << noiseless << '\n';
  return os.str();
}

std::vector<Scheme> schemes_present(const DatasetManifest& m) {
  std::vector<Scheme> out;
  const auto counts = m.class_counts();
  for (std::size_t k = 0; k < kNumSchemes; ++k) {
    if (counts[k]) out.push_back(scheme_from_label(k));
  }
  return out;
}

void require_classes(const NetworkConfig& c, const DatasetManifest& m, const std::string& what) {
  for (auto s : schemes_present(m)) {
    if (std::find(c.classes.begin(), c.classes.end(), s) == c.classes.end()) {
      throw UsageError(what + " contains " + std::string(scheme_name(s)) + ", which the model does not classify");
    }
  }
}

std::function<void(const EpochRecord&)> epoch_printer() {
  return [](const EpochRecord& e) {
    std::printf("epoch %zu lr %.4g loss %.4f train_acc %.4f val_acc %.4f\n", e.epoch, e.learning_rate, e.train_loss,
                e.train_accuracy, e.validation_accuracy);
    std::fflush(stdout);
  };
}

// Trains on frames[split.train] and evaluates on frames[split.test]; writes
// checkpoint, report and test confusion under out.
void train_and_report(const std::vector<ComplexSignal>& frames, const DatasetManifest& manifest,
                      const NetworkConfig& net, const TrainConfig& tc, const SplitSpec& spec, const fs::path& out,
                      const std::string& experiment, std::uint64_t seed) {
  const auto parts = split(manifest, spec);
  for (const auto& w : parts.warnings) std::cerr << "warning: " << w << '\n';
  std::printf("split train %zu validation %zu test %zu\n", parts.train.size(), parts.validation.size(),
              parts.test.size());
  auto outcome = train(build<float>(net), frames, parts.train, parts.validation, tc, epoch_printer());
  save_model(outcome.model, out / "model.ckpt");
  write_file(out / "train_report.txt", "seed=" + std::to_string(seed) + '\n' + outcome.report.to_text());
  const auto tag = tag_of(experiment, seed);
  if (!parts.test.empty()) {
    const auto cls = classify(outcome.model, frames, parts.test, tc.normalize_input, tc.threads);
    const auto cm = ConfusionMatrix::from(cls);
    const auto curve = accuracy_vs_snr(cls);
    emit_report(cm, &curve, out, tag);
    std::printf("test accuracy %.4f (%zu frames)\n", cm.accuracy(), cm.total());
  }
  std::printf("best epoch %zu val_acc %.4f\n", outcome.report.best_epoch.value_or(0),
              outcome.report.best_validation_accuracy);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Capsule-network modulation classifier"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "Read options from an INI/TOML file (e.g. a run's config.ini)");

  Common common;
  app.add_option("--seed", common.seed, "Master seed")->capture_default_str();
  app.add_option("--out", common.out, "Run directory for all outputs")->capture_default_str();
  app.add_option("--threads", common.threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  app.add_flag("--deterministic", common.deterministic, "Omit wall-clock times so reruns are byte-identical");

  // generate
  ProfileOpts gen_profile;
  auto* gen = app.add_subcommand("generate", "Generate a synthetic dataset")->configurable();
  add_profile_options(gen, gen_profile);

  // augment
  std::string aug_in;
  std::vector<double> aug_range;
  auto* aug = app.add_subcommand("augment", "Lower in-band SNR by adding noise")->configurable();
  aug->add_option("--data", aug_in, "Source dataset directory")->required()->check(CLI::ExistingDirectory);
  aug->add_option("--snr", aug_range, "Target SNR range (dB): lo hi")->required()->expected(2);

  // train
  std::string train_data;
  TrainOpts train_opts;
  auto* trn = app.add_subcommand("train", "Train on a dataset")->configurable();
  trn->add_option("--data", train_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  add_train_options(trn, train_opts);

  // eval
  std::string eval_model, eval_data, eval_format = "csv", eval_which = "all";
  double bin_width = 1.0;
  std::vector<double> eval_split{0.70, 0.05, 0.25};
  bool eval_no_normalize = false;
  auto* evl = app.add_subcommand("eval", "Confusion matrix and accuracy vs SNR")->configurable();
  evl->add_option("--model", eval_model, "Checkpoint")->required()->check(CLI::ExistingFile);
  evl->add_option("--data", eval_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  evl->add_option("--frames", eval_which, "all, or train/validation/test of the seeded split")
      ->capture_default_str()
      ->check(CLI::IsMember({"all", "train", "validation", "test"}));
  evl->add_option("--split", eval_split, "Split fractions used with --frames")->expected(3)->capture_default_str();
  evl->add_option("--bin-width", bin_width, "SNR bin width (dB)")->capture_default_str();
  evl->add_option("--format", eval_format, "csv or lines")->capture_default_str()->check(CLI::IsMember({"csv", "lines"}));
  evl->add_flag("--no-normalize", eval_no_normalize, "Skip unit-power normalization of inputs");

  // shift
  ProfileOpts shift_a, shift_b;
  shift_a.name = "toy-ds1";
  shift_b.name = "toy-ds2";
  TrainOpts shift_train;
  bool allow_overlap = false;
  auto* shf = app.add_subcommand("shift", "Train on one profile, test on another")->configurable();
  add_profile_options(shf, shift_a, "train-");
  add_profile_options(shf, shift_b, "test-");
  add_train_options(shf, shift_train);
  shf->add_flag("--allow-overlap", allow_overlap, "Permit overlapping CFO intervals");

  // mix
  std::vector<std::string> mix_data;
  std::vector<std::size_t> mix_take;
  TrainOpts mix_train;
  auto* mix = app.add_subcommand("mix", "Merge datasets, then train and evaluate on the mixture")->configurable();
  mix->add_option("--data", mix_data, "Source dataset directories")->required()->check(CLI::ExistingDirectory);
  mix->add_option("--take", mix_take, "Frames sampled from each source")->required();
  add_train_options(mix, mix_train);

  // inspect
  std::string inspect_path;
  auto* ins = app.add_subcommand("inspect", "Summarize a dataset directory or checkpoint")->configurable();
  ins->add_option("path", inspect_path, "Dataset directory or checkpoint")->required()->check(CLI::ExistingPath);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  const fs::path out(common.out);
  try {
    // Resolved options of the root and the active subcommand only, so the
    // file can be fed back through --config.
    auto snapshot = [&]() {
      const auto formatter = app.get_config_formatter_base();
      std::ostringstream text;
      text << "seed=" << common.seed << "\nout=\"" << common.out << "\"\nthreads=" << common.threads
           << "\ndeterministic=" << (common.deterministic ? "true" : "false") << '\n';
      for (const auto* sub : app.get_subcommands()) {
        text << '[' << sub->get_name() << "]\n";
        std::istringstream lines(formatter->to_config(sub, true, false, ""));
        for (std::string line; std::getline(lines, line);) {
          if (!line.ends_with("=\"\"")) text << line << '\n';
        }
      }
      make_dir(out);
      write_file(out / "config.ini", text.str());
    };

    if (*gen) {
      const auto profile = resolve_profile(gen_profile);
      if (profile.count == 0) throw UsageError("--count must be positive");
      snapshot();
      DatasetWriter writer(out / "dataset", "profile " + profile.name, common.seed);
      for (std::size_t i = 0; i < profile.count; ++i) writer.append(generate_frame(profile, i, common.seed));
      const auto m = writer.finish();
      std::cout << summary(m);
    } else if (*aug) {
      if (!(aug_range[0] <= aug_range[1])) throw UsageError("--snr needs lo <= hi");
      snapshot();
      DatasetReader reader(aug_in);
      DatasetWriter writer(out / "dataset", reader.manifest().description + " augmented", common.seed);
      std::size_t skipped = 0;
      for (std::size_t i = 0; i < reader.size(); ++i) {
        auto frame = reader.read(i);
        const auto source = reader.manifest().records[i].source;
        Rng rng = Rng::stream(common.seed, i);
        const double target = rng.uniform(aug_range[0], aug_range[1]);
        if (target >= frame.meta.inband_snr_db) {
          ++skipped;
        } else {
          add_noise_to_snr(frame, target, rng);
          normalize_unit_power(frame.samples);
        }
        writer.append(frame, source);
      }
      const auto m = writer.finish();
      if (skipped) std::cerr << "warning: " << skipped << " frames already at or below their target SNR were left unchanged\n";
      std::cout << summary(m) << "skipped " << skipped << '\n';
    } else if (*trn) {
      const auto manifest = read_manifest(train_data);
      if (manifest.frame_count() == 0) throw UsageError("dataset is empty");
      const auto length = manifest.records.front().samples;
      const auto net = resolve_network(train_opts, length, schemes_present(manifest), common.seed);
      require_classes(net, manifest, "dataset");
      const auto tc = resolve_training(train_opts, common, manifest.description);
      const auto spec = resolve_split(train_opts, common.seed);
      snapshot();
      const auto frames = read_dataset(train_data);
      train_and_report(frames, manifest, net, tc, spec, out, "train", common.seed);
    } else if (*evl) {
      const auto model = load_model<float>(eval_model);
      const auto manifest = read_manifest(eval_data);
      require_classes(model.config, manifest, "dataset");
      std::vector<std::size_t> idx;
      if (eval_which == "all") {
        idx.resize(manifest.frame_count());
        std::iota(idx.begin(), idx.end(), 0);
      } else {
        TrainOpts tmp;
        tmp.split = eval_split;
        const auto parts = split(manifest, resolve_split(tmp, common.seed));
        idx = eval_which == "train" ? parts.train : eval_which == "validation" ? parts.validation : parts.test;
      }
      if (idx.empty()) throw UsageError("no frames selected for evaluation");
      snapshot();
      const auto frames = read_dataset(eval_data);
      const auto cls = classify(model, frames, idx, !eval_no_normalize, common.threads);
      const auto cm = ConfusionMatrix::from(cls);
      SnrAccuracyCurve curve;
      try {
        curve = accuracy_vs_snr(cls, bin_width);
      } catch (const ValueError& e) {
        throw UsageError(e.what());
      }
      const auto files = emit_report(cm, &curve, out, tag_of("eval", common.seed),
                                     eval_format == "csv" ? ReportFormat::kCsv : ReportFormat::kLines);
      std::printf("accuracy %.4f (%zu frames)\n", cm.accuracy(), cm.total());
      for (const auto& f : files) std::printf("wrote %s\n", f.string().c_str());
    } else if (*shf) {
      ShiftConfig sc;
      sc.train_profile = resolve_profile(shift_a);
      sc.test_profile = resolve_profile(shift_b);
      sc.train_count = sc.train_profile.count;
      sc.test_count = sc.test_profile.count;
      sc.seed = common.seed;
      sc.allow_overlap = allow_overlap;
      if (!allow_overlap && !cfo_intervals_disjoint(sc.train_profile, sc.test_profile)) {
        throw UsageError("CFO intervals of '" + sc.train_profile.name + "' and '" + sc.test_profile.name +
                         "' overlap; pass --allow-overlap to run anyway");
      }
      sc.network = resolve_network(shift_train, sc.train_profile.length, sc.train_profile.schemes, common.seed);
      sc.training = resolve_training(shift_train, common, sc.train_profile.name);
      sc.split = resolve_split(shift_train, common.seed);
      try {
        sc.validate();
      } catch (const ValueError& e) {
        throw UsageError(e.what());
      }
      snapshot();
      const auto report = shift_experiment(sc);
      const auto tag = tag_of("shift", common.seed);
      emit_report(report.matched, nullptr, out, tag + "_matched");
      emit_report(report.shifted, nullptr, out, tag + "_shifted");
      write_file(out / (tag + "_report.txt"), report.to_text());
      write_file(out / "train_report.txt", "seed=" + std::to_string(common.seed) + '\n' + report.training.to_text());
      std::printf("matched %.4f shifted %.4f gap %.4f\n", report.matched_accuracy, report.shifted_accuracy,
                  report.gap());
    } else if (*mix) {
      if (mix_data.size() != mix_take.size()) throw UsageError("give one --take per --data");
      std::vector<fs::path> sources(mix_data.begin(), mix_data.end());
      std::size_t length = 0;
      for (const auto& s : sources) {
        const auto m = read_manifest(s);
        if (m.frame_count() == 0) throw UsageError(s.string() + " is empty");
        if (length && m.records.front().samples != length) throw UsageError("sources differ in frame length");
        length = m.records.front().samples;
      }
      const auto tc = resolve_training(mix_train, common, "mix");
      const auto spec = resolve_split(mix_train, common.seed);
      snapshot();
      DatasetManifest merged;
      try {
        merged = merge_datasets(sources, mix_take, common.seed, out / "mixed");
      } catch (const ValueError& e) {
        throw UsageError(e.what());
      }
      const auto net = resolve_network(mix_train, length, schemes_present(merged), common.seed);
      require_classes(net, merged, "mixed dataset");
      std::cout << summary(merged);
      const auto frames = read_dataset(out / "mixed");
      train_and_report(frames, merged, net, tc, spec, out, "mix", common.seed);
    } else if (*ins) {
      const fs::path p(inspect_path);
      if (fs::is_directory(p)) {
        const auto m = read_manifest(p);
        std::cout << "dataset " << p.string() << " format " << m.format_version << '\n'
                  << "description " << m.description << '\n'
                  << summary(m);
        std::map<std::string, std::size_t> sources;
        for (const auto& r : m.records) ++sources[r.source];
        for (const auto& [k, v] : sources) std::cout << "  source " << k << ' ' << v << '\n';
      } else {
        const auto model = load_model<float>(p);
        std::cout << "checkpoint " << p.string() << '\n'
                  << model.config.serialize() << "shape " << model.trace.describe(model.config) << '\n'
                  << "provenance dataset=" << model.provenance.dataset_tag << " epoch=" << model.provenance.epoch
                  << " val_acc=" << model.provenance.validation_accuracy << '\n';
        std::size_t n = 0;
        for (const auto& [k, v] : model.params) n += v.size();
        std::cout << "parameters " << n << '\n';
      }
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ValueError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return 0;
}
