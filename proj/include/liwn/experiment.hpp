#pragma once

// Drivers behind the CLI commands: train, eval, extract, gradcheck, audit and
// stability. Each validates everything it needs before writing any output.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "liwn/checkpoint.hpp"
#include "liwn/config.hpp"
#include "liwn/cost_audit.hpp"
#include "liwn/data.hpp"
#include "liwn/filters.hpp"
#include "liwn/gradcheck.hpp"
#include "liwn/models.hpp"
#include "liwn/scattering.hpp"
#include "liwn/train.hpp"

namespace liwn {

inline constexpr const char* kMetricsFile = "metrics.csv";
inline constexpr const char* kResolvedConfigFile = "config.resolved";
inline constexpr const char* kFinalCheckpoint = "final.ckpt";
inline constexpr const char* kBestCheckpoint = "best.ckpt";

inline std::string read_text_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::filesystem::path& p, const std::string& s) {
  write_file_atomic(p, s.data(), s.size());
}

namespace detail {

inline DatasetSplits load_cifar_splits(const RunConfig& c) {
  if (c.data_dir.empty()) throw ConfigError("data_dir is required for " + c.dataset);
  return c.dataset == "cifar10" ? load_cifar10(c.data_dir) : load_cifar100(c.data_dir);
}

inline std::vector<NamedTensor> run_meta(std::size_t epoch, double best_acc) {
  return {{"meta.epoch", Tensor<float>({1}, {float(epoch)})}, {"meta.best_acc", Tensor<float>({1}, {float(best_acc)})}};
}

/// Rows of an existing metrics file with epoch <= last.
inline std::vector<std::string> metrics_rows_upto(const std::filesystem::path& p, std::size_t last) {
  std::vector<std::string> rows;
  if (!std::filesystem::exists(p)) return rows;
  std::istringstream in(read_text_file(p));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (std::stoull(line.substr(0, line.find(','))) <= last) rows.push_back(line);
  }
  return rows;
}

}  // namespace detail

/// Train/test splits for the run, standardised with train-split statistics.
inline DatasetSplits load_run_data(const RunConfig& c) {
  DatasetSplits s;
  if (c.dataset == "textures") {
    s.train = synth_oriented_textures(c.texture_train, c.seed);
    s.test = synth_oriented_textures(c.texture_test, c.seed + 0x9e3779b9ULL);
  } else {
    s = detail::load_cifar_splits(c);
    if (c.train_subset) s.train = subset(s.train, c.train_subset, c.seed);
    if (c.test_subset) s.test = subset(s.test, c.test_subset, c.seed);
  }
  const ChannelStats st = channel_stats(s.train);
  normalize(s.train, st);
  normalize(s.test, st);
  return s;
}

inline ModelSpec resolve_model(const RunConfig& c) {
  ModelSpec m = c.model_file.empty() ? build_named_model(c.model, c.dataset, c.width)
                                     : parse_model_spec(read_text_file(c.model_file));
  m.resolve_shapes();
  return m;
}

/// Full training run. Writes the resolved config, metrics.csv (rewritten
/// after every epoch), and final/best checkpoints into output_dir.
template <typename T>
std::vector<EpochMetrics> train_run(const RunConfig& c, std::ostream* log = nullptr) {
  c.validate();
  const FilterSet f = load_filter_set(c.filters);
  const ModelSpec spec = resolve_model(c);
  const DatasetSplits data = load_run_data(c);
  Network<T> net = build_network<T>(spec, f, c.seed);

  std::size_t start = 0;
  double best = -1;
  std::vector<std::string> kept;
  const std::filesystem::path out(c.output_dir);
  if (!c.resume.empty()) {
    const auto ts = load_checkpoint(c.resume);
    restore_network_state(net, ts);
    const NamedTensor* e = find_tensor(ts, "meta.epoch");
    const NamedTensor* b = find_tensor(ts, "meta.best_acc");
    if (!e || !b) throw FormatError("checkpoint " + c.resume + " carries no training state");
    start = std::size_t(e->value[0]) + 1;
    best = b->value[0];
    kept = detail::metrics_rows_upto(out / kMetricsFile, start - 1);
  }

  std::filesystem::create_directories(out);
  write_text_file(out / kResolvedConfigFile, c.to_text());
  write_text_file(out / "model.txt", to_text(spec));

  std::vector<EpochMetrics> hist;
  if (log) *log << kMetricsHeader << "\n";
  for (std::size_t ep = start; ep < c.train.epochs; ++ep) {
    const EpochMetrics m = train_epoch(net, data.train, &data.test, c.train, ep, c.seed, c.augment);
    hist.push_back(m);
    if (log) *log << metrics_csv_row(m) << std::endl;
    auto state = network_state(net, true);
    const bool improved = m.test_acc > best;
    if (improved) best = m.test_acc;
    for (auto& t : detail::run_meta(ep, best)) state.push_back(t);
    save_checkpoint(out / kFinalCheckpoint, state);
    if (improved) save_checkpoint(out / kBestCheckpoint, state);
    std::string csv = std::string(kMetricsHeader) + "\n";
    for (const auto& r : kept) csv += r + "\n";
    for (const auto& h : hist) csv += metrics_csv_row(h) + "\n";
    write_text_file(out / kMetricsFile, csv);
  }
  return hist;
}

/// Test accuracy of a checkpoint.
template <typename T>
double eval_run(const RunConfig& c) {
  c.validate();
  if (c.checkpoint.empty()) throw ConfigError("eval needs checkpoint = <path>");
  const FilterSet f = load_filter_set(c.filters);
  Network<T> net = build_network<T>(resolve_model(c), f, c.seed);
  restore_network_state(net, load_checkpoint(c.checkpoint));
  const DatasetSplits data = load_run_data(c);
  return evaluate(net, data.test, c.train.batch);
}

/// Features per test image, named "<source_index>", in checkpoint format.
/// extract_layers = 0 gives order-2 scattering of the raw pixels; otherwise
/// the output of the first extract_layers layers of the model.
template <typename T>
std::vector<NamedTensor> extract_features(const RunConfig& c, const Dataset& images) {
  const FilterSet f = load_filter_set(c.filters);
  std::vector<NamedTensor> out;
  if (c.extract_layers == 0) {
    for (const auto& r : images.records)
      out.push_back({std::to_string(r.source_index), scatter<T>(r.pixels.cast<T>(), 2, f).template cast<float>()});
    return out;
  }
  const ModelSpec spec = resolve_model(c);
  if (c.extract_layers > spec.layers.size()) throw ConfigError("extract_layers exceeds the model depth");
  Network<T> net = build_network<T>(spec, f, c.seed);
  if (!c.checkpoint.empty()) restore_network_state(net, load_checkpoint(c.checkpoint));
  for (const auto& r : images.records) {
    Shape d{1};
    d.insert(d.end(), r.pixels.dims().begin(), r.pixels.dims().end());
    Tensor<T> x = r.pixels.cast<T>();
    x.reshape(d);
    Tensor<T> y = net.forward(x, Mode::eval, c.extract_layers);
    y.reshape(Shape(y.dims().begin() + 1, y.dims().end()));
    out.push_back({std::to_string(r.source_index), y.template cast<float>()});
  }
  return out;
}

/// Raw [0,1] images for extract/stability: the test split of the configured
/// dataset without standardisation.
inline Dataset raw_images(const RunConfig& c, std::size_t limit) {
  Dataset d;
  if (c.dataset == "textures") d = synth_oriented_textures(std::min(limit, c.texture_test), c.seed + 0x9e3779b9ULL);
  else d = detail::load_cifar_splits(c).test;
  if (d.records.size() > limit) d.records.resize(limit);
  return d;
}

struct StabilityRow {
  std::string probe;  // "shift" or "warp"
  double amplitude = 0;
  double max_grad = 0;
  double order1 = 0;  // shift: median ratio, order 1
  double order2 = 0;  // shift: median ratio, order 2; warp: median ||SLx-Sx||/||x||
  double pixel = 0;   // warp: median ||Lx-x||/||x||
};

inline constexpr double kWarpAmplitudes[] = {0.0, 0.14, 0.28, 0.42, 0.56, 0.7};

/// Shift ratios at 0 and 1 pixel plus the warp-distance curve.
inline std::vector<StabilityRow> stability_table(const std::vector<Tensor<double>>& images, const FilterSet& f,
                                                 std::size_t warp_seeds = 20) {
  std::vector<StabilityRow> rows;
  for (double s : {0.0, 1.0}) {
    std::vector<double> r1, r2;
    for (const auto& x : images) {
      for (auto [dr, dc] : {std::pair{s, 0.0}, std::pair{0.0, s}}) {
        r1.push_back(shift_distance_ratio(x, dr, dc, 1, f));
        r2.push_back(shift_distance_ratio(x, dr, dc, 2, f));
      }
    }
    rows.push_back({"shift", s, 0, detail::median(r1), detail::median(r2), s});
  }
  const std::vector<double> amps(std::begin(kWarpAmplitudes), std::end(kWarpAmplitudes));
  for (const auto& p : warp_stability_curve(images, amps, warp_seeds, f))
    rows.push_back({"warp", p.amplitude, p.max_grad, 0, p.scatter_rel, p.pixel_rel});
  return rows;
}

inline std::string stability_tsv(const std::vector<StabilityRow>& rows) {
  std::ostringstream os;
  os << "probe\tamplitude\tmax_grad\torder1\torder2\tpixel\n" << std::setprecision(6);
  for (const auto& r : rows)
    os << r.probe << '\t' << r.amplitude << '\t' << r.max_grad << '\t' << r.order1 << '\t' << r.order2 << '\t'
       << r.pixel << '\n';
  return os.str();
}

}  // namespace liwn
