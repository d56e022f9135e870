// liwn: train | eval | extract | gradcheck | audit | stability

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "liwn/liwn.hpp"

namespace {

using namespace liwn;

struct Common {
  std::string config;
  std::vector<std::string> sets;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "key = value config file")->check(CLI::ExistingFile);
  sub->add_option("--set", c.sets, "override, key=value (repeatable)");
}

int cmd_train(const RunConfig& c) {
  if (c.precision == "f64") train_run<double>(c, &std::cout);
  else train_run<float>(c, &std::cout);
  std::cout << "outputs in " << c.output_dir << "\n";
  return 0;
}

int cmd_eval(const RunConfig& c) {
  const double acc = c.precision == "f64" ? eval_run<double>(c) : eval_run<float>(c);
  std::cout << "test_acc " << acc << "\n";
  return 0;
}

int cmd_extract(const RunConfig& c, std::size_t limit, std::string out) {
  const Dataset images = raw_images(c, limit);
  const auto feats = c.precision == "f64" ? extract_features<double>(c, images) : extract_features<float>(c, images);
  if (out.empty()) out = (std::filesystem::path(c.output_dir) / "features.ckpt").string();
  save_checkpoint(out, feats);
  std::cout << feats.size() << " features of shape " << shape_str(feats.at(0).value.dims()) << " -> " << out << "\n";
  return 0;
}

int cmd_gradcheck(const RunConfig& c) {
  const FilterSet f = load_filter_set(c.filters);
  GradcheckOptions o;
  o.seed = c.seed + 7;
  bool ok = true;
  std::cout << "layer kinds (2x" << c.gradcheck_side << "x" << c.gradcheck_side << ")\n";
  for (const auto& r : gradcheck_layer_kinds(f, c.gradcheck_side, o, c.gradcheck_fault)) {
    std::cout << r.text();
    ok = ok && r.pass();
  }
  std::cout << "model variants\n";
  GradcheckOptions mo = model_gradcheck_options();
  mo.seed = o.seed;
  for (const auto& r : gradcheck_model_variants(f, c.gradcheck_side, mo)) {
    std::cout << r.text();
    ok = ok && r.pass();
  }
  std::cout << (ok ? "gradcheck PASS" : "gradcheck FAIL") << "\n";
  return ok ? 0 : 1;
}

int cmd_audit(const RunConfig& c) {
  const FilterSet f = load_filter_set(c.filters);
  const CostReport rep = audit_model(resolve_model(c), {}, &f);
  const std::filesystem::path out(c.output_dir);
  std::filesystem::create_directories(out);
  write_text_file(out / "audit.txt", report_table(rep));
  write_text_file(out / "audit.tsv", report_tsv(rep));
  std::cout << report_table(rep);
  return 0;
}

int cmd_stability(const RunConfig& c, const std::string& source, std::size_t count) {
  const FilterSet f = load_filter_set(c.filters);
  const Dataset d = source == "proxy" ? synth_natural_proxy(count, c.seed) : raw_images(c, count);
  std::vector<Tensor<double>> images;
  for (const auto& r : d.records) images.push_back(r.pixels.cast<double>());
  const std::string tsv = stability_tsv(stability_table(images, f));
  const std::filesystem::path out(c.output_dir);
  std::filesystem::create_directories(out);
  write_text_file(out / "stability.tsv", tsv);
  std::cout << tsv;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Locally invariant wavelet layers: training, auditing and diagnostics"};
  app.require_subcommand(1);
  Common common;
  std::size_t limit = 100, count = 20;
  std::string extract_out, source = "dataset";

  auto* train = app.add_subcommand("train", "train a model, writing metrics.csv and checkpoints");
  auto* eval = app.add_subcommand("eval", "test accuracy of a checkpoint");
  auto* extract = app.add_subcommand("extract", "write per-image features in checkpoint format");
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every layer kind and model variant");
  auto* audit = app.add_subcommand("audit", "parameter and multiply counts");
  auto* stab = app.add_subcommand("stability", "scattering distance under shifts and warps");
  for (auto* s : {train, eval, extract, grad, audit, stab}) add_common(s, common);
  extract->add_option("--limit", limit, "number of test images")->check(CLI::PositiveNumber);
  extract->add_option("--out", extract_out, "feature file (default <output_dir>/features.ckpt)");
  stab->add_option("--source", source, "dataset or proxy")->check(CLI::IsMember({"dataset", "proxy"}));
  stab->add_option("--images", count, "number of images")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    const RunConfig c = load_run_config(common.config, common.sets);
    if (train->parsed()) return cmd_train(c);
    if (eval->parsed()) return cmd_eval(c);
    if (extract->parsed()) return cmd_extract(c, limit, extract_out);
    if (grad->parsed()) return cmd_gradcheck(c);
    if (audit->parsed()) return cmd_audit(c);
    if (stab->parsed()) return cmd_stability(c, source, count);
  } catch (const liwn::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
