#pragma once

// Model descriptions (plain-text, one layer per line), the reference VGG,
// invX swaps, ScatNet A-D, and construction of runnable networks.

#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "liwn/error.hpp"
#include "liwn/filters.hpp"
#include "liwn/invariant_layer.hpp"
#include "liwn/nn.hpp"

namespace liwn {

struct LayerSpec {
  std::string name;
  std::string kind;  // conv bn relu maxpool gap fc dropout inv
  std::map<std::string, std::string> attrs;
  Shape in_shape, out_shape;  // per sample, filled by resolve_shapes

  bool has(const std::string& k) const { return attrs.count(k) > 0; }
  std::string get(const std::string& k, const std::string& def = "") const {
    auto it = attrs.find(k);
    return it == attrs.end() ? def : it->second;
  }
  std::size_t get_size(const std::string& k) const {
    auto it = attrs.find(k);
    if (it == attrs.end()) throw ConfigError("layer " + name + " lacks attribute '" + k + "'");
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(it->second, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != it->second.size() || it->second.empty() || it->second[0] == '-')
      throw ConfigError("layer " + name + ": '" + k + "' must be a non-negative integer");
    return std::size_t(v);
  }
  std::size_t get_size(const std::string& k, std::size_t def) const { return has(k) ? get_size(k) : def; }
  double get_double(const std::string& k, double def) const {
    if (!has(k)) return def;
    try {
      std::size_t pos = 0;
      const double v = std::stod(get(k), &pos);
      if (pos == get(k).size()) return v;
    } catch (const std::exception&) {
    }
    throw ConfigError("layer " + name + ": '" + k + "' must be a number");
  }
  bool get_bool(const std::string& k, bool def) const {
    if (!has(k)) return def;
    const std::string v = get(k);
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    throw ConfigError("layer " + name + ": '" + k + "' must be 0 or 1");
  }
};

struct ModelSpec {
  std::string name;
  std::size_t classes = 10;
  Shape input = {3, 32, 32};
  std::string filters = "near_sym_a";
  std::vector<LayerSpec> layers;

  const LayerSpec* find(const std::string& n) const {
    for (const auto& l : layers)
      if (l.name == n) return &l;
    return nullptr;
  }
  LayerSpec* find(const std::string& n) {
    for (auto& l : layers)
      if (l.name == n) return &l;
    return nullptr;
  }

  /// Layers with learned spatial or mixing weights (convolutions and learned
  /// invariant layers; the classifier is not counted).
  std::size_t learned_layer_count() const {
    std::size_t n = 0;
    for (const auto& l : layers)
      if (l.kind == "conv" || (l.kind == "inv" && l.get_bool("learned", true))) ++n;
    return n;
  }

  /// Fills in/out shapes of every layer; throws ShapeError on any mismatch.
  void resolve_shapes();
};

namespace detail {

inline Shape resolve_layer(const LayerSpec& l, const Shape& in) {
  auto need3 = [&] {
    if (in.size() != 3) throw ShapeError(l.name + " expects a [C,H,W] input, got " + shape_str(in));
  };
  auto need_channels = [&](std::size_t c) {
    if (in.empty() || in[0] != c)
      throw ShapeError(l.name + " expects " + std::to_string(c) + " input channels, got " + shape_str(in));
  };
  if (l.kind == "conv") {
    need3();
    need_channels(l.get_size("in"));
    const std::size_t k = l.get_size("k", 3), s = l.get_size("stride", 1);
    if (k % 2 == 0) throw ConfigError(l.name + ": kernel size must be odd");
    if (s != 1 && s != 2) throw ConfigError(l.name + ": stride must be 1 or 2");
    return {l.get_size("out"), s == 1 ? in[1] : (in[1] + 1) / 2, s == 1 ? in[2] : (in[2] + 1) / 2};
  }
  if (l.kind == "inv") {
    need3();
    need_channels(l.get_size("in"));
    if (in[1] % 2 || in[2] % 2) throw ShapeError(l.name + " needs even extents, got " + shape_str(in));
    const bool up = l.get_bool("up", false);
    return {l.get_size("out"), up ? in[1] : in[1] / 2, up ? in[2] : in[2] / 2};
  }
  if (l.kind == "bn") {
    need_channels(l.get_size("channels"));
    return in;
  }
  if (l.kind == "relu" || l.kind == "dropout") return in;
  if (l.kind == "maxpool") {
    need3();
    if (in[1] % 2 || in[2] % 2) throw ShapeError(l.name + " needs even extents");
    return {in[0], in[1] / 2, in[2] / 2};
  }
  if (l.kind == "gap") {
    need3();
    return {in[0]};
  }
  if (l.kind == "fc") {
    if (shape_size(in) != l.get_size("in"))
      throw ShapeError(l.name + " expects " + l.get("in") + " features, got " + shape_str(in));
    return {l.get_size("out")};
  }
  throw ConfigError("unknown layer kind '" + l.kind + "' (" + l.name + ")");
}

}  // namespace detail

inline void ModelSpec::resolve_shapes() {
  std::set<std::string> names;
  Shape s = input;
  for (auto& l : layers) {
    if (!names.insert(l.name).second) throw ConfigError("duplicate layer name " + l.name);
    l.in_shape = s;
    s = detail::resolve_layer(l, s);
    l.out_shape = s;
  }
  if (s != Shape{classes})
    throw ShapeError("model " + name + " ends in " + shape_str(s) + ", expected " + std::to_string(classes) +
                     " logits");
}

/// Text form:
///   model <name>
///   input <C> <H> <W>
///   classes <n>
///   filters <set>
///   layer <name> <kind> key=value ...
inline std::string to_text(const ModelSpec& m) {
  std::ostringstream os;
  os << "model " << m.name << "\n";
  os << "input";
  for (auto d : m.input) os << ' ' << d;
  os << "\nclasses " << m.classes << "\nfilters " << m.filters << "\n";
  for (const auto& l : m.layers) {
    os << "layer " << l.name << ' ' << l.kind;
    for (const auto& [k, v] : l.attrs) os << ' ' << k << '=' << v;
    os << '\n';
  }
  return os.str();
}

inline ModelSpec parse_model_spec(const std::string& text) {
  ModelSpec m;
  m.layers.clear();
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    auto bad = [&](const std::string& why) {
      return ConfigError("model spec line " + std::to_string(lineno) + ": " + why);
    };
    if (key == "model") {
      if (!(ls >> m.name)) throw bad("missing model name");
    } else if (key == "input") {
      m.input.clear();
      std::size_t d;
      while (ls >> d) m.input.push_back(d);
      if (m.input.size() != 3) throw bad("input needs C H W");
    } else if (key == "classes") {
      if (!(ls >> m.classes) || m.classes < 2) throw bad("classes must be >= 2");
    } else if (key == "filters") {
      if (!(ls >> m.filters)) throw bad("missing filter set");
    } else if (key == "layer") {
      LayerSpec l;
      if (!(ls >> l.name >> l.kind)) throw bad("layer needs a name and a kind");
      std::string kv;
      while (ls >> kv) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos || eq == 0) throw bad("expected key=value, got '" + kv + "'");
        l.attrs[kv.substr(0, eq)] = kv.substr(eq + 1);
      }
      m.layers.push_back(std::move(l));
    } else {
      throw bad("unknown directive '" + key + "'");
    }
  }
  if (m.layers.empty()) throw ConfigError("model spec has no layers");
  m.resolve_shapes();
  return m;
}

namespace detail {

inline LayerSpec make_layer(std::string name, std::string kind, std::map<std::string, std::string> attrs = {}) {
  LayerSpec l;
  l.name = std::move(name);
  l.kind = std::move(kind);
  l.attrs = std::move(attrs);
  return l;
}

inline void conv_block(ModelSpec& m, const std::string& tag, std::size_t in, std::size_t out, std::size_t stride) {
  m.layers.push_back(make_layer("conv" + tag, "conv",
                                {{"in", std::to_string(in)},
                                 {"out", std::to_string(out)},
                                 {"k", "3"},
                                 {"stride", std::to_string(stride)},
                                 {"bias", "0"}}));
  m.layers.push_back(make_layer("bn" + tag, "bn", {{"channels", std::to_string(out)}}));
  m.layers.push_back(make_layer("relu" + tag, "relu"));
}

inline void head(ModelSpec& m, std::size_t features) {
  m.layers.push_back(make_layer("gap", "gap"));
  m.layers.push_back(make_layer("fc", "fc", {{"in", std::to_string(features)}, {"out", std::to_string(m.classes)}}));
}

}  // namespace detail

inline std::size_t dataset_classes(const std::string& dataset) {
  if (dataset == "cifar10") return 10;
  if (dataset == "cifar100") return 100;
  if (dataset == "textures") return 2;
  throw ConfigError("unknown dataset '" + dataset + "'");
}

enum class Downsample { stride, maxpool };

/// convA..convF (C, C, 2C, 2C, 4C, 4C), each followed by BN and ReLU; the
/// resolution halves at convC and convE; global average pool and fc.
inline ModelSpec build_reference_vgg(const std::string& dataset, std::size_t C = 64,
                                     Downsample down = Downsample::stride) {
  ModelSpec m;
  m.name = "ref";
  m.classes = dataset_classes(dataset);
  const struct {
    const char* tag;
    std::size_t in, out;
    bool halves;
  } rows[] = {{"A", 3, C, false},         {"B", C, C, false},         {"C", C, 2 * C, true},
              {"D", 2 * C, 2 * C, false}, {"E", 2 * C, 4 * C, true}, {"F", 4 * C, 4 * C, false}};
  for (const auto& r : rows) {
    const bool strided = r.halves && down == Downsample::stride;
    detail::conv_block(m, r.tag, r.in, r.out, strided ? 2 : 1);
    if (r.halves && down == Downsample::maxpool)
      m.layers.push_back(detail::make_layer(std::string("pool") + r.tag, "maxpool"));
  }
  detail::head(m, 4 * C);
  m.resolve_shapes();
  return m;
}

/// Replaces convX by an invariant layer invX with the same channel counts.
/// Slots that keep full resolution upsample the half-resolution output.
/// BN and ReLU after the slot are kept, so the invariant layer itself has no
/// ReLU.
inline ModelSpec apply_inv_swaps(ModelSpec m, const std::set<char>& swaps) {
  for (char s : swaps) {
    LayerSpec* l = m.find(std::string("conv") + s);
    if (!l) throw ConfigError(std::string("no layer conv") + s + " to swap");
    const bool keep_res = l->out_shape.size() == 3 && l->in_shape.size() == 3 && l->out_shape[1] == l->in_shape[1];
    LayerSpec inv = detail::make_layer(std::string("inv") + s, "inv",
                                       {{"in", l->get("in")},
                                        {"out", l->get("out")},
                                        {"learned", "1"},
                                        {"relu", "0"},
                                        {"up", keep_res ? "1" : "0"}});
    *l = inv;
  }
  if (!swaps.empty()) m.name += "_inv";
  m.resolve_shapes();
  return m;
}

inline std::set<char> parse_swaps(const std::string& s) {
  std::set<char> out;
  for (char c : s) {
    if (c == ',' || c == ' ' || c == '+') continue;
    const char u = char(std::toupper(static_cast<unsigned char>(c)));
    if (u < 'A' || u > 'F') throw ConfigError(std::string("unknown swap slot '") + c + "'");
    out.insert(u);
  }
  return out;
}

inline constexpr double kScatNetDropout = 0.3;

/// ScatNet A-D. A: two fixed order-1 scattering stages (no learning between
/// orders); B: the same with learned square mixing (+BN, ReLU); C/D: A/B with
/// a 3->16 conv in front. Then four 3x3 convs (2w, 2w, 4w, 4w) at 1/4
/// resolution, dropout after the last three, global average pool, fc.
inline ModelSpec build_scatnet(char variant, std::size_t width = 96, const std::string& dataset = "cifar10") {
  variant = char(std::toupper(static_cast<unsigned char>(variant)));
  if (variant < 'A' || variant > 'D') throw ConfigError(std::string("unknown ScatNet variant '") + variant + "'");
  const bool learned = variant == 'B' || variant == 'D';
  const bool front = variant == 'C' || variant == 'D';
  ModelSpec m;
  m.name = std::string("scatnet_") + char(std::tolower(variant));
  m.classes = dataset_classes(dataset);
  std::size_t c = 3;
  if (front) {
    detail::conv_block(m, "0", 3, 16, 1);
    c = 16;
  }
  for (int k = 1; k <= 2; ++k) {
    const std::string n = std::to_string(k);
    const std::size_t out = kPropagatorWidth * c;
    m.layers.push_back(detail::make_layer("scat" + n, "inv",
                                          {{"in", std::to_string(c)},
                                           {"out", std::to_string(out)},
                                           {"learned", learned ? "1" : "0"},
                                           {"relu", "0"},
                                           {"up", "0"}}));
    if (learned) {
      m.layers.push_back(detail::make_layer("bnS" + n, "bn", {{"channels", std::to_string(out)}}));
      m.layers.push_back(detail::make_layer("reluS" + n, "relu"));
    }
    c = out;
  }
  const std::size_t w2 = 2 * width, w4 = 4 * width;
  const struct {
    const char* tag;
    std::size_t out;
  } convs[] = {{"C", w2}, {"D", w2}, {"E", w4}, {"F", w4}};
  bool first = true;
  for (const auto& r : convs) {
    detail::conv_block(m, r.tag, c, r.out, 1);
    if (!first)
      m.layers.push_back(detail::make_layer(std::string("drop") + r.tag, "dropout",
                                            {{"p", std::to_string(kScatNetDropout)}}));
    first = false;
    c = r.out;
  }
  detail::head(m, c);
  m.resolve_shapes();
  return m;
}

/// Fixed order-2 scattering, batch norm, global average pool and a linear
/// classifier: the scattering front end + linear head used on toy data.
inline ModelSpec build_scatter_linear(const std::string& dataset = "textures", std::size_t C = 3) {
  ModelSpec m;
  m.name = "scatter_linear";
  m.classes = dataset_classes(dataset);
  m.input = {C, 32, 32};
  std::size_t c = C;
  for (int k = 1; k <= 2; ++k) {
    m.layers.push_back(detail::make_layer("scat" + std::to_string(k), "inv",
                                          {{"in", std::to_string(c)},
                                           {"out", std::to_string(kPropagatorWidth * c)},
                                           {"learned", "0"},
                                           {"relu", "0"}}));
    c *= kPropagatorWidth;
  }
  m.layers.push_back(detail::make_layer("bnS", "bn", {{"channels", std::to_string(c)}}));
  detail::head(m, c);
  m.resolve_shapes();
  return m;
}

/// "ref", "ref+B,D" (swaps), "scatnet_a".."scatnet_d", "scatter_linear".
inline ModelSpec build_named_model(const std::string& model, const std::string& dataset, std::size_t width) {
  if (model.rfind("scatnet_", 0) == 0 && model.size() == 9) return build_scatnet(model[8], width, dataset);
  if (model == "scatter_linear") return build_scatter_linear(dataset);
  if (model == "ref") return build_reference_vgg(dataset, width);
  if (model.rfind("ref+", 0) == 0) return apply_inv_swaps(build_reference_vgg(dataset, width), parse_swaps(model.substr(4)));
  throw ConfigError("unknown model '" + model + "'");
}

/// Instantiates a spec. Weights come from SeedRng(seed); fixed invariant
/// layers get identity mixing (pure scattering when out = 7 in).
template <typename T>
Network<T> build_network(ModelSpec spec, const FilterSet& filters, std::uint64_t seed) {
  spec.resolve_shapes();
  SeedRng rng(seed);
  Network<T> net;
  for (const auto& l : spec.layers) {
    if (l.kind == "conv") {
      net.template emplace<Conv2d<T>>(l.name, l.get_size("in"), l.get_size("out"), l.get_size("k", 3),
                                      l.get_size("stride", 1), l.get_bool("bias", false), rng);
    } else if (l.kind == "bn") {
      net.template emplace<BatchNorm2d<T>>(l.name, l.get_size("channels"));
    } else if (l.kind == "relu") {
      net.template emplace<ReLU<T>>(l.name);
    } else if (l.kind == "maxpool") {
      net.template emplace<MaxPool2x<T>>(l.name);
    } else if (l.kind == "gap") {
      net.template emplace<GlobalAvgPool<T>>(l.name);
    } else if (l.kind == "fc") {
      net.template emplace<Linear<T>>(l.name, l.get_size("in"), l.get_size("out"), rng);
    } else if (l.kind == "dropout") {
      net.template emplace<Dropout<T>>(l.name, l.get_double("p", kScatNetDropout));
    } else if (l.kind == "inv") {
      const std::size_t cin = l.get_size("in"), cout = l.get_size("out");
      const bool learned = l.get_bool("learned", true);
      InvariantLayerFlags fl;
      fl.apply_relu = l.get_bool("relu", false);
      fl.upsample_out = l.get_bool("up", false);
      fl.magnitude_floor = l.get_double("eps", 0.0);
      const std::string proj = l.get("proj", "none");
      if (proj == "row") fl.nonexpansive_projection = true;
      else if (proj == "spectral") fl.spectral_projection = true;
      else if (proj != "none") throw ConfigError(l.name + ": unknown projection '" + proj + "'");
      InvariantLayerParams<T> p;
      if (learned) {
        p = init_invariant_params<T>(cin, cout, filters, rng, fl);
      } else {
        if (cout != kPropagatorWidth * cin)
          throw ConfigError(l.name + ": a fixed invariant layer needs out = 7 * in");
        p = make_identity_mixing<T>(cin, lowpass_dc_gain(filters), 0.0);
      }
      p.flags = fl;
      if (l.has("alpha")) p.alpha.fill(T(l.get_double("alpha", 0.0)));
      net.template emplace<InvariantModule<T>>(l.name, std::move(p), filters, learned,
                                               l.get_bool("learn_alpha", false));
    } else {
      throw ConfigError("unknown layer kind '" + l.kind + "'");
    }
  }
  if (net.output_shape(spec.input) != Shape{spec.classes})
    throw ShapeError("built network output does not match the spec");
  return net;
}

}  // namespace liwn
