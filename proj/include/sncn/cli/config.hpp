#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "sncn/core/error.hpp"
#include "sncn/engine/invert.hpp"
#include "sncn/engine/train.hpp"
#include "sncn/eval/corruption.hpp"

namespace sncn::cli {

struct EvalOptions {
  std::string checkpoint;
  std::string split = "shifted"; // train | test | shifted
  std::vector<CorruptionKind> kinds = all_corruption_kinds();
  std::string reference; // CSV error table for the normalized mCE
  std::size_t batch_size = 100;
};

struct StylizeOptions {
  std::string mode = "exchange"; // exchange | adjust
  // adjust target; when unset the two inputs' statistics are averaged
  std::optional<std::array<double, 3>> target_mean;
  std::optional<std::array<double, 3>> target_std;
};

struct CorruptOptions {
  std::vector<CorruptionKind> kinds = all_corruption_kinds();
};

struct InvertOptions {
  InvertConfig invert;
  std::string checkpoint;
  std::string donor;
};

/// Everything a subcommand may read. `run.seed` seeds training, corruption
/// grids and inversion noise.
struct RunConfig {
  TrainConfig train;
  EvalOptions eval;
  StylizeOptions stylize;
  CorruptOptions corrupt;
  InvertOptions invert;
};

// ------------------------------------------------------------------ values

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(const std::string &v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::string join(const std::vector<std::string> &items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + items[i];
  return out;
}

inline std::string fmt_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <typename Int> Int parse_int(const std::string &key, const std::string &v) {
  Int out{};
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc{} || r.ptr != v.data() + v.size())
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

inline double parse_double(const std::string &key, const std::string &v) {
  double out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc{} || r.ptr != v.data() + v.size())
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string &key, const std::string &v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

template <typename E> E parse_enum(const std::string &key, const std::string &v, std::initializer_list<E> options) {
  std::string names;
  for (E e : options) {
    if (to_string(e) == v) return e;
    names += (names.empty() ? "" : ", ") + std::string(to_string(e));
  }
  throw ConfigError(key + ": '" + v + "' is not one of " + names);
}

inline std::vector<CorruptionKind> parse_kinds(const std::string &key, const std::string &v) {
  if (v == "all") return all_corruption_kinds();
  std::vector<CorruptionKind> out;
  for (const auto &item : split_list(v)) {
    try {
      out.push_back(parse_corruption_kind(item));
    } catch (const std::invalid_argument &e) {
      throw ConfigError(key + ": " + e.what());
    }
  }
  if (out.empty()) throw ConfigError(key + ": at least one corruption is required");
  return out;
}

inline std::string fmt_kinds(const std::vector<CorruptionKind> &kinds) {
  if (kinds == all_corruption_kinds()) return "all";
  std::vector<std::string> names;
  for (CorruptionKind k : kinds) names.emplace_back(to_string(k));
  return join(names);
}

inline std::array<double, 3> parse_triple(const std::string &key, const std::string &v) {
  const auto items = split_list(v);
  if (items.size() != 3) throw ConfigError(key + ": expected three comma-separated numbers (R,G,B)");
  return {parse_double(key, items[0]), parse_double(key, items[1]), parse_double(key, items[2])};
}

} // namespace detail

// ---------------------------------------------------------------- registry

struct KeyDef {
  std::string name; // section.key
  std::string doc;
  std::function<void(RunConfig &, const std::string &)> set;
  std::function<std::string(const RunConfig &)> get;
};

/// Every accepted key, in serialization order.
inline const std::vector<KeyDef> &key_registry() {
  using namespace detail;
  static const std::vector<KeyDef> keys = [] {
    std::vector<KeyDef> k;
    auto add = [&](std::string name, std::string doc, auto set, auto get) {
      k.push_back({std::move(name), std::move(doc), set, get});
    };
    // [run]
    add("run.seed", "master seed for init, data order, CN sampling, corruptions and noise",
        [](RunConfig &c, const std::string &v) { c.train.seed = parse_int<std::uint64_t>("run.seed", v); },
        [](const RunConfig &c) { return std::to_string(c.train.seed); });
    // [model]
    add("model.widths", "channels per residual block",
        [](RunConfig &c, const std::string &v) {
          c.train.model.widths.clear();
          for (const auto &w : split_list(v)) c.train.model.widths.push_back(parse_int<std::size_t>("model.widths", w));
        },
        [](const RunConfig &c) {
          std::vector<std::string> s;
          for (auto w : c.train.model.widths) s.push_back(std::to_string(w));
          return join(s);
        });
    add("model.cells_per_block", "residual cells per block",
        [](RunConfig &c, const std::string &v) {
          c.train.model.cells_per_block = parse_int<std::size_t>("model.cells_per_block", v);
        },
        [](const RunConfig &c) { return std::to_string(c.train.model.cells_per_block); });
    add("model.num_classes", "classifier outputs",
        [](RunConfig &c, const std::string &v) { c.train.model.num_classes = parse_int<std::size_t>("model.num_classes", v); },
        [](const RunConfig &c) { return std::to_string(c.train.model.num_classes); });
    add("model.placement", "identity | pre-residual | post-residual | post-addition | image",
        [](RunConfig &c, const std::string &v) {
          c.train.model.placement = parse_enum("model.placement", v,
                                               {Placement::identity, Placement::pre_residual, Placement::post_residual,
                                                Placement::post_addition, Placement::image});
        },
        [](const RunConfig &c) { return std::string(to_string(c.train.model.placement)); });
    add("model.unit_order", "cn-sn | sn-cn",
        [](RunConfig &c, const std::string &v) {
          c.train.model.order = parse_enum("model.unit_order", v, {UnitOrder::cn_then_sn, UnitOrder::sn_then_cn});
        },
        [](const RunConfig &c) { return std::string(to_string(c.train.model.order)); });
    add("model.blocks", "blocks carrying units: subset of 1,2,3 and image",
        [](RunConfig &c, const std::string &v) {
          c.train.model.blocks.clear();
          c.train.model.image_units = false;
          for (const auto &b : split_list(v)) {
            if (b == "image")
              c.train.model.image_units = true;
            else
              c.train.model.blocks.insert(parse_int<std::size_t>("model.blocks", b));
          }
        },
        [](const RunConfig &c) {
          std::vector<std::string> s;
          for (auto b : c.train.model.blocks) s.push_back(std::to_string(b));
          if (c.train.model.image_units) s.emplace_back("image");
          return join(s);
        });
    add("model.sn_enabled", "insert SelfNorm units",
        [](RunConfig &c, const std::string &v) { c.train.model.sn_enabled = parse_bool("model.sn_enabled", v); },
        [](const RunConfig &c) { return std::string(c.train.model.sn_enabled ? "true" : "false"); });
    add("model.cn_enabled", "insert CrossNorm units",
        [](RunConfig &c, const std::string &v) { c.train.model.cn_enabled = parse_bool("model.cn_enabled", v); },
        [](const RunConfig &c) { return std::string(c.train.model.cn_enabled ? "true" : "false"); });
    // [crossnorm]
    add("crossnorm.mode", "1-instance | 2-instance",
        [](RunConfig &c, const std::string &v) {
          c.train.model.cn.mode = parse_enum("crossnorm.mode", v, {CnMode::one_instance, CnMode::two_instance});
        },
        [](const RunConfig &c) { return std::string(to_string(c.train.model.cn.mode)); });
    add("crossnorm.crop", "neither | content | style | both",
        [](RunConfig &c, const std::string &v) {
          c.train.model.cn.crop = parse_enum("crossnorm.crop", v,
                                             {CropChoice::neither, CropChoice::content, CropChoice::style, CropChoice::both});
        },
        [](const RunConfig &c) { return std::string(to_string(c.train.model.cn.crop)); });
    add("crossnorm.threshold", "minimum crop area ratio t",
        [](RunConfig &c, const std::string &v) { c.train.model.cn.threshold = parse_double("crossnorm.threshold", v); },
        [](const RunConfig &c) { return fmt_double(c.train.model.cn.threshold); });
    add("crossnorm.active_count", "CN units turned on per forward (k)",
        [](RunConfig &c, const std::string &v) {
          c.train.model.cn.active_count = parse_int<std::size_t>("crossnorm.active_count", v);
        },
        [](const RunConfig &c) { return std::to_string(c.train.model.cn.active_count); });
    add("crossnorm.probability", "chance that any CN fires in a forward (p)",
        [](RunConfig &c, const std::string &v) { c.train.model.cn.probability = parse_double("crossnorm.probability", v); },
        [](const RunConfig &c) { return fmt_double(c.train.model.cn.probability); });
    // [train]
    add("train.epochs", "training epochs",
        [](RunConfig &c, const std::string &v) { c.train.epochs = parse_int<std::size_t>("train.epochs", v); },
        [](const RunConfig &c) { return std::to_string(c.train.epochs); });
    add("train.batch_size", "images per step",
        [](RunConfig &c, const std::string &v) { c.train.batch_size = parse_int<std::size_t>("train.batch_size", v); },
        [](const RunConfig &c) { return std::to_string(c.train.batch_size); });
    add("train.lr", "initial learning rate",
        [](RunConfig &c, const std::string &v) { c.train.sgd.lr = parse_double("train.lr", v); },
        [](const RunConfig &c) { return fmt_double(c.train.sgd.lr); });
    add("train.momentum", "SGD momentum",
        [](RunConfig &c, const std::string &v) { c.train.sgd.momentum = parse_double("train.momentum", v); },
        [](const RunConfig &c) { return fmt_double(c.train.sgd.momentum); });
    add("train.weight_decay", "L2 weight decay",
        [](RunConfig &c, const std::string &v) { c.train.sgd.weight_decay = parse_double("train.weight_decay", v); },
        [](const RunConfig &c) { return fmt_double(c.train.sgd.weight_decay); });
    add("train.decay_at", "fractions of the epochs where lr is multiplied by decay_factor",
        [](RunConfig &c, const std::string &v) {
          c.train.decay_at.clear();
          for (const auto &f : split_list(v)) c.train.decay_at.push_back(parse_double("train.decay_at", f));
        },
        [](const RunConfig &c) {
          std::vector<std::string> s;
          for (double f : c.train.decay_at) s.push_back(fmt_double(f));
          return join(s);
        });
    add("train.decay_factor", "lr multiplier at each decay point",
        [](RunConfig &c, const std::string &v) { c.train.decay_factor = parse_double("train.decay_factor", v); },
        [](const RunConfig &c) { return fmt_double(c.train.decay_factor); });
    add("train.augment", "random flip and padded crop",
        [](RunConfig &c, const std::string &v) { c.train.augment = parse_bool("train.augment", v); },
        [](const RunConfig &c) { return std::string(c.train.augment ? "true" : "false"); });
    // [data]
    add("data.dataset", "shapes | cifar10",
        [](RunConfig &c, const std::string &v) { c.train.dataset = v; },
        [](const RunConfig &c) { return c.train.dataset; });
    add("data.dir", "CIFAR-10 binary directory",
        [](RunConfig &c, const std::string &v) { c.train.data_dir = v; },
        [](const RunConfig &c) { return c.train.data_dir; });
    add("data.train_per_class", "shapes training images per class",
        [](RunConfig &c, const std::string &v) { c.train.train_per_class = parse_int<std::size_t>("data.train_per_class", v); },
        [](const RunConfig &c) { return std::to_string(c.train.train_per_class); });
    add("data.test_per_class", "shapes test images per class (each test split)",
        [](RunConfig &c, const std::string &v) { c.train.test_per_class = parse_int<std::size_t>("data.test_per_class", v); },
        [](const RunConfig &c) { return std::to_string(c.train.test_per_class); });
    // [eval]
    add("eval.checkpoint", "checkpoint to evaluate",
        [](RunConfig &c, const std::string &v) { c.eval.checkpoint = v; },
        [](const RunConfig &c) { return c.eval.checkpoint; });
    add("eval.split", "train | test | shifted",
        [](RunConfig &c, const std::string &v) {
          if (v != "train" && v != "test" && v != "shifted")
            throw ConfigError("eval.split: '" + v + "' is not one of train, test, shifted");
          c.eval.split = v;
        },
        [](const RunConfig &c) { return c.eval.split; });
    add("eval.kinds", "corruptions to evaluate (all or a comma list)",
        [](RunConfig &c, const std::string &v) { c.eval.kinds = parse_kinds("eval.kinds", v); },
        [](const RunConfig &c) { return fmt_kinds(c.eval.kinds); });
    add("eval.reference", "reference error table CSV for the normalized mCE",
        [](RunConfig &c, const std::string &v) { c.eval.reference = v; },
        [](const RunConfig &c) { return c.eval.reference; });
    add("eval.batch_size", "images per eval batch",
        [](RunConfig &c, const std::string &v) { c.eval.batch_size = parse_int<std::size_t>("eval.batch_size", v); },
        [](const RunConfig &c) { return std::to_string(c.eval.batch_size); });
    // [corrupt]
    add("corrupt.kinds", "corruptions rendered by the corrupt command",
        [](RunConfig &c, const std::string &v) { c.corrupt.kinds = parse_kinds("corrupt.kinds", v); },
        [](const RunConfig &c) { return fmt_kinds(c.corrupt.kinds); });
    // [stylize]
    add("stylize.mode", "exchange | adjust",
        [](RunConfig &c, const std::string &v) {
          if (v != "exchange" && v != "adjust") throw ConfigError("stylize.mode: '" + v + "' is not exchange or adjust");
          c.stylize.mode = v;
        },
        [](const RunConfig &c) { return c.stylize.mode; });
    add("stylize.target_mean", "adjust target RGB means (empty: average of the inputs)",
        [](RunConfig &c, const std::string &v) {
          if (v.empty()) c.stylize.target_mean.reset();
          else c.stylize.target_mean = parse_triple("stylize.target_mean", v);
        },
        [](const RunConfig &c) {
          if (!c.stylize.target_mean) return std::string();
          const auto &t = *c.stylize.target_mean;
          return join({fmt_double(t[0]), fmt_double(t[1]), fmt_double(t[2])});
        });
    add("stylize.target_std", "adjust target RGB stds (empty: average of the inputs)",
        [](RunConfig &c, const std::string &v) {
          if (v.empty()) c.stylize.target_std.reset();
          else c.stylize.target_std = parse_triple("stylize.target_std", v);
        },
        [](const RunConfig &c) {
          if (!c.stylize.target_std) return std::string();
          const auto &t = *c.stylize.target_std;
          return join({fmt_double(t[0]), fmt_double(t[1]), fmt_double(t[2])});
        });
    // [invert]
    add("invert.checkpoint", "trained model to invert",
        [](RunConfig &c, const std::string &v) { c.invert.checkpoint = v; },
        [](const RunConfig &c) { return c.invert.checkpoint; });
    add("invert.protocol", "sn_single | sn_accumulated | cn_mix",
        [](RunConfig &c, const std::string &v) {
          c.invert.invert.protocol = parse_enum(
              "invert.protocol", v, {InvertProtocol::sn_single, InvertProtocol::sn_accumulated, InvertProtocol::cn_mix});
        },
        [](const RunConfig &c) { return std::string(to_string(c.invert.invert.protocol)); });
    add("invert.location", "sn<i>, cn<i>, stem, cell<k> or block<b>",
        [](RunConfig &c, const std::string &v) { c.invert.invert.location = v; },
        [](const RunConfig &c) { return c.invert.invert.location; });
    add("invert.iterations", "optimizer steps",
        [](RunConfig &c, const std::string &v) { c.invert.invert.iterations = parse_int<std::size_t>("invert.iterations", v); },
        [](const RunConfig &c) { return std::to_string(c.invert.invert.iterations); });
    add("invert.lr", "learning rate (pixel values on a 0-255 scale)",
        [](RunConfig &c, const std::string &v) { c.invert.invert.lr = parse_double("invert.lr", v); },
        [](const RunConfig &c) { return fmt_double(c.invert.invert.lr); });
    add("invert.lr_decay_every", "divide lr by 10 every this many steps",
        [](RunConfig &c, const std::string &v) {
          c.invert.invert.lr_decay_every = parse_int<std::size_t>("invert.lr_decay_every", v);
        },
        [](const RunConfig &c) { return std::to_string(c.invert.invert.lr_decay_every); });
    add("invert.momentum", "optimizer momentum",
        [](RunConfig &c, const std::string &v) { c.invert.invert.momentum = parse_double("invert.momentum", v); },
        [](const RunConfig &c) { return fmt_double(c.invert.invert.momentum); });
    add("invert.init", "content_image | noise",
        [](RunConfig &c, const std::string &v) {
          c.invert.invert.init = parse_enum("invert.init", v, {InvertInit::content_image, InvertInit::noise});
        },
        [](const RunConfig &c) { return std::string(to_string(c.invert.invert.init)); });
    add("invert.disable_sn", "sn_accumulated: invert the network with every SN off",
        [](RunConfig &c, const std::string &v) { c.invert.invert.disable_sn = parse_bool("invert.disable_sn", v); },
        [](const RunConfig &c) { return std::string(c.invert.invert.disable_sn ? "true" : "false"); });
    add("invert.donor", "cn_mix donor image (PPM)",
        [](RunConfig &c, const std::string &v) { c.invert.donor = v; },
        [](const RunConfig &c) { return c.invert.donor; });
    return k;
  }();
  return keys;
}

inline const KeyDef &find_key(const std::string &name) {
  for (const auto &k : key_registry())
    if (k.name == name) return k;
  throw ConfigError("unknown config key '" + name + "' (run with --help-keys for the list)");
}

/// Applies one `section.key = value` assignment.
inline void set_key(RunConfig &cfg, const std::string &name, const std::string &value) {
  find_key(name).set(cfg, value);
}

/// Parses `--set key=value`.
inline void apply_override(RunConfig &cfg, const std::string &assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + assignment + "'");
  set_key(cfg, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
}

/// Reads a sectioned `key = value` file into `cfg`. Lines starting with #
/// or ; are comments, as is anything after " #"; keys outside a section
/// are errors.
inline void parse_config(std::istream &in, RunConfig &cfg, const std::string &source = "config") {
  std::string line, section;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    // A '#' preceded by whitespace starts a trailing comment.
    for (std::size_t i = 1; i < line.size(); ++i)
      if (line[i] == '#' && (line[i - 1] == ' ' || line[i - 1] == '\t')) {
        line.resize(i);
        break;
      }
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    const std::string where = source + ":" + std::to_string(line_no) + ": ";
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError(where + "malformed section header '" + t + "'");
      section = detail::trim(t.substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value', got '" + t + "'");
    if (section.empty()) throw ConfigError(where + "key outside any [section]");
    try {
      set_key(cfg, section + "." + detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
    } catch (const ConfigError &e) {
      throw ConfigError(where + e.what());
    }
  }
}

inline RunConfig load_config(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  RunConfig cfg;
  parse_config(in, cfg, path.string());
  return cfg;
}

/// Canonical text form: every key, grouped by section, registry order.
inline std::string serialize_config(const RunConfig &cfg) {
  std::ostringstream out;
  std::string section;
  for (const auto &k : key_registry()) {
    const auto dot = k.name.find('.');
    const std::string s = k.name.substr(0, dot);
    if (s != section) {
      out << (section.empty() ? "" : "\n") << "[" << s << "]\n";
      section = s;
    }
    out << "# " << k.doc << "\n" << k.name.substr(dot + 1) << " = " << k.get(cfg) << "\n";
  }
  return out.str();
}

} // namespace sncn::cli
