#include "ibdr/config.hpp"

#include "ibdr/errors.hpp"

#include <json.hpp>

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace ibdr {

namespace {

using Json = nlohmann::ordered_json;

std::string kl_form_name(KlForm f) { return f == KlForm::kLinearSigma ? "linear_sigma" : "standard"; }

KlForm parse_kl_form(const std::string& s) {
  if (s == "linear_sigma") return KlForm::kLinearSigma;
  if (s == "standard") return KlForm::kStandard;
  throw ConfigError("train.kl_form: unknown value '" + s + "' (expected linear_sigma or standard)");
}

DataPart parse_part(const std::string& s) {
  if (s == "all") return DataPart::kAll;
  if (s == "train") return DataPart::kTrain;
  if (s == "test") return DataPart::kTest;
  throw ConfigError("data.part: unknown value '" + s + "' (expected all, train or test)");
}

// Reads typed keys out of one JSON object and remembers which were consumed.
class Section {
 public:
  Section(const Json& root, const std::string& name) : name_(name) {
    if (!root.contains(name)) return;
    obj_ = &root.at(name);
    if (!obj_->is_object()) throw ConfigError(name + ": expected an object");
  }

  void get(const char* key, double& out) {
    if (const Json* v = find(key)) {
      if (!v->is_number()) fail(key, "expected a number");
      out = v->get<double>();
    }
  }
  void get(const char* key, bool& out) {
    if (const Json* v = find(key)) {
      if (!v->is_boolean()) fail(key, "expected true or false");
      out = v->get<bool>();
    }
  }
  void get(const char* key, std::string& out) {
    if (const Json* v = find(key)) {
      if (!v->is_string()) fail(key, "expected a string");
      out = v->get<std::string>();
    }
  }
  template <typename Int>
    requires std::is_integral_v<Int>
  void get_int(const char* key, Int& out) {
    if (const Json* v = find(key)) {
      if (!v->is_number_integer()) fail(key, "expected an integer");
      if constexpr (std::is_unsigned_v<Int>) {
        if (v->is_number_unsigned()) {
          out = static_cast<Int>(v->get<std::uint64_t>());
          return;
        }
        fail(key, "must be >= 0");
      } else {
        out = static_cast<Int>(v->get<std::int64_t>());
      }
    }
  }
  void get_int_list(const char* key, std::vector<Eigen::Index>& out) {
    if (const Json* v = find(key)) {
      if (!v->is_array()) fail(key, "expected an array of integers");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number_integer()) fail(key, "expected an array of integers");
        out.push_back(static_cast<Eigen::Index>(e.get<std::int64_t>()));
      }
    }
  }
  void get_int_list(const char* key, std::vector<int>& out) {
    std::vector<Eigen::Index> wide(out.begin(), out.end());
    get_int_list(key, wide);
    out.assign(wide.begin(), wide.end());
  }

  /// Throws on keys that were never requested.
  void finish() const {
    if (!obj_) return;
    for (const auto& [key, value] : obj_->items()) {
      if (!seen_.count(key)) throw ConfigError(name_ + "." + key + ": unknown key");
    }
  }

  [[noreturn]] void fail(const char* key, const std::string& msg) const {
    throw ConfigError(name_ + "." + key + ": " + msg);
  }

 private:
  const Json* find(const char* key) {
    seen_.insert(key);
    if (!obj_ || !obj_->contains(key)) return nullptr;
    return &obj_->at(key);
  }

  const Json* obj_ = nullptr;
  std::string name_;
  std::set<std::string> seen_;
};

void read_data(Section& s, DataSpec& d) {
  s.get("kind", d.kind);
  s.get_int("n", d.n);
  s.get_int("classes", d.classes);
  s.get_int("dim", d.dim);
  s.get("spread", d.spread);
  s.get("noise", d.noise);
  s.get_int("seed", d.seed);
  s.get("test_fraction", d.test_fraction);
  s.get("path", d.path);
  s.get("label_column", d.label_column);
  s.get("images", d.images);
  s.get("labels", d.labels);
  std::string shift = d.shift ? to_string(*d.shift) : "";
  s.get("shift", shift);
  try {
    d.shift = shift.empty() ? std::nullopt : std::optional<ShiftKind>(parse_shift_kind(shift));
  } catch (const ContractError& e) {
    throw ConfigError(std::string("data.shift: ") + e.what());
  }
  s.get("magnitude", d.magnitude);
  s.get_int_list("shift_classes", d.shift_classes);
}

Json data_json(const DataSpec& d) {
  Json j;
  j["kind"] = d.kind;
  j["n"] = d.n;
  j["classes"] = d.classes;
  j["dim"] = d.dim;
  j["spread"] = d.spread;
  j["noise"] = d.noise;
  j["seed"] = d.seed;
  j["test_fraction"] = d.test_fraction;
  j["path"] = d.path;
  j["label_column"] = d.label_column;
  j["images"] = d.images;
  j["labels"] = d.labels;
  j["shift"] = d.shift ? to_string(*d.shift) : "";
  j["magnitude"] = d.magnitude;
  j["shift_classes"] = d.shift_classes;
  return j;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* end = text.data() + text.size();
  auto res = std::from_chars(text.data(), end, v);
  if (res.ec != std::errc() || res.ptr != end) throw ConfigError(key + ": '" + text + "' is not a number");
  return v;
}

}  // namespace

// ---- data specs ------------------------------------------------------------

void DataSpec::validate(const std::string& where) const {
  auto fail = [&](const std::string& field, const std::string& msg) { throw ConfigError(where + "." + field + ": " + msg); };
  if (kind != "blobs" && kind != "moons" && kind != "csv" && kind != "idx") {
    fail("kind", "unknown value '" + kind + "' (expected blobs, moons, csv or idx)");
  }
  if (kind == "blobs" || kind == "moons") {
    if (n == 0) fail("n", "must be positive");
  }
  if (kind == "blobs") {
    if (classes < 2) fail("classes", "must be at least 2");
    if (n % static_cast<std::size_t>(classes) != 0) fail("n", "must be a multiple of classes");
    if (dim < 1) fail("dim", "must be at least 1");
    if (!(spread >= 0.0) || !std::isfinite(spread)) fail("spread", "must be finite and >= 0");
  }
  if (kind == "moons") {
    if (n % 2 != 0) fail("n", "must be even");
    if (!(noise >= 0.0) || !std::isfinite(noise)) fail("noise", "must be finite and >= 0");
  }
  if (kind == "csv" && path.empty()) fail("path", "required for csv data");
  if (kind == "idx" && (images.empty() || labels.empty())) fail("images", "idx data needs images and labels");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) fail("test_fraction", "must lie in (0, 1)");
  if (!(magnitude >= 0.0) || !std::isfinite(magnitude)) fail("magnitude", "must be finite and >= 0");
}

DataSpec parse_data_spec(const std::string& text) {
  DataSpec d;
  const auto colon = text.find(':');
  d.kind = text.substr(0, colon);
  if (colon != std::string::npos) {
    std::istringstream fields(text.substr(colon + 1));
    std::string item;
    while (std::getline(fields, item, ',')) {
      if (item.empty()) continue;
      const auto eq = item.find('=');
      if (eq == std::string::npos) throw ConfigError("data spec: expected key=value, got '" + item + "'");
      const std::string key = item.substr(0, eq), value = item.substr(eq + 1);
      if (key == "n") d.n = parse_number<std::size_t>(key, value);
      else if (key == "classes") d.classes = parse_number<int>(key, value);
      else if (key == "dim") d.dim = parse_number<Eigen::Index>(key, value);
      else if (key == "spread") d.spread = parse_number<double>(key, value);
      else if (key == "noise") d.noise = parse_number<double>(key, value);
      else if (key == "seed") d.seed = parse_number<std::uint64_t>(key, value);
      else if (key == "test_fraction") d.test_fraction = parse_number<double>(key, value);
      else if (key == "path") d.path = value;
      else if (key == "label") d.label_column = value;
      else if (key == "images") d.images = value;
      else if (key == "labels") d.labels = value;
      else if (key == "part") d.part = parse_part(value);
      else if (key == "magnitude") d.magnitude = parse_number<double>(key, value);
      else if (key == "shift") {
        try {
          d.shift = parse_shift_kind(value);
        } catch (const ContractError& e) {
          throw ConfigError(std::string("data spec: ") + e.what());
        }
      } else if (key == "keep") {
        std::istringstream list(value);
        std::string c;
        while (std::getline(list, c, ';')) d.shift_classes.push_back(parse_number<int>(key, c));
      } else {
        throw ConfigError("data spec: unknown key '" + key + "'");
      }
    }
  }
  d.validate("data");
  return d;
}

namespace {

Dataset load_full(const DataSpec& spec) {
  spec.validate("data");
  if (spec.kind == "blobs") return gen_blobs(spec.n, spec.classes, spec.dim, spec.spread, spec.seed);
  if (spec.kind == "moons") return gen_two_moons(spec.n, spec.noise, spec.seed);
  if (spec.kind == "csv") return load_csv(spec.path, spec.label_column);
  return load_idx(spec.images, spec.labels);
}

}  // namespace

TrainTest load_train_test(const DataSpec& spec) {
  const std::vector<double> fractions{1.0 - spec.test_fraction, spec.test_fraction};
  auto parts = split(load_full(spec), fractions, spec.seed);
  if (parts[0].size() == 0 || parts[1].size() == 0) {
    throw ConfigError("data.test_fraction: leaves an empty train or test split");
  }
  parts[0].name = "train";
  parts[1].name = "test";
  return {std::move(parts[0]), std::move(parts[1])};
}

Dataset load_data(const DataSpec& spec) {
  Dataset ds;
  if (spec.part == DataPart::kAll) {
    ds = load_full(spec);
    ds.name = "all";
  } else {
    auto tt = load_train_test(spec);
    ds = spec.part == DataPart::kTrain ? std::move(tt.train) : std::move(tt.test);
  }
  if (spec.shift) {
    try {
      ds = shift_transform(ds, *spec.shift, spec.magnitude, spec.seed, spec.shift_classes);
    } catch (const ContractError& e) {
      throw ConfigError(std::string("data.shift: ") + e.what());
    }
  }
  return ds;
}

// ---- run config ----------------------------------------------------------

void RunConfig::validate() const {
  train.validate();
  for (Eigen::Index h : model.hidden) {
    if (h < 1) throw ConfigError("model.hidden: every width must be at least 1");
  }
  if (model.kind == ArchKind::kLora && model.rank < 1) throw ConfigError("model.rank: must be at least 1");
  if (!(model.init_scale > 0.0) || !std::isfinite(model.init_scale)) {
    throw ConfigError("model.init_scale: must be finite and > 0");
  }
  if (model.input_dim < 0) throw ConfigError("model.input_dim: must be >= 0");
  if (model.num_classes < 0 || model.num_classes == 1) throw ConfigError("model.num_classes: must be 0 or >= 2");
  data.validate("data");
  if (eval.ece_bins < 1) throw ConfigError("eval.ece_bins: must be at least 1");
  if (eval.every_epochs < 1) throw ConfigError("eval.every_epochs: must be at least 1");
  parse_threshold_grid(eval.thresholds);
  if (!eval.ood_data.empty()) parse_data_spec(eval.ood_data);
  if (data.kind == "blobs") arch_for(data.dim, data.classes);
  if (data.kind == "moons") arch_for(2, 2);
}

ArchSpec RunConfig::arch_for(Eigen::Index input_dim, int num_classes) const {
  if (model.input_dim != 0 && model.input_dim != input_dim) {
    throw ConfigError("model.input_dim: " + std::to_string(model.input_dim) + " does not match the data's " +
                      std::to_string(input_dim) + " features");
  }
  if (model.num_classes != 0 && model.num_classes != num_classes) {
    throw ConfigError("model.num_classes: " + std::to_string(model.num_classes) + " does not match the data's " +
                      std::to_string(num_classes) + " classes");
  }
  ArchSpec a;
  a.kind = model.kind;
  a.input_dim = input_dim;
  a.hidden_dims = model.hidden;
  a.num_classes = num_classes;
  a.rank = model.kind == ArchKind::kLora ? model.rank : 0;
  a.activation = model.activation;
  try {
    a.validate();
  } catch (const ContractError& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  const bool uses_volume = train.optimizer == OptimizerKind::kIbdr && train.alpha != 0.0;
  if (uses_volume && train.jitter == 0.0 && static_cast<Eigen::Index>(train.k) > num_classes - 1) {
    throw ConfigError("train.K: " + std::to_string(train.k) + " particles exceed classes - 1 = " +
                      std::to_string(num_classes - 1) + "; set train.jitter > 0 or lower K");
  }
  return a;
}

RunConfig parse_run_config(const std::string& json_text) {
  Json root;
  try {
    root = Json::parse(json_text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ConfigError("config: top level must be an object");
  static const std::set<std::string> sections{"model", "train", "data", "eval", "output"};
  for (const auto& [key, value] : root.items()) {
    if (!sections.count(key)) throw ConfigError(key + ": unknown section");
  }

  RunConfig cfg;
  Section model(root, "model");
  std::string kind = to_string(cfg.model.kind), act = to_string(cfg.model.activation);
  model.get("kind", kind);
  cfg.model.kind = parse_arch_kind(kind);
  model.get_int_list("hidden", cfg.model.hidden);
  model.get("activation", act);
  cfg.model.activation = parse_activation(act);
  model.get_int("rank", cfg.model.rank);
  model.get("init_scale", cfg.model.init_scale);
  model.get_int("backbone_epochs", cfg.model.backbone_epochs);
  model.get_int("input_dim", cfg.model.input_dim);
  model.get_int("num_classes", cfg.model.num_classes);
  model.finish();

  Section train(root, "train");
  IBDRConfig& t = cfg.train;
  std::string opt = to_string(t.optimizer), kl = kl_form_name(t.kl_form);
  train.get("optimizer", opt);
  t.optimizer = parse_optimizer(opt);
  train.get_int("K", t.k);
  train.get("alpha", t.alpha);
  train.get("beta", t.beta);
  train.get("rho", t.rho);
  train.get("sigma", t.sigma);
  train.get("ascent_step", t.ascent_step);
  train.get("lr_lambda", t.lr_lambda);
  train.get("lr_mu", t.lr_mu);
  train.get("lambda_init", t.lambda_init);
  train.get("normalize_ascent", t.normalize_ascent);
  train.get("include_cost_in_mu_grad", t.include_cost_in_mu_grad);
  train.get("ascent_ce_only", t.ascent_ce_only);
  train.get_int("div_sign", t.div_sign);
  train.get("jitter", t.jitter);
  train.get("prob_floor", t.prob_floor);
  train.get("kl_form", kl);
  t.kl_form = parse_kl_form(kl);
  train.get_int("epochs", t.epochs);
  train.get_int("batch_size", t.batch_size);
  train.get_int("seed", t.seed);
  train.get("momentum", t.momentum);
  train.get("cosine_schedule", t.cosine_schedule);
  train.get("rho_sam", t.rho_sam);
  train.get("sgld_noise_scale", t.sgld_noise_scale);
  train.finish();

  Section data(root, "data");
  read_data(data, cfg.data);
  data.finish();

  Section eval(root, "eval");
  eval.get_int("ece_bins", cfg.eval.ece_bins);
  eval.get("eval_sample", cfg.eval.eval_sample);
  eval.get_int("every_epochs", cfg.eval.every_epochs);
  eval.get("thresholds", cfg.eval.thresholds);
  eval.get("ood_data", cfg.eval.ood_data);
  eval.finish();

  Section output(root, "output");
  output.get("dir", cfg.output_dir);
  output.finish();

  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot open '" + path.string() + "'");
  std::ostringstream text;
  text << in.rdbuf();
  return parse_run_config(text.str());
}

std::string resolved_json(const RunConfig& cfg) {
  Json root;
  Json& m = root["model"];
  m["kind"] = to_string(cfg.model.kind);
  m["hidden"] = cfg.model.hidden;
  m["activation"] = to_string(cfg.model.activation);
  m["rank"] = cfg.model.rank;
  m["init_scale"] = cfg.model.init_scale;
  m["backbone_epochs"] = cfg.model.backbone_epochs;
  m["input_dim"] = cfg.model.input_dim;
  m["num_classes"] = cfg.model.num_classes;

  const IBDRConfig& t = cfg.train;
  Json& tr = root["train"];
  tr["optimizer"] = to_string(t.optimizer);
  tr["K"] = t.k;
  tr["alpha"] = t.alpha;
  tr["beta"] = t.beta;
  tr["rho"] = t.rho;
  tr["sigma"] = t.sigma;
  tr["ascent_step"] = t.ascent_step;
  tr["lr_lambda"] = t.lr_lambda;
  tr["lr_mu"] = t.lr_mu;
  tr["lambda_init"] = t.lambda_init;
  tr["normalize_ascent"] = t.normalize_ascent;
  tr["include_cost_in_mu_grad"] = t.include_cost_in_mu_grad;
  tr["ascent_ce_only"] = t.ascent_ce_only;
  tr["div_sign"] = t.div_sign;
  tr["jitter"] = t.jitter;
  tr["prob_floor"] = t.prob_floor;
  tr["kl_form"] = kl_form_name(t.kl_form);
  tr["epochs"] = t.epochs;
  tr["batch_size"] = t.batch_size;
  tr["seed"] = t.seed;
  tr["momentum"] = t.momentum;
  tr["cosine_schedule"] = t.cosine_schedule;
  tr["rho_sam"] = t.rho_sam;
  tr["sgld_noise_scale"] = t.sgld_noise_scale;

  root["data"] = data_json(cfg.data);

  Json& ev = root["eval"];
  ev["ece_bins"] = cfg.eval.ece_bins;
  ev["eval_sample"] = cfg.eval.eval_sample;
  ev["every_epochs"] = cfg.eval.every_epochs;
  ev["thresholds"] = cfg.eval.thresholds;
  ev["ood_data"] = cfg.eval.ood_data;

  root["output"]["dir"] = cfg.output_dir;
  return root.dump(2) + "\n";
}

std::vector<double> parse_threshold_grid(const std::string& text) {
  const auto a = text.find(':');
  const auto b = a == std::string::npos ? std::string::npos : text.find(':', a + 1);
  if (b == std::string::npos) throw ConfigError("thresholds: expected start:stop:step, got '" + text + "'");
  const double start = parse_number<double>("thresholds", text.substr(0, a));
  const double stop = parse_number<double>("thresholds", text.substr(a + 1, b - a - 1));
  const double step = parse_number<double>("thresholds", text.substr(b + 1));
  if (!(start >= 0.0 && stop <= 1.0 && start <= stop)) {
    throw ConfigError("thresholds: need 0 <= start <= stop <= 1");
  }
  if (!(step > 0.0)) throw ConfigError("thresholds: step must be positive");
  const auto count = static_cast<std::size_t>(std::floor((stop - start) / step + 1e-9)) + 1;
  std::vector<double> grid;
  for (std::size_t i = 0; i < count; ++i) grid.push_back(std::min(stop, start + static_cast<double>(i) * step));
  return grid;
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace ibdr
