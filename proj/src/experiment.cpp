#include "feddva/experiment.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

namespace feddva {

namespace {

// Small enough for skewed toy partitions, large enough that every client
// keeps a few held-out samples.
constexpr std::size_t kMinClientSamples = 10;

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& why) {
  throw std::invalid_argument("config key '" + key + "': invalid value '" + value + "' (" + why + ")");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "expected a non-negative integer");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) bad_value(key, v, "expected a number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v, "expected true or false");
}

std::string format_double(double v) {
  // Shortest text that parses back to the same double.
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_u64(key, trim(item)));
  if (out.empty()) bad_value(key, v, "expected a comma-separated list");
  return out;
}

struct KeyHandler {
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <typename T>
KeyHandler size_key(T ExperimentConfig::*field, const std::string& key) {
  return {[=](ExperimentConfig& c, const std::string& v) { c.*field = static_cast<T>(parse_u64(key, v)); },
          [=](const ExperimentConfig& c) { return std::to_string(c.*field); }};
}

KeyHandler double_key(double ExperimentConfig::*field, const std::string& key) {
  return {[=](ExperimentConfig& c, const std::string& v) { c.*field = parse_double(key, v); },
          [=](const ExperimentConfig& c) { return format_double(c.*field); }};
}

KeyHandler string_key(std::string ExperimentConfig::*field) {
  return {[=](ExperimentConfig& c, const std::string& v) { c.*field = v; },
          [=](const ExperimentConfig& c) { return c.*field; }};
}

KeyHandler optional_key(std::optional<std::size_t> ExperimentConfig::*field, const std::string& key) {
  return {[=](ExperimentConfig& c, const std::string& v) {
            if (v == "auto") c.*field = std::nullopt;
            else c.*field = parse_u64(key, v);
          },
          [=](const ExperimentConfig& c) { return (c.*field) ? std::to_string(*(c.*field)) : "auto"; }};
}

const std::vector<std::pair<std::string, KeyHandler>>& handlers() {
  static const std::vector<std::pair<std::string, KeyHandler>> table = [] {
    std::vector<std::pair<std::string, KeyHandler>> t;
    t.emplace_back("task", KeyHandler{[](ExperimentConfig& c, const std::string& v) {
                                        try {
                                          c.task = task_from_string(v);
                                        } catch (const std::invalid_argument&) {
                                          bad_value("task", v, "expected reconstruct or classify");
                                        }
                                      },
                                      [](const ExperimentConfig& c) { return to_string(c.task); }});
    t.emplace_back("method", KeyHandler{[](ExperimentConfig& c, const std::string& v) {
                                          try {
                                            c.method = method_from_string(v);
                                          } catch (const std::invalid_argument&) {
                                            bad_value("method", v, "expected feddva, fedavg, fedavg-ft or vanilla-vae");
                                          }
                                        },
                                        [](const ExperimentConfig& c) { return to_string(c.method); }});
    t.emplace_back("K", size_key(&ExperimentConfig::K, "K"));
    t.emplace_back("m", size_key(&ExperimentConfig::m, "m"));
    t.emplace_back("rounds", size_key(&ExperimentConfig::rounds, "rounds"));
    t.emplace_back("epochs_per_phase", size_key(&ExperimentConfig::epochs_per_phase, "epochs_per_phase"));
    t.emplace_back("batch_size", size_key(&ExperimentConfig::batch_size, "batch_size"));
    t.emplace_back("lr_eta", double_key(&ExperimentConfig::lr_eta, "lr_eta"));
    t.emplace_back("lr_lambda", double_key(&ExperimentConfig::lr_lambda, "lr_lambda"));
    t.emplace_back("d_z", optional_key(&ExperimentConfig::d_z, "d_z"));
    t.emplace_back("d_c", optional_key(&ExperimentConfig::d_c, "d_c"));
    t.emplace_back("alpha", double_key(&ExperimentConfig::alpha, "alpha"));
    t.emplace_back("beta", double_key(&ExperimentConfig::beta, "beta"));
    t.emplace_back("gamma", double_key(&ExperimentConfig::gamma, "gamma"));
    t.emplace_back("xi_per_dim", double_key(&ExperimentConfig::xi_per_dim, "xi_per_dim"));
    t.emplace_back("xi_scale", double_key(&ExperimentConfig::xi_scale, "xi_scale"));
    t.emplace_back("seed", size_key(&ExperimentConfig::seed, "seed"));
    t.emplace_back("dataset", string_key(&ExperimentConfig::dataset));
    t.emplace_back("partition", string_key(&ExperimentConfig::partition));
    t.emplace_back("concentration", double_key(&ExperimentConfig::concentration, "concentration"));
    t.emplace_back("output_dir", string_key(&ExperimentConfig::output_dir));
    t.emplace_back("hidden", KeyHandler{[](ExperimentConfig& c, const std::string& v) { c.hidden = parse_list("hidden", v); },
                                        [](const ExperimentConfig& c) {
                                          std::string s;
                                          for (std::size_t i = 0; i < c.hidden.size(); ++i) {
                                            s += (i ? "," : "") + std::to_string(c.hidden[i]);
                                          }
                                          return s;
                                        }});
    t.emplace_back("head_hidden", size_key(&ExperimentConfig::head_hidden, "head_hidden"));
    t.emplace_back("activation", string_key(&ExperimentConfig::activation));
    t.emplace_back("n_classes", size_key(&ExperimentConfig::n_classes, "n_classes"));
    t.emplace_back("samples_per_class", size_key(&ExperimentConfig::samples_per_class, "samples_per_class"));
    t.emplace_back("image_size", size_key(&ExperimentConfig::image_size, "image_size"));
    t.emplace_back("holdout_fraction", double_key(&ExperimentConfig::holdout_fraction, "holdout_fraction"));
    t.emplace_back("samples", size_key(&ExperimentConfig::samples, "samples"));
    t.emplace_back("threads", size_key(&ExperimentConfig::threads, "threads"));
    t.emplace_back("ft_epochs", size_key(&ExperimentConfig::ft_epochs, "ft_epochs"));
    t.emplace_back("frozen_representation",
                   KeyHandler{[](ExperimentConfig& c, const std::string& v) {
                                c.frozen_representation = parse_bool("frozen_representation", v);
                              },
                              [](const ExperimentConfig& c) { return std::string(c.frozen_representation ? "true" : "false"); }});
    t.emplace_back("classifier_input", string_key(&ExperimentConfig::classifier_input));
    t.emplace_back("checkpoint_every", size_key(&ExperimentConfig::checkpoint_every, "checkpoint_every"));
    return t;
  }();
  return table;
}

const KeyHandler& handler(const std::string& key) {
  for (const auto& [k, h] : handlers()) {
    if (k == key) return h;
  }
  throw std::invalid_argument("config: unknown key '" + key + "'");
}

}  // namespace

std::string to_string(Method m) {
  switch (m) {
    case Method::kFedDva: return "feddva";
    case Method::kFedAvg: return "fedavg";
    case Method::kFedAvgFinetune: return "fedavg-ft";
    case Method::kVanillaVae: return "vanilla-vae";
  }
  return "feddva";
}

Method method_from_string(const std::string& s) {
  if (s == "feddva") return Method::kFedDva;
  if (s == "fedavg") return Method::kFedAvg;
  if (s == "fedavg-ft") return Method::kFedAvgFinetune;
  if (s == "vanilla-vae") return Method::kVanillaVae;
  throw std::invalid_argument("unknown method: " + s);
}

std::size_t ExperimentConfig::resolved_d_z() const { return d_z.value_or(task == Task::kClassify ? 8 : 4); }
std::size_t ExperimentConfig::resolved_d_c() const { return d_c.value_or(task == Task::kClassify ? 8 : 4); }

void ExperimentConfig::validate() const {
  auto positive = [](const char* key, double v) {
    if (!(v > 0.0)) throw std::invalid_argument(std::string("config key '") + key + "': must be positive");
  };
  auto non_negative = [](const char* key, double v) {
    if (!(v >= 0.0)) throw std::invalid_argument(std::string("config key '") + key + "': must be non-negative");
  };
  positive("K", static_cast<double>(K));
  positive("m", static_cast<double>(m));
  if (m > K) throw std::invalid_argument("config key 'm': must not exceed K");
  positive("epochs_per_phase", static_cast<double>(epochs_per_phase));
  if (batch_size < 2) throw std::invalid_argument("config key 'batch_size': must be >= 2");
  non_negative("lr_eta", lr_eta);
  non_negative("lr_lambda", lr_lambda);
  positive("d_z", static_cast<double>(resolved_d_z()));
  positive("d_c", static_cast<double>(resolved_d_c()));
  non_negative("alpha", alpha);
  non_negative("beta", beta);
  non_negative("gamma", gamma);
  non_negative("xi_per_dim", xi_per_dim);
  non_negative("xi_scale", xi_scale);
  positive("concentration", concentration);
  if (partition != "marked" && partition != "label-skew") {
    throw std::invalid_argument("config key 'partition': expected marked or label-skew");
  }
  if (activation != "relu" && activation != "tanh") {
    throw std::invalid_argument("config key 'activation': expected relu or tanh");
  }
  if (classifier_input != "both" && classifier_input != "z" && classifier_input != "c") {
    throw std::invalid_argument("config key 'classifier_input': expected both, z or c");
  }
  for (auto h : hidden) positive("hidden", static_cast<double>(h));
  positive("head_hidden", static_cast<double>(head_hidden));
  if (n_classes < 2) throw std::invalid_argument("config key 'n_classes': must be >= 2");
  positive("samples_per_class", static_cast<double>(samples_per_class));
  if (image_size < 8) throw std::invalid_argument("config key 'image_size': must be >= 8");
  if (holdout_fraction < 0.0 || holdout_fraction >= 1.0) {
    throw std::invalid_argument("config key 'holdout_fraction': must lie in [0,1)");
  }
  positive("samples", static_cast<double>(samples));
  positive("threads", static_cast<double>(threads));
  if (output_dir.empty()) throw std::invalid_argument("config key 'output_dir': must not be empty");
  if ((method == Method::kFedAvg || method == Method::kFedAvgFinetune) && task != Task::kClassify) {
    throw std::invalid_argument("config key 'method': " + to_string(method) + " needs task = classify");
  }
  if (method == Method::kVanillaVae && task != Task::kReconstruct) {
    throw std::invalid_argument("config key 'method': vanilla-vae needs task = reconstruct");
  }
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& [name, h] : handlers()) k.push_back(name);
    return k;
  }();
  return keys;
}

void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  handler(key).set(cfg, value);
}

std::string get_config_value(const ExperimentConfig& cfg, const std::string& key) { return handler(key).get(cfg); }

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    }
    set_config_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string format_config(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& [key, h] : handlers()) out += key + " = " + h.get(cfg) + "\n";
  return out;
}

void save_config(const std::filesystem::path& path, const ExperimentConfig& cfg) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write config " + path.string());
  os << format_config(cfg);
}

ArchitectureConfig architecture_for(const ExperimentConfig& cfg, std::size_t input_dim) {
  ArchitectureConfig a;
  a.input_dim = input_dim;
  a.hidden_dims = cfg.hidden;
  a.d_z = cfg.resolved_d_z();
  a.d_c = cfg.resolved_d_c();
  a.activation = cfg.activation == "tanh" ? Activation::kTanh : Activation::kRelu;
  a.variant = cfg.method == Method::kVanillaVae ? ModelVariant::kVanilla : ModelVariant::kDual;
  a.n_classes = cfg.task == Task::kClassify ? cfg.n_classes : 0;
  a.head_hidden = cfg.head_hidden;
  if (cfg.classifier_input == "z") a.classifier_input = ClassifierInput::kZOnly;
  if (cfg.classifier_input == "c") a.classifier_input = ClassifierInput::kCOnly;
  return a;
}

FederationConfig federation_config_for(const ExperimentConfig& cfg, std::size_t input_dim) {
  FederationConfig f;
  f.clients_per_round = cfg.m;
  f.rounds = cfg.rounds;
  f.local.epochs = cfg.epochs_per_phase;
  f.local.batch_size = cfg.batch_size;
  f.local.lr_eta = cfg.lr_eta;
  f.local.lr_lambda = cfg.lr_lambda;
  f.local.weights.alpha = cfg.alpha;
  f.local.weights.beta = cfg.beta;
  f.local.weights.gamma = cfg.gamma;
  f.local.weights.samples = cfg.samples;
  f.local.weights.frozen_representation = cfg.frozen_representation;
  f.local.task = cfg.task;
  f.seed = cfg.seed;
  f.threads = cfg.threads;
  f.ft_epochs = cfg.ft_epochs;
  f.arch = architecture_for(cfg, input_dim);
  return f;
}

ExperimentData build_experiment_data(const ExperimentConfig& cfg) {
  cfg.validate();
  Dataset ds;
  if (cfg.dataset == "toy") {
    ds = make_toy_digits(cfg.samples_per_class, cfg.n_classes, cfg.image_size, cfg.image_size,
                         derive_seed(cfg.seed, "dataset"));
  } else {
    const std::filesystem::path dir(cfg.dataset);
    ds = load_idx_dataset(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte", cfg.n_classes);
  }
  ExperimentData out;
  out.input_dim = ds.pixels_per_image();
  out.plan = cfg.partition == "marked"
                 ? partition_uniform_marked(ds, cfg.K, {}, derive_seed(cfg.seed, "partition"))
                 : partition_label_skew(ds, cfg.K, cfg.concentration, derive_seed(cfg.seed, "partition"),
                                        kMinClientSamples);
  std::vector<Dataset> train, held;
  auto parts = materialize(ds, out.plan);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto [tr, ho] = split_holdout(parts[k], cfg.holdout_fraction, derive_seed(cfg.seed, "holdout", k));
    train.push_back(std::move(tr));
    held.push_back(std::move(ho));
  }
  out.shards = make_client_shards(std::move(train), std::move(held), cfg.xi());
  return out;
}

}  // namespace feddva
