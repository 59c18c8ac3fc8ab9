#include "feddva/federation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <numeric>
#include <stdexcept>
#include <thread>

#include "feddva/metrics.hpp"
#include "feddva/mutation.hpp"

namespace feddva {

namespace {

void set_trainable(std::vector<ad::Tensor>& params, bool on) {
  for (auto& t : params) t.set_requires_grad(on);
}

PhaseStats run_phase(std::vector<ad::Tensor>& trainable, std::vector<ad::Tensor>& frozen, double lr,
                     std::size_t n, const LocalOptions& opts, Rng& rng, const BatchLoss& loss) {
  set_trainable(frozen, false);
  set_trainable(trainable, true);
  PhaseStats stats;
  for (std::size_t e = 0; e < opts.epochs; ++e) {
    for (const auto& batch : make_batches(n, opts.batch_size, rng)) {
      for (auto& t : trainable) t.zero_grad();
      LossResult r = loss(batch, rng);
      ad::backward(r.total);
      ad::sgd_step(trainable, lr);
      stats.mean += r.parts;
      stats.constraint_gaps.push_back(r.parts.constraint_gap());
      ++stats.batches;
    }
  }
  if (stats.batches > 0) stats.mean = stats.mean.scaled(1.0 / static_cast<double>(stats.batches));
  return stats;
}

ad::Tensor gather_tensor(const Dataset& ds, std::span<const std::size_t> batch) {
  return ad::Tensor::constant({batch.size(), ds.pixels_per_image()}, ds.gather(batch));
}

// Runs `fn(i)` for every i in [0, n) on up to `threads` workers.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t workers = std::min(threads, n);
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

void finish_accuracy(RoundRecord& rec, std::vector<double> acc) {
  const AccuracySummary s = summarize_accuracy(std::move(acc));
  rec.accuracy = s.per_client;
  rec.accuracy_mean = s.mean;
  rec.accuracy_std = s.stddev;
}

nlohmann::json phase_json(const PhaseStats& p) {
  return {{"batches", p.batches}, {"mean", to_json(p.mean)}, {"constraint_gaps", p.constraint_gaps}};
}

std::map<std::size_t, double> weight_map(const std::vector<ClientShard>& shards,
                                         std::span<const std::size_t> ids) {
  std::map<std::size_t, double> w;
  for (auto id : ids) w[id] = shards.at(id).weight;
  return w;
}

}  // namespace

std::string to_string(Task t) { return t == Task::kClassify ? "classify" : "reconstruct"; }

Task task_from_string(const std::string& s) {
  if (s == "classify") return Task::kClassify;
  if (s == "reconstruct") return Task::kReconstruct;
  throw std::invalid_argument("unknown task: " + s);
}

std::vector<ClientShard> make_client_shards(std::vector<Dataset> train, std::vector<Dataset> heldout,
                                            double xi) {
  if (train.empty()) throw std::invalid_argument("make_client_shards: no clients");
  if (!heldout.empty() && heldout.size() != train.size()) {
    throw std::invalid_argument("make_client_shards: train and held-out client counts differ");
  }
  double total = 0.0;
  for (const auto& d : train) total += static_cast<double>(d.size());
  if (total <= 0.0) throw std::invalid_argument("make_client_shards: all clients are empty");
  std::vector<ClientShard> shards(train.size());
  for (std::size_t k = 0; k < train.size(); ++k) {
    shards[k].id = k;
    shards[k].weight = static_cast<double>(train[k].size()) / total;
    shards[k].xi = xi;
    shards[k].train = std::move(train[k]);
    if (!heldout.empty()) shards[k].heldout = std::move(heldout[k]);
  }
  return shards;
}

nlohmann::json to_json(const RoundRecord& r) {
  nlohmann::json clients = nlohmann::json::array();
  for (const auto& c : r.clients) {
    clients.push_back({{"client", c.client}, {"phase1", phase_json(c.phase1)}, {"phase2", phase_json(c.phase2)}});
  }
  return {{"round", r.round},
          {"sampled", r.sampled},
          {"clients", clients},
          {"accuracy", r.accuracy},
          {"accuracy_mean", r.accuracy_mean},
          {"accuracy_std", r.accuracy_std},
          {"mean_total", r.mean_total},
          {"wall_seconds", r.wall_seconds}};
}

void FederationConfig::validate(std::size_t num_clients) const {
  arch.validate();
  if (num_clients == 0) throw std::invalid_argument("federation: no clients");
  if (clients_per_round < 1 || clients_per_round > num_clients) {
    throw std::invalid_argument("federation: m=" + std::to_string(clients_per_round) +
                                " must lie in [1, K=" + std::to_string(num_clients) + "]");
  }
  if (local.batch_size < 2) throw std::invalid_argument("federation: batch_size must be >= 2");
  if (local.lr_eta < 0.0 || local.lr_lambda < 0.0) {
    throw std::invalid_argument("federation: learning rates must be non-negative");
  }
  if (local.task == Task::kClassify && arch.n_classes == 0) {
    throw std::invalid_argument("federation: classification needs n_classes > 0");
  }
}

std::vector<std::size_t> sample_clients(std::size_t num_clients, std::size_t m, std::uint64_t seed,
                                        std::size_t round) {
  if (m < 1 || m > num_clients) {
    throw std::invalid_argument("sample_clients: m=" + std::to_string(m) + " outside [1, " +
                                std::to_string(num_clients) + "]");
  }
  std::vector<std::size_t> ids(num_clients);
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(derive_seed(seed, "sample-clients", 0, round));
  // Partial Fisher-Yates: the first m slots are the sample.
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = i + rng.below(num_clients - i);
    std::swap(ids[i], ids[j]);
  }
  ids.resize(m);
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::vector<double> aggregate(const std::map<std::size_t, std::vector<double>>& updates,
                              const std::map<std::size_t, double>& weights) {
  if (updates.empty()) throw std::invalid_argument("aggregate: empty update set");
  const std::size_t len = updates.begin()->second.size();
  double total = 0.0;
  for (const auto& [id, v] : updates) {
    if (v.size() != len) {
      throw std::invalid_argument("aggregate: client " + std::to_string(id) + " sent " +
                                  std::to_string(v.size()) + " values, expected " + std::to_string(len));
    }
    const auto it = weights.find(id);
    if (it == weights.end()) throw std::invalid_argument("aggregate: no weight for client " + std::to_string(id));
    if (!(it->second >= 0.0)) throw std::invalid_argument("aggregate: negative weight");
    total += it->second;
  }
  if (!(total > 0.0)) throw std::invalid_argument("aggregate: weights sum to zero");
  // Accumulate offsets from the first update so identical inputs come back
  // bit-exact, then clamp away rounding outside the per-coordinate hull.
  const std::vector<double>& base = updates.begin()->second;
  std::vector<double> out = base;
  std::vector<double> lo = base;
  std::vector<double> hi = base;
  for (const auto& [id, v] : updates) {
    const double w = weights.at(id) / (mutation::active("aggregate") ? 1.0 : total);
    for (std::size_t i = 0; i < len; ++i) {
      out[i] += w * (v[i] - base[i]);
      lo[i] = std::min(lo[i], v[i]);
      hi[i] = std::max(hi[i], v[i]);
    }
  }
  for (std::size_t i = 0; i < len; ++i) out[i] = std::clamp(out[i], lo[i], hi[i]);
  return out;
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size, Rng& rng) {
  if (n == 0) throw std::invalid_argument("make_batches: empty shard");
  if (batch_size < 2) throw std::invalid_argument("make_batches: batch_size must be >= 2");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order.begin(), order.end());
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < n; s += batch_size) {
    const std::size_t e = std::min(n, s + batch_size);
    if (e - s < 2) break;
    out.emplace_back(order.begin() + s, order.begin() + e);
  }
  return out;
}

ClientRoundStats two_phase_update(std::vector<ad::Tensor> local, std::vector<ad::Tensor> shared,
                                  std::size_t n, const LocalOptions& opts, Rng& rng,
                                  const BatchLoss& loss) {
  if (n < 2) throw std::invalid_argument("client_update: shard needs at least 2 samples");
  ClientRoundStats stats;
  if (opts.swap_phase_order) {
    stats.phase2 = run_phase(shared, local, opts.lr_lambda, n, opts, rng, loss);
    stats.phase1 = run_phase(local, shared, opts.lr_eta, n, opts, rng, loss);
  } else {
    stats.phase1 = run_phase(local, shared, opts.lr_eta, n, opts, rng, loss);
    stats.phase2 = run_phase(shared, local, opts.lr_lambda, n, opts, rng, loss);
  }
  set_trainable(local, true);
  set_trainable(shared, true);
  return stats;
}

std::vector<double> client_update(ClientShard& shard, std::span<const double> theta,
                                  const LocalOptions& opts, Rng& rng, ClientRoundStats* stats) {
  if (!shard.model) throw std::logic_error("client_update: shard has no model");
  if (shard.train.size() == 0) throw std::invalid_argument("client_update: empty shard");
  DvaModel& model = *shard.model;
  model.load_shared(theta);
  const Dataset& ds = shard.train;
  const double xi = shard.xi;
  const bool vanilla = model.arch().variant == ModelVariant::kVanilla;

  BatchLoss loss = [&](std::span<const std::size_t> batch, Rng& r) {
    const ad::Tensor x = gather_tensor(ds, batch);
    if (vanilla) return loss_vanilla_vae(x, model, r);
    if (opts.task == Task::kClassify) {
      const auto labels = ds.gather_labels(batch);
      return loss_classifier(x, labels, model, xi, opts.weights, r);
    }
    return loss_feddva(x, model, xi, opts.weights, r);
  };
  ClientRoundStats s = two_phase_update(model.local_params(), model.shared_params(), ds.size(), opts, rng, loss);
  s.client = shard.id;
  if (stats) *stats = std::move(s);
  return model.flatten_shared();
}

ServerState init_feddva(const FederationConfig& cfg, std::vector<ClientShard>& shards) {
  cfg.validate(shards.size());
  ServerState state;
  state.seed = cfg.seed;
  DvaModel global(cfg.arch, derive_seed(cfg.seed, "global-init"));
  state.theta = global.flatten_shared();
  for (auto& shard : shards) {
    if (!shard.model) shard.model.emplace(cfg.arch, derive_seed(cfg.seed, "client-init", shard.id));
    shard.model->load_shared(state.theta);
  }
  return state;
}

ServerState run_feddva(const FederationConfig& cfg, std::vector<ClientShard>& shards,
                       const RoundObserver& observer, ServerState start) {
  ServerState state = start.theta.empty() ? init_feddva(cfg, shards) : std::move(start);
  cfg.validate(shards.size());
  for (auto& shard : shards) {
    if (!shard.model) throw std::logic_error("run_feddva: resumed shard has no model");
  }
  const bool classify = cfg.local.task == Task::kClassify;

  while (state.round < cfg.rounds) {
    const auto t0 = std::chrono::steady_clock::now();
    RoundRecord rec;
    rec.round = state.round;
    rec.sampled = sample_clients(shards.size(), cfg.clients_per_round, cfg.seed, state.round);

    std::vector<std::vector<double>> thetas(rec.sampled.size());
    rec.clients.resize(rec.sampled.size());
    parallel_for(rec.sampled.size(), cfg.threads, [&](std::size_t i) {
      const std::size_t id = rec.sampled[i];
      Rng rng(derive_seed(cfg.seed, "client-update", id, state.round));
      thetas[i] = client_update(shards[id], state.theta, cfg.local, rng, &rec.clients[i]);
    });

    std::map<std::size_t, std::vector<double>> updates;
    for (std::size_t i = 0; i < rec.sampled.size(); ++i) updates[rec.sampled[i]] = std::move(thetas[i]);
    state.theta = aggregate(updates, weight_map(shards, rec.sampled));
    for (auto& shard : shards) shard.model->load_shared(state.theta);

    for (const auto& c : rec.clients) {
      const double batches = static_cast<double>(c.phase1.batches + c.phase2.batches);
      rec.mean_total += (c.phase1.mean.total * static_cast<double>(c.phase1.batches) +
                         c.phase2.mean.total * static_cast<double>(c.phase2.batches)) / batches;
    }
    rec.mean_total /= static_cast<double>(rec.clients.size());
    if (classify) finish_accuracy(rec, accuracy_per_client(shards, Split::kHeldout).per_client);
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    state.history.push_back(std::move(rec));
    if (classify) state.final_accuracy = state.history.back().accuracy;

    ++state.round;
    if (observer) observer(state, shards);
  }
  return state;
}

MlpClassifier make_baseline_classifier(const FederationConfig& cfg) {
  return MlpClassifier(cfg.arch.input_dim, cfg.arch.hidden_dims, cfg.arch.n_classes, cfg.arch.activation,
                       derive_seed(cfg.seed, "fedavg-init"));
}

namespace {

void train_classifier(MlpClassifier& model, const Dataset& ds, std::size_t epochs, double lr,
                      std::size_t batch_size, Rng& rng) {
  auto params = model.params();
  for (std::size_t e = 0; e < epochs; ++e) {
    for (const auto& batch : make_batches(ds.size(), batch_size, rng)) {
      for (auto& p : params) p.zero_grad();
      const ad::Tensor x = gather_tensor(ds, batch);
      const auto labels = ds.gather_labels(batch);
      ad::backward(ad::softmax_cross_entropy(model.logits(x), labels));
      ad::sgd_step(params, lr);
    }
  }
}

}  // namespace

ServerState run_fedavg_baseline(const FederationConfig& cfg, const std::vector<ClientShard>& shards,
                                const RoundObserver& observer, ServerState start) {
  cfg.validate(shards.size());
  if (cfg.arch.n_classes == 0) throw std::invalid_argument("fedavg: classifier mode needs n_classes > 0");
  MlpClassifier global = make_baseline_classifier(cfg);
  ServerState state = std::move(start);
  if (state.theta.empty()) {
    state.seed = cfg.seed;
    state.theta = global.flatten();
  }
  global.load(state.theta);

  while (state.round < cfg.rounds) {
    const auto t0 = std::chrono::steady_clock::now();
    RoundRecord rec;
    rec.round = state.round;
    rec.sampled = sample_clients(shards.size(), cfg.clients_per_round, cfg.seed, state.round);
    std::vector<std::vector<double>> thetas(rec.sampled.size());
    parallel_for(rec.sampled.size(), cfg.threads, [&](std::size_t i) {
      const std::size_t id = rec.sampled[i];
      MlpClassifier local = global.clone();
      Rng rng(derive_seed(cfg.seed, "fedavg-update", id, state.round));
      // Two phases of `epochs` each in FedDVA; FedAvg gets the same number of passes.
      train_classifier(local, shards[id].train, 2 * cfg.local.epochs, cfg.local.lr_lambda, cfg.local.batch_size,
                       rng);
      thetas[i] = local.flatten();
    });
    std::map<std::size_t, std::vector<double>> updates;
    for (std::size_t i = 0; i < rec.sampled.size(); ++i) updates[rec.sampled[i]] = std::move(thetas[i]);
    state.theta = aggregate(updates, weight_map(shards, rec.sampled));
    global.load(state.theta);

    finish_accuracy(rec, accuracy_per_client(global, shards, Split::kHeldout).per_client);
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    state.history.push_back(std::move(rec));
    state.final_accuracy = state.history.back().accuracy;
    ++state.round;
    if (observer) observer(state, shards);
  }
  if (state.final_accuracy.empty()) state.final_accuracy = accuracy_per_client(global, shards, Split::kHeldout).per_client;
  return state;
}

ServerState run_fedavg_finetune(const FederationConfig& cfg, const std::vector<ClientShard>& shards,
                                std::size_t ft_epochs, const RoundObserver& observer, ServerState start,
                                std::vector<MlpClassifier>* tuned_out) {
  ServerState state = run_fedavg_baseline(cfg, shards, observer, std::move(start));
  MlpClassifier global = make_baseline_classifier(cfg);
  global.load(state.theta);
  std::vector<MlpClassifier> tuned;
  for (std::size_t k = 0; k < shards.size(); ++k) tuned.push_back(global.clone());
  parallel_for(shards.size(), cfg.threads, [&](std::size_t k) {
    Rng rng(derive_seed(cfg.seed, "fedavg-finetune", k));
    train_classifier(tuned[k], shards[k].train, ft_epochs, cfg.local.lr_eta, cfg.local.batch_size, rng);
  });
  state.final_accuracy = accuracy_per_client(tuned, shards, Split::kHeldout).per_client;
  if (tuned_out) *tuned_out = std::move(tuned);
  return state;
}

}  // namespace feddva
