#include "m2fn/train.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <nlohmann/json.hpp>
#include <numeric>
#include <thread>

#include "m2fn/errors.hpp"
#include "m2fn/random.hpp"

namespace m2fn {

std::pair<Tensor, Tensor> Dataset::batch(const std::vector<std::size_t>& indices) const {
  const std::size_t per_image = channels * image_size * image_size;
  std::vector<double> img(indices.size() * per_image);
  std::vector<double> aux(indices.size() * dim_aux);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const Sample& s = samples.at(indices[b]);
    const auto& src = images.at(s.image);
    std::copy(src.begin(), src.end(), img.begin() + b * per_image);
    if (dim_aux > 0) {
      if (s.aux.size() != dim_aux) throw SchemaError("dataset: aux width mismatch in sample");
      std::copy(s.aux.begin(), s.aux.end(), aux.begin() + b * dim_aux);
    }
  }
  Tensor images_t({indices.size(), channels, image_size, image_size}, std::move(img));
  Tensor aux_t;
  if (dim_aux > 0) aux_t = Tensor({indices.size(), dim_aux}, std::move(aux));
  return {images_t, aux_t};
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  Dataset d = *this;
  d.samples.clear();
  for (std::size_t i : indices) d.samples.push_back(samples.at(i));
  return d;
}

std::vector<Prediction> Dataset::targets(HeadKind head) const {
  std::vector<Prediction> t;
  for (const Sample& s : samples) {
    if (head == HeadKind::kScalar) {
      t.emplace_back(s.y);
    } else {
      t.emplace_back(ScoreDistribution{s.target_dist, bucket_values});
    }
  }
  return t;
}

LossKind parse_loss(const std::string& name) {
  if (name == "wmse") return LossKind::kWeightedMse;
  if (name == "kld") return LossKind::kKld;
  if (name == "emd") return LossKind::kEmd;
  throw ConfigError("unknown loss '" + name + "' (expected wmse|kld|emd)");
}

std::string loss_name(LossKind kind) {
  switch (kind) {
    case LossKind::kWeightedMse: return "wmse";
    case LossKind::kKld: return "kld";
    case LossKind::kEmd: return "emd";
  }
  return "?";
}

void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = nlohmann::json{{"epoch", r.epoch}, {"train_loss", r.train_loss}};
  if (r.eval) j["eval"] = *r.eval;
}

SgdMomentum::SgdMomentum(NamedTensors params, OptimizerSpec spec)
    : params_(std::move(params)), spec_(spec) {
  for (const auto& [name, t] : params_) velocity_.emplace_back(t.size(), 0.0);
}

void SgdMomentum::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

void SgdMomentum::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].second;
    if (!p.has_grad()) continue;
    auto v = p.mutable_values();
    const auto g = p.grad();
    auto& vel = velocity_[i];
    for (std::size_t k = 0; k < v.size(); ++k) {
      vel[k] = spec_.momentum * vel[k] + g[k] + spec_.weight_decay * v[k];
      v[k] -= spec_.learning_rate * vel[k];
    }
  }
}

namespace {

void check_loss_head(LossKind kind, HeadKind head) {
  const bool scalar = head == HeadKind::kScalar;
  if (kind == LossKind::kWeightedMse && !scalar) {
    throw ConfigError("loss wmse needs a scalar head");
  }
  if (kind != LossKind::kWeightedMse && scalar) {
    throw ConfigError("loss " + loss_name(kind) + " needs a distribution head");
  }
}

std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t> order,
                                                   std::size_t batch_size) {
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  // A trailing singleton cannot be batch-normalized in train mode; fold it
  // into the previous batch.
  if (batches.size() > 1 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back().front());
    batches.pop_back();
  }
  return batches;
}

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  SplitMix rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

std::vector<std::vector<double>> snapshot(const NamedTensors& tensors) {
  std::vector<std::vector<double>> copy;
  for (const auto& [name, t] : tensors) copy.emplace_back(t.values().begin(), t.values().end());
  return copy;
}

void restore(NamedTensors& tensors, const std::vector<std::vector<double>>& copy) {
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    std::copy(copy[i].begin(), copy[i].end(), tensors[i].second.mutable_values().begin());
  }
}

}  // namespace

Tensor batch_loss(const Tensor& output, const Dataset& data,
                  const std::vector<std::size_t>& indices, LossKind kind) {
  if (kind == LossKind::kWeightedMse) {
    std::vector<double> y, w;
    for (std::size_t i : indices) {
      y.push_back(data.samples[i].y);
      w.push_back(data.samples[i].w);
    }
    return weighted_mse_loss(output, y, w);
  }
  std::vector<double> target;
  for (std::size_t i : indices) {
    const auto& d = data.samples[i].target_dist;
    if (d.size() != output.dim(1)) throw SchemaError("dataset: missing target distribution");
    target.insert(target.end(), d.begin(), d.end());
  }
  return kind == LossKind::kKld ? kld_loss(output, target) : emd_loss(output, target, 2);
}

double dataset_loss(Model& model, const Dataset& data, LossKind kind, std::size_t batch_size) {
  check_loss_head(kind, model.config().head);
  NamedTensors buffers = model.buffers();
  const auto saved = snapshot(buffers);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  double total = 0.0;
  for (const auto& idx : make_batches(order, batch_size)) {
    auto [images, aux] = data.batch(idx);
    const Tensor out = model.forward(images, aux, idx.size() >= 2 ? Mode::kTrain : Mode::kEval);
    total += batch_loss(out, data, idx, kind).item() * static_cast<double>(idx.size());
  }
  restore(buffers, saved);
  return total / static_cast<double>(data.size());
}

TrainReport train(Model& model, const Dataset& train_set, const TrainOptions& options,
                  const Dataset* eval_set) {
  if (train_set.size() == 0) throw DataError("train: empty dataset");
  if (options.batch_size == 0 || options.epochs == 0) {
    throw ConfigError("train: epochs and batch_size must be positive");
  }
  check_loss_head(options.loss, model.config().head);
  if (model.config().toggles.aux && train_set.dim_aux != model.config().dim_aux) {
    throw SchemaError("train: dataset dim_aux " + std::to_string(train_set.dim_aux) +
                      " does not match model " + std::to_string(model.config().dim_aux));
  }
  if (train_set.size() < 2) throw BatchSizeError("train: need at least 2 samples");

  TrainReport report;
  report.initial_loss = dataset_loss(model, train_set, options.loss, options.batch_size);
  SgdMomentum opt(model.parameters(), options.optimizer);
  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    const auto order =
        shuffled(train_set.size(), derive_seed(options.seed, "epoch" + std::to_string(epoch)));
    double total = 0.0;
    for (const auto& idx : make_batches(order, options.batch_size)) {
      auto [images, aux] = train_set.batch(idx);
      Tape tape;
      Tensor loss;
      {
        Tape::Recording rec(tape);
        const Tensor out = model.forward(images, aux, Mode::kTrain);
        loss = batch_loss(out, train_set, idx, options.loss);
      }
      opt.zero_grad();
      tape.backward(loss);
      opt.step();
      total += loss.item() * static_cast<double>(idx.size());
    }
    EpochRecord rec{epoch, total / static_cast<double>(train_set.size()), std::nullopt};
    const bool last = epoch == options.epochs;
    if (eval_set != nullptr &&
        (last || (options.eval_every > 0 && epoch % options.eval_every == 0))) {
      rec.eval = evaluate_model(model, *eval_set);
    }
    report.epochs.push_back(rec);
  }
  report.final_loss = dataset_loss(model, train_set, options.loss, options.batch_size);
  if (eval_set != nullptr) report.final_eval = report.epochs.back().eval;
  return report;
}

std::vector<Prediction> predict(Model& model, const Dataset& data, std::size_t batch_size) {
  std::vector<Prediction> preds;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    auto [images, aux] = data.batch(idx);
    const Tensor out = model.forward(images, aux, Mode::kEval);
    auto part = to_predictions(out, model.config().head, data.bucket_values);
    preds.insert(preds.end(), std::make_move_iterator(part.begin()),
                 std::make_move_iterator(part.end()));
  }
  return preds;
}

MetricReport evaluate_model(Model& model, const Dataset& data, std::size_t batch_size) {
  const auto preds = predict(model, data, batch_size);
  const auto targets = data.targets(model.config().head);
  return evaluate(preds, targets);
}

std::size_t thread_cap() {
  std::size_t cap = 1;
  if (const char* env = std::getenv("M2FN_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) cap = static_cast<std::size_t>(v);
  }
  const std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
  return std::min(cap, hw);
}

std::vector<AblationRow> ablate_grid(const ModelConfig& base, const Dataset& train_set,
                                     const Dataset& test_set, const TrainOptions& options,
                                     const std::vector<Toggles>& rows, std::size_t threads) {
  std::vector<AblationRow> results(rows.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < rows.size(); i = next++) {
      try {
        ModelConfig config = base;
        config.toggles = rows[i];
        Model model(config);
        results[i].toggles = rows[i];
        results[i].report = train(model, train_set, options, &test_set);
        results[i].metrics = *results[i].report.final_eval;
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(threads, rows.size()));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  return results;
}

}  // namespace m2fn
