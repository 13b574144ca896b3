#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "msbdn/checkpoint.hpp"
#include "msbdn/config.hpp"
#include "msbdn/data.hpp"
#include "msbdn/metrics.hpp"
#include "msbdn/network.hpp"

namespace msbdn {

/// lr0 * decay^floor(epoch / decay_every).
inline double lr_at(int epoch, const TrainConfig& t) {
  if (epoch < 0) throw std::invalid_argument("lr_at: epoch must be >= 0");
  return t.lr0 * std::pow(t.decay, double(epoch / t.decay_every));
}

/// ceil(pairs * scales_per_image / batch) unless overridden.
inline std::uint64_t steps_per_epoch(std::size_t pairs, const TrainConfig& t) {
  if (t.steps_per_epoch > 0) return static_cast<std::uint64_t>(t.steps_per_epoch);
  const auto draws = static_cast<std::uint64_t>(pairs) * static_cast<std::uint64_t>(t.scales_per_image);
  return std::max<std::uint64_t>(1, (draws + static_cast<std::uint64_t>(t.batch) - 1) / static_cast<std::uint64_t>(t.batch));
}

/// Raised on a non-finite loss or gradient; what() carries the diagnostics.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& msg, std::uint64_t step, double lr, double loss, double grad_norm)
      : std::runtime_error(msg), step(step), lr(lr), loss(loss), grad_norm(grad_norm) {}
  std::uint64_t step;
  double lr, loss, grad_norm;
};

/// Run the model on an image of any size: edge-pad to the size multiple,
/// predict, crop back. The result is not clamped.
template <class T>
Tensor<T> dehaze(ParameterStore<T>& p, const NetworkConfig& cfg, const Tensor<T>& hazy) {
  auto padded = pad_edge_to_multiple(hazy, cfg.size_multiple());
  auto out = predict(p, cfg, padded);
  return padded.shape() == hazy.shape() ? out : crop(out, 0, 0, hazy.h(), hazy.w());
}

/// PSNR / SSIM of clamped predictions against the clean images.
template <class T>
MetricReport evaluate(ParameterStore<T>& p, const NetworkConfig& cfg, const Dataset<T>& data) {
  MetricReport r;
  if (data.empty()) return r;
  for (const auto& s : data) {
    const auto pred = clamped(dehaze(p, cfg, s.hazy));
    r.images.push_back({s.name, psnr(pred, s.clean), ssim(pred, s.clean)});
    r.psnr_db += r.images.back().psnr_db;
    r.ssim += r.images.back().ssim;
  }
  r.psnr_db /= double(data.size());
  r.ssim /= double(data.size());
  return r;
}

struct EpochRecord {
  int epoch = 0;
  double val_psnr = 0, val_ssim = 0;
};

struct TrainLog {
  std::vector<double> losses;  // one per step run by this call
  std::vector<EpochRecord> epochs;
};

/// Training loop. Each step draws its batch from Rng::derive(seed, step), so a
/// run resumed from a checkpoint with optimizer state continues bit-for-bit.
template <class T>
class Trainer {
 public:
  Trainer(NetworkConfig net, TrainConfig train, const Dataset<T>& data, const Dataset<T>* validation = nullptr)
      : net_(net), train_(train), data_(&data), val_(validation) {
    net_.validate();
    train_.validate(net_);
    if (data.empty()) throw DataError("training set is empty");
    params_ = make_parameters<T>(net_);
    Rng rng(train_.seed);
    init_model(params_, net_, rng, train_.branch_init_scale);
    spe_ = msbdn::steps_per_epoch(data.size(), train_);
  }

  /// Continue from a checkpoint. Without optimizer state only the weights
  /// are taken and training restarts at step 0.
  void resume(const Checkpoint<T>& ck) {
    if (!(ck.config == net_)) throw std::invalid_argument("checkpoint network config differs from the run config");
    params_ = ck.params;
    step_ = ck.step.value_or(0);
  }

  /// Directory for steps.csv, epochs.csv and checkpoint.msbc. Logs are
  /// appended when resuming and truncated on a fresh run.
  void set_output_dir(std::string dir) { out_dir_ = std::move(dir); }
  void set_progress(std::function<void(const std::string&)> fn) { progress_ = std::move(fn); }

  ParameterStore<T>& params() { return params_; }
  const NetworkConfig& network() const { return net_; }
  const TrainConfig& config() const { return train_; }
  std::uint64_t step() const { return step_; }
  std::uint64_t steps_per_epoch() const { return spe_; }
  std::uint64_t total_steps() const { return spe_ * static_cast<std::uint64_t>(train_.epochs); }
  int epoch_of(std::uint64_t step) const { return static_cast<int>(step / spe_); }

  /// Loss of the current parameters on the batch for `step` (no update).
  double batch_loss(std::uint64_t step) {
    Rng rng = Rng::derive(train_.seed, step);
    auto batch = sample_batch(*data_, train_, rng);
    auto pred = model_forward(params_, net_, Var<T>::constant(batch.hazy));
    return double(ops::mse_loss(pred, Var<T>::constant(batch.clean)).value()[0]);
  }

  /// One optimizer step; returns the batch loss before the update.
  double train_step() {
    const int epoch = epoch_of(step_);
    const double lr = lr_at(epoch, train_);
    Rng rng = Rng::derive(train_.seed, step_);
    auto batch = sample_batch(*data_, train_, rng);
    params_.zero_grad();
    auto pred = model_forward(params_, net_, Var<T>::constant(batch.hazy));
    auto loss = ops::mse_loss(pred, Var<T>::constant(batch.clean));
    const double lv = double(loss.value()[0]);
    if (!std::isfinite(lv)) fail("non-finite loss", lr, lv, std::nan(""));
    backward(loss);
    const double gn = params_.grad_norm();
    if (!std::isfinite(gn)) fail("non-finite gradient", lr, lv, gn);
    if (train_.grad_clip > 0 && gn > train_.grad_clip) {
      const T s = static_cast<T>(train_.grad_clip / gn);
      for (auto& e : params_)
        for (auto& g : e.grad.values()) g *= s;
    }
    adam_step(params_, train_.adam(lr), static_cast<std::int64_t>(step_ + 1));
    ++step_;
    return lv;
  }

  /// Train until `stop_at` (default: the configured total). Validation,
  /// logging and checkpointing happen at every epoch boundary and at the end.
  TrainLog run(std::optional<std::uint64_t> stop_at = std::nullopt) {
    const std::uint64_t target = std::min(stop_at.value_or(total_steps()), total_steps());
    TrainLog log;
    open_logs();
    while (step_ < target) {
      const int epoch = epoch_of(step_);
      const double lr = lr_at(epoch, train_);
      const double loss = train_step();
      log.losses.push_back(loss);
      if (steps_csv_) {
        std::fprintf(steps_csv_.get(), "%llu,%d,%.9g,%.9g\n", static_cast<unsigned long long>(step_), epoch, lr, loss);
      }
      if (step_ % spe_ == 0) {
        const auto rec = end_epoch(epoch);
        log.epochs.push_back(rec);
      }
    }
    save_if_configured();
    close_logs();
    return log;
  }

  void save(const std::string& path) const { save_checkpoint(path, net_, params_, step_); }

 private:
  [[noreturn]] void fail(const std::string& what, double lr, double loss, double gn) {
    std::string msg = what + " at step " + std::to_string(step_ + 1) + " (epoch " + std::to_string(epoch_of(step_)) +
                      ", lr " + detail::format_double(lr) + ", loss " + detail::format_double(loss) +
                      ", grad norm " + detail::format_double(gn) + ")";
    std::vector<std::pair<double, std::string>> norms;
    for (const auto& e : params_) {
      const double v = std::sqrt(dot(e.grad, e.grad));
      norms.emplace_back(std::isfinite(v) ? v : HUGE_VAL, e.name);
    }
    std::stable_sort(norms.begin(), norms.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    msg += "; largest grad norms:";
    for (std::size_t i = 0; i < std::min<std::size_t>(5, norms.size()); ++i)
      msg += " " + norms[i].second + "=" + detail::format_double(norms[i].first);
    throw NumericError(msg, step_ + 1, lr, loss, gn);
  }

  EpochRecord end_epoch(int epoch) {
    EpochRecord rec{epoch, 0, 0};
    if (val_ && !val_->empty()) {
      const auto m = evaluate(params_, net_, *val_);
      rec.val_psnr = m.psnr_db;
      rec.val_ssim = m.ssim;
    }
    if (epochs_csv_) std::fprintf(epochs_csv_.get(), "%d,%.9g,%.9g\n", epoch, rec.val_psnr, rec.val_ssim);
    if (progress_) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "epoch %d step %llu val_psnr %.3f val_ssim %.4f", epoch,
                    static_cast<unsigned long long>(step_), rec.val_psnr, rec.val_ssim);
      progress_(buf);
    }
    save_if_configured();
    return rec;
  }

  struct FileCloser {
    void operator()(std::FILE* f) const {
      if (f) std::fclose(f);
    }
  };
  using File = std::unique_ptr<std::FILE, FileCloser>;

  void open_logs() {
    if (out_dir_.empty()) return;
    std::filesystem::create_directories(out_dir_);
    const bool fresh = step_ == 0;
    auto open = [&](const char* name, const char* header) {
      const auto path = out_dir_ + "/" + name;
      const bool exists = std::filesystem::exists(path);
      File f(std::fopen(path.c_str(), fresh ? "w" : "a"));
      if (!f) throw DataError("cannot open " + path);
      if (fresh || !exists) std::fputs(header, f.get());
      return f;
    };
    steps_csv_ = open("steps.csv", "step,epoch,lr,loss\n");
    epochs_csv_ = open("epochs.csv", "epoch,val_psnr,val_ssim\n");
  }

  void close_logs() {
    steps_csv_.reset();
    epochs_csv_.reset();
  }

  void save_if_configured() {
    if (out_dir_.empty()) return;
    if (steps_csv_) std::fflush(steps_csv_.get());
    if (epochs_csv_) std::fflush(epochs_csv_.get());
    save(out_dir_ + "/checkpoint.msbc");
  }

  NetworkConfig net_;
  TrainConfig train_;
  const Dataset<T>* data_;
  const Dataset<T>* val_;
  ParameterStore<T> params_;
  std::uint64_t spe_ = 1;
  std::uint64_t step_ = 0;
  std::string out_dir_;
  std::function<void(const std::string&)> progress_;
  File steps_csv_, epochs_csv_;
};

// ---------------------------------------------------------------------------
// Ablation

struct AblationRow {
  DecoderVariant variant = DecoderVariant::sos;
  bool dff = false;
  std::uint64_t params = 0;
  double val_psnr = 0, val_ssim = 0;
  std::string error;  // non-empty when this variant failed
};

/// Train every (variant, dff) combination from the same settings and seed and
/// score it on `validation`. A failure is recorded in its row and the sweep
/// continues.
template <class T>
std::vector<AblationRow> run_ablation(const Dataset<T>& train, const Dataset<T>& validation, const Settings& base,
                                      const std::vector<DecoderVariant>& variants, const std::vector<bool>& dff_modes,
                                      const std::function<void(const std::string&)>& progress = {}) {
  std::vector<AblationRow> rows;
  for (auto v : variants)
    for (bool dff : dff_modes) {
      AblationRow row;
      row.variant = v;
      row.dff = dff;
      NetworkConfig net = base.net;
      net.decoder_variant = v;
      net.dff_enabled = dff;
      try {
        row.params = count_parameters(net);
        Trainer<T> trainer(net, base.train, train);
        trainer.run();
        const auto m = evaluate(trainer.params(), net, validation);
        row.val_psnr = m.psnr_db;
        row.val_ssim = m.ssim;
      } catch (const std::exception& e) {
        row.error = e.what();
      }
      if (progress)
        progress(std::string(to_string(v)) + (dff ? "+dff" : "") +
                 (row.error.empty() ? ": val_psnr " + detail::format_double(row.val_psnr) : ": FAILED " + row.error));
      rows.push_back(row);
    }
  return rows;
}

/// CSV `variant,dff,params,val_psnr,val_ssim`; failed rows leave the metrics empty.
inline std::string format_ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "variant,dff,params,val_psnr,val_ssim\n";
  char buf[128];
  for (const auto& r : rows) {
    out += std::string(to_string(r.variant)) + "," + (r.dff ? "on" : "off") + "," + std::to_string(r.params) + ",";
    if (r.error.empty()) {
      std::snprintf(buf, sizeof buf, "%.4f,%.5f", r.val_psnr, r.val_ssim);
      out += buf;
    } else {
      out += ",";
    }
    out += "\n";
  }
  return out;
}

}  // namespace msbdn
