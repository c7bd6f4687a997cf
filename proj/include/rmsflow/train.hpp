#pragma once

// Two-phase supervised training with a per-epoch CSV log, best/last checkpoints and resume.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "rmsflow/checkpoint.hpp"
#include "rmsflow/eval.hpp"

namespace rmsflow {

struct TrainConfig {
    std::size_t points = 8192;
    std::size_t phase1_epochs = 120;
    std::size_t phase2_epochs = 680;
    double lr = 1e-3;
    double decay = 0.7;
    std::size_t decay_every = 10;
    double phase2_lr = 1e-4;
    std::size_t batch = 4;
    double clip = 1.0;  // global gradient norm; <= 0 disables
    bool augment = true;
    AugmentConfig aug;
    std::size_t val_points = 0;  // 0: same as `points`
    std::size_t val_scenes = 0;  // 0: all
    std::uint64_t seed = 1;
    std::size_t threads = 1;
    bool wall_time = true;  // false writes 0 in wall_s so logs are byte-comparable
    AdamConfig adam;

    std::size_t epochs() const { return phase1_epochs + phase2_epochs; }

    void validate() const
    {
        if (points == 0) throw ConfigError("train.points must be positive");
        if (batch == 0) throw ConfigError("train.batch must be positive");
        if (decay_every == 0) throw ConfigError("train.decay_every must be positive");
        if (!(lr > 0.0) || !(phase2_lr > 0.0)) throw ConfigError("learning rates must be positive");
        if (!(decay > 0.0 && decay <= 1.0)) throw ConfigError("train.decay must lie in (0,1]");
    }
};

/// Phase 1: lr * decay^floor(epoch / decay_every); phase 2: fixed.
inline double learning_rate(const TrainConfig& cfg, std::size_t epoch)
{
    if (epoch >= cfg.phase1_epochs) return cfg.phase2_lr;
    return cfg.lr * std::pow(cfg.decay, static_cast<double>(epoch / cfg.decay_every));
}

inline int phase_of(const TrainConfig& cfg, std::size_t epoch) { return epoch < cfg.phase1_epochs ? 1 : 2; }

struct EpochLog {
    std::size_t epoch = 0;
    int phase = 1;
    double lr = 0.0;
    double train_loss = 0.0;
    double val_epe3d = 0.0;
    double val_acc3dr = 0.0;
    double wall_s = 0.0;
};

inline constexpr const char* kTrainLogHeader = "epoch,phase,lr,train_loss,val_epe3d,val_acc3dr,wall_s";

inline std::string format_log_row(const EpochLog& e)
{
    std::ostringstream os;
    os << e.epoch << ',' << e.phase << ',' << format_double(e.lr, "%.9g") << ','
       << format_double(e.train_loss, "%.9g") << ',' << format_double(e.val_epe3d, "%.9g") << ','
       << format_double(e.val_acc3dr, "%.9g") << ',' << format_double(e.wall_s, "%.3f");
    return os.str();
}

/// Training input for one (epoch, scene): phase 1 keeps one subsample per scene for the whole
/// phase, phase 2 redraws it every epoch. Augmentation is redrawn every epoch.
inline ScenePair training_sample(const TrainConfig& cfg, const ScenePair& scene, std::size_t scene_index,
                                 std::size_t epoch)
{
    const std::uint64_t sub_seed =
        phase_of(cfg, epoch) == 1 ? derive_seed(cfg.seed, {seed_tag::subsample, scene_index})
                                  : derive_seed(cfg.seed, {seed_tag::subsample, scene_index, epoch + 1});
    Rng sub_rng(sub_seed);
    ScenePair s = subsample_pair(scene, cfg.points, sub_rng);
    if (cfg.augment) {
        Rng aug_rng(derive_seed(cfg.seed, {seed_tag::augment, scene_index, epoch}));
        s = augment(s, aug_rng, cfg.aug);
    }
    return s;
}

struct SceneGrad {
    double loss = 0.0;
    std::vector<std::vector<float>> grads;  // aligned with params.entries() order
};

/// Forward, loss and backward for one scene; gradients are returned rather than accumulated so
/// scenes can run on separate workers and be summed in a fixed order.
inline SceneGrad scene_gradient(const ParamStore<float>& params, const NetConfig& net_cfg, const LossWeights& weights,
                                const ScenePair& s, std::uint64_t net_seed)
{
    Tape<float> tape;
    Net<float> net{tape, params, net_cfg, true};
    Rng rng(net_seed);
    ForwardResult<float> fr = forward(net, s.pc_t, s.pc_t1, rng);
    const Var loss = multiscale_loss(tape, fr.flows, gt_at_levels(s.gt_flow, fr.samples), weights);
    tape.backward(loss);
    SceneGrad g;
    g.loss = tape.value(loss).data[0];
    const auto& bound = tape.bound_params();
    for (const auto& [name, e] : params.entries()) {
        auto it = bound.find(name);
        if (it == bound.end()) {
            g.grads.emplace_back(e.value.size(), 0.0f);
        } else {
            const auto gr = tape.grad(it->second);
            g.grads.emplace_back(gr.begin(), gr.end());
        }
    }
    return g;
}

struct TrainData {
    std::vector<ScenePair> train;
    std::vector<ScenePair> val;
};

struct TrainResult {
    std::vector<EpochLog> log;
    double best_val_epe3d = 0.0;
    std::size_t best_epoch = 0;
};

/// Keys stored beside the optimizer state in last.rmsw.
inline constexpr const char* kNextEpochKey = "optim.next_epoch";
inline constexpr const char* kBestKey = "optim.best";

inline void put_scalar(TensorMap& m, const std::string& key, std::vector<float> values)
{
    const std::size_t n = values.size();
    m[key] = Tensor<float>({n}, std::move(values));
}

/// Encodes an integer exactly in two float halves (each < 2^16).
inline std::vector<float> encode_u32(std::uint32_t v)
{
    return {static_cast<float>(v & 0xFFFFu), static_cast<float>(v >> 16)};
}

inline std::uint32_t decode_u32(const Tensor<float>& t, std::size_t offset = 0)
{
    return static_cast<std::uint32_t>(t.data.at(offset)) | (static_cast<std::uint32_t>(t.data.at(offset + 1)) << 16);
}

class Trainer {
public:
    Trainer(NetConfig net_cfg, LossWeights weights, TrainConfig cfg, std::filesystem::path out_dir)
        : net_cfg_(std::move(net_cfg)), weights_(std::move(weights)), cfg_(std::move(cfg)), out_dir_(std::move(out_dir))
    {
        net_cfg_.validate();
        weights_.validate(net_cfg_.depth());
        cfg_.validate();
        if (cfg_.points < net_cfg_.min_points()) {
            throw ConfigError("train.points (" + std::to_string(cfg_.points) + ") is below the first pyramid level (" +
                              std::to_string(net_cfg_.min_points()) + ")");
        }
    }

    /// Fresh parameters, or the state of `last.rmsw` when `resume` is set and it exists.
    TrainResult run(const TrainData& data, bool resume = false,
                    const std::function<void(const EpochLog&)>& on_epoch = {})
    {
        if (data.train.empty()) throw ConfigError("training split is empty");
        if (data.val.empty()) throw ConfigError("validation split is empty");
        std::filesystem::create_directories(out_dir_);
        ParamStore<float> params = init_params(net_cfg_, cfg_.seed);
        TrainResult result;
        result.best_val_epe3d = std::numeric_limits<double>::infinity();
        std::size_t start = 0;
        std::vector<std::string> kept_rows;
        if (resume && std::filesystem::exists(last_path())) {
            const TensorMap m = read_checkpoint(last_path());
            load_into(params, m);
            start = decode_u32(m.at(kNextEpochKey));
            const Tensor<float>& best = m.at(kBestKey);
            result.best_val_epe3d = best.data.at(0);
            result.best_epoch = decode_u32(best, 1);
            kept_rows = read_log_rows(start);
        }
        write_log(kept_rows, true);

        std::vector<ScenePair> val = data.val;
        if (cfg_.val_scenes > 0 && val.size() > cfg_.val_scenes) val.resize(cfg_.val_scenes);

        ParamStore<float> last_good = params;
        for (std::size_t epoch = start; epoch < cfg_.epochs(); ++epoch) {
            const auto t0 = std::chrono::steady_clock::now();
            EpochLog e;
            e.epoch = epoch;
            e.phase = phase_of(cfg_, epoch);
            e.lr = learning_rate(cfg_, epoch);
            try {
                e.train_loss = train_epoch(params, data.train, epoch, e.lr);
            } catch (const DivergenceError&) {
                write_checkpoint(out_dir_ / "last_good.rmsw", to_tensor_map(last_good, false));
                throw;
            }
            EvalOptions eo;
            eo.points = cfg_.val_points ? cfg_.val_points : cfg_.points;
            eo.seed = cfg_.seed;
            eo.threads = cfg_.threads;
            const MetricsReport vr = aggregate(evaluate_scenes(params, net_cfg_, val, eo));
            e.val_epe3d = vr.epe3d_m;
            e.val_acc3dr = vr.acc3dr;
            if (!std::isfinite(e.val_epe3d)) {
                write_checkpoint(out_dir_ / "last_good.rmsw", to_tensor_map(last_good, false));
                throw DivergenceError("validation EPE3D is not finite at epoch " + std::to_string(epoch));
            }
            last_good = params;
            // best is kept at checkpoint (float) precision so resumed runs compare identically
            if (static_cast<float>(e.val_epe3d) < result.best_val_epe3d) {
                result.best_val_epe3d = static_cast<float>(e.val_epe3d);
                result.best_epoch = epoch;
                write_checkpoint(best_path(), to_tensor_map(params, false));
            }
            e.wall_s = cfg_.wall_time
                           ? std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()
                           : 0.0;
            append_log(e);
            result.log.push_back(e);

            TensorMap m = to_tensor_map(params, true);
            put_scalar(m, kNextEpochKey, encode_u32(static_cast<std::uint32_t>(epoch + 1)));
            std::vector<float> best = {static_cast<float>(result.best_val_epe3d)};
            for (float f : encode_u32(static_cast<std::uint32_t>(result.best_epoch))) best.push_back(f);
            put_scalar(m, kBestKey, std::move(best));
            write_checkpoint(last_path(), m);
            if (on_epoch) on_epoch(e);
        }
        return result;
    }

    std::filesystem::path best_path() const { return out_dir_ / "best.rmsw"; }
    std::filesystem::path last_path() const { return out_dir_ / "last.rmsw"; }
    std::filesystem::path log_path() const { return out_dir_ / "log.csv"; }

private:
    double train_epoch(ParamStore<float>& params, const std::vector<ScenePair>& scenes, std::size_t epoch, double lr)
    {
        std::vector<std::size_t> order(scenes.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng order_rng(derive_seed(cfg_.seed, {seed_tag::order, epoch}));
        std::shuffle(order.begin(), order.end(), order_rng);

        double loss_sum = 0.0;
        for (std::size_t b = 0; b < order.size(); b += cfg_.batch) {
            const std::size_t n = std::min(cfg_.batch, order.size() - b);
            std::vector<SceneGrad> grads(n);
            parallel_for(n, cfg_.threads, [&](std::size_t j) {
                const std::size_t idx = order[b + j];
                const ScenePair s = training_sample(cfg_, scenes[idx], idx, epoch);
                grads[j] = scene_gradient(params, net_cfg_, weights_, s,
                                          derive_seed(cfg_.seed, {seed_tag::network, idx, epoch}));
            });
            params.zero_grad();
            for (const SceneGrad& g : grads) {
                if (!std::isfinite(g.loss)) {
                    throw DivergenceError("training loss became non-finite at epoch " + std::to_string(epoch));
                }
                loss_sum += g.loss;
                std::size_t p = 0;
                for (auto& [name, e] : params.entries()) {
                    const auto& src = g.grads[p++];
                    for (std::size_t i = 0; i < src.size(); ++i) e.grad[i] += src[i];
                }
            }
            if (cfg_.clip > 0.0) clip_grad_norm(params, cfg_.clip);
            adam_step(params, static_cast<float>(lr), cfg_.adam);
            for (auto& [name, e] : params.entries()) {
                for (float v : e.value.data) {
                    if (!std::isfinite(v)) {
                        throw DivergenceError("parameter " + name + " became non-finite at epoch " +
                                              std::to_string(epoch));
                    }
                }
            }
        }
        return loss_sum / static_cast<double>(scenes.size());
    }

    std::vector<std::string> read_log_rows(std::size_t n) const
    {
        std::vector<std::string> rows;
        std::ifstream in(log_path());
        std::string line;
        std::getline(in, line);  // header
        while (rows.size() < n && std::getline(in, line)) rows.push_back(line);
        return rows;
    }

    void write_log(const std::vector<std::string>& rows, bool header) const
    {
        std::ofstream out(log_path(), std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + log_path().string());
        if (header) out << kTrainLogHeader << '\n';
        for (const auto& r : rows) out << r << '\n';
    }

    void append_log(const EpochLog& e) const
    {
        std::ofstream out(log_path(), std::ios::app);
        out << format_log_row(e) << '\n';
    }

    NetConfig net_cfg_;
    LossWeights weights_;
    TrainConfig cfg_;
    std::filesystem::path out_dir_;
};

}  // namespace rmsflow
