#pragma once

// Run configuration: flat `key = value` text with dotted keys, plus `key=value` overrides.
// Every key has a default; unknown keys are rejected.

#include <cctype>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rmsflow/data.hpp"
#include "rmsflow/predictor.hpp"
#include "rmsflow/train.hpp"

namespace rmsflow {

struct BenchConfig {
    std::vector<std::size_t> sizes{2048, 4096, 8192, 16384, 32768, 65536};
    std::vector<std::string> ops{"random_sample", "farthest_point_sample", "knn_brute", "knn_accel", "forward"};
    double sample_ratio = 0.25;  // m = ratio * P for the samplers
    std::size_t k = 17;
    std::size_t trials = 3;
    std::size_t max_brute = 16384;  // knn_brute and FPS above this size are skipped
    std::size_t max_forward = 16384;
};

struct RunConfig {
    std::uint64_t seed = 1;
    std::string data_dir = "data";
    std::string out_dir = "runs/default";
    std::size_t n_scenes = 100;
    SplitRatios split;
    SynthConfig synth;
    NetConfig net;
    LossWeights loss;
    TrainConfig train;
    std::size_t eval_points = 8192;
    std::size_t threads = 1;
    BenchConfig bench;
};

namespace detail {

inline std::string trim(std::string s)
{
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s)
{
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& text)
{
    T v{};
    const char* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc() || ptr != end) throw ConfigError("key '" + key + "': cannot parse '" + text + "'");
    return v;
}

inline bool parse_bool(const std::string& key, const std::string& text)
{
    if (text == "true" || text == "1" || text == "on") return true;
    if (text == "false" || text == "0" || text == "off") return false;
    throw ConfigError("key '" + key + "': expected true/false, got '" + text + "'");
}

inline std::string show(double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

template <class T>
std::string show_list(const std::vector<T>& v)
{
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ",";
        if constexpr (std::is_same_v<T, std::string>) {
            s += v[i];
        } else if constexpr (std::is_floating_point_v<T>) {
            s += show(v[i]);
        } else {
            s += std::to_string(v[i]);
        }
    }
    return s;
}

inline const char* shape_name(ShapeKind k)
{
    switch (k) {
    case ShapeKind::plane: return "plane";
    case ShapeKind::box: return "box";
    case ShapeKind::sphere: return "sphere";
    case ShapeKind::blob: return "blob";
    }
    return "?";
}

inline ShapeKind parse_shape(const std::string& key, const std::string& s)
{
    for (ShapeKind k : {ShapeKind::plane, ShapeKind::box, ShapeKind::sphere, ShapeKind::blob}) {
        if (s == shape_name(k)) return k;
    }
    throw ConfigError("key '" + key + "': unknown shape '" + s + "'");
}

}  // namespace detail

/// Binds every key of a RunConfig to a setter and a printer.
class ConfigBinder {
public:
    explicit ConfigBinder(RunConfig& c) : c_(c)
    {
        num("seed", c.seed);
        str("data.dir", c.data_dir);
        str("out.dir", c.out_dir);
        num("data.n_scenes", c.n_scenes);
        num("data.split.train", c.split.train);
        num("data.split.val", c.split.val);

        num("synth.objects", c.synth.objects);
        num("synth.points_per_object", c.synth.points_per_object);
        bind("synth.shapes",
             [&c](const std::string& k, const std::string& v) {
                 c.synth.shapes.clear();
                 for (const auto& s : detail::split_list(v)) c.synth.shapes.push_back(detail::parse_shape(k, s));
             },
             [&c] {
                 std::vector<std::string> n;
                 for (ShapeKind s : c.synth.shapes) n.emplace_back(detail::shape_name(s));
                 return detail::show_list(n);
             });
        num("synth.size_min", c.synth.size_min);
        num("synth.size_max", c.synth.size_max);
        num("synth.r_max", c.synth.r_max);
        num("synth.t_max", c.synth.t_max);
        num("synth.sigma", c.synth.sigma);
        num("synth.drop", c.synth.drop);
        num("synth.workspace", c.synth.workspace);
        num("synth.static_fraction", c.synth.static_fraction);

        list("pyramid.levels", c.net.levels);
        list("pyramid.dense_levels", c.net.dense_levels);
        flag("pyramid.dense", c.net.dense);
        num("net.c0", c.net.c0);
        list("net.channels", c.net.channels);
        num("knn.kp", c.net.kp);
        num("knn.kq", c.net.kq);
        num("knn.ko", c.net.ko);
        num("est.hidden1", c.net.est_hidden1);
        num("est.hidden2", c.net.est_hidden2);
        num("est.out_init_scale", c.net.est_out_scale);
        num("net.slope", c.net.slope);
        flag("fe.stage2", c.net.flags.stage2);
        flag("fe.stage3", c.net.flags.stage3);
        flag("fe.concat", c.net.flags.concat);
        flag("fe.residual", c.net.flags.residual);
        list("loss.alpha", c.loss.alpha);

        num("train.points", c.train.points);
        num("train.phase1_epochs", c.train.phase1_epochs);
        num("train.phase2_epochs", c.train.phase2_epochs);
        num("train.lr", c.train.lr);
        num("train.decay", c.train.decay);
        num("train.decay_every", c.train.decay_every);
        num("train.phase2_lr", c.train.phase2_lr);
        num("train.batch", c.train.batch);
        num("train.clip", c.train.clip);
        flag("train.augment", c.train.augment);
        num("train.val_points", c.train.val_points);
        num("train.val_scenes", c.train.val_scenes);
        num("aug.a_max", c.train.aug.a_max);
        num("aug.t_max", c.train.aug.t_max);
        num("adam.beta1", c.train.adam.beta1);
        num("adam.beta2", c.train.adam.beta2);
        num("adam.eps", c.train.adam.eps);
        flag("log.wall_time", c.train.wall_time);

        num("eval.points", c.eval_points);
        num("threads", c.threads);

        list("bench.sizes", c.bench.sizes);
        list("bench.ops", c.bench.ops);
        num("bench.sample_ratio", c.bench.sample_ratio);
        num("bench.k", c.bench.k);
        num("bench.trials", c.bench.trials);
        num("bench.max_brute", c.bench.max_brute);
        num("bench.max_forward", c.bench.max_forward);
    }

    void set(const std::string& key, const std::string& value)
    {
        // pyramid.l<k> addresses one entry of pyramid.levels
        if (key.rfind("pyramid.l", 0) == 0 && key.size() > 9 && std::isdigit(static_cast<unsigned char>(key[9]))) {
            const auto k = detail::parse_number<std::size_t>(key, key.substr(9));
            if (k == 0 || k > c_.net.levels.size()) throw ConfigError("unknown key '" + key + "'");
            c_.net.levels[k - 1] = detail::parse_number<std::size_t>(key, detail::trim(value));
            return;
        }
        auto it = keys_.find(key);
        if (it == keys_.end()) throw ConfigError("unknown key '" + key + "'");
        it->second.first(key, detail::trim(value));
    }

    /// "key=value" as given on the command line.
    void set_assignment(const std::string& kv)
    {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
        set(detail::trim(kv.substr(0, eq)), kv.substr(eq + 1));
    }

    void load_file(const std::filesystem::path& path)
    {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot read config file " + path.string());
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
            line = detail::trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
            }
            set(detail::trim(line.substr(0, eq)), line.substr(eq + 1));
        }
    }

    /// Fully resolved configuration, one `key = value` per line in key order.
    std::string dump() const
    {
        std::string out;
        for (const auto& [key, fns] : keys_) out += key + " = " + fns.second() + "\n";
        return out;
    }

    std::vector<std::string> keys() const
    {
        std::vector<std::string> k;
        for (const auto& [key, _] : keys_) k.push_back(key);
        return k;
    }

private:
    using Setter = std::function<void(const std::string&, const std::string&)>;
    using Printer = std::function<std::string()>;

    void bind(const std::string& key, Setter s, Printer p) { keys_.emplace(key, std::make_pair(std::move(s), std::move(p))); }

    template <class T>
    void num(const std::string& key, T& field)
    {
        bind(key, [&field](const std::string& k, const std::string& v) { field = detail::parse_number<T>(k, v); },
             [&field] {
                 if constexpr (std::is_floating_point_v<T>) return detail::show(field);
                 else return std::to_string(field);
             });
    }

    void str(const std::string& key, std::string& field)
    {
        bind(key, [&field](const std::string&, const std::string& v) { field = v; }, [&field] { return field; });
    }

    void flag(const std::string& key, bool& field)
    {
        bind(key, [&field](const std::string& k, const std::string& v) { field = detail::parse_bool(k, v); },
             [&field] { return std::string(field ? "true" : "false"); });
    }

    template <class T>
    void list(const std::string& key, std::vector<T>& field)
    {
        bind(key,
             [&field](const std::string& k, const std::string& v) {
                 field.clear();
                 for (const auto& item : detail::split_list(v)) {
                     if constexpr (std::is_same_v<T, std::string>) field.push_back(item);
                     else field.push_back(detail::parse_number<T>(k, item));
                 }
             },
             [&field] { return detail::show_list(field); });
    }

    RunConfig& c_;
    std::map<std::string, std::pair<Setter, Printer>> keys_;
};

/// Cross-field checks after all overrides are applied.
inline void validate(const RunConfig& c)
{
    c.synth.validate();
    c.net.validate();
    c.loss.validate(c.net.depth());
    c.train.validate();
    if (c.split.train < 0.0 || c.split.val < 0.0 || c.split.train + c.split.val > 1.0 + 1e-12) {
        throw ConfigError("data.split ratios must be non-negative and sum to at most 1");
    }
    if (c.threads == 0) throw ConfigError("threads must be positive");
    if (c.bench.trials == 0) throw ConfigError("bench.trials must be positive");
    if (!(c.bench.sample_ratio > 0.0 && c.bench.sample_ratio <= 1.0)) throw ConfigError("bench.sample_ratio must lie in (0,1]");
}

}  // namespace rmsflow
