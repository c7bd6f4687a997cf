// rmsflow: gen | train | eval | bench | ablate

#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "rmsflow/commands.hpp"

using namespace rmsflow;

namespace {

enum Exit { kOk = 0, kConfig = 2, kData = 3, kDiverged = 4 };

struct Common {
    std::string config_file;
    std::vector<std::string> overrides;
    std::size_t threads = 0;
};

void add_common(CLI::App* cmd, Common& c)
{
    cmd->add_option("-c,--config", c.config_file, "flat key = value config file");
    cmd->add_option("--set", c.overrides, "override, key=value (repeatable)");
    cmd->add_option("--threads", c.threads, "scene-level worker threads");
}

RunConfig resolve(const Common& c)
{
    RunConfig cfg;
    ConfigBinder binder(cfg);
    if (!c.config_file.empty()) binder.load_file(c.config_file);
    for (const auto& kv : c.overrides) binder.set_assignment(kv);
    if (c.threads) cfg.threads = c.threads;
    validate(cfg);
    return cfg;
}

/// Opens `path` for writing, or returns std::cout for "-" / empty.
std::ostream& open_out(const std::string& path, std::ofstream& file)
{
    if (path.empty() || path == "-") return std::cout;
    if (auto parent = std::filesystem::path(path).parent_path(); !parent.empty()) {
        std::filesystem::create_directories(parent);
    }
    file.open(path, std::ios::trunc);
    if (!file) throw std::runtime_error("cannot write " + path);
    return file;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Scene flow with random-sampling point pyramids"};
    app.require_subcommand(1);

    Common gen_c, train_c, eval_c, bench_c, ablate_c;

    auto* gen = app.add_subcommand("gen", "generate a synthetic dataset into data.dir");
    add_common(gen, gen_c);

    auto* train = app.add_subcommand("train", "train on data.dir, writing log.csv and checkpoints to out.dir");
    add_common(train, train_c);
    bool resume = false;
    train->add_flag("--resume", resume, "continue from out.dir/last.rmsw if present");

    auto* eval = app.add_subcommand("eval", "per-scene and aggregate metrics CSV");
    add_common(eval, eval_c);
    std::string checkpoint, split = "test", eval_out;
    std::vector<std::size_t> points;
    bool oracle = false, dense = false, no_timing = false;
    eval->add_option("--checkpoint", checkpoint, "weights (default out.dir/best.rmsw)");
    eval->add_option("--split", split, "manifest split to evaluate")->check(CLI::IsMember({"train", "val", "test"}));
    eval->add_option("--points", points, "density sweep, e.g. 2048,4096")->delimiter(',');
    eval->add_flag("--oracle", oracle, "score ground truth as the prediction");
    eval->add_flag("--dense", dense, "use the dense pyramid levels");
    eval->add_flag("--no-timing", no_timing, "write 0 for infer_ms");
    eval->add_option("-o,--out", eval_out, "CSV path (default stdout)");

    auto* bench = app.add_subcommand("bench", "sampling, KNN and forward-pass timings CSV");
    add_common(bench, bench_c);
    std::string bench_out;
    bool parallel_bench = false;
    bench->add_option("-o,--out", bench_out, "CSV path (default stdout)");
    bench->add_flag("--parallel-bench", parallel_bench, "accepted for compatibility; measured kernels are single-threaded");

    auto* ablate = app.add_subcommand("ablate", "train and compare the flow-embedding variants");
    add_common(ablate, ablate_c);
    std::string ablate_out, ablate_split = "val";
    ablate->add_option("-o,--out", ablate_out, "CSV path (default stdout)");
    ablate->add_option("--split", ablate_split, "split used for the comparison")->check(CLI::IsMember({"val", "test"}));

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            const RunConfig cfg = resolve(gen_c);
            const auto entries = cmd_gen(cfg);
            std::cerr << "wrote " << entries.size() << " scenes to " << cfg.data_dir << "\n";
        } else if (train->parsed()) {
            const RunConfig cfg = resolve(train_c);
            const TrainResult r = cmd_train(cfg, resume);
            std::cerr << "best val EPE3D " << r.best_val_epe3d << " at epoch " << r.best_epoch << "\n";
        } else if (eval->parsed()) {
            RunConfig cfg = resolve(eval_c);
            if (dense) cfg.net.dense = true;
            if (checkpoint.empty()) checkpoint = (std::filesystem::path(cfg.out_dir) / "best.rmsw").string();
            if (points.empty()) points = {cfg.eval_points};
            const auto scenes = load_split(cfg.data_dir, split);
            const ParamStore<float> params = oracle ? ParamStore<float>{} : load_model(cfg.net, checkpoint);
            const auto runs = cmd_eval(cfg, params, scenes, points, oracle);
            std::ofstream file;
            write_eval_csv(open_out(eval_out, file), runs, !no_timing);
            if (!eval_out.empty() && eval_out != "-") echo_config(cfg, eval_out + ".config");
        } else if (bench->parsed()) {
            const RunConfig cfg = resolve(bench_c);
            std::ofstream file;
            std::ostream& os = open_out(bench_out, file);
            os << kBenchCsvHeader << '\n';
            cmd_bench(cfg, [&](const BenchRow& r) { write_bench_row(os, r); os.flush(); });
            if (!bench_out.empty() && bench_out != "-") echo_config(cfg, bench_out + ".config");
        } else if (ablate->parsed()) {
            const RunConfig cfg = resolve(ablate_c);
            const TrainData data = load_train_data(cfg);
            const auto scenes = load_split(cfg.data_dir, ablate_split);
            std::ofstream file;
            std::ostream& os = open_out(ablate_out, file);
            os << kAblateCsvHeader << '\n';
            cmd_ablate(cfg, data, scenes, [&](const AblationRow& r) { write_ablate_row(os, r); os.flush(); });
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const DivergenceError& e) {
        std::cerr << "diverged: " << e.what() << "\n";
        return kDiverged;
    } catch (const FormatError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    } catch (const SizeError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kData;
    }
    return kOk;
}
