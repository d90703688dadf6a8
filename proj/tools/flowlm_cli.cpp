// flowlm command line: data generation, staged training, sampling,
// understanding eval, decoding benchmarks and skip-connection analysis.
//
// All randomness derives from --seed (or the config seed); repeated
// invocations with the same arguments produce byte-identical outputs apart
// from wall-clock columns.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "flowlm/analysis.hpp"
#include "flowlm/bench.hpp"
#include "flowlm/checkpoint.hpp"
#include "flowlm/evalsuite.hpp"
#include "flowlm/generation.hpp"
#include "flowlm/image_io.hpp"
#include "flowlm/train.hpp"

namespace fs = std::filesystem;
using namespace flowlm;

namespace {

std::string read_file(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    require(bool(is), ErrorKind::io, "cannot read " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::vector<DataRecord> load_split(const fs::path& data_dir, const char* split) {
    return read_dataset(data_dir / (std::string(split) + ".jsonl"));
}

int cmd_gen_data(int scenes, uint64_t seed, const fs::path& out) {
    fs::create_directories(out);
    Rng rng(derive_seed(seed, "scenes"));
    std::vector<ToyScene> fit_scenes(static_cast<size_t>(scenes));
    for (auto& s : fit_scenes) s = sample_scene(rng);
    PatchCodec<float> codec;
    codec.fit(fit_scenes);
    save_codec(out / "codec", codec);

    std::vector<DataRecord> train;
    train.reserve(static_cast<size_t>(scenes));
    const auto& v = vocab();
    for (int i = 0; i < scenes; ++i) {
        DataRecord r;
        r.scene = fit_scenes[size_t(i)];
        r.scene.seed = seed;
        r.caption_tokens = v.encode(caption_words(r.scene));
        r.latents = codec.encode(render_scene(r.scene)).latents;
        train.push_back(std::move(r));
    }
    write_dataset(out / "train.jsonl", train);

    int held_n = std::max(500, scenes / 10);
    Rng held_rng(derive_seed(seed, "heldout"));
    std::vector<DataRecord> held;
    held.reserve(static_cast<size_t>(held_n));
    for (int i = 0; i < held_n; ++i) {
        DataRecord r;
        r.scene = sample_scene(held_rng);
        r.scene.seed = seed;
        r.caption_tokens = v.encode(caption_words(r.scene));
        r.latents = codec.encode(render_scene(r.scene)).latents;
        held.push_back(std::move(r));
    }
    write_dataset(out / "heldout.jsonl", held);
    std::cout << "wrote " << train.size() << " train and " << held.size()
              << " heldout records to " << out.string() << "\n";
    return 0;
}

int cmd_pretrain_stub(const fs::path& config_path, const fs::path& data_dir,
                      const fs::path& out, int eval_n) {
    TomlFile cfg = TomlFile::parse(read_file(config_path), config_path.string());
    TrainConfig tc = read_train_config(cfg, 0);
    ModelConfig mc = read_model_config(cfg);
    cfg.reject_unknown();
    auto train_recs = load_split(data_dir, "train");
    auto held = load_split(data_dir, "heldout");

    Checkpoint<float> ckpt;
    ckpt.codec = load_codec<float>(data_dir / "codec");
    ckpt.model.init(mc, derive_seed(tc.seed, "init"));
    run_stage(ckpt, train_recs, tc, out, out / "metrics.csv");

    auto und = eval_understanding(ckpt.model, held, eval_n, VisualPathway::native, false,
                                  tc.threads);
    ckpt.metrics["stage0_caption_acc"] = und.caption_acc;
    ckpt.metrics["stage0_qa_acc"] = und.qa_acc;
    save_checkpoint(out, ckpt);
    std::cout << "stage 0 done: caption_acc=" << und.caption_acc
              << " qa_acc=" << und.qa_acc << "\n";
    return 0;
}

int cmd_train(int stage, const fs::path& config_path, const fs::path& from,
              const fs::path& flow_path, const fs::path& adapter_path,
              const fs::path& data_dir, const fs::path& out) {
    require(stage >= 1 && stage <= 3, ErrorKind::usage, "--stage must be 1, 2 or 3");
    TomlFile cfg = TomlFile::parse(read_file(config_path), config_path.string());
    TrainConfig tc = read_train_config(cfg, stage);
    bool check_model = has_model_keys(cfg);
    ModelConfig file_mc = check_model ? read_model_config(cfg) : ModelConfig{};
    cfg.reject_unknown();
    auto train_recs = load_split(data_dir, "train");

    Checkpoint<float> ckpt;
    if (stage == 3) {
        require(!flow_path.empty() && !adapter_path.empty(),
                ErrorKind::missing_prerequisite,
                "stage 3 requires --flow (stage-1) and --adapter (stage-2) checkpoints");
        auto flow_ckpt = load_checkpoint<float>(flow_path);
        auto adapter_ckpt = load_checkpoint<float>(adapter_path);
        ckpt = merge_for_stage3(flow_ckpt, adapter_ckpt);
    } else {
        require(!from.empty(), ErrorKind::missing_prerequisite,
                "--from checkpoint is required");
        ckpt = load_checkpoint<float>(from);
        require(ckpt.stage == stage - 1, ErrorKind::missing_prerequisite,
                "stage " + std::to_string(stage) + " requires a stage-" +
                    std::to_string(stage - 1) + " checkpoint");
    }
    if (check_model)
        require(same_model_config(file_mc, ckpt.model.cfg), ErrorKind::config,
                "config model section disagrees with the checkpoint");
    auto res = run_stage(ckpt, train_recs, tc, out, out / "metrics.csv");
    std::cout << "stage " << stage << " done: final loss " << res.final_loss << "\n";
    return 0;
}

int cmd_sample(const fs::path& ckpt_path, const std::string& prompt, uint64_t seed,
               double temp, const fs::path& out) {
    auto ckpt = load_checkpoint<float>(ckpt_path);
    auto caption = vocab().encode_text(prompt);
    Rng rng(derive_seed(seed, "sample"));
    auto res = generate_t2i(ckpt.model, ckpt.codec, caption, rng, temp);
    write_ppm(out, res.image);
    auto scene = classify(res.image);
    std::cout << "sampled " << out.string() << "; classified as: "
              << (scene.objects.empty()
                      ? std::string("empty")
                      : vocab().decode(vocab().encode(caption_words(scene))))
              << "\n";
    return 0;
}

int cmd_answer(const fs::path& ckpt_path, const fs::path& image_path,
               const std::string& question, const std::string& pathway) {
    require(pathway == "adapter" || pathway == "native", ErrorKind::usage,
            "--pathway must be adapter or native");
    auto ckpt = load_checkpoint<float>(ckpt_path);
    ToyImage img = read_ppm(image_path);
    auto x = ckpt.codec.encode(img).latents;
    auto q = vocab().encode_text(question);
    VisualPathway pw = pathway == "native" ? VisualPathway::native : VisualPathway::adapter;
    bool use_deep = pathway != "native";
    auto ans = answer_question(ckpt.model, to_real<float>(x), q, pw, use_deep);
    std::cout << vocab().decode(ans) << "\n";
    return 0;
}

int cmd_eval(const fs::path& ckpt_path, const std::string& suite, int n, uint64_t seed,
             double temp, const fs::path& out_path, const fs::path& data_dir, int threads) {
    require(suite == "gen" || suite == "und" || suite == "both", ErrorKind::usage,
            "--suite must be gen, und or both");
    auto ckpt = load_checkpoint<float>(ckpt_path);
    if (suite == "gen" || suite == "both") {
        auto prompts = gen_eval_prompts(n, seed);
        std::vector<GenEvalRow> rows;
        auto s = eval_generation(ckpt.model, ckpt.codec, prompts, seed, temp, threads, &rows);
        fs::path p = suite == "both" ? fs::path(out_path.string() + ".gen.csv") : out_path;
        write_gen_eval_csv(p, rows, s);
        std::cout << "gen: n=" << s.n << " shape=" << s.shape_acc << " color=" << s.color_acc
                  << " pos=" << s.pos_acc << " exact=" << s.exact_acc << "\n";
    }
    if (suite == "und" || suite == "both") {
        require(!data_dir.empty(), ErrorKind::missing_prerequisite,
                "--data with heldout.jsonl is required for the und suite");
        auto held = load_split(data_dir, "heldout");
        bool fused = ckpt.stage >= 2;
        auto s = eval_understanding(ckpt.model, held, n,
                                    fused ? VisualPathway::adapter : VisualPathway::native,
                                    ckpt.stage >= 3, threads);
        fs::path p = suite == "both" ? fs::path(out_path.string() + ".und.csv") : out_path;
        write_und_eval_csv(p, s, fused ? "adapter" : "native");
        std::cout << "und: caption_acc=" << s.caption_acc << " qa_acc=" << s.qa_acc << "\n";
    }
    return 0;
}

int cmd_bench(const fs::path& ckpt_path, int turns, int images, const std::string& mode,
              uint64_t seed, double temp, const fs::path& out_path) {
    require(mode == "cached" || mode == "reencode" || mode == "both", ErrorKind::usage,
            "--mode must be cached, reencode or both");
    auto ckpt = load_checkpoint<float>(ckpt_path);
    std::vector<BenchReport> reports;
    if (mode == "cached" || mode == "both")
        reports.push_back(bench_decode(ckpt.model, ckpt.codec, turns, images,
                                       BenchMode::cached_single_pass, seed, temp));
    if (mode == "reencode" || mode == "both")
        reports.push_back(bench_decode(ckpt.model, ckpt.codec, turns, images,
                                       BenchMode::reencode_baseline, seed, temp));
    write_bench_csv(out_path, reports);
    for (const auto& r : reports) std::cout << bench_summary_line(r) << "\n";
    return 0;
}

int cmd_analyze(const fs::path& ckpt_path, int prompts, uint64_t seed, double temp,
                const std::string& out_prefix) {
    auto ckpt = load_checkpoint<float>(ckpt_path);
    Rng rng(derive_seed(seed, "analyze-prompts"));
    std::vector<ToyScene> ps(static_cast<size_t>(prompts));
    for (auto& s : ps) s = sample_scene(rng);
    auto rep = collect_skip_stats(ckpt.model, ps, seed, temp);
    write_skip_stats_csv(out_prefix + "_vis.csv", rep.vis, rep.vis_summary);
    write_skip_stats_csv(out_prefix + "_txt.csv", rep.txt, rep.txt_summary);
    std::cout << "vis: n=" << rep.vis_summary.count << " mean_r=" << rep.vis_summary.mean_r
              << " mean_s=" << rep.vis_summary.mean_s << "\n";
    std::cout << "txt: n=" << rep.txt_summary.count << " mean_r=" << rep.txt_summary.mean_r
              << " mean_s=" << rep.txt_summary.mean_s << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"unified text+image toy model: flow stream over a frozen stub"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-data", "sample scenes, fit codec, write datasets");
    int scenes = 10000;
    uint64_t seed = 0;
    std::string out_dir;
    gen->add_option("--scenes", scenes, "number of training scenes");
    gen->add_option("--seed", seed, "root seed");
    gen->add_option("--out", out_dir, "output directory")->required();

    auto* pre = app.add_subcommand("pretrain-stub", "stage 0: pretrain the frozen stub");
    std::string cfg_path, data_dir, ckpt_out;
    int eval_n = 200;
    pre->add_option("--config", cfg_path, "TOML config")->required();
    pre->add_option("--data", data_dir, "dataset directory")->required();
    pre->add_option("--out", ckpt_out, "output checkpoint directory")->required();
    pre->add_option("--eval-n", eval_n, "held-out scenes for the recorded score");

    auto* tr = app.add_subcommand("train", "stages 1-3");
    int stage = 1;
    std::string from, flow_path, adapter_path;
    tr->add_option("--stage", stage, "training stage (1, 2 or 3)")->required();
    tr->add_option("--config", cfg_path, "TOML config")->required();
    tr->add_option("--from", from, "input checkpoint (stages 1 and 2)");
    tr->add_option("--flow", flow_path, "stage-1 checkpoint (stage 3)");
    tr->add_option("--adapter", adapter_path, "stage-2 checkpoint (stage 3)");
    tr->add_option("--data", data_dir, "dataset directory")->required();
    tr->add_option("--out", ckpt_out, "output checkpoint directory")->required();

    auto* sa = app.add_subcommand("sample", "text-to-image sampling");
    std::string prompt, out_img;
    double temp = 1.0;
    sa->add_option("--ckpt", from, "checkpoint directory")->required();
    sa->add_option("--prompt", prompt, "caption text")->required();
    sa->add_option("--seed", seed, "sampling seed");
    sa->add_option("--temp", temp, "sampling temperature");
    sa->add_option("--out", out_img, "output PPM path")->required();

    auto* an = app.add_subcommand("answer", "image question answering");
    std::string question, pathway = "adapter";
    an->add_option("--ckpt", from, "checkpoint directory")->required();
    an->add_option("--image", out_img, "input PPM path")->required();
    an->add_option("--question", question, "question text")->required();
    an->add_option("--pathway", pathway, "visual pathway: adapter or native");

    auto* ev = app.add_subcommand("eval", "generation / understanding accuracy");
    std::string suite = "both", out_csv = "eval.csv";
    int n = 500, threads = 2;
    double eval_temp = 0.0;
    ev->add_option("--ckpt", from, "checkpoint directory")->required();
    ev->add_option("--suite", suite, "gen, und or both");
    ev->add_option("--n", n, "prompt / scene count");
    ev->add_option("--seed", seed, "prompt seed");
    ev->add_option("--temp", eval_temp, "sampling temperature for gen");
    ev->add_option("--out", out_csv, "output CSV path");
    ev->add_option("--data", data_dir, "dataset directory (for und)");
    ev->add_option("--threads", threads, "worker threads");

    auto* be = app.add_subcommand("bench", "decode benchmark: cached vs re-encode");
    int turns = 2, images = 2;
    std::string mode = "both", bench_csv = "bench.csv";
    be->add_option("--ckpt", from, "checkpoint directory")->required();
    be->add_option("--turns", turns, "caption turns");
    be->add_option("--images", images, "total images");
    be->add_option("--mode", mode, "cached, reencode or both");
    be->add_option("--seed", seed, "workload seed");
    be->add_option("--temp", temp, "sampling temperature");
    be->add_option("--out", bench_csv, "output CSV path");

    auto* az = app.add_subcommand("analyze", "skip-connection statistics");
    int n_prompts = 50;
    std::string prefix = "skipstats";
    az->add_option("--ckpt", from, "checkpoint directory")->required();
    az->add_option("--prompts", n_prompts, "prompt count");
    az->add_option("--seed", seed, "prompt/sampling seed");
    az->add_option("--temp", temp, "sampling temperature");
    az->add_option("--out-prefix", prefix, "output CSV prefix");

    try {
        app.parse(argc, argv);
        if (gen->parsed()) return cmd_gen_data(scenes, seed, out_dir);
        if (pre->parsed()) return cmd_pretrain_stub(cfg_path, data_dir, ckpt_out, eval_n);
        if (tr->parsed())
            return cmd_train(stage, cfg_path, from, flow_path, adapter_path, data_dir,
                             ckpt_out);
        if (sa->parsed()) return cmd_sample(from, prompt, seed, temp, out_img);
        if (an->parsed()) return cmd_answer(from, out_img, question, pathway);
        if (ev->parsed())
            return cmd_eval(from, suite, n, seed, eval_temp, out_csv, data_dir, threads);
        if (be->parsed()) return cmd_bench(from, turns, images, mode, seed, temp, bench_csv);
        if (az->parsed()) return cmd_analyze(from, n_prompts, seed, temp, prefix);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
        std::cerr << "usage: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << e.line() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
