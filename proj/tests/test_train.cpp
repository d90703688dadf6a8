// training: optimizer trace, schedule, batch-loss closed forms, stage
// mechanics, checkpoint round trips, config parsing

#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "flowlm/checkpoint.hpp"
#include "flowlm/train.hpp"
#include "test_support.hpp"

using namespace flowlm;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.vlm = {.layers = 2, .width = 32, .heads = 4, .ff_mult = 2, .max_seq = 48};
    c.deep = {.layers = 2, .width = 32, .heads = 4, .ff_mult = 2, .max_seq = 48};
    c.shallow = {.layers = 1, .width = 16, .heads = 2, .ff_mult = 2, .max_seq = 8};
    c.shallow_blocks = 2;
    c.n_latents = 4;
    c.d_latent = 2;
    c.vocab_size = 48;
    c.adapter_hidden = 16;
    return c;
}

std::vector<DataRecord> tiny_records(int n, uint64_t seed) {
    Rng rng(seed);
    std::vector<DataRecord> out(static_cast<size_t>(n));
    const auto& v = vocab();
    for (auto& r : out) {
        r.scene = sample_scene(rng);
        r.caption_tokens = v.encode(caption_words(r.scene));
        r.latents.resize(4, 2);  // tiny-model latents, synthetic
        for (auto& x : r.latents.v) x = float(rng.gauss());
    }
    return out;
}

fs::path temp_dir(const char* name) {
    auto p = fs::temp_directory_path() / "flowlm_tests" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("adamw matches a hand-computed single-parameter trace") {
    auto cfg = tiny_config();
    ModelParams<double> m;
    m.init(cfg, 3);
    TrainConfig tc;
    tc.stage = 3;
    tc.lr = 0.01;
    tc.beta1 = 0.9;
    tc.beta2 = 0.95;
    tc.eps = 1e-8;
    tc.weight_decay = 1e-4;
    tc.clip_norm = 0;  // disable clipping for the trace
    GradMask mask = freeze_schedule(3);

    // pick one trainable scalar: w_vlm[0,0]
    double theta = 0.31;
    m.w_vlm.at(0, 0) = theta;
    AdamW<double> opt(m, tc, mask);
    auto grads = zeros_like(m);

    double mm = 0, vv = 0;
    const double gs[5] = {0.2, -0.05, 0.11, 0.4, -0.3};
    for (int t = 1; t <= 5; ++t) {
        for (auto& e : collect_tensors(grads)) e.mat->zero();
        grads.w_vlm.at(0, 0) = gs[t - 1];
        opt.step(grads, mask, tc.lr);
        // reference update
        mm = tc.beta1 * mm + (1 - tc.beta1) * gs[t - 1];
        vv = tc.beta2 * vv + (1 - tc.beta2) * gs[t - 1] * gs[t - 1];
        double mh = mm / (1 - std::pow(tc.beta1, t));
        double vh = vv / (1 - std::pow(tc.beta2, t));
        theta -= tc.lr * (mh / (std::sqrt(vh) + tc.eps) + tc.weight_decay * theta);
        CHECK(std::abs(m.w_vlm.at(0, 0) - theta) < 1e-7);
    }
}

TEST_CASE("cosine schedule endpoints and midpoint") {
    TrainConfig c;
    c.lr = 1e-4;
    c.min_lr = 1e-6;
    c.steps = 1000;
    CHECK(cosine_lr(c, 0) == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(cosine_lr(c, 1000) == doctest::Approx(1e-6).epsilon(1e-9));
    double mid = c.min_lr + (c.lr - c.min_lr) * 0.5;
    CHECK(cosine_lr(c, 500) == doctest::Approx(mid).epsilon(1e-9));
    for (int s = 1; s <= 1000; ++s) CHECK(cosine_lr(c, s) <= cosine_lr(c, s - 1));
}

TEST_CASE("batch losses: closed forms at zero init") {
    auto cfg = tiny_config();
    ModelParams<double> m;
    m.init(cfg, 5);

    // visual: exact unit-second-moment latents, identity shallow, zero ngp
    // => nats/dim = 1/2 + 1/2 log 2pi
    auto recs = tiny_records(4, 6);
    for (auto& r : recs)
        for (auto& x : r.latents.v) x = 1.f;
    TrainConfig tc;
    tc.stage = 1;
    tc.batch = 4;
    tc.threads = 2;
    std::vector<BatchItem> items(4);
    for (int i = 0; i < 4; ++i) items[size_t(i)] = {TaskKind::t2i_open, i, 0, 0, 0.0, 0};
    std::vector<ModelParams<double>> chunks(2, zeros_like(m));
    auto grads = zeros_like(m);
    auto st = batch_forward_backward(m, recs, items, tc, freeze_schedule(1), chunks, grads);
    CHECK(st.nats_per_dim() == doctest::Approx(0.5 + 0.5 * kLog2Pi).epsilon(1e-9));

    // text: zeroed lm head => uniform logits => log(vocab) per token
    ModelParams<double> mz;
    mz.init(cfg, 7);
    mz.lm_head_w.zero();
    mz.lm_head_b.zero();
    TrainConfig tc0;
    tc0.stage = 0;
    tc0.batch = 3;
    tc0.threads = 1;
    std::vector<BatchItem> items0 = {{TaskKind::text_only, 0, 0, 0, 0.0, 0},
                                     {TaskKind::i2t_caption, 1, 0, 0, 0.0, 0},
                                     {TaskKind::i2t_qa, 2, 0, 1, 0.0, 0}};
    std::vector<ModelParams<double>> chunks0(1, zeros_like(mz));
    auto grads0 = zeros_like(mz);
    auto st0 =
        batch_forward_backward(mz, recs, items0, tc0, freeze_schedule(0), chunks0, grads0);
    CHECK(st0.ntp_nats() == doctest::Approx(std::log(48.0)).epsilon(1e-9));

    // identical batch twice: identical loss
    std::vector<ModelParams<double>> chunks1(1, zeros_like(mz));
    auto grads1 = zeros_like(mz);
    auto st1 =
        batch_forward_backward(mz, recs, items0, tc0, freeze_schedule(0), chunks1, grads1);
    CHECK(st0.ntp_total == st1.ntp_total);
}

TEST_CASE("joint loss: lambda semantics and gradient additivity") {
    auto cfg = tiny_config();
    ModelParams<double> m;
    m.init(cfg, 9);
    Rng rng(10);
    fill_normal(m.ngp_w, rng, 0.1);
    fill_normal(m.w_vlm, rng, 0.05);
    fill_normal(m.w_d, rng, 0.05);

    auto recs = tiny_records(4, 11);
    TrainConfig tc;
    tc.stage = 3;
    tc.batch = 2;
    tc.threads = 1;
    tc.lambda_text = 0.25;
    std::vector<BatchItem> items = {{TaskKind::t2i, 0, 0, 0, 0.0, 0},
                                    {TaskKind::i2t_caption, 1, 0, 0, 0.0, 0}};

    std::vector<ModelParams<double>> chunks(1, zeros_like(m));
    auto grads = zeros_like(m);
    auto st = batch_forward_backward(m, recs, items, tc, freeze_schedule(3), chunks, grads);
    // lambda = 0 reduces the loss to the visual term
    CHECK(st.loss(0.0, 3) == doctest::Approx(st.nats_per_dim()).epsilon(1e-12));
    // pure-text batch reduces to lambda * ntp
    std::vector<BatchItem> text_items = {{TaskKind::i2t_qa, 0, 0, 0, 0.0, 0}};
    std::vector<ModelParams<double>> c2(1, zeros_like(m));
    auto g2 = zeros_like(m);
    TrainConfig tc2 = tc;
    tc2.batch = 1;
    auto st2 =
        batch_forward_backward(m, recs, text_items, tc2, freeze_schedule(3), c2, g2);
    CHECK(st2.nf_dims == 4 * 2);  // the image is still a flow target in stage 3
    CHECK(st2.loss(0.25, 3) ==
          doctest::Approx(st2.nats_per_dim() + 0.25 * st2.ntp_nats()).epsilon(1e-12));

    // gradient additivity: joint backward == nf-only + lambda-weighted ntp-only
    auto seq = build_item_sequence<double>(items[0], recs);
    FusedOptions o = stage_forward_options(3, true);
    auto f = fused_forward(m, seq, o);
    GradMask mask = freeze_schedule(3);
    auto g_joint = zeros_like(m);
    fused_backward(m, seq, f, 0.01, 0.25 * 0.02, g_joint, mask);
    auto g_nf = zeros_like(m);
    fused_backward(m, seq, f, 0.01, 0.0, g_nf, mask);
    auto g_ntp = zeros_like(m);
    fused_backward(m, seq, f, 0.0, 0.25 * 0.02, g_ntp, mask);
    auto ej = collect_tensors(g_joint);
    auto ea = collect_tensors(g_nf);
    auto eb = collect_tensors(g_ntp);
    double worst = 0;
    for (size_t e = 0; e < ej.size(); ++e)
        for (size_t i = 0; i < ej[e].mat->size(); ++i)
            worst = std::max(worst, std::abs(ej[e].mat->v[i] -
                                             (ea[e].mat->v[i] + eb[e].mat->v[i])));
    CHECK(worst < 1e-6);
}

TEST_CASE("run_stage: metrics, freezing, entry snapshot, prerequisites") {
    auto cfg = tiny_config();
    auto dir = temp_dir("stage");
    Checkpoint<float> ckpt;
    ckpt.model.init(cfg, 13);
    ckpt.codec.basis.resize(kLatentDim, kPatchDim);  // placeholder codec tensors
    ckpt.codec.patch_mean.resize(1, kPatchDim);
    ckpt.codec.ch_mean.resize(1, kLatentDim);
    ckpt.codec.ch_std.resize(1, kLatentDim);
    fill_const(ckpt.codec.ch_std, 1.f);

    auto recs = tiny_records(16, 14);
    TrainConfig tc;
    tc.stage = 0;
    tc.batch = 4;
    tc.steps = 6;
    tc.threads = 2;
    tc.seed = 99;
    tc.lr = 1e-3;
    tc.log_every = 2;

    uint64_t flow_sum_before = group_checksum(ckpt.model, "flow_deep");
    uint64_t skips_before = group_checksum(ckpt.model, "skips");
    auto res = run_stage(ckpt, recs, tc, dir, dir / "metrics.csv");
    CHECK(res.loss_curve.size() == 6);
    CHECK(group_checksum(ckpt.model, "flow_deep") == flow_sum_before);
    CHECK(group_checksum(ckpt.model, "skips") == skips_before);
    CHECK(group_checksum(ckpt.model, "stub") != group_checksum(ckpt.entry, "stub"));

    std::ifstream ms(dir / "metrics.csv");
    std::string header;
    std::getline(ms, header);
    CHECK(header == "step,stage,loss,nats_per_dim,ntp_nats,lr,sigma_clamp_rate,wall_ms");

    // reload: stage recorded, entry snapshot present and bitwise-zero skips
    auto loaded = load_checkpoint<float>(dir);
    CHECK(loaded.stage == 0);
    CHECK(loaded.has_entry);
    CHECK(group_checksum(loaded.model, "stub") == group_checksum(ckpt.model, "stub"));

    // wrong-stage prerequisite is rejected
    TrainConfig tc2 = tc;
    tc2.stage = 2;
    Checkpoint<float> wrong = loaded;  // stage 0, but stage 2 needs stage 1
    CHECK(wrong.stage == 0);
    CHECK_THROWS_AS((void)merge_for_stage3(wrong, wrong), Error);
}

TEST_CASE("determinism: identical run_stage twice gives identical weights") {
    auto cfg = tiny_config();
    auto recs = tiny_records(12, 21);
    TrainConfig tc;
    tc.stage = 1;
    tc.batch = 4;
    tc.steps = 4;
    tc.threads = 2;
    tc.seed = 7;
    tc.lr = 1e-3;

    auto run_once = [&](const char* tag) {
        auto dir = temp_dir(tag);
        Checkpoint<float> ckpt;
        ckpt.model.init(cfg, 31);
        ckpt.stage = 0;
        ckpt.codec.basis.resize(kLatentDim, kPatchDim);
        ckpt.codec.patch_mean.resize(1, kPatchDim);
        ckpt.codec.ch_mean.resize(1, kLatentDim);
        ckpt.codec.ch_std.resize(1, kLatentDim);
        run_stage(ckpt, recs, tc, dir, dir / "metrics.csv");
        uint64_t h = 0;
        for (const auto& g : param_groups()) h ^= group_checksum(ckpt.model, g);
        return h;
    };
    CHECK(run_once("det_a") == run_once("det_b"));
}

TEST_CASE("noise hook: deterministic and reaches the adapter modulation") {
    auto cfg = tiny_config();
    ModelParams<double> m;
    m.init(cfg, 41);
    Rng rng(42);
    fill_normal(m.adapter.film_scale, rng, 0.2);
    fill_normal(m.adapter.film_shift, rng, 0.2);
    auto recs = tiny_records(2, 43);
    TrainConfig tc;
    tc.stage = 3;
    tc.batch = 1;
    tc.threads = 1;
    tc.noise_p = 1.0;
    tc.noise_smax = 0.5;

    BatchItem noisy{TaskKind::t2i, 0, 0, 0, 0.3, 777};
    BatchItem clean{TaskKind::t2i, 0, 0, 0, 0.0, 777};
    std::vector<ModelParams<double>> c1(1, zeros_like(m)), c2(1, zeros_like(m));
    auto g1 = zeros_like(m), g2 = zeros_like(m);
    auto st_noisy = batch_forward_backward(m, recs, {noisy}, tc, freeze_schedule(3), c1, g1);
    auto st_clean = batch_forward_backward(m, recs, {clean}, tc, freeze_schedule(3), c2, g2);
    CHECK(st_noisy.nf_total != st_clean.nf_total);
    // same noise seed twice: identical
    std::vector<ModelParams<double>> c3(1, zeros_like(m));
    auto g3 = zeros_like(m);
    auto st_again = batch_forward_backward(m, recs, {noisy}, tc, freeze_schedule(3), c3, g3);
    CHECK(st_noisy.nf_total == st_again.nf_total);
}

TEST_CASE("checkpoint: save, load, byte-identical re-save") {
    auto cfg = tiny_config();
    auto dir_a = temp_dir("ckpt_a");
    auto dir_b = temp_dir("ckpt_b");
    Checkpoint<float> ckpt;
    ckpt.model.init(cfg, 55);
    ckpt.stage = 1;
    ckpt.codec.basis.resize(kLatentDim, kPatchDim);
    ckpt.codec.patch_mean.resize(1, kPatchDim);
    ckpt.codec.ch_mean.resize(1, kLatentDim);
    ckpt.codec.ch_std.resize(1, kLatentDim);
    Rng rng(56);
    fill_normal(ckpt.codec.basis, rng, 0.1);
    ckpt.metrics["stage0_qa_acc"] = 0.97;
    ckpt.train_echo = train_echo_json(TrainConfig{});
    save_checkpoint(dir_a, ckpt);

    auto loaded = load_checkpoint<float>(dir_a);
    CHECK(loaded.stage == 1);
    CHECK(loaded.metrics.at("stage0_qa_acc") == 0.97);
    for (const auto& g : param_groups())
        CHECK(group_checksum(loaded.model, g) == group_checksum(ckpt.model, g));
    save_checkpoint(dir_b, loaded);

    auto slurp = [](const fs::path& p) {
        std::ifstream is(p, std::ios::binary);
        std::ostringstream ss;
        ss << is.rdbuf();
        return ss.str();
    };
    CHECK(slurp(dir_a / "manifest.json") == slurp(dir_b / "manifest.json"));
    CHECK(slurp(dir_a / "weights.bin") == slurp(dir_b / "weights.bin"));
}

TEST_CASE("toml config: defaults, overrides, unknown keys") {
    std::string text = R"([train]
lr = 0.0005
batch = 8
seed = 42
# comment line
lambda_text = 0.5
)";
    auto c = load_train_config(text, 3, "test");
    CHECK(c.lr == 0.0005);
    CHECK(c.batch == 8);
    CHECK(c.seed == 42);
    CHECK(c.lambda_text == 0.5);
    CHECK(c.beta2 == 0.95);  // default
    CHECK(c.min_lr == 1e-6);

    CHECK_THROWS_AS((void)load_train_config("[train]\nbogus_key = 1\n", 1, "test"), Error);
    CHECK_THROWS_AS((void)load_train_config("[train]\nlr = oops\n", 1, "test"), Error);
    CHECK_THROWS_AS((void)load_train_config("[train]\nlr = 0\n", 1, "test"), Error);

    std::string model_text = R"([vlm]
layers = 2
width = 32
heads = 4
[deep]
layers = 2
width = 32
heads = 4
[shallow]
layers = 1
width = 16
heads = 2
max_seq = 16
[model]
shallow_blocks = 2
)";
    auto mc = load_model_config(model_text, "test");
    CHECK(mc.vlm.layers == 2);
    CHECK(mc.deep.width == 32);
    CHECK(mc.shallow_blocks == 2);
}

TEST_CASE("merge_for_stage3 zeroes skips and checks lineage") {
    auto cfg = tiny_config();
    Checkpoint<float> flow_ckpt, adapter_ckpt;
    flow_ckpt.model.init(cfg, 71);
    adapter_ckpt.model.init(cfg, 71);  // same stub lineage
    flow_ckpt.stage = 1;
    adapter_ckpt.stage = 2;
    Rng rng(72);
    fill_normal(adapter_ckpt.model.adapter.w1, rng, 0.1);
    auto merged = merge_for_stage3(flow_ckpt, adapter_ckpt);
    for (float v : merged.model.w_vlm.v) CHECK(v == 0.f);
    for (float v : merged.model.w_d.v) CHECK(v == 0.f);
    CHECK(group_checksum(merged.model, "adapter") ==
          group_checksum(adapter_ckpt.model, "adapter"));

    Checkpoint<float> other;
    other.model.init(cfg, 99);  // different stub
    other.stage = 2;
    CHECK_THROWS_AS((void)merge_for_stage3(flow_ckpt, other), Error);
}
