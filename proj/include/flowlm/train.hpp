#pragma once

// Staged optimization: stage 0 pretrains the stub on its native visual
// pathway; stage 1 trains the flow streams on text-to-image batches with the
// stub frozen; stage 2 aligns the adapter on image-to-text batches; stage 3
// activates the skip projections and optimizes jointly on a task mixture.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "flowlm/checkpoint.hpp"
#include "flowlm/common.hpp"
#include "flowlm/dataset.hpp"
#include "flowlm/model.hpp"
#include "flowlm/sequence.hpp"
#include "flowlm/toml.hpp"

namespace flowlm {

struct TrainConfig {
    int stage = 0;
    double lr = 1e-4;
    double min_lr = 1e-6;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 1e-4;
    double clip_norm = 1.0;
    int batch = 32;
    int steps = 2000;
    double lambda_text = 0.25;
    uint64_t seed = 0;
    double noise_p = 0.0;     // probability of the latent-noise hook per item
    double noise_smax = 0.0;  // noise scale drawn uniformly from [0, smax]
    int threads = 2;
    int log_every = 50;

    void validate() const {
        require(stage >= 0 && stage <= 3, ErrorKind::config, "stage must be 0..3");
        require(lr >= min_lr && min_lr > 0, ErrorKind::config, "need lr >= min_lr > 0");
        require(lambda_text >= 0, ErrorKind::config, "lambda_text must be >= 0");
        require(batch >= 1 && steps >= 1 && threads >= 1, ErrorKind::config,
                "batch/steps/threads must be >= 1");
        require(noise_p >= 0 && noise_p <= 1 && noise_smax >= 0, ErrorKind::config,
                "bad noise hook parameters");
    }
};

inline double stage_default_lr(int stage) { return stage == 3 ? 5e-5 : (stage == 0 ? 3e-4 : 1e-4); }
inline int stage_default_steps(int stage) {
    switch (stage) {
        case 0: return 3000;
        case 1: return 4000;
        case 2: return 1500;
        default: return 3000;
    }
}

// cosine decay from lr to min_lr over `steps`; lr(0) = lr, lr(steps) = min_lr
inline double cosine_lr(const TrainConfig& c, int step) {
    double t = double(step) / double(c.steps);
    if (t > 1.0) t = 1.0;
    return c.min_lr + (c.lr - c.min_lr) * 0.5 * (1.0 + std::cos(t * 3.14159265358979323846));
}

// which parameter groups train in each stage (everything else stays frozen)
inline GradMask freeze_schedule(int stage) {
    GradMask m;
    switch (stage) {
        case 0: m.stub = true; break;
        case 1: m.flow_deep = m.shallow = m.ngp = true; break;
        case 2: m.adapter = true; break;
        default: m.flow_deep = m.shallow = m.ngp = m.adapter = m.skips = true; break;
    }
    return m;
}

inline bool group_trainable(const GradMask& m, const std::string& g) {
    if (g == "stub") return m.stub;
    if (g == "adapter") return m.adapter;
    if (g == "flow_deep") return m.flow_deep;
    if (g == "ngp") return m.ngp;
    if (g == "shallow") return m.shallow;
    if (g == "skips") return m.skips;
    return false;
}

// ---------------------------------------------------------------------------
// config file
// ---------------------------------------------------------------------------

inline TrainConfig read_train_config(TomlFile& f, int stage) {
    TrainConfig c;
    c.stage = stage;
    c.lr = f.get_double("train.lr", stage_default_lr(stage));
    c.min_lr = f.get_double("train.min_lr", c.min_lr);
    c.beta1 = f.get_double("train.beta1", c.beta1);
    c.beta2 = f.get_double("train.beta2", c.beta2);
    c.eps = f.get_double("train.eps", c.eps);
    c.weight_decay = f.get_double("train.weight_decay", c.weight_decay);
    c.clip_norm = f.get_double("train.clip_norm", c.clip_norm);
    c.batch = int(f.get_int("train.batch", c.batch));
    c.steps = int(f.get_int("train.steps", stage_default_steps(stage)));
    c.lambda_text = f.get_double("train.lambda_text", c.lambda_text);
    c.seed = uint64_t(f.get_int("train.seed", 0));
    c.noise_p = f.get_double("train.noise_p", c.noise_p);
    c.noise_smax = f.get_double("train.noise_smax", c.noise_smax);
    c.threads = int(f.get_int("train.threads", c.threads));
    c.log_every = int(f.get_int("train.log_every", c.log_every));
    c.validate();
    return c;
}

// whether the file carries any model-shape keys
inline bool has_model_keys(const TomlFile& f) {
    for (const char* k :
         {"vlm.layers", "vlm.width", "vlm.heads", "vlm.ff_mult", "vlm.max_seq",
          "deep.layers", "deep.width", "deep.heads", "deep.ff_mult", "deep.max_seq",
          "shallow.layers", "shallow.width", "shallow.heads", "shallow.ff_mult",
          "shallow.max_seq", "model.shallow_blocks", "model.adapter_hidden"})
        if (f.has(k)) return true;
    return false;
}

inline ModelConfig read_model_config(TomlFile& f) {
    ModelConfig c;
    auto bb = [&](const std::string& p, BackboneConfig& b) {
        b.layers = int(f.get_int(p + ".layers", b.layers));
        b.width = int(f.get_int(p + ".width", b.width));
        b.heads = int(f.get_int(p + ".heads", b.heads));
        b.ff_mult = int(f.get_int(p + ".ff_mult", b.ff_mult));
        b.max_seq = int(f.get_int(p + ".max_seq", b.max_seq));
    };
    bb("vlm", c.vlm);
    bb("deep", c.deep);
    bb("shallow", c.shallow);
    c.shallow_blocks = int(f.get_int("model.shallow_blocks", c.shallow_blocks));
    c.adapter_hidden = int(f.get_int("model.adapter_hidden", c.adapter_hidden));
    // latent geometry and vocab are fixed by the codec and grammar
    c.validate();
    return c;
}

inline bool same_model_config(const ModelConfig& a, const ModelConfig& b) {
    auto same_bb = [](const BackboneConfig& x, const BackboneConfig& y) {
        return x.layers == y.layers && x.width == y.width && x.heads == y.heads &&
               x.ff_mult == y.ff_mult && x.max_seq == y.max_seq;
    };
    return same_bb(a.vlm, b.vlm) && same_bb(a.deep, b.deep) &&
           same_bb(a.shallow, b.shallow) && a.shallow_blocks == b.shallow_blocks &&
           a.n_latents == b.n_latents && a.d_latent == b.d_latent &&
           a.vocab_size == b.vocab_size && a.adapter_hidden == b.adapter_hidden;
}

// string-level entry points (used by tests); a full file is parsed once and
// checked for unknown keys after every consumer has read from it
inline TrainConfig load_train_config(const std::string& text, int stage,
                                     const std::string& origin = "config") {
    TomlFile f = TomlFile::parse(text, origin);
    TrainConfig c = read_train_config(f, stage);
    if (has_model_keys(f)) (void)read_model_config(f);
    f.reject_unknown();
    return c;
}

inline ModelConfig load_model_config(const std::string& text,
                                     const std::string& origin = "config") {
    TomlFile f = TomlFile::parse(text, origin);
    ModelConfig c = read_model_config(f);
    return c;
}

inline ordered_json train_echo_json(const TrainConfig& c) {
    ordered_json j;
    j["stage"] = c.stage;
    j["lr"] = c.lr;
    j["min_lr"] = c.min_lr;
    j["schedule"] = "cosine";
    j["beta1"] = c.beta1;
    j["beta2"] = c.beta2;
    j["eps"] = c.eps;
    j["weight_decay"] = c.weight_decay;
    j["clip_norm"] = c.clip_norm;
    j["batch"] = c.batch;
    j["steps"] = c.steps;
    j["lambda_text"] = c.lambda_text;
    j["seed"] = c.seed;
    j["noise_p"] = c.noise_p;
    j["noise_smax"] = c.noise_smax;
    j["threads"] = c.threads;
    j["log_every"] = c.log_every;
    return j;
}

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay and global-norm clipping
// ---------------------------------------------------------------------------

template <class Real>
class AdamW {
public:
    AdamW(ModelParams<Real>& params, const TrainConfig& cfg, const GradMask& mask)
        : cfg_(cfg) {
        for (auto& e : collect_tensors(params))
            if (group_trainable(mask, e.group)) {
                slots_.push_back({e.mat, Mat<Real>(e.mat->rows, e.mat->cols),
                                  Mat<Real>(e.mat->rows, e.mat->cols)});
                names_.push_back(e.name);
            }
    }

    // grads must be collected from the same params object (same order)
    void step(ModelParams<Real>& grads_holder, const GradMask& mask, double lr) {
        ++t_;
        std::vector<Mat<Real>*> gs;
        for (auto& e : collect_tensors(grads_holder))
            if (group_trainable(mask, e.group)) gs.push_back(e.mat);
        require(gs.size() == slots_.size(), ErrorKind::state, "optimizer slot mismatch");

        double norm_sq = 0;
        for (auto* g : gs)
            for (Real v : g->v) norm_sq += double(v) * double(v);
        double clip_scale = 1.0;
        double norm = std::sqrt(norm_sq);
        if (cfg_.clip_norm > 0 && norm > cfg_.clip_norm) clip_scale = cfg_.clip_norm / norm;

        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        for (size_t s = 0; s < slots_.size(); ++s) {
            auto& slot = slots_[s];
            const auto& g = gs[s]->v;
            for (size_t i = 0; i < slot.param->v.size(); ++i) {
                double gi = double(g[i]) * clip_scale;
                double m = cfg_.beta1 * double(slot.m.v[i]) + (1.0 - cfg_.beta1) * gi;
                double v = cfg_.beta2 * double(slot.v.v[i]) + (1.0 - cfg_.beta2) * gi * gi;
                slot.m.v[i] = Real(m);
                slot.v.v[i] = Real(v);
                double mh = m / bc1;
                double vh = v / bc2;
                double p = double(slot.param->v[i]);
                p -= lr * (mh / (std::sqrt(vh) + cfg_.eps) + cfg_.weight_decay * p);
                slot.param->v[i] = Real(p);
            }
        }
        last_grad_norm_ = norm;
    }

    double last_grad_norm() const { return last_grad_norm_; }

private:
    struct Slot {
        Mat<Real>* param;
        Mat<Real> m, v;
    };
    TrainConfig cfg_;
    std::vector<Slot> slots_;
    std::vector<std::string> names_;
    long t_ = 0;
    double last_grad_norm_ = 0;
};

// ---------------------------------------------------------------------------
// batch assembly
// ---------------------------------------------------------------------------

enum class TaskKind { t2i, t2i_open, i2t_caption, i2t_qa, text_only, interleaved };

struct BatchItem {
    TaskKind kind = TaskKind::t2i;
    int rec_a = 0;
    int rec_b = 0;       // second record for interleaved items
    int qa_index = 0;    // question selector for QA items
    double noise_s = 0;  // latent noise scale, 0 = off
    uint64_t noise_seed = 0;
};

// stage-specific task mixture; rng drives record and task selection
inline BatchItem sample_item(int stage, int n_records, Rng& rng, const TrainConfig& cfg) {
    BatchItem it;
    it.rec_a = int(rng.below(uint64_t(n_records)));
    double u = rng.uniform();
    switch (stage) {
        case 0:
            it.kind = u < 0.4 ? TaskKind::i2t_caption
                              : (u < 0.8 ? TaskKind::i2t_qa : TaskKind::text_only);
            break;
        case 1: it.kind = TaskKind::t2i_open; break;
        case 2: it.kind = u < 0.5 ? TaskKind::i2t_caption : TaskKind::i2t_qa; break;
        default:
            if (u < 0.4) {
                it.kind = TaskKind::t2i;
            } else if (u < 0.7) {
                it.kind = rng.uniform() < 0.5 ? TaskKind::i2t_caption : TaskKind::i2t_qa;
            } else {
                it.kind = TaskKind::interleaved;
                it.rec_b = int(rng.below(uint64_t(n_records)));
            }
            break;
    }
    it.qa_index = int(rng.below(64));
    if (cfg.noise_p > 0 && (it.kind == TaskKind::t2i || it.kind == TaskKind::t2i_open ||
                            it.kind == TaskKind::interleaved)) {
        if (rng.uniform() < cfg.noise_p) it.noise_s = rng.uniform(0.0, cfg.noise_smax);
    }
    it.noise_seed = rng.next_u64();
    return it;
}

template <class Real>
inline Mat<Real> with_noise(Mat<Real> x, double s, uint64_t seed) {
    if (s > 0) {
        Rng rng(seed);
        for (auto& v : x.v) v += Real(s * rng.gauss());
    }
    return x;
}

template <class Real>
inline MultimodalSequence<Real> build_item_sequence(const BatchItem& it,
                                                    const std::vector<DataRecord>& recs) {
    const auto& v = vocab();
    const DataRecord& a = recs[size_t(it.rec_a)];
    switch (it.kind) {
        case TaskKind::t2i:
            return seq_t2i(a.caption_tokens,
                           with_noise(to_real<Real>(a.latents), it.noise_s, it.noise_seed));
        case TaskKind::t2i_open: {
            // like t2i but without the trailing <eos>: nothing after the image
            // is a target in stage 1
            auto s = seq_t2i(a.caption_tokens, with_noise(to_real<Real>(a.latents),
                                                          it.noise_s, it.noise_seed));
            s.tokens.pop_back();
            return s;
        }
        case TaskKind::i2t_caption:
            return seq_i2t(to_real<Real>(a.latents), a.caption_tokens);
        case TaskKind::i2t_qa: {
            auto qs = qa_pairs(a.scene);
            const auto& q = qs[size_t(it.qa_index) % qs.size()];
            std::vector<int> text = v.encode(q.question);
            text.push_back(v.id(q.answer));
            return seq_i2t(to_real<Real>(a.latents), text);
        }
        case TaskKind::text_only:
            return seq_text_only<Real>(a.caption_tokens);
        case TaskKind::interleaved: {
            const DataRecord& b = recs[size_t(it.rec_b)];
            return seq_interleaved(a.caption_tokens,
                                   with_noise(to_real<Real>(a.latents), it.noise_s,
                                              it.noise_seed),
                                   b.caption_tokens, to_real<Real>(b.latents));
        }
    }
    fail(ErrorKind::state, "unreachable task kind");
}

inline FusedOptions stage_forward_options(int stage, bool record) {
    FusedOptions o;
    o.record = record;
    switch (stage) {
        case 0:
            o.want_flow = false;
            o.pathway = VisualPathway::native;
            break;
        case 1:
            o.want_text = false;
            o.pathway = VisualPathway::none;
            break;
        case 2:
            o.want_flow = false;
            o.pathway = VisualPathway::adapter;
            break;
        default:
            o.use_skips = true;
            o.pathway = VisualPathway::adapter;
            break;
    }
    return o;
}

// ---------------------------------------------------------------------------
// batch losses
// ---------------------------------------------------------------------------

struct BatchStats {
    double nf_total = 0;      // summed visual NLL (nats)
    long nf_dims = 0;
    long nf_images = 0;
    double ntp_total = 0;     // summed text NLL (nats)
    long ntp_targets = 0;
    ClampStats clamp;
    bool finite = true;

    double loss(double lambda_text, int stage) const {
        double nf = nf_dims ? nf_total / double(nf_dims) : 0.0;
        double ntp = ntp_targets ? ntp_total / double(ntp_targets) : 0.0;
        if (stage == 0 || stage == 2) return ntp;
        if (stage == 1) return nf;
        return nf + lambda_text * ntp;
    }
    double nats_per_dim() const { return nf_dims ? nf_total / double(nf_dims) : 0.0; }
    double ntp_nats() const { return ntp_targets ? ntp_total / double(ntp_targets) : 0.0; }

    void operator+=(const BatchStats& o) {
        nf_total += o.nf_total;
        nf_dims += o.nf_dims;
        nf_images += o.nf_images;
        ntp_total += o.ntp_total;
        ntp_targets += o.ntp_targets;
        clamp += o.clamp;
        finite = finite && o.finite;
    }
};

// Forward+backward over one batch, chunked across threads. Chunk boundaries,
// not the worker count, fix the gradient accumulation order.
template <class Real>
inline BatchStats batch_forward_backward(const ModelParams<Real>& m,
                                         const std::vector<DataRecord>& recs,
                                         const std::vector<BatchItem>& items,
                                         const TrainConfig& cfg, const GradMask& mask,
                                         std::vector<ModelParams<Real>>& chunk_grads,
                                         ModelParams<Real>& grads_out) {
    const int stage = cfg.stage;
    const int n_chunks = int(chunk_grads.size());
    // batch-level normalizers are known from the sequence structure alone
    long total_dims = 0, total_targets = 0;
    std::vector<MultimodalSequence<Real>> seqs(items.size());
    for (size_t i = 0; i < items.size(); ++i) {
        seqs[i] = build_item_sequence<Real>(items[i], recs);
        if (stage != 0 && stage != 2)
            total_dims += long(seqs[i].images.size()) * m.cfg.n_latents * m.cfg.d_latent;
        if (stage != 1)
            for (int t = 1; t < seqs[i].length(); ++t)
                if (!seqs[i].is_visual(t)) ++total_targets;
    }
    const Real w_nf = total_dims ? Real(1.0 / double(total_dims)) : Real(0);
    const double lambda_eff = (stage == 0 || stage == 2) ? 1.0 : cfg.lambda_text;
    const Real w_ntp = total_targets ? Real(lambda_eff / double(total_targets)) : Real(0);

    std::vector<BatchStats> chunk_stats(static_cast<size_t>(n_chunks));
    const size_t per = (items.size() + size_t(n_chunks) - 1) / size_t(n_chunks);
    FusedOptions opts = stage_forward_options(stage, true);
    run_chunks(n_chunks, cfg.threads, [&](int c) {
        auto& st = chunk_stats[size_t(c)];
        for (size_t i = size_t(c) * per; i < std::min(items.size(), (size_t(c) + 1) * per);
             ++i) {
            FusedOptions o = opts;
            o.noise_level = items[i].noise_s;
            auto f = fused_forward(m, seqs[i], o);
            st.nf_total += double(f.nll.total);
            st.nf_dims += long(f.u_stack.size());
            st.nf_images += long(seqs[i].images.size());
            st.ntp_total += double(f.ntp_total);
            st.ntp_targets += long(f.text_targets.size());
            st.clamp += f.clamp;
            st.finite = st.finite && std::isfinite(double(f.nll.total)) &&
                        std::isfinite(double(f.ntp_total));
            if (st.finite)
                fused_backward(m, seqs[i], f, stage == 0 || stage == 2 ? Real(0) : w_nf,
                               stage == 1 ? Real(0) : w_ntp, chunk_grads[size_t(c)], mask);
        }
    });
    BatchStats total;
    for (int c = 0; c < n_chunks; ++c) total += chunk_stats[size_t(c)];
    // reduce chunk gradients in chunk order
    auto out_entries = collect_tensors(grads_out);
    for (int c = 0; c < n_chunks; ++c) {
        auto ce = collect_tensors(chunk_grads[size_t(c)]);
        for (size_t k = 0; k < out_entries.size(); ++k)
            for (size_t i = 0; i < out_entries[k].mat->size(); ++i)
                out_entries[k].mat->v[i] += ce[k].mat->v[i];
    }
    return total;
}

// ---------------------------------------------------------------------------
// metrics log
// ---------------------------------------------------------------------------

class MetricsLog {
public:
    explicit MetricsLog(const std::filesystem::path& path) : os_(path, std::ios::binary) {
        require(bool(os_), ErrorKind::io, "cannot write metrics log " + path.string());
        os_ << "step,stage,loss,nats_per_dim,ntp_nats,lr,sigma_clamp_rate,wall_ms\n";
    }

    void row(int step, int stage, double loss, double npd, double ntp, double lr,
             double clamp_rate, double wall_ms) {
        os_ << step << ',' << stage << ',' << fmt_(loss) << ',' << fmt_(npd) << ','
            << fmt_(ntp) << ',' << fmt_(lr) << ',' << fmt_(clamp_rate) << ','
            << fmt_(wall_ms) << "\n";
        os_.flush();
    }

private:
    static std::string fmt_(double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6g", v);
        return buf;
    }
    std::ofstream os_;
};

// ---------------------------------------------------------------------------
// stage runner
// ---------------------------------------------------------------------------

struct StageResult {
    std::vector<double> loss_curve;        // one entry per step
    std::vector<double> nats_curve;
    double final_loss = 0;
};

template <class Real>
inline StageResult run_stage(Checkpoint<Real>& ckpt, const std::vector<DataRecord>& records,
                             const TrainConfig& cfg, const std::filesystem::path& out_dir,
                             const std::filesystem::path& metrics_path) {
    cfg.validate();
    require(!records.empty(), ErrorKind::missing_prerequisite, "empty training dataset");
    std::filesystem::create_directories(out_dir);
    if (metrics_path.has_parent_path())
        std::filesystem::create_directories(metrics_path.parent_path());
    const GradMask mask = freeze_schedule(cfg.stage);

    // freezing contract: checksum everything frozen before training
    std::vector<std::pair<std::string, uint64_t>> frozen_sums;
    for (const auto& g : param_groups())
        if (!group_trainable(mask, g))
            frozen_sums.emplace_back(g, group_checksum(ckpt.model, g));

    ckpt.entry = ckpt.model;
    ckpt.has_entry = true;
    ckpt.stage = cfg.stage;
    ckpt.train_echo = train_echo_json(cfg);
    ckpt.frozen_groups.clear();
    for (const auto& g : param_groups())
        if (!group_trainable(mask, g)) ckpt.frozen_groups.push_back(g);

    AdamW<Real> opt(ckpt.model, cfg, mask);
    std::vector<ModelParams<Real>> chunk_grads;
    for (int c = 0; c < cfg.threads; ++c) chunk_grads.push_back(zeros_like(ckpt.model));
    ModelParams<Real> grads = zeros_like(ckpt.model);

    MetricsLog log(metrics_path);
    Rng batch_rng(derive_seed(cfg.seed, "batch", uint64_t(cfg.stage)));
    StageResult res;
    auto t0 = std::chrono::steady_clock::now();

    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<BatchItem> items(static_cast<size_t>(cfg.batch));
        for (auto& it : items) it = sample_item(cfg.stage, int(records.size()), batch_rng, cfg);

        for (auto& g : chunk_grads)
            for (auto& e : collect_tensors(g)) e.mat->zero();
        for (auto& e : collect_tensors(grads)) e.mat->zero();

        BatchStats st = batch_forward_backward(ckpt.model, records, items, cfg, mask,
                                               chunk_grads, grads);
        double loss = st.loss(cfg.lambda_text, cfg.stage);
        if (!st.finite || !std::isfinite(loss)) {
            ordered_json diag;
            diag["step"] = step;
            diag["stage"] = cfg.stage;
            diag["loss"] = loss;
            diag["nats_per_dim"] = st.nats_per_dim();
            diag["ntp_nats"] = st.ntp_nats();
            std::filesystem::create_directories(out_dir);
            std::ofstream ds(out_dir / "diagnostics.json", std::ios::binary);
            ds << diag.dump(2) << "\n";
            fail(ErrorKind::numeric, "non-finite loss at step " + std::to_string(step) +
                                         "; state dumped to diagnostics.json");
        }
        double lr = cosine_lr(cfg, step);
        opt.step(grads, mask, lr);

        res.loss_curve.push_back(loss);
        res.nats_curve.push_back(st.nats_per_dim());
        res.final_loss = loss;
        if (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            double wall =
                std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                          t0)
                    .count();
            log.row(step, cfg.stage, loss, st.nats_per_dim(), st.ntp_nats(), lr,
                    st.clamp.rate(), wall);
        }
    }

    // frozen groups must be bit-identical to their entry state
    for (const auto& [g, sum] : frozen_sums)
        require(group_checksum(ckpt.model, g) == sum, ErrorKind::state,
                "frozen group changed during training: " + g);

    save_checkpoint(out_dir, ckpt);
    return res;
}

// stage-3 assembly: stage-1 flow + stage-2 adapter over a shared frozen stub
template <class Real>
inline Checkpoint<Real> merge_for_stage3(const Checkpoint<Real>& flow_ckpt,
                                         Checkpoint<Real>& adapter_ckpt) {
    require(flow_ckpt.stage == 1, ErrorKind::missing_prerequisite,
            "stage 3 needs a stage-1 flow checkpoint");
    require(adapter_ckpt.stage == 2, ErrorKind::missing_prerequisite,
            "stage 3 needs a stage-2 adapter checkpoint");
    Checkpoint<Real> merged = flow_ckpt;
    require(group_checksum(merged.model, "stub") ==
                group_checksum(adapter_ckpt.model, "stub"),
            ErrorKind::missing_prerequisite,
            "flow and adapter checkpoints come from different stubs");
    merged.model.adapter = adapter_ckpt.model.adapter;
    // vertical skip projections are exactly zero at activation
    merged.model.w_vlm.zero();
    merged.model.w_d.zero();
    for (const auto& [k, v] : adapter_ckpt.metrics) merged.metrics.emplace(k, v);
    return merged;
}

}  // namespace flowlm
