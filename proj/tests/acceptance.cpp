// Acceptance gates. Each criterion prints exactly one [PASS]/[FAIL] line;
// the process exits nonzero if any hard gate fails. The trend and overfit
// benchmarks run the real pipeline on the default synthetic corpus with a
// reduced epoch budget chosen to fit the runtime limits (the gates check
// orderings, not absolute numbers, so the budget is recorded per line).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "pmil/grad_check.hpp"
#include "pmil/pipeline.hpp"
#include "pmil/synthdata.hpp"

using namespace pmil;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void gate(const std::string& name, const std::function<bool(std::string&)>& body,
          bool soft = false) {
    const auto t0 = std::chrono::steady_clock::now();
    std::string detail;
    bool ok = false;
    try {
        ok = body(detail);
    } catch (const std::exception& e) {
        detail = std::string("exception: ") + e.what();
    }
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!ok && !soft) ++g_failures;
    std::printf("[%s] %s (%.1fs)%s%s\n", ok ? "PASS" : "FAIL", name.c_str(), dt,
                detail.empty() ? "" : " -- ", detail.c_str());
    std::fflush(stdout);
}

struct TempDir {
    fs::path path;
    TempDir(const std::string& tag) : path(fs::temp_directory_path() / ("pmil_accept_" + tag)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

// reduced budget for the benchmark gates; the gates compare method orderings.
// One lr for every method and stage: the trend gate compares methods, so no
// method gets its own schedule.
constexpr int kBenchEpochs = 50;
constexpr int kBenchPretrainEpochs = 20;
constexpr double kBenchLr = 1.5e-4;
// The finetune-all arm updates every backbone weight at ~2.7x the per-epoch
// cost of prompt tuning, so it gets an equal-compute (not equal-epoch) budget;
// this keeps the three-method benchmark inside the runtime limit. rps_ft is
// reported, not part of the ordering gate.
constexpr int kBenchFtEpochs = 18;

const Corpus& desk_corpus() {
    static const Corpus corpus = gen_corpus(CorpusSpec{});
    return corpus;
}

BackboneConfig desk_backbone(const Corpus& corpus) {
    BackboneConfig bb = BackboneConfig::preset("resnet18-like");
    bb.height = corpus.spec.height;
    bb.width = corpus.spec.width;
    return bb;
}

ExperimentConfig bench_config(const std::string& method, std::uint64_t seed) {
    ExperimentConfig cfg;
    cfg.method = method;
    cfg.seed = seed;
    cfg.epochs = method == "rps_ft" ? kBenchFtEpochs : kBenchEpochs;
    cfg.pretrain_epochs = kBenchPretrainEpochs;
    cfg.lr = kBenchLr;
    return cfg;
}

// shared across the freeze/identity/trend/ablation gates
struct BenchRuns {
    std::map<std::uint64_t, PretrainResult> pretrained;
    std::map<std::string, std::vector<MethodRun>> by_method;  // seed order 1..5
};

BenchRuns& bench_runs() {
    static BenchRuns runs = [] {
        BenchRuns r;
        for (std::uint64_t seed = 1; seed <= 5; ++seed)
            r.pretrained.emplace(seed, pretrain_backbone(desk_corpus(),
                                                         desk_backbone(desk_corpus()), seed,
                                                         kBenchPretrainEpochs, 1e-3));
        for (const std::string method : {"baseline", "rps_ft", "rps_pt"})
            for (std::uint64_t seed = 1; seed <= 5; ++seed)
                r.by_method[method].push_back(run_method(desk_corpus(), r.pretrained.at(seed),
                                                         desk_backbone(desk_corpus()),
                                                         bench_config(method, seed)));
        return r;
    }();
    return runs;
}

double auc_bruteforce(const std::vector<double>& s, const std::vector<int>& y) {
    double num = 0;
    long pairs = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (y[i] != 1 || y[j] != 0) continue;
            ++pairs;
            if (s[i] > s[j]) num += 1;
            else if (s[i] == s[j]) num += 0.5;
        }
    return num / pairs;
}

bool grad_correctness(std::string& detail) {
    const Corpus& corpus = desk_corpus();
    const BackboneConfig bb = desk_backbone(corpus);
    double worst = 0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Rng init(seed, "init.backbone");
        ParamSet<double> params = backbone_init<float>(bb, init).cast<double>();
        Rng mil_rng(seed, "init.mil");
        mil_init(params, MilConfig{16, bb.channels}, mil_rng);
        Rng nudge(seed, "nudge");
        for (auto& [name, t] : params.entries) {
            if (name.rfind("prompt.", 0) == 0)
                for (auto& v : t.data) v = nudge.gaussian(0.0, 0.1);
            if (name == "mil.head.w")
                for (auto& v : t.data) v = nudge.gaussian(0.0, 0.3);
        }

        // unit-scale random patches: same shape as corpus patches, but without
        // the domain-shift gain/clamp tails that degrade finite-difference
        // conditioning (the criterion checks the graph, not the corpus)
        Rng patch_rng(seed, "gradcheck.patches");
        std::vector<Tensor<double>> patches;
        for (int p = 0; p < 2; ++p) {
            Tensor<double> t = Tensor<double>::zeros({3, bb.height, bb.width});
            for (auto& v : t.data) v = patch_rng.gaussian(0.0, 1.0);
            patches.push_back(std::move(t));
        }

        auto graph = [&bb, &patches](Tape<double>& t, const std::map<std::string, int>& v) {
            std::vector<int> feats;
            for (const auto& patch : patches) {
                Tensor<double> leaf = patch;
                leaf.requires_grad = false;
                feats.push_back(backbone_forward_taped(t, t.leaf(std::move(leaf)), v, bb,
                                                       PromptMode::active()));
            }
            const auto r = classify_bag_taped(t, feats, v);
            return t.ce_loss(r.logits, 1);
        };
        worst = std::max(worst, grad_check(graph, params, 1e-4, 20, seed));
    }
    char buf[64];
    std::snprintf(buf, sizeof(buf), "max rel err %.2e", worst);
    detail = buf;
    return worst < 1e-4;
}

bool freeze_contract(std::string& detail) {
    const auto& runs = bench_runs();
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto& ckpt = runs.by_method.at("rps_pt")[seed - 1].final_ckpt;
        const auto& pre = runs.pretrained.at(seed).params;
        for (const auto& [name, t] : ckpt.params.entries) {
            if (name.rfind("backbone.", 0) != 0) continue;
            if (t.data != pre.at(name).data) {
                detail = "drifted: " + name;
                return false;
            }
        }
    }
    detail = "all frozen tensors bit-identical across 5 prompt-tune runs";
    return true;
}

bool prompt_identity(std::string& detail) {
    const auto& run = bench_runs().by_method.at("baseline")[0];
    const auto& corpus = desk_corpus();
    const auto off = bag_probabilities(run.final_ckpt, corpus.test);
    const auto ones = bag_probabilities(run.final_ckpt, corpus.test, PromptMode::forced(1.0));
    if (off != ones) {
        detail = "probabilities diverge under forced-ones prompts";
        return false;
    }
    detail = "forced-ones evaluation bit-identical to the no-prompt baseline";
    return true;
}

bool eq2_oracle(std::string& detail) {
    ParamSet<float> ps;
    ps.add("mil.v1", Tensor<float>::from({1, 1}, {1}), true);
    ps.add("mil.v2", Tensor<float>::from({1, 1}, {1}), true);
    ps.add("mil.w", Tensor<float>::from({1}, {1}), true);
    ps.add("mil.head.w", Tensor<float>::zeros({2, 1}), true);
    ps.add("mil.head.b", Tensor<float>::zeros({2}), true);
    const std::vector<Tensor<float>> feats{Tensor<float>::from({1}, {0}),
                                           Tensor<float>::from({1}, {1})};
    const auto a = attention_scores(feats, ps);
    char buf[64];
    std::snprintf(buf, sizeof(buf), "alphas [%.4f, %.4f]", a[0], a[1]);
    detail = buf;
    return std::fabs(a[0] - 0.3643) < 1e-3 && std::fabs(a[1] - 0.6357) < 1e-3;
}

bool auc_oracle(std::string& detail) {
    Rng rng(4242, "auc");
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 2 + static_cast<int>(rng.next_below(199));
        std::vector<double> s(n);
        std::vector<int> y(n);
        for (int i = 0; i < n; ++i) {
            s[i] = static_cast<double>(rng.next_below(10)) / 10.0;  // coarse grid → ties
            y[i] = static_cast<int>(rng.next_below(2));
        }
        y[0] = 1;
        y[1] = 0;
        if (*auc(s, y) != auc_bruteforce(s, y)) {
            detail = "mismatch at trial " + std::to_string(trial);
            return false;
        }
    }
    detail = "100/100 instances match the O(n^2) pair count exactly";
    return true;
}

bool rps_properties(std::string& detail) {
    Rng rng(7, "rps");
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = 1 + static_cast<int>(rng.next_below(48));
        const int k = 1 + static_cast<int>(rng.next_below(64));
        std::vector<float> scores(n);
        for (int i = 0; i < n; ++i) {
            scores[i] = static_cast<float>(rng.uniform(0.0, 1.0));
            if (i > 0 && rng.next_below(4) == 0) scores[i] = scores[0];
        }
        const auto kept = top_k_indices(scores, k);
        if (static_cast<int>(kept.size()) != std::min(k, n)) {
            detail = "cardinality violated";
            return false;
        }
        for (std::size_t i = 1; i < kept.size(); ++i)
            if (kept[i] <= kept[i - 1]) {
                detail = "indices not strictly ascending";
                return false;
            }
        std::vector<bool> in(n, false);
        for (int i : kept) in[i] = true;
        float min_kept = 2.0f, max_dropped = -1.0f;
        for (int i = 0; i < n; ++i)
            (in[i] ? min_kept = std::min(min_kept, scores[i])
                   : max_dropped = std::max(max_dropped, scores[i]));
        if (static_cast<int>(kept.size()) < n && min_kept < max_dropped) {
            detail = "score dominance violated";
            return false;
        }
        if (top_k_indices(scores, k) != kept) {
            detail = "nondeterministic selection";
            return false;
        }
        const auto wider = top_k_indices(scores, k + 1);
        if (!std::includes(wider.begin(), wider.end(), kept.begin(), kept.end())) {
            detail = "K-monotonicity violated";
            return false;
        }
    }
    detail = "dominance, cardinality, tie-break, K-monotonicity on 1000 vectors";
    return true;
}

bool trend_gate(std::string& detail) {
    const auto& runs = bench_runs();
    int wins = 0;
    double mean_gain = 0;
    for (int i = 0; i < 5; ++i) {
        const double base = runs.by_method.at("baseline")[i].test.auc.value_or(0.5);
        const double pt = runs.by_method.at("rps_pt")[i].test.auc.value_or(0.5);
        wins += pt > base;
        mean_gain += (pt - base) / 5.0;
    }
    char buf[128];
    std::snprintf(buf, sizeof(buf), "rps_pt beats baseline %d/5 seeds, mean test-AUC gain %+.4f",
                  wins, mean_gain);
    detail = buf;
    return wins >= 4 && mean_gain > 0;
}

bool overfit_report(std::string& detail) {
    // Reduced splits and budget: this criterion is a soft directional report,
    // not an ordering gate, so it does not need the full benchmark recipe.
    CorpusSpec spec;
    spec.num_train_bags = 10;  // smallest training size
    spec.num_val_bags = 8;
    spec.num_test_bags = 16;
    spec.seed = 2;
    const Corpus corpus = gen_corpus(spec);
    const BackboneConfig bb = desk_backbone(corpus);

    TempDir dir("overfit");
    const fs::path csv = dir.path / "metrics.csv";
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto pre = pretrain_backbone(corpus, bb, seed, 10, 1e-3);
        for (const std::string method : {"rps_ft", "rps_pt"}) {
            ExperimentConfig cfg = bench_config(method, seed);
            cfg.epochs = 30;
            cfg.pretrain_epochs = 10;
            const auto run = run_method(corpus, pre, bb, cfg);
            append_metrics_csv(csv, {run.val, run.test});
        }
    }
    const std::string report = report_from_csv(csv);
    const auto pos = report.find("overfit-direction:");
    if (pos == std::string::npos) {
        detail = "report is missing the overfit-direction line";
        return false;
    }
    detail = report.substr(pos, report.find('\n', pos) - pos) + " [soft report, never gates]";
    return true;  // soft criterion: the annotation is the deliverable
}

bool ablation_shape(std::string& detail) {
    CorpusSpec spec;
    spec.num_train_bags = 10;
    spec.num_val_bags = 4;
    spec.num_test_bags = 8;
    spec.patches_per_bag = 16;
    spec.rho = 0.15;
    spec.seed = 3;
    const Corpus corpus = gen_corpus(spec);

    ExperimentConfig cfg = bench_config("rps_pt", 1);
    cfg.epochs = 5;
    cfg.pretrain_epochs = 3;
    cfg.k = 4;

    AblateRequest kreq;
    kreq.axis = "k";
    kreq.values = {2, 4, 16, 32};  // 32 > patches_per_bag → saturated selection
    kreq.seeds = {1, 2};
    const auto krows = ablate(corpus, kreq, cfg);
    if (krows.size() != kreq.values.size() * kreq.seeds.size()) {
        detail = "k sweep row count " + std::to_string(krows.size());
        return false;
    }
    for (std::size_t i = 0; i < krows.size(); ++i)
        if (krows[i].k != kreq.values[i % kreq.values.size()] || krows[i].split != "test") {
            detail = "k sweep row mismatch at " + std::to_string(i);
            return false;
        }

    AblateRequest sreq;
    sreq.axis = "sites";
    sreq.values = {0, 1, 2};
    sreq.seeds = {1};
    const auto srows = ablate(corpus, sreq, cfg);
    if (srows.size() != 3 || srows[0].prompt_sites != 0) {
        detail = "sites sweep shape wrong";
        return false;
    }

    // site-count 0 must equal the frozen stage-1 classifier on selected bags,
    // recomputed independently here
    BackboneConfig bb = desk_backbone(corpus);
    const auto pre = pretrain_backbone(corpus, bb, 1, cfg.pretrain_epochs, cfg.pretrain_lr);
    const auto features = extract_features(corpus, pre.params, bb, PromptMode::off(), "in-memory");
    ExperimentConfig c1 = cfg;
    c1.seed = 1;
    const auto stage1 = stage1_train_mil(features, c1);
    const auto manifest = stage2_select(features, stage1.params, cfg.k, "in-memory");
    std::vector<double> probs;
    std::vector<int> labels;
    for (const auto& e : manifest.entries) {
        if (e.split != "test") continue;
        for (const auto& fb : features.splits.at("test")) {
            if (fb.bag_id != e.sel.bag_id) continue;
            std::vector<Tensor<float>> kept;
            for (int i : e.sel.kept_indices) kept.push_back(fb.features[i]);
            probs.push_back(positive_probability(classify_bag(kept, stage1.params).logits));
            labels.push_back(e.sel.label);
        }
    }
    const auto expect_auc = auc(probs, labels);
    const auto fa = f1_acc(probs, labels);
    if (srows[0].auc != expect_auc || srows[0].f1 != fa.f1 || srows[0].acc != fa.acc) {
        detail = "site-count 0 row differs from the frozen baseline on selected bags";
        return false;
    }
    detail = "k sweep rows consistent; site-count 0 reduction exact";
    return true;
}

bool determinism(std::string& detail) {
    TempDir dir("det");
    CorpusSpec spec;
    spec.num_train_bags = 6;
    spec.num_val_bags = 2;
    spec.num_test_bags = 2;
    spec.patches_per_bag = 8;
    spec.rho = 0.25;
    spec.num_source_patches = 16;
    spec.height = 4;
    spec.width = 4;
    spec.seed = 5;

    // corpus bytes
    write_corpus(gen_corpus(spec), dir.path / "c1");
    write_corpus(gen_corpus(spec), dir.path / "c2");
    for (const auto& e : fs::recursive_directory_iterator(dir.path / "c1")) {
        if (!e.is_regular_file()) continue;
        const auto rel = fs::relative(e.path(), dir.path / "c1");
        if (file_fingerprint(e.path()) != file_fingerprint(dir.path / "c2" / rel)) {
            detail = "corpus file differs: " + rel.string();
            return false;
        }
    }

    // checkpoint + manifest + csv bytes from two identical pipeline runs
    const Corpus corpus = gen_corpus(spec);
    BackboneConfig bb = desk_backbone(corpus);
    bb.channels = 16;
    ExperimentConfig cfg = bench_config("rps_pt", 1);
    cfg.epochs = 2;
    cfg.k = 4;
    cfg.mil_hidden = 16;
    for (int rep = 1; rep <= 2; ++rep) {
        const auto tag = std::to_string(rep);
        const auto pre = pretrain_backbone(corpus, bb, 1, 2, 1e-3);
        const auto features = extract_features(corpus, pre.params, bb, PromptMode::off(), "fp");
        const auto stage1 = stage1_train_mil(features, cfg);
        const auto manifest = stage2_select(features, stage1.params, cfg.k, "fp");
        write_selection_manifest(manifest, dir.path / ("manifest" + tag + ".json"));
        const auto stage3 =
            stage3_tune(corpus, manifest, pre.params, bb, &stage1.params, cfg, false);
        const auto ckpt = make_checkpoint("stage3", stage3.params, bb, cfg, &stage3);
        write_checkpoint(dir.path / ("run" + tag + ".ckpt"), ckpt);
        append_metrics_csv(dir.path / ("metrics" + tag + ".csv"),
                           {evaluate(ckpt, corpus, "val"), evaluate(ckpt, corpus, "test")});
    }
    for (const std::string name : {"manifest", "run", "metrics"}) {
        const std::string ext = name == "manifest" ? ".json" : name == "run" ? ".ckpt" : ".csv";
        if (file_fingerprint(dir.path / (name + "1" + ext)) !=
            file_fingerprint(dir.path / (name + "2" + ext))) {
            detail = name + " bytes differ between identical reruns";
            return false;
        }
    }
    detail = "corpus, checkpoint, manifest, and CSV bytes identical across reruns";
    return true;
}

}  // namespace

int main() {
    gate("gradient correctness: rps_pt graph grad_check < 1e-4, 5 seeds", grad_correctness);
    gate("eq. 2 scalar oracle: alphas [0.3643, 0.6357] +/- 1e-3", eq2_oracle);
    gate("auc oracle equivalence: sorted-rank == brute force, 100 instances", auc_oracle);
    gate("rps selection properties on 1000 random score vectors", rps_properties);
    gate("synthetic trend gate: rps_pt > baseline, 5 seeds", trend_gate);
    gate("freeze contract: frozen tensors bit-identical after prompt-tune", freeze_contract);
    gate("prompt-identity equivalence: forced-ones == no-prompt baseline", prompt_identity);
    gate("overfitting direction at 10 training bags", overfit_report, /*soft=*/true);
    gate("ablation shape: k sweep rows + site-count 0 reduction", ablation_shape);
    gate("determinism: byte-identical artifacts on rerun", determinism);
    return g_failures == 0 ? 0 : 1;
}
