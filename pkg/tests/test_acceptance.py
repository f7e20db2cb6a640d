"""End-to-end acceptance checks.

Each test prints exactly one PASS/FAIL line with its measured numbers, then
asserts. The heavier episode runs are shared through module-scoped fixtures
so the suite stays within a desktop time budget.
"""

import time

import numpy as np
import pytest

from dotengine import diffmath as dm
from dotengine import distributions as dist
from dotengine import dot_transform as dt
from dotengine import metrics as met
from dotengine import objectives as obj
from dotengine.pipeline import EpisodeConfig, run_episode
from dotengine.synthgen import SynthConfig, generate

SEEDS = (0, 1, 2)


def emit(name, ok, detail):
    print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def mean_metrics(bank, **kw):
    per_seed = []
    for seed in SEEDS:
        _, tensor = run_episode(bank, EpisodeConfig(seed=seed, **kw))
        per_seed.append(met.compute_all(tensor))
    return {k: float(np.mean([r[k] for r in per_seed])) for k in per_seed[0]}


@pytest.fixture(scope="module")
def default_bank():
    return generate(SynthConfig())


@pytest.fixture(scope="module")
def baseline_runs(default_bank):
    return mean_metrics(default_bank, no_dot=True)


@pytest.fixture(scope="module")
def default_runs(default_bank):
    return mean_metrics(default_bank)


class TestGradientCorrectness:
    def test_losses_match_finite_differences(self):
        start = time.time()
        worst = 0.0
        for seed in range(50):
            rng = np.random.default_rng(seed)
            cfg = dt.DoTConfig(m=8, heads=2, w_o_init="random")
            params = dt.init_parameters(cfg, rng)
            head_w = dm.parameter(rng.standard_normal((3, 8)) * 0.3, name="head_w")
            head_b = dm.parameter(rng.standard_normal((1, 3)) * 0.1, name="head_b")
            stacks = [rng.standard_normal((3, 8)) for _ in range(2)]
            feats = [np.abs(rng.standard_normal(8)) + 0.5 for _ in range(3)]
            pool = np.abs(rng.standard_normal((6, 8)))
            pool_c = np.array([0, 1, 2, 0, 1, 2])
            pool_d = np.array([0, 0, 0, 1, 1, 1])

            def combined_loss():
                anchors, a_c, a_d = [], [], []
                for c in range(3):
                    for d in range(2):
                        anchors.append(dt.dot_forward(params, feats[c], stacks[d]))
                        a_c.append(c)
                        a_d.append(d)
                batch = obj.LossBatch(anchors, a_c, a_d, pool, pool_c, pool_d)
                contrast = obj.loss_dot(batch, params)
                pseudo = dm.concat_rows(anchors)
                align = obj.loss_oa(head_w, head_b, pool, pool_c,
                                    pseudo, np.array(a_c))
                return dm.add(contrast, align)

            loss = combined_loss()
            grads = dm.backward(loss)
            eps = 1e-6
            leaves = params.trainables() + [head_w, head_b]
            for leaf in leaves:
                flat_idx = rng.integers(leaf.data.size, size=3)
                for fi in flat_idx:
                    idx = np.unravel_index(fi, leaf.data.shape)
                    leaf.data[idx] += eps
                    hi = float(combined_loss().data)
                    leaf.data[idx] -= 2 * eps
                    lo = float(combined_loss().data)
                    leaf.data[idx] += eps
                    numeric = (hi - lo) / (2 * eps)
                    analytic = grads[leaf][idx]
                    rel = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-6)
                    worst = max(worst, rel)
        elapsed = time.time() - start
        emit(
            "gradient correctness",
            worst <= 1e-4 and elapsed < 10.0,
            f"worst relative error {worst:.2e} (<=1e-4), {elapsed:.1f}s (<10s)",
        )


class TestAttentionOracle:
    def test_forward_matches_brute_force(self):
        worst = 0.0
        rng = np.random.default_rng(7)
        for _ in range(100):
            m = int(rng.choice([8, 12, 16]))
            heads = int(rng.choice([1, 2, 4]))
            layers = int(rng.integers(2, 7))
            cfg = dt.DoTConfig(m=m, heads=heads, w_o_init="random")
            params = dt.init_parameters(cfg, rng)
            r = rng.standard_normal(m)
            stack = rng.standard_normal((layers, m))
            got = dt.dot_forward_value(params, r, stack)
            # brute-force per-head loops, plain numpy
            e_sem = r[None, :] @ params.w_sem.data
            e_dom = stack @ params.w_dom.data
            q = e_sem @ params.w_q.data
            k = e_dom @ params.w_k.data
            v = e_dom @ params.w_v.data
            width = m // heads
            parts = []
            for h in range(heads):
                sl = slice(h * width, (h + 1) * width)
                scores = q[:, sl] @ k[:, sl].T / np.sqrt(width)
                w = np.exp(scores - scores.max())
                parts.append((w / w.sum()) @ v[:, sl])
            want = np.maximum(r + np.concatenate(parts, axis=1) @ params.w_o.data, 0.0)[0]
            worst = max(worst, float(np.abs(got - want).max()))
        emit("attention oracle", worst <= 1e-10, f"worst abs error {worst:.2e} (<=1e-10)")


class TestMetricsOracle:
    @staticmethod
    def reference(tensor):
        T, S = tensor.num_tasks, tensor.domains
        cols = S + ([tensor.unseen_domain] if tensor.unseen_domain is not None else [])
        final = {(t, d): tensor.get(t, d, T) for t in range(1, T + 1) for d in cols}
        out = {
            "a_all": sum(final[(t, d)] for t in range(1, T + 1) for d in S) / (T * len(S)),
            "a_in": sum(final[(t, tensor.train_domains[t - 1])] for t in range(1, T + 1)) / T,
        }
        outs, worsts = [], []
        for t in range(1, T + 1):
            others = [d for d in S if d != tensor.train_domains[t - 1]]
            outs.append(sum(final[(t, d)] for d in others) / len(others))
            worsts.append(min(final[(t, d)] for d in others))
        out["a_out"] = sum(outs) / T
        out["w_out"] = sum(worsts) / T
        forg = []
        for t in range(1, T + 1):
            for d in S:
                hist = [tensor.get(t, d, i) for i in range(t, T + 1)]
                forg.append(max(hist) - hist[-1])
        out["f_all"] = sum(forg) / (T * len(S))
        if tensor.unseen_domain is not None:
            u = tensor.unseen_domain
            out["a_un"] = sum(final[(t, u)] for t in range(1, T + 1)) / T
            fu = []
            for t in range(1, T + 1):
                hist = [tensor.get(t, u, i) for i in range(t, T + 1)]
                fu.append(max(hist) - hist[-1])
            out["f_un"] = sum(fu) / T
        return out

    def test_thousand_random_tensors_and_hand_case(self):
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(1000):
            T = int(rng.integers(1, 6))
            D = int(rng.integers(2, 5))
            unseen = D if rng.integers(2) else None
            tensor = met.AccuracyTensor(
                T, list(range(D)),
                [int(rng.integers(D)) for _ in range(T)], unseen,
            )
            cols = list(range(D)) + ([unseen] if unseen is not None else [])
            for t in range(1, T + 1):
                for d in cols:
                    for i in range(t, T + 1):
                        tensor.record(t, d, i, float(rng.random()))
            got = met.compute_all(tensor)
            want = self.reference(tensor)
            assert set(got) == set(want)
            worst = max(worst, max(abs(got[k] - want[k]) for k in want))
        hand = met.AccuracyTensor(2, [0, 1], [0, 1])
        for t, d, i, a in [(1, 0, 1, 0.9), (1, 1, 1, 0.6), (1, 0, 2, 0.8),
                           (1, 1, 2, 0.5), (2, 0, 2, 0.6), (2, 1, 2, 0.9)]:
            hand.record(t, d, i, a)
        hand_ok = (
            abs(met.a_all(hand) - 0.70) <= 1e-12
            and abs(met.a_in(hand) - 0.85) <= 1e-12
            and abs(met.a_out(hand) - 0.55) <= 1e-12
        )
        emit(
            "metrics oracle",
            worst <= 1e-12 and hand_ok,
            f"worst deviation {worst:.2e} (<=1e-12) on 1000 tensors, "
            f"hand case 0.70/0.85/0.55 {'ok' if hand_ok else 'WRONG'}",
        )


class TestDistributionFidelity:
    def test_sampling_recovers_moments(self):
        start = time.time()
        rng = np.random.default_rng(13)
        m = 6
        true_cov = 0.9 ** np.abs(np.subtract.outer(np.arange(m), np.arange(m)))
        chol = np.linalg.cholesky(true_cov)
        data = 5.0 + rng.standard_normal((4000, m)) @ chol.T

        g_full = dist.fit_class_gaussian(data, 0, mode="full")
        draws = dist.sample_class(g_full, 100_000, np.random.default_rng(17))
        mu_err = float(np.max(np.abs(draws.mean(axis=0) - g_full.mean) / np.abs(g_full.mean)))
        cov_err = float(np.max(np.abs(np.cov(draws, rowvar=False) - g_full.cov) / np.abs(g_full.cov)))

        g_diag = dist.fit_class_gaussian(data, 0, mode="diagonal")
        draws_d = dist.sample_class(g_diag, 100_000, np.random.default_rng(19))
        var_err = float(np.max(np.abs(draws_d.var(axis=0, ddof=1) - g_diag.cov) / g_diag.cov))
        mu_err_d = float(np.max(np.abs(draws_d.mean(axis=0) - g_diag.mean) / np.abs(g_diag.mean)))
        elapsed = time.time() - start
        emit(
            "distribution fidelity",
            mu_err < 0.01 and cov_err < 0.05 and mu_err_d < 0.01 and var_err < 0.05
            and elapsed < 30.0,
            f"full: mu {100*mu_err:.3f}% (<1%), cov {100*cov_err:.2f}% (<5%); "
            f"diagonal: mu {100*mu_err_d:.3f}%, var {100*var_err:.2f}%; "
            f"{elapsed:.1f}s (<30s)",
        )


class TestHeadlineGain:
    def test_out_domain_gain(self, default_bank, baseline_runs, default_runs):
        start = time.time()
        _, _ = run_episode(default_bank, EpisodeConfig(seed=0))
        per_seed_time = time.time() - start
        out_gain = default_runs["a_out"] - baseline_runs["a_out"]
        in_loss = baseline_runs["a_in"] - default_runs["a_in"]
        emit(
            "headline out-domain gain",
            out_gain >= 0.05 and in_loss < 0.02 and per_seed_time < 180.0,
            f"a_out gain {100*out_gain:+.2f} pts (>=5), "
            f"a_in loss {100*in_loss:+.2f} pts (<2), "
            f"{per_seed_time:.0f}s/seed (<180s)",
        )


class TestUnseenDomain:
    def test_heldout_domain_gain(self):
        bank = generate(SynthConfig(unseen_domain=True))
        base = mean_metrics(bank, no_dot=True)
        dot = mean_metrics(bank)
        un_gain = dot["a_un"] - base["a_un"]
        f_gap = abs(dot["f_all"] - base["f_all"])
        emit(
            "unseen-domain generalization",
            un_gain >= 0.03 and f_gap <= 0.03,
            f"a_un gain {100*un_gain:+.2f} pts (>=3), "
            f"forgetting gap {100*f_gap:.2f} pts (<=3)",
        )


class TestHyperparameterRobustness:
    def test_grid_stability(self, default_bank, baseline_runs, default_runs):
        points = {"default": default_runs["a_all"]}
        for param, vals in [("e_dot", (4, 20)), ("k_prototypes", (2, 32)),
                            ("lam", (0.3, 0.7))]:
            for v in vals:
                points[f"{param}={v}"] = mean_metrics(default_bank, **{param: v})["a_all"]
        spread = max(points.values()) - min(points.values())
        min_gain = min(points.values()) - baseline_runs["a_all"]
        detail = ", ".join(f"{k} {100*(v - baseline_runs['a_all']):+.1f}" for k, v in points.items())
        emit(
            "hyperparameter robustness",
            spread < 0.05 and min_gain > 0,
            f"a_all spread {100*spread:.2f} pts (<5), weakest point "
            f"{100*min_gain:+.2f} pts above baseline (>0); gains: {detail}",
        )


class TestParameterCost:
    def test_storage_accounting(self):
        m, classes = 768, 10
        rng = np.random.default_rng(0)
        data = rng.standard_normal((20, m))
        diag = [dist.fit_class_gaussian(data, c, mode="diagonal") for c in range(classes)]
        full = [dist.fit_class_gaussian(data, c, mode="full") for c in range(classes)]
        diag_per_class = dist.semantic_store_floats(diag) // classes
        full_per_class = dist.semantic_store_floats(full) // classes
        emit(
            "parameter cost accounting",
            diag_per_class == 2 * 768 and full_per_class == 768 + 768**2,
            f"per class: diagonal {diag_per_class} (= 2*768), "
            f"full {full_per_class} (= 768 + 768^2)",
        )


class TestDeterminism:
    def test_repeated_run_byte_identical(self, tmp_path):
        from dotengine import cli

        cfg = dict(classes=6, domains=3, tasks=3, m=16, layers=4,
                   train_per_class=8, test_per_class=4, seed=0)
        import json

        (tmp_path / "synth.json").write_text(json.dumps(cfg))
        bank = tmp_path / "bank.dgfb"
        assert cli.main(["gen-synth", "--out", str(bank),
                         "--config", str(tmp_path / "synth.json")]) == 0
        args = ["run", "--bank", str(bank), "--out", str(tmp_path / "run"),
                "--e-dot", "3", "--e-oa", "2", "--k-prototypes", "4",
                "--phase1-epochs", "10", "--seeds", "0,1"]
        assert cli.main(args) == 0
        artifacts = ["tensor_seed0.json", "tensor_seed1.json", "report.json", "report.txt"]
        first = {a: (tmp_path / "run" / a).read_bytes() for a in artifacts}
        assert cli.main(args) == 0
        second = {a: (tmp_path / "run" / a).read_bytes() for a in artifacts}
        identical = all(first[a] == second[a] for a in artifacts)
        emit(
            "determinism",
            identical,
            f"{len(artifacts)} artifacts byte-identical across repeated runs"
            if identical else "artifacts differ across repeated runs",
        )


class TestExporterRoundTrip:
    def test_ten_image_export_feeds_engine(self, tmp_path):
        torch = pytest.importorskip("torch")
        from PIL import Image

        from dotengine.featurebank import read_bank
        from ptm_exporter.export import ExportSpec, export

        rng = np.random.default_rng(0)
        img_dir = tmp_path / "images"
        img_dir.mkdir()
        rows = ["path,class,domain,split"]
        layout = [
            (0, 0, "train"), (0, 0, "train"), (1, 1, "train"), (1, 1, "train"),
            (0, 0, "test"), (0, 1, "test"), (1, 0, "test"), (1, 1, "test"),
            (0, 1, "test"), (1, 0, "test"),
        ]
        for i, (c, d, split) in enumerate(layout):
            arr = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
            name = f"img{i}.png"
            Image.fromarray(arr).save(img_dir / name)
            rows.append(f"images/{name},{c},{d},{split}")
        (tmp_path / "manifest.csv").write_text("\n".join(rows) + "\n")
        spec = ExportSpec(
            manifest=str(tmp_path / "manifest.csv"),
            out=str(tmp_path / "bank.dgfb"),
            task_assignment=[
                {"task": 1, "classes": [0], "domain": 0},
                {"task": 2, "classes": [1], "domain": 1},
            ],
            weights="random",
            seed=0,
        )
        export(spec)
        bank = read_bank(spec.out)
        dims_ok = bank.num_layers == 12 and bank.m == 768
        _, tensor = run_episode(
            bank,
            EpisodeConfig(no_dot=True, e_oa=1, k_prototypes=2,
                          phase1_epochs=5, align_samples=1),
        )
        evaluated = np.isfinite(met.a_all(tensor))
        first = (tmp_path / "bank.dgfb").read_bytes()
        export(spec)
        identical = (tmp_path / "bank.dgfb").read_bytes() == first
        emit(
            "exporter round trip",
            dims_ok and evaluated and identical,
            f"bank L={bank.num_layers} m={bank.m} (12/768), engine evaluated "
            f"{len(bank.records)} records, re-export byte-identical: {identical}",
        )
