"""Acceptance criteria, one test per criterion, each printing a verdict line.

The training-based criteria share module-scoped runs on the default model:
512 synthetic training samples (seed 1) and 128 test samples (seed 2),
2000 steps of batch 32 for every method.
"""

import copy

import numpy as np
import pytest

from vgpeft import tensor as T
from vgpeft.cli import main
from vgpeft.data import SyntheticSpec, generate_synthetic
from vgpeft.gradcheck import finite_diff_check
from vgpeft.metrics import BBox, PairRecord, iou, report
from vgpeft.model import ModelConfig, build_model, pad_tokens
from vgpeft.peft import PeftSpec, efficiency, inject, merge_lora, placement_sweep
from vgpeft.tensor import Parameter
from vgpeft.train import TrainConfig, box_loss, evaluate, frozen_checksum, train

from conftest import ACCEPTANCE, TABLE_PLACEMENTS, random_inputs, spec_for

TINY = ModelConfig(d_model=16, n_heads=2, ffn_dim=32)
METHODS = ("lora", "adapter", "bitfit")
CHAIN = [{"image"}, {"image", "decoder"}, {"text", "image", "decoder"}]

# Adam step sizes for the 2000-step runs; the other settings are shared
LR = {"lora": 2e-3, "adapter": 5e-3, "bitfit": 5e-3}
STEPS, BATCH = 2000, 32


def verdict(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


@pytest.fixture(scope="module")
def splits():
    train_set = generate_synthetic(SyntheticSpec(n_samples=512, seed=1))
    test_set = generate_synthetic(SyntheticSpec(n_samples=128, seed=2))
    return train_set, test_set


@pytest.fixture(scope="module")
def runs(splits):
    """Lazily trained (model, log) per method on the shared splits."""
    train_set, test_set = splits
    cache = {}

    def get(method):
        if method not in cache:
            model = inject(build_model(ModelConfig()), spec_for(method, frozenset(CHAIN[-1])))
            cfg = TrainConfig(steps=STEPS, batch_size=BATCH, lr=LR[method])
            log = train(model, train_set, cfg, eval_data=test_set)
            cache[method] = model, log
        return cache[method]

    return get


class TestCriteria:
    def test_01_efficiency_formula(self):
        a = f"{efficiency(70656, 182_000_000):.2f}"
        b = f"{efficiency(326, 10_000):.2f}"
        assert verdict(1, (a, b) == ("99.96", "96.74"), f"efficiency strings {a} and {b}")

    @pytest.mark.slow
    def test_02_merge_equivalence(self, splits):
        model = inject(build_model(ModelConfig()), PeftSpec.lora(rank=4))
        train(model, splits[0], TrainConfig(steps=500, batch_size=BATCH, lr=LR["lora"]))
        patches, tokens = random_inputs(model.config, 100, seed=21)
        adapted = model.predict_batch(patches, tokens)
        merged = merge_lora(copy.deepcopy(model)).predict_batch(patches, tokens)
        gap = float(np.max(np.abs(merged - adapted)))
        assert verdict(2, gap <= 1e-9, f"max |merged - adapted| = {gap:.2e} after 500 steps")

    def test_03_freeze_invariance(self, synth_train):
        changed = []
        for method in METHODS:
            for placement in TABLE_PLACEMENTS:
                model = inject(build_model(TINY), spec_for(method, placement))
                before = frozen_checksum(model)
                log = train(model, synth_train, TrainConfig(steps=100, batch_size=8, lr=1e-2))
                if frozen_checksum(model) != before or log.frozen_checksum_after != before:
                    changed.append((method, sorted(placement)))
        assert verdict(3, not changed, f"frozen hash unchanged in {12 - len(changed)}/12 runs")

    def test_04_injection_transparency(self, config):
        patches, tokens = random_inputs(config, 50, seed=4)
        base = build_model(config).predict_batch(patches, tokens)
        equal = 0
        for method in METHODS:
            for placement in TABLE_PLACEMENTS:
                out = inject(build_model(config), spec_for(method, placement)).predict_batch(patches, tokens)
                equal += bool(np.array_equal(out, base))
        assert verdict(4, equal == 12, f"bit-identical outputs in {equal}/12 injections")

    def test_05_gradient_checks(self, small_config):
        rng = np.random.default_rng(0)
        R = {}

        def proj(out):
            if out.shape not in R:
                R[out.shape] = np.random.default_rng(99).standard_normal(out.shape)
            return T.sum(T.mul(out, R[out.shape]))

        def p(*shape, low=-1.0, high=1.0, kind="weight"):
            return Parameter(rng.uniform(low, high, shape), kind=kind)

        signs = lambda n: rng.uniform(0.2, 1.0, n) * rng.choice([-1, 1], n)  # noqa: E731
        a, b = p(3, 4), p(4)
        pos = p(3, 4, low=0.5, high=2.0)
        bias = p(4, kind="bias")
        s = Parameter(signs(8))
        m = Parameter(s.data + signs(8))
        u = p(8, low=0.1, high=0.9)
        b3, w = p(2, 3, 4), p(4, 5)
        table, ids = p(6, 4), np.array([[1, 3, 3], [5, 0, 1]])
        g, beta = p(4), p(4, kind="bias")
        cond = rng.random(8) > 0.5
        cases = {
            "add/sub": (lambda: proj(T.add(a, b) * T.sub(b, a)), [a, b]),
            "mul/div": (lambda: proj(T.div(T.mul(a, b), pos)), [a, b, pos]),
            "bias_add": (lambda: proj(T.bias_add(b3, bias)), [b3, bias]),
            "square/abs/relu": (lambda: proj(T.square(s) + T.absolute(s) + T.relu(s)), [s]),
            "min/max/where": (lambda: proj(T.minimum(s, m) + 2.0 * T.maximum(s, m) + T.where(cond, s, m)),
                              [s, m]),
            "sigmoid/exp/tanh/gelu": (lambda: proj(T.sigmoid(a) + T.exp(a) + T.tanh(a) + T.gelu(a)), [a]),
            "log/logit": (lambda: proj(T.log(u) + T.logit(u)), [u]),
            "matmul": (lambda: proj(T.matmul(b3, w)), [b3, w]),
            "transpose/reshape/concat": (
                lambda: proj(T.concat([T.reshape(T.swapaxes(T.transpose(b3, (1, 0, 2)), 0, 2), (4, 6)),
                                       T.reshape(a, (4, 3))], axis=1)), [b3, a]),
            "index/embedding": (lambda: proj(b3[np.array([0, 1, 1])]) + proj(T.embedding(table, ids)),
                                [b3, table]),
            "sum/mean": (lambda: proj(T.sum(a, axis=0)) + proj(T.mean(a, axis=1, keepdims=True)), [a]),
            "softmax": (lambda: proj(T.softmax(a, axis=-1)), [a]),
            "layer_norm": (lambda: proj(T.layer_norm(a, g, beta)), [a, g, beta]),
        }
        errors = {k: finite_diff_check(f, ps, h=1e-5, n_coords=64) for k, (f, ps) in cases.items()}

        batch_rng = np.random.default_rng(5)
        cfg = small_config
        patches, tokens = random_inputs(cfg, 3, seed=6)
        ids_b, mask = pad_tokens(tokens)
        targets = batch_rng.uniform(0.2, 0.6, (3, 4))
        for method, spec in (("LoRA A/B", PeftSpec.lora(rank=2)), ("adapter", PeftSpec.adapter()),
                             ("biases", PeftSpec.bitfit()), ("composite loss", None)):
            model = build_model(cfg)
            if spec is not None:
                inject(model, spec)
                for q in model.parameters():
                    if q.trainable:
                        q.data += batch_rng.standard_normal(q.shape) * 0.1
            params = [q for q in model.parameters() if q.trainable]
            f = lambda: box_loss(model.forward(patches, ids_b, mask), targets)  # noqa: E731
            errors[method] = finite_diff_check(f, params, h=1e-5, n_coords=64)
        worst = max(errors, key=errors.get)
        ok = errors[worst] < 1e-4
        assert verdict(5, ok, f"{len(errors)} checks, worst {worst} rel err {errors[worst]:.1e}")

    def test_06_metric_oracle(self):
        rng = np.random.default_rng(2024)
        exact = 0
        for _ in range(1000):
            boxes = []
            for _ in range(2):
                x0, x1 = sorted(rng.choice(65, 2, replace=False))
                y0, y1 = sorted(rng.choice(65, 2, replace=False))
                boxes.append((x0, y0, x1, y1))
            grids = []
            for x0, y0, x1, y1 in boxes:
                grid = np.zeros((64, 64), dtype=bool)
                grid[y0:y1, x0:x1] = True
                grids.append(grid)
            oracle = (grids[0] & grids[1]).sum() / (grids[0] | grids[1]).sum()
            exact += iou(BBox(*map(float, boxes[0])), BBox(*map(float, boxes[1]))) == oracle
        rep = report([PairRecord("a", "i", "q", BBox(0, 0, 10, 10), BBox(5, 5, 15, 15)),
                      PairRecord("b", "i", "q", BBox(20, 20, 30, 30), BBox(20, 20, 30, 30))])
        row = f"{rep.pr_at[0.5]:.2f}/{rep.mean_iou:.2f}/{rep.cum_iou:.2f}"
        ok = exact == 1000 and row == "50.00/57.14/45.45"
        assert verdict(6, ok, f"raster oracle exact on {exact}/1000 pairs; worked example {row}")

    def test_07_placement_monotonicity(self, config):
        model = build_model(config)
        chains = {m: [r.efficiency for r in placement_sweep(model, spec_for(m, CHAIN[-1]), CHAIN)]
                  for m in METHODS}
        ok = all(e[0] >= e[1] >= e[2] for e in chains.values())
        detail = "; ".join(f"{m} " + " >= ".join(f"{v:.2f}" for v in e) for m, e in chains.items())
        assert verdict(7, ok, detail)

    @pytest.mark.slow
    def test_08_learning_smoke(self, splits, runs):
        _, test_set = splits
        baseline = evaluate(build_model(ModelConfig()), test_set).pr_at[0.5]
        _, log = runs("lora")
        final = log.evals[-1][1].pr_at[0.5]
        first, last = np.mean(log.losses[:20]), np.mean(log.losses[-20:])
        ok = baseline < 20 and final >= 80 and last < 0.5 * first and log.wall_time <= 300
        assert verdict(8, ok, f"LoRA r=4 Pr@0.5 {baseline:.1f} -> {final:.1f}, loss {first:.3f} -> "
                              f"{last:.3f}, {log.wall_time:.0f}s")

    @pytest.mark.slow
    def test_09_capacity_ordering(self, runs):
        pr = {m: runs(m)[1].evals[-1][1].pr_at[0.5] for m in METHODS}
        ok = pr["adapter"] > pr["bitfit"] and pr["lora"] > pr["bitfit"]
        assert verdict(9, ok, "Pr@0.5 " + ", ".join(f"{m} {v:.1f}" for m, v in pr.items()))

    @pytest.mark.slow
    def test_10_determinism(self, tmp_path):
        reports = []
        for run in ("a", "b"):
            d = tmp_path / run
            d.mkdir()
            assert main(["synth", "--n", "128", "--seed", "1", "--out", str(d / "train.jsonl")]) == 0
            assert main(["synth", "--n", "64", "--seed", "2", "--out", str(d / "test.jsonl")]) == 0
            assert main(["train", "--data", str(d / "train.jsonl"), "--method", "lora", "--rank", "4",
                         "--steps", "100", "--out-dir", str(d / "run")]) == 0
            assert main(["eval", "--checkpoint", str(d / "run" / "final.ckpt"),
                         "--data", str(d / "test.jsonl"), "--report-out", str(d / "report")]) == 0
            reports.append([(d / f"report{s}").read_bytes() for s in (".json", ".txt")])
        ok = reports[0] == reports[1]
        assert verdict(10, ok, "two synth/train/eval runs give byte-identical reports" if ok
                       else "reports differ between runs")
