"""Acceptance criteria 1-10, one PASS/FAIL line each.

Run with ``pytest -v tests/test_acceptance.py`` (about six minutes on one core)
or directly with ``python3 tests/test_acceptance.py``.
"""

import json
import math
import sys
from pathlib import Path

import numpy as np
import pytest

from stochlab import counters
from stochlab.analysis import cosine_similarity_report, grad_check, op_counter
from stochlab.attention import AttentionParams, multi_head_attention, scaled_dot_attention
from stochlab.baselines import BaselineKind, ftca_train_step, ft_train_step, inference_logits
from stochlab.cli import main as cli_main
from stochlab.datagen import AccessLog
from stochlab.harness import (
    ALL_METHODS,
    TABLE1_RATES,
    RunConfig,
    pretrain_from_config,
    run_dg,
    run_similarity,
    run_transfer,
    target_dataset,
)
from stochlab.optim import AdamW, OptimConfig
from stochlab.stochca import GateSchedule, extract_kv, infer, stochca_forward
from stochlab.tensor import Tensor
from stochlab.training import MethodParams, fit
from stochlab.vit import ViTConfig, ViTModel, replace_classifier

from test_attention import loop_attention
from test_harness import SMALL


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, f"criterion {n}: {detail}"
    return emit


@pytest.fixture(scope="module")
def toy():
    cfg = RunConfig()
    return cfg, pretrain_from_config(cfg)


@pytest.fixture(scope="module")
def tiny_pair():
    cfg = ViTConfig(image_size=12, patch_size=4, depth=2, dim=8, heads=2, num_classes=3, init_std=0.3)
    frozen = ViTModel.init(cfg, seed=0).freeze()
    target = replace_classifier(frozen, 3, seed=1)
    rng = np.random.default_rng(9)
    for name, t in target.params.items():
        if not name.startswith("head."):
            t.data += rng.normal(scale=0.05, size=t.shape)
    return target, frozen, rng.normal(size=(3, 3, 12, 12))


def test_criterion_01_kernel_oracle(verdict):
    rng = np.random.default_rng(0)
    worst, cases = 0.0, 0
    for _ in range(100):
        n, m = (int(v) for v in rng.integers(1, 9, size=2))
        dh = int(rng.integers(1, 17))
        x, y, v = rng.normal(size=(n, dh)), rng.normal(size=(m, dh)), rng.normal(size=(m, dh))
        sa = scaled_dot_attention(Tensor(x), Tensor(x), Tensor(x)).data
        ca = scaled_dot_attention(Tensor(x), Tensor(y), Tensor(v)).data
        worst = max(worst, np.abs(sa - loop_attention(x, x, x)).max(), np.abs(ca - loop_attention(x, y, v)).max())
        cases += 2
    # the multi-head entry point, SA and CA, with one head so the oracle applies directly
    for _ in range(50):
        n, d = int(rng.integers(1, 9)), int(rng.integers(1, 17))
        p = AttentionParams(*(Tensor(rng.normal(size=(d, d)) / math.sqrt(d)) for _ in range(4)), heads=1)
        x, kf, vf = (rng.normal(size=(n, d)) for _ in range(3))
        wq, wk, wv, wo = (t.data for t in (p.w_q, p.w_k, p.w_v, p.w_o))
        sa = multi_head_attention(Tensor(x), p).data
        ca = multi_head_attention(Tensor(x), p, (kf, vf)).data
        worst = max(worst, np.abs(sa - loop_attention(x @ wq, x @ wk, x @ wv) @ wo).max(),
                    np.abs(ca - loop_attention(x @ wq, kf, vf) @ wo).max())
        cases += 2
    verdict(1, cases >= 100 and worst <= 1e-12, f"{cases} cases, max abs diff {worst:.2e} <= 1e-12")


def test_criterion_02_gradient_check(verdict, tiny_pair):
    target, frozen, images = tiny_pair
    assert (target.config.depth, target.config.dim, target.config.heads) == (2, 8, 2)
    labels = [0, 1, 2]
    cache = extract_kv(frozen, images)
    results = {"SA,SA": grad_check(target, images, labels, step=1e-6, n_params=200, raise_on_fail=False)}
    for gates in ([True, False], [False, True], [True, True]):
        key = ",".join("CA" if g else "SA" for g in gates)
        results[key] = grad_check(target, images, labels, step=1e-6, n_params=200, gates=gates,
                                  cache=cache, raise_on_fail=False)
    worst = max(r.max_rel_error for r in results.values())
    detail = ", ".join(f"{k}: {r.max_rel_error:.1e}" for k, r in results.items())
    verdict(2, worst <= 1e-5, f"max rel error {worst:.2e} <= 1e-5; {detail}")


def test_criterion_03_reductions(verdict, toy):
    cfg, frozen = toy
    x, y = target_dataset(cfg).take("train")
    a = replace_classifier(frozen, 6, 5)
    b = replace_classifier(frozen, 6, 5)
    la = fit(BaselineKind.FT, a, frozen, x, y, cfg.optim, seed=4)
    lb = fit(BaselineKind.STOCHCA, b, frozen, x, y, cfg.optim, seed=4, method=MethodParams(p=0.0))
    same_training = la == lb and a.param_hash() == b.param_hash()

    init = frozen.copy()
    imgs = x[:16]
    cache = extract_kv(frozen, imgs)
    depth = cfg.model.depth
    all_ca = stochca_forward(init, cache, np.ones(depth, bool), imgs).data
    all_sa = stochca_forward(init, None, np.zeros(depth, bool), imgs).data
    same_forward = np.array_equal(all_ca, all_sa)

    c = op_counter(lambda: infer(b, imgs))
    untouched = c[counters.FROZEN_FORWARD] == 0 and c[counters.FROZEN_ATTENTION] == 0
    ok = same_training and same_forward and untouched
    verdict(3, ok, f"p=0 == FT bitwise: {same_training}; all-CA == all-SA at init: {same_forward}; "
                   f"frozen calls at inference: {c[counters.FROZEN_FORWARD]}")


def test_criterion_04_gate_statistics(verdict):
    lines, ok = [], True
    for p in (0.1, 0.3, 0.5, 0.7):
        sched = GateSchedule(p, seed=2024, depth=10)
        for _ in range(1000):
            sched.next(16)
        n = sum(d.size for d in sched.draws)
        freq = sched.ca_frequency()
        half = 3 * math.sqrt(p * (1 - p) / n)
        lo, hi = (0.09, 0.11) if p == 0.1 else (p - half, p + half)
        ok &= n >= 10_000 and lo <= freq <= hi
        lines.append(f"p={p}: {freq:.4f} in [{lo:.4f}, {hi:.4f}]")
    verdict(4, ok, "; ".join(lines) + " over 10000 layer draws")


def test_criterion_05_frozen_immutable(verdict):
    cfg = RunConfig.from_dict(SMALL)
    frozen = pretrain_from_config(cfg)
    x, y = target_dataset(cfg).take("train")
    before = frozen.param_hash()
    optim = OptimConfig(lr=1e-2, warmup_steps=10, total_steps=500, batch_size=8)
    hashes = {}
    for kind, mp in ((BaselineKind.FT, None), (BaselineKind.STOCHCA, MethodParams(p=0.5)),
                     (BaselineKind.L2REG, MethodParams(lam=1.0)), (BaselineKind.FTCA, None)):
        target = replace_classifier(frozen, 6, 0)
        fit(kind, target, frozen, x, y, optim, seed=0, method=mp)
        hashes[kind.label] = frozen.param_hash()
    ok = all(h == before for h in hashes.values())
    verdict(5, ok, f"hash {before[:12]} unchanged after 500 steps of each of {', '.join(hashes)}")


@pytest.mark.slow
def test_criterion_06_directional_transfer(verdict, toy, tmp_path):
    cfg, frozen = toy
    cfg = RunConfig.from_dict({**cfg.to_dict(), "rates": list(TABLE1_RATES)})
    report = run_transfer(cfg, frozen, ALL_METHODS)
    paths = report.write(tmp_path)
    print(report.to_text())
    ft = report.cell("FT", "15%").mean
    st = report.cell("StochCA", "15%")
    header = paths["csv"].read_text().splitlines()[0]
    full_grid = header == "Method,15%,30%,50%,100%" and list(report.rows) == [
        "FT", "StochCA", "L2-Reg", "FT+CA", "FT+CA (only SA)"]
    ok = len(cfg.seeds) >= 5 and full_grid and st.mean >= ft
    verdict(6, ok, f"15%: StochCA (p={st.selected['p']} by val) {100 * st.mean:.2f} vs FT {100 * ft:.2f} "
                   f"over {len(cfg.seeds)} seeds; 4x5 grid emitted: {full_grid}")


@pytest.mark.slow
def test_criterion_07_similarity_ordering(verdict, toy, tmp_path):
    cfg, frozen = toy
    report = run_similarity(cfg, frozen, tmp_path)
    avg = {k: r.avg for k, r in report.similarity.items()}
    ordered = all(avg["FT"][c] <= avg["StochCA"][c] <= avg["L2-Reg"][c] for c in "qkv")
    imgs = target_dataset(cfg).take("test")[0][:32]
    self_rep = cosine_similarity_report(frozen, frozen, imgs)
    self_one = all(v == 1.0 for row in self_rep.layers for v in row.values())
    cols = "; ".join(f"{c.upper()}: " + " / ".join(f"{avg[m][c]:.3f}" for m in ("FT", "StochCA", "L2-Reg"))
                     for c in "qkv")
    verdict(7, ordered and self_one, f"FT / StochCA / L2-Reg {cols}; self-similarity exactly 1: {self_one}")


def test_criterion_08_dg_integrity(verdict, toy):
    cfg, frozen = toy
    cfg = RunConfig.from_dict({**cfg.to_dict(), "seeds": [0, 1]})
    access = AccessLog()
    report = run_dg(cfg, frozen, ("ft", "stochca"), access)
    domains = list(cfg.data.dg_domains)
    leaks, late = {}, {}
    for d in domains:
        fold = access.in_context(d)
        leaks[d] = [e for e in fold if e[0] == d and e[2] != "test"]
        first_test = next(i for i, e in enumerate(fold) if e[0] == d)
        late[d] = [e for e in fold[first_test:] if e[0] != d]
        assert all(e[2] == "test" for e in fold[first_test:])
    isolated = not any(leaks.values()) and not any(late.values())
    header = report.to_csv().splitlines()[0]
    layout = (header == "Method," + ",".join(domains) + ",Avg." and report.columns == domains
              and all(len(cells) == 3 for cells in report.rows.values()))
    ok = len(domains) == 3 and isolated and layout
    n_leaks = sum(map(len, leaks.values()))
    verdict(8, ok, f"3 folds ran; held-out reads during train/select: {n_leaks}; "
                   f"source reads after testing began: {sum(map(len, late.values()))}; layout {header}")


def test_criterion_09_cost_accounting(verdict, toy):
    cfg, frozen = toy
    x, y = target_dataset(cfg).take("train")
    xb, yb = x[:16], y[:16]
    L = cfg.model.depth
    target = replace_classifier(frozen, 6, 0)
    opt = AdamW(cfg.optim)
    ft = op_counter(lambda: ft_train_step(target, (xb, yb), opt))
    ftca = op_counter(lambda: ftca_train_step(target, frozen, (xb, yb), opt))
    ft_inf = op_counter(lambda: inference_logits(BaselineKind.FT, target, None, xb))
    st_inf = op_counter(lambda: inference_logits(BaselineKind.STOCHCA, target, frozen, xb))
    per_ft = ft[counters.TARGET_ATTENTION] / 16
    per_ftca = ftca[counters.TARGET_ATTENTION] / 16
    ok = per_ft == L and per_ftca == 2 * L and ft_inf == st_inf
    verdict(9, ok, f"target attention per image: FT {per_ft:g}, FT+CA {per_ftca:g} (L={L}); "
                   f"StochCA inference counts == FT: {ft_inf == st_inf}")


def _tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "timing.json"}


def test_criterion_10_cli_reproducible(verdict, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(SMALL))
    base = ["--config", str(cfg)]
    assert cli_main(["pretrain", *base, "--out", str(tmp_path / "pre")]) == 0
    ckpt = str(tmp_path / "pre" / "frozen")
    commands = {
        "pretrain": ["pretrain", *base],
        "train": ["train", *base, "--checkpoint", ckpt, "--methods", "all", "--rates", "0.5,1.0",
                  "--save-models"],
        "sweep": ["sweep", *base, "--checkpoint", ckpt, "--grid", "0.1,0.5"],
        "dg": ["dg", *base, "--checkpoint", ckpt, "--methods", "ft,stochca"],
        "analyze": ["analyze", *base, "--checkpoint", ckpt],
    }
    results = {}
    for name, argv in commands.items():
        trees = []
        for i in range(2):
            out = tmp_path / f"{name}{i}"
            assert cli_main(argv + ["--out", str(out)]) == 0
            trees.append(_tree(out))
        results[name] = trees[0] == trees[1] and len(trees[0]) >= 3
    model = tmp_path / "train0" / "models" / "stochca_s0"
    evals = []
    for i in range(2):
        out = tmp_path / f"eval{i}"
        assert cli_main(["eval", *base, "--checkpoint", ckpt, "--model", str(model), "--out", str(out)]) == 0
        evals.append(_tree(out))
    results["eval"] = evals[0] == evals[1]
    verdict(10, all(results.values()), ", ".join(f"{k}: {'identical' if v else 'DIFFERENT'}"
                                                  for k, v in results.items()))


if __name__ == "__main__":
    sys.exit(pytest.main(["-v", __file__]))
