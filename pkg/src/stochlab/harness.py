"""Experiment protocols: transfer learning over sampling rates, leave-one-domain-out
domain generalization, and the cross-attention probability sweep.

Every protocol selects method hyperparameters on validation data only; test
data is read once per trained model, after selection. Reads go through an
:class:`~stochlab.datagen.AccessLog` so isolation can be audited.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, counters
from .baselines import BaselineKind
from .checkpoint import load_model
from .datagen import (
    DEFAULT_DOMAINS,
    SOURCE_CLASSES,
    TARGET_CLASSES,
    AccessLog,
    DomainSpec,
    LabeledDataset,
    concat_datasets,
    generate_domain,
    pretrain_toy,
    source_dataset,
    subsample,
)
from .optim import OptimConfig
from .tensor import ContractError
from .training import MethodParams, accuracy, derive_seed, fit
from .vit import ConfigError, ViTConfig, ViTModel, replace_classifier

log = logging.getLogger(__name__)

TABLE1_RATES = (0.15, 0.30, 0.50, 1.00)
P_GRID = (0.1, 0.3, 0.5, 0.7)
ALL_METHODS = ("ft", "stochca", "l2reg", "ftca", "ftca_onlysa")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DataConfig:
    target_domain: str = "target"
    target_classes: tuple[str, ...] = TARGET_CLASSES
    n_per_class: int = 100
    test_fraction: float = 0.3
    val_fraction: float = 0.1  # of the non-test part
    data_seed: int = 7
    dg_domains: tuple[str, ...] = ("photo", "art", "cartoon")
    dg_n_per_class: int = 40
    dg_val_fraction: float = 0.2

    def tl_fractions(self) -> tuple[float, float, float]:
        rest = 1.0 - self.test_fraction
        return (rest * (1 - self.val_fraction), rest * self.val_fraction, self.test_fraction)


@dataclass
class PretrainConfig:
    source_n_per_class: int = 60
    steps: int = 800
    seed: int = 0
    lr: float = 5e-3
    weight_decay: float = 0.05
    warmup_steps: int = 30
    batch_size: int = 32


def default_model() -> ViTConfig:
    return ViTConfig(depth=3, dim=32, heads=4, mlp_ratio=2, num_classes=len(SOURCE_CLASSES), init_std=0.1)


def default_optim() -> OptimConfig:
    return OptimConfig(lr=5e-4, weight_decay=0.01, warmup_steps=10, total_steps=150, batch_size=16)


@dataclass
class RunConfig:
    protocol: str = "TL"  # TL | DG | ablation
    method: str = "stochca"
    p: float = 0.1
    p_grid: tuple[float, ...] = P_GRID
    lam: float = 0.1
    lam_grid: tuple[float, ...] = (0.01, 0.1, 1.0)
    per_sample_gates: bool = False
    ftca_loss: str = "logits"
    sampling_rate: float = 0.15
    rates: tuple[float, ...] = ()  # empty: just sampling_rate
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    selection_seeds: tuple[int, ...] = (0,)
    val_every: int = 0
    optim: OptimConfig = field(default_factory=default_optim)
    model: ViTConfig = field(default_factory=default_model)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    checkpoint: str | None = None

    def __post_init__(self):
        self.kind  # validates method
        if self.protocol not in ("TL", "DG", "ablation"):
            raise ConfigError(f"protocol: unknown value {self.protocol!r}")
        if not 0.0 <= self.p <= 1.0 or any(not 0.0 <= q <= 1.0 for q in self.p_grid):
            raise ConfigError("p: probabilities must lie in [0, 1]")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed is required")
        if self.ftca_loss not in ("logits", "losses"):
            raise ConfigError(f"ftca_loss: unknown value {self.ftca_loss!r}")

    def rate_grid(self) -> tuple[float, ...]:
        return tuple(self.rates) or (self.sampling_rate,)

    @property
    def kind(self) -> BaselineKind:
        try:
            return BaselineKind.parse(self.method)
        except ValueError as exc:
            raise ConfigError(f"method: {exc}") from None

    def to_dict(self) -> dict:
        return _jsonable(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data, "")


_NESTED = {"optim": OptimConfig, "model": ViTConfig, "data": DataConfig, "pretrain": PretrainConfig}


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key {path}{unknown[0]!r}")
    kwargs = {}
    for key, value in data.items():
        if key in _NESTED and cls is RunConfig:
            kwargs[key] = _build(_NESTED[key], value, f"{path}{key}.")
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


# ---------------------------------------------------------------------------
# reports


@dataclass
class Cell:
    """Accuracy of one method under one condition (a sampling rate or held-out domain)."""

    key: str
    per_seed: dict[str, float]
    selected: dict[str, float] = field(default_factory=dict)
    val_scores: dict[str, float] = field(default_factory=dict)
    val_curves: dict[str, list[list[float]]] = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.per_seed.values())))

    @property
    def std(self) -> float:
        return float(np.std(list(self.per_seed.values())))

    def to_dict(self) -> dict:
        return {
            "key": self.key,
            "per_seed": self.per_seed,
            "mean": self.mean,
            "std": self.std,
            "selected": self.selected,
            "val_scores": self.val_scores,
            "val_curves": self.val_curves,
        }


@dataclass
class RunReport:
    protocol: str
    title: str
    rows: dict[str, list[Cell]]  # method label -> cells in column order
    columns: list[str]
    config: dict
    counts: dict[str, int] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    wall_time: float = 0.0  # kept out of the JSON so reports stay byte-reproducible

    def cell(self, row: str, column: str) -> Cell:
        return next(c for c in self.rows[row] if c.key == column)

    def to_dict(self) -> dict:
        return _jsonable({
            "protocol": self.protocol,
            "title": self.title,
            "columns": self.columns,
            "rows": {k: [c.to_dict() for c in cells] for k, cells in self.rows.items()},
            "counts": dict(sorted(self.counts.items())),
            "notes": self.notes,
            "extra": self.extra,
            "config": self.config,
            "version": __version__,
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table_rows(self, with_avg: bool = False) -> tuple[list[str], list[list[str]]]:
        header = ["Method"] + list(self.columns) + (["Avg."] if with_avg else [])
        best = {
            col: max(cells[i].mean for cells in self.rows.values())
            for i, col in enumerate(self.columns)
        }
        body = []
        for name, cells in self.rows.items():
            row = [name]
            for c in cells:
                mark = "*" if np.isclose(c.mean, best[c.key]) else ""
                sel = " (v)" if c.selected.get("_chosen_by_val") else ""
                row.append(f"{100 * c.mean:.2f}±{100 * c.std:.2f}{mark}{sel}")
            if with_avg:
                row.append(f"{100 * np.mean([c.mean for c in cells]):.2f}")
            body.append(row)
        return header, body

    def to_text(self) -> str:
        header, body = self.table_rows(with_avg=self.protocol == "DG")
        widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
        fmt = lambda r: "  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip()  # noqa: E731
        lines = [self.title, fmt(header), "  ".join("-" * w for w in widths)]
        lines += [fmt(r) for r in body]
        lines.append("")
        lines.append("accuracy % (mean±std over seeds, population std); * = best in column")
        lines += self.notes
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        header, body = self.table_rows(with_avg=self.protocol == "DG")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(body)
        return buf.getvalue()

    def stem(self) -> str:
        seeds = "-".join(str(s) for s in self.config.get("seeds", []))
        method = self.config.get("method", "all") if len(self.rows) == 1 else "all"
        return f"{self.protocol.lower()}_{BaselineKind.parse(method).value if method != 'all' else method}_s{seeds}"

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = self.stem()
        paths = {"json": out / f"{stem}.json", "txt": out / f"{stem}.txt", "csv": out / f"{stem}.csv"}
        paths["json"].write_text(self.to_json())
        paths["txt"].write_text(self.to_text())
        paths["csv"].write_text(self.to_csv())
        return paths


# ---------------------------------------------------------------------------
# building blocks


def obtain_frozen(cfg: RunConfig, frozen: ViTModel | None = None) -> ViTModel:
    if frozen is not None:
        return frozen
    if not cfg.checkpoint:
        raise ConfigError("checkpoint: a frozen pretrained model is required (run `pretrain` first)")
    path = Path(cfg.checkpoint)
    if not (path / "manifest.json").exists():
        raise ConfigError(f"checkpoint: no frozen model at {path}")
    return load_model(path, frozen=True)


def pretrain_from_config(cfg: RunConfig) -> ViTModel:
    pc = cfg.pretrain
    model_cfg = dataclasses.replace(cfg.model, num_classes=len(SOURCE_CLASSES))
    source = source_dataset(pc.source_n_per_class, pc.seed)
    optim = OptimConfig(lr=pc.lr, weight_decay=pc.weight_decay, warmup_steps=pc.warmup_steps,
                        total_steps=pc.steps, batch_size=pc.batch_size)
    return pretrain_toy(model_cfg, source, pc.steps, pc.seed, optim)


def target_dataset(cfg: RunConfig) -> LabeledDataset:
    d = cfg.data
    spec = DomainSpec(d.target_domain, classes=tuple(d.target_classes))
    return generate_domain(spec, d.n_per_class, d.data_seed, d.tl_fractions())


def dg_datasets(cfg: RunConfig) -> dict[str, LabeledDataset]:
    d = cfg.data
    styles = {s.domain_id: s for s in DEFAULT_DOMAINS}
    unknown = [n for n in d.dg_domains if n not in styles]
    if unknown:
        raise ConfigError(f"data.dg_domains: unknown domains {unknown}")
    out = {}
    for name in d.dg_domains:
        spec = dataclasses.replace(styles[name], classes=tuple(d.target_classes))
        out[name] = generate_domain(spec, d.dg_n_per_class, d.data_seed,
                                    (1 - d.dg_val_fraction, d.dg_val_fraction, 0.0))
    return out


def _method_params(cfg: RunConfig, kind: BaselineKind, value: float | None) -> MethodParams:
    mp = MethodParams(p=cfg.p if kind is BaselineKind.STOCHCA else 0.0, lam=cfg.lam,
                      per_sample=cfg.per_sample_gates, ftca_loss=cfg.ftca_loss)
    if value is not None:
        if kind is BaselineKind.STOCHCA:
            mp.p = value
        elif kind is BaselineKind.L2REG:
            mp.lam = value
    return mp


def candidate_grid(cfg: RunConfig, kind: BaselineKind) -> tuple[str, tuple[float, ...]]:
    """Hyperparameter searched on validation for ``kind`` (empty grid: use the fixed value)."""
    if kind is BaselineKind.STOCHCA:
        return "p", tuple(cfg.p_grid)
    if kind is BaselineKind.L2REG:
        return "lam", tuple(cfg.lam_grid)
    return "", ()


def train_one(cfg, kind, frozen, n_classes, images, labels, seed, value=None) -> ViTModel:
    train_kind = BaselineKind.FTCA if kind is BaselineKind.FTCA_ONLYSA else kind
    target = replace_classifier(frozen, n_classes, derive_seed(seed, 11))
    fit(train_kind, target, frozen, images, labels, cfg.optim, seed, _method_params(cfg, kind, value))
    return target


def select(
    candidates: tuple[float, ...], scores: dict[float, float]
) -> float:
    """Highest validation score; ties go to the smallest hyperparameter."""
    best = max(scores[c] for c in candidates)
    return min(c for c in candidates if scores[c] == best)


def _fmt(v: float) -> str:
    return f"{v:g}"


# ---------------------------------------------------------------------------
# transfer learning


def _tl_cells(cfg, kind, frozen, ds: LabeledDataset, rate: float, access: AccessLog,
              fixed: float | None = None) -> tuple[Cell, Cell | None]:
    """One TL cell; for FT+CA also the SA-only deployment of the same trained models."""
    train = subsample(ds, rate, cfg.data.data_seed)
    n_classes = ds.num_classes
    hp_name, grid = candidate_grid(cfg, kind)
    key = f"{round(100 * rate)}%"
    cell = Cell(key=key, per_seed={})
    chosen = fixed
    if fixed is None and grid:
        scores, curves = _selection_scores(cfg, kind, frozen, train, grid, access)
        chosen = select(grid, scores)
        cell.val_scores = {_fmt(v): s for v, s in scores.items()}
        cell.selected = {hp_name: chosen}
        if curves:
            cell.val_curves = curves
    elif hp_name:
        if chosen is None:
            chosen = cfg.p if hp_name == "p" else cfg.lam
        cell.selected = {hp_name: chosen}
    # retrain on train+val with the selection, then one test read per seed
    x_tr, y_tr = train.take("train", "retrain", access)
    x_va, y_va = train.take("val", "retrain", access)
    x_all, y_all = np.concatenate([x_tr, x_va]), np.concatenate([y_tr, y_va])
    onlysa = Cell(key=key, per_seed={}) if kind is BaselineKind.FTCA else None
    for s in cfg.seeds:
        model = train_one(cfg, kind, frozen, n_classes, x_all, y_all, s, chosen)
        xt, yt = train.take("test", "test", access)
        cell.per_seed[str(s)] = accuracy(kind, model, frozen, xt, yt)
        if onlysa is not None:
            onlysa.per_seed[str(s)] = accuracy(BaselineKind.FTCA_ONLYSA, model, frozen, xt, yt)
    return cell, onlysa


def _selection_scores(cfg, kind, frozen, train: LabeledDataset, grid, access):
    """Mean validation accuracy per candidate over ``cfg.selection_seeds``."""
    xi, yi = train.take("train", "train", access)
    xv, yv = train.take("val", "select", access)
    scores, curves = {}, {}
    for value in grid:
        accs = []
        for s in cfg.selection_seeds:
            model = replace_classifier(frozen, train.num_classes, derive_seed(s, 11))
            curve: list[float] = []
            hook = _val_probe(cfg.val_every, kind, model, frozen, xv, yv, curve)
            train_kind = BaselineKind.FTCA if kind is BaselineKind.FTCA_ONLYSA else kind
            fit(train_kind, model, frozen, xi, yi, cfg.optim, s,
                _method_params(cfg, kind, value), callback=hook)
            accs.append(accuracy(kind, model, frozen, xv, yv))
            if curve:
                curves.setdefault(_fmt(value), []).append(curve)
        scores[value] = float(np.mean(accs))
    return scores, curves


def _val_probe(every, kind, model, frozen, xv, yv, curve):
    if every <= 0:
        return None

    def probe(step):
        if (step + 1) % every == 0:
            curve.append(accuracy(kind, model, frozen, xv, yv))

    return probe


def run_transfer(
    cfg: RunConfig,
    frozen: ViTModel | None = None,
    methods: tuple[str, ...] | None = None,
    access: AccessLog | None = None,
) -> RunReport:
    """Transfer-learning protocol over ``cfg.rates`` for ``cfg.method`` (or ``methods``).

    When both FT+CA and FT+CA (only SA) are requested they share training runs.
    """
    started = time.perf_counter()
    frozen = obtain_frozen(cfg, frozen)
    access = access if access is not None else AccessLog()
    ds = target_dataset(cfg)
    kinds = [BaselineKind.parse(m) for m in (methods or (cfg.method,))]
    shared = BaselineKind.FTCA in kinds and BaselineKind.FTCA_ONLYSA in kinds
    rows: dict[str, list[Cell]] = {}
    with counters.counting() as c:
        for kind in kinds:
            if kind is BaselineKind.FTCA_ONLYSA and shared:
                continue
            pairs = [_tl_cells(cfg, kind, frozen, ds, r, access) for r in cfg.rate_grid()]
            rows[kind.label] = [a for a, _ in pairs]
            if shared and kind is BaselineKind.FTCA:
                rows[BaselineKind.FTCA_ONLYSA.label] = [b for _, b in pairs]
    report = RunReport(
        protocol="TL",
        title="Transfer learning: test accuracy by sampling rate",
        rows={k.label: rows[k.label] for k in kinds},
        columns=[f"{round(100 * r)}%" for r in cfg.rate_grid()],
        config=cfg.to_dict(),
        counts=dict(c),
        notes=[
            "hyperparameters (p for StochCA, lam for L2-Reg) selected on the validation split, "
            "then retrained on train+val",
            f"target classes: {', '.join(cfg.data.target_classes)}",
        ],
    )
    report.wall_time = time.perf_counter() - started
    return report


# ---------------------------------------------------------------------------
# domain generalization


def run_dg(
    cfg: RunConfig,
    frozen: ViTModel | None = None,
    methods: tuple[str, ...] | None = None,
    access: AccessLog | None = None,
) -> RunReport:
    """Leave-one-domain-out over ``cfg.data.dg_domains``."""
    started = time.perf_counter()
    if len(cfg.data.dg_domains) < 3:
        raise ContractError("domain generalization needs at least 3 domains (>= 2 sources)")
    frozen = obtain_frozen(cfg, frozen)
    access = access if access is not None else AccessLog()
    domains = dg_datasets(cfg)
    kinds = [BaselineKind.parse(m) for m in (methods or (cfg.method,))]
    rows: dict[str, list[Cell]] = {k.label: [] for k in kinds}
    with counters.counting() as c:
        for held_out in cfg.data.dg_domains:
            access.context = held_out
            sources = [domains[n] for n in cfg.data.dg_domains if n != held_out]
            pooled = concat_datasets(sources, "+".join(s.domain for s in sources))
            x_tr = np.concatenate([s.take("train", "train", access)[0] for s in sources])
            y_tr = np.concatenate([s.take("train", "train", access)[1] for s in sources])
            x_va = np.concatenate([s.take("val", "select", access)[0] for s in sources])
            y_va = np.concatenate([s.take("val", "select", access)[1] for s in sources])
            for kind in kinds:
                rows[kind.label].append(
                    _dg_cell(cfg, kind, frozen, pooled.num_classes, (x_tr, y_tr), (x_va, y_va),
                             domains[held_out], access)
                )
        access.context = None
    report = RunReport(
        protocol="DG",
        title="Domain generalization (leave-one-domain-out): held-out domain accuracy",
        rows=rows,
        columns=list(cfg.data.dg_domains),
        config=cfg.to_dict(),
        counts=dict(c),
        notes=["each column: trained on the other domains, selected on their pooled validation splits"],
    )
    report.wall_time = time.perf_counter() - started
    return report


def _dg_cell(cfg, kind, frozen, n_classes, train, val, held: LabeledDataset, access) -> Cell:
    hp_name, grid = candidate_grid(cfg, kind)
    cell = Cell(key=held.domain, per_seed={})
    scores: dict[float, list[float]] = {}
    chosen_per_seed = {}
    for s in cfg.seeds:
        models = {}
        for value in grid or (None,):
            m = train_one(cfg, kind, frozen, n_classes, *train, s, value)
            models[value] = m
            scores.setdefault(value, []).append(accuracy(kind, m, frozen, *val))
        if grid:
            chosen = select(grid, {v: scores[v][-1] for v in grid})
        else:
            chosen = None
        chosen_per_seed[str(s)] = chosen
        # test reads only happen after training and selection are finished
        x_te = np.concatenate([held.take(sp, "test", access)[0] for sp in ("train", "val")])
        y_te = np.concatenate([held.take(sp, "test", access)[1] for sp in ("train", "val")])
        cell.per_seed[str(s)] = accuracy(kind, models[chosen], frozen, x_te, y_te)
    if grid:
        cell.val_scores = {_fmt(v): float(np.mean(scores[v])) for v in grid}
        cell.selected = {f"{hp_name}@seed{k}": v for k, v in chosen_per_seed.items()}
    return cell


# ---------------------------------------------------------------------------
# probability sweep


def sweep_p(
    cfg: RunConfig,
    grid: tuple[float, ...] = P_GRID,
    frozen: ViTModel | None = None,
    access: AccessLog | None = None,
) -> RunReport:
    """One transfer run per fixed p (plus the FT row); marks the validation-selected p."""
    started = time.perf_counter()
    if cfg.kind is not BaselineKind.STOCHCA:
        raise ContractError("sweep_p requires method = stochca")
    grid = tuple(grid)
    frozen = obtain_frozen(cfg, frozen)
    access = access if access is not None else AccessLog()
    ds = target_dataset(cfg)
    rows: dict[str, list[Cell]] = {"No (= FT)": []}
    rows.update({_fmt(p): [] for p in grid})
    selected = {}
    with counters.counting() as c:
        for r in cfg.rate_grid():
            rows["No (= FT)"].append(_tl_cells(cfg, BaselineKind.FT, frozen, ds, r, access)[0])
            train = subsample(ds, r, cfg.data.data_seed)
            probe, _ = _selection_scores(cfg, BaselineKind.STOCHCA, frozen, train, grid, access)
            selected[r] = select(grid, probe)
            for p in grid:
                cell = _tl_cells(cfg, BaselineKind.STOCHCA, frozen, ds, r, access, fixed=p)[0]
                cell.val_scores = {_fmt(p): probe[p]}
                if p == selected[r]:
                    cell.selected["_chosen_by_val"] = 1.0
                rows[_fmt(p)].append(cell)
    report = RunReport(
        protocol="ablation",
        title="Cross-attention probability sweep: test accuracy",
        rows=rows,
        columns=[f"{round(100 * r)}%" for r in cfg.rate_grid()],
        config=cfg.to_dict(),
        counts=dict(c),
        notes=["(v) = probability chosen by validation accuracy (ties -> smallest p)"],
        extra={"selected_p": {f"{round(100 * r)}%": selected[r] for r in cfg.rate_grid()}},
    )
    report.wall_time = time.perf_counter() - started
    return report


# ---------------------------------------------------------------------------
# similarity analysis


def run_similarity(cfg: RunConfig, frozen: ViTModel | None = None, out_dir=None,
                   methods=("ft", "stochca", "l2reg")) -> RunReport:
    """Fine-tune with each method at ``cfg.sampling_rate`` and compare Q/K/V to the frozen model.

    Uses the fixed ``cfg.p`` / ``cfg.lam``; similarities are averaged over seeds and
    measured on the target test split.
    """
    from .analysis import cosine_similarity_report, similarity_table_csv, SimilarityReport

    started = time.perf_counter()
    frozen = obtain_frozen(cfg, frozen)
    ds = subsample(target_dataset(cfg), cfg.sampling_rate, cfg.data.data_seed)
    x_tr, y_tr = ds.take("train")
    x_va, y_va = ds.take("val")
    x_all, y_all = np.concatenate([x_tr, x_va]), np.concatenate([y_tr, y_va])
    xt, yt = ds.take("test")
    reports: dict[str, SimilarityReport] = {}
    rows: dict[str, list[Cell]] = {}
    for m in methods:
        kind = BaselineKind.parse(m)
        value = cfg.p if kind is BaselineKind.STOCHCA else cfg.lam
        per_seed, acc = [], {}
        for s in cfg.seeds:
            model = train_one(cfg, kind, frozen, ds.num_classes, x_all, y_all, s, value)
            per_seed.append(cosine_similarity_report(model, frozen, xt))
            acc[str(s)] = accuracy(kind, model, frozen, xt, yt)
        depth = len(per_seed[0].layers)
        layers = [{c: float(np.mean([r.layers[l][c] for r in per_seed])) for c in "qkv"}
                  for l in range(depth)]
        reports[kind.label] = SimilarityReport(
            layers, sum(r.zero_norm_count for r in per_seed), per_seed[0].num_images
        )
        rows[kind.label] = [Cell(key=f"{round(100 * cfg.sampling_rate)}%", per_seed=acc)]
    report = RunReport(
        protocol="similarity",
        title="Q/K/V cosine similarity to the frozen model (test accuracy below)",
        rows=rows,
        columns=[f"{round(100 * cfg.sampling_rate)}%"],
        config=cfg.to_dict(),
        notes=[reports[next(iter(reports))].note],
        extra={"similarity": {k: r.to_dict() for k, r in reports.items()}},
    )
    report.similarity = reports
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "similarity.csv").write_text(similarity_table_csv(reports))
    report.wall_time = time.perf_counter() - started
    return report
