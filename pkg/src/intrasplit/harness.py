"""
Experiment orchestration: protocol split -> splitting autoencoder -> training
-> test-set AUC, repeated over seeds, plus ratio sweeps and report output.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ExperimentConfig
from .data import ProtocolSplit, load_cifar10, load_idx_pair, make_protocol, make_synthetic
from .errors import ConfigError, ContractError, IntraSplitError
from .metrics import auc
from .model import OneClassModel, Trainer
from .nn import Network
from .splitting import SplitResult, recon_error_score, similarity_scores, split_scores, train_split_autoencoder

log = logging.getLogger(__name__)

CSV_FIELDS = ("mode", "dataset", "normal_class", "rho", "seed", "auc", "wall_s")
SWEEP_FIELDS = ("rho", "mean_auc", "std_auc", "n_seeds")

CLASS_NAMES = {
    "mnist": [f"Digit {i}" for i in range(10)],
    "fashion": ["T-shirt", "Trouser", "Pullover", "Dress", "Coat", "Sandal", "Shirt", "Sneaker", "Bag",
                "Ankle boot"],
    "cifar10": ["Airplane", "Automobile", "Bird", "Cat", "Deer", "Dog", "Frog", "Horse", "Ship", "Truck"],
    "synthetic": ["Blobs"] + [f"class {i}" for i in range(1, 10)],
}


@dataclass
class SeedResult:
    seed: int
    auc: float
    wall_s: float


@dataclass
class RunReport:
    mode: str
    dataset: str
    normal_class: int
    rho: float
    results: list[SeedResult]
    config: dict = field(default_factory=dict)
    input_hash: str = ""
    wall_s: float = 0.0

    @property
    def aucs(self) -> np.ndarray:
        return np.array([r.auc for r in self.results])

    @property
    def mean(self) -> float:
        return float(self.aucs.mean())

    @property
    def single_seed(self) -> bool:
        return len(self.results) < 2

    @property
    def std(self) -> float:
        """Sample standard deviation across seeds; 0 (flagged by ``single_seed``) for one seed."""
        return 0.0 if self.single_seed else float(self.aucs.std(ddof=1))


@dataclass
class SweepReport:
    rhos: list[float]
    reports: list[RunReport]


# ---------------------------------------------------------------- caches

_protocol_cache: dict[str, ProtocolSplit] = {}
_ae_cache: dict[str, tuple[Network, np.ndarray]] = {}


def clear_caches() -> None:
    _protocol_cache.clear()
    _ae_cache.clear()


def _protocol_key(config: ExperimentConfig) -> str:
    if config.dataset == "synthetic":
        parts = ("synthetic", config.synthetic_n_train, config.synthetic_test_normal,
                 config.synthetic_test_abnormal, config.synthetic_image_size, config.data_seed)
    else:
        parts = (config.dataset, str(Path(config.data_dir).resolve()), config.normal_class,
                 config.test_normal, config.test_abnormal, config.data_seed)
    return repr(parts)


def load_protocol(config: ExperimentConfig) -> ProtocolSplit:
    """Build (and memoize) the train/test split the config describes."""
    key = _protocol_key(config)
    if key not in _protocol_cache:
        if config.dataset == "synthetic":
            split = make_synthetic("blobs_vs_rings", config.synthetic_n_train, config.synthetic_test_normal,
                                   config.synthetic_test_abnormal, config.synthetic_image_size, config.data_seed)
        else:
            loader = load_cifar10 if config.dataset == "cifar10" else load_idx_pair
            train, test = loader(config.data_dir)
            split = make_protocol(train, test, config.normal_class, config.test_normal, config.test_abnormal,
                                  config.data_seed)
        _protocol_cache[key] = split
    return _protocol_cache[key]


def splitting_autoencoder(config: ExperimentConfig, seed: int,
                          protocol: ProtocolSplit | None = None) -> tuple[Network, np.ndarray]:
    """Trained autoencoder and its SSIM scores on the training images, memoized per seed.

    The result does not depend on rho or on the training mode, so sweeps and
    ablations share it.
    """
    protocol = protocol or load_protocol(config)
    ae_fields = (config.ae_iterations, config.ae_lr, config.l2_decay, config.batch, config.code_dim,
                 tuple(config.ae_channels), config.ssim_window)
    key = repr((_protocol_key(config), ae_fields, seed))
    if key not in _ae_cache:
        ae = train_split_autoencoder(protocol.train.images, config, seed)
        _ae_cache[key] = (ae, similarity_scores(ae, protocol.train.images, config.ssim_window))
    return _ae_cache[key]


def input_hash(config: ExperimentConfig, protocol: ProtocolSplit) -> str:
    h = hashlib.sha256()
    h.update(config.digest("out").encode())
    for arr in (protocol.train.images, protocol.test.images, protocol.test.role_labels):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- runs


def train_model(config: ExperimentConfig, seed: int, protocol: ProtocolSplit,
                split: SplitResult | None) -> OneClassModel:
    model = OneClassModel(protocol.train.image_shape, config.latent_dim, config.backbone_channels, seed=seed)
    Trainer(model, protocol.train.images, config, split, config.mode, seed=seed).run()
    return model


def evaluate_scores(scores: np.ndarray, protocol: ProtocolSplit) -> float:
    roles = protocol.test.role_labels
    return auc(scores[roles == 0], scores[roles == 1]).auc


def run_seed(config: ExperimentConfig, seed: int, protocol: ProtocolSplit | None = None) -> SeedResult:
    protocol = protocol or load_protocol(config)
    start = time.perf_counter()
    if config.mode == "naive_nn":
        model = train_model(config, seed, protocol, None)
        scores = model.score(protocol.test.images)
    else:
        ae, train_scores = splitting_autoencoder(config, seed, protocol)
        if config.mode == "recon_baseline":
            scores = recon_error_score(ae, protocol.test.images, config.ssim_window)
        else:
            model = train_model(config, seed, protocol, split_scores(train_scores, config.rho))
            scores = model.score(protocol.test.images)
    value = evaluate_scores(scores, protocol)
    wall = time.perf_counter() - start
    log.info("%s seed=%d rho=%g auc=%.4f (%.1fs)", config.mode, seed, config.rho, value, wall)
    return SeedResult(seed, value, wall)


def run_experiment(config: ExperimentConfig) -> RunReport:
    config.validate()
    start = time.perf_counter()
    protocol = load_protocol(config)
    results = [run_seed(config, seed, protocol) for seed in config.seeds]
    return RunReport(config.mode, config.dataset, config.normal_class, config.rho, results,
                     config.to_dict(), input_hash(config, protocol), time.perf_counter() - start)


def run_ratio_sweep(config: ExperimentConfig, rhos: Sequence[float]) -> SweepReport:
    rhos = [float(r) for r in rhos]
    if len(set(rhos)) < 2:
        raise ConfigError("a ratio sweep needs at least two distinct rho values")
    reports = [run_experiment(config.replace(rho=r)) for r in rhos]
    return SweepReport(rhos, reports)


# ---------------------------------------------------------------- reporting


def format_auc(mean: float, std: float) -> str:
    """Percent with one decimal and the std in parentheses, e.g. ``88.9 (±1.2)``."""
    return f"{100 * mean:.1f} (±{100 * std:.1f})"


def report_rows(report: RunReport, with_wall: bool = True) -> list[dict[str, str]]:
    base = {"mode": report.mode, "dataset": report.dataset, "normal_class": str(report.normal_class),
            "rho": repr(float(report.rho))}
    rows = [{**base, "seed": str(r.seed), "auc": repr(r.auc),
             "wall_s": f"{r.wall_s:.3f}" if with_wall else ""} for r in report.results]
    rows.append({**base, "seed": "mean", "auc": repr(report.mean),
                 "wall_s": f"{report.wall_s:.3f}" if with_wall else ""})
    rows.append({**base, "seed": "std", "auc": repr(report.std), "wall_s": ""})
    return rows


def reports_to_csv(reports: Sequence[RunReport], with_wall: bool = True) -> str:
    if not reports:
        raise ContractError("nothing to report")
    buf = io.StringIO()
    writer = csv.DictWriter(buf, CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for rep in reports:
        writer.writerows(report_rows(rep, with_wall))
    return buf.getvalue()


def read_results_csv(path: str | Path) -> list[RunReport]:
    """Rebuild reports from a results CSV (summary rows are recomputed, not trusted)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    groups: dict[tuple, list[SeedResult]] = {}
    for row in rows:
        if row["seed"] in ("mean", "std"):
            continue
        key = (row["mode"], row["dataset"], int(row["normal_class"]), float(row["rho"]))
        wall = float(row["wall_s"]) if row.get("wall_s") else 0.0
        groups.setdefault(key, []).append(SeedResult(int(row["seed"]), float(row["auc"]), wall))
    return [RunReport(m, d, c, r, res) for (m, d, c, r), res in groups.items()]


def render_table(reports: Sequence[RunReport]) -> str:
    """Text table with one row per normal class and one column per mode."""
    if not reports:
        raise ContractError("nothing to report")
    modes = list(dict.fromkeys(r.mode for r in reports))
    rows = list(dict.fromkeys((r.dataset, r.normal_class, r.rho) for r in reports))
    cell = {(r.dataset, r.normal_class, r.rho, r.mode): r for r in reports}
    header = ["Normal Class", "rho"] + modes
    lines = [header]
    for ds, cls, rho in rows:
        names = CLASS_NAMES.get(ds, [])
        label = names[cls] if cls < len(names) else f"class {cls}"
        line = [f"{label}", f"{rho:g}"]
        for m in modes:
            rep = cell.get((ds, cls, rho, m))
            text = "" if rep is None else format_auc(rep.mean, rep.std)
            if rep is not None and rep.single_seed:
                text += "*"
            line.append(text)
        lines.append(line)
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    out = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in lines]
    out.insert(1, "  ".join("-" * w for w in widths))
    if any(r.single_seed for r in reports):
        out.append("* single seed: std reported as 0")
    return "\n".join(out) + "\n"


def emit_report(reports: RunReport | Sequence[RunReport], out_dir: str | Path, fmt: str = "csv",
                name: str = "results") -> Path:
    if isinstance(reports, RunReport):
        reports = [reports]
    if not reports:
        raise ContractError("nothing to report")
    if fmt not in ("csv", "text-table"):
        raise ConfigError(f"unknown report format {fmt!r}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        path = out / (f"{name}.csv" if fmt == "csv" else f"{name}.txt")
        path.write_text(reports_to_csv(reports) if fmt == "csv" else render_table(reports))
    except OSError as exc:
        raise IntraSplitError(f"cannot write report to {out}: {exc}") from None
    return path


def sweep_to_csv(sweep: SweepReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_FIELDS)
    for rho, rep in zip(sweep.rhos, sweep.reports):
        writer.writerow([repr(rho), repr(rep.mean), repr(rep.std), len(rep.results)])
    return buf.getvalue()


def emit_sweep(sweep: SweepReport, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        summary = out / "sweep.csv"
        summary.write_text(sweep_to_csv(sweep))
        detail = out / "sweep_seeds.csv"
        detail.write_text(reports_to_csv(sweep.reports))
    except OSError as exc:
        raise IntraSplitError(f"cannot write sweep report to {out}: {exc}") from None
    return summary, detail
