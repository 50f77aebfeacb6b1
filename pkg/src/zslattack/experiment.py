"""End-to-end experiment driver: generate, train, attack, evaluate, report.

A run directory holds every artifact of one configuration::

    data.zadt                      generated dataset
    model.zadt, model.json         checkpoint tensors and sidecar (hyperparameters, gamma_star)
    loss.csv                       per-epoch training losses
    adv/<tag>.zadt, adv/<tag>.ndjson   attacked test split and per-step traces
    eval/<tag>.json, eval/<tag>.curve.csv   EvalReport and gamma curve
    report.csv, report.txt         consolidated table
    manifest.json                  artifact hashes and stage timings

Randomness comes from one root seed. The dataset uses the root seed itself, so
a dataset is named by ``(preset, seed)``; model init, minibatch order and
attack starts use the named sub-streams in ``STREAMS``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import attacks as atk
from . import data, metrics
from .autodiff import NumericError
from .model import ModelConfig, TrainConfig, ZslModel, init_model, predict_concepts, train

STREAMS = {"init": 1, "train": 2, "attack": 3}

REPORT_COLUMNS = (
    "mode", "epsilon_255", "steps", "t1_zsl", "gamma_star", "u_at_gamma", "s_at_gamma", "h_at_gamma",
    "best_gamma", "u_best", "s_best", "h_best", "ausuc", "mse_u", "mse_s", "curve",
)


class ConfigError(ValueError):
    pass


def stream_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, STREAMS[name]])


def stream_seed(seed: int, name: str) -> int:
    return int(np.random.SeedSequence([seed, STREAMS[name]]).generate_state(1)[0])


@dataclass
class ExperimentConfig:
    """Flat, JSON-serializable description of one run.

    Precedence: defaults, then the ``--config`` file, then command-line flags.
    """

    preset: str = "mini-awa2"
    dataset: str | None = None
    seed: int = 7
    out: str = "runs/mini-awa2"
    # model
    patch: int = 4
    d_v: int = 32
    d_e: int = 16
    d_attn: int = 16
    use_relu: bool = False
    tau_init: float = 16.0
    attn_init_scale: float = 0.3
    # training
    epochs: int = 200
    lr: float = 0.05
    batch_size: int = 32
    lam: float = 1.0
    alpha_re: float = 1.0
    beta_re: float = 1.0
    weight_decay: float = 0.01
    # attack sweep; epsilons in 1/255 pixel units
    modes: list[str] = field(default_factory=lambda: list(atk.MODES))
    epsilons_255: list[float] = field(default_factory=lambda: [8.0])
    steps: list[int] = field(default_factory=lambda: [1, 5, 10])
    workers: int = 1
    # calibration grid
    gamma_lo: float = -1.5
    gamma_hi: float = 1.5
    gamma_n: int = 201

    def __post_init__(self):
        if self.preset not in data.PRESETS and self.dataset is None:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(data.PRESETS)}")
        bad = [m for m in self.modes if m not in atk.MODES]
        if bad:
            raise ConfigError(f"unknown attack modes {bad}; expected a subset of {list(atk.MODES)}")
        if any(e <= 0 for e in self.epsilons_255) or any(int(t) < 1 for t in self.steps):
            raise ConfigError("epsilons must be positive and steps at least 1")
        if self.gamma_n < 2 or not self.gamma_lo < self.gamma_hi:
            raise ConfigError("gamma grid needs gamma_lo < gamma_hi and at least two points")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        unknown = sorted(set(d) - set(cls.keys()))
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        return cls(**d)

    @classmethod
    def from_file(cls, path, **overrides) -> ExperimentConfig:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict({**raw, **overrides})

    def replace(self, **overrides) -> ExperimentConfig:
        return self.from_dict({**self.to_dict(), **overrides})

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(_dumps(self.to_dict()).encode()).hexdigest()

    @property
    def run_dir(self) -> Path:
        return Path(self.out)

    def model_config(self, image_shape, n_concepts: int) -> ModelConfig:
        return ModelConfig(
            image_shape=tuple(int(v) for v in image_shape), n_concepts=int(n_concepts), patch=self.patch,
            d_v=self.d_v, d_e=self.d_e, d_attn=self.d_attn, use_relu=self.use_relu,
            tau_init=self.tau_init, attn_init_scale=self.attn_init_scale,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, lr=self.lr, batch_size=self.batch_size, lam=self.lam,
            alpha_re=self.alpha_re, beta_re=self.beta_re, weight_decay=self.weight_decay,
        )

    def grid(self) -> np.ndarray:
        return metrics.default_grid(self.gamma_lo, self.gamma_hi, self.gamma_n)

    def attack_cells(self) -> list[atk.AttackConfig]:
        seed = stream_seed(self.seed, "attack")
        return [
            atk.AttackConfig(mode, eps / 255.0, int(t), seed=seed)
            for mode in self.modes
            for eps in self.epsilons_255
            for t in self.steps
        ]


# ---------------------------------------------------------------- file helpers

def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _record(cfg: ExperimentConfig, stage: str, paths, seconds: float) -> None:
    """Add a stage entry (artifact hashes, wall time) to the run manifest."""
    root = cfg.run_dir
    path = root / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest.update(config_hash=cfg.digest(), version=__version__)
    stages = manifest.setdefault("stages", {})
    stages[stage] = {
        "artifacts": {str(Path(p).relative_to(root)): sha256(p) for p in sorted(map(str, paths))},
        "seconds": round(seconds, 3),
    }
    path.write_text(_dumps(manifest))


def verify_manifest(run_dir) -> list[str]:
    """Return the artifacts whose content no longer matches the manifest."""
    root = Path(run_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    bad = []
    for stage in manifest["stages"].values():
        for rel, digest in stage["artifacts"].items():
            p = root / rel
            if not p.exists() or sha256(p) != digest:
                bad.append(rel)
    return bad


# ------------------------------------------------------------------ checkpoint

def save_checkpoint(model: ZslModel, path, sidecar: dict) -> None:
    tensors = {name: value for name, value in model.params().items()}
    data.write_container(path, tensors)
    Path(path).with_suffix(".json").write_text(_dumps(sidecar))


def load_checkpoint(path) -> tuple[ZslModel, dict]:
    tensors, _ = data.read_container(path)
    sidecar_path = Path(path).with_suffix(".json")
    if not sidecar_path.exists():
        raise data.FormatError(f"{path}: missing sidecar {sidecar_path.name}")
    sidecar = json.loads(sidecar_path.read_text())
    mc = sidecar["model_config"]
    config = ModelConfig(**{**mc, "image_shape": tuple(mc["image_shape"])})
    try:
        arrays = {name: tensors[name] for name in ZslModel.ARRAYS}
        tau = float(tensors["tau"][0])
    except KeyError as exc:
        raise data.FormatError(f"{path}: missing tensor {exc.args[0]!r}") from None
    return ZslModel(config=config, tau=tau, **arrays), sidecar


def round_to_f32(model: ZslModel) -> ZslModel:
    """The checkpoint stores float32; use exactly the stored values from the start."""
    out = model.copy()
    for name in ZslModel.ARRAYS:
        setattr(out, name, np.asarray(getattr(out, name), dtype=np.float32).astype(np.float64))
    out.tau = float(np.float32(out.tau))
    return out


# ---------------------------------------------------------------------- stages

def format_stats(stats: dict, name: str) -> str:
    """Dataset statistics as a small fixed-width table."""
    cols = [
        ("dataset", name), ("sem.dim", stats["semantic_dim"]), ("range", stats["semantic_range"]),
        ("seen", stats["n_seen"]), ("unseen", stats["n_unseen"]), ("images", stats["n_images"]),
        ("train", stats["n_train"]), ("test-unseen", stats["n_test_unseen"]), ("test-seen", stats["n_test_seen"]),
    ]
    widths = [max(len(k), len(str(v))) for k, v in cols]
    head = "  ".join(k.rjust(w) for (k, _), w in zip(cols, widths))
    row = "  ".join(str(v).rjust(w) for (_, v), w in zip(cols, widths))
    return head + "\n" + row


def cmd_gen(cfg: ExperimentConfig) -> tuple[Path, dict]:
    t0 = time.perf_counter()
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    ds = data.generate(data.preset(cfg.preset, seed=cfg.seed))
    path = cfg.run_dir / "data.zadt"
    data.save(ds, path)
    _record(cfg, "gen", [path], time.perf_counter() - t0)
    return path, ds.stats()


def load_dataset(cfg: ExperimentConfig) -> data.Dataset:
    path = Path(cfg.dataset) if cfg.dataset else cfg.run_dir / "data.zadt"
    if not path.exists():
        raise FileNotFoundError(f"dataset {path} not found; run `gen` first or set `dataset`")
    return data.load(path)


def fit(cfg: ExperimentConfig, ds: data.Dataset) -> tuple[ZslModel, list]:
    """Initialize and train a model on the train split, rounded to checkpoint precision."""
    tr = ds.split(data.TRAIN)
    mc = cfg.model_config(ds.images.shape[1:], ds.space.n_concepts)
    model0 = init_model(mc, stream_rng(cfg.seed, "init"), tr.images)
    model, trace = train(model0, tr.images, tr.labels, ds.space, cfg.train_config(), stream_rng(cfg.seed, "train"))
    if not all(np.all(np.isfinite(v)) for v in model.params().values()):
        raise NumericError("training diverged (non-finite parameters); lower lr")
    return round_to_f32(model), trace


def clean_eval(cfg: ExperimentConfig, model: ZslModel, ds: data.Dataset, meta=None):
    te = ds.test()
    return metrics.evaluate(predict_concepts(model, te.images), te.labels, ds.space, cfg.grid(), meta=meta)


def cmd_train(cfg: ExperimentConfig) -> Path:
    t0 = time.perf_counter()
    ds = load_dataset(cfg)
    model, trace = fit(cfg, ds)
    report, _ = clean_eval(cfg, model, ds)
    root = cfg.run_dir
    root.mkdir(parents=True, exist_ok=True)
    loss_path = root / "loss.csv"
    with open(loss_path, "w", newline="") as fh:
        fh.write("epoch,sce,remse,total\n")
        for e in trace:
            fh.write(f"{e.epoch},{e.sce:.8f},{e.remse:.8f},{e.total:.8f}\n")
    sidecar = {
        "model_config": asdict(model.config),
        "train_config": asdict(cfg.train_config()),
        "gamma_star": report.gamma_star,
        "config": cfg.to_dict(),
        "dataset_sha256": sha256(Path(cfg.dataset) if cfg.dataset else root / "data.zadt"),
    }
    ckpt = root / "model.zadt"
    save_checkpoint(model, ckpt, sidecar)
    _record(cfg, "train", [ckpt, ckpt.with_suffix(".json"), loss_path], time.perf_counter() - t0)
    return ckpt


def _load_trained(cfg: ExperimentConfig) -> tuple[ZslModel, dict]:
    ckpt = cfg.run_dir / "model.zadt"
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} not found; run `train` first")
    return load_checkpoint(ckpt)


def cmd_attack(cfg: ExperimentConfig) -> list[Path]:
    t0 = time.perf_counter()
    cells = cfg.attack_cells()
    if not cells:
        warnings.warn("attack sweep is empty; nothing to do", stacklevel=2)
        return []
    ds = load_dataset(cfg)
    model, sidecar = _load_trained(cfg)
    te = ds.test()
    out_dir = cfg.run_dir / "adv"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for cell in cells:
        adv, traces = atk.attack_batch(model, te.images, te.labels, ds.space, cell, sidecar["gamma_star"], cfg.workers)
        adv = atk.to_float32_within_budget(adv, te.images, cell.epsilon, cell.pixel_bounds)
        if not atk.budget_ok(adv, te.images, cell.epsilon, cell.pixel_bounds, tol=0.0):
            raise NumericError(f"{cell.tag}: adversarial batch violates the budget")
        path = out_dir / f"{cell.tag}.zadt"
        data.save(data.Dataset(adv, te.labels, te.splits, ds.space), path)
        lines = io.StringIO()
        for i, tr in enumerate(traces):
            for rec in tr.to_records(i):
                lines.write(json.dumps({**rec, "note": tr.note}, sort_keys=True) + "\n")
        trace_path = path.with_suffix(".ndjson")
        trace_path.write_text(lines.getvalue())
        written += [path, trace_path]
    _record(cfg, "attack", written, time.perf_counter() - t0)
    return written[::2]


def _parse_tag(tag: str) -> tuple[str, float, int]:
    if tag == "clean":
        return "clean", 0.0, 0
    mode, steps, eps = tag.rsplit("-", 2)
    return mode, float(eps[3:]), int(steps[1:])


def cmd_eval(cfg: ExperimentConfig, inputs=None) -> list[Path]:
    """Evaluate the clean test split and every attacked split (or just ``inputs``)."""
    t0 = time.perf_counter()
    model, sidecar = _load_trained(cfg)
    gamma_star = sidecar["gamma_star"]
    root = cfg.run_dir
    if inputs is None:
        ds = load_dataset(cfg)
        sources = [("clean", ds.test(), None)]
        for p in sorted((root / "adv").glob("*.zadt")):
            sources.append((p.stem, data.load(p), p))
    else:
        sources = [(Path(p).stem, data.load(p), Path(p)) for p in inputs]
    out_dir = root / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for tag, split, src in sources:
        mode, eps, steps = _parse_tag(tag)
        meta = {
            "tag": tag, "mode": mode, "epsilon_255": eps, "steps": steps, "config": cfg.to_dict(),
            "source": "test split of the run dataset" if src is None else str(src.relative_to(root) if src.is_relative_to(root) else src),
        }
        s_hat = predict_concepts(model, split.images)
        report, curve = metrics.evaluate(s_hat, split.labels, split.space, cfg.grid(), gamma_star, meta)
        if not np.isfinite(report.ausuc):
            raise NumericError(f"{tag}: non-finite metrics")
        jpath = out_dir / f"{tag}.json"
        jpath.write_text(_dumps(report.to_dict()))
        cpath = out_dir / f"{tag}.curve.csv"
        curve.to_csv(cpath)
        written += [jpath, cpath]
    _record(cfg, "eval", written, time.perf_counter() - t0)
    return written[::2]


def _row(report: dict, curve: str) -> dict:
    m = report["meta"]
    row = {"mode": m["mode"], "epsilon_255": m["epsilon_255"], "steps": m["steps"], "curve": curve}
    for key in REPORT_COLUMNS[3:-1]:
        row[key] = report[key]
    return row


def _sort_key(row: dict):
    return (row["mode"] != "clean", row["mode"], row["epsilon_255"], row["steps"])


def collect_rows(run_dirs) -> list[dict]:
    """One row per evaluated cell across ``run_dirs``, clean first, then by (mode, eps, T)."""
    rows = []
    for root in map(Path, run_dirs):
        for p in sorted((root / "eval").glob("*.json")):
            rows.append(_row(json.loads(p.read_text()), str(p.with_name(p.stem + ".curve.csv"))))
    return sorted(rows, key=_sort_key)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def format_table(rows: list[dict]) -> str:
    cols = REPORT_COLUMNS[:-1]
    cells = [[_fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"


def cmd_report(cfg: ExperimentConfig, run_dirs=None) -> tuple[Path | None, list[dict]]:
    """Consolidate eval reports into ``report.csv`` / ``report.txt`` under the run dir."""
    run_dirs = [cfg.run_dir] if run_dirs is None else list(run_dirs)
    rows = collect_rows(run_dirs)
    if not rows:
        return None, []
    root = cfg.run_dir
    root.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: "" if v is None else v for k, v in r.items()})
    csv_path = root / "report.csv"
    csv_path.write_text(buf.getvalue())
    (root / "report.txt").write_text(format_table(rows))
    return csv_path, rows


def run_all(cfg: ExperimentConfig) -> list[dict]:
    """gen, train, attack, eval and report in sequence."""
    if cfg.dataset is None:
        cmd_gen(cfg)
    cmd_train(cfg)
    cmd_attack(cfg)
    cmd_eval(cfg)
    return cmd_report(cfg)[1]
