"""Training runs, sweeps and activation export behind the command-line verbs.

Report files (``*.csv``, ``*.txt``) depend only on the configuration and
seeds; wall-clock data goes to a ``meta.json`` sidecar.
"""

from __future__ import annotations

import json
import logging
import math
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from aplnet import archive
from aplnet.config import ExperimentConfig
from aplnet.data import Dataset, apply_normalization, load_split, mean_subtract, read_manifest, train_val_split
from aplnet.functional import apl_forward
from aplnet.layers import ConfigError, Network
from aplnet.pwl import apl_to_pwl
from aplnet.train import Trainer, TrainingAborted, evaluate, load_network

log = logging.getLogger(__name__)

LEAKY_K_GRID = (-0.2, -0.1, -0.05, -0.01, 0.01, 0.05, 0.1, 0.2)
MAX_EXPORT_NEURONS = 1000
RESEED_NOTE = "each repetition reseeds weight init, APL init, data order, dropout and the validation split"
METRICS = ("train_loss", "train_error", "val_error", "test_error")


@dataclass
class RunResult:
    label: str
    seed: int
    status: str
    message: str = ""
    train_loss: float = math.nan
    train_error: float = math.nan
    val_error: float = math.nan
    test_error: float = math.nan
    checkpoint: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"


# -- single run -------------------------------------------------------------------------------

def prepare_data(cfg: ExperimentConfig, seed: int):
    """Train/val/test datasets for one repetition, normalised with the train mean."""
    manifest = read_manifest(cfg.manifest)
    train = load_split(manifest, "train")
    if train is None:
        raise ConfigError(f"manifest {cfg.manifest} has no train split")
    test = load_split(manifest, "test")
    train, val = train_val_split(train, cfg.val_fraction, seed)
    if cfg.mean_subtract:
        others = [d for d in (val, test) if d is not None]
        train, normed = mean_subtract(train, others)
        it = iter(normed)
        val = next(it) if val is not None else None
        test = next(it) if test is not None else None
    return manifest.get("task", "classification"), train, val, test


def _metrics(net: Network, ds: Dataset | None, task: str) -> dict[str, float]:
    if ds is None:
        return {"error": math.nan, "loss": math.nan}
    return evaluate(net, ds, task)


def run_one(cfg: ExperimentConfig, seed: int, label: str = "run") -> RunResult:
    """Train one repetition and write its checkpoint (including initial parameters)."""
    task, train, val, test = prepare_data(cfg, seed)
    spec = cfg.network_spec(train.feature_shape)
    net = Network(spec, seed=seed, dtype=np.dtype(cfg.precision))
    init_state = net.state()
    trainer = Trainer(net, cfg.train_config(seed), task, cfg.frozen, cfg.augment_pad)
    status, message = "ok", ""
    try:
        trainer.fit(train)
    except TrainingAborted as exc:
        net.load_state(exc.last_state)
        status, message = "failed", str(exc)
        log.warning("%s seed %d aborted: %s", label, seed, exc)

    ckpt_dir = Path(cfg.out_dir) / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    ckpt = ckpt_dir / f"{label}-seed{seed}.ckpt"
    texts, tensors = trainer.checkpoint_payload(init_state)
    texts["experiment"] = cfg.to_text()
    if train.norm_mean is not None:
        tensors["data/norm_mean"] = train.norm_mean
    archive.save(ckpt, texts, tensors)

    tr = _metrics(net, train, task)
    return RunResult(label, seed, status, message,
                     train_loss=tr["loss"], train_error=tr["error"],
                     val_error=_metrics(net, val, task)["error"],
                     test_error=_metrics(net, test, task)["error"],
                     checkpoint=str(ckpt.relative_to(cfg.out_dir)))


def _run_job(job):
    return run_one(*job)


def run_jobs(jobs: list[tuple[ExperimentConfig, int, str]], workers: int) -> list[RunResult]:
    """Run independent jobs, in a process pool when ``workers > 1``; results keep job order."""
    if workers <= 1 or len(jobs) <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))


# -- summaries and report files --------------------------------------------------------------

def mean_std(values) -> tuple[float, float]:
    """Mean and sample standard deviation (ddof=1; 0 for a single value) of finite values."""
    v = np.asarray([x for x in values if math.isfinite(x)], dtype=float)
    if v.size == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def _num(v: float) -> str:
    return "nan" if not math.isfinite(v) else format(v, ".10g")


def _pct(mean: float, std: float) -> str:
    return f"{100 * mean:.2f} ({100 * std:.2f})%"


def write_meta(out_dir: Path, command: str, cfg: ExperimentConfig, started: float, extra=None):
    meta = {
        "command": command,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "elapsed_seconds": round(time.time() - started, 3),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": asdict(cfg),
    }
    meta.update(extra or {})
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _runs_csv(results: list[RunResult]) -> str:
    lines = ["row,seed,status," + ",".join(METRICS) + ",checkpoint"]
    for r in results:
        vals = ",".join(_num(getattr(r, m)) for m in METRICS)
        lines.append(f"{r.label},{r.seed},{r.status},{vals},{r.checkpoint}")
    return "\n".join(lines) + "\n"


@dataclass
class TrainReport:
    results: list[RunResult]
    csv_path: Path
    txt_path: Path

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.results)

    def summary(self, metric: str = "test_error") -> tuple[float, float]:
        return mean_std(getattr(r, metric) for r in self.results if r.ok)


def cmd_train(cfg: ExperimentConfig) -> TrainReport:
    """Train ``cfg.repetitions`` seeds and write report.csv, report.txt and meta.json."""
    cfg.validate()
    started = time.time()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = run_jobs([(cfg, s, "run") for s in cfg.seeds()], cfg.workers)

    csv = _runs_csv(results)
    stats = {m: mean_std(getattr(r, m) for r in results if r.ok) for m in METRICS}
    csv += "mean,,," + ",".join(_num(stats[m][0]) for m in METRICS) + ",\n"
    csv += "std,,," + ",".join(_num(stats[m][1]) for m in METRICS) + ",\n"
    (out / "report.csv").write_text(csv)

    n_ok = sum(r.ok for r in results)
    lines = [f"runs: {n_ok}/{len(results)} completed", f"note: {RESEED_NOTE}", ""]
    lines += [f"{m:<12} {_num(stats[m][0])} (std {_num(stats[m][1])})" for m in METRICS]
    lines += [f"seed {r.seed}: {r.status} {r.message}".rstrip() for r in results if not r.ok]
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    write_meta(out, "train", cfg, started)
    return TrainReport(results, out / "report.csv", out / "report.txt")


def cmd_eval(checkpoint, manifest, split: str = "test") -> dict[str, float]:
    """Evaluate a saved model on one manifest split, reusing its stored normalisation."""
    texts, tensors = archive.load(checkpoint)
    net = load_network(texts, tensors)
    m = read_manifest(manifest)
    ds = load_split(m, split)
    if ds is None:
        raise ConfigError(f"manifest {manifest} has no {split} split")
    if "data/norm_mean" in tensors:
        ds = apply_normalization(ds, tensors["data/norm_mean"].reshape(ds.feature_shape))
    return evaluate(net, ds, m.get("task", "classification"))


# -- sweeps -----------------------------------------------------------------------------------------

@dataclass
class SweepRow:
    label: str
    title: str
    results: list[RunResult]

    def stats(self, metric: str = "test_error") -> tuple[float, float]:
        return mean_std(getattr(r, metric) for r in self.results if r.ok)

    @property
    def n_ok(self) -> int:
        return sum(r.ok for r in self.results)


def _cell(row: SweepRow, metric: str = "test_error") -> str:
    n = len(row.results)
    if row.n_ok == 0:
        return f"failed ({n}/{n} runs)"
    text = _pct(*row.stats(metric))
    if row.n_ok < n:
        text += f" [{n - row.n_ok}/{n} runs failed]"
    return text


def _write_sweep(out: Path, name: str, rows: list[SweepRow], header: str):
    lines = ["row,title,n_ok,n_runs,test_error_mean,test_error_std,val_error_mean,val_error_std"]
    for row in rows:
        t, v = row.stats("test_error"), row.stats("val_error")
        lines.append(f"{row.label},{row.title},{row.n_ok},{len(row.results)},"
                     f"{_num(t[0])},{_num(t[1])},{_num(v[0])},{_num(v[1])}")
    (out / f"{name}.csv").write_text("\n".join(lines) + "\n")
    (out / f"{name}_runs.csv").write_text(_runs_csv([r for row in rows for r in row.results]))
    width = max(len(header), *(len(r.title) for r in rows)) + 2
    txt = [f"{header:<{width}}Error rate (mean (std) over seeds)", "-" * (width + 36)]
    txt += [f"{row.title:<{width}}{_cell(row)}" for row in rows]
    txt += ["", f"note: {RESEED_NOTE}"]
    (out / f"{name}.txt").write_text("\n".join(txt) + "\n")


def _sweep(cfg: ExperimentConfig, variants: list[tuple[str, str, ExperimentConfig]]) -> list[SweepRow]:
    jobs = [(vcfg, seed, label) for label, _, vcfg in variants for seed in cfg.seeds()]
    results = run_jobs(jobs, cfg.workers)
    n = len(cfg.seeds())
    return [SweepRow(label, title, results[i * n:(i + 1) * n]) for i, (label, title, _) in enumerate(variants)]


def cmd_sweep_s(cfg: ExperimentConfig, S_values, include_frozen: bool = True) -> list[SweepRow]:
    """ReLU baseline, optional frozen S=1 row, then one learned-APL row per S."""
    if any(s < 0 for s in S_values):
        raise ConfigError(f"S values must be >= 0, got {list(S_values)}")
    base = cfg.replace(frozen=False)
    base.validate()
    started = time.time()
    variants = [("relu", "baseline", base.replace(activation="relu"))]
    if include_frozen:
        variants.append(("S1_frozen", "S=1 (activation not learned)",
                         base.replace(activation="apl", S=1, frozen=True)))
    variants += [(f"S{s}", f"S={s}", base.replace(activation="apl", S=s)) for s in S_values]
    rows = _sweep(base, variants)
    out = Path(cfg.out_dir)
    _write_sweep(out, "sweep_s", rows, "Values of S")
    write_meta(out, "sweep-s", cfg, started, {"S_values": list(S_values), "include_frozen": include_frozen})
    return rows


def cmd_sweep_k(cfg: ExperimentConfig, k_values=LEAKY_K_GRID) -> tuple[float, list[SweepRow]]:
    """Leaky ReLU over a grid of negative-side slopes; returns the k with the lowest validation error."""
    base = cfg.replace(activation="leaky_relu", frozen=False)
    base.validate()
    if base.val_fraction <= 0:
        raise ConfigError("selecting k needs val_fraction > 0")
    started = time.time()
    rows = _sweep(base, [(f"k{k:g}", f"k={k:g}", base.replace(k=k)) for k in k_values])
    scores = [row.stats("val_error")[0] for row in rows]
    finite = [(s, i) for i, s in enumerate(scores) if math.isfinite(s)]
    if not finite:
        raise RuntimeError("every leaky ReLU run failed")
    best = k_values[min(finite)[1]]
    out = Path(cfg.out_dir)
    _write_sweep(out, "sweep_k", rows, "Leaky ReLU slope")
    with open(out / "sweep_k.txt", "a") as fh:
        fh.write(f"selected k = {best:g} (lowest mean validation error)\n")
    write_meta(out, "sweep-k", cfg, started, {"k_values": list(k_values), "selected_k": best})
    return best, rows


# -- activation export ----------------------------------------------------------------------------------

def select_apl_layers(net: Network, selector: str) -> list[int]:
    """``all`` or a comma list of layer indices (``3`` or ``L3``); only APL layers can match."""
    apl = net.apl_layers()
    if selector.strip() == "all":
        chosen = apl
    else:
        try:
            wanted = {int(s.strip().lstrip("L")) for s in selector.split(",") if s.strip()}
        except ValueError:
            raise ConfigError(f"bad layer selector {selector!r}") from None
        chosen = [t for t in apl if t in wanted]
    if not chosen:
        raise ConfigError(f"selector {selector!r} matches no APL layer (APL layers: {apl})")
    return chosen


def cmd_export_activations(checkpoint, selector: str = "all", grid=(-5.0, 5.0, 1001),
                           out_dir=None) -> list[Path]:
    """Per selected layer, a CSV of x, h_init_i(x), h_final_i(x) plus tail-slope summary rows."""
    x_min, x_max, n = float(grid[0]), float(grid[1]), int(grid[2])
    if n < 2 or not x_min < x_max:
        raise ConfigError(f"grid needs x_min < x_max and n >= 2, got {grid}")
    texts, tensors = archive.load(checkpoint)
    net = load_network(texts, tensors)
    init = load_network(texts, tensors, "init/") if any(k.startswith("init/") for k in tensors) else None
    out = Path(out_dir) if out_dir is not None else Path(checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    xs = np.linspace(x_min, x_max, n)
    stem = Path(checkpoint).stem
    paths = []
    for t in select_apl_layers(net, selector):
        final = net.apl_params(t)
        m = min(final.M, MAX_EXPORT_NEURONS)
        nets = [("h_init", init.apl_params(t))] if init is not None else []
        nets.append(("h_final", final))
        header, cols, left, right = ["x"], [xs], [""], [""]
        curves = {name: apl_forward(np.repeat(xs[:, None], m, axis=1), p.a[:m], p.b[:m]) for name, p in nets}
        for i in range(m):
            for name, p in nets:
                header.append(f"{name}_{i}")
                cols.append(curves[name][:, i])
                f = apl_to_pwl(p.row(i))
                left.append(_exact(f.left_slope))
                right.append(_exact(f.right_slope))
        body = np.column_stack(cols)
        lines = [",".join(header)]
        lines += [",".join(_exact(v) for v in row) for row in body]
        lines.append("left_tail_slope" + ",".join(left))
        lines.append("right_tail_slope" + ",".join(right))
        path = out / f"{stem}-L{t}-activations.csv"
        path.write_text("\n".join(lines) + "\n")
        paths.append(path)
    return paths


def _exact(v: float) -> str:
    return format(float(v), ".17g")


def read_export(path) -> tuple[list[str], np.ndarray, dict[str, np.ndarray]]:
    """Parse an exported activation CSV into (header, grid rows, summary rows)."""
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    rows, summary = [], {}
    for line in lines[1:]:
        first, *rest = line.split(",")
        if first.endswith("_tail_slope"):
            summary[first] = np.array([float(v) for v in rest])
        else:
            rows.append([float(first)] + [float(v) for v in rest])
    return header, np.array(rows), summary
