"""End-to-end training runs: config loading, the iteration loop, checkpoints,
metrics files and curve export."""

from __future__ import annotations

import csv
import logging
import math
import os
import re
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .data import load_corpus, sample_subset
from .errors import ConfigurationError, NumericalError, ParseError
from .es import EsConfig, es_step
from .fitness import subset_fitness
from .memory import memory_report
from .model import ModelConfig, init_params, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "ESPRETRAIN_OUTPUT_DIR"
METRICS_FILE = "metrics.csv"
TIMING_FILE = "timing.csv"
SNAPSHOT_FILE = "resolved_config.toml"
FINAL_CHECKPOINT = "final.bin"
CHECKPOINT_PATTERN = re.compile(r"ckpt_(\d{6})\.bin$")

METRIC_COLUMNS = (
    "iteration", "loss", "reward_mean", "reward_max", "reward_min", "sigma", "alpha",
    "update_norm", "update_max_abs", "restore_entries", "clamped", "center_loss",
    "es_state_floats", "grad_state_floats",
)
TIMING_COLUMNS = ("iteration", "wall_ms")


@dataclass(frozen=True)
class DataConfig:
    corpus_path: str = "corpus.txt"
    line_cap: int = 10000
    max_seq_len: int = 256
    tokenizer: str = "char"


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    es: EsConfig = field(default_factory=EsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    iterations: int = 1000
    eval_samples: int = 5000
    micro_batch: int = 16
    master_seed: int = 0
    checkpoint_every: int = 100
    output_dir: str = "runs/default"
    eval_center: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if self.eval_samples < 1:
            raise ConfigurationError("eval_samples must be >= 1")
        if self.micro_batch < 1:
            raise ConfigurationError("micro_batch must be >= 1")
        if self.checkpoint_every < 0:
            raise ConfigurationError("checkpoint_every must be >= 0")
        if self.data.line_cap < 1 or self.data.max_seq_len < 2:
            raise ConfigurationError("line_cap must be >= 1 and max_seq_len >= 2")
        if self.data.max_seq_len > self.model.max_seq:
            raise ConfigurationError(
                f"max_seq_len {self.data.max_seq_len} exceeds the model's max_seq {self.model.max_seq}")

    @classmethod
    def from_dict(cls, data: dict, base_dir=None) -> "RunConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        model = ModelConfig.from_dict(data.pop("model", {}))
        es = EsConfig.from_dict(data.pop("es", {}))
        raw_data = dict(data.pop("data", {}))
        unknown = set(raw_data) - {f.name for f in fields(DataConfig)}
        if unknown:
            raise ConfigurationError(f"unknown data keys: {sorted(unknown)}")
        if base_dir is not None and "corpus_path" in raw_data:
            raw_data["corpus_path"] = str((Path(base_dir) / raw_data["corpus_path"]).resolve())
        if base_dir is not None and "output_dir" in data:
            data["output_dir"] = str((Path(base_dir) / data["output_dir"]).resolve())
        if model.vocab < _tokenizer_vocab(raw_data.get("tokenizer", DataConfig.tokenizer)):
            raise ConfigurationError("model vocab is smaller than the tokenizer's")
        try:
            return cls(model=model, es=es, data=DataConfig(**raw_data), **data)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    def to_dict(self) -> dict:
        out = asdict(self)
        out["es"]["group_multipliers"] = [asdict(g) for g in self.es.group_multipliers]
        return out


def _tokenizer_vocab(kind: str) -> int:
    from .data import get_tokenizer

    return get_tokenizer(kind).vocab


def load_config(path) -> RunConfig:
    """Read a TOML run config; relative paths resolve against its directory.

    ``ESPRETRAIN_OUTPUT_DIR`` overrides ``output_dir``.
    """
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    config = RunConfig.from_dict(raw, base_dir=path.parent)
    override = os.environ.get(OUTPUT_DIR_ENV)
    if override:
        config = replace(config, output_dir=str(Path(override).resolve()))
    return config


def write_snapshot(config: RunConfig, path) -> None:
    Path(path).write_text(tomli_w.dumps(config.to_dict()))


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _checkpoints(out_dir: Path) -> dict:
    found = {}
    for p in out_dir.glob("ckpt_*.bin"):
        m = CHECKPOINT_PATTERN.search(p.name)
        if m:
            found[int(m.group(1))] = p
    return found


def _truncate_csv(path: Path, last_iteration: int) -> None:
    """Keep the header and rows with iteration <= last_iteration."""
    if not path.exists():
        return
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    kept = rows[:1] + [r for r in rows[1:] if r and int(r[0]) <= last_iteration]
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(kept)


@dataclass
class RunOutcome:
    status: int
    iterations_done: int
    output_dir: Path
    message: str = ""


def run(config: RunConfig, resume: bool = False, on_iteration=None) -> RunOutcome:
    """Run (or resume) training. Returns a RunOutcome whose status is 0 or 1.

    ``on_iteration(step_result)`` is called after each completed iteration,
    after its metrics row and any checkpoint are on disk.
    """
    out_dir = Path(config.output_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        return RunOutcome(1, 0, out_dir, f"output directory {out_dir} is not writable: {exc}")
    try:
        corpus = load_corpus(config.data.corpus_path, config.data.tokenizer, config.data.line_cap)
        if config.eval_samples > len(corpus):
            raise ConfigurationError(
                f"eval_samples {config.eval_samples} exceeds the corpus size {len(corpus)}")
    except (ConfigurationError, ParseError) as exc:
        return RunOutcome(1, 0, out_dir, str(exc))

    metrics_path, timing_path = out_dir / METRICS_FILE, out_dir / TIMING_FILE
    start = 1
    params = None
    if resume:
        found = _checkpoints(out_dir)
        final = out_dir / FINAL_CHECKPOINT
        if final.exists():
            found.setdefault(int(load_checkpoint(final)[2]["iteration"]), final)
        if found:
            last = max(found)
            params, saved_cfg, _ = load_checkpoint(found[last])
            if saved_cfg != config.model:
                return RunOutcome(1, 0, out_dir, "checkpoint model config differs from the run config")
            start = last + 1
            _truncate_csv(metrics_path, last)
            _truncate_csv(timing_path, last)
    if params is None:
        params = init_params(config.model, config.master_seed)
        for path, cols in ((metrics_path, METRIC_COLUMNS), (timing_path, TIMING_COLUMNS)):
            with open(path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(cols)
        for stale in _checkpoints(out_dir).values():
            stale.unlink()
    write_snapshot(config, out_dir / SNAPSHOT_FILE)

    report = memory_report(config.model, config.es, config.micro_batch, config.data.max_seq_len)

    def checkpoint(iteration, name=None):
        save_checkpoint(out_dir / (name or f"ckpt_{iteration:06d}.bin"), params, config.model,
                        {"iteration": iteration, "master_seed": config.master_seed})

    done = start - 1
    with open(metrics_path, "a", newline="") as mf, open(timing_path, "a", newline="") as tf:
        metrics_writer = csv.writer(mf, lineterminator="\n")
        timing_writer = csv.writer(tf, lineterminator="\n")
        for iteration in range(start, config.iterations + 1):
            t0 = time.perf_counter()
            plan = sample_subset(config.master_seed, iteration, len(corpus), config.eval_samples)

            def fitness_fn(p, plan=plan):
                return subset_fitness(p, config.model, corpus, plan, config.data.max_seq_len, config.micro_batch)

            try:
                step = es_step(params, config.es, config.master_seed, iteration, fitness_fn,
                               eval_center=config.eval_center)
            except NumericalError as exc:
                checkpoint(done)
                mf.flush()
                return RunOutcome(1, done, out_dir, f"iteration {iteration}: {exc}")
            wall_ms = (time.perf_counter() - t0) * 1e3
            metrics_writer.writerow([_fmt(v) for v in (
                iteration, step.loss, step.reward_mean, float(step.rewards.max()), float(step.rewards.min()),
                step.sigma, step.alpha, step.update_norm, step.update_max_abs, step.restore_entries,
                step.clamped, None if step.center_reward is None else -step.center_reward,
                report.es_total, report.grad_total,
            )])
            timing_writer.writerow([iteration, f"{wall_ms:.3f}"])
            mf.flush()
            tf.flush()
            done = iteration
            if config.checkpoint_every and iteration % config.checkpoint_every == 0:
                checkpoint(iteration)
            if on_iteration is not None:
                on_iteration(step)
    checkpoint(done, FINAL_CHECKPOINT)
    return RunOutcome(0, done, out_dir, "ok")


def read_metrics(path) -> list:
    """Rows of a metrics file as dicts of floats (empty cells become None)."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "iteration":
            raise ParseError(f"{path}:1: missing header")
        for lineno, raw in enumerate(reader, start=2):
            if len(raw) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, found {len(raw)}")
            try:
                rows.append({k: (float(v) if v != "" else None) for k, v in zip(header, raw)})
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    return rows


def loss_curve_export(metrics_path, out_path=None, window: int = 20) -> list:
    """(iteration, loss, smoothed loss) rows; also written to ``out_path`` if given."""
    metrics_path = Path(metrics_path)
    with open(metrics_path, newline="") as fh:
        lines = list(csv.reader(fh))
    if not lines:
        raise ParseError(f"{metrics_path}:1: empty file")
    header = lines[0]
    try:
        it_col, loss_col = header.index("iteration"), header.index("loss")
    except ValueError:
        raise ParseError(f"{metrics_path}:1: header lacks iteration/loss columns") from None
    iterations, losses = [], []
    for lineno, row in enumerate(lines[1:], start=2):
        try:
            iterations.append(int(row[it_col]))
            loss = float(row[loss_col])
        except (ValueError, IndexError):
            raise ParseError(f"{metrics_path}:{lineno}: malformed row {row!r}") from None
        if not math.isfinite(loss):
            raise ParseError(f"{metrics_path}:{lineno}: non-finite loss")
        losses.append(loss)
    # Exact summation keeps the constant-series case exact.
    smoothed = [math.fsum(losses[max(0, k - window + 1):k + 1]) / min(k + 1, window) for k in range(len(losses))]
    series = list(zip(iterations, losses, smoothed))
    if out_path is not None:
        with open(out_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("iteration", "loss", "smoothed_loss"))
            w.writerows((i, repr(l), repr(s)) for i, l, s in series)
    return series
