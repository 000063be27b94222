"""Command-line front end: ``train``, ``eval``, ``check`` and ``gen-data``.

Exit codes: 0 success, 1 failure (check failure, divergence, I/O),
2 usage error (bad arguments or config).  Output defaults to
``$VLAE_OUTPUT_DIR`` (or ``./runs``).
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import check, checkpoint, data, linalg, models
from .checkpoint import Checkpoint, CheckpointError
from .models import METRIC_FIELDS, Metrics, Model, TrainConfig, TrainState
from .network import AdamState, MlpParams

log = logging.getLogger("vlae")

OUTPUT_ENV = "VLAE_OUTPUT_DIR"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
DATASET_KINDS = ("toy", "ppca", "flat", "idx")


class ConfigError(ValueError):
    pass


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    """Training hyperparameters plus dataset and output settings.

    ``dataset`` is one of ``toy`` and ``ppca`` (generated from ``data_seed``),
    ``flat`` (a file written by ``gen-data``) or ``idx`` (a directory with
    MNIST-format files).  ``record_wall_clock = false`` writes 0 in the
    timing column so metrics files compare byte for byte; real timings always
    go to ``timing.log``.
    """

    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: str = "toy"
    data_path: str = ""
    n_items: int = 2000
    noise_sigma: float = 0.05
    data_seed: int = 1234
    ppca_n: int = 8
    ppca_d: int = 2
    ppca_sigma2: float = 0.1
    mnist_limit: int = 0
    normalize: bool = True
    out_dir: str = ""
    checkpoint_every: int = 1
    resume: str = ""
    record_wall_clock: bool = True

    def __post_init__(self):
        if self.dataset not in DATASET_KINDS:
            raise ConfigError(f"dataset must be one of {DATASET_KINDS}, got {self.dataset!r}")
        if self.dataset in ("flat", "idx") and not self.data_path:
            raise ConfigError(f"dataset = {self.dataset} needs data_path")
        for name in ("n_items", "ppca_n", "ppca_d", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.mnist_limit < 0 or self.noise_sigma < 0 or not self.ppca_sigma2 > 0:
            raise ConfigError("mnist_limit and noise_sigma must be >= 0, ppca_sigma2 > 0")
        if self.train.head == "bernoulli" and self.dataset in ("toy", "ppca"):
            raise ConfigError("Bernoulli runs need intensity data (dataset = idx or flat)")
        if not self.out_dir:
            self.out_dir = str(default_output_dir())

    def to_text(self) -> str:
        lines = [f"{k} = {_format_value(v)}" for k, v in _flat_items(self)]
        return "\n".join(lines) + "\n"


_TRAIN_KEYS = {f.name: f for f in fields(TrainConfig)}
_RUN_KEYS = {f.name: f for f in fields(RunConfig) if f.name != "train"}


def _flat_items(rc: RunConfig):
    for name in _TRAIN_KEYS:
        yield name, getattr(rc.train, name)
    for name in _RUN_KEYS:
        yield name, getattr(rc, name)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(h) for h in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(name: str, raw: str, default):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, tuple):
            return tuple(int(h) for h in raw.split(",") if h.strip())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config(text: str) -> RunConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment; unknown keys rejected."""
    train_defaults = TrainConfig()
    train_kw, run_kw = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value")
        if key in train_kw or key in run_kw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if key in _TRAIN_KEYS:
            train_kw[key] = _parse_value(key, value, getattr(train_defaults, key))
        elif key in _RUN_KEYS:
            run_kw[key] = _parse_value(key, value, _RUN_KEYS[key].default)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    try:
        return RunConfig(train=TrainConfig(**train_kw), **run_kw)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


# ---------------------------------------------------------------------------
# datasets


def raw_dataset(rc: RunConfig) -> data.Dataset:
    """The dataset described by ``rc`` before normalization."""
    if rc.dataset == "toy":
        return data.gen_toy_curve(rc.n_items, rc.noise_sigma, linalg.make_rng(rc.data_seed))
    if rc.dataset == "ppca":
        return generate_ppca(rc.n_items, rc.ppca_n, rc.ppca_d, rc.ppca_sigma2, rc.data_seed)
    if rc.dataset == "flat":
        return data.load_flat(rc.data_path)
    return data.load_mnist(rc.data_path, rc.mnist_limit or None)


def generate_ppca(n: int, n_features: int, d: int, sigma2: float, seed: int) -> data.Dataset:
    rng = linalg.make_rng(seed)
    w = rng.standard_normal((n_features, d))
    b = rng.standard_normal(n_features)
    return data.gen_ppca(w, b, sigma2, n, rng)


def build_dataset(rc: RunConfig) -> data.Dataset:
    ds = raw_dataset(rc)
    if rc.train.head == "gaussian" and rc.normalize:
        ds = data.normalize(ds)
    return ds


# ---------------------------------------------------------------------------
# train state <-> checkpoint


def _put_params(tensors: dict, prefix: str, p: MlpParams) -> None:
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        tensors[f"{prefix}.w{i}"] = w
        tensors[f"{prefix}.b{i}"] = b
    tensors[f"{prefix}.log_sigma2"] = np.asarray(p.log_sigma2, dtype=np.float64)


def _get_params(tensors: dict, prefix: str, head: str) -> MlpParams:
    weights, biases = [], []
    while f"{prefix}.w{len(weights)}" in tensors:
        weights.append(tensors[f"{prefix}.w{len(weights)}"].copy())
        biases.append(tensors[f"{prefix}.b{len(biases)}"].copy())
    if not weights:
        raise CheckpointError(f"checkpoint has no {prefix} tensors")
    return MlpParams(weights, biases, head, float(tensors[f"{prefix}.log_sigma2"]))


def _put_adam(tensors: dict, prefix: str, opt: AdamState) -> None:
    for i, (m, v) in enumerate(zip(opt.m, opt.v)):
        tensors[f"{prefix}.m{i}"] = m
        tensors[f"{prefix}.v{i}"] = v
    tensors[f"{prefix}.step"] = np.asarray(float(opt.step))


def _get_adam(tensors: dict, prefix: str) -> AdamState:
    m, v = [], []
    while f"{prefix}.m{len(m)}" in tensors:
        m.append(tensors[f"{prefix}.m{len(m)}"].copy())
        v.append(tensors[f"{prefix}.v{len(v)}"].copy())
    return AdamState(m, v, int(tensors[f"{prefix}.step"]))


def _put_model(tensors: dict, prefix: str, model: Model) -> None:
    _put_params(tensors, f"{prefix}decoder", model.decoder)
    _put_params(tensors, f"{prefix}encoder", model.encoder)
    _put_adam(tensors, f"{prefix}decoder_opt", model.dec_opt)
    _put_adam(tensors, f"{prefix}encoder_opt", model.enc_opt)


def _encoder_head(cfg: TrainConfig) -> str:
    return "mean_logstd" if cfg.kind in ("vae", "savae") else "mean"


def _get_model(tensors: dict, prefix: str, cfg: TrainConfig) -> Model:
    return Model(cfg,
                 _get_params(tensors, f"{prefix}decoder", cfg.head),
                 _get_params(tensors, f"{prefix}encoder", _encoder_head(cfg)),
                 _get_adam(tensors, f"{prefix}decoder_opt"),
                 _get_adam(tensors, f"{prefix}encoder_opt"))


def state_to_checkpoint(state: TrainState, rc: RunConfig, ds: data.Dataset) -> Checkpoint:
    tensors: dict[str, np.ndarray] = {}
    _put_model(tensors, "", state.model)
    if state.best is not None:
        _put_model(tensors, "best.", state.best)
    tensors["state.epoch"] = np.asarray(float(state.epoch))
    tensors["state.best_val_elbo"] = np.asarray(state.best_val_elbo)
    tensors["state.best_epoch"] = np.asarray(float(state.best_epoch))
    tensors["state.bad_epochs"] = np.asarray(float(state.bad_epochs))
    tensors["history"] = np.array([[getattr(m, f) for f in METRIC_FIELDS]
                                   for m in state.history], dtype=np.float64
                                  ).reshape(len(state.history), len(METRIC_FIELDS))
    tensors["norm.mean"] = np.asarray(ds.feature_mean, dtype=np.float64)
    tensors["norm.scale"] = np.asarray(ds.feature_scale)
    return Checkpoint(tensors, rc.to_text(), checkpoint.rng_state(state.rng))


def state_from_checkpoint(ckpt: Checkpoint, cfg: TrainConfig) -> TrainState:
    t = ckpt.tensors
    best = _get_model(t, "best.", cfg) if "best.decoder.w0" in t else None
    history = [Metrics(int(row[0]), *(float(v) for v in row[1:])) for row in t["history"]]
    return TrainState(_get_model(t, "", cfg), checkpoint.restore_rng(ckpt.rng_state),
                      int(t["state.epoch"]), history, best, float(t["state.best_val_elbo"]),
                      int(t["state.best_epoch"]), int(t["state.bad_epochs"]))


# settings that may change when a run is resumed
_RESUMABLE = {"epochs", "patience", "out_dir", "resume", "checkpoint_every", "record_wall_clock"}


def _check_resume_compatible(saved: RunConfig, rc: RunConfig) -> None:
    ours, theirs = dict(_flat_items(rc)), dict(_flat_items(saved))
    diff = [k for k in ours if k not in _RESUMABLE and ours[k] != theirs[k]]
    if diff:
        raise ConfigError(f"resume config differs from checkpoint in: {', '.join(diff)}")


# ---------------------------------------------------------------------------
# metrics files


def metrics_csv(history: list[Metrics]) -> str:
    """Header plus one row per epoch; floats in shortest round-trip form."""
    buf = io.StringIO()
    writer = csv.writer(buf)  # RFC 4180: CRLF rows, minimal quoting
    writer.writerow(METRIC_FIELDS)
    for m in history:
        writer.writerow([repr(v) if isinstance(v, float) else v
                         for v in (getattr(m, f) for f in METRIC_FIELDS)])
    return buf.getvalue()


def read_metrics_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(rc: RunConfig) -> TrainState:
    """Train (or resume) and write metrics.csv, timing.log, last.ckpt, best.ckpt."""
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = build_dataset(rc)
    state = None
    if rc.resume:
        ckpt = checkpoint.load(rc.resume)
        _check_resume_compatible(parse_config(ckpt.config_text), rc)
        state = state_from_checkpoint(ckpt, rc.train)
    timing = open(out / "timing.log", "a")

    def on_epoch(st: TrainState, m: Metrics) -> None:
        timing.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} epoch={m.epoch} "
                     f"seconds={m.wall_clock_seconds!r}\n")
        timing.flush()
        if not rc.record_wall_clock:
            st.history[-1] = replace(m, wall_clock_seconds=0.0)
        log.info("epoch %d train_elbo %.4f val_elbo %.4f val_iwae %.4f",
                 m.epoch, m.train_elbo, m.val_elbo, m.val_iwae)
        (out / "metrics.csv").write_text(metrics_csv(st.history), newline="")
        if st.best_epoch == st.epoch:
            checkpoint.save(state_to_checkpoint(st, rc, ds), out / "best.ckpt")
        if st.epoch % rc.checkpoint_every == 0 or st.done:
            checkpoint.save(state_to_checkpoint(st, rc, ds), out / "last.ckpt")

    try:
        state = models.train(rc.train, ds, state, on_epoch)
    finally:
        timing.close()
    (out / "metrics.csv").write_text(metrics_csv(state.history), newline="")
    checkpoint.save(state_to_checkpoint(state, rc, ds), out / "last.ckpt")
    return state


@dataclass
class EvalReport:
    split: str
    n_items: int
    iwae_k: int
    seed: int
    elbo: float
    elbo_se: float
    iwae: float
    iwae_se: float

    def csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        row = asdict(self)
        writer.writerow(row.keys())
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row.values()])
        return buf.getvalue()


def _se(values: np.ndarray) -> float:
    return float(values.std(ddof=1) / np.sqrt(len(values))) if len(values) > 1 else 0.0


def cmd_eval(ckpt_path, data_path: str | None, iwae_k: int, split: str = "test",
             seed: int | None = None) -> EvalReport:
    """Evaluate the best model stored in a checkpoint on one split.

    Without ``data_path`` the dataset is rebuilt from the config echo.  A
    directory is read as MNIST-format IDX files, anything else as a flat
    file from ``gen-data``.  The checkpoint's normalization is applied.
    With the default seed, the validation split reproduces the recorded
    ``val_elbo`` exactly.
    """
    ckpt = checkpoint.load(ckpt_path)
    rc = parse_config(ckpt.config_text)
    cfg = rc.train
    prefix = "best." if "best.decoder.w0" in ckpt.tensors else ""
    model = _get_model(ckpt.tensors, prefix, cfg)
    if data_path:
        p = Path(data_path)
        ds = data.load_mnist(p, rc.mnist_limit or None) if p.is_dir() else data.load_flat(p)
    else:
        ds = raw_dataset(rc)
    items = ds.split(split)
    if ds.n_features != model.decoder.out_dim:
        raise ConfigError(f"data has {ds.n_features} features, model expects "
                          f"{model.decoder.out_dim}")
    if len(items) == 0:
        raise ConfigError(f"split {split!r} is empty")
    items = data.apply_normalization(items, ckpt.tensors["norm.mean"],
                                     float(ckpt.tensors["norm.scale"]))
    items = models.prepare_eval_items(cfg, items, split)
    seed = models.eval_seed(cfg) if seed is None else seed
    res = models.evaluate(model, items, seed, iwae_k)
    return EvalReport(split, len(items), iwae_k, seed, res.elbo_mean, _se(res.elbo),
                      res.iwae_mean, _se(res.iwae))


def cmd_check(fault: str | None = None, out=None) -> bool:
    out = out or sys.stdout
    start = time.perf_counter()
    results = check.run_checks(fault)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<17} {r.detail}", file=out)
    ok = all(r.passed for r in results)
    print(f"{'all suites passed' if ok else 'check failed'} "
          f"in {time.perf_counter() - start:.1f}s", file=out)
    return ok


def cmd_gen_data(kind: str, out_path, n: int, seed: int, noise_sigma: float = 0.05,
                 n_features: int = 8, latent_dim: int = 2, sigma2: float = 0.1) -> data.Dataset:
    if n < 1:
        raise ConfigError("n must be >= 1")
    if kind == "toy":
        ds = data.gen_toy_curve(n, noise_sigma, linalg.make_rng(seed))
    elif kind == "ppca":
        ds = generate_ppca(n, n_features, latent_dim, sigma2, seed)
        ds.meta.update(n_features_gen=n_features, latent_dim=latent_dim)
    else:
        raise ConfigError(f"unknown data kind {kind!r}")
    ds.meta["seed"] = seed
    data.save_flat(ds, out_path)
    return ds


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vlae", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("eval", help="ELBO and IWAE-k of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", help="flat data file or IDX directory")
    p.add_argument("--iwae-k", type=int, default=100)
    p.add_argument("--split", default="test", choices=data.SPLITS)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="CSV report path")

    p = sub.add_parser("check", help="run the oracle battery")
    p.add_argument("--inject-fault", choices=sorted(check.FAULTS))

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--kind", required=True, choices=("ppca", "toy"))
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=1234)
    p.add_argument("--noise-sigma", type=float, default=0.05)
    p.add_argument("--n-features", type=int, default=8)
    p.add_argument("--latent-dim", type=int, default=2)
    p.add_argument("--sigma2", type=float, default=0.1)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            rc = load_config(args.config)
            if args.out:
                rc.out_dir = args.out
            if args.resume:
                rc.resume = args.resume
            state = cmd_train(rc)
            print(f"trained {state.epoch} epochs; best val_elbo {state.best_val_elbo!r} "
                  f"at epoch {state.best_epoch}; output in {rc.out_dir}")
        elif args.command == "eval":
            if args.iwae_k < 1:
                raise ConfigError("--iwae-k must be >= 1")
            report = cmd_eval(args.ckpt, args.data, args.iwae_k, args.split, args.seed)
            print(f"split={report.split} n={report.n_items} seed={report.seed}")
            print(f"elbo {report.elbo!r} (se {report.elbo_se:.4g})")
            print(f"iwae-{report.iwae_k} {report.iwae!r} (se {report.iwae_se:.4g})")
            out = Path(args.out) if args.out else default_output_dir() / "eval.csv"
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(report.csv(), newline="")
        elif args.command == "check":
            return EXIT_OK if cmd_check(args.inject_fault) else EXIT_FAIL
        elif args.command == "gen-data":
            ds = cmd_gen_data(args.kind, args.out, args.n, args.seed, args.noise_sigma,
                              args.n_features, args.latent_dim, args.sigma2)
            print(f"wrote {len(ds.items)} x {ds.n_features} items to {args.out}")
    except ConfigError as exc:
        print(f"vlae: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except models.Divergence as exc:
        print(f"vlae: training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (OSError, ValueError) as exc:
        print(f"vlae: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
