"""Command-line entry point: ``copdflow <subcommand> [options]``.

Subcommands run one pipeline stage each; ``pipeline`` chains them and skips
stages whose recorded inputs and output checksums still match.

Exit codes: 0 ok, 2 configuration, 3 environment (simulation failure rate),
4 training divergence, 5 missing or corrupt artifact, 6 empty input.
"""

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import CLASSES, __version__, dataset, metrics
from .classifier import FlowNetClassifier
from .errors import (ContractError, MissingArtifactError, ParseError, SimulationEnvironmentError,
                     TrainingDivergedError)
from .flowsim import SimConfig
from .gan import FlowGAN, write_history, write_sample_grid
from .tensor import Rng

EXIT_OK, EXIT_CONFIG, EXIT_ENV, EXIT_DIVERGED, EXIT_MISSING, EXIT_EMPTY = 0, 2, 3, 4, 5, 6


class ConfigError(Exception):
    pass


class EmptyInputError(Exception):
    pass


def _ints(text):
    return tuple(int(v) for v in str(text).split(",") if v.strip())


@dataclasses.dataclass
class PipelineConfig:
    seed: int = 0
    data_dir: str = "data"
    checkpoints_dir: str = "checkpoints"
    reports_dir: str = "reports"
    sim_tau: float = 1.4
    sim_inlet_speed: float = 0.05
    sim_max_iters: int = 50000
    sim_convergence_tol: float = 1e-6
    sim_workers: int = 1
    gan_steps: int = 600
    gan_batch: int = 16
    gan_lr: float = 2e-4
    gan_beta1: float = 0.5
    gan_generator_widths: tuple = (64, 32, 16, 8)
    gan_discriminator_widths: tuple = (8, 16, 32, 64)
    clf_epochs: int = 60
    clf_batch_size: int = 16
    clf_lr: float = 1e-3
    clf_patience: int = 10
    counts_left: int = 45
    counts_right: int = 113
    counts_both: int = 137
    counts_target: int = 400

    @classmethod
    def keys(cls):
        out = {}
        for f in dataclasses.fields(cls):
            section, _, rest = f.name.partition("_")
            dotted = f"{section}.{rest}" if section in ("sim", "gan", "clf", "counts") else f.name
            out[dotted] = f
        return out

    def set(self, key, value):
        fields = self.keys()
        if key not in fields:
            raise ConfigError(f"unknown configuration key {key!r}")
        f = fields[key]
        kind = type(f.default)
        try:
            if kind is tuple:
                parsed = _ints(value)
            elif kind is int:
                parsed = int(value)
            elif kind is float:
                parsed = float(value)
            else:
                parsed = str(value)
        except ValueError:
            raise ConfigError(f"invalid value {value!r} for {key}") from None
        setattr(self, f.name, parsed)

    def validate(self):
        dirs = [os.path.abspath(d) for d in (self.data_dir, self.checkpoints_dir, self.reports_dir)]
        if len(set(dirs)) != 3:
            raise ConfigError("data_dir, checkpoints_dir and reports_dir must be distinct")
        if self.clf_batch_size < 2:
            raise ConfigError("clf.batch_size must be at least 2")
        if min(self.counts_left, self.counts_right, self.counts_both) < 0 or self.counts_target < 0:
            raise ConfigError("counts must be non-negative")
        try:
            self.sim_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def sim_config(self):
        return SimConfig(tau=self.sim_tau, inlet_speed=self.sim_inlet_speed, max_iters=self.sim_max_iters,
                         convergence_tol=self.sim_convergence_tol)

    def base_counts(self):
        return {"left": self.counts_left, "right": self.counts_right, "both": self.counts_both}


def parse_config_text(text, source, cfg=None):
    cfg = cfg or PipelineConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}: line {lineno}: expected key=value")
        try:
            cfg.set(key.strip(), value.strip())
        except ConfigError as exc:
            raise ConfigError(f"{source}: line {lineno}: {exc}") from None
    return cfg


def load_config(args):
    """Defaults, then the config file, then COPDFLOW_SEED, then command-line flags."""
    cfg = PipelineConfig()
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parse_config_text(path.read_text(), str(path), cfg)
    env_seed = os.environ.get("COPDFLOW_SEED")
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"COPDFLOW_SEED must be an integer, got {env_seed!r}") from None
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        cfg.set(key.strip(), value.strip())
    for name in ("seed", "data_dir", "checkpoints_dir", "reports_dir"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if getattr(args, "workers", None) is not None:
        cfg.sim_workers = args.workers
    cfg.validate()
    return cfg


def _derived_seed(cfg, *keys):
    return Rng(cfg.seed).spawn(*keys).seed


def _out(msg):
    print(msg, flush=True)


# stage bookkeeping ------------------------------------------------------------

def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _stamp_path(cfg, stage):
    return Path(cfg.checkpoints_dir) / "stages" / f"{stage}.json"


# configuration fields each stage depends on, by name prefix
_STAGE_CONFIG = {"simulate": ("seed", "data_dir", "sim_", "counts_"), "train-gan": ("seed", "gan_"),
                 "augment": ("seed", "gan_", "counts_target"), "train-clf": ("seed", "clf_"), "eval": ("clf_",)}


def _stage_inputs(cfg, stage, files):
    prefixes = next(v for k, v in _STAGE_CONFIG.items() if stage.startswith(k))
    config = {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(cfg).items()
              if k.startswith(prefixes) and k != "sim_workers"}
    payload = {"stage": stage, "config": config, "files": {str(f): _sha256(f) for f in files}}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _stage_done(cfg, stage, inputs):
    path = _stamp_path(cfg, stage)
    if not path.exists():
        return False
    try:
        stamp = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError):
        return False
    if stamp.get("inputs") != inputs:
        return False
    for name, digest in stamp.get("outputs", {}).items():
        if not Path(name).exists() or _sha256(name) != digest:
            return False
    return True


def _record_stage(cfg, stage, inputs, outputs):
    path = _stamp_path(cfg, stage)
    path.parent.mkdir(parents=True, exist_ok=True)
    stamp = {"inputs": inputs, "outputs": {str(p): _sha256(p) for p in sorted(map(str, outputs))}}
    path.write_text(json.dumps(stamp, indent=1, sort_keys=True) + "\n")


def _paths(cfg):
    data = Path(cfg.data_dir)
    ckpt = Path(cfg.checkpoints_dir)
    rep = Path(cfg.reports_dir)
    return {
        "manifest": data / "manifest.csv",
        "augmented": data / "manifest_augmented.csv",
        "geometry": data / "geometry.csv",
        "gan": {c: ckpt / f"gan_{c}.cfn" for c in CLASSES},
        "gan_loss": {c: ckpt / f"gan_{c}_loss.csv" for c in CLASSES},
        "gan_grid": {c: ckpt / f"gan_{c}_samples.pgm" for c in CLASSES},
        "clf": {False: ckpt / "clf_base.cfn", True: ckpt / "clf_augmented.cfn"},
        "history": {False: rep / "history_base.csv", True: rep / "history_augmented.csv"},
        "report": {False: rep / "base", True: rep / "augmented"},
    }


def _manifest_files(manifest, cfg):
    return [Path(cfg.data_dir) / e.file for e in manifest]


# stages -----------------------------------------------------------------------

def run_simulate(cfg):
    p = _paths(cfg)
    manifest = dataset.generate_base(_derived_seed(cfg, "simulate"), cfg.data_dir, cfg.sim_config(),
                                     cfg.base_counts(), workers=cfg.sim_workers)
    counts = manifest.counts()
    _out("simulated: " + " ".join(f"{c}={counts[c]}" for c in CLASSES) + f" total={len(manifest)}")
    return [p["manifest"], p["geometry"]] + _manifest_files(manifest, cfg)


def _gan(cfg, label):
    return FlowGAN(generator_widths=cfg.gan_generator_widths, discriminator_widths=cfg.gan_discriminator_widths,
                   steps=cfg.gan_steps, batch_size=cfg.gan_batch, lr=cfg.gan_lr, beta1=cfg.gan_beta1,
                   seed=_derived_seed(cfg, "gan", label))


def run_train_gan(cfg, label):
    p = _paths(cfg)
    manifest = dataset.Manifest.load(p["manifest"])
    X, _ = dataset.load_arrays(dataset.Manifest(manifest.select("train", "real_proxy", label)), cfg.data_dir)
    if len(X) == 0:
        raise EmptyInputError(f"no training images for class {label}")
    gan = _gan(cfg, label)
    gan.fit(X)
    Path(cfg.checkpoints_dir).mkdir(parents=True, exist_ok=True)
    gan.save(p["gan"][label])
    write_history(p["gan_loss"][label], gan.history_)
    write_sample_grid(p["gan_grid"][label], gan, Rng(_derived_seed(cfg, "grid", label)))
    d, g = gan.history_[-1]
    _out(f"gan {label}: {len(X)} images, {len(gan.history_)} steps, final d_loss={d:.4f} g_loss={g:.4f}")
    return [p["gan"][label], p["gan_loss"][label], p["gan_grid"][label]]


def _load_gan(cfg, label):
    path = _paths(cfg)["gan"][label]
    if not path.exists():
        raise MissingArtifactError(f"GAN checkpoint for class {label} not found: {path}")
    try:
        return _gan(cfg, label).load(path)
    except (ParseError, ContractError) as exc:
        raise MissingArtifactError(f"unusable GAN checkpoint {path}: {exc}") from None


def run_augment(cfg):
    p = _paths(cfg)
    base = dataset.Manifest.load(p["manifest"])
    start = dataset.Manifest.load(p["augmented"]) if p["augmented"].exists() else base
    need = dataset.synthetic_needed(start, cfg.counts_target)
    gans = {c: _load_gan(cfg, c) for c in CLASSES if need[c]}
    manifest = dataset.rebalance(start, gans, cfg.data_dir, _derived_seed(cfg, "augment"), cfg.counts_target)
    manifest.save(p["augmented"])
    real = manifest.counts(provenance="real_proxy")
    synth = manifest.counts(provenance="synthetic")
    for c in CLASSES:
        _out(f"augment {c}: real={real[c]} synthetic={synth[c]} total={real[c] + synth[c]}")
    return [p["augmented"]] + _manifest_files(manifest, cfg)


def _manifest_for(cfg, augmented):
    p = _paths(cfg)
    return dataset.Manifest.load(p["augmented"] if augmented else p["manifest"])


def _classifier(cfg):
    return FlowNetClassifier(epochs=cfg.clf_epochs, batch_size=cfg.clf_batch_size, lr=cfg.clf_lr,
                             patience=cfg.clf_patience, seed=_derived_seed(cfg, "classifier"))


def run_train_clf(cfg, augmented):
    p = _paths(cfg)
    manifest = _manifest_for(cfg, augmented)
    X, y = dataset.load_arrays(manifest, cfg.data_dir, split="train")
    if len(X) == 0:
        raise EmptyInputError("training split is empty")
    X_val, y_val = dataset.load_arrays(manifest, cfg.data_dir, split="val", provenance="real_proxy")
    clf = _classifier(cfg).fit(X, y, X_val, y_val)
    Path(cfg.checkpoints_dir).mkdir(parents=True, exist_ok=True)
    Path(cfg.reports_dir).mkdir(parents=True, exist_ok=True)
    clf.save(p["clf"][augmented])
    clf.write_history(p["history"][augmented])
    best = clf.history_["val_acc"][clf.best_epoch_ - 1]
    _out(f"classifier ({'augmented' if augmented else 'base'}): {len(X)} training images, "
         f"{clf.n_epochs_} epochs, best val accuracy {best:.4f} (epoch {clf.best_epoch_})")
    return [p["clf"][augmented], p["history"][augmented]]


def run_eval(cfg, augmented):
    p = _paths(cfg)
    manifest = _manifest_for(cfg, augmented)
    X, y = dataset.load_arrays(manifest, cfg.data_dir, split="test", provenance="real_proxy")
    if len(X) == 0:
        raise EmptyInputError("test split is empty")
    path = p["clf"][augmented]
    if not path.exists():
        raise MissingArtifactError(f"classifier checkpoint not found: {path}")
    try:
        clf = _classifier(cfg).load(path)
    except (ParseError, ContractError) as exc:
        raise MissingArtifactError(f"unusable classifier checkpoint {path}: {exc}") from None
    report = clf.evaluate(X, y)
    out_dir = metrics.write_report(report, p["report"][augmented])
    _out(f"eval ({'augmented' if augmented else 'base'}): accuracy {report.accuracy:.4f} "
         f"macro-F1 {report.macro_f1:.4f} on {report.n} test images")
    return report, sorted(out_dir.iterdir())


def run_pipeline(cfg):
    p = _paths(cfg)

    def stage(name, fn, inputs=()):
        digest = _stage_inputs(cfg, name, inputs)
        if _stage_done(cfg, name, digest):
            _out(f"[{name}] up to date, skipped")
            return
        _out(f"[{name}] running")
        _record_stage(cfg, name, digest, fn())

    stage("simulate", lambda: run_simulate(cfg))
    for c in CLASSES:
        stage(f"train-gan-{c}", lambda c=c: run_train_gan(cfg, c), [p["manifest"]])

    def fresh_augment():
        # inputs changed, so synthetic entries from an earlier run are stale
        p["augmented"].unlink(missing_ok=True)
        return run_augment(cfg)

    stage("augment", fresh_augment, [p["manifest"]] + [p["gan"][c] for c in CLASSES])
    reports = {}
    for aug in (False, True):
        tag = "augmented" if aug else "base"
        stage(f"train-clf-{tag}", lambda aug=aug: run_train_clf(cfg, aug),
              [p["augmented"] if aug else p["manifest"]])
        stage(f"eval-{tag}", lambda aug=aug: run_eval(cfg, aug)[1],
              [p["augmented"] if aug else p["manifest"], p["clf"][aug]])
        reports[aug] = metrics.read_report(p["report"][aug])
    # exact accuracies from the integer confusion counts, not the rounded CSV value
    pre, post = (float(np.trace(r["confusion"]) / r["confusion"].sum()) for r in (reports[False], reports[True]))
    _out(f"summary: accuracy before augmentation {pre:.4f}, after {post:.4f}, delta {post - pre:+.4f}")
    return reports


# argument parsing -------------------------------------------------------------

def _bool(text):
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="copdflow", description=__doc__.split("\n")[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False, formatter_class=fmt)
    common.add_argument("--config", default=None, help="key=value configuration file")
    common.add_argument("--seed", type=int, default=None, help="root seed (overrides config and COPDFLOW_SEED)")
    common.add_argument("--data-dir", dest="data_dir", default=None, help="dataset directory (config data_dir)")
    common.add_argument("--checkpoints-dir", dest="checkpoints_dir", default=None,
                        help="checkpoint directory (config checkpoints_dir)")
    common.add_argument("--reports-dir", dest="reports_dir", default=None, help="report directory (config reports_dir)")
    common.add_argument("--set", action="append", default=None, metavar="KEY=VALUE",
                        help="override one configuration key, e.g. gan.steps=100")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], formatter_class=fmt, help="simulate the base dataset")
    p.add_argument("--out", dest="data_dir", default=None, help="output dataset directory")
    p.add_argument("--workers", type=int, default=None, help="parallel simulation processes (config sim.workers)")
    p = sub.add_parser("train-gan", parents=[common], formatter_class=fmt, help="train per-class GANs")
    p.add_argument("--class", dest="label", choices=list(CLASSES) + ["all"], default="all",
                   help="class to train")
    sub.add_parser("augment", parents=[common], formatter_class=fmt, help="rebalance with synthetic images")
    p = sub.add_parser("train-clf", parents=[common], formatter_class=fmt, help="train the classifier")
    p.add_argument("--augmented", type=_bool, default=True, help="train on the rebalanced manifest")
    p = sub.add_parser("eval", parents=[common], formatter_class=fmt, help="evaluate on the test split")
    p.add_argument("--augmented", type=_bool, default=True, help="evaluate the classifier trained with augmentation")
    p = sub.add_parser("pipeline", parents=[common], formatter_class=fmt, help="run every stage, resuming if possible")
    p.add_argument("--workers", type=int, default=None, help="parallel simulation processes (config sim.workers)")
    return parser


def _dispatch(args):
    cfg = load_config(args)
    if args.command == "simulate":
        run_simulate(cfg)
    elif args.command == "train-gan":
        for c in (CLASSES if args.label == "all" else (args.label,)):
            run_train_gan(cfg, c)
    elif args.command == "augment":
        run_augment(cfg)
    elif args.command == "train-clf":
        run_train_clf(cfg, args.augmented)
    elif args.command == "eval":
        run_eval(cfg, args.augmented)
    elif args.command == "pipeline":
        run_pipeline(cfg)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _dispatch(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationEnvironmentError as exc:
        print(f"environment error: {exc}", file=sys.stderr)
        return EXIT_ENV
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except EmptyInputError as exc:
        print(f"empty input: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except (MissingArtifactError, ParseError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
