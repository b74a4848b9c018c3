"""Command-line interface: ``lmbisnet {train,evaluate,predict,overlay,params,gradcheck}``.

Settings come from a ``key = value`` config file (``--config``); command-line
flags override file values, and file values override built-in defaults.
Exit codes: 0 success, 1 run failure (non-finite loss, failed gradient
check), 2 config error, 3 data error, 4 checkpoint error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from PIL import Image

from . import data, metrics, selfcheck
from .checkpoint import CheckpointError, apply_checkpoint, config_digest, load_checkpoint, make_checkpoint, save_checkpoint
from .model import TINY_CONFIG, NetworkConfig, build_network, count_parameters, forward, parameter_table
from .overlay import count_colors, render_overlay
from .tensor import NonFiniteError
from .training import VESSEL, AdamState, History, TrainConfig, train

log = logging.getLogger("lmbisnet")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 1, 2, 3, 4


class ConfigError(Exception):
    """Malformed or inconsistent run configuration."""


@dataclass(frozen=True)
class RunConfig:
    # network
    input_channels: int = 3
    num_classes: int = 2
    stage_widths: tuple = (14, 28, 56)
    multipath_width: int = 28
    passes: int = 2
    multipath: bool = True
    bidirectional: bool = True
    seed: int = 0
    # optimisation
    learning_rate: float = 0.001
    max_epochs: int = 50
    plateau_patience: int = 7
    lr_factor: float = 0.25
    early_stop_patience: int = 15
    batch_size: int = 2
    smoothing_eps: float = 1.0
    use_fov: bool = True
    val_threshold: float = 0.5
    # run
    manifest: str = ""
    out: str = "out"
    checkpoint: str = ""
    threshold: float = 0.5
    image_size: int = 512
    augment: bool = True
    save_optimizer: bool = False

    @property
    def pass_count(self) -> int:
        return self.passes if self.bidirectional else 1

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out) / "checkpoint.lmbs"

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            input_channels=self.input_channels, num_classes=self.num_classes,
            stage_widths=tuple(self.stage_widths), multipath_width=self.multipath_width,
            pass_count=self.pass_count, seed=self.seed, multipath=self.multipath,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, max_epochs=self.max_epochs,
            plateau_patience=self.plateau_patience, lr_factor=self.lr_factor,
            early_stop_patience=self.early_stop_patience, batch_size=self.batch_size, seed=self.seed,
            smoothing_eps=self.smoothing_eps, use_fov=self.use_fov, threshold=self.val_threshold,
        )

    def validate(self) -> "RunConfig":
        if self.passes not in (1, 2):
            raise ConfigError("passes must be 1 or 2")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("threshold must lie in [0, 1]")
        if self.image_size <= 0 or self.image_size % 4:
            raise ConfigError("image_size must be a positive multiple of 4")
        try:
            self.network_config()
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self


_FIELDS = {f.name: f for f in fields(RunConfig)}
_DEFAULTS = RunConfig()


def _coerce(key: str, text: str):
    kind = type(getattr(_DEFAULTS, key))
    t = text.strip()
    try:
        if kind is bool:
            low = t.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(t)
        if kind is tuple:
            return tuple(int(v) for v in t.replace(" ", "").split(",") if v)
        return kind(t)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    """``key = value`` lines to a dict of typed overrides; rejects unknown keys."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = str(v).lower()
        elif isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def load_run_config(path: str | None, overrides: dict) -> RunConfig:
    values = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_config_text(p.read_text(), str(p)))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return dataclasses.replace(_DEFAULTS, **values).validate()


# -- commands ------------------------------------------------------------------------


def _load_manifest(cfg: RunConfig) -> data.DatasetManifest:
    if not cfg.manifest:
        raise data.DataError("no dataset manifest given (set 'manifest' or pass --manifest)")
    return data.read_manifest(cfg.manifest)


def _load_model(cfg: RunConfig):
    model = build_network(cfg.network_config())
    ck = load_checkpoint(cfg.checkpoint_path, config_digest(model.config, cfg.train_config()))
    apply_checkpoint(model, ck)
    return model, ck


def cmd_train(cfg: RunConfig) -> int:
    manifest = _load_manifest(cfg)
    train_set = data.SampleSet(manifest, "train", cfg.image_size, augment=cfg.augment)
    val_set = data.SampleSet(manifest, "train", cfg.image_size, augment=False)
    if len(train_set) == 0:
        raise data.DataError(f"{manifest.name}: empty training split")
    tcfg = cfg.train_config()
    model = build_network(cfg.network_config())
    opt = AdamState()
    model, history = train(model, train_set, val_set, tcfg, optimizer=opt)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.checkpoint_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(cfg.checkpoint_path, make_checkpoint(model, tcfg, opt if cfg.save_optimizer else None, history))
    (out / "history.txt").write_text(format_history(history))
    print(f"checkpoint={cfg.checkpoint_path}")
    print(f"epochs={len(history.val_dice)} final_val_dice={history.val_dice[-1]:.6f}")
    return EXIT_OK


def format_history(history: History) -> str:
    lines = ["epoch train_loss val_dice lr"]
    for i, (l, d, r) in enumerate(zip(history.train_loss, history.val_dice, history.lr)):
        lines.append(f"{i} {l:.10f} {d:.10f} {r:.10e}")
    if history.stopped_early:
        lines.append("# stopped early")
    return "\n".join(lines) + "\n"


def cmd_evaluate(cfg: RunConfig, split: str = "test") -> int:
    manifest = _load_manifest(cfg)
    samples = data.SampleSet(manifest, split, cfg.image_size, augment=False)
    if len(samples) == 0:
        raise data.DataError(f"{manifest.name}: {split} split is empty")
    model, _ = _load_model(cfg)
    out = Path(cfg.out)
    (out / "per_image").mkdir(parents=True, exist_ok=True)
    (out / "overlays").mkdir(parents=True, exist_ok=True)
    rows, total, scores, labels = [], metrics.ConfusionCounts(), [], []
    for sid, s in zip(samples.ids, samples):
        prob = forward(model, s.image[None].astype(np.float32))[0, VESSEL]
        report = metrics.evaluate_image(prob, s.gt, s.fov, cfg.threshold)
        rows.append((sid, report))
        total = total + report.counts
        mask = s.fov.astype(bool)
        scores.append(prob[mask])
        labels.append(s.gt.astype(bool)[mask])
        (out / "per_image" / f"{sid}.txt").write_text(metrics.format_key_values(report))
        Image.fromarray(render_overlay(metrics.binarize(prob, cfg.threshold), s.gt, s.fov)).save(
            out / "overlays" / f"{sid}.png")
    try:
        auc = metrics.roc_auc(np.concatenate(scores), np.concatenate(labels))
    except ValueError:
        auc = None
    aggregate = metrics.compute_metrics(total, auc)
    rows.append(("aggregate", aggregate))
    (out / "metrics.txt").write_text(metrics.format_key_values(aggregate))
    table = metrics.format_table(rows)
    (out / "report.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_predict(cfg: RunConfig, image_path: str) -> int:
    image = data.resize(data.read_image(image_path), cfg.image_size, "image")
    model, _ = _load_model(cfg)
    prob = forward(model, image[None].astype(np.float32))[0, VESSEL]
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(image_path).stem
    prob_path, mask_path = out / f"{stem}_prob.png", out / f"{stem}_mask.png"
    Image.fromarray(probability_image(prob)).save(prob_path)
    Image.fromarray(metrics.binarize(prob, cfg.threshold) * np.uint8(255)).save(mask_path)
    print(f"prob={prob_path}\nmask={mask_path}")
    return EXIT_OK


def probability_image(prob: np.ndarray) -> np.ndarray:
    """Vessel probability as 8-bit gray, ``round(255 p)``."""
    return np.rint(np.clip(prob.astype(np.float64), 0, 1) * 255).astype(np.uint8)


def cmd_overlay(cfg: RunConfig, pred_path: str, gt_path: str, fov_path: str | None) -> int:
    pred, gt = data.read_mask(pred_path), data.read_mask(gt_path)
    fov = data.read_mask(fov_path) if fov_path else None
    try:
        rgb = render_overlay(pred, gt, fov)
    except ValueError as exc:
        raise data.DataError(str(exc)) from None
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb).save(out / "overlay.png")
    c = count_colors(rgb)
    print(f"overlay={out / 'overlay.png'}\ntp={c.tp}\ntn={c.tn}\nfp={c.fp}\nfn={c.fn}")
    return EXIT_OK


def cmd_params(cfg: RunConfig) -> int:
    model = build_network(cfg.network_config())
    for name, n in parameter_table(model):
        print(f"{name:<24}{n:>10}")
    print(f"{'total':<24}{count_parameters(model):>10}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, seeds: int = 3, inject_fault: bool = False) -> int:
    kernels = selfcheck.check_kernels(range(cfg.seed, cfg.seed + seeds), inject_fault=inject_fault)
    net_cfg = dataclasses.replace(TINY_CONFIG, multipath=cfg.multipath, pass_count=cfg.pass_count)
    network = max(selfcheck.check_network(cfg.seed + s, net_cfg, inject_fault=inject_fault) for s in range(seeds))
    ok = True
    for name, err in kernels.items():
        passed = err < selfcheck.KERNEL_TOLERANCE
        ok &= passed
        print(f"{name:<20}{err:.3e}  {'ok' if passed else 'FAIL'}")
    passed = network < selfcheck.NETWORK_TOLERANCE
    ok &= passed
    print(f"{'network':<20}{network:.3e}  {'ok' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


# -- argument parsing -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--threshold", type=float, help="binarization threshold for evaluation and prediction")
    common.add_argument("--passes", type=int, choices=(1, 2))
    common.add_argument("--no-multipath", dest="multipath", action="store_const", const=False)
    common.add_argument("--no-bidirectional", dest="bidirectional", action="store_const", const=False)
    common.add_argument("--manifest", help="dataset directory or manifest.txt")
    common.add_argument("--checkpoint", help="checkpoint path (default OUT/checkpoint.lmbs)")
    common.add_argument("--lr", dest="learning_rate", type=float)
    common.add_argument("--epochs", dest="max_epochs", type=int)
    common.add_argument("--image-size", dest="image_size", type=int)
    common.add_argument("--no-augment", dest="augment", action="store_const", const=False)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lmbisnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train and write a checkpoint")
    p = sub.add_parser("evaluate", parents=[common], help="metrics for a checkpoint on a dataset split")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p = sub.add_parser("predict", parents=[common], help="probability map and mask for one image")
    p.add_argument("image")
    p = sub.add_parser("overlay", parents=[common], help="colour-coded TP/FP/FN image")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--fov")
    sub.add_parser("params", parents=[common], help="parameter count per layer")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of all kernels")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--inject-fault", action="store_true", help="scale analytic gradients by 1.01")
    return parser


_OVERRIDE_KEYS = ("seed", "out", "threshold", "passes", "multipath", "bidirectional", "manifest", "checkpoint",
                  "learning_rate", "max_epochs", "image_size", "augment")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_run_config(args.config, {k: getattr(args, k) for k in _OVERRIDE_KEYS})
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.split)
        if args.command == "predict":
            return cmd_predict(cfg, args.image)
        if args.command == "overlay":
            return cmd_overlay(cfg, args.pred, args.gt, args.fov)
        if args.command == "params":
            return cmd_params(cfg)
        return cmd_gradcheck(cfg, args.seeds, args.inject_fault)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except data.DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except NonFiniteError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
