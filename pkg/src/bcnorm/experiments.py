"""Experiment harness: config handling, training runs, oracle suites.

A run is fully determined by its config.  The seed is partitioned into
three independent streams (data generation, parameter initialization,
batch shuffling), so changing only the normalizer changes nothing about
the data order or the initialization of the non-normalization
parameters, and curves stay comparable across normalizers.

Wall-clock time is reported on stdout but never written into CSV files;
repeated runs with the same config must produce byte-identical CSVs.
"""

import csv
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import norms
from .data import Dataset, SyntheticSpec, batches, gen_synthetic, load_cifar10
from .gradcheck import GradReport, _compare, check_layer, finite_diff
from .nn import ConvLayer, DenseLayer, GlobalAvgPool, ReLU, SGD, SmallCNN, softmax_cross_entropy


class UsageError(ValueError):
    """Bad config file, flag, or value; the CLI maps this to exit code 2."""


class OracleFailure(RuntimeError):
    """A gradient check or equivalence oracle failed; CLI exit code 1."""


class TrainingDiverged(RuntimeError):
    """Non-finite loss during training; CLI exit code 1."""


NORMALIZERS = ("bn", "ln", "in", "gn", "bcn", "none")


@dataclass
class ExperimentConfig:
    normalizer: str = "bcn"
    groups: int = 4
    batch_size: int = 8
    epochs: int = 30
    lr: float = 0.1
    milestones: str = "3:0.1,5:0.1"
    momentum: float = 0.9
    eps: float = 1e-5
    alpha: float = 0.9
    seed: int = 1
    dataset: str = "synthetic"
    cifar_train: str = ""
    cifar_val: str = ""
    classes: int = 4
    height: int = 12
    width: int = 12
    train_per_class: int = 500
    val_per_class: int = 100
    noise: float = 0.25
    pattern_amp: float = 0.15
    mean_separation: float = 0.5
    max_steps: int = 0
    stop_at_train_acc: float = 0.0
    squash_mix: int = 0
    outdir: str = "runs/out"

    def parsed_milestones(self):
        return parse_milestones(self.milestones)

    def validate(self):
        if self.normalizer not in NORMALIZERS:
            raise UsageError(f"normalizer must be one of {NORMALIZERS}, got {self.normalizer!r}")
        if self.dataset not in ("synthetic", "cifar10"):
            raise UsageError(f"dataset must be 'synthetic' or 'cifar10', got {self.dataset!r}")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if self.epochs < 1:
            raise UsageError("epochs must be >= 1")
        if not self.eps > 0:
            raise UsageError("eps must be > 0")
        if not 0 < self.alpha < 1:
            raise UsageError("alpha must be in (0, 1)")
        if not 0 <= self.momentum < 1:
            raise UsageError("momentum must be in [0, 1)")
        if self.dataset == "cifar10" and not (self.cifar_train and self.cifar_val):
            raise UsageError("cifar10 dataset needs cifar_train and cifar_val paths")
        self.parsed_milestones()
        return self


def parse_milestones(text):
    """Parse 'epoch:factor,epoch:factor' into a list of (int, float) pairs."""
    text = text.strip()
    if not text:
        return []
    out = []
    for part in text.split(","):
        try:
            at, factor = part.split(":")
            out.append((int(at), float(factor)))
        except ValueError:
            raise UsageError(f"bad milestone {part!r}; expected epoch:factor") from None
    return out


def _coerce(value, target_type, key):
    try:
        if target_type is int:
            return int(value)
        if target_type is float:
            return float(value)
        return str(value)
    except ValueError:
        raise UsageError(f"cannot parse {key}={value!r} as {target_type.__name__}") from None


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
_TYPE_MAP = {int: int, float: float, str: str, "int": int, "float": float, "str": str}


def config_from_pairs(pairs, base=None):
    """Apply (key, value) string pairs onto a config; unknown keys are errors."""
    cfg = base if base is not None else ExperimentConfig()
    for key, value in pairs:
        if key not in _FIELD_TYPES:
            raise UsageError(f"unknown config key {key!r}")
        ftype = _TYPE_MAP.get(_FIELD_TYPES[key], str)
        cfg = replace(cfg, **{key: _coerce(value, ftype, key)})
    return cfg


def load_config(path, base=None):
    """Read a key = value config file ('#' starts a comment)."""
    pairs = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{lineno}: expected key = value")
                key, value = line.split("=", 1)
                pairs.append((key.strip(), value.strip()))
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    return config_from_pairs(pairs, base)


@dataclass
class EpochRow:
    epoch: int
    steps: int
    train_acc: float
    val_acc: float
    loss: float


@dataclass
class RunRecord:
    config: ExperimentConfig
    rows: list = field(default_factory=list)
    mix_stats: dict = field(default_factory=dict)
    state: dict = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def final_train_acc(self):
        return self.rows[-1].train_acc if self.rows else 0.0

    @property
    def final_val_acc(self):
        return self.rows[-1].val_acc if self.rows else 0.0

    @property
    def final_loss(self):
        return self.rows[-1].loss if self.rows else float("nan")

    @property
    def total_steps(self):
        return self.rows[-1].steps if self.rows else 0


def make_datasets(cfg):
    """Build (train, val) datasets from the config's data source."""
    if cfg.dataset == "cifar10":
        train = _load_cifar_files(cfg.cifar_train)
        val = _load_cifar_files(cfg.cifar_val)
        return train, val
    root = np.random.SeedSequence(cfg.seed)
    data_ss = root.spawn(3)[0]
    train_ss, val_ss = data_ss.spawn(2)
    common = dict(
        classes=cfg.classes, height=cfg.height, width=cfg.width,
        noise=cfg.noise, pattern_amp=cfg.pattern_amp,
        mean_separation=cfg.mean_separation,
    )
    train = gen_synthetic(SyntheticSpec(samples_per_class=cfg.train_per_class,
                                        seed=train_ss, **common))
    val = gen_synthetic(SyntheticSpec(samples_per_class=cfg.val_per_class,
                                      seed=val_ss, **common))
    return train, val


def _load_cifar_files(paths):
    parts = [load_cifar10(p.strip()) for p in paths.split(",") if p.strip()]
    if not parts:
        raise UsageError("empty CIFAR-10 path list")
    if len(parts) == 1:
        return parts[0]
    return Dataset(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
        parts[0].classes,
    )


def build_model(cfg, init_seed):
    return SmallCNN(
        classes=cfg.classes if cfg.dataset == "synthetic" else 10,
        in_channels=3, norm=cfg.normalizer, groups=cfg.groups,
        eps=cfg.eps, alpha=cfg.alpha, squash_mix=bool(cfg.squash_mix),
        rng=np.random.default_rng(init_seed),
    )


def evaluate(model, dataset, batch_size=256):
    """Eval-mode classification accuracy over a dataset."""
    hits = 0
    for start in range(0, len(dataset), batch_size):
        xb = dataset.images[start : start + batch_size]
        yb = dataset.labels[start : start + batch_size]
        logits = model.forward(xb, training=False)
        hits += int((logits.argmax(axis=1) == yb).sum())
    return hits / len(dataset)


def train_run(cfg, train=None, val=None):
    """Train the small CNN per config; returns the full run record.

    Epoch rows hold end-of-epoch eval-mode train/val accuracy and the mean
    training loss of the epoch's steps.  ``max_steps`` truncates training
    mid-epoch; ``stop_at_train_acc`` stops at the first epoch that reaches
    the target.
    """
    cfg.validate()
    t0 = time.perf_counter()
    if train is None or val is None:
        train, val = make_datasets(cfg)
    root = np.random.SeedSequence(cfg.seed)
    _, init_ss, shuffle_ss = root.spawn(3)
    model = build_model(cfg, init_ss)
    opt = SGD(model.params(), cfg.lr, cfg.momentum, cfg.parsed_milestones())

    record = RunRecord(config=cfg)
    step = 0
    done = False
    for epoch in range(cfg.epochs):
        losses = []
        for xb, yb in batches(train, cfg.batch_size, seed=(cfg.seed, 7, epoch), drop_last=True):
            try:
                logits = model.forward(xb, training=True)
                loss, dlogits = softmax_cross_entropy(logits, yb)
            except ValueError as exc:
                raise TrainingDiverged(
                    f"non-finite values at step {step + 1} (epoch {epoch + 1}): {exc}"
                ) from exc
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at step {step + 1} (epoch {epoch + 1})"
                )
            model.backward(dlogits)
            opt.step(model.grads(), epoch)
            losses.append(loss)
            step += 1
            if cfg.max_steps and step >= cfg.max_steps:
                done = True
                break
        train_acc = evaluate(model, train)
        val_acc = evaluate(model, val)
        record.rows.append(EpochRow(epoch + 1, step, train_acc, val_acc,
                                    float(np.mean(losses))))
        if cfg.stop_at_train_acc and train_acc >= cfg.stop_at_train_acc:
            done = True
        if done:
            break
    if model.norm_kind == "bcn":
        for name, layer in model.norm_layers().items():
            m = layer.effective_mix()
            record.mix_stats[name] = (float(m.min()), float(m.mean()), float(m.max()))
    record.state = model.state_dict()
    record.wall_time = time.perf_counter() - t0
    return record


# -- CSV emission -------------------------------------------------------

CURVE_HEADER = ["epoch", "train_acc", "val_acc", "loss"]


def write_curve_csv(path, record):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_HEADER)
        for row in record.rows:
            w.writerow([row.epoch, f"{row.train_acc:.6f}", f"{row.val_acc:.6f}",
                        f"{row.loss:.6f}"])


def summary_row(record):
    cfg = record.config
    row = {
        "normalizer": cfg.normalizer,
        "batch_size": cfg.batch_size,
        "seed": cfg.seed,
        "epochs_run": len(record.rows),
        "steps": record.total_steps,
        "final_train_acc": f"{record.final_train_acc:.6f}",
        "final_val_acc": f"{record.final_val_acc:.6f}",
        "final_loss": f"{record.final_loss:.6f}",
    }
    for name in ("norm1", "norm2"):
        stats = record.mix_stats.get(name)
        row[f"{name}_mix_min"] = f"{stats[0]:.6f}" if stats else ""
        row[f"{name}_mix_mean"] = f"{stats[1]:.6f}" if stats else ""
        row[f"{name}_mix_max"] = f"{stats[2]:.6f}" if stats else ""
    return row


def write_summary_csv(path, records):
    rows = [summary_row(r) for r in records]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)


# -- oracle suites ------------------------------------------------------

def _seeded_input(seed, shape=(4, 8, 5, 5), low=-2.0, high=2.0):
    return np.random.default_rng(seed).uniform(low, high, size=shape)


def standard_layers(eps=1e-5, channels=8, groups=4, mix_seed=11):
    """The five normalizers under their canonical gradcheck configuration."""
    bcn = norms.BatchChannelNorm(channels, eps=eps)
    bcn.mix[...] = np.random.default_rng(mix_seed).uniform(0.0, 1.0, size=channels)
    return {
        "bn": norms.BatchNorm(channels, eps=eps),
        "ln": norms.LayerNorm(channels, eps=eps),
        "in": norms.InstanceNorm(channels, eps=eps),
        "gn": norms.GroupNorm(channels, groups, eps=eps),
        "bcn": bcn,
    }


def gradcheck_suite(seed=7, tol=1e-4, h=1e-5):
    """Finite-difference checks for every normalizer and every trainable block."""
    reports = []
    x = _seeded_input(seed)
    for name, layer in standard_layers().items():
        reports.append(check_layer(layer, x, tol=tol, seed=seed, h=h, name=name))

    rng = np.random.default_rng(seed + 1)
    conv_x = rng.uniform(-1.0, 1.0, size=(2, 2, 4, 4))
    conv = ConvLayer(2, 3, 3, 3, padding="same", rng=rng)
    reports.append(check_layer(conv, conv_x, tol=tol, seed=seed, h=h, name="conv_same"))
    convv = ConvLayer(2, 3, 3, 3, padding="valid", rng=rng)
    reports.append(check_layer(convv, conv_x, tol=tol, seed=seed, h=h, name="conv_valid"))

    dense = DenseLayer(5, 3, rng=rng)
    dense_x = rng.uniform(-1.0, 1.0, size=(4, 5))
    reports.append(check_layer(dense, dense_x, tol=tol, seed=seed, h=h, name="dense"))

    relu_x = rng.uniform(0.05, 1.0, size=(2, 3, 4, 4)) * rng.choice([-1.0, 1.0], size=(2, 3, 4, 4))
    reports.append(check_layer(ReLU(), relu_x, tol=tol, seed=seed, h=h, name="relu"))
    reports.append(check_layer(GlobalAvgPool(), conv_x, tol=tol, seed=seed, h=h, name="pool"))

    reports.append(_check_softmax(seed, tol, h))
    return reports


def _check_softmax(seed, tol, h):
    rng = np.random.default_rng(seed + 2)
    logits = rng.uniform(-2.0, 2.0, size=(5, 4))
    labels = rng.integers(0, 4, size=5)
    _, dlogits = softmax_cross_entropy(logits, labels)
    numeric = finite_diff(lambda t: softmax_cross_entropy(t, labels)[0], logits, h)
    report = GradReport(layer="softmax_xent", h=h, tol=tol)
    report.groups["logits"] = _compare(dlogits, numeric, tol, 1e-6)
    return report


def write_gradcheck_csv(path, reports):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "group", "max_rel_error", "worst_index", "h", "tol", "status"])
        for report in reports:
            for layer, group, err, idx, h, tol, status in report.rows():
                w.writerow([layer, group, f"{err:.3e}", idx, f"{h:.0e}", f"{tol:.0e}", status])


def equivalence_suite(seed=5, eps=1e-5, shape=(4, 6, 5, 5)):
    """Limit-case oracles: blend extremes vs BN/LN, group extremes vs LN/IN.

    Returns rows of (pair, mode, max_abs_deviation, tolerance, passed).
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2.0, 2.0, size=shape)
    c = shape[1]
    gamma = rng.uniform(0.5, 1.5, size=c)
    beta = rng.uniform(-0.5, 0.5, size=c)
    rs_mean = rng.uniform(-0.5, 0.5, size=c)
    rs_var = rng.uniform(0.5, 2.0, size=c)

    def dress(layer):
        layer.gamma[...] = gamma
        layer.beta[...] = beta
        return layer

    rows = []

    def compare(pair, mode, a, b, tol):
        dev = float(np.max(np.abs(a - b)))
        rows.append((pair, mode, dev, tol, dev <= tol))

    bn = dress(norms.BatchNorm(c, eps=eps))
    ln = dress(norms.LayerNorm(c, eps=eps))
    inn = dress(norms.InstanceNorm(c, eps=eps))
    bcn1 = dress(norms.BatchChannelNorm(c, eps=eps))
    bcn1.mix[...] = 1.0
    bcn0 = dress(norms.BatchChannelNorm(c, eps=eps))
    bcn0.mix[...] = 0.0

    compare("bcn(mix=1) vs bn", "train",
            bcn1.forward(x, training=True, update_stats=False),
            bn.forward(x, training=True, update_stats=False), 1e-9)
    compare("bcn(mix=0) vs ln", "train",
            bcn0.forward(x, training=True, update_stats=False),
            ln.forward(x, training=True), 1e-9)

    bn.seed_running_stats(rs_mean, rs_var)
    bcn1.seed_running_stats(rs_mean, rs_var)
    bcn0.seed_running_stats(rs_mean, rs_var)
    compare("bcn(mix=1) vs bn", "eval",
            bcn1.forward(x, training=False), bn.forward(x, training=False), 1e-9)
    compare("bcn(mix=0) vs ln", "eval",
            bcn0.forward(x, training=False), ln.forward(x, training=True), 1e-9)

    gn1 = dress(norms.GroupNorm(c, 1, eps=eps))
    gnc = dress(norms.GroupNorm(c, c, eps=eps))
    compare("gn(1) vs ln", "train",
            gn1.forward(x, training=True), ln.forward(x, training=True), 1e-12)
    compare("gn(C) vs in", "train",
            gnc.forward(x, training=True), inn.forward(x, training=True), 1e-12)
    return rows


def write_equivalence_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["pair", "mode", "max_abs_deviation", "tol", "status"])
        for pair, mode, dev, tol, ok in rows:
            w.writerow([pair, mode, f"{dev:.3e}", f"{tol:.0e}", "pass" if ok else "FAIL"])


# -- batch-size ablation ------------------------------------------------

DEFAULT_ABLATION_SIZES = (128, 16, 8, 4, 2)
ABLATION_NORMALIZERS = ("bn", "bcn")


def ablate_batch(cfg, sizes=DEFAULT_ABLATION_SIZES):
    """Repeat the training run for each batch size for BN and BCN.

    Returns (records keyed by (normalizer, size), aggregate rows).
    """
    sizes = [int(s) for s in sizes]
    if any(s < 1 for s in sizes):
        raise UsageError("batch sizes must be >= 1")
    train, val = make_datasets(cfg)
    records = {}
    rows = []
    for normalizer in ABLATION_NORMALIZERS:
        for size in sizes:
            run_cfg = replace(cfg, normalizer=normalizer, batch_size=size)
            rec = train_run(run_cfg, train=train, val=val)
            records[(normalizer, size)] = rec
            rows.append({
                "normalizer": normalizer,
                "batch_size": size,
                "steps": rec.total_steps,
                "final_train_acc": f"{rec.final_train_acc:.6f}",
                "final_val_acc": f"{rec.final_val_acc:.6f}",
                "final_loss": f"{rec.final_loss:.6f}",
            })
    return records, rows


def write_ablation_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)


def mix_stats_from_state(state):
    """Per-layer (min, mean, max) of every mixing coefficient in a checkpoint."""
    stats = {}
    for key in sorted(state):
        if key.endswith(".mix"):
            values = np.asarray(state[key], dtype=np.float64)
            stats[key[: -len(".mix")]] = (
                float(values.min()), float(values.mean()), float(values.max())
            )
    return stats
