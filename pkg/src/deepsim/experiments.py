"""Autoencoder, VAE and feature-inversion runs, plus their evaluation and analyses."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist

from . import config as config_mod
from . import nn
from .checkpoint import Checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig
from .data import ImageSet, builtin_textures, directory_images
from .imageio import ImageRecord, atomic_write, write_grid
from .losses import LossReport, LossWeights
from .models import ConvAutoencoder, FeatureGenerator, LatentAutoencoder, Model, VariationalAutoencoder
from .ops import softmax
from .optim import AdamState, TrainingDiverged, TrainState, adam_step, train_step
from .rng import Streams, stream
from .tensor import Tensor, grad, no_grad

logger = logging.getLogger(__name__)

EVAL_CHUNK = 32
# encoders see pixels shifted to [-0.5, 0.5]; targets and outputs stay in [0, 1]
INPUT_CENTER = 0.5


# ---------------------------------------------------------------------------
# metric


def normalized_error(outputs, targets) -> float:
    """Mean Euclidean error over the mean pairwise distance of the targets, in percent."""
    a = np.stack([np.asarray(getattr(o, "data", o), dtype=np.float64).ravel() for o in outputs])
    t = np.stack([np.asarray(getattr(o, "data", o), dtype=np.float64).ravel() for o in targets])
    if len(t) < 2:
        raise ValueError("normalized_error needs at least two targets")
    if a.shape != t.shape:
        raise ValueError(f"outputs {a.shape} and targets {t.shape} differ")
    scale = pdist(t).mean()
    return float(100.0 * np.linalg.norm(a - t, axis=1).mean() / scale)


@dataclass
class MetricRow:
    label: str
    img_err_pct: float
    feat_err_pct: float
    iteration: int


@dataclass
class MetricTable:
    rows: list[MetricRow] = field(default_factory=list)

    HEADER = ("label", "img_err_pct", "feat_err_pct", "iteration")

    def add(self, row: MetricRow) -> None:
        self.rows.append(row)

    def last(self, label: str | None = None) -> MetricRow:
        rows = [r for r in self.rows if label is None or r.label == label]
        return rows[-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.HEADER)
        for r in self.rows:
            writer.writerow([r.label, f"{r.img_err_pct:.6f}", f"{r.feat_err_pct:.6f}", r.iteration])
        return buf.getvalue()

    def write(self, path) -> None:
        atomic_write(path, self.to_csv().encode())


def write_losses(reports: list[tuple[int, LossReport]], path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["iteration", "total", "feat", "adv", "img", "discr", "kl", "gate_ratio", "discriminator_updated"])
    for it, r in reports:
        writer.writerow([it, repr(r.total), repr(r.feat), repr(r.adv), repr(r.img), repr(r.discr), repr(r.kl),
                         repr(r.gate_ratio), int(r.discriminator_updated)])
    atomic_write(path, buf.getvalue().encode())


# ---------------------------------------------------------------------------
# building blocks


def load_images(cfg: ExperimentConfig) -> ImageSet:
    if cfg.dataset == "builtin":
        return builtin_textures(cfg.dataset_train_count, cfg.dataset_test_count, cfg.dataset_size, cfg.seed)
    return directory_images(cfg.dataset, cfg.dataset_size, cfg.dataset_test_count)


def _dtype(cfg: ExperimentConfig):
    return np.float32 if cfg.dtype == "float32" else np.float64


def _build(spec: nn.NetworkSpec, cfg: ExperimentConfig, name: str) -> nn.Network:
    spec = nn.with_min_width(spec, cfg.min_width)
    return nn.build(spec, stream(cfg.seed, f"init.{name}"), dtype=_dtype(cfg), init=cfg.init)


def _comparator(cfg: ExperimentConfig) -> nn.Network:
    return _build(nn.comparator_tiny(cfg.image_size, scale=cfg.scale), cfg, "comparator")


@lru_cache(maxsize=4)
def _trained_comparator_params(cfg: ExperimentConfig) -> dict[str, np.ndarray]:
    """Train comparator_tiny to classify the texture kind of builtin images."""
    net = _comparator(cfg)
    features = net.resolved[-1].out_shape[0]
    head_spec = nn.NetworkSpec("comparator_head", (features,), (
        nn.LayerSpec("fc", "fc", 3, activation="linear", fixed_width=True),))
    head = _build(head_spec, cfg, "comparator_head")
    images = builtin_textures(cfg.dataset_train_count, 2, cfg.dataset_size, cfg.seed)
    rng = stream(cfg.seed, "comparator.data")
    params = {**{f"c/{k}": v for k, v in net.params.items()}, **{f"h/{k}": v for k, v in head.params.items()}}
    opt = AdamState(lr=1e-3)
    slack = cfg.dataset_size - cfg.image_size
    for _ in range(cfg.comparator_train_iters):
        idx = rng.choice(len(images.train), size=16, replace=False)
        oy, ox = rng.integers(0, slack + 1, size=2)
        x = Tensor(images.train[idx, :, oy : oy + cfg.image_size, ox : ox + cfg.image_size].astype(_dtype(cfg)))
        onehot = np.eye(3, dtype=x.dtype)[images.train_labels[idx]]
        probs = softmax(head(net(x)))
        loss = -((probs * Tensor(onehot)).sum(axis=1).clip(1e-12, 1.0).log()).mean()
        adam_step(params, dict(zip(params, grad(loss, list(params.values())))), opt)
    return {k: v.data.copy() for k, v in net.params.items()}


def _require_builtin(cfg: ExperimentConfig) -> None:
    if cfg.dataset != "builtin":
        raise ConfigError("comparator = trained_tiny is trained on the builtin textures; use dataset = builtin")


def make_feature_net(cfg: ExperimentConfig, kind: str) -> nn.Network | None:
    if kind == "identity":
        return None
    net = _comparator(cfg)
    if kind == "trained_tiny":
        _require_builtin(cfg)
        for k, v in _trained_comparator_params(_comparator_key(cfg)).items():
            net.params[k].data = v.copy()
    return net.freeze()


def _comparator_key(cfg: ExperimentConfig) -> ExperimentConfig:
    # only the fields that shape the comparator, so runs that differ elsewhere share one trained copy
    keep = ("seed", "image_size", "scale", "dtype", "init", "min_width", "dataset_train_count",
            "dataset_size", "comparator_train_iters")
    return ExperimentConfig(task="inversion", dataset="builtin", **{k: getattr(cfg, k) for k in keep})


def _latent_parts(cfg: ExperimentConfig):
    enc = _build(nn.autoencoder_enc(cfg.image_size, scale=cfg.scale), cfg, "encoder")
    code = int(np.prod(enc.resolved[-1].out_shape))
    d = cfg.vae_latent_dim

    def head(name):
        spec = nn.NetworkSpec(name, (code,), (nn.LayerSpec("fc", "fc", d, activation="linear", fixed_width=True),))
        return _build(spec, cfg, name)

    dec = _build(nn.generator_fc(d, cfg.image_size, scale=cfg.scale), cfg, "decoder")
    return enc, head, dec


class Experiment:
    """Everything one training run needs: data, networks, loss weights and state."""

    def __init__(self, cfg: ExperimentConfig, images: ImageSet | None = None):
        self.cfg = cfg
        self.dtype = _dtype(cfg)
        if "trained_tiny" in (cfg.comparator, cfg.inversion_phi if cfg.task == "inversion" else None):
            _require_builtin(cfg)
        self.images = images if images is not None else load_images(cfg)
        self.weights = LossWeights(cfg.loss_lambda_feat, cfg.loss_lambda_adv, cfg.loss_lambda_img,
                                   cfg.kl_weight if cfg.task == "vae" else 0.0)
        self.comparator = make_feature_net(cfg, cfg.comparator)
        self.comparator_tap = "input" if self.comparator is None else cfg.comparator_tap
        if self.comparator is not None:
            self.comparator.spec.tap_index(self.comparator_tap)
        self.phi = None
        self.phi_tap = "input"
        side = None
        if cfg.task == "inversion":
            self.phi = self.comparator if cfg.inversion_phi == cfg.comparator else make_feature_net(cfg, cfg.inversion_phi)
            self.phi_tap = "input" if self.phi is None else cfg.inversion_tap
            probe = self.features(Tensor(np.zeros((1, 3, cfg.image_size, cfg.image_size), dtype=self.dtype)))
            side = int(np.prod(probe.shape[1:]))
            self.generator = self._inversion_generator(probe.shape[1:])
        elif cfg.task == "autoencoder":
            if cfg.ae_arch == "conv":
                self.generator = ConvAutoencoder(
                    _build(nn.autoencoder_enc(cfg.image_size, scale=cfg.scale), cfg, "encoder"),
                    _build(nn.autoencoder_dec(cfg.image_size, scale=cfg.scale), cfg, "decoder"))
            else:
                enc, head, dec = _latent_parts(cfg)
                self.generator = LatentAutoencoder(enc, head("mu_head"), dec)
        elif cfg.task == "vae":
            enc, head, dec = _latent_parts(cfg)
            self.generator = VariationalAutoencoder(enc, head("mu_head"), head("log_sigma_head"), dec,
                                                    sigma_zero=cfg.vae_sigma == "zero")
        else:
            raise ConfigError(f"unknown task {cfg.task!r}")
        disc = _build(nn.discriminator(cfg.image_size, scale=cfg.scale, side_input=side), cfg, "discriminator")
        self.state = TrainState(
            generator=self.generator,
            gen_opt=AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2),
            discriminator=disc,
            disc_opt=AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2),
            streams=Streams(cfg.seed),
            gate_threshold=cfg.gate_threshold,
            train_discriminator=self.weights.lambda_adv > 0,
            image_loss=cfg.loss_image,
        )
        self.table = MetricTable()
        self.reports: list[tuple[int, LossReport]] = []

    def _inversion_generator(self, feature_shape) -> Model:
        cfg = self.cfg
        if len(feature_shape) == 1:
            spec = nn.generator_fc(feature_shape[0], cfg.image_size, scale=cfg.scale)
        else:
            spec = nn.generator_conv(feature_shape[0], feature_shape[1], cfg.image_size, scale=cfg.scale)
        return FeatureGenerator(_build(spec, cfg, "generator"))

    # -- data -----------------------------------------------------------
    def features(self, images: Tensor) -> Tensor:
        """The inverted representation (inversion task only)."""
        with no_grad():
            return nn.feature_map(self.phi, images, self.phi_tap).detach()

    def inputs(self, images: np.ndarray) -> Tensor:
        """Generator input for target images: their features, or the images centered on 0."""
        if self.cfg.task == "inversion":
            return self.features(Tensor(images.astype(self.dtype)))
        return Tensor((images - INPUT_CENTER).astype(self.dtype))

    def next_batch(self) -> tuple[Tensor, Tensor]:
        batch = self.images.sample_batch(self.state.streams["data"], self.cfg.batch_size, self.cfg.image_size)
        return self.inputs(batch), Tensor(batch.astype(self.dtype))

    # -- training -------------------------------------------------------
    def step(self) -> LossReport:
        it = self.state.iteration
        report = train_step(self.state, self.next_batch(), self.weights, self.comparator, self.comparator_tap)
        self.reports.append((it, report))
        return report

    def reconstruct(self, images: np.ndarray) -> np.ndarray:
        outs = []
        with no_grad():
            for i in range(0, len(images), EVAL_CHUNK):
                outs.append(self.generator.reconstruct(self.inputs(images[i : i + EVAL_CHUNK])).data)
        return np.concatenate(outs).astype(np.float64)

    def eval_features(self, images: np.ndarray) -> np.ndarray:
        net, tap = (self.phi, self.phi_tap) if self.cfg.task == "inversion" else (self.comparator, self.comparator_tap)
        outs = []
        with no_grad():
            for i in range(0, len(images), EVAL_CHUNK):
                t = Tensor(images[i : i + EVAL_CHUNK].astype(self.dtype))
                outs.append(nn.comparator_features(net, t, tap).data)
        return np.concatenate(outs).astype(np.float64)

    def evaluate(self) -> MetricRow:
        test = self.images.test_images(self.cfg.image_size)
        recon = self.reconstruct(test)
        img_err = normalized_error(recon, test)
        feat_err = normalized_error(self.eval_features(recon), self.eval_features(test))
        row = MetricRow(self.cfg.run_label, img_err, feat_err, self.state.iteration)
        self.table.add(row)
        return row

    def train(self, iters: int | None = None, out: Path | None = None) -> MetricTable:
        """Train up to ``iters`` total iterations, evaluating every ``eval_every`` and at the end."""
        iters = self.cfg.iters if iters is None else iters
        every, ckpt_every = self.cfg.eval_every, self.cfg.checkpoint_every
        while self.state.iteration < iters:
            try:
                self.step()
            except TrainingDiverged:
                if out is not None:
                    self.table.write(out / "metrics.csv")
                    write_losses(self.reports, out / "losses.csv")
                raise
            it = self.state.iteration
            if every and it % every == 0 and it < iters:
                row = self.evaluate()
                logger.info("iter %d img %.2f%% feat %.2f%%", it, row.img_err_pct, row.feat_err_pct)
            if out is not None and ckpt_every and it % ckpt_every == 0 and it < iters:
                save_checkpoint(out / f"checkpoint_{it:06d}.bin", to_checkpoint(self))
        if not self.table.rows or self.table.rows[-1].iteration != self.state.iteration:
            self.evaluate()
        return self.table

    # -- outputs --------------------------------------------------------
    def reconstruction_grid(self, count: int = 8) -> list[ImageRecord]:
        test = self.images.test_images(self.cfg.image_size)[:count]
        recon = self.reconstruct(test)
        return [ImageRecord.from_chw(im) for im in list(test) + list(recon)]

    def sample_grid(self, count: int = 16) -> list[ImageRecord]:
        with no_grad():
            imgs = self.generator.sample(count, stream(self.cfg.seed, "sample"), self.dtype).data
        return [ImageRecord.from_chw(im) for im in imgs]


# ---------------------------------------------------------------------------
# checkpoints


def _networks(exp: Experiment) -> dict[str, nn.Network]:
    nets = {f"gen.{k}": v for k, v in exp.generator.networks.items()}
    nets["disc"] = exp.state.discriminator
    if exp.comparator is not None:
        nets["comparator"] = exp.comparator
    if exp.phi is not None and exp.phi is not exp.comparator:
        nets["phi"] = exp.phi
    return nets


def to_checkpoint(exp: Experiment) -> Checkpoint:
    s = exp.state
    arrays = {}
    for prefix, net in _networks(exp).items():
        for k, p in net.params.items():
            arrays[f"{prefix}/{k}"] = p.data
    meta = {"streams": s.streams.get_state(), "seed": s.streams.seed,
            "discriminator_active": s.discriminator_active, "disc_updates": s.disc_updates}
    for name, opt in (("gen_opt", s.gen_opt), ("disc_opt", s.disc_opt)):
        meta[name] = {"step": opt.step, "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps_hat": opt.eps_hat}
        for k in opt.m:
            arrays[f"{name}.m/{k}"] = opt.m[k]
            arrays[f"{name}.v/{k}"] = opt.v[k]
    return Checkpoint(config_mod.config_hash(exp.cfg), config_mod.dump(exp.cfg), s.iteration, arrays, meta)


def restore(exp: Experiment, ckpt: Checkpoint) -> Experiment:
    s = exp.state
    for prefix, net in _networks(exp).items():
        for k, p in net.params.items():
            key = f"{prefix}/{k}"
            if key not in ckpt.arrays:
                raise ConfigError(f"checkpoint has no parameter {key!r}")
            arr = ckpt.arrays[key]
            if arr.shape != p.shape:
                raise ConfigError(f"checkpoint parameter {key!r} has shape {arr.shape}, network needs {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
    for name, opt in (("gen_opt", s.gen_opt), ("disc_opt", s.disc_opt)):
        m = ckpt.meta[name]
        opt.step, opt.lr, opt.beta1, opt.beta2, opt.eps_hat = m["step"], m["lr"], m["beta1"], m["beta2"], m["eps_hat"]
        opt.m = {k.split("/", 1)[1]: v.copy() for k, v in ckpt.arrays.items() if k.startswith(f"{name}.m/")}
        opt.v = {k.split("/", 1)[1]: v.copy() for k, v in ckpt.arrays.items() if k.startswith(f"{name}.v/")}
    s.streams = Streams(ckpt.meta["seed"])
    s.streams.set_state(ckpt.meta["streams"])
    s.iteration = ckpt.iteration
    s.discriminator_active = ckpt.meta["discriminator_active"]
    s.disc_updates = ckpt.meta["disc_updates"]
    return exp


# ---------------------------------------------------------------------------
# task runs


@dataclass
class RunResult:
    table: MetricTable
    grids: dict[str, list[ImageRecord]]
    experiment: Experiment


def write_run(exp: Experiment, out, grids: dict[str, list[ImageRecord]]) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "run.txt", config_mod.dump(exp.cfg).encode())
    exp.table.write(out / "metrics.csv")
    write_losses(exp.reports, out / "losses.csv")
    save_checkpoint(out / "checkpoint.bin", to_checkpoint(exp))
    for name, images in grids.items():
        write_grid(images, _grid_cols(name, images), out / f"{name}.ppm")


def _grid_cols(name: str, images) -> int:
    return 8 if name != "ablation" else len(ABLATIONS) + 1


def _run(cfg: ExperimentConfig, task: str, out=None, experiment: Experiment | None = None) -> RunResult:
    if cfg.task != task:
        raise ConfigError(f"config task is {cfg.task!r}, expected {task!r}")
    exp = experiment or Experiment(cfg)
    out_path = Path(out) if out is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        atomic_write(out_path / "run.txt", config_mod.dump(cfg).encode())
    exp.train(out=out_path)
    grids = {"reconstructions": exp.reconstruction_grid()}
    if task == "vae":
        grids["samples"] = exp.sample_grid()
    if out_path is not None:
        write_run(exp, out_path, grids)
    return RunResult(exp.table, grids, exp)


def run_autoencoder(cfg: ExperimentConfig, out=None, experiment=None) -> RunResult:
    return _run(cfg, "autoencoder", out, experiment)


def run_vae(cfg: ExperimentConfig, out=None, experiment=None) -> RunResult:
    return _run(cfg, "vae", out, experiment)


def run_inversion(cfg: ExperimentConfig, out=None, experiment=None) -> RunResult:
    return _run(cfg, "inversion", out, experiment)


RUNNERS = {"autoencoder": run_autoencoder, "vae": run_vae, "inversion": run_inversion}

# loss-term masks (feat, adv, img)
ABLATIONS = {
    "full": (1, 1, 1),
    "-L_img": (1, 1, 0),
    "-L_feat": (0, 1, 1),
    "-L_adv": (1, 0, 1),
    "-L_feat-L_adv": (0, 0, 1),
}


def ablation_config(cfg: ExperimentConfig, name: str) -> ExperimentConfig:
    f, a, i = ABLATIONS[name]
    return replace(cfg, loss_lambda_feat=cfg.loss_lambda_feat * f, loss_lambda_adv=cfg.loss_lambda_adv * a,
                   loss_lambda_img=cfg.loss_lambda_img * i, label=name)


def ablation_matrix(cfg: ExperimentConfig, out=None, count: int = 6) -> tuple[MetricTable, list[ImageRecord]]:
    """One inversion run per loss mask with shared seed and budget.

    The grid has one row per test image: the original, then each variant in
    :data:`ABLATIONS` order.
    """
    if cfg.task != "inversion":
        raise ConfigError("ablation needs task = inversion")
    table = MetricTable()
    columns = []
    images = load_images(cfg)
    test = images.test_images(cfg.image_size)[:count]
    for name in ABLATIONS:
        variant = ablation_config(cfg, name)
        exp = Experiment(variant, images)
        exp.train()
        table.add(exp.table.last())
        columns.append(exp.reconstruct(test))
        logger.info("ablation %s: %s", name, exp.table.last())
    grid = []
    for k in range(len(test)):
        grid.append(ImageRecord.from_chw(test[k]))
        grid.extend(ImageRecord.from_chw(col[k]) for col in columns)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write(out / "run.txt", config_mod.dump(cfg).encode())
        table.write(out / "metrics.csv")
        write_grid(grid, len(ABLATIONS) + 1, out / "ablation.ppm")
    return table, grid


# ---------------------------------------------------------------------------
# analyses of a trained inversion model


def iterative_reencode(gen, phi, images: np.ndarray, iters: int, flat_phi=None) -> tuple[list[np.ndarray], list[float]]:
    """x_0 = images, x_{k+1} = gen(phi(x_k)); returns [x_1 .. x_iters] and each one's
    feature-space normalized error against x_0.

    ``flat_phi`` gives the features used for the error (default: flattened ``phi``).
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    flat_phi = flat_phi or (lambda im: np.asarray(phi(im)).reshape(len(im), -1))
    reference = flat_phi(images)
    x = images
    iterates, errors = [], []
    for _ in range(iters):
        x = gen(phi(x))
        iterates.append(x)
        errors.append(normalized_error(flat_phi(x), reference))
    return iterates, errors


def interpolate_features(phi1, phi2, steps: int) -> list[np.ndarray]:
    """(1 - t) * phi1 + t * phi2 for ``steps`` evenly spaced t from 0 to 1."""
    phi1, phi2 = np.asarray(phi1), np.asarray(phi2)
    if phi1.shape != phi2.shape:
        raise ValueError(f"feature shapes {phi1.shape} and {phi2.shape} differ")
    if steps < 2:
        raise ValueError("steps must be >= 2")
    return [(1.0 - t) * phi1 + t * phi2 for t in (k / (steps - 1) for k in range(steps))]


def inversion_functions(exp: Experiment):
    """(gen, phi, flat_phi) as array-to-array functions for a trained inversion experiment."""

    def phi(images):
        return exp.features(Tensor(np.asarray(images).astype(exp.dtype))).data

    def gen(features):
        with no_grad():
            return exp.generator.reconstruct(Tensor(np.asarray(features).astype(exp.dtype))).data.astype(np.float64)

    def flat_phi(images):
        return exp.eval_features(np.asarray(images))

    return gen, phi, flat_phi


def decode_interpolation(exp: Experiment, image_a: np.ndarray, image_b: np.ndarray, steps: int) -> list[np.ndarray]:
    gen, phi, _ = inversion_functions(exp)
    fa, fb = phi(image_a[None]), phi(image_b[None])
    return [gen(f)[0] for f in interpolate_features(fa, fb, steps)]
