"""Training schedule: reconstruction pretraining, k-means centroid
initialization, then joint optimization of the weighted objective over
triplet batches."""

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .autoencoder import (NetworkSpec, build, decode, embed, encode,
                          encoder_fn, reconstruction_loss, save_checkpoint)
from .data import batch_iterator
from .errors import (DcsepError, DegenerateEmbedding, NonFiniteGradient,
                     NonFiniteLoss, NonFiniteValue, TrainingDiverged)
from .kmeans import kmeans
from .losses import (ClusterState, balance_loss, composite_loss,
                     kl_clustering_loss, soft_assign, target_distribution,
                     triplet_loss)
from .metrics import (accuracy, export_embeddings, export_metrics,
                      export_projection, hard_assign, project_2d)
from .optim import Adam
from .triplets import AugmentationPolicy, make_triplet_batch

log = logging.getLogger(__name__)

VARIANT_WEIGHTS = {
    "shallow": dict(alpha=1.0, beta=0.8, gamma=0.01, omega=0.1, margin=0.24),
    "deep": dict(alpha=1.0, beta=0.7, gamma=0.01, omega=0.3, margin=0.3),
}


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 0.8
    gamma: float = 0.01
    omega: float = 0.1
    margin: float = 0.24
    lr: float = 1e-3
    batch_size: int = 64
    pretrain_epochs: int = 3
    joint_epochs: int = 60
    init_seed: int = 0
    shuffle_seed: int = 1
    augment_seed: int = 2
    variant: str = "shallow"
    latent_dim: int = None
    channels: tuple = None
    batch_norm_latent: bool = False
    policy: AugmentationPolicy = field(default_factory=AugmentationPolicy.for_digits)
    # 0: recompute the target from each batch; T > 0: refresh over the whole
    # dataset every T epochs
    target_refresh_epochs: int = 0
    balance_variant: str = "implemented"
    max_tries: int = 64
    kmeans_n_init: int = 10
    early_stop: bool = False
    early_stop_tol: float = 0.001

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "omega"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.pretrain_epochs < 0 or self.joint_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.balance_variant not in ("implemented", "literal"):
            raise ValueError(f"unknown balance variant {self.balance_variant!r}")
        if self.channels is not None:
            self.channels = tuple(self.channels)

    @classmethod
    def for_variant(cls, variant="shallow", **overrides):
        """Loss weights and margin tuned for the given network depth."""
        return cls(variant=variant, **{**VARIANT_WEIGHTS[variant], **overrides})

    def network_spec(self, input_shape):
        return NetworkSpec(variant=self.variant, input_shape=tuple(input_shape),
                           latent_dim=self.latent_dim, channels=self.channels,
                           batch_norm_latent=self.batch_norm_latent)

    def weights(self):
        return self.alpha, self.beta, self.gamma, self.omega

    def to_dict(self):
        d = asdict(self)
        d["policy"] = self.policy.to_dict()
        d["channels"] = None if self.channels is None else list(self.channels)
        return d


@dataclass
class EpochMetrics:
    epoch: int
    loss_total: float
    loss_r: float
    loss_c: float
    loss_b: float
    loss_t: float
    acc: float = None
    neg_fallbacks: int = 0
    seconds: float = 0.0


@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)
    pretrain_losses: list = field(default_factory=list)

    def append(self, row):
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise ValueError("epochs must increase")
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    @property
    def final_acc(self):
        return self.rows[-1].acc if self.rows else None


def _diverged(stage, epoch, batch, exc):
    return TrainingDiverged(stage, epoch, batch, str(exc))


def pretrain(params, dataset, config, log_to=None):
    """Optimize the reconstruction loss alone; returns per-epoch mean losses."""
    optimizer = Adam(params.parameters(), lr=config.lr)
    shuffle = np.random.default_rng(config.shuffle_seed)
    images = dataset.images
    losses = []
    for epoch in range(1, config.pretrain_epochs + 1):
        total, count = 0.0, 0
        for b, idx in enumerate(batch_iterator(len(images), config.batch_size, True, shuffle)):
            if len(idx) < 2:
                continue
            x = images[idx]
            try:
                with T.Tape() as tape:
                    loss = reconstruction_loss(x, decode(params, encode(params, x, "train"), "train"))
                value = loss.item()
                if not np.isfinite(value):
                    raise NonFiniteLoss("L_r")
                T.backward(tape, loss, params=optimizer.params)
                optimizer.step()
            except (NonFiniteLoss, NonFiniteValue, NonFiniteGradient) as exc:
                raise _diverged("pretrain", epoch, b, exc) from exc
            total += value * len(idx)
            count += len(idx)
        losses.append(total / max(count, 1))
        log.info("pretrain epoch %d: L_r=%.4f", epoch, losses[-1])
    if log_to is not None:
        log_to.pretrain_losses.extend(losses)
    return params, losses


def init_clusters(params, dataset, n_clusters, seed=0, n_init=10):
    """Embed the dataset (eval mode) and place centroids with k-means."""
    if n_clusters < 2:
        raise ValueError("training needs at least two clusters")
    z = embed(params, dataset.images)
    if len(np.unique(z, axis=0)) < n_clusters:
        raise DegenerateEmbedding(f"fewer than {n_clusters} distinct embeddings")
    centers, _, _ = kmeans(z, n_clusters, seed=seed, n_init=n_init)
    return ClusterState(T.Tensor(centers.astype(params.dtype), requires_grad=True,
                                 name="cluster.centroids"))


def predict(params, state, images):
    """Eval-mode latent codes, soft assignments and hard assignments."""
    z = embed(params, images)
    q = soft_assign(T.Tensor(z), T.Tensor(state.centroids.data)).data
    return z, q, hard_assign(q)


def train_joint(params, state, dataset, config, log_to=None, hook=None, optimizer=None):
    """Joint optimization over triplet batches; returns (params, state, MetricsLog).

    ``hook(batch_index, triplet_batch, encoder)`` is called after negative
    selection and before the parameter update, with the encoder that did the
    selecting.
    """
    metrics = log_to if log_to is not None else MetricsLog()
    alpha, beta, gamma, omega = config.weights()
    all_params = params.parameters() + [state.centroids]
    if optimizer is None:
        optimizer = Adam(all_params, lr=config.lr)
    shuffle = np.random.default_rng(config.shuffle_seed + 1)
    aug_rng = np.random.default_rng(config.augment_seed)
    images, labels = dataset.images, dataset.labels
    fill = dataset.fill_value()
    start_epoch = metrics.rows[-1].epoch if metrics.rows else 0
    prev_assign = None
    p_full = None

    for epoch in range(start_epoch + 1, start_epoch + config.joint_epochs + 1):
        tick = time.perf_counter()
        sums = np.zeros(4)
        batches = 0
        fallbacks = 0
        refresh = config.target_refresh_epochs
        if refresh and (epoch - start_epoch - 1) % refresh == 0:
            p_full = target_distribution(predict(params, state, images)[1])
        for b, idx in enumerate(batch_iterator(len(images), config.batch_size, True, shuffle)):
            if len(idx) < 2:
                continue
            xa = images[idx]
            triplets = None
            if omega > 0:
                enc = encoder_fn(params)
                triplets = make_triplet_batch(idx, images, config.policy, enc, aug_rng,
                                              config.max_tries, keep_augments=hook is not None,
                                              fill=fill)
                fallbacks += triplets.fallbacks
                if hook is not None:
                    hook(b, triplets, enc)
            try:
                with T.Tape() as tape:
                    za = encode(params, xa, "train")
                    l_r = reconstruction_loss(xa, decode(params, za, "train"))
                    q = soft_assign(za, state)
                    p = p_full[idx] if p_full is not None else target_distribution(q)
                    l_c = kl_clustering_loss(p, q)
                    l_b = balance_loss(q, config.balance_variant)
                    if triplets is not None:
                        zp = encode(params, triplets.positives, "train")
                        zn = encode(params, images[triplets.negative_indices], "train")
                        l_t = triplet_loss(za, zp, zn, config.margin)
                    else:
                        l_t = T.Tensor(0.0, dtype=za.dtype)
                    total = composite_loss(l_r, l_c, l_b, l_t, alpha, beta, gamma, omega)
                T.backward(tape, total, params=all_params)
                optimizer.step()
            except (NonFiniteLoss, NonFiniteValue, NonFiniteGradient) as exc:
                raise _diverged("train_joint", epoch, b, exc) from exc
            sums += [l_r.item(), l_c.item(), l_b.item(), l_t.item()]
            batches += 1

        mean_terms = sums / max(batches, 1)
        loss_total = float(np.dot([alpha, beta, gamma, omega], mean_terms))
        _, _, assign = predict(params, state, images)
        acc = accuracy(labels, assign, state.n_clusters).acc if labels is not None else None
        row = EpochMetrics(epoch, loss_total, *map(float, mean_terms), acc=acc,
                           neg_fallbacks=int(fallbacks),
                           seconds=time.perf_counter() - tick)
        metrics.append(row)
        log.info("epoch %d: L=%.4f L_r=%.4f L_c=%.4f L_b=%.4f L_t=%.4f acc=%s fallbacks=%d",
                 epoch, loss_total, *mean_terms,
                 "n/a" if acc is None else f"{acc:.4f}", fallbacks)
        if config.early_stop and prev_assign is not None:
            if np.mean(assign != prev_assign) < config.early_stop_tol:
                log.info("assignments stable, stopping after epoch %d", epoch)
                break
        prev_assign = assign
    return params, state, metrics


@dataclass
class RunResult:
    params: object
    state: ClusterState
    log: MetricsLog
    embeddings: np.ndarray
    soft_assignments: np.ndarray
    assignments: np.ndarray
    acc: float = None
    optimizer: Adam = None
    artifacts: dict = field(default_factory=dict)


def checkpoint_tensors(params, state, optimizer=None):
    tensors = dict(params.state_dict())
    tensors["cluster.centroids"] = state.centroids.data
    if optimizer is not None:
        st = optimizer.state
        for key in sorted(st.m, key=str):
            tensors[f"adam.m.{key}"] = st.m[key]
            tensors[f"adam.v.{key}"] = st.v[key]
        tensors["adam.t"] = np.array([st.t], dtype=np.float32)
    return tensors


def write_artifacts(result, dataset, out_dir, timing=False):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "checkpoint": out / "checkpoint.dcae",
        "metrics": out / "metrics.csv",
        "embeddings": out / "embeddings.csv",
        "projection": out / "projection.csv",
    }
    save_checkpoint(paths["checkpoint"],
                    checkpoint_tensors(result.params, result.state, result.optimizer))
    rows = result.log.rows if timing else [replace(r, seconds=None) for r in result.log.rows]
    export_metrics(rows, paths["metrics"])
    export_embeddings(result.embeddings, dataset.labels, result.assignments,
                      paths["embeddings"])
    export_projection(project_2d(result.embeddings), dataset.labels, result.assignments,
                      paths["projection"])
    result.artifacts = {k: str(v) for k, v in paths.items()}
    return result.artifacts


def run(config, dataset, n_clusters, out_dir=None, timing=False, hook=None):
    """pretrain -> init_clusters -> train_joint, then optional artifact export.

    Errors propagate with a ``stage`` attribute naming the failing stage.
    """
    stage = "build"
    try:
        params = build(config.network_spec(dataset.image_shape), seed=config.init_seed)
        stage = "pretrain"
        metrics = MetricsLog()
        pretrain(params, dataset, config, log_to=metrics)
        stage = "init_clusters"
        state = init_clusters(params, dataset, n_clusters, seed=config.init_seed,
                              n_init=config.kmeans_n_init)
        stage = "train_joint"
        optimizer = Adam(params.parameters() + [state.centroids], lr=config.lr)
        train_joint(params, state, dataset, config, log_to=metrics, hook=hook,
                    optimizer=optimizer)
        stage = "evaluate"
        z, q, assign = predict(params, state, dataset.images)
        acc = None
        if dataset.labels is not None:
            acc = accuracy(dataset.labels, assign, n_clusters).acc
        result = RunResult(params, state, metrics, z, q, assign, acc, optimizer)
        if out_dir is not None:
            stage = "export"
            write_artifacts(result, dataset, out_dir, timing=timing)
        return result
    except DcsepError as exc:
        if not hasattr(exc, "stage"):
            exc.stage = stage
        raise
    except OSError as exc:
        exc.stage = stage
        raise
