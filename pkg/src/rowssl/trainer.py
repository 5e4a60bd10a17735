"""Training loop: momentum key network, feature queue, and the combined loss.

One step, in order: make two views per sample; run the query encoder,
projector, and classifier; read tailedness scores off the key embeddings and
turn them into per-anchor temperatures; build classification targets (one-hot
for labeled rows, uncertainty-biased soft pseudo-labels from the other view's
logits otherwise); compute losses and hand-derived gradients; apply SGD with
the scheduled learning rate; EMA-update the key network; push keys into the
queue; initialize or EMA-update the prototype bank; refresh the per-class
tailedness queues and the class uncertainty vector.

The uncertainty used when building pseudo-labels is always the one produced
by the *previous* step, never the current batch's.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .data import EmbeddingDataset, iterate_batches, two_views
from .errors import CheckpointError, StateError
from .feature_queue import UNLABELED, FeatureQueue, QueueSnapshot
from .losses import (
    ClassifierResult,
    LossBreakdown,
    RepresentationResult,
    classifier_loss,
    dynamic_temperatures,
    representation_loss,
    soft_pseudo_label,
    total_loss,
)
from .numerics import (
    DOMAIN_INIT,
    DOMAIN_PROTO,
    CosineClassifier,
    CosineSchedule,
    SgdMomentum,
    SmallNet,
    derive_seed,
    ema_params,
    l2_normalize_rows,
    normalize_rows_backward,
    schedule_value,
    softmax_backward,
    softmax_temp,
)
from .tailedness import (
    ClassTailQueues,
    PrototypeBank,
    init_prototypes,
    knn_density,
    tailedness_scores,
    update_prototypes,
)

CKPT_MAGIC = b"ROWSSL-CKPT 1\n"

# Role tags for seeding the three trainable blocks independently.
_ROLE_ENCODER = 0
_ROLE_PROJECTOR = 1
_ROLE_CLASSIFIER = 2


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    learning_rate: float = 0.1
    momentum: float = 0.9
    lambda_rep: float = 0.35
    tau_s: float = 0.1
    tau_t_start: float = 0.07
    tau_t_end: float = 0.04
    tau_t_warmup_epochs: int = 30
    epsilon: float = 4.0
    n_prototypes: int = 0          # 0 -> one prototype per classifier head
    lambda_tail: float = 0.9
    queue_size: int = 4096
    knn_k: int = 15
    tau_min: float = 0.05
    tau_max: float = 1.0
    lambda_var: float = 1.0
    tau_sup: float = 0.07
    key_momentum: float = 0.999
    class_count: str = "known"     # "known" | "estimate"
    class_count_init: int = 0      # heads when estimating; 0 -> 2 * true C
    tail_queue_cap: int = 256
    encoder_hidden: int = 128
    feature_dim: int = 64
    projector_hidden: int = 256
    projector_dim: int = 256
    noise_scale: float = 0.1
    drop_fraction: float = 0.1
    eval_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0.0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if not 0.0 <= self.lambda_rep <= 1.0:
            raise ValueError("lambda_rep must be in [0, 1]")
        for name in ("tau_s", "tau_t_start", "tau_t_end", "tau_sup"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.tau_t_warmup_epochs < 0:
            raise ValueError("tau_t_warmup_epochs must be >= 0")
        if self.epsilon < 0.0:
            raise ValueError("epsilon must be >= 0")
        if self.n_prototypes < 0:
            raise ValueError("n_prototypes must be >= 0")
        if not 0.0 <= self.lambda_tail <= 1.0:
            raise ValueError("lambda_tail must be in [0, 1]")
        if self.queue_size < 1:
            raise ValueError("queue_size must be >= 1")
        if self.knn_k < 1:
            raise ValueError("knn_k must be >= 1")
        if not 0.0 < self.tau_min <= self.tau_max:
            raise ValueError("need 0 < tau_min <= tau_max")
        if self.lambda_var < 0.0:
            raise ValueError("lambda_var must be >= 0")
        if not 0.0 <= self.key_momentum <= 1.0:
            raise ValueError("key_momentum must be in [0, 1]")
        if self.class_count not in ("known", "estimate"):
            raise ValueError("class_count must be 'known' or 'estimate'")
        if self.class_count_init < 0:
            raise ValueError("class_count_init must be >= 0")
        if self.tail_queue_cap < 1:
            raise ValueError("tail_queue_cap must be >= 1")
        for name in ("encoder_hidden", "feature_dim", "projector_hidden", "projector_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.noise_scale < 0.0:
            raise ValueError("noise_scale must be >= 0")
        if not 0.0 <= self.drop_fraction < 1.0:
            raise ValueError("drop_fraction must be in [0, 1)")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")


@dataclass
class TrainerState:
    config: TrainConfig
    input_dim: int
    n_classes: int        # true class count from the dataset metadata
    n_known: int
    n_heads: int          # classifier heads (== n_classes unless estimating)
    n_prototypes: int
    encoder: SmallNet
    projector: SmallNet
    key_encoder: SmallNet
    key_projector: SmallNet
    classifier: CosineClassifier
    optimizer: SgdMomentum
    queue: FeatureQueue
    bank: Optional[PrototypeBank]
    tail_queues: ClassTailQueues
    uncertainty: np.ndarray
    lr_schedule: CosineSchedule
    tau_t_schedule: CosineSchedule
    steps_per_epoch: int
    step: int = 0
    epoch: int = 0
    active_heads: Optional[np.ndarray] = None  # bool mask when heads were estimated

    def query_params(self) -> list[np.ndarray]:
        return self.encoder.parameters() + self.projector.parameters()

    def key_params(self) -> list[np.ndarray]:
        return self.key_encoder.parameters() + self.key_projector.parameters()

    def all_params(self) -> list[np.ndarray]:
        return self.query_params() + [self.classifier.weight]

    def all_grads(self) -> list[np.ndarray]:
        return self.encoder.gradients() + self.projector.gradients() + [self.classifier.w_grad]

    def zero_grad(self) -> None:
        self.encoder.zero_grad()
        self.projector.zero_grad()
        self.classifier.zero_grad()


def init_state(dataset: EmbeddingDataset, config: TrainConfig) -> TrainerState:
    if dataset.n_samples == 0:
        raise ValueError("cannot train on an empty dataset")
    n_classes = dataset.n_classes
    if config.class_count == "estimate":
        n_heads = config.class_count_init or 2 * n_classes
    else:
        n_heads = n_classes
    n_protos = config.n_prototypes or n_heads
    if n_protos > config.queue_size:
        raise ValueError(
            f"{n_protos} prototypes cannot be seeded from a queue of {config.queue_size}"
        )
    if config.knn_k > config.queue_size:
        raise ValueError("knn_k cannot exceed queue_size")
    encoder = SmallNet(
        [dataset.dim, config.encoder_hidden, config.feature_dim],
        derive_seed(config.seed, DOMAIN_INIT, _ROLE_ENCODER),
    )
    projector = SmallNet(
        [config.feature_dim, config.projector_hidden, config.projector_dim],
        derive_seed(config.seed, DOMAIN_INIT, _ROLE_PROJECTOR),
    )
    classifier = CosineClassifier(
        n_heads, config.feature_dim, derive_seed(config.seed, DOMAIN_INIT, _ROLE_CLASSIFIER)
    )
    optimizer = SgdMomentum(
        encoder.parameters() + projector.parameters() + [classifier.weight],
        lr=config.learning_rate,
        momentum=config.momentum,
    )
    steps_per_epoch = max(1, -(-dataset.n_samples // config.batch_size))
    return TrainerState(
        config=config,
        input_dim=dataset.dim,
        n_classes=n_classes,
        n_known=dataset.n_known,
        n_heads=n_heads,
        n_prototypes=n_protos,
        encoder=encoder,
        projector=projector,
        key_encoder=encoder.copy(),
        key_projector=projector.copy(),
        classifier=classifier,
        optimizer=optimizer,
        queue=FeatureQueue(config.queue_size, config.projector_dim),
        bank=None,
        tail_queues=ClassTailQueues(n_heads, config.tail_queue_cap),
        uncertainty=np.zeros(n_heads),
        lr_schedule=CosineSchedule(
            config.learning_rate, 0.0, config.epochs * steps_per_epoch
        ),
        tau_t_schedule=CosineSchedule(
            config.tau_t_start, config.tau_t_end, config.tau_t_warmup_epochs * steps_per_epoch
        ),
        steps_per_epoch=steps_per_epoch,
    )


def forward_losses(
    encoder: SmallNet,
    projector: SmallNet,
    classifier: CosineClassifier,
    view1: np.ndarray,
    view2: np.ndarray,
    targets1: np.ndarray,
    targets2: np.ndarray,
    keys: np.ndarray,
    taus: np.ndarray,
    snapshot: QueueSnapshot,
    labels: np.ndarray,
    is_labeled: np.ndarray,
    *,
    lambda_rep: float,
    tau_sup: float,
    tau_s: float,
    epsilon: float,
    skip_unsup: bool,
):
    """Pure forward pass of one step's loss given every stochastic input.

    Keys, temperatures, targets, and the queue snapshot are treated as
    constants (stop-gradient), so the value is a deterministic function of
    the three trainable blocks — which is exactly what a finite-difference
    probe of the parameters needs.

    Returns (breakdown, rep_result, cls_result, caches).
    """
    z1, enc_cache1 = encoder.forward(view1)
    z2, enc_cache2 = encoder.forward(view2)
    raw1, proj_cache1 = projector.forward(z1)
    anchors = l2_normalize_rows(raw1)
    logits1, cls_cache1 = classifier.forward(z1)
    logits2, cls_cache2 = classifier.forward(z2)
    p1 = softmax_temp(logits1, tau_s)
    p2 = softmax_temp(logits2, tau_s)
    rep = representation_loss(
        anchors, keys, labels, is_labeled, snapshot, taus, lambda_rep, tau_sup,
        skip_unsup=skip_unsup,
    )
    cls = classifier_loss(p1, p2, targets1, targets2, epsilon)
    breakdown = total_loss(rep, cls)
    caches = (enc_cache1, enc_cache2, proj_cache1, cls_cache1, cls_cache2, raw1, p1, p2)
    return breakdown, rep, cls, caches


def backward_losses(
    encoder: SmallNet,
    projector: SmallNet,
    classifier: CosineClassifier,
    rep: RepresentationResult,
    cls: ClassifierResult,
    caches,
    tau_s: float,
) -> None:
    """Accumulate parameter gradients for a forward_losses pass."""
    enc_cache1, enc_cache2, proj_cache1, cls_cache1, cls_cache2, raw1, p1, p2 = caches
    grad_raw1 = normalize_rows_backward(raw1, rep.grad_anchors)
    grad_z1_rep = projector.backward(proj_cache1, grad_raw1)
    grad_logits1 = softmax_backward(p1, cls.grad_p1, tau_s)
    grad_logits2 = softmax_backward(p2, cls.grad_p2, tau_s)
    grad_z1_cls = classifier.backward(cls_cache1, grad_logits1)
    grad_z2_cls = classifier.backward(cls_cache2, grad_logits2)
    encoder.backward(enc_cache1, grad_z1_rep + grad_z1_cls)
    encoder.backward(enc_cache2, grad_z2_cls)


def _one_hot(labels: np.ndarray, n_heads: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], n_heads))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def train_step(state: TrainerState, batch: EmbeddingDataset) -> LossBreakdown:
    """Run one optimization step on a batch; returns the loss breakdown."""
    cfg = state.config
    n = batch.n_samples
    if n == 0:
        raise ValueError("empty batch")
    if batch.dim != state.input_dim:
        raise ValueError(f"batch dim {batch.dim} != model input dim {state.input_dim}")

    view1 = np.empty_like(batch.vectors)
    view2 = np.empty_like(batch.vectors)
    for i in range(n):
        pair = two_views(
            batch.vectors[i], cfg.noise_scale, cfg.drop_fraction, cfg.seed,
            sample_id=int(batch.ids[i]), step=state.step,
        )
        view1[i] = pair.view1
        view2[i] = pair.view2

    # Key embeddings come from the momentum branch on the second view.
    kz = state.key_encoder.forward(view2)[0]
    keys = l2_normalize_rows(state.key_projector.forward(kz)[0])

    snapshot = state.queue.snapshot()
    warm = len(snapshot) >= max(cfg.knn_k + 1, state.n_prototypes)
    if state.bank is not None and state.bank.densities_valid:
        scores = tailedness_scores(keys, state.bank)
        taus = dynamic_temperatures(scores, state.bank.densities, cfg.tau_min, cfg.tau_max)
    else:
        scores = None
        taus = np.full(n, 0.5 * (cfg.tau_min + cfg.tau_max))

    # Teacher logits are the other view's classifier outputs, held constant.
    tau_t = schedule_value(state.tau_t_schedule, state.step)
    logits1 = state.classifier.forward(state.encoder.forward(view1)[0])[0]
    logits2 = state.classifier.forward(state.encoder.forward(view2)[0])[0]
    q_for_v1 = soft_pseudo_label(logits2, state.uncertainty, cfg.lambda_var, tau_t)
    q_for_v2 = soft_pseudo_label(logits1, state.uncertainty, cfg.lambda_var, tau_t)
    one_hot = _one_hot(np.where(batch.is_labeled, batch.labels, 0), state.n_heads)
    lab_col = batch.is_labeled[:, None]
    targets1 = np.where(lab_col, one_hot, q_for_v1)
    targets2 = np.where(lab_col, one_hot, q_for_v2)

    breakdown, rep, cls, caches = forward_losses(
        state.encoder, state.projector, state.classifier,
        view1, view2, targets1, targets2, keys, taus, snapshot,
        batch.labels, batch.is_labeled,
        lambda_rep=cfg.lambda_rep, tau_sup=cfg.tau_sup, tau_s=cfg.tau_s,
        epsilon=cfg.epsilon, skip_unsup=not warm,
    )
    if not np.isfinite(breakdown.total):
        raise StateError(f"non-finite loss at step {state.step}: {breakdown}")

    state.zero_grad()
    backward_losses(
        state.encoder, state.projector, state.classifier, rep, cls, caches, cfg.tau_s
    )
    lr = schedule_value(state.lr_schedule, state.step)
    state.optimizer.step(state.all_grads(), lr=lr)
    ema_params(state.key_params(), state.query_params(), cfg.key_momentum)

    queue_labels = np.where(batch.is_labeled, batch.labels, UNLABELED)
    state.queue.push_batch(keys, queue_labels)

    fresh = state.queue.snapshot()
    if state.bank is None:
        if state.queue.is_full:
            state.bank = init_prototypes(
                fresh, state.n_prototypes, derive_seed(cfg.seed, DOMAIN_PROTO, state.step)
            )
            knn_density(state.bank, fresh, cfg.knn_k)
    elif len(fresh) >= cfg.knn_k:
        update_prototypes(state.bank, fresh, cfg.lambda_tail)
        knn_density(state.bank, fresh, cfg.knn_k)

    if scores is not None:
        pseudo = np.argmax(q_for_v1, axis=1)
        tail_labels = np.where(batch.is_labeled, batch.labels, pseudo)
        state.tail_queues.push(scores, tail_labels)
        state.uncertainty = state.tail_queues.uncertainty()

    state.step += 1
    return breakdown


def fit(dataset: EmbeddingDataset, config: TrainConfig):
    """Train from scratch; returns (state, per-epoch log rows).

    With eval_every > 0, every eval_every-th epoch appends transductive
    accuracy over the unlabeled training rows to its log row.
    """
    from .evaluation import EvalProtocol, evaluate  # local import: evaluation reads states

    state = init_state(dataset, config)
    log: list[dict] = []
    train_counts = dataset.class_counts()
    for epoch in range(config.epochs):
        state.epoch = epoch
        sums = np.zeros(7)
        n_steps = 0
        lr_first = schedule_value(state.lr_schedule, state.step)
        for batch in iterate_batches(dataset, config.batch_size, config.seed, epoch):
            bd = train_step(state, batch)
            sums += (bd.unsup, bd.sup, bd.rep, bd.ce, bd.entropy, bd.cls, bd.total)
            n_steps += 1
        means = [float(v) for v in sums / max(1, n_steps)]
        row = {
            "epoch": epoch,
            "lr": float(lr_first),
            "unsup": means[0], "sup": means[1], "rep": means[2],
            "ce": means[3], "entropy": means[4], "cls": means[5], "total": means[6],
            "train_acc": None, "train_bacc": None,
        }
        if config.eval_every > 0 and (epoch + 1) % config.eval_every == 0:
            report = evaluate(state, dataset, EvalProtocol("train"), train_counts=train_counts)
            row["train_acc"] = report.acc["all"]
            row["train_bacc"] = report.bacc["all"]
        log.append(row)
    if config.class_count == "estimate" and config.epochs > 0:
        _, active = estimate_class_count(state, dataset)
        state.active_heads = active
    return state, log


def estimate_class_count(state: TrainerState, dataset: EmbeddingDataset):
    """Count classifier heads that win the argmax for at least one sample.

    Returns (count, active_mask). Heads that never fire are considered dead
    capacity: evaluation restricted to the active mask behaves as if the
    model had exactly `count` classes.
    """
    z = state.encoder.forward(dataset.vectors)[0]
    logits = state.classifier.forward(z)[0]
    preds = np.argmax(logits, axis=1)
    active = np.zeros(state.n_heads, dtype=bool)
    active[np.unique(preds)] = True
    return int(active.sum()), active


def _state_tensors(state: TrainerState) -> list[tuple[str, np.ndarray]]:
    tensors: list[tuple[str, np.ndarray]] = []
    for prefix, net in (
        ("encoder", state.encoder),
        ("projector", state.projector),
        ("key_encoder", state.key_encoder),
        ("key_projector", state.key_projector),
    ):
        for i, w in enumerate(net.weights):
            tensors.append((f"{prefix}.w{i}", w))
        for i, b in enumerate(net.biases):
            tensors.append((f"{prefix}.b{i}", b))
    tensors.append(("classifier.weight", state.classifier.weight))
    for i, v in enumerate(state.optimizer.velocity):
        tensors.append((f"velocity.{i}", v))
    if state.bank is not None:
        tensors.append(("bank.prototypes", state.bank.prototypes))
        tensors.append(("bank.densities", state.bank.densities))
    tensors.append(("uncertainty", state.uncertainty))
    return tensors


def save_checkpoint(state: TrainerState, path: str) -> None:
    """Binary checkpoint: magic, length-prefixed JSON header, float64 payload.

    Parameters, optimizer velocities, the prototype bank, the uncertainty
    vector, and the step/epoch counters round-trip bit-exactly. The feature
    queue and per-class tailedness queues are deliberately not stored; a
    loaded state re-enters queue warm-up.
    """
    tensors = _state_tensors(state)
    header = {
        "version": 1,
        "config": asdict(state.config),
        "input_dim": state.input_dim,
        "n_classes": state.n_classes,
        "n_known": state.n_known,
        "n_heads": state.n_heads,
        "n_prototypes": state.n_prototypes,
        "step": state.step,
        "epoch": state.epoch,
        "steps_per_epoch": state.steps_per_epoch,
        "bank": state.bank is not None,
        "bank_densities_valid": bool(state.bank.densities_valid) if state.bank else False,
        "active_heads": state.active_heads.tolist() if state.active_heads is not None else None,
        "tensors": [[name, list(arr.shape)] for name, arr in tensors],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> TrainerState:
    with open(path, "rb") as fh:
        magic = fh.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        raw_len = fh.read(8)
        if len(raw_len) != 8:
            raise CheckpointError("truncated header length")
        (blob_len,) = struct.unpack("<Q", raw_len)
        blob = fh.read(blob_len)
        if len(blob) != blob_len:
            raise CheckpointError("truncated header")
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable header: {exc}") from None
        if header.get("version") != 1:
            raise CheckpointError(f"unsupported version {header.get('version')!r}")
        try:
            config = TrainConfig(**header["config"])
        except (TypeError, ValueError) as exc:
            raise CheckpointError(f"bad config in header: {exc}") from None
        arrays: dict[str, np.ndarray] = {}
        for name, shape in header["tensors"]:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise CheckpointError(f"truncated payload at tensor {name}")
            arrays[name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
        if fh.read(1):
            raise CheckpointError("trailing bytes after payload")

    # Rebuild the skeleton, then overwrite every tensor from the payload.
    dummy = EmbeddingDataset(
        ids=np.arange(1),
        vectors=np.zeros((1, header["input_dim"])),
        labels=np.zeros(1, dtype=np.int64),
        is_labeled=np.zeros(1, dtype=bool),
        n_known=header["n_known"],
        n_novel=header["n_classes"] - header["n_known"],
    )
    state = init_state(dummy, config)
    state.n_classes = header["n_classes"]
    state.n_known = header["n_known"]
    state.n_heads = header["n_heads"]
    state.n_prototypes = header["n_prototypes"]
    if state.classifier.n_classes != header["n_heads"]:
        state.classifier = CosineClassifier(header["n_heads"], config.feature_dim, 0)
        state.optimizer = SgdMomentum(
            state.query_params() + [state.classifier.weight],
            lr=config.learning_rate, momentum=config.momentum,
        )
        state.tail_queues = ClassTailQueues(header["n_heads"], config.tail_queue_cap)
    state.step = header["step"]
    state.epoch = header["epoch"]
    state.steps_per_epoch = header["steps_per_epoch"]
    state.lr_schedule = CosineSchedule(
        config.learning_rate, 0.0, config.epochs * state.steps_per_epoch
    )
    state.tau_t_schedule = CosineSchedule(
        config.tau_t_start, config.tau_t_end, config.tau_t_warmup_epochs * state.steps_per_epoch
    )

    def _restore(name: str, dest: np.ndarray) -> None:
        if name not in arrays:
            raise CheckpointError(f"missing tensor {name}")
        src = arrays[name]
        if src.shape != dest.shape:
            raise CheckpointError(f"tensor {name}: shape {src.shape} != expected {dest.shape}")
        dest[...] = src

    for prefix, net in (
        ("encoder", state.encoder),
        ("projector", state.projector),
        ("key_encoder", state.key_encoder),
        ("key_projector", state.key_projector),
    ):
        for i in range(net.n_layers):
            _restore(f"{prefix}.w{i}", net.weights[i])
            _restore(f"{prefix}.b{i}", net.biases[i])
    _restore("classifier.weight", state.classifier.weight)
    for i, v in enumerate(state.optimizer.velocity):
        _restore(f"velocity.{i}", v)
    if header["bank"]:
        protos = arrays.get("bank.prototypes")
        dens = arrays.get("bank.densities")
        if protos is None or dens is None:
            raise CheckpointError("header promises a prototype bank but tensors are missing")
        state.bank = PrototypeBank(
            prototypes=protos.copy(),
            densities=dens.copy(),
            densities_valid=bool(header["bank_densities_valid"]),
        )
    _restore("uncertainty", state.uncertainty)
    if header["active_heads"] is not None:
        state.active_heads = np.asarray(header["active_heads"], dtype=bool)
    return state
