"""End-to-end optimization and evaluation.

Training alternates two steps per epoch: a full pass updating only the
channel-grouping weights under the attention loss (step A), then a full pass
updating every other group under attention + autoencoder + task loss
(step B). Batch losses are means over samples; the regularized autoencoder
term enters once per batch. Checkpoints are a versioned binary (magic
"LDVA") that round-trips parameters and optimizer state bit-exactly.
Evaluation never mutates parameters.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, fields, asdict

import numpy as np

from ldva import backbone, encoder, heads
from ldva import tensorcore as tc
from ldva.data import LabeledImageSet, sample_episode_indices, class_split, sample_split
from ldva.tensorcore import AdamState, ParamSet, Tensor

CHECKPOINT_MAGIC = b"LDVA"
CHECKPOINT_VERSION = 1

TASKS = ("gzsl", "fsl", "da")
DA_PHASES = ("source_pi", "joint_pi")

# rng stream tags
_TAG_INIT = 31
_TAG_SHUFFLE_A = 32
_TAG_SHUFFLE_B = 33
_TAG_EPISODES = 34


def _stream(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(key)))


@dataclass
class TrainConfig:
    """One training run. Defaults mirror the reference recipe (step-A rate
    1e-6, step-B 1e-5, divergence weight 5 for GZSL and 2 otherwise); desk
    configs override rates and epochs explicitly."""

    task: str
    epochs: int = 10
    lr_step_a: float = 1e-6
    lr_step_b: float = 1e-5
    batch_size: int = 32
    lambda_div: float | None = None
    lambda_reg: float = 1e-3
    zeta: float = 0.02
    eta: float = 1.0
    num_parts: int = 4
    num_prototypes: int = 16
    hidden: int = 32
    seed: int = 0
    input_side: int = 28
    channels: tuple = (16, 32, 32)
    pools: tuple = (2, 2, 1)
    da_phase: str = "source_pi"
    interleave_per_batch: bool = False
    # objective term weights (all 1.0 = the literal summed objective); the
    # compactness term scales with raw map area, so desk-scale configs may
    # down-weight it relative to the task term
    weight_part: float = 1.0
    weight_prob: float = 1.0
    weight_task: float = 1.0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.da_phase not in DA_PHASES:
            raise ValueError(f"unknown da_phase {self.da_phase!r}")
        if self.lr_step_a <= 0 or self.lr_step_b <= 0:
            raise ValueError("learning rates must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0 (0 = dry run)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lambda_div is None:
            self.lambda_div = 5.0 if self.task == "gzsl" else 2.0
        self.channels = tuple(int(c) for c in self.channels)
        self.pools = tuple(int(p) for p in self.pools)

    def backbone_config(self) -> backbone.BackboneConfig:
        return backbone.BackboneConfig(
            input_side=self.input_side, channels=self.channels, pools=self.pools,
            num_parts=self.num_parts, zeta=self.zeta, lambda_div=self.lambda_div)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["channels"] = list(self.channels)
        doc["pools"] = list(self.pools)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown train config keys: {unknown}")
        return cls(**doc)


def config_hash(cfg: TrainConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# -- model assembly -----------------------------------------------------------


@dataclass
class Model:
    """Parameter set plus the typed views the pipeline stages need."""

    params: ParamSet
    bb_config: backbone.BackboneConfig
    dictionary: encoder.PrototypeDictionary
    predictor: heads.Predictor
    out_dim: int

    @property
    def code_dim(self) -> int:
        return self.bb_config.num_parts * self.dictionary.num_prototypes


def build_model(cfg: TrainConfig, out_dim: int) -> Model:
    rng = _stream(cfg.seed, _TAG_INIT)
    params = ParamSet()
    bb_config = cfg.backbone_config()
    backbone.init_backbone_params(params, bb_config, rng)
    dictionary = encoder.init_encoder_params(
        params, cfg.num_parts, cfg.num_prototypes, bb_config.feature_channels, rng)
    predictor = heads.init_predictor_params(
        params, cfg.num_parts * cfg.num_prototypes, cfg.hidden, out_dim, rng)
    return Model(params=params, bb_config=bb_config, dictionary=dictionary,
                 predictor=predictor, out_dim=out_dim)


@dataclass
class Encoding:
    """Forward pass artifacts for one image batch."""

    features: Tensor            # (N, C, H, W)
    attention: backbone.AttentionMaps
    part_feats: Tensor          # (N, M, C)
    code: Tensor                # (N, M, K)
    code_flat: Tensor           # (N, M*K)


def forward_encoding(model: Model, images: np.ndarray) -> Encoding:
    x = Tensor(np.asarray(images, dtype=np.float64))
    e = backbone.extract_global_features(x, model.params, model.bb_config)
    g = backbone.channel_grouping(e, model.params, model.bb_config)
    attention = backbone.attention_maps(g, e)
    z = backbone.part_features(attention, e)
    code = encoder.encode(z, model.dictionary)
    n = code.shape[0]
    return Encoding(features=e, attention=attention, part_feats=z, code=code,
                    code_flat=code.reshape((n, model.code_dim)))


def encode_dataset(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Flattened codes for a whole image array; read-only on the model."""
    chunks = []
    for lo in range(0, len(images), batch_size):
        chunks.append(forward_encoding(model, images[lo:lo + batch_size]).code_flat.data)
    return np.concatenate(chunks) if chunks else np.zeros((0, model.code_dim))


# -- task data bundles -----------------------------------------------------------


@dataclass
class GzslBundle:
    train: LabeledImageSet          # seen-class training samples
    test_seen: LabeledImageSet
    test_unseen: LabeledImageSet
    table_all: heads.SemanticTable  # normalized, every class
    split: heads.GzslSplit

    @property
    def table_seen(self) -> heads.SemanticTable:
        return self.table_all.select(self.split.seen)


@dataclass
class FslBundle:
    train: LabeledImageSet          # labels remapped to 0..C-1
    test: LabeledImageSet           # held-out classes, original labels


@dataclass
class DaBundle:
    source_train: LabeledImageSet   # labels 0..C-1
    target_train: LabeledImageSet   # same label space; labels unused in training
    target_test: LabeledImageSet


def semantic_table_from(dataset: LabeledImageSet) -> heads.SemanticTable:
    if dataset.semantics is None:
        raise ValueError("dataset carries no semantic vectors")
    labels = sorted(dataset.semantics)
    table = heads.SemanticTable(np.array(labels),
                                np.stack([dataset.semantics[y] for y in labels]))
    return table.normalized()


def prepare_gzsl_data(full: LabeledImageSet, seen_fraction: float, split_seed: int,
                      train_fraction: float = 0.8) -> GzslBundle:
    """Class-split into seen/unseen, then sample-split the seen classes into
    train and held-out test; unseen classes are test-only."""
    seen_set, unseen_set = class_split(full, seen_fraction, split_seed)
    train, test_seen = sample_split(seen_set, train_fraction, split_seed)
    split = heads.GzslSplit(seen=tuple(int(y) for y in seen_set.classes),
                            unseen=tuple(int(y) for y in unseen_set.classes))
    return GzslBundle(train=train, test_seen=test_seen, test_unseen=unseen_set,
                      table_all=semantic_table_from(full), split=split)


def _require_contiguous(labels: np.ndarray, what: str) -> int:
    classes = np.unique(labels)
    n = len(classes)
    if not np.array_equal(classes, np.arange(n)):
        raise ValueError(f"{what}: labels must be contiguous 0..{n - 1}")
    return n


# -- training --------------------------------------------------------------------


@dataclass
class TrainRun:
    model: Model
    state_a: AdamState
    state_b: AdamState
    metrics: list[dict] = field(default_factory=list)
    epoch: int = 0


def _task_loss(model: Model, cfg: TrainConfig, enc: Encoding, labels, is_source,
               bundle) -> Tensor:
    if cfg.task == "gzsl":
        table = bundle.table_seen
        return heads.loss_gzsl(enc.code_flat, labels, table, cfg.eta,
                               model.predictor).mean()
    if cfg.task == "fsl":
        return heads.loss_fsl(enc.code_flat, labels, model.predictor).mean()
    return heads.loss_da(enc.code_flat, labels, is_source, model.predictor).mean()


def train_step_a(model: Model, cfg: TrainConfig, images: np.ndarray,
                 state: AdamState) -> float:
    """Update only grouping_G under the attention loss; everything else is
    left bit-identical."""
    if len(images) == 0:
        raise ValueError("train_step_a: empty batch")
    model.params.zero_grads()
    enc = forward_encoding(model, images)
    loss = backbone.attention_loss_batch(enc.attention, cfg.zeta, cfg.lambda_div).mean()
    loss.backward()
    model.params.fill_missing_grads()
    tc.adam_step(model.params, state, ["grouping_G"])
    return loss.item()


def train_step_b(model: Model, cfg: TrainConfig, images: np.ndarray, labels,
                 is_source, bundle, state: AdamState) -> dict:
    """Update all groups except grouping_G under the full objective
    (attention + autoencoder + task)."""
    if len(images) == 0:
        raise ValueError("train_step_b: empty batch")
    model.params.zero_grads()
    enc = forward_encoding(model, images)
    l_part = backbone.attention_loss_batch(enc.attention, cfg.zeta, cfg.lambda_div).mean()
    l_prob = encoder.loss_prob(enc.part_feats, model.dictionary, cfg.lambda_reg)
    l_task = _task_loss(model, cfg, enc, labels, is_source, bundle)
    total = (cfg.weight_part * l_part + cfg.weight_prob * l_prob
             + cfg.weight_task * l_task)
    total.backward()
    model.params.fill_missing_grads()
    tc.adam_step(model.params, state, ["backbone_E", "encoder_PD", "predictor_V"])
    return {"loss_part": l_part.item(), "loss_prob": l_prob.item(),
            "loss_task": l_task.item(), "loss_total": total.item()}


def _training_pool(cfg: TrainConfig, bundle):
    """(images, labels, is_source) for the task; target labels are -1."""
    if cfg.task == "gzsl":
        train = bundle.train
        return train.images, train.labels, np.ones(len(train), dtype=bool)
    if cfg.task == "fsl":
        train = bundle.train
        _require_contiguous(train.labels, "fsl training set")
        return train.images, train.labels, np.ones(len(train), dtype=bool)
    n_classes = _require_contiguous(bundle.source_train.labels, "da source set")
    if cfg.da_phase == "source_pi":
        src = bundle.source_train
        return src.images, src.labels, np.ones(len(src), dtype=bool)
    images = np.concatenate([bundle.source_train.images, bundle.target_train.images])
    labels = np.concatenate([bundle.source_train.labels,
                             np.full(len(bundle.target_train), -1, dtype=np.int64)])
    is_source = np.concatenate([np.ones(len(bundle.source_train), dtype=bool),
                                np.zeros(len(bundle.target_train), dtype=bool)])
    return images, labels, is_source


def output_dim_for(cfg: TrainConfig, bundle) -> int:
    if cfg.task == "gzsl":
        return bundle.table_all.dim
    if cfg.task == "fsl":
        return _require_contiguous(bundle.train.labels, "fsl training set")
    return _require_contiguous(bundle.source_train.labels, "da source set")


def train(cfg: TrainConfig, bundle, init_from: "Checkpoint | None" = None) -> TrainRun:
    """Run the two-step alternating optimization.

    Each epoch makes one shuffled step-A pass then one shuffled step-B pass
    (set interleave_per_batch to alternate within a single pass instead).
    DA joint_pi requires a source_pi checkpoint to warm-start from.
    """
    if cfg.task == "da" and cfg.da_phase == "joint_pi":
        if init_from is None:
            raise ValueError("da joint_pi requires a source_pi checkpoint to start from")
        if init_from.config.get("task") != "da":
            raise ValueError("initialization checkpoint was not trained for da")
    out_dim = output_dim_for(cfg, bundle)
    model = build_model(cfg, out_dim)
    if init_from is not None:
        load_into_model(model, init_from)
    state_a = AdamState(lr=cfg.lr_step_a)
    state_b = AdamState(lr=cfg.lr_step_b)
    run = TrainRun(model=model, state_a=state_a, state_b=state_b)
    images, labels, is_source = _training_pool(cfg, bundle)
    n = len(images)
    cfg_hash = config_hash(cfg)

    for epoch in range(cfg.epochs):
        sums = {"step_a_loss_part": 0.0, "loss_part": 0.0, "loss_prob": 0.0,
                "loss_task": 0.0, "loss_total": 0.0}
        order_a = _stream(cfg.seed, _TAG_SHUFFLE_A, epoch).permutation(n)
        order_b = _stream(cfg.seed, _TAG_SHUFFLE_B, epoch).permutation(n)
        batches_a = [order_a[lo:lo + cfg.batch_size] for lo in range(0, n, cfg.batch_size)]
        batches_b = [order_b[lo:lo + cfg.batch_size] for lo in range(0, n, cfg.batch_size)]

        def do_a(idx):
            sums["step_a_loss_part"] += train_step_a(
                model, cfg, images[idx], state_a) * len(idx)

        def do_b(idx):
            part = train_step_b(model, cfg, images[idx], labels[idx],
                                is_source[idx], bundle, state_b)
            for key, value in part.items():
                sums[key] += value * len(idx)

        if cfg.interleave_per_batch:
            for idx_a, idx_b in zip(batches_a, batches_b):
                do_a(idx_a)
                do_b(idx_b)
        else:
            for idx in batches_a:
                do_a(idx)
            for idx in batches_b:
                do_b(idx)

        record = {"epoch": epoch, "seed": cfg.seed, "config_hash": cfg_hash}
        record.update({key: value / n for key, value in sums.items()})
        run.metrics.append(record)
        run.epoch = epoch + 1
    return run


# -- evaluation --------------------------------------------------------------------


def evaluate_fsl(model: Model, test_set: LabeledImageSet, m: int, k: int, q: int,
                 n_episodes: int, seed: int = 0) -> dict:
    """Episodic nearest-class-mean evaluation on frozen codes."""
    codes = encode_dataset(model, test_set.images)
    rng = _stream(seed, _TAG_EPISODES)
    accuracies = []
    for _ in range(n_episodes):
        sup, qry, classes = sample_episode_indices(test_set.labels, m, k, q, rng)
        protos = heads.fsl_prototypes(codes[sup], test_set.labels[sup],
                                      required=classes)
        predicted = heads.fsl_classify_batch(codes[qry], protos)
        accuracies.append(float((predicted == test_set.labels[qry]).mean()))
    arr = np.array(accuracies)
    stderr = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return {"mean_acc": float(arr.mean()), "stderr": stderr, "episodes": n_episodes}


def evaluate_gzsl(model: Model, bundle: GzslBundle, sweep: bool = True,
                  c_cs: float | None = None, sweep_steps: int = 51) -> dict:
    """Class-averaged seen/unseen accuracies and harmonic mean, uncalibrated
    and with calibrated stacking (swept on the evaluation scores unless a
    constant is given). Also reports unseen-restricted (conventional ZSL)
    accuracy."""
    codes = np.concatenate([encode_dataset(model, bundle.test_unseen.images),
                            encode_dataset(model, bundle.test_seen.images)])
    labels = np.concatenate([bundle.test_unseen.labels, bundle.test_seen.labels])
    scores = heads.compatibility_scores(codes, model.predictor, bundle.table_all)
    ts0, tr0, h0 = heads.gzsl_metrics(scores, labels, bundle.table_all,
                                      bundle.split, c_cs=0.0)
    if c_cs is not None:
        ts, tr, h = heads.gzsl_metrics(scores, labels, bundle.table_all,
                                       bundle.split, c_cs=c_cs)
        chosen = heads.CalibrationResult(c_cs=c_cs, ts=ts, tr=tr, h=h)
    elif sweep:
        chosen = heads.sweep_calibration(scores, labels, bundle.table_all,
                                         bundle.split, steps=sweep_steps)
    else:
        chosen = heads.CalibrationResult(c_cs=0.0, ts=ts0, tr=tr0, h=h0)

    unseen_codes = codes[:len(bundle.test_unseen)]
    table_unseen = bundle.table_all.select(bundle.split.unseen)
    zsl_pred = heads.zsl_classify(unseen_codes, model.predictor, table_unseen)
    zsl_acc, _, _ = heads.class_averaged_accuracy(
        zsl_pred, bundle.test_unseen.labels, bundle.split.unseen)
    return {"ts": chosen.ts, "tr": chosen.tr, "H": chosen.h, "c_cs": chosen.c_cs,
            "ts_uncalibrated": ts0, "tr_uncalibrated": tr0, "H_uncalibrated": h0,
            "zsl_unseen_acc": zsl_acc}


def evaluate_da(model: Model, target_test: LabeledImageSet) -> dict:
    """Sample-averaged top-1 accuracy on the target domain."""
    codes = encode_dataset(model, target_test.images)
    logits = heads.predict_array(codes, model.predictor)
    predicted = heads.pseudo_label(logits)
    return {"target_acc": float((predicted == target_test.labels).mean())}


# -- checkpointing --------------------------------------------------------------------


@dataclass
class Checkpoint:
    version: int
    epoch: int
    config: dict
    out_dim: int
    groups: dict[str, str]
    arrays: dict[str, np.ndarray]
    adam_meta: dict


def make_checkpoint(run: TrainRun, cfg: TrainConfig) -> Checkpoint:
    arrays = {f"param/{name}": t.data.copy() for name, t, _ in run.model.params.items()}
    adam_meta = {}
    for tag, state in (("a", run.state_a), ("b", run.state_b)):
        adam_meta[tag] = {"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2,
                          "eps": state.eps, "t": dict(state.t)}
        for name, m in state.m.items():
            arrays[f"adam_{tag}.m/{name}"] = m.copy()
            arrays[f"adam_{tag}.v/{name}"] = state.v[name].copy()
    groups = {name: group for name, _, group in run.model.params.items()}
    return Checkpoint(version=CHECKPOINT_VERSION, epoch=run.epoch,
                      config=cfg.to_dict(), out_dim=run.model.out_dim,
                      groups=groups, arrays=arrays, adam_meta=adam_meta)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """magic "LDVA", u32 LE version, length-prefixed JSON meta, then
    length-prefixed (name, shape, raw little-endian float64) records."""
    meta = {"epoch": ckpt.epoch, "config": ckpt.config, "out_dim": ckpt.out_dim,
            "groups": ckpt.groups, "adam": ckpt.adam_meta}
    meta_blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        fh.write(struct.pack("<Q", len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<Q", len(ckpt.arrays)))
        for name in sorted(ckpt.arrays):
            arr = np.ascontiguousarray(ckpt.arrays[name], dtype=np.float64)
            blob = name.encode()
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
        version = struct.unpack("<I", fh.read(4))[0]
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        meta_len = struct.unpack("<Q", fh.read(8))[0]
        meta = json.loads(fh.read(meta_len).decode())
        count = struct.unpack("<Q", fh.read(8))[0]
        arrays = {}
        for _ in range(count):
            name_len = struct.unpack("<Q", fh.read(8))[0]
            name = fh.read(name_len).decode()
            ndim = struct.unpack("<Q", fh.read(8))[0]
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim)) if ndim else ()
            size = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(shape)
            arrays[name] = arr.astype(np.float64)
    return Checkpoint(version=version, epoch=meta["epoch"], config=meta["config"],
                      out_dim=meta["out_dim"], groups=meta["groups"],
                      arrays=arrays, adam_meta=meta["adam"])


def load_into_model(model: Model, ckpt: Checkpoint) -> None:
    """Copy checkpoint parameters into a freshly built model, bit-exact."""
    for name, tensor, _ in model.params.items():
        key = f"param/{name}"
        if key not in ckpt.arrays:
            raise ValueError(f"checkpoint missing parameter {name!r}")
        arr = ckpt.arrays[key]
        if arr.shape != tensor.shape:
            raise ValueError(f"checkpoint parameter {name!r} has shape {arr.shape}, "
                             f"expected {tensor.shape}")
        tensor.data = arr.copy()


def model_from_checkpoint(ckpt: Checkpoint):
    """Rebuild (model, state_a, state_b, config) exactly as checkpointed."""
    cfg = TrainConfig.from_dict(ckpt.config)
    model = build_model(cfg, ckpt.out_dim)
    load_into_model(model, ckpt)
    states = {}
    for tag in ("a", "b"):
        meta = ckpt.adam_meta[tag]
        state = AdamState(lr=meta["lr"], beta1=meta["beta1"], beta2=meta["beta2"],
                          eps=meta["eps"])
        state.t = {name: int(t) for name, t in meta["t"].items()}
        for name in state.t:
            state.m[name] = ckpt.arrays[f"adam_{tag}.m/{name}"].copy()
            state.v[name] = ckpt.arrays[f"adam_{tag}.v/{name}"].copy()
        states[tag] = state
    return model, states["a"], states["b"], cfg


# -- gradient-check suite ---------------------------------------------------------------


def gradcheck_suite(seed: int = 0, h: float = 1e-5, tol: float = 1e-4,
                    grad_transform=None, fault_loss: str | None = None):
    """Finite-difference checks of every loss on a small randomized instance
    (2 parts, 3 prototypes, 5 channels, 4x4 maps).

    Returns [(loss_name, GradCheckReport)]. `fault_loss` perturbs that loss's
    analytic gradients so the checker's failure path can be exercised.
    """
    results = []
    tasks = ["loss_part", "loss_prob", "loss_gzsl", "loss_fsl", "loss_da", "loss_total"]
    for name in tasks:
        cfg = TrainConfig(task="fsl", num_parts=2, num_prototypes=3, hidden=8,
                          input_side=8, channels=(5,), pools=(2,), seed=seed,
                          lambda_div=2.0, lambda_reg=1e-2, eta=0.5)
        rng = _stream(seed, 41)
        n, n_classes, sem_dim = 3, 3, 6
        images = rng.random((n, cfg.input_side, cfg.input_side))
        labels = rng.integers(0, n_classes, size=n)
        is_source = np.array([True, False, True])
        sem = rng.normal(size=(n_classes + 1, sem_dim))
        table = heads.SemanticTable(np.arange(n_classes + 1), sem).normalized()
        out_dim = sem_dim if name == "loss_gzsl" else n_classes
        model = build_model(cfg, out_dim)

        def loss_fn(name=name, model=model, cfg=cfg):
            enc = forward_encoding(model, images)
            if name == "loss_part":
                return backbone.attention_loss_batch(
                    enc.attention, cfg.zeta, cfg.lambda_div).mean()
            if name == "loss_prob":
                return encoder.loss_prob(enc.part_feats, model.dictionary,
                                         cfg.lambda_reg)
            if name == "loss_gzsl":
                return heads.loss_gzsl(enc.code_flat, labels, table, cfg.eta,
                                       model.predictor).mean()
            if name == "loss_fsl":
                return heads.loss_fsl(enc.code_flat, labels, model.predictor).mean()
            if name == "loss_da":
                return heads.loss_da(enc.code_flat,
                                     np.where(is_source, labels, -1), is_source,
                                     model.predictor).mean()
            l_part = backbone.attention_loss_batch(
                enc.attention, cfg.zeta, cfg.lambda_div).mean()
            l_prob = encoder.loss_prob(enc.part_feats, model.dictionary, cfg.lambda_reg)
            l_task = heads.loss_fsl(enc.code_flat, labels, model.predictor).mean()
            return l_part + l_prob + l_task

        transform = grad_transform
        if fault_loss == name:
            def transform(pname, grad):
                flat = grad.reshape(-1)
                flat[0] += 1e-2
                return grad
        report = tc.grad_check(loss_fn, model.params, h=h, tol=tol,
                               grad_transform=transform)
        results.append((name, report))
    return results
