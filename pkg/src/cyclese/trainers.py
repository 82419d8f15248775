"""Training loops: baseline feature mapping, staged CSE and adversarial ACSE.

All regimes run per-utterance SGD with momentum over a fixed schedule of
stages. The whole run is described by a :class:`TrainState` (networks,
optimizer velocities, normalization statistics, RNG and the global epoch
counter), which round-trips bit-exactly through the CKP1 checkpoint format;
resuming a saved state continues exactly where the original run would have
gone.

Features are stored raw on disk. Trainers normalize the noisy (87-dim)
stream and the clean (29-dim) stream with their own global statistics, so
``F`` maps normalized noisy frames to normalized clean frames and ``G`` the
other way round.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses as L
from .errors import ConfigError, DataError, DimensionError, FormatError, NumericError, StateError
from .features import (
    N_AUGMENTED,
    N_STATIC,
    FeatureSequence,
    NormStats,
    append_deltas,
    compute_global_stats,
    denormalize,
    normalize,
)
from .nn import (
    PAPER_DISC_HIDDEN,
    PAPER_HIDDEN,
    PAPER_LAYERS,
    PAPER_PROJ,
    Discriminator,
    DiscriminatorSpec,
    MappingNetwork,
    MappingSpec,
)

log = logging.getLogger(__name__)

PAPER_LEARNING_RATE = 2e-7
PAPER_MOMENTUM = 0.5

REGIMES = ("baseline", "cse_forward", "cse_full", "acse")
ROLES = ("F", "G", "D_U", "D_V")

# Reduced networks and a larger step for runs that must finish in minutes on
# one CPU core; every paper-stated value stays the default elsewhere.
DESK_PRESET = dict(hidden=64, proj=32, disc_hidden=64, learning_rate=1e-3)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

@dataclass
class OptimizerState:
    learning_rate: float = PAPER_LEARNING_RATE
    momentum: float = PAPER_MOMENTUM
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")


def _clip_scale(grads, max_norm):
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    return 1.0 if norm <= max_norm else max_norm / norm


def sgd_step(params, grads, opt: OptimizerState, key: str = "net", clip: float | None = None):
    """One momentum step: ``v <- m*v - lr*g; p <- p + v`` (in place).

    ``key`` selects the velocity buffers inside ``opt``; with ``clip`` set the
    gradient is first rescaled to at most that global L2 norm. Any
    non-finite gradient aborts the step before anything changes.
    """
    if set(grads) != set(params):
        raise DimensionError(f"gradient names do not match parameters for {key}")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise DimensionError(f"{key}.{name}: gradient shape {g.shape} vs parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"{key}.{name}", f"non-finite gradient in {key}.{name}")
    scale = 1.0 if clip is None else _clip_scale(grads, clip)
    vel = opt.velocity.setdefault(key, {})
    for name, g in grads.items():
        v = vel.get(name)
        if v is None:
            v = vel[name] = np.zeros_like(params[name])
        v *= opt.momentum
        v -= opt.learning_rate * (g if scale == 1.0 else scale * g)
        params[name] += v
    return params, opt


# --------------------------------------------------------------------------
# configuration and state
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """Everything that defines a training run.

    ``stage_epochs`` are the CSE stages (F on L_NC, G on L_CN, forward cycle,
    full objective); ``baseline_epochs`` defaults to their sum so the
    baseline sees the same total number of epochs.
    """

    regime: str = "cse_full"
    stage_epochs: tuple = (5, 5, 10, 10)
    baseline_epochs: int | None = None
    acse_init_epochs: int = 5
    acse_joint_epochs: int = 20
    seed: int = 0
    cse_weights: L.CseWeights = L.CseWeights()
    acse_weights: L.AcseWeights = L.AcseWeights()
    learning_rate: float = PAPER_LEARNING_RATE
    momentum: float = PAPER_MOMENTUM
    clip: float | None = None
    eval_every: int = 1
    hidden: int = PAPER_HIDDEN
    proj: int = PAPER_PROJ
    layers: int = PAPER_LAYERS
    disc_hidden: int = PAPER_DISC_HIDDEN
    disc_layers: int = PAPER_LAYERS
    log_path: str | None = None

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        stages = tuple(int(e) for e in self.stage_epochs)
        if len(stages) != 4:
            raise ConfigError("stage_epochs needs four entries")
        object.__setattr__(self, "stage_epochs", stages)
        counts = list(stages) + [self.acse_init_epochs, self.acse_joint_epochs]
        if self.baseline_epochs is not None:
            counts.append(self.baseline_epochs)
        if any(int(c) != c or c < 0 for c in counts):
            raise ConfigError("epoch counts must be non-negative integers")
        for k in ("hidden", "proj", "layers", "disc_hidden", "disc_layers", "eval_every"):
            if not getattr(self, k) >= 1:
                raise ConfigError(f"{k} must be at least 1")
        if self.clip is not None and not self.clip > 0:
            raise ConfigError("clip must be positive")
        OptimizerState(self.learning_rate, self.momentum)

    def schedule(self):
        """``[(stage, epochs), ...]`` for the configured regime."""
        e1, e2, e3, e4 = self.stage_epochs
        if self.regime == "baseline":
            n = sum(self.stage_epochs) if self.baseline_epochs is None else self.baseline_epochs
            return [("nc", n)]
        if self.regime == "cse_forward":
            return [("nc", e1), ("cn", e2), ("forward", e3)]
        if self.regime == "cse_full":
            return [("nc", e1), ("cn", e2), ("forward", e3), ("full", e4)]
        return [("init", self.acse_init_epochs), ("joint", self.acse_joint_epochs)]

    def stage_of(self, epoch: int) -> str:
        for stage, n in self.schedule():
            if epoch < n:
                return stage
            epoch -= n
        raise StateError("epoch lies beyond the schedule")

    @property
    def total_epochs(self) -> int:
        return sum(n for _, n in self.schedule())

    def mapping_spec(self, role):
        dims = (N_AUGMENTED, N_STATIC) if role == "F" else (N_STATIC, N_AUGMENTED)
        return MappingSpec(*dims, hidden=self.hidden, proj=self.proj, layers=self.layers)

    def disc_spec(self, role):
        dim = N_AUGMENTED if role == "D_U" else N_STATIC
        return DiscriminatorSpec(dim, hidden=self.disc_hidden, layers=self.disc_layers)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["cse_weights"] = L.CseWeights(**d["cse_weights"])
        d["acse_weights"] = L.AcseWeights(**d["acse_weights"])
        d["stage_epochs"] = tuple(d["stage_epochs"])
        return cls(**d)


def paper_defaults_report():
    """``[(setting, expected, actual), ...]`` comparing defaults with the published setup."""
    cfg = TrainConfig()
    cw, aw = cfg.cse_weights, cfg.acse_weights
    rows = [
        ("lambda", (0.6, 0.4, 1.4), (cw.lambda1, cw.lambda2, cw.lambda3)),
        ("alpha", (1.0, 8.0, 8.0, 0.5, 0.5), (aw.alpha1, aw.alpha2, aw.alpha3, aw.alpha4, aw.alpha5)),
        ("learning_rate", 2e-7, cfg.learning_rate),
        ("momentum", 0.5, cfg.momentum),
    ]
    for role, dims in (("F", (87, 29)), ("G", (29, 87))):
        spec = cfg.mapping_spec(role)
        rows.append((f"{role} dims", dims, (spec.input_dim, spec.output_dim)))
        rows.append((f"{role} lstm", (2, 512, 256), (spec.layers, spec.hidden, spec.proj)))
    for role, dim in (("D_U", 87), ("D_V", 29)):
        spec = cfg.disc_spec(role)
        shapes = spec.shapes()
        rows.append((f"{role} layout", (dim, 2, 512, 1),
                     (spec.input_dim, spec.layers, spec.hidden, shapes["out.w"][0])))
    return rows


def _role_seed(seed, role):
    return int(np.random.SeedSequence((seed, ROLES.index(role))).generate_state(1)[0])


def build_networks(cfg: TrainConfig):
    """Freshly initialized networks needed by ``cfg.regime``."""
    nets = {"F": MappingNetwork(cfg.mapping_spec("F"), seed=_role_seed(cfg.seed, "F"))}
    if cfg.regime != "baseline":
        nets["G"] = MappingNetwork(cfg.mapping_spec("G"), seed=_role_seed(cfg.seed, "G"))
    if cfg.regime == "acse":
        for role in ("D_U", "D_V"):
            nets[role] = Discriminator(cfg.disc_spec(role), seed=_role_seed(cfg.seed, role))
    return nets


@dataclass
class TrainState:
    config: TrainConfig
    nets: dict
    opt: OptimizerState
    rng: np.random.Generator
    epoch: int = 0
    noisy_stats: NormStats | None = None
    clean_stats: NormStats | None = None

    @classmethod
    def fresh(cls, cfg: TrainConfig, nets=None):
        nets = build_networks(cfg) if nets is None else dict(nets)
        opt = OptimizerState(cfg.learning_rate, cfg.momentum)
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 99)))
        return cls(cfg, nets, opt, rng)

    @property
    def finished(self):
        return self.epoch >= self.config.total_epochs


@dataclass
class History:
    """Per-epoch summaries and per-step loss records of a run."""

    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)


# --------------------------------------------------------------------------
# data preparation
# --------------------------------------------------------------------------

def _seqs(data):
    return [s if isinstance(s, FeatureSequence) else FeatureSequence(np.asarray(s, dtype=np.float64)) for s in data]


def _parallel(corpus):
    if hasattr(corpus, "load_pairs"):
        corpus = corpus.load_pairs()
    pairs = [(_seqs([x])[0], _seqs([y])[0]) for x, y in corpus]
    if not pairs:
        raise DataError("training corpus is empty")
    for i, (x, y) in enumerate(pairs):
        if x.dim != N_AUGMENTED or y.dim != N_STATIC:
            raise DimensionError(f"pair {i}: expected 87-dim noisy and 29-dim clean features")
        if x.n_frames != y.n_frames:
            raise DataError(f"pair {i}: {x.n_frames} noisy vs {y.n_frames} clean frames")
    return pairs


def _ensure_stats(state, noisy, clean):
    if state.noisy_stats is None:
        state.noisy_stats = compute_global_stats(noisy)
    if state.clean_stats is None:
        state.clean_stats = compute_global_stats(clean)


def _renorm_static(U_norm, state):
    """Static columns of normalized noisy frames, re-expressed in clean-normalized units."""
    ns, cs = state.noisy_stats, state.clean_stats
    raw = U_norm[:, :N_STATIC] * ns.std[:N_STATIC] + ns.mean[:N_STATIC]
    return (raw - cs.mean) / cs.std


def _augment_clean(V_raw, state):
    """Delta-augmented clean frames, normalized like noisy network inputs."""
    return normalize(append_deltas(V_raw).data, state.noisy_stats)


# --------------------------------------------------------------------------
# inference and evaluation
# --------------------------------------------------------------------------

def enhance(F, noisy, clean_stats: NormStats | None) -> FeatureSequence:
    """Map normalized 87-dim noisy features to de-normalized 29-dim features."""
    if clean_stats is None:
        raise StateError("enhancement needs the clean-stream normalization statistics")
    x = np.asarray(getattr(noisy, "data", noisy), dtype=np.float64)
    return FeatureSequence(denormalize(F(x), clean_stats), "static29")


def enhance_raw(state_or_F, noisy_raw, noisy_stats=None, clean_stats=None) -> FeatureSequence:
    """Normalize raw noisy features, then :func:`enhance`."""
    if isinstance(state_or_F, TrainState):
        F = state_or_F.nets["F"]
        noisy_stats, clean_stats = state_or_F.noisy_stats, state_or_F.clean_stats
    else:
        F = state_or_F
    if noisy_stats is None:
        raise StateError("enhancement needs the noisy-stream normalization statistics")
    return enhance(F, normalize(np.asarray(getattr(noisy_raw, "data", noisy_raw)), noisy_stats), clean_stats)


def heldout_mse(state_or_F, pairs, noisy_stats=None, clean_stats=None) -> float:
    """Pooled frame MSE of enhanced vs clean log-mel over raw parallel pairs."""
    pairs = _parallel(pairs)
    err = 0.0
    frames = 0
    for x, y in pairs:
        d = enhance_raw(state_or_F, x, noisy_stats, clean_stats).data - y.data
        err += float(np.sum(d * d))
        frames += y.n_frames
    return err / frames


def passthrough_mse(pairs) -> float:
    pairs = _parallel(pairs)
    err = sum(float(np.sum((x.data[:, :N_STATIC] - y.data) ** 2)) for x, y in pairs)
    return err / sum(y.n_frames for _, y in pairs)


# --------------------------------------------------------------------------
# logging
# --------------------------------------------------------------------------

def format_log_line(epoch, stage, values) -> str:
    return "\t".join([str(epoch), stage] + [f"{k}={float(v)!r}" for k, v in values.items()])


def parse_log_line(line):
    parts = line.rstrip("\n").split("\t")
    if len(parts) < 2:
        raise FormatError(f"malformed training log line: {line!r}")
    values = {}
    for p in parts[2:]:
        k, _, v = p.partition("=")
        values[k] = float(v)
    return int(parts[0]), parts[1], values


def read_log(path):
    with open(path) as fh:
        return [parse_log_line(line) for line in fh if line.strip()]


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

def _bundle(value, grads):
    b = L.LossBundle()
    b.losses = {"total": value}
    for role, g in grads.items():
        b.add_grads(role, g)
    return b.check_finite()


def _step(state, bundle, roles):
    for role in roles:
        sgd_step(state.nets[role].params, bundle.grads[role], state.opt, role, state.config.clip)


def _parallel_epoch(state, stage, data, order, history):
    F, G = state.nets["F"], state.nets.get("G")
    w = state.config.cse_weights
    sums = {}
    for i in order:
        X, Y = data[i]
        if stage == "nc":
            v, g = L.loss_nc(F, X, Y)
            b = _bundle(v, g)
            b.losses = {"nc": v, "total": v}
            roles = ("F",)
        elif stage == "cn":
            v, g = L.loss_cn(G, Y, X)
            b = _bundle(v, g)
            b.losses = {"cn": v, "total": v}
            roles = ("G",)
        elif stage == "forward":
            b = L.forward_cycle_total(F, G, X, Y, w)
            roles = ("F", "G")
        else:
            b = L.cse_total(F, G, X, Y, w)
            roles = ("F", "G")
        _step(state, b, roles)
        history.steps.append((state.epoch, stage, dict(b.losses)))
        for k, v in b.losses.items():
            sums[k] = sums.get(k, 0.0) + v
    return {k: v / len(order) for k, v in sums.items()}


def _acse_d_step(state, U, V):
    """Discriminator update: ascend both discrimination log-likelihoods."""
    F, G, D_U, D_V = (state.nets[r] for r in ROLES)
    w = state.config.acse_weights
    _, gU, _ = L.discrimination(D_U, U, G(V))
    _, gV, _ = L.discrimination(D_V, V, F(U))
    b = L.LossBundle()
    b.add_grads("D_U", gU, -w.alpha2)
    b.add_grads("D_V", gV, -w.alpha3)
    _step(state, b.check_finite(), ("D_U", "D_V"))


def _acse_epoch(state, stage, U_set, V_set, history):
    rng = state.rng
    F, G = state.nets["F"], state.nets["G"]
    sums = {}
    n = 0
    if stage == "init":
        # self-supervised start: F learns noisy87 -> noisy static29 and G
        # learns clean29 -> clean87, each in its network's own units
        ou, ov = rng.permutation(len(U_set)), rng.permutation(len(V_set))
        for k in range(max(len(ou), len(ov))):
            losses = {}
            if k < len(ou):
                U, U_static, _ = U_set[ou[k]]
                v, g = L.loss_nc(F, U, _renorm_static(U, state) if U_static is None else U_static)
                _step(state, _bundle(v, g), ("F",))
                losses["init_f"] = v
            if k < len(ov):
                V, V_aug = V_set[ov[k]]
                v, g = L.loss_cn(G, V, V_aug)
                _step(state, _bundle(v, g), ("G",))
                losses["init_g"] = v
            history.steps.append((state.epoch, stage, losses))
            for key, v in losses.items():
                sums[key] = sums.get(key, 0.0) + v
                sums["n_" + key] = sums.get("n_" + key, 0) + 1
        return {k: sums[k] / sums["n_" + k] for k in ("init_f", "init_g") if k in sums}

    ou, ov = rng.permutation(len(U_set)), rng.permutation(len(V_set))
    w = state.config.acse_weights
    for iu, iv in zip(ou, ov):
        U, U_static, _ = U_set[iu]
        V, V_aug = V_set[iv]
        _acse_d_step(state, U, V)
        b = L.acse_total(F, G, state.nets["D_U"], state.nets["D_V"], U, V, w,
                         U_static=U_static, V_augmented=V_aug)
        _step(state, b, ("F", "G"))
        history.steps.append((state.epoch, stage, dict(b.losses)))
        for k, v in b.losses.items():
            sums[k] = sums.get(k, 0.0) + v
        n += 1
    return {k: v / n for k, v in sums.items()}


def _log_epoch(state, stage, values, history, heldout):
    cfg = state.config
    values = dict(values)
    if heldout is not None and ((state.epoch + 1) % cfg.eval_every == 0 or state.epoch + 1 == cfg.total_epochs):
        values["heldout_mse"] = heldout_mse(state, heldout)
    history.epochs.append({"epoch": state.epoch, "stage": stage, **values})
    line = format_log_line(state.epoch, stage, values)
    log.info(line.replace("\t", "  "))
    if cfg.log_path is not None:
        with open(cfg.log_path, "a") as fh:
            fh.write(line + "\n")


def run(state: TrainState, train, heldout=None, *, stop_after: int | None = None,
        history: History | None = None, checkpoint_path=None):
    """Run the remaining epochs of ``state``'s schedule (at most ``stop_after``).

    ``train`` is a parallel corpus (pairs or manifest) for the baseline and
    CSE regimes, and a ``(noisy_set, clean_set)`` tuple for ACSE. Held-out
    data, when given, is a raw parallel corpus used for the per-epoch
    enhancement MSE. With ``checkpoint_path`` the state is saved after every
    epoch.
    """
    cfg = state.config
    history = History() if history is None else history
    if cfg.regime == "acse":
        U_set, V_set = _prepare_unparallel(state, *train)
    else:
        pairs = _parallel(train)
        _ensure_stats(state, [x for x, _ in pairs], [y for _, y in pairs])
        data = [(normalize(x.data, state.noisy_stats), normalize(y.data, state.clean_stats)) for x, y in pairs]
    if heldout is not None:
        heldout = _parallel(heldout)

    done = 0
    while not state.finished and (stop_after is None or done < stop_after):
        stage = cfg.stage_of(state.epoch)
        if cfg.regime == "acse":
            values = _acse_epoch(state, stage, U_set, V_set, history)
        else:
            order = state.rng.permutation(len(data))
            values = _parallel_epoch(state, stage, data, order, history)
        _log_epoch(state, stage, values, history, heldout)
        state.epoch += 1
        done += 1
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, state)
    return state, history


def _prepare_unparallel(state, noisy, clean):
    if hasattr(noisy, "load_noisy"):
        noisy = noisy.load_noisy()
    if hasattr(clean, "load_clean"):
        clean = clean.load_clean()
    noisy, clean = _seqs(noisy), _seqs(clean)
    if not noisy or not clean:
        raise DataError("ACSE needs a non-empty noisy set and a non-empty clean set")
    if any(u.dim != N_AUGMENTED for u in noisy) or any(v.dim != N_STATIC for v in clean):
        raise DimensionError("ACSE expects 87-dim noisy and 29-dim clean features")
    _ensure_stats(state, noisy, clean)
    U_set = []
    for u in noisy:
        U = normalize(u.data, state.noisy_stats)
        U_set.append((U, _renorm_static(U, state), None))
    V_set = [(normalize(v.data, state.clean_stats), _augment_clean(v.data, state)) for v in clean]
    return U_set, V_set


def _start(cfg, nets, regime):
    if cfg.regime != regime:
        cfg = dataclasses.replace(cfg, regime=regime)
    return TrainState.fresh(cfg, nets)


def train_baseline(F, corpus, cfg: TrainConfig = TrainConfig(regime="baseline"), heldout=None):
    """Feature-mapping baseline: ``F`` alone on L_NC. Returns ``(state, history)``."""
    nets = None if F is None else {"F": F}
    return run(_start(cfg, nets, "baseline"), corpus, heldout)


def train_cse(F, G, corpus, cfg: TrainConfig = TrainConfig(), heldout=None):
    """Staged CSE on parallel data (``cse_forward`` stops after the forward-cycle stage)."""
    regime = cfg.regime if cfg.regime in ("cse_forward", "cse_full") else "cse_full"
    nets = None if F is None else {"F": F, "G": G}
    return run(_start(cfg, nets, regime), corpus, heldout)


def train_acse(F, G, D_U, D_V, noisy_set, clean_set, cfg: TrainConfig = TrainConfig(regime="acse"),
               heldout=None):
    """Initialization then joint adversarial training on unparalleled sets."""
    nets = None if F is None else {"F": F, "G": G, "D_U": D_U, "D_V": D_V}
    return run(_start(cfg, nets, "acse"), (noisy_set, clean_set), heldout)


# --------------------------------------------------------------------------
# CKP1 checkpoints
# --------------------------------------------------------------------------

CKP_MAGIC = b"CKP1"
CKP_VERSION = 1
_HEAD = struct.Struct("<4sII")
_KIND_TENSOR = 0
_KIND_JSON = 1


@dataclass
class Checkpoint:
    """Serializable snapshot: named tensors plus one JSON metadata record."""

    tensors: dict
    meta: dict
    version: int = CKP_VERSION


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    out = [_HEAD.pack(CKP_MAGIC, ckpt.version, len(ckpt.tensors) + 1)]

    def name_bytes(name):
        b = name.encode("utf-8")
        return struct.pack("<H", len(b)) + b

    blob = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out.append(name_bytes("meta") + struct.pack("<BI", _KIND_JSON, len(blob)) + blob)
    for name, arr in ckpt.tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        out.append(name_bytes(name) + struct.pack("<BB", _KIND_TENSOR, arr.ndim)
                   + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes())
    return b"".join(out)


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < _HEAD.size:
        raise FormatError("checkpoint is truncated")
    magic, version, n = _HEAD.unpack_from(blob, 0)
    if magic != CKP_MAGIC:
        raise FormatError(f"not a CKP1 checkpoint (magic {magic!r})")
    if version != CKP_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos = _HEAD.size
    tensors, meta = {}, None
    try:
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + ln].decode("utf-8")
            pos += ln
            (kind,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            if kind == _KIND_JSON:
                (size,) = struct.unpack_from("<I", blob, pos)
                pos += 4
                meta = json.loads(blob[pos:pos + size].decode("utf-8"))
                pos += size
            elif kind == _KIND_TENSOR:
                (rank,) = struct.unpack_from("<B", blob, pos)
                pos += 1
                shape = struct.unpack_from(f"<{rank}I", blob, pos)
                pos += 4 * rank
                count = int(np.prod(shape, dtype=np.int64))
                if pos + 8 * count > len(blob):
                    raise FormatError(f"tensor {name} is truncated")
                tensors[name] = np.frombuffer(blob, "<f8", count, pos).astype(np.float64).reshape(shape)
                pos += 8 * count
            else:
                raise FormatError(f"unknown record kind {kind}")
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint: {exc}") from None
    if pos != len(blob):
        raise FormatError("trailing bytes after the last checkpoint record")
    if meta is None:
        raise FormatError("checkpoint has no metadata record")
    return Checkpoint(tensors, meta, version)


def state_to_checkpoint(state: TrainState) -> Checkpoint:
    tensors = {}
    for role in ROLES:
        if role in state.nets:
            for k, v in state.nets[role].params.items():
                tensors[f"net/{role}/{k}"] = v
    for role in ROLES:
        for k, v in state.opt.velocity.get(role, {}).items():
            tensors[f"opt/{role}/{k}"] = v
    for which in ("noisy", "clean"):
        st = getattr(state, f"{which}_stats")
        if st is not None:
            tensors[f"stats/{which}/mean"] = st.mean
            tensors[f"stats/{which}/std"] = st.std
    meta = {
        "config": state.config.to_dict(),
        "epoch": state.epoch,
        "learning_rate": state.opt.learning_rate,
        "momentum": state.opt.momentum,
        "rng": state.rng.bit_generator.state,
        "roles": [r for r in ROLES if r in state.nets],
        "specs": {r: dataclasses.asdict(state.nets[r].spec) for r in ROLES if r in state.nets},
    }
    return Checkpoint(tensors, meta)


def state_from_checkpoint(ckpt: Checkpoint) -> TrainState:
    m = ckpt.meta
    cfg = TrainConfig.from_dict(m["config"])
    nets = {}
    for role in m["roles"]:
        params = {k[len(f"net/{role}/"):]: v.copy() for k, v in ckpt.tensors.items()
                  if k.startswith(f"net/{role}/")}
        if role in ("F", "G"):
            nets[role] = MappingNetwork(MappingSpec(**m["specs"][role]), params)
        else:
            nets[role] = Discriminator(DiscriminatorSpec(**m["specs"][role]), params)
    velocity = {}
    for k, v in ckpt.tensors.items():
        if k.startswith("opt/"):
            _, role, name = k.split("/", 2)
            velocity.setdefault(role, {})[name] = v.copy()
    opt = OptimizerState(m["learning_rate"], m["momentum"], velocity)
    rng = np.random.default_rng()
    rng.bit_generator.state = m["rng"]

    def stats(which):
        if f"stats/{which}/mean" not in ckpt.tensors:
            return None
        return NormStats(ckpt.tensors[f"stats/{which}/mean"].copy(), ckpt.tensors[f"stats/{which}/std"].copy())

    return TrainState(cfg, nets, opt, rng, m["epoch"], stats("noisy"), stats("clean"))


def save_checkpoint(path, state_or_ckpt) -> None:
    ckpt = state_or_ckpt if isinstance(state_or_ckpt, Checkpoint) else state_to_checkpoint(state_or_ckpt)
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def load_state(path) -> TrainState:
    return state_from_checkpoint(load_checkpoint(path))


# --------------------------------------------------------------------------
# probe discriminator (adversarial-effect measurement)
# --------------------------------------------------------------------------

def probe_accuracy(real_train, fake_train, real_test, fake_test, *, hidden=64, layers=2,
                   epochs=10, learning_rate=1e-3, momentum=0.5, seed=0) -> float:
    """Accuracy of a freshly trained frame discriminator on held-out frames.

    Each argument is a list of T x D frame matrices. The probe is trained
    by per-utterance SGD ascending the discrimination log-likelihood on the
    ``*_train`` lists and scored (threshold 0.5, classes weighted equally)
    on the ``*_test`` lists. Lower accuracy means the fake frames are
    harder to tell apart from the real ones.
    """
    if not (real_train and fake_train and real_test and fake_test):
        raise DataError("probe needs frames on every side")
    dim = np.asarray(real_train[0]).shape[1]
    D = Discriminator(DiscriminatorSpec(dim, hidden=hidden, layers=layers), seed=seed)
    opt = OptimizerState(learning_rate, momentum)
    rng = np.random.default_rng(seed)
    n = max(len(real_train), len(fake_train))
    for _ in range(epochs):
        ir, jf = rng.permutation(n) % len(real_train), rng.permutation(n) % len(fake_train)
        for i, j in zip(ir, jf):
            _, g, _ = L.discrimination(D, real_train[i], fake_train[j])
            sgd_step(D.params, {k: -v for k, v in g.items()}, opt, "probe")
    hit_real = np.mean(np.concatenate([D(x) > 0.5 for x in real_test]))
    hit_fake = np.mean(np.concatenate([D(x) <= 0.5 for x in fake_test]))
    return float(0.5 * (hit_real + hit_fake))
